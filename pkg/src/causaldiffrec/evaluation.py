"""Ranking metrics, IID-vs-OOD degradation summaries, and embedding export."""

import math
from dataclasses import dataclass, field

import numpy as np
import torch

from .data import SplitBundle
from .recommender import recommend_topk


def recall_at_k(ranked, relevant: set, k: int) -> float:
    """|top-k hits| / |relevant|."""
    if not relevant:
        raise ValueError("relevant set must be nonempty")
    hits = sum(1 for item in list(ranked)[:k] if item in relevant)
    return hits / len(relevant)


def ndcg_at_k(ranked, relevant: set, k: int) -> float:
    """Binary-relevance NDCG with gain 1/log2(rank+1)."""
    if not relevant:
        raise ValueError("relevant set must be nonempty")
    dcg = sum(1.0 / math.log2(rank + 1)
              for rank, item in enumerate(list(ranked)[:k], start=1)
              if item in relevant)
    idcg = sum(1.0 / math.log2(rank + 1)
               for rank in range(1, min(k, len(relevant)) + 1))
    return dcg / idcg


@dataclass
class RankingReport:
    split_label: str
    ks: tuple
    per_user: dict = field(default_factory=dict)   # metric name -> np.ndarray
    users: np.ndarray | None = None
    meta: dict = field(default_factory=dict)

    def aggregate(self, metric: str, k: int) -> float:
        return float(self.per_user[f"{metric}@{k}"].mean())

    def metrics(self) -> dict[str, float]:
        return {name: float(vals.mean()) for name, vals in self.per_user.items()}

    def render(self) -> str:
        lines = [f"split={self.split_label}"]
        for key in sorted(self.meta):
            lines.append(f"{key}={self.meta[key]}")
        lines.append(f"users_evaluated={len(self.users)}")
        for name in sorted(self.per_user):
            lines.append(f"{name}={self.per_user[name].mean():.17g}")
        return "\n".join(lines) + "\n"


def evaluate(final: torch.Tensor, bundle: SplitBundle,
             ks=(10, 20), meta: dict | None = None) -> RankingReport:
    """Full-catalog ranking of every test user with train items excluded."""
    num_users = bundle.train.num_users
    test_users = np.unique(bundle.test.users)
    if len(test_users) == 0:
        raise ValueError("no test users to evaluate")
    train_items = bundle.train.items_by_user()
    test_items = bundle.test.items_by_user()
    k_max = max(ks)
    names = [f"{m}@{k}" for m in ("recall", "ndcg") for k in ks]
    per_user = {name: np.zeros(len(test_users)) for name in names}
    for row, user in enumerate(test_users):
        relevant = set(test_items[user].tolist())
        ranked = recommend_topk(final, int(user), k_max, train_items[user],
                                num_users)
        for k in ks:
            per_user[f"recall@{k}"][row] = recall_at_k(ranked, relevant, k)
            per_user[f"ndcg@{k}"][row] = ndcg_at_k(ranked, relevant, k)
    return RankingReport(bundle.shift_kind, tuple(ks), per_user, test_users,
                         dict(meta or {}))


def compare_iid_ood(report_iid: RankingReport,
                    report_ood: RankingReport) -> dict:
    """Relative per-metric drop (iid - ood) / iid, plus the average drop.

    Metrics with a zero IID value have no defined drop and are reported as
    None (excluded from the average).
    """
    if report_iid.ks != report_ood.ks:
        raise ValueError("reports use different k lists")
    iid, ood = report_iid.metrics(), report_ood.metrics()
    drops = {}
    for name in iid:
        drops[name] = None if iid[name] == 0 else (iid[name] - ood[name]) / iid[name]
    defined = [v for v in drops.values() if v is not None]
    drops["average"] = sum(defined) / len(defined) if defined else None
    return drops


def render_comparison(drops: dict) -> str:
    lines = []
    for name in sorted(drops):
        val = drops[name]
        lines.append(f"drop_{name}=" + ("undefined" if val is None
                                        else f"{val:.17g}"))
    return "\n".join(lines) + "\n"


def popularity_tags(item_counts: np.ndarray) -> list[str]:
    """Top popularity decile -> 'popular', bottom decile -> 'unpopular', else 'mid'."""
    n = len(item_counts)
    n_decile = max(1, n // 10)
    # most popular first; ties break by ascending item index
    order = np.lexsort((np.arange(n), -item_counts))
    tags = ["mid"] * n
    for item in order[:n_decile]:
        tags[item] = "popular"
    for item in order[n - n_decile:]:
        if tags[item] == "mid":
            tags[item] = "unpopular"
    return tags


def export_embeddings(item_embeddings, item_counts: np.ndarray, path) -> None:
    """Write `item_id<TAB>tag<TAB>dim0...` rows at full float64 precision."""
    emb = np.asarray(item_embeddings, dtype=np.float64)
    if emb.shape[0] != len(item_counts):
        raise ValueError("embedding rows must match item count")
    tags = popularity_tags(np.asarray(item_counts))
    with open(path, "w", encoding="utf-8") as fh:
        for item, (tag, row) in enumerate(zip(tags, emb)):
            dims = "\t".join(f"{v:.17g}" for v in row)
            fh.write(f"{item}\t{tag}\t{dims}\n")


def import_embeddings(path) -> tuple[np.ndarray, list[str]]:
    """Read an export back; returns (embeddings, tags)."""
    rows, tags = [], []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            parts = line.rstrip("\n").split("\t")
            tags.append(parts[1])
            rows.append([float(v) for v in parts[2:]])
    return np.asarray(rows, dtype=np.float64), tags
