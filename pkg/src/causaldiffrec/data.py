"""Implicit-feedback interaction tables, OOD split construction, negative sampling.

All tables use dense 0-based user/item indices. Loading remaps arbitrary
string ids to dense indices in first-appearance order and keeps the mapping
so splits can be written back out and reloaded consistently.
"""

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.stats import chi2

from .seeding import numpy_rng

logger = logging.getLogger(__name__)

SHIFT_KINDS = ("temporal", "exposure", "popularity", "random_iid")


class ParseError(ValueError):
    """Malformed input row; carries the 1-based line number."""

    def __init__(self, line_no: int, message: str):
        super().__init__(f"line {line_no}: {message}")
        self.line_no = line_no


@dataclass(frozen=True)
class InteractionRecord:
    user_id: int
    item_id: int
    timestamp: int = 0
    weight: float = 1.0


class InteractionTable:
    """Ordered implicit-feedback records over a declared (num_users, num_items) universe."""

    def __init__(self, users, items, timestamps=None, weights=None,
                 num_users=None, num_items=None,
                 user_labels=None, item_labels=None):
        self.users = np.asarray(users, dtype=np.int64)
        self.items = np.asarray(items, dtype=np.int64)
        n = len(self.users)
        if len(self.items) != n:
            raise ValueError("users and items must have equal length")
        self.timestamps = (np.zeros(n, dtype=np.int64) if timestamps is None
                           else np.asarray(timestamps, dtype=np.int64))
        self.weights = (np.ones(n, dtype=np.float64) if weights is None
                        else np.asarray(weights, dtype=np.float64))
        if len(self.timestamps) != n or len(self.weights) != n:
            raise ValueError("timestamps/weights length mismatch")
        self.num_users = int(num_users) if num_users is not None else (
            int(self.users.max()) + 1 if n else 0)
        self.num_items = int(num_items) if num_items is not None else (
            int(self.items.max()) + 1 if n else 0)
        if n:
            if self.users.min() < 0 or self.users.max() >= self.num_users:
                raise ValueError("user index out of declared range")
            if self.items.min() < 0 or self.items.max() >= self.num_items:
                raise ValueError("item index out of declared range")
            if self.timestamps.min() < 0:
                raise ValueError("negative timestamp")
            if self.weights.min() < 0:
                raise ValueError("negative weight")
        self.user_labels = user_labels
        self.item_labels = item_labels
        self._items_by_user = None

    def __len__(self) -> int:
        return len(self.users)

    @property
    def n_interactions(self) -> int:
        return len(self.users)

    def records(self) -> list[InteractionRecord]:
        return [InteractionRecord(int(u), int(i), int(t), float(w))
                for u, i, t, w in zip(self.users, self.items, self.timestamps, self.weights)]

    def subset(self, idx) -> "InteractionTable":
        idx = np.asarray(idx, dtype=np.int64)
        return InteractionTable(self.users[idx], self.items[idx],
                                self.timestamps[idx], self.weights[idx],
                                self.num_users, self.num_items,
                                self.user_labels, self.item_labels)

    def items_by_user(self) -> list[np.ndarray]:
        """Unique interacted items per user (cached)."""
        if self._items_by_user is None:
            per_user = [[] for _ in range(self.num_users)]
            for u, i in zip(self.users, self.items):
                per_user[u].append(i)
            self._items_by_user = [np.unique(np.asarray(lst, dtype=np.int64))
                                   for lst in per_user]
        return self._items_by_user

    def item_counts(self) -> np.ndarray:
        return np.bincount(self.items, minlength=self.num_items)

    def user_counts(self) -> np.ndarray:
        return np.bincount(self.users, minlength=self.num_users)

    def pair_set(self) -> set[tuple[int, int]]:
        return set(zip(self.users.tolist(), self.items.tolist()))

    def dedup(self) -> "InteractionTable":
        """Collapse duplicate (user, item) pairs, keeping the earliest timestamp."""
        if not len(self):
            return self
        order = np.lexsort((self.timestamps, self.items, self.users))
        u, i = self.users[order], self.items[order]
        first = np.ones(len(u), dtype=bool)
        first[1:] = (u[1:] != u[:-1]) | (i[1:] != i[:-1])
        return self.subset(order[first])


@dataclass
class UniformityAudit:
    """Chi-square audit of a popularity split's test item histogram."""

    statistic: float
    threshold: float
    passed: bool
    n_test_items: int
    test_size: int
    target_size: int
    trail: list[float] = field(default_factory=list)

    def render(self) -> str:
        lines = [
            f"test_size={self.test_size}",
            f"target_size={self.target_size}",
            f"items_in_test={self.n_test_items}",
            f"chi_square={self.statistic:.6g}",
            f"chi_square_threshold={self.threshold:.6g}",
            f"uniform={'yes' if self.passed else 'NO'}",
            "trail=" + ",".join(f"{s:.6g}" for s in self.trail),
        ]
        return "\n".join(lines)


@dataclass
class SplitBundle:
    train: InteractionTable
    valid: InteractionTable
    test: InteractionTable
    shift_kind: str
    audit: UniformityAudit | None = None

    def __post_init__(self):
        if self.shift_kind not in SHIFT_KINDS:
            raise ValueError(f"unknown shift kind {self.shift_kind!r}; "
                             f"expected one of {SHIFT_KINDS}")

    def validate(self) -> None:
        """Raise unless train and test are disjoint and every test user has train history."""
        train_pairs = self.train.pair_set()
        for u, i in zip(self.test.users, self.test.items):
            if (int(u), int(i)) in train_pairs:
                raise ValueError(f"pair ({u},{i}) appears in both train and test")
        train_users = set(self.train.users.tolist())
        missing = set(self.test.users.tolist()) - train_users
        if missing:
            raise ValueError(f"{len(missing)} test users have no train history")


def _parse_columns(spec: str) -> list[str]:
    cols = [c.strip() for c in spec.split(",")]
    allowed = {"user", "item", "timestamp", "weight", "-"}
    for c in cols:
        if c not in allowed:
            raise ValueError(f"unknown column name {c!r} in column spec")
    if "user" not in cols or "item" not in cols:
        raise ValueError("column spec must name both 'user' and 'item'")
    return cols


def load_interactions(path, columns: str = "user,item,timestamp",
                      delimiter: str | None = None,
                      user_map: dict | None = None,
                      item_map: dict | None = None) -> InteractionTable:
    """Parse a delimited interaction file into a dense-index table.

    Lines starting with '#' and blank lines are skipped. Duplicate
    (user, item) pairs collapse to the earliest-timestamp record. Pass
    existing user/item maps to share an id universe across files; new
    labels extend the maps in first-appearance order.
    """
    cols = _parse_columns(columns)
    user_map = {} if user_map is None else dict(user_map)
    item_map = {} if item_map is None else dict(item_map)
    users, items, tss, ws = [], [], [], []
    with open(path, encoding="utf-8") as fh:
        for line_no, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split(delimiter)
            if len(parts) < len(cols):
                raise ParseError(line_no, f"expected {len(cols)} columns, got {len(parts)}")
            row = dict(zip(cols, parts))
            try:
                ts = int(float(row["timestamp"])) if "timestamp" in row else 0
                w = float(row["weight"]) if "weight" in row else 1.0
            except ValueError as exc:
                raise ParseError(line_no, str(exc)) from None
            if ts < 0:
                raise ParseError(line_no, f"negative timestamp {ts}")
            if w < 0:
                raise ParseError(line_no, f"negative weight {w}")
            u_label, i_label = row["user"], row["item"]
            users.append(user_map.setdefault(u_label, len(user_map)))
            items.append(item_map.setdefault(i_label, len(item_map)))
            tss.append(ts)
            ws.append(w)
    if not users:
        raise ValueError(f"no interactions in {path}")
    user_labels = [None] * len(user_map)
    for label, idx in user_map.items():
        user_labels[idx] = label
    item_labels = [None] * len(item_map)
    for label, idx in item_map.items():
        item_labels[idx] = label
    table = InteractionTable(users, items, tss, ws,
                             num_users=len(user_map), num_items=len(item_map),
                             user_labels=user_labels, item_labels=item_labels)
    return table.dedup()


def save_interactions(table: InteractionTable, path, header: dict | None = None) -> None:
    """Write dense-index rows `user item timestamp weight`, tab separated."""
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(f"# num_users={table.num_users} num_items={table.num_items}\n")
        for key, val in (header or {}).items():
            fh.write(f"# {key}={val}\n")
        for u, i, t, w in zip(table.users, table.items, table.timestamps, table.weights):
            fh.write(f"{u}\t{i}\t{t}\t{w:.17g}\n")


def load_split_file(path) -> InteractionTable:
    """Reload a file written by :func:`save_interactions` (dense ids + header).

    Unlike raw loading, an empty body is legal here: a split may place no
    interactions in, say, validation.
    """
    num_users = num_items = None
    has_rows = False
    with open(path, encoding="utf-8") as fh:
        for raw in fh:
            if raw.startswith("# num_users="):
                fields = dict(tok.split("=") for tok in raw[2:].split())
                num_users, num_items = int(fields["num_users"]), int(fields["num_items"])
            elif raw.strip() and not raw.startswith("#"):
                has_rows = True
    if not has_rows:
        if num_users is None:
            raise ValueError(f"no interactions in {path}")
        return InteractionTable([], [], num_users=num_users, num_items=num_items)
    table = load_interactions(path, columns="user,item,timestamp,weight", delimiter="\t")
    if num_users is None:
        return table
    return InteractionTable(
        np.array([int(table.user_labels[u]) for u in table.users]),
        np.array([int(table.item_labels[i]) for i in table.items]),
        table.timestamps, table.weights, num_users, num_items)


def write_id_map(table: InteractionTable, path) -> None:
    """Persist original_id -> node index (users first, then items offset by num_users)."""
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(f"# num_users={table.num_users} num_items={table.num_items}\n")
        for idx, label in enumerate(table.user_labels or range(table.num_users)):
            fh.write(f"{label}\t{idx}\n")
        for idx, label in enumerate(table.item_labels or range(table.num_items)):
            fh.write(f"{label}\t{table.num_users + idx}\n")


def read_id_map(path) -> tuple[dict, dict]:
    """Inverse of :func:`write_id_map`: returns (user_map, item_map) label -> dense index."""
    num_users = None
    user_map, item_map = {}, {}
    with open(path, encoding="utf-8") as fh:
        for raw in fh:
            line = raw.strip()
            if not line:
                continue
            if line.startswith("#"):
                fields = dict(tok.split("=") for tok in line[1:].split())
                num_users = int(fields["num_users"])
                continue
            label, node = line.rsplit("\t", 1)
            node = int(node)
            if num_users is None:
                raise ValueError(f"id map {path} missing num_users header")
            if node < num_users:
                user_map[label] = node
            else:
                item_map[label] = node - num_users
    return user_map, item_map


def _round_half_up(x: float) -> int:
    return int(np.floor(x + 0.5))


def temporal_split(table: InteractionTable, train_frac: float = 0.6,
                   test_frac: float = 0.2) -> SplitBundle:
    """Per-user chronological split: earliest train_frac -> train, latest test_frac -> test.

    Ties in timestamp break by ascending item index. Users with fewer than
    3 interactions are dropped (logged once with the total count).
    """
    if train_frac <= 0 or test_frac < 0 or train_frac + test_frac > 1:
        raise ValueError("need train_frac > 0, test_frac >= 0, sum <= 1")
    train_idx, valid_idx, test_idx = [], [], []
    dropped = 0
    order = np.lexsort((table.items, table.timestamps, table.users))
    users_sorted = table.users[order]
    boundaries = np.flatnonzero(np.diff(users_sorted)) + 1
    for group in np.split(order, boundaries):
        n = len(group)
        if n < 3:
            dropped += 1
            continue
        n_train = _round_half_up(train_frac * n)
        n_test = min(_round_half_up(test_frac * n), n - n_train)
        train_idx.extend(group[:n_train])
        valid_idx.extend(group[n_train:n - n_test])
        test_idx.extend(group[n - n_test:])
    if dropped:
        logger.info("temporal_split dropped %d users with < 3 interactions", dropped)
    if not train_idx:
        raise ValueError("temporal split produced an empty train set")
    return SplitBundle(table.subset(train_idx), table.subset(valid_idx),
                       table.subset(test_idx), "temporal")


def _protected_indices(table: InteractionTable) -> np.ndarray:
    """One interaction per user (earliest, item tiebreak) that must stay in train."""
    order = np.lexsort((table.items, table.timestamps, table.users))
    users_sorted = table.users[order]
    first = np.ones(len(order), dtype=bool)
    first[1:] = users_sorted[1:] != users_sorted[:-1]
    return order[first]


def _uniformity_statistic(counts: np.ndarray) -> tuple[float, int]:
    present = counts[counts > 0]
    if len(present) == 0:
        return 0.0, 0
    mu = present.sum() / len(present)
    return float(((present - mu) ** 2 / mu).sum()), len(present)


def _uniformity_threshold(n_items_present: int, test_size: int,
                          significance: float,
                          max_deviation: float = 0.2) -> float:
    """Stricter of the chi-square consistency quantile and the all-items
    worst case where every count sits max_deviation away from the mean."""
    dof = max(n_items_present - 1, 1)
    quantile = float(chi2.ppf(1.0 - significance, dof))
    deviation_bound = max_deviation ** 2 * max(test_size, 1)
    return min(quantile, deviation_bound)


def popularity_uniform_split(table: InteractionTable, test_frac: float = 0.2,
                             seed: int = 0, significance: float = 0.01,
                             max_iters: int = 25,
                             exclusion_factor: float = 1.0 / 1.2,
                             valid_frac: float = 0.1) -> SplitBundle:
    """Carve a test set whose item histogram is near-uniform; train keeps the long tail.

    Starts from an inverse-popularity weighted sample and rebalances item
    counts toward a water-filling level, excluding items too rare to reach
    a fraction of it (`exclusion_factor`, tightened every pass so the loop
    keeps making progress). Re-audits each pass with the chi-square
    statistic against uniform (pass when below the `1 - significance`
    quantile); only improving passes are kept, so the recorded trail is
    non-increasing. Deterministic under `seed`.
    """
    n_total = len(table)
    if n_total == 0:
        raise ValueError("empty interaction table")
    rng = numpy_rng(seed, "popularity_split")
    target = _round_half_up(test_frac * n_total)

    if target == 0:
        audit = UniformityAudit(0.0, _uniformity_threshold(0, 0, significance),
                                True, 0, 0, 0, trail=[0.0])
        empty = table.subset(np.array([], dtype=np.int64))
        train, valid = _carve_validation(table, np.arange(n_total), valid_frac, seed)
        return SplitBundle(train, valid, empty, "popularity", audit)

    pop = table.item_counts().astype(np.float64)
    user_count = table.user_counts()
    in_test = np.zeros(n_total, dtype=bool)
    # a user's last remaining train interaction is never eligible for test
    protected = np.zeros(n_total, dtype=bool)
    protected[_protected_indices(table)] = True
    eligible = ~protected

    weights = 1.0 / pop[table.items]
    weights[~eligible] = 0.0
    take = min(target, int(eligible.sum()))
    chosen = rng.choice(n_total, size=take, replace=False,
                        p=weights / weights.sum())
    in_test[chosen] = True

    def stat_of(mask):
        counts = np.bincount(table.items[mask], minlength=table.num_items)
        return _uniformity_statistic(counts)

    best_stat, best_j = stat_of(in_test)
    best_mask = in_test.copy()
    trail = [best_stat]
    threshold = _uniformity_threshold(best_j, int(in_test.sum()), significance)

    avail_per_item = np.bincount(table.items[eligible], minlength=table.num_items)
    stalled = 0
    for iteration in range(max_iters):
        if best_stat <= threshold:
            break
        factor = 1.0 - (1.0 - exclusion_factor) * (0.7 ** iteration)
        mask = best_mask.copy()
        counts = np.bincount(table.items[mask], minlength=table.num_items)
        targets = _water_fill_targets(avail_per_item, target, factor)
        # release excess first so freed budget can refill deficits
        for item in np.flatnonzero(counts > targets):
            excess = int(counts[item] - targets[item])
            idx = np.flatnonzero(mask & (table.items == item))
            drop = rng.choice(idx, size=excess, replace=False)
            mask[drop] = False
        for item in np.flatnonzero(counts < targets):
            want = int(targets[item] - counts[item])
            idx = np.flatnonzero(~mask & eligible & (table.items == item))
            if len(idx) == 0:
                continue
            add = rng.choice(idx, size=min(want, len(idx)), replace=False)
            mask[add] = True
        stat, j = stat_of(mask)
        if stat < best_stat:
            best_stat, best_j, best_mask = stat, j, mask
            threshold = _uniformity_threshold(j, int(mask.sum()), significance)
            stalled = 0
        else:
            stalled += 1
        trail.append(best_stat)
        if stalled >= 3:
            break

    passed = best_stat <= threshold
    if not passed:
        logger.warning("popularity split non-uniform after rebalancing: "
                       "chi2=%.4g > %.4g", best_stat, threshold)
    audit = UniformityAudit(best_stat, threshold, passed, best_j,
                            int(best_mask.sum()), target, trail=trail)
    rest = np.flatnonzero(~best_mask)
    train, valid = _carve_validation(table, rest, valid_frac, seed)
    bundle = SplitBundle(train, valid, table.subset(np.flatnonzero(best_mask)),
                         "popularity", audit)
    bundle.validate()
    return bundle


def _water_fill_targets(avail: np.ndarray, budget: int,
                        exclusion_factor: float) -> np.ndarray:
    """Per-item test quotas: min(avail, level), dropping items below factor*level."""
    included = avail > 0
    if not included.any():
        return np.zeros_like(avail)
    while True:
        cap = avail[included]
        if cap.sum() <= budget:
            level = float(cap.max()) if len(cap) else 0.0
        else:
            # smallest level with sum(min(cap, level)) >= budget
            lo, hi = 0.0, float(cap.max())
            for _ in range(60):
                mid = (lo + hi) / 2
                if np.minimum(cap, mid).sum() >= budget:
                    hi = mid
                else:
                    lo = mid
            level = hi
        drop = included & (avail < exclusion_factor * level - 1e-9)
        if not drop.any() or drop.sum() == included.sum():
            break
        included &= ~drop
    targets = np.zeros_like(avail)
    targets[included] = np.minimum(avail[included], int(np.ceil(level)))
    # trim integer overshoot from the most-filled items, deterministically
    overshoot = int(targets.sum()) - budget
    if overshoot > 0:
        order = np.argsort((-targets).astype(np.int64), kind="stable")
        for item in order[:overshoot]:
            targets[item] -= 1
    return targets


def _carve_validation(table: InteractionTable, train_pool: np.ndarray,
                      valid_frac: float, seed: int) -> tuple[InteractionTable, InteractionTable]:
    """Split a seeded valid_frac of the pool off as validation, keeping one row per user."""
    if valid_frac <= 0 or len(train_pool) == 0:
        return table.subset(train_pool), table.subset(np.array([], dtype=np.int64))
    rng = numpy_rng(seed, "validation_carve")
    pool_table = table.subset(train_pool)
    protected_local = np.zeros(len(train_pool), dtype=bool)
    protected_local[_protected_indices(pool_table)] = True
    open_local = np.flatnonzero(~protected_local)
    n_valid = min(_round_half_up(valid_frac * len(train_pool)), len(open_local))
    pick = rng.choice(open_local, size=n_valid, replace=False) if n_valid else []
    valid_mask = np.zeros(len(train_pool), dtype=bool)
    valid_mask[np.asarray(pick, dtype=np.int64)] = True
    return (table.subset(train_pool[~valid_mask]),
            table.subset(train_pool[valid_mask]))


def exposure_split(big: InteractionTable, small: InteractionTable,
                   seed: int = 0, valid_frac: float = 0.1) -> SplitBundle:
    """Fully exposed small matrix becomes the OOD test; train is big minus small pairs."""
    if big.num_users != small.num_users or big.num_items != small.num_items:
        raise ValueError("big and small tables must share one id universe "
                         "(load them with a shared id map)")
    if not (set(small.users.tolist()) & set(big.users.tolist())):
        raise ValueError("no overlapping users")
    small_pairs = small.pair_set()
    keep = np.array([(int(u), int(i)) not in small_pairs
                     for u, i in zip(big.users, big.items)])
    if not keep.any():
        raise ValueError("exposure split produced an empty train set "
                         "(small matrix covers all of big)")
    train_users = set(big.users[keep].tolist())
    test_keep = np.array([int(u) in train_users for u in small.users])
    n_drop = int((~test_keep).sum())
    if n_drop:
        logger.info("exposure_split dropped %d test interactions of users "
                    "without train history", n_drop)
    train, valid = _carve_validation(big, np.flatnonzero(keep), valid_frac, seed)
    bundle = SplitBundle(train, valid, small.subset(np.flatnonzero(test_keep)),
                         "exposure")
    bundle.validate()
    return bundle


def random_iid_split(table: InteractionTable, test_frac: float = 0.2,
                     valid_frac: float = 0.1, seed: int = 0) -> SplitBundle:
    """Uniform random split (the IID reference protocol), seeded and user-protected."""
    n_total = len(table)
    if n_total == 0:
        raise ValueError("empty interaction table")
    rng = numpy_rng(seed, "random_iid_split")
    protected = np.zeros(n_total, dtype=bool)
    protected[_protected_indices(table)] = True
    open_idx = np.flatnonzero(~protected)
    n_test = min(_round_half_up(test_frac * n_total), len(open_idx))
    test_pick = rng.choice(open_idx, size=n_test, replace=False) if n_test else []
    test_mask = np.zeros(n_total, dtype=bool)
    test_mask[np.asarray(test_pick, dtype=np.int64)] = True
    train, valid = _carve_validation(table, np.flatnonzero(~test_mask),
                                     valid_frac, seed)
    bundle = SplitBundle(train, valid, table.subset(np.flatnonzero(test_mask)),
                         "random_iid")
    bundle.validate()
    return bundle


def sample_negatives(train: InteractionTable, user: int, count: int,
                     rng: np.random.Generator) -> np.ndarray:
    """Draw `count` distinct items the user never interacted with, uniformly."""
    interacted = train.items_by_user()[user]
    n_items = train.num_items
    n_candidates = n_items - len(interacted)
    if n_candidates == 0:
        raise ValueError("no negatives available")
    if count > n_candidates:
        raise ValueError(f"requested {count} negatives but only "
                         f"{n_candidates} candidates exist")
    if n_candidates <= 4 * count or n_items <= 1024:
        pool = np.setdiff1d(np.arange(n_items, dtype=np.int64), interacted,
                            assume_unique=True)
        return rng.choice(pool, size=count, replace=False)
    # sparse history: rejection sampling stays uniform and avoids the full complement
    taken = set(interacted.tolist())
    out: list[int] = []
    while len(out) < count:
        for cand in rng.integers(0, n_items, size=2 * (count - len(out))):
            cand = int(cand)
            if cand not in taken:
                taken.add(cand)
                out.append(cand)
                if len(out) == count:
                    break
    return np.asarray(out, dtype=np.int64)
