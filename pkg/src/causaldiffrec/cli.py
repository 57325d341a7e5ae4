"""Command-line entry points: prepare, train, eval, gradcheck.

Every artifact file embeds the producing config hash and a digest of the id
universe; eval refuses checkpoint/split universe mismatches unless --force.
All randomness derives from one seed (flag, else CAUSALDIFFREC_SEED, else 0).
"""

import argparse
import hashlib
import logging
import sys
from pathlib import Path

import numpy as np
import torch

from . import data as dat
from . import evaluation as ev
from . import training as tr
from .config import build_train_config, config_hash, parse_config_file
from .graph import BipartiteGraph
from .seeding import resolve_seed

logger = logging.getLogger("causaldiffrec")


def universe_digest(table: dat.InteractionTable) -> str:
    user_part = "\x00".join(str(lab) for lab in
                            (table.user_labels or range(table.num_users)))
    item_part = "\x00".join(str(lab) for lab in
                            (table.item_labels or range(table.num_items)))
    blob = f"{table.num_users}|{table.num_items}|{user_part}|{item_part}"
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


def _load_for_prepare(args) -> dat.InteractionTable:
    table = dat.load_interactions(args.data, args.columns, args.delimiter)
    if args.shift != "exposure":
        return table
    if not args.small:
        raise ValueError("exposure shift needs --small (the fully exposed matrix)")
    user_map = {lab: idx for idx, lab in enumerate(table.user_labels)}
    item_map = {lab: idx for idx, lab in enumerate(table.item_labels)}
    small = dat.load_interactions(args.small, args.columns, args.delimiter,
                                  user_map, item_map)
    # re-declare the big matrix over the union universe
    big = dat.InteractionTable(table.users, table.items, table.timestamps,
                               table.weights, small.num_users, small.num_items,
                               small.user_labels, small.item_labels)
    big._small = small  # carried to the split constructor
    return big


def cmd_prepare(args) -> int:
    seed = resolve_seed(args.seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    table = _load_for_prepare(args)
    if args.shift == "temporal":
        bundle = dat.temporal_split(table, args.train_frac, args.test_frac)
    elif args.shift == "popularity":
        bundle = dat.popularity_uniform_split(table, args.test_frac, seed)
    elif args.shift == "exposure":
        bundle = dat.exposure_split(table, table._small, seed)
    else:
        bundle = dat.random_iid_split(table, args.test_frac, seed=seed)

    params = {"command": "prepare", "shift": args.shift, "seed": seed,
              "train_frac": args.train_frac, "test_frac": args.test_frac,
              "columns": args.columns}
    chash = config_hash(params)
    universe = universe_digest(table)
    header = {"shift": args.shift, "config_hash": chash, "universe": universe}
    for name, split in (("train", bundle.train), ("valid", bundle.valid),
                        ("test", bundle.test)):
        dat.save_interactions(split, out / f"{name}.tsv", header)
    dat.write_id_map(table, out / "id_map.tsv")

    n = max(len(table), 1)
    audit_lines = [
        f"# config_hash={chash}",
        f"# universe={universe}",
        f"shift={args.shift}",
        f"seed={seed}",
        f"interactions={len(table)}",
        f"users={table.num_users}",
        f"items={table.num_items}",
        f"train_count={len(bundle.train)}",
        f"valid_count={len(bundle.valid)}",
        f"test_count={len(bundle.test)}",
        f"train_fraction={len(bundle.train) / n:.6g}",
        f"valid_fraction={len(bundle.valid) / n:.6g}",
        f"test_fraction={len(bundle.test) / n:.6g}",
    ]
    if bundle.audit is not None:
        audit_lines.append(bundle.audit.render())
    (out / "audit.txt").write_text("\n".join(audit_lines) + "\n", encoding="utf-8")
    print(f"prepare: wrote {args.shift} split to {out}")
    return 0


def _read_split_headers(path: Path) -> dict:
    meta = {}
    with open(path, encoding="utf-8") as fh:
        for raw in fh:
            if not raw.startswith("#"):
                break
            for tok in raw[1:].split():
                if "=" in tok:
                    key, val = tok.split("=", 1)
                    meta[key] = val
    return meta


def load_split_dir(splits_dir) -> tuple[dat.SplitBundle, dict]:
    splits_dir = Path(splits_dir)
    tables = {name: dat.load_split_file(splits_dir / f"{name}.tsv")
              for name in ("train", "valid", "test")}
    meta = _read_split_headers(splits_dir / "train.tsv")
    shift = meta.get("shift", "random_iid")
    return dat.SplitBundle(tables["train"], tables["valid"], tables["test"],
                           shift), meta


def cmd_train(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    bundle, split_meta = load_split_dir(args.splits)
    file_values = parse_config_file(args.config) if args.config else {}
    overrides = {}
    for item in args.set or []:
        if "=" not in item:
            raise ValueError(f"--set expects key=value, got {item!r}")
        key, val = item.split("=", 1)
        overrides[key.strip()] = val
    for ablation in args.ablate or []:
        overrides[ablation] = "true"
    if args.epochs is not None:
        overrides["epochs"] = str(args.epochs)
    if args.seed is not None:
        overrides["seed"] = str(args.seed)
    config = build_train_config(file_values, overrides)
    chash = config_hash(config.to_dict())

    result = tr.fit(bundle, config)
    meta = {"config_hash": chash,
            "universe": split_meta.get("universe", ""),
            "shift": bundle.shift_kind}
    tr.save_checkpoint(out / "checkpoint.pt", result, config, meta)

    log_lines = [f"# config_hash={chash}",
                 f"# universe={meta['universe']}",
                 f"# shift={bundle.shift_kind}"]
    for entry in result.history:
        line = f"epoch={entry['epoch']} {entry['loss'].render()}"
        if entry["valid"]:
            line += " " + " ".join(f"valid_{k}={v:.17g}"
                                   for k, v in sorted(entry["valid"].items()))
        log_lines.append(line)
    log_lines.append(f"best_epoch={result.best_epoch}")
    log_lines.append(f"best_metric={result.best_metric:.17g}")
    (out / "train_log.txt").write_text("\n".join(log_lines) + "\n",
                                       encoding="utf-8")
    print(f"train: wrote checkpoint to {out / 'checkpoint.pt'} "
          f"(best epoch {result.best_epoch})")
    return 0


def _evaluate_split(model, config, splits_dir, ckpt_meta, ks, force) -> ev.RankingReport:
    bundle, split_meta = load_split_dir(splits_dir)
    ckpt_universe = ckpt_meta.get("universe", "")
    split_universe = split_meta.get("universe", "")
    if ckpt_universe and split_universe and ckpt_universe != split_universe:
        logger.warning("universe digest mismatch between checkpoint (%s) and "
                       "splits %s (%s)", ckpt_universe, splits_dir, split_universe)
        if not force:
            raise ValueError(f"config-hash mismatch between checkpoint and "
                             f"splits {splits_dir}; rerun with --force to override")
    graph = BipartiteGraph.from_interactions(bundle.train)
    final = tr.inference_embeddings(model, graph, config)
    meta = {"config_hash": ckpt_meta.get("config_hash", ""),
            "universe": split_universe,
            "splits": Path(splits_dir).name}
    return ev.evaluate(final, bundle, ks=ks, meta=meta)


def cmd_eval(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    payload = tr.load_checkpoint(args.checkpoint)
    model, _, config = tr.restore_model(payload)
    ks = tuple(int(tok) for tok in args.topk.split(","))
    reports = []
    for splits_dir in [args.splits] + (args.compare or []):
        report = _evaluate_split(model, config, splits_dir, payload["meta"],
                                 ks, args.force)
        name = Path(splits_dir).name
        (out / f"report_{name}.txt").write_text(report.render(), encoding="utf-8")
        reports.append(report)
        print(f"eval: wrote report_{name}.txt "
              + " ".join(f"{k}={v:.6g}" for k, v in sorted(report.metrics().items())))
    if args.compare:
        drops = ev.compare_iid_ood(reports[0], reports[1])
        (out / "comparison.txt").write_text(ev.render_comparison(drops),
                                            encoding="utf-8")
        avg = drops["average"]
        print("eval: wrote comparison.txt average_drop="
              + ("undefined" if avg is None else f"{avg:.6g}"))
    if args.export_embeddings:
        bundle, _ = load_split_dir(args.splits)
        graph = BipartiteGraph.from_interactions(bundle.train)
        final = tr.inference_embeddings(model, graph, config)
        items = final[bundle.train.num_users:].detach().numpy()
        ev.export_embeddings(items, bundle.train.item_counts(),
                             args.export_embeddings)
        print(f"eval: exported item embeddings to {args.export_embeddings}")
    return 0


def cmd_gradcheck(args) -> int:
    seed = resolve_seed(args.seed)
    report = tr.gradient_check(seed=seed)
    text = report.render()
    print(text)
    if args.out:
        Path(args.out).write_text(text + "\n", encoding="utf-8")
    return 0 if report.passed else 1


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="causaldiffrec",
        description="Environment-augmented causal diffusion for OOD "
                    "graph recommendation")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("prepare", help="construct train/valid/test splits")
    p.add_argument("--data", required=True)
    p.add_argument("--shift", required=True, choices=dat.SHIFT_KINDS)
    p.add_argument("--out", required=True)
    p.add_argument("--small", help="fully exposed matrix (exposure shift)")
    p.add_argument("--columns", default="user,item,timestamp")
    p.add_argument("--delimiter", default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--train-frac", type=float, default=0.6)
    p.add_argument("--test-frac", type=float, default=0.2)
    p.set_defaults(func=cmd_prepare)

    p = sub.add_parser("train", help="run the joint training loop")
    p.add_argument("--splits", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--config", default=None)
    p.add_argument("--set", action="append", metavar="KEY=VALUE")
    p.add_argument("--ablate", action="append",
                   choices=["no_generator", "no_env_inference"])
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="rank the catalog and report metrics")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--splits", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--compare", action="append",
                   help="second split dir; emits an IID/OOD degradation summary")
    p.add_argument("--topk", default="10,20")
    p.add_argument("--force", action="store_true")
    p.add_argument("--export-embeddings", default=None)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("gradcheck", help="finite-difference check of the joint loss")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_gradcheck)
    return parser


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    torch.set_num_threads(1)
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (OSError, ValueError, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
