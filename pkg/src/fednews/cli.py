"""Command-line entry point: ``fednews {gen-synth,train,eval,sweep}``.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 protocol failure.
"""

from __future__ import annotations

import argparse
import copy
import csv
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import secure_agg
from .config import ConfigError, RunConfig, config_from_dict, load_config
from .data import Dataset, FormatError, load_dataset, write_csv, write_dataset
from .federated import ConsistencyError, Federation, RoundLog, RunFailure, _centralized_rounds
from .synthetic import SyntheticSpec, generate_synthetic_dataset

log = logging.getLogger("fednews")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_PROTOCOL = 0, 2, 3, 4
ROUND_FIELDS = ["round", "group_size", "pool_size", "payload_bytes", "share_bytes", "loss", "auc", "mrr",
                "ndcg5", "ndcg10", "wall_ms"]
CHECKPOINT = "checkpoint.bin"


class DataError(RuntimeError):
    pass


# -- shared helpers -------------------------------------------------------------

def _env_seed() -> int | None:
    raw = os.environ.get("FEDNEWS_SEED")
    if raw is None:
        return None
    try:
        return int(raw)
    except ValueError:
        raise ConfigError(f"FEDNEWS_SEED must be an integer, got {raw!r}") from None


def synthetic_spec(raw: dict, default_seed: int | None = None) -> SyntheticSpec:
    raw = dict(raw)
    if default_seed is not None:
        raw.setdefault("seed", default_seed)
    try:
        return SyntheticSpec.from_dict(raw)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid synthetic spec: {exc}") from None


def dataset_for(cfg: RunConfig) -> Dataset:
    """The run's dataset: a directory in MIND layout, or a synthetic spec (seeded by the run seed)."""
    if cfg.data_dir is not None:
        return read_dataset(cfg.data_dir, cfg.reverse_history)
    return generate_synthetic_dataset(synthetic_spec(cfg.synthetic, cfg.seed))


def read_dataset(path, reverse_history: bool = False) -> Dataset:
    try:
        return load_dataset(path, reverse_history=reverse_history)
    except (OSError, FormatError, UnicodeError) as exc:
        raise DataError(f"cannot load dataset from {path}: {exc}") from None


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _metrics_row(log_: RoundLog) -> dict:
    m = log_.metrics
    return {"round": log_.state.t, "auc": m.auc, "mrr": m.mrr, "ndcg5": m.ndcg5, "ndcg10": m.ndcg10,
            "n_impressions": m.n_impressions}


def train_run(cfg: RunConfig, ds: Dataset | None = None, resume: str | None = None) -> list[RoundLog]:
    """Run training per ``cfg`` and write rounds.csv, report.csv, the checkpoint and the config echo."""
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    ds = ds if ds is not None else dataset_for(cfg)
    fed = Federation(ds, cfg)
    if resume:
        try:
            fed.restore(resume)
        except (OSError, ValueError, KeyError, ConsistencyError) as exc:
            raise DataError(f"cannot resume from {resume}: {exc}") from None
    _write_json(out / "config.resolved.json", cfg.to_dict())
    rounds = fed.run() if cfg.mode == "federated" else _centralized_rounds(fed)
    logs: list[RoundLog] = []
    path = out / "rounds.csv"
    append = bool(resume) and path.exists() and path.stat().st_size > 0
    with open(path, "a" if append else "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=ROUND_FIELDS, lineterminator="\n")
        if not append:
            writer.writeheader()
        for entry in rounds:
            logs.append(entry)
            writer.writerow(entry.row())
            fh.flush()
            if entry.metrics is not None:
                log.info("round %d  auc %.4f  mrr %.4f  ndcg@10 %.4f", entry.state.t, entry.metrics.auc,
                         entry.metrics.mrr, entry.metrics.ndcg10)
                fed.save(out / CHECKPOINT)
    fed.save(out / CHECKPOINT)
    evaluated = [entry for entry in logs if entry.metrics is not None]
    if evaluated:
        write_csv(out / "report.csv", [_metrics_row(evaluated[-1])])
    return logs


def mean_bytes(logs: list[RoundLog]) -> tuple[float, float]:
    """Average (payload, share) bytes over rounds that actually ran."""
    ran = [entry.state for entry in logs if entry.state.group]
    if not ran:
        return 0.0, 0.0
    return (float(np.mean([s.payload_bytes for s in ran])), float(np.mean([s.share_bytes for s in ran])))


# -- commands ---------------------------------------------------------------------

def cmd_gen_synth(args) -> int:
    try:
        raw = json.loads(Path(args.spec).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read spec {args.spec}: {exc}") from None
    if not isinstance(raw, dict):
        raise ConfigError("spec root must be a JSON object")
    seed = _env_seed()
    if seed is not None:
        raw["seed"] = seed
    spec = synthetic_spec(raw)
    ds = generate_synthetic_dataset(spec)
    out = Path(args.out)
    write_dataset(ds, out)
    _write_json(out / "spec.resolved.json", spec.to_dict())
    _write_json(out / "meta.json", {"oracle_auc": ds.meta["oracle_auc"], "topics": ds.meta["topics"]})
    print(f"wrote {len(ds.catalog)} news, {len(ds.users)} users to {out} "
          f"(topic-oracle AUC {ds.meta['oracle_auc']:.4f})")
    return EXIT_OK


def _apply_common(cfg: RunConfig, args) -> RunConfig:
    if getattr(args, "threads", None):
        cfg.threads = args.threads
    if getattr(args, "out", None):
        cfg.out_dir = args.out
    return cfg


def cmd_train(args) -> int:
    cfg = _apply_common(load_config(args.config), args)
    logs = train_run(cfg, resume=args.resume)
    final = [entry for entry in logs if entry.metrics is not None]
    if final:
        print(json.dumps(_metrics_row(final[-1])))
    return EXIT_OK


def cmd_eval(args) -> int:
    if args.ckpt is None and args.config is None:
        raise ConfigError("eval needs --ckpt or --config")
    if args.ckpt is not None:
        from .nn.params import load_checkpoint
        try:
            _, meta = load_checkpoint(args.ckpt)
        except (OSError, ValueError) as exc:
            raise DataError(f"cannot read checkpoint {args.ckpt}: {exc}") from None
        cfg = config_from_dict(meta["config"])
    else:
        cfg = load_config(args.config)
    ds = read_dataset(args.data, cfg.reverse_history) if args.data else dataset_for(cfg)
    fed = Federation(ds, cfg)
    if args.ckpt is not None:
        try:
            fed.restore(args.ckpt)
        except ConsistencyError as exc:
            raise DataError(str(exc)) from None
    report = fed.evaluate(args.split)
    row = {"split": args.split, **report.as_row()}
    print(json.dumps(row))
    if args.out:
        write_csv(args.out, [row])
    return EXIT_OK


def cmd_sweep(args) -> int:
    base = _apply_common(load_config(args.config), args)
    try:
        values = [int(v) for v in args.values.split(",") if v.strip()]
    except ValueError:
        raise ConfigError(f"--values must be comma-separated integers, got {args.values!r}") from None
    if not values:
        raise ConfigError("--values is empty")
    ds = dataset_for(base)
    rows = []
    for v in values:
        cfg = copy.deepcopy(base)
        if args.axis == "group_size":
            cfg.train.group_size = v
        else:
            cfg.model.short_window = v
        cfg.out_dir = str(Path(base.out_dir) / f"{args.axis}={v}")
        cfg.validate()
        logs = train_run(cfg, ds)
        final = [entry for entry in logs if entry.metrics is not None][-1].metrics
        payload, share = mean_bytes(logs)
        rows.append({"axis": args.axis, "value": v, "auc": final.auc, "mrr": final.mrr, "ndcg5": final.ndcg5,
                     "ndcg10": final.ndcg10, "rounds": logs[-1].state.t, "payload_bytes_per_round": payload,
                     "share_bytes_per_round": share, "bytes_per_round": payload + share})
        log.info("%s=%d done: auc %.4f, %.0f bytes/round", args.axis, v, final.auc, payload + share)
    out = Path(base.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_csv(out / "sweep.csv", rows)
    _write_json(out / "config.resolved.json", base.to_dict())
    print(f"wrote {out / 'sweep.csv'}")
    return EXIT_OK


# -- parser ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="fednews", description="Federated multimodal news recommendation.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-synth", help="generate a synthetic dataset")
    g.add_argument("--spec", required=True, help="JSON synthetic spec")
    g.add_argument("--out", required=True, help="output directory")
    g.set_defaults(func=cmd_gen_synth)

    t = sub.add_parser("train", help="train federated or centralized")
    t.add_argument("--config", required=True)
    t.add_argument("--out", help="override out_dir")
    t.add_argument("--threads", type=int)
    t.add_argument("--resume", help="checkpoint to continue from")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint or a freshly initialised model")
    e.add_argument("--ckpt")
    e.add_argument("--data", help="dataset directory (default: the run config's data)")
    e.add_argument("--config", help="run config, used when no checkpoint is given")
    e.add_argument("--split", default="test", choices=["train", "valid", "test"])
    e.add_argument("--out", help="CSV file for the metrics row")
    e.set_defaults(func=cmd_eval)

    s = sub.add_parser("sweep", help="train once per value of one axis")
    s.add_argument("--config", required=True)
    s.add_argument("--axis", required=True, choices=["group_size", "short_window"])
    s.add_argument("--values", required=True, help="comma-separated integers")
    s.add_argument("--out", help="override out_dir")
    s.add_argument("--threads", type=int)
    s.set_defaults(func=cmd_sweep)
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, FormatError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (RunFailure, secure_agg.ProtocolError, secure_agg.EncodingError) as exc:
        print(f"protocol failure: {exc}", file=sys.stderr)
        return EXIT_PROTOCOL


if __name__ == "__main__":
    sys.exit(main())
