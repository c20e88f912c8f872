"""Command-line entry point.

Subcommands: inspect (schema), fit (train + checkpoint), sample
(unconditional generation), impute (fill blank cells), eval (fidelity and
privacy report). Exit codes: 0 success, 1 computation failure, 2 usage or
I/O failure.

Option precedence for fit: built-in defaults, then --config JSON, then
explicit flags; the effective configuration is stored in the checkpoint.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys

import numpy as np

from .data import (
    DecodeError,
    EncodeError,
    ParseError,
    TableSchema,
    encode,
    fit_transforms,
    load_csv,
    write_csv,
)
from .metrics import MetricError, evaluate
from .sampler import SamplerConfig, SamplingError, generate_unconditional, impute
from .trainer import (
    CheckpointError,
    TrainConfig,
    TrainingError,
    load_checkpoint,
    model_from_checkpoint,
    save_checkpoint,
    train,
)

USAGE_EXIT = 2
FAILURE_EXIT = 1


def _load_schema_overrides(path):
    with open(path, encoding="utf-8") as fh:
        obj = json.load(fh)
    schema = TableSchema.from_json_obj(obj)
    return {col.name: col for col in schema.columns}


def cmd_inspect(args) -> int:
    overrides = _load_schema_overrides(args.schema) if args.schema else None
    _, schema = load_csv(args.data, overrides)
    print(json.dumps(schema.to_json_obj(), indent=2))
    return 0


def cmd_fit(args) -> int:
    cfg = TrainConfig()
    if args.config:
        with open(args.config, encoding="utf-8") as fh:
            file_cfg = json.load(fh)
        cfg = TrainConfig.from_json_obj({**cfg.to_json_obj(), **file_cfg})
    if args.epochs is not None:
        cfg.epochs = args.epochs
    if args.batch is not None:
        cfg.batch_size = args.batch
    if args.seed is not None:
        cfg.seed = args.seed
    overrides = _load_schema_overrides(args.schema) if args.schema else None
    raw, schema = load_csv(args.data, overrides)
    transforms = fit_transforms(raw, schema)
    encoded = encode(raw, schema, transforms)
    _, ckpt = train(encoded, cfg)
    save_checkpoint(ckpt, args.out)
    return 0


def _order_arg(order: str, D: int):
    return None if order == "random" else np.arange(D)


def cmd_sample(args) -> int:
    ckpt = load_checkpoint(args.ckpt)
    model = model_from_checkpoint(ckpt)
    rng = np.random.default_rng(args.seed)
    order = _order_arg(args.order, model.schema.ncols)
    table = generate_unconditional(model, ckpt.transforms, args.n, rng, order=order)
    write_csv(table, args.out)
    return 0


def cmd_impute(args) -> int:
    if args.k < 1:
        raise ParseError("--k must be >= 1")
    ckpt = load_checkpoint(args.ckpt)
    model = model_from_checkpoint(ckpt)
    raw, _ = load_csv(args.data)
    if raw.header != model.schema.names:
        raise ParseError(
            f"{args.data}: columns {raw.header} do not match the checkpoint "
            f"schema {model.schema.names}"
        )
    rng = np.random.default_rng(args.seed)
    completed = impute(model, ckpt.transforms, raw, rng, k=args.k)
    write_csv(completed, args.out)
    return 0


def cmd_eval(args) -> int:
    real, schema = load_csv(args.real)
    syn, _ = load_csv(args.syn)
    holdout = None
    if args.holdout:
        holdout, _ = load_csv(args.holdout)
    report = evaluate(real, syn, schema, seed=args.seed, holdout=holdout)
    obj = report.to_json_obj()
    print(json.dumps(obj, indent=2))
    if args.marginal_csv:
        with open(args.marginal_csv, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(["column", "score"])
            for name, score in obj["marginal"]["per_column"].items():
                writer.writerow([name, repr(score)])
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="tabgen",
        description="Train, sample, impute, and evaluate a tabular synthesizer.",
    )
    parser.add_argument(
        "--threads", type=int, default=1,
        help="worker count (only 1, the deterministic mode, is implemented)",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("inspect", help="print the inferred schema as JSON")
    p.add_argument("--data", required=True)
    p.add_argument("--schema", help="JSON schema file with per-column overrides")
    p.set_defaults(func=cmd_inspect)

    p = sub.add_parser("fit", help="train a model and write a checkpoint")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--schema")
    p.add_argument("--config", help="JSON file of training hyperparameters")
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch", type=int)
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("sample", help="generate synthetic rows")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--order", choices=["random", "fixed"], default="random",
                   help="per-row random order or fixed left-to-right")
    p.set_defaults(func=cmd_sample)

    p = sub.add_parser("impute", help="fill blank cells in a CSV")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--k", type=int, default=SamplerConfig().k_impute,
                   help="conditional draws aggregated per row")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_impute)

    p = sub.add_parser("eval", help="score a synthetic table against a real one")
    p.add_argument("--real", required=True)
    p.add_argument("--syn", required=True)
    p.add_argument("--holdout",
                   help="real holdout half; enables the DCR privacy metric")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--marginal-csv",
                   help="also write per-column marginal scores as CSV")
    p.set_defaults(func=cmd_eval)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.threads < 1:
        print("error: --threads must be >= 1", file=sys.stderr)
        return USAGE_EXIT
    try:
        return args.func(args)
    except (ParseError, EncodeError, DecodeError, CheckpointError, OSError,
            json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return USAGE_EXIT
    except (TrainingError, SamplingError, MetricError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return FAILURE_EXIT


if __name__ == "__main__":
    sys.exit(main())
