"""Command-line entry point: ``read-debias <subcommand> ...``.

Exit codes: 0 success, 1 usage/config error, 2 data error, 3 numeric divergence.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path
from typing import Any, Sequence

import yaml

from . import experiments
from .checkpoint import CheckpointError, read_checkpoint, save_checkpoint
from .data import SPLITS, Dataset, generate_splits, read_jsonl, spec_to_dict, write_jsonl
from .errors import ConfigError, DataError, NumericError, ReadError, SpecError
from .evaluation import (
    ablate_ensemble_layers,
    attention_stats,
    emit_ablation,
    emit_report,
    evaluate,
)
from .model import ForwardMode, ReadModel

log = logging.getLogger("read_debias")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_DIVERGED = 0, 1, 2, 3
LOG_LEVELS = {"error": logging.ERROR, "info": logging.INFO, "debug": logging.DEBUG}


def configure_logging() -> None:
    name = os.environ.get("READ_LOG_LEVEL", "info").lower()
    if name not in LOG_LEVELS:
        raise ConfigError(f"READ_LOG_LEVEL must be one of {sorted(LOG_LEVELS)}, got {name!r}")
    logging.basicConfig(level=LOG_LEVELS[name], format="%(asctime)s %(levelname)s %(name)s: %(message)s",
                        stream=sys.stderr)
    log.setLevel(LOG_LEVELS[name])


def load_flat_config(path: str | Path) -> dict[str, Any]:
    """Read a flat ``key: value`` document; nested values are rejected."""
    try:
        doc = yaml.safe_load(Path(path).read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: not a key-value document ({exc})") from None
    if doc is None:
        return {}
    if not isinstance(doc, dict):
        raise ConfigError(f"{path}: expected a flat key-value document")
    for key, value in doc.items():
        if isinstance(value, (dict, list)):
            raise ConfigError(f"{path}: key {key!r} must hold a scalar")
    return doc


def load_label_map(path: str | Path) -> dict[int, int]:
    raw = load_flat_config(path)
    try:
        return {int(k): int(v) for k, v in raw.items()}
    except (TypeError, ValueError):
        raise ConfigError(f"{path}: label map keys and values must be integers") from None


def load_dataset(path: str | Path) -> Dataset:
    path = Path(path)
    if not path.is_file():
        raise DataError(f"data file not found: {path}")
    return read_jsonl(path)


def load_splits(directory: str | Path, names: Sequence[str]) -> dict[str, Dataset]:
    directory = Path(directory)
    out = {}
    for name in names:
        path = directory / f"{name}.jsonl"
        if path.is_file():
            out[name] = read_jsonl(path, name)
    missing = {"train", "dev"} - set(out)
    if missing:
        raise DataError(f"{directory}: missing {', '.join(sorted(missing))}.jsonl")
    return out


def _print_json(obj) -> None:
    json.dump(obj, sys.stdout, indent=2)
    sys.stdout.write("\n")


# ---------------------------------------------------------------------------
# subcommands


def cmd_generate_data(args) -> int:
    run = experiments.RunConfig.from_flat(load_flat_config(args.spec))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    splits = generate_splits(run.spec, run.sizes)
    for name in SPLITS:
        write_jsonl(splits[name], out / f"{name}.jsonl")
    (out / "spec.json").write_text(json.dumps(spec_to_dict(run.spec), indent=2) + "\n", encoding="utf-8")
    log.info("wrote %s", ", ".join(f"{n}={len(splits[n])}" for n in SPLITS))
    return EXIT_OK


def cmd_train(args) -> int:
    run = experiments.RunConfig.from_flat(load_flat_config(args.config))
    splits = load_splits(args.data, SPLITS)
    result = experiments.train_and_score(splits, run.model, run.train)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    save_checkpoint(result.checkpoint, out / "model.ckpt")
    (out / "history.json").write_text(json.dumps(result.history, indent=2) + "\n", encoding="utf-8")
    summary = {"accuracy": result.accuracy, "best_epoch": result.checkpoint.epoch, "seconds": result.seconds}
    if result.attention is not None:
        summary["attention"] = result.attention.to_dict()
    (out / "summary.json").write_text(json.dumps(summary, indent=2) + "\n", encoding="utf-8")
    _print_json(summary)
    return EXIT_OK


def cmd_evaluate(args) -> int:
    ckpt = read_checkpoint(args.ckpt)
    model = ckpt.to_model()
    dataset = load_dataset(args.data)
    label_map = load_label_map(args.label_map) if args.label_map else None
    report = evaluate(model, dataset, label_map, checkpoint=str(args.ckpt),
                      seed=ckpt.train_config.get("seed"))
    if args.out:
        emit_report([report], [], args.out, args.format)
    _print_json(report.to_dict())
    return EXIT_OK


def cmd_attn_stats(args) -> int:
    model = read_checkpoint(args.ckpt).to_model()
    dataset = load_dataset(args.data)
    stats = attention_stats(model, dataset, args.layer, args.path, per_head=args.per_head)
    if args.out:
        emit_report([], [stats], args.out, args.format)
    _print_json(stats.to_dict())
    return EXIT_OK


def _parse_int_list(text: str) -> list[int]:
    try:
        return [int(t) for t in text.split(",") if t.strip()]
    except ValueError:
        raise ConfigError(f"expected a comma-separated integer list, got {text!r}") from None


def cmd_ablate(args) -> int:
    run = experiments.RunConfig.from_flat(load_flat_config(args.config))
    k_values = _parse_int_list(args.k)
    seeds = list(range(args.seeds))
    if args.seeds < 1:
        raise ConfigError("--seeds must be positive")
    for k in k_values:
        if not 1 <= k <= run.model.num_layers:
            raise ConfigError(f"k={k} outside [1, {run.model.num_layers}] for a {run.model.num_layers}-layer model")
    cache: dict[int, dict[str, Dataset]] = {}

    def splits_for(seed: int) -> dict[str, Dataset]:
        if seed not in cache:
            cache[seed] = load_splits(args.data, SPLITS) if args.data else experiments.make_splits(run, seed)
        return cache[seed]

    def run_one(k: int, seed: int) -> dict[str, float]:
        cfg = run.with_method("read", k=k, seed=seed)
        return experiments.train_and_score(splits_for(seed), cfg.model, cfg.train, audit=False).accuracy

    rows = ablate_ensemble_layers(run_one, k_values, seeds, run.model.num_layers)
    out = Path(args.out)
    emit_ablation(rows, out)
    _print_json([{"k": r.k, **{s: {"mean": m, "sd": sd} for s, (m, sd) in r.metrics.items()}} for r in rows])
    return EXIT_OK


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="read-debias", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate-data", help="write synthetic train/dev/OOD splits as JSONL")
    p.add_argument("--spec", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_generate_data)

    p = sub.add_parser("train", help="train one model and keep the best dev checkpoint")
    p.add_argument("--config", required=True)
    p.add_argument("--data", required=True, help="directory holding train.jsonl and dev.jsonl")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", help="score a checkpoint on a JSONL dataset")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--label-map", dest="label_map")
    p.add_argument("--out", help="optional report file")
    p.add_argument("--format", choices=("json", "csv"), default="json")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("attn-stats", help="first-token attention per token group")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--layer", required=True, type=int, help="1-based layer index")
    p.add_argument("--path", default="main", choices=[m.value for m in ForwardMode])
    p.add_argument("--per-head", dest="per_head", action="store_true")
    p.add_argument("--out")
    p.add_argument("--format", choices=("json", "csv"), default="json")
    p.set_defaults(func=cmd_attn_stats)

    p = sub.add_parser("ablate", help="train READ for several ensemble depths and seeds")
    p.add_argument("--config", required=True)
    p.add_argument("--k", required=True, help="comma-separated ensemble layer counts")
    p.add_argument("--seeds", type=int, default=5)
    p.add_argument("--data", help="fixed data directory; default regenerates per seed from the config")
    p.add_argument("--out", default="ablation.csv")
    p.set_defaults(func=cmd_ablate)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_USAGE
    try:
        configure_logging()
        return args.func(args)
    except NumericError as exc:
        log.error("numeric divergence: %s", exc)
        return EXIT_DIVERGED
    except (DataError, CheckpointError) as exc:
        log.error("data error: %s", exc)
        return EXIT_DATA
    except (ConfigError, SpecError) as exc:
        log.error("usage error: %s", exc)
        return EXIT_USAGE
    except ReadError as exc:
        log.error("%s", exc)
        return EXIT_USAGE
    except OSError as exc:
        log.error("i/o error: %s", exc)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
