"""Metrics, first-token attention audit, ensemble-layer ablation and report files."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np

from . import autodiff as ad
from .data import Dataset, GroupTag, encode_batch
from .errors import ConfigError
from .model import ForwardMode, ReadModel, run_forward
from .objective import predict

GROUPS = (GroupTag.OVERLAPPING, GroupTag.NON_OVERLAPPING, GroupTag.SPECIAL)


@dataclass
class EvalReport:
    dataset: str
    split: str
    metrics: dict[str, float]
    num_examples: int
    checkpoint: str = ""
    seed: int | None = None

    def to_dict(self) -> dict:
        return asdict(self)


def confusion_matrix(gold: np.ndarray, pred: np.ndarray, num_classes: int) -> np.ndarray:
    cm = np.zeros((num_classes, num_classes), dtype=np.int64)
    np.add.at(cm, (gold, pred), 1)
    return cm


def _safe_div(a: float, b: float) -> float:
    return a / b if b else 0.0


def f1_score(precision: float, recall: float) -> float:
    return _safe_div(2 * precision * recall, precision + recall)


def classification_metrics(gold, pred, num_classes: int, positive_class: int = 0) -> dict[str, float]:
    """Accuracy, per-class precision/recall/F1, macro-F1 and headline F1.

    ``f1`` is the positive-class F1 for two classes and macro-F1 otherwise.
    """
    gold = np.asarray(gold, dtype=np.int64)
    pred = np.asarray(pred, dtype=np.int64)
    cm = confusion_matrix(gold, pred, num_classes)
    out = {"accuracy": _safe_div(np.trace(cm), cm.sum())}
    f1s = []
    for c in range(num_classes):
        tp = cm[c, c]
        p = _safe_div(tp, cm[:, c].sum())
        r = _safe_div(tp, cm[c, :].sum())
        out[f"precision_{c}"] = p
        out[f"recall_{c}"] = r
        out[f"f1_{c}"] = f1_score(p, r)
        f1s.append(out[f"f1_{c}"])
    out["macro_f1"] = float(np.mean(f1s))
    out["f1"] = out[f"f1_{positive_class}"] if num_classes == 2 else out["macro_f1"]
    return {k: float(v) for k, v in out.items()}


def predict_dataset(model: ReadModel, dataset: Dataset, batch_size: int = 500) -> np.ndarray:
    cfg = model.config
    preds = []
    for i in range(0, len(dataset), batch_size):
        batch = encode_batch(dataset.examples[i : i + batch_size], cfg.vocab_size, cfg.max_seq_len)
        preds.append(predict(model, batch))
    return np.concatenate(preds) if preds else np.zeros(0, dtype=np.int64)


def apply_label_map(pred: np.ndarray, label_map: Mapping[int, int] | None, num_model_classes: int) -> np.ndarray:
    if label_map is None:
        return pred
    missing = set(range(num_model_classes)) - set(label_map)
    if missing:
        raise ConfigError(f"label map does not cover model classes {sorted(missing)}")
    table = np.array([label_map[c] for c in range(num_model_classes)], dtype=np.int64)
    return table[pred]


def evaluate(
    model: ReadModel,
    dataset: Dataset,
    label_map: Mapping[int, int] | None = None,
    *,
    split: str | None = None,
    checkpoint: str = "",
    seed: int | None = None,
    positive_class: int = 0,
    batch_size: int = 500,
) -> EvalReport:
    """Score main-path predictions; ``label_map`` collapses predicted labels only."""
    n_model = model.config.num_classes
    if label_map is not None:
        label_map = {int(k): int(v) for k, v in label_map.items()}
        n_eval = max(label_map.values()) + 1
    else:
        n_eval = n_model
    gold = dataset.labels
    if gold.size and (gold.min() < 0 or gold.max() >= n_eval):
        raise ConfigError(
            f"dataset labels span [0, {gold.max()}] but the evaluation label space has {n_eval} classes"
        )
    pred = apply_label_map(predict_dataset(model, dataset, batch_size), label_map, n_model)
    metrics = classification_metrics(gold, pred, n_eval, positive_class)
    return EvalReport(dataset.name, split or dataset.name, metrics, len(dataset), checkpoint, seed)


# ---------------------------------------------------------------------------
# attention audit


@dataclass
class AttentionStats:
    layer: int  # 1-based
    path: str
    means: dict[str, float]
    by_label: dict[int, dict[str, float]]
    sample_count: int
    label_counts: dict[int, int] = field(default_factory=dict)
    per_head: list[dict[str, float]] | None = None

    @property
    def gap(self) -> float:
        """NonOverlapping minus Overlapping mean first-token attention."""
        return self.means[GroupTag.NON_OVERLAPPING.value] - self.means[GroupTag.OVERLAPPING.value]

    def to_dict(self) -> dict:
        out = asdict(self)
        out["by_label"] = {str(k): v for k, v in self.by_label.items()}
        out["label_counts"] = {str(k): v for k, v in self.label_counts.items()}
        out["gap"] = self.gap
        return out


def first_token_rows(
    model: ReadModel, dataset: Dataset, layer: int, path: ForwardMode | str, batch_size: int = 500
) -> list[np.ndarray]:
    """Per example, the ``[h, n_i]`` first-token attention rows at ``layer``."""
    path = ForwardMode(path)
    cfg = model.config
    if not 1 <= layer <= cfg.num_layers:
        raise ConfigError(f"layer must lie in [1, {cfg.num_layers}], got {layer}")
    if path is not ForwardMode.MAIN:
        if cfg.method == "vanilla":
            raise ConfigError("the vanilla model only has the main path")
        if layer > cfg.ensemble_layers:
            raise ConfigError(f"layer {layer} is above the last ensemble layer {cfg.ensemble_layers}")
    rows = []
    for i in range(0, len(dataset), batch_size):
        exs = dataset.examples[i : i + batch_size]
        batch = encode_batch(exs, cfg.vocab_size, cfg.max_seq_len)
        record: dict[int, np.ndarray] = {}
        with ad.no_grad():
            run_forward(model, batch, path, record=record)
        probs = record[layer - 1]  # [B, h, n, n]
        for j, ex in enumerate(exs):
            rows.append(probs[j, :, 0, : len(ex.group_tags)])
    return rows


def _group_means(row: np.ndarray, tags: np.ndarray) -> dict[str, float]:
    out = {}
    for g in GROUPS:
        sel = tags == g.value
        if sel.any():
            out[g.value] = float(row[sel].mean())
    return out


def attention_stats(
    model: ReadModel,
    dataset: Dataset,
    layer: int,
    path: ForwardMode | str = ForwardMode.MAIN,
    *,
    per_head: bool = False,
    batch_size: int = 500,
) -> AttentionStats:
    """Average first-token attention each token group receives.

    Heads are averaged first. Per example, each group's mean attention per
    token is taken; those are averaged over the examples that contain the
    group, for the whole dataset and for each gold-label subset.
    """
    rows = first_token_rows(model, dataset, layer, path, batch_size)
    sums: dict = {}
    counts: dict = {}
    head_sums: list[dict] = []
    head_counts: list[dict] = []
    label_counts: dict[int, int] = {}

    def add(key, group, value, s=sums, c=counts):
        s[(key, group)] = s.get((key, group), 0.0) + value
        c[(key, group)] = c.get((key, group), 0) + 1

    for row, ex in zip(rows, dataset.examples):
        tags = np.array([t.value for t in ex.group_tags])
        mean_row = row.mean(axis=0)
        total = sum(mean_row[tags == g.value].sum() for g in GROUPS)
        if abs(total - 1.0) > 1e-9:
            raise AssertionError(f"first-token attention sums to {total}, not 1")
        label_counts[ex.label] = label_counts.get(ex.label, 0) + 1
        for g, v in _group_means(mean_row, tags).items():
            add("all", g, v)
            add(ex.label, g, v)
        if per_head:
            while len(head_sums) < row.shape[0]:
                head_sums.append({})
                head_counts.append({})
            for h in range(row.shape[0]):
                for g, v in _group_means(row[h], tags).items():
                    add("all", g, v, head_sums[h], head_counts[h])

    def collect(key, s=sums, c=counts):
        return {g.value: s[(key, g.value)] / c[(key, g.value)] for g in GROUPS if (key, g.value) in c}

    means = collect("all")
    for g in GROUPS:
        means.setdefault(g.value, float("nan"))
    by_label = {lab: collect(lab) for lab in sorted(label_counts)}
    heads = [collect("all", s, c) for s, c in zip(head_sums, head_counts)] if per_head else None
    return AttentionStats(layer, ForwardMode(path).value, means, by_label, len(rows), label_counts, heads)


# ---------------------------------------------------------------------------
# ablation


@dataclass
class AblationRow:
    k: int
    metrics: dict[str, tuple[float, float]]  # split -> (mean, sd)
    runs: list[dict[str, float]] = field(default_factory=list)


def summarize(values: Sequence[float]) -> tuple[float, float]:
    """Mean and population standard deviation."""
    arr = np.asarray(values, dtype=np.float64)
    return float(arr.mean()), float(arr.std())


def ablate_ensemble_layers(
    run_one: Callable[[int, int], dict[str, float]],
    k_values: Sequence[int],
    seeds: Sequence[int],
    num_layers: int,
) -> list[AblationRow]:
    """One row per ``k`` with mean/sd of every split accuracy over ``seeds``.

    ``run_one(k, seed)`` trains and evaluates one model and returns
    ``{split: accuracy}``; :func:`read_debias.experiments.train_and_score`
    is the standard implementation.
    """
    for k in k_values:
        if not 1 <= k <= num_layers:
            raise ConfigError(f"ensemble layer count {k} outside [1, {num_layers}]")
    rows = []
    for k in k_values:
        runs = [run_one(k, seed) for seed in seeds]
        splits = list(runs[0])
        rows.append(AblationRow(k, {s: summarize([r[s] for r in runs]) for s in splits}, runs))
    return rows


# ---------------------------------------------------------------------------
# report files

REPORT_COLUMNS = ("dataset", "split", "metric", "value", "num_examples", "checkpoint", "seed")
ABLATION_COLUMNS = ("k", "split", "metric", "mean", "sd")


def report_rows(reports: Sequence[EvalReport], stats: Sequence[AttentionStats] = ()) -> list[dict]:
    rows = []
    for r in reports:
        for metric, value in r.metrics.items():
            rows.append(
                {
                    "dataset": r.dataset,
                    "split": r.split,
                    "metric": metric,
                    "value": value,
                    "num_examples": r.num_examples,
                    "checkpoint": r.checkpoint,
                    "seed": "" if r.seed is None else r.seed,
                }
            )
    for s in stats:
        prefix = f"attention.layer{s.layer}.{s.path}"
        items = [(f"{prefix}.{g}", v) for g, v in s.means.items()]
        items += [(f"{prefix}.label{lab}.{g}", v) for lab, gm in s.by_label.items() for g, v in gm.items()]
        items.append((f"{prefix}.gap", s.gap))
        for metric, value in items:
            rows.append(
                {"dataset": "", "split": "", "metric": metric, "value": value,
                 "num_examples": s.sample_count, "checkpoint": "", "seed": ""}
            )
    return rows


def emit_report(
    reports: Sequence[EvalReport],
    stats: Sequence[AttentionStats],
    path: str | Path,
    fmt: str = "json",
) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    if fmt == "json":
        doc = {"reports": [r.to_dict() for r in reports], "attention_stats": [s.to_dict() for s in stats]}
        path.write_text(json.dumps(doc, indent=2) + "\n", encoding="utf-8")
    elif fmt == "csv":
        with path.open("w", newline="", encoding="utf-8") as fh:
            writer = csv.DictWriter(fh, fieldnames=REPORT_COLUMNS, lineterminator="\n")
            writer.writeheader()
            writer.writerows(report_rows(reports, stats))
    else:
        raise ConfigError(f"unknown report format {fmt!r}")
    return path


def emit_ablation(rows: Sequence[AblationRow], path: str | Path, metric: str = "accuracy") -> Path:
    """Long-format CSV: one line per (k, split)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=ABLATION_COLUMNS, lineterminator="\n")
        writer.writeheader()
        for row in rows:
            for split, (m, sd) in row.metrics.items():
                writer.writerow({"k": row.k, "split": split, "metric": metric, "mean": m, "sd": sd})
    return path


def read_report(path: str | Path) -> tuple[list[EvalReport], list[dict]]:
    """Parse a JSON report back into reports and raw attention-stat dicts."""
    doc = json.loads(Path(path).read_text(encoding="utf-8"))
    return [EvalReport(**r) for r in doc["reports"]], doc["attention_stats"]


def read_csv_rows(path: str | Path) -> list[dict]:
    with Path(path).open(newline="", encoding="utf-8") as fh:
        rows = list(csv.DictReader(fh))
    for row in rows:
        for key in ("value", "mean", "sd"):
            if key in row and row[key] != "":
                row[key] = float(row[key])
    return rows


def nan_to_none(x: float) -> float | None:
    return None if isinstance(x, float) and math.isnan(x) else x
