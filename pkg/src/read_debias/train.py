"""AdamW with a linear schedule, joint training loop and dev-based selection."""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, fields

import numpy as np

from . import autodiff as ad
from .checkpoint import Checkpoint
from .data import Dataset, encode_batch
from .errors import ConfigError, DataError, DivergenceError, NumericError
from .model import Partition, ReadModel
from .objective import predict, read_loss

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 2e-5
    batch_size: int = 32
    epochs: int = 5
    warmup_steps: int = 0
    weight_decay: float = 0.01
    seed: int = 0
    grad_clip: float = 0.0  # global-norm clip; 0 disables
    eval_batch_size: int = 500
    debug_partitions: bool = False

    def __post_init__(self) -> None:
        if not self.learning_rate > 0:
            raise ConfigError("learning_rate must be positive")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be positive")
        if self.epochs < 0:
            raise ConfigError("epochs must be non-negative")
        if self.warmup_steps < 0 or self.weight_decay < 0 or self.grad_clip < 0:
            raise ConfigError("warmup_steps, weight_decay and grad_clip must be non-negative")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, values: dict) -> "TrainConfig":
        names = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in values.items() if k in names})


# ---------------------------------------------------------------------------
# optimizer


@dataclass
class AdamWState:
    step: int
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]

    @classmethod
    def zeros(cls, params: dict[str, ad.Tensor]) -> "AdamWState":
        return cls(
            0,
            {n: np.zeros_like(p.data) for n, p in params.items()},
            {n: np.zeros_like(p.data) for n, p in params.items()},
        )


def decays(name: str, value: np.ndarray) -> bool:
    """Weight decay applies to matrices (weights, embeddings), not to biases or norms."""
    return value.ndim >= 2


def adamw_step(
    params: dict[str, ad.Tensor],
    grads: dict[str, np.ndarray],
    state: AdamWState,
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
    weight_decay: float = 0.0,
    decay_filter=decays,
) -> None:
    """One decoupled-weight-decay Adam update, in place on ``params``."""
    for name, g in grads.items():
        if not np.isfinite(g).all():
            raise NumericError(f"non-finite gradient for parameter {name!r}")
    state.step += 1
    t = state.step
    c1 = 1.0 - beta1**t
    c2 = 1.0 - beta2**t
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.data.shape:
            raise ConfigError(f"gradient shape {g.shape} does not match parameter {name!r} {p.data.shape}")
        m = state.m[name]
        v = state.v[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * (g * g)
        update = (m / c1) / (np.sqrt(v / c2) + eps)
        if weight_decay and decay_filter(name, p.data):
            update = update + weight_decay * p.data
        p.data = p.data - lr * update


def lr_at(step: int, total_steps: int, base_lr: float, warmup_steps: int = 0) -> float:
    """Linear warmup to ``base_lr`` then linear decay to 0 at ``total_steps``."""
    if warmup_steps > 0 and step < warmup_steps:
        return base_lr * step / warmup_steps
    if total_steps <= warmup_steps:
        return 0.0
    return base_lr * max(0.0, (total_steps - step) / (total_steps - warmup_steps))


def clip_global_norm(grads: dict[str, np.ndarray], max_norm: float) -> float:
    norm = math.sqrt(sum(float((g * g).sum()) for g in grads.values()))
    if max_norm > 0 and norm > max_norm:
        factor = max_norm / (norm + 1e-12)
        for name in grads:
            grads[name] = grads[name] * factor
    return norm


# ---------------------------------------------------------------------------
# evaluation helpers


def accuracy(model: ReadModel, dataset: Dataset, batch_size: int = 500) -> float:
    if len(dataset) == 0:
        raise DataError("cannot score an empty dataset")
    correct = 0
    for i in range(0, len(dataset), batch_size):
        batch = encode_batch(dataset.examples[i : i + batch_size], model.config.vocab_size, model.config.max_seq_len)
        correct += int((predict(model, batch) == batch.labels).sum())
    return correct / len(dataset)


def partition_grad_norms(model: ReadModel) -> dict[str, float]:
    out = {}
    for part in Partition:
        sq = sum(float((model[n].grad ** 2).sum()) for n in model.names_in(part))
        out[part.value] = math.sqrt(sq)
    return out


def _debug_backward(model: ReadModel, losses) -> dict:
    """Backward each loss term separately and assert the partition contract."""
    model.zero_grad()
    ad.backward(losses.ensemble)
    from_e = {n: p.grad.copy() for n, p in model.named_parameters()}
    norms_e = partition_grad_norms(model)
    for n in model.names_in(Partition.BIAS_ONLY):
        if np.any(from_e[n] != 0.0):
            raise AssertionError(f"ensemble loss leaked gradient into biased parameter {n}")
    model.zero_grad()
    ad.backward(losses.biased)
    norms_b = partition_grad_norms(model)
    for n in model.names_in(Partition.MAIN_ONLY):
        if np.any(model[n].grad != 0.0):
            raise AssertionError(f"biased loss leaked gradient into main parameter {n}")
    for n, p in model.named_parameters():
        p.grad = p.grad + from_e[n]
    return {"ensemble": norms_e, "biased": norms_b}


# ---------------------------------------------------------------------------
# training loop


def train(
    model: ReadModel,
    train_set: Dataset,
    dev_set: Dataset,
    cfg: TrainConfig,
    callback=None,
) -> tuple[Checkpoint, list[dict]]:
    """Train jointly on both objectives and keep the best dev epoch.

    Each step computes ``L_e`` and ``L_b`` on the same batch, runs one
    backward pass on their sum and one AdamW update over every parameter.
    After each epoch the main path is scored on ``dev_set``; the returned
    checkpoint holds the epoch with the highest dev accuracy (earliest on
    ties). ``model`` is left at its final-epoch weights.
    """
    if len(train_set) == 0 or len(dev_set) == 0:
        raise DataError("train and dev sets must be non-empty")
    if cfg.epochs == 0:
        return Checkpoint.from_model(model, train_config=cfg.to_dict()), []

    rng = np.random.default_rng(np.random.SeedSequence(cfg.seed))
    params = model.params
    opt = AdamWState.zeros(params)
    steps_per_epoch = math.ceil(len(train_set) / cfg.batch_size)
    total = cfg.epochs * steps_per_epoch
    vocab, max_len = model.config.vocab_size, model.config.max_seq_len
    dropout_rng = rng if model.config.dropout > 0 else None
    is_read = model.config.method == "read"

    best: Checkpoint | None = None
    history: list[dict] = []
    step = 0
    for epoch in range(cfg.epochs):
        order = rng.permutation(len(train_set))
        sums = {"loss_ensemble": 0.0, "loss_biased": 0.0}
        partition_log = None
        for start in range(0, len(order), cfg.batch_size):
            batch = encode_batch([train_set.examples[j] for j in order[start : start + cfg.batch_size]], vocab, max_len)
            try:
                losses = read_loss(model, batch, rng=dropout_rng)
            except DivergenceError:
                raise
            except NumericError as exc:
                raise DivergenceError(step, str(exc)) from None
            values = losses.values()
            if not math.isfinite(values["loss_total"]):
                raise DivergenceError(step)
            if cfg.debug_partitions and is_read:
                partition_log = _debug_backward(model, losses)
            else:
                model.zero_grad()
                ad.backward(losses.total)
            grads = {n: p.grad for n, p in params.items()}
            if cfg.grad_clip > 0:
                clip_global_norm(grads, cfg.grad_clip)
            try:
                adamw_step(params, grads, opt, lr_at(step, total, cfg.learning_rate, cfg.warmup_steps),
                           weight_decay=cfg.weight_decay)
            except NumericError as exc:
                raise DivergenceError(step, str(exc)) from None
            for key in sums:
                sums[key] += values[key]
            step += 1
        n_steps = steps_per_epoch
        dev_acc = accuracy(model, dev_set, cfg.eval_batch_size)
        record = {
            "epoch": epoch,
            "step": step,
            "loss_ensemble": sums["loss_ensemble"] / n_steps,
            "loss_biased": sums["loss_biased"] / n_steps,
            "dev_accuracy": dev_acc,
        }
        if partition_log is not None:
            record["grad_norms"] = partition_log
        history.append(record)
        log.info("epoch %d step %d L_e=%.4f L_b=%.4f dev_acc=%.4f", epoch, step,
                 record["loss_ensemble"], record["loss_biased"], dev_acc)
        if callback is not None:
            callback(model, record)
        if best is None or dev_acc > best.dev_metric:
            best = Checkpoint.from_model(model, train_config=cfg.to_dict(), step=step, dev_metric=dev_acc, epoch=epoch)
    return best, history
