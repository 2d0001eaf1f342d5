"""Product-of-experts training objective, inference rule and footnote analysis."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .data import Batch
from .errors import DataError, DomainError, NumericError
from .model import ForwardMode, ReadModel, run_forward


@dataclass
class LossBreakdown:
    ensemble: Tensor  # L_e
    biased: Tensor | None  # L_b; None for the vanilla objective
    total: Tensor

    def values(self) -> dict[str, float]:
        return {
            "loss_ensemble": self.ensemble.item(),
            "loss_biased": 0.0 if self.biased is None else self.biased.item(),
            "loss_total": self.total.item(),
        }


def _log_normalize(x: Tensor) -> Tensor:
    return ad.log_softmax(x)


def poe_combine(log_pm: Tensor, log_pb: Tensor) -> Tensor:
    """Log of the renormalized product ``p_m * p_b``, row by row.

    The biased factor is frozen: gradients only reach ``log_pm``.
    """
    if log_pm.shape != log_pb.shape:
        raise DataError(f"expert shapes differ: {log_pm.shape} vs {log_pb.shape}")
    if not (np.isfinite(log_pm.data).all() and np.isfinite(log_pb.data).all()):
        raise NumericError("poe_combine received non-finite log-probabilities")
    return _log_normalize(ad.add(log_pm, ad.stop_gradient(log_pb)))


def read_loss(
    model: ReadModel,
    batch: Batch,
    alpha: float | None = None,
    rng: np.random.Generator | None = None,
) -> LossBreakdown:
    """``L_e + L_b`` on one batch.

    A single biased forward pass feeds both ``L_b`` and the frozen expert
    inside ``L_e``. The vanilla configuration reduces to main-path cross
    entropy.
    """
    if len(batch) == 0:
        raise DataError("read_loss needs a non-empty batch")
    if model.config.method == "vanilla":
        loss = ad.cross_entropy(ad.log_softmax(run_forward(model, batch, ForwardMode.MAIN, rng=rng)), batch.labels)
        return LossBreakdown(loss, None, loss)
    log_pb = ad.log_softmax(run_forward(model, batch, ForwardMode.BIAS, rng=rng))
    loss_b = ad.cross_entropy(log_pb, batch.labels)
    log_pm = ad.log_softmax(run_forward(model, batch, ForwardMode.ENSEMBLE, alpha=alpha, rng=rng))
    loss_e = ad.cross_entropy(poe_combine(log_pm, log_pb), batch.labels)
    return LossBreakdown(loss_e, loss_b, ad.add(loss_e, loss_b))


def argmax_lowest(scores: np.ndarray) -> np.ndarray:
    """Row-wise argmax; ties go to the lowest index."""
    return np.argmax(np.asarray(scores), axis=-1)


def predict(model: ReadModel, batch: Batch) -> np.ndarray:
    """Class indices from the main path alone."""
    with ad.no_grad():
        logits = run_forward(model, batch, ForwardMode.MAIN)
    return argmax_lowest(logits.data)


def infer_residual_distribution(p_e, p_b) -> np.ndarray:
    """Main-model distribution implied by a multiplicative ensemble.

    Solving ``p_e ∝ p_b * p_m`` for ``p_m`` gives ``normalize(p_e / p_b)``.
    Tiny shifts in a near-zero entry of ``p_b`` swing the result wildly:
    ``p_e=[1e-8, 1-1e-8]`` and ``p_b=[1e-6, 1-1e-6]`` give roughly
    ``[0.0099, 0.9901]``, while swapping the two arguments gives
    ``[0.9901, 0.0099]``.
    """
    p_e = np.asarray(p_e, dtype=np.float64)
    p_b = np.asarray(p_b, dtype=np.float64)
    if p_e.shape != p_b.shape:
        raise DomainError(f"distribution shapes differ: {p_e.shape} vs {p_b.shape}")
    if np.any(p_b <= 0):
        raise DomainError("p_b must be strictly positive to divide by it")
    if np.any(p_e <= 0):
        raise DomainError("p_e must be strictly positive")
    ratio = p_e / p_b
    return ratio / ratio.sum(axis=-1, keepdims=True)
