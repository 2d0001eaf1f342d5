"""Dense float64 tensors with tape-based reverse-mode differentiation.

Every primitive that touches a tensor requiring gradients records a node
carrying its inputs and a backward rule. Nodes get a monotonically
increasing sequence number at creation, so sorting the nodes reachable from
a loss by that number yields a valid topological order (the tape); the
backward pass walks it once in reverse.
"""

from __future__ import annotations

import itertools
import threading
from contextlib import contextmanager
from dataclasses import dataclass
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import DegenerateRowError, DimensionError, LabelError, NumericError, RankError

DTYPE = np.float64

_seq = itertools.count()
_state = threading.local()


def grad_enabled() -> bool:
    return getattr(_state, "enabled", True)


@contextmanager
def no_grad():
    """Disable recording for the enclosed block (thread-local)."""
    prev = grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


class Node:
    __slots__ = ("seq", "inputs", "backward", "op")

    def __init__(self, inputs: tuple["Tensor", ...], backward: Callable, op: str):
        self.seq = next(_seq)
        self.inputs = inputs
        self.backward = backward
        self.op = op


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "node", "name", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=DTYPE)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.node: Node | None = None
        self.name = name

    # -- introspection -------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.item())

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}{tag})"

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.data)

    # -- operators -----------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(as_tensor(other)))

    def __rsub__(self, other):
        return add(as_tensor(other), neg(self))

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other: float):
        return scale(self, 1.0 / float(other))

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes or None)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _record(out_data: np.ndarray, inputs: tuple[Tensor, ...], backward: Callable, op: str) -> Tensor:
    out = Tensor(out_data)
    if grad_enabled() and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        out.node = Node(inputs, backward, op)
    return out


def unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` (inverse of numpy broadcasting)."""
    if grad.shape == shape:
        return grad
    lead = grad.ndim - len(shape)
    if lead:
        grad = grad.sum(axis=tuple(range(lead)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


# ---------------------------------------------------------------------------
# elementwise


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    try:
        out = a.data + b.data
    except ValueError:
        raise DimensionError(f"cannot broadcast shapes {a.shape} and {b.shape}") from None
    sa, sb = a.shape, b.shape
    return _record(out, (a, b), lambda g: (unbroadcast(g, sa), unbroadcast(g, sb)), "add")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    try:
        out = a.data * b.data
    except ValueError:
        raise DimensionError(f"cannot broadcast shapes {a.shape} and {b.shape}") from None
    ad, bd = a.data, b.data
    return _record(out, (a, b), lambda g: (unbroadcast(g * bd, ad.shape), unbroadcast(g * ad, bd.shape)), "mul")


def scale(x: Tensor, c: float) -> Tensor:
    return _record(x.data * c, (x,), lambda g: (g * c,), "scale")


def neg(x: Tensor) -> Tensor:
    return _record(-x.data, (x,), lambda g: (-g,), "neg")


def exp(x: Tensor) -> Tensor:
    y = np.exp(x.data)
    return _record(y, (x,), lambda g: (g * y,), "exp")


def log(x: Tensor) -> Tensor:
    xd = x.data
    return _record(np.log(xd), (x,), lambda g: (g / xd,), "log")


def tanh(x: Tensor) -> Tensor:
    y = np.tanh(x.data)
    return _record(y, (x,), lambda g: (g * (1.0 - y * y),), "tanh")


_GELU_C = np.sqrt(2.0 / np.pi)


def gelu(x: Tensor) -> Tensor:
    """GELU, tanh approximation."""
    xd = x.data
    x2 = xd * xd
    u = x2 * 0.044715
    u += 1.0
    u *= xd
    u *= _GELU_C
    t = np.tanh(u, out=u)
    half = t + 1.0
    half *= 0.5
    y = half * xd
    if not (x.requires_grad and grad_enabled()):
        return _record(y, (x,), None, "gelu")
    # derivative built eagerly so backward is one multiply
    x2 *= 3 * 0.044715
    x2 += 1.0
    x2 *= _GELU_C
    t *= t
    np.subtract(1.0, t, out=t)
    t *= x2
    t *= xd
    t *= 0.5
    t += half

    return _record(y, (x,), lambda g: (g * t,), "gelu")


def dropout(x: Tensor, rate: float, rng: np.random.Generator | None) -> Tensor:
    """Inverted dropout; identity when ``rate`` is 0 or no generator is given."""
    if rate <= 0.0 or rng is None:
        return x
    keep = (rng.random(x.shape) >= rate) / (1.0 - rate)
    return _record(x.data * keep, (x,), lambda g: (g * keep,), "dropout")


def stop_gradient(x: Tensor) -> Tensor:
    """Same values as ``x``; nothing flows back through the result."""
    frozen = getattr(_state, "frozen", None)
    if frozen is not None:
        return Tensor(frozen.value_for(x.data))
    return Tensor(x.data)


class FrozenStopGradients:
    """Pin every ``stop_gradient`` value to what it was on the first pass.

    The first ``with`` block records each severed value in call order; later
    blocks replay them. A function evaluated under a recorded instance is
    the surrogate whose true derivative is what backward computes, which is
    what a finite-difference check of a stop-gradient objective must use.
    """

    def __init__(self):
        self.values: list[np.ndarray] = []
        self.recorded = False
        self._cursor = 0

    def value_for(self, data: np.ndarray) -> np.ndarray:
        if not self.recorded:
            self.values.append(data.copy())
            return data
        if self._cursor >= len(self.values) or self.values[self._cursor].shape != data.shape:
            raise DimensionError("replayed stop_gradient sequence does not match the recording")
        out = self.values[self._cursor]
        self._cursor += 1
        return out

    def __enter__(self):
        self._prev = getattr(_state, "frozen", None)
        self._cursor = 0
        _state.frozen = self
        return self

    def __exit__(self, *exc):
        _state.frozen = self._prev
        self.recorded = True
        return False


# ---------------------------------------------------------------------------
# reductions and shape


def tsum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    shape = x.shape

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _record(np.sum(x.data, axis=axis, keepdims=keepdims), (x,), backward, "sum")


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    n = x.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
    return scale(tsum(x, axis, keepdims), 1.0 / float(n))


def reshape(x: Tensor, shape) -> Tensor:
    old = x.shape
    try:
        out = x.data.reshape(shape)
    except ValueError:
        raise DimensionError(f"cannot reshape {old} to {tuple(shape)}") from None
    return _record(out, (x,), lambda g: (g.reshape(old),), "reshape")


def transpose(x: Tensor, axes=None) -> Tensor:
    axes = tuple(axes) if axes is not None else tuple(reversed(range(x.ndim)))
    inv = tuple(np.argsort(axes))
    return _record(np.transpose(x.data, axes), (x,), lambda g: (np.transpose(g, inv),), "transpose")


def getitem(x: Tensor, idx) -> Tensor:
    shape = x.shape

    def backward(g):
        full = np.zeros(shape, dtype=DTYPE)
        np.add.at(full, idx, g)
        return (full,)

    return _record(x.data[idx], (x,), backward, "getitem")


def embedding(weight: Tensor, ids: np.ndarray) -> Tensor:
    """Gather rows of ``weight`` at integer ``ids`` (any shape)."""
    ids = np.asarray(ids)
    vocab = weight.shape[0]
    if ids.size and (ids.min() < 0 or ids.max() >= vocab):
        raise DimensionError(f"embedding ids outside [0, {vocab})")

    def backward(g):
        full = np.zeros(weight.shape, dtype=DTYPE)
        np.add.at(full, ids.reshape(-1), g.reshape(-1, weight.shape[1]))
        return (full,)

    return _record(weight.data[ids], (weight,), backward, "embedding")


# ---------------------------------------------------------------------------
# linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product, batched over leading axes like ``numpy.matmul``."""
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    try:
        out = np.matmul(a.data, b.data)
    except ValueError:
        raise DimensionError(f"matmul shape mismatch: {a.shape} @ {b.shape}") from None
    ad, bd = a.data, b.data

    def backward(g):
        ga = np.matmul(g, np.swapaxes(bd, -1, -2)) if a.requires_grad else None
        gb = np.matmul(np.swapaxes(ad, -1, -2), g) if b.requires_grad else None
        return (
            None if ga is None else unbroadcast(ga, ad.shape),
            None if gb is None else unbroadcast(gb, bd.shape),
        )

    return _record(out, (a, b), backward, "matmul")


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """``x @ weight + bias`` over the last axis of ``x``; weight is [in, out]."""
    if x.shape[-1] != weight.shape[0]:
        raise DimensionError(f"linear shape mismatch: {x.shape} @ {weight.shape}")
    xd, wd = x.data, weight.data
    lead = xd.shape[:-1]
    x2 = xd.reshape(-1, xd.shape[-1])  # one 2-D GEMM is much faster than a batched one
    out = x2 @ wd
    if bias is not None:
        out += bias.data
    out = out.reshape(*lead, wd.shape[1])
    inputs = (x, weight) if bias is None else (x, weight, bias)

    def backward(g):
        g2 = g.reshape(-1, g.shape[-1])
        gx = (g2 @ wd.T).reshape(xd.shape) if x.requires_grad else None
        gw = x2.T @ g2 if weight.requires_grad else None
        if bias is None:
            return gx, gw
        return gx, gw, g2.sum(axis=0)

    return _record(out, inputs, backward, "linear")


# ---------------------------------------------------------------------------
# normalisation and probabilities


def softmax_rows(x: Tensor, mask: np.ndarray | Tensor | None = None) -> Tensor:
    """Softmax over the last axis; ``mask`` marks entries to keep (True).

    Masked entries come out as exact zeros. Max-subtraction keeps the
    exponentials bounded.
    """
    xd = x.data
    if mask is not None:
        mask = np.asarray(mask.data if isinstance(mask, Tensor) else mask, dtype=bool)
        keep = np.broadcast_to(mask, xd.shape)
        if not keep.any(axis=-1).all():
            raise DegenerateRowError("softmax row has every entry masked")
        shifted = np.where(keep, xd, -np.inf)
        m = shifted.max(axis=-1, keepdims=True)
        e = np.where(keep, np.exp(shifted - m), 0.0)
    else:
        m = xd.max(axis=-1, keepdims=True)
        e = np.exp(xd - m)
    y = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return _record(y, (x,), backward, "softmax")


def log_softmax(x: Tensor) -> Tensor:
    xd = x.data
    m = xd.max(axis=-1, keepdims=True)
    lse = m + np.log(np.exp(xd - m).sum(axis=-1, keepdims=True))
    y = xd - lse
    p = np.exp(y)

    def backward(g):
        return (g - p * g.sum(axis=-1, keepdims=True),)

    return _record(y, (x,), backward, "log_softmax")


def layer_normalize(x: Tensor, gain: Tensor, shift: Tensor, eps: float = 1e-12) -> Tensor:
    """Standardize each vector along the last axis, then ``gain * z + shift``."""
    d = x.shape[-1]
    if gain.shape != (d,) or shift.shape != (d,):
        raise DimensionError(f"layer norm params {gain.shape}/{shift.shape} do not match last dim {d}")
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    z = xc * inv
    gd = gain.data
    out = z * gd + shift.data

    def backward(g):
        gz = g * gd
        gx = inv * (gz - gz.mean(axis=-1, keepdims=True) - z * (gz * z).mean(axis=-1, keepdims=True))
        lead = tuple(range(g.ndim - 1))
        return gx, (g * z).sum(axis=lead), g.sum(axis=lead)

    return _record(out, (x, gain, shift), backward, "layer_norm")


def cross_entropy(log_probs: Tensor, labels: Sequence[int] | np.ndarray) -> Tensor:
    """Mean negative log-probability of the gold class over the batch."""
    if log_probs.ndim != 2:
        raise DimensionError(f"cross_entropy expects [B, C] log-probs, got {log_probs.shape}")
    labels = np.asarray(labels, dtype=np.int64)
    b, c = log_probs.shape
    if labels.shape != (b,):
        raise LabelError(f"expected {b} labels, got shape {labels.shape}")
    if labels.size and (labels.min() < 0 or labels.max() >= c):
        raise LabelError(f"label index outside [0, {c})")
    lp = log_probs.data
    if not np.all(np.abs(np.exp(lp).sum(axis=1) - 1.0) <= 1e-9):
        raise NumericError("cross_entropy rows are not normalized log-probabilities")
    rows = np.arange(b)
    loss = -lp[rows, labels].mean()

    def backward(g):
        gl = np.zeros_like(lp)
        gl[rows, labels] = -g / b
        return (gl,)

    return _record(np.asarray(loss), (log_probs,), backward, "cross_entropy")


# ---------------------------------------------------------------------------
# backward


class Tape:
    """Nodes reachable from a loss, in recording (topological) order."""

    def __init__(self, tensors: list[Tensor]):
        self.tensors = tensors

    @classmethod
    def from_loss(cls, loss: Tensor) -> "Tape":
        seen: set[int] = set()
        found: list[Tensor] = []
        stack = [loss]
        while stack:
            t = stack.pop()
            if id(t) in seen or not t.requires_grad:
                continue
            seen.add(id(t))
            found.append(t)
            if t.node is not None:
                stack.extend(t.node.inputs)
        found.sort(key=lambda t: -1 if t.node is None else t.node.seq)
        return cls(found)

    def __len__(self) -> int:
        return len(self.tensors)


def backward(loss: Tensor) -> None:
    """Populate ``.grad`` on every requires-grad tensor feeding ``loss``.

    Leaf gradients accumulate into any existing ``.grad``; intermediate
    tensors get their gradient assigned.
    """
    if loss.size != 1:
        raise RankError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    tape = Tape.from_loss(loss)
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for t in reversed(tape.tensors):
        g = grads.get(id(t))
        if g is None:
            continue
        if t.node is None:
            t.grad = g.copy() if t.grad is None else t.grad + g
            continue
        t.grad = g
        for inp, gi in zip(t.node.inputs, t.node.backward(g)):
            if gi is None or not inp.requires_grad:
                continue
            key = id(inp)
            prev = grads.get(key)
            grads[key] = gi if prev is None else prev + gi


# ---------------------------------------------------------------------------
# finite-difference checking


@dataclass
class GradCheckReport:
    max_rel_error: float
    passed: bool
    tol: float
    num_checked: int
    worst_index: tuple[int, ...] | None = None
    analytic: float = 0.0
    numeric: float = 0.0

    def __str__(self) -> str:
        verdict = "PASS" if self.passed else "FAIL"
        return f"{verdict} max_rel_error={self.max_rel_error:.3e} (tol {self.tol:g}, {self.num_checked} coords)"


def check_gradients(
    fn: Callable[[Tensor], Tensor],
    x: Tensor,
    eps: float = 1e-6,
    tol: float = 1e-5,
    *,
    max_coords: int | None = None,
    rng: np.random.Generator | None = None,
    floor: float = 1e-3,
) -> GradCheckReport:
    """Compare backward against central differences, coordinate by coordinate.

    ``fn`` must map ``x`` to a scalar tensor; it may also read other tensors,
    and ``x`` is perturbed in place so closures over model parameters work.
    The relative error per coordinate is ``|a - n| / max(|a|, |n|, floor)``.
    """
    was = x.requires_grad
    x.requires_grad = True
    x.grad = None
    try:
        loss = fn(x)
        if loss.size != 1:
            raise RankError(f"check_gradients needs a scalar function, got {loss.shape}")
        backward(loss)
        analytic = np.zeros_like(x.data) if x.grad is None else x.grad.copy()

        coords = list(np.ndindex(*x.shape))
        if max_coords is not None and len(coords) > max_coords:
            rng = rng or np.random.default_rng(0)
            pick = rng.choice(len(coords), size=max_coords, replace=False)
            coords = [coords[i] for i in sorted(pick)]

        worst, worst_idx, worst_a, worst_n = 0.0, None, 0.0, 0.0
        with no_grad():
            for idx in coords:
                orig = x.data[idx]
                x.data[idx] = orig + eps
                fp = fn(x).item()
                x.data[idx] = orig - eps
                fm = fn(x).item()
                x.data[idx] = orig
                num = (fp - fm) / (2 * eps)
                a = analytic[idx]
                err = abs(a - num) / max(abs(a), abs(num), floor)
                if not np.isfinite(err):
                    err = np.inf
                if err > worst or worst_idx is None:
                    worst, worst_idx, worst_a, worst_n = err, idx, a, num
    finally:
        x.requires_grad = was
        x.grad = None
    return GradCheckReport(float(worst), bool(worst <= tol), tol, len(coords), worst_idx, float(worst_a), float(worst_n))


def parameters_finite(params: Iterable[Tensor]) -> bool:
    return all(np.isfinite(p.data).all() for p in params)
