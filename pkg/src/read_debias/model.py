"""Transformer encoder with residual-attention ensemble layers.

The bottom ``num_ensemble_layers`` layers carry two query/key projections
(main and biased) that read the same hidden states and share the value
projection, output projection, feed-forward block and normalization. The
remaining layers hold a single (main) attention. Two heads read the
first-token state: the main head after the last layer, the biased head
after the last ensemble layer.
"""

from __future__ import annotations

import math
from collections import OrderedDict
from dataclasses import asdict, dataclass, fields
from enum import Enum
from typing import Iterator

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .data import Batch
from .errors import ConfigError, DataError


class ForwardMode(str, Enum):
    BIAS = "bias"
    ENSEMBLE = "ensemble"
    MAIN = "main"


class Partition(str, Enum):
    SHARED = "shared"
    MAIN_ONLY = "main_only"
    BIAS_ONLY = "bias_only"


METHODS = ("read", "vanilla")
NORM_POSITIONS = ("post", "pre")


@dataclass(frozen=True)
class ModelConfig:
    num_layers: int = 6
    num_ensemble_layers: int = 4
    model_dim: int = 64
    num_heads: int = 4
    ffn_dim: int = 256
    vocab_size: int = 200
    max_seq_len: int = 64
    num_classes: int = 2
    alpha: float = 0.1
    dropout: float = 0.0
    method: str = "read"
    num_types: int = 2
    init_std: float = 0.02
    layer_norm_eps: float = 1e-12
    norm_position: str = "post"

    def __post_init__(self) -> None:
        if self.method not in METHODS:
            raise ConfigError(f"method must be one of {METHODS}, got {self.method!r}")
        if self.norm_position not in NORM_POSITIONS:
            raise ConfigError(f"norm_position must be one of {NORM_POSITIONS}, got {self.norm_position!r}")
        if self.num_layers < 1:
            raise ConfigError("num_layers must be positive")
        if self.method == "read" and not 1 <= self.num_ensemble_layers <= self.num_layers:
            raise ConfigError(
                f"num_ensemble_layers must lie in [1, {self.num_layers}], got {self.num_ensemble_layers}"
            )
        if self.model_dim < 1 or self.num_heads < 1 or self.model_dim % self.num_heads:
            raise ConfigError(f"num_heads {self.num_heads} must divide model_dim {self.model_dim}")
        if not 0.0 < self.alpha < 1.0:
            raise ConfigError(f"alpha must lie strictly inside (0, 1), got {self.alpha}")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError(f"dropout must lie in [0, 1), got {self.dropout}")
        for name in ("ffn_dim", "vocab_size", "max_seq_len", "num_classes", "num_types"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive")

    @property
    def head_dim(self) -> int:
        return self.model_dim // self.num_heads

    @property
    def ensemble_layers(self) -> int:
        """Number of dual-attention layers actually built (0 for vanilla)."""
        return self.num_ensemble_layers if self.method == "read" else 0

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, values: dict) -> "ModelConfig":
        names = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in values.items() if k in names})


@dataclass
class Linear:
    weight: Tensor  # [in, out]
    bias: Tensor

    def __call__(self, x: Tensor) -> Tensor:
        return ad.linear(x, self.weight, self.bias)


@dataclass
class Norm:
    gain: Tensor
    shift: Tensor


class ReadModel:
    """Parameter container plus structure; see :func:`run_forward`."""

    def __init__(self, config: ModelConfig, params: "OrderedDict[str, Tensor]"):
        self.config = config
        self.params = params

    # -- construction --------------------------------------------------
    @classmethod
    def init(cls, config: ModelConfig, seed: int = 0) -> "ReadModel":
        rng = np.random.default_rng(np.random.SeedSequence(seed))
        params: OrderedDict[str, Tensor] = OrderedDict()
        for name, shape, kind in parameter_layout(config):
            if kind == "normal":
                data = rng.normal(0.0, config.init_std, size=shape)
            elif kind == "ones":
                data = np.ones(shape)
            else:
                data = np.zeros(shape)
            params[name] = Tensor(data, requires_grad=True, name=name)
        return cls(config, params)

    # -- access --------------------------------------------------------
    def __getitem__(self, name: str) -> Tensor:
        return self.params[name]

    def named_parameters(self) -> Iterator[tuple[str, Tensor]]:
        return iter(self.params.items())

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def linear(self, prefix: str) -> Linear:
        return Linear(self.params[prefix + ".weight"], self.params[prefix + ".bias"])

    def norm(self, prefix: str) -> Norm:
        return Norm(self.params[prefix + ".gain"], self.params[prefix + ".shift"])

    def partition_of(self, name: str) -> Partition:
        return partition_of(name, self.config)

    def names_in(self, part: Partition) -> list[str]:
        return [n for n in self.params if self.partition_of(n) is part]

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.zero_grad()

    def copy(self) -> "ReadModel":
        return ReadModel(
            self.config,
            OrderedDict((n, Tensor(p.data.copy(), requires_grad=True, name=n)) for n, p in self.params.items()),
        )

    def state_dict(self) -> "OrderedDict[str, np.ndarray]":
        return OrderedDict((n, p.data.copy()) for n, p in self.params.items())

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        for n, p in self.params.items():
            p.data = np.array(state[n], dtype=ad.DTYPE, copy=True)

    def tie_biased_to_main(self) -> None:
        """Copy main Q/K into the biased Q/K of every ensemble layer."""
        for i in range(self.config.ensemble_layers):
            for proj in ("query", "key"):
                for part in ("weight", "bias"):
                    src = self.params[f"layers.{i}.attn.{proj}_main.{part}"]
                    self.params[f"layers.{i}.attn.{proj}_bias.{part}"].data = src.data.copy()


def parameter_layout(config: ModelConfig) -> list[tuple[str, tuple[int, ...], str]]:
    """Ordered (name, shape, init) triples for every parameter of ``config``."""
    d, f, c = config.model_dim, config.ffn_dim, config.num_classes
    out: list[tuple[str, tuple[int, ...], str]] = [
        ("embed.token", (config.vocab_size, d), "normal"),
        ("embed.position", (config.max_seq_len, d), "normal"),
        ("embed.type", (config.num_types, d), "normal"),
        ("embed.norm.gain", (d,), "ones"),
        ("embed.norm.shift", (d,), "zeros"),
    ]

    def lin(prefix, n_in, n_out):
        out.append((prefix + ".weight", (n_in, n_out), "normal"))
        out.append((prefix + ".bias", (n_out,), "zeros"))

    def norm(prefix):
        out.append((prefix + ".gain", (d,), "ones"))
        out.append((prefix + ".shift", (d,), "zeros"))

    for i in range(config.num_layers):
        p = f"layers.{i}"
        lin(f"{p}.attn.query_main", d, d)
        lin(f"{p}.attn.key_main", d, d)
        if i < config.ensemble_layers:
            lin(f"{p}.attn.query_bias", d, d)
            lin(f"{p}.attn.key_bias", d, d)
        lin(f"{p}.attn.value", d, d)
        lin(f"{p}.attn.output", d, d)
        norm(f"{p}.attn_norm")
        lin(f"{p}.ffn.inner", d, f)
        lin(f"{p}.ffn.outer", f, d)
        norm(f"{p}.ffn_norm")
    if config.norm_position == "pre":
        norm("final_norm")
    lin("head_main.pooler", d, d)
    lin("head_main.classifier", d, c)
    if config.method == "read":
        lin("head_bias.pooler", d, d)
        lin("head_bias.classifier", d, c)
    return out


def partition_of(name: str, config: ModelConfig) -> Partition:
    if name.startswith("head_bias.") or "_bias." in name:
        return Partition.BIAS_ONLY
    if name.startswith(("embed.", "final_norm.")):
        return Partition.SHARED
    if name.startswith("head_main."):
        return Partition.MAIN_ONLY
    layer = int(name.split(".")[1])
    if layer >= config.ensemble_layers or "_main." in name:
        return Partition.MAIN_ONLY
    return Partition.SHARED


@dataclass(frozen=True)
class ParameterCounts:
    shared: int
    main_only: int
    bias_only: int

    @property
    def total(self) -> int:
        return self.shared + self.main_only + self.bias_only

    @property
    def bias_only_fraction(self) -> float:
        return self.bias_only / self.total

    @property
    def overhead(self) -> float:
        """Extra parameters relative to the deployed main model."""
        return self.bias_only / (self.shared + self.main_only)


def count_parameters(config: ModelConfig) -> ParameterCounts:
    counts = {p: 0 for p in Partition}
    for name, shape, _ in parameter_layout(config):
        counts[partition_of(name, config)] += math.prod(shape)
    return ParameterCounts(counts[Partition.SHARED], counts[Partition.MAIN_ONLY], counts[Partition.BIAS_ONLY])


# ---------------------------------------------------------------------------
# attention


def _split_heads(x: Tensor, num_heads: int) -> Tensor:
    b, n, d = x.shape
    return ad.transpose(ad.reshape(x, (b, n, num_heads, d // num_heads)), (0, 2, 1, 3))


def _as_batched(h: Tensor, mask: np.ndarray | None) -> tuple[Tensor, np.ndarray, bool]:
    squeeze = h.ndim == 2
    if squeeze:
        h = ad.reshape(h, (1,) + h.shape)
    n = h.shape[1]
    if mask is None:
        mask = np.ones((h.shape[0], n), dtype=bool)
    mask = np.asarray(mask, dtype=bool).reshape(h.shape[0], n)
    return h, mask, squeeze


def attention_probs(h: Tensor, query: Linear, key: Linear, mask: np.ndarray | None, num_heads: int) -> Tensor:
    """Per-head scaled dot-product attention probabilities.

    ``h`` is ``[n, d]`` or ``[B, n, d]``; ``mask`` marks real (non-pad) key
    positions. Returns ``[h, n, n]`` or ``[B, h, n, n]``; padded key columns
    are exactly zero.
    """
    hb, mask, squeeze = _as_batched(h, mask)
    dh = hb.shape[-1] // num_heads
    q = _split_heads(query(hb), num_heads)
    k = _split_heads(key(hb), num_heads)
    scores = ad.scale(ad.matmul(q, ad.transpose(k, (0, 1, 3, 2))), 1.0 / math.sqrt(dh))
    probs = ad.softmax_rows(scores, mask[:, None, None, :])
    if squeeze:
        probs = ad.reshape(probs, probs.shape[1:])
    return probs


def ensemble_attention(a_main: Tensor, a_bias: Tensor, alpha: float) -> Tensor:
    """``(1 - alpha) * a_main + alpha * a_bias`` with no gradient into ``a_bias``."""
    if not 0.0 <= alpha <= 1.0:
        raise ConfigError(f"ensemble ratio must lie in [0, 1], got {alpha}")
    if a_main.shape != a_bias.shape:
        raise ConfigError(f"attention shapes differ: {a_main.shape} vs {a_bias.shape}")
    return ad.add(ad.scale(a_main, 1.0 - alpha), ad.scale(ad.stop_gradient(a_bias), alpha))


# ---------------------------------------------------------------------------
# forward


def _check_batch(model: ReadModel, batch: Batch) -> None:
    cfg = model.config
    ids = batch.token_ids
    if ids.ndim != 2 or ids.shape[0] == 0:
        raise DataError(f"token_ids must be a non-empty [B, n] array, got {ids.shape}")
    if ids.shape[1] > cfg.max_seq_len:
        raise DataError(f"sequence length {ids.shape[1]} exceeds max_seq_len {cfg.max_seq_len}")
    if ids.min() < 0 or ids.max() >= cfg.vocab_size:
        raise DataError(f"token ids must lie in [0, {cfg.vocab_size})")
    if batch.type_ids.min() < 0 or batch.type_ids.max() >= cfg.num_types:
        raise DataError(f"type ids must lie in [0, {cfg.num_types})")
    if not batch.mask[:, 0].all():
        raise DataError("every sequence needs a real first token")


def embed(model: ReadModel, batch: Batch, rng: np.random.Generator | None = None) -> Tensor:
    cfg = model.config
    n = batch.token_ids.shape[1]
    x = ad.embedding(model["embed.token"], batch.token_ids)
    x = ad.add(x, ad.getitem(model["embed.position"], slice(0, n)))
    x = ad.add(x, ad.embedding(model["embed.type"], batch.type_ids))
    norm = model.norm("embed.norm")
    x = ad.layer_normalize(x, norm.gain, norm.shift, cfg.layer_norm_eps)
    return ad.dropout(x, cfg.dropout, rng)


def layer_attention(
    model: ReadModel, i: int, x: Tensor, mask: np.ndarray, mode: ForwardMode, alpha: float
) -> Tensor:
    """Attention distribution layer ``i`` uses under ``mode``."""
    cfg = model.config
    p = f"layers.{i}.attn"
    dual = i < cfg.ensemble_layers
    main_q, main_k = model.linear(f"{p}.query_main"), model.linear(f"{p}.key_main")
    if mode is ForwardMode.MAIN or not dual:
        return attention_probs(x, main_q, main_k, mask, cfg.num_heads)
    bias_q, bias_k = model.linear(f"{p}.query_bias"), model.linear(f"{p}.key_bias")
    if mode is ForwardMode.BIAS:
        return attention_probs(x, bias_q, bias_k, mask, cfg.num_heads)
    a_main = attention_probs(x, main_q, main_k, mask, cfg.num_heads)
    with ad.no_grad():
        a_bias = attention_probs(x, bias_q, bias_k, mask, cfg.num_heads)
    return ensemble_attention(a_main, a_bias, alpha)


def encoder_layer(
    model: ReadModel,
    i: int,
    x: Tensor,
    mask: np.ndarray,
    mode: ForwardMode,
    alpha: float,
    rng: np.random.Generator | None = None,
    record: dict | None = None,
) -> Tensor:
    """One block. ``post``: normalize after each residual add (BERT);
    ``pre``: normalize each sublayer's input and keep the residual stream raw."""
    cfg = model.config
    p = f"layers.{i}"
    pre = cfg.norm_position == "pre"

    def normalize(t: Tensor, prefix: str) -> Tensor:
        norm = model.norm(prefix)
        return ad.layer_normalize(t, norm.gain, norm.shift, cfg.layer_norm_eps)

    h = normalize(x, f"{p}.attn_norm") if pre else x
    probs = layer_attention(model, i, h, mask, mode, alpha)
    if record is not None:
        record[i] = probs.data
    probs = ad.dropout(probs, cfg.dropout, rng)
    b, n, d = x.shape
    v = _split_heads(model.linear(f"{p}.attn.value")(h), cfg.num_heads)
    ctx = ad.reshape(ad.transpose(ad.matmul(probs, v), (0, 2, 1, 3)), (b, n, d))
    out = ad.dropout(model.linear(f"{p}.attn.output")(ctx), cfg.dropout, rng)
    x = ad.add(x, out) if pre else normalize(ad.add(x, out), f"{p}.attn_norm")
    h = normalize(x, f"{p}.ffn_norm") if pre else x
    ff = model.linear(f"{p}.ffn.outer")(ad.gelu(model.linear(f"{p}.ffn.inner")(h)))
    ff = ad.dropout(ff, cfg.dropout, rng)
    return ad.add(x, ff) if pre else normalize(ad.add(x, ff), f"{p}.ffn_norm")


def classify(model: ReadModel, x: Tensor, head: str, rng: np.random.Generator | None = None) -> Tensor:
    first = ad.getitem(x, (slice(None), 0))
    if model.config.norm_position == "pre":
        norm = model.norm("final_norm")
        first = ad.layer_normalize(first, norm.gain, norm.shift, model.config.layer_norm_eps)
    pooled = ad.tanh(model.linear(f"{head}.pooler")(first))
    pooled = ad.dropout(pooled, model.config.dropout, rng)
    return model.linear(f"{head}.classifier")(pooled)


def run_forward(
    model: ReadModel,
    batch: Batch,
    mode: ForwardMode | str = ForwardMode.MAIN,
    *,
    alpha: float | None = None,
    rng: np.random.Generator | None = None,
    record: dict | None = None,
) -> Tensor:
    """Logits ``[B, C]`` under one forward mode.

    BIAS runs the ensemble layers with biased attention into the biased
    head; ENSEMBLE runs them with ensemble attention and the rest with main
    attention into the main head; MAIN uses main attention throughout.
    ``alpha`` overrides the configured ensemble ratio (0 and 1 allowed).
    ``record``, when given, receives each layer's attention probabilities.
    """
    mode = ForwardMode(mode)
    cfg = model.config
    if cfg.method == "vanilla":
        if mode is ForwardMode.BIAS:
            raise ConfigError("the vanilla model has no biased path")
        mode = ForwardMode.MAIN
    _check_batch(model, batch)
    alpha = cfg.alpha if alpha is None else alpha
    x = embed(model, batch, rng)
    depth = cfg.ensemble_layers if mode is ForwardMode.BIAS else cfg.num_layers
    for i in range(depth):
        x = encoder_layer(model, i, x, batch.mask, mode, alpha, rng, record)
    return classify(model, x, "head_bias" if mode is ForwardMode.BIAS else "head_main", rng)
