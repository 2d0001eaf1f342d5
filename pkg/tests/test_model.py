import math

import numpy as np
import pytest

from read_debias import autodiff as ad
from read_debias.autodiff import Tensor
from read_debias.data import Example, encode_batch
from read_debias.errors import ConfigError, DataError, DegenerateRowError
from read_debias.model import (
    ForwardMode,
    Linear,
    ModelConfig,
    Partition,
    ReadModel,
    attention_probs,
    count_parameters,
    ensemble_attention,
    parameter_layout,
    run_forward,
)

from conftest import TINY

MODES = list(ForwardMode)


def _identity_linear(d):
    return Linear(Tensor(np.eye(d)), Tensor(np.zeros(d)))


def _logits(model, batch, mode, **kw):
    with ad.no_grad():
        return run_forward(model, batch, mode, **kw).data


class TestConfig:
    @pytest.mark.parametrize("bad", [dict(num_ensemble_layers=0), dict(num_ensemble_layers=3),
                                     dict(num_heads=3), dict(alpha=0.0), dict(alpha=1.0),
                                     dict(method="other"), dict(norm_position="middle"), dict(dropout=1.0)])
    def test_invalid(self, bad):
        with pytest.raises(ConfigError):
            ModelConfig(**{**TINY, **bad})

    def test_dict_round_trip(self, tiny_config):
        assert ModelConfig.from_dict(tiny_config.to_dict()) == tiny_config


class TestParameterCounts:
    def test_tiny_hand_count(self):
        # 2*(16+4) projections + pooler 20 + classifier 10
        cfg = ModelConfig(num_layers=2, num_ensemble_layers=1, model_dim=4, num_heads=1, num_classes=2)
        assert count_parameters(cfg).bias_only == 70

    def test_bert_base_shape(self):
        cfg = ModelConfig(num_layers=12, num_ensemble_layers=4, model_dim=768, num_heads=12, ffn_dim=3072,
                          vocab_size=30522, max_seq_len=512, num_classes=3)
        counts = count_parameters(cfg)
        assert counts.bias_only == 4 * 1_181_184 + 590_592 + 2_307 == 5_317_635
        # about a 4.8% increase over the deployed encoder
        assert 0.047 < counts.overhead < 0.050

    @pytest.mark.parametrize("k", [1, 2, 4, 6])
    def test_closed_form(self, k):
        cfg = ModelConfig(num_ensemble_layers=k)
        d, c = cfg.model_dim, cfg.num_classes
        assert count_parameters(cfg).bias_only == k * 2 * (d * d + d) + (d * d + d) + (d * c + c)

    def test_partition_covers_every_parameter(self, tiny_model):
        counts = count_parameters(tiny_model.config)
        assert counts.total == sum(p.data.size for p in tiny_model.parameters())
        names = [n for part in Partition for n in tiny_model.names_in(part)]
        assert sorted(names) == sorted(tiny_model.params)

    def test_vanilla_has_no_biased_parameters(self):
        cfg = ModelConfig(**TINY, method="vanilla")
        assert count_parameters(cfg).bias_only == 0
        assert not any("_bias." in n or n.startswith("head_bias") for n, _, _ in parameter_layout(cfg))

    def test_pre_norm_keeps_bias_count(self):
        post = count_parameters(ModelConfig(**TINY))
        pre = count_parameters(ModelConfig(**TINY, norm_position="pre"))
        assert pre.bias_only == post.bias_only
        assert pre.shared == post.shared + 2 * TINY["model_dim"]

    def test_partition_membership(self, tiny_model):
        part = tiny_model.partition_of
        assert part("layers.0.attn.query_bias.weight") is Partition.BIAS_ONLY
        assert part("head_bias.classifier.bias") is Partition.BIAS_ONLY
        assert part("layers.0.attn.key_main.weight") is Partition.MAIN_ONLY
        assert part("layers.1.attn.value.weight") is Partition.MAIN_ONLY
        assert part("layers.1.ffn_norm.gain") is Partition.MAIN_ONLY
        assert part("layers.0.attn.value.weight") is Partition.SHARED
        assert part("layers.0.ffn.inner.weight") is Partition.SHARED
        assert part("embed.token") is Partition.SHARED


class TestAttentionProbs:
    def test_identical_keys_uniform(self):
        h = Tensor(np.array([[1.0, 2.0], [1.0, 2.0]]))
        probs = attention_probs(h, _identity_linear(2), _identity_linear(2), None, 1).data
        np.testing.assert_allclose(probs[0], [[0.5, 0.5], [0.5, 0.5]], atol=1e-15)

    def test_single_token(self):
        h = Tensor(np.array([[0.3, -1.2]]))
        probs = attention_probs(h, _identity_linear(2), _identity_linear(2), None, 1).data
        assert probs.shape == (1, 1, 1) and probs[0, 0, 0] == 1.0

    def test_two_token_hand_example(self):
        # query [1,0] against keys [0,0] and [ln 2, 0] (d=1 scale) -> [1/3, 2/3]
        h = Tensor(np.array([[1.0], [0.0]]))
        key = Linear(Tensor(np.array([[math.log(2.0)]])), Tensor(np.zeros(1)))
        probs = attention_probs(h, _identity_linear(1), key, None, 1).data
        np.testing.assert_allclose(probs[0, 0], [2 / 3, 1 / 3], atol=1e-15)

    def test_rows_sum_to_one_and_mask_is_exact(self, tiny_model, rng):
        h = Tensor(rng.normal(size=(3, 6, 8)) * 4)
        mask = np.ones((3, 6), dtype=bool)
        mask[1, 4:] = False
        probs = attention_probs(h, tiny_model.linear("layers.0.attn.query_main"),
                                tiny_model.linear("layers.0.attn.key_main"), mask, 2).data
        assert np.max(np.abs(probs.sum(axis=-1) - 1.0)) <= 1e-12
        assert np.all(probs[1, :, :, 4:] == 0.0)

    def test_fully_masked_row(self):
        h = Tensor(np.ones((1, 2, 2)))
        with pytest.raises(DegenerateRowError):
            attention_probs(h, _identity_linear(2), _identity_linear(2), np.zeros((1, 2), bool), 1)


class TestEnsembleAttention:
    def test_hand_example(self):
        a_e = ensemble_attention(Tensor(np.array([0.7, 0.3])), Tensor(np.array([0.1, 0.9])), 0.1).data
        np.testing.assert_allclose(a_e, [0.64, 0.36], atol=1e-15)

    def test_alpha_zero_is_main(self, rng):
        a_m = Tensor(rng.dirichlet(np.ones(5), size=3))
        np.testing.assert_array_equal(ensemble_attention(a_m, Tensor(rng.dirichlet(np.ones(5), size=3)), 0.0).data,
                                      a_m.data)

    def test_fixed_point(self, rng):
        a = rng.dirichlet(np.ones(4), size=2)
        np.testing.assert_allclose(ensemble_attention(Tensor(a), Tensor(a.copy()), 0.37).data, a, atol=1e-15)

    def test_convexity(self, rng):
        a_m, a_b = rng.dirichlet(np.ones(7), size=50), rng.dirichlet(np.ones(7), size=50)
        out = ensemble_attention(Tensor(a_m), Tensor(a_b), 0.1).data
        assert np.max(np.abs(out.sum(-1) - 1.0)) <= 1e-12
        assert out.min() >= 0.0 and out.max() <= 1.0

    def test_no_gradient_into_biased_side(self, rng):
        a_m = Tensor(rng.dirichlet(np.ones(3)), requires_grad=True)
        a_b = Tensor(rng.dirichlet(np.ones(3)), requires_grad=True)
        ad.backward(ad.tsum(ad.mul(ensemble_attention(a_m, a_b, 0.1), Tensor(np.arange(3.0)))))
        assert a_b.grad is None
        np.testing.assert_allclose(a_m.grad, 0.9 * np.arange(3.0))

    @pytest.mark.parametrize("alpha", [-0.1, 1.5])
    def test_alpha_range(self, alpha):
        with pytest.raises(ConfigError):
            ensemble_attention(Tensor(np.ones(2) / 2), Tensor(np.ones(2) / 2), alpha)


class TestPathAlgebra:
    @pytest.fixture(params=["post", "pre"])
    def model(self, request):
        return ReadModel.init(ModelConfig(**TINY, norm_position=request.param), seed=4)

    def test_alpha_zero_ensemble_equals_main(self, model, tiny_batch):
        diff = _logits(model, tiny_batch, "ensemble", alpha=0.0) - _logits(model, tiny_batch, "main")
        assert np.max(np.abs(diff)) <= 1e-10

    def test_tied_projections_make_paths_coincide(self, model, tiny_batch):
        model.tie_biased_to_main()
        diff = _logits(model, tiny_batch, "ensemble") - _logits(model, tiny_batch, "main")
        assert np.max(np.abs(diff)) <= 1e-10

    def test_tied_bias_path_matches_truncated_main(self, tiny_batch):
        # with one layer and matching heads, the biased path is the main path
        cfg = ModelConfig(**{**TINY, "num_layers": 1})
        model = ReadModel.init(cfg, seed=2)
        model.tie_biased_to_main()
        for part in ("pooler", "classifier"):
            for p in ("weight", "bias"):
                model[f"head_bias.{part}.{p}"].data = model[f"head_main.{part}.{p}"].data.copy()
        for mode in ("ensemble", "bias"):
            np.testing.assert_allclose(_logits(model, tiny_batch, mode), _logits(model, tiny_batch, "main"),
                                       atol=1e-10, rtol=0)

    def test_untied_paths_differ(self, model, tiny_batch):
        assert np.any(_logits(model, tiny_batch, "ensemble") != _logits(model, tiny_batch, "main"))

    def test_all_recorded_rows_are_distributions(self, model, tiny_batch):
        for mode in MODES:
            record = {}
            with ad.no_grad():
                run_forward(model, tiny_batch, mode, record=record)
            for probs in record.values():
                assert np.max(np.abs(probs.sum(-1) - 1.0)) <= 1e-12
                pad = ~tiny_batch.mask
                assert np.all(probs.transpose(0, 3, 1, 2)[pad] == 0.0)


class TestSharedWeightIdentity:
    def _perturbed(self, model, name):
        other = model.copy()
        # random, not constant: a uniform shift can be absorbed by layer norm
        other[name].data = other[name].data + np.random.default_rng(0).normal(0.0, 0.5, other[name].shape)
        return other

    def test_shared_changes_all_paths(self, tiny_model, tiny_batch):
        other = self._perturbed(tiny_model, "layers.0.attn.value.weight")
        for mode in MODES:
            assert np.any(_logits(other, tiny_batch, mode) != _logits(tiny_model, tiny_batch, mode))

    @pytest.mark.parametrize("name", ["layers.0.attn.query_bias.weight", "head_bias.classifier.bias"])
    def test_bias_only_never_moves_main(self, tiny_model, tiny_batch, name):
        other = self._perturbed(tiny_model, name)
        np.testing.assert_array_equal(_logits(other, tiny_batch, "main"), _logits(tiny_model, tiny_batch, "main"))

    @pytest.mark.parametrize("name", ["layers.0.attn.key_main.weight", "layers.1.ffn.inner.weight",
                                      "head_main.pooler.weight"])
    def test_main_only_never_moves_bias(self, tiny_model, tiny_batch, name):
        other = self._perturbed(tiny_model, name)
        np.testing.assert_array_equal(_logits(other, tiny_batch, "bias"), _logits(tiny_model, tiny_batch, "bias"))


def _layer_norm(x, g, s, eps=1e-12):
    mu = x.mean(-1, keepdims=True)
    var = ((x - mu) ** 2).mean(-1, keepdims=True)
    return (x - mu) / np.sqrt(var + eps) * g + s


def _gelu(x):
    return 0.5 * x * (1.0 + np.tanh(math.sqrt(2.0 / math.pi) * (x + 0.044715 * x**3)))


def _softmax(z):
    z = z - z.max()
    e = np.exp(z)
    return e / e.sum()


def _trace_ensemble(state, tokens, types, alpha):
    """Loop-by-loop forward of one unpadded sequence, single head, post-norm."""
    W = state
    n = len(tokens)
    x = np.array([W["embed.token"][t] + W["embed.position"][i] + W["embed.type"][types[i]] for i, t in enumerate(tokens)])
    x = np.array([_layer_norm(r, W["embed.norm.gain"], W["embed.norm.shift"]) for r in x])
    for layer in range(2):
        p = f"layers.{layer}.attn"

        def proj(name, rows):
            return np.array([r @ W[f"{p}.{name}.weight"] + W[f"{p}.{name}.bias"] for r in rows])

        d = x.shape[1]
        q, k = proj("query_main", x), proj("key_main", x)
        att = np.array([_softmax(np.array([q[i] @ k[j] for j in range(n)]) / math.sqrt(d)) for i in range(n)])
        if layer == 0:
            qb, kb = proj("query_bias", x), proj("key_bias", x)
            att_b = np.array([_softmax(np.array([qb[i] @ kb[j] for j in range(n)]) / math.sqrt(d)) for i in range(n)])
            att = (1 - alpha) * att + alpha * att_b
        v = proj("value", x)
        ctx = np.array([sum(att[i, j] * v[j] for j in range(n)) for i in range(n)])
        y = proj("output", ctx) + x
        x = np.array([_layer_norm(r, W[f"layers.{layer}.attn_norm.gain"], W[f"layers.{layer}.attn_norm.shift"]) for r in y])
        f = np.array([_gelu(r @ W[f"layers.{layer}.ffn.inner.weight"] + W[f"layers.{layer}.ffn.inner.bias"]) for r in x])
        f = np.array([r @ W[f"layers.{layer}.ffn.outer.weight"] + W[f"layers.{layer}.ffn.outer.bias"] for r in f])
        x = np.array([_layer_norm(r, W[f"layers.{layer}.ffn_norm.gain"], W[f"layers.{layer}.ffn_norm.shift"])
                      for r in x + f])
    pooled = np.tanh(x[0] @ W["head_main.pooler.weight"] + W["head_main.pooler.bias"])
    return pooled @ W["head_main.classifier.weight"] + W["head_main.classifier.bias"]


class TestForward:
    def test_matches_hand_trace(self):
        cfg = ModelConfig(num_layers=2, num_ensemble_layers=1, model_dim=4, num_heads=1, ffn_dim=8,
                          vocab_size=20, max_seq_len=12, init_std=0.5)
        model = ReadModel.init(cfg, seed=0)
        batch = encode_batch([Example([5, 6, 7], [7, 9], 0)], 20, 12)
        expected = _trace_ensemble(model.state_dict(), batch.token_ids[0], batch.type_ids[0], cfg.alpha)
        np.testing.assert_allclose(_logits(model, batch, "ensemble")[0], expected, atol=1e-12, rtol=0)

    def test_padding_does_not_change_logits(self, tiny_model, small_dataset):
        exs = small_dataset.examples[:2]
        alone = encode_batch(exs[:1], 80, 40)
        padded = encode_batch(exs, 80, 40)
        for mode in MODES:
            np.testing.assert_allclose(_logits(tiny_model, padded, mode)[0], _logits(tiny_model, alone, mode)[0],
                                       atol=1e-12)

    def test_shapes(self, tiny_model, tiny_batch):
        for mode in MODES:
            assert _logits(tiny_model, tiny_batch, mode).shape == (4, 2)

    def test_invalid_ids(self, tiny_model):
        batch = encode_batch([Example([5, 6], [7], 0)])
        batch.token_ids[0, 1] = 500
        with pytest.raises(DataError):
            run_forward(tiny_model, batch)

    def test_too_long(self, tiny_model):
        batch = encode_batch([Example(list(range(5, 45)), [7], 0)])
        with pytest.raises(DataError):
            run_forward(tiny_model, batch)

    def test_vanilla_rejects_bias_path(self, tiny_batch):
        model = ReadModel.init(ModelConfig(**TINY, method="vanilla"))
        with pytest.raises(ConfigError):
            run_forward(model, tiny_batch, "bias")

    def test_init_is_seeded(self, tiny_config):
        a, b = ReadModel.init(tiny_config, seed=9), ReadModel.init(tiny_config, seed=9)
        for (na, pa), (nb, pb) in zip(a.named_parameters(), b.named_parameters()):
            assert na == nb
            np.testing.assert_array_equal(pa.data, pb.data)
