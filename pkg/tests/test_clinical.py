"""Clinical tower: embedding, attention, and encoder properties."""

import math

import numpy as np
import pytest

from survtower import autodiff as ad
from survtower import clinical as cl
from survtower.errors import ConfigError, VocabularyError
from survtower.params import ParameterStore


def make_records():
    return [
        cl.ClinicalRecord("p1", ["stage=II", "hist=adeno"], {"age": 61.0}, 400.0, 1),
        cl.ClinicalRecord("p2", ["stage=IV", "hist=squamous"], {"age": 55.0}, 120.0, 1),
        cl.ClinicalRecord("p3", ["stage=II", "hist=squamous"], {"age": None}, 800.0, 0),
    ]


def small_config(**kw):
    defaults = dict(embed_dim=12, heads=3, layers=2, mlp_hidden=24)
    defaults.update(kw)
    return cl.ClinicalEncoderConfig(**defaults)


def build_store(config, vocab, rng=None, dtype=np.float64):
    store = ParameterStore()
    rng = rng or np.random.default_rng(0)
    cl.init_clinical_params(store, config, vocab, ["age"], rng, dtype=dtype)
    return store


class TestVocabulary:
    def test_dense_sorted_indices(self):
        vocab = cl.ClinicalVocabulary.from_records(make_records())
        assert sorted(vocab.items.values()) == list(range(vocab.size))
        assert vocab.size == 4

    def test_unknown_item_named_in_error(self):
        vocab = cl.ClinicalVocabulary.from_records(make_records())
        with pytest.raises(VocabularyError, match="stage=X"):
            vocab.encode_items(["stage=X"])

    def test_record_validation(self):
        with pytest.raises(ConfigError):
            cl.ClinicalRecord("p", ["a=b"], {}, -1.0, 1)
        with pytest.raises(ConfigError):
            cl.ClinicalRecord("p", ["a=b"], {}, 10.0, 2)


class TestEmbedding:
    def test_identity_weight_lookup(self):
        store = ParameterStore()
        store.add("clinical.embed.weight", np.eye(4))
        out = cl.embed_tokens(store, np.array([2]), {})
        np.testing.assert_allclose(out.data, np.eye(4)[[2]])

    def test_shape_with_covariate_token(self):
        vocab = cl.ClinicalVocabulary.from_records(make_records())
        config = small_config()
        store = build_store(config, vocab)
        rec = make_records()[0]
        out = cl.embed_record(store, rec, vocab)
        assert out.shape == (len(rec.items) + 1, config.embed_dim)

    def test_missing_covariate_skipped(self):
        vocab = cl.ClinicalVocabulary.from_records(make_records())
        store = build_store(small_config(), vocab)
        out = cl.embed_record(store, make_records()[2], vocab)
        assert out.shape == (2, 12)

    def test_gradient_hits_only_looked_up_rows(self):
        vocab = cl.ClinicalVocabulary.from_records(make_records())
        store = build_store(small_config(), vocab)
        out = cl.embed_tokens(store, vocab.encode_items(["hist=adeno", "stage=II"]), {})
        ad.backward(ad.sum_over(out))
        grad = store["clinical.embed.weight"].grad
        touched = {vocab.items["hist=adeno"], vocab.items["stage=II"]}
        for row in range(vocab.size):
            if row in touched:
                assert np.any(grad[row] != 0)
            else:
                np.testing.assert_array_equal(grad[row], 0)


def attention_oracle(c, wq, wk, wv):
    """Straight scalar-loop self-attention, independent of the tensor ops."""
    m, d = c.shape
    h = wq.shape[1]

    def matmul(a, b):
        return [[sum(a[i][t] * b[t][j] for t in range(len(b))) for j in range(len(b[0]))]
                for i in range(len(a))]

    q = matmul(c.tolist(), wq.tolist())
    k = matmul(c.tolist(), wk.tolist())
    v = matmul(c.tolist(), wv.tolist())
    scale = 1.0 / math.sqrt(h)
    out = []
    for i in range(m):
        logits = [scale * sum(q[i][t] * k[j][t] for t in range(h)) for j in range(m)]
        mx = max(logits)
        exps = [math.exp(x - mx) for x in logits]
        z = sum(exps)
        weights = [e / z for e in exps]
        out.append([sum(weights[j] * v[j][t] for j in range(m)) for t in range(h)])
    return np.array(out)


class TestSelfAttention:
    def test_single_token_passes_value_through(self):
        rng = np.random.default_rng(1)
        c = ad.Tensor(rng.standard_normal((1, 4)))
        wq, wk, wv = (ad.Tensor(rng.standard_normal((4, 3))) for _ in range(3))
        out = cl.self_attention(c, wq, wk, wv)
        np.testing.assert_allclose(out.data, (c.data @ wv.data), rtol=1e-5)

    def test_zero_query_gives_uniform_attention(self):
        rng = np.random.default_rng(2)
        c = ad.Tensor(rng.standard_normal((5, 4)))
        wq = ad.Tensor(np.zeros((4, 3)))
        wk, wv = (ad.Tensor(rng.standard_normal((4, 3))) for _ in range(2))
        out = cl.self_attention(c, wq, wk, wv)
        expected = np.tile((c.data @ wv.data).mean(axis=0), (5, 1))
        np.testing.assert_allclose(out.data, expected, atol=1e-6)

    def test_matches_scalar_loop_oracle(self):
        rng = np.random.default_rng(3)
        c = rng.standard_normal((2, 2))
        wq, wk, wv = (rng.standard_normal((2, 2)) for _ in range(3))
        out = cl.self_attention(ad.Tensor(c, dtype=np.float64), ad.Tensor(wq, dtype=np.float64),
                                ad.Tensor(wk, dtype=np.float64), ad.Tensor(wv, dtype=np.float64))
        np.testing.assert_allclose(out.data, attention_oracle(c, wq, wk, wv), atol=1e-6)

    def test_attention_rows_sum_to_one(self):
        rng = np.random.default_rng(4)
        c = ad.Tensor(rng.standard_normal((6, 4)))
        wq, wk, wv = (ad.Tensor(rng.standard_normal((4, 2))) for _ in range(3))
        _, weights = cl.self_attention(c, wq, wk, wv, return_weights=True)
        np.testing.assert_allclose(weights.data.sum(axis=-1), 1.0, atol=1e-6)


class TestEncoder:
    def _token_matrix(self, store, vocab, rng):
        idx = rng.integers(0, vocab.size, size=3)
        return cl.embed_tokens(store, idx, {"age": 0.7})

    def test_zeroed_branches_reduce_to_pooled_layernorm(self):
        # residual-branch output projections are zero at init, so a fresh
        # encoder must equal the straight-line mean(LN(C)) reimplementation
        vocab = cl.ClinicalVocabulary.from_records(make_records())
        config = small_config()
        store = build_store(config, vocab)
        rng = np.random.default_rng(5)
        tokens = self._token_matrix(store, vocab, rng)
        out = cl.encode_clinical(store, config, tokens)

        c = tokens.data
        mu = c.mean(axis=-1, keepdims=True)
        var = ((c - mu) ** 2).mean(axis=-1, keepdims=True)
        straight = ((c - mu) / np.sqrt(var + 1e-5)).mean(axis=0)
        np.testing.assert_allclose(out.data[0], straight, atol=1e-10)

    def test_output_width_independent_of_token_count(self):
        vocab = cl.ClinicalVocabulary.from_records(make_records())
        config = small_config()
        store = build_store(config, vocab)
        for m in (1, 2, 4):
            tokens = cl.embed_tokens(store, np.arange(m) % vocab.size, {})
            assert cl.encode_clinical(store, config, tokens).shape == (1, config.embed_dim)

    def test_permutation_invariance(self):
        vocab = cl.ClinicalVocabulary.from_records(make_records())
        config = small_config()
        store = build_store(config, vocab)
        _randomize_branches(store, np.random.default_rng(6))
        idx = np.array([0, 1, 2, 3])
        out1 = cl.encode_clinical(store, config, cl.embed_tokens(store, idx, {}))
        out2 = cl.encode_clinical(store, config, cl.embed_tokens(store, idx[::-1].copy(), {}))
        np.testing.assert_allclose(out1.data, out2.data, atol=1e-9)

    def test_every_head_rows_sum_to_one(self):
        vocab = cl.ClinicalVocabulary.from_records(make_records())
        config = small_config()
        store = build_store(config, vocab)
        _randomize_branches(store, np.random.default_rng(7))
        tokens = cl.embed_tokens(store, np.array([0, 1, 2]), {"age": 0.3})
        _, weights = cl.encode_clinical(store, config, tokens, return_weights=True)
        assert len(weights) == config.layers * config.heads
        for w in weights:
            np.testing.assert_allclose(w.data.sum(axis=-1), 1.0, atol=1e-6)

    def test_mlp_substitute_encoder(self):
        vocab = cl.ClinicalVocabulary.from_records(make_records())
        config = small_config(encoder="mlp")
        store = build_store(config, vocab)
        tokens = cl.embed_tokens(store, np.array([0, 1]), {"age": 0.1})
        assert cl.encode_clinical(store, config, tokens).shape == (1, config.embed_dim)

    def test_head_split_validation(self):
        with pytest.raises(ConfigError):
            cl.ClinicalEncoderConfig(embed_dim=10, heads=3)
        with pytest.raises(ConfigError):
            cl.ClinicalEncoderConfig(layers=0)


def _randomize_branches(store, rng):
    """Fill the zero-initialized residual projections with random values."""
    for name, t in store.items():
        if name.endswith(("attn_out.weight", "mlp.w2")):
            t.data = rng.standard_normal(t.data.shape).astype(t.data.dtype) * 0.3


class TestEncoderGradients:
    def test_gradcheck_through_encoder(self):
        from survtower import gradcheck as gc

        vocab = cl.ClinicalVocabulary.from_records(make_records())
        config = small_config()
        store = build_store(config, vocab, dtype=np.float64)
        rng = np.random.default_rng(8)
        _randomize_branches(store, rng)
        idx = np.array([0, 2, 3])

        def forward():
            tokens = cl.embed_tokens(store, idx, {"age": 0.4})
            out = cl.encode_clinical(store, config, tokens)
            return ad.sum_over(ad.mul(out, weights))

        weights = rng.standard_normal((1, config.embed_dim))
        loss = forward()
        ad.backward(loss)

        def f():
            with ad.no_grad():
                return float(forward().data)

        worst = 0.0
        for name, tensor in store.items():
            if tensor.grad is None:
                continue
            res = gc.check_tensor_grad(name, f, tensor.data, tensor.grad, rng, n_samples=3)
            worst = max(worst, res.max_rel_error)
        assert worst <= 1e-4, f"encoder gradient mismatch: {worst:.2e}"
