"""Core array math: attention, blocks, PEs, MLP, and the gradient checker."""
import numpy as np
import pytest

from svproj import autodiff as ad
from svproj.autodiff import ParamStore, Tensor
from svproj.errors import ValidationError
from svproj.layers import (AttentionConfig, grad_check, init_attention_params,
                           init_block_params, init_mlp_params, mha_forward,
                           mlp_forward, sinusoidal_pe_2d, transformer_block)

from conftest import rel_err
from oracles import attention_weights as _weights
from oracles import block_oracle, gelu_oracle, mha_oracle


# ---------------------------------------------------------------------------
# multi-head attention
# ---------------------------------------------------------------------------

class TestMhaForward:
    def test_zero_inputs_zero_output(self, rng):
        cfg = AttentionConfig(8, 2)
        store = ParamStore()
        init_attention_params(store, "a", cfg, rng)  # biases start at zero
        z = np.zeros((3, 8))
        out = mha_forward(z, z, z, np.zeros((3, 8)), np.zeros((3, 8)), cfg, store, "a",
                          bias=np.zeros((3, 3)))
        assert np.all(out.value == 0.0)

    def test_symmetric_softmax_means_values(self):
        cfg = AttentionConfig(4, 1)
        store = ParamStore()
        for nm in ("wq", "wk", "wv", "wo"):
            store.add(f"a.{nm}", np.eye(4))
        for nm in ("bq", "bv", "bo"):
            store.add(f"a.{nm}", np.zeros(4))
        q = np.zeros((1, 4))
        k = np.arange(8, dtype=float).reshape(2, 4)
        v = np.array([[1.0, 2.0, 3.0, 4.0], [5.0, 6.0, 7.0, 8.0]])
        out = mha_forward(q, k, v, None, None, cfg, store, "a")
        assert np.allclose(out.value, v.mean(axis=0), atol=1e-14)

    def test_matches_loop_oracle(self):
        rng = np.random.default_rng(7)
        cfg = AttentionConfig(8, 2)
        store = ParamStore()
        init_attention_params(store, "a", cfg, rng)
        for nm in ("bq", "bv", "bo"):  # exercise non-zero biases too
            store[f"a.{nm}"].value += rng.standard_normal(8) * 0.1
        q = rng.standard_normal((3, 8))
        k = rng.standard_normal((3, 8))
        v = rng.standard_normal((3, 8))
        qpe = rng.standard_normal((3, 8))
        kpe = rng.standard_normal((3, 8))
        got = mha_forward(q, k, v, qpe, kpe, cfg, store, "a").value
        ref = mha_oracle(q, k, v, qpe, kpe, _weights(store, "a"), 2)
        assert rel_err(got, ref) <= 1e-12

    def test_softmax_rows_sum_to_one(self, rng):
        cfg = AttentionConfig(8, 2)
        store = ParamStore()
        init_attention_params(store, "a", cfg, rng)
        q = rng.standard_normal((5, 8))
        k = rng.standard_normal((7, 8))
        weights = []
        mha_forward(q, k, k, None, None, cfg, store, "a", weights_out=weights)
        sums = weights[0].sum(axis=-1)
        assert np.max(np.abs(sums - 1.0)) <= 1e-12

    def test_zero_pe_equals_no_pe_bitwise(self, rng):
        cfg = AttentionConfig(8, 4)
        store = ParamStore()
        init_attention_params(store, "a", cfg, rng)
        q = rng.standard_normal((4, 8))
        k = rng.standard_normal((6, 8))
        a = mha_forward(q, k, k, np.zeros((4, 8)), np.zeros((6, 8)), cfg, store, "a")
        b = mha_forward(q, k, k, None, None, cfg, store, "a")
        assert np.array_equal(a.value, b.value)

    def test_query_permutation_equivariance(self, rng):
        cfg = AttentionConfig(8, 2)
        store = ParamStore()
        init_attention_params(store, "a", cfg, rng)
        q = rng.standard_normal((5, 8))
        qpe = rng.standard_normal((5, 8))
        k = rng.standard_normal((6, 8))
        kpe = rng.standard_normal((6, 8))
        perm = rng.permutation(5)
        out = mha_forward(q, k, k, qpe, kpe, cfg, store, "a").value
        out_p = mha_forward(q[perm], k, k, qpe[perm], kpe, cfg, store, "a").value
        assert np.array_equal(out[perm], out_p)

    def test_shape_and_finite_validation(self, rng):
        cfg = AttentionConfig(8, 2)
        store = ParamStore()
        init_attention_params(store, "a", cfg, rng)
        q = rng.standard_normal((3, 8))
        with pytest.raises(ValidationError):
            mha_forward(q, rng.standard_normal((4, 6)), rng.standard_normal((4, 6)),
                        None, None, cfg, store, "a")
        bad = q.copy()
        bad[0, 0] = np.nan
        with pytest.raises(ValidationError):
            mha_forward(bad, q, q, None, None, cfg, store, "a")
        with pytest.raises(ValidationError):
            mha_forward(q, q, q, None, None, cfg, store, "a",
                        bias=np.zeros((2, 2)))


class TestTransformerBlock:
    def test_zero_params_identity(self, rng):
        cfg = AttentionConfig(8, 2)
        store = ParamStore()
        init_block_params(store, "b", cfg, rng)
        for name in store.names():
            store[name].value[...] = 0.0
        q = rng.standard_normal((3, 8))
        kv = rng.standard_normal((5, 8))
        out = transformer_block(q, None, kv, None, cfg, store, "b")
        assert np.array_equal(out.value, q)

    def test_zero_initialized_residual_identity(self, rng):
        # weights zero, layer norm at its init values: still an identity map
        cfg = AttentionConfig(8, 2)
        store = ParamStore()
        init_block_params(store, "b", cfg, rng)
        for name in store.names():
            if ".ln_" not in name:
                store[name].value[...] = 0.0
        q = rng.standard_normal((3, 8))
        out = transformer_block(q, None, rng.standard_normal((4, 8)), None,
                                cfg, store, "b")
        assert np.array_equal(out.value, q)

    def test_row_permutation_equivariance(self, rng):
        cfg = AttentionConfig(8, 2)
        store = ParamStore()
        init_block_params(store, "b", cfg, rng)
        q = rng.standard_normal((5, 8))
        qpe = rng.standard_normal((5, 8))
        kv = rng.standard_normal((6, 8))
        perm = rng.permutation(5)
        base = transformer_block(q, qpe, kv, None, cfg, store, "b").value
        permuted = transformer_block(q[perm], qpe[perm], kv, None, cfg, store, "b").value
        assert np.allclose(base[perm], permuted, rtol=0, atol=1e-12)

    def test_matches_composed_oracle(self):
        rng = np.random.default_rng(11)
        cfg = AttentionConfig(8, 2)
        store = ParamStore()
        init_block_params(store, "b", cfg, rng)
        q = rng.standard_normal((2, 8))
        qpe = rng.standard_normal((2, 8))
        kv = rng.standard_normal((4, 8))
        kvpe = rng.standard_normal((4, 8))
        got = transformer_block(q, qpe, kv, kvpe, cfg, store, "b").value
        ref = block_oracle(q, qpe, kv, kvpe, store, "b", cfg)
        assert rel_err(got, ref) <= 1e-12


# ---------------------------------------------------------------------------
# sinusoidal PE
# ---------------------------------------------------------------------------

class TestSinusoidalPe:
    def test_position_zero(self):
        for d in (4, 8, 16):
            pe = sinusoidal_pe_2d(1, 1, d)
            assert np.all(pe[0, 0:d:2] == 0.0)
            assert np.all(pe[0, 1:d:2] == 1.0)

    def test_row_norm(self):
        pe = sinusoidal_pe_2d(5, 7, 16)
        norms = np.linalg.norm(pe, axis=1)
        assert np.allclose(norms, np.sqrt(16 / 2), atol=1e-12)

    def test_closed_form(self):
        d = 8
        pe = sinusoidal_pe_2d(2, 3, d)
        half = d // 2
        for r in range(2):
            for c in range(3):
                row = pe[r * 3 + c]
                for t in range(half // 2):
                    w = 1.0 / 10000 ** (2 * t / half)
                    assert abs(row[2 * t] - np.sin(r * w)) <= 1e-15
                    assert abs(row[2 * t + 1] - np.cos(r * w)) <= 1e-15
                    assert abs(row[half + 2 * t] - np.sin(c * w)) <= 1e-15
                    assert abs(row[half + 2 * t + 1] - np.cos(c * w)) <= 1e-15

    def test_dim_must_divide_by_four(self):
        with pytest.raises(ValidationError):
            sinusoidal_pe_2d(2, 2, 6)


# ---------------------------------------------------------------------------
# MLP
# ---------------------------------------------------------------------------

class TestMlpForward:
    def test_zero_params_zero_output(self, rng):
        store = ParamStore()
        init_mlp_params(store, "m", [4, 8, 3], rng)
        for name in store.names():
            store[name].value[...] = 0.0
        out = mlp_forward(rng.standard_normal((5, 4)), store, "m", [4, 8, 3])
        assert np.all(out.value == 0.0)

    def test_row_independence(self, rng):
        store = ParamStore()
        init_mlp_params(store, "m", [4, 8, 3], rng)
        x = rng.standard_normal((1, 4))
        dup = np.vstack([x, x, x])
        out = mlp_forward(dup, store, "m", [4, 8, 3]).value
        assert np.array_equal(out[0], out[1]) and np.array_equal(out[0], out[2])

    def test_matches_loop_oracle(self):
        rng = np.random.default_rng(3)
        store = ParamStore()
        init_mlp_params(store, "m", [4, 8, 3], rng)
        x = rng.standard_normal((2, 4))
        got = mlp_forward(x, store, "m", [4, 8, 3]).value
        w1, b1 = store["m.w1"].value, store["m.b1"].value
        w2, b2 = store["m.w2"].value, store["m.b2"].value
        ref = np.zeros((2, 3))
        for r in range(2):
            h = np.zeros(8)
            for j in range(8):
                s = b1[j]
                for i in range(4):
                    s += x[r, i] * w1[i, j]
                h[j] = gelu_oracle(np.array([s]))[0]
            for o in range(3):
                s = b2[o]
                for j in range(8):
                    s += h[j] * w2[j, o]
                ref[r, o] = s
        assert rel_err(got, ref) <= 1e-12

    def test_dim_mismatch_raises(self, rng):
        store = ParamStore()
        init_mlp_params(store, "m", [4, 8, 3], rng)
        with pytest.raises(ValidationError):
            mlp_forward(rng.standard_normal((5, 6)), store, "m", [4, 8, 3])


# ---------------------------------------------------------------------------
# gradient checker
# ---------------------------------------------------------------------------

class TestGradCheck:
    def test_quadratic(self, rng):
        store = ParamStore()
        store.add("theta", rng.standard_normal(9))
        loss = lambda: ad.scale(ad.sum_all(ad.mul(store["theta"], store["theta"])), 0.5)
        assert grad_check(loss, store, eps=1e-5) <= 1e-10

    def test_constant_loss(self, rng):
        store = ParamStore()
        store.add("theta", rng.standard_normal(4))
        loss = lambda: ad.sum_all(np.ones(3))
        assert grad_check(loss, store, eps=1e-5) <= 1e-10

    def test_transformer_block(self, rng):
        cfg = AttentionConfig(8, 2)
        store = ParamStore()
        init_block_params(store, "b", cfg, rng)
        q = rng.standard_normal((2, 8))
        kv = rng.standard_normal((3, 8))
        qpe = rng.standard_normal((2, 8))
        loss = lambda: ad.sum_all(transformer_block(q, qpe, kv, None, cfg, store, "b"))
        assert grad_check(loss, store, eps=1e-4) <= 1e-4

    def test_primitive_vjps(self, rng):
        # gather, segment_mean, layer_norm, gelu, scale_by, softmax CE
        store = ParamStore()
        store.add("tab", rng.standard_normal((4, 3)))
        store.add("g", np.ones(3) + 0.1 * rng.standard_normal(3))
        store.add("b", 0.1 * rng.standard_normal(3))
        store.add("w", np.asarray(0.7))
        idx = np.array([0, 3, 1, 1, 2])
        labels = np.array([0, 0, 1, 2, 1])
        mult = rng.standard_normal((3, 3))

        def loss():
            x = ad.gather_rows(store["tab"], idx)
            x = ad.layer_norm(x, store["g"], store["b"])
            x = ad.gelu(x)
            x = ad.segment_mean(x, labels, 3)
            x = ad.scale_by(ad.mul(x, mult), store["w"])
            logits = ad.reshape(ad.matmul(x, np.ones((3, 1))), (3,))
            return ad.softmax_cross_entropy(logits, 1)

        assert grad_check(loss, store, eps=1e-5) <= 1e-6

    def test_non_finite_loss_rejected(self, rng):
        store = ParamStore()
        store.add("theta", rng.standard_normal(2))
        with pytest.raises(ValidationError):
            grad_check(lambda: ad.sum_all(np.array([np.inf])), store)
