"""Patch alignment, pooling, scattering, and the aggregator modes."""
import numpy as np
import pytest

from svproj import autodiff as ad
from svproj.autodiff import ParamStore, Tensor
from svproj.errors import ValidationError
from svproj.aggregator import (SSA_MODES, PatchAlignedSuperpixels, SsaConfig,
                               align_to_patches, init_ssa_params,
                               pool_superpixels, scatter_sspe, ssa_forward)
from svproj.layers import grad_check
from svproj.superpixels import SuperpixelSet, shuffle_superpixels

from conftest import rel_err
from oracles import pool_oracle, scatter_oracle, ssa_oracle

from test_superpixels import random_partition


def aligned_from_labels(labels) -> PatchAlignedSuperpixels:
    labels = np.asarray(labels)
    m = labels.max() + 1
    return PatchAlignedSuperpixels(labels=labels, kept=np.arange(m),
                                   dropped=np.empty(0, dtype=int),
                                   height=labels.shape[0], width=labels.shape[1])


class TestAlignToPatches:
    def test_identity_when_dims_match(self, rng):
        sp = random_partition(rng, 6, 6, 4)
        out = align_to_patches(sp, 6, 6)
        assert np.array_equal(out.labels, sp.label_grid)
        assert out.kept.tolist() == [0, 1, 2, 3]

    def test_sub_patch_superpixel_dropped(self):
        label = np.zeros((8, 8), dtype=int)
        label[0, 0] = 1  # corner pixel is never sampled at 2x downscale
        sp = SuperpixelSet(label_grid=label, order=np.arange(2),
                           mask_ids=np.array([10, 11]))
        out = align_to_patches(sp, 4, 4)
        assert out.num_superpixels == 1
        assert out.kept.tolist() == [0]
        assert out.dropped.tolist() == [1]

    def test_matches_per_patch_nn_oracle(self, rng):
        sp = random_partition(rng, 9, 13, 5)
        out = align_to_patches(sp, 5, 4)
        for r in range(5):
            for c in range(4):
                sr = min(8, int(np.floor((r + 0.5) * 9 / 5)))
                sc = min(12, int(np.floor((c + 0.5) * 13 / 4)))
                assert out.kept[out.labels[r, c]] == sp.label_grid[sr, sc]


class TestPoolSuperpixels:
    def test_single_patch_superpixel(self, rng):
        aligned = aligned_from_labels([[0, 0], [0, 1]])
        feats = rng.standard_normal((4, 5))
        pooled = pool_superpixels(aligned, feats).value
        assert np.array_equal(pooled[1], feats[3])

    def test_constant_field(self):
        aligned = aligned_from_labels([[0, 1], [2, 1]])
        feats = np.full((4, 3), 2.5)
        pooled = pool_superpixels(aligned, feats).value
        assert np.allclose(pooled, 2.5, rtol=0, atol=0)

    def test_matches_loop_mean_oracle(self, rng):
        sp = random_partition(rng, 6, 6, 5)
        aligned = align_to_patches(sp, 6, 6)
        feats = rng.standard_normal((36, 7))
        got = pool_superpixels(aligned, feats).value
        ref = pool_oracle(aligned.labels.reshape(-1), feats, 5)
        assert rel_err(got, ref) <= 1e-12

    def test_rows_inside_convex_envelope(self, rng):
        sp = random_partition(rng, 8, 8, 6)
        aligned = align_to_patches(sp, 8, 8)
        feats = rng.standard_normal((64, 4))
        pooled = pool_superpixels(aligned, feats).value
        for i, support in enumerate(aligned.supports()):
            lo = feats[support].min(axis=0)
            hi = feats[support].max(axis=0)
            assert np.all(pooled[i] >= lo - 1e-12) and np.all(pooled[i] <= hi + 1e-12)


class TestScatterSspe:
    def test_single_superpixel_broadcast(self, rng):
        aligned = aligned_from_labels(np.zeros((3, 3), dtype=int))
        pe = Tensor(rng.standard_normal((1, 4)))
        out = scatter_sspe(aligned, pe).value
        assert np.array_equal(out, np.tile(pe.value, (9, 1)))

    def test_pool_of_scatter_is_identity(self, rng):
        for _ in range(10):
            m = int(rng.integers(2, 8))
            sp = random_partition(rng, 7, 9, m)
            aligned = align_to_patches(sp, 7, 9)
            pe = rng.standard_normal((m, 5))
            scattered = scatter_sspe(aligned, Tensor(pe)).value
            pooled = pool_superpixels(aligned, scattered).value
            assert np.array_equal(pooled, pe)

    def test_matches_lookup_oracle_and_matmul(self, rng):
        sp = random_partition(rng, 6, 5, 4)
        aligned = align_to_patches(sp, 6, 5)
        pe = rng.standard_normal((4, 3))
        got = scatter_sspe(aligned, Tensor(pe)).value
        ref = scatter_oracle(aligned.labels.reshape(-1), pe)
        assert rel_err(got, ref) <= 1e-15
        s_matrix = aligned.assignment().astype(float)
        assert rel_err(got, s_matrix.T @ pe) <= 1e-15


class TestSsaForward:
    def _setup(self, rng, mode, m=3, h=4, w=4, d=8):
        sp = random_partition(rng, h, w, m)
        aligned = align_to_patches(sp, h, w)
        feats = rng.standard_normal((h * w, d))
        pe = rng.standard_normal((m, d))
        cfg = SsaConfig(model_dim=d, num_heads=2, mode=mode)
        store = ParamStore()
        init_ssa_params(store, "a", cfg, rng)
        return sp, aligned, feats, pe, cfg, store

    @pytest.mark.parametrize("mode", SSA_MODES)
    def test_zero_params_identity(self, rng, mode):
        _, aligned, feats, pe, cfg, store = self._setup(rng, mode)
        for name in store.names():
            store[name].value[...] = 0.0
        pooled = pool_superpixels(aligned, feats)
        out = ssa_forward(pooled, feats, Tensor(pe), aligned, store, "a", cfg)
        assert np.array_equal(out.value, pooled.value)

    def test_attn_bias_confines_attention(self, rng):
        _, aligned, feats, pe, cfg, store = self._setup(rng, "attn_bias")
        pooled = pool_superpixels(aligned, feats)
        weights = []
        ssa_forward(pooled, feats, Tensor(pe), aligned, store, "a", cfg,
                    cross_weights_out=weights)
        inside = aligned.assignment()
        for layer_w in weights:  # (heads, M, HW)
            outside_mass = layer_w[:, ~inside]
            assert np.all(outside_mass < 1e-30)

    def test_matches_reference_oracle(self):
        rng = np.random.default_rng(2024)
        sp = SuperpixelSet(label_grid=np.array([[0, 0, 1], [0, 1, 1], [0, 0, 1]]),
                           order=np.arange(2), mask_ids=np.arange(2))
        aligned = align_to_patches(sp, 3, 3)
        d = 8
        feats = rng.standard_normal((9, d))
        pe = rng.standard_normal((2, d))
        cfg = SsaConfig(model_dim=d, num_heads=2, mode="share_sspe")
        store = ParamStore()
        init_ssa_params(store, "a", cfg, rng)
        pooled = pool_superpixels(aligned, feats)
        got = ssa_forward(pooled, feats, Tensor(pe), aligned, store, "a", cfg).value
        ref = ssa_oracle(pooled.value, feats, pe, aligned, store, "a", cfg)
        assert rel_err(got, ref) <= 1e-12

    @pytest.mark.parametrize("mode", SSA_MODES)
    def test_joint_permutation_equivariance(self, rng, mode):
        sp, aligned, feats, pe, cfg, store = self._setup(rng, mode, m=5, h=6, w=6)
        pooled = pool_superpixels(aligned, feats)
        base = ssa_forward(pooled, feats, Tensor(pe), aligned, store, "a", cfg).value
        for seed in range(6):
            shuffled = shuffle_superpixels(sp, seed)
            a2 = align_to_patches(shuffled, 6, 6)
            perm = shuffled.order
            p2 = pool_superpixels(a2, feats)
            out = ssa_forward(p2, feats, Tensor(pe[perm]), a2, store, "a", cfg).value
            assert rel_err(out, base[perm]) <= 1e-9

    def test_sharing_is_live(self, rng):
        # removing the scattered PE from the keys must change the output
        sp, aligned, feats, pe, cfg, store = self._setup(rng, "share_sspe")
        pooled = pool_superpixels(aligned, feats)
        with_share = ssa_forward(pooled, feats, Tensor(pe), aligned, store, "a",
                                 cfg).value
        cfg_off = SsaConfig(model_dim=cfg.model_dim, num_heads=cfg.num_heads,
                            mode="no_share")
        without = ssa_forward(pooled, feats, Tensor(pe), aligned, store, "a",
                              cfg_off).value
        assert np.linalg.norm(with_share - without) / np.linalg.norm(with_share) > 1e-6

    @pytest.mark.parametrize("mode", SSA_MODES)
    def test_grad_check_all_modes(self, mode):
        rng = np.random.default_rng(55)
        sp = SuperpixelSet(label_grid=np.array([[0, 1], [0, 1]]),
                           order=np.arange(2), mask_ids=np.arange(2))
        aligned = align_to_patches(sp, 2, 2)
        d = 4
        feats = rng.standard_normal((4, d))
        cfg = SsaConfig(model_dim=d, num_heads=2, mode=mode)
        store = ParamStore()
        init_ssa_params(store, "a", cfg, rng)
        store.add("pe", rng.standard_normal((2, d)))

        def loss():
            pooled = pool_superpixels(aligned, feats)
            return ad.sum_all(ssa_forward(pooled, feats, store["pe"], aligned,
                                          store, "a", cfg))

        assert grad_check(loss, store, eps=1e-4) <= 1e-4

    def test_unknown_mode_rejected(self):
        with pytest.raises(ValidationError):
            SsaConfig(model_dim=8, mode="windowed")
