"""Mask codec, greedy filtering, partition enforcement, resize, geometry."""
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from svproj.errors import FormatError, ValidationError
from svproj.superpixels import (CandidateMask, SuperpixelSet, bbox_of,
                                centroid_area, decode_rle, encode_rle,
                                filter_candidates, load_mask_file,
                                reorder_superpixels, resize_masks,
                                save_mask_file, shuffle_superpixels,
                                superpixels_to_candidates)

from conftest import rel_err


# ---------------------------------------------------------------------------
# rule-replay oracle for the greedy filter (explicit loops, python sets)
# ---------------------------------------------------------------------------

_RANK = {"whole": 0, "part": 1, "subpart": 2}


def filter_oracle(cands, dims, theta):
    h, w = dims
    order = sorted(cands, key=lambda c: (_RANK[c.level], -int(c.mask.sum()),
                                         -c.score, c.id))
    covered = set()
    accepted = []
    for c in order:
        fg = [(r, cc) for r in range(h) for cc in range(w) if c.mask[r, cc]]
        overlap = sum(1 for p in fg if p in covered) / len(fg)
        if overlap < theta:
            accepted.append(c)
            covered.update(fg)
    label = -np.ones((h, w), dtype=int)
    for idx, c in enumerate(accepted):
        for r in range(h):
            for cc in range(w):
                if c.mask[r, cc] and label[r, cc] < 0:
                    label[r, cc] = idx
    # residuals: BFS flood fill with 8-connectivity
    next_label = len(accepted)
    ids = [c.id for c in accepted]
    for r in range(h):
        for cc in range(w):
            if label[r, cc] < 0:
                stack = [(r, cc)]
                label[r, cc] = next_label
                while stack:
                    rr, ccc = stack.pop()
                    for dr in (-1, 0, 1):
                        for dc in (-1, 0, 1):
                            nr, nc = rr + dr, ccc + dc
                            if 0 <= nr < h and 0 <= nc < w and label[nr, nc] < 0:
                                label[nr, nc] = next_label
                                stack.append((nr, nc))
                ids.append(-1)
                next_label += 1
    return label, ids


def _rect_mask(h, w, r0, c0, rh, rw):
    m = np.zeros((h, w), dtype=bool)
    m[r0:r0 + rh, c0:c0 + rw] = True
    return m


def random_candidates(rng, h=16, w=16, n_wholes=4):
    """Nested whole/part/subpart families plus spurious overlapping rects."""
    cands = []
    cid = 0
    for _ in range(n_wholes):
        rh, rw = int(rng.integers(2, 7)), int(rng.integers(2, 7))
        r0 = int(rng.integers(0, h - rh + 1))
        c0 = int(rng.integers(0, w - rw + 1))
        whole = _rect_mask(h, w, r0, c0, rh, rw)
        cands.append(CandidateMask(cid, "whole", float(rng.uniform(0.5, 1)), whole))
        cid += 1
        half = _rect_mask(h, w, r0, c0, max(1, rh // 2), rw)
        cands.append(CandidateMask(cid, "part", float(rng.uniform(0.3, 1)), half))
        cid += 1
        quarter = _rect_mask(h, w, r0, c0, max(1, rh // 2), max(1, rw // 2))
        cands.append(CandidateMask(cid, "subpart", float(rng.uniform(0.1, 1)), quarter))
        cid += 1
    for _ in range(3):
        rh, rw = int(rng.integers(1, 9)), int(rng.integers(1, 9))
        r0 = int(rng.integers(0, h - rh + 1))
        c0 = int(rng.integers(0, w - rw + 1))
        level = ("whole", "part", "subpart")[int(rng.integers(0, 3))]
        cands.append(CandidateMask(cid, level, float(rng.uniform(0, 1)),
                                   _rect_mask(h, w, r0, c0, rh, rw)))
        cid += 1
    return cands


def random_partition(rng, h, w, m) -> SuperpixelSet:
    """Voronoi-style random partition with every cell non-empty."""
    while True:
        centers = rng.random((m, 2)) * [h, w]
        rr, cc = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
        d = (rr[None] - centers[:, 0, None, None]) ** 2 + \
            (cc[None] - centers[:, 1, None, None]) ** 2
        label = d.argmin(axis=0)
        if np.bincount(label.reshape(-1), minlength=m).min() > 0:
            return SuperpixelSet(label_grid=label, order=np.arange(m),
                                 mask_ids=np.arange(m))


# ---------------------------------------------------------------------------
# RLE
# ---------------------------------------------------------------------------

class TestRle:
    def test_all_ones(self):
        assert np.array_equal(decode_rle([0, 4], (2, 2)), np.ones((2, 2), bool))

    def test_all_zeros(self):
        assert np.array_equal(decode_rle([4], (2, 2)), np.zeros((2, 2), bool))

    def test_roundtrip_random(self):
        rng = np.random.default_rng(99)
        for _ in range(100):
            g = rng.random((7, 5)) < rng.random()
            assert np.array_equal(decode_rle(encode_rle(g), (7, 5)), g)

    @settings(max_examples=50, deadline=None)
    @given(st.lists(st.booleans(), min_size=12, max_size=12))
    def test_roundtrip_hypothesis(self, bits):
        g = np.array(bits, dtype=bool).reshape(3, 4)
        assert np.array_equal(decode_rle(encode_rle(g), (3, 4)), g)

    def test_bad_counts(self):
        with pytest.raises(FormatError):
            decode_rle([3], (2, 2))
        with pytest.raises(FormatError):
            decode_rle([-1, 5], (2, 2))


# ---------------------------------------------------------------------------
# filtering
# ---------------------------------------------------------------------------

class TestFilterCandidates:
    def test_whole_mask_dominates_nested_family(self):
        h = w = 8
        whole = np.ones((h, w), bool)
        halves = [_rect_mask(h, w, 0, 0, 4, 8), _rect_mask(h, w, 4, 0, 4, 8)]
        quarters = [_rect_mask(h, w, r, c, 4, 4) for r in (0, 4) for c in (0, 4)]
        cands = [CandidateMask(0, "whole", 0.9, whole)]
        cands += [CandidateMask(i + 1, "part", 0.9, m) for i, m in enumerate(halves)]
        cands += [CandidateMask(i + 3, "subpart", 0.9, m) for i, m in enumerate(quarters)]
        sp = filter_candidates(cands, (h, w), 0.5)
        assert sp.num_superpixels == 1
        assert sp.mask_ids.tolist() == [0]

    def test_two_disjoint_wholes_split_exactly(self):
        h = w = 6
        left = _rect_mask(h, w, 0, 0, 6, 3)
        right = _rect_mask(h, w, 0, 3, 6, 3)
        cands = [CandidateMask(0, "whole", 0.5, left),
                 CandidateMask(1, "whole", 0.5, right)]
        sp = filter_candidates(cands, (h, w), 0.5)
        assert sp.num_superpixels == 2
        assert np.array_equal(sp.mask(0), left) or np.array_equal(sp.mask(0), right)
        assert np.array_equal(sp.mask(0) | sp.mask(1), np.ones((h, w), bool))
        assert not (sp.mask(0) & sp.mask(1)).any()

    def test_matches_rule_replay_oracle(self):
        rng = np.random.default_rng(4242)
        for trial in range(12):
            cands = random_candidates(rng)
            sp = filter_candidates(cands, (16, 16), 0.5)
            label_ref, ids_ref = filter_oracle(cands, (16, 16), 0.5)
            assert np.array_equal(sp.label_grid, label_ref), f"trial {trial}"
            assert sp.mask_ids.tolist() == ids_ref, f"trial {trial}"

    def test_partition_invariant_fuzz(self):
        rng = np.random.default_rng(7)
        for _ in range(60):
            cands = random_candidates(rng, n_wholes=int(rng.integers(1, 6)))
            sp = filter_candidates(cands, (16, 16), float(rng.uniform(0.2, 0.8)))
            sp.validate()  # partition + non-empty guaranteed

    def test_empty_candidates_on_zero_grid_rejected(self):
        with pytest.raises(ValidationError):
            filter_candidates([], (0, 4), 0.5)

    def test_dims_mismatch(self):
        c = CandidateMask(0, "whole", 1.0, np.ones((4, 4), bool))
        with pytest.raises(ValidationError):
            filter_candidates([c], (5, 5), 0.5)

    def test_tiling_wholes_reject_all_subordinates(self):
        rng = np.random.default_rng(31)
        h = w = 12
        wholes = [_rect_mask(h, w, r, c, 6, 6) for r in (0, 6) for c in (0, 6)]
        cands = [CandidateMask(i, "whole", float(rng.uniform(0.5, 1)), m)
                 for i, m in enumerate(wholes)]
        parts = [CandidateMask(10 + i, "part", 1.0, _rect_mask(h, w, r, c, 3, 6))
                 for i, (r, c) in enumerate([(0, 0), (6, 0), (3, 6)])]
        subs = [CandidateMask(20, "subpart", 1.0, _rect_mask(h, w, 2, 2, 2, 2))]
        sp = filter_candidates(cands + parts + subs, (h, w), 0.5)
        assert sp.num_superpixels == 4
        assert set(sp.mask_ids.tolist()) == {0, 1, 2, 3}


# ---------------------------------------------------------------------------
# resizing
# ---------------------------------------------------------------------------

class TestResizeMasks:
    def test_unit_factor_identity(self):
        rng = np.random.default_rng(0)
        sp = random_partition(rng, 126, 126, 40)
        out = resize_masks(sp, 40 * 126 * 126)
        assert out.dims == (126, 126)
        assert np.array_equal(out.label_grid, sp.label_grid)

    def test_half_factor_dims(self):
        rng = np.random.default_rng(1)
        sp = random_partition(rng, 64, 64, 10)
        out = resize_masks(sp, 10 * 32 * 32)
        assert out.dims == (32, 32)

    def test_partition_preserved_over_factors(self):
        rng = np.random.default_rng(5)
        for factor in (0.1, 0.33, 0.5, 1.0, 1.7, 3.0):
            m = int(rng.integers(2, 9))
            sp = random_partition(rng, 20, 18, m)
            target = int(factor ** 2 * m * 20 * 18)
            out = resize_masks(sp, max(target, 1))
            out.validate()
            assert out.num_superpixels == m

    def test_vanishing_superpixel_reseeded(self):
        label = np.zeros((12, 12), dtype=int)
        label[5, 5] = 1  # single pixel superpixel dies under 3x downscale
        sp = SuperpixelSet(label_grid=label, order=np.arange(2),
                           mask_ids=np.array([0, 1]))
        out = resize_masks(sp, 2 * 4 * 4)
        out.validate()
        assert out.num_superpixels == 2
        assert (out.label_grid == 1).sum() >= 1


# ---------------------------------------------------------------------------
# geometry
# ---------------------------------------------------------------------------

class TestGeometry:
    def test_full_grid(self):
        sp = SuperpixelSet(label_grid=np.zeros((4, 6), int), order=np.zeros(1, int),
                           mask_ids=np.array([0]))
        assert bbox_of(sp, 0) == type(bbox_of(sp, 0))(0, 0, 3, 5)
        (cr, cc), area = centroid_area(sp, 0)
        assert (cr, cc) == (1.5, 2.5)
        assert area == 24

    def test_single_pixel(self):
        label = np.zeros((5, 5), int)
        label[2, 3] = 1
        sp = SuperpixelSet(label_grid=label, order=np.arange(2),
                           mask_ids=np.array([0, 1]))
        b = bbox_of(sp, 1)
        assert (b.row_min, b.col_min, b.row_max, b.col_max) == (2, 3, 2, 3)
        assert centroid_area(sp, 1) == ((2.0, 3.0), 1)

    def test_random_blobs_match_scan(self, rng):
        sp = random_partition(rng, 11, 13, 5)
        for i in range(5):
            ref_pixels = [(r, c) for r in range(11) for c in range(13)
                          if sp.label_grid[r, c] == i]
            rows = [p[0] for p in ref_pixels]
            cols = [p[1] for p in ref_pixels]
            b = bbox_of(sp, i)
            assert (b.row_min, b.col_min, b.row_max, b.col_max) == \
                (min(rows), min(cols), max(rows), max(cols))
            (cr, cc), area = centroid_area(sp, i)
            assert area == len(ref_pixels)
            assert abs(cr - np.mean(rows)) < 1e-12
            assert abs(cc - np.mean(cols)) < 1e-12

    def test_index_out_of_range(self, rng):
        sp = random_partition(rng, 6, 6, 3)
        with pytest.raises(ValidationError):
            bbox_of(sp, 3)


# ---------------------------------------------------------------------------
# shuffling
# ---------------------------------------------------------------------------

class TestShuffle:
    def test_single_superpixel_identity(self):
        sp = SuperpixelSet(label_grid=np.zeros((3, 3), int), order=np.zeros(1, int),
                           mask_ids=np.array([7]))
        out = shuffle_superpixels(sp, 123)
        assert np.array_equal(out.label_grid, sp.label_grid)
        assert out.mask_ids.tolist() == [7]

    def test_determinism(self, rng):
        sp = random_partition(rng, 10, 10, 6)
        a = shuffle_superpixels(sp, 42)
        b = shuffle_superpixels(sp, 42)
        assert np.array_equal(a.label_grid, b.label_grid)
        assert np.array_equal(a.order, b.order)

    def test_inverse_recovers_input(self, rng):
        sp = random_partition(rng, 10, 10, 7)
        shuffled = shuffle_superpixels(sp, 9)
        restored = reorder_superpixels(shuffled, np.argsort(shuffled.order))
        assert np.array_equal(restored.label_grid, sp.label_grid)
        assert np.array_equal(restored.order, sp.order)
        assert np.array_equal(restored.mask_ids, sp.mask_ids)

    def test_content_unchanged(self, rng):
        sp = random_partition(rng, 9, 9, 5)
        shuffled = shuffle_superpixels(sp, 3)
        masks_a = {tuple(sp.mask(i).reshape(-1)) for i in range(5)}
        masks_b = {tuple(shuffled.mask(i).reshape(-1)) for i in range(5)}
        assert masks_a == masks_b


# ---------------------------------------------------------------------------
# mask file format
# ---------------------------------------------------------------------------

class TestMaskFile:
    def test_byte_exact_roundtrip(self, tmp_path, rng):
        cands = random_candidates(rng)
        p1 = tmp_path / "a.masks"
        p2 = tmp_path / "b.masks"
        save_mask_file(p1, cands, (16, 16))
        loaded, dims = load_mask_file(p1)
        assert dims == (16, 16)
        save_mask_file(p2, loaded, dims)
        assert p1.read_bytes() == p2.read_bytes()

    def test_partition_roundtrip_through_file(self, tmp_path, rng):
        cands = random_candidates(rng)
        sp = filter_candidates(cands, (16, 16), 0.5)
        path = tmp_path / "part.masks"
        save_mask_file(path, superpixels_to_candidates(sp), sp.dims)
        loaded, dims = load_mask_file(path)
        sp2 = filter_candidates(loaded, dims, 0.5)
        # disjoint exhaustive masks survive re-filtering with identical content
        assert sp2.num_superpixels == sp.num_superpixels
        masks_a = {tuple(sp.mask(i).reshape(-1)) for i in range(sp.num_superpixels)}
        masks_b = {tuple(sp2.mask(i).reshape(-1)) for i in range(sp.num_superpixels)}
        assert masks_a == masks_b

    def test_malformed_names_field(self, tmp_path):
        path = tmp_path / "bad.masks"
        path.write_text("height 4\nwidth 4\ncount 1\nid 0\nlevel whole\n"
                        "score 1.0\nrle 0 3\n")
        with pytest.raises(FormatError) as exc:
            load_mask_file(path)
        assert "rle" in str(exc.value)

    def test_unknown_level(self, tmp_path):
        path = tmp_path / "bad2.masks"
        path.write_text("height 2\nwidth 2\ncount 1\nid 0\nlevel chunk\n"
                        "score 1.0\nrle 0 4\n")
        with pytest.raises(FormatError) as exc:
            load_mask_file(path)
        assert "level" in str(exc.value)
