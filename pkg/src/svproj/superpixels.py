"""Candidate masks, the overlap-minimizing greedy filter, and mask geometry.

Nested candidate masks carry a level tag (whole > part > subpart).  The
filter accepts candidates greedily, prioritizing level, then area, score and
id, rejecting any candidate whose foreground is already mostly covered.  The
accepted masks are then forced into a pixel partition: contested pixels go to
the earliest-accepted covering mask and every 8-connected component of
leftover pixels becomes a residual superpixel, so the output always covers
the grid exactly once.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .errors import FormatError, ValidationError

__all__ = [
    "LEVELS", "CandidateMask", "SuperpixelSet", "BBox",
    "decode_rle", "encode_rle", "filter_candidates", "resize_masks",
    "bbox_of", "centroid_area", "shuffle_superpixels",
    "load_mask_file", "save_mask_file", "superpixels_to_candidates",
]

LEVELS = ("whole", "part", "subpart")
_LEVEL_RANK = {lvl: i for i, lvl in enumerate(LEVELS)}

_EIGHT_CONN = np.ones((3, 3), dtype=int)


@dataclass
class CandidateMask:
    """One candidate segmentation mask at a given nesting level."""

    id: int
    level: str
    score: float
    mask: np.ndarray  # (H, W) bool

    def __post_init__(self):
        if self.level not in LEVELS:
            raise ValidationError(f"unknown mask level: {self.level!r}")
        self.mask = np.asarray(self.mask).astype(bool)
        if self.mask.ndim != 2:
            raise ValidationError("mask must be 2-D")
        if not self.mask.any():
            raise ValidationError(f"candidate {self.id}: empty mask")
        if not (0.0 <= self.score <= 1.0):
            raise ValidationError(f"candidate {self.id}: score outside [0, 1]")

    @property
    def area(self) -> int:
        return int(self.mask.sum())


@dataclass
class SuperpixelSet:
    """A pixel partition into M superpixels.

    `label_grid[r, c]` is the superpixel index of each pixel.  `order` keeps
    the provenance permutation (row i came from original row order[i]),
    `mask_ids` the source candidate id per row (-1 for residual components),
    and `levels`/`scores` carry source metadata for serialization.
    """

    label_grid: np.ndarray
    order: np.ndarray
    mask_ids: np.ndarray
    levels: list[str] = field(default_factory=list)
    scores: list[float] = field(default_factory=list)

    def __post_init__(self):
        self.label_grid = np.asarray(self.label_grid)
        self.order = np.asarray(self.order)
        self.mask_ids = np.asarray(self.mask_ids)
        self.validate()

    @property
    def num_superpixels(self) -> int:
        return int(self.order.shape[0])

    @property
    def dims(self) -> tuple[int, int]:
        return self.label_grid.shape  # type: ignore[return-value]

    def masks(self) -> np.ndarray:
        """Binary rows, shape (M, H*W)."""
        flat = self.label_grid.reshape(-1)
        return flat[None, :] == np.arange(self.num_superpixels)[:, None]

    def mask(self, i: int) -> np.ndarray:
        if not (0 <= i < self.num_superpixels):
            raise ValidationError(f"superpixel index {i} out of range")
        return self.label_grid == i

    def areas(self) -> np.ndarray:
        return np.bincount(self.label_grid.reshape(-1), minlength=self.num_superpixels)

    def validate(self):
        m = self.num_superpixels
        if m < 1:
            raise ValidationError("superpixel set must be non-empty")
        if self.mask_ids.shape[0] != m:
            raise ValidationError("mask_ids length does not match M")
        flat = self.label_grid.reshape(-1)
        if flat.size == 0:
            raise ValidationError("empty label grid")
        counts = np.bincount(flat, minlength=m)
        if flat.min() < 0 or flat.max() >= m:
            raise ValidationError("label grid references unknown superpixel")
        if np.any(counts == 0):
            raise ValidationError("superpixel with no pixels")


@dataclass(frozen=True)
class BBox:
    """Inclusive pixel-coordinate bounding box."""

    row_min: int
    col_min: int
    row_max: int
    col_max: int

    def __post_init__(self):
        if self.row_min > self.row_max or self.col_min > self.col_max:
            raise ValidationError("degenerate bbox: min exceeds max")

    def normalized(self, height: int, width: int) -> np.ndarray:
        return np.array([self.row_min / height, self.col_min / width,
                         self.row_max / height, self.col_max / width])


# ---------------------------------------------------------------------------
# run-length codec (row-major, alternating counts starting with background)
# ---------------------------------------------------------------------------

def decode_rle(runs: list[int], dims: tuple[int, int]) -> np.ndarray:
    height, width = dims
    total = height * width
    runs = list(runs)
    if any(r < 0 for r in runs):
        raise FormatError("rle", "negative run count")
    if sum(runs) != total:
        raise FormatError("rle", f"run counts sum to {sum(runs)}, expected {total}")
    flat = np.zeros(total, dtype=bool)
    pos = 0
    fg = False
    for count in runs:
        if fg:
            flat[pos:pos + count] = True
        pos += count
        fg = not fg
    return flat.reshape(height, width)


def encode_rle(grid: np.ndarray) -> list[int]:
    flat = np.asarray(grid).astype(bool).reshape(-1)
    if flat.size == 0:
        return []
    change = np.flatnonzero(flat[1:] != flat[:-1]) + 1
    bounds = np.concatenate(([0], change, [flat.size]))
    runs = np.diff(bounds).tolist()
    if flat[0]:
        runs = [0] + runs
    return runs


# ---------------------------------------------------------------------------
# greedy filtering into a partition
# ---------------------------------------------------------------------------

def _sort_key(c: CandidateMask):
    return (_LEVEL_RANK[c.level], -c.area, -c.score, c.id)


def filter_candidates(cands: list[CandidateMask], dims: tuple[int, int],
                      theta_overlap: float = 0.5) -> SuperpixelSet:
    """Greedy mask selection followed by partition enforcement.

    Candidates are visited sorted by (level whole>part>subpart, area
    descending, score descending, id ascending) and accepted iff the fraction
    of their foreground already covered by accepted masks is below
    `theta_overlap`.  Contested pixels belong to the earliest-accepted
    covering mask; uncovered pixels form one residual superpixel per
    8-connected component.
    """
    height, width = dims
    if height * width == 0:
        raise ValidationError("filter_candidates: zero-area grid")
    if not (0.0 < theta_overlap < 1.0):
        raise ValidationError("theta_overlap must lie in (0, 1)")
    for c in cands:
        if c.mask.shape != (height, width):
            raise ValidationError(f"candidate {c.id}: dims {c.mask.shape} != {dims}")

    label = np.full((height, width), -1, dtype=np.int64)
    covered = np.zeros((height, width), dtype=bool)
    accepted: list[CandidateMask] = []
    for c in sorted(cands, key=_sort_key):
        overlap = np.count_nonzero(c.mask & covered) / c.area
        if overlap < theta_overlap:
            idx = len(accepted)
            accepted.append(c)
            claim = c.mask & ~covered
            label[claim] = idx
            covered |= c.mask

    mask_ids = [c.id for c in accepted]
    levels = [c.level for c in accepted]
    scores = [float(c.score) for c in accepted]

    leftover = label < 0
    if leftover.any():
        comp, n_comp = ndimage.label(leftover, structure=_EIGHT_CONN)
        base = len(accepted)
        label[leftover] = comp[leftover] - 1 + base
        for _ in range(n_comp):
            mask_ids.append(-1)
            levels.append("subpart")
            scores.append(0.0)

    m = int(label.max()) + 1
    return SuperpixelSet(label_grid=label, order=np.arange(m),
                         mask_ids=np.array(mask_ids), levels=levels, scores=scores)


# ---------------------------------------------------------------------------
# resizing and geometry
# ---------------------------------------------------------------------------

def _nn_indices(src: int, dst: int) -> np.ndarray:
    # center-aligned nearest neighbor: dst pixel i samples src floor((i+.5)*src/dst)
    idx = np.floor((np.arange(dst) + 0.5) * src / dst).astype(np.int64)
    return np.clip(idx, 0, src - 1)


def resize_label_grid(label_grid: np.ndarray, new_dims: tuple[int, int]) -> np.ndarray:
    h, w = label_grid.shape
    h2, w2 = new_dims
    return label_grid[np.ix_(_nn_indices(h, h2), _nn_indices(w, w2))]


def resize_masks(sp: SuperpixelSet, target_total_pixels: int) -> SuperpixelSet:
    """Rescale the partition so M * H * W approaches the given pixel budget.

    The scale factor is sqrt(target / (M*H*W)); labels are resampled nearest
    neighbor, which preserves binarity and the partition by construction.
    Superpixels that vanish are re-seeded at the surviving pixel nearest
    their original centroid, so M never changes.
    """
    if target_total_pixels <= 0:
        raise ValidationError("target_total_pixels must be positive")
    h, w = sp.dims
    m = sp.num_superpixels
    f = np.sqrt(target_total_pixels / (m * h * w))
    h2 = max(1, int(round(f * h)))
    w2 = max(1, int(round(f * w)))
    while h2 * w2 < m:  # partition of M parts needs at least M pixels
        if h2 <= w2:
            h2 += 1
        else:
            w2 += 1
    new_label = resize_label_grid(sp.label_grid, (h2, w2)).copy()

    counts = np.bincount(new_label.reshape(-1), minlength=m)
    if np.any(counts == 0):
        rr, cc = np.meshgrid(np.arange(h2), np.arange(w2), indexing="ij")
        for miss in np.flatnonzero(counts == 0):
            rows, cols = np.nonzero(sp.label_grid == miss)
            cr = rows.mean() * h2 / h
            cc_ = cols.mean() * w2 / w
            d2 = (rr - cr) ** 2 + (cc - cc_) ** 2
            for p in np.argsort(d2, axis=None):
                r, c = divmod(int(p), w2)
                if counts[new_label[r, c]] >= 2:
                    counts[new_label[r, c]] -= 1
                    new_label[r, c] = miss
                    counts[miss] += 1
                    break
    return SuperpixelSet(label_grid=new_label, order=sp.order.copy(),
                         mask_ids=sp.mask_ids.copy(), levels=list(sp.levels),
                         scores=list(sp.scores))


def bbox_of(sp: SuperpixelSet, i: int) -> BBox:
    """Tight bounding box of superpixel `i`, inclusive pixel coordinates."""
    mask = sp.mask(i)
    rows, cols = np.nonzero(mask)
    return BBox(int(rows.min()), int(cols.min()), int(rows.max()), int(cols.max()))


def centroid_area(sp: SuperpixelSet, i: int) -> tuple[tuple[float, float], int]:
    mask = sp.mask(i)
    rows, cols = np.nonzero(mask)
    return (float(rows.mean()), float(cols.mean())), int(rows.size)


def shuffle_superpixels(sp: SuperpixelSet, seed: int) -> SuperpixelSet:
    """Apply a seeded permutation to superpixel order; content is unchanged."""
    m = sp.num_superpixels
    perm = np.random.default_rng(seed).permutation(m)
    inverse = np.empty(m, dtype=np.int64)
    inverse[perm] = np.arange(m)
    return SuperpixelSet(label_grid=inverse[sp.label_grid],
                         order=sp.order[perm],
                         mask_ids=sp.mask_ids[perm],
                         levels=[sp.levels[j] for j in perm] if sp.levels else [],
                         scores=[sp.scores[j] for j in perm] if sp.scores else [])


def reorder_superpixels(sp: SuperpixelSet, perm: np.ndarray) -> SuperpixelSet:
    """Place original row perm[i] at row i (explicit-permutation variant)."""
    perm = np.asarray(perm)
    m = sp.num_superpixels
    inverse = np.empty(m, dtype=np.int64)
    inverse[perm] = np.arange(m)
    return SuperpixelSet(label_grid=inverse[sp.label_grid],
                         order=sp.order[perm],
                         mask_ids=sp.mask_ids[perm],
                         levels=[sp.levels[j] for j in perm] if sp.levels else [],
                         scores=[sp.scores[j] for j in perm] if sp.scores else [])


# ---------------------------------------------------------------------------
# mask file format (text): header {height,width,count}; per mask
# {id, level, score, rle}.  Canonical output round-trips byte-exactly.
# ---------------------------------------------------------------------------

def save_mask_file(path, cands: list[CandidateMask], dims: tuple[int, int]):
    height, width = dims
    lines = [f"height {height}", f"width {width}", f"count {len(cands)}"]
    for c in cands:
        lines.append(f"id {c.id}")
        lines.append(f"level {c.level}")
        lines.append(f"score {c.score!r}")
        lines.append("rle " + " ".join(str(r) for r in encode_rle(c.mask)))
    with open(path, "w", encoding="ascii") as f:
        f.write("\n".join(lines) + "\n")


def _expect(lines: list[str], pos: int, key: str) -> str:
    if pos >= len(lines):
        raise FormatError(key, "unexpected end of file")
    parts = lines[pos].split(" ", 1)
    if parts[0] != key or len(parts) != 2:
        raise FormatError(key, f"expected '{key} <value>' at line {pos + 1}")
    return parts[1]


def load_mask_file(path) -> tuple[list[CandidateMask], tuple[int, int]]:
    with open(path, "r", encoding="ascii") as f:
        lines = [ln.rstrip("\n") for ln in f if ln.strip()]
    pos = 0
    try:
        height = int(_expect(lines, pos, "height")); pos += 1
        width = int(_expect(lines, pos, "width")); pos += 1
        count = int(_expect(lines, pos, "count")); pos += 1
    except ValueError as e:
        raise FormatError("header", str(e)) from e
    cands = []
    for _ in range(count):
        try:
            cid = int(_expect(lines, pos, "id")); pos += 1
        except ValueError as e:
            raise FormatError("id", str(e)) from e
        level = _expect(lines, pos, "level"); pos += 1
        if level not in LEVELS:
            raise FormatError("level", f"unknown level {level!r}")
        try:
            score = float(_expect(lines, pos, "score")); pos += 1
        except ValueError as e:
            raise FormatError("score", str(e)) from e
        try:
            runs = [int(tok) for tok in _expect(lines, pos, "rle").split()]
        except ValueError as e:
            raise FormatError("rle", str(e)) from e
        pos += 1
        mask = decode_rle(runs, (height, width))
        cands.append(CandidateMask(id=cid, level=level, score=score, mask=mask))
    if pos != len(lines):
        raise FormatError("count", "trailing data after declared masks")
    return cands, (height, width)


def superpixels_to_candidates(sp: SuperpixelSet) -> list[CandidateMask]:
    """Express a partition as disjoint candidate masks (for saving)."""
    out = []
    for i in range(sp.num_superpixels):
        level = sp.levels[i] if sp.levels else "whole"
        score = sp.scores[i] if sp.scores else 1.0
        cid = int(sp.mask_ids[i]) if sp.mask_ids[i] >= 0 else i
        out.append(CandidateMask(id=cid, level=level, score=score, mask=sp.mask(i)))
    return out
