"""Synthetic referring-selection scenes.

A scene is a patch grid populated with non-overlapping rectangular objects on
a jittered lattice.  Every patch carries an orthogonal one-hot signature of
its object's category and attribute (background has its own, deliberately
salient, signature), plus a faint sinusoidal positional field and gaussian
noise.  Candidate masks mimic nested segmentation output: each object's
whole mask, its two part halves and four sub-part quarters, one whole
background mask, and a few spurious overlapping rectangles.

Queries name a unique target object by attribute, absolute or relative
position, relative size, or context (the attribute of the nearest
other-category neighbor).  Position, size and context queries are designed
to be unanswerable from pooled patch content alone.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .errors import ValidationError
from .layers import sinusoidal_pe_2d
from .projector import PatchGrid
from .superpixels import CandidateMask

__all__ = ["SceneSpec", "SceneObject", "Scene", "ReferringQuery", "NoValidTarget",
           "QUERY_KINDS", "RELATIONS", "POSITIONAL_KINDS", "gen_scene", "gen_query",
           "gen_corpus", "corpus_spec", "query_dim"]

QUERY_KINDS = ("attribute", "absolute_position", "relative_position",
               "relative_size", "context")
POSITIONAL_KINDS = ("absolute_position", "relative_position", "relative_size")
RELATIONS = ("leftmost", "rightmost", "topmost", "bottommost",
             "left_of", "right_of", "above", "below",
             "larger", "smaller", "near")
_REL_INDEX = {r: i for i, r in enumerate(RELATIONS)}


class NoValidTarget(ValidationError):
    """The scene admits no unique target for the requested query kind."""


@dataclass(frozen=True)
class SceneSpec:
    """Parameters of scene generation; one spec describes one scene draw."""

    height: int = 24
    width: int = 24
    num_objects: int = 6
    num_categories: int = 4
    num_attributes: int = 4
    cell: int = 3
    embed_dim: int = 32
    background_scale: float = 2.0
    noise_sigma: float = 0.1
    jitter_scale: float = 0.05
    num_spurious: int = 2

    def __post_init__(self):
        if self.num_objects < 1:
            raise ValidationError("num_objects must be at least 1")
        if self.embed_dim < self.num_categories + self.num_attributes + 1:
            raise ValidationError("embed_dim too small for the signature basis")
        if self.embed_dim % 4 != 0:
            raise ValidationError("embed_dim must be divisible by 4 (jitter field)")
        if self.cell < 2:
            raise ValidationError("lattice cell must be at least 2")


@dataclass(frozen=True)
class SceneObject:
    id: int  # 1-based; 0 is background
    category: int
    attribute: int
    row0: int
    col0: int
    height: int
    width: int

    @property
    def centroid(self) -> tuple[float, float]:
        return (self.row0 + (self.height - 1) / 2.0,
                self.col0 + (self.width - 1) / 2.0)

    @property
    def area(self) -> int:
        return self.height * self.width


@dataclass
class Scene:
    spec: SceneSpec
    seed: int
    grid: PatchGrid
    candidates: list[CandidateMask]
    labels: np.ndarray                # (H, W) object id per patch, 0 = background
    objects: list[SceneObject]
    whole_ids: dict[int, int]         # object id -> candidate id of its whole mask


@dataclass(frozen=True)
class ReferringQuery:
    kind: str
    vector: np.ndarray
    target_object: int
    relation: str | None = None


def query_dim(spec: SceneSpec) -> int:
    return spec.num_categories + spec.num_attributes + len(RELATIONS)


def _query_vector(spec: SceneSpec, category: int | None, attribute: int | None,
                  relation: str | None) -> np.ndarray:
    v = np.zeros(query_dim(spec))
    if category is not None:
        v[category] = 1.0
    if attribute is not None:
        v[spec.num_categories + attribute] = 1.0
    if relation is not None:
        v[spec.num_categories + spec.num_attributes + _REL_INDEX[relation]] = 1.0
    return v


def gen_scene(seed: int, spec: SceneSpec) -> Scene:
    """Deterministically generate one scene from (seed, spec)."""
    rng = np.random.default_rng([seed, 0x5C])
    h, w, cell = spec.height, spec.width, spec.cell
    cells = [(r * cell, c * cell) for r in range(h // cell) for c in range(w // cell)]
    if spec.num_objects > len(cells):
        raise ValidationError(
            f"cannot place {spec.num_objects} objects on {len(cells)} lattice cells")
    rng.shuffle(cells)

    objects: list[SceneObject] = []
    labels = np.zeros((h, w), dtype=np.int64)
    for i in range(spec.num_objects):
        r0c, c0c = cells[i]
        oh = int(rng.integers(2, cell + 1))
        ow = int(rng.integers(2, cell + 1))
        r0 = r0c + int(rng.integers(0, cell - oh + 1))
        c0 = c0c + int(rng.integers(0, cell - ow + 1))
        cat = int(rng.integers(0, spec.num_categories))
        attr = int(rng.integers(0, spec.num_attributes))
        obj = SceneObject(id=i + 1, category=cat, attribute=attr,
                          row0=r0, col0=c0, height=oh, width=ow)
        objects.append(obj)
        labels[r0:r0 + oh, c0:c0 + ow] = obj.id

    feats = np.zeros((h, w, spec.embed_dim))
    bg_ch = spec.num_categories + spec.num_attributes
    feats[labels == 0, bg_ch] = spec.background_scale
    for o in objects:
        sl = (slice(o.row0, o.row0 + o.height), slice(o.col0, o.col0 + o.width))
        feats[sl][..., o.category] = 1.0
        feats[sl][..., spec.num_categories + o.attribute] = 1.0
    feats += spec.jitter_scale * sinusoidal_pe_2d(h, w, spec.embed_dim).reshape(
        h, w, spec.embed_dim)
    feats += rng.normal(0.0, spec.noise_sigma, size=feats.shape)

    cands: list[CandidateMask] = []
    whole_ids: dict[int, int] = {}
    next_id = 0

    def emit(mask: np.ndarray, level: str, score: float) -> int:
        nonlocal next_id
        cands.append(CandidateMask(id=next_id, level=level, score=score, mask=mask))
        next_id += 1
        return next_id - 1

    if (labels == 0).any():
        emit(labels == 0, "whole", float(rng.uniform(0.7, 1.0)))
    for o in objects:
        mask = labels == o.id
        whole_ids[o.id] = emit(mask, "whole", float(rng.uniform(0.8, 1.0)))
        # two part halves along the longer axis, four sub-part quarters
        rmid = (o.row0 + o.height // 2) if o.height >= o.width else None
        if rmid is not None:
            top = mask & (np.arange(h)[:, None] < rmid)
            bottom = mask & ~(np.arange(h)[:, None] < rmid)
            halves = [top, bottom]
        else:
            cmid = o.col0 + o.width // 2
            left = mask & (np.arange(w)[None, :] < cmid)
            halves = [left, mask & ~(np.arange(w)[None, :] < cmid)]
        for half in halves:
            if half.any():
                emit(half, "part", float(rng.uniform(0.5, 0.9)))
        rq = o.row0 + o.height // 2
        cq = o.col0 + o.width // 2
        rr = np.arange(h)[:, None]
        cc = np.arange(w)[None, :]
        for quad in ((rr < rq) & (cc < cq), (rr < rq) & (cc >= cq),
                     (rr >= rq) & (cc < cq), (rr >= rq) & (cc >= cq)):
            piece = mask & quad
            if piece.any():
                emit(piece, "subpart", float(rng.uniform(0.3, 0.7)))
    for _ in range(spec.num_spurious):
        sh = int(rng.integers(2, 5))
        sw = int(rng.integers(2, 5))
        r0 = int(rng.integers(0, max(1, h - sh + 1)))
        c0 = int(rng.integers(0, max(1, w - sw + 1)))
        m = np.zeros((h, w), dtype=bool)
        m[r0:r0 + sh, c0:c0 + sw] = True
        emit(m, "subpart", float(rng.uniform(0.3, 0.7)))

    order = rng.permutation(len(cands))
    cands = [cands[i] for i in order]

    grid = PatchGrid(height=h, width=w, dim=spec.embed_dim,
                     embeddings=feats.reshape(h * w, spec.embed_dim))
    return Scene(spec=spec, seed=seed, grid=grid, candidates=cands,
                 labels=labels, objects=objects, whole_ids=whole_ids)


# ---------------------------------------------------------------------------
# queries
# ---------------------------------------------------------------------------

_AXIS_OF = {"leftmost": (1, min), "rightmost": (1, max),
            "topmost": (0, min), "bottommost": (0, max)}


def _groups_by_category(objs: list[SceneObject]) -> dict[int, list[SceneObject]]:
    groups: dict[int, list[SceneObject]] = {}
    for o in objs:
        groups.setdefault(o.category, []).append(o)
    return groups


def gen_query(scene: Scene, kind: str, seed: int) -> ReferringQuery:
    """Generate a query of the given kind with a unique target, or raise."""
    if kind not in QUERY_KINDS:
        raise ValidationError(f"unknown query kind: {kind!r}")
    rng = np.random.default_rng([seed, 0x9E])
    spec = scene.spec
    objs = scene.objects
    groups = _groups_by_category(objs)

    if kind == "attribute":
        pair_counts: dict[tuple[int, int], int] = {}
        for o in objs:
            pair_counts[(o.category, o.attribute)] = \
                pair_counts.get((o.category, o.attribute), 0) + 1
        unique = [o for o in objs if pair_counts[(o.category, o.attribute)] == 1]
        if not unique:
            raise NoValidTarget("no object has a unique (category, attribute)")
        o = unique[int(rng.integers(0, len(unique)))]
        return ReferringQuery(kind=kind, target_object=o.id,
                              vector=_query_vector(spec, o.category, o.attribute, None))

    if kind == "absolute_position":
        options = [(c, rel) for c, g in groups.items() if len(g) >= 2
                   for rel in _AXIS_OF]
        rng.shuffle(options)
        for cat, rel in options:
            axis, extreme = _AXIS_OF[rel]
            coords = sorted(((o.centroid[axis], o) for o in groups[cat]),
                            key=lambda t: t[0])
            lo, hi = coords[0], coords[-1]
            if extreme is min:
                best, second = lo, coords[1]
            else:
                best, second = hi, coords[-2]
            if abs(best[0] - second[0]) >= 1.0:
                return ReferringQuery(kind=kind, target_object=best[1].id,
                                      relation=rel,
                                      vector=_query_vector(spec, cat, None, rel))
        raise NoValidTarget("no category has an unambiguous positional extreme")

    if kind == "relative_position":
        options = [c for c, g in groups.items() if len(g) == 2]
        rng.shuffle(options)
        for cat in options:
            a, b = groups[cat]
            for rel, axis in (("left_of", 1), ("right_of", 1),
                              ("above", 0), ("below", 0)):
                ca, cb = a.centroid[axis], b.centroid[axis]
                if abs(ca - cb) < 1.0:
                    continue
                if rel in ("left_of", "above"):
                    target = a if ca < cb else b
                else:
                    target = a if ca > cb else b
                return ReferringQuery(kind=kind, target_object=target.id,
                                      relation=rel,
                                      vector=_query_vector(spec, cat, None, rel))
        raise NoValidTarget("no category pair with clear axis separation")

    if kind == "relative_size":
        options = [(c, rel) for c, g in groups.items() if len(g) >= 2
                   for rel in ("larger", "smaller")]
        rng.shuffle(options)
        for cat, rel in options:
            by_area = sorted(groups[cat], key=lambda o: o.area)
            if rel == "larger":
                best, second = by_area[-1], by_area[-2]
            else:
                best, second = by_area[0], by_area[1]
            if abs(best.area - second.area) >= 2:
                return ReferringQuery(kind=kind, target_object=best.id, relation=rel,
                                      vector=_query_vector(spec, cat, None, rel))
        raise NoValidTarget("no category with a unique area extreme")

    # context: the member of a category whose nearest other-category
    # neighbor carries a given attribute
    options = [c for c, g in groups.items() if len(g) >= 2]
    rng.shuffle(options)
    for cat in options:
        members = groups[cat]
        others = [o for o in objs if o.category != cat]
        if len(others) < 2:
            continue
        nearest: dict[int, SceneObject] = {}
        ok = True
        for m in members:
            d = sorted(((_dist(m, o), o) for o in others), key=lambda t: t[0])
            if len(d) >= 2 and d[1][0] - d[0][0] < 0.75:
                ok = False
                break
            nearest[m.id] = d[0][1]
        if not ok:
            continue
        attrs = [nearest[m.id].attribute for m in members]
        for x in set(attrs):
            # a member whose own attribute is x would confound the neighbor
            # reference for a bilinear scorer; skip such draws
            if any(m.attribute == x for m in members):
                continue
            hits = [m for m in members if nearest[m.id].attribute == x]
            if len(hits) == 1:
                return ReferringQuery(kind=kind, target_object=hits[0].id,
                                      relation="near",
                                      vector=_query_vector(spec, cat, x, "near"))
    raise NoValidTarget("no unambiguous context query available")


def _dist(a: SceneObject, b: SceneObject) -> float:
    (ra, ca), (rb, cb) = a.centroid, b.centroid
    return float(np.hypot(ra - rb, ca - cb))


# ---------------------------------------------------------------------------
# the calibrated corpus
# ---------------------------------------------------------------------------

def corpus_spec(num_objects: int = 39) -> SceneSpec:
    """The 24x24 corpus scene spec used for token accounting and purity."""
    return SceneSpec(height=24, width=24, num_objects=num_objects,
                     num_categories=4, num_attributes=4, cell=3, embed_dim=32)


def gen_corpus(seed: int, n_scenes: int, k_min: int = 28, k_max: int = 50,
               spec: SceneSpec | None = None) -> list[Scene]:
    """Scenes with planted-object counts stratified over [k_min, k_max].

    The default range is calibrated so the filtered superpixel count
    (objects + one background mask) averages 40 per scene.
    """
    if spec is None:
        spec = corpus_spec()
    rng = np.random.default_rng([seed, 0xC0])
    ks = np.array([k_min + round((k_max - k_min) * i / max(1, n_scenes - 1))
                   for i in range(n_scenes)])
    rng.shuffle(ks)
    seeds = rng.integers(0, 2 ** 62, size=n_scenes)
    return [gen_scene(int(s), replace(spec, num_objects=int(k)))
            for s, k in zip(seeds, ks)]
