"""Simulated annotators built from a known ground-truth mask.

Three kinds of variation are modelled: gross errors (dropped or spurious
components, isolated speckle pixels), and boundary uncertainty (per-component
dilation or erosion with a disc).

Randomness
----------
Every operation takes a ``seed`` (an int or a ``numpy.random.SeedSequence``)
and builds its own ``numpy.random.Generator`` (PCG64) from it. The draw order
of each operation is fixed and documented on the function, so a given seed
always replays to the same result:

* ``perturb_boundary``: for each component in raster label order,
  ``integers(0, 2)`` (1 = dilate, 0 = erode) then ``integers(0, radius + 1)``.
* ``drop_add_components``: one ``random()`` per scene component (dropped when
  below ``p_drop``), then one ``random()`` (add when below ``p_add``), then
  ``integers(0, n_valid_positions)`` if a component is added.
* ``add_speckle``: per attempt, ``integers(0, height)`` then ``integers(0, width)``.
* ``simulate_annotator``: ``SeedSequence(profile.seed).spawn(3)`` gives the
  seeds of the three steps above, in the order drop/add, boundary, speckle.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import Sequence, Union

import numpy as np
from scipy import ndimage

from .agreement import AnnotationSet
from .masks import as_mask, connected_components

SeedLike = Union[int, np.random.SeedSequence]

_SQUARE3 = np.ones((3, 3), dtype=bool)


class SimulationError(Exception):
    pass


@dataclass(frozen=True)
class AnnotatorProfile:
    jitter_radius: int = 0
    p_drop: float = 0.0
    p_add: float = 0.0
    add_size: int = 1
    speckle_count: int = 0
    seed: int = 0

    def __post_init__(self):
        if self.jitter_radius < 0:
            raise ValueError("jitter_radius must be >= 0")
        if not 0.0 <= self.p_drop <= 1.0 or not 0.0 <= self.p_add <= 1.0:
            raise ValueError("p_drop and p_add must lie in [0, 1]")
        if self.add_size < 1:
            raise ValueError("add_size must be >= 1")
        if self.speckle_count < 0:
            raise ValueError("speckle_count must be >= 0")

    @classmethod
    def from_dict(cls, data: dict) -> "AnnotatorProfile":
        unknown = set(data) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown profile fields: {sorted(unknown)}")
        return cls(
            jitter_radius=int(data.get("jitter_radius", 0)),
            p_drop=float(data.get("p_drop", 0.0)),
            p_add=float(data.get("p_add", 0.0)),
            add_size=int(data.get("add_size", 1)),
            speckle_count=int(data.get("speckle_count", 0)),
            seed=int(data.get("seed", 0)),
        )

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class GroundTruthScene:
    truth: np.ndarray
    component_inventory: tuple[np.ndarray, ...]

    @classmethod
    def from_mask(cls, truth, connectivity: int = 8) -> "GroundTruthScene":
        truth = as_mask(truth).copy()
        truth.flags.writeable = False
        lm = connected_components(truth, connectivity)
        comps = tuple(lm.labels == k for k in range(1, lm.max_label + 1))
        return cls(truth, comps)


def disc(radius: int) -> np.ndarray:
    """Digital disc: offsets with dx**2 + dy**2 <= (radius + 0.5)**2.

    Radius 1 is the full 3x3 square, radius 0 a single pixel.
    """
    r = int(radius)
    yy, xx = np.mgrid[-r : r + 1, -r : r + 1]
    return (xx * xx + yy * yy) <= (r + 0.5) ** 2


def dilate(mask, radius: int) -> np.ndarray:
    mask = as_mask(mask)
    if radius == 0:
        return mask.copy()
    return ndimage.binary_dilation(mask, structure=disc(radius))


def erode(mask, radius: int) -> np.ndarray:
    """Disc erosion; pixels outside the image do not erode the mask."""
    mask = as_mask(mask)
    if radius == 0:
        return mask.copy()
    return ndimage.binary_erosion(mask, structure=disc(radius), border_value=1)


def perturb_boundary(truth, radius: int, seed: SeedLike) -> np.ndarray:
    """Dilate or erode each component independently by a random offset."""
    truth = as_mask(truth)
    if radius < 0:
        raise ValueError("radius must be >= 0")
    if radius == 0:
        return truth.copy()
    rng = np.random.default_rng(seed)
    lm = connected_components(truth, 8)
    out = np.zeros_like(truth)
    for k in range(1, lm.max_label + 1):
        comp = lm.labels == k
        grow = bool(rng.integers(0, 2))
        offset = int(rng.integers(0, radius + 1))
        out |= dilate(comp, offset) if grow else erode(comp, offset)
    return out


def _square_patch(size: int) -> np.ndarray:
    """Near-square patch of exactly ``size`` pixels, filled row by row."""
    side = math.isqrt(size - 1) + 1
    flat = np.zeros(side * side, dtype=bool)
    flat[:size] = True
    patch = flat.reshape(side, side)
    return patch[patch.any(axis=1)]


def drop_add_components(
    mask,
    scene: GroundTruthScene,
    p_drop: float,
    p_add: float,
    add_size: int,
    seed: SeedLike,
) -> np.ndarray:
    """Delete scene components at random and maybe add one spurious blob.

    The spurious component is placed uniformly among all positions whose
    bounding box stays clear of the truth (and current mask) dilated by one
    pixel.
    """
    mask = as_mask(mask)
    if not 0.0 <= p_drop <= 1.0 or not 0.0 <= p_add <= 1.0:
        raise ValueError("probabilities must lie in [0, 1]")
    if add_size < 1:
        raise ValueError("add_size must be >= 1")
    rng = np.random.default_rng(seed)
    out = mask.copy()
    for comp in scene.component_inventory:
        if rng.random() < p_drop:
            out &= ~comp
    if rng.random() < p_add:
        patch = _square_patch(add_size)
        ph, pw = patch.shape
        forbidden = ndimage.binary_dilation(scene.truth | mask, structure=_SQUARE3)
        h, w = forbidden.shape
        if ph > h or pw > w:
            raise SimulationError(f"no room for a {add_size}-pixel component in a {h}x{w} mask")
        # positions whose ph x pw window contains no forbidden pixel
        sat = np.pad(forbidden.astype(np.int64).cumsum(0).cumsum(1), ((1, 0), (1, 0)))
        window = sat[ph:, pw:] - sat[:-ph, pw:] - sat[ph:, :-pw] + sat[:-ph, :-pw]
        ys, xs = np.nonzero(window == 0)
        if len(ys) == 0:
            raise SimulationError(f"no room for a {add_size}-pixel component")
        i = int(rng.integers(0, len(ys)))
        y, x = int(ys[i]), int(xs[i])
        out[y : y + ph, x : x + pw] |= patch
    return out


def add_speckle(mask, count: int, seed: SeedLike, max_attempts: int | None = None) -> np.ndarray:
    """Add ``count`` isolated single-pixel components.

    A candidate pixel is accepted only if its 3x3 neighbourhood is empty,
    which includes previously placed speckles.
    """
    mask = as_mask(mask)
    if count < 0:
        raise ValueError("count must be >= 0")
    out = mask.copy()
    if count == 0:
        return out
    if max_attempts is None:
        max_attempts = 1000 * count
    rng = np.random.default_rng(seed)
    h, w = out.shape
    placed = attempts = 0
    while placed < count:
        if attempts >= max_attempts:
            raise SimulationError(
                f"placed {placed} of {count} speckles in {attempts} attempts; mask too dense"
            )
        attempts += 1
        y = int(rng.integers(0, h))
        x = int(rng.integers(0, w))
        if out[max(y - 1, 0) : y + 2, max(x - 1, 0) : x + 2].any():
            continue
        out[y, x] = True
        placed += 1
    return out


def simulate_annotator(scene: GroundTruthScene, profile: AnnotatorProfile) -> np.ndarray:
    s_drop, s_jitter, s_speckle = np.random.SeedSequence(profile.seed).spawn(3)
    m = drop_add_components(
        scene.truth, scene, profile.p_drop, profile.p_add, profile.add_size, s_drop
    )
    m = perturb_boundary(m, profile.jitter_radius, s_jitter)
    return add_speckle(m, profile.speckle_count, s_speckle)


def annotator_ids(n: int) -> tuple[str, ...]:
    return tuple(f"sim_{i:03d}" for i in range(n))


def simulate_cohort(
    scene: GroundTruthScene, profiles: Sequence[AnnotatorProfile], image_id: str = "sim"
) -> AnnotationSet:
    if not profiles:
        raise ValueError("a cohort needs at least one profile")
    masks = tuple(simulate_annotator(scene, p) for p in profiles)
    return AnnotationSet(image_id, annotator_ids(len(profiles)), masks)


def blob_truth(
    size: int = 128,
    n_blobs: int = 5,
    radius_range: tuple[int, int] = (15, 20),
    gap: int = 4,
    seed: SeedLike = 0,
    max_attempts: int = 10_000,
) -> np.ndarray:
    """Square mask with ``n_blobs`` non-touching elliptical blobs.

    Blobs keep at least ``gap`` pixels between each other and from the border.
    """
    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[0:size, 0:size]
    truth = np.zeros((size, size), dtype=bool)
    placed: list[tuple[float, float, float]] = []
    attempts = rejected = 0
    while len(placed) < n_blobs:
        if attempts >= max_attempts:
            raise SimulationError(f"could not place {n_blobs} blobs in a {size}x{size} mask")
        attempts += 1
        if rejected >= 200:
            # dead end: start the layout over
            placed.clear()
            truth[:] = False
            rejected = 0
        ry = float(rng.integers(radius_range[0], radius_range[1] + 1))
        rx = float(rng.integers(radius_range[0], radius_range[1] + 1))
        r = max(ry, rx)
        lo, hi = r + gap, size - 1 - r - gap
        if lo > hi:
            raise SimulationError("blobs do not fit in the mask")
        cy = float(rng.uniform(lo, hi))
        cx = float(rng.uniform(lo, hi))
        if any(math.hypot(cy - y, cx - x) < r + pr + gap for y, x, pr in placed):
            rejected += 1
            continue
        rejected = 0
        placed.append((cy, cx, r))
        truth |= ((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2 <= 1.0
    return truth
