"""Fusion of an annotation set into mean, union, intersection and
disagreement maps, plus the interior/boundary/full split."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .agreement import AnnotationSet

MAP_NAMES = ("mean", "union", "intersection", "disagreement", "interior", "boundary", "full")


@dataclass(frozen=True)
class ProbabilityMap:
    """Per-pixel vote counts out of ``n`` annotators.

    Counts are kept as integers so that the relations to union and
    intersection are exact; ``values`` gives the floating point fractions.
    """

    counts: np.ndarray
    n: int

    @property
    def values(self) -> np.ndarray:
        return self.counts / self.n

    @property
    def shape(self) -> tuple[int, int]:
        return self.counts.shape

    def to_gray(self) -> np.ndarray:
        """Linear 0-255 rendering, rounding halves up."""
        c = self.counts.astype(np.int64)
        return ((2 * 255 * c + self.n) // (2 * self.n)).astype(np.uint8)


@dataclass(frozen=True)
class SemanticSplit:
    interior: np.ndarray
    boundary_band: np.ndarray
    full: np.ndarray


def _nonempty(annotations: AnnotationSet) -> np.ndarray:
    if annotations is None or len(annotations) == 0:
        raise ValueError("consensus needs a non-empty annotation set")
    return annotations.stack()


def mean_map(annotations: AnnotationSet) -> ProbabilityMap:
    stack = _nonempty(annotations)
    return ProbabilityMap(stack.sum(axis=0, dtype=np.int64), stack.shape[0])


def union(annotations: AnnotationSet) -> np.ndarray:
    return _nonempty(annotations).any(axis=0)


def intersection(annotations: AnnotationSet) -> np.ndarray:
    return _nonempty(annotations).all(axis=0)


def disagreement(annotations: AnnotationSet) -> np.ndarray:
    """Pixels marked by some, but not all, annotators."""
    stack = _nonempty(annotations)
    return stack.any(axis=0) & ~stack.all(axis=0)


def threshold_map(pmap: ProbabilityMap, t: float) -> np.ndarray:
    """Foreground where the vote fraction is at least ``t``.

    ``t=0.5`` is majority vote with ties going to foreground and ``t=1``
    recovers the intersection.
    """
    if not 0.0 <= t <= 1.0:
        raise ValueError(f"t must lie in [0, 1], got {t}")
    return pmap.values >= t


def semantic_split(annotations: AnnotationSet) -> SemanticSplit:
    if annotations is None or len(annotations) < 2:
        raise ValueError("semantic split needs at least 2 annotators")
    return SemanticSplit(
        interior=intersection(annotations),
        boundary_band=disagreement(annotations),
        full=union(annotations),
    )


def all_maps(annotations: AnnotationSet) -> dict[str, np.ndarray]:
    """Every consensus map as an 8-bit gray image, keyed by map name.

    The interior/boundary/full entries follow :func:`semantic_split` and are
    therefore only present for sets with at least two annotators.
    """
    pm = mean_map(annotations)
    to_u8 = lambda m: m.astype(np.uint8) * 255  # noqa: E731
    out = {
        "mean": pm.to_gray(),
        "union": to_u8(union(annotations)),
        "intersection": to_u8(intersection(annotations)),
        "disagreement": to_u8(disagreement(annotations)),
    }
    if len(annotations) >= 2:
        split = semantic_split(annotations)
        out["interior"] = to_u8(split.interior)
        out["boundary"] = to_u8(split.boundary_band)
        out["full"] = to_u8(split.full)
    return out
