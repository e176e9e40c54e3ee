"""Pairwise Dice agreement and median-agreement annotator filtering."""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .masks import as_mask, check_same_shape

DEFAULT_THRESHOLD = 0.9


@dataclass(frozen=True)
class AnnotationSet:
    """Masks for one image, keyed by annotator id in a fixed order."""

    image_id: str
    annotators: tuple[str, ...]
    masks: tuple[np.ndarray, ...]

    def __post_init__(self):
        annotators = tuple(str(a) for a in self.annotators)
        masks = tuple(as_mask(m) for m in self.masks)
        if not annotators:
            raise ValueError("an annotation set needs at least one annotator")
        if len(annotators) != len(masks):
            raise ValueError(f"{len(annotators)} annotator ids for {len(masks)} masks")
        if len(set(annotators)) != len(annotators):
            raise ValueError("annotator ids must be unique")
        for m in masks[1:]:
            check_same_shape(masks[0], m)
        object.__setattr__(self, "annotators", annotators)
        object.__setattr__(self, "masks", masks)

    @classmethod
    def from_dict(cls, image_id: str, masks: dict[str, np.ndarray]) -> "AnnotationSet":
        return cls(image_id, tuple(masks), tuple(masks.values()))

    def __len__(self) -> int:
        return len(self.annotators)

    @property
    def shape(self) -> tuple[int, int]:
        return self.masks[0].shape

    def stack(self) -> np.ndarray:
        return np.stack(self.masks)

    def subset(self, annotators: Sequence[str]) -> "AnnotationSet":
        """Select annotators, keeping the original order."""
        wanted = set(annotators)
        unknown = wanted - set(self.annotators)
        if unknown:
            raise KeyError(f"unknown annotators: {sorted(unknown)}")
        pairs = [(a, m) for a, m in zip(self.annotators, self.masks) if a in wanted]
        return AnnotationSet(self.image_id, tuple(a for a, _ in pairs), tuple(m for _, m in pairs))


@dataclass(frozen=True)
class AgreementMatrix:
    annotators: tuple[str, ...]
    scores: np.ndarray

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(self.annotators)
        for row in self.scores:
            writer.writerow(f"{v:.6f}" for v in row)
        return buf.getvalue()


@dataclass(frozen=True)
class AnnotatorRecord:
    annotator: str
    median: float
    included: bool


@dataclass(frozen=True)
class FilterReport:
    threshold: float
    records: tuple[AnnotatorRecord, ...] = field(default_factory=tuple)

    @property
    def excluded_count(self) -> int:
        return sum(not r.included for r in self.records)

    @property
    def included(self) -> tuple[str, ...]:
        return tuple(r.annotator for r in self.records if r.included)

    @property
    def excluded(self) -> tuple[str, ...]:
        return tuple(r.annotator for r in self.records if not r.included)

    @property
    def all_excluded(self) -> bool:
        return bool(self.records) and self.excluded_count == len(self.records)

    def to_dict(self) -> dict:
        return {
            "threshold": self.threshold,
            "excluded_count": self.excluded_count,
            "all_excluded": self.all_excluded,
            "annotators": [
                {"id": r.annotator, "median_dice": r.median, "included": r.included}
                for r in self.records
            ],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2) + "\n"

    @classmethod
    def from_dict(cls, data: dict) -> "FilterReport":
        records = tuple(
            AnnotatorRecord(str(r["id"]), float(r["median_dice"]), bool(r["included"]))
            for r in data["annotators"]
        )
        return cls(float(data["threshold"]), records)


def dice_from_counts(intersection: int, size_a: int, size_b: int) -> float:
    """Dice score from pixel counts; two empty masks agree perfectly."""
    total = size_a + size_b
    if total == 0:
        return 1.0
    return 2.0 * intersection / total


def dice(a, b) -> float:
    a = as_mask(a)
    b = as_mask(b)
    check_same_shape(a, b)
    inter = int(np.count_nonzero(a & b))
    return dice_from_counts(inter, int(np.count_nonzero(a)), int(np.count_nonzero(b)))


def _intersection_counts(stack: np.ndarray) -> np.ndarray:
    """All pairwise foreground intersection counts of an (n, H, W) stack."""
    flat = stack.reshape(stack.shape[0], -1)
    npix = flat.shape[1]
    # float32 sums of 0/1 values are exact below 2**24
    if npix < 2**24:
        x = flat.astype(np.float32)
        return np.rint(x @ x.T).astype(np.int64)
    x = flat.astype(np.float64)
    return np.rint(x @ x.T).astype(np.int64)


def pairwise_matrix(annotations: AnnotationSet) -> AgreementMatrix:
    n = len(annotations)
    if n < 2:
        raise ValueError(f"pairwise agreement needs at least 2 annotators, got {n}")
    inter = _intersection_counts(annotations.stack())
    sizes = np.diag(inter)
    scores = np.ones((n, n), dtype=np.float64)
    for i in range(n):
        for j in range(i + 1, n):
            d = dice_from_counts(int(inter[i, j]), int(sizes[i]), int(sizes[j]))
            scores[i, j] = scores[j, i] = d
    scores.flags.writeable = False
    return AgreementMatrix(annotations.annotators, scores)


def median_agreement(matrix: AgreementMatrix) -> dict[str, float]:
    """Median Dice of each annotator against every other annotator."""
    n = len(matrix.annotators)
    if n < 2:
        raise ValueError(f"median agreement needs at least 2 annotators, got {n}")
    off_diag = ~np.eye(n, dtype=bool)
    return {
        a: float(np.median(matrix.scores[i][off_diag[i]]))
        for i, a in enumerate(matrix.annotators)
    }


def filter_annotators(
    annotations: AnnotationSet, threshold: float = DEFAULT_THRESHOLD
) -> tuple[AnnotationSet | None, FilterReport]:
    """Keep annotators whose median pairwise Dice is at least ``threshold``.

    Medians are computed once on the full set; there is no re-filtering of the
    survivors. When every annotator is excluded the returned set is ``None``
    and ``report.all_excluded`` is true.
    """
    if not 0.0 <= threshold <= 1.0:
        raise ValueError(f"threshold must lie in [0, 1], got {threshold}")
    medians = median_agreement(pairwise_matrix(annotations))
    records = tuple(AnnotatorRecord(a, m, not m < threshold) for a, m in medians.items())
    report = FilterReport(float(threshold), records)
    kept = report.included
    return (annotations.subset(kept) if kept else None), report
