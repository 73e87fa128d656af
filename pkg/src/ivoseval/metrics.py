"""Region Jaccard, boundary F and their mean, per frame and object."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from typing import Dict, FrozenSet, Iterable, List, Sequence

import numpy as np

from .masks import boundary, dilate, disk, extract_object


class MetricError(ValueError):
    pass


@dataclass(frozen=True)
class BoundaryTolerance:
    fraction: float = 0.008

    def __post_init__(self):
        if not 0 < self.fraction < 1:
            raise MetricError("boundary tolerance fraction must lie in (0, 1)")

    def radius(self, shape) -> int:
        h, w = shape[:2]
        return int(math.ceil(self.fraction * math.hypot(h, w)))


@dataclass(frozen=True)
class FrameObjectScore:
    frame: int
    object: int
    j: float
    f: float

    @property
    def jf(self) -> float:
        return (self.j + self.f) / 2


@dataclass
class SequenceScoreTable:
    """Scores for every (frame, object) cell.

    ``excluded`` frames are still scored and still count towards
    :func:`aggregate`; they are only skipped by :func:`worst_frame`.
    """

    scores: List[FrameObjectScore]
    excluded: FrozenSet[int] = field(default_factory=frozenset)

    def frames(self) -> List[int]:
        return sorted({s.frame for s in self.scores})

    def objects(self) -> List[int]:
        return sorted({s.object for s in self.scores})

    def frame_means(self) -> Dict[int, float]:
        sums: Dict[int, List[float]] = {}
        for s in self.scores:
            sums.setdefault(s.frame, []).append(s.jf)
        return {k: sum(v) / len(v) for k, v in sorted(sums.items())}

    def object_means(self) -> Dict[int, float]:
        sums: Dict[int, List[float]] = {}
        for s in self.scores:
            sums.setdefault(s.object, []).append(s.jf)
        return {k: sum(v) / len(v) for k, v in sorted(sums.items())}

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["frame", "object", "J", "F", "JF"])
        for s in sorted(self.scores, key=lambda s: (s.frame, s.object)):
            writer.writerow([s.frame, s.object, f"{s.j:.6f}", f"{s.f:.6f}", f"{s.jf:.6f}"])
        return buf.getvalue()


def _check_pair(pred: np.ndarray, gt: np.ndarray):
    pred = np.asarray(pred, dtype=bool)
    gt = np.asarray(gt, dtype=bool)
    if pred.shape != gt.shape:
        raise MetricError(f"mask size mismatch: {pred.shape} vs {gt.shape}")
    return pred, gt


def jaccard(pred: np.ndarray, gt: np.ndarray) -> float:
    pred, gt = _check_pair(pred, gt)
    union = int(np.count_nonzero(pred | gt))
    if union == 0:
        return 1.0
    return int(np.count_nonzero(pred & gt)) / union


def boundary_f(pred: np.ndarray, gt: np.ndarray, tol: BoundaryTolerance = BoundaryTolerance()) -> float:
    """F-measure of boundary precision and recall within ``tol`` of the diagonal.

    A boundary pixel matches when the other boundary has a pixel within
    Euclidean distance ``tol.radius``; this is a disk dilation followed by an
    intersection.
    """
    pred, gt = _check_pair(pred, gt)
    pb, gb = boundary(pred), boundary(gt)
    n_pred, n_gt = int(np.count_nonzero(pb)), int(np.count_nonzero(gb))
    if n_pred == 0 and n_gt == 0:
        return 1.0
    if n_pred == 0 or n_gt == 0:
        return 0.0
    se = disk(tol.radius(pred.shape))
    precision = int(np.count_nonzero(pb & dilate(gb, se))) / n_pred
    recall = int(np.count_nonzero(gb & dilate(pb, se))) / n_gt
    if precision + recall == 0:
        return 0.0
    return 2 * precision * recall / (precision + recall)


def jf(pred: np.ndarray, gt: np.ndarray, tol: BoundaryTolerance = BoundaryTolerance()) -> float:
    return (jaccard(pred, gt) + boundary_f(pred, gt, tol)) / 2


def evaluate_sequence(
    preds: Sequence[np.ndarray],
    gts: Sequence[np.ndarray],
    objects: Iterable[int],
    excluded: Iterable[int] = (),
    tol: BoundaryTolerance = BoundaryTolerance(),
) -> SequenceScoreTable:
    if len(preds) != len(gts):
        raise MetricError(f"frame count mismatch: {len(preds)} predictions, {len(gts)} annotations")
    objects = list(objects)
    scores = []
    for t, (pred, gt) in enumerate(zip(preds, gts)):
        pred, gt = np.asarray(pred), np.asarray(gt)
        if pred.shape != gt.shape:
            raise MetricError(f"frame {t}: size mismatch {pred.shape} vs {gt.shape}")
        for obj in objects:
            p, g = extract_object(pred, obj), extract_object(gt, obj)
            scores.append(FrameObjectScore(t, obj, jaccard(p, g), boundary_f(p, g, tol)))
    return SequenceScoreTable(scores, frozenset(excluded))


def frames_by_score(table: SequenceScoreTable) -> List[int]:
    """Included frames from worst to best mean J&F (ties: lower index first)."""
    means = table.frame_means()
    keep = [t for t in means if t not in table.excluded]
    return sorted(keep, key=lambda t: (means[t], t))


def worst_frame(table: SequenceScoreTable) -> int:
    order = frames_by_score(table)
    if not order:
        raise MetricError("no scored frames to choose from")
    return order[0]


def aggregate(table: SequenceScoreTable) -> float:
    if not table.scores:
        raise MetricError("cannot aggregate an empty score table")
    return sum(s.jf for s in table.scores) / len(table.scores)
