"""Precision-recall evaluation and part localization metrics."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass

import numpy as np

from .errors import DimensionMismatch, NoPositives
from .grammar import PoseSpace


@dataclass
class PrCurve:
    """Precision/recall per distinct threshold, ascending threshold order.

    Predicted positive means belief >= threshold.  auc is the trapezoidal
    area of precision over recall with the curve extended horizontally to
    recall 0 from its highest-threshold point (a documented convention;
    PR interpolation is not standardized).
    """

    thresholds: np.ndarray
    precisions: np.ndarray
    recalls: np.ndarray
    auc: float

    def rows(self):
        return list(zip(self.thresholds.tolist(), self.precisions.tolist(),
                        self.recalls.tolist()))

    def write_csv(self, path):
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(["threshold", "precision", "recall"])
            for row in self.rows():
                w.writerow([repr(v) for v in row])
            w.writerow(["auc", repr(self.auc), ""])


def pr_auc(beliefs: np.ndarray, truth: np.ndarray) -> PrCurve:
    """Sweep every distinct belief value as a threshold; ties grouped."""
    beliefs = np.asarray(beliefs, dtype=np.float64).reshape(-1)
    truth = np.asarray(truth).reshape(-1).astype(bool)
    if beliefs.shape != truth.shape:
        raise DimensionMismatch(
            f"beliefs {beliefs.shape} vs truth {truth.shape}"
        )
    n_pos = int(truth.sum())
    if n_pos == 0:
        raise NoPositives("truth contains no positive pixels")

    order = np.argsort(-beliefs, kind="stable")
    sorted_beliefs = beliefs[order]
    sorted_truth = truth[order]
    cum_tp = np.cumsum(sorted_truth)
    # last index of each tie group = positions where the next value differs
    boundaries = np.flatnonzero(
        np.diff(sorted_beliefs, append=-np.inf) != 0.0
    )
    thresholds = sorted_beliefs[boundaries]
    tp = cum_tp[boundaries].astype(np.float64)
    predicted = boundaries.astype(np.float64) + 1.0
    precisions = tp / predicted
    recalls = tp / n_pos

    # descending thresholds -> ascending recall; anchor recall 0 at the
    # first point's precision and integrate precision d(recall)
    auc = 0.0
    prev_r, prev_p = 0.0, precisions[0]
    for r, p in zip(recalls, precisions):
        auc += (r - prev_r) * (p + prev_p) / 2.0
        prev_r, prev_p = r, p

    rev = slice(None, None, -1)
    return PrCurve(thresholds=thresholds[rev], precisions=precisions[rev],
                   recalls=recalls[rev], auc=float(auc))


def localize(beliefs: np.ndarray, space: PoseSpace):
    """Pose with the highest belief; ties resolve to the lowest brick index."""
    beliefs = np.asarray(beliefs).reshape(-1)
    if beliefs.size != space.size:
        raise DimensionMismatch(
            f"{beliefs.size} beliefs for a pose space of size {space.size}"
        )
    if beliefs.size == 0:
        raise DimensionMismatch("empty beliefs")
    return space.pose_at(int(np.argmax(beliefs)))


def localization_error(pred_pose, true_pose) -> float:
    """Euclidean distance between the (x, y) centers of two poses."""
    return math.hypot(pred_pose[0] - true_pose[0], pred_pose[1] - true_pose[1])
