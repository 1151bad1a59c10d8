"""Observation models: Gaussian pixel evidence and calibrated score fields.

Evidence enters the factor graph as fixed per-brick messages on the X
variables.  For images, each pixel is modeled as a Gaussian whose mean
depends on whether the brick is on; for detector scores, a fitted
sigmoid turns scores into probabilities which divide out the prior
(approximated by the symbol's self-rooting probability).  All evidence
math runs in the log domain; public messages are normalized linear
pairs clamped away from zero.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np
from scipy.optimize import minimize

from . import rng
from .errors import DimensionMismatch, SingleClassInput
from .grammar import Grammar, PoseSpace

SLOPE_CAP = 500.0


@dataclass
class NoisyImage:
    """Real-valued pixel grid matching a symbol's pose grid."""

    pixels: np.ndarray

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    @property
    def height(self) -> int:
        return self.pixels.shape[0]


def corrupt_contour_map(binary_map: np.ndarray, mu0: float, mu1: float,
                        sigma: float, seed: int) -> NoisyImage:
    """Sample each pixel from N(mu(J), sigma) given a binary map J."""
    j = np.asarray(binary_map).astype(bool)
    gen = rng.stream(seed, 0)
    noise = gen.standard_normal(j.shape)
    mean = np.where(j, mu1, mu0)
    return NoisyImage(pixels=mean + sigma * noise)


def gaussian_evidence(image, mu0: float, mu1: float, sigma: float,
                      floor: float = 1e-12) -> np.ndarray:
    """(h, w, 2) normalized (off, on) evidence messages per pixel.

    The on/off ratio is the Gaussian likelihood ratio
    N(I; mu1, sigma) / N(I; mu0, sigma); computed through the log odds so
    extreme pixels cannot overflow, then clamped to the floor.
    """
    pixels = image.pixels if isinstance(image, NoisyImage) else np.asarray(image)
    pixels = pixels.astype(np.float64)
    log_odds = ((pixels - mu0) ** 2 - (pixels - mu1) ** 2) / (2.0 * sigma ** 2)
    p_on = 1.0 / (1.0 + np.exp(-log_odds))
    np.clip(p_on, floor, 1.0 - floor, out=p_on)
    return np.stack([1.0 - p_on, p_on], axis=-1)


@dataclass(frozen=True)
class PlattCalibration:
    """Sigmoid score calibration: P(on | score) = sigmoid(slope*s + offset)."""

    slope: float
    offset: float

    def predict(self, scores) -> np.ndarray:
        u = self.slope * np.asarray(scores, dtype=np.float64) + self.offset
        out = np.empty_like(u)
        pos = u >= 0
        out[pos] = 1.0 / (1.0 + np.exp(-u[pos]))
        eu = np.exp(u[~pos])
        out[~pos] = eu / (1.0 + eu)
        return out


def platt_fit(scores: Sequence[float], labels: Sequence[int],
              max_iter: int = 200) -> PlattCalibration:
    """Fit the calibration sigmoid by regularized log-loss.

    Regularization is the classic target smoothing: positives aim at
    (N+ + 1)/(N+ + 2) and negatives at 1/(N- + 2), which keeps the
    optimum finite for separable data up to the slope cap.  The
    optimizer is bounded L-BFGS with a fixed iteration budget, so the
    result is deterministic.
    """
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels).astype(bool)
    n_pos, n_neg = int(y.sum()), int((~y).sum())
    if n_pos == 0 or n_neg == 0:
        raise SingleClassInput("calibration needs both classes present")
    t = np.where(y, (n_pos + 1.0) / (n_pos + 2.0), 1.0 / (n_neg + 2.0))

    def loss_grad(ab):
        a, b = ab
        u = a * s + b
        # stable log(1 + e^u) and sigmoid
        log1pe = np.logaddexp(0.0, u)
        nll = float(np.sum(log1pe - t * u))
        p = np.exp(u - log1pe)
        g = p - t
        return nll, np.array([float(np.dot(g, s)), float(g.sum())])

    b0 = float(np.log((n_neg + 1.0) / (n_pos + 1.0)))
    res = minimize(loss_grad, x0=np.array([0.0, -b0]), jac=True,
                   method="L-BFGS-B",
                   bounds=[(-SLOPE_CAP, SLOPE_CAP), (-4 * SLOPE_CAP, 4 * SLOPE_CAP)],
                   options={"maxiter": max_iter})
    return PlattCalibration(slope=float(res.x[0]), offset=float(res.x[1]))


@dataclass
class ScoreField:
    """Raw detector scores for one symbol, with calibration and prior."""

    symbol: str
    scores: np.ndarray          # (n_poses,) in pose index order
    calibration: PlattCalibration
    prior: float                # P(X=1), approximated by the self-rooting value

    def __post_init__(self):
        if not (0.0 < self.prior < 1.0):
            raise ValueError(f"prior must be in (0, 1), got {self.prior}")
        if not np.isfinite(self.calibration.slope):
            raise ValueError("calibration slope must be finite")


def score_evidence(field: ScoreField, floor: float = 1e-12) -> np.ndarray:
    """(n_poses, 2) messages: on-weight p/prior, off-weight (1-p)/(1-prior).

    This converts the calibrated posterior into a likelihood up to a
    constant by dividing out the prior.
    """
    p = field.calibration.predict(field.scores)
    on = p / field.prior
    off = (1.0 - p) / (1.0 - field.prior)
    total = on + off
    p_on = on / total
    np.clip(p_on, floor, 1.0 - floor, out=p_on)
    return np.stack([1.0 - p_on, p_on], axis=-1)


def synthetic_scores(space: PoseSpace, true_indices: Iterable[int],
                     on_mu: float, off_mu: float, sigma: float,
                     seed: int) -> np.ndarray:
    """Gaussian detector-score stand-in: true bricks score N(on_mu, sigma),
    background N(off_mu, sigma)."""
    gen = rng.stream(seed, 0)
    scores = off_mu + sigma * gen.standard_normal(space.size)
    idx = np.fromiter(true_indices, dtype=np.int64)
    if idx.size:
        scores[idx] = on_mu + sigma * gen.standard_normal(idx.size)
    return scores


# ---------------------------------------------------------------------------
# CSV interfaces
# ---------------------------------------------------------------------------

def write_score_csv(path, grammar: Grammar, fields: Iterable[ScoreField]) -> None:
    """Rows: symbol, pose components..., score."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["symbol", "x", "y", "extra", "score"])
        for field in fields:
            space = grammar.pose_spaces[field.symbol]
            for i, score in enumerate(field.scores):
                pose = space.pose_at(i)
                extra = pose[2] if len(pose) > 2 else ""
                w.writerow([field.symbol, pose[0], pose[1], extra, repr(float(score))])


def read_score_csv(path, grammar: Grammar) -> dict:
    """symbol -> (n_poses,) score array; missing poses default to 0."""
    out = {}
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        for row in reader:
            sym = row["symbol"]
            if sym not in grammar.pose_spaces:
                raise DimensionMismatch(f"score row for unknown symbol {sym}")
            space = grammar.pose_spaces[sym]
            if sym not in out:
                out[sym] = np.zeros(space.size)
            pose = (int(row["x"]), int(row["y"]))
            if row.get("extra") not in (None, ""):
                pose = pose + (int(row["extra"]),)
            out[sym][space.index(pose)] = float(row["score"])
    return out


def read_annotations(path) -> list:
    """Annotation rows (image id, part, center x, center y, scale)."""
    rows = []
    with open(path, newline="", encoding="utf-8") as fh:
        for row in csv.DictReader(fh):
            rows.append((row["image"], row["part"], float(row["x"]),
                         float(row["y"]), float(row.get("scale", 1.0))))
    return rows


def estimate_part_geometry(rows: Iterable, root: str = "F") -> dict:
    """Per-part scale-normalized mean offset and uncertainty half-size.

    Offsets are measured from the root part's center and divided by the
    root's annotated scale, matching the region kernel's
    (x, y) + s * center_offset convention.  Returns
    part -> {center_offset, half_size}.
    """
    by_image = {}
    for image, part, x, y, s in rows:
        by_image.setdefault(image, {})[part] = (x, y, s)
    offsets = {}
    for parts in by_image.values():
        if root not in parts:
            continue
        rx, ry, rs = parts[root]
        for part, (x, y, _s) in parts.items():
            if part == root:
                continue
            offsets.setdefault(part, []).append(((x - rx) / rs, (y - ry) / rs))
    out = {}
    for part, offs in offsets.items():
        arr = np.asarray(offs)
        mean = arr.mean(axis=0)
        spread = np.maximum(np.ceil(arr.std(axis=0)), 1.0)
        out[part] = {
            "center_offset": [float(mean[0]), float(mean[1])],
            "half_size": [int(spread[0]), int(spread[1])],
        }
    return out
