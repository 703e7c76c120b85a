"""Power-law fits Y = alpha * X**k by least squares in log-log space."""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np


class ScalingFitError(ValueError):
    pass


@dataclass(frozen=True)
class ScalingSeries:
    points: tuple[tuple[float, float], ...]
    metric: str = "metric"
    direction: str = "down"

    def __post_init__(self):
        pts = tuple((float(x), float(y)) for x, y in self.points)
        object.__setattr__(self, "points", pts)
        if self.direction not in ("up", "down"):
            raise ScalingFitError("direction must be 'up' or 'down'")
        for i, (x, y) in enumerate(pts):
            if not x > 0:
                raise ScalingFitError(f"X must be positive (index {i}: {x})")
            if not y > 0:
                raise ScalingFitError(f"Y must be positive (index {i}: {y})")
        xs = [x for x, _ in pts]
        if any(b <= a for a, b in zip(xs, xs[1:])):
            raise ScalingFitError("X must be strictly increasing")

    @classmethod
    def from_arrays(cls, x: Sequence[float], y: Sequence[float], metric: str = "metric",
                    direction: str = "down") -> "ScalingSeries":
        if len(x) != len(y):
            raise ScalingFitError("X and Y differ in length")
        return cls(tuple(zip(x, y)), metric, direction)

    @property
    def x(self) -> np.ndarray:
        return np.array([p[0] for p in self.points])

    @property
    def y(self) -> np.ndarray:
        return np.array([p[1] for p in self.points])


@dataclass(frozen=True)
class ScalingFit:
    k: float
    alpha: float
    log_alpha: float             # natural log
    r: float
    residuals: np.ndarray = field(repr=False)  # log Y - fitted log Y
    degenerate: bool = False     # Y constant, so r is undefined and reported as 0
    metric: str = "metric"

    def to_dict(self) -> dict:
        return {"metric": self.metric, "k": self.k, "alpha": self.alpha,
                "log10_alpha": self.log_alpha / math.log(10), "r": self.r,
                "degenerate": self.degenerate, "residuals_log10": (self.residuals / math.log(10)).tolist()}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)


def fit_power_law(series: ScalingSeries) -> ScalingFit:
    if len(series.points) < 3:
        raise ScalingFitError("need at least 3 points")
    lx = np.log(series.x)
    ly = np.log(series.y)
    dx = lx - lx.mean()
    sxx = float(dx @ dx)
    if sxx == 0.0:
        raise ScalingFitError("all X equal")
    dy = ly - ly.mean()
    syy = float(dy @ dy)
    if syy == 0.0 or np.ptp(ly) == 0.0:
        return ScalingFit(0.0, float(series.y[0]), float(ly[0]), 0.0, np.zeros_like(ly), True, series.metric)
    k = float(dx @ dy) / sxx
    log_alpha = float(ly.mean() - k * lx.mean())
    r = float(np.clip(dx @ dy / math.sqrt(sxx * syy), -1.0, 1.0))
    resid = ly - (k * lx + log_alpha)
    return ScalingFit(k, math.exp(log_alpha), log_alpha, r, resid, False, series.metric)


def predict(fit: ScalingFit, x):
    x = np.asarray(x, dtype=float)
    if np.any(x <= 0):
        raise ScalingFitError("X must be positive")
    out = np.exp(fit.log_alpha + fit.k * np.log(x))
    return float(out) if out.ndim == 0 else out


@dataclass(frozen=True)
class DivergenceReport:
    ratios: np.ndarray
    max_relative_divergence: float
    threshold: float
    flagged: bool

    def to_dict(self) -> dict:
        return {"ratios": self.ratios.tolist(), "max_relative_divergence": self.max_relative_divergence,
                "threshold": self.threshold, "flagged": self.flagged}


def compare_single_vs_multi(single: ScalingSeries, multi: ScalingSeries,
                            threshold: float = 0.1) -> DivergenceReport:
    """Pointwise multi/single ratio; divergence is max |ratio - 1|."""
    if not np.array_equal(single.x, multi.x):
        raise ScalingFitError("series use different X grids")
    ratios = multi.y / single.y
    div = float(np.max(np.abs(ratios - 1.0))) if ratios.size else 0.0
    return DivergenceReport(ratios, div, threshold, div > threshold)


def fit_csv(series: ScalingSeries, fit: ScalingFit) -> str:
    """Plot-ready rows: log10 X, log10 Y and the fitted line at each X."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["x", "y", "log10_x", "log10_y", "log10_y_fit"])
    for x, y in series.points:
        w.writerow([repr(x), repr(y), repr(math.log10(x)), repr(math.log10(y)),
                    repr(math.log10(predict(fit, x)))])
    return buf.getvalue()
