"""Least-squares convergence rates on log-log data."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

FLOOR_FACTOR = 10.0


class RateFitError(ValueError):
    pass


@dataclass(frozen=True)
class RateFit:
    """``log err = slope * log eps + intercept``; ``residual`` is the RMS misfit in log units."""

    slope: float
    intercept: float
    residual: float
    points: tuple[tuple[float, float], ...]
    excluded: tuple[tuple[float, float], ...] = ()

    @property
    def n_points(self) -> int:
        return len(self.points)

    def __str__(self) -> str:
        return f"slope {self.slope:.3f} (residual {self.residual:.3f}, {self.n_points} points)"


def fit_rate(points, scale: float = 1.0) -> RateFit:
    """Fit ``err ~ C eps^slope``.

    Entries with ``err <= 10 * machine epsilon * scale`` sit at the rounding
    floor; they are excluded and listed in ``excluded``.
    """
    pts = [(float(e), float(r)) for e, r in points]
    floor = FLOOR_FACTOR * np.finfo(float).eps * abs(scale)
    used = tuple((e, r) for e, r in pts if r > floor and e > 0 and math.isfinite(r))
    excluded = tuple(p for p in pts if p not in used)
    if len(used) < 3:
        raise RateFitError(f"need at least 3 usable points, got {len(used)} (excluded {len(excluded)})")
    x = np.log([e for e, _ in used])
    y = np.log([r for _, r in used])
    A = np.vstack([x, np.ones_like(x)]).T
    (slope, intercept), *_ = np.linalg.lstsq(A, y, rcond=None)
    misfit = y - (slope * x + intercept)
    residual = float(np.sqrt(np.mean(misfit**2)))
    return RateFit(float(slope), float(intercept), residual, used, excluded)
