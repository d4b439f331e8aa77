"""Hull length from bounding-box diagonals and IQR-based anomaly flagging."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import List, Sequence, Tuple

from .detection import BBox


class InsufficientDataError(ValueError):
    pass


@dataclass(frozen=True)
class CalibrationScale:
    mm_per_pixel: float

    def __post_init__(self):
        if not (math.isfinite(self.mm_per_pixel) and self.mm_per_pixel > 0):
            raise ValueError(f"mm_per_pixel must be positive and finite, got {self.mm_per_pixel}")


@dataclass(frozen=True)
class AnomalyResult:
    q1: float
    q3: float
    iqr: float
    upper_bound: float
    k: float
    flagged: List[int] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {"q1": self.q1, "q3": self.q3, "iqr": self.iqr, "upper_bound": self.upper_bound,
                "k": self.k, "flagged": list(self.flagged)}


def diagonal(box: BBox) -> float:
    return math.hypot(box.x_max - box.x_min, box.y_max - box.y_min)


def to_millimeters(d: float, scale: CalibrationScale) -> float:
    if not isinstance(scale, CalibrationScale):
        scale = CalibrationScale(float(scale))
    return d * scale.mm_per_pixel


def quantile(sorted_values: Sequence[float], p: float) -> float:
    """Linear interpolation at fractional index (n - 1) * p."""
    h = (len(sorted_values) - 1) * p
    lo = math.floor(h)
    hi = min(lo + 1, len(sorted_values) - 1)
    frac = h - lo
    return sorted_values[lo] + frac * (sorted_values[hi] - sorted_values[lo])


def quartiles(values: Sequence[float]) -> Tuple[float, float]:
    vals = sorted(float(v) for v in values)
    if len(vals) < 4:
        raise InsufficientDataError(f"need at least 4 values for quartiles, got {len(vals)}")
    if not all(math.isfinite(v) for v in vals):
        raise ValueError("values must be finite")
    return quantile(vals, 0.25), quantile(vals, 0.75)


def flag_anomalies(diagonals: Sequence[float], k: float = 1.5) -> AnomalyResult:
    """Flag values strictly above Q3 + k*IQR. Low outliers are never flagged."""
    q1, q3 = quartiles(diagonals)
    iqr = q3 - q1
    upper = q3 + k * iqr
    flagged = [i for i, v in enumerate(diagonals) if v > upper]
    return AnomalyResult(q1, q3, iqr, upper, k, flagged)
