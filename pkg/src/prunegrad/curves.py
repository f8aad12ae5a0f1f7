"""Result containers shared by the pruning and evaluation code."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass
class EvalCurve:
    """Metric ``y`` sampled at fractions ``x`` (strictly increasing).

    ``traces`` holds one row per image; ``y`` is their mean.
    """

    x: np.ndarray
    y: np.ndarray
    traces: np.ndarray | None = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.x = np.asarray(self.x, dtype=np.float64)
        self.y = np.asarray(self.y, dtype=np.float64)
        if self.x.shape != self.y.shape:
            raise ValueError(f"x has {self.x.shape} points but y has {self.y.shape}")
        if np.any(np.diff(self.x) <= 0):
            raise ValueError("x must be strictly increasing")

    def auc(self) -> float:
        """Trapezoidal area under the mean curve."""
        if len(self.x) < 2:
            return 0.0
        return float(np.sum((self.y[1:] + self.y[:-1]) * np.diff(self.x)) / 2.0)

    def rows(self):
        return list(zip(self.x.tolist(), self.y.tolist()))


@dataclass
class RoarTable:
    """Test accuracy per (method, percentile, run)."""

    percentiles: tuple[float, ...]
    repeats: int
    entries: dict[tuple[str, float, int], float] = field(default_factory=dict)

    def add(self, method: str, percentile: float, run: int, accuracy: float) -> None:
        if percentile not in self.percentiles:
            raise ValueError(f"percentile {percentile} not in {self.percentiles}")
        if not 0 <= run < self.repeats:
            raise ValueError(f"run index {run} outside [0, {self.repeats})")
        if not 0.0 <= accuracy <= 1.0:
            raise ValueError(f"accuracy {accuracy} outside [0, 1]")
        self.entries[(method, percentile, run)] = float(accuracy)

    def mean(self, method: str, percentile: float) -> float:
        vals = [v for (m, p, _), v in self.entries.items() if m == method and p == percentile]
        if not vals:
            raise KeyError((method, percentile))
        return float(np.mean(vals))

    def rows(self):
        return [(m, p, r, a) for (m, p, r), a in sorted(self.entries.items())]
