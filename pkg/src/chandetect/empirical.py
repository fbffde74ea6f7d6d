"""Sorted Monte-Carlo samples with a fixed order-statistic quantile rule."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import UnstableQuantileError


def order_index(q: float, count: int) -> int:
    """1-based index ``ceil(q * count)``, clamped to ``[1, count]``.

    Products within 1e-9 of an integer are snapped first, so ``0.95 * 10**6``
    maps to 950000 rather than 950001.
    """
    x = q * count
    nearest = round(x)
    k = nearest if abs(x - nearest) <= 1e-9 * max(1.0, x) else math.ceil(x)
    return min(max(int(k), 1), count)


@dataclass(frozen=True)
class EmpiricalDistribution:
    samples: np.ndarray
    count: int = field(init=False)

    def __post_init__(self):
        s = np.sort(np.asarray(self.samples, dtype=float))
        s.flags.writeable = False
        object.__setattr__(self, "samples", s)
        object.__setattr__(self, "count", int(s.size))
        if self.count == 0:
            raise ValueError("empty sample")

    @classmethod
    def from_sorted(cls, samples: np.ndarray) -> "EmpiricalDistribution":
        obj = object.__new__(cls)
        s = np.asarray(samples, dtype=float)
        s.flags.writeable = False
        object.__setattr__(obj, "samples", s)
        object.__setattr__(obj, "count", int(s.size))
        return obj

    def quantile(self, q: float) -> float:
        if not 0.0 < q < 1.0:
            raise ValueError(f"quantile level must lie in (0, 1), got {q}")
        return float(self.samples[order_index(q, self.count) - 1])

    def upper_quantile(self, alpha: float, min_tail: float = 10.0) -> float:
        """Threshold t with empirical P{X >= t} close to ``alpha``.

        Raises when fewer than ``min_tail`` samples are expected beyond it.
        """
        if not 0.0 < alpha < 1.0:
            raise ValueError(f"alpha must lie in (0, 1), got {alpha}")
        if alpha * self.count < min_tail:
            raise UnstableQuantileError(
                f"alpha * count = {alpha * self.count:.3g} < {min_tail}")
        return self.quantile(1.0 - alpha)

    def cdf(self, x):
        """Fraction of samples <= x."""
        return np.searchsorted(self.samples, x, side="right") / self.count

    def sf(self, x):
        """Fraction of samples >= x."""
        return 1.0 - np.searchsorted(self.samples, x, side="left") / self.count

    def __len__(self):
        return self.count
