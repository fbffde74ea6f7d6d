"""MAP and Bayes test statistics, evaluated in the log domain.

MAP:    log max_i  w_i exp(y_i^2 / 2 sigma^2)
Bayes:  log sum_i  w_i exp(y_i^2 / 2 sigma^2)

The decision is 1 (signal present) iff the log statistic is >= the log
threshold.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from enum import Enum

import numpy as np
from scipy.special import logsumexp

from .errors import DimensionError, ValidationError
from .priors import PriorVector


class TestKind(str, Enum):
    __test__ = False  # not a pytest class

    MAP = "map"
    BAYES = "bayes"

    @classmethod
    def parse(cls, value) -> "TestKind":
        if isinstance(value, cls):
            return value
        try:
            return cls(str(value).lower())
        except ValueError:
            raise ValidationError(f"unknown test kind {value!r}") from None


@dataclass(frozen=True)
class Observation:
    values: np.ndarray
    sigma: float = 1.0

    def __post_init__(self):
        v = np.array(self.values, dtype=float)
        if v.ndim != 1:
            raise DimensionError("observation must be a vector")
        if not self.sigma > 0:
            raise ValidationError("sigma must be positive")
        v.flags.writeable = False
        object.__setattr__(self, "values", v)

    def __len__(self):
        return self.values.size


@dataclass(frozen=True)
class TestStatistic:
    __test__ = False

    log_value: float
    kind: TestKind
    argmax_channel: int | None = None


def _evidence(y: Observation, prior: PriorVector) -> np.ndarray:
    if len(y) != prior.size:
        raise DimensionError(f"observation has {len(y)} channels, prior has {prior.size}")
    z = y.values / y.sigma
    return prior.log_weights + 0.5 * z * z


def map_statistic(y: Observation, prior: PriorVector) -> TestStatistic:
    v = _evidence(y, prior)
    i = int(np.argmax(v))  # first maximum: ties go to the lowest index
    return TestStatistic(float(v[i]), TestKind.MAP, i + 1)


def bayes_statistic(y: Observation, prior: PriorVector) -> TestStatistic:
    return TestStatistic(float(logsumexp(_evidence(y, prior))), TestKind.BAYES)


def statistic(kind, y: Observation, prior: PriorVector) -> TestStatistic:
    kind = TestKind.parse(kind)
    return map_statistic(y, prior) if kind is TestKind.MAP else bayes_statistic(y, prior)


def decide(stat: TestStatistic | float, log_threshold: float) -> int:
    value = stat.log_value if isinstance(stat, TestStatistic) else float(stat)
    return int(value >= log_threshold)


def load_observations(path, sigma: float = 1.0) -> list[Observation]:
    """One observation per CSV row; columns are channels.  Lines starting
    with '#' and a non-numeric header row are skipped."""
    rows = []
    with open(path, newline="") as fh:
        for row in csv.reader(fh):
            if not row or row[0].lstrip().startswith("#"):
                continue
            try:
                rows.append([float(x) for x in row])
            except ValueError:
                if rows:
                    raise ValidationError(f"non-numeric row in {path}") from None
    return [Observation(r, sigma) for r in rows]
