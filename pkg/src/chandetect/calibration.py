"""Critical levels of the MAP and Bayes tests.

Monte-Carlo levels come from the sorted null statistics: the log threshold
for level alpha is the order statistic at 1-based index
``ceil((1 - alpha) * trials)``.  One simulation serves every alpha.

Asymptotic levels:

    MAP    log t*  = log(1/(sqrt(pi) alpha)) - 1/2 log log(n/(sqrt(pi) alpha))
    Bayes  t°      = sqrt(2/pi) [b_n + (t°_alpha + H) / b_n]
    b_n            = sqrt(2 log(n / sqrt(pi log n)))

where t°_alpha is the upper alpha-quantile of the limiting variable
(see :mod:`chandetect.zeta`) and H the prior-shape entropy.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from enum import Enum

import numpy as np

from .detectors import TestKind
from .empirical import EmpiricalDistribution
from .errors import DomainError, UnstableQuantileError, ValidationError
from .montecarlo import TAG_CALIBRATION, simulate_log_statistics
from .priors import PriorVector, discrete_entropy_offset, uniform_prior

DEFAULT_TRIALS = 10**6
MIN_TRIALS = 10**3
Z95 = 1.959963984540054


class Method(str, Enum):
    MONTE_CARLO = "mc"
    ASYMPTOTIC = "asymptotic"


@dataclass(frozen=True)
class CalibrationResult:
    log_threshold: float
    alpha: float
    n: int
    method: Method
    trials: int = 0
    ci_halfwidth: float = 0.0
    seed: int | None = None
    test_kind: TestKind | None = None

    @property
    def threshold(self) -> float:
        return math.exp(self.log_threshold)


def binomial_halfwidth(p: float, trials: int) -> float:
    """95% normal-approximation half-width of a binomial proportion."""
    return Z95 * math.sqrt(p * (1.0 - p) / trials)


def _check_alpha(alpha):
    if not 0.0 < alpha < 1.0:
        raise ValidationError(f"alpha must lie in (0, 1), got {alpha}")


def null_distribution(kind, prior: PriorVector, trials: int = DEFAULT_TRIALS, seed: int = 0,
                      workers: int = 1) -> EmpiricalDistribution:
    """Sorted null log statistics of one test."""
    kind = TestKind.parse(kind)
    if trials < MIN_TRIALS:
        raise ValidationError(f"trials must be >= {MIN_TRIALS}")
    stats = simulate_log_statistics(prior, trials, seed, TAG_CALIBRATION, kinds=(kind,),
                                    workers=workers)[kind]
    return EmpiricalDistribution(stats)


def critical_from_null(null: EmpiricalDistribution, alpha: float, n: int, seed=None,
                       kind=None) -> CalibrationResult:
    _check_alpha(alpha)
    if alpha * null.count < 10:
        raise UnstableQuantileError(
            f"alpha * trials = {alpha * null.count:.3g} < 10: quantile unstable")
    return CalibrationResult(null.quantile(1.0 - alpha), alpha, n, Method.MONTE_CARLO,
                             null.count, binomial_halfwidth(alpha, null.count), seed,
                             None if kind is None else TestKind.parse(kind))


def mc_critical(kind, prior: PriorVector, alpha: float, trials: int = DEFAULT_TRIALS,
                seed: int = 0, workers: int = 1) -> CalibrationResult:
    _check_alpha(alpha)
    if alpha * trials < 10:
        raise UnstableQuantileError(f"alpha * trials = {alpha * trials:.3g} < 10")
    null = null_distribution(kind, prior, trials, seed, workers)
    return critical_from_null(null, alpha, prior.n, seed, kind)


def mc_critical_many(kind, prior: PriorVector, alphas, trials: int = DEFAULT_TRIALS,
                     seed: int = 0, workers: int = 1) -> list[CalibrationResult]:
    null = null_distribution(kind, prior, trials, seed, workers)
    return [critical_from_null(null, a, prior.n, seed, kind) for a in alphas]


def asymptotic_critical_map(alpha: float, n: int) -> float:
    """Log critical level of the MAP test for large n."""
    _check_alpha(alpha)
    if n < 2:
        raise DomainError("n must be >= 2")
    c = math.sqrt(math.pi) * alpha
    inner = math.log(n / c)
    if inner <= 0:
        raise DomainError(f"log(n/(sqrt(pi) alpha)) = {inner:.3g} <= 0")
    return math.log(1.0 / c) - 0.5 * math.log(inner)


def b_n(n: int) -> float:
    if n < 3:
        raise DomainError("b_n needs n >= 3")
    return math.sqrt(2.0 * math.log(n / math.sqrt(math.pi * math.log(n))))


def asymptotic_critical_bayes(alpha: float, n: int, entropy: float, zeta_quantile: float) -> float:
    """Critical level of the Bayes test in the linear domain of
    sum_i w_i exp(Y_i^2 / 2 sigma^2)."""
    _check_alpha(alpha)
    b = b_n(n)
    return math.sqrt(2.0 / math.pi) * (b + (zeta_quantile + entropy) / b)


def asymptotic_critical_bayes_log(alpha: float, n: int, entropy: float,
                                  zeta_quantile: float) -> float:
    t = asymptotic_critical_bayes(alpha, n, entropy, zeta_quantile)
    if t <= 0:
        raise DomainError(f"asymptotic Bayes level {t:.3g} is not positive")
    return math.log(t)


def asymptotic_critical(kind, alpha: float, n: int, entropy: float = 0.0,
                        zeta_quantile: float | None = None) -> CalibrationResult:
    kind = TestKind.parse(kind)
    if kind is TestKind.MAP:
        log_t = asymptotic_critical_map(alpha, n)
    else:
        if zeta_quantile is None:
            raise ValidationError("the Bayes level needs the zeta quantile")
        log_t = asymptotic_critical_bayes_log(alpha, n, entropy, zeta_quantile)
    return CalibrationResult(log_t, alpha, n, Method.ASYMPTOTIC, test_kind=kind)


def map_error_from_null(null: EmpiricalDistribution, alpha: float, n: int) -> float:
    return critical_from_null(null, alpha, n).log_threshold - asymptotic_critical_map(alpha, n)


def approx_error_map(alpha: float, n: int, trials: int = DEFAULT_TRIALS, seed: int = 0,
                     prior: PriorVector | None = None, workers: int = 1) -> float:
    """Delta(alpha, n): MC log level minus its asymptotic value (uniform prior by default)."""
    prior = uniform_prior(n) if prior is None else prior
    return mc_critical(TestKind.MAP, prior, alpha, trials, seed, workers).log_threshold \
        - asymptotic_critical_map(alpha, n)


def _bayes_error(mc_log: float, alpha, n, entropy, zeta_quantile, domain) -> float:
    if domain == "linear":
        return math.exp(mc_log) - asymptotic_critical_bayes(alpha, n, entropy, zeta_quantile)
    if domain == "log":
        return mc_log - asymptotic_critical_bayes_log(alpha, n, entropy, zeta_quantile)
    raise ValidationError(f"domain must be 'linear' or 'log', got {domain!r}")


def bayes_error_from_null(null: EmpiricalDistribution, alpha: float, n: int, entropy: float,
                          zeta_quantile: float, domain: str = "linear") -> float:
    mc_log = critical_from_null(null, alpha, n).log_threshold
    return _bayes_error(mc_log, alpha, n, entropy, zeta_quantile, domain)


def approx_error_bayes(alpha: float, n: int, prior: PriorVector | None = None,
                       trials: int = DEFAULT_TRIALS, seed: int = 0, *, zeta=None,
                       entropy: float | None = None, domain: str = "linear",
                       workers: int = 1) -> float:
    """MC Bayes level minus its asymptotic value.

    ``domain="linear"`` differences the levels of sum_i w_i exp(Y_i^2/2);
    ``domain="log"`` differences their logarithms, the scale on which the
    error stays bounded as alpha -> 0.  ``zeta`` is an EmpiricalDistribution
    of the limiting variable (the cached default sample when omitted);
    ``entropy`` defaults to the discrete entropy offset of the prior.
    """
    from .zeta import default_distribution, zeta_quantile

    prior = uniform_prior(n) if prior is None else prior
    zeta = default_distribution() if zeta is None else zeta
    h = discrete_entropy_offset(prior) if entropy is None else entropy
    mc_log = mc_critical(TestKind.BAYES, prior, alpha, trials, seed, workers).log_threshold
    return _bayes_error(mc_log, alpha, n, h, zeta_quantile(zeta, alpha), domain)


def achieved_level(kind, prior: PriorVector, log_threshold: float, trials: int, seed: int,
                   tag: str, workers: int = 1) -> tuple[float, float]:
    """Fraction of null trials (stream ``tag``) that reject, with its 95% half-width."""
    kind = TestKind.parse(kind)
    stats = simulate_log_statistics(prior, trials, seed, tag, kinds=(kind,),
                                    workers=workers)[kind]
    p = float(np.count_nonzero(stats >= log_threshold)) / trials
    return p, binomial_halfwidth(p, trials)
