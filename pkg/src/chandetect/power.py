"""Second-kind errors and the boxes of signals neither test can detect.

Per channel i, a signal with squared amplitude below

    MAP    2 sigma^2 [log(1/w_i) + log t*_alpha]
    Bayes  2 sigma^2 log(1/(w_i sqrt(pi log n)))

is missed with probability at least about (1 - alpha)/2 for large n.  The
difference of the two bounds does not depend on the channel and tends to
the energy gap 2 sigma^2 log(1/alpha), though only at a log log n rate.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .calibration import achieved_level, asymptotic_critical_map, binomial_halfwidth
from .detectors import TestKind
from .errors import DomainError, InsideBulkError, ValidationError
from .montecarlo import TAG_FRESH_NULL, TAG_SIGNAL, draw_channels, simulate_log_statistics
from .priors import PriorVector, discrete_entropy_offset


@dataclass(frozen=True)
class SignalSpec:
    """A signal with a single non-zero component ``amplitude`` in ``channel`` (1-based)."""

    channel: int
    amplitude: float
    sigma: float = 1.0

    def __post_init__(self):
        if int(self.channel) != self.channel or self.channel < 1:
            raise ValidationError(f"channel must be a positive integer, got {self.channel}")
        if not self.sigma > 0:
            raise ValidationError("sigma must be positive")
        if not math.isfinite(self.amplitude):
            raise ValidationError("amplitude must be finite")


@dataclass(frozen=True)
class BetaEstimate:
    signal: SignalSpec | None
    beta: float
    ci_halfwidth: float


@dataclass(frozen=True)
class PowerReport:
    test_kind: TestKind
    alpha_target: float | None
    alpha_achieved: float
    beta_estimates: list = field(default_factory=list)
    trials: int = 0
    seed: int = 0
    log_threshold: float = math.nan
    alpha_ci_halfwidth: float = 0.0


def _weight(prior: PriorVector, i: int) -> float:
    if int(i) != i or not 1 <= i <= prior.size:
        raise ValidationError(f"channel {i} outside 1..{prior.size}")
    return float(prior.weights[i - 1])


def map_parallelepiped_halfside_sq(prior: PriorVector, alpha: float, i: int,
                                   sigma: float = 1.0) -> float:
    w = _weight(prior, i)
    return 2.0 * sigma**2 * (-math.log(w) + asymptotic_critical_map(alpha, prior.n))


def bayes_parallelepiped_halfside_sq(prior: PriorVector, i: int, sigma: float = 1.0) -> float:
    w = _weight(prior, i)
    if prior.n < 3:
        raise DomainError("the Bayes box needs n >= 3")
    return 2.0 * sigma**2 * (-math.log(w) - 0.5 * math.log(math.pi * math.log(prior.n)))


def halfside_difference(alpha: float, n: int, sigma: float = 1.0) -> float:
    """MAP bound minus Bayes bound, identical in every channel."""
    if n < 3:
        raise DomainError("n must be >= 3")
    return 2.0 * sigma**2 * (asymptotic_critical_map(alpha, n)
                             + 0.5 * math.log(math.pi * math.log(n)))


def energy_gap(alpha: float, sigma: float = 1.0) -> float:
    """2 sigma^2 log(1/alpha)."""
    if not 0.0 < alpha <= 1.0:
        raise ValidationError(f"alpha must lie in (0, 1], got {alpha}")
    return 2.0 * sigma**2 * math.log(1.0 / alpha)


def boundary_signal(prior: PriorVector, j: int, sigma: float = 1.0) -> SignalSpec:
    """Signal on the Bayes box boundary in channel j."""
    sq = bayes_parallelepiped_halfside_sq(prior, j, sigma)
    if sq < 0:
        raise InsideBulkError(f"channel {j} weight {prior.weights[j - 1]:.3g} is too heavy: "
                              "the Bayes box is empty")
    return SignalSpec(j, math.sqrt(sq), sigma)


def map_boundary_signal(prior: PriorVector, alpha: float, j: int, sigma: float = 1.0) -> SignalSpec:
    sq = map_parallelepiped_halfside_sq(prior, alpha, j, sigma)
    if sq < 0:
        raise InsideBulkError(f"channel {j}: the MAP box is empty")
    return SignalSpec(j, math.sqrt(sq), sigma)


def mc_second_kind(kind, prior: PriorVector, signals, log_threshold: float, trials: int = 10**5,
                   seed: int = 0, alpha_target: float | None = None, workers: int = 1,
                   null_trials: int | None = None) -> PowerReport:
    """Fraction of missed detections for each signal.

    Every signal is run against the same noise draws (stream ``signal``), so
    differences between signals or between tests are paired.  The achieved
    first-kind error is measured on a separate fresh null stream.
    """
    kind = TestKind.parse(kind)
    if trials < 10**3:
        raise ValidationError("trials must be >= 1000")
    if isinstance(signals, SignalSpec):
        signals = [signals]
    estimates = []
    for sig in signals:
        if sig.channel > prior.size:
            raise ValidationError(f"signal channel {sig.channel} beyond the prior support")
        stats = simulate_log_statistics(prior, trials, seed, TAG_SIGNAL, kinds=(kind,),
                                        channel=sig.channel, amplitude=sig.amplitude / sig.sigma,
                                        workers=workers)[kind]
        beta = float(np.count_nonzero(stats < log_threshold)) / trials
        estimates.append(BetaEstimate(sig, beta, binomial_halfwidth(beta, trials)))
    a, a_ci = achieved_level(kind, prior, log_threshold, null_trials or trials, seed,
                             TAG_FRESH_NULL, workers)
    return PowerReport(kind, alpha_target, a, estimates, trials, seed, log_threshold, a_ci)


def mc_average_second_kind(kind, prior: PriorVector, amplitude_rule, log_threshold: float,
                           trials: int = 10**5, seed: int = 0, sigma: float = 1.0,
                           workers: int = 1) -> BetaEstimate:
    """Prior-averaged miss probability sum_j w_j beta(S_j).

    The signal channel of each trial is drawn from the prior weights and
    carries amplitude ``amplitude_rule(channel)``.
    """
    kind = TestKind.parse(kind)
    chan = draw_channels(prior, trials, seed, TAG_SIGNAL)
    table = np.array([amplitude_rule(j) for j in range(1, prior.size + 1)], dtype=float)
    if not np.all(np.isfinite(table)):
        raise ValidationError("amplitude_rule must be finite on the support")
    amp = table[chan - 1] / sigma
    stats = simulate_log_statistics(prior, trials, seed, TAG_SIGNAL, kinds=(kind,), channel=chan,
                                    amplitude=amp, workers=workers)[kind]
    beta = float(np.count_nonzero(stats < log_threshold)) / trials
    return BetaEstimate(None, beta, binomial_halfwidth(beta, trials))


def avg_nondetectable_energy(prior: PriorVector, alpha: float, sigma: float = 1.0,
                             entropy: float | None = None) -> float:
    """2 sigma^2 (log n + log t*_alpha + H).

    ``entropy`` defaults to the discrete offset sum w log(1/w) - log n.
    """
    h = discrete_entropy_offset(prior) if entropy is None else entropy
    return 2.0 * sigma**2 * (math.log(prior.n) + asymptotic_critical_map(alpha, prior.n) + h)
