"""The limiting variable of the null Bayes statistic.

    zeta = gamma + sum_{k=1}^{K} [1/E(k) - 1/k]

with E(k) the running sum of k unit exponentials.  Paths are simulated
term by term; sum 1/E(k) is accumulated and the harmonic number H_K is
subtracted once at the end.  Path i draws from the counter stream
``(seed, "zeta", i)``, so the first K terms of a path do not change when K
grows and results do not depend on the worker count.
"""

from __future__ import annotations

import math
import os
import warnings
from dataclasses import dataclass
from pathlib import Path

import numba as nb
import numpy as np

from .empirical import EmpiricalDistribution
from .errors import InsufficientTailError, InvalidWeightsError, ValidationError
from .rng import ZIG_FE, ZIG_KE, ZIG_R, ZIG_WE, derive_key, fill_exponentials, run_chunked

EULER_GAMMA = 0.57721566490153286061
DEFAULT_TERMS = 10_000
DEFAULT_SAMPLES = 10**6
DEFAULT_SEED = 0
TAG_ZETA = "zeta"


def harmonic_number(k: int) -> float:
    return math.fsum(1.0 / i for i in range(1, k + 1))


def tail_variance_bound(terms: int) -> float:
    """sum_{k>K} Var[1/E(k)] = sum_{k>K} 1/((k-1)^2 (k-2)), bounded by an integral."""
    if terms < 3:
        return math.inf
    k = terms
    return 1.0 / ((k - 1) * (k - 1) * (k - 2)) + 1.0 / (2.0 * (k - 1) ** 2)


@dataclass(frozen=True)
class ZetaSampler:
    terms: int = DEFAULT_TERMS
    seed: int = DEFAULT_SEED
    euler_gamma: float = EULER_GAMMA
    tail_variance_tol: float = 1e-6

    def __post_init__(self):
        if self.terms < 1:
            raise ValidationError("terms must be positive")
        if self.seed < 0:
            raise ValidationError("seed must be non-negative")
        if tail_variance_bound(self.terms) > self.tail_variance_tol:
            raise ValidationError(
                f"K={self.terms}: tail variance bound {tail_variance_bound(self.terms):.3g} "
                f"exceeds {self.tail_variance_tol:.3g}")


@nb.njit(nogil=True, cache=True)
def _zeta_kernel(out, p0, p1, terms, k0, k1, ke, we, fe, r):
    ex = np.empty(terms)
    bits = np.empty(terms + (terms % 2), dtype=np.uint64)
    for i in range(p0, p1):
        fill_exponentials(ex, bits, i, k0, k1, ke, we, fe, r)
        e = 0.0
        s = 0.0
        for j in range(terms):
            e += ex[j]
            s += 1.0 / e
        out[i] = s


def sample_zeta_paths(sampler: ZetaSampler, m: int, workers: int = 1) -> np.ndarray:
    """Unsorted zeta draws; draw i is a function of (seed, i, K) only."""
    if m < 1:
        raise ValidationError("m must be positive")
    k0, k1 = derive_key(sampler.seed, TAG_ZETA)
    out = np.empty(m)

    def body(p0, p1):
        _zeta_kernel(out, p0, p1, sampler.terms, k0, k1, ZIG_KE, ZIG_WE, ZIG_FE, ZIG_R)

    run_chunked(body, m, workers, chunk=256)
    out -= harmonic_number(sampler.terms)
    out += sampler.euler_gamma
    return out


def sample_zeta(sampler: ZetaSampler, m: int, workers: int = 1) -> EmpiricalDistribution:
    return EmpiricalDistribution(sample_zeta_paths(sampler, m, workers))


@nb.njit(nogil=True, cache=True)
def _bracket_kernel(out, k, k0, k1, ke, we, fe, r):
    ex = np.empty(k)
    bits = np.empty(k + (k % 2), dtype=np.uint64)
    for i in range(out.shape[0]):
        fill_exponentials(ex, bits, i, k0, k1, ke, we, fe, r)
        out[i] = 1.0 / ex.sum()


def sample_bracket_term(k: int, m: int, seed: int = 0) -> np.ndarray:
    """m independent draws of the k-th bracket 1/E(k) - 1/k."""
    if k < 1 or m < 1:
        raise ValidationError("k and m must be positive")
    k0, k1 = derive_key(seed, f"{TAG_ZETA}-bracket")
    out = np.empty(m)
    _bracket_kernel(out, k, k0, k1, ZIG_KE, ZIG_WE, ZIG_FE, ZIG_R)
    return out - 1.0 / k


def zeta_quantile(dist: EmpiricalDistribution, alpha: float) -> float:
    """t_alpha with empirical P{zeta >= t_alpha} = alpha; needs count >= 10/alpha."""
    return dist.upper_quantile(alpha, min_tail=10.0)


def inverse_exponential_cdf(x):
    """P{1/e <= x} = exp(-1/x) for a unit exponential e; 0 for x <= 0."""
    x = np.asarray(x, dtype=float)
    with np.errstate(divide="ignore"):
        out = np.where(x > 0, np.exp(-1.0 / np.where(x > 0, x, 1.0)), 0.0)
    return float(out) if out.ndim == 0 else out


def combine_zetas(values, lambdas):
    """sum_i lambda_i values_i + sum_i lambda_i log lambda_i.

    ``values`` may be a vector of length p or a (p, m) array of p independent
    samples, giving m combined draws.
    """
    lam = np.asarray(lambdas, dtype=float)
    v = np.asarray(values, dtype=float)
    if lam.ndim != 1 or lam.size == 0:
        raise InvalidWeightsError("lambdas must be a non-empty vector")
    if np.any(lam <= 0) or abs(math.fsum(lam) - 1.0) > 1e-12:
        raise InvalidWeightsError(f"lambdas must be positive and sum to 1, got {lam.tolist()}")
    if v.shape[0] != lam.size:
        raise InvalidWeightsError(f"{v.shape[0]} values for {lam.size} weights")
    penalty = float(np.sum(lam * np.log(lam)))
    combined = np.tensordot(lam, v, axes=(0, 0)) + penalty
    return float(combined) if np.ndim(combined) == 0 else combined


def tail_coefficient(dist: EmpiricalDistribution, xs) -> np.ndarray:
    """x * P{zeta >= x} on a grid of positive points inside the sample range."""
    xs = np.asarray(xs, dtype=float)
    if np.any(xs <= 0):
        raise ValidationError("tail grid must be positive")
    top = dist.samples[-1]
    if np.any(xs > top):
        raise InsufficientTailError(f"grid point beyond the sample maximum {top:.4g}")
    return xs * dist.sf(xs)


def cdf_table(dist: EmpiricalDistribution, xs) -> np.ndarray:
    """Rows (x, empirical CDF of zeta, CDF of 1/e) for comparing the two laws."""
    xs = np.asarray(xs, dtype=float)
    return np.column_stack([xs, dist.cdf(xs), inverse_exponential_cdf(xs)])


def cache_dir() -> Path:
    root = os.environ.get("CHANDETECT_CACHE")
    return Path(root) if root else Path.home() / ".cache" / "chandetect"


def cached_zeta(sampler: ZetaSampler, m: int, workers: int = 1) -> EmpiricalDistribution:
    """Sorted sample from the disk cache, simulating and storing it on a miss."""
    if sampler.euler_gamma != EULER_GAMMA:
        return sample_zeta(sampler, m, workers)
    path = cache_dir() / f"zeta_K{sampler.terms}_m{m}_seed{sampler.seed}.npy"
    if path.exists():
        try:
            s = np.load(path)
            if s.shape == (m,):
                return EmpiricalDistribution.from_sorted(s)
        except (OSError, ValueError):
            pass
    dist = sample_zeta(sampler, m, workers)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        tmp = path.with_suffix(f".{os.getpid()}.tmp.npy")
        np.save(tmp, dist.samples)
        os.replace(tmp, path)
    except OSError as exc:
        warnings.warn(f"could not write zeta cache {path}: {exc}")
    return dist


def default_distribution(workers: int = 1) -> EmpiricalDistribution:
    """m = 1e6 draws at K = 1e4, seed 0 (cached)."""
    return cached_zeta(ZetaSampler(), DEFAULT_SAMPLES, workers)
