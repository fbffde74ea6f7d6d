"""Channel priors built from a continuous shape on the grid k/n.

The prior weight of channel k is the shape density at k/n, renormalized
over the retained grid.  Shapes are assumed piecewise continuous with an
eventually non-increasing tail; both assumptions are used by the quadrature
and by the tail bound that picks the truncation index.
"""

from __future__ import annotations

import csv
import functools
import math
import re
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np
from scipy import integrate

from .errors import (DivergentTailError, EntropyDivergenceError,
                     InvalidShapeError, ValidationError)

NORMALIZATION_TOL = 1e-9
ENTROPY_TOL = 1e-8
DEFAULT_TAIL_TOL = 1e-12
MAX_CHANNELS = 1 << 24


@dataclass(frozen=True)
class PriorShape:
    """A bounded density on the positive half-line.

    ``density`` must accept numpy arrays.  ``breakpoints`` lists points where
    the density has kinks or jumps; quadrature splits there.
    """

    density: Callable[[np.ndarray], np.ndarray]
    support: tuple[float, float]
    sup_bound: float
    breakpoints: tuple[float, ...] = ()
    name: str = "custom"

    def __post_init__(self):
        lo, hi = self.support
        if lo < 0 or not hi > lo:
            raise InvalidShapeError(f"bad support {self.support}")
        if not self.sup_bound > 0:
            raise InvalidShapeError("sup_bound must be positive")

    def __call__(self, x):
        return np.asarray(self.density(np.asarray(x, dtype=float)), dtype=float)

    def scaled(self, c: float) -> "PriorShape":
        """The density multiplied by ``c`` (no longer normalized unless c = 1)."""
        return PriorShape(functools.partial(_scaled, self.density, c), self.support,
                          self.sup_bound * c, self.breakpoints, f"{c}*{self.name}")

    def normalized(self) -> "PriorShape":
        total = _integrate(self, lambda x: float(self(x)))[0]
        if not total > 0:
            raise InvalidShapeError("shape has zero mass")
        return self.scaled(1.0 / total)


def _scaled(density, c, x):
    return c * density(x)


def _uniform_density(a, b, x):
    return np.where((x >= a) & (x <= b), 1.0 / (b - a), 0.0)


def _exponential_density(rate, x):
    return np.where(x >= 0, rate * np.exp(-rate * np.maximum(x, 0.0)), 0.0)


def _triangular_density(a, m, b, x):
    up = np.where(m > a, 2.0 * (x - a) / ((b - a) * (m - a if m > a else 1.0)), 0.0)
    down = np.where(b > m, 2.0 * (b - x) / ((b - a) * (b - m if b > m else 1.0)), 0.0)
    inside = (x >= a) & (x <= b)
    return np.where(inside, np.where(x < m, up, np.where(x > m, down, 2.0 / (b - a))), 0.0)


def _tabulated_density(xs, ds, x):
    return np.interp(x, xs, ds, left=0.0, right=0.0)


def uniform(a: float = 0.0, b: float = 1.0) -> PriorShape:
    if not (0 <= a < b):
        raise InvalidShapeError(f"uniform needs 0 <= a < b, got ({a}, {b})")
    return PriorShape(functools.partial(_uniform_density, a, b), (a, b), 1.0 / (b - a),
                      (a, b), f"uniform({a:g},{b:g})")


def exponential(rate: float = 1.0) -> PriorShape:
    if not rate > 0:
        raise InvalidShapeError("exponential rate must be positive")
    return PriorShape(functools.partial(_exponential_density, rate), (0.0, math.inf), rate,
                      (), f"exponential({rate:g})")


def triangular(left: float, mode: float, right: float) -> PriorShape:
    """Triangular density with the numpy argument order (left, mode, right)."""
    if not (0 <= left <= mode <= right and left < right):
        raise InvalidShapeError(f"triangular needs 0 <= left <= mode <= right, got "
                                f"({left}, {mode}, {right})")
    return PriorShape(functools.partial(_triangular_density, left, mode, right),
                      (left, right), 2.0 / (right - left),
                      tuple(sorted({left, mode, right})),
                      f"triangular({left:g},{mode:g},{right:g})")


def tabulated(xs, densities, name: str = "tabulated") -> PriorShape:
    xs = np.asarray(xs, dtype=float)
    ds = np.asarray(densities, dtype=float)
    if xs.ndim != 1 or xs.shape != ds.shape or xs.size < 2:
        raise InvalidShapeError("need at least two (x, density) pairs")
    if np.any(np.diff(xs) <= 0):
        raise InvalidShapeError("x values must be strictly increasing")
    if xs[0] < 0 or np.any(ds < 0):
        raise InvalidShapeError("x and density must be non-negative")
    return PriorShape(functools.partial(_tabulated_density, xs, ds),
                      (float(xs[0]), float(xs[-1])), float(ds.max()) or 1.0,
                      tuple(float(v) for v in xs), name)


def load_tabulated(path, normalize: bool = False) -> PriorShape:
    """Read ``x,density`` rows (header optional) and interpolate linearly."""
    xs, ds = [], []
    with open(path, newline="") as fh:
        for row in csv.reader(fh):
            if not row or row[0].lstrip().startswith("#"):
                continue
            try:
                x, d = float(row[0]), float(row[1])
            except (ValueError, IndexError):
                if not xs:
                    continue  # header
                raise InvalidShapeError(f"bad row in {path}: {row}")
            xs.append(x)
            ds.append(d)
    shape = tabulated(xs, ds, name=f"tabulated({Path(path).name})")
    return shape.normalized() if normalize else shape


_SPEC_RE = re.compile(r"^\s*(\w+)\s*\((.*)\)\s*$")


def parse_prior_spec(spec: str) -> PriorShape:
    """``uniform(a,b)``, ``exponential(rate)``, ``triangular(left,mode,right)``
    or ``tabulated(path.csv)``."""
    m = _SPEC_RE.match(spec)
    if not m:
        raise ValidationError(f"cannot parse prior spec {spec!r}")
    kind, args = m.group(1).lower(), m.group(2).strip()
    if kind == "tabulated":
        return load_tabulated(args.strip("'\""))
    try:
        values = [float(a) for a in args.split(",")] if args else []
    except ValueError:
        raise ValidationError(f"non-numeric arguments in {spec!r}") from None
    factories = {"uniform": (uniform, (0, 2)), "exponential": (exponential, (0, 1)),
                 "triangular": (triangular, (3, 3))}
    if kind not in factories:
        raise ValidationError(f"unknown prior shape {kind!r}")
    factory, (lo, hi) = factories[kind]
    if not lo <= len(values) <= hi:
        raise ValidationError(f"{kind} takes {lo}..{hi} arguments, got {len(values)}")
    return factory(*values)


def _quad(g, a, b):
    with warnings.catch_warnings():
        warnings.simplefilter("error", integrate.IntegrationWarning)
        try:
            return integrate.quad(g, a, b, epsabs=1e-13, epsrel=1e-12, limit=500)
        except integrate.IntegrationWarning as exc:
            raise ArithmeticError(str(exc)) from None


def _integrate(shape: PriorShape, g, lower: float | None = None):
    """Integrate ``g`` over the shape's support (from ``lower`` if given).

    Finite pieces are split at breakpoints; an infinite upper end is mapped to
    (0, 1] with x = a - log(u).
    """
    lo, hi = shape.support
    if lower is not None:
        lo = max(lo, lower)
    cuts = [lo] + [p for p in shape.breakpoints if lo < p < hi]
    total, err = 0.0, 0.0
    if math.isfinite(hi):
        cuts.append(hi)
    for a, b in zip(cuts[:-1], cuts[1:]):
        v, e = _quad(g, a, b)
        total += v
        err += e
    if not math.isfinite(hi):
        a = cuts[-1]
        v, e = _quad(lambda u: g(a - math.log(u)) / u if u > 0 else 0.0, 0.0, 1.0)
        total += v
        err += e
    return total, err


def check_shape(shape: PriorShape) -> float:
    """Validate normalization and the sup bound; returns the integral."""
    try:
        total, err = _integrate(shape, lambda x: float(shape(x)))
    except ArithmeticError as exc:
        raise InvalidShapeError(f"normalization quadrature failed: {exc}") from None
    if abs(total - 1.0) > NORMALIZATION_TOL:
        raise InvalidShapeError(f"{shape.name} integrates to {total!r}, not 1")
    lo, hi = shape.support
    probe = np.linspace(lo, hi if math.isfinite(hi) else lo + 50.0, 4001)
    probe = np.concatenate([probe, np.asarray(shape.breakpoints, dtype=float)])
    if np.any(shape(probe) > shape.sup_bound * (1 + 1e-12)):
        raise InvalidShapeError(f"{shape.name} exceeds its sup bound {shape.sup_bound}")
    return total


def _plogp(shape, x):
    f = float(shape(x))
    return -f * math.log(f) if f > 0 else 0.0


def continuous_entropy(shape: PriorShape) -> float:
    """Differential entropy of the shape, by adaptive quadrature."""
    try:
        h, err = _integrate(shape, functools.partial(_plogp, shape))
    except ArithmeticError as exc:
        raise EntropyDivergenceError(f"entropy quadrature failed: {exc}") from None
    if not math.isfinite(h) or err > ENTROPY_TOL:
        raise EntropyDivergenceError(f"entropy quadrature error {err:.2e} for {shape.name}")
    return h


@dataclass(frozen=True)
class PriorVector:
    """Normalized channel probabilities.

    ``weights[i]`` belongs to grid point ``grid_indices[i]`` (1-based k).
    Zero-density grid points are dropped, so ``len(weights)`` can be smaller
    than ``truncation_index`` when the shape vanishes on part of (0, K/n].
    """

    weights: np.ndarray
    n: int
    truncation_index: int
    truncated_mass: float = 0.0
    grid_indices: np.ndarray | None = None
    log_weights: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        w = np.array(self.weights, dtype=float)
        if w.ndim != 1 or w.size == 0:
            raise ValidationError("weights must be a non-empty vector")
        if np.any(w <= 0) or np.any(w > 1):
            raise ValidationError("weights must lie in (0, 1]")
        if abs(w.sum() - 1.0) >= 1e-12:
            raise ValidationError(f"weights sum to {w.sum()!r}")
        idx = (np.arange(1, w.size + 1) if self.grid_indices is None
               else np.array(self.grid_indices, dtype=np.int64))
        for arr in (w, idx):
            arr.flags.writeable = False
        lw = np.log(w)
        lw.flags.writeable = False
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "grid_indices", idx)
        object.__setattr__(self, "log_weights", lw)

    @property
    def size(self) -> int:
        return self.weights.size

    def __len__(self):
        return self.weights.size


def _tail_integral(shape: PriorShape, x: float) -> float:
    if x >= shape.support[1]:
        return 0.0
    return _integrate(shape, lambda t: float(shape(t)), lower=x)[0]


def discretize_prior(shape: PriorShape, n: int, tail_tol: float = DEFAULT_TAIL_TOL,
                     validate: bool = True) -> PriorVector:
    """Weights proportional to ``shape(k/n)``, k = 1..K, normalized.

    K is the smallest index whose omitted raw mass sum_{k>K} shape(k/n) is
    below ``tail_tol`` times the retained raw mass.  For unbounded support
    the far tail is bounded by n * integral_{x}^inf shape, valid once the
    density is non-increasing.
    """
    if int(n) != n or n < 1:
        raise ValidationError(f"n must be a positive integer, got {n}")
    n = int(n)
    if not 0 < tail_tol <= 1e-6:
        raise ValidationError(f"tail_tol must lie in (0, 1e-6], got {tail_tol}")
    if validate:
        check_shape(shape)
    hi = shape.support[1]
    if math.isfinite(hi):
        k_hi = int(math.floor(hi * n)) + 1
        far = 0.0
    else:
        k_hi = max(n, 16)
        while True:
            try:
                far = n * _tail_integral(shape, k_hi / n)
            except ArithmeticError as exc:
                raise DivergentTailError(f"tail quadrature of {shape.name} failed: {exc}") from None
            if far <= 1e-3 * tail_tol * n:
                break
            k_hi *= 2
            if k_hi > MAX_CHANNELS:
                raise DivergentTailError(
                    f"tail of {shape.name} not below {tail_tol} within {MAX_CHANNELS} channels")
    raw = shape(np.arange(1, k_hi + 1) / n)
    if np.any(raw < 0) or not np.all(np.isfinite(raw)):
        raise InvalidShapeError("density must be finite and non-negative on the grid")
    head = np.cumsum(raw)
    tail = np.cumsum(raw[::-1])[::-1]
    tail = np.append(tail[1:], 0.0) + far
    ok = (head > 0) & (tail < tail_tol * head)
    if not ok.any():
        raise DivergentTailError(f"no truncation index for {shape.name} at n={n}")
    k = int(np.argmax(ok))
    kept = raw[:k + 1]
    pos = np.nonzero(kept > 0)[0]
    w = kept[pos] / kept[pos].sum()
    w /= w.sum()
    return PriorVector(w, n, k + 1, float(tail[k] / head[k]), pos + 1)


def uniform_prior(n: int) -> PriorVector:
    """n equal weights: the uniform shape on [0, 1] on the grid k/n."""
    return discretize_prior(uniform(0.0, 1.0), n)


def discrete_entropy_offset(prior: PriorVector) -> float:
    """sum_k w_k log(1/w_k) - log n."""
    w = prior.weights
    return float(-np.sum(w * prior.log_weights) - math.log(prior.n))
