"""Observation samplers, large-sample oracle checks, and config-driven runs."""

from __future__ import annotations

import copy
import csv
import hashlib
import json
import math
import platform
import sys
import time
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import jsonschema
import numba as nb
import numpy as np
from scipy import special, stats

from . import __version__
from .calibration import (asymptotic_critical_bayes, asymptotic_critical_map, b_n,
                          binomial_halfwidth, critical_from_null)
from .detectors import Observation, TestKind
from .empirical import EmpiricalDistribution
from .errors import ChandetectError, ConfigError, ValidationError
from .montecarlo import TAG_CALIBRATION, simulate_log_statistics
from .power import (boundary_signal, map_boundary_signal, mc_second_kind)
from .priors import (DEFAULT_TAIL_TOL, PriorVector, discrete_entropy_offset, discretize_prior,
                     parse_prior_spec, uniform_prior)
from .rng import (LANE_MAIN, TRANSFORMS, ZIG_FE, ZIG_KE, ZIG_R, ZIG_WE, Stream, cos2pi,
                  derive_key, fill_exponentials, fill_words, run_chunked, to_unit)
from .zeta import ZetaSampler, cached_zeta, cdf_table, default_distribution, zeta_quantile

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

TAG_TAIL = "gaussian-tail"
TAG_PYKE = "pyke"
TAG_PYKE_GAMMA = "pyke-gamma"


# --- observation samplers -------------------------------------------------

def sample_h0(n: int, sigma: float, stream: Stream) -> Observation:
    """n independent N(0, sigma^2) readings."""
    if n < 1:
        raise ValidationError("n must be positive")
    if not sigma > 0:
        raise ValidationError("sigma must be positive")
    return Observation(sigma * stream.normals(n), sigma)


def channel_from_uniform(prior: PriorVector, u: float) -> int:
    cum = np.cumsum(prior.weights)
    return int(min(np.searchsorted(cum, u * cum[-1], side="left"), prior.size - 1)) + 1


def sample_h1(prior: PriorVector, amplitude_rule, sigma: float, stream: Stream):
    """Noise plus a signal of size ``amplitude_rule(nu)`` in a channel nu drawn
    from the prior.  Returns ``(observation, nu)``.

    With ``stream = Stream(seed, "signal", t)`` this reproduces trial t of the
    batched simulation in :mod:`chandetect.montecarlo`.
    """
    nu = channel_from_uniform(prior, stream.uniform())
    y = sigma * stream.normals(prior.size)
    a = float(amplitude_rule(nu))
    if not math.isfinite(a):
        raise ValidationError(f"amplitude_rule({nu}) is not finite")
    y[nu - 1] += a
    return Observation(y, sigma), nu


# --- null law of the Bayes statistic -------------------------------------

def standardized_null_statistic(log_stats, n: int, entropy: float = 0.0) -> np.ndarray:
    """Invert s = sqrt(2/pi) (b_n + (x + H) / b_n) for x."""
    b = b_n(n)
    return b * (math.sqrt(math.pi / 2.0) * np.exp(log_stats) - b) - entropy


def null_statistic_distribution_check(n: int, trials: int = 10**4, seed: int = 0,
                                      prior: PriorVector | None = None,
                                      entropy: float | None = None, zeta=None,
                                      workers: int = 1) -> float | None:
    """KS distance between the standardized null Bayes statistic and zeta.

    Returns None (with a warning) for n < 1000, where the limit law is not
    yet a useful description.
    """
    if n < 1000:
        warnings.warn(f"n={n} is pre-asymptotic; null-law check skipped")
        return None
    prior = uniform_prior(n) if prior is None else prior
    h = discrete_entropy_offset(prior) if entropy is None else entropy
    zeta = default_distribution() if zeta is None else zeta
    log_s = simulate_log_statistics(prior, trials, seed, "null-law", kinds=(TestKind.BAYES,),
                                    workers=workers)[TestKind.BAYES]
    x = standardized_null_statistic(log_s, n, h)
    return float(stats.ks_2samp(x, zeta.samples).statistic)


# --- top order statistics --------------------------------------------------

@nb.njit(nogil=True, cache=True)
def _top_h_kernel(out, n, t0, t1, k0, k1):
    # keep the k_max + 1 largest values of xi^2 / 2, ascending in out[t]
    kk = out.shape[1]
    npairs = (n + 1) // 2
    bits = np.empty(2 * npairs, dtype=np.uint64)
    for t in range(t0, t1):
        top = out[t]
        top[:] = -np.inf
        fill_words(bits, t, LANE_MAIN, k0, k1)
        for p in range(npairs):
            e = -math.log(to_unit(bits[2 * p]))
            cs = cos2pi(to_unit(bits[2 * p + 1]))
            h0 = e * cs * cs
            for j in range(2):
                if j == 1:
                    if 2 * p + 1 >= n:
                        break
                    h = e - h0
                else:
                    h = h0
                if h > top[0]:
                    i = 0
                    while i + 1 < kk and top[i + 1] < h:
                        top[i] = top[i + 1]
                        i += 1
                    top[i] = h


def top_half_squares(n: int, k_max: int, trials: int, seed: int, workers: int = 1) -> np.ndarray:
    """(trials, k_max + 1) array; column k holds the (k+1)-th largest xi_i^2 / 2."""
    k0, k1 = derive_key(seed, TAG_PYKE)
    out = np.empty((trials, k_max + 1))

    def body(t0, t1):
        _top_h_kernel(out, n, t0, t1, k0, k1)

    run_chunked(body, trials, workers, chunk=max(1, min(4096, 2_000_000 // n)))
    return out[:, ::-1].copy()


def pyke_log_representation(n: int, e) -> np.ndarray:
    """log of (sqrt(pi) E)^-1 [log(n / (sqrt(pi) E))]^-1/2."""
    e = np.asarray(e, dtype=float)
    c = math.sqrt(math.pi) * e
    with np.errstate(invalid="ignore", divide="ignore"):
        return -np.log(c) - 0.5 * np.log(np.log(n / c))


@nb.njit(nogil=True, cache=True)
def _gamma_paths(out, k0, k1, ke, we, fe, r):
    kk = out.shape[1]
    ex = np.empty(kk)
    bits = np.empty(kk + (kk % 2), dtype=np.uint64)
    for t in range(out.shape[0]):
        fill_exponentials(ex, bits, t, k0, k1, ke, we, fe, r)
        s = 0.0
        for j in range(kk):
            s += ex[j]
            out[t, j] = s


def pyke_ks_by_order(n: int, k_max: int = 20, trials: int = 10**4, seed: int = 0,
                     workers: int = 1) -> np.ndarray:
    """Per k = 0..k_max, KS distance between log(exp(xi^2_(n-k) / 2) / n)
    and the log of its exponential-sum representation with E ~ Gamma(k+1)."""
    if k_max < 0 or k_max + 1 > n:
        raise ValidationError("need 0 <= k_max < n")
    h = top_half_squares(n, k_max, trials, seed, workers)
    emp = h - math.log(n)
    g = np.empty((trials, k_max + 1))
    _gamma_paths(g, *derive_key(seed, TAG_PYKE_GAMMA), ZIG_KE, ZIG_WE, ZIG_FE, ZIG_R)
    rep = pyke_log_representation(n, g)
    # E beyond n / sqrt(pi) has no representation: treat as -inf (below every sample)
    rep = np.where(np.isfinite(rep), rep, -np.inf)
    return np.array([stats.ks_2samp(emp[:, k], rep[:, k]).statistic for k in range(k_max + 1)])


def pyke_oracle_check(n: int = 10**5, k_max: int = 20, trials: int = 10**4, seed: int = 0,
                      workers: int = 1) -> float:
    return float(pyke_ks_by_order(n, k_max, trials, seed, workers).max())


# --- Gaussian tail -----------------------------------------------------------

def gaussian_tail_exact(x):
    """P{xi^2 / 2 >= x} = 2 Phi-bar(sqrt(2x)) = erfc(sqrt(x))."""
    return special.erfc(np.sqrt(np.asarray(x, dtype=float)))


def gaussian_tail_asymptote(x):
    x = np.asarray(x, dtype=float)
    return np.exp(-x) / np.sqrt(np.pi * x)


@nb.njit(nogil=True, cache=True)
def _tail_count_kernel(counts, grid, total, block, b0, b1, k0, k1):
    bits = np.empty(block, dtype=np.uint64)
    g = grid.shape[0]
    for b in range(b0, b1):
        fill_words(bits, b, LANE_MAIN, k0, k1)
        m = min(block, total - b * block)
        for p in range((m + 1) // 2):
            e = -math.log(to_unit(bits[2 * p]))
            cs = cos2pi(to_unit(bits[2 * p + 1]))
            h0 = e * cs * cs
            h1 = e - h0
            for j in range(g):
                if h0 >= grid[j]:
                    counts[b, j] += 1
                if 2 * p + 1 < m and h1 >= grid[j]:
                    counts[b, j] += 1


def gaussian_tail_frequencies(x_grid, trials: int, seed: int = 0, workers: int = 1) -> np.ndarray:
    """Empirical P{xi^2 / 2 >= x} from ``trials`` standard normal draws."""
    grid = np.ascontiguousarray(x_grid, dtype=float)
    block = 1 << 16
    nblocks = -(-trials // block)
    counts = np.zeros((nblocks, grid.size), dtype=np.int64)
    k0, k1 = derive_key(seed, TAG_TAIL)

    def body(b0, b1):
        _tail_count_kernel(counts, grid, trials, block, b0, b1, k0, k1)

    run_chunked(body, nblocks, workers, chunk=16)
    return counts.sum(axis=0) / trials


def gaussian_tail_check(x_grid, trials: int = 10**7, seed: int = 0, workers: int = 1) -> np.ndarray:
    """Relative errors (empirical - asymptote) / asymptote of the Gaussian tail."""
    grid = np.asarray(x_grid, dtype=float)
    if np.any(grid < 2) or np.any(grid > 10):
        raise ValidationError("tail grid must lie in [2, 10]")
    emp = gaussian_tail_frequencies(grid, trials, seed, workers)
    asym = gaussian_tail_asymptote(grid)
    return (emp - asym) / asym


# --- experiments -------------------------------------------------------------

_GRID = {
    "type": "object",
    "required": ["start", "stop", "num"],
    "properties": {
        "start": {"type": "number"},
        "stop": {"type": "number"},
        "num": {"type": "integer", "minimum": 1},
        "spacing": {"enum": ["linear", "log"]},
    },
    "additionalProperties": False,
}

CONFIG_SCHEMA = {
    "type": "object",
    "required": ["name", "seed"],
    "dependentRequired": {"tests": ["prior", "n", "alphas", "trials"],
                          "power": ["tests"]},
    "anyOf": [{"required": ["tests"]}, {"required": ["zeta"]}],
    "properties": {
        "name": {"type": "string", "pattern": "^[A-Za-z0-9_.-]+$"},
        "description": {"type": "string"},
        "prior": {"type": "string"},
        "tail_tol": {"type": "number", "exclusiveMinimum": 0, "maximum": 1e-6},
        "n": {"oneOf": [{"type": "integer", "minimum": 1},
                        {"type": "array", "items": {"type": "integer", "minimum": 1},
                         "minItems": 1}]},
        "sigma": {"type": "number", "exclusiveMinimum": 0},
        "alphas": {"oneOf": [{"type": "array", "minItems": 1,
                              "items": {"type": "number", "exclusiveMinimum": 0,
                                        "exclusiveMaximum": 1}}, _GRID]},
        "trials": {"type": "integer", "minimum": 1000},
        "seed": {"type": "integer", "minimum": 0},
        "tests": {"type": "array", "minItems": 1, "uniqueItems": True,
                  "items": {"enum": ["map", "bayes"]}},
        "zeta": {
            "type": "object",
            "properties": {
                "samples": {"type": "integer", "minimum": 1},
                "terms": {"type": "integer", "minimum": 1000},
                "seed": {"type": "integer", "minimum": 0},
                "quantiles": {"type": "array", "items": {"type": "number",
                                                         "exclusiveMinimum": 0,
                                                         "exclusiveMaximum": 1}},
                "cdf_grid": _GRID,
            },
            "additionalProperties": False,
        },
        "power": {
            "type": "object",
            "properties": {
                "channels": {"type": "array", "minItems": 1,
                             "items": {"type": "integer", "minimum": 1}},
                "scales": {"type": "array", "minItems": 1, "items": {"type": "number"}},
                "trials": {"type": "integer", "minimum": 1000},
            },
            "additionalProperties": False,
        },
    },
    "additionalProperties": False,
}

DEFAULT_ZETA = {"samples": 10**6, "terms": 10_000, "seed": 0}


def _grid(spec) -> list[float]:
    if isinstance(spec, list):
        return [float(a) for a in spec]
    fn = np.geomspace if spec.get("spacing", "linear") == "log" else np.linspace
    return [float(a) for a in fn(spec["start"], spec["stop"], spec["num"])]


@dataclass(frozen=True)
class ExperimentConfig:
    name: str
    prior_spec: str
    n: tuple
    alphas: tuple
    trials: int
    seed: int
    tests: tuple
    sigma: float = 1.0
    tail_tol: float = DEFAULT_TAIL_TOL
    zeta: dict | None = None
    power: dict | None = None
    raw: dict = field(default_factory=dict, compare=False, repr=False)

    @classmethod
    def from_dict(cls, data: dict) -> "ExperimentConfig":
        try:
            jsonschema.validate(data, CONFIG_SCHEMA)
        except jsonschema.ValidationError as exc:
            path = "/".join(str(p) for p in exc.absolute_path) or "<root>"
            raise ConfigError(f"config error at {path}: {exc.message}") from None
        alphas = _grid(data.get("alphas", []))
        if not all(0 < a < 1 for a in alphas):
            raise ConfigError("alphas must lie in (0, 1)")
        ns = data.get("n", [])
        ns = ns if isinstance(ns, list) else [ns]
        if "prior" in data:
            try:
                parse_prior_spec(data["prior"])  # fail early on a bad shape name
            except ValidationError as exc:
                raise ConfigError(f"config error at prior: {exc}") from None
        return cls(name=data["name"], prior_spec=data.get("prior", ""), n=tuple(ns),
                   alphas=tuple(alphas), trials=data.get("trials", 0), seed=data["seed"],
                   tests=tuple(TestKind.parse(t) for t in data.get("tests", [])),
                   sigma=float(data.get("sigma", 1.0)),
                   tail_tol=float(data.get("tail_tol", DEFAULT_TAIL_TOL)),
                   zeta=data.get("zeta"), power=data.get("power"), raw=copy.deepcopy(data))

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        try:
            with open(path, "rb") as fh:
                data = tomllib.load(fh)
        except tomllib.TOMLDecodeError as exc:
            raise ConfigError(f"{path}: {exc}") from None
        except OSError as exc:
            raise ConfigError(f"cannot read {path}: {exc}") from None
        return cls.from_dict(data)

    def digest(self) -> str:
        canon = json.dumps(self.raw, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canon.encode()).hexdigest()


@dataclass
class RunRecord:
    config_digest: str
    outputs: list
    wall_time: float
    version: str
    status: str = "complete"
    manifest: Path | None = None
    error: str | None = None


def shipped_config(name: str) -> Path:
    """Path of a config shipped with the package, e.g. ``shipped_config("fig1")``."""
    ref = resources.files("chandetect") / "configs" / f"{name}.toml"
    if not ref.is_file():
        raise ConfigError(f"no shipped config named {name!r}")
    return Path(str(ref))


def _fmt(x) -> str:
    if isinstance(x, float):
        return repr(x)
    return str(x)


def _write_csv(path: Path, header, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([_fmt(v) for v in row])


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _versions() -> dict:
    import scipy

    return {"chandetect": __version__, "python": platform.python_version(),
            "numpy": np.__version__, "scipy": scipy.__version__, "numba": nb.__version__}


class _Run:
    def __init__(self, cfg: ExperimentConfig, out_dir: Path, workers: int):
        self.cfg = cfg
        self.out = out_dir
        self.workers = workers
        self.outputs: list[Path] = []
        self.timings: dict[str, float] = {}
        self._zeta = None

    def stage(self, name, fn):
        t = time.perf_counter()
        fn()
        self.timings[name] = round(time.perf_counter() - t, 3)

    def zeta_dist(self) -> EmpiricalDistribution:
        if self._zeta is None:
            z = {**DEFAULT_ZETA, **(self.cfg.zeta or {})}
            self._zeta = cached_zeta(ZetaSampler(z["terms"], z["seed"]), z["samples"],
                                     self.workers)
        return self._zeta

    def prior(self, n) -> PriorVector:
        return discretize_prior(parse_prior_spec(self.cfg.prior_spec), n, self.cfg.tail_tol)

    def calibrate(self):
        cfg = self.cfg
        cal_rows, err_rows = [], []
        self.thresholds = {}
        for n in cfg.n:
            prior = self.prior(n)
            h = discrete_entropy_offset(prior)
            sims = simulate_log_statistics(prior, cfg.trials, cfg.seed, TAG_CALIBRATION,
                                           kinds=cfg.tests, workers=self.workers)
            for kind in cfg.tests:
                null = EmpiricalDistribution(sims[kind])
                for a in cfg.alphas:
                    mc = critical_from_null(null, a, n, cfg.seed, kind)
                    self.thresholds[(kind, n, a)] = mc.log_threshold
                    cal_rows.append([kind.value, a, n, "mc", mc.log_threshold, mc.ci_halfwidth,
                                     cfg.trials, cfg.seed])
                    if kind is TestKind.MAP:
                        asym_log = asymptotic_critical_map(a, n)
                        asym_lin = math.exp(asym_log)
                    else:
                        t_a = zeta_quantile(self.zeta_dist(), a)
                        asym_lin = asymptotic_critical_bayes(a, n, h, t_a)
                        asym_log = math.log(asym_lin) if asym_lin > 0 else math.nan
                    cal_rows.append([kind.value, a, n, "asymptotic", asym_log, 0.0, 0, cfg.seed])
                    err_rows.append([kind.value, n, a, mc.log_threshold, asym_log,
                                     mc.log_threshold - asym_log,
                                     mc.threshold - asym_lin])
        self._emit("calibration.csv", ["test", "alpha", "n", "method", "log_threshold",
                                       "ci_halfwidth", "trials", "seed"], cal_rows)
        self._emit("approx_error.csv", ["test", "n", "alpha", "mc_log_threshold",
                                        "asymptotic_log_threshold", "log_error",
                                        "linear_error"], err_rows)

    def power_stage(self):
        cfg = self.cfg
        p = cfg.power or {}
        trials = p.get("trials", 10**5)
        rows = []
        for n in cfg.n:
            prior = self.prior(n)
            channels = [c for c in p.get("channels", [1]) if c <= prior.size]
            for kind in cfg.tests:
                for a in cfg.alphas:
                    signals = []
                    for c in channels:
                        base = (map_boundary_signal(prior, a, c, cfg.sigma) if kind is TestKind.MAP
                                else boundary_signal(prior, c, cfg.sigma))
                        for s in p.get("scales", [1.0]):
                            signals.append(type(base)(c, s * base.amplitude, cfg.sigma))
                    rep = mc_second_kind(kind, prior, signals, self.thresholds[(kind, n, a)],
                                         trials, cfg.seed, a, self.workers)
                    for est in rep.beta_estimates:
                        rows.append([kind.value, n, a, est.signal.channel, est.signal.amplitude,
                                     est.beta, est.ci_halfwidth, rep.alpha_achieved])
        self._emit("power.csv", ["test", "n", "alpha", "channel", "amplitude", "beta", "ci",
                                 "alpha_achieved"], rows)

    def zeta_stage(self):
        z = {**DEFAULT_ZETA, **(self.cfg.zeta or {})}
        dist = self.zeta_dist()
        qs = z.get("quantiles", [0.01, 0.05, 0.5, 0.95, 0.99])
        self._emit("zeta_quantiles.csv", ["q", "t_q"], [[q, zeta_quantile(dist, q)] for q in qs])
        if "cdf_grid" in z:
            table = cdf_table(dist, _grid(z["cdf_grid"]))
            self._emit("zeta_cdf.csv", ["x", "ecdf_zeta", "cdf_inv_exp"],
                       [[float(v) for v in row] for row in table])

    def _emit(self, name, header, rows):
        path = self.out / name
        _write_csv(path, header, rows)
        self.outputs.append(path)


def run_experiment(config: ExperimentConfig | str | Path, out_dir=None, workers: int = 1) -> RunRecord:
    """Calibrate, then (if configured) estimate power and tabulate zeta.

    Writes CSVs and ``manifest.json`` into ``out_dir``.  CSV contents depend
    only on the config, never on ``workers``.  On failure a manifest with
    status "failed" and the outputs written so far is left behind and the
    error is re-raised.
    """
    cfg = config if isinstance(config, ExperimentConfig) else ExperimentConfig.load(config)
    out = Path(out_dir) if out_dir is not None else Path("runs") / cfg.name
    out.mkdir(parents=True, exist_ok=True)
    run = _Run(cfg, out, workers)
    t0 = time.perf_counter()
    status, error = "complete", None
    try:
        if cfg.tests:
            run.stage("calibration", run.calibrate)
        if cfg.power is not None:
            run.stage("power", run.power_stage)
        if cfg.zeta is not None:
            run.stage("zeta", run.zeta_stage)
    except (ChandetectError, ArithmeticError, ValueError) as exc:
        status, error = "failed", f"{type(exc).__name__}: {exc}"
        raise
    finally:
        wall = round(time.perf_counter() - t0, 3)
        manifest = {
            "name": cfg.name,
            "status": status,
            "error": error,
            "config": cfg.raw,
            "config_digest": cfg.digest(),
            "seeds": {"experiment": cfg.seed,
                      "zeta": {**DEFAULT_ZETA, **(cfg.zeta or {})}["seed"]},
            "workers": workers,
            "versions": _versions(),
            "rng": TRANSFORMS,
            "wall_time": wall,
            "stage_times": run.timings,
            "outputs": {p.name: _sha256(p) for p in run.outputs},
            "command": sys.argv,
        }
        mpath = out / "manifest.json"
        mpath.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return RunRecord(cfg.digest(), [str(p) for p in run.outputs], wall, __version__, status,
                     mpath, error)


def run_experiments(configs, out_root, workers: int = 1, concurrency: int = 1) -> list[RunRecord]:
    """Run several configs, each into ``out_root/<name>``, up to ``concurrency`` at a time."""
    cfgs = [c if isinstance(c, ExperimentConfig) else ExperimentConfig.load(c) for c in configs]
    root = Path(out_root)

    def one(c):
        return run_experiment(c, root / c.name, workers)

    if concurrency <= 1:
        return [one(c) for c in cfgs]
    with ThreadPoolExecutor(max_workers=concurrency) as pool:
        return list(pool.map(one, cfgs))
