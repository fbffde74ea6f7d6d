import filecmp
import json
import math
import warnings

import numpy as np
import pytest
from scipy import special, stats

from chandetect.calibration import b_n, critical_from_null, mc_critical, null_distribution
from chandetect.detectors import TestKind, bayes_statistic, map_statistic
from chandetect.errors import ConfigError, UnstableQuantileError, ValidationError
from chandetect.montecarlo import TAG_SIGNAL, draw_channels, simulate_log_statistics
from chandetect.power import SignalSpec, boundary_signal, mc_second_kind
from chandetect.priors import (PriorVector, discrete_entropy_offset, discretize_prior, exponential,
                               uniform_prior)
from chandetect.rng import Stream
from chandetect.simharness import (TAG_PYKE, ExperimentConfig, gaussian_tail_asymptote,
                                   gaussian_tail_check, gaussian_tail_exact,
                                   gaussian_tail_frequencies, null_statistic_distribution_check,
                                   pyke_ks_by_order, pyke_log_representation, pyke_oracle_check,
                                   run_experiment, run_experiments, sample_h0, sample_h1,
                                   shipped_config, standardized_null_statistic, top_half_squares)


def test_h0_moments():
    y = sample_h0(10**5, 1.0, Stream(0, "h0")).values
    assert abs(y.mean()) < 3 / math.sqrt(1e5)
    assert abs(y.var() - 1) < 3 * math.sqrt(2 / 1e5)


def test_h0_deterministic_and_scaled():
    a = sample_h0(1000, 1.0, Stream(4, "h0", 2)).values
    assert np.array_equal(a, sample_h0(1000, 1.0, Stream(4, "h0", 2)).values)
    assert not np.array_equal(a, sample_h0(1000, 1.0, Stream(4, "h0", 3)).values)
    b = sample_h0(1000, 2.5, Stream(4, "h0", 2))
    assert b.sigma == 2.5
    assert np.allclose(b.values, 2.5 * a, rtol=0, atol=1e-15)
    with pytest.raises(ValidationError):
        sample_h0(10, 0.0, Stream(0))


FOUR = PriorVector([0.5, 0.3, 0.15, 0.05], 4, 4)


def test_h1_channel_frequencies():
    m = 10**6
    chan = draw_channels(FOUR, m, seed=0)
    counts = np.bincount(chan, minlength=5)[1:]
    w = FOUR.weights
    assert np.all(np.abs(counts / m - w) < 3 * np.sqrt(w * (1 - w) / m))


def test_h1_matches_batched_channels():
    chan = draw_channels(FOUR, 500, seed=3)
    for t in range(500):
        _, nu = sample_h1(FOUR, lambda j: 1.0, 1.0, Stream(3, TAG_SIGNAL, t))
        assert nu == chan[t]


def test_h1_zero_amplitude_is_h0():
    for t in range(5):
        y, _ = sample_h1(FOUR, lambda j: 0.0, 1.3, Stream(1, "x", t))
        assert np.array_equal(y.values, sample_h0(4, 1.3, Stream(1, "x", t)).values)
    with pytest.raises(ValidationError):
        sample_h1(FOUR, lambda j: math.nan, 1.0, Stream(0))


def test_h1_adds_signal_in_drawn_channel():
    s = Stream(7, "y", 11)
    y, nu = sample_h1(FOUR, lambda j: 10.0 * j, 1.0, s)
    noise = sample_h0(4, 1.0, s).values
    diff = y.values - noise
    assert diff[nu - 1] == pytest.approx(10.0 * nu)
    assert np.count_nonzero(diff) == 1


def test_single_draws_reproduce_batched_statistics():
    p = discretize_prior(exponential(2.0), 30)
    amp = np.linspace(1.0, 3.0, p.size)
    T = 200
    batch = simulate_log_statistics(p, T, 5, TAG_SIGNAL, channel=draw_channels(p, T, 5),
                                    amplitude=amp[draw_channels(p, T, 5) - 1])
    for t in range(T):
        y, _ = sample_h1(p, lambda j: amp[j - 1], 1.0, Stream(5, TAG_SIGNAL, t))
        assert map_statistic(y, p).log_value == pytest.approx(batch[TestKind.MAP][t], rel=1e-12)
        assert bayes_statistic(y, p).log_value == pytest.approx(batch[TestKind.BAYES][t], rel=1e-12)


def test_conditional_beta_matches_power_runs():
    n = 1000
    w = np.full(n, 0.8 / (n - 2))
    w[:2] = 0.1
    p = PriorVector(w / w.sum(), n, n)
    thr = mc_critical("bayes", p, 0.05, 10**5, seed=0).log_threshold
    amps = np.array([boundary_signal(p, j).amplitude for j in range(1, n + 1)])
    T = 10**5
    chan = draw_channels(p, T, 2)
    avg = simulate_log_statistics(p, T, 2, TAG_SIGNAL, kinds=("bayes",), channel=chan,
                                  amplitude=amps[chan - 1])[TestKind.BAYES]
    for j in (1, 2):
        fixed = simulate_log_statistics(p, T, 2, TAG_SIGNAL, kinds=("bayes",), channel=j,
                                        amplitude=amps[j - 1])[TestKind.BAYES]
        mask = chan == j
        # same seed: identical observations on the trials whose drawn channel is j
        assert np.array_equal(avg[mask], fixed[mask])
        cond = np.mean(avg[mask] < thr)
        run = mc_second_kind("bayes", p, SignalSpec(j, amps[j - 1]), thr, T, seed=2)
        b = run.beta_estimates[0].beta
        assert abs(cond - b) < 4 * math.sqrt(b * (1 - b) / mask.sum())


def test_null_law_uniform(zeta_ref):
    assert null_statistic_distribution_check(10**4, 10**4, seed=0, zeta=zeta_ref) < 0.05


def test_null_law_exponential(zeta_ref):
    p = discretize_prior(exponential(1.0), 10**4)
    assert discrete_entropy_offset(p) == pytest.approx(1.0, abs=1e-6)
    assert null_statistic_distribution_check(10**4, 10**4, seed=0, prior=p, zeta=zeta_ref) < 0.05


def test_null_law_skipped_for_small_n():
    with pytest.warns(UserWarning, match="pre-asymptotic"):
        assert null_statistic_distribution_check(10, 10**3) is None


def test_standardization_inverts_affine_map():
    n = 400
    x = np.array([-1.0, 0.0, 3.0, 26.0])
    s = math.sqrt(2 / math.pi) * (b_n(n) + (x + 0.7) / b_n(n))
    assert np.allclose(standardized_null_statistic(np.log(s), n, 0.7), x)


def test_entropy_shifts_the_null_location():
    n = 10**4
    u = uniform_prior(n)
    e = discretize_prior(exponential(1.0), n)
    su = np.exp(simulate_log_statistics(u, 3000, 0, "shift", kinds=("bayes",))[TestKind.BAYES])
    se = np.exp(simulate_log_statistics(e, 3000, 0, "shift", kinds=("bayes",))[TestKind.BAYES])
    pred = math.sqrt(2 / math.pi) * (discrete_entropy_offset(e) - discrete_entropy_offset(u)) / b_n(n)
    shift = np.median(se) - np.median(su)
    assert abs(shift - pred) < 0.2 * pred


def test_pyke_representation_at_unit_sum():
    n = 10**5
    want = -math.log(math.sqrt(math.pi)) - 0.5 * math.log(math.log(n / math.sqrt(math.pi)))
    assert pyke_log_representation(n, 1.0) == pytest.approx(want, rel=1e-14)


def test_top_order_statistics_are_exact():
    h = top_half_squares(101, 4, 3, seed=5)
    for t in range(3):
        x = Stream(5, TAG_PYKE, t).normals(101)
        assert np.allclose(np.sort(x**2 / 2)[::-1][:5], h[t], rtol=1e-14, atol=0)


def test_pyke_k0():
    assert pyke_oracle_check(10**5, k_max=0, trials=10**4, seed=0) < 0.05


def test_pyke_improves_with_n():
    trials = 4000
    small = pyke_ks_by_order(10**3, 2, trials, seed=1)
    large = pyke_ks_by_order(10**5, 2, trials, seed=1)
    noise = 1.36 * math.sqrt(2 / trials)
    assert np.all(large <= small + noise)
    with pytest.raises(ValidationError):
        pyke_ks_by_order(3, 3, 10)


def test_gaussian_tail_exact_identity():
    x = np.array([0.5, 2.0, 4.0, 8.0])
    assert np.allclose(gaussian_tail_exact(x), 2 * stats.norm.sf(np.sqrt(2 * x)), rtol=1e-12)


def test_gaussian_tail_frequencies_match_exact():
    m = 2 * 10**6
    x = np.array([0.5, 2.0, 4.0])
    emp = gaussian_tail_frequencies(x, m, seed=3)
    p = gaussian_tail_exact(x)
    assert np.all(np.abs(emp - p) < 4 * np.sqrt(p * (1 - p) / m))


def test_gaussian_tail_asymptote_accuracy():
    # the asymptote overshoots by roughly 1/(2x): about 11% at 4, 20% at 2
    x = np.array([2.0, 4.0, 8.0])
    rel = gaussian_tail_asymptote(x) / gaussian_tail_exact(x) - 1
    assert np.all(rel > 0) and np.all(np.diff(rel) < 0)
    assert np.all(rel < 1 / (2 * x))


def test_gaussian_tail_check_examples():
    r = gaussian_tail_check([2.0, 4.0], 10**7, seed=0)
    assert abs(r[0]) < 0.2
    assert abs(r[1]) < 0.1
    with pytest.raises(ValidationError):
        gaussian_tail_check([1.0], 100)
    with pytest.raises(ValidationError):
        gaussian_tail_check([11.0], 100)


def test_gaussian_tail_does_not_depend_on_workers():
    a = gaussian_tail_frequencies([2.0, 3.0], 300_000, seed=1, workers=1)
    b = gaussian_tail_frequencies([2.0, 3.0], 300_000, seed=1, workers=3)
    assert np.array_equal(a, b)


# --- experiments ---------------------------------------------------------------

SMALL = {
    "name": "small",
    "prior": "uniform(0,1)",
    "n": [30, 60],
    "tests": ["map", "bayes"],
    "trials": 4000,
    "seed": 3,
    "alphas": [0.05, 0.1],
    "power": {"channels": [1, 60], "scales": [1.0, 2.0], "trials": 2000},
    "zeta": {"samples": 5000, "terms": 1000, "seed": 2,
             "cdf_grid": {"start": -2, "stop": 10, "num": 13}},
}


@pytest.fixture
def cache(tmp_path, monkeypatch):
    monkeypatch.setenv("CHANDETECT_CACHE", str(tmp_path / "cache"))


def _csvs(d):
    return sorted(p.name for p in d.glob("*.csv"))


def test_experiment_is_deterministic_across_workers(tmp_path, cache):
    cfg = ExperimentConfig.from_dict(SMALL)
    r1 = run_experiment(cfg, tmp_path / "w1", workers=1)
    r3 = run_experiment(cfg, tmp_path / "w3", workers=3)
    names = _csvs(tmp_path / "w1")
    assert names == ["approx_error.csv", "calibration.csv", "power.csv", "zeta_cdf.csv",
                     "zeta_quantiles.csv"]
    assert names == _csvs(tmp_path / "w3")
    for name in names:
        assert filecmp.cmp(tmp_path / "w1" / name, tmp_path / "w3" / name, shallow=False)
    assert r1.config_digest == r3.config_digest
    m1 = json.loads(r1.manifest.read_text())
    m3 = json.loads(r3.manifest.read_text())
    assert m1["outputs"] == m3["outputs"]
    assert m1["status"] == "complete" and m1["seeds"] == {"experiment": 3, "zeta": 2}
    assert m1["config_digest"] == cfg.digest()
    assert set(m1["stage_times"]) == {"calibration", "power", "zeta"}
    assert "normal" in m1["rng"]


def test_experiment_thresholds_agree_with_calibration(tmp_path, cache):
    rec = run_experiment(ExperimentConfig.from_dict(SMALL), tmp_path, workers=1)
    assert rec.status == "complete"
    rows = list(csv_rows(tmp_path / "calibration.csv"))
    mc = [r for r in rows if r["method"] == "mc"]
    assert len(mc) == 2 * 2 * 2
    for r in mc:
        n, a = int(r["n"]), float(r["alpha"])
        want = mc_critical(r["test"], uniform_prior(n), a, 4000, seed=3).log_threshold
        assert float(r["log_threshold"]) == want
    power = list(csv_rows(tmp_path / "power.csv"))
    # channel 60 is outside the support at n = 30
    assert len(power) == 2 * 2 * 2 * (1 + 2)
    r = next(p for p in power if p["test"] == "bayes" and p["n"] == "60" and p["alpha"] == "0.1"
             and p["channel"] == "60" and p["amplitude"] == repr(2 * b_n(60)))
    thr = mc_critical("bayes", uniform_prior(60), 0.1, 4000, seed=3).log_threshold
    rep = mc_second_kind("bayes", uniform_prior(60), SignalSpec(60, 2 * b_n(60)), thr, 2000, seed=3)
    assert float(r["beta"]) == rep.beta_estimates[0].beta
    assert float(r["alpha_achieved"]) == rep.alpha_achieved


def csv_rows(path):
    import csv

    with open(path, newline="") as fh:
        yield from csv.DictReader(fh)


def test_failed_stage_leaves_partial_manifest(tmp_path, cache):
    bad = {"name": "bad", "prior": "uniform(0,1)", "n": 20, "tests": ["map"], "trials": 1000,
           "seed": 0, "alphas": [0.1], "zeta": {"samples": 200, "terms": 1000, "quantiles": [0.01]}}
    with pytest.raises(UnstableQuantileError):
        run_experiment(ExperimentConfig.from_dict(bad), tmp_path)
    m = json.loads((tmp_path / "manifest.json").read_text())
    assert m["status"] == "failed"
    assert "UnstableQuantileError" in m["error"]
    assert set(m["outputs"]) == {"calibration.csv", "approx_error.csv"}


@pytest.mark.parametrize("patch", [
    {"seed": None},
    {"alphas": [0.05, 1.5]},
    {"alphas": {"start": 0.1, "stop": 2.0, "num": 3}},
    {"trials": 10},
    {"tests": ["glrt"]},
    {"prior": "cauchy(0,1)"},
    {"unknown": 1},
    {"power": {"channels": [0]}},
    {"name": "has space"},
])
def test_config_validation(patch):
    data = {k: v for k, v in SMALL.items()}
    for k, v in patch.items():
        if v is None:
            data.pop(k)
        else:
            data[k] = v
    with pytest.raises(ConfigError):
        ExperimentConfig.from_dict(data)


def test_tests_require_prior_and_n():
    with pytest.raises(ConfigError):
        ExperimentConfig.from_dict({"name": "x", "seed": 0, "tests": ["map"]})
    with pytest.raises(ConfigError):
        ExperimentConfig.from_dict({"name": "x", "seed": 0})
    ExperimentConfig.from_dict({"name": "x", "seed": 0, "zeta": {}})


def test_bad_toml(tmp_path):
    p = tmp_path / "c.toml"
    p.write_text("name = \n")
    with pytest.raises(ConfigError):
        ExperimentConfig.load(p)
    with pytest.raises(ConfigError):
        ExperimentConfig.load(tmp_path / "missing.toml")


def test_digest_tracks_content():
    a = ExperimentConfig.from_dict(SMALL)
    b = ExperimentConfig.from_dict(dict(reversed(list(SMALL.items()))))
    assert a.digest() == b.digest()
    assert a.digest() != ExperimentConfig.from_dict({**SMALL, "seed": 4}).digest()


@pytest.mark.parametrize("name", ["fig1", "fig2", "fig3", "nondetect"])
def test_shipped_configs_load(name):
    cfg = ExperimentConfig.load(shipped_config(name))
    assert cfg.name == name
    assert all(0 < a < 1 for a in cfg.alphas)
    with pytest.raises(ConfigError):
        shipped_config("nope")


def test_shipped_grids():
    f1 = ExperimentConfig.load(shipped_config("fig1"))
    assert f1.n == (40, 400) and f1.trials == 10**6
    assert f1.alphas[0] == 0.005 and f1.alphas[-1] == pytest.approx(0.5)
    f2 = ExperimentConfig.load(shipped_config("fig2"))
    assert f2.alphas[0] == pytest.approx(0.001) and f2.alphas[-1] == pytest.approx(0.2)


def test_concurrent_runs_match_sequential(tmp_path, cache):
    cfgs = [ExperimentConfig.from_dict({**SMALL, "name": f"c{i}", "seed": i,
                                        "n": [20], "zeta": {"samples": 2000, "terms": 1000}})
            for i in range(3)]
    seq = run_experiments(cfgs, tmp_path / "seq")
    par = run_experiments(cfgs, tmp_path / "par", workers=2, concurrency=3)
    for a, b in zip(seq, par):
        assert a.config_digest == b.config_digest
        for pa, pb in zip(a.outputs, b.outputs):
            assert filecmp.cmp(pa, pb, shallow=False)
