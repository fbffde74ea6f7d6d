import math

import mpmath as mp
import numpy as np
import pytest
from hypothesis import assume, given, strategies as st
from hypothesis.extra import numpy as hnp

from chandetect.calibration import mc_critical
from chandetect.detectors import (Observation, TestKind, bayes_statistic, decide, load_observations,
                                  map_statistic, statistic)
from chandetect.errors import DimensionError, ValidationError
from chandetect.priors import PriorVector, discretize_prior, exponential, uniform_prior
from chandetect.rng import Stream
from chandetect.simharness import sample_h0


def test_map_zero_observation_ties_to_first():
    s = map_statistic(Observation(np.zeros(40)), uniform_prior(40))
    assert s.log_value == pytest.approx(-math.log(40), abs=1e-15)
    assert s.argmax_channel == 1
    assert s.kind is TestKind.MAP


def test_map_single_spike():
    y = np.zeros(40)
    y[16] = 3.0
    s = map_statistic(Observation(y), uniform_prior(40))
    assert s.log_value == pytest.approx(-math.log(40) + 4.5, abs=1e-14)
    assert s.argmax_channel == 17


def test_bayes_zero_observation():
    for prior in (uniform_prior(40), discretize_prior(exponential(1.0), 50)):
        assert bayes_statistic(Observation(np.zeros(prior.size)), prior).log_value == \
            pytest.approx(0.0, abs=1e-14)


def test_bayes_single_channel():
    s = bayes_statistic(Observation([2.0]), uniform_prior(1))
    assert s.log_value == 2.0


def _random_instance():
    prior = discretize_prior(exponential(1.0), 100, tail_tol=1e-6)
    prior = PriorVector(prior.weights[:400] / prior.weights[:400].sum(), 100, 400)
    y = Stream(11, "detector-oracle").normals(400) * 1.7
    return prior, y


def test_map_matches_extended_precision_bruteforce():
    prior, y = _random_instance()
    mp.mp.dps = 50
    terms = [mp.mpf(float(w)) * mp.exp(mp.mpf(float(v)) ** 2 / 2) for w, v in zip(prior.weights, y)]
    best = max(range(len(terms)), key=lambda i: terms[i])
    s = map_statistic(Observation(y), prior)
    assert s.log_value == pytest.approx(float(mp.log(terms[best])), rel=1e-14, abs=1e-14)
    assert s.argmax_channel == best + 1


def test_bayes_matches_extended_precision_sum():
    prior, y = _random_instance()
    mp.mp.dps = 50
    total = mp.fsum(mp.mpf(float(w)) * mp.exp(mp.mpf(float(v)) ** 2 / 2)
                    for w, v in zip(prior.weights, y))
    s = bayes_statistic(Observation(y), prior)
    # relative 1e-12 on the statistic is an absolute 1e-12 on its log
    assert abs(s.log_value - float(mp.log(total))) < 1e-12


def test_large_readings_do_not_overflow():
    y = np.array([50.0, 45.0, 0.0])
    prior = uniform_prior(3)
    s = bayes_statistic(Observation(y), prior)
    assert s.log_value == pytest.approx(1250 - math.log(3) + math.log1p(math.exp(-237.5)))


def test_decide_boundary():
    assert decide(0.0, 0.0) == 1
    assert decide(-1.0, 0.0) == 0
    s = map_statistic(Observation([0.0, 0.0]), uniform_prior(2))
    assert decide(s, s.log_value) == 1


def test_calibrated_decision_frequency():
    prior = uniform_prior(40)
    cal = mc_critical("map", prior, 0.05, trials=10**5, seed=3)
    trials = 10**5
    fired = sum(decide(map_statistic(sample_h0(40, 1.0, Stream(3, "decide", t)), prior),
                       cal.log_threshold) for t in range(trials))
    sd = math.sqrt(0.05 * 0.95 / trials)
    # both the threshold and the frequency carry MC noise
    assert abs(fired / trials - 0.05) < 3 * math.sqrt(2) * sd


def test_dimension_mismatch():
    with pytest.raises(DimensionError):
        map_statistic(Observation(np.zeros(3)), uniform_prior(4))
    with pytest.raises(DimensionError):
        Observation(np.zeros((2, 2)))
    with pytest.raises(ValidationError):
        Observation([1.0], sigma=0.0)


def test_kind_parsing():
    assert TestKind.parse("MAP") is TestKind.MAP
    assert statistic("bayes", Observation([0.0]), uniform_prior(1)).kind is TestKind.BAYES
    with pytest.raises(ValidationError):
        TestKind.parse("glrt")


def test_load_observations(tmp_path):
    f = tmp_path / "obs.csv"
    f.write_text("c1,c2,c3\n0,1,2\n# skipped\n3,4,5\n")
    obs = load_observations(f, sigma=2.0)
    assert len(obs) == 2
    assert obs[1].values.tolist() == [3, 4, 5]
    assert obs[0].sigma == 2.0


# --- properties -----------------------------------------------------------

_readings = hnp.arrays(np.float64, st.integers(1, 30), elements=st.floats(-12, 12))


def _prior_for(size, seed):
    w = np.random.default_rng(seed).random(size) + 0.05
    return PriorVector(w / w.sum(), size, size)


@given(_readings, st.integers(0, 1000), st.floats(0.2, 5))
def test_bayes_dominates_map(y, seed, sigma):
    prior = _prior_for(y.size, seed)
    obs = Observation(y, sigma)
    b = bayes_statistic(obs, prior).log_value
    m = map_statistic(obs, prior).log_value
    assert b >= m - 1e-12
    if y.size >= 2:
        # strict whenever the runner-up term is not lost to rounding
        ev = np.sort(prior.log_weights + 0.5 * (y / sigma) ** 2)
        if ev[-1] - ev[-2] < 30:
            assert b > m


@given(_readings, st.integers(0, 1000), st.data())
def test_monotone_in_each_reading(y, seed, data):
    prior = _prior_for(y.size, seed)
    i = data.draw(st.integers(0, y.size - 1))
    bump = data.draw(st.floats(0, 5))
    z = y.copy()
    z[i] = math.copysign(abs(y[i]) + bump, y[i])
    for fn in (map_statistic, bayes_statistic):
        assert fn(Observation(z), prior).log_value >= fn(Observation(y), prior).log_value - 1e-12


@given(_readings, st.integers(0, 1000), st.data())
def test_sign_symmetry(y, seed, data):
    prior = _prior_for(y.size, seed)
    signs = np.array(data.draw(st.lists(st.sampled_from([-1.0, 1.0]), min_size=y.size,
                                        max_size=y.size)))
    for fn in (map_statistic, bayes_statistic):
        assert fn(Observation(y * signs), prior).log_value == fn(Observation(y), prior).log_value


@given(_readings, st.integers(0, 1000), st.randoms(use_true_random=False))
def test_permutation_equivariance(y, seed, rnd):
    prior = _prior_for(y.size, seed)
    perm = list(range(y.size))
    rnd.shuffle(perm)
    perm = np.array(perm)
    pp = PriorVector(prior.weights[perm], prior.n, prior.size)
    obs, obs_p = Observation(y), Observation(y[perm])
    ev = prior.log_weights + 0.5 * y * y
    assume(np.sum(ev == ev.max()) == 1)  # argmax is unique
    m, mp_ = map_statistic(obs, prior), map_statistic(obs_p, pp)
    assert mp_.log_value == m.log_value
    assert perm[mp_.argmax_channel - 1] == m.argmax_channel - 1
    assert bayes_statistic(obs_p, pp).log_value == pytest.approx(
        bayes_statistic(obs, prior).log_value, abs=1e-12)
