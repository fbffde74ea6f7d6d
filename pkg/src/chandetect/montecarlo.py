"""Batched simulation of MAP / Bayes log statistics.

Trial t draws its channel noise from the counter-based stream
``(seed, tag, t)``; the noise does not depend on the test kind, the signal,
or the worker count.  Two runs with the same seed and tag therefore see the
same xi, which is what paired comparisons rely on.
"""

from __future__ import annotations

import math

import numba as nb
import numpy as np

from .detectors import TestKind
from .priors import PriorVector
from .rng import (LANE_AUX, LANE_MAIN, cos2pi, derive_key, fill_words, run_chunked, sin2pi,
                  to_unit, uniforms_per_trial)

TAG_CALIBRATION = "null-calibration"
TAG_FRESH_NULL = "null-fresh"
TAG_SIGNAL = "signal"


@nb.njit(nogil=True, cache=True)
def _stats_kernel(w, log_w, k0, k1, t0, t1, chan, amp, out_max, out_lse, want_lse):
    # Box-Muller pair: h0 + h1 = -log(u1), so exp(h1) = 1 / (u1 exp(h0)) and
    # each noise-only term w exp(h) is at most w / u1 <= 2**53 w: the plain
    # sum cannot overflow.  The signal channel is merged in the log domain.
    n = w.shape[0]
    npairs = (n + 1) // 2
    bits = np.empty(2 * npairs, dtype=np.uint64)
    for t in range(t0, t1):
        c = chan[t] if chan.shape[0] > 1 else chan[0]
        a = amp[t] if amp.shape[0] > 1 else amp[0]
        fill_words(bits, t, LANE_MAIN, k0, k1)
        mx = -np.inf
        s = 0.0
        vc = -np.inf
        for p in range(npairs):
            u1 = to_unit(bits[2 * p])
            e = -math.log(u1)
            u2 = to_unit(bits[2 * p + 1])
            cs = cos2pi(u2)
            h0 = e * cs * cs
            h1 = e - h0
            i = 2 * p
            if c == i or c == i + 1:
                r = math.sqrt(2.0 * e)
                z = r * cs if c == i else r * sin2pi(u2)
                vc = log_w[c] + 0.5 * (z + a) * (z + a)
                if vc > mx:
                    mx = vc
            if c != i:
                v = log_w[i] + h0
                if v > mx:
                    mx = v
            if i + 1 < n and c != i + 1:
                v = log_w[i + 1] + h1
                if v > mx:
                    mx = v
            if want_lse:
                x0 = math.exp(h0)
                if c != i:
                    s += w[i] * x0
                if i + 1 < n and c != i + 1:
                    s += w[i + 1] / (u1 * x0)
        out_max[t] = mx
        if want_lse:
            if vc == -np.inf:
                out_lse[t] = math.log(s)
            elif s <= 0.0:
                out_lse[t] = vc
            else:
                ls = math.log(s)
                hi = max(ls, vc)
                out_lse[t] = hi + math.log(math.exp(ls - hi) + math.exp(vc - hi))


def simulate_log_statistics(prior: PriorVector, trials: int, seed: int, tag: str = TAG_CALIBRATION,
                            kinds=(TestKind.MAP, TestKind.BAYES), channel=None, amplitude=0.0,
                            workers: int = 1) -> dict:
    """Log statistics for ``trials`` observations Y/sigma = xi + a e_channel.

    ``channel`` is a 1-based channel (or per-trial array of them), None for
    pure noise; ``amplitude`` is the signal in units of sigma.
    """
    kinds = [TestKind.parse(k) for k in kinds]
    k0, k1 = derive_key(seed, tag)
    if channel is None:
        chan = np.array([-1], dtype=np.int64)
    else:
        chan = np.atleast_1d(np.asarray(channel, dtype=np.int64)) - 1
        if np.any(chan < 0) or np.any(chan >= prior.size):
            raise ValueError("signal channel outside the prior support")
    amp = np.atleast_1d(np.asarray(amplitude, dtype=float))
    for arr in (chan, amp):
        if arr.shape[0] not in (1, trials):
            raise ValueError("per-trial arrays must have length `trials`")
    want_lse = TestKind.BAYES in kinds
    out_max = np.empty(trials)
    out_lse = np.empty(trials if want_lse else 1)
    w = np.ascontiguousarray(prior.weights)
    log_w = np.ascontiguousarray(prior.log_weights)

    def body(t0, t1):
        _stats_kernel(w, log_w, k0, k1, t0, t1, chan, amp, out_max, out_lse, want_lse)

    run_chunked(body, trials, workers, chunk=max(1, min(4096, 2_000_000 // max(prior.size, 1))))
    result = {}
    if TestKind.MAP in kinds:
        result[TestKind.MAP] = out_max
    if want_lse:
        result[TestKind.BAYES] = out_lse
    return result


def draw_channels(prior: PriorVector, trials: int, seed: int, tag: str = TAG_SIGNAL) -> np.ndarray:
    """1-based channel per trial, distributed as the prior weights.

    Trial t uses the auxiliary lane of stream ``(seed, tag, t)``, which is
    disjoint from the noise words of the same trial.
    """
    k0, k1 = derive_key(seed, tag)
    u = np.empty(trials)
    uniforms_per_trial(u, 0, LANE_AUX, k0, k1)
    cum = np.cumsum(prior.weights)
    idx = np.searchsorted(cum, u * cum[-1], side="left")
    return np.minimum(idx, prior.size - 1).astype(np.int64) + 1
