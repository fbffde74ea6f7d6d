"""Counter-based random streams.

Every draw is a pure function of ``(seed, tag, trial, lane, counter)``:
Philox4x32-10 (Salmon et al., SC'11) is applied to the counter block
``(counter, lane, trial_lo, trial_hi)`` under a 64-bit key derived from the
seed and a purpose tag.  Because no generator state is carried between
trials, Monte-Carlo loops can be split across any number of workers and
still reproduce the same numbers bit for bit.

Transforms on top of the raw 64-bit words:

* uniforms on (0, 1] from the top 53 bits;
* standard normals by the Box-Muller transform, one Philox block per pair;
* unit exponentials by the 256-level Marsaglia-Tsang ziggurat, rejections
  drawing from a separate lane so the main lane stays aligned.
"""

from __future__ import annotations

import hashlib
import math
from concurrent.futures import ThreadPoolExecutor

import numba as nb
import numpy as np

TRANSFORMS = {
    "bit_generator": "philox4x32-10",
    "uniform": "53-bit, (0,1]",
    "normal": "box-muller",
    "exponential": "ziggurat-256 (marsaglia-tsang)",
}

LANE_MAIN = 0
LANE_REJECT = 1
LANE_AUX = 2

_M0 = np.uint64(0xD2511F53)
_M1 = np.uint64(0xCD9E8D57)
_W0 = np.uint32(0x9E3779B9)
_W1 = np.uint32(0xBB67AE85)
_MASK32 = np.uint64(0xFFFFFFFF)
_SH32 = np.uint64(32)
_SH11 = np.uint64(11)
_ONE = np.uint64(1)
_INV53 = 1.0 / 9007199254740992.0
_TWO_PI = 2.0 * math.pi


def derive_key(seed: int, tag: str) -> tuple[np.uint32, np.uint32]:
    """Map a user seed and a purpose tag to a Philox key."""
    if seed < 0:
        raise ValueError("seed must be non-negative")
    digest = hashlib.blake2b(f"{seed}/{tag}".encode(), digest_size=8).digest()
    word = int.from_bytes(digest, "little")
    return np.uint32(word & 0xFFFFFFFF), np.uint32(word >> 32)


@nb.njit(inline="always", nogil=True, cache=True)
def philox4x32(c0, c1, c2, c3, k0, k1):
    for _ in range(10):
        p0 = np.uint64(c0) * _M0
        p1 = np.uint64(c2) * _M1
        hi0 = np.uint32(p0 >> _SH32)
        lo0 = np.uint32(p0 & _MASK32)
        hi1 = np.uint32(p1 >> _SH32)
        lo1 = np.uint32(p1 & _MASK32)
        c0, c1, c2, c3 = hi1 ^ c1 ^ k0, lo1, hi0 ^ c3 ^ k1, lo0
        k0 = np.uint32(k0 + _W0)
        k1 = np.uint32(k1 + _W1)
    return c0, c1, c2, c3


@nb.njit(inline="always", nogil=True, cache=True)
def block_words(counter, lane, trial, k0, k1):
    """Two 64-bit words from one Philox block."""
    t = np.uint64(trial)
    a, b, c, d = philox4x32(
        np.uint32(counter), np.uint32(lane),
        np.uint32(t & _MASK32), np.uint32(t >> _SH32), k0, k1,
    )
    w0 = (np.uint64(a) << _SH32) | np.uint64(b)
    w1 = (np.uint64(c) << _SH32) | np.uint64(d)
    return w0, w1


@nb.njit(inline="always", nogil=True, cache=True)
def to_unit(w):
    # int64 detour: uint64 -> float conversion is slow on x86
    return np.int64((w >> _SH11) + _ONE) * _INV53


@nb.njit(nogil=True, cache=True)
def fill_words(bits, trial, lane, k0, k1):
    n = bits.shape[0]
    for j in range((n + 1) // 2):
        w0, w1 = block_words(j, lane, trial, k0, k1)
        bits[2 * j] = w0
        if 2 * j + 1 < n:
            bits[2 * j + 1] = w1


@nb.njit(inline="always", nogil=True, cache=True)
def _cos_kernel(x):
    # Taylor series on [0, pi/4]; truncation error < 1e-17
    x2 = x * x
    return 1.0 + x2 * (-1.0 / 2 + x2 * (1.0 / 24 + x2 * (-1.0 / 720 + x2 * (
        1.0 / 40320 + x2 * (-1.0 / 3628800 + x2 * (1.0 / 479001600 + x2 * (
            -1.0 / 87178291200 + x2 * (1.0 / 20922789888000))))))))


@nb.njit(inline="always", nogil=True, cache=True)
def _sin_kernel(x):
    x2 = x * x
    return x * (1.0 + x2 * (-1.0 / 6 + x2 * (1.0 / 120 + x2 * (-1.0 / 5040 + x2 * (
        1.0 / 362880 + x2 * (-1.0 / 39916800 + x2 * (1.0 / 6227020800 + x2 * (
            -1.0 / 1307674368000 + x2 * (1.0 / 355687428096000)))))))))


@nb.njit(inline="always", nogil=True, cache=True)
def cos2pi(u):
    """cos(2 pi u).  Range reduction is exact for u a multiple of 2**-53."""
    a = abs(u - np.floor(u + 0.5))
    sign = 1.0
    if a > 0.25:
        a = 0.5 - a
        sign = -1.0
    if a > 0.125:
        return sign * _sin_kernel(_TWO_PI * (0.25 - a))
    return sign * _cos_kernel(_TWO_PI * a)


@nb.njit(inline="always", nogil=True, cache=True)
def sin2pi(u):
    return cos2pi(u - 0.25)


@nb.njit(inline="always", nogil=True, cache=True)
def box_muller(w0, w1):
    r = math.sqrt(-2.0 * math.log(to_unit(w0)))
    u = to_unit(w1)
    return r * cos2pi(u), r * sin2pi(u)


@nb.njit(nogil=True, cache=True)
def fill_normals(out, bits, trial, k0, k1):
    """Standard normals for one trial; ``bits`` is scratch of even length >= len(out)."""
    n = out.shape[0]
    fill_words(bits, trial, LANE_MAIN, k0, k1)
    for p in range((n + 1) // 2):
        z0, z1 = box_muller(bits[2 * p], bits[2 * p + 1])
        out[2 * p] = z0
        if 2 * p + 1 < n:
            out[2 * p + 1] = z1


def _ziggurat_tables():
    # Marsaglia & Tsang (2000), 256 levels, scaled to 53-bit integers.
    r = 7.69711747013104972
    v = 3.949659822581572e-3
    scale = 2.0 ** 53
    ke = np.zeros(256, dtype=np.uint64)
    we = np.zeros(256)
    fe = np.zeros(256)
    de = r
    te = r
    q = v / math.exp(-de)
    ke[0] = int((de / q) * scale)
    ke[1] = 0
    we[0] = q / scale
    we[255] = de / scale
    fe[0] = 1.0
    fe[255] = math.exp(-de)
    for i in range(254, 0, -1):
        de = -math.log(v / de + math.exp(-de))
        ke[i + 1] = int((de / te) * scale)
        te = de
        fe[i] = math.exp(-de)
        we[i] = de / scale
    return ke, we, fe, r


ZIG_KE, ZIG_WE, ZIG_FE, ZIG_R = _ziggurat_tables()


@nb.njit(nogil=True, cache=True)
def fill_exponentials(out, bits, trial, k0, k1, ke, we, fe, r):
    """Unit exponentials for one trial via the ziggurat.

    The main lane supplies one word per output; rejected draws are retried
    with words from the reject lane, consumed in order.
    """
    n = out.shape[0]
    fill_words(bits, trial, LANE_MAIN, k0, k1)
    rc = 0
    for j in range(n):
        w = bits[j]
        while True:
            ri = w >> np.uint64(3)
            idx = ri & np.uint64(0xFF)
            ri >>= np.uint64(8)
            x = np.int64(ri) * we[idx]
            if ri < ke[idx]:
                break
            u, w = block_words(rc, LANE_REJECT, trial, k0, k1)
            rc += 1
            if idx == 0:
                x = r - math.log(to_unit(u))
                break
            if (fe[idx - 1] - fe[idx]) * to_unit(u) + fe[idx] < math.exp(-x):
                break
        out[j] = x


@nb.njit(nogil=True, cache=True)
def uniforms_per_trial(out, t0, lane, k0, k1):
    for i in range(out.shape[0]):
        w0, _ = block_words(0, lane, t0 + i, k0, k1)
        out[i] = to_unit(w0)


def run_chunked(body, trials: int, workers: int = 1, chunk: int = 4096) -> None:
    """Call ``body(t0, t1)`` over ``[0, trials)`` in fixed chunks.

    Kernels release the GIL, so a thread pool gives real parallelism.  The
    split never affects results: every trial owns its stream.
    """
    bounds = [(t, min(t + chunk, trials)) for t in range(0, trials, chunk)]
    if workers <= 1 or len(bounds) == 1:
        for t0, t1 in bounds:
            body(t0, t1)
        return
    with ThreadPoolExecutor(max_workers=workers) as pool:
        for _ in pool.map(lambda b: body(*b), bounds):
            pass


class Stream:
    """A single trial's random stream, for drawing one observation at a time."""

    def __init__(self, seed: int, tag: str = "stream", trial: int = 0):
        self.seed = seed
        self.tag = tag
        self.trial = trial
        self._key = derive_key(seed, tag)

    def normals(self, n: int) -> np.ndarray:
        out = np.empty(n)
        bits = np.empty(n + (n % 2), dtype=np.uint64)
        fill_normals(out, bits, np.int64(self.trial), *self._key)
        return out

    def exponentials(self, n: int) -> np.ndarray:
        out = np.empty(n)
        bits = np.empty(n, dtype=np.uint64)
        fill_exponentials(out, bits, np.int64(self.trial), *self._key,
                          ZIG_KE, ZIG_WE, ZIG_FE, ZIG_R)
        return out

    def uniform(self) -> float:
        out = np.empty(1)
        uniforms_per_trial(out, np.int64(self.trial), LANE_AUX, *self._key)
        return float(out[0])

    def __repr__(self):
        return f"Stream(seed={self.seed}, tag={self.tag!r}, trial={self.trial})"
