"""Deterministic random streams with named substream derivation.

The generator interleaves ``LANES`` independent xoshiro256** lanes whose
256-bit states are filled from one SplitMix64 chain started at the
64-bit stream key. Outputs are taken round-robin: one generation round
emits one 64-bit word per lane, in lane order. The resulting word stream
is a fixed, platform-independent format; the first 1000 words for seed
42 are frozen in a golden test file and any change is a breaking change.

Substreams are derived by hashing ``(tag, seed)`` with BLAKE2b, so every
component of a run (init, batches, hyperparameter draws, ...) owns an
independent stream reproducible from the master seed alone.
"""

import hashlib
import math

import numpy as np

MASK64 = (1 << 64) - 1
LANES = 256

_SM_GAMMA = 0x9E3779B97F4A7C15
_DOUBLE_SCALE = 2.0 ** -53


def splitmix64(state):
    """Advance a SplitMix64 state; returns (new_state, output word)."""
    state = (state + _SM_GAMMA) & MASK64
    z = state
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK64
    return state, (z ^ (z >> 31)) & MASK64


def derive_key(tag, seed):
    """64-bit stream key for (tag, seed); independent across tags."""
    h = hashlib.blake2b(digest_size=8)
    h.update(str(tag).encode("utf-8"))
    h.update(b"\x00")
    h.update(int(seed).to_bytes(16, "little", signed=False))
    return int.from_bytes(h.digest(), "little")


def _rotl(x, k):
    k = np.uint64(k)
    return (x << k) | (x >> np.uint64(64 - int(k)))


class Rng:
    """Seeded xoshiro256** stream (SplitMix64-expanded, lane-interleaved)."""

    def __init__(self, seed):
        seed = int(seed) & MASK64
        self.seed = seed
        # the SplitMix64 chain is additive, so the whole expansion
        # vectorizes: state after i steps is seed + i*gamma
        idx = np.arange(1, 4 * LANES + 1, dtype=np.uint64)
        z = np.uint64(seed) + idx * np.uint64(_SM_GAMMA)
        z = (z ^ (z >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)
        z = (z ^ (z >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)
        words = (z ^ (z >> np.uint64(31))).reshape(LANES, 4)
        self._s = [words[:, i].copy() for i in range(4)]
        self._buf = np.empty(0, dtype=np.uint64)
        self._pos = 0
        self._spare_normal = None

    @classmethod
    def from_key(cls, tag, seed):
        """Rng on the independent substream keyed by (tag, seed)."""
        return cls(derive_key(tag, seed))

    def derive(self, tag):
        """Child Rng, keyed by this stream's seed and a tag."""
        return Rng.from_key(tag, self.seed)

    # -- word stream ---------------------------------------------------

    def _round(self):
        s0, s1, s2, s3 = self._s
        out = _rotl(s1 * np.uint64(5), 7) * np.uint64(9)
        t = s1 << np.uint64(17)
        s2 ^= s0
        s3 ^= s1
        s1 ^= s2
        s0 ^= s3
        s2 ^= t
        self._s[0], self._s[1], self._s[2] = s0, s1, s2
        self._s[3] = _rotl(s3, 45)
        return out

    def words(self, n):
        """Next n raw 64-bit words as a uint64 array."""
        n = int(n)
        have = self._buf.size - self._pos
        if have >= n:
            out = self._buf[self._pos:self._pos + n].copy()
            self._pos += n
            return out
        out = np.empty(n, dtype=np.uint64)
        if have:
            out[:have] = self._buf[self._pos:]
        filled = have
        while n - filled >= LANES:
            out[filled:filled + LANES] = self._round()
            filled += LANES
        if filled < n:
            block = self._round()
            out[filled:] = block[:n - filled]
            self._buf = block
            self._pos = n - filled
        else:
            self._buf = np.empty(0, dtype=np.uint64)
            self._pos = 0
        return out

    def u64(self):
        return int(self.words(1)[0])

    # -- distributions -------------------------------------------------

    def uniform(self, size=None):
        """float64 in [0, 1); scalar when size is None."""
        if size is None:
            return float((self.words(1)[0] >> np.uint64(11)) * _DOUBLE_SCALE)
        n = int(np.prod(size)) if not np.isscalar(size) else int(size)
        u = (self.words(n) >> np.uint64(11)).astype(np.float64) * _DOUBLE_SCALE
        return u.reshape(size)

    def uniform_range(self, lo, hi, size=None):
        return lo + (hi - lo) * self.uniform(size)

    def normal(self, size=None):
        """Standard normals via Box-Muller; scalar when size is None."""
        if size is None:
            if self._spare_normal is not None:
                z, self._spare_normal = self._spare_normal, None
                return z
            u1, u2 = self.uniform(), self.uniform()
            r = math.sqrt(-2.0 * math.log(1.0 - u1))
            self._spare_normal = r * math.sin(2.0 * math.pi * u2)
            return r * math.cos(2.0 * math.pi * u2)
        n = int(np.prod(size)) if not np.isscalar(size) else int(size)
        half = (n + 1) // 2
        u1 = self.uniform(half)
        u2 = self.uniform(half)
        r = np.sqrt(-2.0 * np.log1p(-u1))
        z = np.concatenate([r * np.cos(2.0 * np.pi * u2),
                            r * np.sin(2.0 * np.pi * u2)])[:n]
        return z.reshape(size)

    def integers(self, upper, size=None):
        """ints in [0, upper); modulo bias < upper/2**64 is accepted."""
        if upper <= 0:
            raise ValueError("upper must be positive")
        if size is None:
            return int(self.words(1)[0] % np.uint64(upper))
        n = int(np.prod(size)) if not np.isscalar(size) else int(size)
        return (self.words(n) % np.uint64(upper)).astype(np.int64).reshape(size)

    def permutation(self, n):
        """Permutation of range(n): argsort of n fresh 64-bit keys."""
        return np.argsort(self.words(n), kind="stable")

    def sample_without_replacement(self, n, k):
        if k > n:
            raise ValueError("cannot sample %d from %d without replacement" % (k, n))
        return self.permutation(n)[:k]

    def choice(self, options):
        return options[self.integers(len(options))]

    def gamma(self, shape):
        """One Gamma(shape, 1) draw (Marsaglia-Tsang, boosted for shape<1)."""
        if shape <= 0:
            raise ValueError("shape must be positive")
        if shape < 1.0:
            x = self.gamma(shape + 1.0)
            u = self.uniform()
            while u <= 0.0:
                u = self.uniform()
            return x * u ** (1.0 / shape)
        d = shape - 1.0 / 3.0
        c = 1.0 / math.sqrt(9.0 * d)
        while True:
            x = self.normal()
            v = (1.0 + c * x) ** 3
            if v <= 0.0:
                continue
            u = self.uniform()
            if u <= 0.0:
                continue
            if math.log(u) < 0.5 * x * x + d - d * v + d * math.log(v):
                return d * v

    def beta(self, a, b):
        """One Beta(a, b) draw via two gammas."""
        x = self.gamma(a)
        y = self.gamma(b)
        return x / (x + y)
