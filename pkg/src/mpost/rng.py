"""Counter-based random streams.

Each chain owns a 64-bit key derived from ``(master_seed, chain, retry)``.
The variate used by chain ``b`` at step ``N`` is a pure function of
``(key_b, N, slot)``: it is the SplitMix64 output at position
``N * 2**16 + slot`` of the stream started at ``key_b``.  Nothing depends on
how many chains are evaluated together or in which order, so splitting a
batch across threads cannot change the draws.

:class:`StepDraws` exposes the subset of the ``numpy.random.Generator``
interface the model families use, which lets the same family code run with a
plain ``Generator`` in tests.
"""
from __future__ import annotations

import numpy as np
from scipy import special

MASK64 = (1 << 64) - 1
GOLDEN = 0x9E3779B97F4A7C15
_M1 = np.uint64(0xBF58476D1CE4E5B9)
_M2 = np.uint64(0x94D049BB133111EB)
_S30, _S27, _S31, _S11 = (np.uint64(s) for s in (30, 27, 31, 11))
SLOT_BITS = 16
_TWO_M53 = 2.0 ** -53

# step index reserved for the Gaussian tail term of hybrid draws; real
# imputation steps are always >= 2
NOISE_STEP = 0


def _mix_inplace(z: np.ndarray) -> np.ndarray:
    t = np.empty_like(z)
    np.right_shift(z, _S30, out=t)
    np.bitwise_xor(z, t, out=z)
    np.multiply(z, _M1, out=z)
    np.right_shift(z, _S27, out=t)
    np.bitwise_xor(z, t, out=z)
    np.multiply(z, _M2, out=z)
    np.right_shift(z, _S31, out=t)
    np.bitwise_xor(z, t, out=z)
    return z


def mix64(z) -> np.ndarray:
    """SplitMix64 finaliser, vectorised over uint64 arrays."""
    return _mix_inplace(np.array(z, dtype=np.uint64, ndmin=1))


def as_seed(seed) -> int:
    return int(seed) & MASK64


def derive_seed(master_seed, *path) -> int:
    """Deterministic 64-bit sub-seed for e.g. a coverage repeat."""
    z = as_seed(master_seed)
    for p in path:
        z = int(mix64((z + (int(p) + 1) * GOLDEN) & MASK64)[0])
    return z


def chain_keys(seeds, chains, retry: int = 0) -> np.ndarray:
    """Per-chain stream keys.

    ``seeds`` may be a scalar or an array aligned with ``chains``.
    """
    chains = np.asarray(chains, dtype=np.uint64)
    seeds = np.broadcast_to(np.asarray(
        [as_seed(s) for s in np.atleast_1d(seeds).tolist()], dtype=np.uint64),
        chains.shape)
    with np.errstate(over="ignore"):
        base = mix64(seeds + np.uint64(GOLDEN))
        ch = mix64((chains + np.uint64(1)) * np.uint64(GOLDEN))
        keys = mix64(base ^ ch)
        if retry:
            keys = mix64(keys ^ mix64(np.uint64(retry) * _M2))
    return keys.reshape(chains.shape)


class StepDraws:
    """Generator-like source of variates for a batch of chains at one step.

    Every sampling call must request a ``size`` whose leading dimension is the
    number of chains; successive calls consume successive slots.
    """

    def __init__(self, keys: np.ndarray, step: int):
        self.keys = keys
        self.step = int(step)
        self._slot = 0

    def _size(self, size):
        if size is None:
            return (len(self.keys),)
        size = tuple(np.atleast_1d(size).tolist())
        if not size or size[0] != len(self.keys):
            raise ValueError(f"size {size} must lead with the chain count "
                             f"{len(self.keys)}")
        return size

    def random(self, size=None) -> np.ndarray:
        size = self._size(size)
        k = int(np.prod(size[1:], dtype=np.int64))
        if self._slot + k > (1 << SLOT_BITS):
            raise ValueError("too many variates requested in one step")
        start = (self.step << SLOT_BITS) + self._slot
        self._slot += k
        offsets = np.array([((start + j) * GOLDEN) & MASK64 for j in range(k)],
                           dtype=np.uint64)
        with np.errstate(over="ignore"):
            z = self.keys[:, None] + offsets[None, :]
        _mix_inplace(z)
        np.right_shift(z, _S11, out=z)
        u = z.astype(np.float64)
        u += 0.5
        u *= _TWO_M53
        return u.reshape(size)

    def standard_normal(self, size=None) -> np.ndarray:
        return special.ndtri(self.random(size))

    def standard_exponential(self, size=None) -> np.ndarray:
        return -np.log(self.random(size))

    def standard_t(self, df, size=None) -> np.ndarray:
        return special.stdtrit(df, self.random(size))

    def integers(self, low, high=None, size=None) -> np.ndarray:
        if high is None:
            low, high = 0, low
        u = self.random(size)
        return (low + np.floor(u * (high - low))).astype(np.int64)


class ChainStreams:
    """Keys for a set of chains; :meth:`at` hands out per-step draws."""

    def __init__(self, seed, chains, retry: int = 0, keys=None):
        self.chains = np.asarray(chains, dtype=np.int64)
        self.retry = retry
        self.keys = chain_keys(seed, self.chains, retry) if keys is None else keys

    def at(self, step: int) -> StepDraws:
        return StepDraws(self.keys, step)
