"""Counter-based random streams (Philox4x32-10), vectorised with numpy.

Every variate is a pure function of ``(seed, stream, index, slot)``, so a
simulation indexed by ``index`` sees the same numbers whether it runs alone,
in a batch, or on another worker thread.
"""

from __future__ import annotations

import numpy as np
from scipy.special import ndtri

_M0 = np.uint64(0xD2511F53)
_M1 = np.uint64(0xCD9E8D57)
_W0 = 0x9E3779B9
_W1 = 0xBB67AE85
_MASK = np.uint64(0xFFFFFFFF)
_SHIFT = np.uint64(32)

# stream identifiers; one per purpose so draws never overlap
PARAMS = 1
TRIALS = 2
SAMPLER = 3
BRIDGE = 4
SYNTH = 5
PERMUTE = 6
PARAMS_Z = 7


def philox4x32(counter, key):
    """Apply ten Philox rounds.

    Parameters
    ----------
    counter : array_like of uint, shape (..., 4)
        32-bit counter words.
    key : array_like of uint, shape (2,) or (..., 2)
        32-bit key words.

    Returns
    -------
    np.ndarray of uint64, shape (..., 4)
        Output words, each in [0, 2**32).
    """
    ctr = np.asarray(counter, dtype=np.uint64) & _MASK
    key = np.asarray(key, dtype=np.uint64) & _MASK
    c0, c1, c2, c3 = (ctr[..., i] for i in range(4))
    k0 = key[..., 0].astype(np.uint64)
    k1 = key[..., 1].astype(np.uint64)
    for r in range(10):
        if r:
            k0 = (k0 + np.uint64(_W0)) & _MASK
            k1 = (k1 + np.uint64(_W1)) & _MASK
        p0 = _M0 * c0
        p1 = _M1 * c2
        c0, c1, c2, c3 = (
            (p1 >> _SHIFT) ^ c1 ^ k0,
            p1 & _MASK,
            (p0 >> _SHIFT) ^ c3 ^ k1,
            p0 & _MASK,
        )
    return np.stack([c0, c1, c2, c3], axis=-1)


def _key(seed: int) -> np.ndarray:
    seed = int(seed) & 0xFFFFFFFFFFFFFFFF
    return np.array([seed & 0xFFFFFFFF, seed >> 32], dtype=np.uint64)


def uniforms(seed: int, stream: int, index, n_slots: int) -> np.ndarray:
    """Open-interval uniforms for each ``index``.

    Returns an array of shape ``(len(index), n_slots)``; row ``i`` depends
    only on ``(seed, stream, index[i])``, and slot ``j`` of a row is the same
    for every ``n_slots > j``.
    """
    idx = np.atleast_1d(np.asarray(index, dtype=np.uint64))
    n_blocks = (n_slots + 1) // 2
    ctr = np.empty((idx.size, n_blocks, 4), dtype=np.uint64)
    ctr[..., 0] = np.arange(n_blocks, dtype=np.uint64)[None, :]
    ctr[..., 1] = (idx & _MASK)[:, None]
    ctr[..., 2] = (idx >> _SHIFT)[:, None]
    ctr[..., 3] = np.uint64(stream)
    words = philox4x32(ctr, _key(seed))
    hi = words[..., 0::2] >> np.uint64(5)  # 27 bits
    lo = words[..., 1::2] >> np.uint64(6)  # 26 bits
    mant = (hi * np.uint64(1 << 26) + lo).astype(np.float64)
    u = (mant + 0.5) / 9007199254740992.0
    return u.reshape(idx.size, 2 * n_blocks)[:, :n_slots]


def normals(seed: int, stream: int, index, n_slots: int) -> np.ndarray:
    """Standard normals by inversion of :func:`uniforms`."""
    return ndtri(uniforms(seed, stream, index, n_slots))


def generator(seed: int, *path: int) -> np.random.Generator:
    """A numpy Generator for sequential use, keyed by ``(seed, *path)``."""
    ss = np.random.SeedSequence([int(seed) & 0xFFFFFFFFFFFFFFFF, *map(int, path)])
    return np.random.Generator(np.random.Philox(ss))
