"""Counter-based random numbers for reproducible parallel simulation.

Every random quantity in the package is a pure function of a 64-bit seed and
a small tuple of integer coordinates (replication, stream, draw).  Nothing is
carried between calls, so replications and bootstrap draws can be evaluated
in any order, on any number of workers, and still produce identical bits.

The block function is Philox4x32-10 (Salmon et al., SC'11), written with
numpy ``uint64`` arithmetic so that whole (draw x observation) grids are
generated in one vectorized call.  The counter words are laid out as::

    c0 = block index inside the draw
    c1 = draw index b
    c2 = replication index r
    c3 = stream tag (what the numbers are used for)

and the key is the seed split into its two 32-bit halves.
"""

from __future__ import annotations

import numpy as np

_MASK32 = np.uint64(0xFFFFFFFF)
_M0 = np.uint64(0xD2511F53)
_M1 = np.uint64(0xCD9E8D57)
_W0 = 0x9E3779B9
_W1 = 0xBB67AE85
_SHIFT32 = np.uint64(32)

# stream tags
STREAM_DATA = 0
STREAM_RESAMPLE = 1
STREAM_EL_RESAMPLE = 2
STREAM_ORACLE = 3


def philox4x32(counter, key, rounds: int = 10):
    """Philox4x32 block function.

    Parameters
    ----------
    counter : sequence of four integer arrays
        Counter words (each broadcastable to a common shape, values < 2**32).
    key : tuple of two ints
        Key words, each < 2**32.

    Returns
    -------
    list of four ``uint64`` arrays holding 32-bit outputs.
    """
    c0, c1, c2, c3 = np.broadcast_arrays(*[np.asarray(c, dtype=np.uint64) for c in counter])
    c0, c1, c2, c3 = c0.copy(), c1.copy(), c2.copy(), c3.copy()
    k0, k1 = int(key[0]) & 0xFFFFFFFF, int(key[1]) & 0xFFFFFFFF
    for rnd in range(rounds):
        if rnd:
            k0 = (k0 + _W0) & 0xFFFFFFFF
            k1 = (k1 + _W1) & 0xFFFFFFFF
        p0 = c0 * _M0
        p1 = c2 * _M1
        hi0, lo0 = p0 >> _SHIFT32, p0 & _MASK32
        hi1, lo1 = p1 >> _SHIFT32, p1 & _MASK32
        c0 = hi1 ^ c1 ^ np.uint64(k0)
        c1 = lo1
        c2 = hi0 ^ c3 ^ np.uint64(k1)
        c3 = lo0
    return [c0, c1, c2, c3]


def _key(seed: int) -> tuple[int, int]:
    seed = int(seed) & 0xFFFFFFFFFFFFFFFF
    return seed & 0xFFFFFFFF, seed >> 32


def _to_unit(hi, lo):
    # 53-bit double in [0, 1)
    return ((hi >> np.uint64(5)).astype(np.float64) * 67108864.0
            + (lo >> np.uint64(6)).astype(np.float64)) / 9007199254740992.0


def uniforms(seed: int, replication: int, stream: int, draws, size: int) -> np.ndarray:
    """Uniform [0, 1) doubles, one row of ``size`` values per draw index.

    ``draws`` may be an int or a 1-d array of draw indices; row ``j`` depends
    only on ``(seed, replication, stream, draws[j])`` and ``size``.
    """
    draws_arr = np.atleast_1d(np.asarray(draws, dtype=np.uint64))
    nblocks = (size + 1) // 2
    blocks = np.arange(nblocks, dtype=np.uint64)
    x0, x1, x2, x3 = philox4x32(
        (blocks[None, :], draws_arr[:, None], np.uint64(replication), np.uint64(stream)),
        _key(seed),
    )
    u = np.empty((draws_arr.size, 2 * nblocks))
    u[:, 0::2] = _to_unit(x0, x1)
    u[:, 1::2] = _to_unit(x2, x3)
    u = u[:, :size]
    return u if np.ndim(draws) else u[0]


def standard_normals(seed: int, replication: int, stream: int, draws, size: int) -> np.ndarray:
    """Standard normal draws by Box-Muller; consumes exactly ``size`` uniforms per row
    (rounded up to even) so streams stay aligned across parameter sweeps."""
    m = size + (size % 2)
    u = uniforms(seed, replication, stream, draws, m)
    u1 = 1.0 - u[..., 0::2]  # (0, 1]
    u2 = u[..., 1::2]
    rad = np.sqrt(-2.0 * np.log(u1))
    z = np.empty(u.shape)
    z[..., 0::2] = rad * np.cos(2.0 * np.pi * u2)
    z[..., 1::2] = rad * np.sin(2.0 * np.pi * u2)
    return z[..., :size]


def uniform_indices(seed: int, replication: int, stream: int, draws, n: int) -> np.ndarray:
    """``n`` iid uniform indices in ``[0, n)`` per draw."""
    u = uniforms(seed, replication, stream, draws, n)
    return np.minimum((u * n).astype(np.int64), n - 1)


def weighted_indices(seed: int, replication: int, stream: int, draws, probs: np.ndarray) -> np.ndarray:
    """``len(probs)`` iid indices drawn from the discrete law ``probs`` per draw.

    Inverse-cdf on the same uniforms as :func:`uniform_indices`, so uniform
    ``probs`` reproduce that function's law.
    """
    probs = np.asarray(probs, dtype=float)
    n = probs.size
    cdf = np.cumsum(probs)
    cdf /= cdf[-1]
    u = uniforms(seed, replication, stream, draws, n)
    return np.minimum(np.searchsorted(cdf, u, side="right"), n - 1)
