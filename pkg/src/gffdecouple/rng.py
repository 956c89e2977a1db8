"""Counter-based random streams.

Every random number is a pure function of ``(master_seed, stream_id,
draw_index)``: the Philox key is ``(master_seed, stream_id)`` and draw ``i``
owns a fixed block of Philox counters. Output therefore does not depend on
how draws are batched or distributed over workers.

Standard normals use the inverse CDF (``scipy.special.ndtri``, the Cephes
rational approximation) applied to 53-bit uniforms on the open interval
(0, 1), which keeps the mapping deterministic and free of rejection loops.
"""
from __future__ import annotations

import hashlib
from concurrent.futures import ThreadPoolExecutor

import numpy as np
from numpy.random import Philox
from scipy.special import ndtri

_MASK64 = (1 << 64) - 1


def stream_id(*labels) -> int:
    """Stable 64-bit stream id for a tuple of labels (operation, replica, ...)."""
    h = hashlib.blake2b(repr(labels).encode(), digest_size=8)
    return int.from_bytes(h.digest(), "little")


def _raw(seed: int, stream: int, start: int, n_draws: int, dim: int) -> np.ndarray:
    blocks = -(-dim // 4)
    bg = Philox(key=[seed & _MASK64, stream & _MASK64], counter=start * blocks)
    raw = bg.random_raw(n_draws * blocks * 4).reshape(n_draws, blocks * 4)
    return raw[:, :dim]


def uniforms(seed: int, stream: int, start: int, n_draws: int, dim: int) -> np.ndarray:
    """Uniforms on (0, 1) of shape (n_draws, dim) for draws start..start+n-1."""
    raw = _raw(seed, stream, start, n_draws, dim)
    return ((raw >> np.uint64(11)).astype(np.float64) + 0.5) * 2.0 ** -53


def normals(seed: int, stream: int, start: int, n_draws: int, dim: int,
            workers: int = 1, chunk: int | None = None) -> np.ndarray:
    """Standard normals of shape (n_draws, dim); identical for any ``workers``."""
    if workers <= 1 or n_draws < 2:
        return ndtri(uniforms(seed, stream, start, n_draws, dim))
    chunk = chunk or max(1, -(-n_draws // (4 * workers)))
    out = np.empty((n_draws, dim))

    def fill(lo):
        hi = min(n_draws, lo + chunk)
        out[lo:hi] = ndtri(uniforms(seed, stream, start + lo, hi - lo, dim))

    with ThreadPoolExecutor(max_workers=workers) as ex:
        list(ex.map(fill, range(0, n_draws, chunk)))
    return out
