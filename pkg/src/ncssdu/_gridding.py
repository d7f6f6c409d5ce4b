"""Gridding gather/scatter with a compiled core and a numpy fallback.

The compiled module ``_gridding_ext`` is used when it was built at install
time. Set ``NCSSDU_PURE_PYTHON=1`` to force the numpy path.
"""
import os

import numpy as np

__all__ = ["interp", "spread", "BACKEND", "interp_py", "spread_py"]


def interp_py(grid, idx, wts):
    """Numpy gather: ``out[b, m] = sum_k grid[b, idx[m, k]] * wts[m, k]``."""
    return np.einsum("bmk,mk->bm", grid[:, idx], wts)


def spread_py(samples, idx, wts, n_grid):
    """Numpy scatter, accumulated in sample-major order via ``bincount``."""
    flat = idx.ravel()
    out = np.empty((samples.shape[0], n_grid), dtype=np.complex128)
    for b in range(samples.shape[0]):
        contrib = samples[b][:, None] * wts
        out[b] = np.bincount(flat, weights=contrib.real.ravel(), minlength=n_grid)
        out[b] += 1j * np.bincount(flat, weights=contrib.imag.ravel(), minlength=n_grid)
    return out


if os.environ.get("NCSSDU_PURE_PYTHON") == "1":
    _ext = None
else:
    try:
        from . import _gridding_ext as _ext
    except ImportError:
        _ext = None

if _ext is not None:
    BACKEND = "cython"

    def interp(grid, idx, wts):
        return _ext.interp(np.ascontiguousarray(grid, dtype=np.complex128), idx, wts)

    def spread(samples, idx, wts, n_grid):
        return _ext.spread(
            np.ascontiguousarray(samples, dtype=np.complex128), idx, wts, n_grid
        )

else:
    BACKEND = "python"
    interp = interp_py
    spread = spread_py
