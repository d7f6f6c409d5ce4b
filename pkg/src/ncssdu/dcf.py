"""Iterative (Pipe-Menon) density compensation for arbitrary sample sets."""
from dataclasses import dataclass
import warnings

import numpy as np

from . import _gridding, nufft

__all__ = ["DcfWeights", "pipe_menon", "weights_for_subset", "fixed_point_residual", "dc_gain"]

_CLAMP = 1e-12


@dataclass(frozen=True, eq=False)
class DcfWeights:
    """Per-sample density weights, normalised so the gridded PSF has unit DC."""

    w: np.ndarray
    clamped: bool = False

    def __len__(self):
        return self.w.size


def _grid_degrid(p, w):
    n_grid = p.oversampled[0] * p.oversampled[1]
    g = _gridding.spread(w[None].astype(np.complex128), p.idx, p.wts, n_grid)
    return _gridding.interp(g, p.idx, p.wts)[0].real


def pipe_menon(coords, grid, iterations=30, oversampling=2.0, kernel_width=6):
    """Density weights by the fixed-point iteration ``w <- w / (G w)``.

    ``G`` spreads weights onto the oversampled grid with the NUFFT kernel and
    interpolates them back (no deapodization). The result is scaled so the
    gridded PSF has unit DC gain: the weighted adjoint of the forward
    transform of a constant unit image equals 1 at the center pixel.
    """
    if iterations < 1:
        raise ValueError("iterations must be >= 1")
    coords = np.asarray(getattr(coords, "coords", coords), dtype=np.float64).reshape(-1, 2)
    if coords.shape[0] == 0:
        raise ValueError("cannot compute density weights for an empty sample set")
    p = nufft.plan(grid, coords, oversampling, kernel_width)
    w = np.ones(coords.shape[0])
    clamped = False
    for _ in range(iterations):
        d = _grid_degrid(p, w)
        small = d < _CLAMP
        if np.any(small):
            clamped = True
            d = np.where(small, _CLAMP, d)
        w = w / d
    if clamped:
        warnings.warn("density compensation clamped near-zero denominators", RuntimeWarning)
    w = w / dc_gain(coords, grid, w)
    w.setflags(write=False)
    return DcfWeights(w, clamped)


def dc_gain(coords, grid, w):
    """``sum_m w_m D(k_m)`` with ``D`` the transform of the all-ones image.

    ``D`` factors into per-axis Dirichlet sums over the pixel coordinates.
    """
    coords = np.asarray(coords, dtype=np.float64).reshape(-1, 2)
    rows, cols = grid
    r_col = np.arange(cols) - cols // 2
    r_row = np.arange(rows) - rows // 2
    dx = np.exp(-1j * coords[:, :1] * r_col[None]).sum(axis=1)
    dy = np.exp(-1j * coords[:, 1:] * r_row[None]).sum(axis=1)
    return float(np.real(np.sum(w * dx * dy)))


def weights_for_subset(parent, subset_indices, iterations=30):
    """Pipe-Menon weights recomputed on exactly the subset's locations."""
    idx = np.asarray(subset_indices, dtype=np.int64)
    if idx.size == 0:
        raise ValueError("subset is empty")
    if idx.min() < 0 or idx.max() >= parent.n_samples:
        raise ValueError("subset indices out of range")
    return pipe_menon(parent.coords[idx], parent.grid, iterations)


def fixed_point_residual(coords, grid, w, oversampling=2.0, kernel_width=6):
    """Scale-free residual ``||w * (G w) / c - w|| / ||w||``.

    ``c`` is the least-squares scale of ``w * (G w)`` onto ``w``; it absorbs
    the output normalisation so the residual measures only how far ``G w``
    is from constant.
    """
    w = np.asarray(getattr(w, "w", w), dtype=np.float64)
    coords = np.asarray(getattr(coords, "coords", coords), dtype=np.float64).reshape(-1, 2)
    p = nufft.plan(grid, coords, oversampling, kernel_width)
    v = w * _grid_degrid(p, w)
    c = np.dot(v, w) / np.dot(w, w)
    return float(np.linalg.norm(v / c - w) / np.linalg.norm(w))
