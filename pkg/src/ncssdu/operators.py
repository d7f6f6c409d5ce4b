"""Multi-coil encoding operator and its Toeplitz-embedded normal operator.

Shapes: images ``(echo, row, col)``, k-space ``(coil, echo, sample)``, coil
maps ``(coil, row, col)``. All echoes share one trajectory, so one Toeplitz
kernel serves every echo of a sample subset.
"""
from dataclasses import dataclass

import numpy as np
import scipy.fft

from . import nufft
from .acquisition import CoilMaps
from .dcf import DcfWeights, pipe_menon

__all__ = [
    "SenseOperator",
    "ToeplitzKernel",
    "sense_operator",
    "estimate_coil_maps",
    "e_forward",
    "e_adjoint_weighted",
    "build_toeplitz_kernel",
    "toeplitz_apply",
    "zeropad",
    "crop",
]


@dataclass(frozen=True, eq=False)
class SenseOperator:
    """``E`` for one sample set: NUFFT plan, coil maps and optional DCF weights."""

    plan: nufft.NufftPlan
    maps: CoilMaps
    weights: DcfWeights = None

    def __post_init__(self):
        if tuple(self.plan.grid) != tuple(self.maps.grid):
            raise ValueError(f"plan grid {self.plan.grid} != coil grid {self.maps.grid}")
        if self.weights is not None and len(self.weights) != self.plan.n_samples:
            raise ValueError("weights do not match the trajectory sample count")

    @property
    def grid(self):
        return self.plan.grid

    @property
    def coords(self):
        return self.plan.coords

    @property
    def w(self):
        return None if self.weights is None else self.weights.w


def sense_operator(coords, maps, weights=None, compute_weights=True):
    """Convenience constructor; computes Pipe-Menon weights unless given."""
    coords = np.asarray(getattr(coords, "coords", coords))
    grid = tuple(maps.grid)
    if weights is None and compute_weights:
        weights = pipe_menon(coords, grid)
    return SenseOperator(nufft.plan(grid, coords), maps, weights)


def _check_image(op, x):
    x = np.asarray(x)
    if x.ndim == 2:
        x = x[None]
    if x.shape[-2:] != tuple(op.grid):
        raise ValueError(f"image grid {x.shape[-2:]} does not match operator grid {op.grid}")
    return x


def e_forward(op, x):
    """``E x``: per echo and coil, NUFFT of ``S_c x_e``; shape ``(C, E, M)``."""
    x = _check_image(op, x)
    return nufft.forward(op.plan, op.maps.maps[:, None] * x[None])


def e_adjoint_weighted(op, y, weighted=True):
    """``E^H W y``: ``sum_c conj(S_c) NUFFT^H(W y_{c,e})``; shape ``(E, H, W)``."""
    y = np.asarray(y)
    if y.ndim != 3 or y.shape[0] != op.maps.coil_count or y.shape[-1] != op.plan.n_samples:
        raise ValueError(
            f"k-space shape {y.shape} incompatible with {op.maps.coil_count} coils "
            f"and {op.plan.n_samples} samples"
        )
    if weighted and op.weights is not None:
        y = y * op.w
    imgs = nufft.adjoint(op.plan, y)
    return np.sum(op.maps.maps[:, None].conj() * imgs, axis=0)


def estimate_coil_maps(baseline_kspace, traj, calib_radius, threshold=0.05, weights=None):
    """Coil sensitivities from the central k-space of the first echo.

    Samples with ``|k| <= calib_radius`` are gridded per coil (density
    compensated) into low-resolution coil images, which are divided by their
    root-sum-of-squares. Pixels whose RSS falls below ``threshold`` times
    the maximum are outside the support and set to zero. Each pixel's phase
    shares one global phase, referenced to the first coil.
    """
    if not calib_radius > 0:
        raise ValueError("calib_radius must be positive")
    y = np.asarray(baseline_kspace)
    if y.ndim == 3:
        y = y[:, 0]
    coords = np.asarray(getattr(traj, "coords", traj))
    grid = tuple(traj.grid)
    if weights is None:
        weights = pipe_menon(coords, grid)
    w = np.asarray(getattr(weights, "w", weights))
    keep = np.hypot(coords[:, 0], coords[:, 1]) <= calib_radius
    p = nufft.plan(grid, coords[keep])
    coil_imgs = nufft.adjoint(p, y[:, keep] * w[keep])
    rss = np.sqrt(np.sum(np.abs(coil_imgs) ** 2, axis=0))
    support = rss > threshold * rss.max()
    maps = np.where(support, coil_imgs / np.where(support, rss, 1.0), 0.0)
    # one global phase, chosen so the first coil has zero mean phase on the support
    ref = np.sum(maps[0][support])
    if abs(ref) > 0:
        maps = maps * (ref.conj() / abs(ref))
    return CoilMaps(maps, support)


@dataclass(frozen=True, eq=False)
class ToeplitzKernel:
    """Frequency-domain kernel ``M`` of shape ``(2 rows, 2 cols)``."""

    m: np.ndarray

    @property
    def grid(self):
        return (self.m.shape[0] // 2, self.m.shape[1] // 2)


def zeropad(x, grid2):
    """Embed ``x`` (..., H, W) in the top-left corner of a ``grid2`` array."""
    out = np.zeros(x.shape[:-2] + tuple(grid2), dtype=np.result_type(x, np.complex64))
    out[..., : x.shape[-2], : x.shape[-1]] = x
    return out


def crop(x, grid):
    """Adjoint of :func:`zeropad`: keep the top-left ``grid`` block."""
    return x[..., : grid[0], : grid[1]]


def build_toeplitz_kernel(coords, weights, grid, exact=False):
    """Kernel ``M = FFT( F^H W F delta )`` on the doubled grid.

    ``F`` is the NUFFT (or the direct sum when ``exact``) on a grid twice the
    image size, ``delta`` an impulse at the doubled grid's center. The
    resulting PSF is circularly shifted so its origin sits at index 0,
    which turns the padded FFT product into the linear convolution
    ``E^H W E``.
    """
    coords = np.asarray(getattr(coords, "coords", coords), dtype=np.float64).reshape(-1, 2)
    if coords.shape[0] == 0:
        raise ValueError("Toeplitz kernel needs at least one sample")
    w = np.asarray(getattr(weights, "w", weights), dtype=np.float64)
    if w.shape != (coords.shape[0],):
        raise ValueError("weights do not match the sample subset")
    rows, cols = (int(g) for g in grid)
    grid2 = (2 * rows, 2 * cols)
    delta = np.zeros(grid2, dtype=np.complex128)
    delta[rows, cols] = 1.0
    if exact:
        psf = nufft.direct_nudft_adjoint(coords, w * nufft.direct_nudft(coords, delta), grid2)
    else:
        # built once per subset, so a wider kernel buys accuracy cheaply
        p2 = nufft.plan(grid2, coords, kernel_width=8)
        psf = nufft.adjoint(p2, w * nufft.forward(p2, delta))
    m = scipy.fft.fft2(scipy.fft.ifftshift(psf))
    m.setflags(write=False)
    return ToeplitzKernel(m)


def toeplitz_apply(kernel, maps, x):
    """``E^H W E x`` as ``sum_c conj(S_c) crop(IFFT(M FFT(pad(S_c x_e))))``."""
    x = np.asarray(x)
    squeeze = x.ndim == 2
    if squeeze:
        x = x[None]
    grid = tuple(kernel.grid)
    s = maps.maps if isinstance(maps, CoilMaps) else np.asarray(maps)
    if x.shape[-2:] != grid or s.shape[-2:] != grid:
        raise ValueError(
            f"kernel grid {grid} must be half the kernel shape and match image {x.shape[-2:]}"
        )
    coil_imgs = zeropad(s[:, None] * x[None], kernel.m.shape)
    conv = scipy.fft.ifft2(kernel.m * scipy.fft.fft2(coil_imgs))
    out = np.sum(s[:, None].conj() * crop(conv, grid), axis=0)
    return out[0] if squeeze else out
