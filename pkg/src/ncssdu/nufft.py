"""Non-uniform FFT by oversampled Kaiser-Bessel gridding.

Conventions
-----------
Images are indexed ``(row, col)`` with pixel coordinates measured from the
center pixel ``(rows // 2, cols // 2)``. A trajectory holds ``(kx, ky)`` pairs
in radians per pixel; ``kx`` pairs with columns and ``ky`` with rows. The
forward transform evaluates

    s_m = sum_r x(r) exp(-i (kx_m * r_col + ky_m * r_row))

and the adjoint is its conjugate transpose. ``direct_nudft`` evaluates the
same sums exactly and is kept as a verification oracle.
"""
from dataclasses import dataclass
import math

import numpy as np
import scipy.fft
from scipy.special import i0

from . import _gridding

__all__ = [
    "NufftPlan",
    "kb_beta",
    "kb_kernel",
    "kb_kernel_ft",
    "plan",
    "forward",
    "adjoint",
    "direct_nudft",
    "direct_nudft_adjoint",
    "DIRECT_MAX_PIXELS",
]

DIRECT_MAX_PIXELS = 64 * 64
TABLE_PER_UNIT = 2**12


def kb_beta(width, oversampling):
    """Kaiser-Bessel shape parameter for a given width and oversampling ratio.

    Uses the closed form ``pi * sqrt((W/a)^2 (a - 1/2)^2 - 0.8)`` of Beatty et
    al., which minimises aliasing energy for the pair ``(W, a)``.
    """
    return math.pi * math.sqrt((width / oversampling) ** 2 * (oversampling - 0.5) ** 2 - 0.8)


def kb_kernel(t, width, beta):
    """Kaiser-Bessel window at distance ``t`` (grid units), normalised to 1 at 0."""
    t = np.asarray(t, dtype=np.float64)
    arg = 1.0 - (2.0 * t / width) ** 2
    out = np.zeros_like(t)
    inside = arg >= 0
    out[inside] = i0(beta * np.sqrt(arg[inside])) / i0(beta)
    return out


def kb_kernel_ft(nu, width, beta):
    """Continuous Fourier transform of :func:`kb_kernel` at frequency ``nu``.

    ``nu`` is in cycles per grid unit; the transform of a window supported on
    ``|t| <= W/2`` is ``W sinh(z) / z`` with ``z = sqrt(beta^2 - (pi W nu)^2)``
    (``sin`` once the square root turns imaginary).
    """
    nu = np.asarray(nu, dtype=np.float64)
    z2 = beta**2 - (math.pi * width * nu) ** 2
    out = np.empty_like(nu)
    pos = z2 > 1e-12
    neg = z2 < -1e-12
    mid = ~(pos | neg)
    z = np.sqrt(np.abs(z2))
    out[pos] = np.sinh(z[pos]) / z[pos]
    out[neg] = np.sin(z[neg]) / z[neg]
    out[mid] = 1.0
    return width * out / i0(beta)


def _even_ceil(x):
    n = int(math.ceil(x - 1e-9))
    return n + (n % 2)


@dataclass(frozen=True, eq=False)
class NufftPlan:
    """Precomputed state for one (grid, trajectory) pair.

    Attributes
    ----------
    grid : tuple of int
        Image shape ``(rows, cols)``.
    oversampled : tuple of int
        Shape of the intermediate Cartesian grid.
    oversampling, kernel_width, kernel_beta
        Kernel design parameters.
    coords : ndarray, shape (M, 2)
        Sample locations ``(kx, ky)`` in radians per pixel.
    apodization : ndarray, shape (rows, cols)
        Kernel transform over the image; the forward transform divides by it.
    table : ndarray
        Kernel lookup table sampled every ``1 / TABLE_PER_UNIT`` grid units.
    idx, wts : ndarray, shape (M, W*W)
        Flat oversampled-grid neighbour indices and kernel weights per sample.
    """

    grid: tuple
    oversampled: tuple
    oversampling: float
    kernel_width: int
    kernel_beta: float
    coords: np.ndarray
    apodization: np.ndarray
    table: np.ndarray
    idx: np.ndarray
    wts: np.ndarray

    @property
    def n_samples(self):
        return self.coords.shape[0]


def _table_lookup(table, dist):
    pos = np.abs(dist) * TABLE_PER_UNIT
    lo = np.floor(pos).astype(np.int64)
    frac = pos - lo
    lo = np.minimum(lo, table.size - 2)
    return table[lo] * (1.0 - frac) + table[lo + 1] * frac


def _neighbourhood(u, n_over, width, table):
    # u in oversampled grid units; j0 is the first of `width` integer neighbours
    j0 = np.floor(u - width / 2.0).astype(np.int64) + 1
    offs = j0[:, None] + np.arange(width)[None, :]
    w = _table_lookup(table, u[:, None] - offs)
    return np.mod(offs, n_over), w


def plan(grid, traj, oversampling=2.0, kernel_width=6, kernel_beta=None):
    """Precompute the kernel table, deapodization and sample neighbourhoods.

    Parameters
    ----------
    grid : tuple of int
        Image shape ``(rows, cols)``.
    traj : Trajectory or array_like, shape (M, 2)
        Sample locations in radians per pixel.
    oversampling : float
        Ratio of oversampled to image grid size, in ``[1.25, 3]``.
    kernel_width : int
        Kernel support in oversampled grid units, in ``[3, 8]``.
    kernel_beta : float, optional
        Kaiser-Bessel shape; defaults to :func:`kb_beta`.
    """
    rows, cols = (int(g) for g in grid)
    if rows < 1 or cols < 1:
        raise ValueError(f"grid dimensions must be positive, got {grid}")
    if not 1.25 <= oversampling <= 3.0:
        raise ValueError(f"oversampling must lie in [1.25, 3], got {oversampling}")
    if not 3 <= int(kernel_width) <= 8 or kernel_width != int(kernel_width):
        raise ValueError(f"kernel_width must be an integer in [3, 8], got {kernel_width}")
    kernel_width = int(kernel_width)
    if kernel_beta is None:
        kernel_beta = kb_beta(kernel_width, oversampling)

    coords = np.array(getattr(traj, "coords", traj), dtype=np.float64).reshape(-1, 2)
    if not np.all(np.isfinite(coords)):
        raise ValueError("trajectory contains non-finite coordinates")
    coords.setflags(write=False)

    ky_over, kx_over = _even_ceil(oversampling * rows), _even_ceil(oversampling * cols)

    n_table = int(math.ceil(kernel_width / 2 * TABLE_PER_UNIT)) + 2
    table = kb_kernel(np.arange(n_table) / TABLE_PER_UNIT, kernel_width, kernel_beta)
    table.setflags(write=False)

    r_row = np.arange(rows) - rows // 2
    r_col = np.arange(cols) - cols // 2
    apod = np.outer(
        kb_kernel_ft(r_row / ky_over, kernel_width, kernel_beta),
        kb_kernel_ft(r_col / kx_over, kernel_width, kernel_beta),
    )
    apod.setflags(write=False)

    ux = coords[:, 0] * kx_over / (2 * np.pi)
    uy = coords[:, 1] * ky_over / (2 * np.pi)
    ix, wx = _neighbourhood(ux, kx_over, kernel_width, table)
    iy, wy = _neighbourhood(uy, ky_over, kernel_width, table)
    m = coords.shape[0]
    idx = (iy[:, :, None] * kx_over + ix[:, None, :]).reshape(m, -1)
    wts = (wy[:, :, None] * wx[:, None, :]).reshape(m, -1)
    idx = np.ascontiguousarray(idx, dtype=np.int64)
    wts = np.ascontiguousarray(wts)
    idx.setflags(write=False)
    wts.setflags(write=False)

    return NufftPlan(
        grid=(rows, cols),
        oversampled=(ky_over, kx_over),
        oversampling=float(oversampling),
        kernel_width=kernel_width,
        kernel_beta=float(kernel_beta),
        coords=coords,
        apodization=apod,
        table=table,
        idx=idx,
        wts=wts,
    )


def _pad_indices(n, n_over):
    # image index i holds coordinate i - n//2, stored at (i - n//2) mod n_over
    return np.mod(np.arange(n) - n // 2, n_over)


def forward(p, img):
    """Image(s) to non-uniform samples.

    ``img`` has shape ``(..., rows, cols)``; the result has shape ``(..., M)``.
    """
    img = np.asarray(img)
    if img.shape[-2:] != p.grid:
        raise ValueError(f"image shape {img.shape[-2:]} does not match plan grid {p.grid}")
    lead = img.shape[:-2]
    batch = img.reshape((-1,) + p.grid) / p.apodization
    ky_over, kx_over = p.oversampled
    padded = np.zeros((batch.shape[0], ky_over, kx_over), dtype=np.complex128)
    rr = _pad_indices(p.grid[0], ky_over)
    cc = _pad_indices(p.grid[1], kx_over)
    padded[:, rr[:, None], cc[None, :]] = batch
    spectrum = scipy.fft.fft2(padded).reshape(batch.shape[0], -1)
    out = _gridding.interp(spectrum, p.idx, p.wts)
    return out.reshape(lead + (p.n_samples,))


def adjoint(p, samples):
    """Non-uniform samples to image(s); exact adjoint of :func:`forward`.

    ``samples`` has shape ``(..., M)``; the result has shape ``(..., rows, cols)``.
    """
    samples = np.asarray(samples)
    if samples.shape[-1] != p.n_samples:
        raise ValueError(
            f"sample count {samples.shape[-1]} does not match plan ({p.n_samples})"
        )
    lead = samples.shape[:-1]
    batch = samples.reshape(-1, p.n_samples)
    ky_over, kx_over = p.oversampled
    gridded = _gridding.spread(batch, p.idx, p.wts, ky_over * kx_over)
    gridded = gridded.reshape(-1, ky_over, kx_over)
    img = scipy.fft.ifft2(gridded) * (ky_over * kx_over)
    rr = _pad_indices(p.grid[0], ky_over)
    cc = _pad_indices(p.grid[1], kx_over)
    img = img[:, rr[:, None], cc[None, :]] / p.apodization
    return img.reshape(lead + p.grid)


def _phase_matrix(coords, grid):
    rows, cols = grid
    if rows * cols > DIRECT_MAX_PIXELS:
        raise ValueError(
            f"direct NUDFT refused for grid {grid}: limited to {DIRECT_MAX_PIXELS} pixels"
        )
    coords = np.asarray(getattr(coords, "coords", coords), dtype=np.float64).reshape(-1, 2)
    r_row = np.arange(rows) - rows // 2
    r_col = np.arange(cols) - cols // 2
    phase = (
        coords[:, 0, None, None] * r_col[None, None, :]
        + coords[:, 1, None, None] * r_row[None, :, None]
    )
    return np.exp(-1j * phase).reshape(coords.shape[0], rows * cols)


def direct_nudft(traj, img):
    """Exact O(N M) forward sum; ``img`` shape ``(..., rows, cols)``."""
    img = np.asarray(img)
    mat = _phase_matrix(traj, img.shape[-2:])
    lead = img.shape[:-2]
    flat = img.reshape(-1, img.shape[-2] * img.shape[-1])
    return (flat @ mat.T).reshape(lead + (mat.shape[0],))


def direct_nudft_adjoint(traj, samples, grid):
    """Exact O(N M) adjoint sum; ``samples`` shape ``(..., M)``."""
    samples = np.asarray(samples)
    mat = _phase_matrix(traj, tuple(grid))
    lead = samples.shape[:-1]
    flat = samples.reshape(-1, mat.shape[0])
    return (flat @ mat.conj()).reshape(lead + tuple(grid))
