"""Gridding and CG-SENSE baselines, and the CG data-fidelity block."""
from dataclasses import dataclass, field

import numpy as np

from .errors import SolverFailure
from .operators import build_toeplitz_kernel, e_adjoint_weighted, toeplitz_apply

__all__ = ["CgReport", "gridding_recon", "cg_sense", "df_solve", "conjugate_gradient"]


@dataclass
class CgReport:
    iterations_run: int = 0
    residual_history: list = field(default_factory=list)


def _vdot(a, b):
    # per-echo inner product over the image axes
    return np.sum(a.conj() * b, axis=(-2, -1), keepdims=True)


def _safe(d):
    return np.where(d == 0, 1.0, d)


def conjugate_gradient(normal, b, x0, iterations, exact_count=True, tol=0.0):
    """CG on each echo of ``normal(x) = b`` independently.

    Echo systems are advanced together but carry their own step sizes. A
    zero residual leaves the iterate unchanged (steps of size zero) rather
    than dividing by zero. With ``exact_count`` every iteration runs;
    otherwise the loop stops once the relative residual drops below ``tol``.
    """
    x = x0.copy()
    r = b - normal(x)
    p = r.copy()
    rs = _vdot(r, r).real
    b_norm = np.sqrt(np.sum(np.abs(b) ** 2)) or 1.0
    report = CgReport(residual_history=[float(np.sqrt(rs.sum()))])
    for _ in range(iterations):
        ap = normal(p)
        pap = _vdot(p, ap).real
        alpha = rs / _safe(pap)
        x = x + alpha * p
        r = r - alpha * ap
        rs_new = _vdot(r, r).real
        res = float(np.sqrt(rs_new.sum()))
        if not np.isfinite(res):
            raise SolverFailure("conjugate gradient produced a non-finite residual")
        report.residual_history.append(res)
        report.iterations_run += 1
        p = r + (rs_new / _safe(rs)) * p
        rs = rs_new
        if not exact_count and res <= tol * b_norm:
            break
    return x, report


def gridding_recon(op, y):
    """Density-compensated adjoint ``E^H W y`` with the operator's weights."""
    return e_adjoint_weighted(op, y)


def cg_sense(op, y, iterations=30, lambda_tikhonov=None, kernel=None):
    """Tikhonov-regularised CG-SENSE on ``(E^H W E + lambda I) x = E^H W y``.

    The normal operator is applied through the Toeplitz kernel. By default
    ``lambda`` is ``1e-3`` times the mean diagonal of ``E^H W E``.
    """
    if iterations < 1:
        raise ValueError("iterations must be >= 1")
    if op.weights is None:
        raise ValueError("CG-SENSE needs density weights on the operator")
    if kernel is None:
        kernel = build_toeplitz_kernel(op.coords, op.weights, op.grid)
    if lambda_tikhonov is None:
        lambda_tikhonov = 1e-3 * mean_normal_diagonal(kernel, op.maps)
    rhs = e_adjoint_weighted(op, y)

    def normal(v):
        return toeplitz_apply(kernel, op.maps, v) + lambda_tikhonov * v

    return conjugate_gradient(normal, rhs, np.zeros_like(rhs), iterations)


def mean_normal_diagonal(kernel, maps):
    """Mean over pixels of ``diag(E^H W E) = PSF(0) sum_c |S_c|^2``."""
    psf0 = kernel.m.mean().real
    return float(psf0 * np.mean(np.sum(np.abs(maps.maps) ** 2, axis=0)))


def df_solve(kernel, maps, rhs_gridded, z, mu, iterations=15, warm_start=True):
    """Data-fidelity update ``(E^H W E + mu I)^{-1} (E^H W y + mu z)``.

    Runs exactly ``iterations`` CG steps per echo; there is no early exit.
    """
    if not mu > 0:
        raise ValueError("mu must be positive")
    z = np.asarray(z)
    b = np.asarray(rhs_gridded) + mu * z

    def normal(v):
        return toeplitz_apply(kernel, maps, v) + mu * v

    x0 = z if warm_start else np.zeros_like(b)
    x, _ = conjugate_gradient(normal, b, x0.astype(np.complex128), iterations)
    return x
