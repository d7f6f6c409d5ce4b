"""Multi-mask splitting of acquired samples and image-domain SSDU targets.

Every mask splits the acquired index set into a data-fidelity part
``theta`` and a held-out loss part ``lambda``. The loss compares the network
output mapped through the held-out normal operator ``E_L^H W_L E_L`` with
the density-compensated gridding of the held-out samples ``E_L^H W_L y_L``,
so no NUFFT is needed inside training.
"""
from dataclasses import dataclass

import numpy as np

from .dcf import weights_for_subset
from .errors import UndefinedLossError
from .operators import (
    SenseOperator,
    build_toeplitz_kernel,
    e_adjoint_weighted,
    toeplitz_apply,
)
from . import nufft

__all__ = ["SsduMaskSet", "make_masks", "grid_target", "mixed_loss", "ssdu_loss",
           "image_domain_loss", "subset_operator"]


@dataclass(frozen=True, eq=False)
class SsduMaskSet:
    omega_size: int
    masks: tuple  # ((theta_indices, lambda_indices), ...)
    center_retained: int
    theta_fraction: float
    seed: int = 0

    def __len__(self):
        return len(self.masks)

    def theta(self, j):
        return self.masks[j][0]

    def lam(self, j):
        return self.masks[j][1]


def make_masks(omega_size, j_count=7, theta_fraction=0.6, center_retained=32, seed=0):
    """Draw ``j_count`` independent theta/lambda splits of ``range(omega_size)``.

    The first ``center_retained`` readout indices (the k-space center of a
    spiral-out arm) always go to theta; the rest of theta is a uniform
    random draw without replacement so that ``|theta| = round(fraction * omega)``.
    Index arrays are returned sorted.
    """
    omega_size = int(omega_size)
    if j_count < 1:
        raise ValueError("j_count must be >= 1")
    if not 0 < theta_fraction < 1:
        raise ValueError("theta_fraction must lie strictly between 0 and 1")
    n_theta = int(round(theta_fraction * omega_size))
    if center_retained < 0 or center_retained > n_theta:
        raise ValueError(
            f"center_retained={center_retained} exceeds theta size {n_theta}"
        )
    if n_theta >= omega_size:
        raise ValueError("split leaves lambda empty; the loss would be undefined")
    rng = np.random.Generator(np.random.Philox(key=int(seed)))
    pool = np.arange(center_retained, omega_size)
    masks = []
    for _ in range(j_count):
        pick = rng.choice(pool, size=n_theta - center_retained, replace=False)
        in_theta = np.zeros(omega_size, dtype=bool)
        in_theta[:center_retained] = True
        in_theta[pick] = True
        masks.append((np.flatnonzero(in_theta), np.flatnonzero(~in_theta)))
    return SsduMaskSet(omega_size, tuple(masks), int(center_retained), float(theta_fraction), int(seed))


def subset_operator(traj, subset_indices, maps, weights=None):
    """SENSE operator on a sample subset with its own density weights."""
    idx = np.asarray(subset_indices, dtype=np.int64)
    if idx.size == 0:
        raise ValueError("subset is empty")
    if weights is None:
        weights = weights_for_subset(traj, idx)
    return SenseOperator(nufft.plan(traj.grid, traj.coords[idx]), maps, weights)


def grid_target(traj, subset_indices, y_subset, maps, weights=None):
    """Coil-combined density-compensated gridding of one sample subset.

    ``y_subset`` has shape ``(coil, echo, len(subset))``.
    """
    op = subset_operator(traj, subset_indices, maps, weights)
    return e_adjoint_weighted(op, y_subset)


def mixed_loss(a, b):
    """Normalised l2 plus normalised l1 distance of ``a`` from target ``b``.

    Works on numpy arrays and torch tensors alike.
    """
    b_l2 = (abs(b) ** 2).sum() ** 0.5
    b_l1 = abs(b).sum()
    if float(b_l2) == 0.0:
        raise UndefinedLossError("self-supervision target is identically zero")
    d = b - a
    return (abs(d) ** 2).sum() ** 0.5 / b_l2 + abs(d).sum() / b_l1


def image_domain_loss(recon, lambda_kernel, maps, target):
    """Loss between ``E_L^H W_L E_L recon`` and a precomputed gridded target.

    ``lambda_kernel`` is the Toeplitz kernel of the held-out subset built
    with that subset's own density weights.
    """
    a = toeplitz_apply(lambda_kernel, maps, recon)
    return float(mixed_loss(a, np.asarray(target)))


def ssdu_loss(recon, traj, lambda_indices, y_lambda, maps, weights=None):
    """Held-out loss of ``recon`` against samples ``y_lambda`` at ``lambda_indices``.

    Recomputes the held-out density weights, Toeplitz kernel and gridded
    target; training code caches these instead.
    """
    idx = np.asarray(lambda_indices, dtype=np.int64)
    if weights is None:
        weights = weights_for_subset(traj, idx)
    kernel = build_toeplitz_kernel(traj.coords[idx], weights, traj.grid)
    target = grid_target(traj, idx, y_lambda, maps, weights)
    return image_domain_loss(recon, kernel, maps, target)
