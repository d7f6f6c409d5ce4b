"""Multi-mask self-supervised training and inference for the unrolled network."""
from dataclasses import asdict, dataclass, field
import hashlib
import logging
import math
import os

import numpy as np
import torch

from . import datastore
from .acquisition import CoilMaps, Trajectory
from .dcf import pipe_menon, weights_for_subset
from .model import (
    COMPLEX_DTYPES,
    DfContext,
    ModelParams,
    init_params,
    loss_on_lambda,
    unrolled_forward,
)
from .operators import SenseOperator, build_toeplitz_kernel, e_adjoint_weighted
from .ssdu import make_masks
from . import nufft

__all__ = ["TrainConfig", "Sample", "PreparedSample", "prepare_sample", "train", "reconstruct",
           "Reconstructor", "TrainingDiverged"]

log = logging.getLogger(__name__)


class TrainingDiverged(RuntimeError):
    """Loss became non-finite; ``snapshot`` holds the last finite state."""

    def __init__(self, message, snapshot):
        super().__init__(message)
        self.snapshot = snapshot


@dataclass
class TrainConfig:
    learning_rate: float = 5e-4
    epochs: int = 100
    mask_count: int = 7
    theta_fraction: float = 0.6
    center_retained: int = 32
    seed: int = 0
    optimizer: str = "adam"  # "adam" or "sgd"
    unroll_count: int = 10
    cg_iterations: int = 15
    depth: int = 5
    width: int = 32
    mu_init: float = 0.05
    precision: str = "single"

    def __post_init__(self):
        if self.learning_rate < 0:
            raise ValueError("learning_rate must be non-negative")
        if not 0 < self.theta_fraction < 1:
            raise ValueError("theta_fraction must lie in (0, 1)")
        if self.mask_count < 1 or self.epochs < 0:
            raise ValueError("mask_count must be >= 1 and epochs >= 0")
        if self.optimizer not in ("adam", "sgd"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")
        if self.precision not in COMPLEX_DTYPES:
            raise ValueError(f"unknown precision {self.precision!r}")


@dataclass(eq=False)
class Sample:
    """One slice: k-space ``(coil, echo, sample)``, its trajectory and coil maps."""

    kspace: np.ndarray
    traj: Trajectory
    maps: CoilMaps


@dataclass(eq=False)
class PreparedSample:
    """Per-mask cached quantities for one slice.

    ``z_theta[j]`` is both the network input and the data-fidelity right-hand
    side ``E_T^H W_T y_T``; ``m_theta[j]``/``m_lambda[j]`` are Toeplitz kernels
    and ``target[j]`` the gridded held-out data ``E_L^H W_L y_L``.
    """

    maps: np.ndarray
    z_theta: list = field(default_factory=list)
    m_theta: list = field(default_factory=list)
    m_lambda: list = field(default_factory=list)
    target: list = field(default_factory=list)


def _subset_terms(sample, idx):
    w = weights_for_subset(sample.traj, idx)
    op = SenseOperator(nufft.plan(sample.traj.grid, sample.traj.coords[idx]), sample.maps, w)
    grid_img = e_adjoint_weighted(op, sample.kspace[..., idx])
    kernel = build_toeplitz_kernel(sample.traj.coords[idx], w, sample.traj.grid)
    return grid_img, kernel.m


# bump when the precomputation itself changes so stale caches are ignored
_PREP_VERSION = b"prep-2"


def _cache_key(sample, masks):
    h = hashlib.sha256(_PREP_VERSION)
    for a in (sample.kspace, sample.traj.coords, sample.maps.maps):
        h.update(np.ascontiguousarray(a).tobytes())
    for th, la in masks.masks:
        h.update(th.tobytes())
        h.update(la.tobytes())
    return h.hexdigest()[:24]


def prepare_sample(sample, masks, cache_dir=None, precision="single"):
    """Precompute per-mask densities, kernels, inputs and targets.

    In single precision everything is rounded to complex64, so values loaded
    from ``cache_dir`` are bitwise identical to freshly computed ones.
    """
    single = precision == "single"
    path = None
    if cache_dir is not None and single:
        path = os.path.join(cache_dir, "prep-" + _cache_key(sample, masks))
        if os.path.exists(os.path.join(path, "manifest.json")):
            arrays, _ = datastore.load(path)
            prep = PreparedSample(arrays["maps"])
            for j in range(len(masks)):
                prep.z_theta.append(arrays[f"z_theta_{j}"])
                prep.m_theta.append(arrays[f"m_theta_{j}"])
                prep.m_lambda.append(arrays[f"m_lambda_{j}"])
                prep.target.append(arrays[f"target_{j}"])
            return prep

    cast = (lambda a: np.asarray(a, dtype=np.complex64)) if single else np.asarray
    prep = PreparedSample(cast(sample.maps.maps))
    for th, la in masks.masks:
        z, m_t = _subset_terms(sample, th)
        b, m_l = _subset_terms(sample, la)
        prep.z_theta.append(cast(z))
        prep.m_theta.append(cast(m_t))
        prep.m_lambda.append(cast(m_l))
        prep.target.append(cast(b))
    if path is not None:
        arrays = {"maps": prep.maps}
        for j in range(len(masks)):
            arrays[f"z_theta_{j}"] = prep.z_theta[j]
            arrays[f"m_theta_{j}"] = prep.m_theta[j]
            arrays[f"m_lambda_{j}"] = prep.m_lambda[j]
            arrays[f"target_{j}"] = prep.target[j]
        datastore.save(path, arrays, {"kind": "ssdu-cache"})
    return prep


def _masks_for(i, n_samples, cfg):
    return make_masks(n_samples, cfg.mask_count, cfg.theta_fraction, cfg.center_retained,
                      seed=cfg.seed * 100003 + i)


def sample_loss(params, prep, j, precision="single"):
    """Held-out loss of mask ``j`` for one prepared slice (torch scalar)."""
    cdt = COMPLEX_DTYPES[precision]
    t = lambda a: torch.as_tensor(np.array(a), dtype=cdt)
    maps = t(prep.maps)
    z = t(prep.z_theta[j])
    ctx = DfContext(t(prep.m_theta[j]), maps, z)
    recon = unrolled_forward(params, z, ctx)
    return loss_on_lambda(recon, t(prep.m_lambda[j]), maps, t(prep.target[j]))


def train(dataset, cfg, params=None, cache_dir=None, on_epoch=None, masks=None):
    """Optimise the network on the summed held-out loss over masks.

    One slice forms a batch: the losses of all its masks are summed and
    back-propagated before a single parameter update. Masks are drawn once
    per slice (or taken from ``masks``, one set per slice) and kept fixed
    across epochs. Returns ``(params, history)`` with ``history[e]`` the mean
    per-mask loss of epoch ``e``.
    """
    if masks is not None and len(masks) != len(dataset):
        raise ValueError(f"{len(masks)} mask sets for {len(dataset)} slices")
    if params is None:
        echoes = dataset[0].kspace.shape[1]
        params = init_params(echoes, cfg.depth, cfg.width, seed=cfg.seed, mu_init=cfg.mu_init,
                             unroll_count=cfg.unroll_count, cg_iterations=cfg.cg_iterations,
                             precision=cfg.precision)
    prepared = []
    for i, s in enumerate(dataset):
        ms = masks[i] if masks is not None else _masks_for(i, s.kspace.shape[-1], cfg)
        if ms.omega_size != s.kspace.shape[-1]:
            raise ValueError(f"mask set {i} covers {ms.omega_size} samples, slice has {s.kspace.shape[-1]}")
        prepared.append(prepare_sample(s, ms, cache_dir, cfg.precision))

    leaves = params.tensors()
    if cfg.optimizer == "adam":
        opt = torch.optim.Adam(leaves, lr=cfg.learning_rate, betas=(0.9, 0.999), eps=1e-8)
    else:
        opt = torch.optim.SGD(leaves, lr=cfg.learning_rate)

    history = []
    for epoch in range(cfg.epochs):
        total, count = 0.0, 0
        for prep in prepared:
            opt.zero_grad(set_to_none=False)
            batch = 0.0
            for j in range(len(prep.z_theta)):
                loss = sample_loss(params, prep, j, cfg.precision)
                loss.backward()
                batch += float(loss.detach())
            if not math.isfinite(batch):
                snapshot = {n: a for n, a in params.to_arrays().items()}
                raise TrainingDiverged(f"non-finite loss at epoch {epoch}", snapshot)
            if cfg.learning_rate > 0:
                opt.step()
            total += batch
            count += len(prep.z_theta)
        history.append(total / count)
        log.info("epoch %d loss %.6f mu %.4g", epoch, history[-1], float(params.mu.detach()))
        if on_epoch is not None:
            on_epoch(epoch, params, history)
    return params, history


class Reconstructor:
    """Inference on all acquired samples of a fixed trajectory.

    The NUFFT plan, density weights and Toeplitz kernel are built once, so
    many frames (an fMRI run) reuse them.
    """

    def __init__(self, params, traj, maps, weights=None, precision="single"):
        if weights is None:
            weights = pipe_menon(traj.coords, traj.grid)
        self.params = params
        self.precision = precision
        self.op = SenseOperator(nufft.plan(traj.grid, traj.coords), maps, weights)
        cdt = COMPLEX_DTYPES[precision]
        kernel = build_toeplitz_kernel(traj.coords, weights, traj.grid)
        self._m = torch.as_tensor(np.array(kernel.m), dtype=cdt)
        self._maps = torch.as_tensor(np.array(maps.maps), dtype=cdt)

    def gridded(self, kspace):
        return e_adjoint_weighted(self.op, kspace)

    def __call__(self, kspace):
        zt = torch.as_tensor(self.gridded(kspace), dtype=COMPLEX_DTYPES[self.precision])
        with torch.no_grad():
            out = unrolled_forward(self.params, zt, DfContext(self._m, self._maps, zt))
        return out.numpy().astype(np.complex128)


def reconstruct(params, kspace, traj, maps, weights=None, precision="single"):
    """Inference pass: full-set gridding input and full-set kernel in every block."""
    return Reconstructor(params, traj, maps, weights, precision)(kspace)
