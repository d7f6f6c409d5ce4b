"""Block-design fMRI analysis: echo combination, canonical HRF and GLM t-maps."""
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg
from scipy.stats import gamma

from .acquisition import EchoSchedule, Phantom, phantom_echo_images, simulate_kspace
from .errors import RankDeficientError

__all__ = [
    "TimeSeries",
    "DesignMatrix",
    "GlmResult",
    "echo_weights",
    "echo_combine",
    "estimate_t2star",
    "canonical_hrf",
    "boxcar",
    "build_design",
    "glm_fit",
    "BLOCK_PARADIGM",
    "FmriSimulation",
    "simulate_fmri",
]

# 20 s rest lead-in, then six 20 s on / 20 s off blocks: 260 s in total
BLOCK_PARADIGM = {"block_on_seconds": 20.0, "block_off_seconds": 20.0, "n_blocks": 6}


@dataclass(frozen=True, eq=False)
class TimeSeries:
    """Real magnitude volumes ``(time, row, col)`` sampled every ``tr_seconds``."""

    volumes: np.ndarray
    tr_seconds: float

    def __post_init__(self):
        if not self.tr_seconds > 0:
            raise ValueError("tr_seconds must be positive")
        if np.isnan(self.volumes).any():
            raise ValueError("time series contains NaN")

    def __len__(self):
        return self.volumes.shape[0]


@dataclass(frozen=True, eq=False)
class DesignMatrix:
    columns: np.ndarray  # (n_volumes, p)
    labels: tuple
    task_index: int = 0


@dataclass(frozen=True, eq=False)
class GlmResult:
    beta: np.ndarray  # (p, rows, cols)
    t: np.ndarray  # (rows, cols) for the task column
    sigma: np.ndarray
    dof: int
    extras: dict = field(default_factory=dict)


def echo_weights(tes, t2star):
    """Per-pixel weights ``TE exp(-TE / T2*)`` normalised to sum to one."""
    tes = np.asarray(getattr(tes, "tes", tes), dtype=np.float64)
    t2 = np.asarray(t2star, dtype=np.float64)
    if np.any(t2 <= 0):
        raise ValueError("t2star must be positive")
    w = tes.reshape((-1,) + (1,) * t2.ndim) * np.exp(-tes.reshape((-1,) + (1,) * t2.ndim) / t2)
    return w / w.sum(axis=0)


def echo_combine(echo_series, sched, t2star_map):
    """Weighted echo summation with T2*-matched weights."""
    tes = sched.tes if isinstance(sched, EchoSchedule) else tuple(sched)
    if len(echo_series) != len(tes):
        raise ValueError(f"{len(echo_series)} echo series for {len(tes)} echo times")
    lengths = {len(s) for s in echo_series}
    if len(lengths) != 1:
        raise ValueError("echo series differ in length")
    w = echo_weights(tes, t2star_map)
    out = sum(w[e][None] * echo_series[e].volumes for e in range(len(tes)))
    return TimeSeries(out, echo_series[0].tr_seconds)


def estimate_t2star(echo_images, tes, floor=1e-6, max_ms=1000.0):
    """Log-linear fit of ``ln|S|`` against TE per pixel; returns T2* in ms.

    Pixels with non-decaying fits are clipped to ``max_ms``.
    """
    tes = np.asarray(getattr(tes, "tes", tes), dtype=np.float64)
    mag = np.maximum(np.abs(np.asarray(echo_images)), floor)
    logs = np.log(mag).reshape(len(tes), -1)
    tc = tes - tes.mean()
    slope = (tc[:, None] * (logs - logs.mean(axis=0))).sum(axis=0) / np.sum(tc**2)
    with np.errstate(divide="ignore"):
        t2 = np.where(slope < 0, -1.0 / slope, max_ms)
    return np.clip(t2, 1e-3, max_ms).reshape(np.asarray(echo_images).shape[1:])


def canonical_hrf(tr_seconds, length_seconds=32.0):
    """Double-gamma response sampled every TR, normalised to unit peak.

    Peak gamma (shape 6, scale 1 s) minus an undershoot gamma (shape 16,
    scale 1 s) scaled by 1/6.
    """
    if not tr_seconds > 0:
        raise ValueError("tr_seconds must be positive")
    t = np.arange(0.0, length_seconds + 1e-9, tr_seconds)
    h = gamma.pdf(t, 6, scale=1.0) - gamma.pdf(t, 16, scale=1.0) / 6.0
    return h / h.max()


def boxcar(n_volumes, tr, block_on_seconds, block_off_seconds, n_blocks, lead_in_seconds=None):
    """Task indicator sampled at volume onsets ``k * tr``.

    Rest lasts ``lead_in_seconds`` (default: one off period) before the first
    block; each block is on for ``block_on_seconds`` then off for
    ``block_off_seconds``.
    """
    if lead_in_seconds is None:
        lead_in_seconds = block_off_seconds
    t = np.arange(n_volumes) * tr
    out = np.zeros(n_volumes)
    period = block_on_seconds + block_off_seconds
    for b in range(n_blocks):
        start = lead_in_seconds + b * period
        out[(t >= start) & (t < start + block_on_seconds)] = 1.0
    return out


def build_design(n_volumes, tr, block_on_seconds, block_off_seconds, n_blocks,
                 lead_in_seconds=None):
    """Task regressor (boxcar convolved with the HRF) plus orthonormal drifts.

    Drift columns are Legendre-like polynomials of order 0, 1 and 2 over the
    run, orthonormalised by QR.
    """
    if n_blocks < 1:
        raise ValueError("at least one block is needed for a task regressor")
    if lead_in_seconds is None:
        lead_in_seconds = block_off_seconds
    duration = n_volumes * tr
    needed = lead_in_seconds + n_blocks * block_on_seconds + (n_blocks - 1) * block_off_seconds
    if needed > duration + 1e-9:
        raise ValueError(f"paradigm needs {needed:.1f} s but the run lasts {duration:.1f} s")
    box = boxcar(n_volumes, tr, block_on_seconds, block_off_seconds, n_blocks, lead_in_seconds)
    task = np.convolve(box, canonical_hrf(tr))[:n_volumes]
    s = np.linspace(-1.0, 1.0, n_volumes)
    drifts, _ = np.linalg.qr(np.stack([np.ones(n_volumes), s, s**2], axis=1))
    drifts *= np.sign(drifts[0:1, :] + (drifts[0:1, :] == 0))
    cols = np.column_stack([task, drifts])
    return DesignMatrix(cols, ("task", "drift0", "drift1", "drift2"), 0)


def glm_fit(series, design, rcond=1e-10):
    """Per-pixel ordinary least squares and the t-statistic of the task column.

    Solved through a column-pivoted QR of the design; ``sigma^2 = RSS/(n-p)``
    and ``t = beta_task / (sigma sqrt([(X^T X)^{-1}]_task))``.
    """
    vols = np.asarray(series.volumes, dtype=np.float64)
    x = np.asarray(design.columns, dtype=np.float64)
    n, p = x.shape
    if vols.shape[0] != n:
        raise ValueError(f"design has {n} rows but the series has {vols.shape[0]} volumes")
    q, r, piv = scipy.linalg.qr(x, mode="economic", pivoting=True)
    diag = np.abs(np.diag(r))
    bad = np.flatnonzero(diag <= rcond * diag[0])
    if bad.size:
        col = piv[bad[0]]
        raise RankDeficientError(design.labels[col] if col < len(design.labels) else col)
    yflat = vols.reshape(n, -1)
    coef_piv = scipy.linalg.solve_triangular(r, q.T @ yflat)
    beta = np.empty_like(coef_piv)
    beta[piv] = coef_piv
    resid = yflat - x @ beta
    dof = n - p
    sigma = np.sqrt(np.sum(resid**2, axis=0) / dof)
    rinv = scipy.linalg.solve_triangular(r, np.eye(p))
    cov = np.empty((p, p))
    cov[np.ix_(piv, piv)] = rinv @ rinv.T
    se = sigma * np.sqrt(cov[design.task_index, design.task_index])
    b_task = beta[design.task_index]
    with np.errstate(divide="ignore", invalid="ignore"):
        # exact fits give +-inf; constant-zero pixels give 0
        t = np.where(se > 0, b_task / np.where(se > 0, se, 1.0), np.sign(b_task) * np.inf)
    t = np.nan_to_num(t, nan=0.0, posinf=np.inf, neginf=-np.inf)
    shape = vols.shape[1:]
    return GlmResult(beta.reshape((p,) + shape), t.reshape(shape), sigma.reshape(shape), dof)


@dataclass(frozen=True, eq=False)
class FmriSimulation:
    kspace: np.ndarray  # (time, coil, echo, sample)
    truth: np.ndarray  # (time, echo, row, col), noiseless images
    design: DesignMatrix
    mask: np.ndarray  # activated pixels
    delta_r2star: float  # activation-induced R2* change, 1/ms


def simulate_fmri(ph, sched, maps, traj, n_volumes, tr_seconds, cnr, noise_sd,
                  image_noise_sd, seed=0, paradigm=None, mask=None, plan=None):
    """Block-design multi-echo series with a T2*-driven BOLD response.

    Inside ``mask`` (default: the phantom's ``"visual"`` label) R2* drops in
    proportion to the HRF-convolved task regressor scaled to unit peak. The
    amplitude is chosen so that, to first order, the peak change of the
    T2*-weighted echo combination averaged over the mask equals
    ``cnr * image_noise_sd``. Each frame gets independent k-space noise of
    sd ``noise_sd`` keyed by ``(seed, frame)``.
    """
    paradigm = dict(BLOCK_PARADIGM if paradigm is None else paradigm)
    design = build_design(n_volumes, tr_seconds, **paradigm)
    response = design.columns[:, design.task_index]
    response = response / np.abs(response).max()
    if mask is None:
        mask = ph.labels["visual"]
    mask = np.asarray(mask, dtype=bool)
    if not mask.any():
        raise ValueError("activation mask is empty")

    tes = np.asarray(sched.tes)[:, None, None]
    w = echo_weights(sched, ph.t2star)
    slope = np.sum(w * ph.m0[None] * tes * np.exp(-tes / ph.t2star[None]), axis=0)
    delta = cnr * image_noise_sd / float(np.mean(slope[mask]))

    r2 = 1.0 / ph.t2star
    frames, truths = [], []
    for t in range(n_volumes):
        r2_t = np.where(mask, r2 - delta * response[t], r2)
        ph_t = Phantom(ph.m0, 1.0 / r2_t, ph.labels)
        img = phantom_echo_images(ph_t, sched)
        truths.append(img)
        frames.append(simulate_kspace(img, maps, traj, noise_sd, seed * 1_000_003 + t, plan=plan))
    return FmriSimulation(np.stack(frames), np.stack(truths), design, mask, delta)
