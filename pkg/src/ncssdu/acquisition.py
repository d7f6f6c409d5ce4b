"""Simulated multi-echo spiral acquisitions.

Spiral trajectories, layered-ellipse phantoms with proton density and T2*
maps, Gaussian-lobe coil sensitivities and noisy multi-coil k-space. These
stand in for scanner data; every stochastic step is a pure function of its
seed.
"""
from dataclasses import dataclass, field
import math

import numpy as np

from . import nufft

__all__ = [
    "SIX_ECHO_TES_MS",
    "Trajectory",
    "Phantom",
    "EchoSchedule",
    "CoilMaps",
    "make_spiral",
    "nyquist_turns",
    "nyquist_samples",
    "default_spiral",
    "subsample_arms",
    "make_phantom",
    "simulate_coils",
    "phantom_echo_images",
    "simulate_kspace",
    "noise_sd_for_snr",
    "box_muller_noise",
]

SIX_ECHO_TES_MS = (3.35, 9.49, 15.63, 21.77, 27.91, 34.05)


@dataclass(frozen=True, eq=False)
class Trajectory:
    """Spiral-out sample locations shared by every echo.

    ``coords`` has shape ``(arm_count * samples_per_arm, 2)`` holding
    ``(kx, ky)`` in radians per pixel, arm-major and in readout order.
    """

    coords: np.ndarray
    arm_count: int
    samples_per_arm: int
    grid: tuple

    def __post_init__(self):
        if self.coords.shape != (self.arm_count * self.samples_per_arm, 2):
            raise ValueError(
                f"coords shape {self.coords.shape} inconsistent with "
                f"{self.arm_count} arms x {self.samples_per_arm} samples"
            )

    @property
    def n_samples(self):
        return self.coords.shape[0]

    def arm(self, i):
        s = self.samples_per_arm
        return self.coords[i * s:(i + 1) * s]


@dataclass(frozen=True, eq=False)
class Phantom:
    """Proton density (a.u.) and T2* (ms) maps on a common grid."""

    m0: np.ndarray
    t2star: np.ndarray
    labels: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.m0.shape != self.t2star.shape:
            raise ValueError("m0 and t2star maps must share a grid")
        if np.any(self.m0 < 0):
            raise ValueError("m0 must be non-negative")
        if np.any(self.t2star <= 0):
            raise ValueError("t2star must be strictly positive")

    @property
    def grid(self):
        return self.m0.shape


@dataclass(frozen=True)
class EchoSchedule:
    """Echo times in ms, strictly increasing."""

    tes: tuple = SIX_ECHO_TES_MS

    def __post_init__(self):
        tes = tuple(float(t) for t in self.tes)
        if not tes or any(t <= 0 for t in tes):
            raise ValueError("echo times must be positive")
        if any(b <= a for a, b in zip(tes, tes[1:])):
            raise ValueError("echo times must be strictly increasing")
        object.__setattr__(self, "tes", tes)

    def __len__(self):
        return len(self.tes)


@dataclass(frozen=True, eq=False)
class CoilMaps:
    """Complex coil sensitivities ``(coil, row, col)`` and their support mask."""

    maps: np.ndarray
    support: np.ndarray

    @property
    def coil_count(self):
        return self.maps.shape[0]

    @property
    def grid(self):
        return self.maps.shape[1:]


def nyquist_turns(grid, arm_count, fov_factor=1.0):
    """Turns per arm so ``arm_count`` interleaves meet radial Nyquist for a
    circular field of view ``fov_factor`` times the grid size."""
    n = min(grid)
    return fov_factor * (n / 2) * (1 - 1 / n) / arm_count


def nyquist_samples(grid, turns, margin=0.8):
    """Samples per arm keeping the outermost along-arm step below ``margin``
    times the Cartesian Nyquist spacing ``2 pi / n``."""
    n = min(grid)
    kmax = math.pi * (1 - 1 / n)
    return int(math.ceil(2 * math.pi * turns * kmax / (margin * 2 * math.pi / n))) + 1


def default_spiral(grid, arm_count=10, fov_factor=1.2):
    """The fully sampled ``arm_count``-interleave spiral used throughout.

    A spiral's aliasing-free field of view is a disk; ``fov_factor`` 1.2
    keeps the alias ring of an object inside the head outline clear of the
    square grid's corners.
    """
    turns = nyquist_turns(grid, arm_count, fov_factor)
    return make_spiral(grid, arm_count, nyquist_samples(grid, turns), turns)


def make_spiral(grid, arm_count, samples_per_arm, turns):
    """Archimedean spiral-out interleaves.

    Radius and angle both grow linearly with the readout index; arm ``i`` is
    rotated by ``2 pi i / arm_count``. The outermost radius is
    ``pi (1 - 1/n)`` with ``n`` the smaller grid dimension.
    """
    rows, cols = (int(g) for g in grid)
    if rows < 1 or cols < 1:
        raise ValueError(f"grid dimensions must be positive, got {grid}")
    if arm_count < 1:
        raise ValueError("arm_count must be >= 1")
    if samples_per_arm < 2:
        raise ValueError("samples_per_arm must be >= 2")
    if not turns > 0:
        raise ValueError("turns must be positive")

    kmax = math.pi * (1 - 1 / min(rows, cols))
    frac = np.arange(samples_per_arm) / (samples_per_arm - 1)
    radius = kmax * frac
    arms = []
    for i in range(arm_count):
        theta = 2 * math.pi * turns * frac + 2 * math.pi * i / arm_count
        arms.append(np.stack([radius * np.cos(theta), radius * np.sin(theta)], axis=-1))
    coords = np.concatenate(arms, axis=0)
    coords.setflags(write=False)
    return Trajectory(coords, arm_count, samples_per_arm, (rows, cols))


def subsample_arms(traj, keep):
    """Trajectory made of the arms listed in ``keep``, in that order."""
    keep = [int(k) for k in keep]
    if not keep:
        raise ValueError("keep must name at least one arm")
    if len(set(keep)) != len(keep):
        raise ValueError("arm indices must be distinct")
    bad = [k for k in keep if not 0 <= k < traj.arm_count]
    if bad:
        raise ValueError(f"arm indices out of range: {bad}")
    coords = np.concatenate([traj.arm(k) for k in keep], axis=0)
    coords.setflags(write=False)
    return Trajectory(coords, len(keep), traj.samples_per_arm, traj.grid)


def _ellipse(grid, cy, cx, ay, ax, angle, edge):
    """Smooth indicator of an ellipse; coordinates are fractions of the FOV."""
    rows, cols = grid
    y = (np.arange(rows) - rows // 2) / rows
    x = (np.arange(cols) - cols // 2) / cols
    yy, xx = np.meshgrid(y - cy, x - cx, indexing="ij")
    c, s = math.cos(angle), math.sin(angle)
    u = (c * xx + s * yy) / ax
    v = (-s * xx + c * yy) / ay
    rho = np.sqrt(u**2 + v**2)
    # edge width measured in pixels along the minor axis
    scale = edge / (min(ax, ay) * min(rows, cols))
    return 0.5 * (1 + np.tanh((1 - rho) / scale))


# (cy, cx, ay, ax, angle, m0, t2star) for the brain-like base layout
_BASE_LAYOUT = (
    (0.0, 0.0, 0.44, 0.36, 0.0, 0.9, 25.0),     # scalp rim
    (0.0, 0.0, 0.41, 0.33, 0.0, 0.75, 55.0),    # brain
    (-0.02, -0.1, 0.13, 0.05, -0.35, 1.0, 180.0),  # ventricle L
    (-0.02, 0.1, 0.13, 0.05, 0.35, 1.0, 180.0),    # ventricle R
    (0.2, 0.0, 0.08, 0.12, 0.0, 0.85, 45.0),    # posterior grey matter
    (-0.22, 0.0, 0.06, 0.1, 0.0, 0.6, 70.0),    # frontal white matter
    (0.05, -0.2, 0.05, 0.05, 0.0, 0.5, 35.0),
    (0.05, 0.2, 0.04, 0.06, 0.0, 0.95, 90.0),
)


def make_phantom(grid, seed=0, edge_pixels=1.0, jitter=None):
    """Layered-ellipse brain phantom.

    ``seed=0`` gives the base layout; other seeds perturb ellipse geometry
    and tissue values so that a family of distinct phantoms can be drawn.
    Labels include ``"support"`` (head mask) and ``"visual"`` (a small
    posterior region used as the activated area in fMRI simulations).
    """
    grid = tuple(int(g) for g in grid)
    rng = np.random.default_rng(seed)
    if jitter is None:
        jitter = 0.0 if seed == 0 else 1.0
    m0 = np.zeros(grid)
    t2 = np.full(grid, 20.0)
    support = None
    for i, (cy, cx, ay, ax, ang, v, t) in enumerate(_BASE_LAYOUT):
        if i >= 2:
            cy += jitter * rng.uniform(-0.03, 0.03)
            cx += jitter * rng.uniform(-0.03, 0.03)
            ay *= 1 + jitter * rng.uniform(-0.25, 0.25)
            ax *= 1 + jitter * rng.uniform(-0.25, 0.25)
            ang += jitter * rng.uniform(-0.3, 0.3)
            v *= 1 + jitter * rng.uniform(-0.15, 0.15)
            t *= 1 + jitter * rng.uniform(-0.2, 0.2)
        elif i == 1:
            v *= 1 + jitter * rng.uniform(-0.1, 0.1)
        ind = _ellipse(grid, cy, cx, ay, ax, ang, edge_pixels)
        if i == 0:
            support = ind > 0.5
        m0 = m0 * (1 - ind) + v * ind
        t2 = t2 * (1 - ind) + t * ind
    m0 = np.clip(m0, 0.0, None)
    m0[m0 < 1e-6] = 0.0
    visual = _ellipse(grid, 0.28, 0.0, 0.05, 0.09, 0.0, 0.5) > 0.5
    return Phantom(m0, t2, {"support": support, "visual": visual & support})


def simulate_coils(grid, coil_count, support=None, lobe_width=0.5, ring_radius=0.6,
                   phase_cycles=0.5):
    """Smooth complex coil sensitivities normalised to unit root-sum-of-squares.

    Lobes are Gaussians of width ``lobe_width * n`` centered on a ring of
    radius ``ring_radius * n`` around the FOV center; each coil carries a
    constant phase offset plus a linear ramp of ``phase_cycles`` cycles across
    the FOV pointing towards the coil. ``support`` defaults to the disk
    inscribed in the FOV; maps are exactly zero outside it.
    """
    rows, cols = (int(g) for g in grid)
    if coil_count < 1:
        raise ValueError("coil_count must be >= 1")
    n = min(rows, cols)
    y = np.arange(rows) - rows // 2
    x = np.arange(cols) - cols // 2
    yy, xx = np.meshgrid(y, x, indexing="ij")
    if support is None:
        support = (yy / (rows / 2)) ** 2 + (xx / (cols / 2)) ** 2 <= 1.0
    support = np.asarray(support, dtype=bool)

    maps = np.empty((coil_count, rows, cols), dtype=np.complex128)
    for c in range(coil_count):
        ang = 2 * math.pi * c / coil_count
        cy, cx = ring_radius * n * math.sin(ang), ring_radius * n * math.cos(ang)
        mag = np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * (lobe_width * n) ** 2))
        ramp = 2 * math.pi * phase_cycles * (xx * math.cos(ang) + yy * math.sin(ang)) / n
        maps[c] = mag * np.exp(1j * (ang + ramp))
    rss = np.sqrt(np.sum(np.abs(maps) ** 2, axis=0))
    maps = np.where(support, maps / np.where(rss > 0, rss, 1.0), 0.0)
    return CoilMaps(maps, support)


def phantom_echo_images(ph, sched):
    """Mono-exponential decay ``m0 exp(-TE / T2*)`` for each echo, as complex."""
    tes = np.asarray(sched.tes)[:, None, None]
    return (ph.m0[None] * np.exp(-tes / ph.t2star[None])).astype(np.complex128)


def box_muller_noise(shape, seed):
    """Complex standard-normal noise (unit sd per component), keyed by ``seed``.

    Uniforms come from the counter-based Philox generator and are mapped to
    normals with the Box-Muller transform, so the stream is reproducible
    across platforms.
    """
    gen = np.random.Generator(np.random.Philox(key=int(seed)))
    n = int(np.prod(shape))
    u = gen.random((2, n))
    u1 = 1.0 - u[0]  # (0, 1]
    rad = np.sqrt(-2.0 * np.log(u1))
    ang = 2 * math.pi * u[1]
    return (rad * np.cos(ang) + 1j * rad * np.sin(ang)).reshape(shape)


def noise_sd_for_snr(snr, ph, sched, weights):
    """k-space noise sd giving image SNR ``snr`` for density-compensated gridding.

    SNR is the mean first-echo tissue signal over the per-component noise sd
    of the gridded image, which for unit root-sum-of-squares coil maps is
    ``noise_sd * ||w||_2``.
    """
    w = np.asarray(getattr(weights, "w", weights))
    tissue = ph.labels.get("support", ph.m0 > 0)
    signal = float(np.mean(np.abs(phantom_echo_images(ph, sched)[0][tissue])))
    return signal / (snr * float(np.linalg.norm(w)))


def simulate_kspace(img, maps, traj, noise_sd=0.0, seed=0, plan=None):
    """Noisy multi-coil samples ``y[c, e] = NUFFT(S_c x_e) + noise``.

    Returns an array of shape ``(coil, echo, sample)``.
    """
    img = np.asarray(img)
    if img.ndim == 2:
        img = img[None]
    if img.shape[-2:] != tuple(maps.grid):
        raise ValueError(f"image grid {img.shape[-2:]} does not match coil maps {maps.grid}")
    if tuple(traj.grid) != tuple(maps.grid):
        raise ValueError(f"trajectory grid {traj.grid} does not match coil maps {maps.grid}")
    if noise_sd < 0:
        raise ValueError("noise_sd must be non-negative")
    if plan is None:
        plan = nufft.plan(traj.grid, traj)
    y = nufft.forward(plan, maps.maps[:, None] * img[None])
    if noise_sd > 0:
        y = y + noise_sd * box_muller_noise(y.shape, seed)
    return y
