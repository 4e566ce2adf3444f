"""Trajectories, quadratic B-spline parameterization and hardware penalties.

Coordinates are radians/pixel. Physical k-space (cycles/m) relates through
``k = omega * grid_n / (2 pi fov)``, so a gradient amplitude ``g`` held for one
raster step ``dt`` moves ``omega`` by ``2 pi gamma dt g fov / grid_n``.
"""

from __future__ import annotations

import csv
import io
import math
import struct
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp

GAMMA_HZ_PER_T = 42.577478518e6
MAGIC = b"KTRJ1"


class InfeasibleTrajectoryError(ValueError):
    """Raised when a requested trajectory cannot satisfy the hardware limits."""


@dataclass(frozen=True)
class HardwareLimits:
    """Gradient system limits.

    ``gamma`` is the gyromagnetic ratio divided by 2 pi (Hz/T).
    """

    gmax: float = 0.05
    smax: float = 149.0
    gamma: float = GAMMA_HZ_PER_T
    dt: float = 4e-6

    def __post_init__(self):
        for name in ("gmax", "smax", "gamma", "dt"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")

    def thresholds(self, fov, grid_n):
        """Per-sample limits on |D1 omega| and |D2 omega| in radians/pixel."""
        unit = 2 * math.pi * self.gamma * fov / grid_n
        return unit * self.dt * self.gmax, unit * self.dt**2 * self.smax


@dataclass(frozen=True, eq=False)
class Trajectory:
    coords: np.ndarray
    nshots: int
    samples_per_shot: int
    dt: float = 4e-6
    fov: float = 0.22
    grid_n: int = 320

    def __post_init__(self):
        c = np.array(self.coords, dtype=np.float64)
        if c.ndim == 1:
            c = c[:, None]
        c.setflags(write=False)
        object.__setattr__(self, "coords", c)
        if c.shape[0] != self.nshots * self.samples_per_shot:
            raise ValueError(
                f"{c.shape[0]} samples != nshots*samples_per_shot "
                f"({self.nshots}*{self.samples_per_shot})")
        if not self.dt > 0:
            raise ValueError("dt must be positive")
        if not np.isfinite(c).all():
            raise ValueError("trajectory coordinates must be finite")

    @property
    def ndim(self):
        return self.coords.shape[1]

    def with_coords(self, coords):
        return Trajectory(coords, self.nshots, self.samples_per_shot, self.dt, self.fov,
                          self.grid_n)

    def shots(self):
        """View as (nshots, samples_per_shot, Nd)."""
        return self.coords.reshape(self.nshots, self.samples_per_shot, -1)


# --------------------------------------------------------------------------
# B-spline parameterization


def _bspline2(u):
    a = np.abs(u)
    return np.where(a <= 0.5, 0.75 - a**2, np.where(a <= 1.5, 0.5 * (1.5 - a) ** 2, 0.0))


def n_coeffs_per_shot(samples_per_shot, decim):
    return int(math.ceil(samples_per_shot / decim)) + 2


def _shot_basis(samples_per_shot, decim):
    """Dense quadratic B-spline evaluation matrix for one shot.

    Knots are uniform with spacing ``decim`` samples; one padding kernel on each
    end keeps every sample covered by three kernels (partition of unity). When
    ``decim`` does not divide the shot the last interval is simply shorter.
    """
    m = samples_per_shot
    nl = n_coeffs_per_shot(m, decim)
    u = 0.5 + (np.arange(m) + 0.5) / decim
    return _bspline2(u[:, None] - np.arange(nl)[None, :])


def build_basis(nshots, samples_per_shot, decim):
    """Block-diagonal sparse interpolation matrix ``B`` (Ns x L)."""
    decim = int(decim)
    if decim < 1:
        raise ValueError("decim must be >= 1")
    if decim > samples_per_shot:
        raise ValueError(f"decim {decim} exceeds samples_per_shot {samples_per_shot}")
    block = sp.csr_matrix(_shot_basis(samples_per_shot, decim))
    return sp.block_diag([block] * nshots, format="csr")


@dataclass(frozen=True, eq=False)
class SplineParam:
    """``omega_d = B c_d`` for every dimension ``d``.

    ``decim == 0`` denotes the nonparametric case ``B = I``.
    """

    coeffs: np.ndarray
    basis: sp.csr_matrix
    decim: int
    nshots: int
    samples_per_shot: int

    @classmethod
    def create(cls, coeffs, nshots, samples_per_shot, decim):
        coeffs = np.asarray(coeffs, dtype=np.float64)
        if decim == 0:
            basis = sp.identity(nshots * samples_per_shot, format="csr")
        else:
            basis = build_basis(nshots, samples_per_shot, decim)
        if coeffs.ndim != 2 or coeffs.shape[0] != basis.shape[1]:
            raise ValueError(f"coeffs shape {coeffs.shape} does not match basis {basis.shape}")
        return cls(coeffs, basis, int(decim), nshots, samples_per_shot)

    def with_coeffs(self, coeffs):
        coeffs = np.asarray(coeffs, dtype=np.float64)
        if coeffs.shape != self.coeffs.shape:
            raise ValueError(f"coeffs shape {coeffs.shape} != {self.coeffs.shape}")
        return SplineParam(coeffs, self.basis, self.decim, self.nshots, self.samples_per_shot)

    def pullback(self, grad_coords):
        """Map a gradient w.r.t. coordinates to one w.r.t. coefficients (B^T g)."""
        return np.asarray(self.basis.T @ grad_coords)


def materialize(spline):
    """Coordinates ``B c``."""
    if spline.coeffs.shape[0] != spline.basis.shape[1]:
        raise ValueError("coefficient/basis shape mismatch")
    return np.asarray(spline.basis @ spline.coeffs)


def refit(traj, decim):
    """Least-squares spline coefficients reproducing ``traj`` at ``decim``.

    Returns ``(spline, rms_residual)`` with the residual in radians/pixel.
    ``decim=0`` returns the exact nonparametric parameterization.
    """
    m, nshots = traj.samples_per_shot, traj.nshots
    shots = traj.shots()
    if decim == 0:
        spline = SplineParam.create(traj.coords.copy(), nshots, m, 0)
        return spline, 0.0
    b = _shot_basis(m, decim)
    # shots share one block, so fit every (shot, dim) column at once
    rhs = shots.transpose(1, 0, 2).reshape(m, -1)
    if b.shape[1] <= m:
        gram = b.T @ b
        if np.linalg.cond(gram) > 1e12:
            raise ValueError("rank-deficient spline basis")
        sol = sla.cho_solve(sla.cho_factor(gram), b.T @ rhs)
    else:
        sol = np.linalg.lstsq(b, rhs, rcond=None)[0]
    nl = b.shape[1]
    coeffs = sol.reshape(nl, nshots, -1).transpose(1, 0, 2).reshape(nshots * nl, -1)
    spline = SplineParam.create(coeffs, nshots, m, decim)
    resid = materialize(spline) - traj.coords
    return spline, float(np.sqrt(np.mean(resid**2)))


def smoothness_constant(samples_per_shot, decim):
    """Induced inf-norm of ``D2 B`` for one shot: ||D2 B c||_inf <= C ||c||_inf."""
    d2b = np.diff(_shot_basis(samples_per_shot, decim), n=2, axis=0)
    return float(np.abs(d2b).sum(axis=1).max())


# --------------------------------------------------------------------------
# finite differences and penalties


def diff1(coords, nshots):
    """Per-shot first differences, shape (Ns - nshots, Nd)."""
    c = np.asarray(coords).reshape(nshots, -1, np.shape(coords)[-1])
    return np.diff(c, axis=1).reshape(-1, c.shape[-1])


def diff2(coords, nshots):
    """Per-shot second differences, shape (Ns - 2 nshots, Nd)."""
    c = np.asarray(coords).reshape(nshots, -1, np.shape(coords)[-1])
    return np.diff(c, n=2, axis=1).reshape(-1, c.shape[-1])


def _diff_adjoint(g, nshots, order):
    nd = g.shape[-1]
    g = g.reshape(nshots, -1, nd)
    for _ in range(order):
        pad = np.zeros((nshots, 1, nd))
        gp = np.concatenate([pad, g, pad], axis=1)
        g = gp[:, :-1] - gp[:, 1:]
    return g.reshape(-1, nd)


def hinge(x, lam):
    """``sum(max(|x| - lam, 0))`` and its subgradient."""
    over = np.abs(x) - lam
    active = over > 0
    return float(over[active].sum()), np.sign(x) * active


@dataclass(frozen=True)
class PenaltyParts:
    grad_penalty: float
    slew_penalty: float
    value: float
    grad: np.ndarray = field(repr=False)


def penalty_parts(coords, nshots, lam_g, lam_s, mu1, mu2):
    vg, sg = hinge(diff1(coords, nshots), lam_g)
    vs, ss = hinge(diff2(coords, nshots), lam_s)
    grad = mu1 * _diff_adjoint(sg, nshots, 1) + mu2 * _diff_adjoint(ss, nshots, 2)
    return PenaltyParts(vg, vs, mu1 * vg + mu2 * vs, grad)


def penalty(traj, limits, mu1=1.0, mu2=1.0):
    """Hinge penalty on gradient amplitude and slew rate.

    Returns ``(value, subgradient)`` where the subgradient has the shape of
    ``traj.coords`` and vanishes inside the feasible box.
    """
    lam_g, lam_s = limits.thresholds(traj.fov, traj.grid_n)
    parts = penalty_parts(traj.coords, traj.nshots, lam_g, lam_s, mu1, mu2)
    return parts.value, parts.grad


def is_feasible(traj, limits, tol=1e-12):
    lam_g, lam_s = limits.thresholds(traj.fov, traj.grid_n)
    return bool(np.abs(diff1(traj.coords, traj.nshots)).max(initial=0) <= lam_g + tol
                and np.abs(diff2(traj.coords, traj.nshots)).max(initial=0) <= lam_s + tol)


# --------------------------------------------------------------------------
# generators


def gen_radial(nspokes, nread, inout=True, dt=4e-6, fov=0.22, grid_n=320):
    """Radial spokes at equidistant angles.

    In-out spokes pass through DC from -pi to pi with angles in [-pi/2, pi/2);
    center-out spokes run from DC to pi with angles in [-pi, pi).
    """
    if inout:
        angles = -np.pi / 2 + np.pi * np.arange(nspokes) / nspokes
        radius = -np.pi + 2 * np.pi * np.arange(nread) / nread
    else:
        angles = -np.pi + 2 * np.pi * np.arange(nspokes) / nspokes
        radius = np.pi * np.arange(nread) / nread
    kx = np.cos(angles)[:, None] * radius[None, :]
    ky = np.sin(angles)[:, None] * radius[None, :]
    coords = np.stack([kx.ravel(), ky.ravel()], axis=1)
    return Trajectory(coords, nspokes, nread, dt, fov, grid_n)


def _plan_speed(path, vmax, amax):
    """Arc-length speed profile along a dense complex path under |v|, |a| limits."""
    seg = np.abs(np.diff(path))
    s = np.concatenate([[0.0], np.cumsum(seg)])
    d1 = np.gradient(path, s)
    d2 = np.gradient(d1, s)
    kappa = np.abs(np.imag(np.conj(d1) * d2)) / np.maximum(np.abs(d1), 1e-12) ** 3
    vlim = np.minimum(vmax, np.sqrt(amax / np.maximum(kappa, 1e-12)))
    v = np.empty_like(s)
    v[0] = 0.0
    for i in range(len(s) - 1):
        at = math.sqrt(max(amax**2 - (v[i] ** 2 * kappa[i]) ** 2, 0.0))
        v[i + 1] = min(vlim[i + 1], math.sqrt(v[i] ** 2 + 2 * at * seg[i]))
    for i in range(len(s) - 2, -1, -1):
        at = math.sqrt(max(amax**2 - (v[i + 1] ** 2 * kappa[i + 1]) ** 2, 0.0))
        v[i] = min(v[i], math.sqrt(v[i + 1] ** 2 + 2 * at * seg[i]))
    v[0] = 0.0
    vmid = 0.5 * (v[1:] + v[:-1])
    t = np.concatenate([[0.0], np.cumsum(seg / np.maximum(vmid, 1e-12))])
    return s, t


def gen_spiral(nshots, nread, density=1.0, turns=None, limits=None, dt=4e-6, fov=0.22,
               grid_n=320):
    """Center-out spiral interleaves reaching ``|omega| = pi``.

    The radius grows as ``pi * (theta / theta_max) ** density`` (Archimedean for
    ``density=1``; larger values sample the center more densely). The path is
    traversed with a gradient/slew-limited speed profile and then slowed down
    uniformly to exactly ``nread`` samples.

    Raises
    ------
    InfeasibleTrajectoryError
        If the path cannot be traversed within ``nread`` samples.
    """
    limits = HardwareLimits(dt=dt) if limits is None else limits
    if turns is None:
        turns = grid_n / (4.0 * nshots)
    theta_max = 2 * np.pi * turns
    lam_g, lam_s = limits.thresholds(fov, grid_n)
    ndense = max(20000, int(200 * turns))
    theta = theta_max * np.linspace(0, 1, ndense) ** (1.0 / max(density, 1e-3))
    radius = np.pi * (theta / theta_max) ** density
    path = radius * np.exp(1j * theta)
    safety = 0.9
    for _ in range(8):
        s, t = _plan_speed(path, safety * lam_g, safety * lam_s)
        need = int(math.ceil(t[-1])) + 1
        if need > nread:
            raise InfeasibleTrajectoryError(
                f"spiral needs {need} samples per shot under the limits, got {nread}")
        tau = np.arange(nread) * t[-1] / (nread - 1)
        pos = np.interp(np.interp(tau, t, s), s, path.real) + 1j * np.interp(
            np.interp(tau, t, s), s, path.imag)
        rot = np.exp(2j * np.pi * np.arange(nshots) / nshots)
        arms = rot[:, None] * pos[None, :]
        coords = np.stack([arms.real.ravel(), arms.imag.ravel()], axis=1)
        traj = Trajectory(coords, nshots, nread, limits.dt, fov, grid_n)
        if is_feasible(traj, limits):
            return traj
        safety *= 0.8
    raise InfeasibleTrajectoryError("could not discretize spiral within limits")


# --------------------------------------------------------------------------
# waveforms and file formats


def export_waveform(traj, limits):
    """Gradient (T/m) and slew (T/m/s) per shot: shapes (nshots, M-1, Nd), (nshots, M-2, Nd)."""
    unit = 2 * math.pi * limits.gamma * limits.dt * traj.fov / traj.grid_n
    g = np.diff(traj.shots(), axis=1) / unit
    s = np.diff(g, axis=1) / limits.dt
    return g, s


def integrate_waveform(g, start, traj_like, limits):
    """Inverse of :func:`export_waveform` given each shot's first sample."""
    unit = 2 * math.pi * limits.gamma * limits.dt * traj_like.fov / traj_like.grid_n
    start = np.asarray(start).reshape(g.shape[0], 1, g.shape[2])
    steps = np.concatenate([start, g * unit], axis=1)
    return np.cumsum(steps, axis=1).reshape(-1, g.shape[2])


def waveform_csv(traj, limits):
    """CSV text with columns shot, n, g_x, g_y, s_x, s_y (slew empty at n=0)."""
    g, s = export_waveform(traj, limits)
    axes = "xyz"[: traj.ndim]
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["shot", "n"] + [f"g_{a}" for a in axes] + [f"s_{a}" for a in axes])
    for shot in range(g.shape[0]):
        for n in range(g.shape[1]):
            slew = [""] * traj.ndim if n == 0 else [repr(float(v)) for v in s[shot, n - 1]]
            w.writerow([shot, n] + [repr(float(v)) for v in g[shot, n]] + slew)
    return buf.getvalue()


def dumps_trajectory(traj):
    head = MAGIC + struct.pack("<3I3d", traj.ndim, traj.nshots, traj.samples_per_shot, traj.dt,
                               traj.fov, float(traj.grid_n))
    return head + np.ascontiguousarray(traj.coords, dtype="<f8").tobytes()


def loads_trajectory(blob):
    if blob[:5] != MAGIC:
        raise ValueError("not a trajectory file (bad magic)")
    nd, nshots, m, dt, fov, grid_n = struct.unpack_from("<3I3d", blob, 5)
    off = 5 + struct.calcsize("<3I3d")
    coords = np.frombuffer(blob, dtype="<f8", offset=off)
    if coords.size != nd * nshots * m:
        raise ValueError("trajectory file truncated or corrupt")
    return Trajectory(coords.reshape(-1, nd).astype(np.float64), nshots, m, dt, fov,
                      int(grid_n))


def save_trajectory(path, traj):
    from .fileio import atomic_write_bytes

    atomic_write_bytes(path, dumps_trajectory(traj))


def load_trajectory(path):
    with open(path, "rb") as f:
        return loads_trajectory(f.read())
