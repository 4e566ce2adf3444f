"""Non-uniform DFT via Kaiser-Bessel gridding, Toeplitz normal operator, exact DFT.

Coordinates are in radians/pixel. Image pixel ``p`` along a dimension of size
``N`` sits at offset ``r = p - N // 2`` so that DC is at the image center, and

    forward(x)[j] ~= sum_k x[k] exp(-i omega_j . r_k)
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import scipy.fft as fft
import scipy.sparse as sp
from scipy.special import i0

__all__ = [
    "NufftPlan",
    "plan",
    "forward",
    "adjoint",
    "toeplitz_kernel",
    "normal_apply",
    "dft_oracle",
    "wrap",
    "pixel_offsets",
    "kb_beta",
]

DEFAULT_OVERSAMPLE = 2.0
DEFAULT_WIDTH = 6
ORACLE_MAX_VOXELS = 64 * 64


def wrap(coords):
    """Map coordinates into [-pi, pi)."""
    coords = np.asarray(coords, dtype=np.float64)
    return np.mod(coords + np.pi, 2 * np.pi) - np.pi


def kb_beta(width, oversample):
    """Standard optimal Kaiser-Bessel shape parameter (Beatty et al. 2005)."""
    return math.pi * math.sqrt((width / oversample) ** 2 * (oversample - 0.5) ** 2 - 0.8)


def _kb(u, width, beta):
    arg = 1.0 - (2.0 * u / width) ** 2
    out = np.zeros_like(u)
    inside = arg >= 0
    out[inside] = i0(beta * np.sqrt(arg[inside]))
    return out


def _kb_ft(f, width, beta):
    # integral of _kb(t) * exp(2 pi i f t) dt, valid on both sides of the
    # sinh/sin transition
    z = np.emath.sqrt(beta**2 - (np.pi * width * np.asarray(f, dtype=np.float64)) ** 2)
    z = np.where(np.abs(z) < 1e-12, 1e-12, z)
    return np.real(width * np.sinh(z) / z)


def pixel_offsets(n):
    """Integer pixel offsets ``-n//2 ... n - n//2 - 1``."""
    return np.arange(n) - n // 2


def _oversampled_size(n, oversample):
    k = int(math.ceil(oversample * n))
    return k + (k % 2)


@dataclass(frozen=True, eq=False)
class NufftPlan:
    grid_shape: tuple
    oversample: float
    kernel_width: int
    kernel_shape: float
    coords: np.ndarray
    os_shape: tuple
    interp: sp.csr_matrix
    interp_h: sp.csr_matrix
    scale: np.ndarray
    grid_index: tuple

    @property
    def ndim(self):
        return len(self.grid_shape)

    @property
    def nsamples(self):
        return self.coords.shape[0]

    @property
    def nvoxels(self):
        return int(np.prod(self.grid_shape))


def plan(coords, grid_shape, oversample=DEFAULT_OVERSAMPLE, kernel_width=DEFAULT_WIDTH,
         kernel_shape=None):
    """Precompute interpolation weights and apodization for ``coords``.

    Parameters
    ----------
    coords : array_like, shape (Ns, Nd)
        Sample locations in radians/pixel. Values outside [-pi, pi) are wrapped.
    grid_shape : int or tuple of int
        Image size per dimension.
    oversample : float
        Grid oversampling factor (>= 1).
    kernel_width : int
        Interpolation taps per dimension.
    kernel_shape : float, optional
        Kaiser-Bessel beta. Defaults to :func:`kb_beta`.
    """
    coords = np.asarray(coords, dtype=np.float64)
    if coords.ndim == 1:
        coords = coords[:, None]
    if coords.ndim != 2 or coords.shape[1] not in (1, 2):
        raise ValueError(f"coords must have shape (Ns, Nd) with Nd in (1, 2), got {coords.shape}")
    if coords.shape[0] < 1:
        raise ValueError("need at least one sample")
    bad = ~np.isfinite(coords).all(axis=1)
    if bad.any():
        raise ValueError(f"non-finite coordinate at sample index {int(np.flatnonzero(bad)[0])}")
    if np.isscalar(grid_shape):
        grid_shape = (int(grid_shape),) * coords.shape[1]
    grid_shape = tuple(int(n) for n in grid_shape)
    if len(grid_shape) != coords.shape[1]:
        raise ValueError(f"grid_shape {grid_shape} does not match Nd={coords.shape[1]}")
    if min(grid_shape) < 4:
        raise ValueError("grid_shape must be >= 4 per dimension")
    if oversample < 1:
        raise ValueError("oversample must be >= 1")
    width = int(kernel_width)
    os_shape = tuple(_oversampled_size(n, oversample) for n in grid_shape)
    if width > min(os_shape):
        raise ValueError(f"kernel_width {width} exceeds oversampled grid {os_shape}")
    beta = kb_beta(width, oversample) if kernel_shape is None else float(kernel_shape)

    coords = wrap(coords)
    coords.setflags(write=False)
    ns, nd = coords.shape

    # per-dim taps: indices (Ns, W) and weights (Ns, W)
    idx, wts = [], []
    for d in range(nd):
        k = os_shape[d]
        u = coords[:, d] * k / (2 * np.pi)
        base = np.floor(u - width / 2).astype(np.int64) + 1
        taps = base[:, None] + np.arange(width)[None, :]
        wts.append(_kb(u[:, None] - taps, width, beta))
        idx.append(np.mod(taps, k))

    if nd == 1:
        cols = idx[0]
        vals = wts[0]
    else:
        cols = idx[0][:, :, None] * os_shape[1] + idx[1][:, None, :]
        vals = wts[0][:, :, None] * wts[1][:, None, :]
    cols = cols.reshape(ns, -1)
    vals = vals.reshape(ns, -1)
    rows = np.repeat(np.arange(ns), cols.shape[1])
    interp = sp.csr_matrix((vals.ravel(), (rows, cols.ravel())),
                           shape=(ns, int(np.prod(os_shape))))
    interp.sum_duplicates()
    interp_h = interp.T.tocsr()

    scale = np.ones(grid_shape)
    grid_index = []
    for d, (n, k) in enumerate(zip(grid_shape, os_shape)):
        r = pixel_offsets(n)
        s = 1.0 / _kb_ft(r / k, width, beta)
        shape = [1] * nd
        shape[d] = n
        scale = scale * s.reshape(shape)
        grid_index.append(np.mod(r, k))
    scale.setflags(write=False)
    grid_index = np.ix_(*grid_index)

    return NufftPlan(grid_shape, float(oversample), width, float(beta), coords, os_shape,
                     interp, interp_h, scale, grid_index)


_make_plan = plan


def _as_image(plan, image):
    image = np.asarray(image)
    nd = plan.ndim
    if image.shape[-nd:] == plan.grid_shape:
        return image
    if image.shape[-1:] == (plan.nvoxels,):
        return image.reshape(image.shape[:-1] + plan.grid_shape)
    raise ValueError(f"image shape {image.shape} incompatible with grid {plan.grid_shape}")


def forward(plan, image):
    """Non-uniform forward transform. Leading batch dimensions are kept."""
    image = _as_image(plan, image)
    nd = plan.ndim
    batch = image.shape[:-nd]
    x = (image * plan.scale).reshape((-1,) + plan.grid_shape)
    grid = np.zeros((x.shape[0],) + plan.os_shape, dtype=np.complex128)
    grid[(slice(None),) + plan.grid_index] = x
    grid = fft.fftn(grid, axes=tuple(range(1, nd + 1)))
    out = plan.interp @ grid.reshape(x.shape[0], -1).T
    return out.T.reshape(batch + (plan.nsamples,))


def adjoint(plan, data):
    """Exact adjoint of :func:`forward` for the given plan."""
    data = np.asarray(data)
    if data.shape[-1] != plan.nsamples:
        raise ValueError(f"data has {data.shape[-1]} samples, plan has {plan.nsamples}")
    nd = plan.ndim
    batch = data.shape[:-1]
    d = data.reshape(-1, plan.nsamples)
    grid = (plan.interp_h @ d.T.astype(np.complex128)).T.reshape((d.shape[0],) + plan.os_shape)
    grid = fft.ifftn(grid, axes=tuple(range(1, nd + 1))) * np.prod(plan.os_shape)
    x = grid[(slice(None),) + plan.grid_index] * plan.scale
    return x.reshape(batch + plan.grid_shape)


def toeplitz_kernel(plan, weights=None):
    """Spectrum of the circulant embedding of ``A'A`` on the doubled grid.

    The returned array has shape ``2 * grid_shape`` and is real up to
    round-off because ``A'A`` is Hermitian.
    """
    double = tuple(2 * n for n in plan.grid_shape)
    big = _make_plan(plan.coords, double, plan.oversample, plan.kernel_width)
    ones = np.ones(plan.nsamples, dtype=np.complex128) if weights is None else np.asarray(
        weights, dtype=np.complex128)
    # big grid offsets run -N..N-1, i.e. lag d = p - N
    lags = adjoint(big, ones)
    # d = -N has no partner in the circulant and is never used for a crop of size N
    for ax, n in enumerate(plan.grid_shape):
        sl = [slice(None)] * plan.ndim
        sl[ax] = 0
        lags[tuple(sl)] = 0
    circ = fft.ifftshift(lags)
    return fft.fftn(circ)


def normal_apply(kernel, image):
    """Apply ``A'A`` through the Toeplitz kernel. Batch dims are allowed."""
    image = np.asarray(image)
    nd = kernel.ndim
    shape = image.shape[-nd:]
    if tuple(2 * n for n in shape) != kernel.shape:
        raise ValueError(f"image shape {shape} does not match kernel {kernel.shape}")
    axes = tuple(range(image.ndim - nd, image.ndim))
    pad = np.zeros(image.shape[:-nd] + kernel.shape, dtype=np.complex128)
    crop = (Ellipsis,) + tuple(slice(0, n) for n in shape)
    pad[crop] = image
    out = fft.ifftn(fft.fftn(pad, axes=axes) * kernel, axes=axes)
    return out[crop]


def dft_oracle(coords, image, allow_large=False):
    """Exact non-uniform DFT by direct summation, O(Ns * Nv)."""
    coords = np.asarray(coords, dtype=np.float64)
    if coords.ndim == 1:
        coords = coords[:, None]
    image = np.asarray(image)
    nd = coords.shape[1]
    if image.ndim != nd:
        raise ValueError(f"image must be {nd}-dimensional, got shape {image.shape}")
    if image.size > ORACLE_MAX_VOXELS and not allow_large:
        raise ValueError(f"dft_oracle limited to {ORACLE_MAX_VOXELS} voxels; pass allow_large=True")
    grids = np.meshgrid(*[pixel_offsets(n) for n in image.shape], indexing="ij")
    r = np.stack([g.ravel() for g in grids], axis=1).astype(np.float64)
    x = image.ravel()
    out = np.empty(coords.shape[0], dtype=np.complex128)
    step = max(1, 2**20 // max(1, x.size))
    for s in range(0, coords.shape[0], step):
        phase = coords[s:s + step] @ r.T
        out[s:s + step] = np.exp(-1j * phase) @ x
    return out
