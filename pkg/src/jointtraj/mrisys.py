"""Multi-coil SENSE forward model, noise simulation, coil maps and datasets."""

from __future__ import annotations

import functools
import json
import os
from dataclasses import dataclass, field

import numpy as np

from . import nufft

SUPPORT_FRACTION = 0.05
BAND_FRACTION = 0.1
BASE_GRID = 64
IMAGE_SUFFIXES = (".png", ".npy", ".f32", ".c64")


@dataclass(frozen=True, eq=False)
class SenseModel:
    """``A(omega)``: coil weighting followed by a NUFFT, plus its Toeplitz kernel.

    ``norm`` scales the NUFFT to the orthonormal-DFT convention
    (``1/sqrt(Nv)``), so a full Cartesian grid gives ``A'A = I`` for unit RSS
    maps and the data-consistency weight ``mu`` is on a fixed scale.
    """

    smaps: np.ndarray
    plan: nufft.NufftPlan
    kernel: np.ndarray
    mask: np.ndarray
    noise_std: float = 0.0
    norm: float = 1.0

    @property
    def ncoils(self):
        return self.smaps.shape[0]

    @property
    def grid_shape(self):
        return self.plan.grid_shape


def support_mask(smaps):
    """Pixels where the raw root-sum-of-squares sensitivity exceeds 5% of its max."""
    rss = np.sqrt(np.sum(np.abs(smaps) ** 2, axis=0))
    return rss > SUPPORT_FRACTION * rss.max()


def make_model(coords, smaps, noise_std=0.0, mask=None, oversample=nufft.DEFAULT_OVERSAMPLE,
               kernel_width=nufft.DEFAULT_WIDTH):
    smaps = np.asarray(smaps, dtype=np.complex128)
    grid = smaps.shape[1:]
    p = nufft.plan(coords, grid, oversample, kernel_width)
    if mask is None:
        mask = support_mask(smaps)
    return SenseModel(smaps, p, nufft.toeplitz_kernel(p), np.asarray(mask, bool), float(noise_std),
                      1.0 / np.sqrt(p.nvoxels))


def model_factory(smaps, noise_std=0.0, mask=None, oversample=nufft.DEFAULT_OVERSAMPLE,
                  kernel_width=nufft.DEFAULT_WIDTH):
    """Return ``coords -> SenseModel`` with fixed sensitivities."""
    smaps = np.asarray(smaps, dtype=np.complex128)
    mask = support_mask(smaps) if mask is None else mask

    def factory(coords):
        return make_model(coords, smaps, noise_std, mask, oversample, kernel_width)

    return factory


def sense_forward(model, x):
    """Coil data, shape (Nc, Ns)."""
    return model.norm * nufft.forward(model.plan, model.smaps * np.asarray(x))


def sense_adjoint(model, y):
    y = np.asarray(y).reshape(model.ncoils, -1)
    return model.norm * np.sum(np.conj(model.smaps) * nufft.adjoint(model.plan, y), axis=0)


def sense_normal(model, x):
    """``A'A x`` through the Toeplitz kernel."""
    out = np.sum(np.conj(model.smaps) * nufft.normal_apply(model.kernel, model.smaps * x), axis=0)
    return model.norm**2 * out


def sample_noise(shape, std, seed):
    """Circular complex Gaussian with ``E|e|^2 = std**2``."""
    rng = np.random.default_rng(seed)
    return (std / np.sqrt(2)) * (rng.standard_normal(shape) + 1j * rng.standard_normal(shape))


def simulate_acquisition(model, x, seed, noise_std=None):
    """``y = A x + e`` with noise drawn deterministically from ``seed``."""
    y = sense_forward(model, x)
    std = model.noise_std if noise_std is None else noise_std
    if std > 0:
        y = y + sample_noise(y.shape, std, seed)
    return y


def relative_noise_std(model, images, rel=1e-3):
    """Noise level as a fraction of the mean k-space signal magnitude."""
    mags = [np.mean(np.abs(sense_forward(model, x))) for x in images]
    return rel * float(np.mean(mags))


def _gaussian_ring_maps(grid_n, ncoils, width, ring, seed):
    r = nufft.pixel_offsets(grid_n) / (grid_n / 2)
    yy, xx = np.meshgrid(r, r, indexing="ij")
    rng = np.random.default_rng(seed)
    maps = []
    for c in range(ncoils):
        ang = 2 * np.pi * c / ncoils
        cx, cy = ring * np.cos(ang), ring * np.sin(ang)
        mag = np.exp(-((xx - cx) ** 2 + (yy - cy) ** 2) / (2 * width**2))
        phase = ang + 0.3 * rng.standard_normal() * (xx * np.cos(ang) + yy * np.sin(ang))
        maps.append(mag * np.exp(1j * phase))
    return np.array(maps)


def _lowpass_mask(n, frac=BAND_FRACTION):
    f = np.fft.fftfreq(n)
    fy, fx = np.meshgrid(f, f, indexing="ij")
    return np.maximum(np.abs(fy), np.abs(fx)) <= frac * 0.5


def _rss_normalize(maps):
    return maps / np.sqrt(np.sum(np.abs(maps) ** 2, axis=0))


@functools.lru_cache(maxsize=16)
def _coil_maps(grid_n, ncoils, width, ring, seed):
    base = min(grid_n, BASE_GRID)
    maps = _gaussian_ring_maps(base, ncoils, width, ring, seed)
    # alternate between the band-limited set and the RSS == 1 set
    keep = _lowpass_mask(base)
    for _ in range(1000):
        maps = _rss_normalize(np.fft.ifft2(np.fft.fft2(maps) * keep))
    if grid_n > base:
        spec = np.fft.fftshift(np.fft.fft2(maps), axes=(-2, -1))
        big = np.zeros((ncoils, grid_n, grid_n), dtype=np.complex128)
        o = grid_n // 2 - base // 2
        big[:, o:o + base, o:o + base] = spec
        maps = np.fft.ifft2(np.fft.ifftshift(big, axes=(-2, -1))) * (grid_n / base) ** 2
        maps = _rss_normalize(maps)
    maps.setflags(write=False)
    return maps


def synth_coil_maps(grid_n, ncoils, width=0.6, ring=1.0, seed=0):
    """Smooth complex sensitivities from Gaussians on a ring, RSS-normalized to 1.

    ``width`` is the Gaussian sigma and ``ring`` the ring radius, both in units
    of half the field of view. The raw Gaussians are projected alternately onto
    maps whose spectrum vanishes beyond 10% of Nyquist and onto maps with unit
    root-sum-of-squares, so the result is both smooth and exactly normalized.
    """
    if ncoils == 1:
        return np.ones((1, grid_n, grid_n), dtype=np.complex128)
    return _coil_maps(int(grid_n), int(ncoils), float(width), float(ring), int(seed)).copy()


# --------------------------------------------------------------------------
# datasets


@dataclass
class Dataset:
    images: np.ndarray
    split: dict = field(default_factory=dict)
    grid_n: int = 0

    def subset(self, name):
        return self.images[self.split[name]]


def image_support(x, frac=0.01):
    mag = np.abs(x)
    return mag > frac * mag.max()


def normalize_median(x):
    """Scale so that the median magnitude over the image support is 1."""
    sup = image_support(x)
    if not sup.any():
        return x
    return x / np.median(np.abs(x[sup]))


def _split(n, fractions, seed):
    order = np.random.default_rng(seed).permutation(n)
    n_train = int(round(fractions[0] * n))
    n_val = int(round(fractions[1] * n))
    return {
        "train": np.sort(order[:n_train]),
        "val": np.sort(order[n_train:n_train + n_val]),
        "test": np.sort(order[n_train + n_val:]),
    }


# modified Shepp-Logan: (intensity, a, b, x0, y0, phi_deg)
_SHEPP_LOGAN = [
    (1.0, 0.69, 0.92, 0.0, 0.0, 0.0),
    (-0.8, 0.6624, 0.874, 0.0, -0.0184, 0.0),
    (-0.2, 0.11, 0.31, 0.22, 0.0, -18.0),
    (-0.2, 0.16, 0.41, -0.22, 0.0, 18.0),
    (0.1, 0.21, 0.25, 0.0, 0.35, 0.0),
    (0.1, 0.046, 0.046, 0.0, 0.1, 0.0),
    (0.1, 0.046, 0.046, 0.0, -0.1, 0.0),
    (0.1, 0.046, 0.023, -0.08, -0.605, 0.0),
    (0.1, 0.023, 0.023, 0.0, -0.606, 0.0),
    (0.1, 0.023, 0.046, 0.06, -0.605, 0.0),
]


def _ellipse_image(grid_n, ellipses):
    r = (np.arange(grid_n) - grid_n / 2 + 0.5) / (grid_n / 2)
    yy, xx = np.meshgrid(-r, r, indexing="ij")
    img = np.zeros((grid_n, grid_n))
    for val, a, b, x0, y0, phi in ellipses:
        c, s = np.cos(np.radians(phi)), np.sin(np.radians(phi))
        xr = (xx - x0) * c + (yy - y0) * s
        yr = -(xx - x0) * s + (yy - y0) * c
        img[(xr / a) ** 2 + (yr / b) ** 2 <= 1] += val
    return img


def shepp_logan(grid_n):
    return _ellipse_image(grid_n, _SHEPP_LOGAN)


def random_phantom(grid_n, rng):
    """Shepp-Logan-style ellipse composition with smooth random phase."""
    ells = []
    scale = rng.uniform(0.8, 1.0)
    rot = rng.uniform(-20, 20)
    cr, sr = np.cos(np.radians(rot)), np.sin(np.radians(rot))
    for k, (val, a, b, x0, y0, phi) in enumerate(_SHEPP_LOGAN):
        if k >= 2:
            val = val * rng.uniform(0.5, 1.5)
            a = a * rng.uniform(0.7, 1.3)
            b = b * rng.uniform(0.7, 1.3)
            x0 = x0 + rng.uniform(-0.05, 0.05)
            y0 = y0 + rng.uniform(-0.05, 0.05)
            phi = phi + rng.uniform(-30, 30)
        xs, ys = scale * (cr * x0 - sr * y0), scale * (sr * x0 + cr * y0)
        ells.append((val, scale * a, scale * b, xs, ys, phi + rot))
    for _ in range(rng.integers(2, 6)):
        ells.append((rng.uniform(-0.15, 0.25), rng.uniform(0.03, 0.15), rng.uniform(0.03, 0.15),
                     rng.uniform(-0.35, 0.35), rng.uniform(-0.5, 0.5), rng.uniform(0, 180)))
    mag = np.clip(_ellipse_image(grid_n, ells), 0, None)
    r = (np.arange(grid_n) - grid_n / 2) / (grid_n / 2)
    yy, xx = np.meshgrid(r, r, indexing="ij")
    cx, cy, cxy, cxx, cyy = rng.normal(0, 0.6, 5)
    phase = cx * xx + cy * yy + cxy * xx * yy + 0.5 * (cxx * xx**2 + cyy * yy**2)
    return mag * np.exp(1j * phase)


def gen_phantoms(n, grid_n, seed, fractions=(0.6, 0.2, 0.2)):
    """Deterministic random phantom dataset with a train/val/test split."""
    rng = np.random.default_rng(seed)
    imgs = np.array([normalize_median(random_phantom(grid_n, rng)) for _ in range(n)])
    return Dataset(imgs, _split(n, fractions, seed), grid_n)


def center_fit(x, grid_n):
    """Center-crop or zero-pad a 2D array to ``grid_n`` x ``grid_n``."""
    out = np.zeros((grid_n, grid_n), dtype=x.dtype)
    src, dst = [], []
    for n in x.shape:
        if n >= grid_n:
            s = (n - grid_n) // 2
            src.append(slice(s, s + grid_n))
            dst.append(slice(0, grid_n))
        else:
            s = (grid_n - n) // 2
            src.append(slice(0, n))
            dst.append(slice(s, s + n))
    out[tuple(dst)] = x[tuple(src)]
    return out


def read_image(path):
    """Read one image file: PNG magnitude, ``.npy``, or raw ``.f32``/``.c64`` with a JSON sidecar."""
    path = os.fspath(path)
    ext = os.path.splitext(path)[1].lower()
    if ext == ".png":
        from PIL import Image

        with Image.open(path) as im:
            return np.asarray(im.convert("F"), dtype=np.float64)
    if ext == ".npy":
        return np.load(path)
    if ext in (".f32", ".c64"):
        with open(os.path.splitext(path)[0] + ".json") as f:
            meta = json.load(f)
        dtype = "<c8" if ext == ".c64" else "<f4"
        return np.fromfile(path, dtype=dtype).reshape(meta["shape"])
    raise ValueError(f"unsupported image file {path}")


def load_images(directory, grid_n, seed=0, fractions=(0.6, 0.2, 0.2)):
    """Ingest every supported image in ``directory`` (sorted by name)."""
    names = sorted(f for f in os.listdir(directory) if f.lower().endswith(IMAGE_SUFFIXES))
    if not names:
        raise ValueError(f"no images found in {directory}")
    imgs = []
    for name in names:
        x = np.asarray(read_image(os.path.join(directory, name)))
        if x.ndim != 2:
            raise ValueError(f"{name}: expected a 2D image, got shape {x.shape}")
        imgs.append(normalize_median(center_fit(x.astype(np.complex128), grid_n)))
    return Dataset(np.array(imgs), _split(len(imgs), fractions, seed), grid_n)
