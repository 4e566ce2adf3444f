"""Image-quality metrics and trajectory diagnostics (PSF, FWHM, Hermitian overlap)."""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage
from scipy.spatial import cKDTree

from . import nufft

PSNR_CAP = 99.0
SSIM_SIGMA = 1.5
SSIM_RADIUS = 3  # 7x7 window
SSIM_K1, SSIM_K2 = 0.01, 0.03


# --------------------------------------------------------------------------
# image metrics


def _gauss(x):
    return ndimage.gaussian_filter(x, SSIM_SIGMA, mode="reflect",
                                   truncate=SSIM_RADIUS / SSIM_SIGMA)


def ssim(x, ref):
    """SSIM of magnitude images with a 7x7 Gaussian window (sigma 1.5).

    The dynamic range is ``max|ref|``; statistics use population (biased)
    moments and the mean is taken over pixels whose window fits inside the
    image.
    """
    a = np.abs(np.asarray(x)).astype(np.float64)
    b = np.abs(np.asarray(ref)).astype(np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    rng = b.max()
    c1, c2 = (SSIM_K1 * rng) ** 2, (SSIM_K2 * rng) ** 2
    ma, mb = _gauss(a), _gauss(b)
    vaa = _gauss(a * a) - ma * ma
    vbb = _gauss(b * b) - mb * mb
    vab = _gauss(a * b) - ma * mb
    s = ((2 * ma * mb + c1) * (2 * vab + c2)) / ((ma**2 + mb**2 + c1) * (vaa + vbb + c2))
    r = SSIM_RADIUS
    return float(s[r:-r, r:-r].mean())


def psnr(x, ref):
    """PSNR in dB of magnitude images, peak ``max|ref|``, capped at 99 dB."""
    a, b = np.abs(x), np.abs(ref)
    mse = np.mean((a - b) ** 2)
    if mse == 0:
        return PSNR_CAP
    return float(min(PSNR_CAP, 10 * np.log10(b.max() ** 2 / mse)))


def summarize(values):
    v = np.asarray(values, dtype=np.float64)
    return {"mean": float(v.mean()), "std": float(v.std()), "n": int(v.size)}


# --------------------------------------------------------------------------
# point spread function


@dataclass
class PsfReport:
    psf: np.ndarray
    fwhm_pixels: float
    sidelobe_energy_ratio: float
    radii: np.ndarray = field(repr=False)
    angles: np.ndarray = field(repr=False)
    profiles: np.ndarray = field(repr=False)

    @property
    def mean_profile(self):
        return self.profiles.mean(axis=0)

    def to_json(self):
        return json.dumps({"fwhm_pixels": self.fwhm_pixels,
                           "sidelobe_energy_ratio": self.sidelobe_energy_ratio,
                           "n_angles": int(self.angles.size)}, indent=2, sort_keys=True)

    def to_csv(self):
        """One row per angle bin: angle followed by the profile at every radius."""
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["angle"] + [f"r{r:.4f}" for r in self.radii])
        for ang, prof in zip(self.angles, self.profiles):
            w.writerow([repr(float(ang))] + [repr(float(p)) for p in prof])
        return buf.getvalue()


def _profiles(coords, weights, radii, angles):
    """|PSF| sampled on rays through the origin by direct summation."""
    out = np.empty((angles.size, radii.size))
    for i, a in enumerate(angles):
        pos = np.outer(radii, [np.cos(a), np.sin(a)])
        out[i] = np.abs(np.exp(1j * pos @ coords.T) @ weights)
    return out


def _half_max_radius(profile, radii):
    below = np.flatnonzero(profile < 0.5)
    if below.size == 0:
        return float(radii[-1])
    k = below[0]
    if k == 0:
        return 0.0
    p0, p1 = profile[k - 1], profile[k]
    return float(radii[k - 1] + (p0 - 0.5) / (p0 - p1) * (radii[k] - radii[k - 1]))


def psf(coords, grid_n, dcf=None, n_angles=64, max_radius=8.0, step=0.05):
    """Point spread function of a 2D sampling pattern.

    The PSF image is the adjoint NUFFT of ones (or of ``dcf``), normalized to
    unit peak at the center. FWHM is read from the angle-averaged magnitude
    profile, which is evaluated off-grid by direct summation over samples.
    Sidelobe energy is the fraction of PSF-image energy beyond three FWHM
    from the center.
    """
    coords = np.asarray(coords, dtype=np.float64)
    if coords.ndim != 2 or coords.shape[1] != 2:
        raise ValueError("psf expects 2D coordinates of shape (Ns, 2)")
    w = np.ones(coords.shape[0]) if dcf is None else np.asarray(dcf, dtype=np.float64)
    peak = w.sum()
    if peak == 0:
        raise ValueError("PSF peak is zero (weights sum to zero)")
    p = nufft.plan(coords, (grid_n, grid_n))
    img = nufft.adjoint(p, w.astype(np.complex128)).reshape(grid_n, grid_n) / peak
    radii = np.arange(0, min(max_radius, grid_n / 2) + step / 2, step)
    angles = np.arange(n_angles) * (2 * np.pi / n_angles)
    # off-grid positions are not 2*pi periodic, so use the coordinates as given
    prof = _profiles(coords, w, radii, angles) / abs(peak)
    fwhm = 2 * _half_max_radius(prof.mean(axis=0), radii)
    off = nufft.pixel_offsets(grid_n)
    rr = np.hypot(*np.meshgrid(off, off, indexing="ij"))
    energy = np.abs(img) ** 2
    side = float(energy[rr > 3 * fwhm].sum() / energy.sum())
    return PsfReport(img, fwhm, side, radii, angles, prof)


def ramp_dcf(coords, grid_n):
    """Radial density compensation ``|omega|`` floored at one k-space cell."""
    return np.maximum(np.hypot(coords[:, 0], coords[:, 1]), np.pi / grid_n)


# --------------------------------------------------------------------------
# Hermitian symmetry


def hermitian_overlap(coords, radius_eps):
    """Fraction of samples whose reflection through DC lies within ``radius_eps``
    of some sample (distances measured on the 2*pi-periodic k-space torus)."""
    def torus(x):
        x = np.mod(x, 2 * np.pi)
        x[x >= 2 * np.pi] = 0.0  # mod can round up to the box size
        return x

    c = torus(np.asarray(coords, dtype=np.float64))
    refl = torus(-c)
    tree = cKDTree(c, boxsize=2 * np.pi)
    dist, _ = tree.query(refl, k=1, distance_upper_bound=radius_eps * (1 + 1e-12))
    return float(np.mean(np.isfinite(dist)))
