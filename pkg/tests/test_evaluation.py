import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from jointtraj import evaluation, mrisys, nufft, trajectory
from oracles import cartesian_fwhm, ssim_windows

# frozen from oracles.ssim_windows on the case built in noisy_pair()
SSIM_GOLDEN = 0.5789312457275759


def noisy_pair():
    ref = np.abs(mrisys.shepp_logan(64))
    rng = np.random.default_rng(2024)
    return ref + rng.uniform(0, 0.1 * ref.max(), ref.shape), ref


def cartesian_coords(n):
    k = 2 * np.pi * nufft.pixel_offsets(n) / n
    ky, kx = np.meshgrid(k, k, indexing="ij")
    return np.stack([ky.ravel(), kx.ravel()], 1)


def rotate(coords, ang):
    c, s = np.cos(ang), np.sin(ang)
    return coords @ np.array([[c, s], [-s, c]])


def test_ssim_golden():
    x, ref = noisy_pair()
    assert evaluation.ssim(x, ref) == pytest.approx(SSIM_GOLDEN, abs=1e-12)


def test_ssim_matches_window_oracle(rng):
    ref = np.abs(mrisys.gen_phantoms(1, 24, 4).images[0])
    x = ref + 0.2 * rng.standard_normal(ref.shape)
    assert evaluation.ssim(x, ref) == pytest.approx(ssim_windows(x, ref), abs=1e-12)


def test_ssim_identity_and_psnr_cap(rng):
    x = rng.standard_normal((32, 32)) + 1j * rng.standard_normal((32, 32))
    assert evaluation.ssim(x, x) == pytest.approx(1.0, abs=1e-12)
    assert evaluation.psnr(x, x) == 99.0


def test_ssim_uses_magnitude(rng):
    x = np.abs(rng.standard_normal((16, 16)))
    assert evaluation.ssim(x * np.exp(1j * rng.uniform(0, 6, x.shape)), x) == pytest.approx(1.0)


def test_ssim_shape_mismatch():
    with pytest.raises(ValueError):
        evaluation.ssim(np.ones((8, 8)), np.ones((8, 9)))


def test_psnr_value():
    ref = np.zeros((4, 4))
    ref[0, 0] = 2.0
    x = ref.copy()
    x[1, 1] = 0.5  # mse = 0.25 / 16
    assert evaluation.psnr(x, ref) == pytest.approx(10 * np.log10(4 / (0.25 / 16)))


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 2**31 - 1), s1=st.floats(0.01, 1.0), s2=st.floats(0.01, 1.0))
def test_psnr_monotone_and_ssim_bounded(seed, s1, s2):
    rng = np.random.default_rng(seed)
    ref = np.abs(rng.standard_normal((16, 16))) + 1
    e = rng.standard_normal(ref.shape)
    lo, hi = sorted([s1, s2])
    assert evaluation.psnr(ref + lo * e, ref) >= evaluation.psnr(ref + hi * e, ref)
    v = evaluation.ssim(ref + hi * e, ref)
    assert -1 <= v <= 1


def test_summarize():
    s = evaluation.summarize([1.0, 2.0, 3.0])
    assert s == {"mean": 2.0, "std": pytest.approx(np.sqrt(2 / 3)), "n": 3}


@pytest.mark.parametrize("n", [32, 64])
def test_cartesian_fwhm_matches_dirichlet(n):
    rep = evaluation.psf(cartesian_coords(n), n)
    assert rep.fwhm_pixels == pytest.approx(cartesian_fwhm(n), abs=5e-3)
    assert abs(rep.psf[n // 2, n // 2]) == pytest.approx(1.0, abs=1e-4)
    # a full grid puts all energy in the central pixel
    assert rep.sidelobe_energy_ratio < 1e-6


def test_psf_rotation_invariant_fwhm():
    traj = trajectory.gen_radial(32, 128, grid_n=64)
    w = evaluation.ramp_dcf(traj.coords, 64)
    a = evaluation.psf(traj.coords, 64, dcf=w).fwhm_pixels
    b = evaluation.psf(rotate(traj.coords, np.pi / 2), 64, dcf=w).fwhm_pixels
    assert abs(a - b) < 1e-6


def test_psf_undersampling_widens_sidelobes():
    full = evaluation.psf(trajectory.gen_radial(64, 128, grid_n=64).coords, 64)
    sparse = evaluation.psf(trajectory.gen_radial(8, 128, grid_n=64).coords, 64)
    assert sparse.sidelobe_energy_ratio > full.sidelobe_energy_ratio


def test_psf_exports():
    rep = evaluation.psf(trajectory.gen_radial(8, 64, grid_n=32).coords, 32, n_angles=16)
    rows = rep.to_csv().strip().split("\n")
    assert len(rows) == 1 + 16
    assert len(rows[1].split(",")) == 1 + rep.radii.size
    meta = json.loads(rep.to_json())
    assert meta["n_angles"] == 16 and meta["fwhm_pixels"] > 0


def test_psf_rejects_bad_input():
    with pytest.raises(ValueError):
        evaluation.psf(np.zeros((4, 1)), 16)
    with pytest.raises(ValueError):
        evaluation.psf(np.zeros((4, 2)), 16, dcf=np.zeros(4))


def test_ramp_dcf_floor():
    w = evaluation.ramp_dcf(np.array([[0.0, 0.0], [3.0, 4.0]]), 64)
    np.testing.assert_allclose(w, [np.pi / 64, 5.0])


def test_hermitian_overlap_radial():
    traj = trajectory.gen_radial(16, 256, grid_n=64)
    # one endpoint per spoke (-pi) reflects onto +pi, which the spoke never reaches
    assert evaluation.hermitian_overlap(traj.coords, 1e-6) > 0.99


def test_hermitian_overlap_half_line():
    r = np.linspace(0, 2.5, 50)
    c = np.stack([r, 0 * r], 1)
    assert evaluation.hermitian_overlap(c, 1e-6) == pytest.approx(1 / 50)


@settings(max_examples=15, deadline=None)
@given(seed=st.integers(0, 2**31 - 1), ang=st.floats(0, 2 * np.pi))
def test_hermitian_overlap_rotation_invariant(seed, ang):
    rng = np.random.default_rng(seed)
    pts = rng.uniform(-1.5, 1.5, (40, 2))
    c = np.concatenate([pts, -pts[:20]])  # half the points have partners
    a = evaluation.hermitian_overlap(c, 1e-6)
    b = evaluation.hermitian_overlap(rotate(c, ang), 1e-6)
    assert a == b and 0 <= a <= 1


def test_hermitian_overlap_periodic():
    c = np.array([[np.pi - 1e-3, 0.0], [-np.pi + 2e-3, 0.0]])
    # reflections wrap around the torus and land within 1e-3 of the other sample
    assert evaluation.hermitian_overlap(c, 2e-3) == 1.0
