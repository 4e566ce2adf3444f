"""Desk-scale experiment harness shared by scripts and the acceptance tests.

Setting: 64 x 64 random phantoms, 4 synthetic coils, an 8-spoke in-out radial
initialization with 256 samples per spoke, and a [16, 8, 4] decimation
schedule with two epochs per level.
"""

from __future__ import annotations

import dataclasses
import time
from dataclasses import dataclass

import numpy as np

from . import evaluation, mrisys, recon, train, trajectory

DESK_GRID = 64
DESK_SPOKES = 8
DESK_READ = 256
DESK_COILS = 4


@dataclass
class DeskSetup:
    train_images: np.ndarray
    val_images: np.ndarray
    test_images: np.ndarray
    init_traj: trajectory.Trajectory
    factory: object
    unrolled: recon.UnrolledConfig
    train_config: train.TrainConfig
    limits: trajectory.HardwareLimits


def desk_train_config(**overrides):
    base = dict(n_levels=3, epochs_per_level=2, batch_size=4, lr_omega=5e-3, lr_theta=5e-3,
                decim_schedule=(16, 8, 4), pretrain_epochs=1, seed=0)
    base.update(overrides)
    return train.TrainConfig(**base)


def desk_setup(n_images=60, seed=0, unrolled=None, **train_overrides):
    ds = mrisys.gen_phantoms(n_images, DESK_GRID, seed)
    traj = trajectory.gen_radial(DESK_SPOKES, DESK_READ, grid_n=DESK_GRID)
    smaps = mrisys.synth_coil_maps(DESK_GRID, DESK_COILS)
    return DeskSetup(ds.subset("train"), ds.subset("val"), ds.subset("test"), traj,
                     mrisys.model_factory(smaps), unrolled or recon.UnrolledConfig(),
                     desk_train_config(**train_overrides), trajectory.HardwareLimits())


def run_fit(setup, **kwargs):
    t0 = time.perf_counter()
    res = train.fit(setup.train_images, setup.val_images, setup.init_traj, recon.default_theta(),
                    setup.factory, setup.unrolled, setup.train_config, setup.limits, **kwargs)
    return res, time.perf_counter() - t0


def retrain_theta(setup, coords, unrolled=None, epochs=3, theta0=None):
    """Denoiser thresholds trained from scratch with the trajectory frozen."""
    unrolled = unrolled or setup.unrolled
    cfg = dataclasses.replace(setup.train_config, n_levels=0, decim_schedule=(),
                              pretrain_epochs=epochs)
    theta0 = recon.default_theta() if theta0 is None else theta0
    return train.pretrain_theta(setup.train_images, setup.val_images,
                                setup.init_traj.with_coords(coords), theta0, setup.factory,
                                unrolled, cfg, setup.limits)


def heldout_ssim(setup, coords, theta, unrolled=None, noise_std=None, seed=1000):
    """Per-image SSIM of the unrolled reconstruction on the test split."""
    unrolled = unrolled or setup.unrolled
    model = setup.factory(coords)
    if noise_std is None:
        noise_std = mrisys.relative_noise_std(setup.factory(setup.init_traj.coords),
                                              setup.train_images, setup.train_config.noise_rel)
    out = []
    for i, x in enumerate(setup.test_images):
        y = mrisys.simulate_acquisition(model, x, [seed, i], noise_std)
        out.append(evaluation.ssim(recon.unrolled_recon(model, y, unrolled, theta).image, x))
    return np.array(out)


def mean_displacement(coords, ref):
    return float(np.mean(np.linalg.norm(np.asarray(coords) - np.asarray(ref), axis=1)))
