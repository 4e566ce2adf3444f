"""Multi-level joint optimization of spline coefficients and denoiser thresholds.

The loop is written as a resumable state machine: :class:`TrainState` holds
everything needed to continue (parameters, Adam moments, counters, frozen
penalty weights, metric history), so a checkpoint taken between any two
steps continues bit-identically.
"""

from __future__ import annotations

import dataclasses
import hashlib
import io
import json
import struct
from dataclasses import dataclass, field

import numpy as np

from . import fileio
from .grad import batch_loss, loss_and_grad
from .mrisys import relative_noise_std, sample_noise
from .recon import UnrolledConfig
from .trajectory import (HardwareLimits, SplineParam, Trajectory, is_feasible, materialize,
                         penalty_parts, refit)

CKPT_MAGIC = b"JTCKPT"
CKPT_VERSION = 1
PRETRAIN = -1  # level index used while pre-training theta


@dataclass(frozen=True)
class TrainConfig:
    """Optimizer settings.

    ``mu1``/``mu2`` of ``None`` are calibrated at the first trajectory step as
    ``mu_factor * max|dl/domega|`` and then frozen. Training thresholds are the
    hardware limits times ``penalty_margin`` so the final trajectory clears
    the true limits.
    """

    n_levels: int = 4
    epochs_per_level: int = 3
    batch_size: int = 4
    lr_omega: float = 1e-3
    lr_theta: float = 1e-5
    adam_betas: tuple = (0.5, 0.999)
    mu1: float | None = None
    mu2: float | None = None
    decim_schedule: tuple = (64, 32, 16, 8)
    seed: int = 0
    parameterize: bool = True
    pretrain_epochs: int = 1
    mu_factor: float = 10.0
    penalty_margin: float = 0.9
    noise_rel: float = 1e-3

    def __post_init__(self):
        object.__setattr__(self, "decim_schedule", tuple(int(d) for d in self.decim_schedule))
        object.__setattr__(self, "adam_betas", tuple(float(b) for b in self.adam_betas))
        ds = self.decim_schedule
        if len(ds) != self.n_levels:
            raise ValueError(f"decim_schedule has {len(ds)} entries, n_levels={self.n_levels}")
        if any(b >= a for a, b in zip(ds, ds[1:])):
            raise ValueError("decim_schedule must be strictly decreasing")
        if any(d < 1 for d in ds):
            raise ValueError("decimation rates must be >= 1")
        if not (self.lr_omega > 0 and self.lr_theta > 0):
            raise ValueError("learning rates must be positive")
        if self.batch_size < 1 or self.epochs_per_level < 0 or self.pretrain_epochs < 0:
            raise ValueError("batch_size >= 1 and epoch counts >= 0 required")
        if not 0 < self.penalty_margin <= 1:
            raise ValueError("penalty_margin must be in (0, 1]")
        if not all(0 <= b < 1 for b in self.adam_betas) or len(self.adam_betas) != 2:
            raise ValueError("adam_betas must be two numbers in [0, 1)")


def config_hash(*configs):
    """sha256 over the JSON form of dataclass configs."""
    blob = json.dumps([dataclasses.asdict(c) for c in configs], sort_keys=True).encode()
    return hashlib.sha256(blob).digest()


# --------------------------------------------------------------------------
# Adam


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    t: int = 0

    @classmethod
    def zeros_like(cls, x):
        return cls(np.zeros_like(x, dtype=np.float64), np.zeros_like(x, dtype=np.float64), 0)


def adam_step(params, grad, state, lr, betas=(0.5, 0.999), eps=1e-8):
    """One bias-corrected Adam update; returns ``(new_params, new_state)``."""
    b1, b2 = betas
    t = state.t + 1
    m = b1 * state.m + (1 - b1) * grad
    v = b2 * state.v + (1 - b2) * grad**2
    mhat = m / (1 - b1**t)
    vhat = v / (1 - b2**t)
    return params - lr * mhat / (np.sqrt(vhat) + eps), AdamState(m, v, t)


# --------------------------------------------------------------------------
# state


@dataclass
class TrainState:
    coeffs: np.ndarray
    decim: int
    theta: np.ndarray
    adam_c: AdamState
    adam_theta: AdamState
    noise_std: float
    nshots: int
    samples_per_shot: int
    dt: float
    fov: float
    grid_n: int
    level: int = PRETRAIN
    epoch: int = 0
    step: int = 0
    global_step: int = 0
    mu1: float | None = None
    mu2: float | None = None
    best_theta: np.ndarray | None = None
    best_val: float | None = None
    done: bool = False
    history: list = field(default_factory=list)

    def spline(self):
        return SplineParam.create(self.coeffs, self.nshots, self.samples_per_shot, self.decim)

    def trajectory(self):
        return Trajectory(materialize(self.spline()), self.nshots, self.samples_per_shot,
                          self.dt, self.fov, self.grid_n)


def dumps_state(state, chash=b"\0" * 32):
    """Checkpoint blob: magic, u32 version, 32-byte config hash, u64 meta length,
    JSON meta, then an ``.npz`` archive with the arrays (all f64)."""
    arrays = {"coeffs": state.coeffs, "theta": state.theta,
              "adam_c_m": state.adam_c.m, "adam_c_v": state.adam_c.v,
              "adam_theta_m": state.adam_theta.m, "adam_theta_v": state.adam_theta.v}
    if state.best_theta is not None:
        arrays["best_theta"] = state.best_theta
    meta = {k: getattr(state, k) for k in (
        "decim", "noise_std", "nshots", "samples_per_shot", "dt", "fov", "grid_n", "level",
        "epoch", "step", "global_step", "mu1", "mu2", "best_val", "done", "history")}
    meta["adam_c_t"] = state.adam_c.t
    meta["adam_theta_t"] = state.adam_theta.t
    mbytes = json.dumps(meta).encode()
    buf = io.BytesIO()
    np.savez(buf, **arrays)
    return (CKPT_MAGIC + struct.pack("<I", CKPT_VERSION) + chash + struct.pack("<Q", len(mbytes))
            + mbytes + buf.getvalue())


def loads_state(blob, chash=None):
    n = len(CKPT_MAGIC)
    if blob[:n] != CKPT_MAGIC:
        raise ValueError("not a checkpoint file")
    (version,) = struct.unpack_from("<I", blob, n)
    if version != CKPT_VERSION:
        raise ValueError(f"unsupported checkpoint version {version}")
    stored = blob[n + 4:n + 36]
    if chash is not None and stored != chash:
        raise ValueError("checkpoint was written with a different configuration")
    (mlen,) = struct.unpack_from("<Q", blob, n + 36)
    off = n + 44
    meta = json.loads(blob[off:off + mlen].decode())
    arrs = np.load(io.BytesIO(blob[off + mlen:]))
    return TrainState(
        coeffs=arrs["coeffs"], decim=meta["decim"], theta=arrs["theta"],
        adam_c=AdamState(arrs["adam_c_m"], arrs["adam_c_v"], meta["adam_c_t"]),
        adam_theta=AdamState(arrs["adam_theta_m"], arrs["adam_theta_v"], meta["adam_theta_t"]),
        noise_std=meta["noise_std"], nshots=meta["nshots"],
        samples_per_shot=meta["samples_per_shot"], dt=meta["dt"], fov=meta["fov"],
        grid_n=meta["grid_n"], level=meta["level"], epoch=meta["epoch"], step=meta["step"],
        global_step=meta["global_step"], mu1=meta["mu1"], mu2=meta["mu2"],
        best_theta=arrs["best_theta"] if "best_theta" in arrs.files else None,
        best_val=meta["best_val"], done=meta["done"], history=meta["history"])


def save_checkpoint(path, state, chash=b"\0" * 32):
    fileio.atomic_write_bytes(path, dumps_state(state, chash))


def load_checkpoint(path, chash=None):
    with open(path, "rb") as f:
        return loads_state(f.read(), chash)


# --------------------------------------------------------------------------
# training loop


def init_state(init_traj, theta0, model_factory, train_images, config):
    """Fresh state: nonparametric coordinates of ``init_traj`` and ``theta0``."""
    model = model_factory(init_traj.coords)
    noise = relative_noise_std(model, train_images, config.noise_rel) if config.noise_rel else 0.0
    theta0 = np.asarray(theta0, dtype=np.float64).copy()
    coeffs = init_traj.coords.copy()
    return TrainState(coeffs=coeffs, decim=0, theta=theta0,
                      adam_c=AdamState.zeros_like(coeffs), adam_theta=AdamState.zeros_like(theta0),
                      noise_std=float(noise), nshots=init_traj.nshots,
                      samples_per_shot=init_traj.samples_per_shot, dt=init_traj.dt,
                      fov=init_traj.fov, grid_n=init_traj.grid_n)


def _steps_per_epoch(n_train, batch_size):
    return n_train // batch_size


def _noises(state, config, shape, level, epoch, step, n):
    if state.noise_std <= 0:
        return None
    return [sample_noise(shape, state.noise_std, [config.seed, level + 1, epoch, step, i])
            for i in range(n)]


def _batch_indices(config, level, epoch, step, n_train):
    rng = np.random.default_rng([config.seed, level + 1, epoch])
    order = rng.permutation(n_train)
    b = config.batch_size
    return order[step * b:(step + 1) * b]


def _val_noises(state, config, shape, n):
    if state.noise_std <= 0:
        return None
    return [sample_noise(shape, state.noise_std, [config.seed, 999_999, i]) for i in range(n)]


def validation_loss(state, theta, coords, model_factory, unrolled, val_images, config):
    if len(val_images) == 0:
        return 0.0
    model = model_factory(coords)
    shape = (model.ncoils, model.plan.nsamples)
    return batch_loss(val_images, coords, theta, model_factory, unrolled,
                      _val_noises(state, config, shape, len(val_images)))


def _limits_thresholds(state, limits, margin):
    lam_g, lam_s = limits.thresholds(state.fov, state.grid_n)
    return margin * lam_g, margin * lam_s


def _start_level(state, config, level):
    """Refit the current trajectory at the level's decimation and reset c moments."""
    decim = config.decim_schedule[level] if config.parameterize else 0
    decim = min(decim, state.samples_per_shot) if decim else 0
    spline, resid = refit(state.trajectory(), decim)
    state.coeffs = spline.coeffs
    state.decim = decim
    state.adam_c = AdamState.zeros_like(spline.coeffs)
    return resid


def train_step(state, images, model_factory, unrolled, config, limits):
    """Run one optimizer step from ``state`` (mutated in place); returns the log record."""
    n_train = len(images)
    spe = _steps_per_epoch(n_train, config.batch_size)
    idx = _batch_indices(config, state.level, state.epoch, state.step, n_train)
    batch = [images[i] for i in idx]
    spline = state.spline()
    coords = materialize(spline)
    model = model_factory(coords)
    shape = (model.ncoils, model.plan.nsamples)
    noises = _noises(state, config, shape, state.level, state.epoch, state.step, len(batch))

    if state.level == PRETRAIN:
        total = max(config.pretrain_epochs * spe, 1)
        k = state.epoch * spe + state.step
        lr_t = config.lr_theta * (1 - k / total)
        tg = loss_and_grad(batch, spline, state.theta, model_factory, unrolled, None, noises,
                           need_omega=False)
        lr_w = 0.0
        lam_g, lam_s = _limits_thresholds(state, limits, 1.0)
        parts = penalty_parts(coords, state.nshots, lam_g, lam_s, 1.0, 1.0)
        gpen, spen = parts.grad_penalty, parts.slew_penalty
    else:
        total = max(config.epochs_per_level * spe, 1)
        k = state.epoch * spe + state.step
        frac = 1 - k / total
        lr_w, lr_t = config.lr_omega * frac, config.lr_theta * frac
        lam_g, lam_s = _limits_thresholds(state, limits, config.penalty_margin)
        if state.mu1 is None or state.mu2 is None:
            tg0 = loss_and_grad(batch, spline, state.theta, model_factory, unrolled, None, noises)
            scale = config.mu_factor * float(np.abs(tg0.d_omega_recon).max())
            state.mu1 = scale if config.mu1 is None else config.mu1
            state.mu2 = scale if config.mu2 is None else config.mu2
        mu1, mu2 = state.mu1, state.mu2
        pfn = (lambda c: penalty_parts(c, state.nshots, lam_g, lam_s, mu1, mu2))
        tg = loss_and_grad(batch, spline, state.theta, model_factory, unrolled, pfn, noises)
        gpen, spen = tg.g_penalty, tg.s_penalty
        state.coeffs, state.adam_c = adam_step(state.coeffs, tg.d_coeffs, state.adam_c, lr_w,
                                               config.adam_betas)
    theta, state.adam_theta = adam_step(state.theta, tg.d_theta, state.adam_theta, lr_t,
                                        config.adam_betas)
    # thresholds stay non-negative; the approximation band is never shrunk
    theta = np.maximum(theta, 0.0)
    theta[0] = 0.0
    state.theta = theta
    rec = {"step": state.global_step, "level": state.level, "epoch": state.epoch,
           "recon_loss": float(tg.recon_loss), "g_penalty": float(gpen),
           "s_penalty": float(spen), "lr_omega": float(lr_w), "lr_theta": float(lr_t)}
    state.history.append(rec)
    state.global_step += 1
    state.step += 1
    return rec


def _advance(state, config, n_train, val_fn):
    """Move counters past finished epochs/levels; returns False once training is done."""
    spe = _steps_per_epoch(n_train, config.batch_size)
    while True:
        if state.done:
            return False
        epochs = config.pretrain_epochs if state.level == PRETRAIN else config.epochs_per_level
        if state.step < spe and state.epoch < epochs:
            return True
        if state.step >= spe:
            state.step = 0
            state.epoch += 1
            if state.level == PRETRAIN:
                val = val_fn(state.theta)
                if state.best_val is None or val <= state.best_val:
                    state.best_val, state.best_theta = float(val), state.theta.copy()
            continue
        # level finished
        if state.level == PRETRAIN:
            if state.best_theta is not None:
                state.theta = state.best_theta.copy()
        state.level += 1
        state.epoch = 0
        state.step = 0
        if state.level >= config.n_levels:
            state.done = True
            return False
        _start_level(state, config, state.level)


@dataclass
class FitResult:
    trajectory: Trajectory
    theta: np.ndarray
    report: list
    feasible: bool
    state: TrainState


def fit(images, val_images, init_traj, theta0, model_factory, unrolled=UnrolledConfig(),
        config=TrainConfig(), limits=HardwareLimits(), state=None, max_steps=None,
        checkpoint=None, report_path=None, chash=None, on_step=None):
    """Pre-train theta, then optimize trajectory and theta level by level.

    Parameters
    ----------
    images, val_images : sequences of ground-truth images
    init_traj : Trajectory
        Initialization (also fixes shot layout and physical scaling).
    theta0 : initial denoiser thresholds
    model_factory : ``coords -> SenseModel``
    state : TrainState, optional
        Resume from this state instead of starting fresh.
    max_steps : int, optional
        Stop after this many optimizer steps in this call (for checkpointing).
    checkpoint : path, optional
        Written atomically after every step and at the end.
    report_path : path, optional
        JSON-lines metric report, rewritten from the full history.
    """
    images = list(images)
    val_images = list(val_images)
    if chash is None:
        chash = config_hash(config, unrolled, limits)
    if state is None:
        state = init_state(init_traj, theta0, model_factory, images, config)
        state.best_theta, state.best_val = None, None
    if _steps_per_epoch(len(images), config.batch_size) == 0:
        raise ValueError(f"need at least batch_size={config.batch_size} training images")

    def val_fn(theta):
        return validation_loss(state, theta, materialize(state.spline()), model_factory,
                               unrolled, val_images, config)

    if (state.level == PRETRAIN and state.best_val is None and state.global_step == 0
            and config.pretrain_epochs > 0):
        state.best_val, state.best_theta = float(val_fn(state.theta)), state.theta.copy()
    taken = 0
    while _advance(state, config, len(images), val_fn):
        if max_steps is not None and taken >= max_steps:
            break
        rec = train_step(state, images, model_factory, unrolled, config, limits)
        taken += 1
        if on_step is not None:
            on_step(rec)
        if checkpoint is not None:
            save_checkpoint(checkpoint, state, chash)
    if checkpoint is not None:
        save_checkpoint(checkpoint, state, chash)
    traj = state.trajectory()
    if report_path is not None:
        write_report(report_path, state.history)
    return FitResult(traj, state.theta.copy(), list(state.history), is_feasible(traj, limits),
                     state)


def pretrain_theta(images, val_images, traj, theta0, model_factory, unrolled=UnrolledConfig(),
                   config=TrainConfig(), limits=HardwareLimits()):
    """Adam on theta alone with the trajectory frozen; returns the best-validation theta."""
    cfg = dataclasses.replace(config, n_levels=0, decim_schedule=())
    return fit(images, val_images, traj, theta0, model_factory, unrolled, cfg, limits).theta


def report_lines(history):
    return "".join(json.dumps(rec, sort_keys=True) + "\n" for rec in history)


def write_report(path, history):
    fileio.atomic_write_text(path, report_lines(history))
