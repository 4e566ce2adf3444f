"""Model-based reconstruction: CG, roughness-regularized init, unrolled alternation, PDHG."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import wavelet
from .mrisys import sense_adjoint, sense_forward, sense_normal


class NotHermitianError(ValueError):
    pass


def default_theta(levels=wavelet.LEVELS, detail=0.05):
    theta = np.full(wavelet.n_subbands(levels), detail)
    theta[0] = 0.0
    return theta


@dataclass(frozen=True)
class UnrolledConfig:
    n_blocks: int = 6
    mu: float = 2.0
    cg_iters: int = 6
    cg_tol: float = 1e-6
    init_lambda: float = 0.02
    init_cg_iters: int = 10
    init_mode: str = "roughness"

    def __post_init__(self):
        if not self.mu > 0:
            raise ValueError("mu must be positive")
        if self.n_blocks < 0:
            raise ValueError("n_blocks must be >= 0")
        if self.init_mode not in ("roughness", "adjoint"):
            raise ValueError(f"unknown init_mode {self.init_mode!r}")


@dataclass
class ReconResult:
    image: np.ndarray
    per_block_residuals: list
    cg_residuals: list
    tape: dict = field(default=None, repr=False)


def _dot(a, b):
    return np.vdot(a, b)


def cg_solve(apply_h, b, iters, tol=1e-6):
    """Conjugate gradients for Hermitian positive-definite ``apply_h`` from x = 0.

    Returns ``(x, residuals)`` where ``residuals[k]`` is ``||b - H x_k|| / ||b||``
    after ``k`` iterations (``residuals[0] == 1``).
    """
    b = np.asarray(b, dtype=np.complex128)
    x = np.zeros_like(b)
    bnorm = np.linalg.norm(b)
    if bnorm == 0:
        return x, [0.0]
    r = b.copy()
    p = r.copy()
    rr = np.real(_dot(r, r))
    hist = [1.0]
    for it in range(iters):
        hp = apply_h(p)
        php = _dot(p, hp)
        if it == 0 and abs(php.imag) > 1e-6 * np.linalg.norm(p) * np.linalg.norm(hp):
            raise NotHermitianError("operator is not Hermitian (imaginary <p, Hp>)")
        if php.real <= 0:
            raise NotHermitianError("operator is not positive definite")
        alpha = rr / php.real
        x = x + alpha * p
        r = r - alpha * hp
        rr_new = np.real(_dot(r, r))
        hist.append(float(np.sqrt(rr_new) / bnorm))
        if hist[-1] < tol:
            break
        p = r + (rr_new / rr) * p
        rr = rr_new
    return x, hist


def roughness_normal(x):
    """``R'R x`` for first differences along every axis (no wrap-around)."""
    out = np.zeros_like(x)
    for ax in range(x.ndim):
        d = np.diff(x, axis=ax)
        pad = [(0, 0)] * x.ndim
        pad[ax] = (1, 1)
        dp = np.pad(d, pad)
        out -= np.diff(dp, axis=ax)
    return out


def median_scale(x, mask):
    """Median magnitude over ``mask`` and the pixel weights realizing it."""
    mags = np.abs(x[mask])
    flat = np.flatnonzero(mask.ravel())
    order = np.argsort(mags, kind="stable")
    n = mags.size
    if n % 2:
        picks = [order[n // 2]]
    else:
        picks = [order[n // 2 - 1], order[n // 2]]
    weights = np.zeros(x.size)
    for k in picks:
        weights[flat[k]] += 1.0 / len(picks)
    return float(np.mean(mags[picks])), weights.reshape(x.shape)


def init_operator(model, lam):
    return lambda v: sense_normal(model, v) + lam * roughness_normal(v)


def dc_operator(model, mu):
    return lambda v: sense_normal(model, v) + mu * v


def init_recon(model, y, lam, cg_iters=30, tol=1e-6):
    """Quadratic-roughness initial image ``(A'A + lam R'R)^-1 A'y``."""
    x, _ = cg_solve(init_operator(model, lam), sense_adjoint(model, y), cg_iters, tol)
    return x


def dc_update(model, y, z, mu, cg_iters, tol=1e-6, aty=None):
    """Data-consistency step ``(A'A + mu I)^-1 (A'y + mu z)``."""
    aty = sense_adjoint(model, y) if aty is None else aty
    x, _ = cg_solve(dc_operator(model, mu), aty + mu * z, cg_iters, tol)
    return x


# --------------------------------------------------------------------------
# shrinkage denoiser


def _pad(x, shape):
    if x.shape == shape:
        return x
    out = np.zeros(shape, dtype=np.complex128)
    out[:x.shape[0], :x.shape[1]] = x
    return out


def _soft(w, t):
    mag = np.abs(w)
    keep = mag > t
    scale = np.zeros_like(mag)
    scale[keep] = 1.0 - t[keep] / mag[keep]
    return w * scale


def denoise(x, theta):
    """Complex soft-thresholding of orthonormal wavelet subbands.

    ``theta[s]`` is the threshold for subband ``s`` (see
    :func:`jointtraj.wavelet.subband_labels`). Images whose sides are not
    multiples of ``2**levels`` are zero-padded and cropped back, which keeps
    the map 1-Lipschitz.
    """
    theta = np.asarray(theta, dtype=np.float64)
    shape = wavelet.padded_shape(x.shape)
    w = wavelet.forward(_pad(x, shape))
    t = theta[wavelet.subband_labels(shape)]
    out = wavelet.inverse(_soft(w, t))
    return out[:x.shape[0], :x.shape[1]]


def denoise_vjp(x, theta, g):
    """Vector-Jacobian product of :func:`denoise`: ``(d/dx, d/dtheta)``."""
    theta = np.asarray(theta, dtype=np.float64)
    shape = wavelet.padded_shape(x.shape)
    lab = wavelet.subband_labels(shape)
    w = wavelet.forward(_pad(x, shape))
    gw = wavelet.forward(_pad(g, shape))
    t = theta[lab]
    mag = np.abs(w)
    keep = mag > t
    unit = np.zeros_like(w)
    unit[keep] = w[keep] / mag[keep]
    # Jacobian of w -> w (1 - t/|w|) on |w| > t is self-adjoint:
    # g (1 - t/|w|) + t Re(conj(u) g) u / |w|
    gx = np.zeros_like(w)
    proj = np.real(np.conj(unit[keep]) * gw[keep])
    gx[keep] = gw[keep] * (1 - t[keep] / mag[keep]) + t[keep] * proj * unit[keep] / mag[keep]
    gtheta = np.bincount(lab[keep], weights=-proj, minlength=theta.size)
    gx = wavelet.inverse(gx)[:x.shape[0], :x.shape[1]]
    return gx, gtheta


# --------------------------------------------------------------------------
# unrolled pipeline


def _data_residual(model, x, aty, ynorm2):
    val = np.real(_dot(x, sense_normal(model, x))) - 2 * np.real(_dot(x, aty)) + ynorm2
    return float(np.sqrt(max(val, 0.0) / ynorm2)) if ynorm2 > 0 else 0.0


def unrolled_recon(model, y, config, theta, record=False):
    """Roughness (or adjoint) initialization followed by ``n_blocks`` DC/denoise steps.

    The initial image is divided by its median magnitude over the model's
    support before the blocks run; the same scale multiplies the output.
    """
    cfg = config
    y = np.asarray(y)
    b0 = sense_adjoint(model, y)
    if cfg.init_mode == "roughness":
        x0r, hist = cg_solve(init_operator(model, cfg.init_lambda), b0, cfg.init_cg_iters,
                             cfg.cg_tol)
        cg_res = [hist[-1]]
    else:
        x0r, cg_res = b0, [0.0]
    tape = {"b0": b0, "x0r": x0r, "xs": [], "zs": []}
    if cfg.n_blocks == 0:
        return ReconResult(x0r, [], cg_res, tape if record else None)

    scale, weights = median_scale(x0r, model.mask)
    if scale <= 0:
        raise FloatingPointError("initial image has zero median magnitude")
    bn = b0 / scale
    z = x0r / scale
    ynorm2 = float(np.real(_dot(y, y))) / scale**2
    apply_h = dc_operator(model, cfg.mu)
    block_res = []
    tape.update(scale=scale, median_weights=weights, bn=bn, z0=z)
    for _ in range(cfg.n_blocks):
        x, hist = cg_solve(apply_h, bn + cfg.mu * z, cfg.cg_iters, cfg.cg_tol)
        cg_res.append(hist[-1])
        block_res.append(_data_residual(model, x, bn, ynorm2))
        z = denoise(x, theta)
        tape["xs"].append(x)
        tape["zs"].append(z)
    return ReconResult(scale * z, block_res, cg_res, tape if record else None)


# --------------------------------------------------------------------------
# compressed sensing baseline


def operator_norm(model, iters=30, seed=0):
    """Largest singular value of ``A`` by power iteration on ``A'A``."""
    rng = np.random.default_rng(seed)
    v = rng.standard_normal(model.grid_shape) + 1j * rng.standard_normal(model.grid_shape)
    v /= np.linalg.norm(v)
    lam = 0.0
    for _ in range(iters):
        w = sense_normal(model, v)
        lam = np.linalg.norm(w)
        v = w / lam
    return float(np.sqrt(lam))


def cs_objective(model, x, y, lam):
    r = sense_forward(model, x) - y
    return float(np.real(_dot(r, r)) + lam * np.sum(np.abs(wavelet.forward(_pad(
        x, wavelet.padded_shape(x.shape))))))


def cs_recon(model, y, ratio=1e-7, iters=50, return_history=False):
    """Wavelet-l1 reconstruction ``min ||Ax - y||^2 + lam ||Wx||_1`` by PDHG.

    ``lam = ratio * max|A'y|``. Step sizes follow from a power-method estimate
    of ``||A||``; the wavelet block is scaled by that norm so both blocks of
    the stacked operator are balanced.
    """
    y = np.asarray(y)
    shape = model.grid_shape
    pshape = wavelet.padded_shape(shape)
    aty = sense_adjoint(model, y)
    lam = ratio * float(np.abs(aty).max())
    anorm = operator_norm(model)
    alpha = anorm
    knorm = np.sqrt(2.0) * anorm
    sigma = tau = 0.99 / knorm
    radius = lam / alpha

    x = np.zeros(shape, dtype=np.complex128)
    xbar = x.copy()
    p = np.zeros_like(y, dtype=np.complex128)
    q = np.zeros(pshape, dtype=np.complex128)
    history = []
    for _ in range(iters):
        # conjugate of ||u - y||^2 is Re<p, y> + ||p||^2 / 4
        p = (p + sigma * (sense_forward(model, xbar) - y)) / (1 + sigma / 2)
        q = q + sigma * alpha * wavelet.forward(_pad(xbar, pshape))
        mag = np.abs(q)
        over = mag > radius
        q[over] *= radius / mag[over]
        grad = sense_adjoint(model, p) + alpha * wavelet.inverse(q)[:shape[0], :shape[1]]
        x_new = x - tau * grad
        xbar = 2 * x_new - x
        x = x_new
        if return_history:
            history.append(cs_objective(model, x, y, lam))
    return (x, history) if return_history else x
