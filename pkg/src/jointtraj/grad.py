"""Reverse-mode gradients of the training loss w.r.t. spline coefficients and theta.

Gradients of real functions of complex arrays use the convention
``g = dL/dRe(z) + 1j * dL/dIm(z)``, so a linear map ``M`` pulls a gradient back
as ``M^H g``.

The trajectory enters the loss only through ``A(omega)``. Every such term is a
pairing ``Re<u, A(omega) x>`` with ``u`` and ``x`` held fixed, whose derivative
w.r.t. ``omega_j`` is ``Re(conj(u_j) * (-i) * NUFFT(r * x)_j)``; adjoint and
normal-operator terms reduce to the same pairing because
``Re<g, A'y> = Re<A g, y>``. CG solves are differentiated implicitly.
"""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from . import nufft
from .mrisys import sense_forward
from .recon import cg_solve, dc_operator, denoise_vjp, init_operator, unrolled_recon
from .trajectory import materialize

THREADS_ENV = "JOINTTRAJ_THREADS"


class NonFiniteGradientError(FloatingPointError):
    pass


@dataclass
class TapeGradient:
    d_coeffs: np.ndarray
    d_theta: np.ndarray
    loss_value: float
    penalty_value: float
    recon_loss: float = 0.0
    g_penalty: float = 0.0
    s_penalty: float = 0.0
    d_omega_recon: np.ndarray = None  # reconstruction part of dL/domega


def _coord_maps(plan):
    grids = np.meshgrid(*[nufft.pixel_offsets(n) for n in plan.grid_shape], indexing="ij")
    return np.stack(grids).astype(np.float64)


def _deriv_images(plan, x):
    """``NUFFT(r_d * x)`` for every dimension ``d``: shape (Nd, ..., Ns)."""
    r = _coord_maps(plan)
    x = np.asarray(x)
    shaped = r.reshape((plan.ndim,) + (1,) * (x.ndim - plan.ndim) + plan.grid_shape) * x
    return nufft.forward(plan, shaped)


def jac_forward_omega(plan, x, v):
    """Directional derivative of ``forward(plan, x)`` along coordinate perturbation ``v``."""
    v = np.asarray(v, dtype=np.float64).reshape(plan.nsamples, plan.ndim)
    f = _deriv_images(plan, x)
    return -1j * np.einsum("d...j,jd->...j", f, v)


def jac_adjoint_omega(plan, x, u):
    """Gradient of ``Re<u, forward(plan, x)>`` w.r.t. the coordinates, shape (Ns, Nd).

    Leading batch dimensions of ``x`` and ``u`` (e.g. coils) are summed.
    """
    f = _deriv_images(plan, x)
    u = np.asarray(u)
    prod = np.real(np.conj(u)[None] * (-1j) * f)
    return prod.reshape(plan.ndim, -1, plan.nsamples).sum(axis=1).T


def sense_jac_adjoint(model, x, u):
    """Gradient of ``Re<u, A(omega) x>`` w.r.t. omega for the SENSE operator."""
    u = np.asarray(u).reshape(model.ncoils, -1)
    return model.norm * jac_adjoint_omega(model.plan, model.smaps * x, u)


def normal_pairing_grad(model, v, w):
    """Gradient of ``Re<v, A'A w>`` w.r.t. omega."""
    return sense_jac_adjoint(model, v, sense_forward(model, w)) + sense_jac_adjoint(
        model, w, sense_forward(model, v))


def cg_implicit_vjp(apply_h, x_star, cotangent, cg_iters, tol=1e-10):
    """Backward pass through ``x* = H^-1 b`` for Hermitian ``H``.

    Returns ``(b_cot, h_cot)``: ``b_cot = H^-1 cotangent`` and a hook
    ``h_cot(pairing_grad)`` that, given a function computing the gradient of
    ``Re<v, H(p) w>`` w.r.t. the parameters ``p`` of ``H``, returns the
    contribution ``-d/dp Re<b_cot, H(p) x*>``.
    """
    b_cot, _ = cg_solve(apply_h, cotangent, cg_iters, tol)

    def h_cot(pairing_grad):
        return -pairing_grad(b_cot, x_star)

    return b_cot, h_cot


def recon_loss(xhat, x):
    """Per-pixel mean absolute error plus mean squared error, and its gradient."""
    d = xhat - x
    mag = np.abs(d)
    nv = d.size
    unit = np.zeros_like(d)
    nz = mag > 0
    unit[nz] = d[nz] / mag[nz]
    return float(mag.sum() / nv + (mag**2).sum() / nv), (unit + 2 * d) / nv


def _check(name, arr):
    if not np.all(np.isfinite(arr)):
        raise NonFiniteGradientError(f"non-finite gradient at node {name!r}")


def image_loss_and_grad(model, x_true, noise, config, theta, need_omega=True,
                        backward_cg_iters=None):
    """Loss of one image and its gradients ``(loss, d_omega, d_theta)``.

    ``noise`` is added to the simulated data and is independent of omega.
    With ``need_omega=False`` the omega gradient is skipped (returned as None).
    """
    cfg = config
    bk = cfg.cg_iters if backward_cg_iters is None else backward_cg_iters
    bk_init = cfg.init_cg_iters if backward_cg_iters is None else backward_cg_iters
    y = sense_forward(model, x_true)
    if noise is not None:
        y = y + noise
    res = unrolled_recon(model, y, cfg, theta, record=True)
    tape = res.tape
    loss, g_out = recon_loss(res.image, x_true)
    theta = np.asarray(theta, dtype=np.float64)
    g_theta = np.zeros_like(theta)
    g_omega = np.zeros((model.plan.nsamples, model.plan.ndim)) if need_omega else None
    pair = (lambda v, w: normal_pairing_grad(model, v, w))

    b0, x0r = tape["b0"], tape["x0r"]
    g_b0 = np.zeros_like(b0)
    if cfg.n_blocks == 0:
        g_x0r = g_out
    else:
        s = tape["scale"]
        zs, xs = tape["zs"], tape["xs"]
        g_s = float(np.real(np.vdot(g_out, zs[-1])))
        g_z = s * g_out
        g_bn = np.zeros_like(b0)
        apply_dc = dc_operator(model, cfg.mu)
        for i in reversed(range(cfg.n_blocks)):
            g_x, gt = denoise_vjp(xs[i], theta, g_z)
            g_theta += gt
            _check(f"denoise[{i}]", g_x)
            v, h_cot = cg_implicit_vjp(apply_dc, xs[i], g_x, bk, cfg.cg_tol)
            if need_omega:
                g_omega += h_cot(pair)
            g_bn += v
            g_z = cfg.mu * v
        if not need_omega:
            return loss, None, g_theta
        g_x0 = g_z
        g_x0r = g_x0 / s
        g_s -= float(np.real(np.vdot(g_x0, x0r))) / s**2
        g_b0 += g_bn / s
        g_s -= float(np.real(np.vdot(g_bn, b0))) / s**2
        # d median|x| / dx on the selected pixel(s)
        mag = np.abs(x0r)
        w = tape["median_weights"]
        sel = w > 0
        g_x0r = g_x0r.copy()
        g_x0r[sel] += g_s * w[sel] * x0r[sel] / mag[sel]
    if not need_omega:
        return loss, None, g_theta
    _check("init", g_x0r)
    if cfg.init_mode == "roughness":
        v0, h_cot = cg_implicit_vjp(init_operator(model, cfg.init_lambda), x0r, g_x0r, bk_init,
                                    cfg.cg_tol)
        g_omega += h_cot(pair)
        g_b0 += v0
    else:
        g_b0 += g_x0r
    # b0 = A'y:  Re<g_b0, A'y> = Re<A g_b0, y>, with y itself depending on omega
    g_omega += sense_jac_adjoint(model, g_b0, y)
    g_y = sense_forward(model, g_b0)
    g_omega += sense_jac_adjoint(model, x_true, g_y)
    _check("omega", g_omega)
    return loss, g_omega, g_theta


def _map(fn, items):
    threads = int(os.environ.get(THREADS_ENV, "1"))
    if threads <= 1 or len(items) <= 1:
        return [fn(it) for it in items]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, items))


def loss_and_grad(batch, spline, theta, model_factory, config, penalty_fn=None, noises=None,
                  need_omega=True, backward_cg_iters=None):
    """Batch-mean loss (reconstruction + penalty) and gradients w.r.t. ``c`` and ``theta``.

    Parameters
    ----------
    batch : sequence of complex images
    spline : SplineParam
    theta : denoiser thresholds
    model_factory : callable mapping coordinates to a SenseModel
    config : UnrolledConfig
    penalty_fn : callable, optional
        ``coords -> PenaltyParts``; omitted means no hardware penalty.
    noises : sequence of arrays or None
        Additive k-space noise per batch item.
    """
    coords = materialize(spline)
    model = model_factory(coords)
    noises = [None] * len(batch) if noises is None else noises

    def one(item):
        x, e = item
        return image_loss_and_grad(model, x, e, config, theta, need_omega, backward_cg_iters)

    results = _map(one, list(zip(batch, noises)))
    n = len(batch)
    rloss = sum(r[0] for r in results) / n
    d_theta = sum(r[2] for r in results) / n
    d_recon = sum(r[1] for r in results) / n if need_omega else np.zeros_like(coords)
    d_omega = d_recon
    pen_val = g_pen = s_pen = 0.0
    if penalty_fn is not None:
        parts = penalty_fn(coords)
        pen_val, g_pen, s_pen = parts.value, parts.grad_penalty, parts.slew_penalty
        d_omega = d_omega + parts.grad
    d_coeffs = spline.pullback(d_omega)
    _check("coeffs", d_coeffs)
    _check("theta", d_theta)
    return TapeGradient(d_coeffs, np.asarray(d_theta, dtype=np.float64), rloss + pen_val,
                        pen_val, rloss, g_pen, s_pen, d_recon)


def batch_loss(batch, coords, theta, model_factory, config, noises=None):
    """Forward-only batch-mean reconstruction loss."""
    model = model_factory(coords)
    noises = [None] * len(batch) if noises is None else noises
    total = 0.0
    for x, e in zip(batch, noises):
        y = sense_forward(model, x)
        if e is not None:
            y = y + e
        total += recon_loss(unrolled_recon(model, y, config, theta).image, x)[0]
    return total / len(batch)
