"""Command-line interface.

Exit codes: 0 success, 2 configuration error, 3 infeasible trajectory,
4 numerical failure.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

import numpy as np

from . import evaluation, fileio, mrisys, recon, train, trajectory
from .config import ConfigError, load_config
from .grad import NonFiniteGradientError

EXIT_OK, EXIT_CONFIG, EXIT_INFEASIBLE, EXIT_NUMERIC = 0, 2, 3, 4


# --------------------------------------------------------------------------
# experiment plumbing


def build_dataset(cfg):
    d, n = cfg.data, cfg.trajectory.grid_n
    if d.source == "phantoms":
        return mrisys.gen_phantoms(d.n_images, n, d.seed, d.fractions)
    if not os.path.isdir(d.source):
        raise ConfigError(f"data.source {d.source!r} is neither 'phantoms' nor a directory")
    return mrisys.load_images(d.source, n, d.seed, d.fractions)


def build_init_traj(cfg):
    t, lim = cfg.trajectory, cfg.limits
    if t.kind == "radial":
        return trajectory.gen_radial(t.shots, t.samples, t.inout, lim.dt, t.fov, t.grid_n)
    if t.kind == "spiral":
        return trajectory.gen_spiral(t.shots, t.samples, t.density, t.turns, lim, lim.dt, t.fov,
                                     t.grid_n)
    traj = trajectory.load_trajectory(t.path)
    if traj.grid_n != t.grid_n:
        raise ConfigError(f"trajectory file grid {traj.grid_n} != trajectory.grid_n {t.grid_n}")
    return traj


def build_factory(cfg):
    smaps = mrisys.synth_coil_maps(cfg.trajectory.grid_n, cfg.data.ncoils, seed=cfg.data.coil_seed)
    return mrisys.model_factory(smaps)


def experiment_hash(cfg):
    return train.config_hash(cfg.train, cfg.unrolled, cfg.limits, cfg.trajectory, cfg.data)


def _read_theta(path):
    if path is None:
        return recon.default_theta()
    with open(path) as f:
        return np.asarray(json.load(f)["theta"], dtype=np.float64)


def _write_json(path, obj):
    fileio.atomic_write_text(path, json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _noise_std(cfg, model, images):
    rel = cfg.train.noise_rel
    return mrisys.relative_noise_std(model, images, rel) if rel else 0.0


def reconstruct_one(method, model, y, cfg, theta, cs_iters=50, cs_ratio=1e-7):
    if method == "unn":
        return recon.unrolled_recon(model, y, cfg.unrolled, theta).image
    if method == "init":
        return recon.init_recon(model, y, cfg.unrolled.init_lambda, cfg.unrolled.init_cg_iters,
                                cfg.unrolled.cg_tol)
    if method == "cs":
        return recon.cs_recon(model, y, cs_ratio, cs_iters)
    raise ConfigError(f"unknown method {method!r}")


# --------------------------------------------------------------------------
# commands


def cmd_gen_traj(args):
    limits = trajectory.HardwareLimits(gmax=args.gmax, smax=args.smax, dt=args.dt)
    if args.kind == "radial":
        traj = trajectory.gen_radial(args.shots, args.samples, not args.center_out, args.dt,
                                     args.fov, args.grid_n)
    else:
        traj = trajectory.gen_spiral(args.shots, args.samples, args.density, args.turns, limits,
                                     args.dt, args.fov, args.grid_n)
    value, _ = trajectory.penalty(traj, limits)
    report = {"kind": args.kind, "nshots": traj.nshots, "samples_per_shot": traj.samples_per_shot,
              "penalty": value, "feasible": trajectory.is_feasible(traj, limits)}
    if not report["feasible"]:
        print(json.dumps(report), file=sys.stderr)
        return EXIT_INFEASIBLE
    trajectory.save_trajectory(args.out, traj)
    print(json.dumps(report))
    return EXIT_OK


def cmd_optimize(args):
    cfg = load_config(args.config, args.set)
    out = args.out_dir or cfg.output_dir
    os.makedirs(out, exist_ok=True)
    ckpt = os.path.join(out, "checkpoint.ckpt")
    chash = experiment_hash(cfg)
    state = None
    if args.resume:
        if not os.path.exists(ckpt):
            raise ConfigError(f"--resume given but {ckpt} does not exist")
        try:
            state = train.load_checkpoint(ckpt, chash)
        except ValueError as e:
            raise ConfigError(str(e)) from e
    ds = build_dataset(cfg)
    init = build_init_traj(cfg)
    _write_json(os.path.join(out, "config.json"), cfg.to_dict())
    res = train.fit(ds.subset("train"), ds.subset("val"), init, recon.default_theta(),
                    build_factory(cfg), cfg.unrolled, cfg.train, cfg.limits, state=state,
                    max_steps=args.max_steps, checkpoint=ckpt,
                    report_path=os.path.join(out, "report.jsonl"), chash=chash)
    trajectory.save_trajectory(os.path.join(out, "trajectory.ktrj"), res.trajectory)
    _write_json(os.path.join(out, "theta.json"), {"theta": res.theta.tolist()})
    summary = {"done": res.state.done, "steps": res.state.global_step, "feasible": res.feasible,
               "penalty": trajectory.penalty(res.trajectory, cfg.limits)[0],
               "mu1": res.state.mu1, "mu2": res.state.mu2}
    _write_json(os.path.join(out, "summary.json"), summary)
    print(json.dumps(summary))
    if res.state.done and not res.feasible:
        return EXIT_INFEASIBLE
    return EXIT_OK


def _load_eval_setup(args):
    cfg = load_config(args.config, args.set)
    traj = trajectory.load_trajectory(args.traj) if args.traj else build_init_traj(cfg)
    if traj.grid_n != cfg.trajectory.grid_n:
        raise ConfigError(f"trajectory grid {traj.grid_n} != config grid {cfg.trajectory.grid_n}")
    return cfg, traj, build_factory(cfg)(traj.coords)


def cmd_reconstruct(args):
    cfg, traj, model = _load_eval_setup(args)
    ds = build_dataset(cfg)
    if args.image:
        x = mrisys.normalize_median(mrisys.center_fit(
            np.asarray(mrisys.read_image(args.image), dtype=np.complex128), traj.grid_n))
    else:
        test = ds.subset(args.split)
        if not 0 <= args.index < len(test):
            raise ConfigError(f"--index {args.index} out of range for split of size {len(test)}")
        x = test[args.index]
    std = _noise_std(cfg, model, ds.subset("train"))
    y = mrisys.simulate_acquisition(model, x, [cfg.data.seed, args.index], std)
    xh = reconstruct_one(args.method, model, y, cfg, _read_theta(args.theta), args.cs_iters)
    np.save(args.out + ".npy", xh.astype(np.complex128))
    metrics = {"method": args.method, "ssim": evaluation.ssim(xh, x),
               "psnr": evaluation.psnr(xh, x)}
    _write_json(args.out + ".json", metrics)
    print(json.dumps(metrics))
    return EXIT_OK


def cmd_eval(args):
    cfg, traj, model = _load_eval_setup(args)
    ds = build_dataset(cfg)
    theta = _read_theta(args.theta)
    images = ds.subset(args.split)
    std = _noise_std(cfg, model, ds.subset("train"))
    results = {}
    for method in args.methods.split(","):
        ss, ps = [], []
        for i, x in enumerate(images):
            y = mrisys.simulate_acquisition(model, x, [cfg.data.seed, i], std)
            xh = reconstruct_one(method, model, y, cfg, theta, args.cs_iters)
            ss.append(evaluation.ssim(xh, x))
            ps.append(evaluation.psnr(xh, x))
        results[method] = {"ssim": evaluation.summarize(ss), "psnr": evaluation.summarize(ps)}
    print(f"{'method':<8} {'SSIM':>17} {'PSNR (dB)':>17}")
    for method, r in results.items():
        s, p = r["ssim"], r["psnr"]
        print(f"{method:<8} {s['mean']:>8.3f} ± {s['std']:<6.3f} {p['mean']:>8.2f} ± {p['std']:<6.2f}")
    if args.out:
        _write_json(args.out, results)
    return EXIT_OK


def cmd_psf(args):
    traj = trajectory.load_trajectory(args.traj)
    if traj.ndim != 2:
        raise ConfigError("psf needs a 2D trajectory")
    dcf = evaluation.ramp_dcf(traj.coords, traj.grid_n) if args.dcf == "ramp" else None
    grid = args.grid_n or traj.grid_n
    rep = evaluation.psf(traj.coords, grid, dcf, n_angles=args.angles)
    fileio.atomic_write_text(args.out + ".json", rep.to_json() + "\n")
    fileio.atomic_write_text(args.out + ".csv", rep.to_csv())
    print(rep.to_json())
    return EXIT_OK


def cmd_export_waveform(args):
    traj = trajectory.load_trajectory(args.traj)
    limits = trajectory.HardwareLimits(gmax=args.gmax, smax=args.smax, dt=traj.dt)
    fileio.atomic_write_text(args.out, trajectory.waveform_csv(traj, limits))
    if not trajectory.is_feasible(traj, limits):
        print(json.dumps({"feasible": False, "penalty": trajectory.penalty(traj, limits)[0]}),
              file=sys.stderr)
        return EXIT_INFEASIBLE
    return EXIT_OK


# --------------------------------------------------------------------------


def _add_config_args(p):
    p.add_argument("--config", help="experiment JSON (defaults when omitted)")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="override a config field, e.g. train.seed=3 (repeatable)")


def build_parser():
    ap = argparse.ArgumentParser(prog="jointtraj", description=__doc__.splitlines()[0])
    sub = ap.add_subparsers(dest="command", required=True)
    lim = trajectory.HardwareLimits()

    p = sub.add_parser("gen-traj", help="generate a radial or spiral trajectory file")
    p.add_argument("--kind", choices=("radial", "spiral"), default="radial")
    p.add_argument("--shots", type=int, default=16)
    p.add_argument("--samples", type=int, default=1280)
    p.add_argument("--grid-n", type=int, default=320)
    p.add_argument("--fov", type=float, default=0.22)
    p.add_argument("--dt", type=float, default=lim.dt)
    p.add_argument("--gmax", type=float, default=lim.gmax)
    p.add_argument("--smax", type=float, default=lim.smax)
    p.add_argument("--density", type=float, default=1.0)
    p.add_argument("--turns", type=float, default=None)
    p.add_argument("--center-out", action="store_true", help="radial spokes from DC outwards")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen_traj)

    p = sub.add_parser("optimize", help="jointly optimize trajectory and denoiser")
    _add_config_args(p)
    p.add_argument("--out-dir")
    p.add_argument("--resume", action="store_true")
    p.add_argument("--max-steps", type=int, default=None)
    p.set_defaults(func=cmd_optimize)

    for name, func, hlp in (("reconstruct", cmd_reconstruct, "reconstruct one image"),
                            ("eval", cmd_eval, "evaluate methods over a dataset split")):
        p = sub.add_parser(name, help=hlp)
        _add_config_args(p)
        p.add_argument("--traj", help="trajectory file (default: config initialization)")
        p.add_argument("--theta", help="theta.json from optimize")
        p.add_argument("--split", default="test", choices=("train", "val", "test"))
        p.add_argument("--cs-iters", type=int, default=50)
        p.set_defaults(func=func)
        if name == "reconstruct":
            p.add_argument("--method", choices=("unn", "cs", "init"), default="unn")
            p.add_argument("--index", type=int, default=0)
            p.add_argument("--image", help="image file instead of a dataset item")
            p.add_argument("--out", required=True, help="output prefix (.npy and .json)")
        else:
            p.add_argument("--methods", default="unn,init,cs")
            p.add_argument("--out", help="JSON results file")

    p = sub.add_parser("psf", help="point spread function, FWHM and sidelobe energy")
    p.add_argument("--traj", required=True)
    p.add_argument("--dcf", choices=("none", "ramp"), default="none")
    p.add_argument("--grid-n", type=int, default=None)
    p.add_argument("--angles", type=int, default=64)
    p.add_argument("--out", required=True, help="output prefix (.json and .csv)")
    p.set_defaults(func=cmd_psf)

    p = sub.add_parser("export-waveform", help="gradient and slew waveforms as CSV")
    p.add_argument("--traj", required=True)
    p.add_argument("--gmax", type=float, default=lim.gmax)
    p.add_argument("--smax", type=float, default=lim.smax)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_export_waveform)
    return ap


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return EXIT_CONFIG if e.code else EXIT_OK
    try:
        return args.func(args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except trajectory.InfeasibleTrajectoryError as e:
        print(f"infeasible: {e}", file=sys.stderr)
        return EXIT_INFEASIBLE
    except (FloatingPointError, NonFiniteGradientError, recon.NotHermitianError,
            np.linalg.LinAlgError) as e:
        print(f"numerical failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except (OSError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
