"""Desk-scale joint optimization with the ablations used in the acceptance suite.

Writes a JSON summary (SSIM before/after, displacement of the multi-level and
nonparametric runs, initialization ablation) and the optimized trajectory.

    python scripts/desk_run.py --seed 0 --out runs/desk0
"""

import argparse
import dataclasses
import json
import os

import numpy as np

from jointtraj import experiments, trajectory


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--seed", type=int, default=0, help="training seed (batch order and noise)")
    ap.add_argument("--data-seed", type=int, default=0)
    ap.add_argument("--out", default="runs/desk")
    ap.add_argument("--skip-ablations", action="store_true")
    args = ap.parse_args()
    os.makedirs(args.out, exist_ok=True)

    setup = experiments.desk_setup(seed=args.data_seed)
    setup = dataclasses.replace(setup, train_config=dataclasses.replace(setup.train_config,
                                                                        seed=args.seed))
    res, secs = experiments.run_fit(setup)
    trajectory.save_trajectory(os.path.join(args.out, "trajectory.ktrj"), res.trajectory)
    init = setup.init_traj.coords
    opt = res.trajectory.coords
    th0 = experiments.retrain_theta(setup, init)
    th1 = experiments.retrain_theta(setup, opt)
    s0 = experiments.heldout_ssim(setup, init, th0)
    s1 = experiments.heldout_ssim(setup, opt, th1)
    summary = {"seed": args.seed, "fit_seconds": secs, "feasible": res.feasible,
               "penalty": trajectory.penalty(res.trajectory, setup.limits)[0],
               "ssim_init": float(s0.mean()), "ssim_opt": float(s1.mean()),
               "displacement": experiments.mean_displacement(opt, init)}
    if not args.skip_ablations:
        s_np = dataclasses.replace(setup, train_config=dataclasses.replace(
            setup.train_config, parameterize=False))
        res_np, _ = experiments.run_fit(s_np)
        summary["displacement_nonparametric"] = experiments.mean_displacement(
            res_np.trajectory.coords, init)
        summary["nonparametric_feasible"] = res_np.feasible
        adj = dataclasses.replace(setup.unrolled, init_mode="adjoint")
        th_adj = experiments.retrain_theta(setup, init, adj)
        summary["ssim_init_adjoint"] = float(
            experiments.heldout_ssim(setup, init, th_adj, adj).mean())
    np.save(os.path.join(args.out, "theta.npy"), res.theta)
    with open(os.path.join(args.out, "summary.json"), "w") as f:
        json.dump(summary, f, indent=2, sort_keys=True)
    print(json.dumps(summary, indent=2, sort_keys=True))


if __name__ == "__main__":
    main()
