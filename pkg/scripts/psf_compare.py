"""PSF width, sidelobe energy and Hermitian overlap for a set of trajectory files.

    python scripts/psf_compare.py radial.ktrj runs/desk0/trajectory.ktrj --dcf ramp
"""

import argparse
import json

import numpy as np

from jointtraj import evaluation, trajectory


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("trajs", nargs="+")
    ap.add_argument("--dcf", choices=("none", "ramp"), default="none")
    ap.add_argument("--eps", type=float, default=0.5, help="overlap radius in grid cells")
    args = ap.parse_args()
    rows = []
    for path in args.trajs:
        t = trajectory.load_trajectory(path)
        dcf = evaluation.ramp_dcf(t.coords, t.grid_n) if args.dcf == "ramp" else None
        rep = evaluation.psf(t.coords, t.grid_n, dcf)
        overlap = evaluation.hermitian_overlap(t.coords, args.eps * 2 * np.pi / t.grid_n)
        rows.append({"traj": path, "fwhm_pixels": rep.fwhm_pixels,
                     "sidelobe_energy_ratio": rep.sidelobe_energy_ratio,
                     "hermitian_overlap": overlap})
    print(f"{'trajectory':<40} {'FWHM':>7} {'sidelobe':>9} {'overlap':>8}")
    for r in rows:
        print(f"{r['traj']:<40} {r['fwhm_pixels']:>7.3f} {r['sidelobe_energy_ratio']:>9.4f} "
              f"{r['hermitian_overlap']:>8.3f}")
    print(json.dumps(rows))


if __name__ == "__main__":
    main()
