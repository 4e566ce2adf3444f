import csv
import json

import numpy as np
import pytest

from jointtraj import cli, config, trajectory

TINY = {
    "trajectory": {"kind": "radial", "shots": 4, "samples": 32, "grid_n": 16},
    "data": {"n_images": 10, "ncoils": 2, "seed": 3},
    "unrolled": {"n_blocks": 2, "cg_iters": 4},
    "train": {"n_levels": 2, "epochs_per_level": 1, "batch_size": 2, "decim_schedule": [16, 8],
              "lr_omega": 5e-3, "lr_theta": 5e-3, "pretrain_epochs": 1},
}


@pytest.fixture
def tiny_config(tmp_path):
    path = tmp_path / "tiny.json"
    path.write_text(json.dumps(TINY))
    return str(path)


def test_defaults_mirror_protocol():
    cfg = config.load_config()
    assert cfg.limits.dt == 4e-6 and cfg.trajectory.grid_n == 320
    assert (cfg.limits.gmax, cfg.limits.smax) == (0.05, 149.0)
    assert cfg.unrolled.mu == 2.0 and cfg.unrolled.n_blocks == 6


@pytest.mark.parametrize("data", [
    {"bogus": 1},
    {"train": {"nlevels": 3}},
    {"trajectory": {"kind": "rosette"}},
    {"train": {"decim_schedule": [8, 16, 32, 64]}},
    {"schema_version": 99},
    {"data": {"fractions": [0.5, 0.5, 0.5]}},
    {"limits": {"gmax": -1}},
])
def test_invalid_configs_rejected(data):
    with pytest.raises(config.ConfigError):
        config.from_dict(data)


def test_overrides():
    cfg = config.load_config(None, ["train.seed=7", "unrolled.mu=3.5", "output_dir=runs/a",
                                    "train.decim_schedule=[8,4,2,1]"])
    assert cfg.train.seed == 7 and cfg.unrolled.mu == 3.5 and cfg.output_dir == "runs/a"
    assert cfg.train.decim_schedule == (8, 4, 2, 1)
    with pytest.raises(config.ConfigError):
        config.load_config(None, ["train.seed"])


def test_config_json_round_trip():
    cfg = config.from_dict(TINY)
    assert config.from_dict(json.loads(cfg.to_json())) == cfg


def test_gen_traj_round_trip(tmp_path, capsys):
    out = tmp_path / "r.ktrj"
    assert cli.main(["gen-traj", "--kind", "radial", "--shots", "16", "--out", str(out)]) == 0
    traj = trajectory.load_trajectory(out)
    assert traj.coords.shape == (16 * 1280, 2) and traj.dt == 4e-6
    assert traj.coords.tobytes() == trajectory.gen_radial(16, 1280).coords.tobytes()
    assert json.loads(capsys.readouterr().out)["feasible"]


def test_gen_traj_infeasible_exit(tmp_path):
    rc = cli.main(["gen-traj", "--kind", "spiral", "--shots", "8", "--samples", "1000",
                   "--out", str(tmp_path / "s.ktrj")])
    assert rc == cli.EXIT_INFEASIBLE
    assert not (tmp_path / "s.ktrj").exists()


def test_bad_arguments_exit_config(tmp_path):
    assert cli.main(["gen-traj", "--kind", "zigzag", "--out", "x"]) == cli.EXIT_CONFIG
    assert cli.main(["optimize", "--set", "train.nope=1"]) == cli.EXIT_CONFIG
    assert cli.main(["optimize", "--config", str(tmp_path / "missing.json")]) == cli.EXIT_CONFIG


def test_psf_csv_rows(tmp_path):
    t = tmp_path / "r.ktrj"
    trajectory.save_trajectory(t, trajectory.gen_radial(8, 64, grid_n=32))
    assert cli.main(["psf", "--traj", str(t), "--angles", "12", "--dcf", "ramp",
                     "--out", str(tmp_path / "p")]) == 0
    rows = list(csv.reader(open(tmp_path / "p.csv")))
    assert len(rows) == 13 and rows[0][0] == "angle"
    assert json.loads((tmp_path / "p.json").read_text())["fwhm_pixels"] > 0


def test_export_waveform_columns(tmp_path):
    t = tmp_path / "s.ktrj"
    trajectory.save_trajectory(t, trajectory.gen_spiral(4, 1500, grid_n=64))
    assert cli.main(["export-waveform", "--traj", str(t), "--out", str(tmp_path / "w.csv")]) == 0
    rows = list(csv.DictReader(open(tmp_path / "w.csv")))
    assert list(rows[0]) == ["shot", "n", "g_x", "g_y", "s_x", "s_y"]
    assert len(rows) == 4 * 1499
    g = np.array([[float(r["g_x"]), float(r["g_y"])] for r in rows])
    assert np.abs(g).max() <= 0.05 * (1 + 1e-9)


def test_optimize_resume_and_outputs(tiny_config, tmp_path):
    full = tmp_path / "full"
    assert cli.main(["optimize", "--config", tiny_config, "--out-dir", str(full)]) == 0
    for name in ("checkpoint.ckpt", "report.jsonl", "trajectory.ktrj", "theta.json",
                 "summary.json", "config.json"):
        assert (full / name).exists()
    recs = [json.loads(line) for line in (full / "report.jsonl").read_text().splitlines()]
    assert set(recs[0]) == {"step", "level", "epoch", "recon_loss", "g_penalty", "s_penalty",
                            "lr_omega", "lr_theta"}

    part = tmp_path / "part"
    assert cli.main(["optimize", "--config", tiny_config, "--out-dir", str(part),
                     "--max-steps", "4"]) == 0
    assert not json.loads((part / "summary.json").read_text())["done"]
    assert cli.main(["optimize", "--config", tiny_config, "--out-dir", str(part),
                     "--resume"]) == 0
    for name in ("trajectory.ktrj", "report.jsonl", "theta.json"):
        assert (part / name).read_bytes() == (full / name).read_bytes()

    # a checkpoint from another configuration is refused
    assert cli.main(["optimize", "--config", tiny_config, "--out-dir", str(part), "--resume",
                     "--set", "train.seed=9"]) == cli.EXIT_CONFIG


def test_reconstruct_and_eval(tiny_config, tmp_path, capsys):
    prefix = str(tmp_path / "rec")
    assert cli.main(["reconstruct", "--config", tiny_config, "--method", "init",
                     "--out", prefix]) == 0
    metrics = json.loads(open(prefix + ".json").read())
    assert {"ssim", "psnr", "method"} <= set(metrics)
    assert np.load(prefix + ".npy").shape == (16, 16)
    capsys.readouterr()
    out = str(tmp_path / "eval.json")
    assert cli.main(["eval", "--config", tiny_config, "--methods", "unn,init,cs",
                     "--out", out]) == 0
    table = capsys.readouterr().out.splitlines()
    assert table[0].split()[0] == "method" and len(table) == 4 and "±" in table[1]
    res = json.loads(open(out).read())
    assert set(res) == {"unn", "init", "cs"} and res["cs"]["ssim"]["n"] == 2


def test_reconstruct_index_out_of_range(tiny_config, tmp_path):
    assert cli.main(["reconstruct", "--config", tiny_config, "--index", "50",
                     "--out", str(tmp_path / "x")]) == cli.EXIT_CONFIG
