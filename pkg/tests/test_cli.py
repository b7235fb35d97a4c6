import csv
import json

import numpy as np
import pytest

from patchba.cli import main
from patchba.errors import InsufficientImages
from patchba.io import read_json, read_poses_csv
from patchba.mission_sim import TABLE_FIELDS

NOISELESS = {"noise": {"sigma_pos_m": 0, "sigma_att_deg": 0, "obs_noise_px": 0}}
MISSION_FILES = ["dsm.asc", "landmarks.csv", "mission.json", "nav_poses.csv", "truth_poses.csv"]


def run(*argv):
    return main([str(a) for a in argv])


# --- plan --------------------------------------------------------------------------

def test_plan_prints_pair_time(capsys):
    assert run("plan", "--velocity", 20, "--overlap", 80, "--h-im", 208) == 0
    out = capsys.readouterr().out
    assert json.loads(out.strip().splitlines()[-1])["t_s"] == pytest.approx(2.08)


def test_plan_from_camera_parameters(capsys, tmp_path):
    assert run("plan", "--velocity", 20, "--interval", 2.08, "--focal-mm", 39.84, "--pixel-um", 4.6,
               "--pixels", 6004, "--altitude", 300, "--budget", 1.0, "--json", tmp_path / "p.json") == 0
    d = read_json(tmp_path / "p.json")
    assert d["overlap_pct"] == pytest.approx(80.0, abs=0.01)
    assert d["fits_budget"] is True


def test_plan_rejects_zero_velocity(capsys):
    assert run("plan", "--velocity", 0, "--overlap", 80, "--h-im", 208) == 2
    assert "velocity" in capsys.readouterr().err


def test_plan_needs_a_footprint():
    assert run("plan", "--velocity", 20, "--overlap", 80) == 2


def test_unknown_subcommand():
    assert run("fly") == 2


# --- simulate --------------------------------------------------------------------------

def test_simulate_writes_a_deterministic_mission(tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    for d in (a, b):
        assert run("simulate", "--out", d, "--seed", 42, "--density", 0.01) == 0
    assert sorted(p.name for p in a.iterdir()) == MISSION_FILES
    for name in MISSION_FILES:
        assert (a / name).read_bytes() == (b / name).read_bytes()
    with open(a / "nav_poses.csv") as fh:
        assert len(list(csv.DictReader(fh))) == 60


def test_simulate_rejects_full_overlap(tmp_path):
    assert run("simulate", "--out", tmp_path / "m", "--overlap", 120) == 2


def test_simulate_rejects_unknown_config_keys(tmp_path):
    (tmp_path / "c.json").write_text(json.dumps({"wind": 3}))
    assert run("simulate", "--out", tmp_path / "m", "--config", tmp_path / "c.json") == 2


# --- run and eval ------------------------------------------------------------------------

@pytest.fixture(scope="module")
def missions(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg = root / "noiseless.json"
    cfg.write_text(json.dumps(NOISELESS))
    small = ("--strips", 1, "--images-per-strip", 6, "--density", 0.05)
    assert run("simulate", "--out", root / "clean", "--config", cfg, "--seed", 1, *small) == 0
    assert run("simulate", "--out", root / "noisy", "--seed", 2, *small) == 0
    return root


def test_global_on_noiseless_mission(missions):
    out = missions / "clean_global"
    assert run("run", "--mission", missions / "clean", "--mode", "global", "--out", out) == 0
    m = read_json(out / "metrics.json")
    assert m["mean_reprojection_error_px"] < 1e-6
    assert m["std_convention"] == "population"
    for name in ("poses.csv", "points.ply", "residuals.csv", "matches.csv", "tracks.csv", "solve_stats.json",
                 "run.json", "config.json"):
        assert (out / name).is_file()


def test_single_cluster_proposed_equals_global(missions):
    g, p = missions / "noisy_global", missions / "noisy_proposed"
    assert run("run", "--mission", missions / "noisy", "--mode", "global", "--out", g) == 0
    with pytest.warns(InsufficientImages):
        assert run("run", "--mission", missions / "noisy", "--mode", "proposed", "--cluster-size", 12,
                   "--out", p) == 0
    pg, _ = read_poses_csv(g / "poses.csv")
    pp, _ = read_poses_csv(p / "poses.csv")
    assert set(pg) == set(pp)
    for i in pg:
        assert np.abs(pg[i].translation - pp[i].translation).max() < 1e-6
        assert np.abs(pg[i].rotation - pp[i].rotation).max() < 1e-6


def test_eval_writes_comparison(missions):
    runs = [missions / "noisy_global", missions / "noisy_proposed"]
    if not all((r / "poses.csv").is_file() for r in runs):
        for mode, r in zip(("global", "proposed"), runs):
            assert run("run", "--mission", missions / "noisy", "--mode", mode, "--out", r) == 0
    out = missions / "cmp"
    assert run("eval", "--mission", missions / "noisy", "--run", runs[0], "--run", runs[1], "--out", out) == 0
    with open(out / "comparison.csv") as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == ["metric", "noisy_global", "noisy_proposed"]
    assert [r[0] for r in rows[1:]] == [label for _, label in TABLE_FIELDS]
    m = read_json(runs[1] / "metrics.json")
    assert m["position_rmse_m"] < m["nav_position_rmse_m"]


def test_eval_without_poses(missions, tmp_path):
    assert run("eval", "--mission", missions / "noisy", "--run", tmp_path) == 2


def test_run_needs_an_input(tmp_path):
    assert run("run", "--out", tmp_path / "r") == 2


def test_run_with_missing_frames(tmp_path, missions):
    frames = tmp_path / "frames"
    frames.mkdir()
    (tmp_path / "cam.json").write_text(json.dumps({"focal_length_mm": 10, "pixel_pitch_um": 5, "width_px": 64,
                                                   "height_px": 48}))
    code = run("run", "--out", tmp_path / "r", "--frames", frames, "--nav", missions / "noisy" / "nav_poses.csv",
               "--dsm", missions / "noisy" / "dsm.asc", "--camera", tmp_path / "cam.json")
    assert code == 2


def test_bad_mode_rejected(tmp_path, missions):
    assert run("run", "--mission", missions / "noisy", "--mode", "fastest", "--out", tmp_path / "r") == 2
