import json

import pandas as pd
import pytest

from SmartMerge.checkpoint import Checkpoint, save_checkpoint
from SmartMerge.cli import main
from SmartMerge.networks import IdasNetworks, NetworkArch
from SmartMerge.scenario import ScenarioSpec, VehicleEntry
from SmartMerge.utils import MANIFEST_NAME, OUTPUT_ROOT_ENV, RunManifest, resolve_output_dir

SMALL_RUN = {
    "train": {"stage1_episodes": 2, "stage2_episodes": 1, "stage2_agent_count": 3, "max_steps": 30,
              "checkpoint_every": 1, "log_every": 1, "seed": 2},
    "stage1_scenarios": {"agent_count": [2, 3], "initial_fraction": 1.0},
    "stage2_scenarios": {"initial_fraction": 1.0},
    "network": {"branch_units": 4, "conv_filters": 1, "trunk_units": 6, "q_slots": 3, "q_hidden": 8},
    "eval": {"scenarios": 2, "max_steps": 40, "scene_count": 2, "bootstrap_samples": 50},
    "benchmark_scenarios": {"agent_count": [2, 3], "initial_fraction": 1.0},
}


@pytest.fixture
def config_file(tmp_path):
    path = tmp_path / "small.json"
    path.write_text(json.dumps(SMALL_RUN, indent=2))
    return path


@pytest.fixture
def trained(tmp_path, config_file):
    out = tmp_path / "run"
    assert main(["--quiet", "train", str(config_file), "--out", str(out)]) == 0
    return out


def _spec_file(tmp_path, *entries):
    path = tmp_path / "scenario.json"
    path.write_text(json.dumps(ScenarioSpec(seed=9, vehicles=tuple(entries)).to_dict()))
    return path


def test_train_writes_both_stages(trained):
    for name in ("stage1.ckpt", "stage2.ckpt", "training_log_stage1.csv", "training_log_stage2.csv", MANIFEST_NAME):
        assert (trained / name).exists(), name
    manifest = RunManifest.read(trained)
    assert manifest.exit_code == 0
    assert manifest.seed == 2
    assert manifest.command == "train --stage all"


def test_stage2_without_checkpoint_is_a_usage_error(tmp_path):
    assert main(["--quiet", "train", "--stage", "2", "--out", str(tmp_path / "x")]) == 2
    assert not (tmp_path / "x").exists()


def test_missing_config_is_a_usage_error(tmp_path):
    assert main(["--quiet", "train", str(tmp_path / "nope.json")]) == 2


def test_inspect_prints_header(trained, capsys):
    assert main(["inspect", str(trained / "stage2.ckpt")]) == 0
    output = capsys.readouterr().out
    assert "stage stage2" in output
    assert "networks policy, value, value_target, q, q_target, policy_target" in output
    assert "opt." not in output
    assert main(["inspect", "--all", str(trained / "stage2.ckpt")]) == 0
    assert "opt.policy." in capsys.readouterr().out


def test_inspect_rejects_truncated_file(tmp_path):
    raw = Checkpoint(stage="stage1", blocks={"policy.w": [[1.0, 2.0], [3.0, 4.0]]}).to_bytes()
    path = tmp_path / "broken.ckpt"
    path.write_bytes(raw[:-5])
    assert main(["--quiet", "inspect", str(path)]) == 1
    assert main(["--quiet", "inspect", str(tmp_path / "missing.ckpt")]) == 1


def test_eval_benchmark(trained, config_file, tmp_path, capsys):
    out = tmp_path / "results"
    code = main(["--quiet", "eval", str(trained), "--config", str(config_file), "--methods", "idas,idas-v,idm",
                 "--out", str(out), "--save-trajectories"])
    assert code == 0
    summary = pd.read_csv(out / "summary.csv")
    assert list(summary["method"]) == ["idas", "idas-v", "idm"]
    assert len(pd.read_csv(out / "benchmark.csv")) == 6
    assert (out / "trajectories" / "idm_001.csv").exists()
    assert "success_rate" in capsys.readouterr().out
    assert RunManifest.read(out).command == "eval"


def test_eval_scene_family(trained, config_file, tmp_path):
    out = tmp_path / "scenes"
    assert main(["--quiet", "eval", str(trained / "stage2.ckpt"), "--config", str(config_file),
                 "--methods", "idas,fsm-idm", "--scene-family", "s2", "--out", str(out)]) == 0
    assert len(pd.read_csv(out / "scenes_s2.csv")) == 4


def test_eval_unknown_method_is_a_usage_error(trained, tmp_path):
    assert main(["--quiet", "eval", str(trained), "--methods", "idas,mpc", "--out", str(tmp_path / "r")]) == 2


def test_eval_missing_direct_checkpoint(trained, tmp_path):
    assert main(["--quiet", "eval", str(trained), "--methods", "idas-direct", "--out", str(tmp_path / "r")]) == 1


def test_rollout_with_baseline(tmp_path):
    spec = _spec_file(tmp_path,
                      VehicleEntry(lane=0, entry_time_s=0.0, initial_s=20.0, initial_v=10.0, b_type=0.0),
                      VehicleEntry(lane=1, entry_time_s=0.0, initial_s=30.0, initial_v=10.0, b_type=1.0,
                                   controller="fsm_idm"))
    out = tmp_path / "rollout"
    assert main(["--quiet", "rollout", "idm", str(spec), "--max-steps", "50", "--out", str(out)]) == 0
    frame = pd.read_csv(out / "trajectory.csv")
    assert set(frame["controller"]) == {"policy", "fsm_idm"}
    assert (out / "profiles" / "profiles.csv").exists()
    assert RunManifest.read(out).seed == 9


def test_rollout_with_checkpoint(trained, tmp_path):
    spec = _spec_file(tmp_path, VehicleEntry(lane=1, entry_time_s=0.0, initial_s=10.0, initial_v=8.0, b_type=-1.0))
    out = tmp_path / "rollout"
    assert main(["--quiet", "rollout", str(trained / "stage2.ckpt"), str(spec), "--max-steps", "20",
                 "--seed", "4", "--out", str(out)]) == 0
    assert len(pd.read_csv(out / "trajectory.csv")) == 20


def test_rollout_gap_violation_is_a_usage_error(tmp_path):
    path = tmp_path / "scenario.json"
    path.write_text(json.dumps({"seed": 1, "vehicles": [
        {"lane": 0, "initial_s": 10.0, "initial_v": 5.0, "b_type": 0.0},
        {"lane": 0, "initial_s": 13.0, "initial_v": 5.0, "b_type": 0.0},
    ]}))
    assert main(["--quiet", "rollout", "idm", str(path), "--out", str(tmp_path / "r")]) == 2


@pytest.mark.parametrize("vehicles", [5, [7], {"lane": 0}])
def test_rollout_rejects_malformed_vehicle_list(tmp_path, capsys, vehicles):
    path = tmp_path / "scenario.json"
    path.write_text(json.dumps({"seed": 1, "vehicles": vehicles}))
    assert main(["rollout", "idm", str(path), "--out", str(tmp_path / "r")]) == 2
    assert "vehicles" in capsys.readouterr().err


def test_sweep(trained, config_file, tmp_path, capsys):
    out = tmp_path / "sweep"
    assert main(["--quiet", "sweep", str(trained / "stage2.ckpt"), "--config", str(config_file),
                 "--points", "3", "--repetitions", "1", "--out", str(out)]) == 0
    assert len(pd.read_csv(out / "sweep_runs.csv")) == 3
    assert list(pd.read_csv(out / "sweep.csv")["b_type"]) == [-2.0, 0.0, 2.0]
    assert (out / "sweep_trend.csv").exists()
    assert "spearman rho" in capsys.readouterr().out


def test_resolve_output_dir(tmp_path):
    environ = {OUTPUT_ROOT_ENV: str(tmp_path)}
    assert resolve_output_dir("results", environ) == tmp_path / "results"
    assert resolve_output_dir(tmp_path / "abs", environ) == tmp_path / "abs"
    assert str(resolve_output_dir("results", {})) == "results"


def test_manifest_round_trip(tmp_path):
    manifest = RunManifest(command="eval", config_path=None, seed=3, output_dir=str(tmp_path)).finish(0)
    path = manifest.write()
    assert path == tmp_path / MANIFEST_NAME
    assert RunManifest.read(path) == manifest


def test_eval_all_five_methods(tmp_path, config_file):
    arch = NetworkArch(branch_units=4, conv_filters=1, trunk_units=6, q_slots=3, q_hidden=8)
    run = tmp_path / "fresh"
    for seed, stage in enumerate(("stage1", "stage2", "direct")):
        nets = IdasNetworks.fresh(arch, seed=seed, with_q=stage != "stage1")
        save_checkpoint(nets.to_checkpoint(stage, 0, 0), run / f"{stage}.ckpt")
    methods = "idas,idas-v,idas-direct,idm,fsm-idm"
    for out in ("first", "second"):
        assert main(["--quiet", "eval", str(run), "--config", str(config_file), "--methods", methods,
                     "--out", str(tmp_path / out)]) == 0
    summary = pd.read_csv(tmp_path / "first" / "summary.csv")
    assert list(summary["method"]) == methods.split(",")
    assert {"success_rate", "perfect_success_rate", "avg_speed"} <= set(summary.columns)
    first = pd.read_csv(tmp_path / "first" / "benchmark.csv")
    second = pd.read_csv(tmp_path / "second" / "benchmark.csv")
    baselines = first["method"].isin(["idm", "fsm-idm"])
    pd.testing.assert_frame_equal(first[baselines], second[baselines])
