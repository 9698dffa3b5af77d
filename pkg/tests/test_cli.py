"""Command-line pipeline: tiny end-to-end run plus error codes."""

import json
import os

import numpy as np
import pytest

from riskmpc.cli import main
from riskmpc.harness import RunManifest
from riskmpc.scenarios import make_straight

TINY = dict(master_seed=0, total_segments=4, warmup_fraction=0.25,
            warmup_steps=3, refine_steps_per_segment=1,
            final_refine_steps=2, ego_refine_steps=2, batch_size=2,
            distill_steps=3)


@pytest.fixture()
def workspace(tmp_path):
    manifest = RunManifest(**TINY)
    mpath = tmp_path / "manifest.json"
    manifest.save(mpath)
    suite_dir = tmp_path / "suite"
    suite_dir.mkdir()
    make_straight(1).save(suite_dir / "straight-1.json")
    out = tmp_path / "out"
    return str(mpath), str(suite_dir), str(out)


def test_full_pipeline_smoke(workspace):
    mpath, suite, out = workspace
    base = ["--manifest", mpath, "--suite", suite, "--out", out]
    assert main(base + ["warmup"]) == 0
    assert os.path.exists(os.path.join(out, "warmup_model.npz"))

    assert main(base + ["interact"]) == 0
    assert os.path.exists(os.path.join(out, "world_model.npz"))
    assert os.path.exists(os.path.join(out, "progress.csv"))

    assert main(base + ["distill"]) == 0
    assert os.path.exists(os.path.join(out, "proposer.npz"))
    with open(os.path.join(out, "distill_losses.csv")) as f:
        assert len(f.readlines()) == TINY["distill_steps"] + 1

    assert main(base + ["evaluate", "--policy", "random",
                        "--eval-seeds", "1"]) == 0
    with open(os.path.join(out, "suite_random.json")) as f:
        data = json.load(f)
    assert data["policy"] == "random" and len(data["episodes"]) == 1

    assert main(base + ["evaluate", "--policy", "rawmpc",
                        "--eval-seeds", "1"]) == 0
    assert os.path.exists(os.path.join(out, "suite_rawmpc.json"))

    assert main(base + ["rollout", "--scenario", "straight-1"]) == 0
    log = os.path.join(out, "rollout_straight-1.jsonl")
    assert os.path.exists(log)
    assert os.path.exists(os.path.join(out, "scores_straight-1.csv"))

    assert main(base + ["plot", "--scenario", "straight-1"]) == 0
    assert os.path.exists(os.path.join(out, "plot_straight-1.png"))


def test_unknown_policy_is_config_error(tmp_path):
    assert main(["--out", str(tmp_path), "evaluate", "--policy", "bogus"]) == 2


def test_missing_manifest_is_config_error(tmp_path):
    assert main(["--manifest", str(tmp_path / "nope.json"),
                 "--out", str(tmp_path), "warmup"]) == 2


def test_missing_checkpoint_is_checkpoint_error(tmp_path):
    assert main(["--out", str(tmp_path), "evaluate", "--policy",
                 "rawmpc-sampled", "--eval-seeds", "1"]) == 3


def test_missing_suite_dir_is_config_error(tmp_path):
    assert main(["--suite", str(tmp_path / "nope"), "--out", str(tmp_path),
                 "evaluate", "--policy", "random"]) == 2


def test_plot_before_rollout_is_checkpoint_error(tmp_path):
    suite = tmp_path / "suite"
    suite.mkdir()
    make_straight(1).save(suite / "straight-1.json")
    assert main(["--suite", str(suite), "--out", str(tmp_path), "plot",
                 "--scenario", "straight-1"]) == 3


def test_unknown_scenario_is_config_error(tmp_path):
    suite = tmp_path / "suite"
    suite.mkdir()
    make_straight(1).save(suite / "straight-1.json")
    assert main(["--suite", str(suite), "--out", str(tmp_path), "rollout",
                 "--scenario", "nope"]) == 2
