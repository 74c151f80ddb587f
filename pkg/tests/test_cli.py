import csv
import json
from pathlib import Path

import numpy as np
import pytest
import yaml

from decision_nce.cli import EXIT_ERROR, EXIT_OK, chi_square_path, main
from decision_nce.config import REFERENCE_PLANNER
from decision_nce.lcbc import load_policy
from decision_nce.manifest import blob_hash, manifest_path
from decision_nce.trainer import load_checkpoint, random_checkpoint

TINY_ENCODER = {
    "encoder": {"hidden": [16], "embed_dim": 8, "token_dim": 8, "projection_hidden": [16]},
    "objective": {"embed_dim": 8},
}


def _run(*argv) -> int:
    return main([str(a) for a in argv])


def _read_json(path):
    return json.loads(path.read_text())


@pytest.fixture
def world_file(tmp_path):
    config = tmp_path / "world.yaml"
    config.write_text(yaml.safe_dump({"alpha": 0.2, "n_distractors": 2, "scene_dim": 2}))
    out = tmp_path / "world.jsonl"
    code = _run(
        "gen-world", "--out", out, "--count", 12, "--seed", 3, "--n-task-pairs", 2,
        "--obs-dim", 12, "--h-min", 6, "--h-max", 12, "--config", config, "--quiet",
    )
    assert code == EXIT_OK
    return out


@pytest.fixture
def ckpt_file(tmp_path, world_file):
    config = tmp_path / "train.yaml"
    config.write_text(yaml.safe_dump(TINY_ENCODER))
    out = tmp_path / "enc.ckpt"
    code = _run(
        "train", "--data", world_file, "--out", out, "--config", config,
        "--iterations", 3, "--batch-size", 4, "--quiet",
    )
    assert code == EXIT_OK
    return out


class TestGenWorld:
    def test_outputs_and_manifest(self, tmp_path, world_file):
        lines = world_file.read_text().splitlines()
        assert len(lines) == 13
        manifest = _read_json(manifest_path(world_file))
        assert manifest["subcommand"] == "gen-world"
        assert manifest["seed"] == 3
        assert manifest["config"]["world"]["alpha"] == 0.2
        assert manifest["config"]["count"] == 12
        assert manifest["inputs"] == {str(tmp_path / "world.yaml"): blob_hash(tmp_path / "world.yaml")}
        assert manifest["outputs"] == [str(world_file)]

    def test_same_seed_same_bytes(self, tmp_path):
        a, b = tmp_path / "a.jsonl", tmp_path / "b.jsonl"
        assert _run("gen-world", "--out", a, "--count", 4, "--seed", 9, "--quiet") == EXIT_OK
        assert _run("gen-world", "--out", b, "--count", 4, "--seed", 9, "--quiet") == EXIT_OK
        assert a.read_bytes() == b.read_bytes()

    def test_repeat_from_manifest(self, tmp_path, world_file):
        again = tmp_path / "again.jsonl"
        assert _run("gen-world", "--out", again, "--config", manifest_path(world_file), "--quiet") == EXIT_OK
        assert again.read_bytes() == world_file.read_bytes()
        manifest = _read_json(manifest_path(again))
        assert manifest["seed"] == 3
        assert manifest["config"] == _read_json(manifest_path(world_file))["config"]

    def test_manifest_of_another_subcommand(self, tmp_path, ckpt_file, capsys):
        code = _run("gen-world", "--out", tmp_path / "w.jsonl", "--config", manifest_path(ckpt_file), "--quiet")
        assert code == EXIT_ERROR
        assert "'train' run" in capsys.readouterr().err

    def test_zero_count(self, tmp_path, capsys):
        assert _run("gen-world", "--out", tmp_path / "w.jsonl", "--count", 0, "--quiet") == EXIT_ERROR
        assert capsys.readouterr().err.startswith("error:")

    def test_invalid_world(self, tmp_path):
        assert _run("gen-world", "--out", tmp_path / "w.jsonl", "--h-min", 1, "--quiet") == EXIT_ERROR


class TestSamplingStats:
    def test_four_frames(self, tmp_path):
        out = tmp_path / "goals.csv"
        assert _run("sampling-stats", "--h", 4, "--samples", 20000, "--out", out, "--quiet") == EXIT_OK
        with open(out, newline="") as fh:
            rows = list(csv.reader(fh))
        assert rows[0] == ["t", "analytic", "empirical"]
        np.testing.assert_allclose([float(r[1]) for r in rows[1:]], [0, 1 / 12, 5 / 24, 11 / 24], atol=1e-15)
        results = _read_json(manifest_path(out))["results"]
        assert results["analytic_monotone"] is True
        assert 0 <= results["p_value"] <= 1

    def test_chi_square_summary_file(self, tmp_path):
        out = tmp_path / "goals.csv"
        assert _run("sampling-stats", "--h", 5, "--samples", 5000, "--seed", 1, "--out", out, "--quiet") == EXIT_OK
        summary = _read_json(chi_square_path(out))
        assert summary["h"] == 5
        assert summary["samples"] == 5000
        assert 0 <= summary["p_value"] <= 1
        assert summary["chi_square"] >= 0
        assert str(chi_square_path(out)) in _read_json(manifest_path(out))["outputs"]

    def test_horizon_too_short(self, tmp_path):
        with pytest.raises(SystemExit) as info:
            _run("sampling-stats", "--h", 1, "--out", tmp_path / "g.csv")
        assert info.value.code == 2


class TestTrain:
    def test_outputs(self, ckpt_file):
        ckpt = load_checkpoint(ckpt_file)
        assert ckpt.iteration == 3
        assert ckpt.world_config.n_task_pairs == 2
        with open(f"{ckpt_file}.metrics.csv", newline="") as fh:
            assert len(list(csv.reader(fh))) == 4
        manifest = _read_json(manifest_path(ckpt_file))
        assert manifest["config"]["train"]["encoder"]["hidden"] == [16]
        assert set(manifest["results"]) == {"first_loss", "final_loss"}

    def test_zero_learning_rate(self, tmp_path, world_file):
        config = tmp_path / "train.yaml"
        config.write_text(yaml.safe_dump(TINY_ENCODER))
        out = tmp_path / "lr0.ckpt"
        code = _run(
            "train", "--data", world_file, "--out", out, "--config", config,
            "--iterations", 2, "--batch-size", 4, "--lr", 0, "--objective", "p", "--quiet",
        )
        assert code == EXIT_OK
        ckpt = load_checkpoint(out)
        fresh = random_checkpoint(ckpt.train_config)
        for (_, a), (_, b) in zip(ckpt.params.parameters(), fresh.params.parameters()):
            assert a.data.tobytes() == b.data.tobytes()

    def test_repeat_from_manifest(self, tmp_path, world_file, ckpt_file):
        again = tmp_path / "again.ckpt"
        code = _run("train", "--data", world_file, "--out", again, "--config", manifest_path(ckpt_file), "--quiet")
        assert code == EXIT_OK
        assert again.read_bytes() == ckpt_file.read_bytes()
        assert Path(f"{again}.metrics.csv").read_bytes() == Path(f"{ckpt_file}.metrics.csv").read_bytes()

    def test_flags_override_the_manifest(self, tmp_path, world_file, ckpt_file):
        again = tmp_path / "again.ckpt"
        code = _run(
            "train", "--data", world_file, "--out", again, "--config", manifest_path(ckpt_file),
            "--iterations", 2, "--quiet",
        )
        assert code == EXIT_OK
        ckpt = load_checkpoint(again)
        assert ckpt.iteration == 2
        assert ckpt.train_config.encoder.hidden == (16,)

    def test_unknown_objective(self, tmp_path, world_file):
        with pytest.raises(SystemExit) as info:
            _run("train", "--data", world_file, "--out", tmp_path / "x.ckpt", "--objective", "q")
        assert info.value.code == 2

    def test_missing_dataset(self, tmp_path, capsys):
        assert _run("train", "--data", tmp_path / "nope.jsonl", "--out", tmp_path / "x.ckpt", "--quiet") == EXIT_ERROR
        assert "error:" in capsys.readouterr().err


class TestAnalysis:
    def test_reward_curve(self, tmp_path, ckpt_file, world_file):
        out = tmp_path / "curve.csv"
        assert _run("reward-curve", "--ckpt", ckpt_file, "--data", world_file, "--out", out, "--quiet") == EXIT_OK
        with open(out, newline="") as fh:
            rows = list(csv.reader(fh))[1:]
        assert len({r[0] for r in rows}) == 2
        manifest = _read_json(manifest_path(out))
        assert set(manifest["inputs"]) == {str(ckpt_file), str(world_file)}
        assert len(manifest["results"]["spearman"]) == 2

    def test_heatmap(self, tmp_path, ckpt_file, world_file):
        out = tmp_path / "heatmap.csv"
        code = _run("heatmap", "--ckpt", ckpt_file, "--data", world_file, "--spans", "2,full", "--out", out, "--quiet")
        assert code == EXIT_OK
        header = out.read_text().splitlines()[0]
        assert header == "segment,open door,close door,open drawer,close drawer"
        assert _read_json(manifest_path(out))["config"]["spans"] == [2, "full"]

    def test_first_image_stats(self, tmp_path, ckpt_file, world_file):
        out = tmp_path / "first.json"
        assert _run("first-image-stats", "--ckpt", ckpt_file, "--data", world_file, "--out", out, "--quiet") == EXIT_OK
        stats = _read_json(out)
        assert stats["n_trajectories"] == 12
        assert set(stats) == {
            "n_trajectories", "pairwise_mean", "mean_instruction_similarity", "random_frame_pair_mean"
        }

    def test_world_mismatch(self, tmp_path, ckpt_file, capsys):
        other = tmp_path / "wide.jsonl"
        assert _run("gen-world", "--out", other, "--count", 2, "--obs-dim", 16, "--quiet") == EXIT_OK
        code = _run("reward-curve", "--ckpt", ckpt_file, "--data", other, "--out", tmp_path / "c.csv", "--quiet")
        assert code == EXIT_ERROR
        assert "obs_dim" in capsys.readouterr().err


class TestPlan:
    def test_defaults_are_recorded(self, tmp_path, world_file):
        out = tmp_path / "plan.json"
        code = _run(
            "plan", "--oracle", "--data", world_file, "--episodes", 1,
            "--instruction", "open door", "--out", out, "--quiet",
        )
        assert code == EXIT_OK
        manifest = _read_json(manifest_path(out))
        assert manifest["config"]["planner"] == REFERENCE_PLANNER.to_dict()
        report = _read_json(out)
        assert report["reward"] == "oracle"
        assert set(report["success"]) == {"open door"}

    def test_report_bytes_are_reproducible(self, tmp_path, ckpt_file):
        outs = [tmp_path / "a.json", tmp_path / "b.json"]
        for out in outs:
            code = _run(
                "plan", "--ckpt", ckpt_file, "--episodes", 1, "--horizon", 5, "--sequences", 4,
                "--random-baseline", "--seed", 2, "--out", out, "--quiet",
            )
            assert code == EXIT_OK
        assert outs[0].read_bytes() == outs[1].read_bytes()
        assert "random_baseline" in _read_json(outs[0])

    def test_unknown_instruction(self, tmp_path, world_file):
        code = _run("plan", "--oracle", "--data", world_file, "--instruction", "push door", "--out", tmp_path / "p.json", "--quiet")
        assert code == EXIT_ERROR

    def test_needs_a_reward(self, tmp_path, world_file):
        assert _run("plan", "--data", world_file, "--out", tmp_path / "p.json", "--quiet") == EXIT_ERROR


class TestEvalLcbc:
    def test_random_encoder(self, tmp_path, world_file):
        out, policy = tmp_path / "bc.json", tmp_path / "policy.ckpt"
        code = _run(
            "eval-lcbc", "--random-encoder", "--demos", world_file, "--hidden", 8, "--steps", 4,
            "--eval-interval", 2, "--episodes", 1, "--batch-size", 4, "--policy-out", policy,
            "--out", out, "--quiet",
        )
        assert code == EXIT_OK
        report = _read_json(out)
        assert [e["step"] for e in report["evaluations"]] == [2, 4]
        assert report["n_demos"] == 12
        assert load_policy(policy).hidden == [8]
        assert _read_json(manifest_path(out))["config"]["encoder"] == "random"

    def test_generated_demos_from_checkpoint_world(self, tmp_path, ckpt_file):
        out = tmp_path / "bc.json"
        code = _run(
            "eval-lcbc", "--ckpt", ckpt_file, "--demos-per-task", 1, "--hidden", 8, "--steps", 2,
            "--eval-interval", 0, "--episodes", 1, "--out", out, "--quiet",
        )
        assert code == EXIT_OK
        assert _read_json(out)["n_demos"] == 4

    def test_needs_an_encoder(self, tmp_path, world_file):
        assert _run("eval-lcbc", "--demos", world_file, "--out", tmp_path / "bc.json", "--quiet") == EXIT_ERROR
