"""Directional reproduction runs at desk scale. Deselected by default; run with `-m slow`."""

import numpy as np
import pytest

from decision_nce.cli import EXIT_OK, main
from decision_nce.config import (
    DESK_PLANNER,
    DESK_TRAIN,
    REFERENCE_BC,
    EncoderConfig,
    ObjectiveSpec,
    TrainConfig,
    Variant,
    WorldConfig,
)
from decision_nce.lcbc import run_lcbc
from decision_nce.manifest import manifest_path
from decision_nce.planner import OracleReward, evaluate_planner, random_action_baseline
from decision_nce.rewards import (
    curve_spearman,
    first_image_similarity_stats,
    heatmap_segments,
    random_frame_pair_similarity,
    reward_curve,
    reward_heatmap,
)
from decision_nce.trainer import random_checkpoint, save_checkpoint, train
from decision_nce.world import SyntheticWorld, demos_per_task, save_dataset

pytestmark = pytest.mark.slow

SEEDS = (0, 1, 2)
# at least 50 planner episodes per seed, spread over the 8 instructions
PLANNER_EPISODES = 7
BC_DEMOS_PER_TASK = 5


@pytest.fixture(scope="module")
def world():
    return SyntheticWorld(WorldConfig())


@pytest.fixture(scope="module")
def dataset(world):
    return world.generate_dataset(200)


@pytest.fixture(scope="module")
def held_out(world):
    return demos_per_task(world, 10, seed=7)


def _train(world, dataset, variant):
    config = DESK_TRAIN.replace(
        objective=ObjectiveSpec(variant), encoder=EncoderConfig.for_world(world.config)
    )
    return train(config, dataset, world.config, progress=False)


@pytest.fixture(scope="module")
def t_ckpt(world, dataset):
    return _train(world, dataset, Variant.T)


@pytest.fixture(scope="module")
def p_ckpt(world, dataset):
    return _train(world, dataset, Variant.P)


@pytest.fixture(scope="module")
def frame_align_ckpt(world, dataset):
    return _train(world, dataset, Variant.FRAME_ALIGN)


@pytest.fixture(scope="module")
def t8_ckpt(world, dataset):
    return _train(world, dataset, Variant.T8)


def _first_image_margin(ckpt, dataset):
    first = first_image_similarity_stats(ckpt, dataset)["pairwise_mean"]
    return first - random_frame_pair_similarity(ckpt, dataset, np.random.default_rng(0))


def _lcbc_success(ckpt, world, seed):
    demos = demos_per_task(world, BC_DEMOS_PER_TASK, seed)
    _, report = run_lcbc(ckpt, demos, world, REFERENCE_BC.replace(seed=seed))
    return report["final_success"]


def _inputs_only(argv):
    """The subcommand with its input files and required flags, without run settings."""
    keep = {"--ckpt", "--data", "--h"}
    kept = [argv[0]]
    for flag, value in zip(argv[1::2], argv[2::2]):
        if flag in keep:
            kept += [flag, value]
    return kept


class TestTraining:
    def test_loss_descends(self, t_ckpt):
        losses = np.array([r.loss for r in t_ckpt.history])
        assert len(losses) == DESK_TRAIN.iterations
        assert np.all(np.isfinite(losses))
        assert losses[-50:].mean() < losses[:50].mean()


class TestRewardShape:
    def test_heatmap_grounding(self, t_ckpt, world, held_out):
        segments = heatmap_segments(held_out, np.random.default_rng(0))
        grid = reward_heatmap(t_ckpt, held_out, segments, world.vocabulary.instructions())
        assert grid.diagonal_dominance() >= 0.9
        assert grid.mirror_negativity() >= 0.8

    def test_temporal_consistency(self, t_ckpt, world, held_out):
        matched, mirrored = [], []
        for traj in held_out:
            l = traj.instruction
            matched.append(curve_spearman(reward_curve(t_ckpt, traj, l)))
            mirrored.append(curve_spearman(reward_curve(t_ckpt, traj, world.vocabulary.mirror(l))))
        assert np.mean(np.array(matched) >= 0.8) >= 0.9
        assert np.mean(np.array(mirrored) <= -0.8) >= 0.8


class TestFirstImageClustering:
    def test_trajectory_objective_clusters_first_frames(self, t_ckpt, held_out):
        assert _first_image_margin(t_ckpt, held_out) >= 0.1

    def test_frame_alignment_does_not(self, frame_align_ckpt, held_out):
        assert _first_image_margin(frame_align_ckpt, held_out) < 0.1

    @pytest.mark.xfail(reason="potential objective clusters first frames only weakly at desk scale", strict=False)
    def test_potential_objective_clusters_first_frames(self, p_ckpt, held_out):
        assert _first_image_margin(p_ckpt, held_out) >= 0.1


class TestPlanning:
    def test_learned_reward_beats_random_actions(self, t_ckpt, world):
        instructions = world.vocabulary.instructions()
        learned = [
            evaluate_planner(t_ckpt, world, instructions, PLANNER_EPISODES, DESK_PLANNER, seed)["mean_success"]
            for seed in SEEDS
        ]
        baseline = [
            random_action_baseline(world, instructions, PLANNER_EPISODES, DESK_PLANNER.horizon, seed)["mean_success"]
            for seed in SEEDS
        ]
        assert np.mean(learned) >= np.mean(baseline) + 0.3

    def test_oracle_reward_upper_bound(self, world):
        instructions = world.vocabulary.instructions()
        oracle = [
            evaluate_planner(OracleReward(), world, instructions, PLANNER_EPISODES, DESK_PLANNER, seed)["mean_success"]
            for seed in SEEDS
        ]
        assert np.mean(oracle) >= 0.9


class TestBehaviorCloning:
    @pytest.fixture(scope="class")
    def success(self, t_ckpt, t8_ckpt, world):
        untrained = {
            seed: random_checkpoint(TrainConfig(encoder=EncoderConfig.for_world(world.config), seed=seed), world.config)
            for seed in SEEDS
        }
        return {
            "t": np.mean([_lcbc_success(t_ckpt, world, seed) for seed in SEEDS]),
            "t8": np.mean([_lcbc_success(t8_ckpt, world, seed) for seed in SEEDS]),
            "random": np.mean([_lcbc_success(untrained[seed], world, seed) for seed in SEEDS]),
        }

    def test_endpoints_match_eight_frames(self, success):
        assert success["t"] >= success["t8"]

    def test_trained_features_match_random_features(self, success):
        assert success["t"] >= success["random"]

    @pytest.mark.xfail(reason="each task's expert action is constant, so any encoder separates them", strict=False)
    def test_trained_features_beat_random_features(self, success):
        assert success["t"] >= success["random"] + 0.2


class TestRepeatRuns:
    @pytest.fixture(scope="class")
    def files(self, tmp_path_factory, world, dataset, t_ckpt):
        root = tmp_path_factory.mktemp("repeat")
        save_dataset(root / "world.jsonl", world.config, dataset)
        save_checkpoint(t_ckpt, root / "t.ckpt")
        return root

    @pytest.mark.parametrize(
        "argv",
        [
            ["heatmap", "--ckpt", "t.ckpt", "--data", "world.jsonl"],
            ["reward-curve", "--ckpt", "t.ckpt", "--data", "world.jsonl", "--trajectory", "5"],
            ["first-image-stats", "--ckpt", "t.ckpt", "--data", "world.jsonl"],
            ["plan", "--ckpt", "t.ckpt", "--preset", "desk", "--episodes", "2", "--seed", "1"],
            ["eval-lcbc", "--ckpt", "t.ckpt", "--steps", "200", "--eval-interval", "100", "--episodes", "4"],
            ["sampling-stats", "--h", "10", "--samples", "100000", "--seed", "4"],
        ],
        ids=lambda argv: argv[0],
    )
    def test_repeat_from_manifest(self, files, argv):
        argv = [str(files / a) if a.endswith((".ckpt", ".jsonl")) else a for a in argv]
        first, again = files / f"{argv[0]}.out", files / f"{argv[0]}.again"
        assert main([*argv, "--out", str(first), "--quiet"]) == EXIT_OK
        # run settings come back from the manifest
        kept = _inputs_only(argv)
        assert main([*kept, "--config", str(manifest_path(first)), "--out", str(again), "--quiet"]) == EXIT_OK
        assert again.read_bytes() == first.read_bytes()
