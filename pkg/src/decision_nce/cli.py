"""Command-line entry point: every stage reads and writes plain data files.

Each subcommand resolves its config as defaults < `--config` YAML file < flags
and writes a `<output>.manifest.json` beside its main output. Passing that
manifest back as `--config` repeats the run.
"""

import argparse
import logging
import sys
from collections.abc import Callable, Sequence
from pathlib import Path
from typing import Any

import numpy as np

from decision_nce import logs
from decision_nce.config import (
    PLANNER_PRESETS,
    REFERENCE_BC,
    TRAIN_PRESETS,
    VARIANT_ALIASES,
    EncoderConfig,
    TrainConfig,
    WorldConfig,
    load_config,
    resolve,
)
from decision_nce.encoders import Instruction, Vocabulary
from decision_nce.errors import ConfigError, DecisionNCEError
from decision_nce.lcbc import run_lcbc, save_policy
from decision_nce.manifest import RunManifest, is_manifest, sibling_path, write_manifest
from decision_nce.planner import OracleReward, evaluate_planner, random_action_baseline
from decision_nce.reports import write_csv, write_json
from decision_nce.rewards import (
    HEATMAP_SPANS,
    curve_spearman,
    first_image_similarity_stats,
    heatmap_segments,
    random_frame_pair_similarity,
    reward_curve,
    reward_heatmap,
    write_curves_csv,
    write_heatmap_csv,
)
from decision_nce.sampler import (
    Dataset,
    empirical_goal_histogram,
    goal_chi_square,
    goal_distribution,
)
from decision_nce.trainer import (
    Checkpoint,
    load_checkpoint,
    random_checkpoint,
    save_checkpoint,
    train,
    write_metrics_csv,
)
from decision_nce.world import (
    SyntheticWorld,
    demos_per_task,
    generate_dataset,
    load_dataset,
    save_dataset,
)

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_ERROR = 2

CHI_SQUARE_SUFFIX = ".chi2.json"
DEFAULT_COUNT = 200
DEFAULT_SAMPLES = 1_000_000
DEFAULT_FIRST_IMAGE_SAMPLE = 100
DEFAULT_EPISODES = 10
DEFAULT_DEMOS_PER_TASK = 5


def _at_least(low: int) -> Callable[[str], int]:
    def parse(text: str) -> int:
        value = int(text)
        if value < low:
            raise argparse.ArgumentTypeError(f"must be at least {low}, got {value}")
        return value

    return parse


def _spans(text: str) -> list[int | None]:
    spans: list[int | None] = []
    for part in text.split(","):
        part = part.strip()
        spans.append(None if part == "full" else _at_least(1)(part))
    return spans


def chi_square_path(output: str) -> Path:
    return sibling_path(output, CHI_SQUARE_SUFFIX)


def _read_config_source(args: argparse.Namespace) -> None:
    """Load `--config` once; a run manifest also supplies the seed and run settings."""
    args.file_values, args.recorded = {}, {}
    if not args.config:
        return
    data = load_config(args.config)
    if not is_manifest(data):
        args.file_values = data
        return
    if data["subcommand"] != args.command:
        raise ConfigError("config", f"manifest records a {data['subcommand']!r} run, not {args.command!r}")
    args.recorded = data["config"]
    if args.seed is None:
        args.seed = data["seed"]
    logger.info("Repeating the %s run recorded in %s", args.command, args.config)


def _seed(args: argparse.Namespace) -> int:
    return 0 if args.seed is None else args.seed


def _file_values(args: argparse.Namespace, manifest: RunManifest, section: str) -> dict[str, Any]:
    """Config overrides for `section`, from a YAML file or the matching part of a manifest."""
    if not args.config:
        return {}
    manifest.add_input(args.config)
    if args.recorded:
        return args.recorded.get(section, {})
    return args.file_values


def _setting(args: argparse.Namespace, name: str, default: Any) -> Any:
    """A run setting from its flag, else from a repeated manifest, else the default."""
    value = getattr(args, name)
    if value is not None:
        return value
    recorded = args.recorded.get(name)
    return default if recorded is None else recorded


def _load_data(path: str, manifest: RunManifest) -> tuple[WorldConfig, Dataset]:
    manifest.add_input(path)
    return load_dataset(path)


def _load_ckpt(path: str, manifest: RunManifest) -> Checkpoint:
    manifest.add_input(path)
    return load_checkpoint(path)


def _instructions(vocab: Vocabulary, texts: Sequence[str] | None) -> list[Instruction]:
    if not texts:
        return vocab.instructions()
    return [vocab.parse(text) for text in texts]


def _progress(args: argparse.Namespace) -> bool:
    return not args.quiet


# subcommands


def cmd_gen_world(args: argparse.Namespace) -> None:
    manifest = RunManifest("gen-world", {}, _seed(args))
    flags = {
        "seed": args.seed,
        "n_task_pairs": args.n_task_pairs,
        "obs_dim": args.obs_dim,
        "noise": args.noise,
        "h_min": args.h_min,
        "h_max": args.h_max,
    }
    world = resolve(WorldConfig(), _file_values(args, manifest, "world"), flags)
    count = _setting(args, "count", DEFAULT_COUNT)
    manifest.config = {"world": world.to_dict(), "count": count}
    manifest.seed = world.seed
    save_dataset(args.out, world, generate_dataset(world, count))
    manifest.add_output(args.out)
    write_manifest(manifest, args.out)


def cmd_train(args: argparse.Namespace) -> None:
    manifest = RunManifest("train", {}, _seed(args))
    world, dataset = _load_data(args.data, manifest)
    defaults = TRAIN_PRESETS[args.preset].replace(encoder=EncoderConfig.for_world(world))
    flags = {
        "iterations": args.iterations,
        "batch_size": args.batch_size,
        "learning_rate": args.lr,
        "weight_decay": args.weight_decay,
        "seed": args.seed,
        "checkpoint_interval": args.checkpoint_interval,
        "max_segment_length": args.max_segment_length,
        "fixed_span": args.fixed_span,
        "objective": {
            "variant": None if args.objective is None else VARIANT_ALIASES[args.objective],
            "temperature": args.temperature,
        },
        "optimizer": {"name": args.optimizer},
    }
    config = resolve(defaults, _file_values(args, manifest, "train"), flags)
    manifest.config = {"train": config.to_dict(), "world": world.to_dict()}
    manifest.seed = config.seed

    ckpt = train(config, dataset, world, checkpoint_path=args.out, progress=_progress(args))
    save_checkpoint(ckpt, args.out)
    metrics = args.metrics or f"{args.out}.metrics.csv"
    write_metrics_csv(metrics, ckpt.history)
    manifest.add_output(args.out)
    manifest.add_output(metrics)
    manifest.results = {"first_loss": ckpt.history[0].loss, "final_loss": ckpt.history[-1].loss}
    write_manifest(manifest, args.out)


def cmd_sampling_stats(args: argparse.Namespace) -> None:
    seed = _seed(args)
    samples = _setting(args, "samples", DEFAULT_SAMPLES)
    manifest = RunManifest("sampling-stats", {"h": args.h, "samples": samples}, seed)
    analytic = goal_distribution(args.h)
    histogram = empirical_goal_histogram(args.h, samples, np.random.default_rng(seed))
    empirical = histogram.frequencies
    chi = goal_chi_square(args.h, histogram)
    rows = [(t + 1, float(a), float(e)) for t, (a, e) in enumerate(zip(analytic, empirical))]
    write_csv(args.out, ("t", "analytic", "empirical"), rows)
    summary = {
        "h": args.h,
        "samples": samples,
        "chi_square": chi.statistic,
        "p_value": chi.p_value,
        "max_abs_deviation": float(np.max(np.abs(analytic - empirical))),
        "no_goal_frequency": histogram.no_goal_frequency,
        "analytic_monotone": bool(np.all(np.diff(analytic) > 0)),
    }
    summary_path = chi_square_path(args.out)
    write_json(summary_path, summary)
    manifest.add_output(args.out)
    manifest.add_output(summary_path)
    manifest.results = summary
    logger.info("Chi-square %.3f, p-value %.4f", chi.statistic, chi.p_value)
    write_manifest(manifest, args.out)


def cmd_reward_curve(args: argparse.Namespace) -> None:
    index = _setting(args, "trajectory", 0)
    manifest = RunManifest("reward-curve", {"trajectory": index}, _seed(args))
    ckpt = _load_ckpt(args.ckpt, manifest)
    world, dataset = _load_data(args.data, manifest)
    ckpt.check_world(world)
    if not 0 <= index < len(dataset):
        raise ConfigError("trajectory", f"index {index} outside a dataset of {len(dataset)}")
    traj = dataset[index]
    vocab = ckpt.vocabulary
    if args.instruction:
        instructions = _instructions(vocab, args.instruction)
    else:
        instructions = [traj.instruction, vocab.mirror(traj.instruction)]
    curves = [reward_curve(ckpt, traj, l) for l in instructions]
    texts = [vocab.text(l) for l in instructions]
    write_curves_csv(args.out, curves, texts)
    manifest.config["instructions"] = texts
    manifest.add_output(args.out)
    manifest.results = {"spearman": {t: curve_spearman(c) for t, c in zip(texts, curves)}}
    write_manifest(manifest, args.out)


def cmd_heatmap(args: argparse.Namespace) -> None:
    seed = _seed(args)
    recorded = args.recorded.get("spans")
    if args.spans:
        spans = args.spans
    elif recorded:
        spans = [None if s == "full" else int(s) for s in recorded]
    else:
        spans = list(HEATMAP_SPANS)
    manifest = RunManifest("heatmap", {"spans": ["full" if s is None else s for s in spans]}, seed)
    ckpt = _load_ckpt(args.ckpt, manifest)
    world, dataset = _load_data(args.data, manifest)
    ckpt.check_world(world)
    segments = heatmap_segments(dataset, np.random.default_rng(seed), spans)
    grid = reward_heatmap(ckpt, dataset, segments, Vocabulary(world.n_task_pairs).instructions())
    write_heatmap_csv(args.out, grid)
    manifest.add_output(args.out)
    manifest.results = {
        "diagonal_dominance": grid.diagonal_dominance(),
        "mirror_negativity": grid.mirror_negativity(),
    }
    write_manifest(manifest, args.out)


def cmd_first_image_stats(args: argparse.Namespace) -> None:
    seed = _seed(args)
    sample = _setting(args, "sample", DEFAULT_FIRST_IMAGE_SAMPLE)
    manifest = RunManifest("first-image-stats", {"sample": sample}, seed)
    ckpt = _load_ckpt(args.ckpt, manifest)
    world, dataset = _load_data(args.data, manifest)
    ckpt.check_world(world)
    stats = dict(first_image_similarity_stats(ckpt, dataset, sample))
    stats["random_frame_pair_mean"] = random_frame_pair_similarity(
        ckpt, dataset, np.random.default_rng(seed), sample
    )
    write_json(args.out, stats)
    manifest.add_output(args.out)
    manifest.results = stats
    write_manifest(manifest, args.out)


def _world_for(args: argparse.Namespace, ckpt: Checkpoint | None, manifest: RunManifest) -> WorldConfig:
    if args.data:
        world, _ = _load_data(args.data, manifest)
    elif ckpt is not None and ckpt.world_config is not None:
        world = ckpt.world_config
    else:
        raise ConfigError("data", "no world available: pass --data or a checkpoint that records its world")
    if ckpt is not None:
        ckpt.check_world(world)
    return world


def cmd_plan(args: argparse.Namespace) -> None:
    seed = _seed(args)
    manifest = RunManifest("plan", {}, seed)
    if not args.oracle and not args.ckpt:
        raise ConfigError("ckpt", "pass --ckpt or --oracle")
    ckpt = _load_ckpt(args.ckpt, manifest) if args.ckpt else None
    world = SyntheticWorld(_world_for(args, ckpt, manifest))
    flags = {
        "horizon": args.horizon,
        "n_sequences": args.sequences,
        "iterations": args.iterations,
        "temperature": args.temperature,
        "gamma": args.gamma,
        "noise_scale": args.noise_scale,
    }
    config = resolve(PLANNER_PRESETS[args.preset], _file_values(args, manifest, "planner"), flags)
    instructions = _instructions(world.vocabulary, args.instruction or args.recorded.get("instructions"))
    episodes = _setting(args, "episodes", DEFAULT_EPISODES)
    manifest.config = {
        "planner": config.to_dict(),
        "world": world.config.to_dict(),
        "episodes": episodes,
        "reward": "oracle" if args.oracle else "embedding",
        "instructions": [world.vocabulary.text(l) for l in instructions],
    }

    reward = OracleReward() if args.oracle else ckpt
    report: dict[str, Any] = dict(evaluate_planner(reward, world, instructions, episodes, config, seed))
    report["reward"] = manifest.config["reward"]
    if args.random_baseline:
        baseline = random_action_baseline(world, instructions, episodes, config.horizon, seed)
        report["random_baseline"] = dict(baseline)
    write_json(args.out, report)
    manifest.add_output(args.out)
    manifest.results = {"mean_success": report["mean_success"]}
    write_manifest(manifest, args.out)


def cmd_eval_lcbc(args: argparse.Namespace) -> None:
    seed = _seed(args)
    manifest = RunManifest("eval-lcbc", {}, seed)
    if not args.random_encoder and not args.ckpt:
        raise ConfigError("ckpt", "pass --ckpt or --random-encoder")
    ckpt = _load_ckpt(args.ckpt, manifest) if args.ckpt else None
    if args.demos:
        world_config, demos = _load_data(args.demos, manifest)
    elif ckpt is not None and ckpt.world_config is not None:
        world_config, demos = ckpt.world_config, None
    else:
        raise ConfigError("demos", "no world available: pass --demos or a checkpoint that records its world")
    if ckpt is None:
        untrained = TrainConfig(encoder=EncoderConfig.for_world(world_config), seed=seed)
        ckpt = random_checkpoint(untrained, world_config)
    ckpt.check_world(world_config)
    world = SyntheticWorld(world_config)
    per_task = None
    if demos is None:
        per_task = _setting(args, "demos_per_task", DEFAULT_DEMOS_PER_TASK)
        demos = demos_per_task(world, per_task, seed)

    flags = {
        "hidden": None if args.hidden is None else tuple(args.hidden),
        "learning_rate": args.lr,
        "batch_size": args.batch_size,
        "steps": args.steps,
        "seed": args.seed,
        "eval_interval": args.eval_interval,
        "eval_episodes": args.episodes,
        "max_episode_steps": args.max_episode_steps,
    }
    config = resolve(REFERENCE_BC, _file_values(args, manifest, "bc"), flags)
    manifest.config = {
        "bc": config.to_dict(),
        "world": world_config.to_dict(),
        "encoder": "random" if args.random_encoder else "checkpoint",
        "n_demos": len(demos),
        "demos_per_task": per_task,
    }

    policy, report = run_lcbc(ckpt, demos, world, config, progress=_progress(args))
    write_json(args.out, dict(report))
    manifest.add_output(args.out)
    if args.policy_out:
        save_policy(policy, args.policy_out, config)
        manifest.add_output(args.policy_out)
    manifest.results = {"final_success": report["final_success"], "max_success": report["max_success"]}
    write_manifest(manifest, args.out)


# parser


def _common() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=None, help="random seed (default 0)")
    common.add_argument("--config", help="YAML file with config overrides, or a run manifest to repeat")
    level = common.add_mutually_exclusive_group()
    level.add_argument("--quiet", action="store_true", help="only log warnings and errors")
    level.add_argument("--verbose", action="store_true", help="log debug detail")
    return common


def build_parser() -> argparse.ArgumentParser:
    common = _common()
    parser = argparse.ArgumentParser(
        prog="decisionnce-desk",
        description="Trajectory-level vision-language reward learning on a synthetic desk world.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-world", parents=[common], help="generate a synthetic trajectory dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--count", type=int, help="trajectories to generate (default 200)")
    p.add_argument("--n-task-pairs", type=int)
    p.add_argument("--obs-dim", type=int)
    p.add_argument("--noise", type=float)
    p.add_argument("--h-min", type=int)
    p.add_argument("--h-max", type=int)
    p.set_defaults(func=cmd_gen_world)

    p = sub.add_parser("train", parents=[common], help="train the encoders")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True, help="checkpoint path")
    p.add_argument("--objective", choices=sorted(VARIANT_ALIASES))
    p.add_argument("--preset", choices=sorted(TRAIN_PRESETS), default="desk")
    p.add_argument("--iterations", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--weight-decay", type=float)
    p.add_argument("--optimizer", choices=["adam", "sgd"])
    p.add_argument("--temperature", type=float)
    p.add_argument("--checkpoint-interval", type=int)
    p.add_argument("--max-segment-length", type=int)
    p.add_argument("--fixed-span", type=int)
    p.add_argument("--metrics", help="metrics CSV path (default <out>.metrics.csv)")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("sampling-stats", parents=[common], help="goal-selection statistics")
    p.add_argument("--h", type=_at_least(2), required=True)
    p.add_argument("--samples", type=_at_least(1), help="draws (default 1000000)")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_sampling_stats)

    p = sub.add_parser("reward-curve", parents=[common], help="per-frame reward curves")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--trajectory", type=int, help="dataset index (default 0)")
    p.add_argument("--instruction", action="append", help='e.g. "open door"; repeatable')
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_reward_curve)

    p = sub.add_parser("heatmap", parents=[common], help="segment-by-instruction reward heatmap")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--spans", type=_spans, help='comma-separated spans, "full" for h - 1')
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_heatmap)

    p = sub.add_parser("first-image-stats", parents=[common], help="first-frame embedding clustering")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--sample", type=_at_least(2), help="trajectories to compare (default 100)")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_first_image_stats)

    p = sub.add_parser("plan", parents=[common], help="MPPI planning with a language reward")
    p.add_argument("--ckpt")
    p.add_argument("--oracle", action="store_true", help="plan against ground-truth progression")
    p.add_argument("--data", help="dataset whose world to plan in (default: the checkpoint's)")
    p.add_argument("--instruction", action="append")
    p.add_argument("--episodes", type=_at_least(1), help="episodes per instruction (default 10)")
    p.add_argument("--preset", choices=sorted(PLANNER_PRESETS), default="reference")
    p.add_argument("--horizon", type=int)
    p.add_argument("--sequences", type=int)
    p.add_argument("--iterations", type=int)
    p.add_argument("--temperature", type=float)
    p.add_argument("--gamma", type=float)
    p.add_argument("--noise-scale", type=float)
    p.add_argument("--random-baseline", action="store_true")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_plan)

    p = sub.add_parser("eval-lcbc", parents=[common], help="behavior cloning on frozen features")
    p.add_argument("--ckpt")
    p.add_argument("--random-encoder", action="store_true", help="use untrained encoders")
    p.add_argument("--demos", help="dataset of expert demos (default: generated)")
    p.add_argument("--demos-per-task", type=_at_least(1), help="generated demos per task (default 5)")
    p.add_argument("--hidden", type=int, nargs="+")
    p.add_argument("--lr", type=float)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--steps", type=int)
    p.add_argument("--eval-interval", type=int)
    p.add_argument("--episodes", type=int)
    p.add_argument("--max-episode-steps", type=int)
    p.add_argument("--policy-out")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_eval_lcbc)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logs.setup(logs.level_from_flags(args.quiet, args.verbose))
    try:
        _read_config_source(args)
        args.func(args)
    except DecisionNCEError as e:
        logger.exception("%s failed", args.command)
        print(f"error: {e}", file=sys.stderr)
        return EXIT_ERROR
    except OSError as e:
        logger.exception("%s failed", args.command)
        print(f"error: {e.filename or ''}: {e.strerror}", file=sys.stderr)
        return EXIT_ERROR
    return EXIT_OK
