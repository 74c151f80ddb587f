"""Procedural video-language world with ground-truth task progression.

Every task pair shares one rendering map of the features (z, z², sin 2πz).
The first task of a pair adds the rendered features to the scene, its mirror
subtracts them, so the two move the observation in exactly opposite directions.
The features all vanish at z = 0, so every trajectory starts from the same
distribution regardless of task. The last `n_distractors` observation
dims hold a random walk that carries no task information.
"""

import dataclasses
import json
import logging
from collections.abc import Iterable, Sequence
from pathlib import Path
from typing import Any

import numpy as np

from decision_nce.config import WorldConfig
from decision_nce.encoders import Instruction, Vocabulary
from decision_nce.errors import (
    DatasetFormatError,
    EmptyInputError,
    ShapeMismatchError,
)
from decision_nce.sampler import Dataset, Trajectory

logger = logging.getLogger(__name__)

DATASET_FORMAT = "decisionnce-world"
DATASET_VERSION = 1
SUCCESS_THRESHOLD = 0.9
SCENE_SCALE = 0.3
DISTRACTOR_SCALE = 0.5
TASK_MAP_SCALE = 0.5
# expert speeds c lie in [0.5, 1.5]; directions are scaled so 1.5 * u stays in [-1, 1]
MAX_EXPERT_SPEED = 1.5


@dataclasses.dataclass(frozen=True, eq=False)
class LatentState:
    task: int
    z: float
    scene: np.ndarray
    distractor: np.ndarray
    t: int = 0
    walk_seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "z", float(np.clip(self.z, 0.0, 1.0)))


class SyntheticWorld:
    """Fixed rendering maps and dynamics derived from a `WorldConfig` seed."""

    def __init__(self, config: WorldConfig):
        self.config = config
        self.vocabulary = Vocabulary(config.n_task_pairs)
        self.clamped_actions = 0
        rng = np.random.default_rng([config.seed, 0])
        render_dim = config.obs_dim - config.n_distractors
        self.base = rng.normal(0.0, 1.0, render_dim)
        self.scene_map = rng.normal(0.0, 1.0, (render_dim, config.scene_dim))
        self.task_maps = rng.normal(0.0, TASK_MAP_SCALE, (config.n_task_pairs, render_dim, 3))
        directions = rng.normal(0.0, 1.0, (config.n_task_pairs, config.action_dim))
        directions /= np.abs(directions).max(axis=1, keepdims=True) * MAX_EXPERT_SPEED
        self.directions = np.repeat(directions, 2, axis=0)
        self.directions[1::2] *= -1.0
        self.signs = np.tile([1.0, -1.0], config.n_task_pairs)

    @property
    def n_tasks(self) -> int:
        return self.config.n_tasks

    def instruction(self, task: int) -> Instruction:
        return self.vocabulary.instruction(task)

    def task_of(self, l: Instruction) -> int:
        return self.vocabulary.task(l)

    # dynamics

    def initial_state(self, task: int, rng: np.random.Generator) -> LatentState:
        cfg = self.config
        return LatentState(
            task=task,
            z=0.0,
            scene=rng.normal(0.0, SCENE_SCALE, cfg.scene_dim),
            distractor=rng.normal(0.0, DISTRACTOR_SCALE, cfg.n_distractors),
            t=0,
            walk_seed=int(rng.integers(0, 2**31 - 1)),
        )

    def _check_action(self, action: Any) -> np.ndarray:
        a = np.asarray(action, dtype=np.float64)
        if a.shape[-1:] != (self.config.action_dim,):
            raise ShapeMismatchError("step", a.shape, (self.config.action_dim,))
        out_of_range = np.any(np.abs(a) > 1.0, axis=-1)
        if np.any(out_of_range):
            self.clamped_actions += int(np.sum(out_of_range))
            logger.debug("Clamped %d out-of-range actions", int(np.sum(out_of_range)))
            a = np.clip(a, -1.0, 1.0)
        return a

    def progress_rate(self, task: int, action: np.ndarray) -> np.ndarray:
        """Projection g_task(a) of actions onto the task direction (1 for a = u)."""
        u = self.directions[task]
        return action @ u / (u @ u)

    def _distractor_step(self, walk_seed: int, t: int) -> np.ndarray:
        noise = np.random.default_rng([walk_seed, t]).normal(0.0, 1.0, self.config.n_distractors)
        return self.config.distractor_step * noise

    def step(self, state: LatentState, action: Any) -> LatentState:
        a = self._check_action(action)
        z = state.z + self.config.alpha * float(self.progress_rate(state.task, a))
        return LatentState(
            task=state.task,
            z=z,
            scene=state.scene,
            distractor=state.distractor + self._distractor_step(state.walk_seed, state.t),
            t=state.t + 1,
            walk_seed=state.walk_seed,
        )

    def distractor_path(self, state: LatentState, steps: int) -> np.ndarray:
        """Distractor states for t = 0..steps; they do not depend on actions."""
        path = [state.distractor]
        for i in range(steps):
            path.append(path[-1] + self._distractor_step(state.walk_seed, state.t + i))
        return np.stack(path)

    def rollout_progress(self, state: LatentState, actions: np.ndarray) -> np.ndarray:
        """Latent z along every action sequence: (N, H, A) -> (N, H + 1)."""
        actions = self._check_action(actions)
        rates = self.progress_rate(state.task, actions)
        z = np.empty(rates.shape[:-1] + (rates.shape[-1] + 1,))
        z[..., 0] = state.z
        for i in range(rates.shape[-1]):
            z[..., i + 1] = np.clip(z[..., i] + self.config.alpha * rates[..., i], 0.0, 1.0)
        return z

    # rendering

    def render_latents(
        self,
        task: int,
        z: np.ndarray,
        scene: np.ndarray,
        distractor: np.ndarray,
        rng: np.random.Generator | None = None,
    ) -> np.ndarray:
        """Vectorized rendering; z is (...,), distractor broadcasts to (..., n_distractors)."""
        z = np.asarray(z, dtype=np.float64)
        features = np.stack([z, z**2, np.sin(2.0 * np.pi * z)], axis=-1)
        rendered = self.signs[task] * (features @ self.task_maps[task // 2].T)
        visual = self.base + self.scene_map @ scene + rendered
        distractor = np.broadcast_to(distractor, z.shape + (self.config.n_distractors,))
        obs = np.concatenate([visual, distractor], axis=-1)
        if rng is not None and self.config.noise > 0:
            obs = obs + rng.normal(0.0, self.config.noise, obs.shape)
        return obs

    def render(self, state: LatentState, rng: np.random.Generator | None = None) -> np.ndarray:
        return self.render_latents(state.task, np.asarray(state.z), state.scene, state.distractor, rng)

    # ground truth

    def progression(self, task: int, z: Any, l: Instruction) -> Any:
        other = self.task_of(l)
        if other == task:
            return z
        if other == task ^ 1:
            return 1.0 - np.asarray(z)
        return np.full_like(np.asarray(z, dtype=np.float64), 0.5)

    def progression_oracle(self, traj: Trajectory, l: Instruction) -> np.ndarray:
        if traj.progress is None:
            raise ShapeMismatchError("progression_oracle", (traj.h,), (0,))
        return np.asarray(self.progression(self.task_of(traj.instruction), traj.progress, l))

    def success(self, state: LatentState, l: Instruction) -> bool:
        return bool(self.progression(state.task, state.z, l) > SUCCESS_THRESHOLD)

    # scripted expert and demos

    def expert_action(
        self, state: LatentState, rng: np.random.Generator, steps_left: int | None = None
    ) -> np.ndarray:
        """Push along the task direction at a random speed in [0.5, 1.5] (in units of alpha)."""
        if state.z >= 1.0:
            return np.zeros(self.config.action_dim)
        speed = rng.uniform(0.5, MAX_EXPERT_SPEED)
        if steps_left:
            needed = (1.0 - state.z) / (self.config.alpha * steps_left)
            speed = max(speed, min(needed, MAX_EXPERT_SPEED))
        return speed * self.directions[state.task]

    def demo(self, task: int, rng: np.random.Generator) -> Trajectory:
        cfg = self.config
        state = self.initial_state(task, rng)
        observations = [self.render(state, rng)]
        actions: list[np.ndarray] = []
        progress = [state.z]
        while len(observations) < cfg.h_max:
            if state.z >= 1.0 and len(observations) >= cfg.h_min:
                break
            action = self.expert_action(state, rng, steps_left=cfg.h_max - len(observations))
            state = self.step(state, action)
            observations.append(self.render(state, rng))
            actions.append(action)
            progress.append(state.z)
        return Trajectory(
            observations=np.stack(observations),
            instruction=self.instruction(task),
            actions=np.stack(actions),
            progress=np.array(progress),
        )

    def generate_dataset(self, n_trajectories: int, tasks: Sequence[int] | None = None) -> Dataset:
        """Trajectory i uses its own generator derived from (seed, i)."""
        if n_trajectories < 1:
            raise EmptyInputError("generate_dataset")
        dataset = []
        for i in range(n_trajectories):
            rng = np.random.default_rng([self.config.seed, 1, i])
            task = int(rng.integers(0, self.n_tasks)) if tasks is None else int(tasks[i % len(tasks)])
            dataset.append(self.demo(task, rng))
        logger.info(
            "Generated %d trajectories (mean length %.1f)",
            n_trajectories,
            np.mean([t.h for t in dataset]),
        )
        return dataset


def generate_dataset(config: WorldConfig, n_trajectories: int) -> Dataset:
    return SyntheticWorld(config).generate_dataset(n_trajectories)


def demos_per_task(world: SyntheticWorld, count: int, seed: int) -> Dataset:
    """`count` expert demos for every task, for behavior cloning."""
    demos = []
    for task in range(world.n_tasks):
        for i in range(count):
            demos.append(world.demo(task, np.random.default_rng([seed, 2, task, i])))
    return demos


# dataset files: one JSON header line, then one record per trajectory


def _record(traj: Trajectory) -> dict[str, Any]:
    return {
        "verb": traj.instruction.verb,
        "object": traj.instruction.object,
        "h": traj.h,
        "observations": traj.observations.reshape(-1).tolist(),
        "actions": None if traj.actions is None else traj.actions.reshape(-1).tolist(),
        "progress": None if traj.progress is None else traj.progress.tolist(),
    }


def save_dataset(path: str | Path, config: WorldConfig, dataset: Iterable[Trajectory]) -> int:
    dataset = list(dataset)
    header = {
        "format": DATASET_FORMAT,
        "version": DATASET_VERSION,
        "config": config.to_dict(),
        "count": len(dataset),
    }
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(json.dumps(header, separators=(",", ":")) + "\n")
        for traj in dataset:
            fh.write(json.dumps(_record(traj), separators=(",", ":")) + "\n")
    logger.info("Wrote %d trajectories to %s", len(dataset), path)
    return len(dataset)


def load_dataset(path: str | Path) -> tuple[WorldConfig, Dataset]:
    path = str(path)
    with open(path, encoding="utf-8") as fh:
        lines = [line for line in fh if line.strip()]
    if not lines:
        raise DatasetFormatError(path, "empty file")
    try:
        header = json.loads(lines[0])
    except json.JSONDecodeError as e:
        raise DatasetFormatError(path, f"unreadable header: {e}") from None
    if header.get("format") != DATASET_FORMAT:
        raise DatasetFormatError(path, f"not a {DATASET_FORMAT} file")
    if header.get("version") != DATASET_VERSION:
        raise DatasetFormatError(path, f"unsupported version {header.get('version')}")
    config = WorldConfig.from_dict(header["config"])
    if header.get("count") != len(lines) - 1:
        raise DatasetFormatError(path, f"header announces {header.get('count')} records, found {len(lines) - 1}")

    dataset = []
    for lineno, line in enumerate(lines[1:], start=2):
        try:
            rec = json.loads(line)
            h = rec["h"]
            observations = np.array(rec["observations"], dtype=np.float64).reshape(h, config.obs_dim)
            actions = rec["actions"]
            if actions is not None:
                actions = np.array(actions, dtype=np.float64).reshape(h - 1, config.action_dim)
            dataset.append(
                Trajectory(
                    observations=observations,
                    instruction=Instruction(verb=rec["verb"], object=rec["object"]),
                    actions=actions,
                    progress=rec["progress"],
                )
            )
        except (json.JSONDecodeError, KeyError, ValueError, TypeError) as e:
            raise DatasetFormatError(path, f"line {lineno}: {e}") from None
    return config, dataset
