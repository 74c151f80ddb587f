"""Zero-shot MPPI planning against a language-conditioned reward.

A reward model turns a batch of latent rollouts into per-step potentials; the
reward of a step is the change in potential, so an undiscounted return is the
potential at the end minus the potential at the start.
"""

import dataclasses
import logging
from collections.abc import Sequence
from typing import Protocol, TypedDict

import numpy as np
from scipy.special import softmax

from decision_nce.autodiff import EPS
from decision_nce.config import PlannerConfig
from decision_nce.encoders import Instruction
from decision_nce.errors import ConfigError, ShapeMismatchError
from decision_nce.trainer import Checkpoint
from decision_nce.world import LatentState, SyntheticWorld

logger = logging.getLogger(__name__)

RETURN_STD_FLOOR = 1e-8


class RewardModel(Protocol):
    def potentials(
        self, world: SyntheticWorld, state: LatentState, z: np.ndarray, l: Instruction
    ) -> np.ndarray:
        """Potential of every rollout position: z is (N, H + 1), so is the result."""
        ...


@dataclasses.dataclass
class EmbeddingReward:
    """Similarity of the rendered frame embedding to the instruction embedding."""

    ckpt: Checkpoint

    def potentials(
        self, world: SyntheticWorld, state: LatentState, z: np.ndarray, l: Instruction
    ) -> np.ndarray:
        distractors = world.distractor_path(state, z.shape[-1] - 1)
        obs = world.render_latents(state.task, z, state.scene, distractors)
        phi = self.ckpt.embed_observations(obs.reshape(-1, obs.shape[-1]))
        psi = self.ckpt.embed_instructions([l])[0]
        phi /= np.maximum(np.linalg.norm(phi, axis=-1, keepdims=True), EPS)
        psi /= max(float(np.linalg.norm(psi)), EPS)
        return (phi @ psi).reshape(z.shape)


class OracleReward:
    """Ground-truth progression under the instruction."""

    def potentials(
        self, world: SyntheticWorld, state: LatentState, z: np.ndarray, l: Instruction
    ) -> np.ndarray:
        return np.asarray(world.progression(state.task, z, l), dtype=np.float64)


def as_reward_model(reward: RewardModel | Checkpoint) -> RewardModel:
    return EmbeddingReward(reward) if isinstance(reward, Checkpoint) else reward


def rollout_returns(
    reward: RewardModel | Checkpoint,
    world: SyntheticWorld,
    state: LatentState,
    actions: np.ndarray,
    l: Instruction,
    gamma: float = 1.0,
) -> np.ndarray:
    """Discounted return of every action sequence in a (N, H, D_act) batch."""
    actions = np.asarray(actions, dtype=np.float64)
    if actions.ndim != 3:
        raise ShapeMismatchError("rollout_returns", actions.shape)
    z = world.rollout_progress(state, actions)
    potentials = as_reward_model(reward).potentials(world, state, z, l)
    steps = np.diff(potentials, axis=-1)
    if gamma == 1.0:
        return steps.sum(axis=-1)
    return steps @ gamma ** np.arange(steps.shape[-1])


def rollout_return(
    reward: RewardModel | Checkpoint,
    world: SyntheticWorld,
    state: LatentState,
    actions: np.ndarray,
    l: Instruction,
    gamma: float = 1.0,
) -> float:
    return float(rollout_returns(reward, world, state, np.asarray(actions)[None], l, gamma)[0])


def normalize_returns(returns: np.ndarray) -> np.ndarray:
    returns = np.asarray(returns, dtype=np.float64)
    return (returns - returns.mean()) / max(float(returns.std()), RETURN_STD_FLOOR)


def mppi_weights(normalized: np.ndarray, temperature: float) -> np.ndarray:
    """Softmax of normalized returns divided by the temperature."""
    return softmax(np.asarray(normalized, dtype=np.float64) / temperature)


def mppi_update(proposals: np.ndarray, returns: np.ndarray, temperature: float) -> np.ndarray:
    weights = mppi_weights(normalize_returns(returns), temperature)
    return np.tensordot(weights, proposals, axes=1)


def plan(
    reward: RewardModel | Checkpoint,
    world: SyntheticWorld,
    state: LatentState,
    l: Instruction,
    config: PlannerConfig,
    rng: np.random.Generator,
) -> np.ndarray:
    """Action sequence of shape (horizon, D_act) for an open-loop rollout from `state`."""
    reward = as_reward_model(reward)
    shape = (config.horizon, world.config.action_dim)
    if config.warmstart is None:
        mean = np.zeros(shape)
    else:
        mean = np.asarray(config.warmstart, dtype=np.float64)
        if mean.shape != shape:
            raise ShapeMismatchError("plan warmstart", mean.shape, shape)
    for iteration in range(config.iterations):
        noise = rng.normal(0.0, config.noise_scale, (config.n_sequences, *shape))
        # proposals live in the action box so scoring never trips the clamp
        proposals = np.clip(mean + noise, -1.0, 1.0)
        returns = rollout_returns(reward, world, state, proposals, l, config.gamma)
        mean = mppi_update(proposals, returns, config.temperature)
        logger.debug(
            "MPPI iteration %d: best return %.4f, mean return %.4f",
            iteration,
            returns.max(),
            returns.mean(),
        )
    return mean


def execute(world: SyntheticWorld, state: LatentState, actions: np.ndarray) -> LatentState:
    for action in actions:
        state = world.step(state, action)
    return state


class PlannerReport(TypedDict):
    seed: int
    episodes: int
    config: dict
    success: dict[str, float]
    mean_success: float


def _report(
    world: SyntheticWorld,
    instructions: Sequence[Instruction],
    rates: list[float],
    episodes: int,
    seed: int,
    config: dict,
) -> PlannerReport:
    texts = [world.vocabulary.text(l) for l in instructions]
    return PlannerReport(
        seed=seed,
        episodes=episodes,
        config=config,
        success=dict(zip(texts, rates)),
        mean_success=float(np.mean(rates)),
    )


def evaluate_planner(
    reward: RewardModel | Checkpoint,
    world: SyntheticWorld,
    instructions: Sequence[Instruction],
    episodes: int,
    config: PlannerConfig,
    seed: int = 0,
) -> PlannerReport:
    """Plan from a fresh start per episode, execute open-loop, score the final state."""
    if episodes < 1:
        raise ConfigError("episodes", "must be at least 1")
    reward = as_reward_model(reward)
    rates = []
    for l in instructions:
        task = world.task_of(l)
        successes = 0
        for episode in range(episodes):
            rng = np.random.default_rng([seed, task, episode])
            start = world.initial_state(task, rng)
            final = execute(world, start, plan(reward, world, start, l, config, rng))
            successes += world.success(final, l)
        rates.append(successes / episodes)
        logger.info("Planner success on %r: %.3f", world.vocabulary.text(l), rates[-1])
    return _report(world, instructions, rates, episodes, seed, config.to_dict())


def random_action_baseline(
    world: SyntheticWorld,
    instructions: Sequence[Instruction],
    episodes: int,
    horizon: int,
    seed: int = 0,
) -> PlannerReport:
    """Uniform random actions in the action box for `horizon` steps."""
    if episodes < 1:
        raise ConfigError("episodes", "must be at least 1")
    rates = []
    for l in instructions:
        task = world.task_of(l)
        successes = 0
        for episode in range(episodes):
            rng = np.random.default_rng([seed, task, episode])
            start = world.initial_state(task, rng)
            actions = rng.uniform(-1.0, 1.0, (horizon, world.config.action_dim))
            successes += world.success(execute(world, start, actions), l)
        rates.append(successes / episodes)
    return _report(world, instructions, rates, episodes, seed, {"horizon": horizon})
