"""Language-conditioned behavior cloning on frozen encoder features.

The policy input is [φ(o), ψ(l), z]: the frozen frame and instruction
embeddings plus the latent progression as a one-dim proprioceptive reading.
Features are computed once as plain arrays, so no gradient can reach the
encoders.
"""

import dataclasses
import logging
from collections.abc import Callable, Sequence
from pathlib import Path
from typing import NamedTuple, Protocol, TypedDict

import numpy as np
from tqdm import tqdm

from decision_nce import checkpoint as ckpt_format
from decision_nce.autodiff import MlpParams, Tensor, backward, init_mlp, mlp_apply, no_grad
from decision_nce.config import BCConfig, OptimizerConfig
from decision_nce.encoders import Instruction
from decision_nce.errors import (
    CheckpointFormatError,
    ConfigError,
    EmptyInputError,
    MissingActionsError,
    ShapeMismatchError,
)
from decision_nce.optim import build_optimizer
from decision_nce.sampler import Trajectory
from decision_nce.trainer import Checkpoint, assign_arrays
from decision_nce.world import LatentState, SyntheticWorld

logger = logging.getLogger(__name__)

POLICY_KIND = "policy"
PROPRIO_DIM = 1


@dataclasses.dataclass
class PolicyParams:
    mlp: MlpParams
    embed_dim: int
    action_dim: int

    def __post_init__(self):
        expected = 2 * self.embed_dim + PROPRIO_DIM
        if self.mlp.in_width != expected or self.mlp.out_width != self.action_dim:
            raise ShapeMismatchError(
                "PolicyParams", (self.mlp.in_width, self.mlp.out_width), (expected, self.action_dim)
            )

    @property
    def hidden(self) -> list[int]:
        return self.mlp.widths[1:-1]

    def parameters(self) -> list[tuple[str, Tensor]]:
        return self.mlp.parameters("policy.")


def init_policy(embed_dim: int, action_dim: int, hidden: Sequence[int], seed: int) -> PolicyParams:
    widths = [2 * embed_dim + PROPRIO_DIM, *hidden, action_dim]
    return PolicyParams(init_mlp(widths, np.random.default_rng(seed), name="policy"), embed_dim, action_dim)


def policy_features(
    ckpt: Checkpoint, observations: np.ndarray, instructions: Sequence[Instruction], z: np.ndarray
) -> np.ndarray:
    """Rows of [φ(o), ψ(l), z] computed without recording any graph."""
    phi = ckpt.embed_observations(np.atleast_2d(observations))
    psi = ckpt.embed_instructions(instructions)
    return np.concatenate([phi, psi, np.reshape(z, (-1, PROPRIO_DIM))], axis=1)


class BCDataset(NamedTuple):
    features: np.ndarray
    actions: np.ndarray


def build_bc_dataset(ckpt: Checkpoint, demos: Sequence[Trajectory]) -> BCDataset:
    """One (features, action) row per transition of every demo."""
    if not demos:
        raise EmptyInputError("build_bc_dataset")
    features, actions = [], []
    for i, demo in enumerate(demos):
        if demo.actions is None:
            raise MissingActionsError(i)
        if demo.progress is None:
            raise ShapeMismatchError("demo progress", (0,), (demo.h,))
        n = demo.h - 1
        features.append(
            policy_features(ckpt, demo.observations[:n], [demo.instruction] * n, demo.progress[:n])
        )
        actions.append(demo.actions)
    return BCDataset(np.concatenate(features), np.concatenate(actions))


def _mse(policy: PolicyParams, features: np.ndarray, actions: np.ndarray) -> Tensor:
    diff = mlp_apply(policy.mlp, features) - actions
    return (diff * diff).mean()


def dataset_mse(policy: PolicyParams, data: BCDataset) -> float:
    with no_grad():
        return _mse(policy, data.features, data.actions).item()


class BCRecord(NamedTuple):
    step: int
    loss: float


def train_bc(
    ckpt: Checkpoint,
    demos: Sequence[Trajectory],
    config: BCConfig,
    on_eval: Callable[[int, PolicyParams], None] | None = None,
    progress: bool = False,
) -> tuple[PolicyParams, list[BCRecord]]:
    """Adam on the mean squared action error over random minibatches of transitions.

    `on_eval(step, policy)` runs every `eval_interval` steps and after the last one.
    """
    return fit_policy(build_bc_dataset(ckpt, demos), ckpt.params.embed_dim, config, on_eval, progress)


def fit_policy(
    data: BCDataset,
    embed_dim: int,
    config: BCConfig,
    on_eval: Callable[[int, PolicyParams], None] | None = None,
    progress: bool = False,
) -> tuple[PolicyParams, list[BCRecord]]:
    policy = init_policy(embed_dim, data.actions.shape[1], config.hidden, config.seed)
    named = policy.parameters()
    optimizer = build_optimizer(OptimizerConfig(), named, config.learning_rate)
    history: list[BCRecord] = []
    logger.info("Behavior cloning on %d transitions", len(data.actions))

    for step in tqdm(range(1, config.steps + 1), desc="bc", disable=not progress):
        rng = np.random.default_rng([config.seed, step])
        idx = rng.integers(0, len(data.actions), config.batch_size)
        loss = _mse(policy, data.features[idx], data.actions[idx])
        optimizer.zero_grad()
        backward(loss)
        optimizer.step()
        history.append(BCRecord(step, loss.item()))
        last = step == config.steps
        if on_eval is not None and (last or (config.eval_interval and step % config.eval_interval == 0)):
            on_eval(step, policy)
    return policy, history


class Policy(Protocol):
    def act(
        self, state: LatentState, obs: np.ndarray, l: Instruction, rng: np.random.Generator, steps_left: int
    ) -> np.ndarray: ...


@dataclasses.dataclass
class BCPolicy:
    params: PolicyParams
    ckpt: Checkpoint

    def act(
        self, state: LatentState, obs: np.ndarray, l: Instruction, rng: np.random.Generator, steps_left: int
    ) -> np.ndarray:
        features = policy_features(self.ckpt, obs, [l], np.array([state.z]))
        with no_grad():
            action = mlp_apply(self.params.mlp, features).numpy()[0]
        return np.clip(action, -1.0, 1.0)


@dataclasses.dataclass
class ExpertPolicy:
    world: SyntheticWorld

    def act(
        self, state: LatentState, obs: np.ndarray, l: Instruction, rng: np.random.Generator, steps_left: int
    ) -> np.ndarray:
        return self.world.expert_action(state, rng, steps_left)


@dataclasses.dataclass
class RandomPolicy:
    action_dim: int

    def act(
        self, state: LatentState, obs: np.ndarray, l: Instruction, rng: np.random.Generator, steps_left: int
    ) -> np.ndarray:
        return rng.uniform(-1.0, 1.0, self.action_dim)


def evaluate_bc(
    policy: Policy,
    world: SyntheticWorld,
    l: Instruction,
    episodes: int,
    seed: int = 0,
    max_steps: int | None = None,
) -> float:
    """Closed-loop success rate; an episode ends at its first success."""
    if episodes < 1:
        raise ConfigError("episodes", "must be at least 1")
    max_steps = max_steps or world.config.h_max
    task = world.task_of(l)
    successes = 0
    for episode in range(episodes):
        rng = np.random.default_rng([seed, 3, task, episode])
        state = world.initial_state(task, rng)
        for t in range(max_steps):
            obs = world.render(state, rng)
            state = world.step(state, policy.act(state, obs, l, rng, max_steps - t))
            if world.success(state, l):
                successes += 1
                break
    return successes / episodes


def evaluate_all(
    policy: Policy,
    world: SyntheticWorld,
    instructions: Sequence[Instruction],
    episodes: int,
    seed: int = 0,
    max_steps: int | None = None,
) -> dict[str, float]:
    return {
        world.vocabulary.text(l): evaluate_bc(policy, world, l, episodes, seed, max_steps)
        for l in instructions
    }


class LCBCReport(TypedDict):
    seed: int
    n_demos: int
    config: dict
    final_success: float
    max_success: float
    per_instruction: dict[str, float]
    evaluations: list[dict]
    initial_mse: float
    final_mse: float


def run_lcbc(
    ckpt: Checkpoint,
    demos: Sequence[Trajectory],
    world: SyntheticWorld,
    config: BCConfig,
    instructions: Sequence[Instruction] | None = None,
    progress: bool = False,
) -> tuple[PolicyParams, LCBCReport]:
    """Train, evaluate periodically, report final and best mean success."""
    instructions = list(instructions or world.vocabulary.instructions())
    evaluations: list[dict] = []
    per_instruction: dict[str, float] = {}

    def _evaluate(step: int, policy: PolicyParams) -> None:
        rates = evaluate_all(
            BCPolicy(policy, ckpt),
            world,
            instructions,
            config.eval_episodes,
            config.seed,
            config.max_episode_steps,
        )
        per_instruction.clear()
        per_instruction.update(rates)
        mean = float(np.mean(list(rates.values())))
        evaluations.append({"step": step, "success": mean})
        logger.info("BC step %d: mean success %.3f", step, mean)

    data = build_bc_dataset(ckpt, demos)
    embed_dim = ckpt.params.embed_dim
    initial = dataset_mse(init_policy(embed_dim, data.actions.shape[1], config.hidden, config.seed), data)
    policy, _ = fit_policy(data, embed_dim, config, _evaluate, progress)
    report = LCBCReport(
        seed=config.seed,
        n_demos=len(demos),
        config=config.to_dict(),
        final_success=evaluations[-1]["success"],
        max_success=max(e["success"] for e in evaluations),
        per_instruction=per_instruction,
        evaluations=evaluations,
        initial_mse=initial,
        final_mse=dataset_mse(policy, data),
    )
    return policy, report


def save_policy(policy: PolicyParams, path: str | Path, config: BCConfig | None = None) -> None:
    metadata = {
        "embed_dim": policy.embed_dim,
        "action_dim": policy.action_dim,
        "hidden": policy.hidden,
        "bc_config": None if config is None else config.to_dict(),
    }
    ckpt_format.save_arrays(path, POLICY_KIND, metadata, [(n, t.data) for n, t in policy.parameters()])


def load_policy(path: str | Path) -> PolicyParams:
    kind, metadata, arrays = ckpt_format.load_arrays(path)
    if kind != POLICY_KIND:
        raise CheckpointFormatError(str(path), f"expected a {POLICY_KIND} checkpoint, found {kind!r}")
    try:
        policy = init_policy(metadata["embed_dim"], metadata["action_dim"], metadata["hidden"], seed=0)
    except (KeyError, TypeError) as e:
        raise CheckpointFormatError(str(path), f"corrupt metadata: {e}") from None
    assign_arrays(str(path), policy.parameters(), arrays)
    return policy
