"""Joint training of the vision and language encoders on random video segments.

Each iteration draws its batch from a generator seeded by (seed, iteration),
so a run is reproducible from its config and dataset alone and a divergence can
be replayed from the reported batch seed.
"""

import dataclasses
import logging
from collections.abc import Sequence
from pathlib import Path
from typing import NamedTuple

import numpy as np
from tqdm import tqdm

from decision_nce import checkpoint as ckpt_format
from decision_nce.autodiff import Tensor, backward, no_grad
from decision_nce.config import EncoderConfig, ObjectiveSpec, TrainConfig, Variant, WorldConfig
from decision_nce.encoders import (
    EncoderParams,
    Instruction,
    Vocabulary,
    encode_instructions,
    encode_observations,
    init_encoder_params,
)
from decision_nce.errors import (
    CheckpointFormatError,
    CompatibilityError,
    EmptyInputError,
    TrainingDivergedError,
)
from decision_nce.objectives import BatchEmbeddings, objective_loss
from decision_nce.optim import build_optimizer, grad_norm
from decision_nce.reports import write_csv
from decision_nce.sampler import SegmentBatch, Trajectory, frame_indices, sample_batch

logger = logging.getLogger(__name__)

ENCODER_KIND = "encoders"


class MetricRecord(NamedTuple):
    iteration: int
    loss: float
    grad_norm: float


@dataclasses.dataclass
class Checkpoint:
    params: EncoderParams
    train_config: TrainConfig
    world_config: WorldConfig | None = None
    iteration: int = 0
    history: list[MetricRecord] = dataclasses.field(default_factory=list)

    @property
    def objective(self) -> ObjectiveSpec:
        return self.train_config.objective

    @property
    def encoder_config(self) -> EncoderConfig:
        return self.train_config.encoder

    @property
    def vocabulary(self) -> Vocabulary:
        return Vocabulary(self.encoder_config.vocab_size - 2)

    def embed_observations(self, observations: np.ndarray) -> np.ndarray:
        with no_grad():
            return encode_observations(self.params.vision, observations).numpy()

    def embed_instructions(self, instructions: Sequence[Instruction]) -> np.ndarray:
        with no_grad():
            return encode_instructions(self.params.language, instructions).numpy()

    def check_world(self, world: WorldConfig) -> None:
        """Raise unless a dataset from `world` can be fed to these encoders."""
        if world.obs_dim != self.params.obs_dim:
            raise CompatibilityError("obs_dim", self.params.obs_dim, world.obs_dim)
        vocab = 2 + world.n_task_pairs
        if vocab > self.params.language.vocab_size:
            raise CompatibilityError("vocabulary size", self.params.language.vocab_size, vocab)


def _frame_positions(
    batch: SegmentBatch, dataset: Sequence[Trajectory], spec: ObjectiveSpec, rng: np.random.Generator
) -> list[list[int]]:
    match spec.variant:
        case Variant.FRAME_ALIGN:
            return [[int(rng.integers(0, dataset[s.trajectory].h))] for s in batch.segments]
        case Variant.P | Variant.T:
            return [[s.start, s.goal] for s in batch.segments]
        case _:
            return [frame_indices(s, spec.intermediary_frames) for s in batch.segments]


def embed_batch(
    params: EncoderParams,
    dataset: Sequence[Trajectory],
    batch: SegmentBatch,
    spec: ObjectiveSpec,
    rng: np.random.Generator,
) -> BatchEmbeddings:
    """Encode only the frames the objective reads, all frames in one pass."""
    positions = _frame_positions(batch, dataset, spec, rng)
    n_frames = len(positions[0])
    b = len(batch)
    observations = np.stack(
        [
            dataset[seg.trajectory].observations[pos[f]]
            for f in range(n_frames)
            for seg, pos in zip(batch.segments, positions)
        ]
    )
    embedded = encode_observations(params.vision, observations)
    frames = [embedded[f * b:(f + 1) * b] for f in range(n_frames)]
    return BatchEmbeddings(frames, encode_instructions(params.language, batch.instructions))


def train(
    config: TrainConfig,
    dataset: Sequence[Trajectory],
    world_config: WorldConfig | None = None,
    checkpoint_path: str | Path | None = None,
    progress: bool = True,
) -> Checkpoint:
    if not dataset:
        raise EmptyInputError("train")
    params = init_encoder_params(config.encoder, config.seed)
    named = params.parameters()
    optimizer = build_optimizer(config.optimizer, named, config.learning_rate, config.weight_decay)
    ckpt = Checkpoint(params, config, world_config)

    logger.info(
        "Training %s for %d iterations on %d trajectories (batch %d, lr %g)",
        config.objective.variant,
        config.iterations,
        len(dataset),
        config.batch_size,
        config.learning_rate,
    )
    bar = tqdm(range(1, config.iterations + 1), desc=str(config.objective.variant), disable=not progress)
    for iteration in bar:
        batch_seed = (config.seed, iteration)
        rng = np.random.default_rng(list(batch_seed))
        batch = sample_batch(
            dataset, config.batch_size, rng, config.max_segment_length, config.fixed_span
        )
        loss = objective_loss(config.objective, embed_batch(params, dataset, batch, config.objective, rng))
        value = loss.item()
        if not np.isfinite(value):
            raise TrainingDivergedError(iteration, batch_seed)

        optimizer.zero_grad()
        backward(loss)
        norm = grad_norm(named)
        optimizer.step()

        ckpt.iteration = iteration
        ckpt.history.append(MetricRecord(iteration, value, norm))
        bar.set_description_str(f"loss={value:.4f}")
        logger.debug("iteration %d: loss %.6f, grad norm %.6f", iteration, value, norm)
        if checkpoint_path and config.checkpoint_interval and iteration % config.checkpoint_interval == 0:
            save_checkpoint(ckpt, checkpoint_path)

    first, last = ckpt.history[0].loss, ckpt.history[-1].loss
    logger.info("Finished training: loss %.4f -> %.4f", first, last)
    return ckpt


def random_checkpoint(config: TrainConfig, world_config: WorldConfig | None = None) -> Checkpoint:
    """Untrained encoders with the same initialization `train` would start from."""
    return Checkpoint(init_encoder_params(config.encoder, config.seed), config, world_config)


def save_checkpoint(ckpt: Checkpoint, path: str | Path) -> None:
    metadata = {
        "train_config": ckpt.train_config.to_dict(),
        "world_config": None if ckpt.world_config is None else ckpt.world_config.to_dict(),
        "iteration": ckpt.iteration,
        "history": [list(r) for r in ckpt.history],
    }
    arrays = [(name, t.data) for name, t in ckpt.params.parameters()]
    ckpt_format.save_arrays(path, ENCODER_KIND, metadata, arrays)


def load_checkpoint(path: str | Path) -> Checkpoint:
    kind, metadata, arrays = ckpt_format.load_arrays(path)
    if kind != ENCODER_KIND:
        raise CheckpointFormatError(str(path), f"expected an {ENCODER_KIND} checkpoint, found {kind!r}")
    try:
        config = TrainConfig.from_dict(metadata["train_config"])
        world = metadata.get("world_config")
        world_config = None if world is None else WorldConfig.from_dict(world)
        history = [MetricRecord(int(i), float(l), float(g)) for i, l, g in metadata["history"]]
        iteration = int(metadata["iteration"])
    except (KeyError, TypeError, ValueError) as e:
        raise CheckpointFormatError(str(path), f"corrupt metadata: {e}") from None

    params = init_encoder_params(config.encoder, config.seed)
    assign_arrays(str(path), params.parameters(), arrays)
    return Checkpoint(params, config, world_config, iteration, history)


def assign_arrays(
    path: str, named: Sequence[tuple[str, Tensor]], arrays: Sequence[tuple[str, np.ndarray]]
) -> None:
    """Copy stored arrays into freshly built parameters, checking names and shapes."""
    stored = dict(arrays)
    if sorted(stored) != sorted(name for name, _ in named):
        raise CheckpointFormatError(path, "stored parameter names do not match the config")
    for name, tensor in named:
        if stored[name].shape != tensor.shape:
            raise CheckpointFormatError(
                path, f"shape inconsistency for {name}: {stored[name].shape} vs {tensor.shape}"
            )
        tensor.data = stored[name].copy()


def write_metrics_csv(path: str | Path, history: Sequence[MetricRecord]) -> None:
    write_csv(path, MetricRecord._fields, history)
