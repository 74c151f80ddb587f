"""Reward reparameterizations of the Bradley-Terry model and the batch losses built on them.

Segment rewards come in two forms. The potential form scores a segment by how much
closer its goal frame is to the instruction than its start frame. The transition
form scores the direction of the embedding displacement against the instruction.
Batch losses contrast every segment against all in-batch instructions and every
instruction against all in-batch segments.
"""

import dataclasses
import logging
from collections.abc import Sequence
from typing import Any

from scipy.special import expit

from decision_nce.autodiff import (
    Tensor,
    as_tensor,
    cosine_similarity,
    logsumexp,
    pairwise_cosine,
)
from decision_nce.config import ObjectiveSpec, Variant
from decision_nce.errors import BatchSizeError, FrameCountError, ShapeMismatchError

logger = logging.getLogger(__name__)


def bt_probability(total_reward_pos: float, total_reward_neg: float) -> float:
    """P(σ⁺ ≻ σ⁻) = exp(r⁺) / (exp(r⁺) + exp(r⁻)), via the sigmoid of the difference."""
    return float(expit(float(total_reward_pos) - float(total_reward_neg)))


def bt_loss(total_reward_pos: Any, total_reward_neg: Any) -> Tensor:
    """−log P(σ⁺ ≻ σ⁻) for the two-way comparison."""
    margin = as_tensor(total_reward_pos) - as_tensor(total_reward_neg)
    return logsumexp([Tensor(0.0), -margin])


def potential_step_reward(phi_t: Any, phi_next: Any, psi_l: Any) -> Tensor:
    return cosine_similarity(phi_next, psi_l) - cosine_similarity(phi_t, psi_l)


def segment_reward_potential(phi_start: Any, phi_goal: Any, psi_l: Any) -> Tensor:
    return cosine_similarity(phi_goal, psi_l) - cosine_similarity(phi_start, psi_l)


def segment_reward_transition(phi_start: Any, phi_goal: Any, psi_l: Any) -> Tensor:
    # a zero displacement normalizes to the zero vector, giving reward 0
    return cosine_similarity(as_tensor(phi_goal) - as_tensor(phi_start), psi_l)


def multiframe_transition_reward(frames: Sequence[Any], psi_l: Any, k: int) -> Tensor:
    """Σ_i S(frames[i] − frames[i−1], ψ(l)) over k evenly spaced displacement steps."""
    if len(frames) != k + 1:
        raise FrameCountError(k + 1, len(frames))
    frames = [as_tensor(f) for f in frames]
    total = segment_reward_transition(frames[0], frames[1], psi_l)
    for prev, nxt in zip(frames[1:-1], frames[2:]):
        total = total + segment_reward_transition(prev, nxt, psi_l)
    return total


@dataclasses.dataclass
class BatchEmbeddings:
    """Embeddings of N segments and M instructions, one row each.

    `frames` holds the embedded positions of each segment in order: the two
    endpoints for the P and T objectives, k + 1 evenly spaced frames for the
    multi-frame variants, a single frame for frame alignment. Training batches
    have N = M with segment i paired to instruction i.
    """

    frames: list[Tensor]
    instructions: Tensor

    def __post_init__(self):
        if not self.frames:
            raise FrameCountError(1, 0)
        if self.instructions.ndim != 2:
            raise ShapeMismatchError("BatchEmbeddings", self.instructions.shape)
        expected = self.frames[0].shape
        for f in self.frames:
            if f.ndim != 2 or f.shape != expected or f.shape[1] != self.instructions.shape[1]:
                raise ShapeMismatchError("BatchEmbeddings", f.shape, self.instructions.shape)

    @property
    def batch_size(self) -> int:
        return self.frames[0].shape[0]

    @property
    def start(self) -> Tensor:
        return self.frames[0]

    @property
    def goal(self) -> Tensor:
        return self.frames[-1]


def symmetric_infonce(logits: Tensor) -> Tensor:
    """Mean over i of −log softmax over segments and −log softmax over instructions at the match.

    `logits[j, i]` scores segment j under instruction i.
    """
    logits = as_tensor(logits)
    if logits.ndim != 2 or logits.shape[0] != logits.shape[1]:
        raise ShapeMismatchError("symmetric_infonce", logits.shape)
    if logits.shape[0] < 2:
        raise BatchSizeError(logits.shape[0])
    matched = logits.diagonal()
    over_segments = logits.logsumexp(axis=0) - matched
    over_instructions = logits.logsumexp(axis=1) - matched
    return (over_segments + over_instructions).mean()


def _check_frames(batch: BatchEmbeddings, frames: int) -> None:
    if len(batch.frames) != frames:
        raise FrameCountError(frames, len(batch.frames))


def potential_reward_matrix(batch: BatchEmbeddings) -> Tensor:
    return pairwise_cosine(batch.goal, batch.instructions) - pairwise_cosine(
        batch.start, batch.instructions
    )


def transition_reward_matrix(batch: BatchEmbeddings) -> Tensor:
    frames = batch.frames
    total = pairwise_cosine(frames[1] - frames[0], batch.instructions)
    for prev, nxt in zip(frames[1:-1], frames[2:]):
        total = total + pairwise_cosine(nxt - prev, batch.instructions)
    return total


def batch_reward_matrix(spec: ObjectiveSpec, batch: BatchEmbeddings) -> Tensor:
    """N×M matrix of segment j's reward under instruction i."""
    match spec.variant:
        case Variant.P:
            _check_frames(batch, 2)
            return potential_reward_matrix(batch)
        case Variant.T | Variant.T4 | Variant.T8:
            _check_frames(batch, spec.intermediary_frames + 1)
            return transition_reward_matrix(batch)
        case Variant.FRAME_ALIGN:
            _check_frames(batch, 1)
            return pairwise_cosine(batch.frames[0], batch.instructions)
    raise ValueError(f"unhandled objective {spec.variant}")


def objective_loss(spec: ObjectiveSpec, batch: BatchEmbeddings) -> Tensor:
    logits = batch_reward_matrix(spec, batch)
    if spec.temperature != 1.0:
        logits = logits / spec.temperature
    return symmetric_infonce(logits)


def decisionnce_p_loss(batch: BatchEmbeddings) -> Tensor:
    return objective_loss(ObjectiveSpec(Variant.P, batch.instructions.shape[1]), batch)


def decisionnce_t_loss(batch: BatchEmbeddings) -> Tensor:
    return objective_loss(ObjectiveSpec(Variant.T, batch.instructions.shape[1]), batch)


def multiframe_t_loss(batch: BatchEmbeddings) -> Tensor:
    variant = {5: Variant.T4, 9: Variant.T8}.get(len(batch.frames))
    if variant is None:
        raise FrameCountError(5, len(batch.frames))
    return objective_loss(ObjectiveSpec(variant, batch.instructions.shape[1]), batch)


def frame_alignment_loss(batch: BatchEmbeddings) -> Tensor:
    return objective_loss(ObjectiveSpec(Variant.FRAME_ALIGN, batch.instructions.shape[1]), batch)
