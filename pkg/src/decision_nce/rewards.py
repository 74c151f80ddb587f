"""Analysis artifacts computed from a trained checkpoint.

Everything here is a pure function of the checkpoint and its inputs: per-frame
reward curves, segment-by-instruction reward heatmaps and the first-frame
clustering statistics.
"""

import dataclasses
import logging
from collections.abc import Sequence
from pathlib import Path
from typing import TypedDict

import numpy as np
from scipy import stats

from decision_nce.autodiff import EPS, Tensor, no_grad
from decision_nce.config import ObjectiveSpec, Variant
from decision_nce.encoders import Instruction
from decision_nce.errors import EmptyInputError, ShapeMismatchError
from decision_nce.objectives import BatchEmbeddings, batch_reward_matrix
from decision_nce.reports import write_csv
from decision_nce.sampler import Segment, Trajectory, frame_indices
from decision_nce.trainer import Checkpoint

logger = logging.getLogger(__name__)

HEATMAP_SPANS: tuple[int | None, ...] = (2, 5, 10, None)
FIRST_IMAGE_SAMPLE = 100


def _unit_rows(x: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(x, axis=-1, keepdims=True)
    return x / np.maximum(norms, EPS)


def normalize_curve(raw: np.ndarray) -> np.ndarray:
    """Min-max onto [0, 1]; a constant curve maps to 0.5 everywhere."""
    raw = np.asarray(raw, dtype=np.float64)
    low, high = raw.min(), raw.max()
    if high > low:
        return (raw - low) / (high - low)
    return np.full_like(raw, 0.5)


@dataclasses.dataclass(frozen=True)
class RewardCurve:
    instruction: Instruction
    raw: np.ndarray
    normalized: np.ndarray

    def rows(self) -> list[tuple[int, float, float]]:
        return [(t, float(r), float(n)) for t, (r, n) in enumerate(zip(self.raw, self.normalized))]


def _check_obs_dim(ckpt: Checkpoint, traj: Trajectory) -> None:
    if traj.obs_dim != ckpt.params.obs_dim:
        raise ShapeMismatchError("reward_curve", (traj.obs_dim,), (ckpt.params.obs_dim,))


def reward_curve(ckpt: Checkpoint, traj: Trajectory, l: Instruction) -> RewardCurve:
    """Cosine similarity of every frame embedding with the instruction embedding."""
    _check_obs_dim(ckpt, traj)
    ckpt.vocabulary.validate(l)
    frames = _unit_rows(ckpt.embed_observations(traj.observations))
    psi = _unit_rows(ckpt.embed_instructions([l]))[0]
    raw = frames @ psi
    return RewardCurve(l, raw, normalize_curve(raw))


def curve_spearman(curve: RewardCurve) -> float:
    """Rank correlation of the raw values with the frame index; 0 for a constant curve."""
    if np.ptp(curve.raw) == 0:
        return 0.0
    return float(stats.spearmanr(np.arange(curve.raw.size), curve.raw).statistic)


@dataclasses.dataclass(frozen=True)
class HeatmapGrid:
    """Segment rewards, one row per segment and one column per instruction.

    `matched[r]` is the column of row r's own instruction and `mirrored[r]` the
    column of its mirror (-1 when that instruction is not among the columns).
    """

    row_labels: list[str]
    column_labels: list[str]
    values: np.ndarray
    matched: np.ndarray
    mirrored: np.ndarray

    def diagonal_dominance(self) -> float:
        """Fraction of rows whose own-instruction cell beats every other cell in the row."""
        rows = np.flatnonzero(self.matched >= 0)
        if rows.size == 0:
            return 0.0
        wins = 0
        for r in rows:
            others = np.delete(self.values[r], self.matched[r])
            wins += bool(np.all(self.values[r, self.matched[r]] > others))
        return wins / rows.size

    def mirror_negativity(self) -> float:
        rows = np.flatnonzero(self.mirrored >= 0)
        if rows.size == 0:
            return 0.0
        return float(np.mean(self.values[rows, self.mirrored[rows]] < 0))


def _scoring_spec(spec: ObjectiveSpec) -> ObjectiveSpec:
    # single-frame checkpoints score a segment by the change in similarity
    if spec.variant == Variant.FRAME_ALIGN:
        return spec.replace(variant=Variant.P)
    return spec


def _segment_frames(segment: Segment, spec: ObjectiveSpec) -> list[int]:
    if spec.variant in (Variant.T4, Variant.T8):
        return frame_indices(segment, spec.intermediary_frames)
    return [segment.start, segment.goal]


def segment_reward_table(
    ckpt: Checkpoint,
    dataset: Sequence[Trajectory],
    segments: Sequence[Segment],
    instructions: Sequence[Instruction],
) -> np.ndarray:
    spec = _scoring_spec(ckpt.objective)
    positions = [_segment_frames(s, spec) for s in segments]
    with no_grad():
        frames = [
            Tensor(ckpt.embed_observations(
                np.stack([dataset[s.trajectory].observations[p[f]] for s, p in zip(segments, positions)])
            ))
            for f in range(len(positions[0]))
        ]
        psi = Tensor(ckpt.embed_instructions(instructions))
        return batch_reward_matrix(spec, BatchEmbeddings(frames, psi)).numpy()


def reward_heatmap(
    ckpt: Checkpoint,
    dataset: Sequence[Trajectory],
    segments: Sequence[Segment],
    instructions: Sequence[Instruction],
) -> HeatmapGrid:
    if not segments or not instructions:
        raise EmptyInputError("reward_heatmap")
    vocab = ckpt.vocabulary
    for l in instructions:
        vocab.validate(l)
    for s in segments:
        _check_obs_dim(ckpt, dataset[s.trajectory])

    values = segment_reward_table(ckpt, dataset, segments, instructions)
    columns = list(instructions)
    matched, mirrored, labels = [], [], []
    for s in segments:
        own = dataset[s.trajectory].instruction
        matched.append(columns.index(own) if own in columns else -1)
        mirror = vocab.mirror(own)
        mirrored.append(columns.index(mirror) if mirror in columns else -1)
        labels.append(f"{vocab.text(own)} #{s.trajectory} [{s.start}:{s.goal}]")
    return HeatmapGrid(
        row_labels=labels,
        column_labels=[vocab.text(l) for l in columns],
        values=values,
        matched=np.array(matched, dtype=np.int64),
        mirrored=np.array(mirrored, dtype=np.int64),
    )


def heatmap_segments(
    dataset: Sequence[Trajectory],
    rng: np.random.Generator,
    spans: Sequence[int | None] = HEATMAP_SPANS,
) -> list[Segment]:
    """One trajectory per instruction, cut into segments of every span (None = h - 1).

    Rows come out grouped by source trajectory, instructions in task order.
    Spans longer than the trajectory are clipped.
    """
    if not dataset:
        raise EmptyInputError("heatmap_segments")
    by_instruction: dict[Instruction, list[int]] = {}
    for i, traj in enumerate(dataset):
        by_instruction.setdefault(traj.instruction, []).append(i)
    segments = []
    for l in sorted(by_instruction, key=lambda l: (l.object, l.verb)):
        i = int(rng.choice(by_instruction[l]))
        h = dataset[i].h
        for span in spans:
            m = h - 1 if span is None else min(span, h - 1)
            start = int(rng.integers(0, h - m))
            segments.append(Segment(i, start, start + m))
    return segments


class FirstImageStats(TypedDict):
    n_trajectories: int
    pairwise_mean: float
    mean_instruction_similarity: float


def _mean_pairwise_cosine(embeddings: np.ndarray) -> float:
    unit = _unit_rows(embeddings)
    sims = unit @ unit.T
    upper = np.triu_indices(len(unit), k=1)
    return float(np.mean(sims[upper]))


def first_image_similarity_stats(
    ckpt: Checkpoint, dataset: Sequence[Trajectory], sample: int = FIRST_IMAGE_SAMPLE
) -> FirstImageStats:
    """Cosine structure of the first-frame embeddings of up to `sample` trajectories."""
    if len(dataset) < 2:
        raise EmptyInputError("first_image_similarity_stats")
    chosen = list(dataset[:sample])
    first = ckpt.embed_observations(np.stack([t.observations[0] for t in chosen]))
    mean_instruction = ckpt.embed_instructions(ckpt.vocabulary.instructions()).mean(axis=0)
    to_mean = _unit_rows(first) @ _unit_rows(mean_instruction[None, :])[0]
    return FirstImageStats(
        n_trajectories=len(chosen),
        pairwise_mean=_mean_pairwise_cosine(first),
        mean_instruction_similarity=float(np.mean(to_mean)),
    )


def random_frame_pair_similarity(
    ckpt: Checkpoint,
    dataset: Sequence[Trajectory],
    rng: np.random.Generator,
    sample: int = FIRST_IMAGE_SAMPLE,
) -> float:
    """Mean pairwise cosine among one random interior frame per trajectory."""
    if len(dataset) < 2:
        raise EmptyInputError("random_frame_pair_similarity")
    chosen = list(dataset[:sample])
    frames = []
    for traj in chosen:
        t = int(rng.integers(1, traj.h - 1)) if traj.h > 2 else int(rng.integers(0, traj.h))
        frames.append(traj.observations[t])
    return _mean_pairwise_cosine(ckpt.embed_observations(np.stack(frames)))


def write_curves_csv(path: str | Path, curves: Sequence[RewardCurve], texts: Sequence[str]) -> None:
    rows = [
        (text, t, raw, norm)
        for curve, text in zip(curves, texts)
        for t, raw, norm in curve.rows()
    ]
    write_csv(path, ("instruction", "frame", "raw", "normalized"), rows)


def write_heatmap_csv(path: str | Path, grid: HeatmapGrid) -> None:
    rows = (
        (label, *(float(v) for v in row)) for label, row in zip(grid.row_labels, grid.values)
    )
    write_csv(path, ("segment", *grid.column_labels), rows)

