"""Random segment sampling over trajectories and its goal-selection statistics.

Positions are 0-based: a segment runs from `start` to `goal` with
0 <= start < goal <= h - 1. `goal_probability` keeps the 1-based time stamp of
the analytic formula.
"""

import dataclasses
import logging
from collections.abc import Sequence
from typing import NamedTuple

import numpy as np
from scipy import stats

from decision_nce.encoders import Instruction
from decision_nce.errors import (
    BatchSizeError,
    EmptyInputError,
    SegmentError,
    ShapeMismatchError,
)

logger = logging.getLogger(__name__)


@dataclasses.dataclass(eq=False)
class Trajectory:
    observations: np.ndarray
    instruction: Instruction
    actions: np.ndarray | None = None
    progress: np.ndarray | None = None

    def __post_init__(self):
        self.observations = np.asarray(self.observations, dtype=np.float64)
        if self.observations.ndim != 2:
            raise ShapeMismatchError("Trajectory.observations", self.observations.shape)
        if self.h < 2:
            raise SegmentError(self.h, "a trajectory needs at least 2 observations")
        if self.actions is not None:
            self.actions = np.asarray(self.actions, dtype=np.float64)
            if self.actions.ndim != 2 or self.actions.shape[0] != self.h - 1:
                raise ShapeMismatchError("Trajectory.actions", self.actions.shape, (self.h - 1,))
        if self.progress is not None:
            self.progress = np.asarray(self.progress, dtype=np.float64)
            if self.progress.shape != (self.h,):
                raise ShapeMismatchError("Trajectory.progress", self.progress.shape, (self.h,))

    @property
    def h(self) -> int:
        return self.observations.shape[0]

    @property
    def obs_dim(self) -> int:
        return self.observations.shape[1]


Dataset = list[Trajectory]


class Segment(NamedTuple):
    trajectory: int
    start: int
    goal: int

    @property
    def span(self) -> int:
        return self.goal - self.start


@dataclasses.dataclass
class SegmentBatch:
    segments: list[Segment]
    instructions: list[Instruction]

    def __post_init__(self):
        if len(self.segments) != len(self.instructions):
            raise ShapeMismatchError(
                "SegmentBatch", (len(self.segments),), (len(self.instructions),)
            )

    def __len__(self) -> int:
        return len(self.segments)


def sample_segment(
    traj: Trajectory,
    rng: np.random.Generator,
    index: int = 0,
    max_segment_length: int | None = None,
    fixed_span: int | None = None,
) -> Segment:
    """Start uniform over the first h - 1 positions, goal uniform over the frames after it.

    `max_segment_length` caps the span m; `fixed_span` pins it (clipped at the end).
    """
    h = traj.h
    if h < 2:
        raise SegmentError(h, "cannot sample a segment")
    start = int(rng.integers(0, h - 1))
    if fixed_span is not None:
        return Segment(index, start, min(start + fixed_span, h - 1))
    last = h - 1 if max_segment_length is None else min(h - 1, start + max_segment_length)
    goal = int(rng.integers(start + 1, last + 1))
    return Segment(index, start, goal)


def goal_probability(h: int, t: int) -> float:
    """Chance that 1-based frame t is drawn as a goal when the start is uniform over all h frames."""
    if h < 2:
        raise SegmentError(h, "goal statistics need h >= 2")
    if not 1 <= t <= h:
        raise SegmentError(h, f"time stamp {t} is outside [1, {h}]")
    return sum(1.0 / (h - i) for i in range(1, t)) / h


def goal_distribution(h: int) -> np.ndarray:
    return np.array([goal_probability(h, t) for t in range(1, h + 1)])


class GoalHistogram(NamedTuple):
    counts: np.ndarray
    no_goal: int
    n_samples: int

    @property
    def frequencies(self) -> np.ndarray:
        return self.counts / self.n_samples

    @property
    def no_goal_frequency(self) -> float:
        return self.no_goal / self.n_samples


def empirical_goal_histogram(h: int, n_samples: int, rng: np.random.Generator) -> GoalHistogram:
    """Simulate the raw process: start uniform over all h frames, no goal when it is the last."""
    if h < 2:
        raise SegmentError(h, "goal statistics need h >= 2")
    if n_samples < 1:
        raise EmptyInputError("empirical_goal_histogram")
    starts = rng.integers(0, h, n_samples)
    has_goal = starts < h - 1
    s = starts[has_goal]
    goals = s + 1 + np.floor(rng.random(s.size) * (h - 1 - s)).astype(np.int64)
    counts = np.bincount(goals, minlength=h)
    return GoalHistogram(counts, int((~has_goal).sum()), n_samples)


class ChiSquareResult(NamedTuple):
    statistic: float
    p_value: float


def goal_chi_square(h: int, histogram: GoalHistogram) -> ChiSquareResult:
    """Goodness of fit over frames 2..h plus the no-goal outcome."""
    expected = np.append(goal_distribution(h)[1:], 1.0 / h) * histogram.n_samples
    observed = np.append(histogram.counts[1:], histogram.no_goal)
    result = stats.chisquare(observed, expected)
    return ChiSquareResult(float(result.statistic), float(result.pvalue))


def sample_batch(
    dataset: Sequence[Trajectory],
    batch_size: int,
    rng: np.random.Generator,
    max_segment_length: int | None = None,
    fixed_span: int | None = None,
) -> SegmentBatch:
    """Draw trajectories uniformly with replacement, one segment from each."""
    if not dataset:
        raise EmptyInputError("sample_batch")
    if batch_size < 2:
        raise BatchSizeError(batch_size)
    picks = rng.integers(0, len(dataset), batch_size)
    segments = [
        sample_segment(dataset[i], rng, int(i), max_segment_length, fixed_span) for i in picks
    ]
    return SegmentBatch(segments, [dataset[i].instruction for i in picks])


def frame_indices(segment: Segment, k: int) -> list[int]:
    """k + 1 evenly spaced positions start + floor(m * i / k), i = 0..k."""
    if k < 1:
        raise SegmentError(k, "need at least one displacement step")
    m = segment.span
    return [segment.start + (m * i) // k for i in range(k + 1)]
