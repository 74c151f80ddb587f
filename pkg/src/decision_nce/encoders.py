"""Vision encoder φ and language encoder ψ mapping into a shared K-dim space."""

import dataclasses
import logging
from collections.abc import Sequence
from typing import Any

import numpy as np

from decision_nce.autodiff import (
    MlpParams,
    Tensor,
    as_tensor,
    init_mlp,
    mlp_apply,
)
from decision_nce.config import EncoderConfig
from decision_nce.errors import ShapeMismatchError, VocabularyError

logger = logging.getLogger(__name__)

VERBS = ("open", "close")
OBJECT_NAMES = ("door", "drawer", "microwave", "cabinet", "faucet", "window", "oven", "light")


@dataclasses.dataclass(frozen=True)
class Instruction:
    verb: int
    object: int

    def tokens(self) -> tuple[int, int]:
        return self.verb, self.object


@dataclasses.dataclass(frozen=True)
class Vocabulary:
    """Token table for `n_pairs` mirror task pairs.

    Tokens 0 and 1 are the verbs, the rest are objects. Task `2p` is "open"
    on object p and task `2p + 1` is its mirror "close".
    """

    n_pairs: int

    @property
    def size(self) -> int:
        return len(VERBS) + self.n_pairs

    @property
    def tokens(self) -> list[str]:
        return list(VERBS) + [self.object_name(p) for p in range(self.n_pairs)]

    @staticmethod
    def object_name(pair: int) -> str:
        return OBJECT_NAMES[pair] if pair < len(OBJECT_NAMES) else f"object{pair}"

    @property
    def n_tasks(self) -> int:
        return 2 * self.n_pairs

    def validate(self, instruction: Instruction) -> Instruction:
        if not 0 <= instruction.verb < len(VERBS):
            raise VocabularyError(instruction.verb, self.size)
        if not len(VERBS) <= instruction.object < self.size:
            raise VocabularyError(instruction.object, self.size)
        return instruction

    def instruction(self, task: int) -> Instruction:
        if not 0 <= task < self.n_tasks:
            raise VocabularyError(task, self.n_tasks)
        pair, verb = divmod(task, 2)
        return Instruction(verb=verb, object=len(VERBS) + pair)

    def task(self, instruction: Instruction) -> int:
        self.validate(instruction)
        return 2 * (instruction.object - len(VERBS)) + instruction.verb

    def mirror(self, instruction: Instruction) -> Instruction:
        self.validate(instruction)
        return Instruction(verb=1 - instruction.verb, object=instruction.object)

    def instructions(self) -> list[Instruction]:
        return [self.instruction(t) for t in range(self.n_tasks)]

    def text(self, instruction: Instruction) -> str:
        self.validate(instruction)
        return f"{VERBS[instruction.verb]} {self.tokens[instruction.object]}"

    def parse(self, text: str) -> Instruction:
        words = text.strip().lower().split()
        if len(words) != 2:
            raise VocabularyError(text, self.size)
        verb, obj = words
        tokens = self.tokens
        if verb not in VERBS:
            raise VocabularyError(verb, self.size)
        if obj not in tokens[len(VERBS):]:
            raise VocabularyError(obj, self.size)
        return Instruction(verb=VERBS.index(verb), object=tokens.index(obj))


@dataclasses.dataclass
class InstructionEncoderParams:
    token_table: Tensor
    projection: MlpParams

    def __post_init__(self):
        if self.token_table.ndim != 2 or self.token_table.shape[1] != self.projection.in_width:
            raise ShapeMismatchError(
                "InstructionEncoderParams", self.token_table.shape, (self.projection.in_width,)
            )

    @property
    def vocab_size(self) -> int:
        return self.token_table.shape[0]

    def parameters(self, prefix: str = "") -> list[tuple[str, Tensor]]:
        return [(f"{prefix}token_table", self.token_table), *self.projection.parameters(f"{prefix}projection.")]


@dataclasses.dataclass
class EncoderParams:
    """Both encoders, trained jointly."""

    vision: MlpParams
    language: InstructionEncoderParams

    def parameters(self) -> list[tuple[str, Tensor]]:
        return [*self.vision.parameters("vision."), *self.language.parameters("language.")]

    @property
    def embed_dim(self) -> int:
        return self.vision.out_width

    @property
    def obs_dim(self) -> int:
        return self.vision.in_width


def init_params(config: EncoderConfig, seed: int) -> tuple[MlpParams, InstructionEncoderParams]:
    rng = np.random.default_rng(seed)
    vision = init_mlp(config.vision_widths, rng, name="vision")
    table = Tensor.param(rng.normal(0.0, 1.0, (config.vocab_size, config.token_dim)), "tokens")
    projection = init_mlp(config.projection_widths, rng, name="projection")
    logger.debug("Initialized encoders with seed %d, vision widths %s", seed, config.vision_widths)
    return vision, InstructionEncoderParams(table, projection)


def init_encoder_params(config: EncoderConfig, seed: int) -> EncoderParams:
    return EncoderParams(*init_params(config, seed))


def encode_observation(params: MlpParams, obs: Any) -> Tensor:
    obs = as_tensor(obs)
    if obs.ndim != 1:
        raise ShapeMismatchError("encode_observation", obs.shape, (params.in_width,))
    return mlp_apply(params, obs)


def encode_observations(params: MlpParams, observations: Any) -> Tensor:
    observations = as_tensor(observations)
    if observations.ndim != 2:
        raise ShapeMismatchError("encode_observations", observations.shape, (params.in_width,))
    return mlp_apply(params, observations)


def _token_rows(params: InstructionEncoderParams, instructions: Sequence[Instruction]) -> np.ndarray:
    ids = np.array([l.tokens() for l in instructions], dtype=np.int64).reshape(-1, 2)
    bad = ids[(ids < 0) | (ids >= params.vocab_size)]
    if bad.size:
        raise VocabularyError(int(bad[0]), params.vocab_size)
    return ids


def encode_instruction(params: InstructionEncoderParams, l: Instruction) -> Tensor:
    """Mean of the verb and object token embeddings, then the projection net."""
    return encode_instructions(params, [l])[0]


def encode_instructions(
    params: InstructionEncoderParams, instructions: Sequence[Instruction]
) -> Tensor:
    ids = _token_rows(params, instructions)
    verbs = params.token_table[ids[:, 0]]
    objects = params.token_table[ids[:, 1]]
    return mlp_apply(params.projection, (verbs + objects) * 0.5)
