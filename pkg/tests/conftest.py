import numpy as np
import pytest

from decision_nce.config import EncoderConfig, ObjectiveSpec, TrainConfig, Variant, WorldConfig
from decision_nce.world import SyntheticWorld


@pytest.fixture
def rng():
    return np.random.default_rng(42)


@pytest.fixture
def small_world_config():
    """Two task pairs, short trajectories and a fast expert."""
    return WorldConfig(
        n_task_pairs=2,
        obs_dim=12,
        n_distractors=2,
        scene_dim=2,
        h_min=6,
        h_max=12,
        alpha=0.2,
        seed=3,
    )


@pytest.fixture
def small_world(small_world_config):
    return SyntheticWorld(small_world_config)


@pytest.fixture
def small_dataset(small_world):
    return small_world.generate_dataset(24)


def small_train_config(world: WorldConfig, variant: Variant = Variant.T, **overrides) -> TrainConfig:
    encoder = EncoderConfig.for_world(
        world, embed_dim=8, hidden=(16,), token_dim=8, projection_hidden=(16,)
    )
    fields = dict(
        objective=ObjectiveSpec(variant, embed_dim=8),
        encoder=encoder,
        iterations=5,
        batch_size=8,
        seed=1,
    )
    fields.update(overrides)
    return TrainConfig(**fields)


@pytest.fixture
def train_config(small_world_config):
    return small_train_config(small_world_config)
