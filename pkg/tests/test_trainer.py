import csv

import numpy as np
import pytest

from decision_nce import trainer
from decision_nce.config import Variant, WorldConfig
from decision_nce.errors import CheckpointFormatError, CompatibilityError, EmptyInputError, TrainingDivergedError
from decision_nce.trainer import (
    embed_batch,
    load_checkpoint,
    random_checkpoint,
    save_checkpoint,
    train,
    write_metrics_csv,
)
from decision_nce.sampler import sample_batch

from .conftest import small_train_config


def _param_bytes(ckpt):
    return [(name, t.data.tobytes()) for name, t in ckpt.params.parameters()]


class TestEmbedBatch:
    @pytest.mark.parametrize(
        "variant,frames", [(Variant.P, 2), (Variant.T, 2), (Variant.T4, 5), (Variant.T8, 9), (Variant.FRAME_ALIGN, 1)]
    )
    def test_frame_count(self, small_world_config, small_dataset, variant, frames):
        config = small_train_config(small_world_config, variant)
        ckpt = random_checkpoint(config)
        rng = np.random.default_rng(0)
        batch = sample_batch(small_dataset, 6, rng)
        embedded = embed_batch(ckpt.params, small_dataset, batch, config.objective, rng)
        assert len(embedded.frames) == frames
        assert all(f.shape == (6, 8) for f in embedded.frames)
        assert embedded.instructions.shape == (6, 8)

    def test_endpoints_are_encoded(self, small_world_config, small_dataset):
        config = small_train_config(small_world_config)
        ckpt = random_checkpoint(config)
        rng = np.random.default_rng(0)
        batch = sample_batch(small_dataset, 4, rng)
        embedded = embed_batch(ckpt.params, small_dataset, batch, config.objective, rng)
        for j, seg in enumerate(batch.segments):
            obs = small_dataset[seg.trajectory].observations
            np.testing.assert_allclose(
                embedded.start.numpy()[j], ckpt.embed_observations(obs[seg.start][None])[0], atol=1e-12
            )
            np.testing.assert_allclose(
                embedded.goal.numpy()[j], ckpt.embed_observations(obs[seg.goal][None])[0], atol=1e-12
            )


class TestTrain:
    def test_zero_learning_rate_keeps_initialization(self, small_world_config, small_dataset):
        config = small_train_config(small_world_config, learning_rate=0.0, iterations=3)
        trained = train(config, small_dataset, progress=False)
        assert _param_bytes(trained) == _param_bytes(random_checkpoint(config))
        assert trained.iteration == 3
        assert len(trained.history) == 3

    def test_same_seed_same_run(self, train_config, small_dataset):
        a = train(train_config, small_dataset, progress=False)
        b = train(train_config, small_dataset, progress=False)
        assert a.history == b.history
        assert _param_bytes(a) == _param_bytes(b)

    def test_seed_changes_run(self, train_config, small_dataset):
        a = train(train_config, small_dataset, progress=False)
        b = train(train_config.replace(seed=2), small_dataset, progress=False)
        assert a.history != b.history

    @pytest.mark.parametrize("variant", list(Variant))
    def test_loss_decreases(self, small_world_config, small_dataset, variant):
        config = small_train_config(small_world_config, variant, iterations=60, learning_rate=1e-2)
        losses = [r.loss for r in train(config, small_dataset, progress=False).history]
        assert np.mean(losses[-10:]) < np.mean(losses[:10])

    def test_initial_loss_near_uniform(self, train_config, small_dataset):
        first = train(train_config.replace(iterations=1), small_dataset, progress=False).history[0]
        assert np.isfinite(first.loss)
        assert first.loss <= 2 * (np.log(8) + 2)

    def test_divergence_reports_batch(self, train_config, small_dataset, monkeypatch):
        real = trainer.objective_loss
        monkeypatch.setattr(trainer, "objective_loss", lambda spec, batch: (real(spec, batch) - 1e6).sqrt())
        with pytest.raises(TrainingDivergedError) as info:
            train(train_config, small_dataset, progress=False)
        assert info.value.iteration == 1
        assert info.value.batch_seed == (1, 1)

    def test_empty_dataset(self, train_config):
        with pytest.raises(EmptyInputError):
            train(train_config, [], progress=False)

    def test_periodic_checkpoint(self, train_config, small_dataset, tmp_path):
        path = tmp_path / "enc.ckpt"
        train(train_config.replace(checkpoint_interval=2, iterations=3), small_dataset, checkpoint_path=path, progress=False)
        assert load_checkpoint(path).iteration == 2


class TestCheckpointFiles:
    def test_round_trip(self, train_config, small_world_config, small_dataset, tmp_path):
        ckpt = train(train_config, small_dataset, world_config=small_world_config, progress=False)
        path = tmp_path / "enc.ckpt"
        save_checkpoint(ckpt, path)
        loaded = load_checkpoint(path)
        assert _param_bytes(loaded) == _param_bytes(ckpt)
        assert loaded.train_config == ckpt.train_config
        assert loaded.world_config == small_world_config
        assert loaded.history == ckpt.history
        assert loaded.iteration == 5

    def test_wrong_kind(self, tmp_path, train_config):
        from decision_nce.checkpoint import save_arrays

        path = tmp_path / "policy.ckpt"
        save_arrays(path, "policy", {}, [])
        with pytest.raises(CheckpointFormatError):
            load_checkpoint(path)

    def test_config_and_arrays_disagree(self, tmp_path, train_config, small_world_config):
        path = tmp_path / "enc.ckpt"
        save_checkpoint(random_checkpoint(train_config), path)
        other = small_train_config(small_world_config)
        encoder = other.encoder.replace(hidden=(32,))
        from decision_nce.checkpoint import load_arrays, save_arrays

        kind, metadata, arrays = load_arrays(path)
        metadata["train_config"] = other.replace(encoder=encoder).to_dict()
        save_arrays(path, kind, metadata, arrays)
        with pytest.raises(CheckpointFormatError, match="shape"):
            load_checkpoint(path)


class TestCompatibility:
    def test_obs_dim_mismatch(self, train_config):
        with pytest.raises(CompatibilityError):
            random_checkpoint(train_config).check_world(WorldConfig(n_task_pairs=2, obs_dim=16, n_distractors=2))

    def test_vocabulary_mismatch(self, train_config):
        with pytest.raises(CompatibilityError):
            random_checkpoint(train_config).check_world(WorldConfig(n_task_pairs=4, obs_dim=12, n_distractors=2))

    def test_matching_world(self, train_config, small_world_config):
        random_checkpoint(train_config).check_world(small_world_config)


class TestMetricsCsv:
    def test_rows(self, train_config, small_dataset, tmp_path):
        ckpt = train(train_config, small_dataset, progress=False)
        path = tmp_path / "metrics.csv"
        write_metrics_csv(path, ckpt.history)
        with open(path, newline="") as fh:
            rows = list(csv.reader(fh))
        assert rows[0] == ["iteration", "loss", "grad_norm"]
        assert len(rows) == 6
        assert [float(r[1]) for r in rows[1:]] == [r.loss for r in ckpt.history]
