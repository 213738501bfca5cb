import numpy as np
import pytest

from invrisk.data import LabeledDataset, make_synthetic_dataset
from invrisk.errors import ConfigError, InputError
from invrisk.generative import (
    GanTrainConfig,
    collapse_detected,
    load_prior,
    sample,
    save_prior,
    train_prior,
)


@pytest.fixture(scope="module")
def small_public():
    return make_synthetic_dataset(16, size=32, seed=4)


@pytest.fixture(scope="module")
def prior(small_public):
    return train_prior(small_public, GanTrainConfig(latent_dim=64, epochs=4, batch_size=16, seed=1))


def test_two_epoch_training_is_deterministic(small_public):
    cfg = GanTrainConfig(latent_dim=16, epochs=2, batch_size=16, seed=7)
    g1, d1 = train_prior(small_public, cfg)
    g2, d2 = train_prior(small_public, cfg)
    assert g1.parameters_digest() == g2.parameters_digest()
    assert d1.parameters_digest() == d2.parameters_digest()
    assert len(g1.training_log) == 2
    assert set(g1.training_log[0]) == {"epoch", "generator_loss", "discriminator_loss"}


def test_sample_shape_and_determinism(prior):
    g, _ = prior
    z = np.random.default_rng(0).normal(size=64)
    img = sample(g, z)
    assert img.shape == (32, 32, 3)
    np.testing.assert_array_equal(img, sample(g, z))


def test_one_coordinate_changes_output(prior):
    g, _ = prior
    z = np.random.default_rng(1).normal(size=64)
    z2 = z.copy()
    z2[5] += 1.0
    assert not np.array_equal(sample(g, z), sample(g, z2))


def test_batch_order_preserved(prior):
    g, _ = prior
    zs = np.random.default_rng(2).normal(size=(5, 64))
    batch = sample(g, zs)
    assert batch.shape == (5, 32, 32, 3)
    for i in range(5):
        np.testing.assert_allclose(batch[i], sample(g, zs[i]), atol=1e-6)


def test_output_range_over_many_latents(prior):
    g, _ = prior
    imgs = sample(g, np.random.default_rng(3).normal(size=(1000, 64)) * 3)
    assert imgs.min() >= 0.0 and imgs.max() <= 1.0


def test_wrong_latent_length(prior):
    g, _ = prior
    with pytest.raises(InputError):
        sample(g, np.zeros(10))


def test_discriminator_prefers_real_over_noise():
    rng = np.random.default_rng(0)
    colours = rng.uniform(0.2, 0.8, size=(48, 1, 1, 3))
    solid = np.broadcast_to(colours, (48, 16, 16, 3)).astype(np.float32)
    ds = LabeledDataset.from_arrays("solid", solid, [0] * 48, {0: "solid"}, "public")
    _, d = train_prior(ds, GanTrainConfig(latent_dim=8, epochs=5, batch_size=16, seed=0))
    noise = rng.uniform(size=(48, 16, 16, 3)).astype(np.float32)
    assert d.score(ds.images).mean() > d.score(noise).mean()
    assert np.all(np.isfinite(d.score(noise)))


def test_checkpoint_roundtrip(tmp_path, prior):
    g, d = prior
    save_prior(g, d, tmp_path / "gan")
    g2, d2 = load_prior(tmp_path / "gan")
    assert g2.parameters_digest() == g.parameters_digest()
    assert d2.parameters_digest() == d.parameters_digest()
    z = np.random.default_rng(5).normal(size=(3, 64))
    np.testing.assert_array_equal(sample(g2, z), sample(g, z))


def test_collapse_detector():
    assert collapse_detected([0.5, 5e-5, 4e-5, 1e-5])
    assert not collapse_detected([5e-5, 4e-5, 0.3, 1e-5])
    assert not collapse_detected([1e-5, 1e-5])


def test_config_validation():
    with pytest.raises(ConfigError):
        GanTrainConfig(epochs=0)
    with pytest.raises(ConfigError):
        train_prior(make_synthetic_dataset(2, size=12), GanTrainConfig(epochs=1))
