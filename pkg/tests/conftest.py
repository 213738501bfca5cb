"""Session-wide tiny world: synthetic splits, a trained target, an evaluation
model and a small GAN prior. Built once; reused by attack, metric and
acceptance tests."""

from dataclasses import dataclass

import pytest

from invrisk.attacks import RealismCalibration, fit_realism_calibration
from invrisk.data import LabeledDataset, make_synthetic_dataset, split_dataset
from invrisk.generative import DiscriminatorHandle, GanTrainConfig, GeneratorHandle, train_prior
from invrisk.modelzoo import ArchSpec, ModelHandle, TrainConfig, train_classifier


@dataclass
class World:
    target_train: LabeledDataset
    target_test: LabeledDataset
    public: LabeledDataset
    target: ModelHandle
    untrained_target: ModelHandle
    evaluation: ModelHandle
    generator: GeneratorHandle
    discriminator: DiscriminatorHandle
    calibration: RealismCalibration


@pytest.fixture(scope="session")
def world() -> World:
    ds = make_synthetic_dataset(60, size=32, seed=0)
    parts = split_dataset(ds, {"target_train": 0.5, "target_test": 0.25, "public": 0.25}, seed=0)
    public = make_synthetic_dataset(50, size=32, seed=1, name="public-pool")
    target = train_classifier(parts["target_train"], ArchSpec("vgg", 8, 2), TrainConfig(epochs=10, seed=0),
                              test_set=parts["target_test"])
    untrained = train_classifier(parts["target_train"], ArchSpec("vgg", 8, 2), TrainConfig(epochs=0, seed=0),
                                 test_set=parts["target_test"])
    evaluation = train_classifier(parts["target_test"], ArchSpec("vit", 8, 2), TrainConfig(epochs=12, seed=0),
                                  role="evaluation", paired_target=target, target_train=parts["target_train"],
                                  test_set=parts["public"])
    g, d = train_prior(public, GanTrainConfig(epochs=50, batch_size=16, lr_generator=5e-4,
                                              architecture_scale=2, seed=0))
    cal = fit_realism_calibration(d, g, public)
    return World(parts["target_train"], parts["target_test"], parts["public"], target, untrained,
                 evaluation, g, d, cal)
