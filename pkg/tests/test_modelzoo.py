import numpy as np
import pytest
import torch
from torch import nn

from invrisk.data import make_synthetic_dataset, split_dataset
from invrisk.errors import ConfigError, InputError
from invrisk.modelzoo import (
    FAMILIES,
    ArchSpec,
    Classifier,
    ModelHandle,
    ModelRole,
    Preprocess,
    TrainConfig,
    build_network,
    fine_tune,
    infer,
    load_model,
    save_model,
    train_classifier,
)
from invrisk.riskcore import per_class_accuracy


@pytest.fixture(scope="module")
def parts():
    ds = make_synthetic_dataset(40, size=16, seed=11)
    return split_dataset(ds, {"target_train": 0.5, "target_test": 0.25, "public": 0.25}, seed=2)


@pytest.fixture(scope="module")
def target(parts):
    return train_classifier(parts["target_train"], ArchSpec("vgg", 8, 2), TrainConfig(epochs=10, seed=0),
                            test_set=parts["target_test"])


def two_class_separable(n=40, seed=0):
    rng = np.random.default_rng(seed)
    imgs = rng.uniform(0, 0.2, size=(n, 8, 8, 3)).astype(np.float32)
    labels = np.arange(n) % 2
    imgs[labels == 1, :, :, 0] += 0.7
    from invrisk.data import LabeledDataset
    return LabeledDataset.from_arrays("sep", imgs, labels, {0: "dark", 1: "red"}, "target_train")


@pytest.mark.parametrize("family", FAMILIES)
def test_network_shapes(family):
    net = build_network(ArchSpec(family, 4, 2), 5, (16, 16, 3))
    out = net(torch.rand(3, 3, 16, 16))
    assert out.shape == (3, 5)
    # cross-shape input is resized by the network itself
    assert net(torch.rand(2, 3, 24, 24)).shape == (2, 5)


def test_separable_reaches_full_train_accuracy():
    ds = two_class_separable()
    h = train_classifier(ds, ArchSpec("vgg", 4, 1), TrainConfig(epochs=20, seed=0, val_fraction=0.0))
    assert h.train_accuracy == 1.0


def test_zero_epochs_is_chance(parts):
    h = train_classifier(parts["target_train"], ArchSpec("vgg", 4, 2), TrainConfig(epochs=0, seed=3))
    assert h.training_log == []
    assert h.train_accuracy <= 0.6  # 4 balanced classes, chance 0.25


def test_training_deterministic(parts):
    cfg = TrainConfig(epochs=2, seed=5)
    a = train_classifier(parts["target_train"], ArchSpec("resnet", 4, 1), cfg)
    b = train_classifier(parts["target_train"], ArchSpec("resnet", 4, 1), cfg)
    assert a.parameters_digest() == b.parameters_digest()


def test_reported_train_accuracy_matches_infer(parts, target):
    preds, _ = infer(target, parts["target_train"].images)
    overall = per_class_accuracy(preds.tolist(), parts["target_train"].labels.tolist(), target.class_set).overall
    assert target.train_accuracy == pytest.approx(overall, abs=1e-6)


def test_infer_contract(target, parts):
    preds, probs = infer(target, parts["public"].images[:7])
    assert preds.shape == (7,) and probs.shape == (7, 4)
    assert np.all(probs >= 0)
    np.testing.assert_allclose(probs.sum(axis=1), 1.0, atol=1e-6)
    again, _ = infer(target, parts["public"].images[:7])
    np.testing.assert_array_equal(preds, again)
    p0, c0 = infer(target, [])
    assert p0.shape == (0,) and c0.shape == (0, 4)


def test_infer_resizes_and_rejects_bad_channels(target):
    preds, _ = infer(target, np.random.default_rng(0).uniform(size=(2, 20, 20, 3)))
    assert preds.shape == (2,)
    with pytest.raises(InputError):
        infer(target, np.zeros((1, 16, 16, 4)))


def test_hand_built_head_known_argmax():
    head = nn.Sequential(nn.AdaptiveAvgPool2d(1), nn.Flatten(), nn.Linear(2, 2, bias=False))
    with torch.no_grad():
        head[2].weight.copy_(torch.eye(2))
    net = Classifier(Preprocess((2, 2), [0.0, 0.0], [1.0, 1.0]), [], head)
    handle = ModelHandle(ModelRole.TARGET, ArchSpec("vgg", 1, 1), {0: "a", 1: "b"}, (2, 2, 2),
                         net, 0.0, None)
    imgs = np.zeros((2, 2, 2, 2), dtype=np.float32)
    imgs[0, ..., 0] = 1.0
    imgs[1, ..., 1] = 1.0
    preds, probs = infer(handle, imgs)
    assert preds.tolist() == [0, 1]
    assert probs[0, 0] == pytest.approx(np.e / (np.e + 1))


def test_evaluation_role_constraints(parts, target):
    cfg = TrainConfig(epochs=1, seed=0)
    with pytest.raises(ConfigError, match="family"):
        train_classifier(parts["target_test"], ArchSpec("vgg", 4, 1), cfg, role="evaluation",
                         paired_target=target, target_train=parts["target_train"])
    with pytest.raises(ConfigError, match="shares"):
        train_classifier(parts["target_train"], ArchSpec("vit", 4, 1), cfg, role="evaluation",
                         paired_target=target, target_train=parts["target_train"])
    with pytest.raises(ConfigError):
        train_classifier(parts["target_test"], ArchSpec("vit", 4, 1), cfg, role="evaluation")
    ev = train_classifier(parts["target_test"], ArchSpec("vit", 4, 1), cfg, role="evaluation",
                          paired_target=target, target_train=parts["target_train"])
    assert ev.role is ModelRole.EVALUATION


@pytest.fixture(scope="module")
def evaluation(parts, target):
    return train_classifier(parts["target_test"], ArchSpec("resnet", 8, 2), TrainConfig(epochs=15, seed=1),
                            role="evaluation", paired_target=target, target_train=parts["target_train"],
                            test_set=parts["public"])


def test_full_freeze_changes_only_head(parts, evaluation):
    proxy = fine_tune(evaluation, parts["public"], TrainConfig(epochs=3, seed=0, frozen_prefix_fraction=1.0))
    assert proxy.role is ModelRole.PROXY
    base_sd, new_sd = evaluation.module.state_dict(), proxy.module.state_dict()
    changed = {k for k in base_sd if not torch.equal(base_sd[k], new_sd[k])}
    assert changed and all(k.startswith("head.") for k in changed)


def test_fine_tune_on_base_data_keeps_accuracy(parts, evaluation):
    proxy = fine_tune(evaluation, parts["target_test"], TrainConfig(epochs=3, lr=1e-4, seed=0),
                      held_out=parts["public"])
    assert abs(proxy.test_accuracy - evaluation.test_accuracy) <= 0.02 + 1e-9


def test_fine_tune_errors(parts, evaluation, target):
    with pytest.raises(ConfigError):
        fine_tune(evaluation, parts["public"].subset([]), TrainConfig(epochs=1))
    with pytest.raises(ConfigError):
        fine_tune(target, parts["public"], TrainConfig(epochs=1))


def test_checkpoint_roundtrip(tmp_path, target, parts):
    save_model(target, tmp_path / "target")
    loaded = load_model(tmp_path / "target")
    assert loaded.parameters_digest() == target.parameters_digest()
    assert loaded.sidecar()["train_accuracy"] == target.train_accuracy
    np.testing.assert_array_equal(infer(loaded, parts["public"].images)[1], infer(target, parts["public"].images)[1])


@pytest.mark.parametrize("kwargs", [{"epochs": -1}, {"lr": 0}, {"schedule": "step"}, {"frozen_prefix_fraction": 1.5}])
def test_train_config_validation(kwargs):
    with pytest.raises(ConfigError):
        TrainConfig(**kwargs)
