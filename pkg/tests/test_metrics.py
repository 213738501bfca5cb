import copy
import dataclasses
import json

import numpy as np
import pytest

from invrisk.attacks import ReconstructionItem, ReconstructionSet
from invrisk.data import LabeledDataset, quantize
from invrisk.errors import ConfigError
from invrisk.metrics import (
    INVERSION_FAILED,
    LABEL_UNREACHABLE,
    MetricInputs,
    compute_all,
    feature_loss,
    label_candidates,
    label_loss,
    load_scores,
    model_stealing_loss,
    quality_loss,
    write_scores,
)
from invrisk.modelzoo import ArchSpec, ModelRole, TrainConfig, fine_tune, infer, train_classifier
from invrisk.riskcore import DIMENSIONS, RiskDimension
from invrisk.vlm import (
    CandidateLabelSet,
    CaptionRecord,
    ConstantCaptionBackend,
    FixtureTagger,
    StubCaptionBackend,
    StubSimilarity,
    StubTextZeroShot,
    caption,
)

NAMES = {0: "cat", 1: "dog", 2: "ship"}


def _recset(images, labels, names=NAMES, accepted=None, requested=None):
    accepted = accepted if accepted is not None else [True] * len(labels)
    items = [ReconstructionItem(quantize(im), int(c), "fv", None, 0.9, a, i, int(c))
             for i, (im, c, a) in enumerate(zip(images, labels, accepted))]
    return ReconstructionSet(items, requested or max(1, len(labels)), 0.0, dict(names), "fv")


def _rand_images(n, seed=0, size=4):
    return list(np.random.default_rng(seed).uniform(size=(n, size, size, 3)).astype(np.float32))


def _cand(labels):
    return CandidateLabelSet(list(labels), {l: 1.0 for l in labels})


# --- quality -------------------------------------------------------------


def _as_role(handle, role):
    return dataclasses.replace(handle, role=role)


def test_quality_counting(world):
    ev = _as_role(world.target, ModelRole.EVALUATION)
    pool = world.target_train.images
    preds = infer(ev, pool)[0]
    right = np.flatnonzero(preds == 1)[:7]
    wrong = np.flatnonzero(preds != 1)[:3]
    imgs = pool[np.concatenate([right, wrong])]
    rs = _recset(imgs, [1] * 10, world.target_train.class_names)
    score = quality_loss(ev, rs)
    assert score.per_class == {1: 0.7} and score.sample_counts == {1: 10}


def test_quality_perfect_oracle(world):
    ev = _as_role(world.target, ModelRole.EVALUATION)
    imgs = world.target_train.images
    rs = _recset(imgs, infer(ev, imgs)[0], world.target_train.class_names)
    assert quality_loss(ev, rs).overall == 1.0


@pytest.fixture(scope="module")
def ten_class():
    rng = np.random.default_rng(11)
    images = rng.uniform(size=(500, 16, 16, 3)).astype(np.float32)
    labels = np.repeat(np.arange(10), 50)
    names = {i: f"class{i}" for i in range(10)}
    ds = LabeledDataset.from_arrays("ten", images, labels, names, "public")
    model = train_classifier(ds, ArchSpec("vgg", 8, 2), TrainConfig(epochs=0, seed=3))
    return ds, model


def test_quality_random_model_chance_level(ten_class):
    ds, model = ten_class
    rs = _recset(ds.images, ds.labels, ds.class_names)
    score = quality_loss(_as_role(model, ModelRole.EVALUATION), rs)
    # Predictions independent of labels on a balanced 10-class set: mean 0.1, sd ~0.013.
    assert abs(score.overall - 0.1) < 0.055


def test_quality_excludes_failed_classes(world):
    ev = _as_role(world.target, ModelRole.EVALUATION)
    imgs = world.target_train.images[:8]
    labels = [0] * 4 + [1] * 4
    rs = _recset(imgs, labels, world.target_train.class_names)
    score = quality_loss(ev, rs)
    assert set(score.per_class) <= {0, 1}
    assert score.flags[INVERSION_FAILED] == [2, 3]
    assert {2, 3} <= set(score.excluded_classes)


def test_quality_requires_evaluation_role(world):
    with pytest.raises(ConfigError):
        quality_loss(world.target, _recset(world.target_train.images[:2], [0, 1], world.target_train.class_names))


def test_quality_order_invariant(world):
    imgs = world.target_train.images[:30]
    labels = world.target_train.labels[:30]
    perm = np.random.default_rng(0).permutation(30)
    a = quality_loss(world.evaluation, _recset(imgs, labels, world.target_train.class_names))
    b = quality_loss(world.evaluation, _recset(imgs[perm], labels[perm], world.target_train.class_names))
    assert a.to_dict() == b.to_dict()


# --- feature -------------------------------------------------------------


def _caption_all(backend, images, labels):
    return [caption(backend, im, image_ref=str(i), class_id=int(c)) for i, (im, c) in enumerate(zip(images, labels))]


def test_feature_oracle_and_adversarial():
    imgs = _rand_images(9)
    labels = [0, 1, 2] * 3
    oracle = StubCaptionBackend(FixtureTagger.from_images([quantize(i) for i in imgs], [NAMES[c] for c in labels]))
    recs = _caption_all(oracle, [quantize(i) for i in imgs], labels)
    assert feature_loss(recs, StubTextZeroShot(), NAMES).overall == 1.0
    bad = _caption_all(ConstantCaptionBackend("a photo of a banana"), imgs, labels)
    score = feature_loss(bad, StubTextZeroShot(), NAMES)
    assert score.overall == 0.0 and score.per_class == {0: 0.0, 1: 0.0, 2: 0.0}


def test_feature_mixed_counting():
    recs = [CaptionRecord(str(i), "a photo of a cat" if i < 6 else "a blurry thing", None, "t", class_id=0)
            for i in range(10)]
    score = feature_loss(recs, StubTextZeroShot(), NAMES)
    assert score.per_class == {0: 0.6}
    assert score.sample_counts == {0: 10}


def test_feature_excludes_captionless_items():
    recs = [CaptionRecord("a", "a cat", None, "t", class_id=0),
            CaptionRecord("b", None, None, "t", class_id=0, error="empty caption")]
    score = feature_loss(recs, StubTextZeroShot(), NAMES)
    assert score.sample_counts == {0: 1} and score.overall == 1.0


# --- label ---------------------------------------------------------------


def _tagged_set(n_per_class=10, seed=0):
    imgs = [quantize(i) for i in _rand_images(3 * n_per_class, seed)]
    labels = [c for c in range(3) for _ in range(n_per_class)]
    tagger = FixtureTagger.from_images(imgs, [NAMES[c] for c in labels])
    return _recset(imgs, labels), tagger, imgs, labels


def test_label_oracle():
    rs, tagger, _, _ = _tagged_set()
    score = label_loss(rs, StubSimilarity(tagger), _cand(NAMES.values()), NAMES)
    assert score.overall == 1.0 and LABEL_UNREACHABLE not in score.flags


def test_label_unreachable_class():
    rs, tagger, _, _ = _tagged_set()
    score = label_loss(rs, StubSimilarity(tagger), _cand(["cat", "dog"]), NAMES)
    assert score.per_class[2] == 0.0 and score.flags[LABEL_UNREACHABLE] == [2]
    assert score.per_class[0] == 1.0


def test_label_group_fraction_and_majority():
    rs, _, imgs, labels = _tagged_set()
    tags = [NAMES[c] for c in labels]
    tags[0] = "dog"
    sim = StubSimilarity(FixtureTagger.from_images(imgs, tags))
    score = label_loss(rs, sim, _cand(NAMES.values()), NAMES)
    assert score.per_class[0] == pytest.approx(0.9)
    vote = label_loss(rs, sim, _cand(NAMES.values()), NAMES, majority_vote=True)
    assert vote.per_class == {0: 1.0, 1: 1.0, 2: 1.0}


def test_label_benchmark_single_candidate():
    rs, tagger, _, _ = _tagged_set()
    score = label_loss(rs, StubSimilarity(tagger), _cand(["dog"]), NAMES, mode="benchmark")
    assert score.per_class == {0: 0.0, 1: 1.0, 2: 0.0}


def test_label_modes_lists():
    cands = _cand(["tree", "cat"])
    assert label_candidates(NAMES, cands, "derived") == ["tree", "cat"]
    assert label_candidates(NAMES, cands, "benchmark") == ["cat"]
    assert label_candidates(NAMES, _cand(["tree"]), "benchmark") == ["cat", "dog", "ship"]
    assert label_candidates(NAMES, _cand([]), "derived", vocabulary=["a", "b"]) == ["a", "b"]
    assert label_candidates(NAMES, cands, "decoy", decoy_labels=["zebra"]) == ["zebra"]
    with pytest.raises(ConfigError):
        label_candidates(NAMES, cands, "decoy")
    with pytest.raises(ConfigError):
        label_candidates(NAMES, cands, "vote")


def test_label_decoy_scores_zero():
    rs, tagger, _, _ = _tagged_set()
    score = label_loss(rs, StubSimilarity(tagger), None, NAMES, mode="decoy", decoy_labels=["zebra", "car"])
    assert score.overall == 0.0 and score.flags[LABEL_UNREACHABLE] == [0, 1, 2]


# --- model stealing ------------------------------------------------------


def test_stealing_upper_bound(world):
    ds = world.target_train
    preds = infer(world.target, ds.images)[0]
    relabeled = LabeledDataset.from_arrays("relabel", ds.images, preds, ds.class_names, "target_train")
    proxy = _as_role(world.target, ModelRole.PROXY)
    assert model_stealing_loss(proxy, relabeled).overall == 1.0


def test_stealing_chance_level(ten_class):
    ds, model = ten_class
    assert abs(model_stealing_loss(_as_role(model, ModelRole.PROXY), ds).overall - 0.1) < 0.055


def test_stealing_single_class_proxy(world):
    ds = world.target_train
    only = ds.subset(np.flatnonzero(ds.labels == 2), name="only-2")
    proxy = fine_tune(world.evaluation, only, TrainConfig(epochs=5, lr=5e-3, seed=0))
    score = model_stealing_loss(proxy, ds)
    assert score.per_class[2] >= 0.9
    assert all(score.per_class[c] <= 0.1 for c in (0, 1, 3))


def test_stealing_class_mismatch(world, ten_class):
    with pytest.raises(ConfigError):
        model_stealing_loss(_as_role(world.target, ModelRole.PROXY), ten_class[0])


# --- all together --------------------------------------------------------


def test_compute_all_is_pure_and_persisted(world, tmp_path):
    ds = world.target_train
    imgs = ds.images[:20]
    labels = ds.labels[:20]
    names = ds.class_names
    rs = _recset(imgs, labels, names)
    tagger = FixtureTagger.from_images(imgs, [names[int(c)] for c in labels])
    recs = [caption(StubCaptionBackend(tagger), it.image, image_ref=it.digest, class_id=it.class_id)
            for it in rs.accepted()]
    proxy = fine_tune(world.evaluation, rs.accepted_dataset(), TrainConfig(epochs=1, seed=0))
    inputs = MetricInputs(rs, recs, _cand(names.values()), world.evaluation, proxy, ds, names)
    before = copy.deepcopy([it.image for it in rs.items])
    scores = compute_all(inputs, StubTextZeroShot(), StubSimilarity(tagger))
    assert all(np.array_equal(a, it.image) for a, it in zip(before, rs.items))
    assert set(scores) == set(DIMENSIONS)
    assert scores[RiskDimension.FEATURE].overall == 1.0 and scores[RiskDimension.LABEL].overall == 1.0
    for s in scores.values():
        assert 0.0 <= s.overall <= 1.0 and set(s.per_class) <= set(names)
    write_scores(scores, tmp_path / "m")
    body = json.loads((tmp_path / "m" / "quality.json").read_text())
    assert body["annotation"].startswith("higher")
    loaded = load_scores(tmp_path / "m")
    assert {d: s.to_dict() for d, s in loaded.items()} == {d: s.to_dict() for d, s in scores.items()}
    bad = [caption(ConstantCaptionBackend("a photo of a tree"), it.image, image_ref=it.digest, class_id=it.class_id)
           for it in rs.accepted()]
    swapped = compute_all(dataclasses.replace(inputs, caption_records=bad), StubTextZeroShot(), StubSimilarity(tagger))
    assert swapped[RiskDimension.FEATURE].overall == 0.0
    for d in (RiskDimension.QUALITY, RiskDimension.STEALING):
        assert swapped[d].to_dict() == scores[d].to_dict()
