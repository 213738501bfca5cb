"""The four risk dimensions.

Every dimension is an accuracy in [0, 1] where higher means more private
information leaks through the target model. Classes for which inversion
produced no accepted reconstruction are left out of every denominator and
listed under the ``inversion-failed`` flag.
"""

from __future__ import annotations

import json
from collections import Counter
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from invrisk.attacks import ReconstructionSet
from invrisk.data import LabeledDataset
from invrisk.errors import ConfigError
from invrisk.modelzoo import ModelHandle, ModelRole, infer
from invrisk.riskcore import DIMENSIONS, DimensionScore, RiskDimension, per_class_accuracy
from invrisk.vlm import (
    DEFAULT_TEMPLATE,
    CandidateLabelSet,
    CaptionRecord,
    ImageTextSimilarityBackend,
    TextZeroShotBackend,
    build_vocabulary,
    labels_match,
    normalize_label,
    zero_shot_image_classify,
    zero_shot_text_classify,
)

LABEL_MODES = ("derived", "benchmark", "decoy")
INVERSION_FAILED = "inversion-failed"
LABEL_UNREACHABLE = "label-unreachable"
LEAKAGE_NOTE = "higher = more private-data leakage"


def _score(predictions: Sequence[int | None], truth: Sequence[int], class_ids: Iterable[int],
           dimension: RiskDimension, failed: Iterable[int] = ()) -> DimensionScore:
    failed = sorted(set(failed))
    keep = [c for c in sorted(set(class_ids)) if c not in set(failed)]
    pairs = [(p, t) for p, t in zip(predictions, truth) if t in set(keep)]
    if pairs:
        out = per_class_accuracy([p for p, _ in pairs], [t for _, t in pairs], keep, dimension)
    else:
        out = DimensionScore(dimension, 0.0, {}, {}, excluded_classes=list(keep), flags={"no-samples": list(keep)})
    out.excluded_classes = sorted(set(out.excluded_classes) | set(failed))
    if failed:
        out.flags[INVERSION_FAILED] = failed
    return out


def _name_to_id(class_names: Mapping[int, str], label: str | None,
                synonyms: Mapping[str, str] | None) -> int | None:
    if label is None:
        return None
    for cid in sorted(class_names):
        if labels_match(label, class_names[cid], synonyms):
            return cid
    return None


@dataclass
class MetricInputs:
    reconstruction_set: ReconstructionSet
    caption_records: list[CaptionRecord]
    candidate_labels: CandidateLabelSet
    evaluation_model: ModelHandle
    proxy_model: ModelHandle
    target_train_set: LabeledDataset
    class_names: dict[int, str]


def quality_loss(evaluation_model: ModelHandle, reconstruction_set: ReconstructionSet) -> DimensionScore:
    """Accuracy of an independent evaluation model on the accepted reconstructions."""
    if evaluation_model.role is not ModelRole.EVALUATION:
        raise ConfigError(f"quality loss needs an evaluation model, got role {evaluation_model.role.value}")
    items = reconstruction_set.accepted()
    preds: list[int | None] = []
    if items:
        preds = [int(p) for p in infer(evaluation_model, np.stack([it.image for it in items]))[0]]
    return _score(preds, [it.class_id for it in items], reconstruction_set.class_names,
                  RiskDimension.QUALITY, reconstruction_set.failed_classes)


def feature_loss(caption_records: Sequence[CaptionRecord], text_backend: TextZeroShotBackend,
                 class_names: Mapping[int, str], synonyms: Mapping[str, str] | None = None,
                 failed_classes: Iterable[int] = ()) -> DimensionScore:
    """Accuracy of zero-shot text classification of captions over the known class names.

    The top-ranked name is the prediction only when its score is positive; a
    caption that endorses no class counts as incorrect. Records carrying an
    item error, or with no class id, leave the denominators.
    """
    ids = sorted(class_names)
    labels = [class_names[c] for c in ids]
    preds: list[int | None] = []
    truth: list[int] = []
    for rec in caption_records:
        if not rec.ok or rec.class_id is None:
            continue
        label, score = zero_shot_text_classify(text_backend, rec.caption or "", labels)[0]
        preds.append(_name_to_id(class_names, label, synonyms) if score > 0 else None)
        truth.append(int(rec.class_id))
    return _score(preds, truth, ids, RiskDimension.FEATURE, failed_classes)


def label_candidates(class_names: Mapping[int, str], candidate_labels: CandidateLabelSet | None,
                     mode: str = "derived", vocabulary: Sequence[str] | None = None,
                     decoy_labels: Sequence[str] | None = None) -> list[str]:
    """The label list handed to zero-shot image classification for a given mode.

    ``derived`` uses the derived candidates, falling back to the full
    vocabulary when none survived. ``benchmark`` keeps only candidates that
    name a known class, falling back to all class names. ``decoy`` uses the
    user's decoy list verbatim.
    """
    if mode not in LABEL_MODES:
        raise ConfigError(f"label mode must be one of {LABEL_MODES}, got {mode!r}")
    if mode == "decoy":
        if not decoy_labels:
            raise ConfigError("decoy mode needs a nonempty decoy label list")
        return list(decoy_labels)
    derived = [] if candidate_labels is None else list(candidate_labels.labels)
    if mode == "benchmark":
        known = {normalize_label(n) for n in class_names.values()}
        kept = [label for label in derived if normalize_label(label) in known]
        return kept or [class_names[c] for c in sorted(class_names)]
    if derived:
        return derived
    fallback = list(vocabulary) if vocabulary else build_vocabulary(class_names=class_names.values())
    if not fallback:
        raise ConfigError("no candidate labels and no vocabulary to fall back on")
    return fallback


def label_loss(reconstruction_set: ReconstructionSet, similarity_backend: ImageTextSimilarityBackend,
               candidate_labels: CandidateLabelSet | None, class_names: Mapping[int, str],
               mode: str = "derived", vocabulary: Sequence[str] | None = None,
               decoy_labels: Sequence[str] | None = None, majority_vote: bool = False,
               template: str = DEFAULT_TEMPLATE, synonyms: Mapping[str, str] | None = None) -> DimensionScore:
    """Per-class fraction of reconstructions assigned their true class name by zero-shot image classification.

    With ``majority_vote`` a class scores 1 when its group's most common
    prediction (ties to the earlier label) is the true name, and 0 otherwise.
    Classes whose name is absent from the label list score 0 and are flagged
    ``label-unreachable``.
    """
    labels = label_candidates(class_names, candidate_labels, mode, vocabulary, decoy_labels)
    failed = reconstruction_set.failed_classes
    items = reconstruction_set.accepted()
    preds: list[int | None] = []
    truth: list[int] = []
    raw: list[str | None] = []
    if items:
        out = zero_shot_image_classify(similarity_backend, [it.image for it in items], labels, template)
        for i, it in enumerate(items):
            if i in out.errors:
                continue
            raw.append(out.predictions[i])
            preds.append(_name_to_id(class_names, out.predictions[i], synonyms))
            truth.append(it.class_id)
    score = _score(preds, truth, class_names, RiskDimension.LABEL, failed)
    unreachable = [c for c in score.per_class
                   if not any(labels_match(label, class_names[c], synonyms) for label in labels)]
    if unreachable:
        score.flags[LABEL_UNREACHABLE] = unreachable
    if majority_vote and score.per_class:
        for c in score.per_class:
            votes = Counter(r for r, t in zip(raw, truth) if t == c)
            top = max(labels, key=lambda label: votes[label])
            score.per_class[c] = 1.0 if labels_match(top, class_names[c], synonyms) else 0.0
        total = sum(score.sample_counts.values())
        score.overall = sum(score.per_class[c] * score.sample_counts[c] for c in score.per_class) / total
    return score


def model_stealing_loss(proxy_model: ModelHandle, target_train_set: LabeledDataset,
                        failed_classes: Iterable[int] = ()) -> DimensionScore:
    """Accuracy of the reconstruction-trained proxy on the target's private training data."""
    if proxy_model.role is not ModelRole.PROXY:
        raise ConfigError(f"model stealing loss needs a proxy model, got role {proxy_model.role.value}")
    proxy_classes = sorted(proxy_model.class_names)
    if proxy_classes != sorted(target_train_set.class_names) or not set(target_train_set.class_set) <= set(
            proxy_classes):
        raise ConfigError(f"proxy classes {proxy_classes} do not match dataset classes "
                          f"{sorted(target_train_set.class_names)}")
    preds = [int(p) for p in infer(proxy_model, target_train_set.images)[0]]
    return _score(preds, [int(t) for t in target_train_set.labels], proxy_classes,
                  RiskDimension.STEALING, failed_classes)


def compute_all(inputs: MetricInputs, text_backend: TextZeroShotBackend,
                similarity_backend: ImageTextSimilarityBackend, label_mode: str = "derived",
                vocabulary: Sequence[str] | None = None, decoy_labels: Sequence[str] | None = None,
                majority_vote: bool = False, synonyms: Mapping[str, str] | None = None
                ) -> dict[RiskDimension, DimensionScore]:
    rs = inputs.reconstruction_set
    failed = rs.failed_classes
    return {
        RiskDimension.QUALITY: quality_loss(inputs.evaluation_model, rs),
        RiskDimension.FEATURE: feature_loss(inputs.caption_records, text_backend, inputs.class_names,
                                            synonyms, failed),
        RiskDimension.LABEL: label_loss(rs, similarity_backend, inputs.candidate_labels, inputs.class_names,
                                        label_mode, vocabulary, decoy_labels, majority_vote, synonyms=synonyms),
        RiskDimension.STEALING: model_stealing_loss(inputs.proxy_model, inputs.target_train_set, failed),
    }


def write_scores(scores: Mapping[RiskDimension, DimensionScore], directory: str | Path) -> Path:
    """One ``<dimension>.json`` file per dimension."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for dim, score in scores.items():
        body = {**score.to_dict(), "annotation": LEAKAGE_NOTE}
        (directory / f"{RiskDimension(dim).value}.json").write_text(json.dumps(body, indent=2, sort_keys=True))
    return directory


def load_scores(directory: str | Path) -> dict[RiskDimension, DimensionScore]:
    directory = Path(directory)
    return {dim: DimensionScore.from_dict(json.loads((directory / f"{dim.value}.json").read_text()))
            for dim in DIMENSIONS}
