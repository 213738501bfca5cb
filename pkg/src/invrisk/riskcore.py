"""Risk scoring primitives.

Per-class accuracy bookkeeping, the weighted composite accuracy loss
(WCAL), low/medium/high binning and trial aggregation with Student-t
confidence intervals. Everything here is pure and stateless.

All dimension scores are accuracies: higher means more private-data
leakage through the target model.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field
from typing import Any, Hashable, Iterable, Mapping, Sequence

import numpy as np
from scipy import stats

from invrisk.errors import ConfigError, InputError

LOW_UPPER = 0.55
HIGH_LOWER = 0.65
WEIGHT_TOLERANCE = 1e-9


class RiskDimension(str, enum.Enum):
    QUALITY = "quality"
    FEATURE = "feature"
    LABEL = "label"
    STEALING = "stealing"


DIMENSIONS: tuple[RiskDimension, ...] = tuple(RiskDimension)


@dataclass(frozen=True)
class RiskWeights:
    """Convex weights over the four risk dimensions."""

    weights: Mapping[RiskDimension, float]

    def __post_init__(self) -> None:
        weights = {RiskDimension(k): float(v) for k, v in dict(self.weights).items()}
        missing = [d.value for d in DIMENSIONS if d not in weights]
        if missing:
            raise ConfigError(f"risk weights missing dimensions: {missing}")
        for dim, w in weights.items():
            if not (0.0 <= w <= 1.0) or not math.isfinite(w):
                raise ConfigError(f"risk weight for {dim.value} must lie in [0, 1], got {w}")
        total = math.fsum(weights.values())
        if abs(total - 1.0) > WEIGHT_TOLERANCE:
            raise ConfigError(f"risk weights must sum to 1, got {total!r}")
        object.__setattr__(self, "weights", weights)

    @classmethod
    def equal(cls) -> "RiskWeights":
        return cls({d: 0.25 for d in DIMENSIONS})

    def __getitem__(self, dim: RiskDimension | str) -> float:
        return self.weights[RiskDimension(dim)]

    def to_dict(self) -> dict[str, float]:
        return {d.value: self.weights[d] for d in DIMENSIONS}


@dataclass
class DimensionScore:
    """Accuracy record for one risk dimension.

    ``per_class`` omits classes that contributed no samples; those are listed
    in ``excluded_classes`` instead of being scored as zero.
    """

    dimension: RiskDimension | None
    overall: float
    per_class: dict[int, float]
    sample_counts: dict[int, int]
    excluded_classes: list[int] = field(default_factory=list)
    flags: dict[str, list[int]] = field(default_factory=dict)

    def to_dict(self) -> dict[str, Any]:
        return {
            "dimension": None if self.dimension is None else self.dimension.value,
            "overall": self.overall,
            "per_class": {str(k): v for k, v in sorted(self.per_class.items())},
            "sample_counts": {str(k): v for k, v in sorted(self.sample_counts.items())},
            "excluded_classes": sorted(self.excluded_classes),
            "flags": {k: sorted(v) for k, v in sorted(self.flags.items())},
        }

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "DimensionScore":
        return cls(
            dimension=None if d["dimension"] is None else RiskDimension(d["dimension"]),
            overall=float(d["overall"]),
            per_class={int(k): float(v) for k, v in d["per_class"].items()},
            sample_counts={int(k): int(v) for k, v in d["sample_counts"].items()},
            excluded_classes=[int(c) for c in d.get("excluded_classes", [])],
            flags={k: [int(c) for c in v] for k, v in d.get("flags", {}).items()},
        )


class RiskLevel(str, enum.Enum):
    LOW = "low"
    MEDIUM = "medium"
    HIGH = "high"


@dataclass(frozen=True)
class RiskBin:
    level: RiskLevel
    low_upper: float = LOW_UPPER
    high_lower: float = HIGH_LOWER


@dataclass
class TrialAggregate:
    """Mean and 95% Student-t half-width over repeated trials.

    ``ci95_half_width`` is the raw t-interval half-width; use
    :meth:`interval` or :attr:`reported_half_width` for values clipped to the
    [0, 1] reporting range.
    """

    mean: float
    ci95_half_width: float
    n_trials: int
    values: list[float]
    degenerate: bool = False

    @property
    def reported_half_width(self) -> float:
        return min(self.ci95_half_width, max(self.mean, 1.0 - self.mean))

    def interval(self) -> tuple[float, float]:
        return (
            max(0.0, self.mean - self.ci95_half_width),
            min(1.0, self.mean + self.ci95_half_width),
        )

    def to_dict(self) -> dict[str, Any]:
        return {
            "mean": self.mean,
            "ci95_half_width": self.ci95_half_width,
            "n_trials": self.n_trials,
            "values": list(self.values),
            "degenerate": self.degenerate,
        }

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "TrialAggregate":
        return cls(
            mean=float(d["mean"]),
            ci95_half_width=float(d["ci95_half_width"]),
            n_trials=int(d["n_trials"]),
            values=[float(v) for v in d["values"]],
            degenerate=bool(d.get("degenerate", False)),
        )


def per_class_accuracy(
    predictions: Sequence[Hashable],
    ground_truth: Sequence[Hashable],
    class_set: Iterable[Hashable],
    dimension: RiskDimension | None = None,
) -> DimensionScore:
    """Per-class and sample-weighted overall accuracy.

    Classes in ``class_set`` with no samples are omitted from ``per_class``
    and listed in ``excluded_classes``. A prediction of ``None`` always
    counts as incorrect.
    """
    predictions = list(predictions)
    ground_truth = list(ground_truth)
    if len(predictions) != len(ground_truth):
        raise InputError(
            f"predictions ({len(predictions)}) and ground truth ({len(ground_truth)}) differ in length"
        )
    if not ground_truth:
        raise InputError("per_class_accuracy needs at least one sample")
    classes = sorted(set(class_set))
    known = set(classes)
    counts = {c: 0 for c in classes}
    correct = {c: 0 for c in classes}
    for p, t in zip(predictions, ground_truth):
        if t not in known:
            raise InputError(f"ground-truth label {t!r} not in class set")
        counts[t] += 1
        if p is not None and p == t:
            correct[t] += 1
    per_class = {c: correct[c] / counts[c] for c in classes if counts[c] > 0}
    sample_counts = {c: counts[c] for c in classes if counts[c] > 0}
    overall = sum(correct.values()) / len(ground_truth)
    return DimensionScore(
        dimension=dimension,
        overall=overall,
        per_class=per_class,
        sample_counts=sample_counts,
        excluded_classes=[c for c in classes if counts[c] == 0],
    )


def _scores_vector(scores: Mapping[RiskDimension | str, float] | Sequence[float]) -> list[float]:
    if isinstance(scores, Mapping):
        by_dim = {RiskDimension(k): float(v) for k, v in scores.items()}
        missing = [d.value for d in DIMENSIONS if d not in by_dim]
        if missing:
            raise InputError(f"scores missing dimensions: {missing}")
        vec = [by_dim[d] for d in DIMENSIONS]
    else:
        vec = [float(v) for v in scores]
        if len(vec) != len(DIMENSIONS):
            raise InputError(f"expected {len(DIMENSIONS)} scores, got {len(vec)}")
    for v in vec:
        if not (0.0 <= v <= 1.0):
            raise InputError(f"dimension score {v} outside [0, 1]")
    return vec


def wcal(
    weights: RiskWeights | Mapping[RiskDimension | str, float],
    scores: Mapping[RiskDimension | str, float] | Sequence[float],
) -> float:
    """Weighted composite accuracy loss, ``sum_k w_k * r_k``.

    Sequences are read in :data:`DIMENSIONS` order (quality, feature, label,
    stealing).
    """
    if not isinstance(weights, RiskWeights):
        weights = RiskWeights(weights)
    vec = _scores_vector(scores)
    total = sum(weights[d] * r for d, r in zip(DIMENSIONS, vec))
    return min(1.0, max(0.0, total))


def bin_risk(wcal_value: float) -> RiskBin:
    """Bin a composite score; the medium band is closed at both ends."""
    if not (0.0 <= wcal_value <= 1.0) or math.isnan(wcal_value):
        raise InputError(f"WCAL value {wcal_value} outside [0, 1]")
    if wcal_value < LOW_UPPER:
        return RiskBin(RiskLevel.LOW)
    if wcal_value > HIGH_LOWER:
        return RiskBin(RiskLevel.HIGH)
    return RiskBin(RiskLevel.MEDIUM)


def aggregate_trials(values: Sequence[float]) -> TrialAggregate:
    values = [float(v) for v in values]
    n = len(values)
    if n == 0:
        raise InputError("aggregate_trials needs at least one value")
    mean = math.fsum(values) / n
    if n == 1:
        return TrialAggregate(mean, 0.0, 1, values, degenerate=True)
    s = float(np.std(values, ddof=1))
    if s == 0.0 or all(v == values[0] for v in values):
        return TrialAggregate(mean, 0.0, n, values)
    half = float(stats.t.ppf(0.975, n - 1)) * s / math.sqrt(n)
    return TrialAggregate(mean, half, n, values)


@dataclass
class RiskReport:
    target_descriptor: str
    attack_descriptor: str
    dimension_scores: list[DimensionScore]
    weights: RiskWeights
    wcal: TrialAggregate
    bin: RiskBin
    per_trial_wcal: list[float]
    dimension_trials: dict[str, TrialAggregate] = field(default_factory=dict)
    class_names: dict[int, str] = field(default_factory=dict)
    metadata: dict[str, Any] = field(default_factory=dict)

    def score(self, dim: RiskDimension | str) -> DimensionScore:
        dim = RiskDimension(dim)
        for s in self.dimension_scores:
            if s.dimension is dim:
                return s
        raise KeyError(dim)
