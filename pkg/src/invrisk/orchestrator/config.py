"""Declarative JSON experiment configuration.

Unknown keys are rejected everywhere. Relative paths are resolved against
the directory holding the config file. Hyperparameter defaults mirror the
library dataclasses; every random seed in a run is derived from the single
master ``seed``.
"""

from __future__ import annotations

import itertools
import json
import tempfile
from pathlib import Path
from typing import Any, Literal, Optional

from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from invrisk._torch import config_digest
from invrisk.attacks import GMI_PRESETS, AttackSpec, FvConfig, GmiConfig
from invrisk.errors import ConfigError
from invrisk.generative import GanTrainConfig
from invrisk.modelzoo import FAMILIES, ArchSpec, TrainConfig
from invrisk.riskcore import DIMENSIONS, RiskWeights
from invrisk.vlm import DEFAULT_TEMPLATE


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid", validate_assignment=True)


class DatasetsConfig(_Strict):
    target_train: Path
    public: Path
    target_test: Optional[Path] = None
    evaluation_train: Optional[Path] = None
    channels: Literal[1, 3] = 3


class ArchConfig(_Strict):
    family: str = "vgg"
    width: int = ArchSpec.width
    depth: int = ArchSpec.depth
    patch: int = ArchSpec.patch

    @field_validator("family")
    @classmethod
    def _family(cls, v: str) -> str:
        if v not in FAMILIES:
            raise ValueError(f"unknown family {v!r}; expected one of {FAMILIES}")
        return v

    def build(self) -> ArchSpec:
        return ArchSpec(**self.model_dump())


class TrainHyper(_Strict):
    epochs: int = TrainConfig.epochs
    batch_size: int = TrainConfig.batch_size
    lr: float = TrainConfig.lr
    schedule: Literal["constant", "cosine"] = "constant"
    weight_decay: float = TrainConfig.weight_decay
    frozen_prefix_fraction: float = TrainConfig.frozen_prefix_fraction
    val_fraction: float = TrainConfig.val_fraction

    def build(self, seed: int) -> TrainConfig:
        return TrainConfig(seed=seed, **self.model_dump())


class TargetConfig(_Strict):
    arch: ArchConfig = Field(default_factory=ArchConfig)
    train: TrainHyper = Field(default_factory=TrainHyper)
    checkpoint: Optional[Path] = None


class EvaluationConfig(_Strict):
    arch: ArchConfig = Field(default_factory=lambda: ArchConfig(family="vit"))
    train: TrainHyper = Field(default_factory=TrainHyper)


class ProxyConfig(_Strict):
    train: TrainHyper = Field(default_factory=lambda: TrainHyper(epochs=5))


class GanHyper(_Strict):
    latent_dim: int = GanTrainConfig.latent_dim
    epochs: int = GanTrainConfig.epochs
    batch_size: int = GanTrainConfig.batch_size
    lr_generator: float = GanTrainConfig.lr_generator
    lr_discriminator: float = GanTrainConfig.lr_discriminator
    beta1: float = GanTrainConfig.beta1
    architecture_scale: int = GanTrainConfig.architecture_scale
    collapse_threshold: float = GanTrainConfig.collapse_threshold
    collapse_patience: int = GanTrainConfig.collapse_patience

    def build(self, seed: int) -> GanTrainConfig:
        return GanTrainConfig(seed=seed, **self.model_dump())


class GanConfig(_Strict):
    train: GanHyper = Field(default_factory=GanHyper)
    checkpoint: Optional[Path] = None


class FvHyper(_Strict):
    steps: int = FvConfig.steps
    step_size: float = FvConfig.step_size
    latent_l2_weight: float = FvConfig.latent_l2_weight
    jitter_pixels: int = FvConfig.jitter_pixels
    momentum: float = FvConfig.momentum


class GmiHyper(_Strict):
    iterations: int = GmiConfig.iterations
    score_threshold: float = GmiConfig.score_threshold
    prior_weight: float = GmiConfig.prior_weight
    step_size: float = GmiConfig.step_size
    momentum: float = GmiConfig.momentum
    restarts_per_image: int = GmiConfig.restarts_per_image
    latent_clip: Optional[float] = None


class AttackConfig(_Strict):
    kind: Literal["fv", "gmi"] = "fv"
    fv: FvHyper = Field(default_factory=FvHyper)
    gmi: GmiHyper = Field(default_factory=GmiHyper)
    gmi_preset: Optional[Literal["A", "B", "C"]] = None
    budget_factor: int = 10

    def build(self) -> AttackSpec:
        gmi = self.gmi.model_dump()
        if self.gmi_preset is not None:
            preset = GMI_PRESETS[self.gmi_preset]
            gmi.update(iterations=preset.iterations, score_threshold=preset.score_threshold)
        return AttackSpec(self.kind, FvConfig(**self.fv.model_dump()), GmiConfig(**gmi), self.budget_factor)

    @property
    def label(self) -> str:
        return self.kind if self.kind == "fv" else f"gmi{self.gmi_preset or ''}"


class BackendsConfig(_Strict):
    mode: Literal["stub", "http"] = "stub"
    caption_url: Optional[str] = None
    text_url: Optional[str] = None
    similarity_url: Optional[str] = None
    timeout: float = 30.0
    retries: int = 3
    prompt: Optional[str] = None

    @model_validator(mode="after")
    def _urls(self) -> "BackendsConfig":
        if self.mode == "http":
            missing = [k for k in ("caption_url", "text_url", "similarity_url") if not getattr(self, k)]
            if missing:
                raise ValueError(f"http backends need {missing}")
        return self


class LabelsConfig(_Strict):
    mode: Literal["derived", "benchmark", "decoy"] = "derived"
    vocabulary: list[str] = Field(default_factory=list)
    inject_class_names: bool = True
    include_common: bool = True
    decoys: list[str] = Field(default_factory=list)
    per_caption_top_k: int = 3
    support_threshold: float = 0.2
    majority_vote: bool = False
    synonyms: dict[str, str] = Field(default_factory=dict)
    template: str = DEFAULT_TEMPLATE

    @model_validator(mode="after")
    def _decoys(self) -> "LabelsConfig":
        if self.mode == "decoy" and not self.decoys:
            raise ValueError("decoy mode needs a nonempty 'decoys' list")
        if self.template.count("{}") != 1:
            raise ValueError("template must contain exactly one '{}'")
        return self


class NearMissConfig(_Strict):
    enabled: bool = False
    version: Literal[1, 2, 3] = 1
    neighbors: int = 3


class SweepConfig(_Strict):
    target_families: list[str] = Field(default_factory=list)
    n_per_class: list[int] = Field(default_factory=list)
    attacks: list[AttackConfig] = Field(default_factory=list)


class ExperimentConfig(_Strict):
    datasets: DatasetsConfig
    target: TargetConfig = Field(default_factory=TargetConfig)
    evaluation: EvaluationConfig = Field(default_factory=EvaluationConfig)
    proxy: ProxyConfig = Field(default_factory=ProxyConfig)
    gan: GanConfig = Field(default_factory=GanConfig)
    attack: AttackConfig = Field(default_factory=AttackConfig)
    n_per_class: int = Field(10, ge=1)
    backends: BackendsConfig = Field(default_factory=BackendsConfig)
    labels: LabelsConfig = Field(default_factory=LabelsConfig)
    nearmiss: NearMissConfig = Field(default_factory=NearMissConfig)
    weights: dict[str, float] = Field(default_factory=lambda: RiskWeights.equal().to_dict())
    n_trials: int = Field(30, ge=1)
    seed: int = 0
    retrain_per_trial: bool = False
    workers: int = Field(1, ge=1)
    output_root: Path = Path("runs")
    run_id: Optional[str] = None
    sweep: Optional[SweepConfig] = None

    @field_validator("weights")
    @classmethod
    def _weights(cls, v: dict[str, float]) -> dict[str, float]:
        unknown = set(v) - {d.value for d in DIMENSIONS}
        if unknown:
            raise ValueError(f"unknown risk dimensions {sorted(unknown)}")
        RiskWeights(v)
        return {d.value: float(v[d.value]) for d in DIMENSIONS}

    def risk_weights(self) -> RiskWeights:
        return RiskWeights(self.weights)

    def digest(self) -> str:
        """Content digest ignoring where outputs go."""
        body = self.model_dump(mode="json", exclude={"output_root", "run_id", "workers"})
        return config_digest(body)

    def resolved_run_id(self) -> str:
        return self.run_id or f"run-{self.digest()[:12]}"

    def to_json(self) -> str:
        return json.dumps(self.model_dump(mode="json"), indent=2, sort_keys=True) + "\n"


_PATH_FIELDS = (("datasets", "target_train"), ("datasets", "public"), ("datasets", "target_test"),
                ("datasets", "evaluation_train"), ("target", "checkpoint"), ("gan", "checkpoint"))


def _format_validation(exc: ValidationError) -> str:
    lines = []
    for err in exc.errors():
        loc = ".".join(str(p) for p in err["loc"]) or "<root>"
        lines.append(f"{loc}: {err['msg']}")
    return "; ".join(lines)


def parse_config(data: dict[str, Any], base_dir: Path | None = None, check_paths: bool = True
                 ) -> ExperimentConfig:
    """Validate a config mapping; relative paths are taken against ``base_dir``."""
    try:
        cfg = ExperimentConfig.model_validate(data)
    except ValidationError as exc:
        raise ConfigError(_format_validation(exc)) from None
    except ConfigError as exc:
        raise ConfigError(f"weights: {exc}") from None
    base = Path(base_dir) if base_dir is not None else Path.cwd()
    for section, key in _PATH_FIELDS:
        holder = getattr(cfg, section)
        p = getattr(holder, key)
        if p is None:
            continue
        p = p if p.is_absolute() else (base / p)
        p = p.resolve()
        if check_paths and not p.exists():
            raise ConfigError(f"{section}.{key}: path does not exist: {p}")
        setattr(holder, key, p)
    root = cfg.output_root if cfg.output_root.is_absolute() else base / cfg.output_root
    cfg.output_root = root.resolve()
    if check_paths:
        _check_writable(cfg.output_root)
    return cfg


def _check_writable(root: Path) -> None:
    try:
        root.mkdir(parents=True, exist_ok=True)
        with tempfile.NamedTemporaryFile(dir=root):
            pass
    except OSError as exc:
        raise ConfigError(f"output_root: not writable: {root} ({exc})") from None


def validate_config(path: str | Path) -> ExperimentConfig:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    try:
        data = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from None
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: top level must be a JSON object")
    return parse_config(data, path.parent)


def expand_sweep(cfg: ExperimentConfig) -> list[tuple[str, ExperimentConfig]]:
    """One independent config per sweep cell (a single cell when there is no sweep)."""
    if cfg.sweep is None:
        return [(cfg.resolved_run_id(), cfg)]
    sw = cfg.sweep
    families = sw.target_families or [cfg.target.arch.family]
    sizes = sw.n_per_class or [cfg.n_per_class]
    attacks = sw.attacks or [cfg.attack]
    cells = []
    base_id = cfg.run_id or f"sweep-{cfg.digest()[:12]}"
    for fam, n, attack in itertools.product(families, sizes, attacks):
        cell = cfg.model_copy(deep=True)
        cell.sweep = None
        cell.target.arch.family = fam
        if fam == cell.evaluation.arch.family:
            alt = next(f for f in ("vit", "vgg", "resnet", "mobile") if f != fam)
            cell.evaluation.arch.family = alt
        cell.n_per_class = n
        cell.attack = attack.model_copy(deep=True)
        cell_id = f"{base_id}/{fam}-n{n}-{attack.label}"
        cell.run_id = cell_id
        cells.append((cell_id, cell))
    return cells
