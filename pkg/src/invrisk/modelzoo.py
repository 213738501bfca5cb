"""Classifier families, training, proxy fine-tuning and batched inference.

Four desk-scale families stand in for the usual VGG / MobileNet / ResNet /
ViT line-up: ``vgg`` (plain conv stacks), ``mobile`` (depthwise-separable),
``resnet`` (residual) and ``vit`` (patch embedding + transformer encoder).
Every network takes NCHW images in ``[0, 1]`` and applies its own resize and
normalisation, so attacks can differentiate straight through it.
"""

from __future__ import annotations

import copy
import enum
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from invrisk._torch import config_digest, nhwc_to_tensor, params_digest, seed_everything
from invrisk.data import LabeledDataset, verify_disjoint
from invrisk.errors import ConfigError, InputError, StageError
from invrisk.riskcore import per_class_accuracy

logger = logging.getLogger(__name__)

FAMILIES = ("vgg", "mobile", "resnet", "vit")


class ModelRole(str, enum.Enum):
    TARGET = "target"
    EVALUATION = "evaluation"
    PROXY = "proxy"


@dataclass(frozen=True)
class ArchSpec:
    family: str = "vgg"
    width: int = 16
    depth: int = 2
    patch: int = 4

    def __post_init__(self) -> None:
        if self.family not in FAMILIES:
            raise ConfigError(f"unknown architecture family {self.family!r}; expected one of {FAMILIES}")
        if self.width < 1 or self.depth < 1 or self.patch < 1:
            raise ConfigError("architecture width, depth and patch must be positive")

    @property
    def descriptor(self) -> str:
        extra = f"-p{self.patch}" if self.family == "vit" else ""
        return f"{self.family}-w{self.width}-d{self.depth}{extra}"


@dataclass
class TrainConfig:
    epochs: int = 10
    batch_size: int = 32
    lr: float = 1e-3
    schedule: str = "constant"
    weight_decay: float = 0.0
    seed: int = 0
    frozen_prefix_fraction: float = 0.5
    val_fraction: float = 0.2

    def __post_init__(self) -> None:
        if self.epochs < 0 or self.batch_size < 1 or self.lr <= 0 or self.weight_decay < 0:
            raise ConfigError(f"invalid training hyperparameters: {self}")
        if self.schedule not in ("constant", "cosine"):
            raise ConfigError(f"unknown lr schedule {self.schedule!r}")
        if not 0.0 <= self.frozen_prefix_fraction <= 1.0:
            raise ConfigError("frozen_prefix_fraction must lie in [0, 1]")
        if not 0.0 <= self.val_fraction < 1.0:
            raise ConfigError("val_fraction must lie in [0, 1)")


class Preprocess(nn.Module):
    def __init__(self, size: tuple[int, int], mean: Sequence[float], std: Sequence[float]):
        super().__init__()
        self.size = tuple(size)
        self.register_buffer("mean", torch.tensor(mean, dtype=torch.float32).view(1, -1, 1, 1))
        self.register_buffer("std", torch.tensor(std, dtype=torch.float32).view(1, -1, 1, 1))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if tuple(x.shape[-2:]) != self.size:
            x = F.interpolate(x, size=self.size, mode="bilinear", align_corners=False)
        return (x - self.mean) / self.std


def _conv_bn(c_in: int, c_out: int, stride: int = 1, groups: int = 1, k: int = 3) -> list[nn.Module]:
    return [nn.Conv2d(c_in, c_out, k, stride, k // 2, groups=groups, bias=False), nn.BatchNorm2d(c_out)]


class ResidualBlock(nn.Module):
    def __init__(self, c_in: int, c_out: int, stride: int):
        super().__init__()
        self.body = nn.Sequential(*_conv_bn(c_in, c_out, stride), nn.ReLU(), *_conv_bn(c_out, c_out))
        self.skip = (nn.Identity() if stride == 1 and c_in == c_out
                     else nn.Sequential(*_conv_bn(c_in, c_out, stride, k=1)))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return F.relu(self.body(x) + self.skip(x))


class PatchEmbed(nn.Module):
    def __init__(self, channels: int, dim: int, patch: int, size: tuple[int, int]):
        super().__init__()
        self.proj = nn.Conv2d(channels, dim, patch, patch)
        n = (size[0] // patch) * (size[1] // patch)
        self.pos = nn.Parameter(torch.zeros(1, n, dim))
        nn.init.normal_(self.pos, std=0.02)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.proj(x).flatten(2).transpose(1, 2) + self.pos


class TokenPool(nn.Module):
    def __init__(self, dim: int):
        super().__init__()
        self.norm = nn.LayerNorm(dim)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.norm(x.mean(dim=1))


class Classifier(nn.Module):
    """``preprocess -> blocks -> head``; ``blocks`` is the freezable feature stack."""

    def __init__(self, preprocess: Preprocess, blocks: Sequence[nn.Module], head: nn.Module):
        super().__init__()
        self.preprocess = preprocess
        self.blocks = nn.ModuleList(blocks)
        self.head = head

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        x = self.preprocess(x)
        for block in self.blocks:
            x = block(x)
        return self.head(x)


def build_network(arch: ArchSpec, num_classes: int, input_shape: tuple[int, int, int],
                  mean: Sequence[float] | None = None, std: Sequence[float] | None = None) -> Classifier:
    h, w, c = input_shape
    mean = list(mean) if mean is not None else [0.5] * c
    std = list(std) if std is not None else [0.25] * c
    pre = Preprocess((h, w), mean, std)
    width, depth = arch.width, arch.depth
    blocks: list[nn.Module] = []
    if arch.family == "vit":
        if h % arch.patch or w % arch.patch:
            raise ConfigError(f"patch size {arch.patch} does not tile input {h}x{w}")
        dim = width * 4
        blocks.append(PatchEmbed(c, dim, arch.patch, (h, w)))
        for _ in range(depth):
            blocks.append(nn.TransformerEncoderLayer(dim, nhead=4 if dim % 4 == 0 else 1,
                                                     dim_feedforward=dim * 2, dropout=0.0,
                                                     batch_first=True, norm_first=True))
        head = nn.Sequential(TokenPool(dim), nn.Linear(dim, num_classes))
        return Classifier(pre, blocks, head)
    c_in = c
    for i in range(depth):
        c_out = width * 2 ** i
        if arch.family == "vgg":
            blocks.append(nn.Sequential(*_conv_bn(c_in, c_out), nn.ReLU(),
                                        *_conv_bn(c_out, c_out), nn.ReLU(), nn.MaxPool2d(2)))
        elif arch.family == "mobile":
            layers: list[nn.Module] = []
            if i == 0:
                layers += [*_conv_bn(c_in, c_out), nn.ReLU6()]
                c_in = c_out
            layers += [*_conv_bn(c_in, c_in, stride=2, groups=c_in), nn.ReLU6(),
                       *_conv_bn(c_in, c_out, k=1), nn.ReLU6()]
            blocks.append(nn.Sequential(*layers))
        else:
            if i == 0:
                blocks.append(nn.Sequential(*_conv_bn(c_in, c_out), nn.ReLU()))
                c_in = c_out
            blocks.append(ResidualBlock(c_in, c_out, stride=2))
        c_in = c_out
    head = nn.Sequential(nn.AdaptiveAvgPool2d(1), nn.Flatten(), nn.Linear(c_in, num_classes))
    return Classifier(pre, blocks, head)


@dataclass
class ModelHandle:
    role: ModelRole
    arch: ArchSpec
    class_names: dict[int, str]
    input_shape: tuple[int, int, int]
    module: Classifier
    train_accuracy: float
    test_accuracy: float | None
    provenance: dict[str, Any] = field(default_factory=dict)
    training_log: list[dict[str, float]] = field(default_factory=list)

    @property
    def class_set(self) -> list[int]:
        return sorted(self.class_names)

    @property
    def num_classes(self) -> int:
        return len(self.class_names)

    @property
    def descriptor(self) -> str:
        return self.arch.descriptor

    def parameters_digest(self) -> str:
        return params_digest(self.module)

    def sidecar(self) -> dict[str, Any]:
        return {
            "role": self.role.value,
            "architecture": asdict(self.arch),
            "descriptor": self.descriptor,
            "class_names": {str(k): v for k, v in sorted(self.class_names.items())},
            "input_shape": list(self.input_shape),
            "mean": self.module.preprocess.mean.flatten().tolist(),
            "std": self.module.preprocess.std.flatten().tolist(),
            "train_accuracy": self.train_accuracy,
            "test_accuracy": self.test_accuracy,
            "provenance": self.provenance,
            "parameters_digest": self.parameters_digest(),
        }


def _channel_stats(images: np.ndarray) -> tuple[list[float], list[float]]:
    mean = images.reshape(-1, images.shape[-1]).mean(axis=0)
    std = np.maximum(images.reshape(-1, images.shape[-1]).std(axis=0), 1e-3)
    return mean.astype(float).tolist(), std.astype(float).tolist()


def _inputs(images: np.ndarray | Sequence[np.ndarray], channels: int) -> torch.Tensor:
    arrs = [np.asarray(im, dtype=np.float32) for im in images]
    bad = []
    for i, a in enumerate(arrs):
        if a.ndim == 2:
            a = arrs[i] = a[..., None]
        if a.shape[-1] == 1 and channels == 3:
            arrs[i] = np.repeat(a, 3, axis=-1)
        elif a.shape[-1] != channels:
            bad.append(i)
    if bad:
        raise InputError(f"images {bad[:5]} have a channel count incompatible with the model ({channels})")
    shapes = {a.shape[:2] for a in arrs}
    if len(shapes) > 1:
        # mixed sizes: resize individually through the network's own preprocess
        return [nhwc_to_tensor(a[None]) for a in arrs]  # type: ignore[return-value]
    return nhwc_to_tensor(np.stack(arrs))


@torch.no_grad()
def infer(model: ModelHandle, images: np.ndarray | Sequence[np.ndarray], batch_size: int = 256
          ) -> tuple[np.ndarray, np.ndarray]:
    """Predicted class ids and softmax confidences for a batch of NHWC images."""
    k = model.num_classes
    if len(images) == 0:
        return np.zeros(0, dtype=np.int64), np.zeros((0, k))
    x = _inputs(images, model.input_shape[2])
    model.module.eval()
    chunks = x if isinstance(x, list) else torch.split(x, batch_size)
    logits = torch.cat([model.module(c) for c in chunks]).double()
    probs = torch.softmax(logits, dim=1).numpy()
    return probs.argmax(axis=1).astype(np.int64), probs


def accuracy(model: ModelHandle, dataset: LabeledDataset) -> float:
    if len(dataset) == 0:
        return float("nan")
    preds, _ = infer(model, dataset.images)
    return per_class_accuracy(preds.tolist(), dataset.labels.tolist(), model.class_set).overall


def _fit(module: Classifier, x: torch.Tensor, y: torch.Tensor, config: TrainConfig,
         trainable: list[nn.Parameter], frozen_blocks: int = 0) -> list[dict[str, float]]:
    log: list[dict[str, float]] = []
    if config.epochs == 0 or len(y) == 0:
        return log
    opt = torch.optim.Adam(trainable, lr=config.lr, weight_decay=config.weight_decay)
    sched = (torch.optim.lr_scheduler.CosineAnnealingLR(opt, T_max=config.epochs)
             if config.schedule == "cosine" else None)
    gen = torch.Generator().manual_seed(config.seed)
    n = len(y)
    for epoch in range(config.epochs):
        module.train()
        for i, block in enumerate(module.blocks):
            if i < frozen_blocks:
                block.eval()
        perm = torch.randperm(n, generator=gen)
        total, seen = 0.0, 0
        for start in range(0, n, config.batch_size):
            idx = perm[start:start + config.batch_size]
            if len(idx) == 1 and n > 1:
                continue  # batch norm cannot train on a single sample
            loss = F.cross_entropy(module(x[idx]), y[idx])
            if not torch.isfinite(loss):
                raise StageError(f"non-finite training loss at epoch {epoch}, batch starting {start}")
            opt.zero_grad()
            loss.backward()
            opt.step()
            total += loss.item() * len(idx)
            seen += len(idx)
        if sched is not None:
            sched.step()
        log.append({"epoch": epoch, "loss": total / max(seen, 1)})
        logger.debug("epoch %d loss %.4f", epoch, log[-1]["loss"])
    module.eval()
    return log


def train_classifier(dataset: LabeledDataset, arch: ArchSpec, config: TrainConfig,
                     role: ModelRole | str = ModelRole.TARGET, test_set: LabeledDataset | None = None,
                     paired_target: ModelHandle | None = None,
                     target_train: LabeledDataset | None = None,
                     log_path: str | Path | None = None) -> ModelHandle:
    """Train a classifier from scratch.

    Without ``test_set`` a seeded ``val_fraction`` hold-out is split off and
    ``test_accuracy`` is measured there. Evaluation-role models must be given
    the paired target and its training set; a shared architecture family or
    any shared item is a :class:`ConfigError`.
    """
    role = ModelRole(role)
    if role is ModelRole.EVALUATION:
        if paired_target is None or target_train is None:
            raise ConfigError("evaluation models need the paired target model and its training set")
        if arch.family == paired_target.arch.family:
            raise ConfigError(f"evaluation model must not share the target's family ({arch.family})")
        overlap = verify_disjoint(dataset, target_train).overlap
        if overlap:
            raise ConfigError(f"evaluation training data shares {len(overlap)} items with target_train")
    if len(dataset) == 0:
        raise ConfigError("cannot train on an empty dataset")
    unknown = set(dataset.labels.tolist()) - set(dataset.class_names)
    if unknown:
        raise ConfigError(f"labels {sorted(unknown)} outside the dataset class set")
    if test_set is not None and test_set.class_names != dataset.class_names:
        raise ConfigError("test set class names differ from training class names")

    train_part, held_out = dataset, test_set
    if test_set is None and config.val_fraction > 0:
        rng = np.random.default_rng(config.seed)
        perm = rng.permutation(len(dataset))
        n_val = int(round(config.val_fraction * len(dataset)))
        held_out = dataset.subset(sorted(perm[:n_val].tolist()), name=f"{dataset.name}-val")
        train_part = dataset.subset(sorted(perm[n_val:].tolist()))

    seed_everything(config.seed)
    mean, std = _channel_stats(train_part.images)
    module = build_network(arch, len(dataset.class_names), dataset.shape, mean, std)
    x = nhwc_to_tensor(train_part.images)
    y = torch.from_numpy(train_part.labels)
    log = _fit(module, x, y, config, list(module.parameters()))

    handle = ModelHandle(
        role=role, arch=arch, class_names=dict(dataset.class_names), input_shape=dataset.shape,
        module=module, train_accuracy=0.0, test_accuracy=None, training_log=log,
        provenance={
            "train_digest": train_part.digest(),
            "test_digest": None if held_out is None else held_out.digest(),
            "config_digest": config_digest(asdict(config)),
            "seed": config.seed,
            "train_size": len(train_part),
        },
    )
    handle.train_accuracy = accuracy(handle, train_part)
    handle.test_accuracy = None if held_out is None or len(held_out) == 0 else accuracy(handle, held_out)
    if log_path is not None:
        Path(log_path).write_text(json.dumps(log, indent=2) + "\n")
    return handle


def fine_tune(base: ModelHandle, dataset: LabeledDataset, config: TrainConfig,
              held_out: LabeledDataset | None = None) -> ModelHandle:
    """Derive a proxy model from an evaluation model.

    The first ``floor(frozen_prefix_fraction * len(blocks))`` feature blocks
    are frozen (kept in eval mode, so batch-norm statistics do not move
    either); later blocks and the head train on ``dataset``.
    """
    if base.role is not ModelRole.EVALUATION:
        raise ConfigError(f"fine_tune expects an evaluation-role base model, got {base.role.value}")
    if len(dataset) == 0:
        raise ConfigError("cannot fine-tune on an empty dataset")
    extra = set(dataset.labels.tolist()) - set(base.class_names)
    if extra:
        raise ConfigError(f"fine-tuning labels {sorted(extra)} not in the base model's class set")
    seed_everything(config.seed)
    module = copy.deepcopy(base.module)
    n_frozen = int(math.floor(config.frozen_prefix_fraction * len(module.blocks) + 1e-12))
    for i, block in enumerate(module.blocks):
        block.requires_grad_(i >= n_frozen)
    trainable = [p for p in module.parameters() if p.requires_grad]
    x = nhwc_to_tensor(dataset.images)
    y = torch.from_numpy(dataset.labels)
    log = _fit(module, x, y, config, trainable, frozen_blocks=n_frozen)
    module.requires_grad_(True)
    handle = ModelHandle(
        role=ModelRole.PROXY, arch=base.arch, class_names=dict(base.class_names),
        input_shape=base.input_shape, module=module, train_accuracy=0.0, test_accuracy=None,
        training_log=log,
        provenance={
            "base_parameters_digest": base.parameters_digest(),
            "train_digest": dataset.digest(),
            "test_digest": None if held_out is None else held_out.digest(),
            "config_digest": config_digest(asdict(config)),
            "seed": config.seed,
            "frozen_blocks": n_frozen,
        },
    )
    handle.train_accuracy = accuracy(handle, dataset)
    if held_out is not None and len(held_out):
        handle.test_accuracy = accuracy(handle, held_out)
    return handle


def save_model(handle: ModelHandle, directory: str | Path) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    torch.save(handle.module.state_dict(), directory / "model.pt")
    meta = handle.sidecar()
    meta["training_log"] = handle.training_log
    (directory / "model.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    return directory


def load_model(directory: str | Path) -> ModelHandle:
    directory = Path(directory)
    meta = json.loads((directory / "model.json").read_text())
    arch = ArchSpec(**meta["architecture"])
    class_names = {int(k): v for k, v in meta["class_names"].items()}
    shape = tuple(meta["input_shape"])
    module = build_network(arch, len(class_names), shape, meta["mean"], meta["std"])  # type: ignore[arg-type]
    module.load_state_dict(torch.load(directory / "model.pt", weights_only=True))
    module.eval()
    handle = ModelHandle(
        role=ModelRole(meta["role"]), arch=arch, class_names=class_names, input_shape=shape,  # type: ignore[arg-type]
        module=module, train_accuracy=meta["train_accuracy"], test_accuracy=meta["test_accuracy"],
        provenance=meta["provenance"], training_log=meta.get("training_log", []),
    )
    if handle.parameters_digest() != meta["parameters_digest"]:
        raise StageError(f"checkpoint in {directory} does not match its recorded digest")
    return handle
