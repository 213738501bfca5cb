"""DCGAN image prior trained on public data.

The generator works in ``[-1, 1]`` internally (tanh output); handles convert
to ``[0, 1]`` at the boundary. The discriminator's realism score is its raw
logit, higher meaning more realistic.
"""

from __future__ import annotations

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

from invrisk._torch import config_digest, nhwc_to_tensor, params_digest, seed_everything, tensor_to_nhwc
from invrisk.data import LabeledDataset
from invrisk.errors import ConfigError, InputError, ModeCollapseError, StageError

logger = logging.getLogger(__name__)


@dataclass
class GanTrainConfig:
    latent_dim: int = 64
    epochs: int = 20
    batch_size: int = 32
    lr_generator: float = 2e-4
    lr_discriminator: float = 2e-4
    beta1: float = 0.5
    seed: int = 0
    architecture_scale: int = 1
    collapse_threshold: float = 1e-4
    collapse_patience: int = 3

    def __post_init__(self) -> None:
        positive = (self.latent_dim, self.epochs, self.batch_size, self.lr_generator,
                    self.lr_discriminator, self.architecture_scale, self.collapse_patience)
        if any(v <= 0 for v in positive):
            raise ConfigError(f"GAN hyperparameters must be positive: {self}")


def _n_upsamples(size: int) -> int:
    n = int(round(math.log2(size))) - 2
    if size < 8 or 2 ** (n + 2) != size:
        raise ConfigError(f"generator output size must be a power of two >= 8, got {size}")
    return n


class DCGenerator(nn.Module):
    def __init__(self, latent_dim: int, shape: tuple[int, int, int], base: int):
        super().__init__()
        h, w, c = shape
        if h != w:
            raise ConfigError("generator output must be square")
        n = _n_upsamples(h)
        ch = base * 2 ** (n - 1)
        layers: list[nn.Module] = [nn.ConvTranspose2d(latent_dim, ch, 4, 1, 0, bias=False),
                                   nn.BatchNorm2d(ch), nn.ReLU(True)]
        for _ in range(n - 1):
            layers += [nn.ConvTranspose2d(ch, ch // 2, 4, 2, 1, bias=False), nn.BatchNorm2d(ch // 2), nn.ReLU(True)]
            ch //= 2
        layers += [nn.ConvTranspose2d(ch, c, 4, 2, 1, bias=False), nn.Tanh()]
        self.net = nn.Sequential(*layers)
        self.latent_dim = latent_dim

    def forward(self, z: torch.Tensor) -> torch.Tensor:
        return self.net(z.view(z.shape[0], self.latent_dim, 1, 1))


class DCDiscriminator(nn.Module):
    def __init__(self, shape: tuple[int, int, int], base: int):
        super().__init__()
        h, _, c = shape
        n = _n_upsamples(h)
        layers: list[nn.Module] = [nn.Conv2d(c, base, 4, 2, 1, bias=False), nn.LeakyReLU(0.2, True)]
        ch = base
        for _ in range(n - 1):
            layers += [nn.Conv2d(ch, ch * 2, 4, 2, 1, bias=False), nn.BatchNorm2d(ch * 2), nn.LeakyReLU(0.2, True)]
            ch *= 2
        layers += [nn.Conv2d(ch, 1, 4, 1, 0, bias=False)]
        self.net = nn.Sequential(*layers)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.net(x).view(-1)


def _init_weights(m: nn.Module) -> None:
    if isinstance(m, (nn.Conv2d, nn.ConvTranspose2d)):
        nn.init.normal_(m.weight, 0.0, 0.02)
    elif isinstance(m, nn.BatchNorm2d):
        nn.init.normal_(m.weight, 1.0, 0.02)
        nn.init.zeros_(m.bias)


@dataclass
class GeneratorHandle:
    latent_dim: int
    output_shape: tuple[int, int, int]
    module: DCGenerator
    training_provenance: dict[str, Any] = field(default_factory=dict)
    training_log: list[dict[str, float]] = field(default_factory=list)

    def forward01(self, z: torch.Tensor) -> torch.Tensor:
        """Differentiable ``z -> image`` in ``[0, 1]``, NCHW."""
        self.module.eval()
        return (self.module(z) + 1.0) / 2.0

    def parameters_digest(self) -> str:
        return params_digest(self.module)


@dataclass
class DiscriminatorHandle:
    input_shape: tuple[int, int, int]
    module: DCDiscriminator

    def score_tensor(self, x01: torch.Tensor) -> torch.Tensor:
        self.module.eval()
        return self.module(x01 * 2.0 - 1.0)

    @torch.no_grad()
    def score(self, images: np.ndarray) -> np.ndarray:
        """Realism logits for NHWC images in ``[0, 1]``."""
        if len(images) == 0:
            return np.zeros(0)
        return self.score_tensor(nhwc_to_tensor(images)).double().numpy()

    def parameters_digest(self) -> str:
        return params_digest(self.module)


def sample(generator: GeneratorHandle, z: np.ndarray | Sequence[float]) -> np.ndarray:
    """Images for one latent ``(d,)`` -> ``(H, W, C)`` or a batch ``(k, d)`` -> ``(k, H, W, C)``."""
    z = np.asarray(z, dtype=np.float32)
    single = z.ndim == 1
    batch = z[None] if single else z
    if batch.ndim != 2 or batch.shape[1] != generator.latent_dim:
        raise InputError(f"latent must have length {generator.latent_dim}, got shape {z.shape}")
    with torch.no_grad():
        out = generator.forward01(torch.from_numpy(batch)).clamp(0.0, 1.0)
    images = tensor_to_nhwc(out)
    return images[0] if single else images


def collapse_detected(d_losses: Sequence[float], threshold: float = 1e-4, patience: int = 3) -> bool:
    if len(d_losses) < patience:
        return False
    return all(v < threshold for v in d_losses[-patience:])


def train_prior(public_data: LabeledDataset, config: GanTrainConfig,
                log_path: str | Path | None = None) -> tuple[GeneratorHandle, DiscriminatorHandle]:
    """Adversarial training with the non-saturating binary cross-entropy objective.

    Per-epoch mean losses are kept on ``generator.training_log`` and written
    to ``log_path`` when given.
    """
    if len(public_data) == 0:
        raise InputError("GAN prior needs a non-empty public dataset")
    shape = public_data.shape
    seed_everything(config.seed)
    base = 8 * config.architecture_scale
    gen = DCGenerator(config.latent_dim, shape, base)
    disc = DCDiscriminator(shape, base)
    gen.apply(_init_weights)
    disc.apply(_init_weights)
    opt_g = torch.optim.Adam(gen.parameters(), lr=config.lr_generator, betas=(config.beta1, 0.999))
    opt_d = torch.optim.Adam(disc.parameters(), lr=config.lr_discriminator, betas=(config.beta1, 0.999))
    real_all = nhwc_to_tensor(public_data.images) * 2.0 - 1.0
    rng = torch.Generator().manual_seed(config.seed)
    log: list[dict[str, float]] = []
    n = len(real_all)
    for epoch in range(config.epochs):
        gen.train()
        disc.train()
        perm = torch.randperm(n, generator=rng)
        g_total = d_total = 0.0
        batches = 0
        for start in range(0, n, config.batch_size):
            real = real_all[perm[start:start + config.batch_size]]
            if len(real) < 2:
                continue
            b = len(real)
            z = torch.randn(b, config.latent_dim, generator=rng)
            fake = gen(z)
            d_loss = (F.binary_cross_entropy_with_logits(disc(real), torch.ones(b))
                      + F.binary_cross_entropy_with_logits(disc(fake.detach()), torch.zeros(b)))
            opt_d.zero_grad()
            d_loss.backward()
            opt_d.step()
            g_loss = F.binary_cross_entropy_with_logits(disc(fake), torch.ones(b))
            opt_g.zero_grad()
            g_loss.backward()
            opt_g.step()
            if not (torch.isfinite(d_loss) and torch.isfinite(g_loss)):
                raise StageError(f"non-finite GAN loss at epoch {epoch}")
            g_total += g_loss.item()
            d_total += d_loss.item()
            batches += 1
        log.append({"epoch": epoch, "generator_loss": g_total / max(batches, 1),
                    "discriminator_loss": d_total / max(batches, 1)})
        logger.debug("gan epoch %d: %s", epoch, log[-1])
        if collapse_detected([r["discriminator_loss"] for r in log], config.collapse_threshold,
                             config.collapse_patience):
            raise ModeCollapseError(
                f"discriminator loss below {config.collapse_threshold} for "
                f"{config.collapse_patience} consecutive epochs (epoch {epoch})")
    gen.eval()
    disc.eval()
    provenance = {"dataset": public_data.name, "dataset_digest": public_data.digest(),
                  "config_digest": config_digest(asdict(config)), "seed": config.seed,
                  "architecture_scale": config.architecture_scale}
    g = GeneratorHandle(config.latent_dim, shape, gen, provenance, log)
    d = DiscriminatorHandle(shape, disc)
    if log_path is not None:
        Path(log_path).write_text(json.dumps(log, indent=2) + "\n")
    return g, d


def save_prior(generator: GeneratorHandle, discriminator: DiscriminatorHandle, directory: str | Path) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    torch.save(generator.module.state_dict(), directory / "generator.pt")
    torch.save(discriminator.module.state_dict(), directory / "discriminator.pt")
    meta = {
        "latent_dim": generator.latent_dim,
        "output_shape": list(generator.output_shape),
        "architecture_scale": generator.training_provenance.get("architecture_scale", 1),
        "provenance": generator.training_provenance,
        "generator_digest": generator.parameters_digest(),
        "discriminator_digest": discriminator.parameters_digest(),
        "training_log": generator.training_log,
    }
    (directory / "gan.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    return directory


def load_prior(directory: str | Path) -> tuple[GeneratorHandle, DiscriminatorHandle]:
    directory = Path(directory)
    meta = json.loads((directory / "gan.json").read_text())
    shape = tuple(meta["output_shape"])
    base = 8 * int(meta["architecture_scale"])
    gen = DCGenerator(meta["latent_dim"], shape, base)  # type: ignore[arg-type]
    disc = DCDiscriminator(shape, base)  # type: ignore[arg-type]
    gen.load_state_dict(torch.load(directory / "generator.pt", weights_only=True))
    disc.load_state_dict(torch.load(directory / "discriminator.pt", weights_only=True))
    gen.eval()
    disc.eval()
    g = GeneratorHandle(meta["latent_dim"], shape, gen, meta["provenance"], meta["training_log"])  # type: ignore[arg-type]
    d = DiscriminatorHandle(shape, disc)  # type: ignore[arg-type]
    if g.parameters_digest() != meta["generator_digest"] or d.parameters_digest() != meta["discriminator_digest"]:
        raise StageError(f"GAN checkpoint in {directory} does not match its recorded digests")
    return g, d
