"""Model-inversion attacks through a generative prior.

Two families are provided:

``fv``
    Feature visualisation: gradient ascent on the latent ``z`` to maximise
    the target's pre-softmax logit for a class, minus an L2 penalty on ``z``,
    with random pixel jitter at every step for transformation robustness.

``gmi``
    Generative model inversion: minimise ``-D(G(z)) - lambda * log p(c | G(z))``
    over ``z``, i.e. a realism (prior) term from the discriminator and an
    identity term from the target, keeping the best of several restarts.

Every candidate carries its own latent seed and jitter stream, so a
candidate's result does not depend on how candidates are batched.
Reconstructed images are snapped to the uint8 grid before they are scored,
which makes PNG persistence lossless and acceptance re-checkable.
"""

from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Iterable, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from sklearn.linear_model import LogisticRegression

from invrisk._torch import tensor_to_nhwc
from invrisk.data import LabeledDataset, SplitTag, decode_image, image_digest, png_bytes, quantize
from invrisk.errors import AttackError, ConfigError, InputError
from invrisk.generative import DiscriminatorHandle, GeneratorHandle, sample
from invrisk.modelzoo import ModelHandle, infer

logger = logging.getLogger(__name__)

MAX_NONFINITE_RESTARTS = 3


@dataclass
class FvConfig:
    steps: int = 60
    step_size: float = 0.05
    latent_l2_weight: float = 1e-3
    jitter_pixels: int = 2
    momentum: float = 0.0
    seed: int = 0

    def __post_init__(self) -> None:
        if self.steps < 0 or self.step_size <= 0 or self.latent_l2_weight < 0 or self.jitter_pixels < 0:
            raise ConfigError(f"invalid FV configuration: {self}")
        if not 0.0 <= self.momentum < 1.0:
            raise ConfigError("momentum must lie in [0, 1)")


@dataclass
class GmiConfig:
    iterations: int = 200
    score_threshold: float = 0.7
    prior_weight: float = 1.0
    step_size: float = 0.02
    momentum: float = 0.9
    restarts_per_image: int = 1
    latent_clip: float | None = None
    seed: int = 0

    def __post_init__(self) -> None:
        if self.iterations < 1 or self.restarts_per_image < 1 or self.step_size <= 0 or self.prior_weight < 0:
            raise ConfigError(f"invalid GMI configuration: {self}")
        if not 0.0 <= self.score_threshold <= 1.0:
            raise ConfigError("GMI score threshold must lie in [0, 1]")
        if not 0.0 <= self.momentum < 1.0:
            raise ConfigError("momentum must lie in [0, 1)")


# Iteration counts and selectivity thresholds of the three published GMI runs.
GMI_PRESETS: dict[str, GmiConfig] = {
    "A": GmiConfig(iterations=5000, score_threshold=0.7),
    "B": GmiConfig(iterations=7500, score_threshold=0.8),
    "C": GmiConfig(iterations=10000, score_threshold=0.8),
}


@dataclass
class AttackSpec:
    kind: str = "fv"
    fv: FvConfig = field(default_factory=FvConfig)
    gmi: GmiConfig = field(default_factory=GmiConfig)
    budget_factor: int = 10

    def __post_init__(self) -> None:
        if self.kind not in ("fv", "gmi"):
            raise ConfigError(f"unknown attack kind {self.kind!r}")
        if self.budget_factor < 1:
            raise ConfigError("attempt budget factor must be >= 1")

    @property
    def descriptor(self) -> str:
        if self.kind == "fv":
            c = self.fv
            return f"fv(steps={c.steps},step={c.step_size},l2={c.latent_l2_weight},jitter={c.jitter_pixels})"
        c = self.gmi
        return (f"gmi(iters={c.iterations},threshold={c.score_threshold},lambda={c.prior_weight},"
                f"restarts={c.restarts_per_image})")


@dataclass(frozen=True)
class RealismCalibration:
    """Logistic squashing of discriminator logits onto ``[0, 1]``."""

    slope: float
    intercept: float

    def squash(self, realism: float | np.ndarray) -> float | np.ndarray:
        x = self.slope * np.asarray(realism, dtype=np.float64) + self.intercept
        out = 1.0 / (1.0 + np.exp(-np.clip(x, -500, 500)))
        return float(out) if np.ndim(out) == 0 else out

    def to_dict(self) -> dict[str, float]:
        return {"slope": self.slope, "intercept": self.intercept}


def fit_realism_calibration(discriminator: DiscriminatorHandle, generator: GeneratorHandle,
                            public_data: LabeledDataset, seed: int = 0) -> RealismCalibration:
    """Fit ``P(real | D-score)`` on public images (label 1) against prior samples (label 0)."""
    rng = np.random.default_rng(seed)
    fakes = sample(generator, rng.standard_normal((len(public_data), generator.latent_dim)))
    real_scores = discriminator.score(public_data.images)
    fake_scores = discriminator.score(quantize(fakes))
    x = np.concatenate([real_scores, fake_scores])[:, None]
    y = np.concatenate([np.ones(len(real_scores)), np.zeros(len(fake_scores))])
    model = LogisticRegression(C=1e4).fit(x, y)
    slope, intercept = float(model.coef_[0, 0]), float(model.intercept_[0])
    if not slope > 0:
        raise ConfigError("discriminator does not score public images above generated ones; "
                          "cannot calibrate realism")
    return RealismCalibration(slope, intercept)


def combined_score(target_confidence: float, realism: float,
                   calibration: RealismCalibration | None) -> float:
    """Equal mix of target confidence and calibrated realism."""
    if calibration is None:
        raise ConfigError("combined score needs a realism calibration")
    return 0.5 * float(target_confidence) + 0.5 * float(calibration.squash(realism))


@dataclass
class Candidate:
    image: np.ndarray
    class_id: int
    attack_name: str
    target_confidence: float
    predicted_class: int
    latent_seed: int
    combined_score: float | None = None
    realism: float | None = None
    objective_initial: float | None = None
    objective_final: float | None = None
    objective_trace: list[float] = field(default_factory=list)
    nonfinite_restarts: int = 0


def accept(candidate: Candidate, target: ModelHandle | None, kind: str,
           config: FvConfig | GmiConfig | None = None) -> bool:
    """Correct target classification, plus ``combined_score >= threshold`` for GMI.

    The target's prediction is recomputed on the candidate image unless
    ``target`` is None, in which case ``candidate.predicted_class`` is used.
    """
    if target is not None:
        preds, _ = infer(target, candidate.image[None])
        predicted = int(preds[0])
    else:
        predicted = candidate.predicted_class
    if predicted != candidate.class_id:
        return False
    if kind == "fv":
        return True
    if not isinstance(config, GmiConfig):
        raise ConfigError("GMI acceptance needs a GmiConfig")
    return candidate.combined_score is not None and candidate.combined_score >= config.score_threshold


def derive_seed(*parts: int) -> int:
    return int(np.random.SeedSequence([int(p) for p in parts]).generate_state(1)[0])


def _initial_latents(seeds: Sequence[int], dim: int) -> torch.Tensor:
    return torch.from_numpy(np.stack([
        np.random.default_rng(s).standard_normal(dim).astype(np.float32) for s in seeds]))


def _jitter(x: torch.Tensor, shifts: np.ndarray) -> torch.Tensor:
    if not shifts.any():
        return x
    return torch.stack([torch.roll(x[i], (int(dy), int(dx)), dims=(1, 2)) for i, (dy, dx) in enumerate(shifts)])


def _finalize(target: ModelHandle, images01: torch.Tensor, class_id: int
              ) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    images = quantize(tensor_to_nhwc(images01.clamp(0.0, 1.0)))
    preds, probs = infer(target, images)
    return images, preds, probs[:, class_id]


def _fv_batch(target: ModelHandle, generator: GeneratorHandle, class_id: int, config: FvConfig,
              seeds: Sequence[int]) -> list[Candidate]:
    net = target.module.eval()
    z = _initial_latents(seeds, generator.latent_dim).requires_grad_(True)
    jitter_rngs = [np.random.default_rng(derive_seed(s, 1)) for s in seeds]
    opt = torch.optim.SGD([z], lr=config.step_size, momentum=config.momentum)
    w = config.latent_l2_weight

    def clean_objective(latent: torch.Tensor) -> torch.Tensor:
        with torch.no_grad():
            return net(generator.forward01(latent))[:, class_id] - w * latent.pow(2).sum(dim=1)

    initial = clean_objective(z).double().numpy()
    traces: list[list[float]] = [[] for _ in seeds]
    j = config.jitter_pixels
    for _ in range(config.steps):
        shifts = np.stack([r.integers(-j, j + 1, size=2) for r in jitter_rngs]) if j else np.zeros((len(seeds), 2))
        x = _jitter(generator.forward01(z), shifts)
        obj = net(x)[:, class_id] - w * z.pow(2).sum(dim=1)
        opt.zero_grad()
        (-obj.sum()).backward()
        opt.step()
        for t, v in zip(traces, obj.detach().double().tolist()):
            t.append(v)
    final = clean_objective(z.detach()).double().numpy()
    with torch.no_grad():
        images, preds, conf = _finalize(target, generator.forward01(z.detach()), class_id)
    return [
        Candidate(image=images[i], class_id=class_id, attack_name="fv", target_confidence=float(conf[i]),
                  predicted_class=int(preds[i]), latent_seed=int(seeds[i]),
                  objective_initial=float(initial[i]), objective_final=float(final[i]),
                  objective_trace=traces[i])
        for i in range(len(seeds))
    ]


def _gmi_batch(target: ModelHandle, generator: GeneratorHandle, discriminator: DiscriminatorHandle,
               class_id: int, config: GmiConfig, seeds: Sequence[int],
               calibration: RealismCalibration) -> list[Candidate]:
    net = target.module.eval()
    z = _initial_latents(seeds, generator.latent_dim).requires_grad_(True)
    opt = torch.optim.SGD([z], lr=config.step_size, momentum=config.momentum)
    lam = config.prior_weight
    traces: list[list[float]] = [[] for _ in seeds]
    initial = None
    for step in range(config.iterations):
        x = generator.forward01(z)
        prior_loss = -discriminator.score_tensor(x)
        identity_loss = -F.log_softmax(net(x), dim=1)[:, class_id]
        loss = prior_loss + lam * identity_loss
        if step == 0:
            initial = loss.detach().double().numpy()
        opt.zero_grad()
        loss.sum().backward()
        opt.step()
        if config.latent_clip is not None:
            with torch.no_grad():
                z.clamp_(-config.latent_clip, config.latent_clip)
        for t, v in zip(traces, loss.detach().double().tolist()):
            t.append(v)
    with torch.no_grad():
        x = generator.forward01(z.detach())
        final = (-discriminator.score_tensor(x) - lam * F.log_softmax(net(x), dim=1)[:, class_id]).double().numpy()
        images, preds, conf = _finalize(target, x, class_id)
    realism = discriminator.score(images)
    return [
        Candidate(image=images[i], class_id=class_id, attack_name="gmi", target_confidence=float(conf[i]),
                  predicted_class=int(preds[i]), latent_seed=int(seeds[i]),
                  combined_score=combined_score(conf[i], realism[i], calibration), realism=float(realism[i]),
                  objective_initial=None if initial is None else float(initial[i]),
                  objective_final=float(final[i]), objective_trace=traces[i])
        for i in range(len(seeds))
    ]


def _is_finite(c: Candidate) -> bool:
    vals = [c.objective_final, c.target_confidence, c.combined_score, c.realism]
    return all(v is None or math.isfinite(v) for v in vals) and bool(np.all(np.isfinite(c.image)))


def _with_restarts(run, seeds: Sequence[int]) -> list[Candidate]:
    """Re-run non-finite candidates from fresh seeds, up to three times each."""
    out = run(list(seeds))
    for i, cand in enumerate(out):
        restarts = 0
        while not _is_finite(cand):
            if restarts == MAX_NONFINITE_RESTARTS:
                raise AttackError(f"non-finite objective for latent seed {seeds[i]} after "
                                  f"{MAX_NONFINITE_RESTARTS} restarts")
            restarts += 1
            logger.warning("non-finite objective for seed %d; restart %d", seeds[i], restarts)
            cand = run([derive_seed(seeds[i], 1000 + restarts)])[0]
            cand.nonfinite_restarts = restarts
        out[i] = cand
    return out


def fv_invert_batch(target: ModelHandle, generator: GeneratorHandle, class_id: int, config: FvConfig,
                    seeds: Sequence[int]) -> list[Candidate]:
    if not 0 <= class_id < target.num_classes:
        raise InputError(f"class id {class_id} outside the target's classes")
    return _with_restarts(lambda s: _fv_batch(target, generator, class_id, config, s), seeds)


def fv_invert(target: ModelHandle, generator: GeneratorHandle, class_id: int, config: FvConfig,
              latent_seed: int | None = None) -> Candidate:
    seed = config.seed if latent_seed is None else latent_seed
    return fv_invert_batch(target, generator, class_id, config, [seed])[0]


def gmi_invert_batch(target: ModelHandle, generator: GeneratorHandle, discriminator: DiscriminatorHandle,
                     class_id: int, config: GmiConfig, seeds: Sequence[int],
                     calibration: RealismCalibration | None) -> list[Candidate]:
    """Best-of-``restarts_per_image`` GMI candidates, one per seed, ranked by combined score."""
    if calibration is None:
        raise ConfigError("GMI needs a realism calibration for its combined score")
    if not 0 <= class_id < target.num_classes:
        raise InputError(f"class id {class_id} outside the target's classes")
    best: list[Candidate] | None = None
    for r in range(config.restarts_per_image):
        rseeds = list(seeds) if r == 0 else [derive_seed(s, 2000 + r) for s in seeds]
        cands = _with_restarts(
            lambda s: _gmi_batch(target, generator, discriminator, class_id, config, s, calibration), rseeds)
        if best is None:
            best = cands
        else:
            best = [c if c.combined_score > b.combined_score else b for b, c in zip(best, cands)]
    assert best is not None
    return best


def gmi_invert(target: ModelHandle, generator: GeneratorHandle, discriminator: DiscriminatorHandle,
               class_id: int, config: GmiConfig, calibration: RealismCalibration | None,
               latent_seed: int | None = None) -> Candidate:
    seed = config.seed if latent_seed is None else latent_seed
    return gmi_invert_batch(target, generator, discriminator, class_id, config, [seed], calibration)[0]


@dataclass
class ReconstructionItem:
    image: np.ndarray
    class_id: int
    attack_name: str
    final_combined_score: float | None
    target_confidence: float
    accepted: bool
    latent_seed: int
    predicted_class: int
    realism: float | None = None
    objective_initial: float | None = None
    objective_final: float | None = None
    objective_trace: list[float] = field(default_factory=list)

    @property
    def digest(self) -> str:
        return image_digest(self.image)


@dataclass
class ReconstructionSet:
    items: list[ReconstructionItem]
    requested_per_class: int
    attack_wall_clock_seconds: float
    class_names: dict[int, str]
    attack_name: str
    attempts: dict[int, int] = field(default_factory=dict)
    metadata: dict[str, Any] = field(default_factory=dict)

    def accepted(self) -> list[ReconstructionItem]:
        return [it for it in self.items if it.accepted]

    def accepted_counts(self) -> dict[int, int]:
        counts = {c: 0 for c in sorted(self.class_names)}
        for it in self.accepted():
            counts[it.class_id] += 1
        return counts

    @property
    def shortfall(self) -> dict[int, int]:
        return {c: self.requested_per_class - n for c, n in self.accepted_counts().items()
                if n < self.requested_per_class}

    @property
    def failed_classes(self) -> list[int]:
        return [c for c, n in self.accepted_counts().items() if n == 0]

    def accepted_dataset(self, name: str = "reconstructed") -> LabeledDataset:
        """Accepted items as a dataset; byte-identical duplicates keep their first occurrence."""
        seen: set[str] = set()
        images, labels = [], []
        for it in self.accepted():
            d = it.digest
            if d in seen:
                logger.warning("dropping duplicate reconstruction %s", d[:12])
                continue
            seen.add(d)
            images.append(it.image)
            labels.append(it.class_id)
        if not images:
            return LabeledDataset(name, np.zeros((0, 1, 1, 1), np.float32), np.zeros(0, np.int64),
                                  dict(self.class_names), SplitTag.RECONSTRUCTED, [])
        return LabeledDataset.from_arrays(name, np.stack(images), labels, self.class_names, SplitTag.RECONSTRUCTED)


def _invert_wave(target, generator, discriminator, spec: AttackSpec, class_id: int, seeds, calibration):
    if spec.kind == "fv":
        return fv_invert_batch(target, generator, class_id, spec.fv, seeds)
    if discriminator is None:
        raise ConfigError("GMI needs the prior's discriminator")
    return gmi_invert_batch(target, generator, discriminator, class_id, spec.gmi, seeds, calibration)


def generate_reconstructions(target: ModelHandle, generator: GeneratorHandle, spec: AttackSpec,
                             n_per_class: int, class_set: Iterable[int] | None = None,
                             discriminator: DiscriminatorHandle | None = None,
                             calibration: RealismCalibration | None = None, seed: int = 0,
                             ) -> ReconstructionSet:
    """Invert each class until ``n_per_class`` candidates are accepted.

    Attempts per class are capped at ``spec.budget_factor * n_per_class``.
    Candidates are run in waves; candidates computed after the class quota
    is met within a wave are dropped (but counted as attempts). Classes with
    no accepted candidate are listed in ``metadata["inversion_failed"]``.
    """
    if n_per_class < 1:
        raise ConfigError("n_per_class must be >= 1")
    classes = sorted(target.class_set if class_set is None else set(class_set))
    config = spec.fv if spec.kind == "fv" else spec.gmi
    budget = spec.budget_factor * n_per_class
    started = time.perf_counter()
    items: list[ReconstructionItem] = []
    attempts: dict[int, int] = {}
    for c in classes:
        accepted = used = 0
        first = True
        while accepted < n_per_class and used < budget:
            remaining = n_per_class - accepted
            wave = remaining if first else max(2 * remaining, 4)
            wave = min(wave, budget - used)
            first = False
            seeds = [derive_seed(seed, c, used + k) for k in range(wave)]
            cands = _invert_wave(target, generator, discriminator, spec, c, seeds, calibration)
            used += wave
            for cand in cands:
                if accepted == n_per_class:
                    break
                ok = accept(cand, None, spec.kind, config)
                accepted += ok
                items.append(ReconstructionItem(
                    image=cand.image, class_id=c, attack_name=cand.attack_name,
                    final_combined_score=cand.combined_score, target_confidence=cand.target_confidence,
                    accepted=bool(ok), latent_seed=cand.latent_seed, predicted_class=cand.predicted_class,
                    realism=cand.realism, objective_initial=cand.objective_initial,
                    objective_final=cand.objective_final, objective_trace=cand.objective_trace))
        attempts[c] = used
        if accepted < n_per_class:
            logger.info("class %d: %d/%d accepted after %d attempts", c, accepted, n_per_class, used)
    elapsed = time.perf_counter() - started
    rs = ReconstructionSet(
        items=items, requested_per_class=n_per_class, attack_wall_clock_seconds=elapsed,
        class_names={c: target.class_names[c] for c in classes}, attack_name=spec.kind, attempts=attempts,
        metadata={
            "attack": spec.descriptor,
            "config": asdict(config),
            "seed": seed,
            "resized": tuple(generator.output_shape) != tuple(target.input_shape),
            "calibration": None if calibration is None else calibration.to_dict(),
        },
    )
    rs.metadata["inversion_failed"] = rs.failed_classes
    return rs


def recheck_acceptance(rs: ReconstructionSet, target: ModelHandle) -> list[int]:
    """Indices (into ``accepted()``) of accepted items the target does not classify as labelled."""
    acc = rs.accepted()
    if not acc:
        return []
    preds, _ = infer(target, np.stack([it.image for it in acc]))
    return [i for i, (p, it) in enumerate(zip(preds.tolist(), acc)) if p != it.class_id]


_ITEM_FIELDS = ("class_id", "attack_name", "final_combined_score", "target_confidence", "accepted",
                "latent_seed", "predicted_class", "realism", "objective_initial", "objective_final",
                "objective_trace")


def save_reconstructions(rs: ReconstructionSet, directory: str | Path) -> Path:
    """PNG per item under ``<class_name>/<seq>.png`` plus an ``index.json``."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    seq: dict[int, int] = {}
    entries = []
    for it in rs.items:
        k = seq.get(it.class_id, 0)
        seq[it.class_id] = k + 1
        rel = f"{rs.class_names[it.class_id]}/{k:05d}.png"
        (directory / rel).parent.mkdir(parents=True, exist_ok=True)
        data = png_bytes(it.image)
        (directory / rel).write_bytes(data)
        entry = {f: getattr(it, f) for f in _ITEM_FIELDS}
        entry.update(path=rel, digest=image_digest(it.image))
        entries.append(entry)
    index = {
        "requested_per_class": rs.requested_per_class,
        "attack_name": rs.attack_name,
        "channels": int(rs.items[0].image.shape[-1]) if rs.items else 3,
        "class_names": {str(k): v for k, v in sorted(rs.class_names.items())},
        "attempts": {str(k): v for k, v in sorted(rs.attempts.items())},
        "attack_wall_clock_seconds": rs.attack_wall_clock_seconds,
        "metadata": rs.metadata,
        "items": entries,
    }
    (directory / "index.json").write_text(json.dumps(index, indent=2, sort_keys=True) + "\n")
    return directory


def load_reconstructions(directory: str | Path) -> ReconstructionSet:
    directory = Path(directory)
    index = json.loads((directory / "index.json").read_text())
    class_names = {int(k): v for k, v in index["class_names"].items()}
    items = []
    for e in index["items"]:
        data = (directory / e["path"]).read_bytes()
        img = decode_image(data, channels=index.get("channels", 3))
        item = ReconstructionItem(image=img, **{f: e[f] for f in _ITEM_FIELDS})
        if item.digest != e["digest"]:
            raise AttackError(f"reconstruction {e['path']} does not match its recorded digest")
        items.append(item)
    return ReconstructionSet(
        items=items, requested_per_class=index["requested_per_class"],
        attack_wall_clock_seconds=index["attack_wall_clock_seconds"], class_names=class_names,
        attack_name=index["attack_name"], attempts={int(k): v for k, v in index["attempts"].items()},
        metadata=index["metadata"],
    )
