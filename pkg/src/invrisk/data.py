"""Dataset ingestion, split bookkeeping, NearMiss-1 undersampling and captions.

Images are held as float32 ``(N, H, W, C)`` arrays in ``[0, 1]`` on the
uint8 grid (``k / 255``), so that writing them as PNG and reading them back
is lossless. Item identity is the SHA-256 of the PNG file bytes.
"""

from __future__ import annotations

import enum
import hashlib
import io
import json
import logging
import re
from collections import Counter
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterable, Mapping, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image
from scipy.spatial.distance import cdist

from invrisk.errors import ConfigError, InputError, UnsupportedFeatureError

logger = logging.getLogger(__name__)

IMAGE_EXTENSIONS = (".png", ".jpg", ".jpeg", ".bmp")


class SplitTag(str, enum.Enum):
    TARGET_TRAIN = "target_train"
    TARGET_TEST = "target_test"
    PUBLIC = "public"
    RECONSTRUCTED = "reconstructed"


@dataclass
class ItemError:
    path: str
    message: str


@dataclass
class LabeledDataset:
    name: str
    images: np.ndarray
    labels: np.ndarray
    class_names: dict[int, str]
    split_tag: SplitTag
    digests: list[str]
    paths: list[str] | None = None
    errors: list[ItemError] = field(default_factory=list)
    warnings: list[str] = field(default_factory=list)

    def __post_init__(self) -> None:
        self.images = np.asarray(self.images, dtype=np.float32)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        self.split_tag = SplitTag(self.split_tag)
        if self.images.ndim != 4:
            raise InputError(f"images must be (N, H, W, C), got shape {self.images.shape}")
        if len(self.images) != len(self.labels) or len(self.digests) != len(self.labels):
            raise InputError("images, labels and digests must have equal length")
        unknown = set(self.labels.tolist()) - set(self.class_names)
        if unknown:
            raise InputError(f"labels without class names: {sorted(unknown)}")
        if len(set(self.digests)) != len(self.digests):
            dupes = [d for d, n in Counter(self.digests).items() if n > 1]
            raise InputError(f"dataset {self.name!r} has duplicate items: {dupes[:3]}")

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def shape(self) -> tuple[int, int, int]:
        return tuple(self.images.shape[1:])  # type: ignore[return-value]

    @property
    def class_set(self) -> list[int]:
        return sorted(self.class_names)

    def digest(self) -> str:
        """Order-sensitive digest over item digests and labels."""
        h = hashlib.sha256()
        for d, y in zip(self.digests, self.labels.tolist()):
            h.update(f"{d}:{y};".encode())
        return h.hexdigest()

    def class_counts(self) -> dict[int, int]:
        counts = Counter(self.labels.tolist())
        return {c: counts.get(c, 0) for c in self.class_set}

    def subset(self, indices: Sequence[int], name: str | None = None,
               split_tag: SplitTag | str | None = None) -> "LabeledDataset":
        idx = np.asarray(indices, dtype=np.int64)
        return LabeledDataset(
            name=name or self.name,
            images=self.images[idx],
            labels=self.labels[idx],
            class_names=dict(self.class_names),
            split_tag=split_tag or self.split_tag,
            digests=[self.digests[i] for i in idx],
            paths=None if self.paths is None else [self.paths[i] for i in idx],
        )

    @classmethod
    def from_arrays(cls, name: str, images: np.ndarray, labels: Sequence[int],
                    class_names: Mapping[int, str], split_tag: SplitTag | str) -> "LabeledDataset":
        """Build a dataset from in-memory images, snapping them to the uint8 grid."""
        images = quantize(np.asarray(images, dtype=np.float32))
        digests = [image_digest(img) for img in images]
        return cls(name, images, np.asarray(labels), dict(class_names), SplitTag(split_tag), digests)


@dataclass
class CaptionedDataset:
    images: np.ndarray
    captions: list[str]
    labels: np.ndarray
    class_names: dict[int, str]

    def __len__(self) -> int:
        return len(self.captions)


@dataclass
class DisjointnessReport:
    a_name: str
    b_name: str
    overlap: set[str]

    @property
    def is_disjoint(self) -> bool:
        return not self.overlap


def quantize(images: np.ndarray) -> np.ndarray:
    return (np.round(np.clip(images, 0.0, 1.0) * 255.0) / 255.0).astype(np.float32)


def to_uint8(image: np.ndarray) -> np.ndarray:
    return np.round(np.clip(image, 0.0, 1.0) * 255.0).astype(np.uint8)


def png_bytes(image: np.ndarray) -> bytes:
    arr = to_uint8(image)
    if arr.shape[-1] == 1:
        arr = arr[..., 0]
    buf = io.BytesIO()
    Image.fromarray(arr).save(buf, format="PNG")
    return buf.getvalue()


def image_digest(image: np.ndarray) -> str:
    return hashlib.sha256(png_bytes(image)).hexdigest()


def decode_image(data: bytes, channels: int = 3) -> np.ndarray:
    with Image.open(io.BytesIO(data)) as im:
        im = im.convert("RGB" if channels == 3 else "L")
        arr = np.asarray(im, dtype=np.float32) / 255.0
    if arr.ndim == 2:
        arr = arr[..., None]
    return arr


def resize_bilinear(images: np.ndarray, size: tuple[int, int]) -> np.ndarray:
    """Bilinear resize of an ``(N, H, W, C)`` batch; identity when already sized."""
    images = np.asarray(images, dtype=np.float32)
    if tuple(images.shape[1:3]) == tuple(size):
        return images
    t = torch.from_numpy(np.ascontiguousarray(images.transpose(0, 3, 1, 2)))
    out = F.interpolate(t, size=tuple(size), mode="bilinear", align_corners=False)
    return out.numpy().transpose(0, 2, 3, 1).copy()


def ingest(root: str | Path, name: str | None = None,
           split_tag: SplitTag | str = SplitTag.PUBLIC, channels: int = 3,
           manifest_path: str | Path | None = None, workers: int = 1) -> LabeledDataset:
    """Read a ``<root>/<class_name>/<image>`` tree.

    Class ids follow sorted class-directory names; items follow lexicographic
    relative path. Undecodable files and shape mismatches are collected in
    ``errors`` rather than raised; empty class directories produce a warning.
    When ``manifest_path`` is given a JSON sidecar is written there.
    """
    root = Path(root)
    if not root.is_dir():
        raise InputError(f"dataset root {root} is not a directory")
    class_dirs = sorted(p for p in root.iterdir() if p.is_dir())
    if not class_dirs:
        raise InputError(f"dataset root {root} has no class directories")
    class_names = {i: d.name for i, d in enumerate(class_dirs)}
    files: list[tuple[str, int]] = []
    warnings: list[str] = []
    for cid, d in enumerate(class_dirs):
        found = [p for p in d.iterdir() if p.is_file() and p.suffix.lower() in IMAGE_EXTENSIONS]
        if not found:
            msg = f"class directory {d.name!r} is empty"
            logger.warning(msg)
            warnings.append(msg)
        files.extend((p.relative_to(root).as_posix(), cid) for p in found)
    files.sort()

    def load(rel: str) -> tuple[str, np.ndarray | None, str]:
        data = (root / rel).read_bytes()
        digest = hashlib.sha256(data).hexdigest()
        try:
            return digest, decode_image(data, channels), ""
        except Exception as exc:  # PIL raises several unrelated types
            return digest, None, f"{type(exc).__name__}: {exc}"

    with ThreadPoolExecutor(max_workers=max(1, workers)) as pool:
        loaded = list(pool.map(load, [rel for rel, _ in files]))

    images, labels, digests, paths, errors = [], [], [], [], []
    shape = None
    for (rel, cid), (digest, img, err) in zip(files, loaded):
        if img is None:
            errors.append(ItemError(rel, err))
            continue
        if shape is None:
            shape = img.shape
        if img.shape != shape:
            errors.append(ItemError(rel, f"shape {img.shape} differs from dataset shape {shape}"))
            continue
        images.append(img)
        labels.append(cid)
        digests.append(digest)
        paths.append(rel)
    for e in errors:
        logger.warning("skipping %s: %s", e.path, e.message)
    if not images:
        raise InputError(f"no readable images under {root}")
    ds = LabeledDataset(
        name=name or root.name,
        images=np.stack(images),
        labels=np.asarray(labels),
        class_names=class_names,
        split_tag=SplitTag(split_tag),
        digests=digests,
        paths=paths,
        errors=errors,
        warnings=warnings,
    )
    if manifest_path is not None:
        write_manifest(ds, manifest_path)
    return ds


def manifest(ds: LabeledDataset) -> dict[str, Any]:
    paths = ds.paths or [f"{ds.class_names[y]}/{i:05d}.png" for i, y in enumerate(ds.labels.tolist())]
    return {
        "name": ds.name,
        "split_tag": ds.split_tag.value,
        "class_names": {str(k): v for k, v in sorted(ds.class_names.items())},
        "dataset_digest": ds.digest(),
        "items": [
            {"path": p, "digest": d, "class_id": int(y), "shape": list(ds.shape)}
            for p, d, y in zip(paths, ds.digests, ds.labels.tolist())
        ],
        "errors": [{"path": e.path, "message": e.message} for e in ds.errors],
        "warnings": list(ds.warnings),
    }


def write_manifest(ds: LabeledDataset, path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(manifest(ds), indent=2, sort_keys=True) + "\n")
    return path


def save_dataset(ds: LabeledDataset, root: str | Path) -> Path:
    """Write ``ds`` in the class-per-directory PNG layout that :func:`ingest` reads."""
    root = Path(root)
    for name in ds.class_names.values():
        (root / name).mkdir(parents=True, exist_ok=True)
    seq: Counter[int] = Counter()
    for img, y in zip(ds.images, ds.labels.tolist()):
        (root / ds.class_names[y] / f"{seq[y]:05d}.png").write_bytes(png_bytes(img))
        seq[y] += 1
    return root


def verify_disjoint(a: LabeledDataset, b: LabeledDataset) -> DisjointnessReport:
    return DisjointnessReport(a.name, b.name, set(a.digests) & set(b.digests))


def nearmiss_select(features: np.ndarray, labels: Sequence[int], neighbors: int = 3,
                    version: int = 1) -> np.ndarray:
    """Indices kept by NearMiss-1, sorted ascending.

    Each class is brought down to the minority count. A majority sample's
    score is its mean Euclidean distance to its ``neighbors`` nearest
    minority samples; the lowest scores are kept, ties going to the lower
    index. The minority class (lowest class id among those with the minimum
    count) is kept whole.
    """
    if version != 1:
        raise UnsupportedFeatureError(f"NearMiss version {version} is not implemented; only version 1")
    if neighbors < 1:
        raise ConfigError("NearMiss neighbors must be >= 1")
    features = np.asarray(features, dtype=np.float64).reshape(len(labels), -1)
    labels = np.asarray(labels)
    counts = Counter(labels.tolist())
    if len(counts) < 2:
        raise InputError("NearMiss needs at least two classes")
    n_min = min(counts.values())
    minority = min(c for c, n in counts.items() if n == n_min)
    if neighbors > n_min:
        raise ConfigError(f"NearMiss neighbors ({neighbors}) exceeds minority count ({n_min})")
    minority_idx = np.flatnonzero(labels == minority)
    keep = [minority_idx]
    for cls in sorted(counts):
        if cls == minority:
            continue
        idx = np.flatnonzero(labels == cls)
        if len(idx) == n_min:
            keep.append(idx)
            continue
        dist = cdist(features[idx], features[minority_idx])
        scores = np.sort(dist, axis=1)[:, :neighbors].mean(axis=1)
        order = np.lexsort((idx, scores))
        keep.append(idx[order[:n_min]])
    return np.sort(np.concatenate(keep))


def nearmiss_undersample(dataset: LabeledDataset, version: int = 1, neighbors: int = 3,
                         feature_size: tuple[int, int] = (32, 32)) -> LabeledDataset:
    counts = [n for n in dataset.class_counts().values() if n > 0]
    if len(counts) >= 2 and len(set(counts)) == 1:
        return dataset
    feats = resize_bilinear(dataset.images, feature_size).reshape(len(dataset), -1)
    kept = nearmiss_select(feats, dataset.labels, neighbors=neighbors, version=version)
    return dataset.subset(kept.tolist())


_PLACEHOLDER = "{}"
_ARTICLE = re.compile(r"\b(a|an|A|An)(\s+)$")


def render_caption(template: str, class_name: str) -> str:
    if template.count(_PLACEHOLDER) != 1 or re.search(r"\{[^}]+\}", template):
        raise ConfigError(f"caption template must contain exactly one '{{}}' placeholder: {template!r}")
    head, tail = template.split(_PLACEHOLDER)
    m = _ARTICLE.search(head)
    if m:
        article = "an" if class_name[:1].lower() in "aeiou" and class_name else "a"
        if m.group(1)[0].isupper():
            article = article.capitalize()
        head = head[: m.start()] + article + m.group(2)
    return f"{head}{class_name}{tail}"


def build_caption_dataset(dataset: LabeledDataset, template: str = "a photo of a {}") -> CaptionedDataset:
    render_caption(template, "x")  # validates the template even for empty datasets
    captions = [render_caption(template, dataset.class_names[y]) for y in dataset.labels.tolist()]
    return CaptionedDataset(dataset.images, captions, dataset.labels.copy(), dict(dataset.class_names))


SYNTHETIC_CLASSES = ("circle", "cross", "square", "stripe")


def make_synthetic_dataset(n_per_class: int, size: int = 32, seed: int = 0,
                           class_names: Iterable[str] = SYNTHETIC_CLASSES,
                           split_tag: SplitTag | str = SplitTag.PUBLIC,
                           name: str = "synthetic") -> LabeledDataset:
    """Coloured-shape images, one shape and hue family per class, on noisy backgrounds."""
    names = list(class_names)
    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float32) / size
    palette = np.array([[0.9, 0.2, 0.2], [0.2, 0.8, 0.3], [0.25, 0.35, 0.95], [0.9, 0.8, 0.2],
                        [0.8, 0.3, 0.9], [0.2, 0.85, 0.85]], dtype=np.float32)
    images, labels = [], []
    for cid in range(len(names)):
        kind = cid % 4
        for _ in range(n_per_class):
            bg = rng.uniform(0.0, 0.35, size=3).astype(np.float32)
            img = np.broadcast_to(bg, (size, size, 3)).copy()
            img += rng.normal(0, 0.05, size=img.shape).astype(np.float32)
            cx, cy = rng.uniform(0.35, 0.65, size=2)
            r = rng.uniform(0.18, 0.3)
            if kind == 0:
                mask = (xx - cx) ** 2 + (yy - cy) ** 2 < r ** 2
            elif kind == 1:
                w = r / 3
                mask = ((np.abs(xx - cx) < w) & (np.abs(yy - cy) < r)) | (
                    (np.abs(yy - cy) < w) & (np.abs(xx - cx) < r))
            elif kind == 2:
                mask = (np.abs(xx - cx) < r) & (np.abs(yy - cy) < r)
            else:
                mask = np.sin((xx + yy) * np.pi * rng.uniform(5.0, 7.0)) > 0.3
            colour = palette[cid % len(palette)] + rng.normal(0, 0.05, size=3).astype(np.float32)
            img[mask] = colour
            images.append(np.clip(img, 0, 1))
            labels.append(cid)
    return LabeledDataset.from_arrays(name, np.stack(images), labels, dict(enumerate(names)), split_tag)


def split_dataset(ds: LabeledDataset, fractions: Mapping[str, float], seed: int = 0
                  ) -> dict[str, LabeledDataset]:
    """Stratified random split into named, content-disjoint parts."""
    total = sum(fractions.values())
    if abs(total - 1.0) > 1e-9:
        raise ConfigError("split fractions must sum to 1")
    rng = np.random.default_rng(seed)
    parts: dict[str, list[int]] = {k: [] for k in fractions}
    for c in ds.class_set:
        idx = rng.permutation(np.flatnonzero(ds.labels == c))
        start = 0
        keys = list(fractions)
        for i, k in enumerate(keys):
            stop = len(idx) if i == len(keys) - 1 else start + int(round(fractions[k] * len(idx)))
            parts[k].extend(idx[start:stop].tolist())
            start = stop
    out = {}
    for k, idx in parts.items():
        tag = k if k in SplitTag._value2member_map_ else ds.split_tag
        out[k] = ds.subset(sorted(idx), name=f"{ds.name}-{k}", split_tag=tag)
    return out
