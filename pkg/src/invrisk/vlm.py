"""Interpretation backends: captioning, zero-shot text and image classification.

Three narrow backend interfaces, each with a deterministic stub (driven by an
image *tagger*) for hermetic runs and an HTTP client for model-serving
endpoints speaking the JSON protocol below::

    GET  /v1/info            -> {model, digest, supports_prompting?, max_concurrency?}
    POST /v1/caption         {image: base64 PNG, prompt?: str}  -> {caption: str}
    POST /v1/zeroshot-text   {text: str, labels: [str]}         -> {scores: [float]}
    POST /v1/similarity      {image: base64 PNG, texts: [str]}  -> {scores: [float]}

Any non-200 response counts as a transport failure.
"""

from __future__ import annotations

import base64
import hashlib
import logging
import re
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Any, Callable, Iterable, Mapping, Sequence

import numpy as np
import requests

from invrisk.data import LabeledDataset, image_digest, png_bytes, render_caption, resize_bilinear
from invrisk.errors import BackendUnavailable, ConfigError, InputError

logger = logging.getLogger(__name__)

DEFAULT_TEMPLATE = "a photo of a {}"

COMMON_OBJECTS = (
    "airplane", "bird", "car", "cat", "deer", "dog", "horse", "monkey", "ship", "truck",
    "boat", "bus", "bicycle", "motorcycle", "train", "tank", "tree", "flower", "person", "house",
    "road", "building", "mountain", "sky", "water", "field", "fish", "frog", "chair", "table",
    "bottle", "cup", "ball", "sign", "fence", "grass", "rock", "cloud", "snow", "sand",
)


def _singular(token: str) -> str:
    if len(token) > 3 and token.endswith("ies"):
        return token[:-3] + "y"
    if len(token) > 3 and re.search(r"(ses|xes|zes|ches|shes)$", token):
        return token[:-2]
    if len(token) > 2 and token.endswith("s") and not token.endswith(("ss", "us", "is")):
        return token[:-1]
    return token


def tokens(text: str) -> list[str]:
    return [_singular(t) for t in re.findall(r"[a-z0-9]+", text.lower())]


def normalize_label(text: str) -> str:
    """Lowercase, strip punctuation, collapse whitespace, singularise each word."""
    return " ".join(tokens(text))


def labels_match(predicted: str | None, truth: str, synonyms: Mapping[str, str] | None = None) -> bool:
    if predicted is None:
        return False
    syn = {normalize_label(k): normalize_label(v) for k, v in (synonyms or {}).items()}
    p, t = normalize_label(predicted), normalize_label(truth)
    return syn.get(p, p) == syn.get(t, t)


def contains_phrase(text: str, phrase: str) -> bool:
    hay, needle = tokens(text), tokens(phrase)
    if not needle:
        return False
    n = len(needle)
    return any(hay[i:i + n] == needle for i in range(len(hay) - n + 1))


# ---------------------------------------------------------------------------
# records


@dataclass
class CaptionRecord:
    image_ref: str
    caption: str | None
    prompt: str | None
    backend: str
    class_id: int | None = None
    error: str | None = None

    @property
    def ok(self) -> bool:
        return self.error is None and bool(self.caption)

    def to_dict(self) -> dict[str, Any]:
        return {"image_ref": self.image_ref, "caption": self.caption, "prompt": self.prompt,
                "backend": self.backend, "class_id": self.class_id, "error": self.error}

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "CaptionRecord":
        return cls(**{k: d.get(k) for k in ("image_ref", "caption", "prompt", "backend", "class_id", "error")})


@dataclass
class CandidateLabelSet:
    labels: list[str]
    support: dict[str, float]
    provenance: dict[str, Any] = field(default_factory=dict)
    empty: bool = False

    def to_dict(self) -> dict[str, Any]:
        return {"labels": self.labels, "support": self.support, "provenance": self.provenance, "empty": self.empty}

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "CandidateLabelSet":
        return cls(list(d["labels"]), dict(d["support"]), dict(d.get("provenance", {})), bool(d.get("empty")))


# ---------------------------------------------------------------------------
# backend interfaces


class CaptionBackend:
    identity: str = "caption"
    supports_prompting: bool = False
    max_concurrency: int = 1

    def generate(self, image: np.ndarray, prompt: str | None) -> str:
        raise NotImplementedError


class TextZeroShotBackend:
    identity: str = "zeroshot-text"
    max_concurrency: int = 1

    def scores(self, text: str, labels: Sequence[str]) -> list[float]:
        raise NotImplementedError


class ImageTextSimilarityBackend:
    identity: str = "similarity"
    max_concurrency: int = 1

    def scores(self, image: np.ndarray, texts: Sequence[str]) -> list[float]:
        raise NotImplementedError


# ---------------------------------------------------------------------------
# stubs

Tagger = Callable[[np.ndarray], "str | None"]


class FixtureTagger:
    """Look up an image's tag by content digest."""

    def __init__(self, tags: Mapping[str, str], default: str | None = None):
        self.tags = dict(tags)
        self.default = default

    @classmethod
    def from_images(cls, images: Iterable[np.ndarray], tags: Iterable[str], default: str | None = None):
        return cls({image_digest(im): t for im, t in zip(images, tags)}, default)

    def __call__(self, image: np.ndarray) -> str | None:
        return self.tags.get(image_digest(image), self.default)

    @property
    def identity(self) -> str:
        h = hashlib.sha256(repr(sorted(self.tags.items())).encode()).hexdigest()[:12]
        return f"fixture-{h}"


class CentroidTagger:
    """Nearest class-mean in a downsampled pixel space of a reference dataset."""

    def __init__(self, reference: LabeledDataset, size: tuple[int, int] = (8, 8)):
        self.size = size
        feats = resize_bilinear(reference.images, size).reshape(len(reference), -1).astype(np.float64)
        self.names = [reference.class_names[c] for c in reference.class_set]
        self.centroids = np.stack([feats[reference.labels == c].mean(axis=0) for c in reference.class_set])
        self._id = hashlib.sha256(self.centroids.tobytes()).hexdigest()[:12]

    def __call__(self, image: np.ndarray) -> str | None:
        f = resize_bilinear(np.asarray(image)[None], self.size).reshape(1, -1).astype(np.float64)
        return self.names[int(np.argmin(((self.centroids - f) ** 2).sum(axis=1)))]

    @property
    def identity(self) -> str:
        return f"centroid-{self._id}"


class StubCaptionBackend(CaptionBackend):
    supports_prompting = True
    max_concurrency = 64

    def __init__(self, tagger: Tagger, template: str = DEFAULT_TEMPLATE, fallback: str = "an object"):
        render_caption(template, "x")
        self.tagger = tagger
        self.template = template
        self.fallback = fallback
        self.identity = f"stub-caption[{getattr(tagger, 'identity', 'tagger')};{template}]"

    def generate(self, image: np.ndarray, prompt: str | None) -> str:
        tag = self.tagger(image)
        return self.fallback if tag is None else render_caption(self.template, tag)


class ConstantCaptionBackend(CaptionBackend):
    supports_prompting = True
    max_concurrency = 64

    def __init__(self, text: str):
        self.text = text
        self.identity = f"constant-caption[{text}]"

    def generate(self, image: np.ndarray, prompt: str | None) -> str:
        return self.text


class StubTextZeroShot(TextZeroShotBackend):
    """Score 1 when the label's words appear contiguously in the text, else 0."""

    identity = "stub-keyword-containment"
    max_concurrency = 64

    def scores(self, text: str, labels: Sequence[str]) -> list[float]:
        return [1.0 if contains_phrase(text, label) else 0.0 for label in labels]


class StubSimilarity(ImageTextSimilarityBackend):
    """Score 1 when the image's tag appears in the text, else 0."""

    max_concurrency = 64

    def __init__(self, tagger: Tagger):
        self.tagger = tagger
        self.identity = f"stub-similarity[{getattr(tagger, 'identity', 'tagger')}]"

    def scores(self, image: np.ndarray, texts: Sequence[str]) -> list[float]:
        tag = self.tagger(image)
        return [1.0 if tag is not None and contains_phrase(t, tag) else 0.0 for t in texts]


# ---------------------------------------------------------------------------
# HTTP clients


class TransportError(RuntimeError):
    pass


class _HttpClient:
    def __init__(self, base_url: str, timeout: float = 30.0, retries: int = 3, backoff: float = 0.5,
                 session: requests.Session | None = None):
        self.base_url = base_url.rstrip("/")
        self.timeout = timeout
        self.retries = retries
        self.backoff = backoff
        self.session = session or requests.Session()
        self._info: dict[str, Any] | None = None

    def info(self) -> dict[str, Any]:
        if self._info is None:
            try:
                r = self.session.get(f"{self.base_url}/v1/info", timeout=self.timeout)
            except requests.RequestException as exc:
                raise BackendUnavailable(f"{self.base_url}: {exc}") from exc
            if r.status_code != 200:
                raise BackendUnavailable(f"{self.base_url}/v1/info returned HTTP {r.status_code}")
            info = r.json()
            if not info.get("digest"):
                raise BackendUnavailable(f"{self.base_url} did not report a model digest")
            self._info = info
        return self._info

    @property
    def identity(self) -> str:
        info = self.info()
        return f"http:{info.get('model', 'unknown')}@{info['digest']}"

    @property
    def max_concurrency(self) -> int:
        return int(self.info().get("max_concurrency", 1))

    def post(self, path: str, payload: dict[str, Any]) -> dict[str, Any]:
        last = ""
        for attempt in range(self.retries + 1):
            if attempt:
                time.sleep(self.backoff * 2 ** (attempt - 1))
            try:
                r = self.session.post(f"{self.base_url}{path}", json=payload, timeout=self.timeout)
                if r.status_code == 200:
                    return r.json()
                last = f"HTTP {r.status_code}"
            except (requests.RequestException, ValueError) as exc:
                last = f"{type(exc).__name__}: {exc}"
            logger.warning("%s%s failed (attempt %d): %s", self.base_url, path, attempt + 1, last)
        raise TransportError(f"{path} failed after {self.retries + 1} attempts: {last}")


def _b64png(image: np.ndarray) -> str:
    return base64.b64encode(png_bytes(image)).decode("ascii")


def _score_list(resp: dict[str, Any], n: int) -> list[float]:
    scores = resp.get("scores")
    if not isinstance(scores, list) or len(scores) != n:
        raise TransportError(f"expected {n} scores, got {scores!r}")
    return [float(s) for s in scores]


class HttpCaptionBackend(CaptionBackend):
    def __init__(self, base_url: str, **kwargs: Any):
        self.client = _HttpClient(base_url, **kwargs)

    @property
    def identity(self) -> str:  # type: ignore[override]
        return self.client.identity

    @property
    def supports_prompting(self) -> bool:  # type: ignore[override]
        return bool(self.client.info().get("supports_prompting", True))

    @property
    def max_concurrency(self) -> int:  # type: ignore[override]
        return self.client.max_concurrency

    def generate(self, image: np.ndarray, prompt: str | None) -> str:
        body: dict[str, Any] = {"image": _b64png(image)}
        if prompt is not None:
            body["prompt"] = prompt
        caption = self.client.post("/v1/caption", body).get("caption")
        if not isinstance(caption, str):
            raise TransportError(f"malformed caption response: {caption!r}")
        return caption


class HttpTextZeroShot(TextZeroShotBackend):
    def __init__(self, base_url: str, **kwargs: Any):
        self.client = _HttpClient(base_url, **kwargs)

    @property
    def identity(self) -> str:  # type: ignore[override]
        return self.client.identity

    @property
    def max_concurrency(self) -> int:  # type: ignore[override]
        return self.client.max_concurrency

    def scores(self, text: str, labels: Sequence[str]) -> list[float]:
        return _score_list(self.client.post("/v1/zeroshot-text", {"text": text, "labels": list(labels)}), len(labels))


class HttpSimilarity(ImageTextSimilarityBackend):
    def __init__(self, base_url: str, **kwargs: Any):
        self.client = _HttpClient(base_url, **kwargs)

    @property
    def identity(self) -> str:  # type: ignore[override]
        return self.client.identity

    @property
    def max_concurrency(self) -> int:  # type: ignore[override]
        return self.client.max_concurrency

    def scores(self, image: np.ndarray, texts: Sequence[str]) -> list[float]:
        return _score_list(self.client.post("/v1/similarity", {"image": _b64png(image), "texts": list(texts)}),
                           len(texts))


# ---------------------------------------------------------------------------
# operations


def caption(backend: CaptionBackend, image: np.ndarray, prompt: str | None = None,
            image_ref: str | None = None, class_id: int | None = None) -> CaptionRecord:
    """Caption one image; transport failures and empty captions become item errors."""
    if prompt is not None and not backend.supports_prompting:
        raise ConfigError(f"backend {backend.identity} does not accept prompts")
    image = np.asarray(image)
    if image.size == 0 or not np.isfinite(image).all() or image.min() < 0.0 or image.max() > 1.0:
        raise InputError("caption input must be a finite image with values in [0, 1]")
    ref = image_ref or image_digest(image)
    try:
        text = backend.generate(image, prompt)
    except TransportError as exc:
        return CaptionRecord(ref, None, prompt, backend.identity, class_id, error=str(exc))
    if not text or not text.strip():
        return CaptionRecord(ref, None, prompt, backend.identity, class_id, error="empty caption")
    return CaptionRecord(ref, text.strip(), prompt, backend.identity, class_id)


def caption_many(backend: CaptionBackend, images: Sequence[np.ndarray], refs: Sequence[str],
                 class_ids: Sequence[int | None] | None = None, prompt: str | None = None,
                 workers: int = 1) -> list[CaptionRecord]:
    """Caption a batch, honouring the backend's declared concurrency limit. Output order follows input."""
    if prompt is not None and not backend.supports_prompting:
        raise ConfigError(f"backend {backend.identity} does not accept prompts")
    class_ids = list(class_ids) if class_ids is not None else [None] * len(images)
    n = max(1, min(workers, backend.max_concurrency))
    args = list(zip(images, refs, class_ids))
    if n == 1:
        return [caption(backend, im, prompt, r, c) for im, r, c in args]
    with ThreadPoolExecutor(max_workers=n) as pool:
        return list(pool.map(lambda a: caption(backend, a[0], prompt, a[1], a[2]), args))


def zero_shot_text_classify(backend: TextZeroShotBackend, text: str,
                            candidate_labels: Sequence[str]) -> list[tuple[str, float]]:
    """Labels ranked by descending score; equal scores keep input order."""
    labels = list(candidate_labels)
    if not labels:
        raise InputError("zero-shot text classification needs at least one label")
    scores = backend.scores(text, labels)
    order = sorted(range(len(labels)), key=lambda i: -scores[i])
    return [(labels[i], float(scores[i])) for i in order]


def build_vocabulary(user: Iterable[str] = (), class_names: Iterable[str] = (),
                     include_common: bool = True) -> list[str]:
    """Ordered, normalisation-unique union of class names, user words and the built-in list."""
    out: list[str] = []
    seen: set[str] = set()
    for word in [*class_names, *user, *(COMMON_OBJECTS if include_common else ())]:
        key = normalize_label(word)
        if key and key not in seen:
            seen.add(key)
            out.append(word)
    return out


def derive_candidate_labels(caption_records: Sequence[CaptionRecord], vocabulary: Sequence[str],
                            backend: TextZeroShotBackend, per_caption_top_k: int = 3,
                            support_threshold: float = 0.2) -> CandidateLabelSet:
    """Vocabulary labels endorsed by at least ``support_threshold`` of the captions.

    A caption endorses a label when the label is among its top-k zero-shot
    labels with a nonzero score. Output is ordered by support, then by
    vocabulary position, so it does not depend on record order.
    """
    if not caption_records or not vocabulary:
        raise InputError("candidate label derivation needs captions and a vocabulary")
    if per_caption_top_k < 1 or not 0.0 <= support_threshold <= 1.0:
        raise ConfigError("per_caption_top_k must be >= 1 and support_threshold in [0, 1]")
    vocab = build_vocabulary(vocabulary, include_common=False)
    good = [r for r in caption_records if r.ok]
    counts = {v: 0 for v in vocab}
    for rec in good:
        ranked = zero_shot_text_classify(backend, rec.caption or "", vocab)[:per_caption_top_k]
        for label, score in ranked:
            if score > 0:
                counts[label] += 1
    n = len(good)
    support = {v: (counts[v] / n if n else 0.0) for v in vocab}
    chosen = [v for v in vocab if counts[v] > 0 and support[v] >= support_threshold]
    pos = {v: i for i, v in enumerate(vocab)}
    chosen.sort(key=lambda v: (-support[v], pos[v]))
    vocab_digest = hashlib.sha256("\n".join(vocab).encode()).hexdigest()
    provenance = {"text_backend": backend.identity, "caption_backends": sorted({r.backend for r in good}),
                  "vocabulary_digest": vocab_digest, "captions_used": n,
                  "per_caption_top_k": per_caption_top_k, "support_threshold": support_threshold}
    if not chosen:
        logger.warning("no candidate label reached support %.2f", support_threshold)
    return CandidateLabelSet(chosen, {v: support[v] for v in chosen}, provenance, empty=not chosen)


@dataclass
class ImageLabels:
    predictions: list[str | None]
    errors: dict[int, str] = field(default_factory=dict)


def zero_shot_image_classify(backend: ImageTextSimilarityBackend, images: Sequence[np.ndarray],
                             candidate_labels: Sequence[str], template: str = DEFAULT_TEMPLATE
                             ) -> ImageLabels:
    """Argmax-similarity label per image over template-expanded labels; ties go to the earlier label."""
    labels = list(candidate_labels)
    if len(images) == 0 or not labels:
        raise InputError("zero-shot image classification needs images and candidate labels")
    texts = [render_caption(template, label) for label in labels]
    preds: list[str | None] = []
    errors: dict[int, str] = {}
    for i, img in enumerate(images):
        try:
            scores = backend.scores(img, texts)
        except TransportError as exc:
            errors[i] = str(exc)
            preds.append(None)
            continue
        preds.append(labels[int(np.argmax(scores))])
    return ImageLabels(preds, errors)
