"""Stage engine with persisted, digest-checked run state.

Shared stages (target, GAN prior, evaluation model) run once per run unless
``retrain_per_trial`` is set. Each trial then runs attack, captioning and
metrics with its own seed. Every stage reads its inputs back from the run
directory rather than from memory, so an interrupted run that is resumed
takes exactly the same path as one that never stopped.

Run directory layout::

    config.json  state.json  report.json  report.csv  summary.md
    models/{target,evaluation,proxy/trial_NNN}/   gan/
    reconstructions/trial_NNN/   captions/trial_NNN/   metrics/trial_NNN/
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
import time
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import Any, Callable

import numpy as np

from invrisk._torch import seed_everything
from invrisk.attacks import (
    RealismCalibration,
    ReconstructionSet,
    derive_seed,
    fit_realism_calibration,
    generate_reconstructions,
    load_reconstructions,
    recheck_acceptance,
    save_reconstructions,
)
from invrisk.data import LabeledDataset, SplitTag, ingest, nearmiss_undersample
from invrisk.errors import ConfigError, StageError
from invrisk.generative import load_prior, save_prior, train_prior
from invrisk.metrics import (
    INVERSION_FAILED,
    MetricInputs,
    compute_all,
    load_scores,
    write_scores,
)
from invrisk.modelzoo import ModelHandle, ModelRole, fine_tune, load_model, save_model, train_classifier
from invrisk.orchestrator.config import ExperimentConfig
from invrisk.orchestrator.report import canonical_json, emit_report
from invrisk.riskcore import (
    DIMENSIONS,
    DimensionScore,
    RiskDimension,
    RiskReport,
    aggregate_trials,
    bin_risk,
    wcal,
)
from invrisk.vlm import (
    CandidateLabelSet,
    CaptionBackend,
    CaptionRecord,
    CentroidTagger,
    HttpCaptionBackend,
    HttpSimilarity,
    HttpTextZeroShot,
    ImageTextSimilarityBackend,
    StubCaptionBackend,
    StubSimilarity,
    StubTextZeroShot,
    TextZeroShotBackend,
    build_vocabulary,
    caption_many,
    derive_candidate_labels,
)

logger = logging.getLogger(__name__)

SHARED_STAGES = ("trained-target", "gan", "trained-evaluation")
TRIAL_STAGES = ("reconstructions", "captions", "metrics")

# Stream identifiers mixed into the master seed, one per consumer.
_SEED_TRIAL, _SEED_TARGET, _SEED_GAN, _SEED_EVAL, _SEED_PROXY, _SEED_CAL = range(1, 7)


def trial_seed(master: int, trial: int) -> int:
    return derive_seed(master, _SEED_TRIAL, trial)


def file_digest(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


@dataclass
class RunState:
    """Completion markers with the digests of the artifacts each stage wrote."""

    run_id: str
    config_digest: str
    markers: dict[str, dict[str, str]] = field(default_factory=dict)
    order: list[str] = field(default_factory=list)

    def has(self, marker: str) -> bool:
        return marker in self.markers

    def to_dict(self) -> dict[str, Any]:
        return {"run_id": self.run_id, "config_digest": self.config_digest,
                "markers": self.markers, "order": self.order}

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "RunState":
        return cls(d["run_id"], d["config_digest"], {k: dict(v) for k, v in d["markers"].items()},
                   list(d["order"]))


class StopRequested(Exception):
    """Raised internally when ``stop_after`` names the marker just written."""


class Pipeline:
    """Runs the stage graph for one configuration in one run directory."""

    def __init__(self, config: ExperimentConfig, run_dir: str | Path | None = None,
                 text_backend: TextZeroShotBackend | None = None,
                 caption_backend: CaptionBackend | None = None,
                 similarity_backend: ImageTextSimilarityBackend | None = None):
        self.config = config
        self.run_dir = Path(run_dir) if run_dir is not None else config.output_root / config.resolved_run_id()
        self._backends = (caption_backend, text_backend, similarity_backend)
        self._cache: dict[str, Any] = {}
        self._timings: dict[str, float] = {}
        self.stop_after: str | None = None
        self.state = self._open_state()

    # -- state --------------------------------------------------------------

    @property
    def state_path(self) -> Path:
        return self.run_dir / "state.json"

    def _open_state(self) -> RunState:
        digest = self.config.digest()
        if self.state_path.exists():
            state = RunState.from_dict(json.loads(self.state_path.read_text()))
            if state.config_digest != digest:
                raise ConfigError(f"run directory {self.run_dir} belongs to a different configuration")
            return state
        self.run_dir.mkdir(parents=True, exist_ok=True)
        (self.run_dir / "config.json").write_text(self.config.to_json())
        state = RunState(self.config.resolved_run_id(), digest)
        self._write_state(state)
        return state

    def _write_state(self, state: RunState) -> None:
        tmp = self.state_path.with_suffix(".json.tmp")
        tmp.write_text(json.dumps(state.to_dict(), indent=2, sort_keys=True) + "\n")
        os.replace(tmp, self.state_path)

    def _mark(self, marker: str, artifacts: list[Path]) -> None:
        digests = {str(p.relative_to(self.run_dir)): file_digest(p) for p in sorted(artifacts)}
        self.state.markers[marker] = digests
        if marker not in self.state.order:
            self.state.order.append(marker)
        self._write_state(self.state)
        logger.info("stage %s complete", marker)
        if self.stop_after == marker:
            raise StopRequested(marker)

    def _require(self, *markers: str) -> None:
        missing = [m for m in markers if not self.state.has(m)]
        if missing:
            raise StageError(f"upstream stages not complete: {missing}")
        for m in markers:
            for rel, digest in self.state.markers[m].items():
                p = self.run_dir / rel
                if not p.exists() or file_digest(p) != digest:
                    raise StageError(f"artifact {rel} of stage {m} is missing or was modified")

    def _scope(self, trial: int) -> str:
        return f"trial_{trial:03d}" if self.config.retrain_per_trial else ""

    def _shared(self, name: str, trial: int) -> str:
        return f"{name}:{trial}" if self.config.retrain_per_trial else name

    def _shared_seed(self, stream: int, trial: int) -> int:
        return derive_seed(self.config.seed, stream, trial if self.config.retrain_per_trial else 0)

    # -- data and backends ----------------------------------------------------

    def _dataset(self, key: str) -> LabeledDataset:
        if key not in self._cache:
            d = self.config.datasets
            path, tag = {
                "target_train": (d.target_train, SplitTag.TARGET_TRAIN),
                "target_test": (d.target_test, SplitTag.TARGET_TEST),
                "public": (d.public, SplitTag.PUBLIC),
                "evaluation_train": (d.evaluation_train or d.target_test or d.public, SplitTag.PUBLIC),
            }[key]
            if path is None:
                self._cache[key] = None
            else:
                ds = ingest(path, name=key, split_tag=tag, channels=d.channels, workers=self.config.workers)
                if ds.errors:
                    logger.warning("%d unreadable items in %s", len(ds.errors), path)
                if key == "target_train" and self.config.nearmiss.enabled:
                    nm = self.config.nearmiss
                    ds = nearmiss_undersample(ds, version=nm.version, neighbors=nm.neighbors)
                self._cache[key] = ds
        return self._cache[key]

    def backends(self) -> tuple[CaptionBackend, TextZeroShotBackend, ImageTextSimilarityBackend]:
        cap, text, sim = self._backends
        b = self.config.backends
        if b.mode == "http":
            kw = {"timeout": b.timeout, "retries": b.retries}
            cap = cap or HttpCaptionBackend(b.caption_url, **kw)
            text = text or HttpTextZeroShot(b.text_url, **kw)
            sim = sim or HttpSimilarity(b.similarity_url, **kw)
        else:
            if cap is None or sim is None:
                tagger = CentroidTagger(self._dataset("public"))
                cap = cap or StubCaptionBackend(tagger, template=self.config.labels.template)
                sim = sim or StubSimilarity(tagger)
            text = text or StubTextZeroShot()
        self._backends = (cap, text, sim)
        return cap, text, sim

    # -- shared stages --------------------------------------------------------

    def _target_dir(self, trial: int) -> Path:
        return self.run_dir / "models" / self._scope(trial) / "target"

    def _gan_dir(self, trial: int) -> Path:
        return self.run_dir / "gan" / self._scope(trial)

    def _eval_dir(self, trial: int) -> Path:
        return self.run_dir / "models" / self._scope(trial) / "evaluation"

    def train_target(self, trial: int = 0) -> None:
        marker = self._shared("trained-target", trial)
        if self.state.has(marker):
            return
        out = self._target_dir(trial)
        cfg = self.config.target
        if cfg.checkpoint is not None:
            model = load_model(cfg.checkpoint)
            if model.role is not ModelRole.TARGET:
                raise ConfigError(f"target.checkpoint holds a {model.role.value} model")
        else:
            seed = self._shared_seed(_SEED_TARGET, trial)
            seed_everything(seed)
            model = train_classifier(self._dataset("target_train"), cfg.arch.build(), cfg.train.build(seed),
                                     test_set=self._dataset("target_test"))
        save_model(model, out)
        self._mark(marker, [out / "model.pt", out / "model.json"])

    def train_gan(self, trial: int = 0) -> None:
        marker = self._shared("gan", trial)
        if self.state.has(marker):
            return
        out = self._gan_dir(trial)
        if self.config.gan.checkpoint is not None:
            g, d = load_prior(self.config.gan.checkpoint)
        else:
            seed = self._shared_seed(_SEED_GAN, trial)
            seed_everything(seed)
            g, d = train_prior(self._dataset("public"), self.config.gan.train.build(seed))
        save_prior(g, d, out)
        files = [out / "generator.pt", out / "discriminator.pt", out / "gan.json"]
        if self.config.attack.kind == "gmi":
            g, d = load_prior(out)
            cal = fit_realism_calibration(d, g, self._dataset("public"), seed=self._shared_seed(_SEED_CAL, trial))
            (out / "calibration.json").write_text(json.dumps(cal.to_dict(), sort_keys=True) + "\n")
            files.append(out / "calibration.json")
        self._mark(marker, files)

    def train_evaluation(self, trial: int = 0) -> None:
        marker = self._shared("trained-evaluation", trial)
        if self.state.has(marker):
            return
        upstream = self._shared("trained-target", trial)
        self._require(upstream)
        target = load_model(self._target_dir(trial))
        cfg = self.config.evaluation
        seed = self._shared_seed(_SEED_EVAL, trial)
        seed_everything(seed)
        model = train_classifier(self._dataset("evaluation_train"), cfg.arch.build(), cfg.train.build(seed),
                                 role=ModelRole.EVALUATION, paired_target=target,
                                 target_train=self._dataset("target_train"))
        out = self._eval_dir(trial)
        save_model(model, out)
        self._mark(marker, [out / "model.pt", out / "model.json"])

    def _shared_stages(self, trial: int) -> None:
        self.train_target(trial)
        self.train_gan(trial)
        self.train_evaluation(trial)

    # -- per-trial stages -----------------------------------------------------

    def _trial_dir(self, kind: str, trial: int) -> Path:
        return self.run_dir / kind / f"trial_{trial:03d}"

    def attack(self, trial: int) -> None:
        marker = f"reconstructions:{trial}"
        if self.state.has(marker):
            return
        self._require(self._shared("trained-target", trial), self._shared("gan", trial))
        target = load_model(self._target_dir(trial))
        g, d = load_prior(self._gan_dir(trial))
        cal = None
        cal_path = self._gan_dir(trial) / "calibration.json"
        if cal_path.exists():
            cal = RealismCalibration(**json.loads(cal_path.read_text()))
        seed = trial_seed(self.config.seed, trial)
        seed_everything(seed)
        rs = generate_reconstructions(target, g, self.config.attack.build(), self.config.n_per_class,
                                      discriminator=d, calibration=cal, seed=seed)
        bad = recheck_acceptance(rs, target)
        if bad:
            raise StageError(f"{len(bad)} accepted reconstructions are not classified as labelled by the target")
        self._timings[f"attack:{trial}"] = rs.attack_wall_clock_seconds
        out = save_reconstructions(rs, self._trial_dir("reconstructions", trial))
        self._mark(marker, [out / "index.json"])

    def caption(self, trial: int) -> None:
        marker = f"captions:{trial}"
        if self.state.has(marker):
            return
        self._require(f"reconstructions:{trial}")
        rs = load_reconstructions(self._trial_dir("reconstructions", trial))
        cap, text, _ = self.backends()
        items = rs.accepted()
        records = caption_many(cap, [it.image for it in items], [it.digest for it in items],
                               [it.class_id for it in items], prompt=self.config.backends.prompt,
                               workers=self.config.workers)
        cand = self._candidate_labels(records, text, rs)
        out = self._trial_dir("captions", trial)
        out.mkdir(parents=True, exist_ok=True)
        body = {"caption_backend": cap.identity, "text_backend": text.identity,
                "records": [r.to_dict() for r in records], "candidate_labels": cand.to_dict()}
        (out / "captions.json").write_text(canonical_json(body))
        self._mark(marker, [out / "captions.json"])

    def _vocabulary(self, class_names: dict[int, str]) -> list[str]:
        lab = self.config.labels
        names = class_names.values() if lab.inject_class_names else ()
        return build_vocabulary(lab.vocabulary, class_names=names, include_common=lab.include_common)

    def _candidate_labels(self, records: list[CaptionRecord], text: TextZeroShotBackend,
                          rs: ReconstructionSet) -> CandidateLabelSet:
        vocab = self._vocabulary(rs.class_names)
        lab = self.config.labels
        if not any(r.ok for r in records):
            return CandidateLabelSet([], {}, {"text_backend": text.identity, "captions_used": 0}, empty=True)
        return derive_candidate_labels(records, vocab, text, lab.per_caption_top_k, lab.support_threshold)

    def evaluate(self, trial: int) -> None:
        marker = f"metrics:{trial}"
        if self.state.has(marker):
            return
        self._require(f"captions:{trial}", self._shared("trained-evaluation", trial))
        rs = load_reconstructions(self._trial_dir("reconstructions", trial))
        body = json.loads((self._trial_dir("captions", trial) / "captions.json").read_text())
        records = [CaptionRecord.from_dict(r) for r in body["records"]]
        cand = CandidateLabelSet.from_dict(body["candidate_labels"])
        evaluation = load_model(self._eval_dir(trial))
        target_train = self._dataset("target_train")
        _, text, sim = self.backends()
        seed = derive_seed(self.config.seed, _SEED_PROXY, trial)
        recon = rs.accepted_dataset()
        proxy_dir = self.run_dir / "models" / "proxy" / f"trial_{trial:03d}"
        artifacts: list[Path] = []
        proxy: ModelHandle | None = None
        if len(recon):
            seed_everything(seed)
            proxy = fine_tune(evaluation, recon, self.config.proxy.train.build(seed))
            save_model(proxy, proxy_dir)
            artifacts += [proxy_dir / "model.pt", proxy_dir / "model.json"]
        lab = self.config.labels
        if proxy is None:
            scores = self._all_failed_scores(rs)
        else:
            inputs = MetricInputs(rs, records, cand, evaluation, proxy, target_train, rs.class_names)
            scores = compute_all(inputs, text, sim, lab.mode, self._vocabulary(rs.class_names), lab.decoys,
                                 lab.majority_vote, lab.synonyms)
        out = write_scores(scores, self._trial_dir("metrics", trial))
        composite = wcal(self.config.risk_weights(), {d: scores[d].overall for d in DIMENSIONS})
        (out / "wcal.json").write_text(canonical_json({"wcal": composite, "weights": self.config.weights}))
        artifacts += [out / f"{d.value}.json" for d in DIMENSIONS] + [out / "wcal.json"]
        self._mark(marker, artifacts)

    @staticmethod
    def _all_failed_scores(rs: ReconstructionSet) -> dict[RiskDimension, DimensionScore]:
        failed = sorted(rs.class_names)
        return {d: DimensionScore(d, 0.0, {}, {}, excluded_classes=failed, flags={INVERSION_FAILED: failed})
                for d in DIMENSIONS}

    def _trial(self, trial: int) -> None:
        if self.config.retrain_per_trial:
            self._shared_stages(trial)
        self.attack(trial)
        self.caption(trial)
        self.evaluate(trial)

    # -- report ---------------------------------------------------------------

    def build_report(self) -> RiskReport:
        n = self.config.n_trials
        self._require(*[f"metrics:{t}" for t in range(n)])
        per_trial = [load_scores(self._trial_dir("metrics", t)) for t in range(n)]
        wcals = [json.loads((self._trial_dir("metrics", t) / "wcal.json").read_text())["wcal"] for t in range(n)]
        target = load_model(self._target_dir(0))
        dims = [_pool_dimension(d, [s[d] for s in per_trial]) for d in DIMENSIONS]
        trials = {d.value: aggregate_trials([s[d].overall for s in per_trial]) for d in DIMENSIONS}
        agg = aggregate_trials(wcals)
        return RiskReport(
            target_descriptor=target.descriptor,
            attack_descriptor=self.config.attack.build().descriptor,
            dimension_scores=dims,
            weights=self.config.risk_weights(),
            wcal=agg,
            bin=bin_risk(min(1.0, max(0.0, agg.mean))),
            per_trial_wcal=wcals,
            dimension_trials=trials,
            class_names=dict(target.class_names),
            metadata={"provenance": self._provenance(), "volatile": self._volatile()},
        )

    def _provenance(self) -> dict[str, Any]:
        n = self.config.n_trials
        models = {"target": self._target_dir(0), "evaluation": self._eval_dir(0)}
        if self.config.retrain_per_trial:
            models = {}
            for t in range(n):
                models[f"target:{t}"] = self._target_dir(t)
                models[f"evaluation:{t}"] = self._eval_dir(t)
        digests = {k: json.loads((v / "model.json").read_text())["parameters_digest"] for k, v in models.items()}
        for t in range(n):
            p = self.run_dir / "models" / "proxy" / f"trial_{t:03d}" / "model.json"
            if p.exists():
                digests[f"proxy:{t}"] = json.loads(p.read_text())["parameters_digest"]
        gans = {}
        for t in (range(n) if self.config.retrain_per_trial else [0]):
            meta = json.loads((self._gan_dir(t) / "gan.json").read_text())
            gans[str(t)] = {"generator": meta["generator_digest"], "discriminator": meta["discriminator_digest"]}
        recon = {}
        for t in range(n):
            index = json.loads((self._trial_dir("reconstructions", t) / "index.json").read_text())
            recon[str(t)] = [{"path": f"reconstructions/trial_{t:03d}/{e['path']}", "digest": e["digest"],
                              "accepted": e["accepted"]} for e in index["items"]]
        captions = {}
        for t in range(n):
            body = json.loads((self._trial_dir("captions", t) / "captions.json").read_text())
            captions[str(t)] = {"caption_backend": body["caption_backend"], "text_backend": body["text_backend"]}
        files = {}
        for t in range(n):
            for rel, dg in self.state.markers[f"metrics:{t}"].items():
                files[rel] = dg
            for rel, dg in self.state.markers[f"captions:{t}"].items():
                files[rel] = dg
        _, _, sim = self.backends()
        return {
            "config_digest": self.config.digest(),
            "master_seed": self.config.seed,
            "trial_seeds": [trial_seed(self.config.seed, t) for t in range(n)],
            "model_parameters": digests,
            "gan_parameters": gans,
            "backends": {"captions": captions, "similarity": sim.identity},
            "reconstructions": recon,
            "files": files,
        }

    def _volatile(self) -> dict[str, Any]:
        return {"created_at": datetime.now(timezone.utc).isoformat(), "run_dir": str(self.run_dir),
                "wall_clock_seconds": dict(self._timings)}

    def report(self) -> RiskReport:
        started = time.perf_counter()
        rep = self.build_report()
        self._timings["report"] = time.perf_counter() - started
        rep.metadata["volatile"] = self._volatile()
        written = emit_report(rep, self.run_dir)
        self.state.markers.pop("report", None)
        self._mark("report", [written["csv"], written["md"]])
        return rep

    # -- drivers --------------------------------------------------------------

    def run_stage(self, stage: str) -> None:
        n = self.config.n_trials
        shared = {"train-target": self.train_target, "train-gan": self.train_gan}
        if stage in shared:
            for t in (range(n) if self.config.retrain_per_trial else [0]):
                shared[stage](t)
            return
        per_trial: dict[str, Callable[[int], None]] = {"attack": self.attack, "caption": self.caption,
                                                       "evaluate": self.evaluate}
        if stage in per_trial:
            for t in range(n):
                if stage == "evaluate":
                    self.train_evaluation(t if self.config.retrain_per_trial else 0)
                per_trial[stage](t)
            return
        if stage == "report":
            self.report()
            return
        raise ConfigError(f"unknown stage {stage!r}")

    def run(self, stop_after: str | None = None) -> RiskReport | None:
        """All stages, skipping completed markers. Returns ``None`` if stopped early."""
        self.stop_after = stop_after
        try:
            t0 = time.perf_counter()
            if not self.config.retrain_per_trial:
                self._shared_stages(0)
            for t in range(self.config.n_trials):
                self._trial(t)
            self._timings["stages"] = time.perf_counter() - t0
            return self.report()
        except StopRequested as stop:
            logger.info("stopped after %s", stop)
            return None
        finally:
            self.stop_after = None


def _pool_dimension(dim: RiskDimension, trials: list[DimensionScore]) -> DimensionScore:
    """Across-trial view: mean overall, per-class mean over the trials that scored the class."""
    per_class: dict[int, float] = {}
    counts: dict[int, int] = {}
    classes = sorted({c for s in trials for c in s.per_class})
    for c in classes:
        vals = [s.per_class[c] for s in trials if c in s.per_class]
        per_class[c] = float(np.mean(vals))
        counts[c] = sum(s.sample_counts.get(c, 0) for s in trials)
    excluded = sorted(set.intersection(*[set(s.excluded_classes) for s in trials])) if trials else []
    flags: dict[str, set[int]] = {}
    for s in trials:
        for k, v in s.flags.items():
            flags.setdefault(k, set()).update(v)
    return DimensionScore(dim, float(np.mean([s.overall for s in trials])), per_class, counts, excluded,
                          {k: sorted(v) for k, v in flags.items()})


def run_pipeline(config: ExperimentConfig, run_dir: str | Path | None = None,
                 stop_after: str | None = None, **backends: Any) -> RiskReport | None:
    return Pipeline(config, run_dir, **backends).run(stop_after=stop_after)


def resume(run_dir: str | Path, **backends: Any) -> RiskReport | None:
    """Continue a run from its persisted configuration and last completed marker."""
    from invrisk.orchestrator.config import parse_config

    run_dir = Path(run_dir)
    cfg_path = run_dir / "config.json"
    if not (run_dir / "state.json").exists() or not cfg_path.exists():
        raise ConfigError(f"{run_dir} is not a run directory")
    cfg = parse_config(json.loads(cfg_path.read_text()), run_dir)
    return Pipeline(cfg, run_dir, **backends).run()
