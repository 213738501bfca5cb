"""Report serialization: canonical JSON, per-class CSV and a markdown summary.

``report.json`` holds two sections. ``payload`` is a pure function of the
configuration and master seed and is written canonically, so identical runs
give byte-identical payloads. ``volatile`` carries timestamps, wall-clock
times and the run directory.
"""

from __future__ import annotations

import csv
import io
import json
from pathlib import Path
from typing import Any, Iterable, Mapping

from invrisk.riskcore import (
    DIMENSIONS,
    HIGH_LOWER,
    LOW_UPPER,
    DimensionScore,
    RiskBin,
    RiskLevel,
    RiskReport,
    RiskWeights,
    TrialAggregate,
)

SCHEMA = "invrisk.report/1"
LEAKAGE_NOTE = "higher = more private-data leakage"
BOUNDARY_NOTE = (f"Bins: low below {LOW_UPPER:.2f}, medium from {LOW_UPPER:.2f} to {HIGH_LOWER:.2f} inclusive, "
                 f"high above {HIGH_LOWER:.2f}. A composite of exactly {LOW_UPPER:.2f} or {HIGH_LOWER:.2f} "
                 "is reported as medium.")
FORMATS = frozenset({"json", "csv", "md"})


def canonical_json(obj: Any) -> str:
    return json.dumps(obj, sort_keys=True, indent=2, ensure_ascii=False, allow_nan=False) + "\n"


def report_payload(report: RiskReport) -> dict[str, Any]:
    meta = dict(report.metadata)
    return {
        "schema": SCHEMA,
        "annotation": LEAKAGE_NOTE,
        "target": report.target_descriptor,
        "attack": report.attack_descriptor,
        "class_names": {str(k): v for k, v in sorted(report.class_names.items())},
        "weights": report.weights.to_dict(),
        "wcal": {**report.wcal.to_dict(), "reported_half_width": report.wcal.reported_half_width,
                 "interval": list(report.wcal.interval())},
        "risk_level": report.bin.level.value,
        "bins": {"low_upper": report.bin.low_upper, "high_lower": report.bin.high_lower,
                 "medium_closed": True},
        "per_trial_wcal": list(report.per_trial_wcal),
        "dimensions": {
            s.dimension.value: {"score": s.to_dict(),
                                "trials": report.dimension_trials[s.dimension.value].to_dict()}
            for s in report.dimension_scores
        },
        "provenance": meta.get("provenance", {}),
    }


def report_from_payload(payload: Mapping[str, Any], volatile: Mapping[str, Any] | None = None) -> RiskReport:
    if payload.get("schema") != SCHEMA:
        raise ValueError(f"unsupported report schema {payload.get('schema')!r}")
    dims = payload["dimensions"]
    scores = [DimensionScore.from_dict(dims[d.value]["score"]) for d in DIMENSIONS if d.value in dims]
    metadata: dict[str, Any] = {"provenance": payload.get("provenance", {})}
    if volatile is not None:
        metadata["volatile"] = dict(volatile)
    return RiskReport(
        target_descriptor=payload["target"],
        attack_descriptor=payload["attack"],
        dimension_scores=scores,
        weights=RiskWeights(payload["weights"]),
        wcal=TrialAggregate.from_dict(payload["wcal"]),
        bin=RiskBin(RiskLevel(payload["risk_level"]), payload["bins"]["low_upper"], payload["bins"]["high_lower"]),
        per_trial_wcal=[float(v) for v in payload["per_trial_wcal"]],
        dimension_trials={k: TrialAggregate.from_dict(v["trials"]) for k, v in dims.items()},
        class_names={int(k): v for k, v in payload["class_names"].items()},
        metadata=metadata,
    )


def to_json(report: RiskReport) -> str:
    return canonical_json({"payload": report_payload(report), "volatile": report.metadata.get("volatile", {})})


def from_json(text: str) -> RiskReport:
    doc = json.loads(text)
    return report_from_payload(doc["payload"], doc.get("volatile", {}))


def payload_bytes(path: str | Path) -> bytes:
    """Canonical bytes of the payload section of a written ``report.json``."""
    doc = json.loads(Path(path).read_text(encoding="utf-8"))
    return canonical_json(doc["payload"]).encode("utf-8")


def to_csv(report: RiskReport) -> str:
    """One row per (dimension, class); excluded classes have an empty score."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["dimension", "class_id", "class_name", "score", "sample_count", "excluded", "flags"])
    for s in report.dimension_scores:
        for cid in sorted(report.class_names):
            flags = sorted(k for k, v in s.flags.items() if cid in v)
            score = s.per_class.get(cid)
            w.writerow([s.dimension.value, cid, report.class_names[cid],
                        "" if score is None else repr(float(score)), s.sample_counts.get(cid, 0),
                        int(cid in s.excluded_classes), ";".join(flags)])
    return buf.getvalue()


def _pct(v: float) -> str:
    return f"{100.0 * v:.2f}%"


def to_markdown(report: RiskReport) -> str:
    agg = report.wcal
    lines = [
        "# Inversion risk report",
        "",
        f"- target: `{report.target_descriptor}`",
        f"- attack: `{report.attack_descriptor}`",
        f"- trials: {agg.n_trials}",
        "",
        f"risk level: {report.bin.level.value.upper()}",
        "",
        f"WCAL: {_pct(agg.mean)} +/- {_pct(agg.reported_half_width)} (95% t-interval"
        f"{', single trial' if agg.degenerate else ''}).",
        "",
        f"All scores are accuracies; {LEAKAGE_NOTE}.",
        "",
        "| dimension | weight | mean | 95% CI half-width | flags |",
        "|---|---|---|---|---|",
    ]
    for s in report.dimension_scores:
        t = report.dimension_trials[s.dimension.value]
        flags = ", ".join(f"{k}: {v}" for k, v in sorted(s.flags.items())) or "-"
        lines.append(f"| {s.dimension.value} | {report.weights[s.dimension]:.3f} | {_pct(t.mean)} | "
                     f"{_pct(t.reported_half_width)} | {flags} |")
    lines += ["", "## Per-trial trend", "",
              "| trial | " + " | ".join(d.value for d in DIMENSIONS) + " | WCAL |",
              "|---|" + "---|" * (len(DIMENSIONS) + 1)]
    for i, w in enumerate(report.per_trial_wcal):
        vals = [report.dimension_trials[d.value].values[i] for d in DIMENSIONS if d.value in report.dimension_trials]
        lines.append(f"| {i} | " + " | ".join(_pct(v) for v in vals) + f" | {_pct(w)} |")
    lines += ["", "## Per-class scores", "",
              "| class | " + " | ".join(d.value for d in DIMENSIONS) + " |",
              "|---|" + "---|" * len(DIMENSIONS)]
    for cid in sorted(report.class_names):
        row = []
        for s in report.dimension_scores:
            v = s.per_class.get(cid)
            row.append("excluded" if v is None else _pct(v))
        lines.append(f"| {report.class_names[cid]} | " + " | ".join(row) + " |")
    lines += ["", f"Note: {BOUNDARY_NOTE}", ""]
    return "\n".join(lines)


def emit_report(report: RiskReport, directory: str | Path, formats: Iterable[str] = FORMATS) -> dict[str, Path]:
    formats = set(formats)
    unknown = formats - FORMATS
    if unknown:
        raise ValueError(f"unknown report formats {sorted(unknown)}")
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    written: dict[str, Path] = {}
    if "json" in formats:
        written["json"] = directory / "report.json"
        written["json"].write_text(to_json(report), encoding="utf-8")
    if "csv" in formats:
        written["csv"] = directory / "report.csv"
        written["csv"].write_text(to_csv(report), encoding="utf-8")
    if "md" in formats:
        written["md"] = directory / "summary.md"
        written["md"].write_text(to_markdown(report), encoding="utf-8")
    return written


def sweep_summary(cells: Iterable[tuple[str, RiskReport]]) -> str:
    """Trend table across sweep cells: one row per cell, one column per dimension."""
    lines = ["# Sweep summary", "", f"All scores are accuracies; {LEAKAGE_NOTE}.", "",
             "| cell | target | " + " | ".join(d.value for d in DIMENSIONS) + " | WCAL | risk |",
             "|---|---|" + "---|" * (len(DIMENSIONS) + 2)]
    for cell_id, rep in cells:
        vals = [_pct(rep.dimension_trials[d.value].mean) for d in DIMENSIONS]
        lines.append(f"| {cell_id} | {rep.target_descriptor} | " + " | ".join(vals)
                     + f" | {_pct(rep.wcal.mean)} +/- {_pct(rep.wcal.reported_half_width)} "
                       f"| {rep.bin.level.value.upper()} |")
    lines += ["", f"Note: {BOUNDARY_NOTE}", ""]
    return "\n".join(lines)

