"""Config-driven run engine, report emission and the ``invrisk`` command line."""

from invrisk.orchestrator.config import ExperimentConfig, expand_sweep, parse_config, validate_config
from invrisk.orchestrator.pipeline import Pipeline, RunState, resume, run_pipeline, trial_seed
from invrisk.orchestrator.report import emit_report, from_json, payload_bytes, to_json

__all__ = [
    "ExperimentConfig", "Pipeline", "RunState", "emit_report", "expand_sweep", "from_json", "parse_config",
    "payload_bytes", "resume", "run_pipeline", "to_json", "trial_seed", "validate_config",
]
