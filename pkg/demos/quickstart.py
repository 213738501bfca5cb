"""Assess a small synthetic classifier end to end with the stub backends.

Writes a four-class shape dataset and a JSON config into a scratch
directory, runs every pipeline stage and prints the markdown summary.

Usage::

    python3 demos/quickstart.py [workdir]
"""

from __future__ import annotations

import json
import sys
import tempfile
from pathlib import Path

from invrisk.data import make_synthetic_dataset, save_dataset, split_dataset
from invrisk.orchestrator import run_pipeline, validate_config


def write_inputs(root: Path) -> Path:
    full = make_synthetic_dataset(60, size=32, seed=0)
    parts = split_dataset(full, {"target_train": 0.5, "target_test": 0.25, "held_back": 0.25}, seed=0)
    public = make_synthetic_dataset(50, size=32, seed=1, name="public-pool")
    save_dataset(parts["target_train"], root / "data" / "target_train")
    save_dataset(parts["target_test"], root / "data" / "target_test")
    save_dataset(public, root / "data" / "public")
    config = {
        "datasets": {"target_train": "data/target_train", "target_test": "data/target_test",
                     "public": "data/public"},
        "target": {"arch": {"family": "vgg", "width": 8, "depth": 2}, "train": {"epochs": 20}},
        "evaluation": {"arch": {"family": "vit", "width": 8, "depth": 2}, "train": {"epochs": 12}},
        "proxy": {"train": {"epochs": 5}},
        "gan": {"train": {"epochs": 50, "batch_size": 16, "lr_generator": 5e-4, "architecture_scale": 2}},
        "attack": {"kind": "fv", "fv": {"steps": 30}},
        "n_per_class": 10,
        "n_trials": 2,
        "seed": 0,
    }
    path = root / "config.json"
    path.write_text(json.dumps(config, indent=2))
    return path


def main(argv: list[str]) -> None:
    root = Path(argv[0]) if argv else Path(tempfile.mkdtemp(prefix="invrisk-quickstart-"))
    root.mkdir(parents=True, exist_ok=True)
    cfg = validate_config(write_inputs(root))
    report = run_pipeline(cfg, root / "run")
    print((root / "run" / "summary.md").read_text())
    print(f"WCAL {report.wcal.mean:.4f}, risk level {report.bin.level.value}; artifacts in {root / 'run'}")


if __name__ == "__main__":
    main(sys.argv[1:])
