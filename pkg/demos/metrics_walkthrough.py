"""Show how per-dimension accuracies become a composite risk level.

No models are trained here: the four dimension scores are hand-picked,
combined with equal and with custom weights, binned, and aggregated over
a handful of simulated trials.

Usage::

    python3 demos/metrics_walkthrough.py
"""

from __future__ import annotations

import numpy as np

from invrisk.riskcore import DIMENSIONS, aggregate_trials, bin_risk, per_class_accuracy, wcal


def main() -> None:
    score = per_class_accuracy([0, 0, 1, 1, 2, 1], [0, 0, 1, 2, 2, 2], class_set=[0, 1, 2, 3])
    print("per-class accuracy:", score.per_class, "overall", round(score.overall, 4),
          "excluded", score.excluded_classes)

    dims = [d.value for d in DIMENSIONS]
    scores = [0.72, 0.55, 0.61, 0.48]
    equal = wcal({d: 0.25 for d in dims}, scores)
    skewed = wcal(dict(zip(dims, [0.4, 0.2, 0.2, 0.2])), scores)
    for name, value in [("equal weights", equal), ("quality-heavy weights", skewed)]:
        print(f"{name}: WCAL {value:.4f} -> {bin_risk(value).level.value}")

    for edge in (0.55, 0.65):
        print(f"composite exactly {edge:.2f} -> {bin_risk(edge).level.value}")

    rng = np.random.default_rng(0)
    trials = list(equal + rng.normal(0.0, 0.01, size=10))
    agg = aggregate_trials(trials)
    low, high = agg.interval()
    print(f"10 trials: mean {agg.mean:.4f}, 95% t-interval [{low:.4f}, {high:.4f}]")


if __name__ == "__main__":
    main()
