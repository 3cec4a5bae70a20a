#!/usr/bin/env python3
"""Run the noisy-label benchmark: full search vs the uniform-weight baseline.

Usage: python3 scripts/run_benchmark.py [out_dir] [--quick]

--quick shrinks the dataset and epoch counts for a fast sanity pass.
"""

import json
import os
import sys

sys.path.insert(0, os.path.join(os.path.dirname(__file__), "..", "src"))

from lfm.config import parse_config
from lfm.harness import run_experiment

QUICK = ["data.n=240", "search.epochs=1", "eval_epochs=3", "seeds=0,1"]


def main(argv):
    out = argv[1] if len(argv) > 1 and not argv[1].startswith("--") else "runs/benchmark"
    overrides = [f"out_dir={out}"]
    if "--quick" in argv:
        overrides += QUICK
    results = {}
    for mode in ("lfm", "darts-baseline"):
        cfg = parse_config(None, overrides + [f"mode={mode}"])
        results[mode] = run_experiment(cfg)
        print(f"{mode}: mean test error {results[mode]['mean_test_error']:.4f} "
              f"(std {results[mode]['std_test_error']:.4f})")
    with open(os.path.join(out, "benchmark.json"), "w") as f:
        json.dump(results, f, sort_keys=True, indent=2)
    gap = results["darts-baseline"]["mean_test_error"] - results["lfm"]["mean_test_error"]
    print(f"margin over uniform-weight baseline: {gap:+.4f}")


if __name__ == "__main__":
    main(sys.argv)
