#!/usr/bin/env python3
"""Ablation sweep over the reweighting factors (no-u / no-x / no-z).

Usage: python3 scripts/run_ablation.py [out_dir] [--quick]
"""

import json
import os
import sys

sys.path.insert(0, os.path.join(os.path.dirname(__file__), "..", "src"))

from lfm.config import parse_config
from lfm.harness import format_table, run_ablation

QUICK = ["data.n=240", "search.epochs=1", "eval_epochs=3", "seeds=0,1"]


def main(argv):
    out = argv[1] if len(argv) > 1 and not argv[1].startswith("--") else "runs/ablation"
    overrides = [f"out_dir={out}"]
    if "--quick" in argv:
        overrides += QUICK
    cfg = parse_config(None, overrides)
    rows = run_ablation(cfg)
    print(format_table(rows))
    with open(os.path.join(out, "ablation.json"), "w") as f:
        json.dump(rows, f, sort_keys=True, indent=2)


if __name__ == "__main__":
    main(sys.argv)
