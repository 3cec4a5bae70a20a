"""Command-line entry points.

Subcommands: search, evaluate, experiment, ablate, gradcheck,
oracle-compare, gen-data.  All accept --config <yaml> and repeated
--set key=value dotted overrides (overrides beat file values).  Exit
code 0 on success; failures print one machine-readable error line to
stderr and exit 1.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

import numpy as np

from . import autodiff as ad
from . import trilevel as tl
from .autodiff import Tensor
from .config import parse_config
from .data import NoiseSpec, load_dataset, make_synthetic, save_dataset
from .harness import (ABLATIONS, benchmark_splits, format_table, resolve_space,
                      run_ablation, run_evaluation_phase, run_experiment,
                      run_search_phase)
from .metrics import MetricsWriter
from .models import ModelConfig
from .search_space import CellSpec, DiscreteArchitecture, OpSet


def _add_common(p):
    p.add_argument("--config", help="YAML config file")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="dotted config override, e.g. search.eta_a=0.2")
    p.add_argument("--out", help="output directory (else $LFM_OUT_DIR or ./runs)")


def _load_cfg(args, extra=()):
    overrides = list(extra) + list(args.set)
    if getattr(args, "out", None):
        overrides.append(f"out_dir={args.out}")
    return parse_config(args.config, overrides)


def cmd_search(args):
    cfg = _load_cfg(args)
    seed = cfg.seeds[0] if args.seed is None else args.seed
    os.makedirs(cfg.out_dir, exist_ok=True)
    train, val, _ = benchmark_splits(cfg, seed)
    run_id = f"{cfg.mode}-seed{seed}"
    mpath = os.path.join(cfg.out_dir, f"{run_id}.metrics.jsonl")
    tpath = os.path.join(cfg.out_dir, f"{run_id}.timings.jsonl")
    with MetricsWriter(mpath, tpath) as writer:
        arch, _ = run_search_phase(cfg, cfg.mode, seed, train, val, writer)
    apath = os.path.join(cfg.out_dir, f"arch-{run_id}.txt")
    with open(apath, "w") as f:
        f.write(arch.to_text())
    print(f"architecture written to {apath}")
    print(arch.to_text().rstrip())


def cmd_evaluate(args):
    cfg = _load_cfg(args)
    seed = cfg.seeds[0] if args.seed is None else args.seed
    _, op_set = resolve_space(cfg)
    with open(args.arch) as f:
        arch = DiscreteArchitecture.from_text(f.read(), op_set.names)
    train, val, test = benchmark_splits(cfg, seed)
    err = run_evaluation_phase(cfg, arch, seed, train, val, test,
                               run_id=f"eval-seed{seed}")
    print(json.dumps({"seed": seed, "test_error": err}, sort_keys=True))


def cmd_experiment(args):
    cfg = _load_cfg(args)
    summary = run_experiment(cfg)
    path = os.path.join(cfg.out_dir, "summary.json")
    with open(path, "w") as f:
        json.dump(summary, f, sort_keys=True, indent=2)
    print(json.dumps(summary, sort_keys=True))


def cmd_ablate(args):
    cfg = _load_cfg(args)
    which = args.which or ["no-u", "no-x", "no-z"]
    rows = run_ablation(cfg, which)
    path = os.path.join(cfg.out_dir, "ablation.json")
    with open(path, "w") as f:
        json.dump(rows, f, sort_keys=True, indent=2)
    print(format_table(rows))


def cmd_gradcheck(args):
    rng = np.random.default_rng(args.seed)
    worst = 0.0
    for _ in range(args.trials):
        n_in, n_hidden = int(rng.integers(2, 6)), int(rng.integers(2, 6))
        w1 = Tensor(rng.standard_normal((n_in, n_hidden)))
        w2 = Tensor(rng.standard_normal((n_hidden, 1)))

        def f(t, w1=w1, w2=w2):
            return ad.tsum(ad.sigmoid(ad.relu(t @ w1) @ w2))

        x = Tensor(rng.standard_normal((3, n_in)))
        worst = max(worst, ad.grad_check(f, x, step=args.step))
    print(json.dumps({"trials": args.trials, "max_rel_error": worst},
                     sort_keys=True))
    if worst >= 1e-5:
        raise RuntimeError(f"gradient check failed: {worst}")


def cmd_oracle_compare(args):
    model = ModelConfig(input_kind="flat", in_features=6, hidden=6, classes=3,
                        encoder_dim=8)
    cfg = tl.SearchConfig(b_tr=16, b_val=8)
    spec = CellSpec(node_count=2)
    ops = OpSet(("linear", "identity"))
    rows = []
    for s in range(args.trials):
        ds = make_synthetic(24, 3, NoiseSpec(0.2), 500 + s, form="flat",
                            features=6)
        tb = tl.batch_of(ds, np.arange(16))
        vb = tl.batch_of(ds, np.arange(16, 24))
        state = tl.init_state(model, cfg, spec, ops, seed=s)
        rng = np.random.default_rng(9000 + s)
        for e in state.arch:
            state.arch[e] = Tensor(rng.standard_normal(2) * 0.3, requires_grad=True)
        state.r = Tensor(rng.standard_normal(8) * 0.5, requires_grad=True)
        oracle = tl.exact_hypergradient_oracle(state, tb, vb, cfg, model, spec, ops)
        graph = tl.build_step_graph(state, tb, vb, cfg, model, spec, ops)
        new_arch = tl.update_architecture(state, graph, tb, vb, cfg, model,
                                          spec, ops)
        est = np.concatenate([(state.arch[e].data - new_arch[e].data) / cfg.eta_a
                              for e in sorted(state.arch)])
        ref = np.concatenate([oracle["arch"][e].data for e in sorted(state.arch)])
        cos = float(est @ ref / (np.linalg.norm(est) * np.linalg.norm(ref)))
        rows.append(cos)
        print(json.dumps({"state": s, "arch_cosine": cos}, sort_keys=True))
    print(json.dumps({"min_arch_cosine": min(rows)}, sort_keys=True))
    if min(rows) < 0.95:
        raise RuntimeError(f"architecture direction diverges from oracle: {min(rows)}")


def cmd_gen_data(args):
    ds = make_synthetic(args.n, args.classes, NoiseSpec(args.noise_rate),
                        args.seed, form=args.form, image_size=args.image_size,
                        features=args.features)
    save_dataset(ds, args.path)
    check = load_dataset(args.path)
    print(json.dumps({"path": args.path, "n": len(check),
                      "classes": check.n_classes,
                      "dims": list(check.x.shape[1:])}, sort_keys=True))


def build_parser():
    ap = argparse.ArgumentParser(prog="lfm",
                                 description="tri-level mistake-driven "
                                             "architecture search, desk scale")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("search", help="run the search phase for one seed")
    _add_common(p)
    p.add_argument("--seed", type=int)
    p.set_defaults(fn=cmd_search)

    p = sub.add_parser("evaluate", help="retrain a discrete architecture from scratch")
    _add_common(p)
    p.add_argument("--arch", required=True, help="architecture text file")
    p.add_argument("--seed", type=int)
    p.set_defaults(fn=cmd_evaluate)

    p = sub.add_parser("experiment", help="two-phase multi-seed experiment")
    _add_common(p)
    p.set_defaults(fn=cmd_experiment)

    p = sub.add_parser("ablate", help="full configuration vs ablated variants")
    _add_common(p)
    p.add_argument("--which", action="append", choices=ABLATIONS)
    p.set_defaults(fn=cmd_ablate)

    p = sub.add_parser("gradcheck", help="finite-difference check of the tape")
    p.add_argument("--trials", type=int, default=100)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--step", type=float, default=1e-6)
    p.set_defaults(fn=cmd_gradcheck)

    p = sub.add_parser("oracle-compare",
                       help="update directions vs the exact unrolled oracle")
    p.add_argument("--trials", type=int, default=20)
    p.set_defaults(fn=cmd_oracle_compare)

    p = sub.add_parser("gen-data", help="write a synthetic dataset container")
    p.add_argument("path")
    p.add_argument("--n", type=int, default=2000)
    p.add_argument("--classes", type=int, default=4)
    p.add_argument("--noise-rate", type=float, default=0.0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--form", choices=("image", "flat"), default="image")
    p.add_argument("--image-size", type=int, default=8)
    p.add_argument("--features", type=int, default=8)
    p.set_defaults(fn=cmd_gen_data)
    return ap


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        args.fn(args)
    except Exception as e:  # noqa: BLE001 - single machine-readable failure line
        print(json.dumps({"error": type(e).__name__, "message": str(e)},
                         sort_keys=True), file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
