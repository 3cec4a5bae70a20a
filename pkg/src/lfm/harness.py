"""Two-phase experiment driver: architecture search, then evaluation of
the discretized architecture from scratch, plus baselines and ablation
sweeps.

The evaluation phase never touches search-phase weights: the discrete
network is freshly initialized and trained on the union of the training
and validation splits with uniform example weights, identically for
every mode.
"""

from __future__ import annotations

import dataclasses
import os
import warnings

import numpy as np

from . import trilevel as tl
from .autodiff import Tensor
from .config import ExperimentConfig, dump_config
from .data import Dataset, NoiseSpec, apply_label_noise, make_synthetic, split_dataset
from .evaluate import error_rate, train_discrete
from .metrics import MetricsWriter
from .models import learner_forward
from .search_space import (IMAGE_OPS, FLAT_OPS, CellSpec, DiscreteArchitecture,
                           OpSet, derive_architecture)

ABLATIONS = ("no-u", "no-x", "no-z", "metric:cosine", "metric:l2")


def resolve_space(cfg: ExperimentConfig):
    spec = CellSpec(node_count=cfg.cell_nodes)
    if cfg.op_set is not None:
        names = tuple(cfg.op_set)
    else:
        names = IMAGE_OPS if cfg.model.input_kind == "image" else FLAT_OPS
    return spec, OpSet(names)


def benchmark_splits(cfg: ExperimentConfig, seed):
    """Clean pool, deterministic split, label noise on the train split
    only; validation stays clean."""
    d = cfg.data
    pool = make_synthetic(d.n, d.classes, NoiseSpec(0.0), seed * 1000 + 17,
                          form=d.form, image_size=d.image_size,
                          features=d.features)
    train, val, test = split_dataset(pool, d.fractions, seed * 1000 + 29)
    train = apply_label_noise(train, NoiseSpec(d.noise_rate), seed * 1000 + 43)
    return train, val, test


def search_cfg_for_mode(cfg: ExperimentConfig, mode, seed):
    sc = dataclasses.replace(cfg.search, seed=seed)
    if mode == "darts-baseline":
        sc = dataclasses.replace(sc, uniform_weights=True, eta_v=0.0, eta_r=0.0)
    return sc


def _val_error(state, val_ds, model_cfg, spec, op_set):
    logits = learner_forward(state.arch, state.w2, Tensor(val_ds.x), model_cfg,
                             spec, op_set)
    pred = np.argmax(logits.data, axis=1)
    return float(np.mean(pred != val_ds.labels))


def run_search_phase(cfg, mode, seed, train, val, writer=None):
    """One seed of the search phase for a mode; returns the discrete
    architecture and the per-epoch records."""
    spec, op_set = resolve_space(cfg)
    sc = search_cfg_for_mode(cfg, mode, seed)

    def sink(record):
        if writer is not None:
            writer.emit({"run_id": f"{mode}-seed{seed}", "phase": "search",
                         "seed": seed, **record})

    if mode in ("lfm", "darts-baseline"):
        extra = lambda st: {"w2_val_error": _val_error(st, val, cfg.model, spec, op_set)}
        arch, _, records = tl.run_search(sc, cfg.model, spec, op_set, train,
                                         val, sink=sink, extra_metrics=extra)
        return arch, records
    if mode == "single-set-baseline":
        return _single_set_search(cfg, sc, spec, op_set, train, val, sink)
    if mode == "random-search":
        return _random_search(cfg, sc, spec, op_set, train, val, sink)
    raise ValueError(f"unknown mode '{mode}'")


def _single_set_search(cfg, sc, spec, op_set, train, val, sink):
    """Degenerate one-weight-set comparison: phase A searches with
    uniform weights; phase B recomputes example weights once from the
    trained weights and re-searches on them, no end-to-end coupling."""
    half = max(1, sc.epochs // 2)
    sc_a = dataclasses.replace(sc, uniform_weights=True, eta_v=0.0, eta_r=0.0,
                               epochs=half)
    _, state, recs_a = tl.run_search(sc_a, cfg.model, spec, op_set, train, val)
    sc_b = dataclasses.replace(sc, eta_v=0.0, eta_r=0.0, epochs=sc.epochs - half)
    state.w1 = {k: t.copy_leaf() for k, t in state.w2.items()}
    # Frozen coefficients must be nonzero for the one-shot reweighting to
    # see the mistakes at all; all-ones keeps every validation slot equal.
    state.r = Tensor(np.ones(sc.b_val), requires_grad=True)
    arch, _, recs_b = tl.run_search(sc_b, cfg.model, spec, op_set, train, val,
                                    state=state)
    records = recs_a + recs_b
    for i, r in enumerate(records):
        r["epoch"] = i
        if sink:
            sink(r)
    return arch, records


def _random_search(cfg, sc, spec, op_set, train, val, sink):
    """Uniform samples from the discrete space, each briefly trained;
    the best by validation error is kept."""
    rng = np.random.default_rng(sc.seed)
    names = tuple(op_set.names)
    best, best_err = None, None
    for trial in range(cfg.random_search_samples):
        retained = {edge: (int(rng.integers(len(names))),)
                    for edge in spec.edges}
        disc = DiscreteArchitecture(op_names=names, retained=retained)
        w = train_discrete(disc, cfg.model, spec, train,
                           epochs=max(1, sc.epochs // 2), lr=cfg.eval_lr,
                           batch_size=cfg.eval_batch, seed=sc.seed * 100 + trial)
        err = error_rate(disc, w, cfg.model, spec, val)
        if sink:
            sink({"epoch": trial, "w2_val_error": err})
        if best_err is None or err < best_err:
            best, best_err = disc, err
    return best, []


def run_evaluation_phase(cfg, arch, seed, train, val, test, writer=None,
                         run_id=""):
    """Fresh-init retraining of the discrete architecture on the union
    of train and validation, uniform weights; returns the test error."""
    spec, _ = resolve_space(cfg)
    merged = Dataset(np.concatenate([train.x, val.x]),
                     np.concatenate([train.labels, val.labels]),
                     train.n_classes, provenance=train.provenance)

    def sink(record):
        if writer is not None:
            writer.emit({"run_id": run_id, "phase": "eval", "seed": seed,
                         **record})

    weights = train_discrete(arch, cfg.model, spec, merged,
                             epochs=cfg.eval_epochs, lr=cfg.eval_lr,
                             batch_size=cfg.eval_batch, seed=seed * 7919 + 1,
                             sink=sink)
    return error_rate(arch, weights, cfg.model, spec, test)


def run_experiment(cfg: ExperimentConfig, mode=None):
    """Search then evaluate for every seed; mean and std over the seeds
    that completed.  Failed seeds are recorded and excluded."""
    mode = mode or cfg.mode
    os.makedirs(cfg.out_dir, exist_ok=True)
    dump_config(cfg, os.path.join(cfg.out_dir, "config.resolved.yaml"))
    errors, failed = [], []
    for seed in cfg.seeds:
        run_id = f"{mode}-seed{seed}"
        mpath = os.path.join(cfg.out_dir, f"{run_id}.metrics.jsonl")
        tpath = os.path.join(cfg.out_dir, f"{run_id}.timings.jsonl")
        try:
            train, val, test = benchmark_splits(cfg, seed)
            with MetricsWriter(mpath, tpath) as writer:
                arch, _ = run_search_phase(cfg, mode, seed, train, val, writer)
                with open(os.path.join(cfg.out_dir, f"arch-{run_id}.txt"), "w") as f:
                    f.write(arch.to_text())
                err = run_evaluation_phase(cfg, arch, seed, train, val, test,
                                           writer, run_id=run_id)
                writer.emit({"run_id": run_id, "phase": "eval", "seed": seed,
                             "epoch": cfg.eval_epochs, "test_error": err})
            errors.append(err)
        except Exception as e:  # noqa: BLE001 - a failed seed must not sink the sweep
            warnings.warn(f"seed {seed} failed and is excluded: {e}",
                          RuntimeWarning, stacklevel=2)
            failed.append({"seed": seed, "error": str(e)})
    if not errors:
        raise RuntimeError(f"every seed failed: {failed}")
    return {
        "mode": mode,
        "seeds": list(cfg.seeds),
        "test_errors": errors,
        "mean_test_error": float(np.mean(errors)),
        "std_test_error": float(np.std(errors)),
        "failed": failed,
    }


def _ablated_config(cfg, which):
    if which == "no-u":
        search = dataclasses.replace(cfg.search, ablate_u=True)
    elif which == "no-x":
        search = dataclasses.replace(cfg.search, ablate_x=True)
    elif which == "no-z":
        search = dataclasses.replace(cfg.search, ablate_z=True)
    elif which == "metric:cosine":
        search = dataclasses.replace(cfg.search, metric="cosine")
    elif which == "metric:l2":
        search = dataclasses.replace(cfg.search, metric="neg-l2")
    else:
        raise ValueError(f"unknown ablation '{which}'; expected one of {ABLATIONS}")
    sub = dataclasses.replace(cfg, search=search)
    sub.out_dir = os.path.join(cfg.out_dir, which.replace(":", "-"))
    return sub


def run_ablation(cfg: ExperimentConfig, which=("no-u", "no-x", "no-z")):
    """Full configuration plus each requested variant under identical
    seeds and budgets; returns the side-by-side table."""
    rows = []
    full = dataclasses.replace(cfg)
    full.out_dir = os.path.join(cfg.out_dir, "full")
    rows.append({"variant": "full", **run_experiment(full, mode="lfm")})
    for name in which:
        sub = _ablated_config(cfg, name)
        rows.append({"variant": name, **run_experiment(sub, mode="lfm")})
    return rows


def format_table(rows):
    lines = [f"{'variant':<16} {'mean error':>11} {'std':>8}"]
    for r in rows:
        lines.append(f"{r['variant']:<16} {r['mean_test_error']:>11.4f} "
                     f"{r['std_test_error']:>8.4f}")
    return "\n".join(lines)
