"""Experiment driver and CLI: mode dispatch, evaluation isolation, file
outputs.  Kept at toy scale; the benchmark-scale run lives in the
acceptance suite."""

import json
import os

import numpy as np
import pytest

from lfm import harness
from lfm.cli import main as cli_main
from lfm.config import parse_config
from lfm.data import NoiseSpec, make_synthetic
from lfm.evaluate import error_rate, init_discrete, train_discrete
from lfm.metrics import read_metrics
from lfm.models import ModelConfig
from lfm.search_space import CellSpec, DiscreteArchitecture, IMAGE_OPS

TOY = ["data.n=96", "data.classes=3", "search.epochs=1", "eval_epochs=2",
       "seeds=0"]


def toy_cfg(tmp_path, *extra):
    return parse_config(None, TOY + [f"out_dir={tmp_path}"] + list(extra))


def test_benchmark_splits_keep_validation_clean(tmp_path):
    cfg = toy_cfg(tmp_path)
    train, val, test = harness.benchmark_splits(cfg, seed=0)
    assert np.any(train.labels != train.clean_labels)
    np.testing.assert_array_equal(val.labels, val.clean_labels)
    np.testing.assert_array_equal(test.labels, test.clean_labels)
    # same seed, same split
    train2, _, _ = harness.benchmark_splits(cfg, seed=0)
    np.testing.assert_array_equal(train.x, train2.x)
    np.testing.assert_array_equal(train.labels, train2.labels)


def test_baseline_mode_freezes_reweighting(tmp_path):
    cfg = toy_cfg(tmp_path)
    sc = harness.search_cfg_for_mode(cfg, "darts-baseline", seed=0)
    assert sc.uniform_weights and sc.eta_v == 0.0 and sc.eta_r == 0.0
    sc_lfm = harness.search_cfg_for_mode(cfg, "lfm", seed=0)
    assert not sc_lfm.uniform_weights


def test_unknown_mode_and_ablation(tmp_path):
    cfg = toy_cfg(tmp_path)
    with pytest.raises(ValueError):
        harness.run_search_phase(cfg, "grid-search", 0, None, None)
    with pytest.raises(ValueError):
        harness._ablated_config(cfg, "no-q")


def test_run_experiment_outputs(tmp_path):
    cfg = toy_cfg(tmp_path)
    summary = harness.run_experiment(cfg)
    assert summary["mode"] == "lfm" and summary["failed"] == []
    assert 0.0 <= summary["mean_test_error"] <= 1.0
    arch_file = os.path.join(cfg.out_dir, "arch-lfm-seed0.txt")
    assert os.path.exists(arch_file)
    assert os.path.exists(os.path.join(cfg.out_dir, "config.resolved.yaml"))
    records = read_metrics(os.path.join(cfg.out_dir, "lfm-seed0.metrics.jsonl"))
    phases = {r["phase"] for r in records}
    assert phases == {"search", "eval"}
    assert records[-1]["test_error"] == summary["test_errors"][0]
    search_recs = [r for r in records if r["phase"] == "search"]
    assert all("w2_val_error" in r for r in search_recs)


@pytest.mark.parametrize("mode", ["single-set-baseline", "random-search"])
def test_other_modes_produce_architectures(tmp_path, mode):
    cfg = toy_cfg(tmp_path, f"mode={mode}", "search.epochs=2")
    train, val, _ = harness.benchmark_splits(cfg, seed=0)
    arch, _ = harness.run_search_phase(cfg, mode, 0, train, val)
    assert set(arch.retained) == set(CellSpec(cfg.cell_nodes).edges)


def test_evaluation_uses_fresh_weights(tmp_path):
    cfg = toy_cfg(tmp_path)
    train, val, test = harness.benchmark_splits(cfg, seed=0)
    disc = DiscreteArchitecture(op_names=IMAGE_OPS,
                                retained={e: (0,) for e in CellSpec().edges})
    e1 = harness.run_evaluation_phase(cfg, disc, 0, train, val, test)
    e2 = harness.run_evaluation_phase(cfg, disc, 0, train, val, test)
    assert e1 == e2
    assert 0.0 <= e1 <= 1.0


def test_format_table():
    rows = [{"variant": "full", "mean_test_error": 0.125, "std_test_error": 0.01},
            {"variant": "no-u", "mean_test_error": 0.25, "std_test_error": 0.02}]
    text = harness.format_table(rows)
    assert "full" in text and "0.1250" in text and "no-u" in text


# -- discrete training --------------------------------------------------

def test_train_discrete_learns_separable_toy():
    cfg = ModelConfig()
    spec = CellSpec()
    disc = DiscreteArchitecture(op_names=IMAGE_OPS,
                                retained={e: (0,) for e in spec.edges})
    ds = make_synthetic(160, 2, NoiseSpec(0.0), 5)
    w = train_discrete(disc, cfg, spec, ds, epochs=8, lr=0.2, batch_size=32,
                       seed=0)
    assert error_rate(disc, w, cfg, spec, ds) < 0.35


def test_init_discrete_skips_unretained_params():
    cfg = ModelConfig()
    spec = CellSpec()
    # identity-only cell carries no per-edge parameters
    disc = DiscreteArchitecture(op_names=IMAGE_OPS,
                                retained={e: (1,) for e in spec.edges})
    w = init_discrete(0, disc, cfg, spec)
    assert not any("edge" in k for k in w)


# -- CLI ----------------------------------------------------------------

def test_cli_gen_data_and_failure(tmp_path, capsys):
    p = tmp_path / "d.lfmd"
    assert cli_main(["gen-data", str(p), "--n", "20", "--classes", "2"]) == 0
    out = json.loads(capsys.readouterr().out)
    assert out["n"] == 20
    # invalid noise rate surfaces as a machine-readable error line
    assert cli_main(["gen-data", str(p), "--noise-rate", "2.0"]) == 1
    err = json.loads(capsys.readouterr().err)
    assert err["error"] == "ValueError"


def test_cli_search_then_evaluate(tmp_path, capsys):
    args = ["--out", str(tmp_path)] + [f"--set={o}" for o in TOY]
    assert cli_main(["search"] + args) == 0
    capsys.readouterr()
    arch = os.path.join(tmp_path, "arch-lfm-seed0.txt")
    assert cli_main(["evaluate", "--arch", arch] + args) == 0
    out = json.loads(capsys.readouterr().out)
    assert 0.0 <= out["test_error"] <= 1.0


def test_cli_unknown_config_key(tmp_path, capsys):
    assert cli_main(["search", "--set", "search.warp=1",
                     "--out", str(tmp_path)]) == 1
    err = json.loads(capsys.readouterr().err)
    assert err["error"] == "KeyError"
