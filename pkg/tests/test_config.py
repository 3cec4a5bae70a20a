"""Config loading, override precedence, metrics stream."""

import json

import pytest

from lfm.config import dump_config, parse_config, to_dict
from lfm.metrics import MetricsWriter, read_metrics


def test_defaults():
    cfg = parse_config()
    assert cfg.mode == "lfm"
    assert cfg.data.n == 2000 and cfg.data.classes == 4
    assert cfg.search.b_tr == 16 and cfg.search.b_val == 8
    assert cfg.seeds == (0, 1, 2, 3, 4)


def test_unknown_key_is_rejected(tmp_path):
    p = tmp_path / "c.yaml"
    p.write_text("search:\n  learning_rate: 0.1\n")
    with pytest.raises(KeyError, match="search.learning_rate"):
        parse_config(p)
    with pytest.raises(KeyError, match="grid"):
        parse_config(None, ["grid=4"])


def test_override_beats_file(tmp_path):
    p = tmp_path / "c.yaml"
    p.write_text("mode: darts-baseline\nsearch:\n  eta_a: 0.3\n")
    cfg = parse_config(p, ["mode=lfm", "search.eta_a=0.7"])
    assert cfg.mode == "lfm"
    assert cfg.search.eta_a == 0.7


def test_override_syntax_errors():
    with pytest.raises(ValueError):
        parse_config(None, ["mode"])
    with pytest.raises(ValueError):
        parse_config(None, ["mode=warp-search"])


def test_comma_values_become_tuples():
    cfg = parse_config(None, ["seeds=3,1,4", "data.fractions=0.5,0.25,0.25"])
    assert cfg.seeds == (3, 1, 4)
    assert cfg.data.fractions == (0.5, 0.25, 0.25)
    assert parse_config(None, ["seeds=7"]).seeds == (7,)


def test_out_dir_env_fallback(monkeypatch):
    monkeypatch.setenv("LFM_OUT_DIR", "/tmp/elsewhere")
    assert parse_config().out_dir == "/tmp/elsewhere"
    monkeypatch.delenv("LFM_OUT_DIR")
    assert parse_config().out_dir == "runs"


def test_dump_round_trip(tmp_path):
    cfg = parse_config(None, ["search.eta_v=0.02", "mode=random-search"])
    p = tmp_path / "resolved.yaml"
    dump_config(cfg, p)
    back = parse_config(p)
    assert to_dict(back) == to_dict(cfg)


# -- metrics ------------------------------------------------------------

def test_metrics_round_trip_and_key_order(tmp_path):
    p = tmp_path / "m.jsonl"
    with MetricsWriter(p) as w:
        w.emit({"b": 2, "a": 1})
        w.emit({"epoch": 0, "loss": 0.5})
    lines = p.read_text().splitlines()
    assert lines[0] == '{"a": 1, "b": 2}'
    assert read_metrics(p) == [{"a": 1, "b": 2}, {"epoch": 0, "loss": 0.5}]


def test_metrics_reject_non_finite(tmp_path):
    with MetricsWriter(tmp_path / "m.jsonl") as w:
        with pytest.raises(ValueError):
            w.emit({"loss": float("nan")})
        with pytest.raises(ValueError):
            w.emit({"loss": float("inf")})


def test_timings_go_to_sidecar(tmp_path):
    mp, tp = tmp_path / "m.jsonl", tmp_path / "t.jsonl"
    with MetricsWriter(mp, tp) as w:
        w.emit({"epoch": 0})
    assert "wall_clock_ms" not in mp.read_text()
    timing = json.loads(tp.read_text().splitlines()[0])
    assert timing["wall_clock_ms"] >= 0
