"""The tri-level step: wiring, no-op guarantees, oracle agreement, stability."""

import dataclasses

import numpy as np
import pytest

from lfm import autodiff as ad
from lfm import trilevel as tl
from lfm.autodiff import Tensor
from lfm.data import NoiseSpec, make_synthetic
from lfm.models import ModelConfig
from lfm.search_space import CellSpec, OpSet

MODEL = ModelConfig(input_kind="flat", in_features=6, hidden=6, classes=3,
                    encoder_dim=8)
SPEC = CellSpec(node_count=2)
OPS = OpSet(("linear", "identity"))


def tiny_batches(seed=0, b_tr=16, b_val=8):
    ds = make_synthetic(b_tr + b_val, 3, NoiseSpec(0.2), seed, form="flat",
                        features=6)
    return (tl.batch_of(ds, np.arange(b_tr)),
            tl.batch_of(ds, np.arange(b_tr, b_tr + b_val)))


def randomized_state(cfg, seed):
    state = tl.init_state(MODEL, cfg, SPEC, OPS, seed=seed)
    rng = np.random.default_rng(seed + 1000)
    for e in state.arch:
        state.arch[e] = Tensor(rng.standard_normal(len(OPS)) * 0.3,
                               requires_grad=True)
    state.r = Tensor(rng.standard_normal(cfg.b_val) * 0.5, requires_grad=True)
    return state


def test_config_validation():
    with pytest.raises(ValueError):
        tl.SearchConfig(eta_a=-0.1)
    with pytest.raises(ValueError):
        tl.SearchConfig(order="third")
    with pytest.raises(ValueError):
        tl.SearchConfig(order="second", eps_scale=0.0)
    with pytest.raises(ValueError):
        tl.SearchConfig(loss_reduction="max")


def test_init_state_r_is_zero():
    cfg = tl.SearchConfig()
    state = tl.init_state(MODEL, cfg, SPEC, OPS)
    np.testing.assert_array_equal(state.r.data, np.zeros(cfg.b_val))
    for t in state.arch.values():
        np.testing.assert_array_equal(t.data, np.zeros(len(OPS)))
    # the two learners start from different draws
    assert any(np.any(state.w1[k].data != state.w2[k].data) for k in state.w1)


def test_stage1_is_one_sgd_step():
    cfg = tl.SearchConfig()
    state = tl.init_state(MODEL, cfg, SPEC, OPS)
    tb, _ = tiny_batches()
    w1p = tl.stage1_update(state, tb, cfg, MODEL, SPEC, OPS)
    loss = tl._train_loss_at(state.arch, state.w1, tb, MODEL, SPEC, OPS)
    g = dict(zip(state.w1, ad.grad(loss, list(state.w1.values()))))
    for k in state.w1:
        np.testing.assert_allclose(w1p[k].data,
                                   state.w1[k].data - cfg.eta_w1 * g[k].data,
                                   rtol=1e-12)


def test_zero_rates_leave_v_and_r_untouched():
    cfg = tl.SearchConfig(eta_v=0.0, eta_r=0.0)
    state = randomized_state(cfg, 3)
    tb, vb = tiny_batches(3)
    graph = tl.build_step_graph(state, tb, vb, cfg, MODEL, SPEC, OPS)
    new_v = tl.update_encoder(state, graph, cfg)
    new_r = tl.update_coefficients(state, graph, cfg)
    np.testing.assert_array_equal(new_r.data, state.r.data)
    for k in state.v:
        np.testing.assert_array_equal(new_v[k].data, state.v[k].data)


def test_zero_arch_rate_freezes_logits():
    cfg = tl.SearchConfig(eta_a=0.0)
    state = randomized_state(cfg, 4)
    tb, vb = tiny_batches(4)
    graph = tl.build_step_graph(state, tb, vb, cfg, MODEL, SPEC, OPS)
    new_arch = tl.update_architecture(state, graph, tb, vb, cfg, MODEL, SPEC, OPS)
    for e in state.arch:
        np.testing.assert_array_equal(new_arch[e].data, state.arch[e].data)


def test_uniform_weights_severs_reweight_chain():
    cfg = tl.SearchConfig(uniform_weights=True)
    state = randomized_state(cfg, 5)
    tb, vb = tiny_batches(5)
    graph = tl.build_step_graph(state, tb, vb, cfg, MODEL, SPEC, OPS)
    assert graph.bundle is None
    # the validation loss carries no encoder or coefficient dependence
    gr = ad.grad(graph.val_loss, [state.r] + list(state.v.values()))
    for g in gr:
        np.testing.assert_array_equal(g.data, np.zeros(g.shape))


def test_encoder_and_coefficient_updates_are_exact():
    cfg = tl.SearchConfig()
    state = randomized_state(cfg, 6)
    tb, vb = tiny_batches(6)
    oracle = tl.exact_hypergradient_oracle(state, tb, vb, cfg, MODEL, SPEC, OPS)
    graph = tl.build_step_graph(state, tb, vb, cfg, MODEL, SPEC, OPS)
    new_v = tl.update_encoder(state, graph, cfg)
    new_r = tl.update_coefficients(state, graph, cfg)
    np.testing.assert_allclose((state.r.data - new_r.data) / cfg.eta_r,
                               oracle["r"].data, rtol=1e-9, atol=1e-12)
    for k in state.v:
        np.testing.assert_allclose((state.v[k].data - new_v[k].data) / cfg.eta_v,
                                   oracle["v"][k].data, rtol=1e-9, atol=1e-12)


def test_second_order_direction_tracks_oracle():
    cfg = tl.SearchConfig()
    cosines = []
    for seed in range(5):
        state = randomized_state(cfg, 20 + seed)
        tb, vb = tiny_batches(20 + seed)
        oracle = tl.exact_hypergradient_oracle(state, tb, vb, cfg, MODEL, SPEC, OPS)
        graph = tl.build_step_graph(state, tb, vb, cfg, MODEL, SPEC, OPS)
        new_arch = tl.update_architecture(state, graph, tb, vb, cfg, MODEL,
                                          SPEC, OPS)
        est = np.concatenate([(state.arch[e].data - new_arch[e].data) / cfg.eta_a
                              for e in sorted(state.arch)])
        ref = np.concatenate([oracle["arch"][e].data for e in sorted(state.arch)])
        cosines.append(est @ ref / (np.linalg.norm(est) * np.linalg.norm(ref)))
    assert min(cosines) > 0.99


def test_eps_halving_changes_direction_little():
    cfg = tl.SearchConfig()
    state = randomized_state(cfg, 31)
    tb, vb = tiny_batches(31)

    def direction(eps_scale):
        c = dataclasses.replace(cfg, eps_scale=eps_scale)
        g = tl.build_step_graph(state, tb, vb, c, MODEL, SPEC, OPS)
        new = tl.update_architecture(state, g, tb, vb, c, MODEL, SPEC, OPS)
        return np.concatenate([(state.arch[e].data - new[e].data)
                               for e in sorted(state.arch)])

    d1, d2 = direction(0.01), direction(0.005)
    assert np.linalg.norm(d1 - d2) / np.linalg.norm(d1) < 0.05


def test_first_order_is_direct_term_only():
    cfg1 = tl.SearchConfig(order="first")
    cfg2 = tl.SearchConfig(order="second")
    state = randomized_state(cfg1, 8)
    tb, vb = tiny_batches(8)
    g1 = tl.build_step_graph(state, tb, vb, cfg1, MODEL, SPEC, OPS)
    a_first = tl.update_architecture(state, g1, tb, vb, cfg1, MODEL, SPEC, OPS)
    g2 = tl.build_step_graph(state, tb, vb, cfg2, MODEL, SPEC, OPS)
    a_second = tl.update_architecture(state, g2, tb, vb, cfg2, MODEL, SPEC, OPS)
    assert any(np.any(a_first[e].data != a_second[e].data) for e in a_first)


def test_lfm_step_returns_fresh_leaves():
    cfg = tl.SearchConfig()
    state = randomized_state(cfg, 9)
    tb, vb = tiny_batches(9)
    new_state, diag = tl.lfm_step(state, tb, vb, cfg, MODEL, SPEC, OPS)
    assert new_state.step == state.step + 1
    for k in state.w1:
        assert new_state.w1[k] is not state.w1[k]
        assert not np.shares_memory(new_state.w1[k].data, state.w1[k].data)
        assert new_state.w1[k].requires_grad
    for key in ("w1_train_loss", "w2_weighted_train_loss", "w2_val_loss",
                "a_mean", "a_var", "a_min", "a_max"):
        assert np.isfinite(diag[key])


def test_ten_steps_hold_shapes_and_stats():
    cfg = tl.SearchConfig(eta_a=0.05)
    state = tl.init_state(MODEL, cfg, SPEC, OPS, seed=1)
    shapes = {k: t.shape for k, t in state.w1.items()}
    for i in range(10):
        tb, vb = tiny_batches(100 + i)
        state, diag = tl.lfm_step(state, tb, vb, cfg, MODEL, SPEC, OPS)
        assert {k: t.shape for k, t in state.w1.items()} == shapes
        assert 0.0 < diag["a_min"] <= diag["a_max"] < 1.0
    assert state.step == 10


def test_losses_descend_on_fixed_batches():
    cfg = tl.SearchConfig(eta_a=0.05)
    state = tl.init_state(MODEL, cfg, SPEC, OPS, seed=2)
    tb, vb = tiny_batches(42, b_tr=32, b_val=8)
    first = last = None
    for _ in range(15):
        state, diag = tl.lfm_step(state, tb, vb, cfg, MODEL, SPEC, OPS)
        first = diag["w2_val_loss"] if first is None else first
        last = diag["w2_val_loss"]
    assert last < first


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_divergence_raises_with_step():
    cfg = tl.SearchConfig(eta_w1=1e200, eta_w2=1e200)
    state = randomized_state(cfg, 10)
    tb, vb = tiny_batches(10)
    with pytest.raises(tl.SearchDiverged) as exc:
        tl.lfm_step(state, tb, vb, cfg, MODEL, SPEC, OPS)
    assert exc.value.step == 0


def test_run_search_is_deterministic():
    cfg = tl.SearchConfig(epochs=2, seed=7)
    ds = make_synthetic(40, 3, NoiseSpec(0.2), 77, form="flat", features=6)
    val = make_synthetic(16, 3, NoiseSpec(0.0), 78, form="flat", features=6)
    out1 = tl.run_search(cfg, MODEL, SPEC, OPS, ds, val)
    out2 = tl.run_search(cfg, MODEL, SPEC, OPS, ds, val)
    assert out1[0] == out2[0]
    assert out1[2] == out2[2]
    assert [r["epoch"] for r in out1[2]] == [0, 1]
    for key in ("arch_entropy", "w2_val_loss", "a_var"):
        assert key in out1[2][0]


def test_run_search_rejects_short_dataset():
    cfg = tl.SearchConfig()
    ds = make_synthetic(8, 3, NoiseSpec(0.0), 1, form="flat", features=6)
    with pytest.raises(ValueError):
        tl.run_search(cfg, MODEL, SPEC, OPS, ds, ds)
