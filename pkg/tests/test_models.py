"""Learner/encoder shape contracts, init determinism, checkpoint container."""

import numpy as np
import pytest

from lfm import autodiff as ad
from lfm.autodiff import ShapeError, Tensor
from lfm.models import (ModelConfig, encoder_embed, init_encoder, init_learner,
                        init_weights, learner_forward, learner_shapes,
                        load_weights, save_weights)
from lfm.search_space import FLAT_OPS, IMAGE_OPS, CellSpec, OpSet, init_arch_params

IMG = ModelConfig()
FLAT = ModelConfig(input_kind="flat", in_features=6, hidden=5, classes=3)
SPEC = CellSpec(node_count=2)


def test_unknown_input_kind():
    with pytest.raises(ValueError):
        ModelConfig(input_kind="audio")


def test_learner_shapes_image():
    shapes, fan_ins = learner_shapes(IMG, SPEC, OpSet(IMAGE_OPS))
    assert shapes["stem/conv"] == (8, 9)
    for e in SPEC.edges:
        assert shapes[f"edge{e[0]}-{e[1]}/conv3x3"] == (8, 72)
    assert shapes["fc/w"] == (8, 4) and shapes["fc/b"] == (4,)
    assert fan_ins["stem/conv"] == 9


def test_init_is_deterministic_and_seed_sensitive():
    a = init_learner(5, IMG, SPEC, OpSet(IMAGE_OPS))
    b = init_learner(5, IMG, SPEC, OpSet(IMAGE_OPS))
    c = init_learner(6, IMG, SPEC, OpSet(IMAGE_OPS))
    for k in a:
        np.testing.assert_array_equal(a[k].data, b[k].data)
    assert any(np.any(a[k].data != c[k].data) for k in a)


def test_scaled_normal_variance():
    w = init_weights(0, {"w": (50, 4000)})
    # var target 2/fan_in = 0.04
    assert w["w"].data.var() == pytest.approx(0.04, rel=0.2)


def test_classifier_bias_starts_at_zero():
    w = init_learner(1, IMG, SPEC, OpSet(IMAGE_OPS))
    np.testing.assert_array_equal(w["fc/b"].data, np.zeros(4))


def test_forward_shapes_image():
    ops = OpSet(IMAGE_OPS)
    arch = init_arch_params(SPEC, ops)
    w = init_learner(2, IMG, SPEC, ops)
    x = Tensor(np.random.default_rng(0).standard_normal((5, 1, 8, 8)))
    logits = learner_forward(arch, w, x, IMG, SPEC, ops)
    assert logits.shape == (5, 4)


def test_forward_shapes_flat_and_arch_grad():
    ops = OpSet(FLAT_OPS)
    arch = init_arch_params(SPEC, ops)
    w = init_learner(2, FLAT, SPEC, ops)
    x = Tensor(np.random.default_rng(1).standard_normal((7, 6)))
    logits = learner_forward(arch, w, x, FLAT, SPEC, ops)
    assert logits.shape == (7, 3)
    gs = ad.grad(ad.tsum(logits * logits), [arch[e] for e in SPEC.edges])
    assert all(np.any(g.data != 0) for g in gs)


def test_forward_rejects_wrong_batch_shape():
    ops = OpSet(IMAGE_OPS)
    arch = init_arch_params(SPEC, ops)
    w = init_learner(0, IMG, SPEC, ops)
    with pytest.raises(ShapeError):
        learner_forward(arch, w, Tensor(np.ones((2, 1, 4, 4))), IMG, SPEC, ops)


def test_encoder_embedding_dim():
    for cfg in (IMG, FLAT):
        v = init_encoder(3, cfg)
        n_in = (4, 1, 8, 8) if cfg.input_kind == "image" else (4, 6)
        emb = encoder_embed(v, Tensor(np.random.default_rng(2).standard_normal(n_in)), cfg)
        assert emb.shape == (4, cfg.encoder_dim)


def test_weight_container_round_trip(tmp_path):
    w = init_learner(9, FLAT, SPEC, OpSet(FLAT_OPS))
    p = tmp_path / "w.lfmw"
    save_weights(w, p)
    back = load_weights(p)
    assert sorted(back) == sorted(w)
    for k in w:
        np.testing.assert_array_equal(back[k].data, w[k].data)
        assert back[k].requires_grad


def test_weight_container_bad_magic(tmp_path):
    p = tmp_path / "w.lfmw"
    p.write_bytes(b"NOPE" + b"\x00" * 16)
    with pytest.raises(ValueError, match="magic"):
        load_weights(p)


def test_weight_container_truncation(tmp_path):
    w = init_learner(9, FLAT, SPEC, OpSet(FLAT_OPS))
    p = tmp_path / "w.lfmw"
    save_weights(w, p)
    blob = p.read_bytes()
    p.write_bytes(blob[:len(blob) - 5])
    with pytest.raises(ValueError):
        load_weights(p)
