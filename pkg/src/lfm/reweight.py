"""Validation-driven training-example re-weighting.

For a training batch of size B_tr and a validation batch of size B_val:
X holds the softmax-normalized embedding similarities (one row per
training example), Z the 0/1 label agreements, u the per-validation-
example cross-entropy of the stage-1 weights, and a the resulting
sigmoid-combined example weights.  Ablations replace a factor with
all-ones.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import ShapeError, Tensor

METRICS = ("dot", "cosine", "neg-l2")


@dataclass
class ReweightBundle:
    """Everything one step of stage II produces for stage III reuse."""

    X: Tensor          # (B_tr, B_val), rows sum to 1
    Z: Tensor          # (B_tr, B_val), 0/1 constant
    u: Tensor          # (B_val,), nonnegative
    r: Tensor          # (B_val,), trainable coefficients
    a: Tensor          # (B_tr,), example weights in (0, 1)

    def a_stats(self):
        vals = self.a.data
        return {"a_mean": float(vals.mean()), "a_var": float(vals.var()),
                "a_min": float(vals.min()), "a_max": float(vals.max())}


def visual_similarity(train_emb, val_emb, metric="dot"):
    """Row-softmax similarity matrix between the two embedding sets."""
    if metric not in METRICS:
        raise ValueError(f"unknown similarity metric '{metric}'")
    if train_emb.ndim != 2 or val_emb.ndim != 2:
        raise ShapeError("embeddings must be 2-D (batch, K)")
    if train_emb.shape[1] != val_emb.shape[1]:
        raise ShapeError(f"embedding dims differ: {train_emb.shape} vs {val_emb.shape}")
    if val_emb.shape[0] < 1:
        raise ShapeError("empty validation batch")

    if metric == "dot":
        scores = train_emb @ ad.transpose(val_emb)
    elif metric == "cosine":
        tn = _rows_normalized(train_emb)
        vn = _rows_normalized(val_emb)
        scores = tn @ ad.transpose(vn)
    else:  # neg-l2: -(|t|^2 - 2 t.v + |v|^2)
        t2 = ad.tsum(train_emb * train_emb, axis=1, keepdims=True)
        v2 = ad.tsum(val_emb * val_emb, axis=1, keepdims=True)
        cross = train_emb @ ad.transpose(val_emb)
        scores = 2.0 * cross - ad.broadcast_to(t2, cross.shape) \
            - ad.broadcast_to(ad.transpose(v2), cross.shape)
    return ad.softmax(scores, axis=1)


def _rows_normalized(emb, eps=1e-12):
    n2 = ad.tsum(emb * emb, axis=1, keepdims=True)
    inv = ad.div(Tensor(1.0), ad.texp(0.5 * ad.tlog(n2 + Tensor(eps))))
    return emb * ad.broadcast_to(inv, emb.shape)


def label_similarity(train_labels, val_labels, n_classes):
    """Indicator matrix of label agreement; a constant, never on the tape."""
    t = np.asarray(train_labels, dtype=np.int64)
    v = np.asarray(val_labels, dtype=np.int64)
    for arr, name in ((t, "train"), (v, "val")):
        if arr.min(initial=0) < 0 or arr.max(initial=0) >= n_classes:
            raise ValueError(f"{name} label out of range [0, {n_classes})")
    return Tensor((t[:, None] == v[None, :]).astype(np.float64))


def validation_losses(val_logits, val_labels):
    """Per-example cross-entropy of the stage-1 weights on validation."""
    return ad.cross_entropy_with_logits(val_logits, val_labels)


def example_weights(X, Z, u, r, ablate_x=False, ablate_z=False, ablate_u=False):
    """a_i = sigmoid((x_i * z_i * u) . r), factors replaced by ones when
    ablated."""
    b_tr, b_val = X.shape
    if Z.shape != (b_tr, b_val):
        raise ShapeError(f"Z shape {Z.shape} does not match X {X.shape}")
    if u.shape != (b_val,):
        raise ShapeError(f"u shape {u.shape} does not match B_val={b_val}")
    if r.shape != (b_val,):
        raise ShapeError(f"r shape {r.shape} does not match B_val={b_val}")
    xf = X if not ablate_x else ad.ones((b_tr, b_val))
    zf = Z if not ablate_z else ad.ones((b_tr, b_val))
    uf = u if not ablate_u else ad.ones((b_val,))
    prod = xf * zf * ad.broadcast_to(ad.reshape(uf, (1, b_val)), (b_tr, b_val))
    scores = prod @ ad.reshape(r, (b_val, 1))
    return ad.sigmoid(ad.reshape(scores, (b_tr,)))


def compute_bundle(train_emb, val_emb, train_labels, val_labels, val_logits,
                   r, n_classes, metric="dot",
                   ablate_x=False, ablate_z=False, ablate_u=False,
                   u_val_labels=None):
    """The full chain for one step: X, Z, u, then a.

    ``u_val_labels`` lets the mistake losses score against different
    labels than the agreement matrix Z (defaults to ``val_labels``).
    """
    X = visual_similarity(train_emb, val_emb, metric)
    Z = label_similarity(train_labels, val_labels, n_classes)
    u = validation_losses(val_logits,
                          val_labels if u_val_labels is None else u_val_labels)
    a = example_weights(X, Z, u, r, ablate_x=ablate_x, ablate_z=ablate_z,
                        ablate_u=ablate_u)
    return ReweightBundle(X=X, Z=Z, u=u, r=r, a=a)
