"""Helpers for named tensor collections (dict[str, Tensor])."""

from __future__ import annotations

import numpy as np

from .autodiff import Tensor


def tree_sub(params, grads, eta):
    """{k: params[k] - eta * grads[k]} as graph nodes."""
    scale = Tensor(float(eta))
    return {k: params[k] - scale * grads[k] for k in params}


def tree_detach(params):
    return {k: t.detach() for k, t in params.items()}


def tree_leaves(params):
    """Fresh trainable leaves carrying copies of the values."""
    return {k: t.copy_leaf() for k, t in params.items()}


def tree_shift(params, direction, eps):
    """Constant (off-tape) collection params + eps * direction."""
    return {k: Tensor(params[k].data + eps * direction[k].data) for k in params}


def flatten(params):
    """Values concatenated in sorted-key order as a numpy vector."""
    return np.concatenate([np.ravel(params[k].data) for k in sorted(params)]) \
        if params else np.zeros(0)


def norm(params):
    return float(np.sqrt(sum(float(np.sum(params[k].data ** 2)) for k in params)))


def shape_map(params):
    return {k: t.shape for k, t in params.items()}
