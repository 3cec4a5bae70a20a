"""Architecture evaluation: the discretized cell as a fixed network,
retrained from scratch with uniform example weights."""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .models import ModelConfig, init_weights
from .search_space import CellSpec, OpSet, apply_candidate


def discrete_shapes(disc, cfg: ModelConfig, spec: CellSpec):
    shapes, fan_ins = {}, {}
    if cfg.input_kind == "image":
        c = cfg.channels
        shapes["stem/conv"] = (c, cfg.in_channels * 9)
        fan_ins["stem/conv"] = cfg.in_channels * 9
        head_in = c
    else:
        head_in = cfg.hidden
        shapes["stem/w"] = (cfg.in_features, cfg.hidden)
    for (i, j), ops in disc.retained.items():
        for o in ops:
            name = disc.op_names[o]
            if name == "conv3x3":
                key = f"edge{i}-{j}/conv3x3"
                shapes[key] = (cfg.channels, cfg.channels * 9)
                fan_ins[key] = cfg.channels * 9
            elif name == "linear":
                shapes[f"edge{i}-{j}/linear"] = (cfg.hidden, cfg.hidden)
    shapes["fc/w"] = (head_in, cfg.classes)
    shapes["fc/b"] = (cfg.classes,)
    return shapes, fan_ins


def init_discrete(seed, disc, cfg, spec):
    shapes, fan_ins = discrete_shapes(disc, cfg, spec)
    w = init_weights(seed, shapes, "scaled-normal", fan_ins)
    w["fc/b"] = Tensor(np.zeros(cfg.classes), requires_grad=True)
    return w


def discrete_forward(disc, weights, batch, cfg, spec):
    """Fixed-architecture forward: each edge applies its retained ops,
    summed; nodes and cell output as in the continuous cell."""
    if cfg.input_kind == "image":
        h = ad.relu(ad.conv3x3(batch, weights["stem/conv"]))
    else:
        h = ad.relu(batch @ weights["stem/w"])
    nodes = [h]
    for j in range(1, spec.node_count + 1):
        acc = None
        for i in range(j):
            for o in disc.retained[(i, j)]:
                name = disc.op_names[o]
                param = weights.get(f"edge{i}-{j}/{name}")
                term = apply_candidate(name, nodes[i], param)
                acc = term if acc is None else acc + term
        nodes.append(acc)
    out = nodes[1]
    for t in nodes[2:]:
        out = out + t
    if cfg.input_kind == "image":
        out = ad.tmean(out, axis=(2, 3))
    logits = out @ weights["fc/w"]
    b = ad.broadcast_to(ad.reshape(weights["fc/b"], (1, cfg.classes)), logits.shape)
    return logits + b


def train_discrete(disc, cfg, spec, dataset, epochs, lr, batch_size, seed,
                   sink=None):
    """Plain SGD from a fresh init; returns the trained weights."""
    weights = init_discrete(seed, disc, cfg, spec)
    rng = np.random.default_rng(seed)
    n = len(dataset)
    for epoch in range(epochs):
        idx = rng.permutation(n)
        losses = []
        for b in range(n // batch_size):
            sel = idx[b * batch_size:(b + 1) * batch_size]
            x = Tensor(dataset.x[sel])
            logits = discrete_forward(disc, weights, x, cfg, spec)
            loss = ad.tmean(ad.cross_entropy_with_logits(logits,
                                                         dataset.labels[sel]))
            grads = ad.grad(loss, list(weights.values()))
            weights = {k: Tensor(weights[k].data - lr * g.data,
                                 requires_grad=True)
                       for k, g in zip(weights, grads)}
            losses.append(loss.item())
        if sink is not None:
            sink({"epoch": epoch, "train_loss": float(np.mean(losses))})
    return weights


def error_rate(disc, weights, cfg, spec, dataset, batch_size=256):
    wrong = 0
    for start in range(0, len(dataset), batch_size):
        x = Tensor(dataset.x[start:start + batch_size])
        logits = discrete_forward(disc, weights, x, cfg, spec)
        pred = np.argmax(logits.data, axis=1)
        wrong += int(np.sum(pred != dataset.labels[start:start + batch_size]))
    return wrong / len(dataset)
