"""Continuous cell search space: softmax-weighted mixtures of candidate
ops on the edges of a small DAG, plus top-k discretization."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import ShapeError, Tensor

# Candidate op kinds.  Image-mode kinds act on (B, C, H, W) and preserve
# spatial shape; flat-mode kinds act on (B, F).
IMAGE_OPS = ("conv3x3", "identity", "avg_pool3x3", "zero")
FLAT_OPS = ("linear", "identity", "zero")

_PARAMETRIC = {"conv3x3", "linear"}
_KNOWN = set(IMAGE_OPS) | set(FLAT_OPS)


@dataclass(frozen=True)
class OpSet:
    """Ordered candidate operations for every edge."""

    names: tuple

    def __post_init__(self):
        if not self.names:
            raise ValueError("OpSet must be nonempty")
        unknown = [n for n in self.names if n not in _KNOWN]
        if unknown:
            raise ValueError(f"unknown op kinds: {unknown}")

    def __len__(self):
        return len(self.names)

    def is_parametric(self, name):
        return name in _PARAMETRIC


@dataclass(frozen=True)
class CellSpec:
    """DAG wiring: node 0 is the cell input, nodes 1..node_count are
    intermediate; every node receives an edge from all predecessors."""

    node_count: int = 2

    @property
    def edges(self):
        return [(i, j) for j in range(1, self.node_count + 1) for i in range(j)]


@dataclass
class DiscreteArchitecture:
    """Retained op indices per edge after top-k discretization."""

    op_names: tuple
    retained: dict = field(default_factory=dict)  # (src, dst) -> tuple of indices

    def to_text(self):
        lines = []
        for (i, j) in sorted(self.retained):
            names = ",".join(self.op_names[o] for o in self.retained[(i, j)])
            lines.append(f"{i}->{j}: {names}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text, op_names):
        retained = {}
        name_to_idx = {n: k for k, n in enumerate(op_names)}
        for line in text.strip().splitlines():
            head, ops = line.split(":")
            src, dst = head.strip().split("->")
            retained[(int(src), int(dst))] = tuple(
                name_to_idx[n.strip()] for n in ops.split(","))
        return cls(op_names=tuple(op_names), retained=retained)


def init_arch_params(spec, op_set):
    """Zero logits per edge: uniform mixing weights at step 0."""
    return {edge: Tensor(np.zeros(len(op_set)), requires_grad=True)
            for edge in spec.edges}


def apply_candidate(name, x, param):
    if name == "identity":
        return x
    if name == "zero":
        return x * Tensor(0.0)
    if name == "avg_pool3x3":
        return ad.avg_pool3x3(x)
    if name == "conv3x3":
        return ad.conv3x3(x, param)
    if name == "linear":
        return x @ param
    raise ValueError(f"unknown op kind '{name}'")


def mixed_op_forward(edge_logits, x, op_set, edge_params=None):
    """Softmax(logits)-weighted sum of every candidate applied to ``x``."""
    if edge_logits.shape != (len(op_set),):
        raise ShapeError(f"edge logits shape {edge_logits.shape} does not "
                         f"match {len(op_set)} candidate ops")
    edge_params = edge_params or {}
    weights = ad.softmax(edge_logits, axis=0)
    out = None
    out_shape = None
    for idx, name in enumerate(op_set.names):
        cand = apply_candidate(name, x, edge_params.get(name))
        if out_shape is None:
            out_shape = cand.shape
        elif cand.shape != out_shape:
            raise ShapeError(f"candidate '{name}' output {cand.shape} differs "
                             f"from {out_shape}")
        w = ad.reshape(ad.narrow(weights, 0, idx, 1), ())
        term = w * cand
        out = term if out is None else out + term
    return out


def cell_forward(arch, edge_params, spec, op_set, x):
    """Node j = sum over incoming edges of the mixed op; cell output is
    the sum of the intermediate node outputs."""
    nodes = [x]
    for j in range(1, spec.node_count + 1):
        acc = None
        for i in range(j):
            edge = (i, j)
            if edge not in arch:
                raise KeyError(f"missing logits for edge {edge}")
            term = mixed_op_forward(arch[edge], nodes[i], op_set,
                                    edge_params.get(edge))
            acc = term if acc is None else acc + term
        nodes.append(acc)
    out = nodes[1]
    for h in nodes[2:]:
        out = out + h
    return out


def mixing_weights(arch):
    """Per-edge softmax of the logits, as numpy rows."""
    return {edge: ad.softmax(t, axis=0).data for edge, t in arch.items()}


def arch_entropy(arch):
    """Mean softmax entropy over edges; high = undecided mixture."""
    ents = []
    for w in mixing_weights(arch).values():
        ents.append(float(-(w * np.log(np.maximum(w, 1e-300))).sum()))
    return float(np.mean(ents)) if ents else 0.0


def derive_architecture(arch, op_set, k=1):
    """Top-k op indices per edge; ties broken toward the lowest index."""
    if not 1 <= k <= len(op_set):
        raise ValueError(f"k={k} out of range for {len(op_set)} ops")
    retained = {}
    for edge, logits in arch.items():
        vals = logits.data if isinstance(logits, Tensor) else np.asarray(logits)
        order = sorted(range(len(vals)), key=lambda i: (-vals[i], i))
        retained[edge] = tuple(sorted(order[:k]))
    return DiscreteArchitecture(op_names=tuple(op_set.names), retained=retained)
