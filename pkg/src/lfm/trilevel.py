"""The tri-level search loop.

One step: (I) a one-step descent of the first learner on the training
batch, kept differentiable in the architecture; (II) example weights
from the first learner's validation mistakes, then a one-step weighted
descent of the second learner; (III) updates of the encoder, the
coefficient vector, and the architecture from the second learner's
validation loss.  The encoder/coefficient chains are differentiated
exactly; the architecture update uses the finite-difference
Hessian-vector estimates, with an exact unrolled-graph oracle available
for verification.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field, replace

import numpy as np

from . import autodiff as ad
from . import params as P
from .autodiff import NonFiniteError, Tensor
from .models import (ModelConfig, encoder_embed, init_encoder, init_learner,
                     learner_forward)
from .reweight import ReweightBundle, compute_bundle
from .search_space import (CellSpec, OpSet, arch_entropy, derive_architecture,
                           init_arch_params)


@dataclass
class SearchConfig:
    eta_w1: float = 0.1
    eta_w2: float = 0.1
    eta_a: float = 0.1
    eta_v: float = 0.05
    eta_r: float = 0.05
    eps_scale: float = 0.01          # c in eps = c / ||direction||
    order: str = "second"            # first-order drops both FD terms
    b_tr: int = 16
    b_val: int = 8
    epochs: int = 5
    ablate_x: bool = False
    ablate_z: bool = False
    ablate_u: bool = False
    metric: str = "dot"
    k: int = 1
    loss_reduction: str = "mean"     # stage-2 weighted loss; "sum" is literal
    uniform_weights: bool = False    # baseline: a_i = 1, no reweight chain
    seed: int = 0

    def __post_init__(self):
        for name in ("eta_w1", "eta_w2", "eta_a", "eta_v", "eta_r"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be nonnegative")
        if self.order not in ("first", "second"):
            raise ValueError(f"unknown order '{self.order}'")
        if self.order == "second" and self.eps_scale <= 0:
            raise ValueError("eps_scale must be positive in second-order mode")
        if self.b_tr < 1 or self.b_val < 1:
            raise ValueError("batch sizes must be at least 1")
        if self.loss_reduction not in ("mean", "sum"):
            raise ValueError(f"unknown loss_reduction '{self.loss_reduction}'")


@dataclass
class SearchState:
    arch: dict                      # edge -> logits leaf
    w1: dict
    w2: dict
    v: dict
    r: Tensor
    step: int = 0


class SearchDiverged(RuntimeError):
    def __init__(self, step, cause):
        super().__init__(f"non-finite state at step {step}: {cause}")
        self.step = step


@dataclass
class Batch:
    x: Tensor
    labels: np.ndarray


def batch_of(dataset, idx):
    return Batch(Tensor(dataset.x[idx]), dataset.labels[np.asarray(idx)])


def init_state(model_cfg, cfg, spec, op_set, seed=None):
    """W1 and W2 from different seeds, same scheme; zero r; zero logits."""
    seed = cfg.seed if seed is None else seed
    return SearchState(
        arch=init_arch_params(spec, op_set),
        w1=init_learner(seed * 10 + 1, model_cfg, spec, op_set),
        w2=init_learner(seed * 10 + 2, model_cfg, spec, op_set),
        v=init_encoder(seed * 10 + 3, model_cfg),
        r=Tensor(np.zeros(cfg.b_val), requires_grad=True),
    )


# -- the one-step graph -------------------------------------------------

@dataclass
class StepGraph:
    """Live tape over stages I and II plus the stage-III validation loss."""

    w1_train_loss: Tensor
    w1p: dict
    val_logits_w1: Tensor
    bundle: ReweightBundle | None
    weighted_loss: Tensor
    g2: dict
    w2p: dict
    val_loss: Tensor
    train_ce: Tensor
    warnings: list = field(default_factory=list)


def _mean_or_sum(vec, reduction):
    return ad.tmean(vec) if reduction == "mean" else ad.tsum(vec)


def build_step_graph(state, train_batch, val_batch, cfg, model_cfg, spec,
                     op_set, reweight_hook=None):
    """Materialize stage I -> reweighting -> stage II -> validation loss
    on one tape.

    ``reweight_hook`` may rewrite the inputs of the weight computation
    (keys: train_emb, val_emb, z_val_labels, u_logits); it exists for
    ablation-semantics checks.
    """
    if len(train_batch.labels) == 0:
        raise ValueError("empty training batch")
    # Stage I: one-step descent of W1, differentiable in the architecture.
    logits1 = learner_forward(state.arch, state.w1, train_batch.x, model_cfg,
                              spec, op_set)
    loss1 = ad.tmean(ad.cross_entropy_with_logits(logits1, train_batch.labels))
    g1 = dict(zip(state.w1, ad.grad(loss1, list(state.w1.values()))))
    w1p = P.tree_sub(state.w1, g1, cfg.eta_w1)

    val_logits_w1 = learner_forward(state.arch, w1p, val_batch.x, model_cfg,
                                    spec, op_set)

    # Stage II: example weights, then one-step weighted descent of W2.
    b_tr = len(train_batch.labels)
    if cfg.uniform_weights:
        bundle = None
        a = ad.ones((b_tr,))
    else:
        inputs = {
            "train_emb": encoder_embed(state.v, train_batch.x, model_cfg),
            "val_emb": encoder_embed(state.v, val_batch.x, model_cfg),
            "z_val_labels": val_batch.labels,
            "u_logits": val_logits_w1,
        }
        if reweight_hook is not None:
            inputs = reweight_hook(inputs)
        bundle = compute_bundle(
            inputs["train_emb"], inputs["val_emb"], train_batch.labels,
            inputs["z_val_labels"], inputs["u_logits"], state.r,
            model_cfg.classes, metric=cfg.metric, ablate_x=cfg.ablate_x,
            ablate_z=cfg.ablate_z, ablate_u=cfg.ablate_u,
            u_val_labels=val_batch.labels)
        a = bundle.a

    logits2 = learner_forward(state.arch, state.w2, train_batch.x, model_cfg,
                              spec, op_set)
    train_ce = ad.cross_entropy_with_logits(logits2, train_batch.labels)
    weighted_loss = _mean_or_sum(a * train_ce, cfg.loss_reduction)
    g2 = dict(zip(state.w2, ad.grad(weighted_loss, list(state.w2.values()))))
    w2p = P.tree_sub(state.w2, g2, cfg.eta_w2)

    # Stage III objective.
    val_logits_w2 = learner_forward(state.arch, w2p, val_batch.x, model_cfg,
                                    spec, op_set)
    val_loss = ad.tmean(ad.cross_entropy_with_logits(val_logits_w2,
                                                     val_batch.labels))
    return StepGraph(w1_train_loss=loss1, w1p=w1p, val_logits_w1=val_logits_w1,
                     bundle=bundle, weighted_loss=weighted_loss, g2=g2,
                     w2p=w2p, val_loss=val_loss, train_ce=train_ce)


# -- spec-level update operations --------------------------------------

def stage1_update(state, train_batch, cfg, model_cfg, spec, op_set):
    """One-step descent of the first learner; the returned collection
    stays differentiable in the architecture."""
    logits = learner_forward(state.arch, state.w1, train_batch.x, model_cfg,
                             spec, op_set)
    loss = ad.tmean(ad.cross_entropy_with_logits(logits, train_batch.labels))
    g = dict(zip(state.w1, ad.grad(loss, list(state.w1.values()))))
    return P.tree_sub(state.w1, g, cfg.eta_w1)


def stage2_update(state, train_batch, val_batch, cfg, model_cfg, spec, op_set):
    graph = build_step_graph(state, train_batch, val_batch, cfg, model_cfg,
                             spec, op_set)
    return graph.w2p, graph.bundle


def update_encoder(state, graph, cfg):
    """Exact chain through the example weights; no finite differences."""
    if cfg.eta_v == 0 or graph.bundle is None:
        return P.tree_leaves(state.v)
    gv = dict(zip(state.v, ad.grad(graph.val_loss, list(state.v.values()))))
    return {k: (state.v[k] - Tensor(cfg.eta_v) * gv[k]).copy_leaf()
            for k in state.v}


def update_coefficients(state, graph, cfg):
    if cfg.eta_r == 0 or graph.bundle is None:
        return state.r.copy_leaf()
    gr = ad.grad(graph.val_loss, [state.r])[0]
    return (state.r - Tensor(cfg.eta_r) * gr).copy_leaf()


def _arch_grads(loss, arch):
    edges = sorted(arch)
    gs = ad.grad(loss, [arch[e] for e in edges])
    return {e: g for e, g in zip(edges, gs)}


def _train_loss_at(arch, weights, train_batch, model_cfg, spec, op_set):
    logits = learner_forward(arch, weights, train_batch.x, model_cfg, spec, op_set)
    return ad.tmean(ad.cross_entropy_with_logits(logits, train_batch.labels))


def update_architecture(state, graph, train_batch, val_batch, cfg, model_cfg,
                        spec, op_set):
    """Architecture descent direction.

    First-order: the direct validation-loss gradient with the updated
    second learner frozen.  Second-order adds the two symmetric-
    perturbation Hessian-vector estimates for the unrolled stage-II and
    stage-I chains.
    """
    # Direct term: validation loss with W2' held constant.
    w2p_const = P.tree_detach(graph.w2p)
    val_logits = learner_forward(state.arch, w2p_const, val_batch.x, model_cfg,
                                 spec, op_set)
    direct_loss = ad.tmean(ad.cross_entropy_with_logits(val_logits,
                                                        val_batch.labels))
    total = _arch_grads(direct_loss, state.arch)
    total = {e: g.data.copy() for e, g in total.items()}

    if cfg.order == "second":
        # v = dL_val/dW2' (constant for the probes).
        v_dir = dict(zip(graph.w2p,
                         ad.grad(graph.val_loss, list(graph.w2p.values()))))
        v_norm = P.norm(v_dir)
        a_const = (ad.ones((len(train_batch.labels),)) if graph.bundle is None
                   else graph.bundle.a.detach())

        if v_norm > 0:
            eps2 = cfg.eps_scale / v_norm
            fd2 = _fd_weighted(state, train_batch, a_const, v_dir, eps2,
                               cfg, model_cfg, spec, op_set)
            for e in total:
                total[e] -= cfg.eta_w2 * fd2[e]
        else:
            graph.warnings.append("zero-norm stage-II probe direction; "
                                  "second FD term skipped")
            warnings.warn(graph.warnings[-1], RuntimeWarning, stacklevel=2)

        # The mistake vector u also sees the architecture directly (not
        # only through the unrolled stage-1 weights); that chain factor
        # has no printed finite-difference form, so it is taken exactly.
        gu = _u_direct_arch_term(state, graph, train_batch, val_batch, v_dir,
                                 cfg, model_cfg, spec, op_set)
        if gu is not None:
            for e in total:
                total[e] -= cfg.eta_w2 * gu[e].data

        # p = d(g2 . v)/dW1', through the example weights' dependence on
        # the stage-1 validation mistakes.
        p = _w1_probe_direction(graph, v_dir)
        p_norm = P.norm(p) if p is not None else 0.0
        if p is not None and p_norm > 0:
            eps1 = cfg.eps_scale / p_norm
            fd1 = _fd_unweighted(state, train_batch, p, eps1, model_cfg, spec,
                                 op_set)
            for e in total:
                total[e] += cfg.eta_w2 * cfg.eta_w1 * fd1[e]
        else:
            graph.warnings.append("zero-norm stage-I probe direction; "
                                  "first FD term skipped")
            # all-zero coefficients pin every example weight at 0.5, so a
            # zero probe right after init is expected, not worth a warning
            if graph.bundle is not None and not cfg.ablate_u \
                    and np.any(state.r.data != 0):
                warnings.warn(graph.warnings[-1], RuntimeWarning, stacklevel=2)

    return {e: Tensor(state.arch[e].data - cfg.eta_a * total[e],
                      requires_grad=True) for e in state.arch}


def _fd_weighted(state, train_batch, a_const, v_dir, eps, cfg, model_cfg,
                 spec, op_set):
    """[grad_A sum_i a_i l(A, W2+, d_i) - same at W2-] / (2 eps)."""
    out = {}
    for sign in (+1.0, -1.0):
        w2pm = P.tree_shift(state.w2, v_dir, sign * eps)
        logits = learner_forward(state.arch, w2pm, train_batch.x, model_cfg,
                                 spec, op_set)
        ce = ad.cross_entropy_with_logits(logits, train_batch.labels)
        loss = _mean_or_sum(a_const * ce, cfg.loss_reduction)
        g = _arch_grads(loss, state.arch)
        for e, t in g.items():
            out[e] = out.get(e, 0.0) + sign * t.data
    return {e: g / (2.0 * eps) for e, g in out.items()}


def _fd_unweighted(state, train_batch, p_dir, eps, model_cfg, spec, op_set):
    """[grad_A L(A, W1+, D_tr) - grad_A L(A, W1-, D_tr)] / (2 eps)."""
    out = {}
    for sign in (+1.0, -1.0):
        w1pm = P.tree_shift(state.w1, p_dir, sign * eps)
        loss = _train_loss_at(state.arch, w1pm, train_batch, model_cfg, spec,
                              op_set)
        g = _arch_grads(loss, state.arch)
        for e, t in g.items():
            out[e] = out.get(e, 0.0) + sign * t.data
    return {e: g / (2.0 * eps) for e, g in out.items()}


def _u_direct_arch_term(state, graph, train_batch, val_batch, v_dir, cfg,
                        model_cfg, spec, op_set):
    """grad w.r.t. the architecture of (grad_W2 weighted train loss) . v
    through the direct architecture path inside the mistake vector u
    (stage-1 weights, embeddings, and coefficients held constant)."""
    if graph.bundle is None or cfg.ablate_u:
        return None
    from .reweight import example_weights, validation_losses

    w1p_const = P.tree_detach(graph.w1p)
    val_logits = learner_forward(state.arch, w1p_const, val_batch.x, model_cfg,
                                 spec, op_set)
    u_d = validation_losses(val_logits, val_batch.labels)
    a_d = example_weights(graph.bundle.X.detach(), graph.bundle.Z.detach(),
                          u_d, state.r.detach(), ablate_x=cfg.ablate_x,
                          ablate_z=cfg.ablate_z, ablate_u=cfg.ablate_u)
    arch_const = {e: t.detach() for e, t in state.arch.items()}
    logits2 = learner_forward(arch_const, state.w2, train_batch.x, model_cfg,
                              spec, op_set)
    ce = ad.cross_entropy_with_logits(logits2, train_batch.labels)
    loss = _mean_or_sum(a_d * ce, cfg.loss_reduction)
    g = ad.grad(loss, list(state.w2.values()))
    s = None
    for (k, _), gk in zip(state.w2.items(), g):
        term = ad.tsum(gk * v_dir[k].detach())
        s = term if s is None else s + term
    if s is None or not s.requires_grad:
        return None
    return _arch_grads(s, state.arch)


def _w1_probe_direction(graph, v_dir):
    """grad w.r.t. W1' of (grad_W2 weighted train loss) . v, the
    direction probed around W1.  None when the weights carry no
    stage-1 dependence."""
    if graph.bundle is None:
        return None
    s = None
    for k, g in graph.g2.items():
        term = ad.tsum(g * v_dir[k].detach())
        s = term if s is None else s + term
    if s is None or not s.requires_grad:
        return None
    names = sorted(graph.w1p)
    gs = ad.grad(s, [graph.w1p[k] for k in names])
    return dict(zip(names, gs))


def exact_hypergradient_oracle(state, train_batch, val_batch, cfg, model_cfg,
                               spec, op_set):
    """Exact gradients of the one-step-unrolled validation objective
    w.r.t. (architecture, encoder, coefficients): plain backward through
    the fully materialized pipeline, no finite differences."""
    graph = build_step_graph(state, train_batch, val_batch, cfg, model_cfg,
                             spec, op_set)
    edges = sorted(state.arch)
    vnames = sorted(state.v)
    targets = [state.arch[e] for e in edges] + [state.v[k] for k in vnames] \
        + [state.r]
    gs = ad.grad(graph.val_loss, targets)
    n_e = len(edges)
    return {
        "arch": {e: g for e, g in zip(edges, gs[:n_e])},
        "v": dict(zip(vnames, gs[n_e:n_e + len(vnames)])),
        "r": gs[-1],
    }


# -- the full step and the search driver -------------------------------

def lfm_step(state, train_batch, val_batch, cfg, model_cfg, spec, op_set,
             reweight_hook=None):
    """One pass of the whole loop; returns (new state, diagnostics)."""
    try:
        graph = build_step_graph(state, train_batch, val_batch, cfg, model_cfg,
                                 spec, op_set, reweight_hook=reweight_hook)
        new_arch = update_architecture(state, graph, train_batch, val_batch,
                                       cfg, model_cfg, spec, op_set)
        new_v = update_encoder(state, graph, cfg)
        new_r = update_coefficients(state, graph, cfg)
        new_state = SearchState(
            arch=new_arch,
            w1={k: t.copy_leaf() for k, t in graph.w1p.items()},
            w2={k: t.copy_leaf() for k, t in graph.w2p.items()},
            v=new_v, r=new_r, step=state.step + 1)
    except NonFiniteError as e:
        raise SearchDiverged(state.step, e) from e
    diag = {
        "w1_train_loss": graph.w1_train_loss.item(),
        "w2_weighted_train_loss": graph.weighted_loss.item(),
        "w2_val_loss": graph.val_loss.item(),
    }
    if graph.bundle is not None:
        diag.update(graph.bundle.a_stats())
    else:
        diag.update({"a_mean": 1.0, "a_var": 0.0, "a_min": 1.0, "a_max": 1.0})
    return new_state, diag


def run_search(cfg, model_cfg, spec, op_set, train_ds, val_ds, sink=None,
               state=None, extra_metrics=None):
    """Iterate lfm_step over epochs of deterministic minibatches.

    Incomplete trailing batches are dropped; the validation stream is
    cycled independently.  ``sink`` receives one record per epoch.
    Returns (discrete architecture, final state, records).
    """
    if len(train_ds) < cfg.b_tr or len(val_ds) < cfg.b_val:
        raise ValueError("dataset smaller than one batch")
    state = state if state is not None else init_state(model_cfg, cfg, spec, op_set)
    rng = np.random.default_rng(cfg.seed)
    records = []
    for epoch in range(cfg.epochs):
        tr_idx = rng.permutation(len(train_ds))
        va_idx = rng.permutation(len(val_ds))
        n_tb = len(train_ds) // cfg.b_tr
        n_vb = len(val_ds) // cfg.b_val
        sums = {}
        for b in range(n_tb):
            tb = batch_of(train_ds, tr_idx[b * cfg.b_tr:(b + 1) * cfg.b_tr])
            vslot = b % n_vb
            vb = batch_of(val_ds, va_idx[vslot * cfg.b_val:(vslot + 1) * cfg.b_val])
            state, diag = lfm_step(state, tb, vb, cfg, model_cfg, spec, op_set)
            for k, val in diag.items():
                sums.setdefault(k, []).append(val)
        record = {"epoch": epoch,
                  "arch_entropy": arch_entropy(state.arch)}
        for k, vals in sums.items():
            record[k] = float(np.mean(vals))
        record["a_min"] = float(np.min(sums["a_min"]))
        record["a_max"] = float(np.max(sums["a_max"]))
        if extra_metrics is not None:
            record.update(extra_metrics(state))
        records.append(record)
        if sink is not None:
            sink(record)
    return derive_architecture(state.arch, op_set, cfg.k), state, records
