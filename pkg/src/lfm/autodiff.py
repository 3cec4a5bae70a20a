"""Dense float64 tensors with a reverse-mode differentiation tape.

The tape is define-by-run: every operation on tensors that require
gradients records its inputs and a vector-Jacobian closure.  The vjp
closures are written in terms of the same primitives, so a backward pass
produces tensors that are themselves on the tape -- gradients of
gradients work, which the one-step-unrolled hypergradient oracle relies
on.

All data is float64.  Any op that produces a NaN or Inf raises
NonFiniteError naming the producing op; non-finite values are never a
silent state.
"""

from __future__ import annotations

import numpy as np


class ShapeError(ValueError):
    """Input shapes do not conform to an op's shape rule."""


class NonFiniteError(FloatingPointError):
    """An op produced NaN or Inf."""


class Tensor:
    """Dense n-dimensional float64 array, optionally on the tape."""

    __slots__ = ("data", "requires_grad", "op", "_parents", "_vjp")

    def __init__(self, data, requires_grad=False, op="leaf", _parents=(), _vjp=None):
        arr = np.asarray(data, dtype=np.float64)
        if not np.all(np.isfinite(arr)):
            raise NonFiniteError(f"non-finite values produced by op '{op}'")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.op = op
        self._parents = tuple(_parents) if requires_grad else ()
        self._vjp = _vjp if requires_grad else None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def item(self):
        return float(self.data.reshape(()))

    def detach(self):
        return Tensor(self.data, requires_grad=False, op="detach")

    def copy_leaf(self):
        """Fresh trainable leaf holding a copy of this tensor's values."""
        return Tensor(self.data.copy(), requires_grad=True)

    # -- operator sugar -------------------------------------------------
    def __add__(self, other):
        return add(self, _wrap(other))

    def __radd__(self, other):
        return add(_wrap(other), self)

    def __sub__(self, other):
        return sub(self, _wrap(other))

    def __rsub__(self, other):
        return sub(_wrap(other), self)

    def __mul__(self, other):
        return mul(self, _wrap(other))

    def __rmul__(self, other):
        return mul(_wrap(other), self)

    def __truediv__(self, other):
        return div(self, _wrap(other))

    def __rtruediv__(self, other):
        return div(_wrap(other), self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, _wrap(other))

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis=axis, keepdims=keepdims)

    def reshape(self, shape):
        return reshape(self, shape)

    def __repr__(self):
        return f"Tensor(op={self.op!r}, shape={self.shape}, requires_grad={self.requires_grad})"


def _wrap(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data, parents, vjp, op):
    rg = any(p.requires_grad for p in parents)
    return Tensor(data, requires_grad=rg, op=op,
                  _parents=parents if rg else (), _vjp=vjp if rg else None)


def zeros(shape, requires_grad=False):
    return Tensor(np.zeros(shape), requires_grad=requires_grad)


def ones(shape):
    return Tensor(np.ones(shape))


# -- tape traversal -----------------------------------------------------

def topo_order(output):
    """Nodes reachable from ``output`` through grad-requiring parents,
    inputs-before-users."""
    order, seen = [], set()
    stack = [(output, False)]
    while stack:
        node, expanded = stack.pop()
        if id(node) in seen:
            continue
        if expanded:
            seen.add(id(node))
            order.append(node)
        else:
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))
    return order


def backward(output):
    """Gradient of a scalar ``output`` w.r.t. every leaf on its tape.

    Returns ``{id(leaf): (leaf, grad)}`` for every requires_grad leaf
    reached from the output.  For explicit targets (including unreached
    ones, which get zeros) use :func:`grad`.
    """
    adj = _adjoints(output)
    out = {}
    for node in topo_order(output):
        if node.requires_grad and not node._parents and id(node) in adj:
            out[id(node)] = (node, adj[id(node)])
    return out


def grad(output, wrt):
    """Gradients of a scalar ``output`` w.r.t. each tensor in ``wrt``.

    Targets may be leaves or interior nodes (the adjoint of an interior
    node is the partial derivative treating that node as a free
    variable).  Targets the output does not depend on get zeros.
    """
    adj = _adjoints(output)
    result = []
    for t in wrt:
        g = adj.get(id(t))
        result.append(g if g is not None else zeros(t.shape))
    return result


def _adjoints(output):
    if output.data.size != 1:
        raise ValueError(f"backward needs a scalar output, got shape {output.shape}")
    if not output.requires_grad:
        raise ValueError("output is not on the tape (requires_grad is False)")
    adj = {id(output): Tensor(np.ones(output.shape))}
    for node in reversed(topo_order(output)):
        g = adj.get(id(node))
        if g is None or node._vjp is None:
            continue
        parent_grads = node._vjp(g)
        for p, pg in zip(node._parents, parent_grads):
            if pg is None or not p.requires_grad:
                continue
            if id(p) in adj:
                adj[id(p)] = add(adj[id(p)], pg)
            else:
                adj[id(p)] = pg
    return adj


# -- shape plumbing -----------------------------------------------------

def _sum_to(g, shape):
    """Reduce ``g`` back to ``shape`` under numpy broadcasting rules."""
    while g.ndim > len(shape):
        g = tsum(g, axis=0)
    for i, d in enumerate(shape):
        if d == 1 and g.shape[i] != 1:
            g = tsum(g, axis=i, keepdims=True)
    if g.shape != tuple(shape):
        raise ShapeError(f"cannot reduce {g.shape} to {shape}")
    return g


def broadcast_to(x, shape):
    try:
        data = np.broadcast_to(x.data, shape)
    except ValueError as e:
        raise ShapeError(str(e)) from None
    return _make(data.copy(), (x,), lambda g: (_sum_to(g, x.shape),), "broadcast_to")


# -- elementwise and reductions ----------------------------------------

def add(a, b):
    a, b = _wrap(a), _wrap(b)
    return _make(a.data + b.data, (a, b),
                 lambda g: (_sum_to(g, a.shape), _sum_to(g, b.shape)), "add")


def sub(a, b):
    return add(a, neg(_wrap(b)))


def neg(a):
    return _make(-a.data, (a,), lambda g: (neg(g),), "neg")


def mul(a, b):
    a, b = _wrap(a), _wrap(b)
    return _make(a.data * b.data, (a, b),
                 lambda g: (_sum_to(mul(g, b), a.shape), _sum_to(mul(g, a), b.shape)),
                 "mul")


def div(a, b):
    a, b = _wrap(a), _wrap(b)
    return _make(a.data / b.data, (a, b),
                 lambda g: (_sum_to(div(g, b), a.shape),
                            _sum_to(neg(div(mul(g, a), mul(b, b))), b.shape)),
                 "div")


def texp(a):
    out = _make(np.exp(a.data), (a,), None, "exp")
    if out.requires_grad:
        out._vjp = lambda g: (mul(g, out),)
    return out


def tlog(a):
    return _make(np.log(a.data), (a,), lambda g: (div(g, a),), "log")


def relu(a):
    mask = Tensor((a.data > 0).astype(np.float64))
    return _make(np.maximum(a.data, 0.0), (a,), lambda g: (mul(g, mask),), "relu")


def sigmoid(a):
    s = np.empty_like(a.data)
    pos = a.data >= 0
    s[pos] = 1.0 / (1.0 + np.exp(-a.data[pos]))
    ez = np.exp(a.data[~pos])
    s[~pos] = ez / (1.0 + ez)
    out = _make(s, (a,), None, "sigmoid")
    if out.requires_grad:
        out._vjp = lambda g: (mul(g, mul(out, sub(Tensor(1.0), out))),)
    return out


def tsum(a, axis=None, keepdims=False):
    data = np.sum(a.data, axis=axis, keepdims=keepdims)

    def vjp(g):
        if axis is None:
            kept = g.reshape((1,) * a.ndim)
        elif keepdims:
            kept = g
        else:
            axes = (axis,) if isinstance(axis, int) else tuple(axis)
            axes = tuple(ax % a.ndim for ax in axes)
            shp = tuple(1 if i in axes else d for i, d in enumerate(a.shape))
            kept = g.reshape(shp)
        return (broadcast_to(kept, a.shape),)

    return _make(data, (a,), vjp, "sum")


def tmean(a, axis=None, keepdims=False):
    if axis is None:
        n = a.size
    else:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        n = int(np.prod([a.shape[ax % a.ndim] for ax in axes]))
    return mul(tsum(a, axis=axis, keepdims=keepdims), Tensor(1.0 / n))


# -- linear algebra and layout -----------------------------------------

def matmul(a, b):
    a, b = _wrap(a), _wrap(b)
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul expects 2-D operands, got {a.shape} @ {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul inner dims differ: {a.shape} @ {b.shape}")
    return _make(a.data @ b.data, (a, b),
                 lambda g: (matmul(g, transpose(b)), matmul(transpose(a), g)),
                 "matmul")


def transpose(a):
    if a.ndim != 2:
        raise ShapeError(f"transpose expects a 2-D tensor, got {a.shape}")
    return _make(a.data.T.copy(), (a,), lambda g: (transpose(g),), "transpose")


def permute(a, axes):
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _make(np.transpose(a.data, axes).copy(), (a,),
                 lambda g: (permute(g, inv),), "permute")


def reshape(a, shape):
    if isinstance(shape, int):
        shape = (shape,)
    shape = tuple(shape)
    try:
        data = a.data.reshape(shape)
    except ValueError as e:
        raise ShapeError(str(e)) from None
    return _make(data.copy(), (a,), lambda g: (reshape(g, a.shape),), "reshape")


def narrow(a, axis, start, length):
    """Contiguous slice of ``length`` entries along ``axis``."""
    axis = axis % a.ndim
    if start < 0 or start + length > a.shape[axis]:
        raise ShapeError(f"narrow [{start}:{start + length}) out of range "
                         f"for axis {axis} of {a.shape}")
    sl = tuple(slice(start, start + length) if i == axis else slice(None)
               for i in range(a.ndim))
    return _make(a.data[sl].copy(), (a,),
                 lambda g: (_embed(g, a.shape, axis, start),), "narrow")


def _embed(g, shape, axis, start):
    """Adjoint of narrow: place ``g`` into zeros of ``shape``."""
    length = g.shape[axis]

    def vjp(gg):
        return (narrow(gg, axis, start, length),)

    data = np.zeros(shape)
    sl = tuple(slice(start, start + length) if i == axis else slice(None)
               for i in range(len(shape)))
    data[sl] = g.data
    return _make(data, (g,), vjp, "embed")


def concat(tensors, axis=0):
    tensors = [_wrap(t) for t in tensors]
    if not tensors:
        raise ShapeError("concat of zero tensors")
    axis = axis % tensors[0].ndim
    ref = list(tensors[0].shape)
    for t in tensors[1:]:
        s = list(t.shape)
        if len(s) != len(ref) or any(s[i] != ref[i] for i in range(len(ref)) if i != axis):
            raise ShapeError(f"concat shape mismatch: {tensors[0].shape} vs {t.shape}")
    data = np.concatenate([t.data for t in tensors], axis=axis)
    offsets = np.cumsum([0] + [t.shape[axis] for t in tensors])

    def vjp(g):
        return tuple(narrow(g, axis, int(offsets[i]), t.shape[axis])
                     for i, t in enumerate(tensors))

    return _make(data, tuple(tensors), vjp, "concat")


# -- softmax and cross-entropy -----------------------------------------

def softmax(a, axis=-1):
    axis = axis % a.ndim if a.ndim else 0
    if a.ndim == 0:
        raise ShapeError("softmax of a 0-d tensor")
    m = Tensor(np.max(a.data, axis=axis, keepdims=True))
    e = texp(sub(a, broadcast_to(m, a.shape)))
    return div(e, broadcast_to(tsum(e, axis=axis, keepdims=True), a.shape))


def cross_entropy_with_logits(logits, labels):
    """Per-example -log softmax(logits)[label]; shape (B,).

    Fused log-sum-exp with max subtraction for stability.
    """
    if logits.ndim != 2:
        raise ShapeError(f"cross_entropy expects (B, C) logits, got {logits.shape}")
    labels = np.asarray(labels, dtype=np.int64)
    b, c = logits.shape
    if labels.shape != (b,):
        raise ShapeError(f"labels shape {labels.shape} does not match batch {b}")
    if labels.min(initial=0) < 0 or labels.max(initial=0) >= c:
        raise ValueError(f"label out of range [0, {c})")
    m = Tensor(np.max(logits.data, axis=1, keepdims=True))
    z = sub(logits, broadcast_to(m, logits.shape))
    lse = tlog(tsum(texp(z), axis=1))
    onehot = np.zeros((b, c))
    onehot[np.arange(b), labels] = 1.0
    picked = tsum(mul(z, Tensor(onehot)), axis=1)
    return sub(lse, picked)


# -- convolution-family primitives (3x3, stride 1, zero "same" pad) ----

def _im2col_data(x):
    bN, c, h, w = x.shape
    xp = np.zeros((bN, c, h + 2, w + 2))
    xp[:, :, 1:-1, 1:-1] = x
    # layout: (C, ky*3+kx, B, H, W) -> (C*9, B*H*W)
    cols = np.empty((c, 9, bN, h, w))
    for ky in range(3):
        for kx in range(3):
            cols[:, ky * 3 + kx] = np.transpose(xp[:, :, ky:ky + h, kx:kx + w], (1, 0, 2, 3))
    return cols.reshape(c * 9, bN * h * w)


def _col2im_data(cols, x_shape):
    bN, c, h, w = x_shape
    cols = cols.reshape(c, 9, bN, h, w)
    xp = np.zeros((bN, c, h + 2, w + 2))
    for ky in range(3):
        for kx in range(3):
            xp[:, :, ky:ky + h, kx:kx + w] += np.transpose(cols[:, ky * 3 + kx], (1, 0, 2, 3))
    return xp[:, :, 1:-1, 1:-1]


def im2col(x):
    """(B, C, H, W) -> (C*9, B*H*W) patch matrix; adjoint is col2im."""
    if x.ndim != 4:
        raise ShapeError(f"im2col expects (B, C, H, W), got {x.shape}")
    shape = x.shape
    return _make(_im2col_data(x.data), (x,),
                 lambda g: (col2im(g, shape),), "im2col")


def col2im(cols, x_shape):
    bN, c, h, w = x_shape
    if cols.shape != (c * 9, bN * h * w):
        raise ShapeError(f"col2im shape {cols.shape} does not match {x_shape}")
    return _make(_col2im_data(cols.data, x_shape), (cols,),
                 lambda g: (im2col(g),), "col2im")


def conv3x3(x, w):
    """3x3 same-padding stride-1 convolution.

    ``w`` has shape (C_out, C_in*9), kernel flattened as c_in*9 + ky*3 + kx.
    """
    if x.ndim != 4:
        raise ShapeError(f"conv3x3 expects (B, C, H, W) input, got {x.shape}")
    bN, c, h, wd = x.shape
    if w.ndim != 2 or w.shape[1] != c * 9:
        raise ShapeError(f"conv3x3 kernel {w.shape} does not match {c} input channels")
    cols = im2col(x)
    out2 = matmul(w, cols)                        # (C_out, B*H*W)
    out = reshape(out2, (w.shape[0], bN, h, wd))
    return permute(out, (1, 0, 2, 3))


def avg_pool3x3(x):
    """3x3 same-padding mean pool (zeros count at borders); self-adjoint."""
    if x.ndim != 4:
        raise ShapeError(f"avg_pool3x3 expects (B, C, H, W), got {x.shape}")

    def pool(data):
        bN, c, h, w = data.shape
        xp = np.zeros((bN, c, h + 2, w + 2))
        xp[:, :, 1:-1, 1:-1] = data
        out = np.zeros_like(data)
        for ky in range(3):
            for kx in range(3):
                out += xp[:, :, ky:ky + h, kx:kx + w]
        return out / 9.0

    return _make(pool(x.data), (x,), lambda g: (avg_pool3x3(g),), "avg_pool3x3")


# -- generic dispatcher -------------------------------------------------

_OPS = {
    "add": lambda ins, attrs: add(*ins),
    "sub": lambda ins, attrs: sub(*ins),
    "mul": lambda ins, attrs: mul(*ins),
    "div": lambda ins, attrs: div(*ins),
    "neg": lambda ins, attrs: neg(*ins),
    "matmul": lambda ins, attrs: matmul(*ins),
    "conv3x3": lambda ins, attrs: conv3x3(*ins),
    "avg_pool3x3": lambda ins, attrs: avg_pool3x3(*ins),
    "relu": lambda ins, attrs: relu(*ins),
    "sigmoid": lambda ins, attrs: sigmoid(*ins),
    "softmax": lambda ins, attrs: softmax(ins[0], axis=attrs.get("axis", -1)),
    "log": lambda ins, attrs: tlog(*ins),
    "exp": lambda ins, attrs: texp(*ins),
    "sum": lambda ins, attrs: tsum(ins[0], axis=attrs.get("axis"),
                                   keepdims=attrs.get("keepdims", False)),
    "mean": lambda ins, attrs: tmean(ins[0], axis=attrs.get("axis"),
                                     keepdims=attrs.get("keepdims", False)),
    "cross_entropy_with_logits": lambda ins, attrs: cross_entropy_with_logits(
        ins[0], attrs["labels"]),
    "concat": lambda ins, attrs: concat(ins, axis=attrs.get("axis", 0)),
    "reshape": lambda ins, attrs: reshape(ins[0], attrs["shape"]),
}


def apply(op_kind, inputs, attrs=None):
    """Apply a primitive by name; the uniform entry point over the op set."""
    if op_kind not in _OPS:
        raise ValueError(f"unknown op kind '{op_kind}'")
    return _OPS[op_kind]([_wrap(t) for t in inputs], attrs or {})


# -- finite-difference gradient checker --------------------------------

def grad_check(f, x, step=1e-6):
    """Max relative error between analytic and central-difference gradients.

    ``f`` maps a Tensor to a scalar Tensor.  Error per coordinate is
    |analytic - fd| / max(1, |analytic|); the max over coordinates is
    returned.
    """
    if step <= 0:
        raise ValueError("step must be positive")
    leaf = Tensor(np.array(x.data if isinstance(x, Tensor) else x, dtype=np.float64),
                  requires_grad=True)
    analytic = grad(f(leaf), [leaf])[0].data
    fd = np.empty_like(leaf.data)
    flat = leaf.data.reshape(-1)
    fd_flat = fd.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        up = f(Tensor(leaf.data)).item()
        flat[i] = orig - step
        dn = f(Tensor(leaf.data)).item()
        flat[i] = orig
        fd_flat[i] = (up - dn) / (2.0 * step)
    rel = np.abs(analytic - fd) / np.maximum(1.0, np.abs(analytic))
    return float(rel.max()) if rel.size else 0.0
