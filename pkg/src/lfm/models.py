"""The two learners sharing the continuous architecture, and the small
embedding encoder.

Learner: stem -> one cell over the search space -> pooled features ->
linear classifier.  Encoder: two conv (or linear) layers ending in a
K-dimensional projection.  Everything is bias-free except the classifier.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import ShapeError, Tensor
from .search_space import CellSpec, OpSet, cell_forward

MAGIC_WEIGHTS = b"LFMW"
_VERSION = 1


@dataclass(frozen=True)
class ModelConfig:
    """Shapes shared by the learners and the encoder."""

    input_kind: str = "image"      # image: (B, C, H, W); flat: (B, F)
    in_channels: int = 1
    height: int = 8
    width: int = 8
    channels: int = 8              # learner cell width (image mode)
    in_features: int = 8           # flat mode input width
    hidden: int = 8                # flat mode cell width
    classes: int = 4
    encoder_dim: int = 16          # K
    encoder_channels: int = 8

    def __post_init__(self):
        if self.input_kind not in ("image", "flat"):
            raise ValueError(f"unknown input_kind '{self.input_kind}'")


def init_tensor(rng, shape, scheme, fan_in=None):
    if scheme == "zeros":
        return np.zeros(shape)
    if scheme == "scaled-normal":
        if fan_in is None:
            fan_in = shape[0]
        return rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)
    if isinstance(scheme, tuple) and scheme[0] == "uniform":
        a = scheme[1]
        return rng.uniform(-a, a, size=shape)
    raise ValueError(f"unknown init scheme {scheme!r}")


def init_weights(seed, shapes, scheme="scaled-normal", fan_ins=None):
    """Deterministic named collection; ``shapes`` maps name -> shape.

    Entries are drawn in sorted-name order so the result depends only on
    (seed, shapes, scheme).
    """
    rng = np.random.default_rng(seed)
    fan_ins = fan_ins or {}
    out = {}
    for name in sorted(shapes):
        out[name] = Tensor(init_tensor(rng, shapes[name], scheme, fan_ins.get(name)),
                           requires_grad=True)
    return out


# -- learner ------------------------------------------------------------

def learner_shapes(cfg: ModelConfig, spec: CellSpec, op_set: OpSet):
    shapes, fan_ins = {}, {}
    if cfg.input_kind == "image":
        c = cfg.channels
        shapes["stem/conv"] = (c, cfg.in_channels * 9)
        fan_ins["stem/conv"] = cfg.in_channels * 9
        for (i, j) in spec.edges:
            for name in op_set.names:
                if name == "conv3x3":
                    key = f"edge{i}-{j}/conv3x3"
                    shapes[key] = (c, c * 9)
                    fan_ins[key] = c * 9
        shapes["fc/w"] = (c, cfg.classes)
        shapes["fc/b"] = (cfg.classes,)
    else:
        h = cfg.hidden
        shapes["stem/w"] = (cfg.in_features, h)
        for (i, j) in spec.edges:
            for name in op_set.names:
                if name == "linear":
                    shapes[f"edge{i}-{j}/linear"] = (h, h)
        shapes["fc/w"] = (h, cfg.classes)
        shapes["fc/b"] = (cfg.classes,)
    return shapes, fan_ins


def init_learner(seed, cfg, spec, op_set):
    shapes, fan_ins = learner_shapes(cfg, spec, op_set)
    w = init_weights(seed, shapes, "scaled-normal", fan_ins)
    w["fc/b"] = Tensor(np.zeros(cfg.classes), requires_grad=True)
    return w


def _edge_params(weights, spec, op_set):
    per_edge = {}
    for (i, j) in spec.edges:
        d = {}
        for name in op_set.names:
            key = f"edge{i}-{j}/{name}"
            if key in weights:
                d[name] = weights[key]
        per_edge[(i, j)] = d
    return per_edge


def learner_forward(arch, weights, batch, cfg, spec, op_set):
    """Class logits (B, C) for a batch; differentiable w.r.t. ``arch``
    and ``weights``."""
    if cfg.input_kind == "image":
        if batch.ndim != 4 or batch.shape[1:] != (cfg.in_channels, cfg.height, cfg.width):
            raise ShapeError(f"batch shape {batch.shape} does not match "
                             f"(B, {cfg.in_channels}, {cfg.height}, {cfg.width})")
        h = ad.relu(ad.conv3x3(batch, weights["stem/conv"]))
        h = cell_forward(arch, _edge_params(weights, spec, op_set), spec, op_set, h)
        h = ad.tmean(h, axis=(2, 3))
    else:
        if batch.ndim != 2 or batch.shape[1] != cfg.in_features:
            raise ShapeError(f"batch shape {batch.shape} does not match "
                             f"(B, {cfg.in_features})")
        h = ad.relu(batch @ weights["stem/w"])
        h = cell_forward(arch, _edge_params(weights, spec, op_set), spec, op_set, h)
    logits = h @ weights["fc/w"]
    b = ad.broadcast_to(ad.reshape(weights["fc/b"], (1, cfg.classes)), logits.shape)
    return logits + b


# -- encoder ------------------------------------------------------------

def encoder_shapes(cfg: ModelConfig):
    k = cfg.encoder_dim
    if cfg.input_kind == "image":
        e = cfg.encoder_channels
        return ({"enc/conv1": (e, cfg.in_channels * 9),
                 "enc/conv2": (e, e * 9),
                 "enc/proj": (e, k)},
                {"enc/conv1": cfg.in_channels * 9, "enc/conv2": e * 9})
    h = cfg.hidden
    return ({"enc/w1": (cfg.in_features, h), "enc/proj": (h, k)}, {})


def init_encoder(seed, cfg):
    shapes, fan_ins = encoder_shapes(cfg)
    return init_weights(seed, shapes, "scaled-normal", fan_ins)


def encoder_embed(weights, batch, cfg):
    """K-dimensional embeddings (B, K); differentiable w.r.t. the
    encoder weights."""
    if cfg.input_kind == "image":
        h = ad.relu(ad.conv3x3(batch, weights["enc/conv1"]))
        h = ad.relu(ad.conv3x3(h, weights["enc/conv2"]))
        h = ad.tmean(h, axis=(2, 3))
    else:
        h = ad.relu(batch @ weights["enc/w1"])
    return h @ weights["enc/proj"]


# -- checkpoint container ----------------------------------------------

def save_weights(weights, path):
    """Flat binary container: magic, version, entry count, then per
    entry (name length, name, rank, dims, little-endian f64 payload)."""
    with open(path, "wb") as f:
        f.write(MAGIC_WEIGHTS)
        f.write(struct.pack("<II", _VERSION, len(weights)))
        for name in sorted(weights):
            arr = np.ascontiguousarray(weights[name].data, dtype="<f8")
            nb = name.encode("utf-8")
            f.write(struct.pack("<I", len(nb)))
            f.write(nb)
            f.write(struct.pack("<I", arr.ndim))
            f.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            f.write(arr.tobytes())


def load_weights(path):
    with open(path, "rb") as f:
        blob = f.read()
    if blob[:4] != MAGIC_WEIGHTS:
        raise ValueError(f"bad magic at offset 0: {blob[:4]!r}")
    version, count = struct.unpack_from("<II", blob, 4)
    if version != _VERSION:
        raise ValueError(f"unsupported weight container version {version}")
    off = 12
    out = {}
    try:
        for _ in range(count):
            (nlen,) = struct.unpack_from("<I", blob, off)
            off += 4
            name = blob[off:off + nlen].decode("utf-8")
            off += nlen
            (rank,) = struct.unpack_from("<I", blob, off)
            off += 4
            dims = struct.unpack_from(f"<{rank}I", blob, off)
            off += 4 * rank
            n = int(np.prod(dims)) if rank else 1
            arr = np.frombuffer(blob, dtype="<f8", count=n, offset=off).reshape(dims)
            off += 8 * n
            out[name] = Tensor(arr.copy(), requires_grad=True)
    except struct.error as e:
        raise ValueError(f"truncated weight container at offset {off}") from e
    if off != len(blob):
        raise ValueError(f"trailing bytes after offset {off}")
    return out
