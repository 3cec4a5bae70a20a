"""Synthetic benchmark data with controllable label noise, plus the
"LFMD" on-disk container and deterministic splitting.

Container byte layout (all integers little-endian u32, values f64):
  magic "LFMD" | version | N | C | rank | dims[rank] | labels (N x u32)
  | values (N * prod(dims) x f64)
``dims`` are the per-example dims, e.g. (1, 8, 8) for single-channel
8x8 images or (F,) for feature vectors.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

MAGIC_DATA = b"LFMD"
_VERSION = 1


@dataclass
class Dataset:
    x: np.ndarray                 # (N, ...) float64
    labels: np.ndarray            # (N,) int64 in [0, C)
    n_classes: int
    provenance: str = "synthetic"
    clean_labels: np.ndarray | None = None   # pre-noise record, in-memory only

    def __post_init__(self):
        self.x = np.asarray(self.x, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if len(self.x) != len(self.labels):
            raise ValueError(f"{len(self.x)} examples but {len(self.labels)} labels")
        if len(self.x) < 1:
            raise ValueError("empty dataset")
        bad = np.flatnonzero((self.labels < 0) | (self.labels >= self.n_classes))
        if bad.size:
            raise ValueError(f"label out of range [0, {self.n_classes}) "
                             f"at index {int(bad[0])}")

    def __len__(self):
        return len(self.x)

    def subset(self, idx):
        return Dataset(self.x[idx], self.labels[idx], self.n_classes,
                       provenance=self.provenance,
                       clean_labels=None if self.clean_labels is None
                       else self.clean_labels[idx])


@dataclass(frozen=True)
class NoiseSpec:
    rate: float = 0.0
    mode: str = "uniform-flip"

    def __post_init__(self):
        if not 0.0 <= self.rate <= 1.0:
            raise ValueError(f"noise rate {self.rate} outside [0, 1]")
        if self.mode != "uniform-flip":
            raise ValueError(f"unknown noise mode '{self.mode}'")


def _render_image(rng, cls, n_classes, size):
    """Class-conditional pattern: an oriented Gaussian ridge whose angle
    and offset depend on the class, plus pixel noise."""
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    yy = (yy - (size - 1) / 2) / size
    xx = (xx - (size - 1) / 2) / size
    angle = np.pi * cls / n_classes
    c, s = np.cos(angle), np.sin(angle)
    d = c * xx + s * yy - 0.12 * ((cls % 2) * 2 - 1)
    img = np.exp(-(d ** 2) / (2 * 0.12 ** 2))
    img += rng.standard_normal((size, size)) * 0.35
    return img[None, :, :]


def make_synthetic(n, classes, noise: NoiseSpec, seed, form="image",
                   image_size=8, features=8):
    """Near-balanced class-conditional data; exactly round(rate*n)
    labels flipped to a uniformly chosen different class."""
    if n < classes:
        raise ValueError(f"need at least one example per class, n={n} < {classes}")
    rng = np.random.default_rng(seed)
    clean = np.tile(np.arange(classes), n // classes + 1)[:n].astype(np.int64)
    rng.shuffle(clean)
    if form == "image":
        x = np.stack([_render_image(rng, int(c), classes, image_size) for c in clean])
    elif form == "flat":
        centers = rng.standard_normal((classes, features)) * 2.0
        x = centers[clean] + rng.standard_normal((n, features))
    else:
        raise ValueError(f"unknown form '{form}'")
    ds = Dataset(x, clean.copy(), classes, provenance="synthetic",
                 clean_labels=clean.copy())
    return apply_label_noise(ds, noise, seed + 1)


def apply_label_noise(dataset, noise: NoiseSpec, seed):
    """Flip exactly round(rate * N) labels, each to a different class."""
    rng = np.random.default_rng(seed)
    n = len(dataset)
    n_flip = int(round(noise.rate * n))
    labels = dataset.labels.copy()
    clean = labels.copy() if dataset.clean_labels is None else dataset.clean_labels.copy()
    flip_idx = rng.choice(n, size=n_flip, replace=False)
    for i in flip_idx:
        offset = rng.integers(1, dataset.n_classes)
        labels[i] = (labels[i] + offset) % dataset.n_classes
    return Dataset(dataset.x, labels, dataset.n_classes,
                   provenance=dataset.provenance, clean_labels=clean)


def split_dataset(dataset, fractions, seed):
    """Deterministic disjoint (train, val, test) split.

    Fractions must be positive and sum to at most 1 (within 1e-9); when
    they sum to 1 the splits cover every index.
    """
    fracs = tuple(float(f) for f in fractions)
    if len(fracs) != 3:
        raise ValueError("expected three split fractions")
    if any(f <= 0 for f in fracs):
        raise ValueError("each requested split must be nonempty: "
                         f"fractions {fracs}")
    total = sum(fracs)
    if total > 1.0 + 1e-9:
        raise ValueError(f"split fractions sum to {total} > 1")
    n = len(dataset)
    sizes = [int(round(f * n)) for f in fracs[:2]]
    if abs(total - 1.0) <= 1e-9:
        sizes.append(n - sizes[0] - sizes[1])
    else:
        sizes.append(int(round(fracs[2] * n)))
    if any(s < 1 for s in sizes):
        raise ValueError(f"split sizes {sizes} include an empty split")
    if sum(sizes) > n:
        raise ValueError(f"split sizes {sizes} exceed dataset size {n}")
    idx = np.random.default_rng(seed).permutation(n)
    a, b, c = sizes
    return (dataset.subset(idx[:a]),
            dataset.subset(idx[a:a + b]),
            dataset.subset(idx[a + b:a + b + c]))


def save_dataset(dataset, path):
    dims = dataset.x.shape[1:]
    with open(path, "wb") as f:
        f.write(MAGIC_DATA)
        f.write(struct.pack("<IIII", _VERSION, len(dataset), dataset.n_classes,
                            len(dims)))
        f.write(struct.pack(f"<{len(dims)}I", *dims))
        f.write(np.ascontiguousarray(dataset.labels, dtype="<u4").tobytes())
        f.write(np.ascontiguousarray(dataset.x, dtype="<f8").tobytes())


def load_dataset(path):
    with open(path, "rb") as f:
        blob = f.read()
    if blob[:4] != MAGIC_DATA:
        raise ValueError(f"bad magic at offset 0: {blob[:4]!r}")
    try:
        version, n, n_classes, rank = struct.unpack_from("<IIII", blob, 4)
        if version != _VERSION:
            raise ValueError(f"unsupported dataset container version {version}")
        dims = struct.unpack_from(f"<{rank}I", blob, 20)
    except struct.error as e:
        raise ValueError("truncated header") from e
    off = 20 + 4 * rank
    per = int(np.prod(dims)) if rank else 1
    need = off + 4 * n + 8 * n * per
    if len(blob) < need:
        raise ValueError(f"truncated payload: have {len(blob)} bytes, "
                         f"need {need} (offset {off})")
    labels = np.frombuffer(blob, dtype="<u4", count=n, offset=off).astype(np.int64)
    x = np.frombuffer(blob, dtype="<f8", count=n * per,
                      offset=off + 4 * n).reshape((n,) + dims)
    return Dataset(x.copy(), labels, n_classes, provenance="file")
