"""Synthetic datasets with controlled noise, CSV/IDX ingestion, and holdout splits.

Noise masks (and the uncorrupted labels kept for clean evaluation) live on the
dataset objects only; training and scoring receive :class:`TrainView` objects,
which carry inputs and targets and nothing else.
"""

from __future__ import annotations

import csv
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np


class DataFormatError(ValueError):
    pass


@dataclass(frozen=True)
class TrainView:
    """What a learner or scorer may see: inputs and targets."""

    x: np.ndarray
    y: np.ndarray

    def __len__(self):
        return self.x.shape[0]


@dataclass
class LabeledDataset:
    features: np.ndarray
    labels: np.ndarray
    noise_mask: np.ndarray
    num_classes: int
    true_labels: np.ndarray | None = None
    split: str = "all"
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        self.noise_mask = np.asarray(self.noise_mask, dtype=bool)
        if self.true_labels is None:
            self.true_labels = self.labels.copy()
        if not (len(self.features) == len(self.labels) == len(self.noise_mask)):
            raise DataFormatError("features, labels and noise_mask differ in length")
        if not np.all(np.isfinite(self.features)):
            raise DataFormatError("features must be finite")

    def __len__(self):
        return self.features.shape[0]

    @property
    def dim(self) -> int:
        return self.features.shape[1]

    def view(self) -> TrainView:
        return TrainView(self.features, self.labels)

    def eval_view(self) -> TrainView:
        """Inputs with uncorrupted targets, for held-out metrics."""
        return TrainView(self.features, self.true_labels)

    def subset(self, idx, split=None) -> "LabeledDataset":
        idx = np.asarray(idx, dtype=np.int64)
        return LabeledDataset(self.features[idx], self.labels[idx], self.noise_mask[idx],
                              self.num_classes, self.true_labels[idx], split or self.split,
                              dict(self.meta))

    @property
    def stratify_key(self):
        return self.labels


@dataclass
class PairedDataset:
    view_a: np.ndarray
    view_b: np.ndarray
    mismatch_mask: np.ndarray
    split: str = "all"
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.view_a = np.asarray(self.view_a, dtype=np.float64)
        self.view_b = np.asarray(self.view_b, dtype=np.float64)
        self.mismatch_mask = np.asarray(self.mismatch_mask, dtype=bool)
        if not (len(self.view_a) == len(self.view_b) == len(self.mismatch_mask)):
            raise DataFormatError("views and mismatch_mask differ in length")

    def __len__(self):
        return self.view_a.shape[0]

    @property
    def noise_mask(self):
        return self.mismatch_mask

    def view(self) -> TrainView:
        return TrainView(self.view_a, self.view_b)

    def eval_view(self) -> TrainView:
        return self.view()

    def subset(self, idx, split=None) -> "PairedDataset":
        idx = np.asarray(idx, dtype=np.int64)
        return PairedDataset(self.view_a[idx], self.view_b[idx], self.mismatch_mask[idx],
                             split or self.split, dict(self.meta))

    @property
    def stratify_key(self):
        return None


# ---------------------------------------------------------------- generators

def class_centers(d: int, k: int, separation: float, seed: int) -> np.ndarray:
    """``k`` centres in ``R^d`` with every pairwise distance at least ``separation``."""
    rng = np.random.default_rng([seed, 0xC1A55])
    if k <= d:
        q, _ = np.linalg.qr(rng.normal(size=(d, d)))
        return q[:, :k].T * (separation / np.sqrt(2.0))
    centers = []
    while len(centers) < k:
        c = rng.normal(size=d)
        c *= separation * np.sqrt(k) / np.linalg.norm(c)
        if all(np.linalg.norm(c - o) >= separation for o in centers):
            centers.append(c)
    return np.array(centers)


def gen_classification(n: int, d: int, k: int, noise_rate: float, seed: int,
                       separation: float = 6.0, centers_seed: int | None = None) -> LabeledDataset:
    """Unit-variance Gaussian clusters with labels flipped to a uniformly chosen wrong class.

    ``centers_seed`` fixes the cluster geometry independently of the sample
    draw, so several datasets (train, holdout, reference data) can share it.
    """
    if not 0.0 <= noise_rate < 1.0:
        raise ValueError(f"noise_rate must be in [0, 1), got {noise_rate}")
    if k < 2:
        raise ValueError("need at least two classes")
    centers = class_centers(d, k, separation, seed if centers_seed is None else centers_seed)
    rng = np.random.default_rng([seed, 0xDA7A])
    true = rng.integers(0, k, size=n)
    x = centers[true] + rng.normal(size=(n, d))
    mask = rng.random(n) < noise_rate
    shift = rng.integers(1, k, size=n)
    labels = np.where(mask, (true + shift) % k, true)
    meta = {"kind": "classification", "n": n, "d": d, "k": k, "noise_rate": noise_rate,
            "seed": seed, "separation": separation,
            "centers_seed": seed if centers_seed is None else centers_seed}
    return LabeledDataset(x, labels, mask, k, true, "all", meta)


def gen_paired(n: int, d: int, mismatch_rate: float, seed: int, latent_dim: int = 8,
               view_noise: float = 0.5, mapping_seed: int | None = None) -> PairedDataset:
    """Two noisy linear views of a shared Gaussian latent; a fraction of pairs is shuffled."""
    if not 0.0 <= mismatch_rate < 1.0:
        raise ValueError(f"mismatch_rate must be in [0, 1), got {mismatch_rate}")
    mseed = seed if mapping_seed is None else mapping_seed
    maps = np.random.default_rng([mseed, 0x3A9])
    a = maps.normal(size=(latent_dim, d)) / np.sqrt(latent_dim)
    c = maps.normal(size=(latent_dim, d)) / np.sqrt(latent_dim)
    rng = np.random.default_rng([seed, 0xDA7A])
    z = rng.normal(size=(n, latent_dim))
    view_a = z @ a + view_noise * rng.normal(size=(n, d))
    view_b = z @ c + view_noise * rng.normal(size=(n, d))
    mask = rng.random(n) < mismatch_rate
    idx = np.flatnonzero(mask)
    if idx.size > 1:
        # cyclic shift guarantees every selected pair really is broken
        view_b[idx] = view_b[np.roll(idx, 1)]
    elif idx.size == 1:
        mask[idx] = False
    meta = {"kind": "paired", "n": n, "d": d, "mismatch_rate": mismatch_rate, "seed": seed,
            "latent_dim": latent_dim, "view_noise": view_noise, "mapping_seed": mseed}
    return PairedDataset(view_a, view_b, mask, "all", meta)


def split_holdout(dataset, fraction: float, seed: int):
    """Disjoint ``(train, holdout)`` split, stratified by class when labels exist."""
    if not 0.0 < fraction < 1.0:
        raise ValueError(f"fraction must be in (0, 1), got {fraction}")
    rng = np.random.default_rng([seed, 0x5B17])
    n = len(dataset)
    key = dataset.stratify_key
    if key is None:
        perm = rng.permutation(n)
        cut = int(round(fraction * n))
        hold, train = np.sort(perm[:cut]), np.sort(perm[cut:])
    else:
        hold_parts, train_parts = [], []
        carry = 0.0
        for cls in np.unique(key):
            members = rng.permutation(np.flatnonzero(key == cls))
            exact = fraction * members.size + carry
            cut = int(np.floor(exact + 0.5))
            carry = exact - cut
            hold_parts.append(members[:cut])
            train_parts.append(members[cut:])
        hold = np.sort(np.concatenate(hold_parts))
        train = np.sort(np.concatenate(train_parts))
    return dataset.subset(train, "train"), dataset.subset(hold, "holdout")


# ---------------------------------------------------------------- CSV

def save_csv(dataset: LabeledDataset, path):
    path = Path(path)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow([f"f{i}" for i in range(dataset.dim)] + ["label"])
        for row, lab in zip(dataset.features, dataset.labels):
            w.writerow([repr(float(v)) for v in row] + [int(lab)])
    return path


def load_csv(path, num_classes: int | None = None) -> LabeledDataset:
    """Header row, feature columns, then an integer ``label`` column."""
    path = Path(path)
    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise DataFormatError(f"{path}: empty file") from None
        if len(header) < 2 or header[-1].strip().lower() != "label":
            raise DataFormatError(f"{path}: header must end with a 'label' column, got {header}")
        width = len(header)
        feats, labels = [], []
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != width:
                raise DataFormatError(
                    f"{path}: line {lineno} has {len(row)} fields, expected {width}")
            try:
                feats.append([float(v) for v in row[:-1]])
                labels.append(int(row[-1]))
            except ValueError as exc:
                raise DataFormatError(f"{path}: line {lineno}: {exc}") from None
    labels = np.asarray(labels, dtype=np.int64)
    k = num_classes if num_classes is not None else (int(labels.max()) + 1 if labels.size else 2)
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        bad = int(np.flatnonzero((labels < 0) | (labels >= k))[0])
        raise DataFormatError(f"{path}: line {bad + 2}: label {labels[bad]} out of range [0, {k})")
    x = np.asarray(feats, dtype=np.float64).reshape(len(labels), width - 1)
    return LabeledDataset(x, labels, np.zeros(len(labels), dtype=bool), max(k, 2),
                          meta={"kind": "csv", "path": str(path)})


# ---------------------------------------------------------------- IDX

_IDX_TYPES = {0x08: ">u1", 0x09: ">i1", 0x0B: ">i2", 0x0C: ">i4", 0x0D: ">f4", 0x0E: ">f8"}
_IDX_CODES = {np.dtype(v).newbyteorder("="): k for k, v in _IDX_TYPES.items()}


def read_idx(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if len(raw) < 4:
        raise DataFormatError(f"{path}: too short for an IDX header")
    zero, code, ndim = struct.unpack(">HBB", raw[:4])
    if zero != 0 or code not in _IDX_TYPES:
        raise DataFormatError(f"{path}: bad IDX magic 0x{int.from_bytes(raw[:4], 'big'):08x}")
    head = 4 + 4 * ndim
    if len(raw) < head:
        raise DataFormatError(f"{path}: truncated IDX dimensions")
    shape = struct.unpack(f">{ndim}I", raw[4:head])
    dtype = np.dtype(_IDX_TYPES[code])
    count = int(np.prod(shape)) if ndim else 1
    if len(raw) - head != count * dtype.itemsize:
        raise DataFormatError(f"{path}: payload size does not match shape {shape}")
    return np.frombuffer(raw, dtype=dtype, offset=head).reshape(shape).astype(dtype.newbyteorder("="))


def write_idx(array, path):
    array = np.asarray(array)
    code = _IDX_CODES.get(array.dtype.newbyteorder("="))
    if code is None:
        raise DataFormatError(f"dtype {array.dtype} has no IDX type code")
    header = struct.pack(">HBB", 0, code, array.ndim) + struct.pack(f">{array.ndim}I", *array.shape)
    Path(path).write_bytes(header + array.astype(_IDX_TYPES[code]).tobytes())
    return Path(path)


def load_idx(images_path, labels_path, num_classes: int | None = None,
             scale: float = 1.0) -> LabeledDataset:
    images = read_idx(images_path)
    labels = read_idx(labels_path).astype(np.int64).ravel()
    if images.shape[0] != labels.shape[0]:
        raise DataFormatError(f"{images.shape[0]} images but {labels.shape[0]} labels")
    k = num_classes if num_classes is not None else int(labels.max()) + 1
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        raise DataFormatError(f"label out of range [0, {k})")
    x = images.reshape(images.shape[0], -1).astype(np.float64) * scale
    return LabeledDataset(x, labels, np.zeros(labels.size, dtype=bool), max(k, 2),
                          meta={"kind": "idx", "images": str(images_path),
                                "labels": str(labels_path)})


# ---------------------------------------------------------------- manifests

def write_manifest(path, dataset, files: dict):
    noise = dataset.noise_mask
    manifest = dict(dataset.meta)
    manifest.update({"count": len(dataset), "noise_fraction": float(noise.mean()) if len(noise) else 0.0,
                     "files": {k: str(v) for k, v in files.items()}})
    Path(path).write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return manifest


def read_manifest(path) -> dict:
    return json.loads(Path(path).read_text())


def generate(spec: dict):
    """Build a dataset from a ``{"kind": ..., ...}`` description."""
    spec = dict(spec)
    kind = spec.pop("kind", "classification")
    if kind == "classification":
        return gen_classification(**spec)
    if kind == "paired":
        return gen_paired(**spec)
    raise ValueError(f"unknown dataset kind {kind!r}")
