"""Dataset ingestion, synthetic generation, and client partitioning.

Datasets are dense: an (N, n) float64 feature matrix and an (N,) int64
class-index vector.  Ingestion covers the sparse ``label idx:val`` text
format (1-based ascending indices) and the big-endian binary image/label
pair format; both fail with structured errors that carry a position.
"""

from __future__ import annotations

import logging
import struct
from dataclasses import dataclass, field

import numpy as np

from .linalg import Rng

log = logging.getLogger("fedknow.data")

IMAGE_MAGIC = 0x00000803
LABEL_MAGIC = 0x00000801


class ParseError(ValueError):
    """Malformed input; message includes the offending line or byte offset."""


@dataclass
class Dataset:
    """Dense features, 0-based class labels, and the original label values."""

    x: np.ndarray
    y: np.ndarray
    k: int
    label_values: tuple[float, ...] = field(default=())

    def __post_init__(self):
        self.x = np.asarray(self.x, dtype=np.float64)
        self.y = np.asarray(self.y, dtype=np.int64)
        if self.x.ndim != 2:
            raise ValueError(f"features must be 2-D, got {self.x.shape}")
        if self.y.shape != (self.x.shape[0],):
            raise ValueError("features/labels length mismatch")
        if len(self.y) and (self.y.min() < 0 or self.y.max() >= self.k):
            raise ValueError(f"label outside 0..{self.k - 1}")
        if not np.all(np.isfinite(self.x)):
            raise ValueError("non-finite feature values")
        if not self.label_values:
            self.label_values = tuple(float(i) for i in range(self.k))

    @property
    def n(self) -> int:
        return self.x.shape[1]

    @property
    def count(self) -> int:
        return self.x.shape[0]

    def take(self, idx) -> "Dataset":
        idx = np.asarray(idx, dtype=np.int64)
        return Dataset(self.x[idx], self.y[idx], self.k, self.label_values)


# ---------------------------------------------------------------------------
# sparse text format
# ---------------------------------------------------------------------------


def parse_libsvm(lines, n: int | None = None, label_map: dict[float, int] | None = None) -> Dataset:
    """Parse ``label idx:val ...`` lines into a dense Dataset.

    Indices are 1-based and must be strictly ascending within a line.
    Labels are remapped to contiguous 0-based classes (sorted by value);
    pass ``label_map`` to pin an existing mapping, in which case an unseen
    label is an error.
    """
    if isinstance(lines, (str, bytes)):
        lines = lines.decode() if isinstance(lines, bytes) else lines
        lines = lines.splitlines()
    raw_labels: list[float] = []
    rows: list[list[tuple[int, float]]] = []
    max_idx = 0
    for lineno, line in enumerate(lines, start=1):
        line = line.rstrip("\r\n")
        if not line.strip():
            continue
        tokens = line.split()
        try:
            label = float(tokens[0])
        except ValueError:
            raise ParseError(f"line {lineno}: bad label token {tokens[0]!r}") from None
        feats: list[tuple[int, float]] = []
        prev = 0
        for tok in tokens[1:]:
            idx_s, _, val_s = tok.partition(":")
            if not val_s:
                raise ParseError(f"line {lineno}: bad feature token {tok!r}")
            try:
                idx = int(idx_s)
                val = float(val_s)
            except ValueError:
                raise ParseError(f"line {lineno}: bad feature token {tok!r}") from None
            if idx <= prev:
                raise ParseError(
                    f"line {lineno}: index {idx} not ascending (previous {prev})"
                )
            if not np.isfinite(val):
                raise ParseError(f"line {lineno}: non-finite value in {tok!r}")
            prev = idx
            feats.append((idx, val))
        max_idx = max(max_idx, prev)
        raw_labels.append(label)
        rows.append(feats)
    if not rows:
        raise ParseError("no samples in input")
    if n is None:
        n = max_idx
    elif max_idx > n:
        raise ParseError(f"feature index {max_idx} exceeds declared width {n}")
    if label_map is None:
        label_map = {v: i for i, v in enumerate(sorted(set(raw_labels)))}
    x = np.zeros((len(rows), n))
    y = np.empty(len(rows), dtype=np.int64)
    for i, (label, feats) in enumerate(zip(raw_labels, rows)):
        if label not in label_map:
            raise ParseError(f"line {i + 1}: label {label} not in the fixed label mapping")
        y[i] = label_map[label]
        for idx, val in feats:
            x[i, idx - 1] = val
    values = tuple(sorted(label_map, key=lambda v: label_map[v]))
    return Dataset(x, y, len(label_map), values)


def emit_libsvm(ds: Dataset) -> str:
    """Inverse of parse_libsvm: sparse text with original label values."""
    out = []
    for xi, yi in zip(ds.x, ds.y):
        parts = [repr(ds.label_values[yi])]
        for j in np.flatnonzero(xi):
            parts.append(f"{j + 1}:{xi[j]!r}")
        out.append(" ".join(parts))
    return "\n".join(out) + "\n"


# ---------------------------------------------------------------------------
# binary image/label pair format
# ---------------------------------------------------------------------------


def _read_be32(buf: bytes, offset: int, what: str) -> int:
    if offset + 4 > len(buf):
        raise ParseError(f"truncated at byte {offset}: expected {what}")
    return struct.unpack_from(">I", buf, offset)[0]


def parse_idx(images: bytes, labels: bytes) -> Dataset:
    """Parse a big-endian image/label byte pair into a Dataset.

    Pixels are scaled to [0, 1] and flattened row-major; the class count is
    max label + 1.
    """
    magic = _read_be32(images, 0, "image magic")
    if magic != IMAGE_MAGIC:
        raise ParseError(f"bad image magic 0x{magic:08x} at byte 0")
    count = _read_be32(images, 4, "image count")
    rows = _read_be32(images, 8, "row count")
    cols = _read_be32(images, 12, "column count")
    need = 16 + count * rows * cols
    if len(images) < need:
        raise ParseError(f"truncated image payload at byte {len(images)} (need {need})")
    lmagic = _read_be32(labels, 0, "label magic")
    if lmagic != LABEL_MAGIC:
        raise ParseError(f"bad label magic 0x{lmagic:08x} at byte 0")
    lcount = _read_be32(labels, 4, "label count")
    if lcount != count:
        raise ParseError(f"count mismatch: {count} images vs {lcount} labels (byte 4)")
    lneed = 8 + lcount
    if len(labels) < lneed:
        raise ParseError(f"truncated label payload at byte {len(labels)} (need {lneed})")
    pixels = np.frombuffer(images, dtype=np.uint8, count=count * rows * cols, offset=16)
    x = pixels.reshape(count, rows * cols).astype(np.float64) / 255.0
    y = np.frombuffer(labels, dtype=np.uint8, count=count, offset=8).astype(np.int64)
    return Dataset(x, y, int(y.max()) + 1 if count else 1)


# ---------------------------------------------------------------------------
# synthetic data
# ---------------------------------------------------------------------------


def class_centers(k: int, n: int, sep: float) -> np.ndarray:
    """Deterministic centers with pairwise distance >= sep."""
    mu = np.zeros((k, n))
    for c in range(k):
        mu[c, c % n] = sep * (1 + c // n)
    return mu


def synth_gaussian(k: int, n: int, per_class, sep: float, rng: Rng) -> Dataset:
    """Unit-variance Gaussian blobs around well-separated class centers."""
    if k < 2:
        raise ValueError("need at least 2 classes")
    counts = [per_class] * k if np.isscalar(per_class) else list(per_class)
    if len(counts) != k:
        raise ValueError(f"per_class has {len(counts)} entries for k={k}")
    if any(c < 1 for c in counts):
        raise ValueError(f"zero-count class in {counts}")
    mu = class_centers(k, n, sep)
    xs, ys = [], []
    for c, cnt in enumerate(counts):
        xs.append(rng.normal((cnt, n)) + mu[c])
        ys.append(np.full(cnt, c, dtype=np.int64))
    return Dataset(np.concatenate(xs), np.concatenate(ys), k)


def normalize_minmax(ds: Dataset) -> tuple[Dataset, np.ndarray, np.ndarray]:
    """Per-feature min-max scaling to [0, 1]; constant features map to 0."""
    lo = ds.x.min(axis=0)
    hi = ds.x.max(axis=0)
    span = np.where(hi > lo, hi - lo, 1.0)
    return Dataset((ds.x - lo) / span, ds.y, ds.k, ds.label_values), lo, span


# ---------------------------------------------------------------------------
# client partitioning and splits
# ---------------------------------------------------------------------------


@dataclass
class ClientSplit:
    """Disjoint per-client index lists into one Dataset, plus class allowlists."""

    client_indices: list[np.ndarray]
    allowlists: list[tuple[int, ...]]

    @property
    def n_clients(self) -> int:
        return len(self.client_indices)


def partition_noniid(
    ds: Dataset, n_clients: int, classes_per_client: int, imbalance: float, rng: Rng
) -> ClientSplit:
    """Label-skewed partition: client m sees the cyclic class window
    {m, ..., m + classes_per_client - 1} mod k, and each class's samples are
    dealt to its claiming clients in geometric proportions (ratio
    ``imbalance``, claimant order shuffled).  Classes claimed by no client
    are dropped with a warning.
    """
    if n_clients < 1:
        raise ValueError("need at least one client")
    if not 1 <= classes_per_client <= ds.k:
        raise ValueError(f"classes_per_client must be in 1..{ds.k}")
    if not 0 < imbalance <= 1:
        raise ValueError("imbalance ratio must be in (0, 1]")
    allow = [
        tuple(sorted((m + j) % ds.k for j in range(classes_per_client)))
        for m in range(n_clients)
    ]
    buckets: list[list[int]] = [[] for _ in range(n_clients)]
    for c in range(ds.k):
        claimants = [m for m in range(n_clients) if c in allow[m]]
        idx = np.flatnonzero(ds.y == c)
        if not claimants:
            log.warning("class %d claimed by no client; dropping %d samples", c, len(idx))
            continue
        idx = idx[rng.permutation(len(idx))]
        order = rng.permutation(len(claimants))
        weights = np.array([imbalance**j for j in range(len(claimants))])
        exact = weights / weights.sum() * len(idx)
        counts = np.floor(exact).astype(int)
        # largest-remainder rounding so the counts sum exactly
        for j in np.argsort(-(exact - counts), kind="stable")[: len(idx) - counts.sum()]:
            counts[j] += 1
        start = 0
        for rank, cnt in enumerate(counts):
            m = claimants[order[rank]]
            buckets[m].extend(idx[start : start + cnt].tolist())
            start += cnt
    indices = [np.array(sorted(b), dtype=np.int64) for b in buckets]
    flat = np.concatenate([i for i in indices if len(i)]) if any(len(i) for i in indices) else []
    assert len(flat) == len(set(np.asarray(flat).tolist())), "partition produced duplicates"
    return ClientSplit(indices, allow)


def _round_half_up(v: float) -> int:
    return int(np.floor(v + 0.5))


def stratified_take(labels: np.ndarray, idx: np.ndarray, fraction: float, rng: Rng) -> np.ndarray:
    """Per-class subsample keeping at least one sample of every class present."""
    if not 0 < fraction <= 1:
        raise ValueError(f"fraction must be in (0, 1], got {fraction}")
    idx = np.asarray(idx, dtype=np.int64)
    if len(idx) == 0:
        raise ValueError("cannot subsample an empty index list")
    kept = []
    for c in np.unique(labels[idx]):
        pool = idx[labels[idx] == c]
        take = max(1, _round_half_up(fraction * len(pool)))
        kept.extend(pool[rng.permutation(len(pool))][:take].tolist())
    return np.array(sorted(kept), dtype=np.int64)


def subsample(obj, labels_or_fraction, fraction_or_rng=None, rng=None):
    """Stratified downsample of a Dataset or a ClientSplit.

    ``subsample(ds, fraction, rng)`` or ``subsample(split, labels, fraction, rng)``.
    """
    if isinstance(obj, Dataset):
        fraction, rng = labels_or_fraction, fraction_or_rng
        keep = stratified_take(obj.y, np.arange(obj.count), fraction, rng)
        return obj.take(keep)
    if isinstance(obj, ClientSplit):
        labels, fraction = labels_or_fraction, fraction_or_rng
        new_idx = [
            stratified_take(labels, idx, fraction, rng.derive(m))
            for m, idx in enumerate(obj.client_indices)
        ]
        return ClientSplit(new_idx, obj.allowlists)
    raise TypeError(f"cannot subsample {type(obj).__name__}")


def split_train_test(
    labels: np.ndarray, idx: np.ndarray, test_fraction: float, rng: Rng
) -> tuple[np.ndarray, np.ndarray]:
    """Stratified train/test split of one client's indices.

    Every class keeps at least one training sample; classes with a single
    sample stay in the training side.
    """
    if not 0 < test_fraction < 1:
        raise ValueError("test_fraction must be in (0, 1)")
    idx = np.asarray(idx, dtype=np.int64)
    test = []
    for c in np.unique(labels[idx]):
        pool = idx[labels[idx] == c]
        if len(pool) < 2:
            continue
        take = min(len(pool) - 1, max(1, _round_half_up(test_fraction * len(pool))))
        test.extend(pool[rng.permutation(len(pool))][:take].tolist())
    test_arr = np.array(sorted(test), dtype=np.int64)
    train_arr = np.array(sorted(set(idx.tolist()) - set(test)), dtype=np.int64)
    return train_arr, test_arr


class BatchPlan:
    """Reshuffled minibatch schedule over a fixed index list.

    Each epoch is a fresh permutation cut into batches of size ``batch_size``
    (last batch may be short); together they partition the indices.
    """

    def __init__(self, indices, batch_size: int, rng: Rng):
        self.indices = np.asarray(indices, dtype=np.int64)
        if len(self.indices) == 0:
            raise ValueError("BatchPlan over an empty index list")
        if batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        self.batch_size = int(batch_size)
        self.rng = rng
        self.epoch = 0

    def next_epoch(self) -> list[np.ndarray]:
        perm = self.indices[self.rng.permutation(len(self.indices))]
        self.epoch += 1
        return [perm[i : i + self.batch_size] for i in range(0, len(perm), self.batch_size)]
