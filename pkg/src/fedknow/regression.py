"""Reduction of bounded regression to the k-class pipeline.

A bounded target range [lo, hi] is cut into k equal-width bins (half-open,
last bin closed at hi).  Scalar labels and point priors discretize to the
one-hot of their bin; set-valued range priors discretize to the multi-hot
of every bin they touch.  Downstream, everything is ordinary classification.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .data import Dataset
from .knowledge import FuncPredKM, FuncRangeKM, KnowledgeConflictError


@dataclass(frozen=True)
class IntervalPartition:
    lo: float
    hi: float
    bins: int

    def __post_init__(self):
        if not self.lo < self.hi:
            raise ValueError(f"need lo < hi, got [{self.lo}, {self.hi}]")
        if self.bins < 2:
            raise ValueError("need at least 2 bins")

    @property
    def width(self) -> float:
        return (self.hi - self.lo) / self.bins

    @property
    def edges(self) -> np.ndarray:
        e = self.lo + self.width * np.arange(self.bins + 1)
        e[-1] = self.hi
        return e

    def bin_of(self, s: float) -> int:
        """0-based bin of s; bins are [edge_i, edge_{i+1}), the last closed."""
        if not self.lo <= s <= self.hi:
            raise ValueError(f"value {s} outside [{self.lo}, {self.hi}]")
        i = int(np.searchsorted(self.edges, s, side="right")) - 1
        return min(max(i, 0), self.bins - 1)


@dataclass(frozen=True)
class RangeSet:
    """Finite union of closed intervals, normalized to sorted disjoint form."""

    intervals: tuple[tuple[float, float], ...]

    def __post_init__(self):
        raw = sorted((float(a), float(b)) for a, b in self.intervals)
        if not raw:
            raise ValueError("RangeSet must be nonempty")
        for a, b in raw:
            if a > b:
                raise ValueError(f"interval [{a}, {b}] is empty")
        merged = [raw[0]]
        for a, b in raw[1:]:
            la, lb = merged[-1]
            if a <= lb:
                merged[-1] = (la, max(lb, b))
            else:
                merged.append((a, b))
        object.__setattr__(self, "intervals", tuple(merged))

    @classmethod
    def single(cls, lo: float, hi: float | None = None) -> "RangeSet":
        return cls(((lo, lo if hi is None else hi),))

    @property
    def lo(self) -> float:
        return self.intervals[0][0]

    @property
    def hi(self) -> float:
        return self.intervals[-1][1]

    def contains(self, v: float) -> bool:
        return any(a <= v <= b for a, b in self.intervals)


def phi_gp(partition: IntervalPartition, s: float) -> np.ndarray:
    """One-hot of the bin containing s."""
    v = np.zeros(partition.bins)
    v[partition.bin_of(s)] = 1.0
    return v


def phi_gr(partition: IntervalPartition, s: RangeSet) -> np.ndarray:
    """Multi-hot of every bin the set intersects.

    Bin overlap uses the same boundary convention as phi_gp, so a singleton
    set lights exactly the bin its point falls in.
    """
    if not (partition.lo <= s.lo and s.hi <= partition.hi):
        raise ValueError(
            f"range set [{s.lo}, {s.hi}] not contained in [{partition.lo}, {partition.hi}]"
        )
    edges = partition.edges
    mask = np.zeros(partition.bins)
    for a, b in s.intervals:
        for i in range(partition.bins):
            left, right = edges[i], edges[i + 1]
            closed_right = i == partition.bins - 1
            if (a <= right if closed_right else a < right) and b >= left:
                mask[i] = 1.0
    if mask.sum() < 1:
        raise ValueError("range set intersects no bin")
    return mask


def discretize_problem(
    features,
    labels,
    gp,
    gr,
    partition: IntervalPartition,
) -> tuple[Dataset, FuncPredKM, FuncRangeKM]:
    """Turn a bounded regression problem into a classification one.

    ``gp`` maps features to a point estimate in [lo, hi]; ``gr`` maps
    features to a RangeSet.  Labels are binned, the priors are composed with
    the discretizers, and prior consistency of the result is audited over
    the whole dataset.
    """
    features = np.asarray(features, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.float64)
    if features.ndim != 2 or features.shape[0] != labels.shape[0]:
        raise ValueError("features/labels shape mismatch")
    y_cls = np.empty(len(labels), dtype=np.int64)
    for i, y in enumerate(labels):
        if not partition.lo <= y <= partition.hi:
            raise ValueError(
                f"sample {i}: label {y} outside [{partition.lo}, {partition.hi}]"
            )
        y_cls[i] = partition.bin_of(y)
    k = partition.bins
    pkm = FuncPredKM(lambda x: partition.bin_of(float(gp(x))), k)
    rkm = FuncRangeKM(lambda x: phi_gr(partition, gr(x)), k)
    for i, x in enumerate(features):
        if rkm.mask(x)[pkm.class_of(x)] == 0:
            raise KnowledgeConflictError(
                f"sample {i}: discretized point prior falls outside the discretized range"
            )
    return Dataset(features, y_cls, k), pkm, rkm
