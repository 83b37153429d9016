"""Client-side knowledge priors and the logit-transformation layer.

Two kinds of prior wrap the shared server model on each client:

* a *point prior* (``PredKM``): maps features to a one-hot class estimate;
* a *range prior* (``RangeKM``): maps features to a multi-hot mask that is
  expected to contain the true class.

A ``KnowledgePair`` couples the two with a trust weight ``lam`` in [0, 1]
and requires them to be consistent: the point prior's class must lie inside
the range prior's support everywhere it is evaluated.  ``transform`` turns
raw server logits into a range-compliant distribution blended with the
point prior; ``PersonalizedModel`` is the server model composed with that
transformation, including its analytic Jacobian.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import nn
from .linalg import NEG_INF, Mat, Rng, Vec, as_mat, as_vec, softmax, softmax_rows

KM_HEADER = "FEDKNOW-KM v1"


class KnowledgeConflictError(ValueError):
    """Point prior suggested a class outside the range prior's support."""


def onehot(cls: int, k: int) -> Vec:
    v = np.zeros(k)
    v[cls] = 1.0
    return v


# ---------------------------------------------------------------------------
# feature maps (used to build priors on reduced views of the features)
# ---------------------------------------------------------------------------


def mask_op(omega, x) -> Vec:
    """Select coordinates of x by 1-based indices, sorted ascending."""
    x = as_vec(x)
    idx = [int(i) for i in omega]
    if not idx:
        raise ValueError("mask_op: empty index set")
    if idx != sorted(idx):
        raise ValueError(f"mask_op: indices must be sorted ascending, got {idx}")
    if idx[0] < 1 or idx[-1] > x.shape[0]:
        raise IndexError(f"mask_op: index out of range 1..{x.shape[0]}: {idx}")
    return x[np.array(idx) - 1]


def maxpool_op(p: int, x_mat) -> Mat:
    """Block max over p-by-p tiles of a square matrix; requires n % p == 0."""
    x_mat = as_mat(x_mat, "X")
    n, m = x_mat.shape
    if n != m:
        raise ValueError(f"maxpool_op: matrix must be square, got {x_mat.shape}")
    p = int(p)
    if p < 1 or n % p != 0:
        raise ValueError(f"maxpool_op: side {n} not divisible by p={p}")
    k = n // p
    return x_mat.reshape(k, p, k, p).max(axis=(1, 3))


class FeatureMap:
    """Pure feature transform applied before a prior's inner model."""

    def __call__(self, x: Vec) -> Vec:
        raise NotImplementedError

    def spec_tokens(self) -> list[str]:
        raise NotImplementedError


class IdentityMap(FeatureMap):
    def __call__(self, x):
        return as_vec(x)

    def spec_tokens(self):
        return ["identity"]


class MaskMap(FeatureMap):
    """Keep only the given 1-based feature indices."""

    def __init__(self, omega):
        self.omega = [int(i) for i in omega]
        if self.omega != sorted(self.omega):
            raise ValueError("MaskMap: indices must be sorted ascending")

    def __call__(self, x):
        return mask_op(self.omega, x)

    def spec_tokens(self):
        return ["mask"] + [str(i) for i in self.omega]


class MaxpoolMap(FeatureMap):
    """Treat the flat vector as a side-by-side image, pool, and re-flatten."""

    def __init__(self, p: int, side: int):
        self.p = int(p)
        self.side = int(side)
        if self.side % self.p != 0:
            raise ValueError("MaxpoolMap: side not divisible by p")

    def __call__(self, x):
        x = as_vec(x)
        if x.shape[0] != self.side * self.side:
            raise ValueError(f"MaxpoolMap: expected {self.side * self.side} entries")
        return maxpool_op(self.p, x.reshape(self.side, self.side)).ravel()

    def spec_tokens(self):
        return ["maxpool", str(self.p), str(self.side)]


def feature_map_from_tokens(tokens: list[str]) -> FeatureMap:
    kind = tokens[0]
    if kind == "identity":
        return IdentityMap()
    if kind == "mask":
        return MaskMap([int(t) for t in tokens[1:]])
    if kind == "maxpool":
        return MaxpoolMap(int(tokens[1]), int(tokens[2]))
    raise ValueError(f"unknown feature map kind {kind!r}")


class FeatureQuantizer:
    """Bucket the first few features into a hashable key.

    Values are linearly bucketed over [lo, hi]; anything outside is clipped
    into the end buckets, so every feature vector gets a key.
    """

    def __init__(self, n_features: int = 3, buckets: int = 4, lo: float = 0.0, hi: float = 1.0):
        if n_features < 1 or buckets < 1 or not hi > lo:
            raise ValueError("FeatureQuantizer: need n_features>=1, buckets>=1, hi>lo")
        self.n_features = int(n_features)
        self.buckets = int(buckets)
        self.lo = float(lo)
        self.hi = float(hi)

    def key(self, x) -> tuple[int, ...]:
        x = as_vec(x)
        n = min(self.n_features, x.shape[0])
        scaled = (x[:n] - self.lo) / (self.hi - self.lo) * self.buckets
        return tuple(int(np.clip(np.floor(v), 0, self.buckets - 1)) for v in scaled)


# ---------------------------------------------------------------------------
# point priors
# ---------------------------------------------------------------------------


class PredKM:
    """Point prior: features -> one-hot class estimate."""

    k: int

    def class_of(self, x) -> int:
        raise NotImplementedError

    def __call__(self, x) -> Vec:
        return onehot(self.class_of(x), self.k)

    def classes_of_rows(self, x2d) -> np.ndarray:
        return np.array([self.class_of(x) for x in np.asarray(x2d)], dtype=np.int64)


class ConstantPredKM(PredKM):
    def __init__(self, cls: int, k: int):
        if not 0 <= cls < k:
            raise ValueError(f"class {cls} outside 0..{k - 1}")
        self.cls = int(cls)
        self.k = int(k)

    def class_of(self, x):
        return self.cls


class LogisticPredKM(PredKM):
    """Argmax of a multinomial logistic model over transformed features."""

    def __init__(self, weights, bias, k: int, feature_map: FeatureMap | None = None):
        self.weights = np.asarray(weights, dtype=np.float64)
        self.bias = np.asarray(bias, dtype=np.float64)
        self.k = int(k)
        self.feature_map = feature_map or IdentityMap()
        if self.weights.shape != (self.k, self.bias.shape[0]) and self.weights.shape[0] != self.k:
            raise ValueError("LogisticPredKM: weight shape mismatch")

    def scores(self, x) -> Vec:
        return self.weights @ self.feature_map(x) + self.bias

    def class_of(self, x):
        return int(np.argmax(self.scores(x)))


class TablePredKM(PredKM):
    """Quantized-key lookup; unseen keys fall back to a default class."""

    def __init__(self, quantizer: FeatureQuantizer, table: dict, default: int, k: int):
        self.quantizer = quantizer
        self.table = dict(table)
        self.default = int(default)
        self.k = int(k)

    def class_of(self, x):
        return int(self.table.get(self.quantizer.key(x), self.default))


class FuncPredKM(PredKM):
    """Wrap an arbitrary features -> class-index callable (not serializable)."""

    def __init__(self, fn, k: int):
        self.fn = fn
        self.k = int(k)

    def class_of(self, x):
        return int(self.fn(as_vec(x)))


def fit_logistic_pkm(
    features,
    labels,
    k: int,
    feature_map: FeatureMap | None = None,
    epochs: int = 300,
    lr: float = 1.0,
    rng: Rng | None = None,
) -> LogisticPredKM:
    """Train a multinomial logistic point prior by full-batch gradient descent.

    Deterministic given the rng seed (used only for the tiny random init).
    """
    features = np.asarray(features, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    if features.ndim != 2 or features.shape[0] == 0:
        raise ValueError("fit_logistic_pkm: empty or non-2D feature array")
    if features.shape[0] != labels.shape[0]:
        raise ValueError("fit_logistic_pkm: features/labels length mismatch")
    fmap = feature_map or IdentityMap()
    phi = np.stack([fmap(x) for x in features])
    n, f = phi.shape
    y = np.zeros((n, k))
    y[np.arange(n), labels] = 1.0
    w = 0.01 * (rng.normal((k, f)) if rng is not None else np.zeros((k, f)))
    b = np.zeros(k)
    for _ in range(epochs):
        p = softmax_rows(phi @ w.T + b)
        err = p - y
        w -= lr * (err.T @ phi) / n
        b -= lr * err.mean(axis=0)
    return LogisticPredKM(w, b, k, fmap)


# ---------------------------------------------------------------------------
# range priors
# ---------------------------------------------------------------------------


class RangeKM:
    """Range prior: features -> multi-hot mask of admissible classes."""

    k: int

    def mask(self, x) -> Vec:
        raise NotImplementedError

    def masks_of_rows(self, x2d) -> Mat:
        return np.stack([self.mask(x) for x in np.asarray(x2d)])

    def support(self, x) -> set[int]:
        return set(np.flatnonzero(self.mask(x)).tolist())


class AllClassesRangeKM(RangeKM):
    """The trivial all-ones mask (no range knowledge)."""

    def __init__(self, k: int):
        self.k = int(k)

    def mask(self, x):
        return np.ones(self.k)


class TableRangeKM(RangeKM):
    """Quantized-key lookup table of class masks.

    Unseen keys fall back to the union of every mask seen at build time.
    """

    def __init__(self, quantizer: FeatureQuantizer, table: dict, fallback, k: int):
        self.quantizer = quantizer
        self.table = {key: np.asarray(m, dtype=np.float64) for key, m in table.items()}
        self.fallback = np.asarray(fallback, dtype=np.float64)
        self.k = int(k)
        if self.fallback.sum() < 1:
            raise ValueError("TableRangeKM: fallback mask has empty support")

    def mask(self, x):
        return self.table.get(self.quantizer.key(x), self.fallback)


class ThresholdRangeKM(RangeKM):
    """First-match-wins threshold rules: feature >= threshold selects a mask."""

    def __init__(self, rules, default, k: int):
        # rules: iterable of (feature_index, threshold, mask)
        self.rules = [(int(j), float(t), np.asarray(m, dtype=np.float64)) for j, t, m in rules]
        self.default = np.asarray(default, dtype=np.float64)
        self.k = int(k)
        for _, _, m in self.rules:
            if m.sum() < 1:
                raise ValueError("ThresholdRangeKM: rule mask has empty support")
        if self.default.sum() < 1:
            raise ValueError("ThresholdRangeKM: default mask has empty support")

    def mask(self, x):
        x = as_vec(x)
        for j, thr, m in self.rules:
            if x[j] >= thr:
                return m
        return self.default


class FuncRangeKM(RangeKM):
    """Wrap an arbitrary features -> mask callable (not serializable)."""

    def __init__(self, fn, k: int):
        self.fn = fn
        self.k = int(k)

    def mask(self, x):
        m = np.asarray(self.fn(as_vec(x)), dtype=np.float64)
        if m.shape != (self.k,) or m.sum() < 1:
            raise ValueError("FuncRangeKM: callable returned an invalid mask")
        return m


class PredGuardedRangeKM(RangeKM):
    """Range prior widened to always admit the paired point prior's class.

    This makes prior consistency hold structurally for every input, which a
    finite lookup table alone cannot promise on unseen feature vectors.
    """

    def __init__(self, inner: RangeKM, gp: PredKM):
        if inner.k != gp.k:
            raise ValueError("PredGuardedRangeKM: arity mismatch")
        self.inner = inner
        self.gp = gp
        self.k = inner.k

    def mask(self, x):
        m = np.array(self.inner.mask(x), dtype=np.float64, copy=True)
        m[self.gp.class_of(x)] = 1.0
        return m


def build_table_rkm(
    features, labels, k: int, gp: PredKM, quantizer: FeatureQuantizer
) -> TableRangeKM:
    """Build a lookup-table range prior from a labeled subset.

    Every sample's true class and its point-prior class are folded into the
    mask stored at the sample's quantized key; unseen keys get the union of
    all stored masks.
    """
    features = np.asarray(features, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    if features.shape[0] == 0:
        raise ValueError("build_table_rkm: empty subset")
    table: dict[tuple[int, ...], np.ndarray] = {}
    for x, y in zip(features, labels):
        key = quantizer.key(x)
        m = table.setdefault(key, np.zeros(k))
        m[int(y)] = 1.0
        m[gp.class_of(x)] = 1.0
    fallback = np.clip(sum(table.values()), 0.0, 1.0)
    return TableRangeKM(quantizer, table, fallback, k)


# ---------------------------------------------------------------------------
# the knowledge pair and the logit transformation
# ---------------------------------------------------------------------------


@dataclass
class KnowledgePair:
    """Point prior + range prior + trust weight, with consistency checking."""

    gp: PredKM
    gr: RangeKM
    lam: float
    owner: str = field(default="?")

    def __post_init__(self):
        if not 0.0 <= self.lam <= 1.0:
            raise ValueError(f"trust weight must be in [0,1], got {self.lam}")
        if self.gp.k != self.gr.k:
            raise ValueError(f"prior arity mismatch: {self.gp.k} vs {self.gr.k}")

    @property
    def k(self) -> int:
        return self.gp.k

    def audit(self, x2d) -> None:
        """Eagerly verify prior consistency on every row; raise with context."""
        for i, x in enumerate(np.asarray(x2d, dtype=np.float64)):
            cls = self.gp.class_of(x)
            mask = self.gr.mask(x)
            if mask[cls] == 0:
                raise KnowledgeConflictError(
                    f"client {self.owner}, sample {i}: point prior predicts class "
                    f"{cls} outside range support {sorted(np.flatnonzero(mask).tolist())}"
                )


def trivial_pair(k: int, owner: str = "?") -> KnowledgePair:
    """No knowledge: lam=0 and the all-ones range mask."""
    return KnowledgePair(ConstantPredKM(0, k), AllClassesRangeKM(k), 0.0, owner)


def masked_softmax(logits: Vec, mask: Vec) -> Vec:
    """Softmax restricted to the mask's support; excluded entries are exact 0."""
    logits = as_vec(logits, "logits")
    return softmax(np.where(np.asarray(mask) > 0, logits, NEG_INF))


def blend_rows(lam: float, logits2d: Mat, gp_onehots: Mat, gr_masks: Mat) -> Mat:
    """Vectorized transform over precomputed prior rows."""
    s = softmax_rows(np.where(np.asarray(gr_masks) > 0, logits2d, NEG_INF))
    return (1.0 - lam) * s + lam * np.asarray(gp_onehots, dtype=np.float64)


def transform(km: KnowledgePair, logits, x) -> Vec:
    """Range-masked softmax of the logits blended with the point prior.

    Returns (1-lam) * softmax(logits restricted to the range support)
    + lam * point-prior one-hot; excluded classes get probability exactly 0.
    """
    logits = as_vec(logits, "logits")
    if logits.shape[0] != km.k:
        raise ValueError(f"transform: {logits.shape[0]} logits for k={km.k}")
    if not np.all(np.isfinite(logits)):
        raise ValueError("transform: logits must be finite")
    mask = km.gr.mask(x)
    cls = km.gp.class_of(x)
    if mask[cls] == 0:
        raise KnowledgeConflictError(
            f"client {km.owner}: point prior class {cls} outside range support "
            f"{sorted(np.flatnonzero(mask).tolist())} at x={np.asarray(x)!r}"
        )
    return (1.0 - km.lam) * masked_softmax(logits, mask) + km.lam * onehot(cls, km.k)


@dataclass
class PersonalizedModel:
    """Server model composed with a client's knowledge transformation."""

    server: nn.ModelParams
    km: KnowledgePair

    def predict(self, x) -> Vec:
        return transform(self.km, nn.forward(self.server, x), x)

    def predict_rows(self, x2d) -> Mat:
        x2d = np.asarray(x2d, dtype=np.float64)
        logits = nn.forward_batch(self.server, x2d)
        gp_rows = np.stack([self.km.gp(x) for x in x2d])
        gr_rows = self.km.gr.masks_of_rows(x2d)
        if np.any(gp_rows[gr_rows == 0] > 0):
            raise KnowledgeConflictError(f"client {self.km.owner}: prior conflict in batch")
        return blend_rows(self.km.lam, logits, gp_rows, gr_rows)


def predict(pm: PersonalizedModel, x) -> Vec:
    return pm.predict(x)


def personalized_jacobian(pm: PersonalizedModel, x) -> Mat:
    """(k, d) Jacobian of the personalized output with respect to theta.

    Row i is (1-lam) * s_i * (e_i - s)^T J where s is the range-masked
    softmax and J the server-model Jacobian; computed row by row through
    vector-Jacobian products so J itself is never materialized.
    """
    x = as_vec(x)
    k = pm.km.k
    d = pm.server.spec.n_params
    lam = pm.km.lam
    if lam == 1.0:
        return np.zeros((k, d))
    logits = nn.forward(pm.server, x)
    s = masked_softmax(logits, pm.km.gr.mask(x))
    acts = nn._forward_cached(pm.server, x[None, :])
    rows = []
    for i in range(k):
        w = (1.0 - lam) * s[i] * (onehot(i, k) - s)
        rows.append(nn._backward(pm.server, acts, w[None, :]))
    return np.stack(rows)


# ---------------------------------------------------------------------------
# serialization (versioned text, for experiment reproducibility)
# ---------------------------------------------------------------------------


def _mask_str(mask) -> str:
    return "".join("1" if v > 0 else "0" for v in np.asarray(mask))


def _mask_from_str(s: str) -> np.ndarray:
    return np.array([1.0 if c == "1" else 0.0 for c in s])


def _emit_pred(km: PredKM, out: list[str]) -> None:
    if isinstance(km, ConstantPredKM):
        out.append(f"pred constant {km.k} {km.cls}")
    elif isinstance(km, LogisticPredKM):
        out.append(f"pred logistic {km.k} {km.bias.shape[0]}")
        out.append("feature_map " + " ".join(km.feature_map.spec_tokens()))
        for row in km.weights:
            out.append("w " + " ".join(repr(float(v)) for v in row))
        out.append("b " + " ".join(repr(float(v)) for v in km.bias))
    elif isinstance(km, TablePredKM):
        q = km.quantizer
        out.append(f"pred table {km.k} {len(km.table)} {km.default}")
        out.append(f"quantizer {q.n_features} {q.buckets} {q.lo!r} {q.hi!r}")
        for key in sorted(km.table):
            out.append("row " + " ".join(str(i) for i in key) + f" : {km.table[key]}")
    else:
        raise TypeError(f"cannot serialize point prior of type {type(km).__name__}")


def _emit_range(km: RangeKM, out: list[str]) -> None:
    if isinstance(km, PredGuardedRangeKM):
        out.append("range guarded")
        _emit_range(km.inner, out)
    elif isinstance(km, AllClassesRangeKM):
        out.append(f"range allclasses {km.k}")
    elif isinstance(km, TableRangeKM):
        q = km.quantizer
        out.append(f"range table {km.k} {len(km.table)}")
        out.append(f"quantizer {q.n_features} {q.buckets} {q.lo!r} {q.hi!r}")
        for key in sorted(km.table):
            out.append(
                "row " + " ".join(str(i) for i in key) + " : " + _mask_str(km.table[key])
            )
        out.append("fallback " + _mask_str(km.fallback))
    elif isinstance(km, ThresholdRangeKM):
        out.append(f"range threshold {km.k} {len(km.rules)}")
        for j, thr, m in km.rules:
            out.append(f"rule {j} {thr!r} " + _mask_str(m))
        out.append("default " + _mask_str(km.default))
    else:
        raise TypeError(f"cannot serialize range prior of type {type(km).__name__}")


def pair_to_text(pair: KnowledgePair) -> str:
    out = [KM_HEADER, f"lambda {pair.lam!r}", f"owner {pair.owner}"]
    _emit_pred(pair.gp, out)
    _emit_range(pair.gr, out)
    return "\n".join(out) + "\n"


def _parse_quantizer(line: str) -> FeatureQuantizer:
    _, nf, buckets, lo, hi = line.split()
    return FeatureQuantizer(int(nf), int(buckets), float(lo), float(hi))


def pair_from_text(text: str) -> KnowledgePair:
    lines = [ln for ln in text.splitlines() if ln.strip()]
    if not lines or lines[0] != KM_HEADER:
        raise ValueError(f"bad knowledge-model header: {lines[:1]!r}")
    lam = float(lines[1].split()[1])
    owner = lines[2].split(maxsplit=1)[1] if len(lines[2].split()) > 1 else "?"
    pos = 3

    def parse_pred() -> tuple[PredKM, int]:
        nonlocal pos
        toks = lines[pos].split()
        if toks[:2] == ["pred", "constant"]:
            pos += 1
            return ConstantPredKM(int(toks[3]), int(toks[2])), pos
        if toks[:2] == ["pred", "logistic"]:
            k, f = int(toks[2]), int(toks[3])
            fmap = feature_map_from_tokens(lines[pos + 1].split()[1:])
            rows = [
                [float(v) for v in lines[pos + 2 + i].split()[1:]] for i in range(k)
            ]
            bias = [float(v) for v in lines[pos + 2 + k].split()[1:]]
            pos += 3 + k
            return LogisticPredKM(np.array(rows), np.array(bias), k, fmap), pos
        if toks[:2] == ["pred", "table"]:
            k, n, default = int(toks[2]), int(toks[3]), int(toks[4])
            quant = _parse_quantizer(lines[pos + 1])
            table = {}
            for i in range(n):
                parts = lines[pos + 2 + i].split()
                sep = parts.index(":")
                table[tuple(int(t) for t in parts[1:sep])] = int(parts[sep + 1])
            pos += 2 + n
            return TablePredKM(quant, table, default, k), pos
        raise ValueError(f"unknown point-prior line: {lines[pos]!r}")

    def parse_range(gp: PredKM) -> RangeKM:
        nonlocal pos
        toks = lines[pos].split()
        if toks[:2] == ["range", "guarded"]:
            pos += 1
            return PredGuardedRangeKM(parse_range(gp), gp)
        if toks[:2] == ["range", "allclasses"]:
            pos += 1
            return AllClassesRangeKM(int(toks[2]))
        if toks[:2] == ["range", "table"]:
            k, n = int(toks[2]), int(toks[3])
            quant = _parse_quantizer(lines[pos + 1])
            table = {}
            for i in range(n):
                parts = lines[pos + 2 + i].split()
                sep = parts.index(":")
                table[tuple(int(t) for t in parts[1:sep])] = _mask_from_str(parts[sep + 1])
            fallback = _mask_from_str(lines[pos + 2 + n].split()[1])
            pos += 3 + n
            return TableRangeKM(quant, table, fallback, k)
        if toks[:2] == ["range", "threshold"]:
            k, n = int(toks[2]), int(toks[3])
            rules = []
            for i in range(n):
                parts = lines[pos + 1 + i].split()
                rules.append((int(parts[1]), float(parts[2]), _mask_from_str(parts[3])))
            default = _mask_from_str(lines[pos + 1 + n].split()[1])
            pos += 2 + n
            return ThresholdRangeKM(rules, default, k)
        raise ValueError(f"unknown range-prior line: {lines[pos]!r}")

    gp, _ = parse_pred()
    gr = parse_range(gp)
    return KnowledgePair(gp, gr, lam, owner)
