"""Dense float64 vector/matrix helpers and seeded randomness.

Everything downstream works on plain numpy arrays: a ``Vec`` is a 1-D
float64 array, a ``Mat`` is a 2-D row-major float64 array.  The functions
here add the dimension checking and the masked-softmax semantics the rest
of the simulator relies on.
"""

from __future__ import annotations

import numpy as np

Vec = np.ndarray
Mat = np.ndarray

NEG_INF = float("-inf")

# Floor applied to probabilities before taking logs.  Range-masked softmax
# produces exact zeros at excluded classes, and in-support probabilities can
# still underflow.
EPS_PROB = 1e-12


class DimensionError(ValueError):
    """Shapes of the operands do not line up."""


def as_vec(x, name: str = "x") -> Vec:
    v = np.asarray(x, dtype=np.float64)
    if v.ndim != 1 or v.size == 0:
        raise DimensionError(f"{name} must be a nonempty 1-D vector, got shape {v.shape}")
    return v


def as_mat(a, name: str = "A") -> Mat:
    m = np.asarray(a, dtype=np.float64)
    if m.ndim != 2 or m.size == 0:
        raise DimensionError(f"{name} must be a nonempty 2-D matrix, got shape {m.shape}")
    return m


def matvec(a, x) -> Vec:
    """Matrix-vector product with explicit shape checking."""
    a = as_mat(a)
    x = as_vec(x)
    if a.shape[1] != x.shape[0]:
        raise DimensionError(f"matvec: {a.shape} @ {x.shape} dimension mismatch")
    return a @ x


def softmax(z) -> Vec:
    """Numerically stable softmax with -inf entries treated as masked out.

    Entries equal to -inf receive probability exactly 0 (``exp(-inf - max)``
    is an exact IEEE zero); the mask is never formed by arithmetic on
    infinities, so no NaN can appear.  At least one entry must be finite.
    """
    z = as_vec(z, "z")
    finite = np.isfinite(z)
    if not finite.any():
        raise ValueError("softmax: all entries are masked (-inf), empty support")
    masked = ~finite
    if masked.any() and not np.all(np.isneginf(z[masked])):
        raise ValueError("softmax: non-finite entries other than the -inf mask sentinel")
    e = np.exp(z - z[finite].max())
    return e / e.sum()


def softmax_rows(z: Mat) -> Mat:
    """Row-wise masked softmax; same sentinel rules as :func:`softmax`."""
    z = as_mat(z, "z")
    finite = np.isfinite(z)
    if not finite.any(axis=1).all():
        raise ValueError("softmax_rows: some row has empty support")
    masked = ~finite
    if masked.any() and not np.all(np.isneginf(z[masked])):
        raise ValueError("softmax_rows: non-finite entries other than the -inf mask sentinel")
    # row max is finite for every row, so -inf entries stay -inf after the shift
    e = np.exp(z - z.max(axis=1, keepdims=True))
    return e / e.sum(axis=1, keepdims=True)


def cross_entropy(p, q) -> float:
    """-sum(q * log p) with p floored at EPS_PROB.

    Both arguments live on the probability simplex; q is typically a
    one-hot label vector.
    """
    p = as_vec(p, "p")
    q = as_vec(q, "q")
    if p.shape != q.shape:
        raise DimensionError(f"cross_entropy: shapes {p.shape} vs {q.shape}")
    return float(-(q * np.log(np.maximum(p, EPS_PROB))).sum())


class Rng:
    """Deterministic random stream with derivable sub-streams.

    Backed by numpy's counter-based Philox bit generator keyed through a
    ``SeedSequence``; the same (seed, spawn-key) pair produces an identical
    stream on every platform.  An ``Rng`` is single-owner: share streams by
    deriving children, never by handing out the same instance.
    """

    def __init__(self, seed: int, _spawn_key: tuple[int, ...] = ()):
        self.seed = int(seed)
        self.spawn_key = _spawn_key
        self._gen = np.random.Generator(
            np.random.Philox(np.random.SeedSequence(self.seed, spawn_key=_spawn_key))
        )

    def derive(self, *key: int) -> "Rng":
        """Independent child stream addressed by integer path components."""
        return Rng(self.seed, self.spawn_key + tuple(int(k) for k in key))

    def normal(self, size=None) -> np.ndarray:
        return self._gen.standard_normal(size)

    def uniform(self, lo: float, hi: float, size=None) -> np.ndarray:
        return self._gen.uniform(lo, hi, size)

    def integers(self, lo: int, hi: int, size=None) -> np.ndarray:
        return self._gen.integers(lo, hi, size=size)

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)

    def choice_without_replacement(self, n: int, size: int) -> np.ndarray:
        return self._gen.choice(n, size=size, replace=False)

    def shuffle(self, arr: np.ndarray) -> None:
        self._gen.shuffle(arr)
