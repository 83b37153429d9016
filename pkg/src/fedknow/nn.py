"""Multilayer-perceptron server model over a flat parameter vector.

The model maps features to k raw logits: tanh on hidden layers, linear
output (any probability normalization happens downstream, where range
masking is applied first).  Parameters live in one flat float64 vector,
layer by layer, each layer as row-major weight block followed by its bias
block, so that federated averaging and checkpointing are plain vector ops.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .linalg import DimensionError, Mat, Rng, Vec, as_vec

CHECKPOINT_HEADER = b"FEDKNOW-PARAMS v1"


@dataclass(frozen=True)
class MlpSpec:
    """Layer sizes [n_in, hidden..., k]; at least input and output."""

    layer_sizes: tuple[int, ...]

    def __post_init__(self):
        sizes = tuple(int(s) for s in self.layer_sizes)
        object.__setattr__(self, "layer_sizes", sizes)
        if len(sizes) < 2:
            raise ValueError("MlpSpec needs at least [n_in, k]")
        if any(s < 1 for s in sizes):
            raise ValueError(f"MlpSpec sizes must be >= 1, got {sizes}")

    @property
    def n_in(self) -> int:
        return self.layer_sizes[0]

    @property
    def n_out(self) -> int:
        return self.layer_sizes[-1]

    @property
    def n_params(self) -> int:
        sizes = self.layer_sizes
        return sum(sizes[i] * sizes[i + 1] + sizes[i + 1] for i in range(len(sizes) - 1))


@dataclass
class ModelParams:
    """Flat parameter vector plus the layer-shape metadata to slice it."""

    theta: Vec
    spec: MlpSpec

    def __post_init__(self):
        self.theta = np.asarray(self.theta, dtype=np.float64)
        if self.theta.ndim != 1 or self.theta.shape[0] != self.spec.n_params:
            raise DimensionError(
                f"theta has {self.theta.shape} entries, spec wants {self.spec.n_params}"
            )
        if not np.all(np.isfinite(self.theta)):
            raise ValueError("theta contains non-finite entries")

    def layers(self) -> list[tuple[Mat, Vec]]:
        """(weight, bias) views into theta, one pair per layer."""
        out = []
        sizes = self.spec.layer_sizes
        off = 0
        for i in range(len(sizes) - 1):
            n_in, n_out = sizes[i], sizes[i + 1]
            w = self.theta[off : off + n_in * n_out].reshape(n_out, n_in)
            off += n_in * n_out
            b = self.theta[off : off + n_out]
            off += n_out
            out.append((w, b))
        return out


def init_params(spec: MlpSpec, rng: Rng) -> ModelParams:
    """Uniform +-sqrt(6/(fan_in+fan_out)) weights, zero biases."""
    chunks = []
    sizes = spec.layer_sizes
    for i in range(len(sizes) - 1):
        n_in, n_out = sizes[i], sizes[i + 1]
        bound = np.sqrt(6.0 / (n_in + n_out))
        chunks.append(rng.uniform(-bound, bound, size=n_in * n_out))
        chunks.append(np.zeros(n_out))
    return ModelParams(np.concatenate(chunks), spec)


def _forward_cached(params: ModelParams, x2d: Mat) -> list[Mat]:
    """Activations per layer for a (batch, n_in) input; last entry is logits."""
    acts = [x2d]
    layers = params.layers()
    for i, (w, b) in enumerate(layers):
        z = acts[-1] @ w.T + b
        acts.append(np.tanh(z) if i < len(layers) - 1 else z)
    return acts


def forward_batch(params: ModelParams, x2d) -> Mat:
    x2d = np.asarray(x2d, dtype=np.float64)
    if x2d.ndim != 2 or x2d.shape[1] != params.spec.n_in:
        raise DimensionError(f"forward_batch: input {x2d.shape} vs n_in={params.spec.n_in}")
    return _forward_cached(params, x2d)[-1]


def forward(params: ModelParams, x) -> Vec:
    """Logits for a single feature vector."""
    x = as_vec(x)
    if x.shape[0] != params.spec.n_in:
        raise DimensionError(f"forward: input {x.shape} vs n_in={params.spec.n_in}")
    return _forward_cached(params, x[None, :])[-1][0]


def _backward(params: ModelParams, acts: list[Mat], w_out: Mat) -> Vec:
    """Flat gradient of sum_b <w_out[b], logits[b]> with respect to theta.

    ``acts`` is the cache from :func:`_forward_cached` for the same batch.
    """
    layers = params.layers()
    grads: list[np.ndarray | None] = [None] * len(layers)
    delta = np.asarray(w_out, dtype=np.float64)
    for i in range(len(layers) - 1, -1, -1):
        w, _ = layers[i]
        grads[i] = (delta.T @ acts[i], delta.sum(axis=0))
        if i > 0:
            # tanh'(z) expressed through the cached activation
            delta = (delta @ w) * (1.0 - acts[i] ** 2)
    flat = []
    for gw, gb in grads:
        flat.append(gw.ravel())
        flat.append(gb)
    return np.concatenate(flat)


def vjp(params: ModelParams, x, w) -> Vec:
    """w^T @ jacobian(params, x) without materializing the Jacobian."""
    x = as_vec(x)
    w = as_vec(w, "w")
    if x.shape[0] != params.spec.n_in:
        raise DimensionError(f"vjp: input {x.shape} vs n_in={params.spec.n_in}")
    if w.shape[0] != params.spec.n_out:
        raise DimensionError(f"vjp: weight {w.shape} vs n_out={params.spec.n_out}")
    acts = _forward_cached(params, x[None, :])
    return _backward(params, acts, w[None, :])


def vjp_batch(params: ModelParams, x2d, w2d) -> Vec:
    """Sum over the batch of per-sample vjps, in one reverse pass."""
    x2d = np.asarray(x2d, dtype=np.float64)
    w2d = np.asarray(w2d, dtype=np.float64)
    if x2d.shape[0] != w2d.shape[0]:
        raise DimensionError("vjp_batch: batch sizes differ")
    acts = _forward_cached(params, x2d)
    return _backward(params, acts, w2d)


def jacobian(params: ModelParams, x) -> Mat:
    """Full (k, d) Jacobian of the logits with respect to theta."""
    x = as_vec(x)
    if x.shape[0] != params.spec.n_in:
        raise DimensionError(f"jacobian: input {x.shape} vs n_in={params.spec.n_in}")
    k = params.spec.n_out
    acts = _forward_cached(params, x[None, :])
    rows = [_backward(params, acts, np.eye(k)[i][None, :]) for i in range(k)]
    return np.stack(rows)


def save_params(params: ModelParams, path) -> None:
    """Checkpoint: header line, layer sizes line, raw little-endian f64 theta."""
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_HEADER + b"\n")
        fh.write(" ".join(str(s) for s in params.spec.layer_sizes).encode("ascii") + b"\n")
        fh.write(params.theta.astype("<f8", copy=False).tobytes())


def load_params(path) -> ModelParams:
    with open(path, "rb") as fh:
        header = fh.readline().rstrip(b"\n")
        if header != CHECKPOINT_HEADER:
            raise ValueError(f"bad checkpoint header: {header!r}")
        sizes_line = fh.readline().rstrip(b"\n")
        try:
            sizes = tuple(int(tok) for tok in sizes_line.split())
        except ValueError as exc:
            raise ValueError(f"bad layer-size line: {sizes_line!r}") from exc
        spec = MlpSpec(sizes)
        payload = fh.read()
        if len(payload) != 8 * spec.n_params:
            raise ValueError(
                f"checkpoint payload is {len(payload)} bytes, expected {8 * spec.n_params}"
            )
        theta = np.frombuffer(payload, dtype="<f8").astype(np.float64)
    return ModelParams(theta, spec)
