"""Synchronous federated averaging over simulated clients.

One process plays both sides: the server owns the global parameter vector
between rounds, clients receive an immutable snapshot, run local SGD on
their personalized loss, and upload parameter vectors.  The only values
crossing the client/server seam are parameter vectors and scalar metrics;
the transport object enforces that shape.

Determinism: every client derives its round RNG from (master seed, client
id, round), uploads are reduced in ascending client-id order, and client
work is pure given its inputs, so results do not depend on the degree of
parallelism.
"""

from __future__ import annotations

import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import nn
from .data import BatchPlan, Dataset
from .knowledge import KnowledgePair, blend_rows, trivial_pair
from .linalg import EPS_PROB, Rng

# spawn-key stream ids under the master seed
SAMPLING_STREAM = 0
CLIENT_STREAM = 1


@dataclass
class FedConfig:
    rounds: int
    epochs: int
    batch_size: int
    learning_rate: float
    sampling_rate: float = 1.0

    def __post_init__(self):
        if self.rounds < 0 or self.epochs < 0:
            raise ValueError("rounds and epochs must be >= 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.learning_rate < 0:
            raise ValueError("learning_rate must be >= 0")
        if not 0 < self.sampling_rate <= 1:
            raise ValueError("sampling_rate must be in (0, 1]")


@dataclass
class RoundReport:
    round: int
    participants: list[int]
    # client id -> (train loss, test accuracy, share of range violations)
    metrics: dict[int, tuple[float, float, float]]
    wall_clock: float = 0.0


class ClientState:
    """One simulated client: local data views, knowledge pair, derived RNG.

    The knowledge pair is validated for prior consistency over the client's
    full local data at construction.  Prior evaluations over the local data
    are cached, so training and evaluation are fully vectorized.
    """

    def __init__(
        self,
        client_id: int,
        ds: Dataset,
        train_idx,
        test_idx,
        km: KnowledgePair,
        rng_root: Rng,
        spec: nn.MlpSpec,
    ):
        self.id = int(client_id)
        self.km = km
        self.spec = spec
        self.train_idx = np.asarray(train_idx, dtype=np.int64)
        self.test_idx = np.asarray(test_idx, dtype=np.int64)
        if len(self.train_idx) == 0:
            raise ValueError(f"client {client_id}: empty training set")
        self.rng_root = rng_root
        self.train_x = ds.x[self.train_idx]
        self.train_y = ds.y[self.train_idx]
        self.test_x = ds.x[self.test_idx]
        self.test_y = ds.y[self.test_idx]
        km.audit(np.concatenate([self.train_x, self.test_x]) if len(self.test_x) else self.train_x)
        k = km.k
        self._trivial = trivial_pair(k, owner=km.owner)
        self._train_onehot = np.zeros((len(self.train_y), k))
        self._train_onehot[np.arange(len(self.train_y)), self.train_y] = 1.0
        # prior rows cached per (knowledge on/off): (gp one-hots, range masks)
        self._prior_rows = {}
        for knowledge, pair in ((True, km), (False, self._trivial)):
            self._prior_rows[knowledge] = {
                "train": (
                    np.stack([pair.gp(x) for x in self.train_x]),
                    pair.gr.masks_of_rows(self.train_x),
                ),
                "test": (
                    np.stack([pair.gp(x) for x in self.test_x]) if len(self.test_x) else np.zeros((0, k)),
                    pair.gr.masks_of_rows(self.test_x) if len(self.test_x) else np.zeros((0, k)),
                ),
            }
        self._real_test_masks = self._prior_rows[True]["test"][1]

    def pair(self, knowledge: bool) -> KnowledgePair:
        return self.km if knowledge else self._trivial

    def round_rng(self, round_idx: int) -> Rng:
        return self.rng_root.derive(round_idx)

    # -- local training -----------------------------------------------------

    def _predicted_rows(self, params: nn.ModelParams, rows: str, knowledge: bool) -> np.ndarray:
        x = self.train_x if rows == "train" else self.test_x
        gp_rows, gr_rows = self._prior_rows[knowledge][rows]
        logits = nn.forward_batch(params, x)
        return blend_rows(self.pair(knowledge).lam, logits, gp_rows, gr_rows)

    def local_loss(self, params: nn.ModelParams, knowledge: bool = True) -> float:
        f = self._predicted_rows(params, "train", knowledge)
        p_true = np.maximum((f * self._train_onehot).sum(axis=1), EPS_PROB)
        return float(-np.log(p_true).mean())

    def batch_gradient(self, params: nn.ModelParams, batch_rows, knowledge: bool = True) -> np.ndarray:
        """Mean gradient of the personalized loss over the given train rows.

        Uses the factored form: the cotangent for a sample with true class i
        is -(1-lam) * s_i * (e_i - s) / p_i, with s the range-masked softmax
        and p_i the personalized probability of the true class.
        """
        batch_rows = np.asarray(batch_rows, dtype=np.int64)
        if len(batch_rows) == 0:
            raise ValueError("empty batch")
        pair = self.pair(knowledge)
        x = self.train_x[batch_rows]
        y1h = self._train_onehot[batch_rows]
        gp_rows, gr_rows = (a[batch_rows] for a in self._prior_rows[knowledge]["train"])
        acts = nn._forward_cached(params, x)
        s = blend_rows(0.0, acts[-1], gp_rows, gr_rows)
        f = (1.0 - pair.lam) * s + pair.lam * gp_rows
        s_true = (s * y1h).sum(axis=1)
        p_true = np.maximum((f * y1h).sum(axis=1), EPS_PROB)
        coeff = -(1.0 - pair.lam) * s_true / p_true
        cotangents = coeff[:, None] * (y1h - s)
        return nn._backward(params, acts, cotangents) / len(batch_rows)

    def local_update(
        self, theta: np.ndarray, cfg: FedConfig, round_idx: int, knowledge: bool = True
    ) -> np.ndarray:
        """Run cfg.epochs of minibatch SGD from theta; returns the new vector."""
        params = nn.ModelParams(theta.copy(), self.spec)
        plan = BatchPlan(np.arange(len(self.train_idx)), cfg.batch_size, self.round_rng(round_idx))
        for _ in range(cfg.epochs):
            for batch in plan.next_epoch():
                grad = self.batch_gradient(params, batch, knowledge)
                params.theta -= cfg.learning_rate * grad
        return params.theta

    # -- evaluation ----------------------------------------------------------

    def metrics(self, params: nn.ModelParams, knowledge: bool = True) -> tuple[float, float, float]:
        """(train loss, test accuracy, range-violation share on the test set).

        Violations are always counted against the client's real range prior,
        whatever priors the evaluated model was trained with.
        """
        loss = self.local_loss(params, knowledge)
        if len(self.test_y) == 0:
            return loss, 0.0, 0.0
        pred = np.argmax(self._predicted_rows(params, "test", knowledge), axis=1)
        ta = float((pred == self.test_y).mean())
        pov = float((self._real_test_masks[np.arange(len(pred)), pred] == 0).mean())
        return loss, ta, pov


# free-function spec surface -------------------------------------------------


def local_loss(client: ClientState, params: nn.ModelParams, knowledge: bool = True) -> float:
    return client.local_loss(params, knowledge)


def batch_gradient(client, params, batch_rows, knowledge: bool = True) -> np.ndarray:
    return client.batch_gradient(params, batch_rows, knowledge)


def local_update(client, theta, cfg, round_idx, knowledge: bool = True) -> np.ndarray:
    return client.local_update(theta, cfg, round_idx, knowledge)


def sample_clients(master_rng: Rng, round_idx: int, n_clients: int, sampling_rate: float) -> list[int]:
    """ceil(rate * M) distinct clients, uniform, deterministic by (seed, round)."""
    size = int(np.ceil(sampling_rate * n_clients))
    rng = master_rng.derive(SAMPLING_STREAM, round_idx)
    return sorted(rng.choice_without_replacement(n_clients, size).tolist())


def aggregate(uploads: dict[int, np.ndarray]) -> np.ndarray:
    """Unweighted mean of the uploads, reduced in ascending client-id order."""
    if not uploads:
        raise ValueError("aggregate: no uploads")
    ids = sorted(uploads)
    d = uploads[ids[0]].shape
    total = np.zeros(d)
    for cid in ids:
        if uploads[cid].shape != d:
            raise ValueError(f"aggregate: client {cid} uploaded shape {uploads[cid].shape}, expected {d}")
        total += uploads[cid]
    return total / len(ids)


class LocalTransport:
    """In-process client/server seam.

    Only flat float64 parameter vectors and scalar metric triples may cross;
    anything else is a privacy bug and raises.
    """

    def push_and_train(self, client: ClientState, theta, cfg, round_idx, knowledge) -> np.ndarray:
        out = client.local_update(self._check_params(theta), cfg, round_idx, knowledge)
        return self._check_params(out)

    def pull_metrics(self, client: ClientState, params, knowledge) -> tuple[float, float, float]:
        triple = client.metrics(params, knowledge)
        if len(triple) != 3 or not all(isinstance(v, float) for v in triple):
            raise TypeError("transport: metrics payload must be three floats")
        return triple

    @staticmethod
    def _check_params(theta) -> np.ndarray:
        if not (isinstance(theta, np.ndarray) and theta.dtype == np.float64 and theta.ndim == 1):
            raise TypeError("transport: parameter payload must be a flat float64 vector")
        return theta


@dataclass
class ServerState:
    params: nn.ModelParams
    cfg: FedConfig
    master_rng: Rng
    round: int = 0
    reports: list[RoundReport] = field(default_factory=list)


def run_federated(
    server: ServerState,
    clients: list[ClientState],
    mode: str,
    threads: int = 1,
    transport: LocalTransport | None = None,
) -> tuple[nn.ModelParams, list[RoundReport]]:
    """Federated averaging: sample, broadcast, local SGD, aggregate.

    mode "fl" trains without knowledge (trust 0, all-ones masks); "flwkm"
    uses each client's own knowledge pair.  Reports carry post-aggregation
    metrics for the round's participants.
    """
    if mode not in ("fl", "flwkm"):
        raise ValueError(f"mode must be 'fl' or 'flwkm', got {mode!r}")
    knowledge = mode == "flwkm"
    transport = transport or LocalTransport()
    cfg = server.cfg
    theta = server.params.theta
    by_id = {c.id: c for c in clients}
    for t in range(cfg.rounds):
        tic = time.perf_counter()
        picked = sample_clients(server.master_rng, t, len(clients), cfg.sampling_rate)

        def train_one(cid: int) -> tuple[int, np.ndarray]:
            try:
                return cid, transport.push_and_train(by_id[cid], theta, cfg, t, knowledge)
            except Exception as exc:
                raise RuntimeError(f"round {t}, client {cid}: {exc}") from exc

        if threads > 1:
            with ThreadPoolExecutor(max_workers=threads) as pool:
                uploads = dict(pool.map(train_one, picked))
        else:
            uploads = dict(train_one(cid) for cid in picked)
        theta = aggregate(uploads)
        params = nn.ModelParams(theta, server.params.spec)
        metrics = {
            cid: transport.pull_metrics(by_id[cid], params, knowledge) for cid in picked
        }
        server.reports.append(
            RoundReport(t, picked, metrics, wall_clock=time.perf_counter() - tic)
        )
        server.round = t + 1
    final = nn.ModelParams(theta.copy(), server.params.spec)
    return final, server.reports
