"""Experiment harness: builds a benchmark instance and runs the five modes.

All modes of one (config, seed) pair share the same dataset, partition,
splits, knowledge priors, and initial parameters, so comparisons are paired.
The five modes:

* ``ml``     -- each client trains its own copy locally, no priors;
* ``pkm``    -- each client's point prior evaluated on its own;
* ``mlwkm``  -- local training of the knowledge-wrapped model;
* ``fl``     -- federated averaging without priors;
* ``flwkm``  -- federated averaging of the knowledge-wrapped model.

Local modes run rounds*epochs total epochs so compute budgets match the
federated modes.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import nn
from .config import ExperimentConfig
from .data import (
    Dataset,
    normalize_minmax,
    parse_idx,
    parse_libsvm,
    partition_noniid,
    split_train_test,
    stratified_take,
    synth_gaussian,
)
from .fed import CLIENT_STREAM, ClientState, FedConfig, RoundReport, ServerState, run_federated
from .knowledge import (
    FeatureQuantizer,
    KnowledgePair,
    MaskMap,
    PredGuardedRangeKM,
    build_table_rkm,
    fit_logistic_pkm,
)
from .linalg import Rng
from .metrics import MetricRow, test_accuracy, write_csv_atomic

# data-pipeline spawn-key streams under the master seed (fed.py owns 0 and 1)
DATA_STREAM = 10
PARTITION_STREAM = 11
SPLIT_STREAM = 12
KM_SPLIT_STREAM = 13
FRACTION_STREAM = 14
PKM_FIT_STREAM = 15
INIT_STREAM = 16


@dataclass
class Instance:
    """Everything one seed's runs share across modes."""

    cfg: ExperimentConfig
    seed: int
    ds: Dataset
    clients: list[ClientState]
    spec: nn.MlpSpec
    init: nn.ModelParams

    def fed_config(self) -> FedConfig:
        c = self.cfg
        return FedConfig(c.rounds, c.epochs, c.batch_size, c.learning_rate, c.sampling_rate)


def load_dataset(cfg: ExperimentConfig, rng: Rng) -> Dataset:
    if cfg.source == "synth":
        ds = synth_gaussian(cfg.classes, cfg.features, cfg.per_class, cfg.separation, rng)
    elif cfg.source == "libsvm":
        with open(cfg.path, "r", encoding="utf-8") as fh:
            ds = parse_libsvm(fh)
    else:
        ds = parse_idx(Path(cfg.images).read_bytes(), Path(cfg.labels).read_bytes())
    ds, _, _ = normalize_minmax(ds)
    return ds


def build_instance(cfg: ExperimentConfig, seed: int) -> Instance:
    master = Rng(seed)
    ds = load_dataset(cfg, master.derive(DATA_STREAM))
    cpc = min(cfg.classes_per_client, ds.k)
    split = partition_noniid(ds, cfg.clients, cpc, cfg.imbalance, master.derive(PARTITION_STREAM))
    lam = cfg.lam_per_client()
    spec = nn.MlpSpec((ds.n, *cfg.hidden, ds.k))
    clients = []
    for m, idx in enumerate(split.client_indices):
        train_all, test_idx = split_train_test(
            ds.y, idx, cfg.test_fraction, master.derive(SPLIT_STREAM, m)
        )
        km_idx = stratified_take(ds.y, train_all, cfg.km_fraction, master.derive(KM_SPLIT_STREAM, m))
        train_pool = np.array(sorted(set(train_all.tolist()) - set(km_idx.tolist())), dtype=np.int64)
        if cfg.fraction < 1.0:
            train_pool = stratified_take(
                ds.y, train_pool, cfg.fraction, master.derive(FRACTION_STREAM, m)
            )
        pair = build_knowledge_pair(cfg, ds, km_idx, lam[m], master.derive(PKM_FIT_STREAM, m), str(m))
        clients.append(
            ClientState(m, ds, train_pool, test_idx, pair, master.derive(CLIENT_STREAM, m), spec)
        )
    init = nn.init_params(spec, master.derive(INIT_STREAM))
    return Instance(cfg, seed, ds, clients, spec, init)


def build_knowledge_pair(
    cfg: ExperimentConfig, ds: Dataset, km_idx, lam: float, rng: Rng, owner: str
) -> KnowledgePair:
    """Fit the client's priors on its knowledge subset.

    Point prior: multinomial logistic regression on a reduced feature view.
    Range prior: quantized lookup table over the same subset, widened at
    evaluation time to always admit the point prior's class.
    """
    fmap = MaskMap(range(1, min(cfg.pkm_features, ds.n) + 1))
    x_km, y_km = ds.x[km_idx], ds.y[km_idx]
    gp = fit_logistic_pkm(
        x_km, y_km, ds.k, fmap, cfg.pkm_epochs, cfg.pkm_learning_rate, rng
    )
    quant = FeatureQuantizer(min(cfg.quantizer_features, ds.n), cfg.quantizer_buckets, 0.0, 1.0)
    table = build_table_rkm(x_km, y_km, ds.k, gp, quant)
    return KnowledgePair(gp, PredGuardedRangeKM(table, gp), lam, owner)


# ---------------------------------------------------------------------------
# mode runners
# ---------------------------------------------------------------------------


def _client_rows(instance, mode, params_by_client, knowledge) -> list[MetricRow]:
    rows = []
    for client in instance.clients:
        _, ta, pov = client.metrics(params_by_client[client.id], knowledge)
        rows.append(MetricRow(mode, client.id, instance.seed, ta, pov))
    return rows


def run_mode(
    instance: Instance, mode: str, threads: int = 1
) -> tuple[list[MetricRow], list[RoundReport]]:
    """Run one mode on a built instance; returns final metric rows and, for
    the federated modes, the per-round reports."""
    fed_cfg = instance.fed_config()
    if mode in ("fl", "flwkm"):
        server = ServerState(
            nn.ModelParams(instance.init.theta.copy(), instance.spec),
            fed_cfg,
            Rng(instance.seed),
        )
        final, reports = run_federated(server, instance.clients, mode, threads=threads)
        rows = _client_rows(
            instance, mode, {c.id: final for c in instance.clients}, mode == "flwkm"
        )
        return rows, reports
    if mode in ("ml", "mlwkm"):
        knowledge = mode == "mlwkm"
        params_by_client = {}
        for client in instance.clients:
            theta = instance.init.theta.copy()
            for t in range(fed_cfg.rounds):
                theta = client.local_update(theta, fed_cfg, t, knowledge)
            params_by_client[client.id] = nn.ModelParams(theta, instance.spec)
        return _client_rows(instance, mode, params_by_client, knowledge), []
    if mode == "pkm":
        rows = []
        for client in instance.clients:
            gp_rows = client._prior_rows[True]["test"][0]
            ta = test_accuracy(gp_rows, client.test_y)
            masks = client._real_test_masks
            pred = np.argmax(gp_rows, axis=1)
            pov = float((masks[np.arange(len(pred)), pred] == 0).mean()) if len(pred) else 0.0
            rows.append(MetricRow(mode, client.id, instance.seed, ta, pov))
        return rows, []
    raise ValueError(f"unknown mode {mode!r}")


def run_baseline(cfg: ExperimentConfig, mode: str, seed: int | None = None) -> list[MetricRow]:
    instance = build_instance(cfg, cfg.seed if seed is None else seed)
    rows, _ = run_mode(instance, mode, threads=cfg.threads)
    return rows


def run_all(cfg: ExperimentConfig, out_dir=None) -> dict[str, Path]:
    """Run every configured mode for the config's seed and write the CSVs."""
    out = Path(out_dir if out_dir is not None else cfg.output_dir)
    instance = build_instance(cfg, cfg.seed)
    metric_rows = []
    written: dict[str, Path] = {}
    for mode in cfg.modes:
        rows, reports = run_mode(instance, mode, threads=cfg.threads)
        metric_rows.extend(rows)
        if reports:
            written[f"rounds_{mode}"] = write_csv_atomic(
                out / f"rounds_{mode}.csv",
                ["round", "client", "loss", "ta", "pov"],
                (
                    (rep.round, cid) + rep.metrics[cid]
                    for rep in reports
                    for cid in rep.participants
                ),
            )
    written["metrics"] = write_csv_atomic(
        out / "metrics.csv",
        ["mode", "client", "seed", "ta", "pov"],
        ((r.mode, r.client, r.seed, r.ta, r.pov) for r in metric_rows),
    )
    return written


def lambda_sweep(cfg: ExperimentConfig, grid, out_dir=None) -> list[tuple[float, int, int, float]]:
    """One knowledge-federated run per trust value; shared seed and data.

    Returns (lambda, client, seed, ta) rows; also writes sweep.csv with the
    per-lambda client rows followed by per-lambda means.
    """
    grid = [float(g) for g in grid]
    if not grid or not all(0.0 <= g <= 1.0 for g in grid):
        raise ValueError(f"sweep grid must be nonempty within [0, 1], got {grid}")
    rows = []
    means = []
    for lam in grid:
        instance = build_instance(cfg.with_overrides(lam=lam), cfg.seed)
        mode_rows, _ = run_mode(instance, "flwkm", threads=cfg.threads)
        for r in mode_rows:
            rows.append((lam, r.client, r.seed, r.ta))
        means.append((lam, float(np.mean([r.ta for r in mode_rows]))))
    out = Path(out_dir if out_dir is not None else cfg.output_dir)
    write_csv_atomic(
        out / "sweep.csv",
        ["lambda", "client", "seed", "ta"],
        rows,
    )
    write_csv_atomic(out / "sweep_mean.csv", ["lambda", "mean_ta"], means)
    return rows
