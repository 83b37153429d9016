"""Self-check of the personalized-model guarantees on random instances.

Exercised by the ``check`` CLI command and the acceptance suite.  Each
instance draws a random network, parameter vector, input, trust weight, and
a consistent prior pair, then verifies:

(a) the output is a probability vector (within 1e-12);
(b) the point prior's class carries at least the trust weight, and is the
    argmax whenever the trust weight is 0.6;
(c) classes outside the range support get probability exactly zero;
(d) the analytic Jacobian matches central finite differences (rel. error
    <= 1e-5, with an absolute floor guarding near-constant outputs).
"""

from __future__ import annotations

import numpy as np

from .knowledge import (
    ConstantPredKM,
    FuncRangeKM,
    KnowledgePair,
    PersonalizedModel,
    personalized_jacobian,
)
from .linalg import Rng
from .nn import MlpSpec, ModelParams, init_params

FD_STEP = 1e-6
JAC_TOL = 1e-5
SIMPLEX_TOL = 1e-12
TRUST_TOL = 1e-12
LAM_CYCLE = (0.0, 0.3, 0.6, 1.0)


def rel_error(a: np.ndarray, b: np.ndarray, floor: float = 1e-4) -> float:
    denom = max(np.abs(a).max(initial=0.0), np.abs(b).max(initial=0.0), floor)
    return float(np.abs(a - b).max(initial=0.0) / denom)


def fd_prediction_jacobian(pm: PersonalizedModel, x, h: float = FD_STEP) -> np.ndarray:
    """Central finite differences of the personalized output in theta."""
    base = pm.server.theta
    spec = pm.server.spec
    cols = []
    for j in range(spec.n_params):
        tp, tm = base.copy(), base.copy()
        tp[j] += h
        tm[j] -= h
        fp = PersonalizedModel(ModelParams(tp, spec), pm.km).predict(x)
        fm = PersonalizedModel(ModelParams(tm, spec), pm.km).predict(x)
        cols.append((fp - fm) / (2 * h))
    return np.stack(cols, axis=1)


def random_instance(rng: Rng, i: int):
    """Random (model, input, pair) with consistent priors and <= 500 params."""
    k = 2 + int(rng.integers(0, 9))
    n_in = 2 + int(rng.integers(0, 7))
    hidden = tuple(2 + int(rng.integers(0, 11)) for _ in range(int(rng.integers(0, 3))))
    spec = MlpSpec((n_in, *hidden, k))
    params = init_params(spec, rng.derive(i, 0))
    theta = params.theta + 0.5 * rng.derive(i, 1).normal(spec.n_params)
    x = rng.derive(i, 2).normal(n_in)
    mask = (rng.derive(i, 3).uniform(0.0, 1.0, k) < 0.6).astype(np.float64)
    if mask.sum() == 0:
        mask[int(rng.derive(i, 4).integers(0, k))] = 1.0
    support = np.flatnonzero(mask)
    gp_cls = int(support[int(rng.derive(i, 5).integers(0, len(support)))])
    lam = LAM_CYCLE[i % len(LAM_CYCLE)]
    pair = KnowledgePair(
        ConstantPredKM(gp_cls, k), FuncRangeKM(lambda _x, m=mask: m, k), lam, owner=f"check-{i}"
    )
    return PersonalizedModel(ModelParams(theta, spec), pair), x, mask, gp_cls, lam


def invariant_check(instances: int = 200, seed: int = 2024, log=print) -> bool:
    """Run the four guarantees over random instances; True iff all hold."""
    rng = Rng(seed)
    worst = {"simplex": 0.0, "trust": 0.0, "mask": 0.0, "jacobian": 0.0}
    argmax_bad = negative = 0
    for i in range(instances):
        pm, x, mask, gp_cls, lam = random_instance(rng, i)
        f = pm.predict(x)
        if f.min() < 0:
            negative += 1
        worst["simplex"] = max(worst["simplex"], abs(f.sum() - 1.0))
        worst["trust"] = max(worst["trust"], lam - f[gp_cls])
        off = f[mask == 0]
        worst["mask"] = max(worst["mask"], float(np.abs(off).max(initial=0.0)))
        if lam == 0.6 and int(np.argmax(f)) != gp_cls:
            argmax_bad += 1
        analytic = personalized_jacobian(pm, x)
        worst["jacobian"] = max(worst["jacobian"], rel_error(analytic, fd_prediction_jacobian(pm, x)))
    results = [
        ("(a) output on the probability simplex", negative == 0 and worst["simplex"] <= SIMPLEX_TOL,
         f"max |sum-1| = {worst['simplex']:.2e}, negatives = {negative}"),
        ("(b) trust-weight floor and argmax at 0.6", worst["trust"] <= TRUST_TOL and argmax_bad == 0,
         f"worst floor gap = {worst['trust']:.2e}, argmax misses = {argmax_bad}"),
        ("(c) out-of-range probabilities exactly zero", worst["mask"] == 0.0,
         f"max off-support mass = {worst['mask']:.2e}"),
        ("(d) analytic vs finite-difference Jacobian", worst["jacobian"] <= JAC_TOL,
         f"max rel. error = {worst['jacobian']:.2e}"),
    ]
    ok = True
    for name, passed, detail in results:
        ok &= passed
        log(f"{'PASS' if passed else 'FAIL'} {name}: {detail} [{instances} instances]")
    return ok
