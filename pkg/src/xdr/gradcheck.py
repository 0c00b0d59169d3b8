"""Registered finite-difference suites for every hand-written gradient.

Each suite builds a small random instance in float64, computes the analytic
gradients once and compares them block by block with central differences.
``inject_bug=True`` adds a constant offset to the analytic gradients so the
harness itself can be seen to fail.
"""
from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from .adversary import DomainClassifier, domain_loss
from .cf_models import InteractionFunction, RepresentationBank, cf_loss_and_gradients
from .seeding import make_rng
from .tensor_core import finite_difference_check
from .tmn import MemoryKeys, ReviewSets, tmn_loss_and_gradients

TOLERANCE = 1e-4
BUG_OFFSET = 1e-3


@dataclass
class CheckResult:
    suite: str
    block: str
    max_rel_error: float
    tolerance: float
    seconds: float

    @property
    def passed(self) -> bool:
        return bool(self.max_rel_error < self.tolerance)


def _pairs(rng, n_users, n_items, n):
    return rng.integers(0, n_users, n), rng.integers(0, n_items, n), rng.integers(0, 2, n).astype(float)


def _tmn_case(rng):
    M, N, H, K1, K2 = 8, 8, 20, 6, 4
    S = rng.normal(0, 1.0, (H, K1))
    ur = ReviewSets([rng.choice(H, rng.integers(1, 7), replace=False) for _ in range(M)])
    ir = ReviewSets([rng.choice(H, rng.integers(1, 7), replace=False) for _ in range(N)])
    keys = MemoryKeys(rng.normal(0, 0.5, (M, K2)), rng.normal(0, 0.5, (N, K2)), rng.normal(0, 0.5, (H, K2)))
    u, i, y = _pairs(rng, M, N, 24)
    w = rng.uniform(0.5, 1.5, len(u))

    def loss(params):
        k = MemoryKeys(*params)
        return tmn_loss_and_gradients(u, i, y, k, ur, ir, S, 0.05, w)[0]

    _, g = tmn_loss_and_gradients(u, i, y, keys, ur, ir, S, 0.05, w)
    return [keys.P, keys.Q, keys.T], [g["P"], g["Q"], g["T"]], ["P", "Q", "T"], loss


def _cf_case(rng, text: bool):
    M, N, K3, K1 = 7, 9, 5, 3
    U, V = rng.normal(0, 0.5, (M, K3)), rng.normal(0, 0.5, (N, K3))
    E = rng.normal(0, 0.5, (M, K1)) if text else None
    F = rng.normal(0, 0.5, (N, K1)) if text else None
    kind = "weighted_inner_product" if text else "inner_product"
    f = InteractionFunction.create(kind, K3 + (K1 if text else 0))
    if text:
        f.params["theta"] = rng.uniform(0.5, 1.5, K3 + K1)
    u, i, y = _pairs(rng, M, N, 30)
    w = rng.uniform(0.5, 1.5, len(u))
    blocks = [U, V] + ([f.params["theta"]] if text else [])

    def loss(params):
        fn = InteractionFunction(kind, {"theta": params[2]} if text else {})
        return cf_loss_and_gradients(u, i, y, w, RepresentationBank(params[0], params[1], E, F), fn, 0.05)[0]

    _, g = cf_loss_and_gradients(u, i, y, w, RepresentationBank(U, V, E, F), f, 0.05)
    grads = [g["U"], g["V"]] + ([g["theta"]] if text else [])
    return blocks, grads, ["U", "V"] + (["theta"] if text else []), loss


def _classifier_case(rng):
    K3, K1 = 5, 6
    clf = DomainClassifier(K3 + K1, (64, 64, 64), rng)
    Xs, Xt = rng.normal(0, 1.0, (6, K3 + K1)), rng.normal(0.3, 1.0, (6, K3 + K1))
    names = list(clf.params)

    def loss(params):
        c = clf.copy()
        c.params = dict(zip(names, params[:-2]))
        return domain_loss(params[-2], params[-1], c)[0]

    _, grads, dXs, dXt = domain_loss(Xs, Xt, clf)
    blocks = [clf.params[k] for k in names] + [Xs, Xt]
    return blocks, [grads[k] for k in names] + [dXs, dXt], names + ["X_source", "X_target"], loss


SUITES = {
    "tmn": _tmn_case,
    "mf": lambda rng: _cf_case(rng, text=False),
    "tcf": lambda rng: _cf_case(rng, text=True),
    "classifier": _classifier_case,
}


def run_suite(name: str, seed: int = 0, inject_bug: bool = False) -> list[CheckResult]:
    if name not in SUITES:
        raise ValueError(f"unknown gradient suite {name!r}; choose from {sorted(SUITES)}")
    rng = make_rng(seed, "gradcheck", name)
    blocks, grads, labels, loss = SUITES[name](rng)
    out = []
    for j, (label, g) in enumerate(zip(labels, grads)):
        g = np.array(g, dtype=float)
        if inject_bug:
            g = g + BUG_OFFSET
        t0 = time.perf_counter()

        def block_loss(p, j=j):
            full = list(blocks)
            full[j] = p[0]
            return loss(full)

        err = finite_difference_check(block_loss, [blocks[j]], [g])
        out.append(CheckResult(name, label, err, TOLERANCE, time.perf_counter() - t0))
    return out


def run_all(seed: int = 0, inject_bug: bool = False, suites=None) -> list[CheckResult]:
    results = []
    for name in suites or SUITES:
        results.extend(run_suite(name, seed, inject_bug))
    return results
