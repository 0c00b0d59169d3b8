"""End-to-end pipelines on the paired synthetic domains.

The presets below were picked by small sweeps on the default scenario. They
are ordinary hyperparameters; nothing in the pipelines depends on them.
"""
from __future__ import annotations

import copy

import numpy as np

from .adversary import TDAR, DomainData
from .cf_models import ItemPop, TextCF
from .corpus import DatasetBundle
from .evaluation import mmd
from .seeding import make_rng
from .synth import Scenario, generate
from .tmn import TextMemoryNetwork, TextualFeatures

TRANSFER_PRESET = {
    "tmn": {"n_keys": 8, "learning_rate": 0.01, "reg": 0.001, "max_iter": 60, "patience": 15},
    "tcf": {"n_factors": 8, "learning_rate": 0.01, "reg": 0.01, "max_iter": 100, "patience": 20},
    "tdar": {
        "n_factors": 8, "eta_s": 0.01, "eta_t": 0.01, "eta_plus": 0.001, "eta_minus": 0.1,
        "reg_s": 0.01, "reg_t": 0.01, "max_iter": 100, "patience": 20,
    },
    "align": {"classifier_epochs": 20, "align_epochs": 100},
    # long positive-only run used to expose the all-positive tendency
    "saturation": {
        "n_factors": 16, "learning_rate": 0.05, "reg": 0.003, "batch_size": 16, "max_iter": 200,
    },
}


def preset(overrides: dict | None = None) -> dict:
    """Deep copy of :data:`TRANSFER_PRESET` with per-section overrides merged in."""
    out = copy.deepcopy(TRANSFER_PRESET)
    for section, values in (overrides or {}).items():
        out.setdefault(section, {}).update(values)
    return out


def fit_features(bundle: DatasetBundle, seed: int, **tmn_kw):
    """Train a TMN on one bundle and return ``(model, frozen features)``."""
    tm = TextMemoryNetwork(random_state=seed, **tmn_kw)
    tm.fit(bundle.matrix("train"), bundle.validation, bundle.interactions.user_words,
           bundle.interactions.item_words, bundle.word_vectors)
    return tm, tm.transform()


def _domains(seed, scenario, cfg):
    source, target, _ = generate(scenario or Scenario(), seed)
    _, fs = fit_features(source, seed, **cfg["tmn"])
    _, ft = fit_features(target, seed, **cfg["tmn"])
    return source, target, fs, ft


def _pretrain_source(source, fs: TextualFeatures, seed, cfg) -> TextCF:
    return TextCF(random_state=seed, **cfg["tcf"]).fit(
        source.matrix("train"), source.validation, fs.E, fs.F)


def transfer_experiment(seed: int, scenario: Scenario | None = None, overrides=None) -> dict:
    """Target validation F1@2 of ItemPop, two target-only TCFs and TDAR.

    The TDAR source side is initialised from a TCF pretrained on the source.
    """
    cfg = preset(overrides)
    source, target, fs, ft = _domains(seed, scenario, cfg)
    out = {"seed": seed}
    out["itempop"] = ItemPop().fit(target.matrix("train")).evaluate(
        target.validation, exclude=target.train, k_list=(2,)).f1(2)
    for name, rho in (("tcf_positive_only", 0), ("tcf_rho1", 1)):
        m = TextCF(random_state=seed, **{**cfg["tcf"], "n_negatives": rho}).fit(
            target.matrix("train"), target.validation, ft.E, ft.F)
        out[name] = m.best_score_
    pre = _pretrain_source(source, fs, seed, cfg)
    out["tcf_source"] = pre.best_score_
    td = TDAR(random_state=seed, **cfg["tdar"]).fit(
        DomainData.from_bundle(source, fs), DomainData.from_bundle(target, ft), pre.bank_)
    out["tdar"] = td.best_score_
    out["tdar_best_iteration"] = td.best_iteration_
    out["mmd_E"] = mmd(fs.E, ft.E)
    out["mmd_F"] = mmd(fs.F, ft.F)
    return out


def alignment_experiment(seed: int, scenario: Scenario | None = None, overrides=None) -> dict:
    """Classifier-only warm-up followed by pure alignment (no prediction losses).

    Returns the held-out accuracies at the end of the warm-up and the per-epoch
    accuracy trace of the alignment stage.
    """
    cfg = preset(overrides)
    source, target, fs, ft = _domains(seed, scenario, cfg)
    pre = _pretrain_source(source, fs, seed, cfg)
    S, T = DomainData.from_bundle(source, fs), DomainData.from_bundle(target, ft)
    base = {**cfg["tdar"], "patience": None}
    clf = TDAR(random_state=seed, stage="classifier",
               **{**base, "max_iter": cfg["align"]["classifier_epochs"]}).fit(S, T, pre.bank_)
    start = clf.classifier_accuracy()
    al = TDAR(random_state=seed, stage="align",
              **{**base, "max_iter": cfg["align"]["align_epochs"]}).fit(S, T, init_state=clf.state_)
    trace = [(h["user_acc"], h["item_acc"]) for h in al.history_]
    return {"seed": seed, "start": start, "trace": trace, "end": al.classifier_accuracy()}


def probe_pairs(seed: int, n_users: int, n_items: int, n: int = 10_000, users=None, items=None):
    """``n`` uniformly random ``(user, item)`` pairs, optionally from given pools."""
    rng = make_rng(seed, "probe_pairs")
    u = rng.integers(0, n_users, n) if users is None else rng.choice(users, n)
    i = rng.integers(0, n_items, n) if items is None else rng.choice(items, n)
    return np.stack([u, i], axis=1)


def saturation_experiment(seed: int = 0, scenario: Scenario | None = None, overrides=None) -> dict:
    """Mean predicted probability of a positive-only TCF on random target pairs.

    Reported over the full user x item grid and over users/items that own at
    least one training interaction.
    """
    cfg = preset(overrides)
    _, target, _ = generate(scenario or Scenario(), seed)
    _, ft = fit_features(target, seed, **cfg["tmn"])
    R = target.matrix("train")
    m = TextCF(random_state=seed, **{**cfg["saturation"], "n_negatives": 0}).fit(R, None, ft.E, ft.F)
    users = np.flatnonzero(np.diff(R.indptr))
    items = np.unique(R.indices)
    grid = probe_pairs(seed, target.M, target.N)
    support = probe_pairs(seed, target.M, target.N, users=users, items=items)
    return {
        "seed": seed,
        "mean_prediction": float(m.predict(grid).mean()),
        "mean_prediction_support": float(m.predict(support).mean()),
        "untrained_users": int(target.M - len(users)),
        "untrained_items": int(target.N - len(items)),
    }
