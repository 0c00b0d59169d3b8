"""Save and restore fitted models through the binary checkpoint container.

Each checkpoint stores the parameter blocks of one model, the configuration it
was trained with and its seed. Frozen textual features travel with the models
that consume them so evaluation needs only the checkpoint and the bundle.
TMN checkpoints hold the memory keys; the review sets and word vectors are
taken from the bundle again when the model is loaded.
"""
from __future__ import annotations

from pathlib import Path

import numpy as np

from .adversary import TDAR, DomainClassifier, DualDomainState
from .cf_models import InteractionFunction, ItemPop, MatrixFactorization, RepresentationBank, TextCF
from .serialization import FormatError, load_checkpoint, save_checkpoint
from .tensor_core import AdamState
from .tmn import ReviewSets, TextMemoryNetwork

MODEL_KINDS = ("itempop", "mf", "tcf", "wtcf", "tmn", "tdar")


def _history_meta(model) -> dict:
    return {
        "history": getattr(model, "history_", []),
        "best_iteration": getattr(model, "best_iteration_", None),
        "best_score": getattr(model, "best_score_", None),
    }


def save_model(path, kind: str, model, config: dict, seed: int) -> Path:
    """Write ``model`` (fitted) as a checkpoint of the given kind."""
    if kind not in MODEL_KINDS:
        raise ValueError(f"unknown model kind {kind!r}")
    path = Path(path)
    meta = {"shape": list(model.shape_), "params": model.get_params()}
    if kind == "itempop":
        arrays = {"popularity": model.popularity_}
    elif kind in ("mf", "tcf", "wtcf"):
        arrays = {"U": model.params_["U"], "V": model.params_["V"]}
        arrays.update({f"theta.{k}": v for k, v in model.interaction_.params.items()})
        if model.user_features_ is not None:
            arrays["E"] = model.user_features_
            arrays["F"] = model.item_features_
        meta["interaction"] = model.interaction_.kind
        meta.update(_history_meta(model))
    elif kind == "tmn":
        arrays = dict(model.params_)
        meta.update(_history_meta(model))
    else:
        arrays, extra = _tdar_arrays(model)
        meta.update(extra)
        meta.update(_history_meta(model))
    save_checkpoint(path, kind, arrays, config, seed, meta)
    return path


def _tdar_arrays(model: TDAR):
    s = model.state_
    arrays = {
        "Us": s.source.U, "Vs": s.source.V, "Es": s.source.E, "Fs": s.source.F,
        "Ut": s.target.U, "Vt": s.target.V, "Et": s.target.E, "Ft": s.target.F,
    }
    for name, p in s.groups().items():
        if name.startswith(("theta.", "phi_u.", "phi_i.")):
            arrays[name] = p
    steps = {}
    for name, st in sorted(s.adam.items()):
        arrays[f"adam.{name}.m"] = st.m
        arrays[f"adam.{name}.v"] = st.v
        steps[name] = st.t
    for key, rows in getattr(model, "eval_rows_", {}).items():
        arrays[f"eval_rows.{key}"] = rows
    meta = {
        "source_shape": list(model.source_shape_),
        "interaction": s.interaction.kind,
        "hidden": list(s.user_clf.hidden),
        "rates": {"eta_s": s.eta_s, "eta_t": s.eta_t, "eta_plus": s.eta_plus,
                  "eta_minus": s.eta_minus},
        "reg": {"reg_s": s.reg_s, "reg_t": s.reg_t},
        "adam_steps": steps,
        "activation": s.user_clf.activation,
    }
    return arrays, meta


def load_model(path, bundle=None):
    """Return ``(model, header)`` for a checkpoint written by :func:`save_model`.

    TMN checkpoints need the training ``bundle`` for review sets and word vectors.
    """
    header, arrays = load_checkpoint(path)
    kind = header.get("kind")
    meta = header.get("meta", {})
    shape = tuple(meta.get("shape", ()))
    params = meta.get("params", {})
    if kind == "itempop":
        model = ItemPop()
        model.popularity_ = arrays["popularity"]
        model.shape_ = shape
    elif kind in ("mf", "tcf", "wtcf"):
        cls = MatrixFactorization if kind == "mf" else TextCF
        model = cls(**params)
        model.shape_ = shape
        theta = {k.split(".", 1)[1]: v.copy() for k, v in arrays.items() if k.startswith("theta.")}
        model.interaction_ = InteractionFunction(meta.get("interaction", "inner_product"), theta)
        model.params_ = {"U": arrays["U"].copy(), "V": arrays["V"].copy(), **theta}
        model.user_features_ = arrays.get("E")
        model.item_features_ = arrays.get("F")
        model._on_params_updated()
        _restore_history(model, meta)
    elif kind == "tmn":
        if bundle is None:
            raise ValueError("loading a TMN checkpoint needs the dataset bundle it was trained on")
        model = TextMemoryNetwork(**params)
        model.shape_ = shape
        if (bundle.M, bundle.N) != shape:
            raise ValueError(f"bundle shape {(bundle.M, bundle.N)} differs from checkpoint {shape}")
        model.params_ = {k: arrays[k].copy() for k in ("P", "Q", "T")}
        model.word_vectors_ = np.asarray(bundle.word_vectors)
        if model.word_vectors_.shape[0] != model.params_["T"].shape[0]:
            raise ValueError("bundle vocabulary size differs from the checkpoint")
        model._S64 = model.word_vectors_.astype(float)
        model.user_reviews_ = ReviewSets(bundle.interactions.user_words, model.max_words)
        model.item_reviews_ = ReviewSets(bundle.interactions.item_words, model.max_words)
        _restore_history(model, meta)
    elif kind == "tdar":
        model = _load_tdar(arrays, meta, params)
    else:
        raise FormatError(f"unknown checkpoint kind {kind!r}")
    return model, header


def _restore_history(model, meta):
    model.history_ = meta.get("history", [])
    model.best_iteration_ = meta.get("best_iteration")
    if meta.get("best_score") is not None:
        model.best_score_ = meta["best_score"]


def _classifier(arrays, prefix, width, hidden, activation):
    clf = DomainClassifier(width, hidden, np.random.default_rng(0), activation=activation)
    for k in clf.params:
        clf.params[k] = arrays[f"{prefix}.{k}"].copy()
    return clf


def _load_tdar(arrays, meta, params) -> TDAR:
    model = TDAR(**params)
    model.shape_ = tuple(meta["shape"])
    model.source_shape_ = tuple(meta["source_shape"])
    theta = {k.split(".", 1)[1]: v.copy() for k, v in arrays.items() if k.startswith("theta.")}
    src = RepresentationBank(arrays["Us"].copy(), arrays["Vs"].copy(), arrays["Es"], arrays["Fs"])
    tgt = RepresentationBank(arrays["Ut"].copy(), arrays["Vt"].copy(), arrays["Et"], arrays["Ft"])
    width = src.K3 + src.K1
    hidden = tuple(meta["hidden"])
    act = meta.get("activation", "relu")
    rates, reg = meta["rates"], meta["reg"]
    adam = {
        name: AdamState(arrays[f"adam.{name}.m"].copy(), arrays[f"adam.{name}.v"].copy(), int(t))
        for name, t in meta.get("adam_steps", {}).items()
    }
    model.state_ = DualDomainState(
        src, tgt, InteractionFunction(meta["interaction"], theta),
        _classifier(arrays, "phi_u", width, hidden, act),
        _classifier(arrays, "phi_i", width, hidden, act),
        rates["eta_s"], rates["eta_t"], rates["eta_plus"], rates["eta_minus"],
        reg["reg_s"], reg["reg_t"], adam,
    )
    model.eval_rows_ = {k.split(".", 1)[1]: v for k, v in arrays.items() if k.startswith("eval_rows.")}
    _restore_history(model, meta)
    model.n_iter_ = len(model.history_)
    return model
