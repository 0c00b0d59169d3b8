"""Dual-domain adversarial training of two TCF models (TDAR).

A dense source domain (trained with sampled negatives) and a sparse target
domain (positives only) share one interaction function. Per side, a domain
classifier reads ``[embedding, textual feature]`` rows and learns to tell the
domains apart, while both domains' embeddings are pushed to fool it. The
frozen textual features act as anchors: a target user can only become
indistinguishable from source users by moving next to source users with
similar text.

Update rule, from gradients taken at the pre-step parameters::

    Theta   <- Theta   - grad(eta_s Ls + eta_t Lt)
    Us / Vs <- Us / Vs - grad(eta_s Ls - eta_minus Lu / Li)
    Ut / Vt <- Ut / Vt - grad(eta_t Lt - eta_minus Lu / Li)
    Phi     <- Phi     - eta_plus grad(Lu / Li)

With ``optimizer="sgd"`` these are applied literally. With ``"adam"`` every
group runs its own Adam on the combined gradient divided by the group's
leading rate (``eta_s``/``eta_t``, or ``eta_minus`` when that is zero), with
that rate as step size, so ``eta_minus = 0`` reproduces plain TCF steps.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .base import TrainingDivergedError
from .cf_models import (
    InteractionFunction,
    NegativeSampler,
    RepresentationBank,
    cf_loss_and_gradients,
)
from .evaluation import DEFAULT_K, MetricsReport, evaluate
from .seeding import make_rng
from .tensor_core import AdamState, adam_step, bce_from_logits, scatter_rows, sigmoid
from .validation import check_features, check_interactions, check_pairs, to_pairs

logger = logging.getLogger(__name__)

STAGES = ("classifier", "align", "full")


class UnbalancedBatchError(ValueError):
    pass


class DomainClassifier:
    """Fully-connected net ``in -> hidden... -> 1`` with ReLU and a sigmoid output.

    Weights are stored as ``W1, b1, ..., W{L}, b{L}`` in :attr:`params`.
    """

    def __init__(self, in_features: int, hidden=(64, 64, 64), rng=None, weight_scale=0.1,
                 activation="relu"):
        if activation != "relu":
            raise ValueError("only the ReLU activation is supported")
        self.in_features = int(in_features)
        self.hidden = tuple(int(h) for h in hidden)
        self.activation = activation
        rng = rng if rng is not None else np.random.default_rng(0)
        widths = (self.in_features, *self.hidden, 1)
        self.params: dict[str, np.ndarray] = {}
        for j, (a, b) in enumerate(zip(widths[:-1], widths[1:]), 1):
            self.params[f"W{j}"] = rng.normal(0.0, weight_scale, size=(a, b))
            self.params[f"b{j}"] = np.zeros(b)

    @property
    def n_layers(self) -> int:
        return len(self.hidden) + 1

    def copy(self) -> "DomainClassifier":
        new = DomainClassifier.__new__(DomainClassifier)
        new.in_features, new.hidden, new.activation = self.in_features, self.hidden, self.activation
        new.params = {k: v.copy() for k, v in self.params.items()}
        return new

    def logits(self, X):
        X = np.asarray(X, dtype=float)
        if X.ndim != 2 or X.shape[1] != self.in_features:
            raise ValueError(
                f"classifier expects rows of width {self.in_features}, got shape {X.shape}"
            )
        acts = [X]
        h = X
        for j in range(1, self.n_layers):
            h = np.maximum(h @ self.params[f"W{j}"] + self.params[f"b{j}"], 0.0)
            acts.append(h)
        L = self.n_layers
        z = (h @ self.params[f"W{L}"] + self.params[f"b{L}"])[:, 0]
        return z, acts

    def forward(self, X) -> np.ndarray:
        """Domain probability (1 = target) per row."""
        return sigmoid(self.logits(X)[0])

    def backward(self, acts, dz):
        """Gradients of ``sum(dz * logits)`` w.r.t. the parameters and the input."""
        grads = {}
        L = self.n_layers
        delta = np.asarray(dz, dtype=float)[:, None]
        for j in range(L, 0, -1):
            grads[f"W{j}"] = acts[j - 1].T @ delta
            grads[f"b{j}"] = delta.sum(axis=0)
            delta = delta @ self.params[f"W{j}"].T
            if j > 1:
                delta = delta * (acts[j - 1] > 0)
        return grads, delta

    def loss_and_grads(self, X, labels):
        """Summed cross-entropy, parameter gradients and input gradient."""
        z, acts = self.logits(X)
        loss, dz = bce_from_logits(z, labels)
        grads, dX = self.backward(acts, dz)
        return float(np.sum(loss)), grads, dX


def classifier_forward(x, clf: DomainClassifier) -> float:
    return float(clf.forward(np.atleast_2d(x))[0])


def classifier_backward(x, clf: DomainClassifier, label):
    """``(param_grads, input_grad)`` of the cross-entropy at one or more rows."""
    X = np.atleast_2d(np.asarray(x, dtype=float))
    _, grads, dX = clf.loss_and_grads(X, np.broadcast_to(np.asarray(label, float), (len(X),)))
    return grads, (dX[0] if np.ndim(x) == 1 else dX)


def domain_loss(source_rows, target_rows, clf: DomainClassifier):
    """Classification loss with target rows labelled 1 and source rows 0.

    Returns ``(loss, param_grads, d_source_rows, d_target_rows)``.
    """
    Xs = np.atleast_2d(np.asarray(source_rows, dtype=float))
    Xt = np.atleast_2d(np.asarray(target_rows, dtype=float))
    if Xs.size == 0 or Xt.size == 0:
        raise UnbalancedBatchError("unbalanced adversarial batch")
    X = np.vstack([Xs, Xt])
    labels = np.concatenate([np.zeros(len(Xs)), np.ones(len(Xt))])
    loss, grads, dX = clf.loss_and_grads(X, labels)
    return loss, grads, dX[: len(Xs)], dX[len(Xs):]


def classifier_accuracy(clf: DomainClassifier, source_rows, target_rows) -> float:
    """Fraction of rows whose thresholded prediction matches the domain label."""
    Xs = np.atleast_2d(np.asarray(source_rows, dtype=float))
    Xt = np.atleast_2d(np.asarray(target_rows, dtype=float))
    if Xs.size == 0 and Xt.size == 0:
        raise ValueError("no rows to evaluate")
    correct = 0
    if Xs.size:
        correct += int(np.sum(clf.forward(Xs) <= 0.5))
    if Xt.size:
        correct += int(np.sum(clf.forward(Xt) > 0.5))
    return correct / (len(Xs) * (Xs.size > 0) + len(Xt) * (Xt.size > 0))


# --------------------------------------------------------------------------
# state and one update step


@dataclass
class DualDomainState:
    source: RepresentationBank
    target: RepresentationBank
    interaction: InteractionFunction
    user_clf: DomainClassifier
    item_clf: DomainClassifier
    eta_s: float
    eta_t: float
    eta_plus: float
    eta_minus: float
    reg_s: float
    reg_t: float
    adam: dict = field(default_factory=dict)

    def __post_init__(self):
        width = self.source.K3 + self.source.K1
        if self.target.K3 + self.target.K1 != width or self.source.K1 != self.target.K1:
            raise ValueError("source and target representations must have equal widths")
        for clf in (self.user_clf, self.item_clf):
            if clf.in_features != width:
                raise ValueError("classifier input width must equal K1 + K3")

    def groups(self) -> dict[str, np.ndarray]:
        out = {"Us": self.source.U, "Vs": self.source.V, "Ut": self.target.U, "Vt": self.target.V}
        out.update({f"theta.{k}": v for k, v in self.interaction.params.items()})
        out.update({f"phi_u.{k}": v for k, v in self.user_clf.params.items()})
        out.update({f"phi_i.{k}": v for k, v in self.item_clf.params.items()})
        return out

    def copy(self) -> "DualDomainState":
        def bank(b):
            return RepresentationBank(b.U.copy(), b.V.copy(), b.E, b.F)

        return DualDomainState(
            bank(self.source), bank(self.target),
            InteractionFunction(self.interaction.kind,
                                {k: v.copy() for k, v in self.interaction.params.items()}),
            self.user_clf.copy(), self.item_clf.copy(),
            self.eta_s, self.eta_t, self.eta_plus, self.eta_minus, self.reg_s, self.reg_t,
            {k: AdamState(s.m.copy(), s.v.copy(), s.t, s.beta1, s.beta2, s.epsilon)
             for k, s in self.adam.items()},
        )


@dataclass
class TDARBatch:
    """Inputs of one update step.

    Source pairs carry 0/1 labels; target pairs are positives only. The four
    row arrays index entities whose representations feed the classifiers.
    """

    source_users: np.ndarray
    source_items: np.ndarray
    source_labels: np.ndarray
    target_users: np.ndarray
    target_items: np.ndarray
    user_rows_source: np.ndarray
    user_rows_target: np.ndarray
    item_rows_source: np.ndarray
    item_rows_target: np.ndarray
    target_labels: np.ndarray | None = None


def _validate_target(batch: TDARBatch):
    if batch.target_labels is not None and np.any(np.asarray(batch.target_labels) != 1):
        raise ValueError("target batch contains negative labels; target supervision is positive-only")


def prediction_losses(batch: TDARBatch, state: DualDomainState, with_grads: bool = False):
    """Source loss (full cross-entropy) and target loss (positives only).

    Returns ``(Ls, Lt)``, or ``((Ls, Lt), (grads_s, grads_t))`` with ``with_grads``.
    """
    _validate_target(batch)
    ls, gs = cf_loss_and_gradients(
        batch.source_users, batch.source_items, batch.source_labels,
        np.ones(len(batch.source_users)), state.source, state.interaction, state.reg_s,
    )
    n_t = len(batch.target_users)
    lt, gt = cf_loss_and_gradients(
        batch.target_users, batch.target_items, np.ones(n_t), np.ones(n_t),
        state.target, state.interaction, state.reg_t,
    )
    if with_grads:
        return (ls, lt), (gs, gt)
    return ls, lt


def adversarial_terms(batch: TDARBatch, state: DualDomainState):
    """Domain losses for users and items with gradients for Phi and embeddings."""
    out = {}
    K3 = state.source.K3
    for side, clf, rs, rt, gs_name, gt_name in (
        ("user", state.user_clf, batch.user_rows_source, batch.user_rows_target, "Us", "Ut"),
        ("item", state.item_clf, batch.item_rows_source, batch.item_rows_target, "Vs", "Vt"),
    ):
        if side == "user":
            Xs, Xt = state.source.user_repr(rs), state.target.user_repr(rt)
            ns, nt = state.source.U.shape[0], state.target.U.shape[0]
        else:
            Xs, Xt = state.source.item_repr(rs), state.target.item_repr(rt)
            ns, nt = state.source.V.shape[0], state.target.V.shape[0]
        loss, grads, dXs, dXt = domain_loss(Xs, Xt, clf)
        out[side] = {
            "loss": loss,
            "phi": grads,
            gs_name: scatter_rows(ns, np.asarray(rs), dXs[:, :K3]),
            gt_name: scatter_rows(nt, np.asarray(rt), dXt[:, :K3]),
        }
    return out


def _leading_rate(primary: float, secondary: float) -> float:
    return primary if primary > 0 else secondary


def tdar_update_step(state: DualDomainState, batch: TDARBatch, optimizer: str = "adam") -> dict:
    """Apply one simultaneous update of Theta, both banks and both classifiers.

    Mutates ``state`` and returns the pre-step losses.
    """
    if optimizer not in ("adam", "sgd"):
        raise ValueError(f"unknown optimizer {optimizer!r}")
    es, et, ep, em = state.eta_s, state.eta_t, state.eta_plus, state.eta_minus
    zero = {"U": 0.0, "V": 0.0}
    if es > 0 or et > 0:
        (ls, lt), (gs, gt) = prediction_losses(batch, state, with_grads=True)
    else:
        _validate_target(batch)
        ls = lt = float("nan")
        gs, gt = dict(zero), dict(zero)
    need_adv = em > 0 or ep > 0
    adv = adversarial_terms(batch, state) if need_adv else None

    updates: dict[str, tuple[np.ndarray, object, float]] = {}

    def combined(pred_grad, eta, adv_grad):
        return eta * pred_grad - em * adv_grad

    if adv is not None:
        au, ai = adv["user"], adv["item"]
    else:
        au = {"Us": 0.0, "Ut": 0.0}
        ai = {"Vs": 0.0, "Vt": 0.0}
    updates["Us"] = (state.source.U, combined(gs["U"], es, au["Us"]), _leading_rate(es, em))
    updates["Vs"] = (state.source.V, combined(gs["V"], es, ai["Vs"]), _leading_rate(es, em))
    updates["Ut"] = (state.target.U, combined(gt["U"], et, au["Ut"]), _leading_rate(et, em))
    updates["Vt"] = (state.target.V, combined(gt["V"], et, ai["Vt"]), _leading_rate(et, em))
    for k, p in state.interaction.params.items():
        g = es * gs.get(k, 0.0) + et * gt.get(k, 0.0)
        updates[f"theta.{k}"] = (p, g, _leading_rate(es, et))
    if adv is not None:
        for prefix, clf, terms in (("phi_u", state.user_clf, au), ("phi_i", state.item_clf, ai)):
            for k, p in clf.params.items():
                updates[f"{prefix}.{k}"] = (p, ep * terms["phi"][k], ep)

    for name, (param, grad, rate) in updates.items():
        if rate <= 0:
            continue
        grad = np.broadcast_to(np.asarray(grad, dtype=float), param.shape)
        if optimizer == "sgd":
            param -= grad
        else:
            st = state.adam.get(name)
            if st is None:
                st = state.adam[name] = AdamState.like(param)
            adam_step(param, grad / rate, st, rate)
        if not np.all(np.isfinite(param)):
            raise TrainingDivergedError(f"parameter group {name} became non-finite")
    return {
        "Ls": ls,
        "Lt": lt,
        "Lu": adv["user"]["loss"] if adv else float("nan"),
        "Li": adv["item"]["loss"] if adv else float("nan"),
    }


# --------------------------------------------------------------------------
# estimator


@dataclass
class DomainData:
    """Training matrix, validation pairs and frozen features of one domain."""

    train: sp.csr_matrix
    user_features: np.ndarray
    item_features: np.ndarray
    validation: np.ndarray | None = None

    def __post_init__(self):
        self.train = check_interactions(self.train)
        M, N = self.train.shape
        self.user_features = check_features(self.user_features, M, "user_features")
        self.item_features = check_features(self.item_features, N, "item_features")
        if self.validation is not None:
            self.validation = check_pairs(self.validation, (M, N))

    @property
    def shape(self):
        return self.train.shape

    @classmethod
    def from_bundle(cls, bundle, features) -> "DomainData":
        return cls(bundle.matrix("train"), features.E, features.F, bundle.validation)


def _anchored(features: np.ndarray) -> np.ndarray:
    rows = np.flatnonzero(np.any(features != 0, axis=1))
    return rows if rows.size else np.arange(features.shape[0])


class TDAR(BaseEstimator):
    """Text-enhanced domain adaptation recommender.

    ``fit(source, target, source_bank)`` trains on two :class:`DomainData`;
    scoring methods refer to the target domain. ``stage`` selects the tuning
    regime: ``classifier`` trains only the classifiers, ``align`` adds the
    adversarial embedding updates, ``full`` also applies both prediction losses.
    """

    def __init__(
        self,
        n_factors: int = 16,
        eta_s: float = 0.01,
        eta_t: float = 0.01,
        eta_plus: float = 0.001,
        eta_minus: float = 0.001,
        reg_s: float = 0.01,
        reg_t: float = 0.01,
        n_negatives: int = 1,
        batch_size: int = 256,
        adv_batch_size: int = 64,
        hidden=(64, 64, 64),
        interaction: str = "inner_product",
        stage: str = "full",
        optimizer: str = "adam",
        max_iter: int = 200,
        eval_k: int = 2,
        patience: int | None = None,
        n_eval_rows: int = 200,
        random_state: int = 0,
        verbose: bool = False,
    ):
        self.n_factors = n_factors
        self.eta_s = eta_s
        self.eta_t = eta_t
        self.eta_plus = eta_plus
        self.eta_minus = eta_minus
        self.reg_s = reg_s
        self.reg_t = reg_t
        self.n_negatives = n_negatives
        self.batch_size = batch_size
        self.adv_batch_size = adv_batch_size
        self.hidden = hidden
        self.interaction = interaction
        self.stage = stage
        self.optimizer = optimizer
        self.max_iter = max_iter
        self.eval_k = eval_k
        self.patience = patience
        self.n_eval_rows = n_eval_rows
        self.random_state = random_state
        self.verbose = verbose

    def _rates(self):
        es, et, ep, em = self.eta_s, self.eta_t, self.eta_plus, self.eta_minus
        if self.stage == "classifier":
            es = et = em = 0.0
        elif self.stage == "align":
            es = et = 0.0
        elif self.stage != "full":
            raise ValueError(f"stage must be one of {STAGES}")
        for name, r in (("eta_s", es), ("eta_t", et), ("eta_plus", ep), ("eta_minus", em)):
            if r < 0:
                raise ValueError(f"{name} must be non-negative")
        return es, et, ep, em

    def _init_state(self, source: DomainData, target: DomainData, source_bank, interaction):
        seed = int(self.random_state)
        k = int(self.n_factors)
        Ms, Ns = source.shape
        Mt, Nt = target.shape
        if source.user_features.shape[1] != target.user_features.shape[1]:
            raise ValueError("textual feature widths differ between domains")
        if source_bank is not None:
            if source_bank.U.shape != (Ms, k) or source_bank.V.shape != (Ns, k):
                raise ValueError(
                    f"pretrained source bank has shapes {source_bank.U.shape}/{source_bank.V.shape}, "
                    f"expected {(Ms, k)}/{(Ns, k)}"
                )
            Us, Vs = source_bank.U.astype(float).copy(), source_bank.V.astype(float).copy()
        else:
            rng = make_rng(seed, "init", "source")
            Us, Vs = rng.normal(0, 0.01, (Ms, k)), rng.normal(0, 0.01, (Ns, k))
        rng = make_rng(seed, "init", "target")
        Ut, Vt = rng.normal(0, 0.01, (Mt, k)), rng.normal(0, 0.01, (Nt, k))
        width = k + source.user_features.shape[1]
        if interaction is None:
            interaction = InteractionFunction.create(self.interaction, width)
        es, et, ep, em = self._rates()
        return DualDomainState(
            RepresentationBank(Us, Vs, source.user_features, source.item_features),
            RepresentationBank(Ut, Vt, target.user_features, target.item_features),
            interaction,
            DomainClassifier(width, self.hidden, make_rng(seed, "init", "phi_u")),
            DomainClassifier(width, self.hidden, make_rng(seed, "init", "phi_i")),
            es, et, ep, em, float(self.reg_s), float(self.reg_t),
        )

    def fit(self, source: DomainData, target: DomainData, source_bank=None, interaction=None,
            init_state: DualDomainState | None = None):
        es, et, ep, em = self._rates()
        if es > 0 and self.n_negatives < 1:
            raise ValueError("the source domain needs sampled negatives (n_negatives >= 1)")
        seed = int(self.random_state)
        self.shape_ = target.shape
        self.source_shape_ = source.shape
        state = init_state if init_state is not None else self._init_state(
            source, target, source_bank, interaction)
        state.eta_s, state.eta_t, state.eta_plus, state.eta_minus = es, et, ep, em
        self.state_ = state

        src_pos = to_pairs(source.train)
        tgt_pos = to_pairs(target.train)
        if len(src_pos) == 0 or len(tgt_pos) == 0:
            raise ValueError("both domains need training pairs")
        sampler = NegativeSampler(source.train)
        anchors = {
            "us": _anchored(source.user_features), "ut": _anchored(target.user_features),
            "is": _anchored(source.item_features), "it": _anchored(target.item_features),
        }
        erng = make_rng(seed, "eval_rows")
        eval_rows = {}
        for key, rows in anchors.items():
            n = min(int(self.n_eval_rows), len(rows))
            eval_rows[key] = np.sort(erng.choice(rows, size=n, replace=False))

        B = int(self.batch_size)
        nadv = int(self.adv_batch_size)
        self.history_ = []
        self.best_iteration_, self.best_score_ = None, None
        best_state = None
        best = -np.inf
        tgt_cursor, tgt_perm, tgt_round = 0, None, 0
        for it in range(int(self.max_iter)):
            rng = make_rng(seed, "epoch", it)
            perm = rng.permutation(len(src_pos))
            sums = {"Ls": 0.0, "Lt": 0.0, "Lu": 0.0, "Li": 0.0}
            for start in range(0, len(src_pos), B):
                sp_b = src_pos[perm[start: start + B]]
                su, si = sp_b[:, 0], sp_b[:, 1]
                nu, ni = sampler.sample(su, int(self.n_negatives), rng)
                take = []
                while len(take) < len(sp_b):
                    if tgt_perm is None or tgt_cursor >= len(tgt_perm):
                        tgt_perm = make_rng(seed, "target_order", tgt_round).permutation(len(tgt_pos))
                        tgt_round += 1
                        tgt_cursor = 0
                    n = min(len(sp_b) - len(take), len(tgt_perm) - tgt_cursor)
                    take.extend(tgt_perm[tgt_cursor: tgt_cursor + n])
                    tgt_cursor += n
                tb = tgt_pos[np.array(take)]
                batch = TDARBatch(
                    np.concatenate([su, nu]), np.concatenate([si, ni]),
                    np.concatenate([np.ones(len(su)), np.zeros(len(nu))]),
                    tb[:, 0], tb[:, 1],
                    rng.choice(anchors["us"], nadv), rng.choice(anchors["ut"], nadv),
                    rng.choice(anchors["is"], nadv), rng.choice(anchors["it"], nadv),
                )
                info = tdar_update_step(state, batch, self.optimizer)
                for k in sums:
                    sums[k] += info[k]
            record = {"iteration": it + 1, **sums, **self._accuracies(eval_rows)}
            if target.validation is not None and len(target.validation) and et > 0:
                score = self.evaluate(target.validation, exclude=tgt_pos,
                                      k_list=(self.eval_k,)).f1(self.eval_k)
                record[f"val_f1@{self.eval_k}"] = score
                if score > best:
                    best, best_state, self.best_iteration_ = score, state.copy(), it + 1
                    self.best_score_ = score
                elif self.patience is not None and it + 1 - self.best_iteration_ >= self.patience:
                    self.history_.append(record)
                    break
            self.history_.append(record)
            if self.verbose:
                logger.info("TDAR %s", record)
        if best_state is not None:
            self.state_ = best_state
        self.n_iter_ = len(self.history_)
        self.eval_rows_ = eval_rows
        return self

    def _accuracies(self, rows) -> dict:
        s = self.state_
        ua = classifier_accuracy(s.user_clf, s.source.user_repr(rows["us"]), s.target.user_repr(rows["ut"]))
        ia = classifier_accuracy(s.item_clf, s.source.item_repr(rows["is"]), s.target.item_repr(rows["it"]))
        return {"user_acc": ua, "item_acc": ia}

    def classifier_accuracy(self, rows=None) -> dict:
        check_is_fitted(self)
        return self._accuracies(self.eval_rows_ if rows is None else rows)

    def score_matrix(self, users) -> np.ndarray:
        check_is_fitted(self)
        return self.state_.interaction.score_matrix(self.state_.target, np.atleast_1d(users))

    def score_matrix_source(self, users) -> np.ndarray:
        check_is_fitted(self)
        return self.state_.interaction.score_matrix(self.state_.source, np.atleast_1d(users))

    def predict(self, X) -> np.ndarray:
        check_is_fitted(self)
        X = check_pairs(X, self.shape_)
        z = self.state_.interaction.logits(self.state_.target, X[:, 0], X[:, 1])
        return sigmoid(z)

    def evaluate(self, relevant, exclude=None, k_list=DEFAULT_K,
                 candidate_policy="exclude_train") -> MetricsReport:
        M, N = self.shape_
        return evaluate(self.score_matrix, relevant, M, N, exclude_pairs=exclude,
                        k_list=k_list, candidate_policy=candidate_policy)
