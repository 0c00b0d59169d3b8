"""Single-domain recommenders: ItemPop, MF, TCF and popularity-weighted TCF.

TCF concatenates trainable embeddings with frozen textual features; with the
inner-product interaction the score is ``U_u.V_i + E_u.F_i``.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
from sklearn.utils.validation import check_is_fitted

from .base import BaseRecommender, IterativeRecommender
from .tensor_core import bce_from_logits, scatter_rows
from .validation import check_features, check_interactions

INTERACTION_KINDS = ("inner_product", "weighted_inner_product")


def item_pop_scores(train_pairs, n_items: int) -> np.ndarray:
    """Training interaction count per item."""
    pairs = np.asarray(train_pairs, dtype=np.int64).reshape(-1, 2)
    return np.bincount(pairs[:, 1], minlength=n_items).astype(float)


class ItemPop(BaseRecommender):
    """Non-personalised popularity ranking."""

    def fit(self, R, y=None):
        R = check_interactions(R)
        self.shape_ = R.shape
        self.popularity_ = np.asarray(R.sum(axis=0)).ravel().astype(float)
        return self

    def score_matrix(self, users) -> np.ndarray:
        check_is_fitted(self)
        return np.tile(self.popularity_, (len(np.atleast_1d(users)), 1))


# --------------------------------------------------------------------------
# negative sampling and popularity weights


def sample_negatives(u: int, rho: int, R, rng: np.random.Generator) -> list[int]:
    """``rho`` distinct items with ``R[u, i] == 0``, uniform without replacement.

    Returns every candidate when fewer than ``rho`` exist.
    """
    if rho <= 0:
        return []
    R = sp.csr_matrix(R)
    seen = R.indices[R.indptr[u]: R.indptr[u + 1]]
    cand = np.setdiff1d(np.arange(R.shape[1]), seen)
    if len(cand) <= rho:
        return cand.tolist()
    return rng.choice(cand, size=rho, replace=False).tolist()


class NegativeSampler:
    """Draws unobserved items per user from a fixed training matrix."""

    def __init__(self, R):
        self.R = sp.csr_matrix(R)
        self.R.sort_indices()
        M, N = self.R.shape
        rows = np.repeat(np.arange(M, dtype=np.int64), np.diff(self.R.indptr))
        self._keys = rows * N + self.R.indices.astype(np.int64)
        self._deg = np.diff(self.R.indptr)

    def is_positive(self, users, items) -> np.ndarray:
        q = np.asarray(users, dtype=np.int64) * self.R.shape[1] + np.asarray(items, dtype=np.int64)
        if not len(self._keys):
            return np.zeros(len(q), dtype=bool)
        pos = np.searchsorted(self._keys, q).clip(max=len(self._keys) - 1)
        return self._keys[pos] == q

    def sample(self, users, rho: int, rng):
        """``rho`` negatives for every entry of ``users`` (vectorised rejection).

        Returns ``(neg_users, neg_items)``. Within one positive's draw the items
        are distinct; users short of candidates get all they have.
        """
        users = np.asarray(users, dtype=np.int64)
        N = self.R.shape[1]
        if rho <= 0 or users.size == 0:
            return np.zeros(0, dtype=np.int64), np.zeros(0, dtype=np.int64)
        short = N - self._deg[users] < rho
        cand = rng.integers(0, N, size=(users.size, rho))
        cand[short] = -1
        urep = np.repeat(users[:, None], rho, axis=1)
        todo = np.repeat(~short[:, None], rho, axis=1)
        while True:
            invalid = np.zeros_like(todo)
            invalid[todo] = self.is_positive(urep[todo], cand[todo])
            if rho > 1:
                order = np.argsort(cand, axis=1, kind="stable")
                srt = np.take_along_axis(cand, order, axis=1)
                dup_sorted = np.zeros(srt.shape, dtype=bool)
                dup_sorted[:, 1:] = srt[:, 1:] == srt[:, :-1]
                dup = np.zeros_like(dup_sorted)
                np.put_along_axis(dup, order, dup_sorted, axis=1)
                invalid |= dup & ~short[:, None]
            if not invalid.any():
                break
            cand[invalid] = rng.integers(0, N, size=int(invalid.sum()))
            todo = invalid
        for row in np.flatnonzero(short):
            picked = sample_negatives(int(users[row]), rho, self.R, rng)
            cand[row, : len(picked)] = picked
        mask = cand >= 0
        return urep[mask], cand[mask]


def sample_negative_batch(users, rho: int, R, rng):
    """One-off form of :meth:`NegativeSampler.sample`."""
    return NegativeSampler(R).sample(users, rho, rng)


def wtcf_weights(train_pairs, n_items: int) -> np.ndarray:
    """Negative-sample weight ``p_i / mean(p)`` per item (popularity ``p``)."""
    pop = item_pop_scores(train_pairs, n_items)
    mean = pop.mean()
    if mean == 0:
        return np.zeros(n_items)
    return pop / mean


def wtcf_weight(i: int, train_pairs, n_items: int) -> float:
    return float(wtcf_weights(train_pairs, n_items)[i])


# --------------------------------------------------------------------------
# representations and the interaction function


@dataclass
class RepresentationBank:
    """Embeddings ``U``, ``V`` and optional frozen textual features ``E``, ``F``."""

    U: np.ndarray
    V: np.ndarray
    E: np.ndarray | None = None
    F: np.ndarray | None = None

    def __post_init__(self):
        for X in (self.E, self.F):
            if X is not None:
                X.setflags(write=False)
        if (self.E is None) != (self.F is None):
            raise ValueError("textual features come in user/item pairs")
        if self.E is not None:
            check_features(self.E, self.U.shape[0], "E")
            check_features(self.F, self.V.shape[0], "F")
            if self.E.shape[1] != self.F.shape[1]:
                raise ValueError("user and item textual features differ in width")

    @property
    def K3(self) -> int:
        return self.U.shape[1]

    @property
    def K1(self) -> int:
        return 0 if self.E is None else self.E.shape[1]

    def user_repr(self, users) -> np.ndarray:
        if self.E is None:
            return self.U[users]
        return np.hstack([self.U[users], self.E[users]])

    def item_repr(self, items) -> np.ndarray:
        if self.F is None:
            return self.V[items]
        return np.hstack([self.V[items], self.F[items]])


@dataclass
class InteractionFunction:
    """Combines a user and an item representation into a logit.

    ``inner_product`` has no parameters. ``weighted_inner_product`` keeps one
    trainable weight per representation dimension. One instance may be shared
    by several banks; its ``params`` are then updated once for all of them.
    """

    kind: str = "inner_product"
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in INTERACTION_KINDS:
            raise ValueError(f"unknown interaction function {self.kind!r}")

    @classmethod
    def create(cls, kind: str, width: int) -> "InteractionFunction":
        if kind == "weighted_inner_product":
            return cls(kind, {"theta": np.ones(width)})
        return cls(kind)

    def _w(self, K3: int):
        if self.kind == "inner_product":
            return None, None
        w = self.params["theta"]
        return w[:K3], w[K3:]

    def logits(self, bank: RepresentationBank, users, items) -> np.ndarray:
        wu, we = self._w(bank.K3)
        Uu, Vi = bank.U[users], bank.V[items]
        z = np.sum(Uu * Vi if wu is None else wu * Uu * Vi, axis=1)
        if bank.E is not None:
            Eu, Fi = bank.E[users], bank.F[items]
            z = z + np.sum(Eu * Fi if we is None else we * Eu * Fi, axis=1)
        return z

    def backward(self, bank: RepresentationBank, users, items, dz):
        """Gradients of ``sum(dz * logits)`` for ``U`` rows, ``V`` rows and Theta."""
        wu, we = self._w(bank.K3)
        Uu, Vi = bank.U[users], bank.V[items]
        d = dz[:, None]
        if wu is None:
            return d * Vi, d * Uu, {}
        dtheta = [np.sum(d * Uu * Vi, axis=0)]
        if bank.E is not None:
            dtheta.append(np.sum(d * bank.E[users] * bank.F[items], axis=0))
        return d * wu * Vi, d * wu * Uu, {"theta": np.concatenate(dtheta)}

    def score_matrix(self, bank: RepresentationBank, users) -> np.ndarray:
        wu, we = self._w(bank.K3)
        Uu = bank.U[users] if wu is None else bank.U[users] * wu
        z = Uu @ bank.V.T
        if bank.E is not None:
            Eu = bank.E[users].astype(float)
            if we is not None:
                Eu = Eu * we
            z = z + Eu @ bank.F.T.astype(float)
        return z


def cf_loss_and_gradients(users, items, labels, weights, bank, f, reg):
    """Weighted cross-entropy plus ``reg * (|U_B|^2 + |V_B|^2)`` and its gradients.

    ``U_B``/``V_B`` are the distinct rows touched by the batch. Returns
    ``(loss, {"U": ..., "V": ..., **theta})``; ``E``/``F`` get no gradient.
    """
    users = np.asarray(users, dtype=np.int64)
    items = np.asarray(items, dtype=np.int64)
    z = f.logits(bank, users, items)
    loss_terms, dz = bce_from_logits(z, labels, weights)
    dU_rows, dV_rows, dtheta = f.backward(bank, users, items, dz)
    gU = scatter_rows(bank.U.shape[0], users, dU_rows)
    gV = scatter_rows(bank.V.shape[0], items, dV_rows)
    ub, ib = np.unique(users), np.unique(items)
    reg_term = reg * (np.sum(bank.U[ub] ** 2) + np.sum(bank.V[ib] ** 2))
    gU[ub] += 2.0 * reg * bank.U[ub]
    gV[ib] += 2.0 * reg * bank.V[ib]
    loss = float(np.sum(loss_terms) + reg_term)
    return loss, {"U": gU, "V": gV, **dtheta}


class MatrixFactorization(IterativeRecommender):
    """Latent-factor model ``sigmoid(U_u . V_i)`` trained with cross-entropy.

    ``n_negatives`` unobserved items are sampled per positive each iteration
    (0 gives positive-only training).
    """

    def __init__(
        self,
        n_factors: int = 16,
        learning_rate: float = 0.01,
        reg: float = 0.01,
        n_negatives: int = 1,
        weighting: str = "none",
        interaction: str = "inner_product",
        batch_size: int = 256,
        max_iter: int = 200,
        eval_k: int = 2,
        patience: int | None = None,
        dtype: str = "float64",
        random_state: int = 0,
        verbose: bool = False,
    ):
        self.n_factors = n_factors
        self.learning_rate = learning_rate
        self.reg = reg
        self.n_negatives = n_negatives
        self.weighting = weighting
        self.interaction = interaction
        self.batch_size = batch_size
        self.max_iter = max_iter
        self.eval_k = eval_k
        self.patience = patience
        self.dtype = dtype
        self.random_state = random_state
        self.verbose = verbose

    _uses_text = False

    def fit(self, R, R_val=None, user_features=None, item_features=None):
        R = check_interactions(R)
        self.shape_ = R.shape
        if self.weighting not in ("none", "wtcf"):
            raise ValueError(f"unknown weighting {self.weighting!r}")
        if self.max_iter < 1:
            raise ValueError("max_iter must be >= 1")
        if self._uses_text:
            if user_features is None or item_features is None:
                raise ValueError(f"{type(self).__name__} needs frozen textual features")
            self.user_features_ = check_features(user_features, R.shape[0], "user_features")
            self.item_features_ = check_features(item_features, R.shape[1], "item_features")
        else:
            self.user_features_ = self.item_features_ = None
        self._neg_weight = (
            wtcf_weights(np.stack(R.nonzero(), axis=1), R.shape[1])
            if self.weighting == "wtcf" else None
        )
        self._fit_loop(R, R_val)
        return self

    def _init_params(self, rng) -> dict:
        M, N = self.shape_
        k = int(self.n_factors)
        dt = np.dtype(self.dtype)
        params = {
            "U": rng.normal(0.0, 0.01, size=(M, k)).astype(dt),
            "V": rng.normal(0.0, 0.01, size=(N, k)).astype(dt),
        }
        width = k + (0 if self.user_features_ is None else self.user_features_.shape[1])
        self.interaction_ = InteractionFunction.create(self.interaction, width)
        params.update(self.interaction_.params)
        return params

    def _on_params_updated(self):
        self.interaction_.params = {k: self.params_[k] for k in self.interaction_.params}
        self.bank_ = RepresentationBank(
            self.params_["U"], self.params_["V"], self.user_features_, self.item_features_
        )

    def _sample_weights(self, users, items, labels):
        if self._neg_weight is None:
            return np.ones(len(users))
        return np.where(labels > 0, 1.0, self._neg_weight[items])

    def _loss_and_grads(self, users, items, labels, weights):
        if not hasattr(self, "bank_") or self.bank_.U is not self.params_["U"]:
            self._on_params_updated()
        return cf_loss_and_gradients(
            users, items, labels, weights, self.bank_, self.interaction_, self.reg
        )

    def score_matrix(self, users) -> np.ndarray:
        check_is_fitted(self)
        return self.interaction_.score_matrix(self.bank_, np.atleast_1d(users))


class TextCF(MatrixFactorization):
    """MF over ``[U, E]`` / ``[V, F]`` with frozen textual features ``E``, ``F``.

    ``weighting="wtcf"`` weights each sampled negative item by its relative
    training popularity.
    """

    _uses_text = True
