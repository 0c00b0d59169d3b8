"""Text memory network: per-entity attention over review words.

Every user, item and word owns a key vector. A user's attention over the
words of its reviews is the softmax of ``P_u . T_w``; the user's textual
feature is the attention-weighted mean of the pretrained word vectors ``S_w``
(items likewise with ``Q``). Preferences are predicted as
``sigmoid(E_u . F_i)`` and the keys are fitted with cross-entropy.

Because every feature is a convex combination of rows of one shared word
table, features of different domains live in the same semantic space.
"""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
from sklearn.utils.validation import check_is_fitted

from .base import IterativeRecommender
from .serialization import read_features, write_features
from .tensor_core import bce_from_logits, scatter_rows, segment_softmax, sigmoid, stable_softmax
from .validation import check_features, check_interactions

MAX_WORDS = 10_000


class ReviewSets:
    """Ragged per-entity word-id sets stored CSR style.

    Duplicate ids are collapsed and each set is capped at ``max_words`` ids
    (the smallest ids are kept).
    """

    def __init__(self, word_lists, max_words: int = MAX_WORDS):
        lists = [np.unique(np.asarray(w, dtype=np.int64))[:max_words] for w in word_lists]
        lengths = np.array([len(w) for w in lists], dtype=np.int64)
        self.indptr = np.concatenate([[0], np.cumsum(lengths)]).astype(np.int64)
        self.indices = (
            np.concatenate(lists).astype(np.int64) if lists and lengths.sum() else np.zeros(0, np.int64)
        )

    def __len__(self) -> int:
        return len(self.indptr) - 1

    def words(self, entity: int) -> np.ndarray:
        return self.indices[self.indptr[entity]: self.indptr[entity + 1]]

    def lengths(self, entities=None) -> np.ndarray:
        lens = np.diff(self.indptr)
        return lens if entities is None else lens[entities]

    def gather(self, entities: np.ndarray):
        """Flattened words of ``entities`` with owner positions and segment starts.

        Entities with empty sets contribute nothing; ``starts`` has one entry
        per entity with a non-empty set, listed in ``nonempty``.
        """
        entities = np.asarray(entities, dtype=np.int64)
        lens = self.lengths(entities)
        nonempty = np.flatnonzero(lens > 0)
        lens_ne = lens[nonempty]
        total = int(lens_ne.sum())
        starts = np.concatenate([[0], np.cumsum(lens_ne)[:-1]]).astype(np.int64)
        offsets = np.repeat(self.indptr[entities[nonempty]] - starts, lens_ne)
        words = self.indices[offsets + np.arange(total)]
        owner = np.repeat(nonempty, lens_ne)
        return words, owner, starts, nonempty


@dataclass
class MemoryKeys:
    """Trainable keys for users ``P`` (M x K2), items ``Q`` (N x K2), words ``T`` (H x K2)."""

    P: np.ndarray
    Q: np.ndarray
    T: np.ndarray

    @property
    def K2(self) -> int:
        return self.P.shape[1]


@dataclass
class TextualFeatures:
    """Frozen user features ``E`` (M x K1) and item features ``F`` (N x K1)."""

    E: np.ndarray
    F: np.ndarray
    frozen: bool = True

    def __post_init__(self):
        self.E = np.array(self.E, dtype=np.float32, copy=True)
        self.F = np.array(self.F, dtype=np.float32, copy=True)
        if self.E.shape[1] != self.F.shape[1]:
            raise ValueError("user and item features must share their width")
        if self.frozen:
            self.E.setflags(write=False)
            self.F.setflags(write=False)

    @property
    def K1(self) -> int:
        return self.E.shape[1]


def export_features(features: TextualFeatures, path) -> Path:
    write_features(path, features.E, features.F)
    return Path(path)


def import_features(path, n_users=None, n_items=None, dim=None) -> TextualFeatures:
    """Load a feature file; raise ``ValueError`` if it does not fit the dataset."""
    E, F = read_features(path)
    if n_users is not None and E.shape[0] != n_users:
        raise ValueError(f"feature file has {E.shape[0]} users, dataset has {n_users}")
    if n_items is not None and F.shape[0] != n_items:
        raise ValueError(f"feature file has {F.shape[0]} items, dataset has {n_items}")
    if dim is not None and E.shape[1] != dim:
        raise ValueError(f"feature width {E.shape[1]} differs from expected {dim}")
    return TextualFeatures(E, F, frozen=True)


# --------------------------------------------------------------------------
# forward / backward


def _attend(keys_rows: np.ndarray, T: np.ndarray, S: np.ndarray, reviews: ReviewSets, entities):
    words, owner, starts, nonempty = reviews.gather(entities)
    logits = np.sum(keys_rows[owner] * T[words], axis=1)
    a = segment_softmax(logits, starts)
    feats = np.zeros((len(entities), S.shape[1]))
    if len(words):
        feats[nonempty] = np.add.reduceat(a[:, None] * S[words], starts, axis=0)
    return feats, (words, owner, starts, nonempty, a)


def _attend_backward(dfeat, keys_rows, T, S, cache):
    """Gradients w.r.t. the entity key rows and the touched word keys."""
    words, owner, starts, nonempty, a = cache
    dkeys = np.zeros_like(keys_rows, dtype=float)
    if not len(words):
        return dkeys, words, np.zeros((0, T.shape[1]))
    c = np.sum(S[words] * dfeat[owner], axis=1)
    abar = np.add.reduceat(a * c, starts)
    lens = np.diff(np.append(starts, len(words)))
    de = a * (c - np.repeat(abar, lens))
    dkeys[nonempty] = np.add.reduceat(de[:, None] * T[words], starts, axis=0)
    return dkeys, words, de[:, None] * keys_rows[owner]


def attention_weights(side: str, entity: int, keys: MemoryKeys, reviews: ReviewSets) -> dict[int, float]:
    """Softmax attention of ``entity`` over its review words (word id -> weight)."""
    K = _side_keys(side, keys)
    words = reviews.words(entity)
    if not len(words):
        return {}
    a = stable_softmax(keys.T[words] @ K[entity])
    return {int(w): float(x) for w, x in zip(words, a)}


def textual_feature(side: str, entity: int, keys: MemoryKeys, reviews: ReviewSets, S) -> np.ndarray:
    K = _side_keys(side, keys)
    feats, _ = _attend(K[[entity]], keys.T, np.asarray(S, dtype=float), reviews, np.array([entity]))
    return feats[0]


def _side_keys(side: str, keys: MemoryKeys) -> np.ndarray:
    if side == "user":
        return keys.P
    if side == "item":
        return keys.Q
    raise ValueError(f"side must be 'user' or 'item', got {side!r}")


def materialize(keys: MemoryKeys, user_reviews: ReviewSets, item_reviews: ReviewSets, S,
                chunk: int = 4096) -> tuple[np.ndarray, np.ndarray]:
    """Textual features of every user and item under the current keys."""
    S = np.asarray(S, dtype=float)
    out = []
    for K, rev in ((keys.P, user_reviews), (keys.Q, item_reviews)):
        n = K.shape[0]
        parts = []
        for start in range(0, n, chunk):
            ents = np.arange(start, min(n, start + chunk))
            parts.append(_attend(K[ents], keys.T, S, rev, ents)[0])
        out.append(np.vstack(parts) if parts else np.zeros((0, S.shape[1])))
    return out[0], out[1]


def tmn_predict(u: int, i: int, keys: MemoryKeys, user_reviews, item_reviews, S) -> float:
    Eu = textual_feature("user", u, keys, user_reviews, S)
    Fi = textual_feature("item", i, keys, item_reviews, S)
    return sigmoid(float(Eu @ Fi))


def tmn_loss_and_gradients(users, items, labels, keys: MemoryKeys, user_reviews: ReviewSets,
                           item_reviews: ReviewSets, S, reg: float, weights=None):
    """Batch cross-entropy plus ``reg`` times the squared norms of touched key rows.

    Touched rows are the batch's users (``P``), items (``Q``) and every word in
    their review sets (``T``). Returns ``(loss, {"P", "Q", "T"})``.
    """
    users = np.asarray(users, dtype=np.int64)
    items = np.asarray(items, dtype=np.int64)
    labels = np.asarray(labels, dtype=float)
    weights = np.ones(len(users)) if weights is None else np.asarray(weights, dtype=float)
    S = np.asarray(S, dtype=float)
    P, Q, T = keys.P, keys.Q, keys.T
    gP, gQ, gT = np.zeros_like(P), np.zeros_like(Q), np.zeros_like(T)
    if len(users) == 0:
        return 0.0, {"P": gP, "Q": gQ, "T": gT}
    ub, uinv = np.unique(users, return_inverse=True)
    ib, iinv = np.unique(items, return_inverse=True)
    E, ucache = _attend(P[ub], T, S, user_reviews, ub)
    F, icache = _attend(Q[ib], T, S, item_reviews, ib)
    z = np.sum(E[uinv] * F[iinv], axis=1)
    loss_terms, dz = bce_from_logits(z, labels, weights)
    dE = scatter_rows(len(ub), uinv, dz[:, None] * F[iinv])
    dF = scatter_rows(len(ib), iinv, dz[:, None] * E[uinv])
    dPu, uw, dTu = _attend_backward(dE, P[ub], T, S, ucache)
    dQi, iw, dTi = _attend_backward(dF, Q[ib], T, S, icache)
    gP[ub] = dPu
    gQ[ib] = dQi
    np.add.at(gT, uw, dTu)
    np.add.at(gT, iw, dTi)
    wb = np.unique(np.concatenate([uw, iw]))
    reg_term = reg * (np.sum(P[ub] ** 2) + np.sum(Q[ib] ** 2) + np.sum(T[wb] ** 2))
    gP[ub] += 2.0 * reg * P[ub]
    gQ[ib] += 2.0 * reg * Q[ib]
    gT[wb] += 2.0 * reg * T[wb]
    return float(np.sum(loss_terms) + reg_term), {"P": gP, "Q": gQ, "T": gT}


def tmn_loss(users, items, labels, keys, user_reviews, item_reviews, S, reg, weights=None) -> float:
    return tmn_loss_and_gradients(users, items, labels, keys, user_reviews, item_reviews, S, reg, weights)[0]


def tmn_gradients(users, items, labels, keys, user_reviews, item_reviews, S, reg, weights=None) -> dict:
    return tmn_loss_and_gradients(users, items, labels, keys, user_reviews, item_reviews, S, reg, weights)[1]


class TextMemoryNetwork(IterativeRecommender):
    """Learns word attention for users and items; ``transform`` yields ``(E, F)``.

    Parameters mirror :class:`~xdr.cf_models.MatrixFactorization`;
    ``n_keys`` is the key width K2.
    """

    def __init__(
        self,
        n_keys: int = 16,
        learning_rate: float = 0.01,
        reg: float = 0.01,
        n_negatives: int = 1,
        batch_size: int = 256,
        max_iter: int = 200,
        eval_k: int = 2,
        patience: int | None = None,
        max_words: int = MAX_WORDS,
        dtype: str = "float64",
        random_state: int = 0,
        verbose: bool = False,
    ):
        self.n_keys = n_keys
        self.learning_rate = learning_rate
        self.reg = reg
        self.n_negatives = n_negatives
        self.batch_size = batch_size
        self.max_iter = max_iter
        self.eval_k = eval_k
        self.patience = patience
        self.max_words = max_words
        self.dtype = dtype
        self.random_state = random_state
        self.verbose = verbose

    def fit(self, R, R_val=None, user_words=None, item_words=None, word_vectors=None):
        R = check_interactions(R)
        M, N = self.shape_ = R.shape
        if user_words is None or item_words is None or word_vectors is None:
            raise ValueError("TextMemoryNetwork needs review word sets and word vectors")
        self.word_vectors_ = np.asarray(word_vectors)
        if self.word_vectors_.ndim != 2:
            raise ValueError("word vectors must be an H x K1 matrix")
        self.user_reviews_ = (user_words if isinstance(user_words, ReviewSets)
                              else ReviewSets(user_words, self.max_words))
        self.item_reviews_ = (item_words if isinstance(item_words, ReviewSets)
                              else ReviewSets(item_words, self.max_words))
        if len(self.user_reviews_) != M or len(self.item_reviews_) != N:
            raise ValueError("one review set per user and per item is required")
        H = self.word_vectors_.shape[0]
        for rev in (self.user_reviews_, self.item_reviews_):
            if len(rev.indices) and rev.indices.max() >= H:
                raise ValueError("review word id outside the word-vector table")
        self._S64 = self.word_vectors_.astype(float)
        self._fit_loop(R, R_val)
        return self

    def _init_params(self, rng) -> dict:
        M, N = self.shape_
        H = self.word_vectors_.shape[0]
        k = int(self.n_keys)
        dt = np.dtype(self.dtype)
        return {
            "P": rng.normal(0.0, 0.01, size=(M, k)).astype(dt),
            "Q": rng.normal(0.0, 0.01, size=(N, k)).astype(dt),
            "T": rng.normal(0.0, 0.01, size=(H, k)).astype(dt),
        }

    @property
    def keys_(self) -> MemoryKeys:
        return MemoryKeys(self.params_["P"], self.params_["Q"], self.params_["T"])

    def _on_params_updated(self):
        self._feature_cache = None

    def _loss_and_grads(self, users, items, labels, weights):
        return tmn_loss_and_gradients(
            users, items, labels, self.keys_, self.user_reviews_, self.item_reviews_,
            self._S64, self.reg, weights,
        )

    def _features(self):
        if getattr(self, "_feature_cache", None) is None:
            self._feature_cache = materialize(
                self.keys_, self.user_reviews_, self.item_reviews_, self._S64
            )
        return self._feature_cache

    def score_matrix(self, users) -> np.ndarray:
        check_is_fitted(self)
        E, F = self._features()
        return E[np.atleast_1d(users)] @ F.T

    def transform(self, X=None) -> TextualFeatures:
        """Frozen textual features of all users and items under the fitted keys."""
        check_is_fitted(self)
        E, F = self._features()
        return TextualFeatures(E, F, frozen=True)
