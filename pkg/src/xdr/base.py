"""Estimator base classes shared by the single-domain recommenders."""
from __future__ import annotations

import logging

import numpy as np
import scipy.sparse as sp
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .evaluation import DEFAULT_K, MetricsReport, evaluate
from .seeding import make_rng
from .tensor_core import AdamState, adam_step, sigmoid
from .validation import check_interactions, check_pairs, to_pairs

logger = logging.getLogger(__name__)


class TrainingDivergedError(FloatingPointError):
    """The training loss or a parameter became NaN/Inf."""


class BaseRecommender(BaseEstimator):
    """Scores every item for a user; ranking and evaluation build on that."""

    def score_matrix(self, users) -> np.ndarray:
        raise NotImplementedError

    def decision_function(self, X) -> np.ndarray:
        """Raw scores for an ``(n, 2)`` array of ``(user, item)`` pairs."""
        check_is_fitted(self)
        X = check_pairs(X, self.shape_)
        out = np.empty(len(X))
        for u in np.unique(X[:, 0]):
            rows = X[:, 0] == u
            out[rows] = self.score_matrix(np.array([u]))[0, X[rows, 1]]
        return out

    def predict(self, X) -> np.ndarray:
        """Predicted interaction probability for each ``(user, item)`` pair."""
        return sigmoid(self.decision_function(X))

    def evaluate(self, relevant, exclude=None, k_list=DEFAULT_K,
                 candidate_policy="exclude_train") -> MetricsReport:
        check_is_fitted(self)
        M, N = self.shape_
        return evaluate(
            self.score_matrix,
            to_pairs(relevant) if sp.issparse(relevant) else relevant,
            M, N,
            exclude_pairs=to_pairs(exclude) if sp.issparse(exclude) else exclude,
            k_list=k_list,
            candidate_policy=candidate_policy,
        )


class IterativeRecommender(BaseRecommender):
    """Mini-batch Adam training over enumerated positives plus sampled negatives.

    Subclasses set up parameters in ``_init_params`` and supply
    ``_loss_and_grads(users, items, labels, weights)``. One iteration enumerates
    every training positive once; the parameters with the best validation
    F1@``eval_k`` are kept.
    """

    def _init_params(self, rng) -> dict:
        raise NotImplementedError

    def _loss_and_grads(self, users, items, labels, weights):
        raise NotImplementedError

    def _sample_weights(self, users, items, labels):
        return np.ones(len(users))

    def _on_params_updated(self):
        pass

    def _fit_loop(self, R: sp.csr_matrix, R_val=None):
        from .cf_models import NegativeSampler

        seed = int(self.random_state)
        self.params_ = self._init_params(make_rng(seed, "init"))
        self._adam = {k: AdamState.like(v) for k, v in self.params_.items()}
        pos = to_pairs(R)
        if len(pos) == 0:
            raise ValueError("no training pairs")
        val = None
        if R_val is not None:
            val = to_pairs(R_val) if sp.issparse(R_val) else check_pairs(R_val, self.shape_)
            if len(val) == 0:
                val = None
        rho = int(self.n_negatives)
        sampler = NegativeSampler(R)
        self.history_ = []
        best = (-np.inf, None, -1)
        for it in range(int(self.max_iter)):
            rng = make_rng(seed, "epoch", it)
            perm = rng.permutation(len(pos))
            total = 0.0
            for start in range(0, len(pos), int(self.batch_size)):
                bpos = pos[perm[start: start + int(self.batch_size)]]
                users, items = bpos[:, 0], bpos[:, 1]
                labels = np.ones(len(bpos))
                if rho > 0:
                    nu, ni = sampler.sample(users, rho, rng)
                    users = np.concatenate([users, nu])
                    items = np.concatenate([items, ni])
                    labels = np.concatenate([labels, np.zeros(len(nu))])
                weights = self._sample_weights(users, items, labels)
                loss, grads = self._loss_and_grads(users, items, labels, weights)
                if not np.isfinite(loss):
                    raise TrainingDivergedError(
                        f"{type(self).__name__}: loss became {loss} at iteration {it}"
                    )
                for name, g in grads.items():
                    adam_step(self.params_[name], g, self._adam[name], self.learning_rate)
                    if not np.all(np.isfinite(self.params_[name])):
                        raise TrainingDivergedError(
                            f"{type(self).__name__}: parameter {name} diverged at iteration {it}"
                        )
                self._on_params_updated()
                total += loss
            record = {"iteration": it + 1, "loss": total}
            if val is not None:
                score = self.evaluate(val, exclude=pos, k_list=(self.eval_k,)).f1(self.eval_k)
                record[f"val_f1@{self.eval_k}"] = score
                if score > best[0]:
                    best = (score, {k: v.copy() for k, v in self.params_.items()}, it + 1)
                elif self.patience is not None and it + 1 - best[2] >= self.patience:
                    self.history_.append(record)
                    break
            self.history_.append(record)
            if self.verbose:
                logger.info("%s %s", type(self).__name__, record)
        if best[1] is not None:
            self.params_ = best[1]
            self.best_iteration_ = best[2]
            self.best_score_ = best[0]
        else:
            self.best_iteration_ = len(self.history_)
            self.best_score_ = None
        self.n_iter_ = len(self.history_)
        self._on_params_updated()
        return self

