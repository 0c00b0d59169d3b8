"""Dense numerical substrate: stable nonlinearities, cross-entropy, Adam and a
finite-difference gradient checker.

Matrices are plain ``numpy.ndarray`` objects; gradients everywhere in the
package are hand-derived and verified against :func:`finite_difference_check`.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

#: probability clamp applied before any logarithm
EPS_CLIP = 1e-7


def sigmoid(x):
    """Logistic function, overflow free for any finite input."""
    arr = np.asarray(x)
    if not np.issubdtype(arr.dtype, np.floating):
        arr = arr.astype(np.float64)
    e = np.exp(-np.abs(arr))
    out = np.where(arr >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    if out.ndim == 0:
        return float(out)
    return out


def stable_softmax(v):
    """Softmax over the last axis with max subtraction."""
    v = np.asarray(v, dtype=float)
    if v.size == 0 or v.shape[-1] == 0:
        raise ValueError("empty attention support")
    z = v - v.max(axis=-1, keepdims=True)
    ez = np.exp(z)
    return ez / ez.sum(axis=-1, keepdims=True)


def segment_softmax(logits: np.ndarray, starts: np.ndarray) -> np.ndarray:
    """Softmax computed independently on contiguous, non-empty segments.

    ``starts`` holds the offset of every segment inside ``logits``.
    """
    if logits.size == 0:
        return logits.copy()
    seg_max = np.maximum.reduceat(logits, starts)
    lengths = np.diff(np.append(starts, logits.size))
    ez = np.exp(logits - np.repeat(seg_max, lengths))
    denom = np.add.reduceat(ez, starts)
    return ez / np.repeat(denom, lengths)


def binary_cross_entropy(pred, label, weight=1.0):
    """Weighted cross-entropy of a probability against a 0/1 label.

    ``pred`` is clamped into ``[EPS_CLIP, 1 - EPS_CLIP]`` before the logs.
    Works elementwise on arrays.
    """
    p = np.clip(pred, EPS_CLIP, 1.0 - EPS_CLIP)
    out = -np.asarray(weight) * (label * np.log(p) + (1.0 - np.asarray(label)) * np.log(1.0 - p))
    if np.ndim(out) == 0:
        return float(out)
    return out


def bce_from_logits(z, label, weight=1.0):
    """Loss and d(loss)/dz of :func:`binary_cross_entropy` at ``sigmoid(z)``.

    Where the clamp is active the loss is flat, so the derivative is zero.
    """
    z = np.asarray(z, dtype=float)
    p = sigmoid(z)
    label = np.asarray(label, dtype=float)
    weight = np.asarray(weight, dtype=float)
    loss = binary_cross_entropy(p, label, weight)
    clipped = (p < EPS_CLIP) | (p > 1.0 - EPS_CLIP)
    dz = np.where(clipped, 0.0, weight * (p - label))
    return loss, dz


@dataclass
class AdamState:
    """Moment estimates of one parameter group."""

    m: np.ndarray
    v: np.ndarray
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8

    @classmethod
    def like(cls, param: np.ndarray, **kwargs) -> "AdamState":
        return cls(np.zeros_like(param), np.zeros_like(param), **kwargs)


def adam_step(param: np.ndarray, grad: np.ndarray, state: AdamState, lr: float) -> np.ndarray:
    """One Adam update, applied in place to ``param`` (which is also returned)."""
    if not (param.shape == grad.shape == state.m.shape == state.v.shape):
        raise ValueError(
            f"shape mismatch: param {param.shape}, grad {grad.shape}, state {state.m.shape}"
        )
    if lr <= 0:
        raise ValueError("learning rate must be positive")
    state.t += 1
    state.m *= state.beta1
    state.m += (1.0 - state.beta1) * grad
    state.v *= state.beta2
    state.v += (1.0 - state.beta2) * (grad * grad)
    m_hat = state.m / (1.0 - state.beta1 ** state.t)
    v_hat = state.v / (1.0 - state.beta2 ** state.t)
    param -= lr * m_hat / (np.sqrt(v_hat) + state.epsilon)
    return param


def finite_difference_check(
    loss_fn: Callable[[Sequence[np.ndarray]], float],
    params: Sequence[np.ndarray],
    analytic_grads: Sequence[np.ndarray],
    h: float = 1e-5,
    max_coords: int | None = None,
    rng: np.random.Generator | None = None,
) -> float:
    """Max relative error between analytic gradients and central differences.

    The error per coordinate is ``|analytic - numeric| / max(1, |numeric|)``.
    ``params`` are perturbed in place and restored. With ``max_coords`` a random
    subsample of coordinates (per parameter) is checked.
    """
    if len(params) != len(analytic_grads):
        raise ValueError("one analytic gradient per parameter is required")
    base = loss_fn(params)
    if loss_fn(params) != base:
        raise RuntimeError("loss function is not deterministic")
    worst = 0.0
    for p, g in zip(params, analytic_grads):
        if p.shape != g.shape:
            raise ValueError(f"gradient shape {g.shape} does not match parameter {p.shape}")
        flat = p.reshape(-1)
        gflat = np.asarray(g).reshape(-1)
        coords = np.arange(flat.size)
        if max_coords is not None and flat.size > max_coords:
            rng = rng if rng is not None else np.random.default_rng(0)
            coords = rng.choice(flat.size, size=max_coords, replace=False)
        for c in coords:
            old = flat[c]
            flat[c] = old + h
            up = loss_fn(params)
            flat[c] = old - h
            down = loss_fn(params)
            flat[c] = old
            numeric = (up - down) / (2.0 * h)
            err = abs(gflat[c] - numeric) / max(1.0, abs(numeric))
            worst = max(worst, err)
    return worst


def assert_finite(name: str, *arrays: np.ndarray) -> None:
    """Raise :class:`FloatingPointError` naming ``name`` if anything is NaN/Inf."""
    for a in arrays:
        if not np.all(np.isfinite(a)):
            raise FloatingPointError(f"non-finite values in {name}")


def scatter_rows(n_rows: int, rows: np.ndarray, values: np.ndarray) -> np.ndarray:
    """Dense ``(n_rows, d)`` matrix with ``values`` summed into ``rows``."""
    out = np.zeros((n_rows, values.shape[1]), dtype=values.dtype)
    np.add.at(out, rows, values)
    return out
