"""Linear-chain CRF over emission scores with START/STOP augmented transitions.

For ``k`` tags the transition matrix ``A`` is ``(k + 2) x (k + 2)``; index
``k`` is START and ``k + 1`` is STOP. A path ``y_1..y_n`` scores

    A[START, y_1] + sum_i A[y_i, y_{i+1}] + A[y_n, STOP] + sum_i P[i, y_i]

Forbidden transitions are held at ``MASK_SCORE`` and get zero gradient.
"""

from __future__ import annotations

import numpy as np

from .numerics import DTYPE, ParameterStore, log_sum_exp
from .tags import SchemeKind, TagScheme, TagSequence, split_tag

MASK_SCORE = -1e4


def _as_tags(y) -> np.ndarray:
    if isinstance(y, TagSequence):
        y = y.indices
    return np.asarray(y, dtype=np.int64)


def sequence_score(transitions: np.ndarray, emissions: np.ndarray, tags) -> float:
    P = np.asarray(emissions, dtype=DTYPE)
    y = _as_tags(tags)
    n, k = P.shape
    if len(y) != n:
        raise ValueError(f"tag sequence length {len(y)} != emission rows {n}")
    if n == 0:
        raise ValueError("empty sequence")
    if np.any(y < 0) or np.any(y >= k):
        raise ValueError(f"tag index outside [0, {k})")
    start, stop = k, k + 1
    score = transitions[start, y[0]] + transitions[y[-1], stop]
    score += np.sum(transitions[y[:-1], y[1:]])
    score += np.sum(P[np.arange(n), y])
    return float(score)


def _forward(A: np.ndarray, P: np.ndarray) -> tuple[np.ndarray, float]:
    n, k = P.shape
    inner = A[:k, :k]
    alpha = np.empty((n, k), dtype=DTYPE)
    alpha[0] = A[k, :k] + P[0]
    for t in range(1, n):
        alpha[t] = P[t] + log_sum_exp(alpha[t - 1][:, None] + inner, axis=0)
    return alpha, float(log_sum_exp(alpha[-1] + A[:k, k + 1]))


def _backward(A: np.ndarray, P: np.ndarray) -> np.ndarray:
    n, k = P.shape
    inner = A[:k, :k]
    beta = np.empty((n, k), dtype=DTYPE)
    beta[-1] = A[:k, k + 1]
    for t in range(n - 2, -1, -1):
        beta[t] = log_sum_exp(inner + (P[t + 1] + beta[t + 1])[None, :], axis=1)
    return beta


def log_partition(transitions: np.ndarray, emissions: np.ndarray) -> float:
    P = np.asarray(emissions, dtype=DTYPE)
    if P.ndim != 2 or P.shape[0] == 0:
        raise ValueError("emissions must be a non-empty n x k matrix")
    return _forward(np.asarray(transitions, dtype=DTYPE), P)[1]


def marginals(transitions: np.ndarray, emissions: np.ndarray) -> tuple[np.ndarray, np.ndarray, float]:
    """Node marginals ``(n, k)``, expected transition counts ``(k+2, k+2)`` and ``log Z``."""
    A = np.asarray(transitions, dtype=DTYPE)
    P = np.asarray(emissions, dtype=DTYPE)
    n, k = P.shape
    alpha, log_z = _forward(A, P)
    beta = _backward(A, P)
    node = np.exp(alpha + beta - log_z)
    counts = np.zeros_like(A)
    counts[k, :k] = node[0]
    counts[:k, k + 1] = node[-1]
    inner = A[:k, :k]
    for t in range(n - 1):
        counts[:k, :k] += np.exp(alpha[t][:, None] + inner + (P[t + 1] + beta[t + 1])[None, :] - log_z)
    return node, counts, log_z


def nll_and_grad(transitions: np.ndarray, emissions: np.ndarray, gold) -> tuple[float, np.ndarray, np.ndarray]:
    """``log Z - s(gold)`` with its gradients w.r.t. emissions and transitions."""
    A = np.asarray(transitions, dtype=DTYPE)
    P = np.asarray(emissions, dtype=DTYPE)
    y = _as_tags(gold)
    n, k = P.shape
    gold_score = sequence_score(A, P, y)
    node, counts, log_z = marginals(A, P)
    dP = node.copy()
    dP[np.arange(n), y] -= 1.0
    dA = counts
    dA[k, y[0]] -= 1.0
    dA[y[-1], k + 1] -= 1.0
    np.subtract.at(dA, (y[:-1], y[1:]), 1.0)
    return log_z - gold_score, dP, dA


def viterbi(transitions: np.ndarray, emissions: np.ndarray) -> np.ndarray:
    """Highest-scoring tag path.

    Among equal-scoring paths the one with the lowest tag index at the latest
    position where they differ wins (``argmax`` keeps the first maximum, and
    backtracking runs from the end).
    """
    A = np.asarray(transitions, dtype=DTYPE)
    P = np.asarray(emissions, dtype=DTYPE)
    n, k = P.shape
    if n == 0:
        raise ValueError("empty sequence")
    inner = A[:k, :k]
    delta = A[k, :k] + P[0]
    back = np.zeros((n, k), dtype=np.int64)
    for t in range(1, n):
        cand = delta[:, None] + inner
        back[t] = np.argmax(cand, axis=0)
        delta = cand[back[t], np.arange(k)] + P[t]
    path = np.empty(n, dtype=np.int64)
    path[-1] = int(np.argmax(delta + A[:k, k + 1]))
    for t in range(n - 1, 0, -1):
        path[t - 1] = back[t, path[t]]
    return path


def build_bilou_mask(scheme: TagScheme) -> np.ndarray:
    """Boolean ``(k+2, k+2)`` matrix, ``True`` where a transition is forbidden.

    Forbidden: START -> I/L; B-x or I-x -> anything but I-x / L-x (STOP
    included); O, L, U -> I/L. Transitions into START and out of STOP never
    occur on a path and are masked as well.
    """
    if scheme.kind is not SchemeKind.BILOU:
        raise ValueError("BILOU mask needs a BILOU scheme")
    tags = scheme.tags
    k = len(tags)
    start, stop = k, k + 1
    mask = np.zeros((k + 2, k + 2), dtype=bool)
    mask[:, start] = True
    mask[stop, :] = True
    parts = [split_tag(t) for t in tags]
    for j, (c_pre, _) in enumerate(parts):
        if c_pre in ("I", "L"):
            mask[start, j] = True
    for i, (p_pre, p_cat) in enumerate(parts):
        if p_pre in ("B", "I"):
            mask[i, stop] = True
            for j, (c_pre, c_cat) in enumerate(parts):
                if not (c_pre in ("I", "L") and c_cat == p_cat):
                    mask[i, j] = True
        else:
            for j, (c_pre, _) in enumerate(parts):
                if c_pre in ("I", "L"):
                    mask[i, j] = True
    return mask


class CrfLayer:
    """CRF with a trainable transition matrix stored in a :class:`ParameterStore`."""

    def __init__(self, num_tags: int, mask: np.ndarray | None = None,
                 store: ParameterStore | None = None, name: str = "crf"):
        self.num_tags = num_tags
        self.store = store if store is not None else ParameterStore()
        self.name = f"{name}.transitions"
        size = num_tags + 2
        if mask is None:
            mask = np.zeros((size, size), dtype=bool)
        if mask.shape != (size, size):
            raise ValueError(f"mask shape {mask.shape} != {(size, size)}")
        self.mask = mask
        if self.name not in self.store:
            self.store.zeros(self.name, (size, size))

    @property
    def param(self):
        return self.store[self.name]

    @property
    def transitions(self) -> np.ndarray:
        return np.where(self.mask, MASK_SCORE, self.param.value)

    def sequence_score(self, emissions, tags) -> float:
        self._check(emissions)
        return sequence_score(self.transitions, emissions, tags)

    def log_partition(self, emissions) -> float:
        self._check(emissions)
        return log_partition(self.transitions, emissions)

    def nll(self, emissions, gold) -> float:
        self._check(emissions)
        return nll_and_grad(self.transitions, emissions, gold)[0]

    def nll_backward(self, emissions, gold, weight: float = 1.0) -> tuple[float, np.ndarray]:
        """Return the NLL and ``weight * dNLL/dP``; ``weight * dNLL/dA`` is accumulated."""
        self._check(emissions)
        value, dP, dA = nll_and_grad(self.transitions, emissions, gold)
        dA[self.mask] = 0.0
        self.param.grad += weight * dA
        return value, weight * dP

    def viterbi(self, emissions) -> np.ndarray:
        self._check(emissions)
        return viterbi(self.transitions, emissions)

    def _check(self, emissions):
        shape = np.shape(emissions)
        if len(shape) != 2 or shape[1] != self.num_tags:
            raise ValueError(f"emissions of shape {shape} do not match {self.num_tags} tags")
