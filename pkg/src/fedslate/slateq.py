"""Item-level Q decomposition and slate construction under a conditional-logit
choice model with a null (no-click) option."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ContractViolation

DEFAULT_NULL_SCORE = 1.0


@dataclass(frozen=True)
class ChoiceScores:
    items: np.ndarray
    null: float = DEFAULT_NULL_SCORE

    def __post_init__(self):
        if np.any(self.items <= 0) or self.null < 0:
            raise ContractViolation("choice scores must be positive")


def choice_scores(kaleness, null_score: float = DEFAULT_NULL_SCORE) -> ChoiceScores:
    """v_i = exp(1 - kaleness_i)."""
    k = np.asarray(kaleness, dtype=np.float64)
    if np.any(k < 0) or np.any(k > 1):
        raise ContractViolation("kaleness must lie in [0, 1]")
    return ChoiceScores(np.exp(1.0 - k), float(null_score))


def _check_slate(slate, n_candidates):
    slate = np.asarray(slate, dtype=np.int64)
    if slate.ndim != 1 or slate.size == 0:
        raise ContractViolation("slate must be a non-empty index vector")
    if slate.min() < 0 or slate.max() >= n_candidates:
        raise ContractViolation(f"slate indices out of range [0, {n_candidates})")
    if np.unique(slate).size != slate.size:
        raise ContractViolation("slate indices must be distinct")
    return slate


def slate_choice_probs(slate, scores: ChoiceScores) -> np.ndarray:
    """Probabilities of each slot being chosen, with P(null) appended last."""
    slate = _check_slate(slate, scores.items.size)
    v = scores.items[slate]
    denom = v.sum() + scores.null
    return np.append(v / denom, scores.null / denom)


def slate_q_value(slate, probs, item_q) -> float:
    """Sum over slots of P(i) * Q(i); the null option is worth zero."""
    slate = np.asarray(slate, dtype=np.int64)
    probs = np.asarray(probs, dtype=np.float64)
    q = np.asarray(item_q, dtype=np.float64)
    return float(np.dot(probs[: slate.size], q[slate]))


# online value when the consumed item is unknown
expected_slate_q = slate_q_value


def greedy_slate(item_q, scores: ChoiceScores, n: int) -> np.ndarray:
    """Fill slots one at a time, each maximizing the marginal ratio objective.

    Ties go to the smallest candidate index.
    """
    q = np.asarray(item_q, dtype=np.float64)
    v = scores.items
    if n > q.size or n < 1:
        raise ContractViolation(f"slate size {n} must be in [1, {q.size}]")
    vq = v * q
    num, den = 0.0, scores.null
    taken = np.zeros(q.size, dtype=bool)
    slate = np.empty(n, dtype=np.int64)
    for slot in range(n):
        ratio = (vq + num) / (v + den)
        ratio[taken] = -np.inf
        i = int(np.argmax(ratio))
        slate[slot] = i
        taken[i] = True
        num += vq[i]
        den += v[i]
    return slate


def topk_slate(item_q, n: int) -> np.ndarray:
    q = np.asarray(item_q, dtype=np.float64)
    if n > q.size or n < 1:
        raise ContractViolation(f"slate size {n} must be in [1, {q.size}]")
    # stable sort on -q keeps the smallest index first among equal values
    return np.argsort(-q, kind="stable")[:n].astype(np.int64)


def build_slate(item_q, scores: ChoiceScores, n: int, strategy: str = "greedy"):
    if strategy == "greedy":
        return greedy_slate(item_q, scores, n)
    if strategy == "topk":
        return topk_slate(item_q, n)
    raise ContractViolation(f"unknown slate strategy {strategy!r}")


def td_target(r, gamma, next_item_q, next_scores: ChoiceScores, n, terminal,
              strategy: str = "greedy") -> float:
    if terminal or gamma == 0:
        return float(r)
    slate = build_slate(next_item_q, next_scores, n, strategy)
    probs = slate_choice_probs(slate, next_scores)
    return float(r) + gamma * slate_q_value(slate, probs, next_item_q)


def batch_greedy_slates(item_q, scores, null_score, n) -> np.ndarray:
    """greedy_slate applied to each row of ``item_q`` / ``scores`` at once."""
    q = np.asarray(item_q, dtype=np.float64)
    v = np.asarray(scores, dtype=np.float64)
    rows = np.arange(q.shape[0])
    vq = v * q
    num = np.zeros(q.shape[0])
    den = np.full(q.shape[0], float(null_score))
    taken = np.zeros(q.shape, dtype=bool)
    slates = np.empty((q.shape[0], n), dtype=np.int64)
    for slot in range(n):
        ratio = (vq + num[:, None]) / (v + den[:, None])
        ratio[taken] = -np.inf
        idx = np.argmax(ratio, axis=1)
        slates[:, slot] = idx
        taken[rows, idx] = True
        num += vq[rows, idx]
        den += v[rows, idx]
    return slates


def batch_topk_slates(item_q, n) -> np.ndarray:
    return np.argsort(-np.asarray(item_q, dtype=np.float64), axis=1, kind="stable")[:, :n]


def batch_slate_probs(slates, scores, null_score) -> np.ndarray:
    """Per-row slot probabilities (without the null column)."""
    v = np.take_along_axis(np.asarray(scores, dtype=np.float64), slates, axis=1)
    return v / (v.sum(axis=1, keepdims=True) + null_score)


def batch_td_targets(rewards, terminals, next_q, next_kaleness, gamma, n,
                     null_score=DEFAULT_NULL_SCORE, strategy="greedy") -> np.ndarray:
    """Row-wise td_target over a replay batch."""
    r = np.asarray(rewards, dtype=np.float64)
    if gamma == 0:
        return r.copy()
    v = np.exp(1.0 - np.asarray(next_kaleness, dtype=np.float64))
    q = np.asarray(next_q, dtype=np.float64)
    if strategy == "greedy":
        slates = batch_greedy_slates(q, v, null_score, n)
    elif strategy == "topk":
        slates = batch_topk_slates(q, n)
    else:
        raise ContractViolation(f"unknown slate strategy {strategy!r}")
    probs = batch_slate_probs(slates, v, null_score)
    value = (probs * np.take_along_axis(q, slates, axis=1)).sum(axis=1)
    return np.where(np.asarray(terminals, dtype=bool), r, r + gamma * value)


def online_weights(slates, chosen, kaleness, null_score=DEFAULT_NULL_SCORE,
                   clicked_item=True) -> np.ndarray:
    """Weights W with online value = sum(W * Q) per row.

    With ``clicked_item`` a row that recorded a click puts all weight on the
    consumed candidate; otherwise (and for no-click rows) the weights are the
    slate choice probabilities.
    """
    slates = np.asarray(slates, dtype=np.int64)
    kaleness = np.asarray(kaleness, dtype=np.float64)
    rows = np.arange(slates.shape[0])[:, None]
    probs = batch_slate_probs(slates, np.exp(1.0 - kaleness), null_score)
    W = np.zeros(kaleness.shape)
    W[rows, slates] = probs
    if clicked_item and chosen is not None:
        chosen = np.asarray(chosen, dtype=np.int64)
        clicked = np.flatnonzero(chosen >= 0)
        W[clicked] = 0.0
        W[clicked, slates[clicked, chosen[clicked]]] = 1.0
    return W
