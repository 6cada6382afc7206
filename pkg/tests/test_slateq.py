import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from fedslate import slateq
from fedslate.errors import ContractViolation
from fedslate.slateq import ChoiceScores


def greedy_reference(q, v, null, n):
    """Slot-by-slot ratio maximization in plain Python floats."""
    chosen = []
    for _ in range(n):
        best, best_val = None, -math.inf
        for i in range(len(q)):
            if i in chosen:
                continue
            num = sum(v[j] * q[j] for j in chosen) + v[i] * q[i]
            den = null + sum(v[j] for j in chosen) + v[i]
            if num / den > best_val:
                best, best_val = i, num / den
        chosen.append(best)
    return chosen


def test_greedy_matches_reference():
    rng = np.random.default_rng(0)
    for _ in range(300):
        N = int(rng.integers(1, 9))
        n = int(rng.integers(1, min(3, N) + 1))
        q = rng.normal(size=N)
        v = np.exp(1 - rng.uniform(size=N))
        got = slateq.greedy_slate(q, ChoiceScores(v, 1.0), n)
        assert got.tolist() == greedy_reference(q.tolist(), v.tolist(), 1.0, n)


def test_greedy_ties_go_to_smallest_index():
    v = np.ones(4)
    assert slateq.greedy_slate(np.zeros(4), ChoiceScores(v), 2).tolist() == [0, 1]
    assert slateq.topk_slate(np.array([1.0, 2.0, 2.0, 0.0]), 2).tolist() == [1, 2]


def test_batch_greedy_matches_scalar():
    rng = np.random.default_rng(1)
    q = rng.normal(size=(50, 7))
    k = rng.uniform(size=(50, 7))
    batch = slateq.batch_greedy_slates(q, np.exp(1 - k), 1.0, 3)
    for row in range(50):
        single = slateq.greedy_slate(q[row], slateq.choice_scores(k[row]), 3)
        assert batch[row].tolist() == single.tolist()


def test_choice_probs_normalized_and_null_last():
    scores = slateq.choice_scores([0.0, 1.0])
    p = slateq.slate_choice_probs([0, 1], scores)
    e = math.e
    assert np.allclose(p, [e / (e + 2), 1 / (e + 2), 1 / (e + 2)], atol=1e-15)
    with pytest.raises(ContractViolation):
        slateq.slate_choice_probs([0, 0], scores)
    with pytest.raises(ContractViolation):
        slateq.choice_scores([1.5])


def test_slate_q_value_ignores_null():
    scores = slateq.choice_scores([0.0, 1.0, 0.5])
    probs = slateq.slate_choice_probs([2, 0], scores)
    q = np.array([1.0, 5.0, 3.0])
    assert slateq.slate_q_value([2, 0], probs, q) == pytest.approx(probs[0] * 3 + probs[1] * 1)


def test_td_target_trivial_cases():
    scores = slateq.choice_scores([0.2, 0.4, 0.9])
    q = np.array([1.0, 2.0, 3.0])
    assert slateq.td_target(1.5, 0.0, q, scores, 2, False) == 1.5
    assert slateq.td_target(1.5, 0.9, q, scores, 2, True) == 1.5
    r = np.array([1.0, 2.0])
    qn = np.tile(q, (2, 1))
    k = np.tile([0.2, 0.4, 0.9], (2, 1))
    assert slateq.batch_td_targets(r, [True, True], qn, k, 0.9, 2).tolist() == [1.0, 2.0]
    assert slateq.batch_td_targets(r, [False, False], qn, k, 0.0, 2).tolist() == [1.0, 2.0]


def test_td_target_value():
    k = [0.0, 1.0]
    scores = slateq.choice_scores(k)
    q = np.array([2.0, 1.0])
    slate = slateq.greedy_slate(q, scores, 1)
    assert slate.tolist() == [0]
    e = math.e
    assert slateq.td_target(1.0, 0.5, q, scores, 1, False) == pytest.approx(1 + 0.5 * 2 * e / (e + 1))


def test_batch_td_matches_scalar_for_topk():
    rng = np.random.default_rng(2)
    q = rng.normal(size=(10, 5))
    k = rng.uniform(size=(10, 5))
    r = rng.normal(size=10)
    got = slateq.batch_td_targets(r, np.zeros(10, bool), q, k, 0.8, 2, strategy="topk")
    for i in range(10):
        ref = slateq.td_target(r[i], 0.8, q[i], slateq.choice_scores(k[i]), 2, False, "topk")
        assert got[i] == pytest.approx(ref, abs=1e-12)


def test_online_weights():
    k = np.array([[0.0, 1.0, 0.5]])
    slates = np.array([[2, 0]])
    W = slateq.online_weights(slates, np.array([1]), k)
    assert W.tolist() == [[1.0, 0.0, 0.0]]
    W = slateq.online_weights(slates, np.array([-1]), k)
    p = slateq.slate_choice_probs([2, 0], slateq.choice_scores(k[0]))
    assert np.allclose(W, [[p[1], 0.0, p[0]]])
    assert np.allclose(slateq.online_weights(slates, None, k, clicked_item=False), W)


def test_slate_size_validation():
    with pytest.raises(ContractViolation):
        slateq.greedy_slate(np.zeros(3), slateq.choice_scores([0.1] * 3), 4)
    with pytest.raises(ContractViolation):
        slateq.build_slate(np.zeros(3), slateq.choice_scores([0.1] * 3), 1, "beam")


@settings(max_examples=100, deadline=None)
@given(st.lists(st.floats(0, 1), min_size=1, max_size=8), st.floats(0, 3), st.data())
def test_probs_sum_to_one(kaleness, null, data):
    scores = slateq.choice_scores(kaleness, null)
    n = data.draw(st.integers(1, len(kaleness)))
    slate = data.draw(st.permutations(range(len(kaleness))))[:n]
    p = slateq.slate_choice_probs(slate, scores)
    assert abs(p.sum() - 1) < 1e-12
    assert np.all(p >= 0)


@settings(max_examples=60, deadline=None)
@given(st.integers(2, 6), st.data())
def test_greedy_first_slot_is_best_single(N, data):
    q = np.array(data.draw(st.lists(st.floats(-10, 10), min_size=N, max_size=N)))
    k = np.array(data.draw(st.lists(st.floats(0, 1), min_size=N, max_size=N)))
    scores = slateq.choice_scores(k)
    first = slateq.greedy_slate(q, scores, 1)[0]
    vals = [slateq.slate_q_value([i], slateq.slate_choice_probs([i], scores), q) for i in range(N)]
    assert vals[first] == max(vals)
