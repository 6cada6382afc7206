import math

import numpy as np
import pytest

from fedslate.env import (Corpus, DualPlatformEnv, EngagementParams, UserLatentState,
                          UserParams, apply_transition, engagement_sample, sigmoid, user_choice)
from fedslate.errors import ContractViolation


def make_env(mode="coupled", budget=20.0, n=4, **user):
    rng = np.random.default_rng(0)
    a = Corpus.generate("A", n, n, rng)
    b = Corpus.generate("B", n, n, rng)
    return DualPlatformEnv(a, b, UserParams(budget=budget, **user), mode=mode)


def test_choice_probabilities_example():
    # P for slate [0, 1] with null score 1: e/(e+2), 1/(e+2), 1/(e+2)
    rng = np.random.default_rng(1)
    draws = [user_choice([0.0, 1.0], rng, 1.0) for _ in range(20000)]
    freq = [sum(d == s for d in draws) / len(draws) for s in (0, 1, None)]
    e = math.e
    assert np.allclose(freq, [e / (e + 2), 1 / (e + 2), 1 / (e + 2)], atol=0.015)
    assert abs(e / (e + 2) - 0.5761) < 1e-3 and abs(1 / (e + 2) - 0.2120) < 1e-3


def test_choice_degenerate_single_item():
    rng = np.random.default_rng(2)
    assert all(user_choice([1.0], rng, 0.0) == 0 for _ in range(200))


def test_user_choice_draws_one_uniform():
    r1, r2 = np.random.default_rng(3), np.random.default_rng(3)
    user_choice([0.2, 0.4, 0.9], r1)
    r2.random()
    assert r1.random() == r2.random()


def test_engagement_degenerate_cases():
    rng = np.random.default_rng(4)
    p = EngagementParams(mu_kale=2.5, sigma_kale=0.0, mu_choc=3.0, sigma_choc=0.0)
    assert engagement_sample(1.0, p, rng) == math.exp(2.5)
    p2 = EngagementParams(mu_kale=4.0, sigma_kale=0.0, mu_choc=2.0, sigma_choc=0.0)
    assert abs(engagement_sample(0.5, p2, rng) - 20.0855) < 1e-4


def test_engagement_lognormal_mean():
    rng = np.random.default_rng(5)
    p = EngagementParams()
    k = 0.3
    mu = k * p.mu_kale + (1 - k) * p.mu_choc
    sigma = k * p.sigma_kale + (1 - k) * p.sigma_choc
    samples = np.array([engagement_sample(k, p, rng) for _ in range(100000)])
    assert np.all(samples > 0)
    assert abs(samples.mean() / math.exp(mu + sigma ** 2 / 2) - 1) < 0.02


def test_transition_examples():
    rng = np.random.default_rng(6)
    params = UserParams(mem_discount=0.9, noise_std=0.0)
    s = UserLatentState(1.0, float(sigmoid(1.0)), 10.0, params)
    assert apply_transition(s, 1.0, rng).nke == pytest.approx(1.9, abs=1e-12)
    assert apply_transition(s, 0.5, rng).nke == pytest.approx(0.9, abs=1e-12)
    zero = UserLatentState(0.0, 0.5, 10.0, UserParams(noise_std=0.0))
    assert apply_transition(zero, 0.5, rng).sat == 0.5


def test_corpus_candidates():
    c = Corpus("A", [0.1, 0.9, 0.5], 3)
    assert c.candidate_features().tolist() == [0.1, 0.9, 0.5]
    assert Corpus("A", [0.1, 0.9, 0.5], 2).candidate_features().tolist() == [0.1, 0.9]
    assert Corpus("A", np.ones(4), 4).candidate_features().tolist() == [1.0] * 4
    assert [d.id for d in c.documents] == [0, 1, 2]
    with pytest.raises(ContractViolation):
        Corpus("A", [1.2], 1)


def test_reset_determinism_and_initial_state():
    env = make_env()
    o1 = env.reset(7)
    assert env.user_state().sat == 0.5
    assert env.user_state().budget == 20.0
    o2 = env.reset(7)
    assert [o.noisy_sat for o in o1] == [o.noisy_sat for o in o2]


def test_sat_tracks_nke_and_budget_monotone():
    env = make_env()
    env.reset(8)
    rng = np.random.default_rng(9)
    prev = env.user_state().budget
    done = False
    steps = 0
    while not done:
        res = env.step(rng.choice(4, 2, replace=False), rng.choice(4, 2, replace=False))
        u = env.user_state()
        assert abs(u.sat - sigmoid(u.params.tau * u.nke)) < 1e-12
        assert 0 < u.sat < 1
        assert u.budget <= prev
        for r in (res.response_a, res.response_b):
            assert (r.engagement > 0) == (r.chosen_slot is not None)
        prev = u.budget
        done = res.terminal
        steps += 1
    assert steps == 20


def test_engagement_budget_mode_terminates():
    env = make_env(budget=1.0, budget_consumption="engagement")
    env.reset(1)
    for _ in range(100):
        if env.step([0, 1], [0, 1]).terminal:
            break
    else:
        pytest.fail("episode did not terminate")
    tiny = make_env(budget=1e-9, budget_consumption="engagement")
    tiny.reset(2)
    assert tiny.step([0, 1, 2, 3], [0]).terminal


def test_invalid_slate_rejected():
    env = make_env()
    env.reset(0)
    for bad in ([0, 0], [4], [-1], []):
        with pytest.raises(ContractViolation):
            env.step(bad, [0])


def run_with_b(mode, kaleness_b, seed=11, steps=5):
    a = Corpus("A", [0.5, 0.5, 0.5], 3)
    b = Corpus("B", kaleness_b, 3)
    env = DualPlatformEnv(a, b, UserParams(), mode=mode)
    env.reset(seed)
    out = []
    for _ in range(steps):
        res = env.step([0, 1, 2], [0, 1, 2])
        out.append((res.obs_a.noisy_sat, res.reward_a, env.user_state("A").sat))
    return out


def test_coupled_choc_on_b_lowers_a_satisfaction():
    choc = run_with_b("coupled", [0.0, 0.0, 0.0])
    kale = run_with_b("coupled", [1.0, 1.0, 1.0])
    assert choc[-1][2] < kale[-1][2]
    assert choc[-1][0] < kale[-1][0]


def test_sparse_platform_a_independent_of_b():
    assert run_with_b("sparse", [0.0] * 3) == run_with_b("sparse", [1.0] * 3)


def test_latent_state_count():
    env = make_env("coupled")
    env.reset(0)
    assert env.latent_state_count == 1
    env = make_env("sparse")
    env.reset(0)
    assert env.latent_state_count == 2


def test_trajectory_log(tmp_path):
    a = Corpus("A", [0.2, 0.8], 2)
    env = DualPlatformEnv(a, Corpus("B", [0.3, 0.6], 2), UserParams(budget=3), log_trajectory=True)
    env.reset(0, episode=0)
    while not env.step([0, 1], [1, 0]).terminal:
        pass
    path = tmp_path / "t.csv"
    env.write_trajectory(path)
    lines = path.read_text().splitlines()
    assert lines[0] == "episode,step,platform,slate_ids,chosen_slot,engagement,sat,nke,budget"
    assert len(lines) == 1 + 6
