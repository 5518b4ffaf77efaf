import numpy as np
import pytest

from apmon.enumeration import (
    brute_force_sequence_probs,
    enumerate_histories,
    enumerate_paths,
    joint_log_prob,
    path_observation_prob,
    policy_factors,
)
from apmon.errors import TooLarge
from apmon.oom import build_operators, sequence_log_prob
from apmon.policy import RecurrentPolicy, TabularPolicy, UniformPolicy
from apmon.scenario import build_fixture

from conftest import FixedPolicy, random_model


def test_perfect_sensor_two_histories(f1):
    p = f1.product()
    probs = brute_force_sequence_probs(p, FixedPolicy(2, 2, choice=0), 1)
    assert probs == pytest.approx({((0, 0), (0, 0)): 0.7, ((0, 0), (0, 1)): 0.3})


def test_uniform_policy_factorisation(f1):
    p = f1.product()
    probs = brute_force_sequence_probs(p, UniformPolicy(2, 2), 1)
    for y, pr in probs.items():
        qs = [q for q, _ in y]
        os_ = [o for _, o in y]
        assert pr == pytest.approx(0.25 * path_observation_prob(p, qs, os_), abs=1e-15)


@pytest.mark.parametrize("name", ["f1", "f1-two-sensor"])
def test_sequence_probs_sum_to_one(name):
    sc = build_fixture(name)
    p = sc.product()
    pol = TabularPolicy(2, 2, window=sc.horizon)
    pol = pol.with_params(np.random.default_rng(0).normal(size=pol.n_params))
    assert sum(brute_force_sequence_probs(p, pol, sc.horizon).values()) == pytest.approx(1.0, abs=1e-10)


@pytest.mark.parametrize("seed", range(6))
def test_filter_probabilities_match_enumeration(seed):
    p = random_model(seed)
    ops = build_operators(p)
    pol = RecurrentPolicy.init(p.n_observations, p.n_queries, seed=seed, hidden=3, scale=0.5)
    table = brute_force_sequence_probs(p, pol, 2)
    for y, pr in table.items():
        qs = [q for q, _ in y]
        os_ = [o for _, o in y]
        via_filter = np.exp(joint_log_prob(p, ops, pol, qs, os_))
        assert abs(via_filter - pr) <= 1e-10


def test_condition_first_obs_divides_out_first_likelihood(f1):
    p = f1.product()
    ops = build_operators(p)
    pol = UniformPolicy(2, 2)
    full = joint_log_prob(p, ops, pol, [1, 1], [0, 1])
    cond = joint_log_prob(p, ops, pol, [1, 1], [0, 1], condition_first_obs=True)
    assert full - cond == pytest.approx(sequence_log_prob(p, ops, [1], [0]))


def test_guard():
    sc = build_fixture("f1")
    with pytest.raises(TooLarge):
        enumerate_histories(sc.product(), 10)


def test_paths_have_positive_weight_and_sum_to_one(f1):
    paths, w = enumerate_paths(f1.product(), 4)
    assert np.all(w > 0)
    assert w.sum() == pytest.approx(1.0)
    assert paths.shape[1] == 4


def test_policy_factors_are_probabilities(f1_two):
    hs = enumerate_histories(f1_two.product(), f1_two.horizon, 1)
    f = policy_factors(RecurrentPolicy.init(2, 2, seed=0), hs)
    assert np.all((f > 0) & (f <= 1))
