"""Exhaustive path and history enumeration for small product models.

Nothing here uses the observable-operator filter: probabilities are sums
over explicit state paths, so these functions serve as an independent check
on :mod:`apmon.oom` and on the gradient estimators.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np

from apmon.errors import TooLarge
from apmon.model import ProductHmm
from apmon.objective import CostModel, ObjectiveSample, binary_entropy, objective_gradient
from apmon.oom import run_filter
from apmon.policy import Policy

MAX_HISTORIES = 10**6
MAX_PATHS = 5 * 10**6


def enumerate_paths(product: ProductHmm, length: int):
    """All state paths of ``length`` states with positive prior probability.

    Returns ``(paths, weights)`` with paths of shape ``(n, length)``.
    """
    P = product.transition
    start = np.flatnonzero(product.initial > 0)
    paths = start[:, None]
    weights = product.initial[start]
    for _ in range(length - 1):
        last = paths[:, -1]
        counts = np.diff(P.indptr)[last]
        if counts.sum() > MAX_PATHS:
            raise TooLarge(f"more than {MAX_PATHS} state paths")
        rep = np.repeat(np.arange(len(paths)), counts)
        nxt = np.concatenate([P.indices[P.indptr[z]:P.indptr[z + 1]] for z in last]) if len(last) else []
        pr = np.concatenate([P.data[P.indptr[z]:P.indptr[z + 1]] for z in last]) if len(last) else []
        paths = np.column_stack([paths[rep], nxt])
        weights = weights[rep] * pr
        keep = weights > 0
        paths, weights = paths[keep], weights[keep]
    return paths, weights


def _emission_weights(product, paths, queries, observations):
    """Per-path cumulative emission products for each prefix, shape (n, L)."""
    q = np.asarray(queries)
    o = np.asarray(observations)
    L = len(q)
    e = product.emission[paths[:, :L], q[None, :], o[None, :]]
    return np.cumprod(e, axis=1)


def path_observation_prob(product: ProductHmm, queries, observations) -> float:
    """P(o_{0:t} | sigma_{0:t}) by summing over every state path."""
    paths, w = enumerate_paths(product, len(queries))
    return float(w @ _emission_weights(product, paths, queries, observations)[:, -1])


def path_safety_probability(product: ProductHmm, queries, observations, k: int) -> float:
    """P(no failure in steps t..t+k | o_{0:t}, sigma_{0:t}) with t = len(queries) - 1."""
    t = len(queries) - 1
    paths, w = enumerate_paths(product, t + k + 1)
    e = _emission_weights(product, paths, queries, observations)[:, -1]
    safe = ~product.failure[paths[:, t:]].any(axis=1)
    den = w @ e
    if den <= 0:
        raise ZeroDivisionError("history has zero probability")
    return float((w * e) @ safe / den)


@dataclass(frozen=True)
class History:
    queries: tuple
    observations: tuple
    obs_prob: float  # P(o_{0:K} | sigma_{0:K})
    p_safe: np.ndarray  # safety probability after each step
    entropy: np.ndarray
    cost: np.ndarray

    @property
    def key(self) -> tuple:
        return tuple(zip(self.queries, self.observations))


def enumerate_histories(product: ProductHmm, K: int, k: int = 0, cost_model: CostModel | None = None):
    """Every (query, observation) history of length K+1 with positive probability
    under some policy, with path-summed per-step safety probabilities."""
    nq, no = product.n_queries, product.n_observations
    if (nq * no) ** (K + 1) > MAX_HISTORIES:
        raise TooLarge(f"{(nq * no) ** (K + 1)} histories exceed the {MAX_HISTORIES} guard")
    paths, w = enumerate_paths(product, K + k + 1)
    fail = product.failure[paths]
    # safe_from[:, t] = no failure in steps t..t+k
    safe_from = np.stack([~fail[:, t:t + k + 1].any(axis=1) for t in range(K + 1)], axis=1)
    out = []
    for qs in itertools.product(range(nq), repeat=K + 1):
        costs = cost_model.step_costs(np.array(qs)) if cost_model is not None else np.zeros(K + 1)
        for os_ in itertools.product(range(no), repeat=K + 1):
            e = _emission_weights(product, paths, qs, os_)
            den = w @ e
            if den[-1] <= 0:
                continue
            p = np.einsum("n,nt,nt->t", w, e, safe_from) / den
            p = np.clip(p, 0.0, 1.0)
            out.append(History(qs, os_, float(den[-1]), p, binary_entropy(p), np.asarray(costs, float)))
    return out


def policy_factors(policy: Policy, histories) -> np.ndarray:
    """prod_i pi(sigma_i | o_{0:i-1}) for each history, evaluated in one batch."""
    qs = np.array([h.queries for h in histories], dtype=np.int64)
    os_ = np.array([h.observations for h in histories], dtype=np.int64)
    V, L = qs.shape
    enc = policy.initial_state(V)
    out = np.ones(V)
    for t in range(L):
        out *= policy.distribution(enc)[np.arange(V), qs[:, t]]
        if t < L - 1:
            enc = policy.advance(enc, os_[:, t], qs[:, t])
    return out


def brute_force_sequence_probs(product: ProductHmm, policy: Policy, K: int) -> dict:
    """Exact P_theta(y) for every history y of length K+1 with positive probability."""
    hs = enumerate_histories(product, K)
    probs = policy_factors(policy, hs) * np.array([h.obs_prob for h in hs])
    return {h.key: float(p) for h, p in zip(hs, probs) if p > 0}


def exact_objective(product: ProductHmm, policy: Policy, K: int, k: int, cost_model: CostModel,
                    histories=None) -> float:
    """(1/K) sum_t E[H_t] + alpha sum_t E[C_t] computed by enumeration."""
    hs = histories if histories is not None else enumerate_histories(product, K, k, cost_model)
    probs = policy_factors(policy, hs) * np.array([h.obs_prob for h in hs])
    H = np.array([h.entropy for h in hs])
    C = np.array([h.cost for h in hs])
    return float(probs @ H.sum(axis=1) / K + cost_model.alpha * probs @ C.sum(axis=1))


def enumerated_samples(policy: Policy, histories) -> tuple[list[ObjectiveSample], np.ndarray]:
    """Objective samples with exact cumulative scores, one per history, plus P_theta weights."""
    samples = []
    for i, h in enumerate(histories):
        obs = np.array([h.observations])
        qs = np.array([h.queries])
        L = qs.shape[1]
        scores = np.empty((L, policy.n_params))
        for t in range(L):
            w = np.zeros((1, L))
            w[0, t] = 1.0
            scores[t] = policy.grad_log_prob(obs, qs, w)
        samples.append(ObjectiveSample(h.entropy, h.cost, np.cumsum(scores, axis=0), i))
    weights = policy_factors(policy, histories) * np.array([h.obs_prob for h in histories])
    return samples, weights


def exact_gradient(product: ProductHmm, policy: Policy, K: int, k: int, cost_model: CostModel,
                   histories=None) -> np.ndarray:
    """The score-function estimator evaluated with exact P_theta weights over all histories."""
    hs = histories if histories is not None else enumerate_histories(product, K, k, cost_model)
    samples, weights = enumerated_samples(policy, hs)
    return objective_gradient(samples, cost_model, K, weights=weights)


def joint_log_prob(product: ProductHmm, ops, policy: Policy, queries, observations,
                   condition_first_obs: bool = False) -> float:
    """log P_theta(y) from the filter likelihood and the policy factors.

    With ``condition_first_obs`` the first observation's likelihood is divided
    out, giving the probability of the rest of the history given o_0.
    """
    lls = [float(f.log_likelihood) for f in run_filter(product, ops, queries, observations)]
    h = History(tuple(queries), tuple(observations), 0.0, np.zeros(0), np.zeros(0), np.zeros(0))
    lp = lls[-1] + float(np.log(policy_factors(policy, [h])[0]))
    return lp - lls[0] if condition_first_obs else lp
