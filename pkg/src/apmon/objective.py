"""Conditional-entropy objective and its score-function gradient estimators.

Entropies are reported in bits.  Per trajectory the estimators weight the
cumulative score ``sum_{i<=t} grad log pi(sigma_i | o_{0:i-1})`` by the step-t
entropy or query cost.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from apmon.errors import DomainError, EmptySample
from apmon.oom import FilterState, SafetyPredictor, safety_probability

_SLACK = 1e-12


def binary_entropy(p):
    """Entropy in bits of a Bernoulli(p) variable, with 0 log 0 = 0."""
    p = np.asarray(p, dtype=float)
    if np.any(p < -_SLACK) or np.any(p > 1 + _SLACK) or np.any(np.isnan(p)):
        raise DomainError(f"probability outside [0, 1]: {p}")
    p = np.clip(p, 0.0, 1.0)
    q = 1.0 - p
    with np.errstate(divide="ignore", invalid="ignore"):
        h = -np.where(p > 0, p * np.log2(p), 0.0) - np.where(q > 0, q * np.log2(q), 0.0)
    return float(h) if h.ndim == 0 else h


def history_entropy(f: FilterState, sp: SafetyPredictor):
    return binary_entropy(safety_probability(f, sp))


@dataclass(frozen=True, eq=False)
class CostModel:
    cost_matrix: np.ndarray
    alpha: float
    initial_query: int

    def __post_init__(self):
        cm = np.asarray(self.cost_matrix, dtype=float)
        if cm.min(initial=0.0) < 0:
            raise ValueError("query costs must be non-negative")
        if self.alpha < 0:
            raise ValueError("alpha must be non-negative")
        object.__setattr__(self, "cost_matrix", cm)

    def step_costs(self, queries) -> np.ndarray:
        """C(sigma_{t-1}, sigma_t) along the last axis, with sigma_{-1} = initial query."""
        queries = np.asarray(queries)
        prev = np.concatenate(
            [np.full(queries.shape[:-1] + (1,), self.initial_query), queries[..., :-1]], axis=-1
        )
        return self.cost_matrix[prev, queries]

    @classmethod
    def from_scenario(cls, scenario) -> "CostModel":
        return cls(scenario.cost_matrix, scenario.alpha, scenario.hmm.initial_query)


@dataclass(frozen=True, eq=False)
class ObjectiveSample:
    per_step_entropy: np.ndarray
    per_step_cost: np.ndarray
    score_prefix: np.ndarray | None  # (K+1, n_params), cumulative over steps
    trajectory_id: int = 0


def _check(samples, t=None):
    if len(samples) == 0:
        raise EmptySample("no samples")
    if t is not None and any(s.score_prefix is None or len(s.score_prefix) <= t for s in samples):
        raise EmptySample(f"samples do not carry scores through step {t}")


def _weights(samples, weights):
    if weights is None:
        return np.full(len(samples), 1.0 / len(samples))
    return np.asarray(weights, dtype=float)


def objective_estimate(samples, cm: CostModel, K: int) -> float:
    """Monte-Carlo estimate of (1/K) sum_t H_t + alpha sum_t E[C_t] over t = 0..K."""
    _check(samples)
    H = np.array([s.per_step_entropy[: K + 1] for s in samples])
    C = np.array([s.per_step_cost[: K + 1] for s in samples])
    return float(H.mean(axis=0).sum() / K + cm.alpha * C.mean(axis=0).sum())


def estimate_entropy_gradient(samples, t: int, weights=None, baseline: float = 0.0) -> np.ndarray:
    """Score-function estimate of the gradient of H(W_t^k | Y_{0:t}).

    ``weights`` replaces the uniform 1/V (pass exact P_theta(y) to turn the
    estimator into the exact enumeration sum).  ``baseline`` is subtracted
    from every entropy before weighting.
    """
    _check(samples, t)
    w = _weights(samples, weights)
    out = np.zeros(samples[0].score_prefix.shape[1])
    for wi, s in zip(w, samples):
        out += wi * (s.per_step_entropy[t] - baseline) * s.score_prefix[t]
    return out


def estimate_cost_gradient(samples, t: int, cm: CostModel | None = None, weights=None) -> np.ndarray:
    """Score-function estimate of the gradient of E[C(sigma_{t-1}, sigma_t)]."""
    _check(samples, t)
    w = _weights(samples, weights)
    out = np.zeros(samples[0].score_prefix.shape[1])
    for wi, s in zip(w, samples):
        out += wi * s.per_step_cost[t] * s.score_prefix[t]
    return out


def objective_gradient(samples, cm: CostModel, K: int, weights=None, baseline: bool = False):
    """(1/K) sum_t entropy-gradient(t) + alpha sum_t cost-gradient(t)."""
    _check(samples, K)
    g = np.zeros(samples[0].score_prefix.shape[1])
    for t in range(K + 1):
        b = float(np.mean([s.per_step_entropy[t] for s in samples])) if baseline else 0.0
        g += estimate_entropy_gradient(samples, t, weights, b) / K
        if cm.alpha:
            g += cm.alpha * estimate_cost_gradient(samples, t, cm, weights)
    return g


def reward_to_go(entropy: np.ndarray, cost: np.ndarray, K: int, alpha: float,
                 full_episode: bool = False, baseline: np.ndarray | None = None) -> np.ndarray:
    """Per-step score weights equivalent to :func:`objective_gradient`.

    With prefix scores, the step-i score multiplies every later per-step term,
    so its weight is the suffix sum of ``H_t / K + alpha * C_t``.  With
    ``full_episode`` every step's score carries the whole episode's sum.
    Arrays have shape ``(V, K+1)``.
    """
    h = entropy if baseline is None else entropy - baseline
    per_step = h / K + alpha * cost
    if full_episode:
        return np.repeat(per_step.sum(axis=-1, keepdims=True), per_step.shape[-1], axis=-1)
    return np.flip(np.cumsum(np.flip(per_step, -1), axis=-1), -1)
