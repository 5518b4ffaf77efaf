"""Observable operators, scaled forward filtering and k-step safety prediction.

Conventions: ``T[i, j] = P(z_{t+1} = i | z_t = j)`` (column-stochastic) and
``A[o|q] = T @ diag(E(o | ., q))``.  Posteriors are renormalised every step
and the log normaliser is accumulated in natural log, so long horizons on
large models do not underflow.

Filter functions accept either a single posterior of shape ``(N,)`` with
integer query/observation, or a batch of shape ``(N, V)`` with integer arrays
of length V.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from apmon.errors import ModelMismatch, ZeroLikelihood
from apmon.model import ProductHmm


@dataclass(frozen=True, eq=False)
class ObservableOperatorSet:
    reversed_transition: sp.csr_matrix
    emission_diags: np.ndarray  # (n_queries, n_obs, N): E(o | z, q)
    model_ref: str

    def operator(self, o: int, q: int) -> sp.csr_matrix:
        return (self.reversed_transition @ sp.diags(self.emission_diags[q, o])).tocsr()

    @property
    def operators(self) -> dict:
        nq, no, _ = self.emission_diags.shape
        return {(o, q): self.operator(o, q) for q in range(nq) for o in range(no)}


@dataclass(frozen=True, eq=False)
class FilterState:
    posterior: np.ndarray
    log_likelihood: float | np.ndarray
    step: int
    model_ref: str = ""


@dataclass(frozen=True, eq=False)
class SafetyPredictor:
    k: int
    safe_row: np.ndarray
    model_ref: str


def build_operators(product: ProductHmm) -> ObservableOperatorSet:
    T = product.transition.T.tocsr()
    T.sort_indices()
    diags = np.ascontiguousarray(product.emission.transpose(1, 2, 0))
    return ObservableOperatorSet(T, diags, product.fingerprint)


def _emission_column(ops_or_product, query, obs):
    diags = (
        ops_or_product.emission_diags
        if isinstance(ops_or_product, ObservableOperatorSet)
        else ops_or_product.emission.transpose(1, 2, 0)
    )
    col = diags[query, obs]
    # batched indexing yields (V, N); filter works column-wise
    return col.T if col.ndim == 2 else col


def _normalise(unnorm: np.ndarray, step: int):
    total = unnorm.sum(axis=0)
    if np.any(total <= 0):
        raise ZeroLikelihood(f"observation at step {step} has zero probability", step=step)
    return unnorm / total, np.log(total)


def filter_init(product: ProductHmm, query, obs) -> FilterState:
    e = _emission_column(product, query, obs)
    mu = product.initial if e.ndim == 1 else product.initial[:, None]
    post, ll = _normalise(e * mu, 0)
    return FilterState(post, ll, 0, product.fingerprint)


def filter_step(f: FilterState, ops: ObservableOperatorSet, query, obs) -> FilterState:
    if f.model_ref and f.model_ref != ops.model_ref:
        raise ModelMismatch("filter state and operators come from different models")
    pred = ops.reversed_transition @ f.posterior
    e = _emission_column(ops, query, obs)
    post, inc = _normalise(e * pred, f.step + 1)
    return FilterState(post, f.log_likelihood + inc, f.step + 1, f.model_ref)


def run_filter(product: ProductHmm, ops: ObservableOperatorSet, queries, observations):
    """Yield the filter state after each (query, observation) pair."""
    if len(queries) != len(observations):
        raise ValueError("queries and observations must have equal length")
    f = None
    for t, (q, o) in enumerate(zip(queries, observations)):
        f = filter_init(product, q, o) if t == 0 else filter_step(f, ops, q, o)
        yield f


def sequence_log_prob(product, ops, queries, observations) -> float:
    """Natural-log probability of the observations given the queries; -inf if impossible."""
    f = None
    try:
        for f in run_filter(product, ops, queries, observations):
            pass
    except ZeroLikelihood:
        return -np.inf
    return float(f.log_likelihood)


def build_safety_predictor(product: ProductHmm, k: int) -> SafetyPredictor:
    """Row vector v_k = 1^T (D T)^k D, built with k sparse products.

    ``v @ posterior`` is then the probability of staying outside the failure
    set for the current step and the next k.
    """
    if k < 0:
        raise ValueError("k must be >= 0")
    safe = (~product.failure).astype(float)
    P = product.transition  # row form: (v^T T) == P @ v
    v = safe.copy()
    for _ in range(k):
        v = safe * (P @ v)
    if product.failure_absorbing:
        terminal = safe.copy()  # 1^T D T^k: only the terminal step is masked
        for _ in range(k):
            terminal = P @ terminal
        if np.max(np.abs(terminal - v), initial=0.0) > 1e-12:
            raise AssertionError("absorbing failure set but (DT)^k D != D T^k")
    return SafetyPredictor(k, v, product.fingerprint)


def safety_probability(f: FilterState, sp_: SafetyPredictor):
    """P(no failure over the next k steps | history)."""
    if f.model_ref and sp_.model_ref != f.model_ref:
        raise ModelMismatch("filter state and safety predictor come from different models")
    p = sp_.safe_row @ f.posterior
    return np.clip(p, 0.0, 1.0)


def oracle_safety(z, sp_: SafetyPredictor):
    return sp_.safe_row[z]
