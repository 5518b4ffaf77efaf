"""Structural and brute-force consistency checks behind ``apmon validate``."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from apmon.enumeration import enumerate_histories, exact_gradient, exact_objective, policy_factors
from apmon.errors import TooLarge
from apmon.model import STOCHASTIC_TOL, ProductHmm, detect_absorbing
from apmon.objective import CostModel
from apmon.oom import build_operators, build_safety_predictor, run_filter, safety_probability
from apmon.policy import TabularPolicy, UniformPolicy

ENUM_TOL = 1e-10
FD_EPS = 1e-5
FD_RTOL = 1e-4


@dataclass
class Check:
    name: str
    status: str  # "pass", "fail" or "skip"
    detail: str = ""


def structural_checks(product: ProductHmm) -> list[Check]:
    out = []
    rows = np.asarray(product.transition.sum(axis=1)).ravel()
    bad = np.flatnonzero(np.abs(rows - 1) > STOCHASTIC_TOL)
    out.append(Check("product transition rows stochastic", "fail" if len(bad) else "pass",
                     f"rows {[product.state_name(z) for z in bad[:5]]}" if len(bad) else f"{product.n_states} states"))
    em = product.emission.sum(axis=2)
    bad_e = np.argwhere(np.abs(em - 1) > STOCHASTIC_TOL)
    out.append(Check("product emissions stochastic", "fail" if len(bad_e) else "pass",
                     str(bad_e[:5].tolist()) if len(bad_e) else ""))
    ok = abs(product.initial.sum() - 1) <= STOCHASTIC_TOL and product.initial.min() >= 0
    out.append(Check("initial distribution", "pass" if ok else "fail"))
    out.append(Check("failure set non-empty", "pass" if product.failure.any() else "fail",
                     f"{int(product.failure.sum())} failure states"))
    out.append(Check("failure absorbing", "pass",
                     "absorbing" if product.failure_absorbing else "not absorbing (general form used)"))
    return out


def absorbing_identity_check(product: ProductHmm, max_k: int = 10) -> Check:
    if not detect_absorbing(product):
        return Check("absorbing identity", "skip", "failure set is not absorbing")
    try:
        for k in range(max_k + 1):
            build_safety_predictor(product, k)
    except AssertionError as exc:
        return Check("absorbing identity", "fail", str(exc))
    return Check("absorbing identity", "pass", f"k = 0..{max_k}")


def enumeration_checks(product: ProductHmm, K: int, k: int, cost_model: CostModel, seed: int = 0) -> list[Check]:
    """Filter vs path enumeration, total probability, and a finite-difference gradient check."""
    try:
        hs = enumerate_histories(product, K, k, cost_model)
    except TooLarge as exc:
        return [Check("enumeration checks", "skip", f"model too large for enumeration: {exc}")]
    out = []
    ops = build_operators(product)
    sp_ = build_safety_predictor(product, k)
    worst_p = worst_l = 0.0
    for h in hs:
        fs = list(run_filter(product, ops, h.queries, h.observations))
        p_filter = np.array([safety_probability(f, sp_) for f in fs])
        worst_p = max(worst_p, float(np.max(np.abs(p_filter - h.p_safe))))
        worst_l = max(worst_l, abs(float(np.exp(fs[-1].log_likelihood)) - h.obs_prob))
    ok = worst_p <= ENUM_TOL and worst_l <= ENUM_TOL
    out.append(Check("filter matches path enumeration", "pass" if ok else "fail",
                     f"max safety error {worst_p:.3g}, max likelihood error {worst_l:.3g} over {len(hs)} histories"))

    rng = np.random.default_rng(seed)
    tab = TabularPolicy(product.n_observations, product.n_queries, window=K)
    tab = tab.with_params(rng.normal(scale=0.5, size=tab.n_params))
    obs_p = np.array([h.obs_prob for h in hs])
    totals = [float(policy_factors(pol, hs) @ obs_p) for pol in
              (UniformPolicy(product.n_observations, product.n_queries), tab)]
    dev = max(abs(t - 1) for t in totals)
    out.append(Check("history probabilities sum to one", "pass" if dev <= ENUM_TOL else "fail", f"max deviation {dev:.3g}"))

    g = exact_gradient(product, tab, K, k, cost_model, hs)
    fd = np.empty_like(g)
    for i in range(tab.n_params):
        e = np.zeros(tab.n_params)
        e[i] = FD_EPS
        fd[i] = (exact_objective(product, tab.with_params(tab.params + e), K, k, cost_model, hs)
                 - exact_objective(product, tab.with_params(tab.params - e), K, k, cost_model, hs)) / (2 * FD_EPS)
    rel = relative_error(g, fd)
    out.append(Check("gradient matches finite differences", "pass" if rel <= FD_RTOL else "fail",
                     f"max relative error {rel:.3g} over {tab.n_params} parameters"))
    return out


def relative_error(a, b, floor: float = 1e-6) -> float:
    """Max coordinate-wise |a-b| / max(|a|, |b|, floor)."""
    a, b = np.asarray(a, float), np.asarray(b, float)
    if a.size == 0:
        return 0.0
    return float(np.max(np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)))


def run_checks(scenario, deep: bool = False) -> list[Check]:
    product = scenario.product()
    checks = structural_checks(product)
    if deep:
        checks.append(absorbing_identity_check(product))
        checks.extend(enumeration_checks(product, scenario.horizon, scenario.lookahead,
                                         CostModel.from_scenario(scenario)))
    return checks
