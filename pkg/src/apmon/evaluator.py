"""Monte-Carlo evaluation of query policies with Brier scores."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from apmon.errors import DegenerateGap, EmptyEvaluation, LengthMismatch
from apmon.objective import CostModel
from apmon.trainer import EVAL_STREAM, Batch, Simulator, episode_seed

REPORT_COLUMNS = ("policy", "k", "brier", "brier_ci", "cost", "cost_ci")
TRAJECTORY_COLUMNS = ("traj", "t", "p_unsafe", "w", "query", "obs", "cost")
ACCURACY_COLUMNS = ("t", "policy", "mean_abs_error")
Z95 = 1.959963984540054


def brier_score(predictions, outcomes) -> float:
    """Mean squared gap between predicted P(W=1) and the realised outcome."""
    p = np.asarray(predictions, dtype=float)
    w = np.asarray(outcomes, dtype=float)
    if p.shape != w.shape:
        raise LengthMismatch(f"{p.shape} predictions vs {w.shape} outcomes")
    if p.size == 0:
        raise LengthMismatch("empty prediction sequence")
    return float(np.mean((p - w) ** 2))


def gap_closure(b_random: float, b_trained: float, b_oracle: float) -> float:
    if not b_random > b_oracle:
        raise DegenerateGap(f"random Brier {b_random} does not exceed oracle Brier {b_oracle}")
    return (b_random - b_trained) / (b_random - b_oracle)


@dataclass
class PolicyStats:
    policy: str
    k: int
    brier: float
    brier_ci: float
    cost: float
    cost_ci: float
    n: int
    mean_abs_error: np.ndarray = field(repr=False, default=None)


@dataclass
class EvalReport:
    stats: list[PolicyStats]
    n_traj: int
    horizon: int
    alpha: float
    seed: int
    batches: dict = field(default_factory=dict, repr=False)

    def get(self, policy: str, k: int) -> PolicyStats:
        for s in self.stats:
            if s.policy == policy and s.k == k:
                return s
        raise KeyError((policy, k))

    @property
    def ks(self) -> list[int]:
        return sorted({s.k for s in self.stats})

    def gap_closures(self) -> dict:
        """Gap closure per k, for every k where trained, random and oracle are all present."""
        out = {}
        for k in self.ks:
            try:
                r, t, o = (self.get(name, k).brier for name in ("random", "trained", "oracle"))
            except KeyError:
                continue
            try:
                out[k] = gap_closure(r, t, o)
            except DegenerateGap:
                out[k] = float("nan")
        return out


def _mean_ci(x: np.ndarray) -> tuple[float, float]:
    n = len(x)
    sd = float(np.std(x, ddof=1)) if n > 1 else 0.0
    return float(np.mean(x)), Z95 * sd / np.sqrt(n)


def summarise(name: str, k: int, batch: Batch) -> PolicyStats:
    per_traj = np.mean((batch.p_unsafe - batch.outcomes) ** 2, axis=1)
    cost = batch.costs.sum(axis=1)
    b, bci = _mean_ci(per_traj)
    c, cci = _mean_ci(cost)
    mae = np.mean(np.abs(batch.p_unsafe - batch.outcomes), axis=0)
    return PolicyStats(name, k, b, bci, c, cci, batch.size, mae)


def evaluate(scenario, policies: dict, n_traj: int, seed: int, ks=None, workers: int = 1,
             product=None, keep_batches: bool = False) -> EvalReport:
    """Evaluate each named policy on ``n_traj`` episodes per lookahead.

    ``policies`` maps a name to a :class:`~apmon.policy.Policy`, or to
    ``None`` for the state oracle (zero cost, predictions from the true
    product state).  All policies share the episode seed stream, so they see
    identical physical trajectories.
    """
    if n_traj <= 0:
        raise EmptyEvaluation("n_traj must be positive")
    ks = [scenario.lookahead] if ks is None else list(ks)
    product = product if product is not None else scenario.product()
    cm = CostModel.from_scenario(scenario)
    seeds = [episode_seed(seed, EVAL_STREAM, 0, i) for i in range(n_traj)]
    stats, batches = [], {}
    for k in ks:
        sim = Simulator(product, scenario.horizon, k, cm)
        for name, pol in policies.items():
            batch = sim.run_chunked(pol, seeds, workers)
            stats.append(summarise(name, k, batch))
            if keep_batches:
                batches[(name, k)] = batch
    return EvalReport(stats, n_traj, scenario.horizon, scenario.alpha, seed, batches)


# --- CSV output ------------------------------------------------------------


def _fmt(x) -> str:
    return repr(float(x))


def emit_report_csv(report: EvalReport | list, path) -> None:
    stats = report.stats if isinstance(report, EvalReport) else report
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(REPORT_COLUMNS)
        for s in stats:
            w.writerow([s.policy, s.k, _fmt(s.brier), _fmt(s.brier_ci), _fmt(s.cost), _fmt(s.cost_ci)])


def read_report_csv(path) -> list[dict]:
    with open(path, encoding="utf-8", newline="") as fh:
        rows = list(csv.DictReader(fh))
    for r in rows:
        r["k"] = int(r["k"])
        for c in REPORT_COLUMNS[2:]:
            r[c] = float(r[c])
    return rows


def emit_trajectories_csv(batches: dict | list, path, policy_names=None) -> None:
    """Per-step rows; ``batches`` maps (policy, k) to a Batch, or is a list of records."""
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        cols = TRAJECTORY_COLUMNS if policy_names is None else ("policy", "k") + TRAJECTORY_COLUMNS
        w.writerow(cols)
        items = batches.items() if isinstance(batches, dict) else []
        for (name, k), b in items:
            for v in range(b.size):
                for t in range(b.p_safe.shape[1]):
                    q = b.queries[v, t] if b.queries.shape[1] else ""
                    o = b.observations[v, t] if b.observations.shape[1] else ""
                    row = [v, t, _fmt(b.p_unsafe[v, t]), int(b.outcomes[v, t]), q, o, _fmt(b.costs[v, t])]
                    w.writerow(row if policy_names is None else [name, k] + row)


def emit_accuracy_csv(report: EvalReport, path) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(ACCURACY_COLUMNS if len(report.ks) == 1 else ("k",) + ACCURACY_COLUMNS)
        for s in report.stats:
            for t, m in enumerate(s.mean_abs_error):
                row = [t, s.policy, _fmt(m)]
                w.writerow(row if len(report.ks) == 1 else [s.k] + row)


def emit_csv(obj, path) -> None:
    """Write a report (or a list of PolicyStats) as the Table-1 style CSV."""
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    emit_report_csv(obj, path)
