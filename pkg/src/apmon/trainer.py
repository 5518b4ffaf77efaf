"""Trajectory sampling under a query policy and policy-gradient training.

Randomness: every episode owns a generator seeded from
``(master seed, stream, iteration, index)`` through :class:`numpy.random.SeedSequence`
and draws its uniforms in a fixed layout (state draws, then query draws,
then observation draws).  Physical trajectories therefore depend only on the
episode seed, never on the policy, and any two policies evaluated on the same
seeds see the same true states.  Batches are simulated in fixed chunks of
``CHUNK`` episodes and reduced in index order, which keeps results identical
for any worker count.
"""

from __future__ import annotations

import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass

import numpy as np

from apmon.errors import ModelMismatch, NonFiniteGradient
from apmon.model import ProductHmm
from apmon.objective import CostModel, ObjectiveSample, binary_entropy, reward_to_go
from apmon.oom import (
    FilterState,
    SafetyPredictor,
    build_operators,
    build_safety_predictor,
    filter_init,
    filter_step,
    safety_probability,
)
from apmon.policy import Policy, inverse_cdf, make_policy, save_checkpoint

log = logging.getLogger(__name__)

CHUNK = 16
TRAIN_STREAM = 0
EVAL_STREAM = 1
LOG_COLUMNS = ("iter", "entropy_term", "cost_term", "objective", "grad_norm", "clip_applied")


def episode_seed(master: int, stream: int, iteration: int, index: int) -> int:
    ss = np.random.SeedSequence([int(master) & (2**64 - 1), stream, iteration, index])
    return int(ss.generate_state(1, dtype=np.uint64)[0])


@dataclass
class TrajectoryRecord:
    states: np.ndarray  # z_0 .. z_{K+k}
    queries: np.ndarray  # sigma_0 .. sigma_K (empty for the oracle)
    observations: np.ndarray
    p_unsafe: np.ndarray  # predicted P(W_t^k = 1), t = 0..K
    outcomes: np.ndarray  # realised w_t^k
    costs: np.ndarray
    entropy: np.ndarray
    episode_seed: int


@dataclass
class Batch:
    """Lockstep simulation results; every array has a leading episode axis."""

    states: np.ndarray
    queries: np.ndarray
    observations: np.ndarray
    p_safe: np.ndarray
    entropy: np.ndarray
    costs: np.ndarray
    outcomes: np.ndarray
    log_lik: np.ndarray
    seeds: np.ndarray

    @property
    def size(self) -> int:
        return self.states.shape[0]

    @property
    def p_unsafe(self) -> np.ndarray:
        return 1.0 - self.p_safe

    def record(self, v: int) -> TrajectoryRecord:
        return TrajectoryRecord(
            states=self.states[v],
            queries=self.queries[v],
            observations=self.observations[v],
            p_unsafe=self.p_unsafe[v],
            outcomes=self.outcomes[v],
            costs=self.costs[v],
            entropy=self.entropy[v],
            episode_seed=int(self.seeds[v]),
        )

    def objective_samples(self, policy: Policy) -> list[ObjectiveSample]:
        """Per-episode samples with explicit cumulative per-step scores (slow; for checks)."""
        out = []
        for v in range(self.size):
            L = self.queries.shape[1]
            obs, qs = self.observations[v:v + 1], self.queries[v:v + 1]
            scores = np.empty((L, policy.n_params))
            for i in range(L):
                w = np.zeros((1, L))
                w[0, i] = 1.0
                scores[i] = policy.grad_log_prob(obs, qs, w)
            out.append(ObjectiveSample(self.entropy[v], self.costs[v], np.cumsum(scores, axis=0), v))
        return out

    @staticmethod
    def concat(parts: list["Batch"]) -> "Batch":
        return Batch(**{f: np.concatenate([getattr(b, f) for b in parts]) for f in Batch.__dataclass_fields__})


def realised_outcomes(failure_path: np.ndarray, K: int, k: int) -> np.ndarray:
    """w_t^k = 1 iff a failure state occurs in steps t..t+k, for t = 0..K."""
    c = np.concatenate([np.zeros(failure_path.shape[:-1] + (1,)), np.cumsum(failure_path, -1)], -1)
    t = np.arange(K + 1)
    return (c[..., t + k + 1] - c[..., t] > 0).astype(np.int8)


class Simulator:
    """Samples the policy-induced process on one product model."""

    def __init__(self, product: ProductHmm, horizon: int, lookahead: int, cost_model: CostModel):
        self.product = product
        self.K = horizon
        self.k = lookahead
        self.cost_model = cost_model
        self.ops = build_operators(product)
        self.predictor = build_safety_predictor(product, lookahead)
        P = product.transition
        counts = np.diff(P.indptr)
        width = int(counts.max())
        self._succ = np.zeros((product.n_states, width), dtype=np.int64)
        self._succ_p = np.zeros((product.n_states, width))
        for z in range(product.n_states):
            lo, hi = P.indptr[z], P.indptr[z + 1]
            self._succ[z, : hi - lo] = P.indices[lo:hi]
            self._succ_p[z, : hi - lo] = P.data[lo:hi]

    def uniforms(self, seed: int):
        rng = np.random.default_rng(seed)
        return rng.random(self.K + self.k + 1), rng.random(self.K + 1), rng.random(self.K + 1)

    def states_for(self, u_state: np.ndarray) -> np.ndarray:
        V, L = u_state.shape
        z = np.empty((V, L), dtype=np.int64)
        z[:, 0] = inverse_cdf(np.broadcast_to(self.product.initial, (V, self.product.n_states)), u_state[:, 0])
        for j in range(1, L):
            prev = z[:, j - 1]
            choice = inverse_cdf(self._succ_p[prev], u_state[:, j])
            z[:, j] = self._succ[prev, choice]
        return z

    def run(self, policy: Policy | None, seeds) -> Batch:
        """Simulate one episode per seed; ``policy=None`` is the state oracle."""
        seeds = np.asarray(seeds, dtype=np.uint64)
        V, K, k = len(seeds), self.K, self.k
        draws = [self.uniforms(int(s)) for s in seeds]
        u_state = np.array([d[0] for d in draws]).reshape(V, K + k + 1)
        u_act = np.array([d[1] for d in draws]).reshape(V, K + 1)
        u_obs = np.array([d[2] for d in draws]).reshape(V, K + 1)
        z = self.states_for(u_state)
        outcomes = realised_outcomes(self.product.failure[z], K, k)
        if policy is None:
            p_safe = self.predictor.safe_row[z[:, : K + 1]]
            empty = np.zeros((V, 0), dtype=np.int64)
            return Batch(z, empty, empty, p_safe, binary_entropy(p_safe), np.zeros((V, K + 1)),
                         outcomes, np.zeros((V, K + 1)), seeds)
        queries = np.empty((V, K + 1), dtype=np.int64)
        obs = np.empty((V, K + 1), dtype=np.int64)
        p_safe = np.empty((V, K + 1))
        loglik = np.empty((V, K + 1))
        enc = policy.initial_state(V)
        f: FilterState | None = None
        for t in range(K + 1):
            q = inverse_cdf(policy.distribution(enc), u_act[:, t])
            o = inverse_cdf(self.product.emission[z[:, t], q], u_obs[:, t])
            f = filter_init(self.product, q, o) if t == 0 else filter_step(f, self.ops, q, o)
            queries[:, t] = q
            obs[:, t] = o
            p_safe[:, t] = safety_probability(f, self.predictor)
            loglik[:, t] = f.log_likelihood
            if t < K:
                enc = policy.advance(enc, o, q)
        costs = self.cost_model.step_costs(queries)
        return Batch(z, queries, obs, p_safe, binary_entropy(p_safe), costs, outcomes, loglik, seeds)

    def run_chunked(self, policy, seeds, workers: int = 1) -> Batch:
        seeds = list(seeds)
        chunks = [seeds[i:i + CHUNK] for i in range(0, len(seeds), CHUNK)]
        if workers <= 1 or len(chunks) == 1:
            return Batch.concat([self.run(policy, c) for c in chunks])
        with ProcessPoolExecutor(max_workers=workers, initializer=_pool_init, initargs=(self,)) as ex:
            return Batch.concat(list(ex.map(_pool_run, [policy] * len(chunks), chunks)))


_POOL_SIM: Simulator | None = None


def _pool_init(sim):
    global _POOL_SIM
    _POOL_SIM = sim


def _pool_run(policy, seeds):
    return _POOL_SIM.run(policy, seeds)


def sample_trajectory(product: ProductHmm, ops, sp: SafetyPredictor, policy: Policy, episode_seed: int,
                      horizon: int, cost_model: CostModel):
    """Simulate one episode; returns its record and an objective sample with scores."""
    if ops.model_ref != product.fingerprint or sp.model_ref != product.fingerprint:
        raise ModelMismatch("operators/predictor were built from a different model")
    sim = Simulator(product, horizon, sp.k, cost_model)
    batch = sim.run(policy, [episode_seed])
    return batch.record(0), batch.objective_samples(policy)[0]


# --- optimisation ----------------------------------------------------------


@dataclass
class TrainConfig:
    learning_rate: float = 1e-2
    batch_size: int = 64
    iterations: int = 3000
    seed: int = 0
    optimizer: str = "sgd"
    clip_norm: float = 5.0
    baseline: bool = False
    full_episode_score: bool = False
    eval_every: int = 0
    policy: str = "recurrent"
    hidden: int = 32
    window: int = 2
    horizon: int | None = None
    lookahead: int | None = None
    alpha: float | None = None
    prune: bool = False
    workers: int = 1
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8

    def __post_init__(self):
        if not self.learning_rate >= 0:
            raise ValueError("learning_rate must be >= 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.optimizer not in ("sgd", "adam"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")


class Sgd:
    def __init__(self, cfg: TrainConfig):
        self.lr = cfg.learning_rate

    def step(self, params, grad):
        return params - self.lr * grad


class Adam:
    def __init__(self, cfg: TrainConfig):
        self.lr = cfg.learning_rate
        self.b1, self.b2, self.eps = cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps
        self.m = self.v = None
        self.t = 0

    def step(self, params, grad):
        if self.m is None:
            self.m = np.zeros_like(params)
            self.v = np.zeros_like(params)
        self.t += 1
        self.m = self.b1 * self.m + (1 - self.b1) * grad
        self.v = self.b2 * self.v + (1 - self.b2) * grad**2
        mhat = self.m / (1 - self.b1**self.t)
        vhat = self.v / (1 - self.b2**self.t)
        return params - self.lr * mhat / (np.sqrt(vhat) + self.eps)


def make_optimizer(cfg: TrainConfig):
    return Adam(cfg) if cfg.optimizer == "adam" else Sgd(cfg)


def batch_gradient(policy: Policy, batch: Batch, K: int, alpha: float, cfg: TrainConfig) -> np.ndarray:
    """Score-function estimate of the objective gradient from one batch."""
    base = batch.entropy.mean(axis=0) if cfg.baseline else None
    weights = reward_to_go(batch.entropy, batch.costs, K, alpha, cfg.full_episode_score, base)
    g = np.zeros(policy.n_params)
    for lo in range(0, batch.size, CHUNK):
        sl = slice(lo, lo + CHUNK)
        g += policy.grad_log_prob(batch.observations[sl], batch.queries[sl], weights[sl])
    return g / batch.size


def gradient_step(policy: Policy, batch: Batch, cfg: TrainConfig, optimizer, K: int, alpha: float):
    g = batch_gradient(policy, batch, K, alpha, cfg)
    if not np.all(np.isfinite(g)):
        raise NonFiniteGradient(f"non-finite gradient (norm {np.linalg.norm(g)})")
    norm = float(np.linalg.norm(g))
    clipped = bool(cfg.clip_norm and norm > cfg.clip_norm)
    if clipped:
        g = g * (cfg.clip_norm / norm)
    new = policy.with_params(optimizer.step(policy.params, g)) if policy.n_params else policy
    entropy_term = float(batch.entropy.mean(axis=0).sum() / K)
    cost_term = float(alpha * batch.costs.mean(axis=0).sum())
    diag = {
        "entropy_term": entropy_term,
        "cost_term": cost_term,
        "objective": entropy_term + cost_term,
        "grad_norm": norm,
        "clip_applied": int(clipped),
    }
    return new, diag


def format_log_row(it: int, diag: dict) -> str:
    return ",".join(
        [str(it)] + [repr(float(diag[c])) if c != "clip_applied" else str(diag[c]) for c in LOG_COLUMNS[1:]]
    )


def train(scenario, cfg: TrainConfig, policy: Policy | None = None, log_path=None, checkpoint_path=None,
          scenario_hash: str = "", on_iteration=None):
    """Run ``cfg.iterations`` rounds of sample-then-descend.

    Returns the final policy and the list of per-iteration diagnostics.  The
    CSV log (if requested) is flushed after every row so partial runs keep
    their history.
    """
    K = cfg.horizon if cfg.horizon is not None else scenario.horizon
    k = cfg.lookahead if cfg.lookahead is not None else scenario.lookahead
    alpha = cfg.alpha if cfg.alpha is not None else scenario.alpha
    product = scenario.product(prune=cfg.prune)
    cm = CostModel(scenario.cost_matrix, alpha, scenario.hmm.initial_query)
    sim = Simulator(product, K, k, cm)
    if policy is None:
        policy = make_policy(cfg.policy, product.n_observations, product.n_queries, seed=cfg.seed,
                             hidden=cfg.hidden, window=cfg.window)
    opt = make_optimizer(cfg)
    history = []
    meta = {"scenario_hash": scenario_hash, "horizon": K, "lookahead": k, "alpha": alpha}
    fh = open(log_path, "w", encoding="utf-8", newline="") if log_path else None
    try:
        if fh:
            fh.write(",".join(LOG_COLUMNS) + "\n")
        for it in range(cfg.iterations):
            seeds = [episode_seed(cfg.seed, TRAIN_STREAM, it, v) for v in range(cfg.batch_size)]
            batch = sim.run_chunked(policy, seeds, cfg.workers)
            policy, diag = gradient_step(policy, batch, cfg, opt, K, alpha)
            history.append(diag)
            if fh:
                fh.write(format_log_row(it, diag) + "\n")
                fh.flush()
            if on_iteration:
                on_iteration(it, policy, diag)
            if checkpoint_path and cfg.eval_every and (it + 1) % cfg.eval_every == 0:
                save_checkpoint(policy, checkpoint_path, it + 1, **meta)
    finally:
        if fh:
            fh.close()
    if checkpoint_path:
        save_checkpoint(policy, checkpoint_path, cfg.iterations, **meta)
    return policy, history
