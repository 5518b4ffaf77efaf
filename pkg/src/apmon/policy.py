"""Query policies conditioned on the observation/query history.

Every policy works on a batch of V histories advanced in lockstep.  The
recurrent policy is a single LSTM layer over one-hot(o_t) + one-hot(sigma_t)
followed by a softmax readout; the distribution for sigma_t is read from the
state after consuming steps 0..t-1, so the step-0 choice comes from the
all-zero reset state (i.e. the output bias).  The tabular policy keys a logit
row on the last ``window`` observations.

Score gradients are computed in one backward pass for arbitrary per-step
weights (:meth:`grad_log_prob`); a single step's score is the special case of
a one-hot weight.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from apmon.errors import VariantMismatch


@dataclass(frozen=True, eq=False)
class EncoderState:
    variant: str
    step: int
    history_obs: np.ndarray  # (V, step)
    history_queries: np.ndarray  # (V, step)
    hidden: np.ndarray | None = None
    cell: np.ndarray | None = None
    window_code: np.ndarray | None = None

    @property
    def batch(self) -> int:
        return self.history_obs.shape[0]


def _softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def _append_history(state, obs, queries):
    obs = np.broadcast_to(np.asarray(obs, dtype=np.int64), (state.batch,))
    queries = np.broadcast_to(np.asarray(queries, dtype=np.int64), (state.batch,))
    return (
        np.concatenate([state.history_obs, obs[:, None]], axis=1),
        np.concatenate([state.history_queries, queries[:, None]], axis=1),
        obs,
        queries,
    )


class Policy:
    variant = "base"

    def __init__(self, n_obs: int, n_queries: int, params: np.ndarray, seed: int = 0):
        self.n_obs = n_obs
        self.n_queries = n_queries
        self.params = np.asarray(params, dtype=np.float64)
        self.seed = seed
        if not np.all(np.isfinite(self.params)):
            raise ValueError("policy parameters must be finite")

    @property
    def n_params(self) -> int:
        return self.params.size

    def flat(self) -> np.ndarray:
        return self.params.copy()

    def dims(self) -> dict:
        return {"n_obs": self.n_obs, "n_queries": self.n_queries}

    def with_params(self, flat) -> "Policy":
        flat = np.asarray(flat, dtype=np.float64)
        if flat.shape != self.params.shape:
            raise ValueError("flat parameter vector has the wrong size")
        return type(self)(params=flat, seed=self.seed, **self.dims())

    def initial_state(self, batch: int = 1) -> EncoderState:
        empty = np.zeros((batch, 0), dtype=np.int64)
        return EncoderState(self.variant, 0, empty, empty)

    def distribution(self, state: EncoderState) -> np.ndarray:
        raise NotImplementedError

    def advance(self, state: EncoderState, obs, queries) -> EncoderState:
        raise NotImplementedError

    def grad_log_prob(self, observations, queries, weights) -> np.ndarray:
        """sum_v sum_i weights[v, i] * grad log pi(queries[v, i] | history before i)."""
        raise NotImplementedError

    def _check(self, state: EncoderState):
        if state.variant != self.variant:
            raise VariantMismatch(f"{state.variant} state used with {self.variant} policy")


class UniformPolicy(Policy):
    variant = "uniform"

    def __init__(self, n_obs: int, n_queries: int, params=None, seed: int = 0):
        super().__init__(n_obs, n_queries, np.zeros(0), seed)

    def distribution(self, state):
        self._check(state)
        return np.full((state.batch, self.n_queries), 1.0 / self.n_queries)

    def advance(self, state, obs, queries):
        self._check(state)
        ho, hq, _, _ = _append_history(state, obs, queries)
        return EncoderState(self.variant, state.step + 1, ho, hq)

    def grad_log_prob(self, observations, queries, weights):
        return np.zeros(0)


class TabularPolicy(Policy):
    """Softmax over a logit table indexed by the last ``window`` observations."""

    variant = "tabular"

    def __init__(self, n_obs: int, n_queries: int, params=None, seed: int = 0, window: int = 2):
        self.window = window
        self._offsets = np.concatenate([[0], np.cumsum([n_obs**j for j in range(window + 1)])])
        self.n_rows = int(self._offsets[-1])
        if params is None:
            params = np.zeros(self.n_rows * n_queries)
        super().__init__(n_obs, n_queries, params, seed)

    def dims(self):
        return {**super().dims(), "window": self.window}

    @property
    def table(self) -> np.ndarray:
        return self.params.reshape(self.n_rows, self.n_queries)

    @classmethod
    def init(cls, n_obs, n_queries, seed=0, window=2):
        return cls(n_obs, n_queries, seed=seed, window=window)

    def initial_state(self, batch=1):
        base = super().initial_state(batch)
        return EncoderState(self.variant, 0, base.history_obs, base.history_queries,
                            window_code=np.zeros(batch, dtype=np.int64))

    def _row(self, step: int, code: np.ndarray) -> np.ndarray:
        return self._offsets[min(step, self.window)] + code

    def _next_code(self, step, code, obs):
        code = code * self.n_obs + obs
        if step + 1 > self.window:
            code = code % (self.n_obs**self.window)
        return code

    def rows_for(self, observations: np.ndarray) -> np.ndarray:
        """Row index used at every step 0..L-1 for observation histories (V, L)."""
        V, L = observations.shape
        rows = np.empty((V, L), dtype=np.int64)
        code = np.zeros(V, dtype=np.int64)
        for i in range(L):
            rows[:, i] = self._row(i, code)
            code = self._next_code(i, code, observations[:, i])
        return rows

    def distribution(self, state):
        self._check(state)
        return _softmax(self.table[self._row(state.step, state.window_code)])

    def advance(self, state, obs, queries):
        self._check(state)
        ho, hq, obs, _ = _append_history(state, obs, queries)
        code = self._next_code(state.step, state.window_code, obs)
        return EncoderState(self.variant, state.step + 1, ho, hq, window_code=code)

    def window_of(self, state: EncoderState) -> list[tuple]:
        m = min(state.step, self.window)
        return [tuple(int(o) for o in row[state.step - m:]) for row in state.history_obs]

    def grad_log_prob(self, observations, queries, weights):
        observations = np.asarray(observations)
        queries = np.asarray(queries)
        weights = np.asarray(weights, dtype=float)
        rows = self.rows_for(observations)
        probs = _softmax(self.table[rows])  # (V, L, nq)
        d = -probs * weights[..., None]
        np.put_along_axis(
            d, queries[..., None],
            np.take_along_axis(d, queries[..., None], -1) + weights[..., None], -1,
        )
        grad = np.zeros((self.n_rows, self.n_queries))
        np.add.at(grad, rows.ravel(), d.reshape(-1, self.n_queries))
        return grad.ravel()


class RecurrentPolicy(Policy):
    """LSTM encoder (gates i, f, o, g) with a softmax readout over queries."""

    variant = "recurrent"

    def __init__(self, n_obs: int, n_queries: int, params=None, seed: int = 0, hidden: int = 32):
        self.hidden = hidden
        self.n_in = n_obs + n_queries
        h = hidden
        self._shapes = [
            ("W", (4 * h, self.n_in)),
            ("U", (4 * h, h)),
            ("b", (4 * h,)),
            ("Wo", (n_queries, h)),
            ("bo", (n_queries,)),
        ]
        size = sum(int(np.prod(s)) for _, s in self._shapes)
        if params is None:
            params = np.zeros(size)
        if len(params) != size:
            raise ValueError(f"expected {size} parameters, got {len(params)}")
        super().__init__(n_obs, n_queries, params, seed)

    def dims(self):
        return {**super().dims(), "hidden": self.hidden}

    @classmethod
    def init(cls, n_obs, n_queries, seed=0, hidden=32, scale=0.08):
        pol = cls(n_obs, n_queries, seed=seed, hidden=hidden)
        rng = np.random.default_rng(seed)
        flat = rng.uniform(-scale, scale, pol.n_params)
        pol.unpack(flat)["bo"][:] = 0.0
        return cls(n_obs, n_queries, params=flat, seed=seed, hidden=hidden)

    def unpack(self, flat=None) -> dict:
        flat = self.params if flat is None else flat
        out, pos = {}, 0
        for name, shape in self._shapes:
            n = int(np.prod(shape))
            out[name] = flat[pos:pos + n].reshape(shape)
            pos += n
        return out

    def initial_state(self, batch=1):
        base = super().initial_state(batch)
        z = np.zeros((batch, self.hidden))
        return EncoderState(self.variant, 0, base.history_obs, base.history_queries,
                            hidden=z, cell=z.copy())

    def _cell(self, p, obs, queries, h, c):
        a = p["W"][:, obs].T + p["W"][:, self.n_obs + queries].T + h @ p["U"].T + p["b"]
        H = self.hidden
        i = _sigmoid(a[:, :H])
        f = _sigmoid(a[:, H:2 * H])
        o = _sigmoid(a[:, 2 * H:3 * H])
        g = np.tanh(a[:, 3 * H:])
        c_new = f * c + i * g
        tc = np.tanh(c_new)
        return o * tc, c_new, (i, f, o, g, tc)

    def distribution(self, state):
        self._check(state)
        p = self.unpack()
        return _softmax(state.hidden @ p["Wo"].T + p["bo"])

    def advance(self, state, obs, queries):
        self._check(state)
        ho, hq, obs, queries = _append_history(state, obs, queries)
        h, c, _ = self._cell(self.unpack(), obs, queries, state.hidden, state.cell)
        return EncoderState(self.variant, state.step + 1, ho, hq, hidden=h, cell=c)

    def grad_log_prob(self, observations, queries, weights):
        observations = np.asarray(observations, dtype=np.int64)
        queries = np.asarray(queries, dtype=np.int64)
        weights = np.asarray(weights, dtype=float)
        V, L = queries.shape
        p = self.unpack()
        H = self.hidden
        hs = [np.zeros((V, H))]
        cs = [np.zeros((V, H))]
        caches = [None]
        for i in range(1, L):
            h, c, cache = self._cell(p, observations[:, i - 1], queries[:, i - 1], hs[-1], cs[-1])
            hs.append(h)
            cs.append(c)
            caches.append(cache)
        g = {name: np.zeros(shape) for name, shape in self._shapes}
        dh = [None] * L
        rows = np.arange(V)
        for i in range(L):
            probs = _softmax(hs[i] @ p["Wo"].T + p["bo"])
            dl = -probs
            dl[rows, queries[:, i]] += 1.0
            dl *= weights[:, i:i + 1]
            g["Wo"] += dl.T @ hs[i]
            g["bo"] += dl.sum(axis=0)
            dh[i] = dl @ p["Wo"]
        dh_next = np.zeros((V, H))
        dc_next = np.zeros((V, H))
        for i in range(L - 1, 0, -1):
            ig, fg, og, gg, tc = caches[i]
            dhi = dh[i] + dh_next
            do = dhi * tc
            dc = dc_next + dhi * og * (1.0 - tc**2)
            di = dc * gg
            dg = dc * ig
            df = dc * cs[i - 1]
            da = np.concatenate(
                [di * ig * (1 - ig), df * fg * (1 - fg), do * og * (1 - og), dg * (1 - gg**2)],
                axis=1,
            )
            np.add.at(g["W"].T, observations[:, i - 1], da)
            np.add.at(g["W"].T, self.n_obs + queries[:, i - 1], da)
            g["U"] += da.T @ hs[i - 1]
            g["b"] += da.sum(axis=0)
            dh_next = da @ p["U"]
            dc_next = dc * fg
        return np.concatenate([g[name].ravel() for name, _ in self._shapes])


VARIANTS = {cls.variant: cls for cls in (UniformPolicy, TabularPolicy, RecurrentPolicy)}


def make_policy(variant: str, n_obs: int, n_queries: int, seed: int = 0, **kw) -> Policy:
    if variant == "recurrent":
        return RecurrentPolicy.init(n_obs, n_queries, seed=seed, hidden=kw.get("hidden", 32))
    if variant == "tabular":
        return TabularPolicy.init(n_obs, n_queries, seed=seed, window=kw.get("window", 2))
    if variant == "uniform":
        return UniformPolicy(n_obs, n_queries, seed=seed)
    raise VariantMismatch(f"unknown policy variant {variant!r}")


# --- functional surface ----------------------------------------------------


def action_distribution(policy: Policy, enc: EncoderState) -> np.ndarray:
    return policy.distribution(enc)


def advance(policy: Policy, enc: EncoderState, obs, query) -> EncoderState:
    return policy.advance(enc, obs, query)


def step_score(policy: Policy, enc: EncoderState, chosen) -> np.ndarray:
    """grad log pi(chosen | history in enc) for each batch row, shape (V, n_params)."""
    policy._check(enc)
    chosen = np.broadcast_to(np.asarray(chosen, dtype=np.int64), (enc.batch,))
    out = np.zeros((enc.batch, policy.n_params))
    t = enc.step
    w = np.zeros((1, t + 1))
    w[0, t] = 1.0
    for v in range(enc.batch):
        obs = np.concatenate([enc.history_obs[v], [0]])[None]
        qs = np.concatenate([enc.history_queries[v], [chosen[v]]])[None]
        out[v] = policy.grad_log_prob(obs, qs, w)
    return out


def inverse_cdf(probs: np.ndarray, u: np.ndarray) -> np.ndarray:
    """First index whose cumulative probability exceeds u, row-wise.

    Round-off that leaves the total just under u falls back to the last index
    with positive probability, so zero-probability outcomes are never drawn.
    """
    probs = np.atleast_2d(probs)
    u = np.atleast_1d(u)
    cum = np.cumsum(probs, axis=-1)
    idx = (cum <= u[:, None]).sum(axis=-1)
    last = probs.shape[-1] - 1 - np.argmax(probs[:, ::-1] > 0, axis=-1)
    return np.minimum(idx, last)


def sample_action(policy: Policy, enc: EncoderState, rng, u=None):
    """Draw sigma ~ pi(. | enc) by inverse CDF in declaration order; returns (sigma, log-prob)."""
    probs = policy.distribution(enc)
    if u is None:
        u = rng.random(enc.batch)
    a = inverse_cdf(probs, u)
    return a, np.log(probs[np.arange(enc.batch), a])


# --- checkpoints -----------------------------------------------------------


def save_checkpoint(policy: Policy, path, iteration: int = 0, **meta) -> None:
    doc = {
        "variant": policy.variant,
        "dims": policy.dims(),
        "seed": int(policy.seed),
        "iteration": int(iteration),
        "meta": meta,
        "params": [float(x) for x in policy.params],
    }
    Path(path).write_text(json.dumps(doc) + "\n", encoding="utf-8")


def load_checkpoint(path) -> tuple[Policy, dict]:
    doc = json.loads(Path(path).read_text(encoding="utf-8"))
    cls = VARIANTS.get(doc.get("variant"))
    if cls is None:
        raise VariantMismatch(f"unknown policy variant {doc.get('variant')!r}")
    params = np.array(doc["params"], dtype=np.float64)
    policy = cls(params=params, seed=doc["seed"], **doc["dims"])
    return policy, {"iteration": doc["iteration"], **doc.get("meta", {})}
