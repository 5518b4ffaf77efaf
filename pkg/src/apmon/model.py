"""Labeled HMMs with controllable emissions, failure DFAs, and their product."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np
import scipy.sparse as sp

from apmon.errors import InvalidModel, UndefinedDfaTransition

STOCHASTIC_TOL = 1e-12

Label = frozenset


def _check_stochastic_rows(matrix: sp.csr_matrix, what: str, names: Sequence[str]) -> None:
    if matrix.nnz and matrix.data.min() < 0:
        raise InvalidModel(f"{what} has a negative entry")
    sums = np.asarray(matrix.sum(axis=1)).ravel()
    bad = np.flatnonzero(np.abs(sums - 1.0) > STOCHASTIC_TOL)
    if bad.size:
        i = int(bad[0])
        raise InvalidModel(f"{what} row {names[i]!r} sums to {sums[i]:.15g}, not 1")


@dataclass(frozen=True, eq=False)
class LabeledHmm:
    """Finite HMM whose emission distribution depends on a chosen query.

    ``transition[s, s2]`` is P(s2 | s) and ``emission[s, q, o]`` is
    E(o | s, q).  ``labels[s]`` is the set of atomic propositions true in s.
    """

    states: tuple[str, ...]
    transition: sp.csr_matrix
    observations: tuple[str, ...]
    queries: tuple[str, ...]
    initial: np.ndarray
    initial_query: int
    emission: np.ndarray
    labels: tuple[frozenset, ...]

    def __post_init__(self):
        n = len(self.states)
        object.__setattr__(self, "transition", sp.csr_matrix(self.transition, dtype=float))
        object.__setattr__(self, "initial", np.asarray(self.initial, dtype=float))
        object.__setattr__(self, "emission", np.asarray(self.emission, dtype=float))
        object.__setattr__(self, "labels", tuple(frozenset(l) for l in self.labels))
        if self.transition.shape != (n, n):
            raise InvalidModel(f"transition shape {self.transition.shape} != ({n}, {n})")
        _check_stochastic_rows(self.transition, "transition", self.states)
        if self.initial.shape != (n,):
            raise InvalidModel("initial distribution has the wrong length")
        if self.initial.min() < 0 or abs(self.initial.sum() - 1.0) > STOCHASTIC_TOL:
            raise InvalidModel("initial distribution is not a probability vector")
        shape = (n, len(self.queries), len(self.observations))
        if self.emission.shape != shape:
            raise InvalidModel(f"emission shape {self.emission.shape} != {shape}")
        if self.emission.min() < 0:
            raise InvalidModel("emission has a negative entry")
        sums = self.emission.sum(axis=2)
        bad = np.argwhere(np.abs(sums - 1.0) > STOCHASTIC_TOL)
        if bad.size:
            s, q = bad[0]
            raise InvalidModel(
                f"emission for state {self.states[s]!r}, query {self.queries[q]!r} "
                f"sums to {sums[s, q]:.15g}"
            )
        if not 0 <= self.initial_query < len(self.queries):
            raise InvalidModel("initial_query out of range")
        if len(self.labels) != n:
            raise InvalidModel("labels must have one entry per state")

    @property
    def atomic_props(self) -> frozenset:
        return frozenset().union(*self.labels)


@dataclass(frozen=True, eq=False)
class Dfa:
    """Deterministic automaton over label sets; ``accepting`` marks failure."""

    states: tuple[str, ...]
    delta: Mapping[tuple[int, frozenset], int]
    initial: int
    accepting: frozenset

    def __post_init__(self):
        object.__setattr__(self, "delta", {(q, frozenset(l)): t for (q, l), t in self.delta.items()})
        object.__setattr__(self, "accepting", frozenset(self.accepting))
        n = len(self.states)
        if not 0 <= self.initial < n:
            raise InvalidModel("DFA initial state out of range")
        if any(not 0 <= q < n for q in self.accepting):
            raise InvalidModel("DFA accepting state out of range")
        for (q, _), t in self.delta.items():
            if not (0 <= q < n and 0 <= t < n):
                raise InvalidModel("DFA transition references an unknown state")

    def step(self, q: int, label: frozenset) -> int:
        try:
            return self.delta[(q, frozenset(label))]
        except KeyError:
            raise UndefinedDfaTransition(
                f"no DFA transition from {self.states[q]!r} on {sorted(label)}"
            ) from None


@dataclass(frozen=True, eq=False)
class ProductHmm:
    """Synchronous product of a labeled HMM and a failure DFA.

    Product state ``z`` pairs HMM state ``state_of[z]`` with DFA state
    ``dfa_of[z]``.  ``transition[z, z2]`` is P(z2 | z); ``emission[z, q, o]``
    is inherited from the HMM state.  ``original_index`` maps back to the
    unpruned ``s * |Q| + q`` index.
    """

    transition: sp.csr_matrix
    emission: np.ndarray
    initial: np.ndarray
    failure: np.ndarray
    state_of: np.ndarray
    dfa_of: np.ndarray
    original_index: np.ndarray
    hmm: LabeledHmm
    dfa: Dfa
    failure_absorbing: bool = field(default=False)
    fingerprint: str = ""

    @property
    def n_states(self) -> int:
        return self.transition.shape[0]

    @property
    def n_queries(self) -> int:
        return self.emission.shape[1]

    @property
    def n_observations(self) -> int:
        return self.emission.shape[2]

    def state_name(self, z: int) -> str:
        return f"({self.hmm.states[self.state_of[z]]},{self.dfa.states[self.dfa_of[z]]})"


def _fingerprint(transition: sp.csr_matrix, emission: np.ndarray, initial, failure) -> str:
    import hashlib

    h = hashlib.sha256()
    for arr in (transition.indptr, transition.indices, transition.data, emission, initial, failure):
        h.update(np.ascontiguousarray(arr).tobytes())
    return h.hexdigest()[:16]


def product_compose(hmm: LabeledHmm, dfa: Dfa, prune: bool = False) -> ProductHmm:
    """Build the product HMM over Z = S x Q.

    The full product is kept unless ``prune`` is set, in which case states
    unreachable from the initial distribution are dropped and indices are
    relabeled (``original_index`` records the mapping).
    """
    for s, label in enumerate(hmm.labels):
        for q in range(len(dfa.states)):
            if (q, label) not in dfa.delta:
                raise UndefinedDfaTransition(
                    f"no DFA transition from {dfa.states[q]!r} on label "
                    f"{sorted(label)} of state {hmm.states[s]!r}"
                )
    nq = len(dfa.states)
    ns = len(hmm.states)
    coo = hmm.transition.tocoo()
    rows, cols, vals = [], [], []
    for q in range(nq):
        q_next = np.array([dfa.delta[(q, hmm.labels[s2])] for s2 in coo.col], dtype=np.int64)
        rows.append(coo.row * nq + q)
        cols.append(coo.col * nq + q_next)
        vals.append(coo.data)
    n = ns * nq
    transition = sp.csr_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=(n, n)
    )
    transition.sum_duplicates()
    transition.sort_indices()
    state_of = np.repeat(np.arange(ns), nq)
    dfa_of = np.tile(np.arange(nq), ns)
    initial = np.zeros(n)
    initial[np.arange(ns) * nq + dfa.initial] = hmm.initial
    failure = np.isin(dfa_of, list(dfa.accepting))
    keep = np.arange(n)
    if prune:
        keep = _reachable(transition, initial)
        transition = transition[keep][:, keep].tocsr()
        transition.sort_indices()
        initial = initial[keep]
        failure = failure[keep]
        state_of = state_of[keep]
        dfa_of = dfa_of[keep]
    emission = hmm.emission[state_of]
    _check_stochastic_rows(transition, "product transition", [str(i) for i in range(len(keep))])
    product = ProductHmm(
        transition=transition,
        emission=emission,
        initial=initial,
        failure=failure,
        state_of=state_of,
        dfa_of=dfa_of,
        original_index=keep,
        hmm=hmm,
        dfa=dfa,
        fingerprint=_fingerprint(transition, emission, initial, failure),
    )
    object.__setattr__(product, "failure_absorbing", detect_absorbing(product))
    return product


def _reachable(transition: sp.csr_matrix, initial: np.ndarray) -> np.ndarray:
    seen = initial > 0
    frontier = seen.copy()
    adj = (transition > 0).T.tocsr()
    while frontier.any():
        nxt = (adj @ frontier.astype(np.int8)) > 0
        frontier = nxt & ~seen
        seen |= nxt
    return np.flatnonzero(seen)


def detect_absorbing(product: ProductHmm) -> bool:
    """True iff no failure state has a transition back into the safe set."""
    fail_rows = product.transition[np.flatnonzero(product.failure)]
    if fail_rows.shape[0] == 0:
        return True
    leaks = fail_rows[:, np.flatnonzero(~product.failure)]
    return bool(leaks.nnz == 0 or np.all(leaks.data == 0))
