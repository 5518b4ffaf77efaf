"""Scenario files: a labeled HMM, a failure DFA, horizons and query costs.

The on-disk format is UTF-8 JSON.  Names are resolved to indices on load and
every model invariant is checked, so a loaded :class:`Scenario` is always
valid.  :func:`dumps_scenario` writes a canonical form (fixed key order,
sorted DFA transitions) so that save -> load -> save is byte-identical.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.sparse as sp

from apmon.errors import InvalidModel, ParseError, SchemaError, ValidationError
from apmon.model import STOCHASTIC_TOL, Dfa, LabeledHmm, ProductHmm, product_compose

TOP_LEVEL_KEYS = (
    "states",
    "transitions",
    "queries",
    "observations",
    "emissions",
    "initial",
    "initial_query",
    "dfa",
    "cost_matrix",
    "alpha",
    "horizon",
    "lookahead",
)


@dataclass(frozen=True, eq=False)
class Scenario:
    hmm: LabeledHmm
    dfa: Dfa
    horizon: int
    lookahead: int
    cost_matrix: np.ndarray
    alpha: float
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        cm = np.asarray(self.cost_matrix, dtype=float)
        object.__setattr__(self, "cost_matrix", cm)
        nq = len(self.hmm.queries)
        if cm.shape != (nq, nq):
            raise InvalidModel(f"cost_matrix shape {cm.shape} != ({nq}, {nq})")
        if cm.min(initial=0.0) < 0:
            raise InvalidModel("cost_matrix has a negative entry")
        if self.alpha < 0:
            raise InvalidModel("alpha must be >= 0")
        if self.horizon < 1 or self.lookahead < 0:
            raise InvalidModel("horizon must be >= 1 and lookahead >= 0")

    def product(self, prune: bool = False) -> ProductHmm:
        return product_compose(self.hmm, self.dfa, prune=prune)

    def with_overrides(self, **kw) -> "Scenario":
        args = dict(
            hmm=self.hmm,
            dfa=self.dfa,
            horizon=self.horizon,
            lookahead=self.lookahead,
            cost_matrix=self.cost_matrix,
            alpha=self.alpha,
            metadata=dict(self.metadata),
        )
        args.update({k: v for k, v in kw.items() if v is not None})
        return Scenario(**args)

    def content_hash(self) -> str:
        return hashlib.sha256(dumps_scenario(self).encode("utf-8")).hexdigest()


# --- serialization ---------------------------------------------------------


def scenario_to_dict(sc: Scenario) -> dict:
    hmm, dfa = sc.hmm, sc.dfa
    S, Q, O = hmm.states, hmm.queries, hmm.observations
    trans = hmm.transition.tocsr()
    trans.sort_indices()
    transitions = []
    for s in range(len(S)):
        lo, hi = trans.indptr[s], trans.indptr[s + 1]
        for j, p in zip(trans.indices[lo:hi], trans.data[lo:hi]):
            if p != 0:
                transitions.append({"from": S[s], "to": S[j], "p": float(p)})
    emissions = [
        {"state": S[s], "query": Q[q], "obs": O[o], "p": float(hmm.emission[s, q, o])}
        for s, q, o in zip(*np.nonzero(hmm.emission))
    ]
    dfa_trans = sorted(
        ((q, tuple(sorted(label)), t) for (q, label), t in dfa.delta.items()),
        key=lambda x: (x[0], len(x[1]), x[1]),
    )
    doc = {}
    if sc.metadata:
        doc["metadata"] = dict(sorted(sc.metadata.items()))
    doc.update(
        {
            "states": [{"name": n, "label": sorted(l)} for n, l in zip(S, hmm.labels)],
            "transitions": transitions,
            "queries": list(Q),
            "observations": list(O),
            "emissions": emissions,
            "initial": [{"state": S[s], "p": float(hmm.initial[s])} for s in np.flatnonzero(hmm.initial)],
            "initial_query": Q[hmm.initial_query],
            "dfa": {
                "states": list(dfa.states),
                "initial": dfa.states[dfa.initial],
                "accepting": [dfa.states[q] for q in sorted(dfa.accepting)],
                "transitions": [
                    {"from": dfa.states[q], "label": list(l), "to": dfa.states[t]}
                    for q, l, t in dfa_trans
                ],
            },
            "cost_matrix": [[float(c) for c in row] for row in sc.cost_matrix],
            "alpha": float(sc.alpha),
            "horizon": int(sc.horizon),
            "lookahead": int(sc.lookahead),
        }
    )
    return doc


def dumps_scenario(sc: Scenario) -> str:
    doc = scenario_to_dict(sc)
    lines = ["{"]
    items = list(doc.items())
    for i, (key, value) in enumerate(items):
        sep = "," if i < len(items) - 1 else ""
        if isinstance(value, list) and value and isinstance(value[0], (dict, list)):
            lines.append(f" {json.dumps(key)}: [")
            for j, entry in enumerate(value):
                esep = "," if j < len(value) - 1 else ""
                lines.append(f"  {json.dumps(entry, ensure_ascii=False)}{esep}")
            lines.append(f" ]{sep}")
        else:
            lines.append(f" {json.dumps(key)}: {json.dumps(value, ensure_ascii=False)}{sep}")
    lines.append("}")
    return "\n".join(lines) + "\n"


def save_scenario(sc: Scenario, path) -> None:
    Path(path).write_text(dumps_scenario(sc), encoding="utf-8")


def parse_scenario_text(text: str) -> dict:
    if not text.strip():
        raise ParseError("scenario file is empty")
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ParseError(f"malformed JSON: {exc}") from None
    if not isinstance(doc, dict):
        raise ParseError("scenario must be a JSON object")
    return doc


def load_scenario(path) -> Scenario:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except UnicodeDecodeError as exc:
        raise ParseError(f"not UTF-8: {exc}") from None
    return scenario_from_dict(parse_scenario_text(text))


def scenario_from_dict(doc: dict) -> Scenario:
    problems = scenario_problems(doc)
    if problems:
        path, message = problems[0]
        detail = message if len(problems) == 1 else f"{message} (+{len(problems) - 1} more)"
        raise ValidationError(detail, path)
    return _build(doc)


def _require(doc, key, kind, path=""):
    full = f"{path}.{key}" if path else key
    if key not in doc:
        raise SchemaError(f"missing field {full!r}")
    value = doc[key]
    if kind is float:
        ok = isinstance(value, (int, float)) and not isinstance(value, bool)
    elif kind is int:
        ok = isinstance(value, int) and not isinstance(value, bool)
    else:
        ok = isinstance(value, kind)
    if not ok:
        raise SchemaError(f"field {full!r} must be {kind.__name__}")
    return value


def _check_schema(doc: dict) -> None:
    for key, kind in [
        ("states", list),
        ("transitions", list),
        ("queries", list),
        ("observations", list),
        ("emissions", list),
        ("initial", list),
        ("initial_query", str),
        ("dfa", dict),
        ("cost_matrix", list),
        ("alpha", float),
        ("horizon", int),
        ("lookahead", int),
    ]:
        _require(doc, key, kind)
    for i, st in enumerate(doc["states"]):
        p = f"states[{i}]"
        if not isinstance(st, dict):
            raise SchemaError(f"{p} must be an object")
        _require(st, "name", str, p)
        _require(st, "label", list, p)
    for name, keys in [
        ("transitions", (("from", str), ("to", str), ("p", float))),
        ("emissions", (("state", str), ("query", str), ("obs", str), ("p", float))),
        ("initial", (("state", str), ("p", float))),
    ]:
        for i, entry in enumerate(doc[name]):
            p = f"{name}[{i}]"
            if not isinstance(entry, dict):
                raise SchemaError(f"{p} must be an object")
            for k, kind in keys:
                _require(entry, k, kind, p)
    dfa = doc["dfa"]
    _require(dfa, "states", list, "dfa")
    _require(dfa, "initial", str, "dfa")
    _require(dfa, "accepting", list, "dfa")
    _require(dfa, "transitions", list, "dfa")
    for i, entry in enumerate(dfa["transitions"]):
        p = f"dfa.transitions[{i}]"
        if not isinstance(entry, dict):
            raise SchemaError(f"{p} must be an object")
        _require(entry, "from", str, p)
        _require(entry, "label", list, p)
        _require(entry, "to", str, p)


def scenario_problems(doc: dict) -> list[tuple[str, str]]:
    """Return every invariant violation as ``(field path, message)`` pairs.

    Raises SchemaError for structural problems that prevent further checks.
    """
    _check_schema(doc)
    problems = []
    S = [st["name"] for st in doc["states"]]
    Q = list(doc["queries"])
    O = list(doc["observations"])
    sidx = {n: i for i, n in enumerate(S)}
    qidx = {n: i for i, n in enumerate(Q)}
    oidx = {n: i for i, n in enumerate(O)}
    for name, seq in (("states", S), ("queries", Q), ("observations", O)):
        if len(set(seq)) != len(seq):
            problems.append((name, "duplicate names"))
        if not seq:
            problems.append((name, "must not be empty"))

    def ref(table, value, path):
        if value not in table:
            problems.append((path, f"unknown name {value!r}"))
            return None
        return table[value]

    rows = np.zeros(len(S))
    for i, t in enumerate(doc["transitions"]):
        a = ref(sidx, t["from"], f"transitions[{i}].from")
        ref(sidx, t["to"], f"transitions[{i}].to")
        if t["p"] < 0 or t["p"] > 1:
            problems.append((f"transitions[{i}].p", f"probability {t['p']} outside [0, 1]"))
        if a is not None:
            rows[a] += t["p"]
    for s, total in enumerate(rows):
        if abs(total - 1.0) > STOCHASTIC_TOL:
            problems.append((f"transitions[from={S[s]}]", f"row sums to {total:.15g}, not 1"))

    em = np.zeros((len(S), len(Q)))
    for i, e in enumerate(doc["emissions"]):
        s = ref(sidx, e["state"], f"emissions[{i}].state")
        q = ref(qidx, e["query"], f"emissions[{i}].query")
        ref(oidx, e["obs"], f"emissions[{i}].obs")
        if e["p"] < 0 or e["p"] > 1:
            problems.append((f"emissions[{i}].p", f"probability {e['p']} outside [0, 1]"))
        if s is not None and q is not None:
            em[s, q] += e["p"]
    for s, q in zip(*np.nonzero(np.abs(em - 1.0) > STOCHASTIC_TOL)):
        problems.append(
            (f"emissions[state={S[s]},query={Q[q]}]", f"sums to {em[s, q]:.15g}, not 1")
        )

    total = 0.0
    for i, e in enumerate(doc["initial"]):
        ref(sidx, e["state"], f"initial[{i}].state")
        if e["p"] < 0:
            problems.append((f"initial[{i}].p", f"negative probability {e['p']}"))
        total += e["p"]
    if abs(total - 1.0) > STOCHASTIC_TOL:
        problems.append(("initial", f"sums to {total:.15g}, not 1"))
    ref(qidx, doc["initial_query"], "initial_query")

    dfa = doc["dfa"]
    D = list(dfa["states"])
    didx = {n: i for i, n in enumerate(D)}
    ref(didx, dfa["initial"], "dfa.initial")
    for i, a in enumerate(dfa["accepting"]):
        ref(didx, a, f"dfa.accepting[{i}]")
    defined = set()
    for i, t in enumerate(dfa["transitions"]):
        a = ref(didx, t["from"], f"dfa.transitions[{i}].from")
        ref(didx, t["to"], f"dfa.transitions[{i}].to")
        key = (a, frozenset(t["label"]))
        if key in defined:
            problems.append((f"dfa.transitions[{i}]", "duplicate transition"))
        defined.add(key)
    labels = {frozenset(st["label"]) for st in doc["states"]}
    for q in range(len(D)):
        for label in sorted(labels, key=sorted):
            if (q, label) not in defined:
                problems.append(
                    ("dfa.transitions", f"undefined transition from {D[q]!r} on {sorted(label)}")
                )

    cm = doc["cost_matrix"]
    flat = cm if cm and not isinstance(cm[0], list) else [c for row in cm for c in row]
    if len(flat) != len(Q) ** 2 or (cm and isinstance(cm[0], list) and len(cm) != len(Q)):
        problems.append(("cost_matrix", f"must be {len(Q)} x {len(Q)}"))
    for i, c in enumerate(flat):
        if not isinstance(c, (int, float)) or c < 0:
            problems.append((f"cost_matrix[{i // max(len(Q), 1)}][{i % max(len(Q), 1)}]", f"invalid cost {c!r}"))
    if doc["alpha"] < 0:
        problems.append(("alpha", "must be >= 0"))
    if doc["horizon"] < 1:
        problems.append(("horizon", "must be >= 1"))
    if doc["lookahead"] < 0:
        problems.append(("lookahead", "must be >= 0"))
    return problems


def _build(doc: dict) -> Scenario:
    S = [st["name"] for st in doc["states"]]
    Q = list(doc["queries"])
    O = list(doc["observations"])
    sidx = {n: i for i, n in enumerate(S)}
    qidx = {n: i for i, n in enumerate(Q)}
    oidx = {n: i for i, n in enumerate(O)}
    tr = doc["transitions"]
    transition = sp.csr_matrix(
        (
            [t["p"] for t in tr],
            ([sidx[t["from"]] for t in tr], [sidx[t["to"]] for t in tr]),
        ),
        shape=(len(S), len(S)),
    )
    emission = np.zeros((len(S), len(Q), len(O)))
    for e in doc["emissions"]:
        emission[sidx[e["state"]], qidx[e["query"]], oidx[e["obs"]]] += e["p"]
    initial = np.zeros(len(S))
    for e in doc["initial"]:
        initial[sidx[e["state"]]] += e["p"]
    hmm = LabeledHmm(
        states=tuple(S),
        transition=transition,
        observations=tuple(O),
        queries=tuple(Q),
        initial=initial,
        initial_query=qidx[doc["initial_query"]],
        emission=emission,
        labels=tuple(frozenset(st["label"]) for st in doc["states"]),
    )
    d = doc["dfa"]
    D = list(d["states"])
    didx = {n: i for i, n in enumerate(D)}
    dfa = Dfa(
        states=tuple(D),
        delta={(didx[t["from"]], frozenset(t["label"])): didx[t["to"]] for t in d["transitions"]},
        initial=didx[d["initial"]],
        accepting=frozenset(didx[a] for a in d["accepting"]),
    )
    cm = doc["cost_matrix"]
    cost = np.asarray(cm, dtype=float).reshape(len(Q), len(Q))
    return Scenario(
        hmm=hmm,
        dfa=dfa,
        horizon=doc["horizon"],
        lookahead=doc["lookahead"],
        cost_matrix=cost,
        alpha=float(doc["alpha"]),
        metadata=dict(doc.get("metadata", {})),
    )


# --- verification fixtures -------------------------------------------------


def build_fixture(name: str) -> Scenario:
    """Small two-state chain used throughout the test suite.

    ``a`` moves to ``b`` with probability 0.3 and ``b`` (labelled crash) is
    absorbing.  Query ``s1`` reads the state perfectly, ``s2`` is a fair coin.
    ``f1`` charges unit cost per sensor use; ``f1-two-sensor`` is cost-free
    with alpha 0 and a longer horizon.
    """
    if name not in ("f1", "f1-two-sensor"):
        raise ValueError(f"unknown fixture {name!r}")
    hmm = LabeledHmm(
        states=("a", "b"),
        transition=sp.csr_matrix([[0.7, 0.3], [0.0, 1.0]]),
        observations=("safe", "crash"),
        queries=("s1", "s2"),
        initial=np.array([1.0, 0.0]),
        initial_query=1,
        emission=np.array([[[1.0, 0.0], [0.5, 0.5]], [[0.0, 1.0], [0.5, 0.5]]]),
        labels=(frozenset(), frozenset({"crash"})),
    )
    dfa = Dfa(
        states=("q0", "q_fail"),
        delta={
            (0, frozenset()): 0,
            (0, frozenset({"crash"})): 1,
            (1, frozenset()): 1,
            (1, frozenset({"crash"})): 1,
        },
        initial=0,
        accepting=frozenset({1}),
    )
    if name == "f1":
        return Scenario(
            hmm=hmm,
            dfa=dfa,
            horizon=2,
            lookahead=1,
            cost_matrix=np.ones((2, 2)),
            alpha=0.1,
            metadata={"name": "f1"},
        )
    return Scenario(
        hmm=hmm,
        dfa=dfa,
        horizon=4,
        lookahead=1,
        cost_matrix=np.zeros((2, 2)),
        alpha=0.0,
        metadata={"name": "f1-two-sensor"},
    )
