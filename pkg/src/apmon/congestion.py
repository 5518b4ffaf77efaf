"""Dynamic congestion-game scenario on the 45-node campus graph.

Physical state is ``(ego node, tracked obstacle node)``.  The first obstacle
random-walks on nodes 3-22; once the ego first steps out of that block the
second obstacle appears on node 29 or 30 and walks on nodes 29-40.  The
obstacle's zone therefore doubles as the activation phase.  Obstacle moves
are uniform over graph neighbours inside its zone (the source graph gives no
obstacle probabilities, so this is a modelling choice).

The ego chain, graph edges and sensor coverage sets live in
``data/congestion_graph.json``.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, fields
from importlib import resources

import numpy as np
import scipy.sparse as sp

from apmon.errors import ConfigError, InvalidModel
from apmon.model import Dfa, LabeledHmm
from apmon.scenario import Scenario

OBSERVATIONS = ("S_ego", "S_traffic", "S_both", "null")
NO_QUERY = "none"


@dataclass(frozen=True)
class CongestionConfig:
    lookahead: int = 3
    horizon: int = 30
    alpha: float = 0.04
    false_negative: float = 0.15
    hold_cost: float = 5.0
    switch_cost: float = 10.0
    idle_cost: float = 0.0
    ego_start: tuple = (1, 44)

    @classmethod
    def from_mapping(cls, config=None) -> "CongestionConfig":
        config = dict(config or {})
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(config) - known)
        if unknown:
            raise ConfigError(f"unknown congestion option(s): {', '.join(unknown)}")
        if "ego_start" in config:
            config["ego_start"] = tuple(config["ego_start"])
        return cls(**config)


def load_graph_data() -> dict:
    raw = resources.files("apmon").joinpath("data/congestion_graph.json").read_text("utf-8")
    data = json.loads(raw)
    for node, row in data["ego_transitions"].items():
        total = sum(row.values())
        if abs(total - 1.0) > 1e-12:
            raise InvalidModel(f"ego transition row for node {node} sums to {total!r}")
    return data


def failure_dfa(goal_first: int = 23, goal_second: int = 41):
    """Transition rule of the failure DFA over states (q0, q1, q_fail).

    Accepts (fails) on a crash, or on reaching ``goal_second`` before
    ``goal_first``.  The caller tabulates it for the labels its states produce.
    """
    a, b = f"node{goal_first}", f"node{goal_second}"

    def rule(q: int, label: frozenset) -> int:
        if q == 2 or "crash" in label:
            return 2
        if q == 0:
            if b in label and a not in label:
                return 2
            if a in label:
                return 1
            return 0
        return 1

    return rule


def build_congestion_scenario(config=None) -> Scenario:
    cfg = config if isinstance(config, CongestionConfig) else CongestionConfig.from_mapping(config)
    data = load_graph_data()
    ego_rows = {int(k): {int(a): p for a, p in v.items()} for k, v in data["ego_transitions"].items()}
    ego_nodes = sorted(ego_rows)
    for start in cfg.ego_start:
        if start not in ego_rows:
            raise ConfigError(f"ego start node {start} has no transition row")
    zone1 = data["obstacles"][0]["zone"]
    zone2 = data["obstacles"][1]["zone"]
    zone1_set, zone2_set = set(zone1), set(zone2)
    spawn1 = data["obstacles"][0]["initial"]
    spawn2 = data["obstacles"][1]["initial"]
    slots = list(zone1) + list(zone2)

    nbrs = {n: set() for n in range(1, data["nodes"] + 1)}
    for u, v in data["edges"]:
        nbrs[u].add(v)
        nbrs[v].add(u)

    def walk(o):
        zone = zone1_set if o in zone1_set else zone2_set
        nxt = sorted(n for n in nbrs[o] if n in zone)
        if not nxt:
            return {o: 1.0}
        return {n: 1.0 / len(nxt) for n in nxt}

    obstacle_moves = {o: walk(o) for o in slots}
    states = [(e, o) for e in ego_nodes for o in slots]
    index = {st: i for i, st in enumerate(states)}
    names = [f"e{e}_o{o}" for e, o in states]

    goal_a, goal_b = data["goal_first"], data["goal_second"]
    labels = []
    for e, o in states:
        lab = set()
        if e == goal_a:
            lab.add(f"node{goal_a}")
        if e == goal_b:
            lab.add(f"node{goal_b}")
        if e == o:
            lab.add("crash")
        labels.append(frozenset(lab))

    rows, cols, vals = [], [], []
    for i, (e, o) in enumerate(states):
        for e2, pe in ego_rows[e].items():
            if o in zone1_set and e in zone1_set and e2 not in zone1_set:
                moves = {n: 1.0 / len(spawn2) for n in spawn2}
            else:
                moves = obstacle_moves[o]
            for o2, po in moves.items():
                rows.append(i)
                cols.append(index[(e2, o2)])
                vals.append(pe * po)
    n = len(states)
    transition = sp.csr_matrix((vals, (rows, cols)), shape=(n, n))

    sensors = data["sensors"]
    queries = tuple(sorted(sensors)) + (NO_QUERY,)
    detect = 1.0 - cfg.false_negative
    emission = np.zeros((n, len(queries), len(OBSERVATIONS)))
    for i, (e, o) in enumerate(states):
        for q, sensor in enumerate(queries[:-1]):
            cover = set(sensors[sensor])
            pe = detect if e in cover else 0.0
            po = detect if o in cover else 0.0
            emission[i, q, 2] = pe * po
            emission[i, q, 0] = pe * (1 - po)
            emission[i, q, 1] = (1 - pe) * po
            emission[i, q, 3] = (1 - pe) * (1 - po)
        emission[i, len(queries) - 1, 3] = 1.0

    initial = np.zeros(n)
    for e in cfg.ego_start:
        for o in spawn1:
            initial[index[(e, o)]] += 1.0 / (len(cfg.ego_start) * len(spawn1))

    hmm = LabeledHmm(
        states=tuple(names),
        transition=transition,
        observations=OBSERVATIONS,
        queries=queries,
        initial=initial,
        initial_query=len(queries) - 1,
        emission=emission,
        labels=tuple(labels),
    )
    rule = failure_dfa(goal_a, goal_b)
    dfa = Dfa(
        states=("q0", "q1", "q_fail"),
        delta={(q, lab): rule(q, lab) for q in range(3) for lab in set(labels)},
        initial=0,
        accepting=frozenset({2}),
    )
    nq = len(queries)
    cost = np.full((nq, nq), cfg.switch_cost)
    np.fill_diagonal(cost, cfg.hold_cost)
    cost[:, nq - 1] = cfg.idle_cost
    return Scenario(
        hmm=hmm,
        dfa=dfa,
        horizon=cfg.horizon,
        lookahead=cfg.lookahead,
        cost_matrix=cost,
        alpha=cfg.alpha,
        metadata={
            "name": "congestion",
            "description": "45-node congestion game: ego chain x tracked obstacle, "
            "10 proximity sensors plus no-query",
        },
    )
