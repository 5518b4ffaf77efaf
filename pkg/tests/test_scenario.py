import json

import numpy as np
import pytest

from apmon.congestion import CongestionConfig, build_congestion_scenario, load_graph_data
from apmon.errors import ConfigError, ParseError, SchemaError, ValidationError
from apmon.scenario import (
    build_fixture,
    dumps_scenario,
    load_scenario,
    parse_scenario_text,
    save_scenario,
    scenario_from_dict,
    scenario_to_dict,
)


@pytest.mark.parametrize("name", ["f1", "f1-two-sensor"])
def test_save_load_save_is_byte_identical(tmp_path, name):
    sc = build_fixture(name)
    path = tmp_path / "s.json"
    save_scenario(sc, path)
    again = load_scenario(path)
    assert dumps_scenario(again) == path.read_text(encoding="utf-8")
    assert again.content_hash() == sc.content_hash()


def test_empty_and_malformed_files_raise_parse_error():
    with pytest.raises(ParseError):
        parse_scenario_text("   ")
    with pytest.raises(ParseError):
        parse_scenario_text("{not json")
    with pytest.raises(ParseError):
        parse_scenario_text("[1, 2]")


def test_missing_field_is_schema_error():
    doc = scenario_to_dict(build_fixture("f1"))
    del doc["dfa"]
    with pytest.raises(SchemaError, match="dfa"):
        scenario_from_dict(doc)


def test_non_stochastic_row_names_the_row():
    doc = scenario_to_dict(build_fixture("f1"))
    for t in doc["transitions"]:
        if t["from"] == "a" and t["to"] == "b":
            t["p"] = 0.2
    with pytest.raises(ValidationError) as exc:
        scenario_from_dict(doc)
    assert "from=a" in exc.value.path


def test_unknown_reference_is_reported():
    doc = scenario_to_dict(build_fixture("f1"))
    doc["emissions"][0]["obs"] = "nope"
    with pytest.raises(ValidationError, match="nope"):
        scenario_from_dict(doc)


def test_overrides_change_hash():
    sc = build_fixture("f1")
    assert sc.with_overrides(lookahead=3).content_hash() != sc.content_hash()
    assert sc.with_overrides(lookahead=None).content_hash() == sc.content_hash()


def test_graph_data_rows_are_stochastic():
    data = load_graph_data()
    assert len(data["ego_transitions"]) == 44
    for row in data["ego_transitions"].values():
        assert sum(row.values()) == pytest.approx(1.0, abs=1e-12)


def test_congestion_dimensions():
    sc = build_congestion_scenario()
    assert (sc.horizon, sc.lookahead, sc.alpha) == (30, 3, 0.04)
    assert len(sc.hmm.states) == 44 * 32
    assert len(sc.hmm.queries) == 11
    p = sc.product()
    assert p.n_states == 44 * 32 * 3
    assert p.failure_absorbing
    pruned = sc.product(prune=True)
    assert pruned.n_states < p.n_states
    assert np.allclose(np.asarray(pruned.transition.sum(axis=1)).ravel(), 1.0)


def test_congestion_costs_and_idle_query():
    sc = build_congestion_scenario()
    none = sc.hmm.queries.index("none")
    assert sc.hmm.initial_query == none
    assert sc.cost_matrix[0, 0] == 5 and sc.cost_matrix[0, 1] == 10 and sc.cost_matrix[0, none] == 0
    assert sc.cost_matrix[none, 0] == 10
    # the idle query always reports nothing
    assert np.all(sc.hmm.emission[:, none, 3] == 1.0)


def test_congestion_config_rejects_unknown_keys():
    with pytest.raises(ConfigError, match="bogus"):
        CongestionConfig.from_mapping({"bogus": 1})


def test_congestion_round_trip(tmp_path):
    sc = build_congestion_scenario({"lookahead": 1})
    path = tmp_path / "c.json"
    save_scenario(sc, path)
    again = load_scenario(path)
    assert again.content_hash() == sc.content_hash()
    assert json.loads(path.read_text())["lookahead"] == 1
