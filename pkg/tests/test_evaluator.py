import numpy as np
import pytest

from apmon.errors import DegenerateGap, EmptyEvaluation, LengthMismatch
from apmon.evaluator import (
    REPORT_COLUMNS,
    EvalReport,
    brier_score,
    emit_csv,
    emit_trajectories_csv,
    evaluate,
    gap_closure,
    read_report_csv,
)
from apmon.policy import UniformPolicy
from apmon.scenario import build_fixture


def test_brier_examples():
    assert brier_score([0, 1, 1], [0, 1, 1]) == 0.0
    assert brier_score([0.3], [1]) == pytest.approx(0.49)
    with pytest.raises(LengthMismatch):
        brier_score([0.1, 0.2], [1])


def test_constant_forecast_minimised_at_base_rate():
    w = np.array([1, 0, 0, 1, 0, 0, 0, 1, 0, 0])
    grid = np.round(np.arange(0, 1.0001, 0.01), 2)
    scores = [brier_score(np.full(len(w), p), w) for p in grid]
    assert grid[int(np.argmin(scores))] == pytest.approx(w.mean())


def test_gap_closure_examples():
    assert gap_closure(0.1880, 0.0799, 0.0386) == pytest.approx(0.1081 / 0.1494, rel=1e-12)
    assert gap_closure(0.1791, 0.0564, 0.0149) == pytest.approx(0.1227 / 0.1642, rel=1e-12)
    assert gap_closure(0.3, 0.1, 0.1) == 1.0
    with pytest.raises(DegenerateGap):
        gap_closure(0.1, 0.1, 0.1)


def _bounds(b_r, b_t, b_o, half=5e-5):
    """Range of the closure over inputs that round to the given four-decimal values."""
    lo = gap_closure(b_r - half, b_t + half, b_o - half)
    hi = gap_closure(b_r + half, b_t - half, b_o + half)
    return lo, hi


@pytest.mark.parametrize("briers,reported", [
    ((0.1791, 0.0564, 0.0149), 0.7472),
    ((0.1880, 0.0799, 0.0386), 0.7233),
    ((0.1931, 0.0939, 0.0576), 0.7321),
])
def test_reported_closures_consistent_with_rounded_briers(briers, reported):
    lo, hi = _bounds(*briers)
    assert lo <= reported <= hi


def test_empty_evaluation_rejected(f1):
    with pytest.raises(EmptyEvaluation):
        evaluate(f1, {"oracle": None}, 0, seed=0)


def test_uniform_worse_than_informative(f1_two):
    from apmon.policy import TabularPolicy

    always_s1 = TabularPolicy(2, 2, window=1, params=np.tile([30.0, -30.0], 3))
    rep = evaluate(f1_two, {"trained": always_s1, "random": UniformPolicy(2, 2), "oracle": None}, 5000, seed=2)
    t, r = rep.get("trained", 1), rep.get("random", 1)
    assert t.brier + t.brier_ci < r.brier - r.brier_ci
    assert rep.get("oracle", 1).cost == 0.0
    assert set(rep.gap_closures()) == {1}


def test_oracle_calibrated_on_average(f1_two):
    rep = evaluate(f1_two, {"oracle": None}, 20_000, seed=1, keep_batches=True)
    b = rep.batches[("oracle", 1)]
    # paired per-trajectory difference between squared error and forecast variance
    d = ((b.p_unsafe - b.outcomes) ** 2 - b.p_unsafe * (1 - b.p_unsafe)).mean(axis=1)
    assert abs(d.mean()) <= 3 * d.std(ddof=1) / np.sqrt(len(d))
    assert rep.get("oracle", 1).brier == pytest.approx(np.mean((b.p_unsafe - b.outcomes) ** 2), abs=1e-15)


def test_report_csv_schema_and_round_trip(tmp_path, f1):
    rep = evaluate(f1, {"random": UniformPolicy(2, 2), "oracle": None}, 200, seed=0, ks=[1, 2])
    path = tmp_path / "r.csv"
    emit_csv(rep, path)
    header = path.read_text().splitlines()[0]
    assert header == ",".join(REPORT_COLUMNS)
    rows = read_report_csv(path)
    assert len(rows) == 4
    for s, r in zip(rep.stats, rows):
        for c in ("brier", "brier_ci", "cost", "cost_ci"):
            assert float(f"{getattr(s, c):.12g}") == float(f"{r[c]:.12g}")
    emit_csv(rep, path)  # idempotent overwrite
    assert len(read_report_csv(path)) == 4


def test_empty_inputs_give_header_only(tmp_path):
    emit_csv(EvalReport([], 0, 1, 0.0, 0), tmp_path / "r.csv")
    assert (tmp_path / "r.csv").read_text() == ",".join(REPORT_COLUMNS) + "\n"
    emit_trajectories_csv([], tmp_path / "t.csv")
    assert (tmp_path / "t.csv").read_text() == "traj,t,p_unsafe,w,query,obs,cost\n"


def test_shared_seeds_give_paired_states(f1_two):
    rep = evaluate(f1_two, {"random": UniformPolicy(2, 2), "oracle": None}, 50, seed=3, keep_batches=True)
    assert np.array_equal(rep.batches[("random", 1)].states, rep.batches[("oracle", 1)].states)
