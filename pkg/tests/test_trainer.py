import numpy as np
import pytest
from scipy.stats import kendalltau

from apmon.enumeration import enumerate_histories, enumerated_samples, exact_gradient, exact_objective
from apmon.errors import ModelMismatch, NonFiniteGradient
from apmon.evaluator import evaluate
from apmon.objective import CostModel
from apmon.oom import build_operators, build_safety_predictor
from apmon.policy import RecurrentPolicy, TabularPolicy, UniformPolicy
from apmon.scenario import build_fixture
from apmon.trainer import (
    LOG_COLUMNS,
    Batch,
    Simulator,
    TrainConfig,
    batch_gradient,
    episode_seed,
    gradient_step,
    make_optimizer,
    realised_outcomes,
    sample_trajectory,
    train,
)


def test_episode_seeds_are_distinct_and_stable():
    seeds = {episode_seed(0, s, i, v) for s in range(2) for i in range(3) for v in range(50)}
    assert len(seeds) == 300
    assert episode_seed(5, 0, 1, 2) == episode_seed(5, 0, 1, 2)


def test_realised_outcomes_window():
    fail = np.array([0, 0, 1, 0, 0], dtype=bool)
    assert realised_outcomes(fail, 3, 1).tolist() == [0, 1, 1, 0]
    assert realised_outcomes(fail, 4, 0).tolist() == [0, 0, 1, 0, 0]


def test_same_seed_same_record(f1):
    p = f1.product()
    cm = CostModel.from_scenario(f1)
    pol = RecurrentPolicy.init(2, 2, seed=0)
    ops, sp_ = build_operators(p), build_safety_predictor(p, 1)
    r1, s1 = sample_trajectory(p, ops, sp_, pol, 123, f1.horizon, cm)
    r2, s2 = sample_trajectory(p, ops, sp_, pol, 123, f1.horizon, cm)
    for f in ("states", "queries", "observations", "p_unsafe", "outcomes", "costs"):
        assert np.array_equal(getattr(r1, f), getattr(r2, f))
    assert np.array_equal(s1.score_prefix, s2.score_prefix)
    assert len(r1.states) == f1.horizon + f1.lookahead + 1


def test_sample_trajectory_rejects_foreign_operators(f1):
    p = f1.product()
    other = build_fixture("f1").with_overrides(lookahead=2).product(prune=True)
    with pytest.raises(ModelMismatch):
        sample_trajectory(p, build_operators(other), build_safety_predictor(p, 1),
                          UniformPolicy(2, 2), 1, 2, CostModel.from_scenario(f1))


def test_perfect_sensor_consistency(f1):
    p = f1.product()
    sim = Simulator(p, f1.horizon, 1, CostModel.from_scenario(f1))
    pol = TabularPolicy(2, 2, params=np.tile([30.0, -30.0], 7))
    b = sim.run(pol, [episode_seed(0, 0, 0, i) for i in range(300)])
    certain = b.p_unsafe > 1 - 1e-12
    assert certain.any()
    assert np.all(b.outcomes[certain] == 1)


def test_k_zero_semantics(f1):
    p = f1.product()
    sim = Simulator(p, f1.horizon, 0, CostModel.from_scenario(f1))
    b = sim.run(UniformPolicy(2, 2), [episode_seed(1, 0, 0, i) for i in range(100)])
    assert np.array_equal(b.outcomes, p.failure[b.states[:, : f1.horizon + 1]].astype(np.int8))


def test_true_states_shared_across_policies(f1_two):
    p = f1_two.product()
    sim = Simulator(p, f1_two.horizon, 1, CostModel.from_scenario(f1_two))
    seeds = [episode_seed(2, 1, 0, i) for i in range(64)]
    a = sim.run(UniformPolicy(2, 2), seeds)
    b = sim.run(RecurrentPolicy.init(2, 2, seed=3), seeds)
    c = sim.run(None, seeds)
    assert np.array_equal(a.states, b.states) and np.array_equal(a.states, c.states)


def test_chunked_matches_single_batch(f1_two):
    p = f1_two.product()
    sim = Simulator(p, f1_two.horizon, 1, CostModel.from_scenario(f1_two))
    seeds = [episode_seed(0, 0, 0, i) for i in range(40)]
    pol = RecurrentPolicy.init(2, 2, seed=1)
    one = sim.run(pol, seeds)
    chunked = sim.run_chunked(pol, seeds, workers=1)
    assert np.array_equal(one.p_safe, chunked.p_safe) and np.array_equal(one.queries, chunked.queries)


def test_batch_gradient_matches_explicit_samples(f1_two):
    p = f1_two.product()
    cm = CostModel(np.array([[1.0, 0.0], [2.0, 0.5]]), 0.3, 1)
    sim = Simulator(p, f1_two.horizon, 1, cm)
    pol = RecurrentPolicy.init(2, 2, seed=2, hidden=4, scale=0.3)
    b = sim.run(pol, [episode_seed(0, 0, 0, i) for i in range(20)])
    from apmon.objective import objective_gradient

    explicit = objective_gradient(b.objective_samples(pol), cm, f1_two.horizon)
    fast = batch_gradient(pol, b, f1_two.horizon, cm.alpha, TrainConfig())
    assert np.allclose(fast, explicit, atol=1e-12)


def _batch(f1_two, pol, n=32):
    p = f1_two.product()
    sim = Simulator(p, f1_two.horizon, 1, CostModel.from_scenario(f1_two))
    return sim.run(pol, [episode_seed(0, 0, 0, i) for i in range(n)])


def test_zero_learning_rate_keeps_params(f1_two):
    pol = RecurrentPolicy.init(2, 2, seed=0)
    cfg = TrainConfig(learning_rate=0.0)
    new, diag = gradient_step(pol, _batch(f1_two, pol), cfg, make_optimizer(cfg), 4, 0.0)
    assert new.params.tobytes() == pol.params.tobytes()
    assert diag["grad_norm"] > 0


def test_zero_entropy_batch_gives_zero_gradient(f1_two):
    pol = RecurrentPolicy.init(2, 2, seed=0)
    b = _batch(f1_two, pol)
    b = Batch(**{**b.__dict__, "entropy": np.zeros_like(b.entropy), "costs": np.zeros_like(b.costs)})
    cfg = TrainConfig(learning_rate=0.5)
    new, diag = gradient_step(pol, b, cfg, make_optimizer(cfg), 4, 1.0)
    assert diag["grad_norm"] == 0.0
    assert np.array_equal(new.params, pol.params)


def test_non_finite_gradient_aborts(f1_two):
    pol = RecurrentPolicy.init(2, 2, seed=0)
    b = _batch(f1_two, pol)
    b = Batch(**{**b.__dict__, "entropy": np.full_like(b.entropy, np.nan)})
    cfg = TrainConfig()
    with pytest.raises(NonFiniteGradient):
        gradient_step(pol, b, cfg, make_optimizer(cfg), 4, 0.0)


def test_clipping_caps_update_norm(f1_two):
    pol = RecurrentPolicy.init(2, 2, seed=0)
    b = _batch(f1_two, pol)
    cfg = TrainConfig(learning_rate=1.0, clip_norm=1e-3)
    new, diag = gradient_step(pol, b, cfg, make_optimizer(cfg), 4, 0.0)
    assert diag["clip_applied"] == 1
    assert np.linalg.norm(new.params - pol.params) == pytest.approx(1e-3)


def test_exact_sgd_step_decreases_exact_objective(f1):
    p = f1.product()
    cm = CostModel(np.array([[2.0, 0.1], [2.0, 0.1]]), 0.2, 1)
    hs = enumerate_histories(p, f1.horizon, f1.lookahead, cm)
    pol = TabularPolicy(2, 2, window=2, params=np.random.default_rng(0).normal(size=14))
    before = exact_objective(p, pol, f1.horizon, f1.lookahead, cm, hs)
    g = exact_gradient(p, pol, f1.horizon, f1.lookahead, cm, hs)
    after = exact_objective(p, pol.with_params(pol.params - 1e-2 * g), f1.horizon, f1.lookahead, cm, hs)
    assert after < before


def test_zero_iterations(tmp_path, f1):
    log = tmp_path / "log.csv"
    ckpt = tmp_path / "c.json"
    init = RecurrentPolicy.init(2, 2, seed=0)
    pol, hist = train(f1, TrainConfig(iterations=0), log_path=log, checkpoint_path=ckpt)
    assert hist == []
    assert log.read_text() == ",".join(LOG_COLUMNS) + "\n"
    assert pol.params.tobytes() == init.params.tobytes()


def test_log_is_reproducible(tmp_path, f1_two):
    cfg = TrainConfig(iterations=5, batch_size=16, learning_rate=0.1, seed=4)
    train(f1_two, cfg, log_path=tmp_path / "a.csv")
    train(f1_two, cfg, log_path=tmp_path / "b.csv")
    a = (tmp_path / "a.csv").read_bytes()
    assert a == (tmp_path / "b.csv").read_bytes()
    assert len(a.decode().splitlines()) == 6


def test_adam_training_runs(f1_two):
    pol, hist = train(f1_two, TrainConfig(iterations=5, batch_size=8, learning_rate=0.01, optimizer="adam"))
    assert len(hist) == 5 and all(np.isfinite(h["objective"]) for h in hist)


def test_entropy_trend_is_non_increasing(f1_two):
    _, hist = train(f1_two, TrainConfig(iterations=400, learning_rate=0.1, seed=3))
    h = np.array([d["entropy_term"] for d in hist])
    smooth = np.convolve(h, np.ones(50) / 50, mode="valid")
    tau, pvalue = kendalltau(np.arange(len(smooth)), smooth)
    assert tau < -0.5 and pvalue < 1e-3
    # block-to-block rises stay within batch noise (3 standard errors of a 50-iteration mean)
    blocks = h[: len(h) // 50 * 50].reshape(-1, 50)
    noise = 3 * blocks[-3:].std(ddof=1) / np.sqrt(50)
    assert np.all(np.diff(blocks.mean(axis=1)) <= noise), blocks.mean(axis=1)
    assert smooth[-1] < smooth[0] - 0.1


def test_cost_pressure_beats_random():
    sc = build_fixture("f1-two-sensor").with_overrides(cost_matrix=np.array([[1.0, 0.0], [1.0, 0.0]]), alpha=1.0)
    pol, _ = train(sc, TrainConfig(iterations=150, learning_rate=0.1, seed=1))
    rep = evaluate(sc, {"trained": pol, "random": UniformPolicy(2, 2)}, 2000, seed=3)
    assert rep.get("trained", 1).cost < rep.get("random", 1).cost - 3 * rep.get("random", 1).cost_ci


def test_calibration_in_the_large(f1_two):
    p = f1_two.product()
    sim = Simulator(p, f1_two.horizon, 1, CostModel.from_scenario(f1_two))
    n = 100_000
    b = sim.run_chunked(UniformPolicy(2, 2), [episode_seed(8, 1, 0, i) for i in range(n)])
    w = b.outcomes.mean(axis=0)
    pu = b.p_unsafe.mean(axis=0)
    sigma = np.sqrt(w * (1 - w) / n)
    assert np.all(np.abs(w - pu) <= 3 * sigma + 1e-12)


def test_enumerated_samples_use_exact_weights(f1):
    p = f1.product()
    hs = enumerate_histories(p, f1.horizon, 1)
    _, w = enumerated_samples(UniformPolicy(2, 2), hs)
    assert w.sum() == pytest.approx(1.0, abs=1e-12)


def test_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(batch_size=0)
    with pytest.raises(ValueError):
        TrainConfig(optimizer="rmsprop")
