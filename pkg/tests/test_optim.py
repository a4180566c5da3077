import json

import numpy as np
import pytest

from dense_rdn.crn import build_dense_crn
from dense_rdn.optim import (
    HALVE,
    STOP,
    CONTINUE,
    Constraints,
    OptimizationAborted,
    OptimizerConfig,
    OptimizerState,
    Stage,
    adam_step,
    autocatalytic_indices,
    check_stages,
    clip_gradients,
    init_parameters,
    kinetic_constraints,
    load_checkpoint,
    read_history_csv,
    run_incremental,
    run_optimization,
    schedule_step,
)
from dense_rdn.reactor import D_MAX, D_MIN

CENTER = {"a": np.array([1.5, -2.0, 0.25]), "b": np.array(3.0)}


def quadratic(params, rng):
    loss = sum(float(np.sum((params[k] - CENTER[k]) ** 2)) for k in params)
    grads = {k: 2 * (params[k] - CENTER[k]) for k in params}
    return loss, grads, {"quad": loss}


def noisy_quadratic(params, rng):
    loss, grads, terms = quadratic(params, rng)
    jitter = rng.normal(0, 0.01)
    return loss + jitter, grads, terms


START = {"a": np.zeros(3), "b": np.array(0.0)}


# ------------------------------------------------------------------ initialization


def test_init_parameters_examples():
    crn = build_dense_crn(5)
    p = init_parameters(crn, np.random.default_rng(0))
    k = np.concatenate([p.k_f, p.k_r])
    assert np.sum(k == 1.0) == 5
    others = k[k != 1.0]
    assert np.all((others >= 0.9e-3) & (others <= 1.1e-3))
    np.testing.assert_array_equal(p.feed, np.full(5, 0.25))
    assert np.all((p.D >= D_MIN) & (p.D <= D_MAX))
    assert float(p.f) == 0.1


def test_init_autocatalysis_one_per_species():
    crn = build_dense_crn(4)
    idx = autocatalytic_indices(crn)
    produced = [crn.reactions[j].products[0] for j in idx]
    assert sorted(produced) == [0, 1, 2, 3]
    assert all(crn.reactions[j].prototype == "P3" for j in idx)


def test_init_feed_convention_all_and_errors():
    crn = build_dense_crn(4)
    p = init_parameters(crn, np.random.default_rng(1), feed_convention="all")
    np.testing.assert_allclose(p.feed, 4.0 ** -3)
    with pytest.raises(ValueError):
        init_parameters(build_dense_crn(3, ["P1", "P2"]), np.random.default_rng(0))
    with pytest.raises(ValueError):
        init_parameters(crn, np.random.default_rng(0), f0=2.0)


# ------------------------------------------------------------------ ADAM, clipping, schedule


def test_adam_first_step_is_lr():
    cfg = OptimizerConfig(lr=0.01)
    params = {"x": np.array([1.0, -1.0, 2.0])}
    state = OptimizerState.fresh(params, cfg.lr)
    out = adam_step(params, {"x": np.array([3.0, -0.2, 1e-3])}, state, cfg)
    step = params["x"] - out["x"]
    np.testing.assert_allclose(np.abs(step), 0.01, rtol=1e-4)
    np.testing.assert_array_equal(np.sign(step), [1, -1, 1])


def test_adam_zero_gradient_and_projection():
    cfg = OptimizerConfig(lr=0.1)
    params = {"k": np.array([0.05, 1.0]), "f": np.array(0.5)}
    state = OptimizerState.fresh(params, cfg.lr)
    out = adam_step(params, {"k": np.zeros(2), "f": np.array(0.0)}, state, cfg)
    np.testing.assert_array_equal(out["k"], params["k"])
    cons = Constraints({"k": (0.0, np.inf)}, frozenset({"f"}))
    out = adam_step(params, {"k": np.array([1.0, -1.0]), "f": np.array(5.0)}, state, cfg, cons)
    assert out["k"][0] == 0.0  # 0.05 - 0.1 clamped
    assert out["f"] == 0.5


def test_clip_examples():
    g = {"a": np.array([0.6, 0.8])}
    out, norm = clip_gradients(g, 0.5)
    assert norm == pytest.approx(1.0)
    np.testing.assert_allclose(out["a"], [0.3, 0.4])
    g = {"a": np.array([0.18, 0.24])}
    out, norm = clip_gradients(g, 0.5)
    np.testing.assert_array_equal(out["a"], g["a"])


def test_clip_fuzzed_and_order_independent():
    rng = np.random.default_rng(2)
    for _ in range(200):
        g = {k: rng.normal(0, rng.exponential(5), rng.integers(1, 6)) for k in "dcba"}
        out, _ = clip_gradients(g, 0.5)
        assert np.sqrt(sum(np.sum(v**2) for v in out.values())) <= 0.5 + 1e-12
        rev, _ = clip_gradients(dict(reversed(list(g.items()))), 0.5)
        for k in g:
            np.testing.assert_array_equal(out[k], rev[k])


def test_schedule_step_examples():
    cfg = OptimizerConfig(decrease_at=(3,), lr_patience=100, es_patience=4, max_iterations=100)
    s = OptimizerState.fresh({}, 1.0)
    s.iteration = 0
    assert schedule_step(s, cfg, 5.0) == CONTINUE
    s.iteration = 2
    assert schedule_step(s, cfg, 4.0) == HALVE  # the next iteration, 3, is listed
    assert s.lr == 0.5
    actions = []
    for it in range(3, 8):
        s.iteration = it
        actions.append(schedule_step(s, cfg, 4.0))
    assert actions[-1] == STOP and s.es_wait >= 4


def test_schedule_patience_halving_and_max_iterations():
    cfg = OptimizerConfig(lr_patience=2, es_patience=100, max_iterations=6)
    s = OptimizerState.fresh({}, 1.0)
    out = []
    for it, loss in enumerate([1.0, 2.0, 2.0, 0.5, 0.7, 0.7]):
        s.iteration = it
        out.append(schedule_step(s, cfg, loss))
    assert out == [CONTINUE, CONTINUE, HALVE, CONTINUE, CONTINUE, STOP]
    assert s.lr == 0.25  # halved after iterations 2 and 5


def test_constraint_set():
    cons = kinetic_constraints()
    assert cons.satisfied({"k_f": np.array([0.0]), "f": np.array(0.5), "D": np.array([0.1])})
    assert not cons.satisfied({"f": np.array(1.5)})
    assert "f" in kinetic_constraints(f_pinned=True).frozen


# ------------------------------------------------------------------ optimization loop


def test_quadratic_converges():
    cfg = OptimizerConfig(lr=0.05, beta1=0.9, lr_patience=20, es_patience=2000, max_iterations=10000)
    res = run_optimization(quadratic, START, cfg)
    for k in CENTER:
        np.testing.assert_allclose(res.best_params[k], CENTER[k], atol=1e-6)
    best = np.minimum.accumulate([r["loss"] for r in res.history])
    assert np.all(np.diff(best) <= 0)


def test_constraints_hold_every_iteration():
    cons = Constraints({"a": (0.0, 1.0)})
    seen = []
    run_optimization(quadratic, START, OptimizerConfig(lr=0.1, max_iterations=50), cons,
                     callback=lambda i, p, row: seen.append(p["a"].copy()))
    assert all(np.all((a >= 0) & (a <= 1)) for a in seen)


def test_determinism_and_history_csv(tmp_path):
    cfg = OptimizerConfig(lr=0.01, max_iterations=40, seed=7)
    a = run_optimization(noisy_quadratic, START, cfg, output_dir=tmp_path / "a")
    b = run_optimization(noisy_quadratic, START, cfg, output_dir=tmp_path / "b")
    assert (tmp_path / "a/history.csv").read_bytes() == (tmp_path / "b/history.csv").read_bytes()
    rows = read_history_csv(tmp_path / "a/history.csv")
    assert [r["loss"] for r in rows] == [r["loss"] for r in a.history]
    assert list(rows[0]) == ["iteration", "loss", "quad", "lr", "grad_norm"]
    assert a.history == b.history


def test_checkpoint_layout(tmp_path):
    cfg = OptimizerConfig(lr=0.01, max_iterations=12, checkpoint_every=5)
    res = run_optimization(quadratic, START, cfg, output_dir=tmp_path, manifest_config={"note": 1})
    man = json.loads((tmp_path / "best/manifest.json").read_text())
    assert man["config"] == {"note": 1}
    ck = load_checkpoint(tmp_path / "best")
    for k in CENTER:
        np.testing.assert_array_equal(ck.params[k], res.best_params[k])
    assert load_checkpoint(tmp_path / "latest").state.iteration == 12


def test_resume_bit_identical(tmp_path):
    full = run_optimization(noisy_quadratic, START, OptimizerConfig(lr=0.01, max_iterations=30, checkpoint_every=10),
                            output_dir=tmp_path / "full")
    run_optimization(noisy_quadratic, START, OptimizerConfig(lr=0.01, max_iterations=20, checkpoint_every=10),
                     output_dir=tmp_path / "part")
    resumed = run_optimization(noisy_quadratic, START, OptimizerConfig(lr=0.01, max_iterations=30, checkpoint_every=10),
                               output_dir=tmp_path / "part", resume=True)
    assert resumed.history == full.history
    for k in CENTER:
        np.testing.assert_array_equal(resumed.params[k], full.params[k])
    assert (tmp_path / "full/history.csv").read_bytes() == (tmp_path / "part/history.csv").read_bytes()


def test_resume_without_checkpoint(tmp_path):
    with pytest.raises(FileNotFoundError):
        run_optimization(quadratic, START, OptimizerConfig(), output_dir=tmp_path, resume=True)


def test_abort_keeps_last_good(tmp_path):
    def flaky(params, rng):
        if flaky.calls == 5:
            raise FloatingPointError("blow-up")
        flaky.calls += 1
        return quadratic(params, rng)

    flaky.calls = 0
    with pytest.raises(OptimizationAborted) as info:
        run_optimization(flaky, START, OptimizerConfig(lr=0.01, max_iterations=20), output_dir=tmp_path)
    res = info.value.result
    assert res.stop_reason == "aborted" and len(res.history) == 5
    assert (tmp_path / "best/manifest.json").exists()
    assert res.best_loss == min(r["loss"] for r in res.history)


def test_non_finite_loss_aborts():
    def bad(params, rng):
        return float("nan"), {k: np.zeros_like(v) for k, v in params.items()}, {}

    with pytest.raises(OptimizationAborted):
        run_optimization(bad, START, OptimizerConfig(max_iterations=3))


# ------------------------------------------------------------------ incremental


def test_single_stage_equals_run_optimization():
    cfg = OptimizerConfig(lr=0.02, max_iterations=25, seed=3)
    inc = run_incremental(lambda s: noisy_quadratic, START, [Stage(8, cfg)])
    direct = run_optimization(noisy_quadratic, START, cfg)
    assert inc[0].history == direct.history


def test_stage_horizons_non_decreasing():
    cfg = OptimizerConfig()
    check_stages([Stage(256, cfg, 1.0), Stage(320, cfg, 1.0), Stage(352, cfg, 0.5)])
    with pytest.raises(ValueError):
        check_stages([Stage(16, cfg), Stage(8, cfg)])
    with pytest.raises(ValueError):
        check_stages([])


def test_stages_warm_start():
    starts = []

    def make(stage):
        def obj(params, rng):
            if not starts or starts[-1][0] is not stage:
                starts.append((stage, {k: v.copy() for k, v in params.items()}))
            return quadratic(params, rng)
        return obj

    stages = [Stage(8, OptimizerConfig(lr=0.05, max_iterations=30)), Stage(16, OptimizerConfig(lr=0.05, max_iterations=5))]
    res = run_incremental(make, START, stages)
    for k in CENTER:
        np.testing.assert_array_equal(starts[1][1][k], res[0].best_params[k])
    assert res[1].history[0]["loss"] == pytest.approx(res[0].best_loss)
