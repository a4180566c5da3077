import math
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dense_rdn import losses
from dense_rdn.crn import build_dense_crn
from dense_rdn.diffcore import Tensor, grad_check, packed
from dense_rdn.losses import (
    LossConfig,
    LossContext,
    compose_loss,
    dissipation_loss,
    preset,
    replication_loss,
    sample_times,
    stability_loss,
    step_size_penalty,
    target_pattern_loss,
    variance_target_loss,
    z_reconstruction_loss,
)
from dense_rdn.reactor import D_MIN, ReactorParams, Trajectory, rollout


def make_traj(states, deltas=None):
    states = [Tensor(s) for s in states]
    if deltas is None:
        deltas = [Tensor(b.value - a.value) for a, b in zip(states, states[1:])]
    else:
        deltas = [Tensor(d) for d in deltas]
    return Trajectory(states, deltas, [None] * len(deltas), 1.0, 0, list(range(len(states))))


ALL = np.arange(3)


# ------------------------------------------------------------------ target


def test_target_loss_examples():
    target = np.random.default_rng(0).uniform(0, 1, (4, 4))
    x = np.zeros((1, 2, 4, 4))
    x[0, 1] = target
    assert target_pattern_loss(make_traj([x] * 4), target, 1, ALL).item() == 0.0
    ones = np.ones((1, 1, 4, 4))
    traj = make_traj([ones] * 4)
    assert target_pattern_loss(traj, np.zeros((4, 4)), 0, ALL).item() == pytest.approx(4.0)  # sqrt(16)
    assert target_pattern_loss(traj, np.zeros((4, 4)), 0, ALL, mode="rmsd").item() == pytest.approx(1.0)
    with pytest.raises(IndexError):
        target_pattern_loss(traj, np.zeros((4, 4)), 1, ALL)


def test_target_loss_random_recompute():
    rng = np.random.default_rng(1)
    states = rng.uniform(0, 1, (6, 2, 3, 5, 5))
    target = rng.uniform(0, 1, (5, 5))
    times = np.array([0, 2, 4])
    got = target_pattern_loss(make_traj(list(states)), target, 2, times).item()
    expected = np.mean([np.mean([np.linalg.norm(states[t + 1][b, 2] - target) for b in range(2)]) for t in times])
    assert got == pytest.approx(expected, rel=1e-13)


def test_time_sampling_unbiased():
    rng = np.random.default_rng(2)
    T = 20
    states = rng.uniform(0, 1, (T + 1, 1, 1, 4, 4))
    target = np.zeros((4, 4))
    traj = make_traj(list(states))
    full = target_pattern_loss(traj, target, 0, np.arange(T)).item()
    draws = [target_pattern_loss(traj, target, 0, sample_times(rng, T, 4)).item() for _ in range(2000)]
    se = np.std(draws) / np.sqrt(len(draws))
    assert abs(np.mean(draws) - full) < 4 * se


def test_sample_times():
    rng = np.random.default_rng(3)
    s = sample_times(rng, 50, 8)
    assert len(s) == 8 and len(set(s)) == 8 and np.all(np.diff(s) > 0) and s.max() < 50
    np.testing.assert_array_equal(sample_times(rng, 5, 8), np.arange(5))
    with pytest.raises(ValueError):
        sample_times(rng, 0)


# ------------------------------------------------------------------ stability


def test_stability_examples():
    x = np.ones((1, 2, 3, 3))
    assert stability_loss(make_traj([x] * 4), ALL).item() == 0.0
    d = np.zeros((1, 2, 3, 3))
    d[0, 1, 2, 0] = -0.1
    traj = make_traj([x, x + d], [d])
    assert stability_loss(traj, [0]).item() == pytest.approx(0.1)
    assert stability_loss(traj, [0], reduction="mean").item() == pytest.approx(0.1 / 18)


def test_stability_random_recompute():
    rng = np.random.default_rng(4)
    deltas = rng.normal(size=(5, 2, 2, 3, 3))
    states = [np.zeros((2, 2, 3, 3))] * 6
    times = [1, 3, 4]
    got = stability_loss(make_traj(states, list(deltas)), times).item()
    expected = np.mean([np.mean([np.abs(deltas[t][b]).sum() for b in range(2)]) for t in times])
    assert got == pytest.approx(expected, rel=1e-13)


# ------------------------------------------------------------------ dissipation


def _ab_params(kf, kr):
    crn = build_dense_crn(2, ["P2"])
    return ReactorParams(crn, np.array([kf]), np.array([kr]), np.full(2, D_MIN), np.array(0.1), np.ones(2))


def test_dissipation_equilibrium():
    p = _ab_params(1.0, 1.0)
    traj = make_traj([np.ones((1, 2, 3, 3))] * 5)
    assert dissipation_loss(traj, p).item() == pytest.approx(1.0, abs=1e-15)


def test_dissipation_variance_two_states():
    # k_f = 2, k_r = 1: A = B = 1 gives nu+ = 2, nu- = 1 and sigma = ln 2; B = 2 gives detailed balance
    p = _ab_params(2.0, 1.0)
    s1 = np.ones((1, 2, 2, 2))
    s0 = s1.copy()
    s0[0, 1] = 2.0
    traj = make_traj([s0, s1])
    lam = 0.7
    both = dissipation_loss(traj, p, "both", lam).item()
    mean_only = dissipation_loss(traj, p, "both", 0.0).item()
    assert mean_only == pytest.approx(0.75, rel=1e-12)
    assert both - mean_only == pytest.approx(lam / 16, rel=1e-12)


def test_dissipation_time_constant_sigma_has_no_variance():
    p = _ab_params(2.0, 1.0)
    traj = make_traj([np.ones((1, 2, 2, 2))] * 3)
    assert dissipation_loss(traj, p, "both", 5.0).item() == pytest.approx(0.5, rel=1e-12)


def test_dissipation_channels_and_k_B():
    rng = np.random.default_rng(5)
    p = _ab_params(2.0, 1.0)
    traj = make_traj([rng.uniform(0.5, 1.5, (1, 2, 4, 4)) for _ in range(3)])
    from dense_rdn.thermo import sigma_dif, sigma_rxn

    k = p.rate_vector()
    for kb in (1.0, 100.0):
        r = np.array([sigma_rxn(s, p.crn, k, kb).value.mean() for s in traj.states])
        d = np.array([sigma_dif(s, p.D, p.h, kb).value.mean() for s in traj.states])
        var = np.var(np.exp(-(r + d)))
        assert dissipation_loss(traj, p, "diffusion", 1.0, k_B=kb).item() == pytest.approx(np.mean(np.exp(-d)) + var)
        assert dissipation_loss(traj, p, "reaction", 1.0, k_B=kb).item() == pytest.approx(np.mean(np.exp(-r)) + var)


# ------------------------------------------------------------------ z reconstruction


def test_z_reconstruction_examples():
    z = np.array([[1.0, 0.0, 1.0, 1.0]])
    traj = make_traj([np.ones((1, 1, 2, 2))] * 3)
    confident = lambda x, p: Tensor(60.0 * (2 * z - 1))
    assert z_reconstruction_loss(traj, z, confident, None, [0, 1]).item() < 1e-25
    zero = lambda x, p: Tensor(np.zeros((1, 4)))
    assert z_reconstruction_loss(traj, z, zero, None, [0, 1]).item() == pytest.approx(math.log(2))


def test_z_reconstruction_random_recompute():
    rng = np.random.default_rng(6)
    z = rng.integers(0, 2, (2, 3)).astype(float)
    table = rng.normal(size=(4, 2, 3))
    traj = make_traj([np.full((2, 1, 1, 1), float(t)) for t in range(4)])
    enc = lambda x, p: Tensor(table[int(x.value[0, 0, 0, 0])])
    got = z_reconstruction_loss(traj, z, enc, None, [0, 2]).item()
    bce = lambda l: np.mean(np.logaddexp(0, l) - z * l)
    assert got == pytest.approx(np.mean([bce(table[1]), bce(table[3])]), rel=1e-13)


# ------------------------------------------------------------------ replication and variance target


def test_replication_examples():
    rng = np.random.default_rng(7)
    flat = np.full((1, 2, 8, 4), 0.3)
    assert replication_loss(flat, flat, 2).item() == 0.0
    x0 = rng.uniform(0, 1, (1, 2, 8, 4))
    xt = rng.uniform(0, 1, (1, 2, 8, 4))
    assert replication_loss(x0, xt, 0).item() == pytest.approx(2 * np.linalg.norm(x0 - xt))
    with pytest.raises(ValueError):
        replication_loss(x0, xt, 8)


def test_replication_column_hand_value():
    # 1 x 8 column: X_0 spike at row 3, X_T half-spikes at rows 1 and 5, w = 2
    x0 = np.zeros((1, 1, 8, 1))
    x0[0, 0, 3] = 1.0
    xt = np.zeros((1, 1, 8, 1))
    xt[0, 0, 1] = xt[0, 0, 5] = 0.5
    # each shift lands one half-spike on row 3 (residual 0.5) and the other on row 7 or 7 - 8
    expected = 2 * math.sqrt(0.5**2 + 0.5**2)
    assert replication_loss(x0, xt, 2).item() == pytest.approx(expected)
    assert replication_loss(x0, xt, 2, mode="rmsd").item() == pytest.approx(2 * math.sqrt(0.5 / 8))


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**31 - 1), st.integers(0, 7), st.integers(1, 7))
def test_replication_translation_invariant(seed, offset, w):
    rng = np.random.default_rng(seed)
    x0, xt = rng.uniform(0, 1, (2, 1, 2, 8, 3))
    a = replication_loss(x0, xt, w).item()
    b = replication_loss(np.roll(x0, offset, axis=2), np.roll(xt, offset, axis=2), w).item()
    assert a == pytest.approx(b, rel=1e-12)


def test_variance_target_examples():
    assert variance_target_loss(np.full((1, 3, 4, 4), 2.0), 1.0).item() == pytest.approx(1.0)
    x = np.zeros((1, 2, 2, 2))
    x[0, :, 0, :] = 1.0  # std 0.5 per species
    assert variance_target_loss(x, 1.0).item() == pytest.approx(0.25)
    assert variance_target_loss(x * 10, 1.0).item() == 0.0


# ------------------------------------------------------------------ step penalty


def test_step_penalty_examples():
    x = np.zeros((1, 2, 3, 4))
    small = np.full_like(x, 0.05)
    assert step_size_penalty(make_traj([x] * 3, [small, -small]), 0.05, 1000.0).item() == 0.0
    big = small.copy()
    big[0, 1, 2, 3] = -0.15
    got = step_size_penalty(make_traj([x] * 3, [small, big]), 0.05, 1000.0).item()
    assert got == pytest.approx(100.0 / (3 * 4 * 2))


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_step_penalty_fuzzed(seed):
    rng = np.random.default_rng(seed)
    deltas = rng.normal(0, 0.1, (4, 1, 2, 3, 5))
    traj = make_traj([np.zeros((1, 2, 3, 5))] * 5, list(deltas))
    expected = 7.0 * np.maximum(np.abs(deltas) - 0.05, 0).sum() / (3 * 5 * 4)
    assert step_size_penalty(traj, 0.05, 7.0).item() == pytest.approx(expected, rel=1e-12, abs=1e-15)


# ------------------------------------------------------------------ composition


def test_compose_only_step_penalty_steady():
    x = np.ones((1, 2, 3, 3))
    traj = make_traj([x] * 4)
    cfg = LossConfig(step_weight=1000.0)
    res = compose_loss(cfg, traj, LossContext(None), np.random.default_rng(0))
    assert res.total.item() == 0.0 and res.terms == {"step_penalty": 0.0}


def test_compose_requires_terms_and_inputs():
    traj = make_traj([np.ones((1, 2, 3, 3))] * 2)
    with pytest.raises(ValueError):
        compose_loss(LossConfig(), traj, LossContext(None), np.random.default_rng(0))
    with pytest.raises(ValueError):
        compose_loss(LossConfig(target_weight=1.0), traj, LossContext(None), np.random.default_rng(0))
    with pytest.raises(ValueError):
        compose_loss(LossConfig(z_weight=1.0), traj, LossContext(None), np.random.default_rng(0))


def test_presets_follow_published_weights():
    pat = preset("pattern")
    assert pat.enabled == ["target", "stability", "step_penalty"]
    assert (pat.stability_weight, pat.step_weight, pat.delta_max) == (100.0, 1000.0, 0.05)
    rep = preset("replication")
    assert rep.enabled == ["replication", "variance", "step_penalty"]
    assert (rep.step_weight, rep.delta_max, rep.beta_star) == (1.0, 0.3, 1.0)
    dd = preset("dissipative-distribution")
    assert dd.variance_lambda == 0.04 and dd.dissipation_channels == "diffusion" and dd.z_weight == 1.0
    assert preset("dissipation-diffusion").dissipation_channels == "diffusion"
    assert preset("dissipation-total").dissipation_channels == "both"
    assert preset("replication", beta_star=0.5).beta_star == 0.5
    with pytest.raises(ValueError):
        preset("nope")


def test_config_validation():
    with pytest.raises(ValueError):
        LossConfig(step_weight=-1.0)
    with pytest.raises(ValueError):
        LossConfig(delta_max=0.0)


def test_all_terms_non_negative_and_weighted_sum():
    rng = np.random.default_rng(8)
    crn = build_dense_crn(3)
    p = ReactorParams(crn, rng.uniform(0, 0.05, crn.n_reversible), rng.uniform(0, 0.05, crn.n_reversible),
                      np.full(3, 0.1e-5), np.array(0.1), np.full(3, 0.5))
    traj = rollout(rng.uniform(0, 1, (1, 3, 8, 8)), p, 6)
    z = np.array([[1.0, 0.0]])
    enc = lambda x, q: x.mean(axis=(2, 3))[:, :2]
    cfg = LossConfig(target_weight=1.0, stability_weight=2.0, dissipation_weight=3.0, z_weight=1.5,
                     replication_weight=0.5, variance_target_weight=2.0, step_weight=10.0, delta_max=0.01)
    res = compose_loss(cfg, traj, LossContext(p, np.zeros((8, 8)), z, enc, {}), np.random.default_rng(1))
    assert set(res.terms) == set(losses.TERMS)
    assert all(v >= 0 for v in res.terms.values())
    assert res.total.item() == pytest.approx(sum(res.terms.values()), rel=1e-12)


def test_term_gradients():
    rng = np.random.default_rng(9)
    crn = build_dense_crn(3)
    p = ReactorParams(crn, rng.uniform(0.01, 0.05, crn.n_reversible), rng.uniform(0.01, 0.05, crn.n_reversible),
                      np.full(3, 0.1e-5), np.array(0.1), np.full(3, 0.5))
    x0 = rng.uniform(0.2, 1, (1, 3, 8, 8))
    target = rng.uniform(0, 1, (8, 8))
    times = [0, 2, 4]

    def with_traj(term):
        def fn(x):
            return term(rollout(x, p, 5))
        return fn

    cases = {
        "target": lambda t: target_pattern_loss(t, target, 1, times),
        "stability": lambda t: stability_loss(t, times),
        "dissipation": lambda t: dissipation_loss(t, p, "both", 1.0, times),
        "replication": lambda t: replication_loss(t.x0, t.final, 2),
        "variance": lambda t: variance_target_loss(t.final, 1.0),
        "step": lambda t: step_size_penalty(t, 0.001, 10.0),
    }
    for name, term in cases.items():
        err = grad_check(with_traj(term), x0, n_probe=25, rng=np.random.default_rng(0))
        assert err < 1e-4, name
