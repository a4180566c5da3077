from collections import Counter
from itertools import combinations_with_replacement
from math import comb

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dense_rdn.crn import build_dense_crn, expected_counts, format_reactions, reaction_delta, reaction_rates
from dense_rdn.diffcore import Tensor, grad_check, packed


def brute_force_counts(n):
    """Count reversible reactions by classifying every pair of species multisets."""
    found = {"P1": set(), "P2": set(), "P3": set()}
    multisets = [m for size in (1, 2, 3) for m in combinations_with_replacement(range(n), size)]
    for reac in multisets:
        for prod in multisets:
            if len(reac) != len(prod) or reac == prod:
                continue
            key = frozenset([reac, prod])
            rc, pc = Counter(reac), Counter(prod)
            if len(reac) == 1:
                found["P2"].add(key)
            elif len(reac) == 2:
                # A + B -> 2C with A, B, C distinct
                if len(rc) == 2 and len(pc) == 1 and not set(pc) & set(rc):
                    found["P1"].add(key)
            else:
                # A + 2B -> 3B (or its reverse) with A != B
                for a, b in ((reac, prod), (prod, reac)):
                    ca, cb = Counter(a), Counter(b)
                    if len(cb) == 1 and len(ca) == 2:
                        y = next(iter(cb))
                        if ca[y] == 2:
                            found["P3"].add(key)
    return tuple(len(found[p]) for p in ("P1", "P2", "P3"))


@pytest.mark.parametrize("n, total", [(2, 3), (4, 30), (5, 60)])
def test_counts_examples(n, total):
    assert build_dense_crn(n).n_reversible == total


@pytest.mark.parametrize("n", range(2, 9))
def test_counts_match_brute_force_and_formula(n):
    crn = build_dense_crn(n)
    by_proto = Counter(r.prototype for r in crn.reactions)
    got = (by_proto["P1"], by_proto["P2"], by_proto["P3"])
    assert got == brute_force_counts(n)
    assert got == (comb(n, 2) * (n - 2), comb(n, 2), n * (n - 1))
    assert got == expected_counts(n)


@pytest.mark.parametrize("n, directed", [(4, 24), (5, 40)])
def test_p3_only_directed_counts(n, directed):
    assert build_dense_crn(n, ["P3"]).n_directed == directed == 2 * n * (n - 1)


def test_p1_needs_three_species():
    with pytest.raises(ValueError):
        build_dense_crn(2, ["P1"])
    with pytest.raises(ValueError):
        build_dense_crn(1)
    with pytest.raises(ValueError):
        build_dense_crn(4, ["P9"])


def test_enumeration_deterministic_and_canonical():
    a, b = build_dense_crn(5), build_dense_crn(5)
    assert a.reactions == b.reactions
    protos = [r.prototype for r in a.reactions]
    assert protos == sorted(protos)
    assert len({(r.reactants, r.products) for r in a.reactions}) == a.n_reversible


def test_stoichiometry_invariants():
    crn = build_dense_crn(6)
    np.testing.assert_array_equal(crn.net.sum(axis=1), 0)
    assert set(np.unique(crn.order)) <= {0, 1, 2, 3}
    for r in crn.reactions:
        assert len(r.reactants) == len(r.products)


def _single(crn, reactants, products, k, x):
    j, d = crn.index(reactants, products)
    kv = np.zeros(crn.n_directed)
    kv[j if d == "f" else j + crn.n_reversible] = k
    state = np.asarray(x, dtype=float).reshape(1, -1, 1, 1)
    return kv, state, (j if d == "f" else j + crn.n_reversible)


def test_mass_action_examples():
    crn = build_dense_crn(3)
    k, x, j = _single(crn, (0, 1), (2, 2), 2.0, [0.5, 0.2, 0.0])
    assert reaction_rates(x, crn, k).value[0, j, 0, 0] == pytest.approx(0.2, abs=1e-15)
    np.testing.assert_allclose(reaction_delta(x, crn, k).value[0, :, 0, 0], [-0.2, -0.2, 0.4], atol=1e-15)
    k, x, j = _single(crn, (0, 1, 1), (1, 1, 1), 1.0, [1.0, 0.5, 0.0])
    assert reaction_rates(x, crn, k).value[0, j, 0, 0] == pytest.approx(0.25, abs=1e-15)


def test_zero_rate_and_zero_field():
    crn = build_dense_crn(4)
    x = np.random.default_rng(0).uniform(0, 1, (1, 4, 3, 3))
    assert np.all(reaction_rates(x, crn, np.zeros(crn.n_directed)).value == 0)
    k = np.ones(crn.n_directed)
    assert np.all(reaction_delta(np.zeros((1, 4, 3, 3)), crn, k).value == 0)


@pytest.mark.parametrize("protos", [None, ["P1"], ["P2"], ["P3"]])
def test_detailed_balance_uniform_state(protos):
    crn = build_dense_crn(4, protos)
    k = np.random.default_rng(1).uniform(0.1, 2.0, crn.n_reversible)
    x = np.full((1, 4, 2, 2), 0.37)
    dx = reaction_delta(x, crn, np.concatenate([k, k])).value
    assert np.abs(dx).max() < 1e-12


def test_negative_input_tolerance():
    crn = build_dense_crn(3)
    k = np.ones(crn.n_directed)
    x = np.full((1, 3, 1, 1), 0.5)
    x[0, 0] = -5e-13
    reaction_rates(x, crn, k)  # within tolerance
    x[0, 0] = -1e-11
    with pytest.raises(ValueError):
        reaction_rates(x, crn, k)


def test_reaction_gradients():
    crn = build_dense_crn(3)
    rng = np.random.default_rng(2)
    x0 = rng.uniform(0.2, 1.5, (1, 3, 3, 3))
    k0 = rng.uniform(0.1, 1.0, crn.n_directed)
    w = rng.normal(size=x0.shape)
    fn, point = packed(lambda x, k: (reaction_delta(x, crn, k) * w).sum(), [x0, k0])
    assert grad_check(fn, point) < 1e-4


def test_format_reactions():
    crn = build_dense_crn(3)
    lines = format_reactions(crn).splitlines()
    assert len(lines) == crn.n_reversible
    assert lines[0].startswith("1 A + 1 B <-> 2 C")


@settings(max_examples=200, deadline=None)
@given(st.integers(2, 6), st.integers(0, 2**31 - 1))
def test_per_cell_mole_conservation(n, seed):
    rng = np.random.default_rng(seed)
    crn = build_dense_crn(n)
    x = rng.exponential(1.0, (1, n, 3, 2))
    k = rng.exponential(1.0, crn.n_directed)
    dx = reaction_delta(Tensor(x), crn, k).value
    scale = max(1.0, float(np.abs(dx).max()))
    assert np.abs(dx.sum(axis=1)).max() < 1e-12 * scale
