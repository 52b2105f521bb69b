import warnings

import numpy as np
import pytest
import scipy.sparse as sp

from helpers import dense_mdp, random_mdp
from stochabs.abstraction import FiniteMdp, abstract
from stochabs.grid import build_grid
from stochabs.model import Box
from stochabs.spec import HorizonSpec, LabelMap, reach_avoid_dfa
from stochabs.synthesis import (ProductPolicy, RegionNotAligned, brute_force_value, policy_csv,
                                refine_policy, value_iterate)

ANY = [([-1e9], [1e9])]


def safety(T):
    return HorizonSpec("safety", T, safe=ANY)


def three_state():
    return dense_mdp([[0, 0.9, 0.1], [0, 1, 0], [0, 0, 1]])


def test_empty_horizon_safe_state():
    vf, _ = value_iterate(three_state(), safety(0), safe_mask=[True, True, False])
    assert vf.initial()[:2].tolist() == [1.0, 1.0]


def test_three_state_hand_recursion():
    mdp = three_state()
    vf, _ = value_iterate(mdp, safety(2), safe_mask=[True, True, False])
    assert vf.initial()[0] == pytest.approx(0.9)
    bf = brute_force_value(mdp, safety(2), safe_mask=[True, True, False])
    assert bf[0] == pytest.approx(0.9)


def test_deterministic_chain_reach():
    mdp = dense_mdp([[0, 1, 0, 0], [0, 0, 1, 0], [0, 0, 1, 0], [0, 0, 0, 1]])
    spec = HorizonSpec("reachability", 2, target=ANY)
    target = [False, False, True, False]
    assert brute_force_value(mdp, spec, target_mask=target)[0] == 1.0
    assert value_iterate(mdp, spec, target_mask=target)[0].initial()[0] == 1.0


def test_coin_mdp():
    mdp = dense_mdp([[0.5, 0.5, 0], [0.5, 0.5, 0], [0, 0, 1]])
    safe = [True, False, False]
    # y(0..3) all in state 0: three fair coin flips
    assert brute_force_value(mdp, safety(3), safe_mask=safe)[0] == pytest.approx(0.125)
    assert value_iterate(mdp, safety(3), safe_mask=safe)[0].initial()[0] == pytest.approx(0.125)


def test_brute_force_refuses_large():
    mdp = random_mdp(np.random.default_rng(0), 9, 1)
    with pytest.raises(ValueError):
        brute_force_value(mdp, safety(2))
    with pytest.raises(ValueError):
        brute_force_value(random_mdp(np.random.default_rng(0), 3, 1), safety(7))


def test_empty_target_gives_zero():
    mdp = random_mdp(np.random.default_rng(1), 5, 2)
    spec = HorizonSpec("reachability", 4, target=[([100.0], [101.0])])
    vf, _ = value_iterate(mdp, spec)
    assert not vf.values.any()


def _masks(rng, n):
    safe = rng.random(n) < 0.7
    target = rng.random(n) < 0.3
    return safe, target


@pytest.mark.parametrize("kind", ["safety", "reachability", "reach-avoid"])
def test_oracle_equivalence_random(kind):
    rng = np.random.default_rng({"safety": 1, "reachability": 2, "reach-avoid": 3}[kind])
    for _ in range(40):
        n = int(rng.integers(2, 7))
        mdp = random_mdp(rng, n, int(rng.integers(1, 4)), support=2)
        T = int(rng.integers(0, 5))
        safe, target = _masks(rng, n)
        spec = HorizonSpec(kind, T, safe=ANY, target=ANY)
        vf, _ = value_iterate(mdp, spec, safe_mask=safe, target_mask=target)
        bf = brute_force_value(mdp, spec, safe_mask=safe, target_mask=target)
        assert np.max(np.abs(vf.initial() - bf)) <= 1e-12


def test_oracle_equivalence_dfa():
    rng = np.random.default_rng(4)
    dfa = reach_avoid_dfa()
    lm = LabelMap((("b", [([0.0], [0.5])]),), "a")
    for _ in range(30):
        n = int(rng.integers(2, 6))
        mdp = random_mdp(rng, n, int(rng.integers(1, 3)), support=2)
        letters = rng.integers(0, 3, size=n - 1)
        spec = HorizonSpec("dfa", int(rng.integers(0, 4)), dfa=dfa, labelmap=lm)
        vf, _ = value_iterate(mdp, spec, letters=letters)
        bf = brute_force_value(mdp, spec, letters=letters)
        assert np.max(np.abs(vf.initial()[:-1] - bf[:-1])) <= 1e-12


def test_dfa_matches_reach_avoid():
    rng = np.random.default_rng(5)
    for _ in range(20):
        n = 6
        mdp = random_mdp(rng, n, 2)
        letters = rng.integers(0, 3, size=n - 1)  # 0=a safe, 1=b target, 2=c unsafe
        safe = np.append(letters == 0, False)
        target = np.append(letters == 1, False)
        ra = HorizonSpec("reach-avoid", 4, safe=ANY, target=ANY)
        v1 = value_iterate(mdp, ra, safe_mask=safe | target, target_mask=target)[0].initial()
        lm = LabelMap((("b", [([0.0], [0.5])]),), "a")
        spec = HorizonSpec("dfa", 4, dfa=reach_avoid_dfa(), labelmap=lm)
        v2 = value_iterate(mdp, spec, letters=letters)[0].initial()
        assert np.allclose(v1[:-1], v2[:-1], atol=1e-12)


def test_adding_input_never_decreases():
    rng = np.random.default_rng(6)
    for _ in range(20):
        mdp = random_mdp(rng, 6, 2)
        extra = random_mdp(rng, 6, 1)
        bigger = FiniteMdp(mdp.matrices + extra.matrices, mdp.state_reps)
        safe, target = _masks(rng, 6)
        spec = HorizonSpec("reach-avoid", 5, safe=ANY, target=ANY)
        a = value_iterate(mdp, spec, safe_mask=safe, target_mask=target)[0].values
        b = value_iterate(bigger, spec, safe_mask=safe, target_mask=target)[0].values
        assert np.all(b >= a - 1e-15)


def test_permutation_equivariance():
    rng = np.random.default_rng(7)
    mdp = random_mdp(rng, 7, 3)
    perm = np.append(rng.permutation(6), 6)  # keep absorbing last
    Pm = sp.csr_matrix((np.ones(7), (np.arange(7), perm)), shape=(7, 7))
    permuted = FiniteMdp(tuple((Pm.T @ m @ Pm).tocsr() for m in mdp.matrices))
    safe, _ = _masks(rng, 7)
    spec = safety(6)
    vf, pol = value_iterate(mdp, spec, safe_mask=safe)
    safe_p = np.empty_like(safe)
    safe_p[perm] = safe
    vf2, pol2 = value_iterate(permuted, spec, safe_mask=safe_p)
    assert np.array_equal(vf2.values[:, perm], vf.values)
    assert np.array_equal(pol2.table[:, perm], pol.table)


def test_values_bounded_and_safety_monotone():
    rng = np.random.default_rng(8)
    mdp = random_mdp(rng, 8, 3)
    safe, _ = _masks(rng, 8)
    vf, _ = value_iterate(mdp, safety(10), safe_mask=safe)
    v = vf.values[..., 0]
    assert v.min() >= 0 and v.max() <= 1
    # V_k has T-k steps remaining; more remaining steps never helps
    assert np.all(np.diff(v, axis=0) >= -1e-15)


def test_duality_with_complement_dfa():
    rng = np.random.default_rng(9)
    dfa = reach_avoid_dfa()
    lm = LabelMap((("b", [([0.0], [0.5])]),), "a")
    for _ in range(20):
        mdp = random_mdp(rng, 6, 2)
        letters = rng.integers(0, 3, size=5)
        spec = HorizonSpec("dfa", 4, dfa=dfa, labelmap=lm)
        # the complement automaton accepts prefixes that have not (yet) reached acceptance;
        # over bounded words the negation is "never accepted within the horizon", which is
        # a safety property on the product
        best = value_iterate(mdp, spec, letters=letters)[0].initial()
        worst = value_iterate(mdp, spec, letters=letters, maximize=False)[0].initial()
        assert np.all(worst <= best + 1e-15)
        # sup over policies of P(not phi) = 1 - inf P(phi) >= 1 - sup P(phi)
        assert np.all(1.0 - worst >= 1.0 - best - 1e-15)


def test_tie_break_lowest_index():
    mdp = dense_mdp([[1, 0], [0, 1]], [[1, 0], [0, 1]])
    _, pol = value_iterate(mdp, safety(3), safe_mask=[True, False])
    assert not pol.table.any()


def test_policy_compression():
    mdp = dense_mdp([[1, 0], [0, 1]], [[1, 0], [0, 1]])
    _, pol = value_iterate(mdp, safety(5), safe_mask=[True, False])
    assert len(pol.compressed()) == 1


def test_region_alignment_warning(room):
    g = build_grid(Box([19.0], [21.0]), 10)
    mdp = abstract(room, g, [0.0, 0.6])
    spec = HorizonSpec("safety", 2, safe=[([19.0], [20.03])])
    with pytest.warns(RegionNotAligned):
        value_iterate(mdp, spec, grid=g)
    with pytest.raises(ValueError):
        value_iterate(mdp, spec, grid=g, strict=True)
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        value_iterate(mdp, HorizonSpec("safety", 2, safe=[([19.0], [20.0])]), grid=g)


def test_refined_lookup_semantics(room):
    g = build_grid(Box([19.0], [21.0]), 400)
    mdp = abstract(room, g, np.linspace(0, 0.6, 7))
    _, pol = value_iterate(mdp, HorizonSpec("safety", 5, safe=[([19.0], [21.0])]))
    ctrl = refine_policy(pol, g, mdp.input_reps)
    idx = int(g.index(np.array([[20.001]]))[0])
    assert ctrl.act(0, [20.001]) == pytest.approx(mdp.input_reps[pol.table[0, idx, 0]])
    ctrl.act(0, [30.0])
    assert ctrl.out_of_domain == 1


def test_dfa_tracking_holds_fallback():
    g = build_grid(Box([0.0], [1.0]), 2)
    table = np.ones((3, 3, 3), dtype=np.int64)
    pol = ProductPolicy(table)
    dfa = reach_avoid_dfa()
    lm = LabelMap((("b", [([0.5], [1.0])]),), "a")
    ctrl = refine_policy(pol, g, [[0.0], [1.0]], dfa=dfa, labelmap=lm, fallback=[0.0])
    locs = ctrl.initial_locations([[0.2]])
    assert ctrl(0, [[0.2]], locs)[0, 0] == 1.0
    locs = ctrl.advance(locs, [[0.7]])
    assert dfa.locations[locs[0]] == "q_acc"
    assert ctrl(1, [[0.2]], locs)[0, 0] == 0.0


def test_policy_csv_header(room):
    g = build_grid(Box([19.0], [21.0]), 4)
    mdp = abstract(room, g, [0.0, 0.6])
    vf, pol = value_iterate(mdp, HorizonSpec("safety", 2, safe=[([19.0], [21.0])]))
    lines = policy_csv(vf, pol, mdp).splitlines()
    assert lines[0] == "k,state_idx,dfa_loc,x0,input_idx,u0,value"
    assert len(lines) == 1 + 2 * 4
