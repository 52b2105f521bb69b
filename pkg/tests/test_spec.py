import itertools
import re

import pytest

from stochabs.spec import Dfa, HorizonSpec, LabelMap, dfa_run, label, reach_avoid_dfa


def test_reach_avoid_accepts_aab():
    dfa = reach_avoid_dfa("a", "b", "c")
    final, flags = dfa_run(dfa, "aab")
    assert final in dfa.accepting and flags == [False, False, True]


def test_immediate_target():
    dfa = reach_avoid_dfa()
    assert dfa_run(dfa, "b")[1] == [True]


def test_sink_never_accepts():
    dfa = reach_avoid_dfa()
    final, flags = dfa_run(dfa, "aacab")
    assert final not in dfa.accepting and not any(flags)


def test_dfa_run_cases():
    dfa = reach_avoid_dfa()
    assert dfa_run(dfa, "ab")[1] == [False, True]
    assert dfa_run(dfa, "") == ("q0", [])
    assert dfa_run(dfa, "c")[0] == "q_rej"
    with pytest.raises(ValueError):
        dfa_run(dfa, "x")


def test_duplicate_letters_rejected():
    with pytest.raises(ValueError):
        reach_avoid_dfa("a", "a", "c")


def test_partial_transition_map_rejected():
    with pytest.raises(ValueError):
        Dfa(("q",), "q", ("a", "b"), frozenset(), {("q", "a"): "q"})


def test_language_matches_regex_oracle():
    dfa = reach_avoid_dfa()
    pattern = re.compile(r"a*b")
    for n in range(6):
        for word in itertools.product("abc", repeat=n):
            w = "".join(word)
            accepted = any(dfa_run(dfa, w)[1])
            assert accepted == bool(pattern.match(w)), w


def running_labels():
    # A = [19, 21] \ B, B = [20.5, 21]; B listed first so its boundary wins
    return LabelMap((("b", [([20.5], [21.0])]), ("a", [([19.0], [20.5])])), "c")


def test_labels():
    lm = running_labels()
    assert label(lm, [19.5]) == "a"
    assert label(lm, [30.0]) == "c"
    assert label(lm, [20.5]) == "b"  # shared boundary: earlier entry


def test_overlapping_regions_rejected():
    with pytest.raises(ValueError):
        LabelMap((("a", [([0.0], [2.0])]), ("b", [([1.0], [3.0])])), "c")


def test_horizon_spec_validation():
    with pytest.raises(ValueError):
        HorizonSpec("safety", 3)
    with pytest.raises(ValueError):
        HorizonSpec("safety", -1, safe=[([0.0], [1.0])])
    with pytest.raises(ValueError):
        HorizonSpec("eventually", 3, safe=[([0.0], [1.0])])


def test_holds_on_reach_avoid():
    spec = HorizonSpec("reach-avoid", 3, safe=[([19.0], [21.0])], target=[([20.5], [21.0])])
    Y = [[[20.0], [20.6], [30.0], [30.0]],
         [[20.0], [30.0], [20.6], [20.6]],
         [[20.0], [20.0], [20.0], [20.0]]]
    assert spec.holds_on(Y).tolist() == [True, False, False]


def test_holds_on_dfa_matches_reach_avoid():
    lm = running_labels()
    dfa_spec = HorizonSpec("dfa", 3, dfa=reach_avoid_dfa(), labelmap=lm)
    ra = HorizonSpec("reach-avoid", 3, safe=[([19.0], [21.0])], target=[([20.5], [21.0])])
    Y = [[[20.0], [20.6], [30.0], [30.0]], [[20.0], [30.0], [20.6], [20.6]], [[20.7], [0], [0], [0]]]
    assert dfa_spec.holds_on(Y).tolist() == ra.holds_on(Y).tolist()
