import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from adept.errors import InvalidPatience, Unreachable, ZeroState
from adept.exit_policy import (
    Action,
    ExitPolicyConfig,
    InertiaState,
    PolicyKind,
    PreferenceParams,
    calibrate_threshold,
    entropy,
    entropy_exit,
    exit_score,
    expected_task_and_cost,
    local_exit_score,
    patience_exit,
    preference_probability,
    reward,
    satisfies_constraints,
    should_exit,
    update_inertia,
)

vec = st.lists(st.floats(-10, 10), min_size=2, max_size=8)


def test_update_inertia_examples():
    s = update_inertia(InertiaState.empty(2), np.array([3.0, 4.0]))
    assert np.allclose(s.sum, [0.6, 0.8]) and s.layers_accumulated == 1
    s = InertiaState.empty(2)
    for _ in range(2):
        s = update_inertia(s, np.array([1.0, 0.0]))
    assert np.array_equal(s.sum, [2.0, 0.0])
    with pytest.raises(ZeroState):
        update_inertia(InertiaState.empty(2), np.zeros(2))


def test_exit_score_examples():
    s = update_inertia(InertiaState.empty(2), np.array([2.0, 0.0]))
    assert exit_score(np.array([5.0, 0.0]), s) == pytest.approx(1.0)
    assert exit_score(np.array([0.0, 3.0]), s) == pytest.approx(0.0)
    s = update_inertia(s, np.array([0.0, 1.0]))
    assert exit_score(np.array([1.0, 1.0]), s) == pytest.approx(1.0, abs=1e-15)
    with pytest.raises(ZeroState):
        exit_score(np.ones(2), InertiaState.empty(2))


@given(vec, st.integers(0, 10_000), st.floats(0.01, 1e3))
def test_exit_score_scale_invariant_and_bounded(h, seed, c):
    h = np.array(h)
    if np.linalg.norm(h) < 1e-6:
        return
    rng = np.random.default_rng(seed)
    s = InertiaState.empty(len(h))
    for _ in range(3):
        s = update_inertia(s, rng.normal(size=len(h)))
    assert np.linalg.norm(s.sum) <= s.layers_accumulated + 1e-12
    a, b = exit_score(h, s), exit_score(c * h, s)
    assert abs(a - b) < 1e-12
    assert -1 - 1e-12 <= a <= 1 + 1e-12
    assert -1 - 1e-12 <= local_exit_score(h, rng.normal(size=len(h))) <= 1 + 1e-12


def test_local_exit_score_examples():
    h = np.array([1.0, 2.0, -1.0])
    assert local_exit_score(h, h) == pytest.approx(1.0)
    assert local_exit_score(h, -h) == pytest.approx(-1.0)
    assert local_exit_score(np.array([1.0, 0.0]), np.array([1.0, 1.0])) == pytest.approx(1 / math.sqrt(2))
    with pytest.raises(ZeroState):
        local_exit_score(np.zeros(2), h[:2])


def test_should_exit_examples():
    p = ExitPolicyConfig(delta=0.9)
    assert not should_exit(p, 1, 0.99)
    assert should_exit(p, 5, 0.9)
    assert not should_exit(p, 5, 0.8999)
    assert not should_exit(ExitPolicyConfig(PolicyKind.NONE), 5, 1.0)
    assert should_exit(ExitPolicyConfig(PolicyKind.ENTROPY, entropy_threshold=0.5), 3, 0.2)
    with pytest.raises(ValueError):
        ExitPolicyConfig(min_exit_layer=1)


def test_patience_examples():
    assert patience_exit([5, 5, 5], 3) == 3
    assert patience_exit([5, 6, 5, 6], 2) is None
    assert patience_exit([1, 2, 2, 2, 9], 3) == 4
    with pytest.raises(InvalidPatience):
        patience_exit([1, 1], 1)
    with pytest.raises(InvalidPatience):
        ExitPolicyConfig(PolicyKind.PATIENCE, patience_t=1)


@given(st.lists(st.integers(0, 2), max_size=12), st.integers(2, 4))
def test_patience_matches_brute_force(preds, t):
    want = None
    for end in range(t, len(preds) + 1):
        if len(set(preds[end - t : end])) == 1:
            want = end
            break
    assert patience_exit(preds, t) == want


def test_entropy_examples():
    v = 7
    assert entropy(np.zeros(v)) == pytest.approx(math.log(v))
    assert entropy_exit(np.zeros(v), math.log(v) + 1e-12)
    assert not entropy_exit(np.zeros(v), math.log(v) - 1e-9)
    assert entropy(np.array([1e6, 0, 0])) == pytest.approx(0.0, abs=1e-12)
    p = np.exp([1.0, 0.0]) / np.exp([1.0, 0.0]).sum()
    assert entropy(np.array([1.0, 0.0])) == pytest.approx(-(p[0] * math.log(p[0]) + p[1] * math.log(p[1])), abs=1e-15)


def _params(lam, beta, tc, te, cc, ce, **kw):
    return PreferenceParams(lam, beta, {Action.CONTINUE: tc, Action.EXIT: te}, {Action.CONTINUE: cc, Action.EXIT: ce}, **kw)


def test_preference_examples():
    p = preference_probability(_params(1.0, 1.0, 0.3, 0.3, 2.0, 2.0))
    assert p[Action.EXIT] == pytest.approx(0.5)
    # beta only enters through cost differences, so equal costs reproduce the beta = 0 case
    p = preference_probability(_params(1.0, 1.0, 0.0, math.log(2), 1.0, 1.0))
    assert p[Action.EXIT] == pytest.approx(2 / 3, abs=1e-15)
    p = preference_probability(_params(1.0, 1e4, 0.0, 0.0, 1.0, 0.5))
    assert p[Action.EXIT] == pytest.approx(1.0)
    with pytest.raises(ValueError):
        _params(1.0, 0.0, 0, 0, 0, 0)


def test_reward_examples():
    p = _params(2.0, 0.5, 1.0, 1.0, 3.0, 3.0)
    assert reward(p, Action.EXIT) == pytest.approx(math.log(0.5))
    assert reward(p, Action.CONTINUE) == pytest.approx(math.log(0.5))
    p = _params(2.0, 0.5, 1.0, 0.2, 3.0, 1.0)
    # R(a) = lam*T(a) - beta*C(a) + shared constant
    const = reward(p, Action.EXIT) - (2.0 * 0.2 - 0.5 * 1.0)
    assert reward(p, Action.CONTINUE) - (2.0 * 1.0 - 0.5 * 3.0) == pytest.approx(const, abs=1e-12)


@given(
    st.floats(0.01, 10), st.floats(0.01, 10),
    st.floats(-5, 5), st.floats(-5, 5), st.floats(-5, 5), st.floats(-5, 5), st.floats(-50, 50),
)
def test_preference_properties(lam, beta, tc, te, cc, ce, shift):
    p = _params(lam, beta, tc, te, cc, ce)
    probs = preference_probability(p)
    assert abs(sum(probs.values()) - 1.0) < 1e-12
    # shifting both utilities by the same constant leaves the distribution unchanged
    q = preference_probability(_params(lam, beta, tc + shift / lam, te + shift / lam, cc, ce))
    for a in probs:
        assert abs(probs[a] - q[a]) < 1e-12
    diff = reward(p, Action.EXIT) - reward(p, Action.CONTINUE)
    assert abs(diff - (lam * (te - tc) - beta * (ce - cc))) < 1e-12


def test_constraints():
    p = _params(1.0, 1.0, 0.0, 0.0, 0.0, 0.0, c_threshold=1.0, t_min=-1.0)
    assert expected_task_and_cost(p) == (0.0, 0.0)
    assert satisfies_constraints(p)
    assert not satisfies_constraints(_params(1.0, 1.0, 0.0, 0.0, 2.0, 2.0, c_threshold=1.0))


def test_calibration_examples(tiny_model, tiny_hsm):
    corpus = [list(range(30, 50)), list(range(60, 76))]
    zero = calibrate_threshold(tiny_model, tiny_hsm, corpus, 0.0)
    assert zero.delta == 1.0 and abs(zero.achieved) <= 0.01
    with pytest.raises(Unreachable) as ei:
        calibrate_threshold(tiny_model, tiny_hsm, corpus, 0.95)
    assert ei.value.max_achievable < 0.95
    from adept.runtime import mean_reduction

    res = calibrate_threshold(tiny_model, tiny_hsm, corpus, 0.10, 0.01)
    assert res.within_tol and abs(res.achieved - 0.10) <= 0.01
    again = mean_reduction(tiny_model, tiny_hsm, ExitPolicyConfig(delta=res.delta), corpus)
    assert again == res.achieved
