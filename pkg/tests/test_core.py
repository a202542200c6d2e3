import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from powermat import core
from powermat.core import DimensionError, Hyperparams, ValidationError


def H(**kw):
    base = dict(gamma=0.1, sigma_u=1.0, sigma_v=1.0, r_max=5.0, k=1)
    base.update(kw)
    return Hyperparams(**base)


# dot / clamped_dot / predictions

@pytest.mark.parametrize("u, v, expected", [
    ([1, 0], [0, 1], 0.0),
    ([0.5], [0.4], 0.2),
    ([1, 2, 3], [4, 5, 6], 32.0),
])
def test_dot(u, v, expected):
    assert core.dot(np.array(u, float), np.array(v, float)) == pytest.approx(expected, abs=1e-15)


def test_dot_dimension_mismatch():
    with pytest.raises(DimensionError):
        core.dot(np.ones(2), np.ones(3))


def test_clamped_dot():
    assert core.clamped_dot(np.array([0.5]), np.array([0.4]), 1e-6) == pytest.approx(0.2)
    assert core.clamped_dot(np.array([0.5]), np.array([-0.6]), 1e-6) == 1e-6
    assert core.clamped_dot(np.array([1.0, 0.0]), np.array([0.0, 1.0]), 1e-6) == 1e-6
    with pytest.raises(ValidationError):
        core.clamped_dot(np.ones(1), np.ones(1), 1.0)


@pytest.mark.parametrize("x, expected", [(0.6, 3.0), (1.0, 5.0), (0.0, 0.0)])
def test_predict_linear(x, expected):
    assert core.predict_linear(np.array([x]), np.array([1.0]), 5.0) == pytest.approx(expected)


def test_predict_power_example():
    # x = 0.2, alpha.c = 0.2, beta = 0.3 -> e = 0.26; 5 * 0.2**0.26 evaluated with mpmath at 40 digits
    got = core.predict_power(np.array([0.5]), np.array([0.4]), np.array([0.2]), np.array([1.0]), 0.3, H())
    assert got == pytest.approx(3.290317468810911613, rel=1e-14)


def test_predict_power_unit_base_and_zero_exponent():
    h = H(k=2)
    one = np.array([1.0, 0.0])
    assert core.predict_power(one, one, np.array([7.0]), np.array([1.0]), -3.0, h) == 5.0
    # alpha.c + beta x = 0.5 - 2.5 * 0.2 = 0
    u, v = np.array([0.5, 0.0]), np.array([0.4, 0.0])
    assert core.predict_power(u, v, np.array([0.5]), np.array([1.0]), -2.5, h) == pytest.approx(5.0)


def test_predict_power_exponent_cap():
    h = H(exponent_cap=2.0)
    got = core.predict_power(np.array([0.5]), np.array([1.0]), np.array([100.0]), np.array([1.0]), 0.0, h)
    assert got == pytest.approx(5.0 * 0.5 ** 2)


def test_predict_power_context_mismatch():
    with pytest.raises(DimensionError):
        core.predict_power(np.ones(1), np.ones(1), np.ones(2), np.ones(3), 0.0, H())


# PowerMat verbatim step

EX = dict(u=np.array([0.5]), v=np.array([0.4]), alpha=np.array([0.2]), beta=0.3, c=np.array([1.0]))


def test_verbatim_example():
    u, v, a, b = core.powermat_step_verbatim(EX["u"], EX["v"], EX["alpha"], EX["beta"], EX["c"], H())
    assert abs(u[0] - 0.5872) <= 1e-12
    assert abs(v[0] - 0.464) <= 1e-12
    assert abs(a[0] - 0.18) <= 1e-12
    assert abs(b - 0.296) <= 1e-12


def test_verbatim_does_not_mutate_inputs():
    u, v = EX["u"].copy(), EX["v"].copy()
    core.powermat_step_verbatim(u, v, EX["alpha"], EX["beta"], EX["c"], H())
    assert u[0] == 0.5 and v[0] == 0.4


def test_verbatim_overflow_names_parameter():
    big = np.array([1e200])
    with np.errstate(over="ignore", invalid="ignore"):
        with pytest.raises(core.NumericOverflowError) as info:
            core.powermat_step_verbatim(big, big, np.zeros(1), 0.0, np.zeros(1), H())
    assert info.value.parameter in {"u", "v", "alpha", "beta"}


def test_powermat_step_dispatches_on_mode():
    args = (EX["u"], EX["v"], EX["alpha"], EX["beta"], EX["c"])
    for mode, fn in (("verbatim", core.powermat_step_verbatim), ("derived", core.powermat_step_derived)):
        h = H(gradient_mode=mode)
        got = core.powermat_step(*args, h)
        want = fn(*args, h)
        assert all(np.array_equal(g, w) for g, w in zip(got, want))


# PowerMat derived step

def test_derived_example():
    # reference values from an mpmath evaluation of the closed-form gradient
    u, v, a, b = core.powermat_step_derived(EX["u"], EX["v"], EX["alpha"], EX["beta"], EX["c"], H())
    assert u[0] == pytest.approx(0.43268674505079079550, rel=1e-13)
    assert v[0] == pytest.approx(0.36085843131348849438, rel=1e-13)
    assert a[0] == pytest.approx(0.03905620875658996254, rel=1e-12)
    assert b == pytest.approx(0.26781124175131799251, rel=1e-13)


def test_derived_at_unit_dot():
    u, v = np.array([1.0, 0.0]), np.array([1.0, 0.5])
    alpha, c, beta = np.array([0.3, -0.1]), np.array([1.0, 1.0]), 0.7
    h = H(k=2, gamma=0.1, sigma_u=2.0, sigma_v=2.0)
    u2, v2, a2, b2 = core.powermat_step_derived(u, v, alpha, beta, c, h)
    assert np.array_equal(a2, alpha) and b2 == beta
    pull = alpha @ c + beta  # (alpha.c + beta x) / x at x = 1
    np.testing.assert_allclose(u2, u - 0.1 * (-pull * v + (2 / 4.0) * u), rtol=1e-15)


def _central_diff(f, x, h=1e-6):
    g = np.zeros_like(x)
    for t in range(x.size):
        e = np.zeros_like(x)
        e[t] = h
        g[t] = (f(x + e) - f(x - e)) / (2 * h)
    return g


def _rel_err(a, b):
    return np.linalg.norm(a - b) / max(np.linalg.norm(a), np.linalg.norm(b), 1e-12)


def test_derived_matches_finite_differences_on_example():
    h = H()
    k, d = 1, 1
    params = np.concatenate([EX["u"], EX["v"], EX["alpha"], [EX["beta"]]])

    def J(p):
        return core.powermat_objective(p[:k], p[k:2 * k], p[2 * k:2 * k + d], p[-1], EX["c"], h)

    g = np.concatenate([np.atleast_1d(x) for x in core.powermat_gradient(
        EX["u"], EX["v"], EX["alpha"], EX["beta"], EX["c"], h)])
    assert _rel_err(g, _central_diff(J, params)) <= 1e-5


def test_derived_floored_dot_has_only_regularizer_pull():
    u, v = np.array([1.0]), np.array([-1.0])
    h = H(gamma=0.1)
    u2, v2, _, _ = core.powermat_step_derived(u, v, np.array([1.0]), 2.0, np.array([1.0]), h)
    np.testing.assert_allclose(u2, u - 0.1 * 2 * u)
    np.testing.assert_allclose(v2, v - 0.1 * 2 * v)


# DotMat

def test_dotmat_loss_examples():
    h = H()
    assert core.dotmat_loss(np.array([1.0]), np.array([1.0]), 5.0, h) == 0.0
    got = core.dotmat_loss(np.array([0.5]), np.array([1.0]), 2.5, h)
    assert got == pytest.approx(0.20710678118654752440, abs=1e-12)
    tiny = core.dotmat_loss(np.array([1.0]), np.array([-1.0]), 0.0, h)
    assert math.isfinite(tiny) and tiny == pytest.approx(1.0, abs=1e-4)


def test_dotmat_loss_rating_out_of_range():
    with pytest.raises(ValidationError):
        core.dotmat_loss(np.ones(1), np.ones(1), 6.0, H())


def test_dotmat_step_exact_fit_and_stationary_point():
    h = H()
    u, v = core.dotmat_step(np.array([1.0]), np.array([1.0]), 5.0, h)
    assert u[0] == 1.0 and v[0] == 1.0
    x = 1 / math.e
    u, v = core.dotmat_step(np.array([x]), np.array([1.0]), 1.0, h)
    assert u[0] == pytest.approx(x, abs=1e-16)


def test_dotmat_step_example():
    # x = 0.5, r/r_max = 0.4, gamma = 0.1, v = [0.5] so u = [1.0]; mpmath reference
    u, v = core.dotmat_step(np.array([1.0]), np.array([0.5]), 2.0, H())
    assert u[0] == pytest.approx(0.98915111452738630357, rel=1e-14)
    assert v[0] == pytest.approx(0.47830222905477260715, rel=1e-14)


def test_dotmat_step_escapes_floor():
    u, v = core.dotmat_step(np.array([1.0]), np.array([-0.1]), 4.0, H(gamma=0.01))
    assert u[0] * v[0] > -0.1


# Classic MF

def test_classic_mf_examples():
    h = H(sigma_u=1e150, sigma_v=1e150)  # lambda ~ 1e-300
    u, v = core.classic_mf_step(np.array([0.5]), np.array([0.4]), 2.0, h)
    assert u[0] == pytest.approx(0.508, abs=1e-15)
    assert v[0] == pytest.approx(0.4 + 0.1 * 0.2 * 0.5, abs=1e-15)
    u, v = core.classic_mf_step(np.array([0.5]), np.array([0.4]), 1.0, h)
    assert u[0] == 0.5 and v[0] == 0.4


# Property tests

vec = lambda k, lo=-3.0, hi=3.0: st.lists(
    st.floats(lo, hi, allow_nan=False), min_size=k, max_size=k).map(np.array)


@st.composite
def powermat_inputs(draw, k=None, d=None):
    k = k or draw(st.integers(1, 5))
    d = d or draw(st.integers(1, 4))
    return dict(
        u=draw(vec(k)), v=draw(vec(k)), alpha=draw(vec(d)),
        beta=draw(st.floats(-3, 3)), c=draw(vec(d, 0.0, 1.0)),
    ), k


hyper_st = st.builds(
    Hyperparams,
    gamma=st.floats(0.0, 0.5), sigma_u=st.floats(0.5, 5.0), sigma_v=st.floats(0.5, 5.0),
    r_max=st.just(5.0), k=st.just(1),
)


@given(powermat_inputs(), st.floats(0.0, 0.5), st.floats(0.5, 5.0))
def test_verbatim_symmetry(inp, gamma, sigma):
    p, k = inp
    h = Hyperparams(gamma=gamma, sigma_u=sigma, sigma_v=sigma, k=k)
    u1, v1, a1, b1 = core.powermat_step_verbatim(p["u"], p["v"], p["alpha"], p["beta"], p["c"], h)
    u2, v2, a2, b2 = core.powermat_step_verbatim(p["v"], p["u"], p["alpha"], p["beta"], p["c"], h)
    assert np.array_equal(u1, v2) and np.array_equal(v1, u2)
    assert np.array_equal(a1, a2) and b1 == b2


@given(powermat_inputs(), hyper_st)
def test_verbatim_beta_monotone(inp, h):
    p, k = inp
    h = h.replace(k=k)
    _, _, _, b = core.powermat_step_verbatim(p["u"], p["v"], p["alpha"], p["beta"], p["c"], h)
    x = float(p["u"] @ p["v"])
    assert b <= p["beta"]
    assert b == p["beta"] - h.gamma * x * x
    if x == 0.0:
        assert b == p["beta"]


def test_verbatim_beta_strict_when_dot_nonzero():
    u, v = np.array([0.5]), np.array([0.4])
    _, _, _, b = core.powermat_step_verbatim(u, v, np.zeros(1), 0.3, np.ones(1), H())
    assert b < 0.3
    _, _, _, b = core.powermat_step_verbatim(np.array([1.0, 0.0]), np.array([0.0, 1.0]),
                                             np.zeros(1), 0.3, np.ones(1), H(k=2))
    assert b == 0.3


@given(powermat_inputs(), st.floats(0.5, 5.0), st.floats(0.0, 5.0))
def test_zero_step_is_fixed_point(inp, sigma, rating):
    p, k = inp
    h = Hyperparams(gamma=0.0, sigma_u=sigma, sigma_v=sigma, k=k)
    for step in (core.powermat_step_verbatim, core.powermat_step_derived):
        u, v, a, b = step(p["u"], p["v"], p["alpha"], p["beta"], p["c"], h)
        assert np.array_equal(u, p["u"]) and np.array_equal(v, p["v"])
        assert np.array_equal(a, p["alpha"]) and b == p["beta"]
    for step in (core.dotmat_step, core.classic_mf_step):
        u, v = step(p["u"], p["v"], rating, h)
        assert np.array_equal(u, p["u"]) and np.array_equal(v, p["v"])


@given(powermat_inputs(), hyper_st, st.floats(0.0, 5.0))
def test_steps_are_deterministic(inp, h, rating):
    p, k = inp
    h = h.replace(k=k)
    for step in (core.powermat_step_verbatim, core.powermat_step_derived):
        a = step(p["u"], p["v"], p["alpha"], p["beta"], p["c"], h)
        b = step(p["u"].copy(), p["v"].copy(), p["alpha"].copy(), p["beta"], p["c"].copy(), h)
        assert all(np.array_equal(x, y) for x, y in zip(a, b))
    for step in (core.dotmat_step, core.classic_mf_step):
        a = step(p["u"], p["v"], rating, h)
        b = step(p["u"].copy(), p["v"].copy(), rating, h)
        assert all(np.array_equal(x, y) for x, y in zip(a, b))


@given(
    st.integers(1, 6).flatmap(lambda k: st.tuples(vec(k, -1e6, 1e6), vec(k, -1e6, 1e6))),
    st.floats(-1e6, 1e6), st.floats(-1e6, 1e6), st.floats(0.0, 5.0),
)
def test_clamp_safety(uv, ac, beta, rating):
    u, v = uv
    h = Hyperparams(k=len(u))
    assert math.isfinite(core.dotmat_loss(u, v, rating, h))
    assert math.isfinite(core.predict_power(u, v, np.array([ac]), np.ones(1), beta, h))


@settings(max_examples=50)
@given(powermat_inputs())
def test_batch_scoring_matches_scalar(inp):
    p, k = inp
    h = Hyperparams(k=k)
    U, V, C = p["u"][None], p["v"][None], p["c"][None]
    assert core.predict_power_batch(U, V, p["alpha"], C, p["beta"], h)[0] == pytest.approx(
        core.predict_power(p["u"], p["v"], p["alpha"], p["c"], p["beta"], h), rel=1e-12)
    assert core.predict_linear_batch(U, V, 5.0)[0] == pytest.approx(
        core.predict_linear(p["u"], p["v"], 5.0), rel=1e-12, abs=1e-15)


def test_hyperparams_validation():
    with pytest.raises(ValidationError):
        Hyperparams(k=0)
    with pytest.raises(ValidationError):
        Hyperparams(dot_floor=1.0)
    with pytest.raises(ValidationError):
        Hyperparams(sigma_u=0.0)
    with pytest.raises(ValueError):
        Hyperparams(prediction_rule="quadratic")
    assert Hyperparams(gradient_mode="derived").gradient_mode is core.GradientMode.DERIVED
