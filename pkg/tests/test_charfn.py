import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from liftedheston.charfn import (
    CustomCurve,
    FlatHeston,
    ModelParams,
    RoughFlat,
    charfn_conditional,
    charfn_heston,
    charfn_rough,
    charfn_unconditional,
    g0_eval,
    joint_transform,
)
from liftedheston.errors import ConfigError, HurstRangeError
from liftedheston.kernel import build_lift_config, classical_lift, rn_sequence
from liftedheston.simulation import simulate_paths

# Fourier nodes used for the bound and nesting checks
IMAG_GRID = np.linspace(-100.0, 100.0, 50)


def mc_mean_and_se(samples):
    """Sample mean of a complex array with separate standard errors for both parts."""
    n = samples.size
    return samples.mean(), np.sqrt(samples.real.var(ddof=1) / n), np.sqrt(samples.imag.var(ddof=1) / n)


# ---------------------------------------------------------------- parameters and curves


def test_model_params_validation():
    with pytest.raises(HurstRangeError):
        ModelParams(0.02, 0.02, 0.3, 0.3, -0.7, H=0.0)
    with pytest.raises(HurstRangeError):
        ModelParams(0.02, 0.02, 0.3, 0.3, -0.7, H=0.6)
    with pytest.raises(ConfigError):
        ModelParams(0.02, 0.02, 0.3, 0.3, rho=-1.1, H=0.1)
    with pytest.raises(ConfigError):
        ModelParams(-0.01, 0.02, 0.3, 0.3, -0.7, 0.1)
    with pytest.raises(ConfigError):
        ModelParams(0.02, 0.02, 0.3, 0.3, -0.7, 0.1, S0=0.0)
    assert ModelParams.FREE == ("V0", "theta", "lam", "nu", "rho", "H")


@pytest.mark.parametrize("kind", ["flat", "rough", "custom"])
def test_curve_starts_at_v0(kind, theta0, lift20):
    curve = {
        "flat": FlatHeston(0.03, 0.02, 0.3, lift20),
        "rough": RoughFlat(0.03, 0.02, 0.3, 0.1),
        "custom": CustomCurve(np.array([0.0, 1.0]), np.array([0.03, 0.05])),
    }[kind]
    assert g0_eval(curve, 0.0) == pytest.approx(0.03, abs=1e-15)


def test_curve_constant_without_mean_reversion(lift20):
    t = np.linspace(0, 3, 7)
    assert np.all(g0_eval(FlatHeston(0.04, 0.02, 0.0, lift20), t) == 0.04)
    assert np.all(g0_eval(RoughFlat(0.04, 0.02, 0.0, 0.1), t) == 0.04)


def test_flat_curve_zero_speed_limit():
    # c = 1, x = 0: the integral of exp(-x (t - s)) is t, so g0(2) = V0 + 2 lam theta
    curve = FlatHeston(0.02, 0.02, 0.3, classical_lift())
    assert g0_eval(curve, 2.0) == pytest.approx(0.02 + 0.012, rel=1e-14)


def test_flat_curve_small_speed_is_continuous():
    from liftedheston.kernel import LiftConfig

    t = np.array([0.5, 1.0, 2.0])
    for x in (1e-10, 1e-9, 1e-7):
        cfg = LiftConfig(n=1, r=None, alpha=None, weights=np.array([1.0]), speeds=np.array([x]))
        exact = 0.02 + 0.006 * (-np.expm1(-x * t) / x)
        np.testing.assert_allclose(g0_eval(FlatHeston(0.02, 0.02, 0.3, cfg), t), exact, rtol=1e-12)


def test_rough_curve_formula():
    from scipy.special import gamma

    H, t = 0.1, 0.7
    expect = 0.02 + 0.006 * t ** (H + 0.5) / ((H + 0.5) * gamma(H + 0.5))
    assert g0_eval(RoughFlat(0.02, 0.02, 0.3, H), t) == pytest.approx(expect, rel=1e-14)


def test_custom_curve_interpolates_and_refuses_to_extrapolate():
    curve = CustomCurve(np.array([0.0, 1.0, 2.0]), np.array([0.02, 0.04, 0.03]))
    assert g0_eval(curve, 0.5) == pytest.approx(0.03)
    assert g0_eval(curve, 1.5) == pytest.approx(0.035)
    with pytest.raises(ConfigError):
        g0_eval(curve, 2.5)
    with pytest.raises(ConfigError):
        g0_eval(curve, -0.1)
    with pytest.raises(ConfigError):
        CustomCurve(np.array([0.0, 1.0]), np.array([0.02, -0.01]))
    with pytest.raises(ConfigError):
        CustomCurve(np.array([0.0, 0.0]), np.array([0.02, 0.03]))


def test_flat_curve_matches_quadrature(lift20):
    from scipy.integrate import quad

    curve = FlatHeston(0.02, 0.03, 0.5, lift20)
    t = 0.8
    integral = sum(
        c * quad(lambda s, x=x: np.exp(-x * (t - s)), 0, t, limit=200)[0]
        for c, x in zip(lift20.weights, lift20.speeds)
    )
    assert g0_eval(curve, t) == pytest.approx(0.02 + 0.015 * integral, rel=1e-9)


# ---------------------------------------------------------------- unconditional transform


def test_trivial_arguments(theta0, lift20):
    p = theta0.with_(S0=1.7)
    out = charfn_unconditional(p, lift20, np.array([0.0, 1.0]), 1.0)
    np.testing.assert_allclose(out, [1.0, 1.7], rtol=1e-12)


def test_real_part_outside_strip_rejected(theta0, lift20):
    with pytest.raises(ConfigError):
        charfn_unconditional(theta0, lift20, 1.5 + 1j, 1.0)
    with pytest.raises(ConfigError):
        charfn_unconditional(theta0, lift20, -0.1, 1.0)


@pytest.mark.parametrize("T", [1 / 52, 0.5, 2.0])
def test_modulus_bounds(theta0, lift20, T):
    p = theta0.with_(S0=1.3)
    on_axis = charfn_unconditional(p, lift20, 1j * IMAG_GRID, T)
    on_one = charfn_unconditional(p, lift20, 1.0 + 1j * IMAG_GRID, T)
    assert np.all(np.abs(on_axis) <= 1 + 1e-12)
    assert np.all(np.abs(on_one) <= p.S0 * (1 + 1e-12))


@settings(max_examples=25, deadline=None)
@given(re=st.floats(0.0, 1.0), im=st.floats(-60.0, 60.0), T=st.floats(0.02, 2.0))
def test_hermitian_symmetry(re, im, T):
    from liftedheston.charfn import THETA0

    cfg = build_lift_config(20, 2.5, 0.1)
    u = complex(re, im)
    a = charfn_unconditional(THETA0, cfg, u, T, N=100)
    b = charfn_unconditional(THETA0, cfg, np.conj(u), T, N=100)
    assert abs(a - np.conj(b)) <= 1e-13


def test_broadcasting_matches_pointwise(theta0, lift20):
    u = np.array([0.5 + 1j, 0.5 + 3j, 0.2 - 2j])
    T = np.array([0.1, 1.0, 2.0])
    batch = charfn_unconditional(theta0, lift20, u[:, None], T[None, :])
    for i in range(3):
        for j in range(3):
            single = charfn_unconditional(theta0, lift20, u[i], T[j])
            assert abs(batch[i, j] - single) <= 1e-13


def test_classical_nesting_short_horizon(theta0):
    p = theta0.with_(H=0.5)
    for re in (0.0, 1.0):
        u = re + 1j * IMAG_GRID
        lifted = charfn_unconditional(p, classical_lift(), u, 0.1, N=10_000)
        assert np.max(np.abs(lifted - charfn_heston(p, u, 0.1))) < 1e-5


def test_classical_nesting_first_order_in_steps(theta0):
    # the explicit-implicit scheme is first order: error x N settles to a constant
    p = theta0.with_(H=0.5)
    u = 1j * IMAG_GRID
    exact = charfn_heston(p, u, 1.0)
    err = [np.max(np.abs(charfn_unconditional(p, classical_lift(), u, 1.0, N=N) - exact)) for N in (2500, 5000, 10_000)]
    assert 1.9 < err[0] / err[1] < 2.1
    assert 1.9 < err[1] / err[2] < 2.1


@pytest.mark.xfail(strict=True, reason="first-order error at N=1e4 and T=1 is about 1e-4; see ledger")
def test_classical_nesting_unit_horizon(theta0):
    p = theta0.with_(H=0.5)
    for re in (0.0, 1.0):
        u = re + 1j * IMAG_GRID
        lifted = charfn_unconditional(p, classical_lift(), u, 1.0, N=10_000)
        assert np.max(np.abs(lifted - charfn_heston(p, u, 1.0))) < 1e-5


def test_lift_gap_to_rough_transform_shrinks_with_factors(theta0):
    u = 1j * IMAG_GRID
    rough = charfn_rough(theta0, u, 1.0, N=800, max_refine=3)
    gaps = []
    for n in (50, 200, 500):
        cfg = build_lift_config(n, rn_sequence(n), theta0.H)
        lifted = charfn_unconditional(theta0, cfg, u, 1.0, N=3000)
        gaps.append(np.max(np.abs(np.abs(lifted) - np.abs(rough))))
    assert gaps[0] > gaps[1] > gaps[2]
    assert gaps[2] < 5e-3


@pytest.mark.xfail(strict=True, reason="n=500 gap to the rough transform is about 3e-3 to 4.5e-3; see ledger")
def test_many_factors_approach_rough_transform(theta0):
    cfg = build_lift_config(500, rn_sequence(500), theta0.H)
    for re in (0.0, 1.0):
        u = re + 1j * IMAG_GRID
        lifted = charfn_unconditional(theta0, cfg, u, 1.0)
        rough = charfn_rough(theta0, u, 1.0, max_refine=3)
        assert np.max(np.abs(np.abs(lifted) - np.abs(rough))) < 2e-3


def test_monte_carlo_unit_imaginary_argument_classical(theta0):
    p = theta0.with_(H=0.5)
    value = charfn_heston(p, 1j, 1.0)
    paths = simulate_paths(p, classical_lift(), 1.0, 500, 100_000, seed=11)
    mean, se_re, se_im = mc_mean_and_se(np.exp(1j * np.log(paths.terminal_stock)))
    assert abs(mean.real - value.real) < 3 * se_re
    assert abs(mean.imag - value.imag) < 3 * se_im


@pytest.mark.xfail(strict=True, reason="clamped Euler paths at dt=1/500 sit 4-7 standard errors low; see ledger")
def test_monte_carlo_unit_imaginary_argument(theta0, lift20):
    value = charfn_unconditional(theta0, lift20, 1j, 1.0, N=30_000)
    assert abs(value) <= 1
    paths = simulate_paths(theta0, lift20, 1.0, 500, 100_000, seed=11)
    mean, se_re, se_im = mc_mean_and_se(np.exp(1j * np.log(paths.terminal_stock)))
    assert abs(mean.real - value.real) < 3 * se_re
    assert abs(mean.imag - value.imag) < 3 * se_im


def test_exponential_scheme_agrees(theta0, lift20):
    u = 0.5 + 1j * np.linspace(0, 30, 13)
    # both schemes are first order, so their gap shrinks with N
    gaps = []
    for N in (3000, 30_000):
        a = charfn_unconditional(theta0, lift20, u, 1.0, N=N)
        b = charfn_unconditional(theta0, lift20, u, 1.0, N=N, scheme="exponential")
        gaps.append(np.max(np.abs(a - b)))
    assert gaps[1] < 2e-4
    assert gaps[1] < gaps[0] / 5


# ---------------------------------------------------------------- conditional and joint transforms


def test_conditional_at_maturity(theta0, lift20):
    S = np.array([0.9, 1.0, 1.2])
    U = np.zeros((3, lift20.n))
    out = charfn_conditional(theta0, lift20, 0.5 + 2j, 1.0, 1.0, U, S)
    np.testing.assert_allclose(out, np.exp((0.5 + 2j) * np.log(S)), rtol=1e-14)


def test_conditional_from_origin_is_unconditional(theta0, lift20):
    u = 0.3 + 4j
    cond = charfn_conditional(theta0, lift20, u, 0.0, 1.0, np.zeros(lift20.n), theta0.S0)
    assert abs(cond - charfn_unconditional(theta0, lift20, u, 1.0)) < 1e-13


def test_conditional_validation(theta0, lift20):
    with pytest.raises(ConfigError):
        charfn_conditional(theta0, lift20, 1j, 1.0, 0.5, np.zeros(lift20.n), 1.0)
    with pytest.raises(ConfigError):
        charfn_conditional(theta0, lift20, 1j, 0.0, 0.5, np.zeros(3), 1.0)


def test_tower_property(theta0, lift20):
    u = 2j
    paths = simulate_paths(theta0, lift20, 0.5, 125, 10_000, seed=0, keep_paths=True)
    cond = charfn_conditional(theta0, lift20, u, 0.5, 1.0, paths.factors[:, -1, :], paths.stock[:, -1], N=1000)
    uncond = charfn_unconditional(theta0, lift20, u, 1.0, N=3000)
    mean, se_re, se_im = mc_mean_and_se(cond)
    assert abs(mean.real - uncond.real) < 3 * se_re
    assert abs(mean.imag - uncond.imag) < 3 * se_im


def test_joint_transform_trivial_and_reduction(theta0, lift20):
    assert joint_transform(theta0, lift20, 0.0, 0.0, 1.0) == pytest.approx(1.0, abs=1e-15)
    u = 0.4 - 3j
    a = joint_transform(theta0, lift20, u, 0.0, 0.7)
    assert abs(a - charfn_unconditional(theta0, lift20, u, 0.7)) < 1e-14
    with pytest.raises(ConfigError):
        joint_transform(theta0, lift20, 0.5, 0.1, 1.0)


def test_joint_transform_classical_laplace(theta0):
    # one-factor lift with zero speed is the CIR variance: E[exp(-V_T)] in closed form
    from scipy.integrate import solve_ivp

    p = theta0.with_(H=0.5)
    lam, nu, th, V0, T = p.lam, p.nu, p.theta, p.V0, 0.5

    def rhs(_, y):
        return [-lam * y[0] + 0.5 * nu**2 * y[0] ** 2, lam * th * y[0]]

    sol = solve_ivp(rhs, (0, T), [-1.0, 0.0], method="DOP853", rtol=1e-12, atol=1e-14)
    psi, phi = sol.y[:, -1]
    expect = np.exp(V0 * psi + phi)
    got = joint_transform(p, classical_lift(), 0.0, -1.0, T, N=20_000)
    assert got.real == pytest.approx(expect, abs=5e-6)


def test_joint_transform_monte_carlo(theta0, lift20):
    value = joint_transform(theta0, lift20, 0.0, -1.0, 0.5, N=10_000).real
    paths = simulate_paths(theta0, lift20, 0.5, 250, 100_000, seed=3)
    samples = np.exp(-paths.terminal_variance)
    se = samples.std(ddof=1) / np.sqrt(samples.size)
    assert abs(samples.mean() - value) < 3 * se


def test_heston_transform_ignores_hurst(theta0):
    u = 0.5 + 1j * np.linspace(-20, 20, 9)
    a = charfn_heston(theta0.with_(H=0.1), u, 1.0)
    b = charfn_heston(theta0.with_(H=0.5), u, 1.0)
    assert np.array_equal(a, b)
