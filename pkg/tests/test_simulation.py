import json

import numpy as np
import pytest

from liftedheston.charfn import THETA0, CustomCurve, ModelParams, flat_curve, g0_eval
from liftedheston.errors import ConfigError
from liftedheston.kernel import classical_lift
from liftedheston.pricing import PricingModel, cos_call_price
from liftedheston.simulation import (
    expected_variance,
    factor_surface,
    forward_variance_check,
    mc_call_price,
    simulate_paths,
)

# V0 = theta = 0.05, lam = 0.3, nu = 0.1 on the n=20, r=2.5, H=0.1 lift: a mildly rough set
SMOOTH = ModelParams(V0=0.05, theta=0.05, lam=0.3, nu=0.1, rho=-0.7, H=0.1)


@pytest.fixture(scope="module")
def theta0_paths(lift20):
    return simulate_paths(THETA0, lift20, 0.5, 250, 100_000, seed=11)


def small(lift20, **kw):
    args = dict(params=THETA0, cfg=lift20, T=0.5, steps=50, n_paths=500, seed=1, keep_paths=True)
    args.update(kw)
    return simulate_paths(**args)


# ---------------------------------------------------------------- path structure


def test_constant_variance_gives_gbm(lift20):
    p = ModelParams(V0=0.04, theta=0.04, lam=0.0, nu=0.0, rho=-0.7, H=0.1)
    paths = simulate_paths(p, lift20, 1.0, 20, 100_000, seed=4, keep_paths=True)
    assert np.all(paths.variance == 0.04)
    x = np.log(paths.terminal_stock)
    n = x.size
    # log S_T ~ N(-V0 T / 2, V0 T)
    assert abs(x.mean() + 0.02) < 4 * np.sqrt(0.04 / n)
    assert abs(x.var(ddof=1) - 0.04) < 4 * 0.04 * np.sqrt(2 / (n - 1))


def test_variance_is_curve_plus_weighted_factors(lift20):
    paths = small(lift20)
    g0 = g0_eval(flat_curve(THETA0, lift20), paths.times)
    for k in range(len(paths.times)):
        assert np.array_equal(paths.variance[:, k], g0[k] + paths.factors[:, k] @ lift20.weights)


def test_stock_positive_and_factors_start_at_zero(lift20):
    paths = small(lift20)
    assert np.all(paths.stock > 0)
    assert np.all(paths.factors[:, 0] == 0)
    assert np.all(paths.stock[:, 0] == THETA0.S0)
    assert np.array_equal(paths.stock[:, -1], paths.terminal_stock)
    assert paths.failed_paths == 0


def test_clamped_fraction_small_for_mild_parameters(lift20):
    paths = simulate_paths(SMOOTH, lift20, 1.0, 1000, 2000, seed=5)
    assert paths.clamp_fraction < 0.01
    assert paths.failed_paths == 0


def test_clamp_counts_negative_aggregates(lift20):
    paths = small(lift20)
    assert paths.clamped_steps == int(np.count_nonzero(paths.variance[:, :-1] < 0))
    assert paths.total_steps == 500 * 50


def test_martingale(theta0_paths):
    S = theta0_paths.terminal_stock
    se = S.std(ddof=1) / np.sqrt(S.size)
    assert abs(S.mean() - THETA0.S0) < 3 * se


def test_non_finite_state_kills_path(lift20):
    curve = CustomCurve([0.0, 0.4, 0.5], [0.02, 0.02, np.inf])
    paths = simulate_paths(THETA0, lift20, 0.5, 10, 20, seed=0, curve=curve)
    assert paths.failed_paths == 20
    assert np.all(np.isnan(paths.terminal_stock))


def test_antithetic_pairs(lift20):
    p = ModelParams(V0=0.04, theta=0.04, lam=0.0, nu=0.0, rho=0.0, H=0.1)
    paths = simulate_paths(p, lift20, 1.0, 5, 10, seed=2, antithetic=True)
    x = np.log(paths.terminal_stock) + 0.02
    assert np.allclose(x[:5], -x[5:], atol=1e-14)


def test_validation(lift20):
    with pytest.raises(ConfigError):
        simulate_paths(THETA0, lift20, 1.0, 0, 10, seed=0)
    with pytest.raises(ConfigError):
        simulate_paths(THETA0, lift20, 1.0, 10, 0, seed=0)
    with pytest.raises(ConfigError):
        simulate_paths(THETA0, lift20, 0.0, 10, 10, seed=0)
    with pytest.raises(ConfigError):
        simulate_paths(THETA0, lift20, 1.0, 10, 10, seed=0, scheme="euler")
    with pytest.raises(ConfigError):
        simulate_paths(THETA0, lift20, 1.0, 10, 10, seed=0, block_size=1)


# ---------------------------------------------------------------- determinism


def test_same_seed_bitwise_identical(lift20):
    a = small(lift20, n_paths=300, block_size=128)
    b = small(lift20, n_paths=300, block_size=128)
    for name in ("factors", "variance", "stock", "terminal_stock", "mean_variance"):
        assert np.array_equal(getattr(a, name), getattr(b, name))
    assert not np.array_equal(a.terminal_stock, small(lift20, n_paths=300, block_size=128, seed=2).terminal_stock)


def test_output_independent_of_workers(lift20):
    a = simulate_paths(THETA0, lift20, 0.5, 20, 700, seed=3, block_size=256, workers=1)
    b = simulate_paths(THETA0, lift20, 0.5, 20, 700, seed=3, block_size=256, workers=3)
    assert np.array_equal(a.terminal_stock, b.terminal_stock)
    assert np.array_equal(a.mean_variance, b.mean_variance)


# ---------------------------------------------------------------- outputs


def test_summary_and_path_csv(lift20, tmp_path):
    paths = small(lift20, n_paths=4)
    paths.write_summary(tmp_path / "s.json", extra={"run": "x"})
    doc = json.loads((tmp_path / "s.json").read_text())
    assert doc["seed"] == 1 and doc["scheme"] == "rational" and doc["run"] == "x"
    assert doc["clamped_steps"] == paths.clamped_steps
    paths.write_path_csv(tmp_path / "p.csv", index=2)
    lines = (tmp_path / "p.csv").read_text().splitlines()
    assert lines[0] == "time,V,S," + ",".join(f"U_{i}" for i in range(1, 21))
    assert len(lines) == 52
    assert float(lines[-1].split(",")[2]) == paths.stock[2, -1]
    paths.write_path_csv(tmp_path / "q.csv", with_factors=False)
    assert (tmp_path / "q.csv").read_text().splitlines()[0] == "time,V,S"


def test_outputs_need_kept_paths(lift20, tmp_path):
    paths = small(lift20, keep_paths=False)
    with pytest.raises(ConfigError):
        paths.write_path_csv(tmp_path / "p.csv")
    with pytest.raises(ConfigError):
        factor_surface(paths)


# ---------------------------------------------------------------- factor surface


def test_single_factor_surface(theta0):
    paths = simulate_paths(theta0, classical_lift(), 1.0, 40, 3, seed=0, keep_paths=True)
    surf = factor_surface(paths, 1)
    assert surf.values.shape == (41, 1)
    assert np.array_equal(surf.values[:, 0], paths.factors[1, :, 0])
    assert np.array_equal(surf.variance, paths.variance[1])


def test_surface_aggregates_to_variance(lift20):
    paths = small(lift20)
    surf = factor_surface(paths, 3)
    g0 = g0_eval(flat_curve(THETA0, lift20), surf.times)
    # same sum, different BLAS reduction order than the batched simulation
    assert np.allclose(g0 + surf.values @ lift20.weights, surf.variance, rtol=0, atol=1e-15)
    assert np.all(np.diff(surf.speeds) > 0)
    assert surf.meta == {"path": 3, "seed": 1, "scheme": "rational"}


def test_fast_factors_decorrelate_faster(lift20):
    paths = simulate_paths(SMOOTH, lift20, 1.0, 1000, 1, seed=8, keep_paths=True)
    vals = factor_surface(paths).values[1:]
    ac = np.array([np.corrcoef(v[:-1], v[1:])[0, 1] for v in vals.T])
    # slowest factors are near random walks, the fastest forget a step within 1/x_i
    assert ac[0] > 0.99
    assert ac[-1] < 0.2
    assert ac[-1] < ac[len(ac) // 2] < ac[0]


def test_surface_csv(lift20, tmp_path):
    surf = factor_surface(small(lift20, n_paths=2))
    surf.to_csv(tmp_path / "f.csv")
    lines = (tmp_path / "f.csv").read_text().splitlines()
    assert lines[0].split(",")[1] == f"x={lift20.speeds[0]!r}"
    assert len(lines) == 52


# ---------------------------------------------------------------- first moment


def test_expected_variance_trivial_cases(lift20):
    assert np.all(expected_variance(THETA0.with_(lam=0.0), lift20, [0.0, 0.3, 2.0]) == THETA0.V0)
    assert expected_variance(THETA0, lift20, [0.0])[0] == THETA0.V0
    with pytest.raises(ConfigError):
        expected_variance(THETA0, lift20, [-0.1])


def test_expected_variance_matches_stiff_ode(lift20):
    # Radau solve of the factor-mean ODE m_i' = -x_i m_i + lam (theta - V0 - c.m), frozen
    p = ModelParams(V0=0.02, theta=0.05, lam=2.0, nu=0.3, rho=-0.7, H=0.1)
    ref = [0.036114001456184625, 0.039602984478528266, 0.04264187106197924]
    assert np.allclose(expected_variance(p, lift20, [0.25, 0.5, 1.0]), ref, atol=1e-7, rtol=0)


def test_expected_variance_classical_closed_form():
    p = ModelParams(V0=0.02, theta=0.05, lam=2.0, nu=0.3, rho=-0.7, H=0.5)
    t = np.array([0.1, 0.7, 1.5])
    exact = p.theta + (p.V0 - p.theta) * np.exp(-p.lam * t)
    assert np.allclose(expected_variance(p, classical_lift(), t), exact, atol=1e-8, rtol=0)


def test_forward_variance_check(theta0_paths, lift20):
    chk = forward_variance_check(THETA0, lift20, theta0_paths, at=[0.0, 0.25, 0.5])
    assert chk["exact"][0] == THETA0.V0
    assert chk["mc_mean"][0] == pytest.approx(THETA0.V0, rel=1e-14)
    assert np.all(np.abs(chk["z"]) < 3)
    with pytest.raises(ConfigError):
        forward_variance_check(THETA0, lift20, theta0_paths, at=[0.2501])


# ---------------------------------------------------------------- schemes and prices


def test_exponential_and_rational_terminal_variance_agree(lift20):
    a = simulate_paths(SMOOTH, lift20, 0.5, 250, 50_000, seed=12)
    b = simulate_paths(SMOOTH, lift20, 0.5, 250, 50_000, seed=13, scheme="exponential")
    se = np.hypot(a.terminal_variance.std() / np.sqrt(5e4), b.terminal_variance.std() / np.sqrt(5e4))
    assert abs(a.terminal_variance.mean() - b.terminal_variance.mean()) < 3 * se


def test_classical_mc_price_matches_cos(theta0):
    p = theta0.with_(H=0.5)
    paths = simulate_paths(p, classical_lift(), 0.5, 250, 100_000, seed=6)
    price, se = mc_call_price(paths, 1.0)
    cos = cos_call_price(lambda u: PricingModel(p, "classical").cf(u, 0.5), 1.0, 1.0, 0.5)
    assert abs(price - cos) < 3 * se


@pytest.mark.xfail(strict=True, reason="clamping bias of the scheme at dt=1/500 exceeds 2 SE; see ledger")
def test_halving_step_changes_price_within_noise(theta0_paths, lift20):
    coarse, se = mc_call_price(theta0_paths, 1.0)
    fine, se_fine = mc_call_price(simulate_paths(THETA0, lift20, 0.5, 500, 100_000, seed=11), 1.0)
    assert abs(coarse - fine) < 2 * max(se, se_fine)

