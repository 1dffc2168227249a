"""Fourier-Laplace transforms of the log-price.

The lifted transform is assembled from the explicit-implicit Riccati solution;
the rough benchmark from the Adams scheme; the classical benchmark from the
closed-form Heston Riccati solution. All three share

    E[exp(u log S_T)] = exp(u log S0 + int_0^T F(u, psi(s)) g0(T - s) ds).
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np
from scipy.special import gamma

from .errors import ConfigError, HurstRangeError
from .kernel import LiftConfig
from .riccati import (
    DEFAULT_ADAMS_STEPS,
    DEFAULT_LIFTED_STEPS,
    RiccatiF,
    heston_closed_riccati,
    solve_fractional_riccati_adams,
    solve_lifted_riccati,
)

__all__ = [
    "ModelParams",
    "FlatHeston",
    "RoughFlat",
    "CustomCurve",
    "g0_eval",
    "charfn_unconditional",
    "charfn_conditional",
    "charfn_rough",
    "charfn_heston",
    "joint_transform",
    "THETA0",
]


@dataclass(frozen=True)
class ModelParams:
    V0: float
    theta: float
    lam: float
    nu: float
    rho: float
    H: float
    S0: float = 1.0

    FREE = ("V0", "theta", "lam", "nu", "rho", "H")

    def __post_init__(self):
        if not self.S0 > 0:
            raise ConfigError("S0 must be positive")
        for name in ("V0", "theta", "lam", "nu"):
            if not getattr(self, name) >= 0:
                raise ConfigError(f"{name} must be nonnegative")
        if not -1 <= self.rho <= 1:
            raise ConfigError("rho must lie in [-1, 1]")
        if not 0 < self.H <= 0.5:
            raise HurstRangeError(f"H must lie in (0, 1/2], got {self.H!r}")

    def with_(self, **changes) -> "ModelParams":
        return replace(self, **changes)

    def as_dict(self) -> dict:
        return {k: getattr(self, k) for k in ("S0",) + self.FREE}

    def generator(self, u) -> RiccatiF:
        return RiccatiF(u, self.lam, self.nu, self.rho)


# Reference parameter set used throughout the benchmarks.
THETA0 = ModelParams(V0=0.02, theta=0.02, lam=0.3, nu=0.3, rho=-0.7, H=0.1)


@dataclass(frozen=True)
class FlatHeston:
    """g0(t) = V0 + lam theta sum_i c_i int_0^t exp(-x_i (t - s)) ds."""

    V0: float
    theta: float
    lam: float
    lift: LiftConfig

    def __call__(self, t):
        t = np.asarray(t, dtype=float)
        x = self.lift.speeds
        xt = np.multiply.outer(t, x)
        small = xt < 1e-8
        xs = np.where(small, 1.0, x)
        # (1 - exp(-x t)) / x, with the x t -> 0 series t (1 - x t / 2)
        integ = np.where(small, np.multiply.outer(t, np.ones_like(x)) * (1 - 0.5 * xt), -np.expm1(-xt) / xs)
        return self.V0 + self.lam * self.theta * (integ @ self.lift.weights)


@dataclass(frozen=True)
class RoughFlat:
    """g0(t) = V0 + lam theta t^alpha / (alpha Gamma(alpha)), alpha = H + 1/2."""

    V0: float
    theta: float
    lam: float
    H: float

    def __call__(self, t):
        t = np.asarray(t, dtype=float)
        a = self.H + 0.5
        return self.V0 + self.lam * self.theta * t**a / (a * gamma(a))


@dataclass(frozen=True)
class CustomCurve:
    """Sampled input curve, linearly interpolated; no extrapolation."""

    grid: np.ndarray
    values: np.ndarray

    def __post_init__(self):
        grid = np.asarray(self.grid, dtype=float)
        values = np.asarray(self.values, dtype=float)
        if grid.ndim != 1 or grid.shape != values.shape or grid.size < 2:
            raise ConfigError("grid and values must be 1-d arrays of equal length >= 2")
        if np.any(np.diff(grid) <= 0):
            raise ConfigError("grid must be strictly increasing")
        if np.any(values < 0):
            raise ConfigError("custom input curve must be nonnegative")
        object.__setattr__(self, "grid", grid)
        object.__setattr__(self, "values", values)

    @property
    def V0(self):
        return float(np.interp(0.0, self.grid, self.values))

    def __call__(self, t):
        t = np.asarray(t, dtype=float)
        if np.any(t < self.grid[0]) or np.any(t > self.grid[-1]):
            raise ConfigError(f"t outside the custom curve grid [{self.grid[0]}, {self.grid[-1]}]")
        return np.interp(t, self.grid, self.values)


def g0_eval(curve, t):
    t_arr = np.asarray(t, dtype=float)
    if np.any(t_arr < 0):
        raise ConfigError("t must be nonnegative")
    out = curve(t_arr)
    return float(out) if np.ndim(out) == 0 else out


def _check_u(u, lo=0.0, hi=1.0):
    u = np.asarray(u, dtype=complex)
    if np.any((u.real < lo - 1e-14) | (u.real > hi + 1e-14)):
        raise ConfigError("Re(u) must lie in [0, 1]")
    return u


def _curve_on(curve, T, N):
    """curve(T - t_k) on the solver grid t_k = k T / N, once per distinct T."""
    T_u, inv = np.unique(T, return_inverse=True)
    k = np.arange(N + 1)[:, None]
    # k T / N can exceed T by an ulp at the last node
    tau = np.maximum(T_u - k * (T_u / N), 0.0)
    g = np.asarray(curve(tau))
    return g[:, inv.ravel()].reshape((N + 1,) + np.shape(T))


def _trapezoid(values, g, dt):
    """int_0^T F(psi(s)) g0(T - s) ds on the solver grid, row-wise in dt."""
    w = values * g
    return dt * (w.sum(axis=0) - 0.5 * (w[0] + w[-1]))


def flat_curve(params: ModelParams, cfg: LiftConfig) -> FlatHeston:
    return FlatHeston(params.V0, params.theta, params.lam, cfg)


def _lifted_phi(params, cfg, curve, u, T, N, scheme, mask):
    path = solve_lifted_riccati(
        params.generator(u), cfg, T, N, scheme=scheme, keep_psi=False, mask_explosions=mask
    )
    g = _curve_on(curve, T, N)
    return _trapezoid(path.F_values, g, T / N), path.exploded


def _refined(phi_fn, u, T, N, max_refine):
    """phi on all rows; rows that blow up are re-solved with 2N, 4N, ... steps."""
    if max_refine <= 0:
        return phi_fn(u, T, N, False)[0]
    phi, bad = phi_fn(u, T, N, True)
    phi = np.array(phi)
    for level in range(1, max_refine + 1):
        if not bad.any():
            break
        last = level == max_refine
        sub_phi, sub_bad = phi_fn(u[bad], T[bad], N * 2**level, not last)
        idx = np.flatnonzero(bad.ravel())
        phi.flat[idx] = sub_phi
        bad = np.zeros_like(bad)
        bad.flat[idx[sub_bad]] = True
    return phi


def charfn_unconditional(
    params: ModelParams,
    cfg: LiftConfig,
    u,
    T,
    N: int = DEFAULT_LIFTED_STEPS,
    *,
    scheme: str = "rational",
    curve=None,
    max_refine: int = 0,
):
    """E[exp(u log S_T)] in the lifted model; ``u`` and ``T`` broadcast together.

    The explicit part of the scheme is only conditionally stable, so for
    large |u| and vol-of-vol the march can blow up although the transform is
    bounded. With ``max_refine > 0`` such rows are re-solved with 2N, 4N, ...
    steps; the others keep their N-step values.
    """
    u = _check_u(u)
    u, T = np.broadcast_arrays(u, np.asarray(T, dtype=float))
    curve = curve if curve is not None else flat_curve(params, cfg)

    def phi_fn(uu, TT, NN, mask):
        return _lifted_phi(params, cfg, curve, uu, TT, NN, scheme, mask)

    phi = _refined(phi_fn, u, T, N, max_refine)
    return np.exp(u * np.log(params.S0) + phi)


def charfn_conditional(
    params: ModelParams,
    cfg: LiftConfig,
    u: complex,
    t: float,
    T: float,
    factors,
    S_t,
    N: int = DEFAULT_LIFTED_STEPS,
    *,
    scheme: str = "rational",
    curve=None,
):
    """E[exp(u log S_T) | F_t] given factor values U_t (shape (..., n)) and S_t.

    The result broadcasts over the leading dimensions of ``factors``/``S_t``.
    """
    u = complex(_check_u(u))
    if t > T:
        raise ConfigError("need t <= T")
    factors = np.asarray(factors, dtype=float)
    S_t = np.asarray(S_t, dtype=float)
    if factors.shape[-1] != cfg.n:
        raise ConfigError("factors must have n columns")
    if T == t:
        return np.exp(u * np.log(S_t))
    curve = curve if curve is not None else flat_curve(params, cfg)
    tau = T - t
    path = solve_lifted_riccati(params.generator(u), cfg, tau, N, scheme=scheme)
    g = curve(np.maximum(T - path.grid, 0.0))
    phi = _trapezoid(path.F_values, g, tau / N)
    affine = factors @ (cfg.weights * path.psi[-1])
    return np.exp(phi + u * np.log(S_t) + affine)


def joint_transform(
    params: ModelParams,
    cfg: LiftConfig,
    u1,
    u2,
    T: float,
    N: int = DEFAULT_LIFTED_STEPS,
    *,
    scheme: str = "rational",
    curve=None,
):
    """E[exp(u1 log S_T + u2 V_T)] for Re(u1) in [0, 1] and Re(u2) <= 0."""
    u1 = _check_u(u1)
    u2 = np.asarray(u2, dtype=complex)
    if np.any(u2.real > 0):
        raise ConfigError("Re(u2) must be <= 0")
    u1, u2, T = np.broadcast_arrays(u1, u2, np.asarray(T, dtype=float))
    curve = curve if curve is not None else flat_curve(params, cfg)
    f = params.generator(u1)
    path = solve_lifted_riccati(f, cfg, T, N, psi0=u2, scheme=scheme, keep_psi=False)
    g = _curve_on(curve, T, N)
    phi = u2 * curve(T) + _trapezoid(path.F_values, g, T / N)
    return np.exp(u1 * np.log(params.S0) + phi)


def _rough_phi(params, curve, u, T, N, mask):
    path = solve_fractional_riccati_adams(params.generator(u), params.H, T, N, mask_explosions=mask)
    g = _curve_on(curve, T, N)
    return _trapezoid(path.F_values, g, T / N), path.exploded


def charfn_rough(params: ModelParams, u, T, N: int = DEFAULT_ADAMS_STEPS, *, max_refine: int = 0):
    """E[exp(u log S_T)] in the rough Heston model via the Adams scheme.

    The explicit predictor is only conditionally stable, so for large |u| T
    the march can blow up although the true transform is bounded. With
    ``max_refine > 0`` the rows that blew up are re-solved with 2N, 4N, ...
    steps; the others keep their N-step values.
    """
    u = _check_u(u)
    u, T = np.broadcast_arrays(u, np.asarray(T, dtype=float))
    curve = RoughFlat(params.V0, params.theta, params.lam, params.H)

    def phi_fn(uu, TT, NN, mask):
        return _rough_phi(params, curve, uu, TT, NN, mask)

    phi = _refined(phi_fn, u, T, N, max_refine)
    return np.exp(u * np.log(params.S0) + phi)


def charfn_heston(params: ModelParams, u, T):
    """Classical Heston transform from the closed-form Riccati solution (H is ignored)."""
    u = _check_u(u)
    u, T = np.broadcast_arrays(u, np.asarray(T, dtype=float))
    integral, psi_T = heston_closed_riccati(params.generator(u), T)
    phi = params.V0 * psi_T + params.lam * params.theta * integral
    return np.exp(u * np.log(params.S0) + phi)
