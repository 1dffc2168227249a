"""Multi-factor kernel K^n and its fractional limit K_H.

The lifted kernel is K^n(t) = sum_i c_i exp(-x_i t), where the weights c_i and
speeds x_i discretize the measure

    mu(dx) = x^(-alpha) / (Gamma(alpha) Gamma(1 - alpha)) dx,   alpha = H + 1/2,

over the geometric partition eta_i = r^(i - n/2), i = 0..n. The fractional
kernel t^(H - 1/2) / Gamma(H + 1/2) is the Laplace transform of mu.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy.special import gamma

from .errors import (
    ConfigError,
    DegenerateMinimumError,
    HurstRangeError,
    OddFactorCountError,
    QuadratureError,
    SpacingError,
)

__all__ = [
    "LiftConfig",
    "KernelSpec",
    "build_lift_config",
    "classical_lift",
    "rn_sequence",
    "kernel_eval",
    "kernel_l2_distance",
    "optimal_r",
]


@dataclass(frozen=True)
class LiftConfig:
    """Weights and mean-reversion speeds of an n-factor lift.

    ``r`` and ``alpha`` are ``None`` for hand-built configurations such as the
    classical one-factor Heston lift (c = 1, x = 0).
    """

    n: int
    r: float | None
    alpha: float | None
    weights: np.ndarray
    speeds: np.ndarray

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=float)
        x = np.asarray(self.speeds, dtype=float)
        if w.shape != (self.n,) or x.shape != (self.n,):
            raise ConfigError("weights and speeds must both have length n")
        if np.any(w <= 0) or np.any(x < 0):
            raise ConfigError("weights must be positive and speeds nonnegative")
        if np.any(np.diff(x) <= 0):
            raise ConfigError("speeds must be strictly increasing")
        w.setflags(write=False)
        x.setflags(write=False)
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "speeds", x)

    @property
    def H(self) -> float | None:
        return None if self.alpha is None else self.alpha - 0.5

    def partition(self) -> np.ndarray:
        """Geometric partition eta_0..eta_n underlying the weights."""
        if self.r is None:
            raise ConfigError("hand-built lift has no partition")
        return self.r ** (np.arange(self.n + 1) - self.n / 2)


def _check_lift_args(n, r, H):
    if int(n) != n or n < 2 or n % 2:
        raise OddFactorCountError(f"n must be an even integer >= 2, got {n!r}")
    if not r > 1:
        raise SpacingError(f"r must be > 1, got {r!r}")
    if not 0 < H < 0.5:
        raise HurstRangeError(f"H must lie in (0, 1/2), got {H!r}")


def build_lift_config(n: int, r: float, H: float) -> LiftConfig:
    """Closed-form weights/speeds for an even number of factors."""
    _check_lift_args(n, r, H)
    n = int(n)
    alpha = H + 0.5
    i = np.arange(1, n + 1)
    logr = np.log(r)
    # r**s - 1 written with expm1 so r -> 1+ does not cancel
    a1 = np.expm1((1 - alpha) * logr)
    a2 = np.expm1((2 - alpha) * logr)
    weights = (
        a1 * np.exp((alpha - 1) * (1 + n / 2) * logr)
        / (gamma(alpha) * gamma(2 - alpha))
        * np.exp((1 - alpha) * i * logr)
    )
    speeds = (1 - alpha) / (2 - alpha) * (a2 / a1) * np.exp((i - 1 - n / 2) * logr)
    return LiftConfig(n=n, r=float(r), alpha=alpha, weights=weights, speeds=speeds)


def classical_lift() -> LiftConfig:
    """n = 1, c = 1, x = 0: the lift that reduces to the classical Heston model."""
    return LiftConfig(n=1, r=None, alpha=None, weights=np.ones(1), speeds=np.zeros(1))


def rn_sequence(n: int) -> float:
    """Spacing r_n = 1 + 10 n^-0.9, which satisfies r_n -> 1 and n log r_n -> inf."""
    if n < 1:
        raise ConfigError("n must be >= 1")
    return 1.0 + 10.0 * n ** -0.9


@dataclass(frozen=True)
class KernelSpec:
    """Either a lifted kernel (``lift`` set) or the fractional kernel of index ``H``."""

    lift: LiftConfig | None = None
    H: float | None = None

    def __post_init__(self):
        if (self.lift is None) == (self.H is None):
            raise ConfigError("KernelSpec needs exactly one of lift or H")
        if self.H is not None and not 0 < self.H <= 0.5:
            raise HurstRangeError(f"H must lie in (0, 1/2], got {self.H!r}")

    @classmethod
    def lifted(cls, cfg: LiftConfig) -> "KernelSpec":
        return cls(lift=cfg)

    @classmethod
    def fractional(cls, H: float) -> "KernelSpec":
        return cls(H=H)

    def __call__(self, t):
        return kernel_eval(self, t)


def _lifted(cfg: LiftConfig, t):
    t = np.asarray(t, dtype=float)
    return np.exp(-np.multiply.outer(t, cfg.speeds)) @ cfg.weights


def _fractional(H: float, t):
    t = np.asarray(t, dtype=float)
    return t ** (H - 0.5) / gamma(H + 0.5)


def kernel_eval(spec: KernelSpec, t):
    """Evaluate the kernel at scalar or array ``t``."""
    t_arr = np.asarray(t, dtype=float)
    if spec.lift is not None:
        if np.any(t_arr < 0):
            raise ConfigError("lifted kernel is defined for t >= 0")
        out = _lifted(spec.lift, t_arr)
    else:
        if spec.H < 0.5 and np.any(t_arr <= 0):
            raise ConfigError("fractional kernel is singular at t = 0 for H < 1/2")
        out = _fractional(spec.H, t_arr) if spec.H < 0.5 else np.ones_like(t_arr)
    return float(out) if np.ndim(out) == 0 else out


_GL_NODES, _GL_WEIGHTS = np.polynomial.legendre.leggauss(48)


def kernel_l2_distance(
    cfg: LiftConfig,
    H: float,
    T: float,
    atol: float = 1e-9,
    max_cells: int = 2000,
) -> float:
    """||K^n - K_H|| in L^2(0, T).

    Gauss-Legendre on a geometric mesh [T/2^(j+1), T/2^j] refined toward the
    t = 0 singularity. Refinement stops once a cell contributes less than
    ``atol`` and the fastest factor is frozen on the remaining [0, eps];
    that remainder is integrated from a first-order expansion of K^n.
    """
    if not T > 0:
        raise ConfigError("T must be positive")
    if not 0 < H <= 0.5:
        raise HurstRangeError(f"H must lie in (0, 1/2], got {H!r}")
    c, x = cfg.weights, cfg.speeds
    g_alpha = gamma(H + 0.5)
    xmax = float(x.max())

    def sq_diff(t):
        kn = np.exp(-np.multiply.outer(t, x)) @ c
        return (kn - t ** (H - 0.5) / g_alpha) ** 2

    total = 0.0
    hi = T
    last = np.inf
    for _ in range(max_cells):
        lo = 0.5 * hi
        t = lo + (hi - lo) * 0.5 * (_GL_NODES + 1.0)
        last = 0.5 * (hi - lo) * float(_GL_WEIGHTS @ sq_diff(t))
        total += last
        hi = lo
        if last < atol and xmax * hi < 1e-6:
            break
    else:
        raise QuadratureError("L2 quadrature did not converge", last)

    # remainder on [0, eps] with K^n(t) ~ k0 - k1 t
    eps, a = hi, H + 0.5
    k0, k1 = float(c.sum()), float(c @ x)
    tail = (
        eps ** (2 * H) / (2 * H * g_alpha**2)
        - 2 * (k0 * eps**a / a - k1 * eps ** (a + 1) / (a + 1)) / g_alpha
        + k0**2 * eps
        - k0 * k1 * eps**2
    )
    return float(np.sqrt(max(total + tail, 0.0)))


def _golden_section(f, lo, hi, tol):
    invphi = (np.sqrt(5.0) - 1.0) / 2.0
    a, b = lo, hi
    c = b - invphi * (b - a)
    d = a + invphi * (b - a)
    fc, fd = f(c), f(d)
    while b - a > tol:
        if fc < fd:
            b, d, fd = d, c, fc
            c = b - invphi * (b - a)
            fc = f(c)
        else:
            a, c, fc = c, d, fd
            d = a + invphi * (b - a)
            fd = f(d)
    return 0.5 * (a + b)


def optimal_r(
    n: int,
    H: float,
    horizons: Sequence[tuple[float, float]],
    r_max: float = 10.0,
    tol: float = 1e-3,
    n_scan: int = 40,
) -> float:
    """Spacing r minimizing sum_i w_i ||K^n - K_H||_{L^2(0, T_i)} over (1, r_max].

    A coarse scan brackets the global minimum, then golden-section search
    refines it to ``tol`` in r.
    """
    horizons = [(float(T), float(w)) for T, w in horizons]
    if not horizons:
        raise ConfigError("horizons must be non-empty")
    if any(T <= 0 or w < 0 for T, w in horizons) or sum(w for _, w in horizons) <= 0:
        raise ConfigError("need T_i > 0, w_i >= 0 and positive total weight")
    _check_lift_args(n, 2.0, H)

    def objective(r):
        cfg = build_lift_config(n, r, H)
        return sum(w * kernel_l2_distance(cfg, H, T) for T, w in horizons if w > 0)

    lo = 1.0 + 1e-6
    grid = np.linspace(lo, r_max, n_scan)
    values = np.array([objective(r) for r in grid])
    if np.ptp(values) <= 1e-12 * max(1.0, np.abs(values).max()):
        raise DegenerateMinimumError("objective is flat over the search interval")
    k = int(np.argmin(values))
    a = grid[max(k - 1, 0)]
    b = grid[min(k + 1, n_scan - 1)]
    return float(_golden_section(objective, a, b, tol))
