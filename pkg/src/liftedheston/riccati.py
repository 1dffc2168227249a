"""Solvers for the Riccati equations behind the characteristic functions.

All solvers accept an array of Fourier-Laplace exponents ``u`` and march them
together; ``T`` may be a scalar or an array broadcastable to ``u`` (one horizon
per exponent), so a whole volatility surface is one time-march.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np
from scipy.special import gamma

from .errors import BranchTrackingError, ConfigError, HurstRangeError, MomentExplosionError
from .kernel import LiftConfig

__all__ = [
    "RiccatiF",
    "RiccatiPath",
    "FractionalRiccatiPath",
    "eval_F",
    "solve_lifted_riccati",
    "solve_fractional_riccati_adams",
    "heston_closed_riccati",
    "adams_weights",
    "EXPLOSION_THRESHOLD",
]

EXPLOSION_THRESHOLD = 1e10
DEFAULT_LIFTED_STEPS = 300
DEFAULT_ADAMS_STEPS = 200


@dataclass(frozen=True)
class RiccatiF:
    """Quadratic generator F(u, v) = (u^2 - u)/2 + (rho nu u - lam) v + nu^2 v^2 / 2."""

    u: complex | np.ndarray
    lam: float
    nu: float
    rho: float

    def __post_init__(self):
        if self.lam < 0 or self.nu < 0:
            raise ConfigError("lambda and nu must be nonnegative")
        if not -1 <= self.rho <= 1:
            raise ConfigError("rho must lie in [-1, 1]")
        object.__setattr__(self, "u", np.asarray(self.u, dtype=complex))

    def coefficients(self):
        """(constant, linear, quadratic) coefficients of F as a polynomial in v."""
        u = self.u
        return 0.5 * (u * u - u), self.rho * self.nu * u - self.lam, 0.5 * self.nu**2

    def __call__(self, v):
        return eval_F(self, v)


def eval_F(f: RiccatiF, v):
    a, b, c = f.coefficients()
    return a + v * (b + c * v)


@dataclass
class RiccatiPath:
    """Solution of the lifted system on t_k = k T / N.

    Shapes, with ``m`` the shape of ``u``: ``grid`` (N+1, *m), ``aggregate``
    and ``F_values`` (N+1, *m), ``psi`` (N+1, *m, n) or ``None`` when not
    retained. ``exploded`` flags rows masked under ``mask_explosions``.
    """

    grid: np.ndarray
    aggregate: np.ndarray
    F_values: np.ndarray
    psi: np.ndarray | None
    exploded: np.ndarray | None = None


@dataclass
class FractionalRiccatiPath:
    """Adams solution on t_k = k T / N; ``exploded`` flags rows that were masked."""

    grid: np.ndarray
    psi: np.ndarray
    F_values: np.ndarray
    exploded: np.ndarray | None = None


def _check_steps(N, minimum):
    if int(N) != N or N < minimum:
        raise ConfigError(f"number of steps must be an integer >= {minimum}")
    return int(N)


def _horizons(u, T):
    T = np.broadcast_to(np.asarray(T, dtype=float), u.shape)
    if np.any(T <= 0):
        raise ConfigError("T must be positive")
    return T


def _exploding(agg):
    return ~np.isfinite(agg) | (np.abs(agg) > EXPLOSION_THRESHOLD)


def _guard(agg, k, u):
    bad = _exploding(agg)
    if np.any(bad):
        idx = np.flatnonzero(bad)[0]
        raise MomentExplosionError(
            f"moment explosion at step {k} for u={u.flat[idx]!r}: "
            f"|aggregate| exceeded {EXPLOSION_THRESHOLD:.0e}",
            u=complex(u.flat[idx]),
            step=k,
        )


def solve_lifted_riccati(
    f: RiccatiF,
    cfg: LiftConfig,
    T,
    N: int = DEFAULT_LIFTED_STEPS,
    *,
    psi0=0.0,
    scheme: str = "rational",
    generator=None,
    keep_psi: bool = True,
    mask_explosions: bool = False,
) -> RiccatiPath:
    """Explicit-implicit scheme for psi_i' = -x_i psi_i + F(u, sum_j c_j psi_j).

        psi_i[k+1] = d_i (psi_i[k] + dt F(u, sum_j c_j psi_j[k])),

    with d_i = 1 / (1 + x_i dt) (``scheme="rational"``) or exp(-x_i dt)
    (``scheme="exponential"``). ``psi0`` sets a common initial value for all
    factors and ``generator`` replaces F (used for the joint transform and for
    testing the pure-decay subproblem). With ``mask_explosions`` a row that
    crosses the explosion threshold is zeroed from then on and flagged instead
    of aborting the batch.
    """
    N = _check_steps(N, 1)
    u = f.u
    T = _horizons(u, T)
    dt = T / N
    x = cfg.speeds
    c = cfg.weights
    xdt = np.multiply.outer(dt, x)
    if scheme == "rational":
        decay = 1.0 / (1.0 + xdt)
    elif scheme == "exponential":
        decay = np.exp(-xdt)
    else:
        raise ConfigError(f"unknown scheme {scheme!r}")
    if not np.all((decay > 0) & (decay <= 1)):
        raise ConfigError("decay factors must lie in (0, 1]")
    if generator is None:
        a0, a1, a2 = (np.broadcast_to(v, u.shape) for v in f.coefficients())

        def F(v):
            return a0 + v * (a1 + a2 * v)
    else:
        F = generator

    psi = np.empty(u.shape + (cfg.n,), dtype=complex)
    psi[...] = np.asarray(psi0, dtype=complex)[..., None]
    aggregate = np.empty((N + 1,) + u.shape, dtype=complex)
    F_values = np.empty_like(aggregate)
    history = np.empty((N + 1,) + psi.shape, dtype=complex) if keep_psi else None
    dt_col = dt[..., None]
    exploded = np.zeros(u.shape, dtype=bool)
    for k in range(N + 1):
        agg = psi @ c
        if mask_explosions:
            bad = _exploding(agg)
            if bad.any():
                exploded |= bad
                psi[bad] = 0.0
                agg = np.where(exploded, 0.0, agg)
        else:
            _guard(agg, k, u)
        aggregate[k] = agg
        if keep_psi:
            history[k] = psi
        Fk = F(agg)
        if mask_explosions:
            Fk = np.where(exploded, 0.0, Fk)
        F_values[k] = Fk
        if k < N:
            with np.errstate(over="ignore", invalid="ignore"):
                psi += dt_col * Fk[..., None]
                psi *= decay
    grid = np.multiply.outer(np.arange(N + 1), dt)
    return RiccatiPath(grid=grid, aggregate=aggregate, F_values=F_values, psi=history, exploded=exploded)


@lru_cache(maxsize=32)
def adams_weights(N: int, alpha: float):
    """Predictor (b) and corrector (a) weight matrices, without the dt^alpha factor.

    Row ``k+1`` holds the weights applied to F(psi_j), j = 0..k. The corrector
    weight of the new point F(psi^P_{k+1}) is 1. Arrays are read-only.
    """
    k = np.arange(N)[:, None]
    j = np.arange(N)[None, :]
    lower = j <= k
    m = np.where(lower, k - j, 0).astype(float)
    b = np.where(lower, (m + 1) ** alpha - m**alpha, 0.0) / gamma(alpha + 1)
    a = np.where(lower, (m + 2) ** (alpha + 1) + m ** (alpha + 1) - 2 * (m + 1) ** (alpha + 1), 0.0)
    kk = np.arange(N, dtype=float)
    a[:, 0] = kk ** (alpha + 1) - (kk - alpha) * (kk + 1) ** alpha
    a /= gamma(alpha + 2)
    A = np.zeros((N + 1, N))
    B = np.zeros((N + 1, N))
    A[1:], B[1:] = a, b
    A.setflags(write=False)
    B.setflags(write=False)
    return A, B


def solve_fractional_riccati_adams(
    f: RiccatiF, H: float, T, N: int = DEFAULT_ADAMS_STEPS, *, mask_explosions: bool = False
) -> FractionalRiccatiPath:
    """Adams predictor-corrector scheme for psi = I^alpha F(u, psi), alpha = H + 1/2.

    H = 1/2 is accepted and reduces to the trapezoidal predictor-corrector for
    the classical Heston Riccati ODE. With ``mask_explosions`` a row that
    crosses the explosion threshold is zeroed from then on and flagged in
    ``exploded`` instead of aborting the whole batch.
    """
    if not 0 < H <= 0.5:
        raise HurstRangeError(f"H must lie in (0, 1/2], got {H!r}")
    N = _check_steps(N, 2)
    u = f.u
    T = _horizons(u, T)
    alpha = H + 0.5
    A, B = adams_weights(N, float(alpha))
    scale = (T / N) ** alpha
    corr_new = 1.0 / gamma(alpha + 2)

    psi = np.zeros((N + 1,) + u.shape, dtype=complex)
    Fh = np.zeros_like(psi)
    Fh[0] = f(psi[0])
    flat = Fh.reshape(N + 1, -1)
    exploded = np.zeros(u.shape, dtype=bool)
    for k in range(N):
        hist = flat[: k + 1]
        pred = scale * (B[k + 1, : k + 1] @ hist).reshape(u.shape)
        corr = A[k + 1, : k + 1] @ hist
        with np.errstate(over="ignore", invalid="ignore"):
            step = scale * (corr_new * f(pred) + corr.reshape(u.shape))
        if mask_explosions:
            exploded |= _exploding(step)
            step = np.where(exploded, 0.0, step)
        else:
            _guard(step, k + 1, u)
        psi[k + 1] = step
        Fh[k + 1] = np.where(exploded, 0.0, f(step))
    grid = np.multiply.outer(np.arange(N + 1), T / N)
    return FractionalRiccatiPath(grid=grid, psi=psi, F_values=Fh, exploded=exploded)


def _unwrapped_log(path_fn, n_track, max_track=4096):
    """Log of path_fn(1), following the argument of path_fn(s) continuously on [0, 1]."""
    while True:
        z = path_fn(np.linspace(0.0, 1.0, n_track))
        jumps = np.abs(np.diff(np.angle(z), axis=0))
        # genuine wraps jump by ~2 pi; anything mid-way is under-resolved
        if not np.any((jumps > 0.5 * np.pi) & (jumps < 1.5 * np.pi)):
            break
        if n_track >= max_track:
            raise BranchTrackingError("cannot resolve rotations of the log argument")
        n_track *= 4
    ang = np.unwrap(np.angle(z), axis=0)
    return np.log(np.abs(z[-1])) + 1j * ang[-1]


def heston_closed_riccati(f: RiccatiF, T, n_track: int = 64):
    """Closed-form solution of psi' = F(u, psi), psi(0) = 0.

    Returns ``(integral, psi_T)`` with integral = int_0^T psi(s) ds. Uses the
    form with g = (beta - d) / (beta + d); the logarithm's argument is tracked
    along [0, T] so rotations around the origin are counted, never wrapped.
    """
    u = f.u
    T = np.asarray(T, dtype=float)
    if np.any(T < 0):
        raise ConfigError("T must be nonnegative")
    u, T = np.broadcast_arrays(u, T)
    a, b, _ = f.coefficients()
    a = np.broadcast_to(a, u.shape)
    beta = -np.broadcast_to(b, u.shape)
    nu2 = f.nu**2

    if nu2 < 1e-20:
        # linear ODE psi' = a - beta psi
        small = np.abs(beta * T) < 1e-8
        bt = np.where(small, 1.0, beta)
        e = np.exp(-bt * T)
        psi = np.where(small, a * T, a * (1 - e) / bt)
        integral = np.where(small, 0.5 * a * T**2, a * (T - (1 - e) / bt) / bt)
        return integral, psi

    # a = 0 (u in {0, 1}) keeps psi at its zero start; it is also where beta + d may vanish
    zero = a == 0
    a = np.where(zero, 1.0, a)
    d = np.sqrt(beta * beta - 2 * nu2 * a)
    g = (beta - d) / (beta + d)
    e = np.exp(-d * T)
    psi = (beta - d) / nu2 * (1 - e) / (1 - g * e)
    log_term = _unwrapped_log(
        lambda s: (1 - g * np.exp(-d * np.multiply.outer(s, T))) / (1 - g), n_track
    )
    integral = ((beta - d) * T - 2 * log_term) / nu2
    return np.where(zero, 0.0, integral), np.where(zero, 0.0, psi)
