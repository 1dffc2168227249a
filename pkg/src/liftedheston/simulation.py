"""Monte Carlo simulation of the lifted model.

Factors follow the explicit-implicit scheme

    U_i[k+1] = d_i (U_i[k] - lam V[k] dt + nu sqrt(V[k]^+) dW_k),

with d_i = 1 / (1 + x_i dt) (or exp(-x_i dt)), V = g0 + sum_i c_i U_i, and the
stock is advanced by a log-Euler step driven by B = rho W + sqrt(1 - rho^2) W'.
"""

from __future__ import annotations

import csv
import json
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .charfn import FlatHeston, ModelParams, g0_eval
from .errors import ConfigError
from .kernel import LiftConfig

__all__ = [
    "PathSet",
    "FactorSurface",
    "simulate_paths",
    "factor_surface",
    "expected_variance",
    "forward_variance_check",
    "mc_call_price",
]

DEFAULT_BLOCK = 8192


@dataclass
class PathSet:
    """Simulation output.

    Per-path terminal values are always kept. Full trajectories (``factors``
    of shape (P, K+1, n), ``variance`` and ``stock`` of shape (P, K+1)) only
    when requested; ``variance`` stores the raw aggregate before clamping.
    ``mean_variance`` and ``mean_sq_variance`` are pathwise averages of the
    raw aggregate on the time grid.
    """

    times: np.ndarray
    terminal_stock: np.ndarray
    terminal_variance: np.ndarray
    mean_variance: np.ndarray
    mean_sq_variance: np.ndarray
    seed: int
    scheme: str
    n_paths: int
    clamped_steps: int
    total_steps: int
    failed_paths: int
    antithetic: bool = False
    factors: np.ndarray | None = None
    variance: np.ndarray | None = None
    stock: np.ndarray | None = None
    speeds: np.ndarray | None = None
    weights: np.ndarray | None = None

    @property
    def clamp_fraction(self) -> float:
        return self.clamped_steps / self.total_steps if self.total_steps else 0.0

    def summary(self) -> dict:
        return {
            "seed": self.seed,
            "scheme": self.scheme,
            "n_paths": self.n_paths,
            "steps": len(self.times) - 1,
            "T": float(self.times[-1]),
            "antithetic": self.antithetic,
            "clamped_steps": self.clamped_steps,
            "clamp_fraction": self.clamp_fraction,
            "failed_paths": self.failed_paths,
            "mean_terminal_stock": float(np.nanmean(self.terminal_stock)),
            "mean_terminal_variance": float(np.nanmean(self.terminal_variance)),
        }

    def write_summary(self, path, extra: dict | None = None):
        doc = self.summary()
        if extra:
            doc.update(extra)
        with open(path, "w") as fh:
            json.dump(doc, fh, indent=1)
            fh.write("\n")

    def write_path_csv(self, path, index: int = 0, with_factors: bool = True):
        if self.variance is None:
            raise ConfigError("paths were not kept; simulate with keep_paths=True")
        n = self.factors.shape[2]
        with open(path, "w", newline="") as fh:
            out = csv.writer(fh, lineterminator="\n")
            head = ["time", "V", "S"] + ([f"U_{i + 1}" for i in range(n)] if with_factors else [])
            out.writerow(head)
            for k, t in enumerate(self.times):
                row = [t, self.variance[index, k], self.stock[index, k]]
                if with_factors:
                    row += list(self.factors[index, k])
                out.writerow([repr(float(x)) for x in row])


def _decay(cfg, dt, scheme):
    if scheme == "rational":
        return 1.0 / (1.0 + cfg.speeds * dt)
    if scheme == "exponential":
        return np.exp(-cfg.speeds * dt)
    raise ConfigError(f"unknown scheme {scheme!r}")


def _simulate_block(args):
    params, cfg, g0, dt, steps, size, seq, scheme, antithetic, keep = args
    rng = np.random.default_rng(seq)
    c = cfg.weights
    decay = _decay(cfg, dt, scheme)
    lam, nu, rho = params.lam, params.nu, params.rho
    rho_bar = np.sqrt(max(1.0 - rho * rho, 0.0))
    sq_dt = np.sqrt(dt)

    U = np.zeros((size, cfg.n))
    logS = np.full(size, np.log(params.S0))
    alive = np.ones(size, dtype=bool)
    sum_v = np.zeros(steps + 1)
    sum_v2 = np.zeros(steps + 1)
    clamped = 0
    if keep:
        fac = np.zeros((size, steps + 1, cfg.n))
        var = np.empty((size, steps + 1))
        stk = np.empty((size, steps + 1))
    for k in range(steps + 1):
        V = g0[k] + U @ c
        bad = alive & ~(np.isfinite(V) & np.isfinite(logS))
        if bad.any():
            alive &= ~bad
        Vk = np.where(alive, V, 0.0)
        sum_v[k] = Vk.sum()
        sum_v2[k] = (Vk * Vk).sum()
        if keep:
            var[:, k] = V
            stk[:, k] = np.exp(logS)
            fac[:, k] = U
        if k == steps:
            break
        clamped += int(np.count_nonzero(alive & (V < 0)))
        if antithetic:
            half = rng.standard_normal((2, (size + 1) // 2))
            Z = np.concatenate([half, -half], axis=1)[:, :size]
        else:
            Z = rng.standard_normal((2, size))
        dW = sq_dt * Z[0]
        dB = rho * dW + rho_bar * sq_dt * Z[1]
        Vp = np.maximum(np.where(alive, V, 0.0), 0.0)
        sV = np.sqrt(Vp)
        with np.errstate(over="ignore", invalid="ignore"):
            U = decay * (U + (-lam * V * dt + nu * sV * dW)[:, None])
            logS = logS - 0.5 * Vp * dt + sV * dB
        U[~alive] = 0.0
    S_T = np.where(alive, np.exp(logS), np.nan)
    V_T = np.where(alive, V, np.nan)
    out = {
        "S_T": S_T,
        "V_T": V_T,
        "sum_v": sum_v,
        "sum_v2": sum_v2,
        "alive": int(alive.sum()),
        "clamped": clamped,
        "steps": int(steps * size),
    }
    if keep:
        out.update(factors=fac, variance=var, stock=stk)
    return out


def simulate_paths(
    params: ModelParams,
    cfg: LiftConfig,
    T: float,
    steps: int,
    n_paths: int,
    seed: int,
    scheme: str = "rational",
    *,
    antithetic: bool = False,
    keep_paths: bool = False,
    curve=None,
    block_size: int = DEFAULT_BLOCK,
    workers: int = 1,
) -> PathSet:
    """Simulate ``n_paths`` paths on t_k = k T / steps.

    Paths are generated in blocks of ``block_size``; block j draws from the
    j-th substream spawned from ``seed``, so the output does not depend on
    ``workers``. ``curve`` defaults to the flat input curve of the lift.
    """
    if int(steps) != steps or steps < 1:
        raise ConfigError("steps must be an integer >= 1")
    if int(n_paths) != n_paths or n_paths < 1:
        raise ConfigError("n_paths must be an integer >= 1")
    if not T > 0:
        raise ConfigError("T must be positive")
    if block_size < 2:
        raise ConfigError("block_size must be >= 2")
    steps, n_paths = int(steps), int(n_paths)
    _decay(cfg, 1.0, scheme)
    curve = curve if curve is not None else FlatHeston(params.V0, params.theta, params.lam, cfg)
    times = np.linspace(0.0, T, steps + 1)
    g0 = np.asarray(g0_eval(curve, times), dtype=float)
    dt = T / steps

    sizes = [block_size] * (n_paths // block_size)
    if n_paths % block_size:
        sizes.append(n_paths % block_size)
    seqs = np.random.SeedSequence(seed).spawn(len(sizes))
    tasks = [(params, cfg, g0, dt, steps, b, s, scheme, antithetic, keep_paths) for b, s in zip(sizes, seqs)]
    if workers > 1 and len(tasks) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            blocks = list(pool.map(_simulate_block, tasks))
    else:
        blocks = [_simulate_block(t) for t in tasks]

    alive = sum(b["alive"] for b in blocks)
    sum_v = np.sum([b["sum_v"] for b in blocks], axis=0)
    sum_v2 = np.sum([b["sum_v2"] for b in blocks], axis=0)
    denom = max(alive, 1)
    res = PathSet(
        times=times,
        terminal_stock=np.concatenate([b["S_T"] for b in blocks]),
        terminal_variance=np.concatenate([b["V_T"] for b in blocks]),
        mean_variance=sum_v / denom,
        mean_sq_variance=sum_v2 / denom,
        seed=seed,
        scheme=scheme,
        n_paths=n_paths,
        clamped_steps=sum(b["clamped"] for b in blocks),
        total_steps=sum(b["steps"] for b in blocks),
        failed_paths=n_paths - alive,
        antithetic=antithetic,
        speeds=np.asarray(cfg.speeds),
        weights=np.asarray(cfg.weights),
    )
    if keep_paths:
        res.factors = np.concatenate([b["factors"] for b in blocks])
        res.variance = np.concatenate([b["variance"] for b in blocks])
        res.stock = np.concatenate([b["stock"] for b in blocks])
    return res


def mc_call_price(paths: PathSet, K: float):
    """Monte Carlo call price and its standard error from terminal stock values."""
    S = paths.terminal_stock[np.isfinite(paths.terminal_stock)]
    payoff = np.maximum(S - K, 0.0)
    return float(payoff.mean()), float(payoff.std(ddof=1) / np.sqrt(payoff.size))


# ---------------------------------------------------------------- factor panel


@dataclass
class FactorSurface:
    """Factor values of one path on the (time, factor) grid, columns ordered by speed."""

    times: np.ndarray
    speeds: np.ndarray
    values: np.ndarray
    variance: np.ndarray
    meta: dict = field(default_factory=dict)

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            out = csv.writer(fh, lineterminator="\n")
            out.writerow(["time"] + [f"x={x!r}" for x in self.speeds])
            for t, row in zip(self.times, self.values):
                out.writerow([repr(float(t))] + [repr(float(v)) for v in row])


def factor_surface(paths: PathSet, index: int = 0) -> FactorSurface:
    if paths.factors is None:
        raise ConfigError("paths were not kept; simulate with keep_paths=True")
    return FactorSurface(
        times=paths.times,
        speeds=paths.speeds,
        values=paths.factors[index],
        variance=paths.variance[index],
        meta={"path": index, "seed": paths.seed, "scheme": paths.scheme},
    )


# ---------------------------------------------------------------- first moment


def expected_variance(params: ModelParams, cfg: LiftConfig, times, steps_per_unit: int = 4000, curve=None):
    """E[V_t] from E[V_t] + lam sum_i c_i int_0^t exp(-x_i (t-s)) E[V_s] ds = g0(t).

    Product integration on a fine grid: E[V] is linear between nodes and each
    exponential is integrated exactly against it, so the stiff fast factors
    need no resolution. The result is interpolated onto ``times``.
    """
    times = np.asarray(times, dtype=float)
    if np.any(times < 0):
        raise ConfigError("times must be nonnegative")
    curve = curve if curve is not None else FlatHeston(params.V0, params.theta, params.lam, cfg)
    t_max = float(times.max()) if times.size else 0.0
    if t_max == 0.0:
        return np.full_like(times, float(g0_eval(curve, 0.0)))
    M = max(int(np.ceil(t_max * steps_per_unit)), 16)
    grid = np.linspace(0.0, t_max, M + 1)
    h = t_max / M
    x, c = cfg.speeds, cfg.weights
    xh = x * h
    small = xh < 1e-6
    xs = np.where(small, 1.0, x)
    e = np.exp(-xh)
    # int_0^h exp(-x (h - s)) ds and the part multiplying the right endpoint
    E1 = np.where(small, h * (1 - 0.5 * xh), -np.expm1(-xh) / xs)
    beta = np.where(small, h * (0.5 - xh / 6.0), 1.0 / xs - E1 / (xs * h))
    alpha = E1 - beta
    g = np.asarray(g0_eval(curve, grid), dtype=float)
    ev = np.empty(M + 1)
    ev[0] = g[0]
    conv = np.zeros_like(x)
    lam = params.lam
    denom = 1.0 + lam * float(c @ beta)
    for k in range(M):
        base = e * conv + alpha * ev[k]
        ev[k + 1] = (g[k + 1] - lam * float(c @ base)) / denom
        conv = base + beta * ev[k + 1]
    return np.interp(times, grid, ev)


def forward_variance_check(params: ModelParams, cfg: LiftConfig, paths: PathSet, at=None, curve=None):
    """Compare Monte Carlo E[V_t] with the deterministic first-moment solution.

    Returns a dict with the grid points, both means, the relative error and
    the z-score (difference over the Monte Carlo standard error).
    """
    t = paths.times if at is None else np.asarray(at, dtype=float)
    idx = np.searchsorted(paths.times, t)
    if np.any(idx >= len(paths.times)) or not np.allclose(paths.times[idx], t):
        raise ConfigError("check points must lie on the simulation grid")
    mc = paths.mean_variance[idx]
    n = paths.n_paths - paths.failed_paths
    var = np.maximum(paths.mean_sq_variance[idx] - mc**2, 0.0)
    se = np.sqrt(var / max(n - 1, 1))
    exact = expected_variance(params, cfg, t, curve=curve)
    with np.errstate(divide="ignore", invalid="ignore"):
        z = np.where(se > 0, (mc - exact) / se, 0.0)
        rel = np.where(exact != 0, np.abs(mc - exact) / np.abs(exact), np.abs(mc - exact))
    return {"times": t, "mc_mean": mc, "exact": exact, "se": se, "rel_error": rel, "z": z}
