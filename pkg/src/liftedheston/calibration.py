"""Calibration to implied-volatility surfaces and ATM-skew term structures."""

from __future__ import annotations

import csv
import json
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import minimize

from .charfn import ModelParams
from .errors import ConfigError, LiftedHestonError
from .kernel import build_lift_config
from .pricing import (
    STANDARD_MATURITIES,
    CosConfig,
    PricingModel,
    VolSurface,
    atm_skew,
    surface_generate,
    surface_mse,
)

__all__ = [
    "ModelFactory",
    "CalibrationSpec",
    "CalibrationResult",
    "DEFAULT_BOUNDS",
    "ROBUSTNESS_BOUNDS",
    "calibrate",
    "calibrate_skew",
    "objective_value",
    "robustness_experiment",
    "RobustnessResult",
]

DEFAULT_BOUNDS = {
    "V0": (1e-4, 0.2),
    "theta": (1e-4, 0.2),
    "lam": (0.0, 5.0),
    "nu": (0.01, 2.0),
    "rho": (-0.999, 0.999),
    "H": (0.01, 0.49),
}

ROBUSTNESS_BOUNDS = {"nu": (0.05, 0.5), "rho": (-0.9, -0.5), "H": (0.05, 0.2)}

# objective assigned to parameter sets for which the model cannot be priced
FAILED_OBJECTIVE = 1.0
# edge length of the starting simplex in scaled [0, 1] coordinates; scipy's
# default (5% of each coordinate) collapses early when a coordinate is near 0
SIMPLEX_STEP = 0.1


@dataclass(frozen=True)
class ModelFactory:
    """Builds the pricing model for a parameter set.

    In lifted mode the weights and speeds depend on H, so the lift is rebuilt
    from (``n``, ``r``) at every evaluation.
    """

    mode: str = "lifted"
    n: int = 20
    r: float = 2.5
    steps: int | None = None

    def __call__(self, params: ModelParams) -> PricingModel:
        if self.mode == "lifted":
            return PricingModel(params, "lifted", build_lift_config(self.n, self.r, params.H), self.steps)
        return PricingModel(params, self.mode, None, self.steps)

    def as_dict(self) -> dict:
        return {"mode": self.mode, "n": self.n, "r": self.r, "steps": self.steps}


@dataclass
class CalibrationSpec:
    """What to fit and how.

    ``initial`` supplies the starting point of the free parameters and the
    values of the fixed ones. ``target`` is a VolSurface (objective
    ``"surface"``) or a list of (T, skew) pairs (objective ``"skew"``).
    """

    free: tuple
    initial: ModelParams
    target: object
    objective: str = "surface"
    bounds: dict = field(default_factory=dict)
    weights: list | None = None

    def __post_init__(self):
        self.free = tuple(self.free)
        if not self.free:
            raise ConfigError("at least one free parameter is needed")
        unknown = set(self.free) - set(ModelParams.FREE)
        if unknown:
            raise ConfigError(f"unknown parameters {sorted(unknown)}")
        if len(set(self.free)) != len(self.free):
            raise ConfigError("duplicate free parameters")
        if self.objective not in ("surface", "skew"):
            raise ConfigError(f"unknown objective {self.objective!r}")
        box = {k: tuple(self.bounds.get(k, DEFAULT_BOUNDS[k])) for k in self.free}
        for k, (lo, hi) in box.items():
            if not lo < hi:
                raise ConfigError(f"empty bounds for {k}")
            # the box must respect the model's own parameter constraints
            for v in (lo, hi):
                self.initial.with_(**{k: v})
            x0 = getattr(self.initial, k)
            if not lo <= x0 <= hi:
                raise ConfigError(f"initial {k}={x0} outside bounds {lo, hi}")
        self.bounds = box
        if self.objective == "surface":
            if not isinstance(self.target, VolSurface) or self.target.maturities.size == 0:
                raise ConfigError("surface objective needs a non-empty VolSurface target")
        else:
            try:
                pts = np.asarray(self.target, dtype=float)
            except (TypeError, ValueError) as exc:
                raise ConfigError("skew objective needs (T, skew) pairs") from exc
            if pts.ndim != 2 or pts.shape[1] != 2 or len(pts) < 3:
                raise ConfigError("skew objective needs at least three (T, skew) points")
            if np.any(pts[:, 0] <= 0):
                raise ConfigError("skew maturities must be positive")
            self.target = pts

    def to_scaled(self, params: ModelParams) -> np.ndarray:
        return np.array([(getattr(params, k) - lo) / (hi - lo) for k, (lo, hi) in self.bounds.items()])

    def from_scaled(self, z) -> ModelParams:
        z = np.clip(np.asarray(z, dtype=float), 0.0, 1.0)
        values = {k: lo + zi * (hi - lo) for zi, (k, (lo, hi)) in zip(z, self.bounds.items())}
        return self.initial.with_(**values)


@dataclass
class CalibrationResult:
    params: ModelParams
    objective_value: float
    iterations: int
    converged: bool
    evaluations: int = 0
    trace: list = field(default_factory=list)
    restarts: list = field(default_factory=list)
    underdetermined: bool = False
    message: str = ""

    def to_json(self, path=None, extra: dict | None = None) -> str:
        doc = {
            "params": self.params.as_dict(),
            "objective": self.objective_value,
            "iterations": self.iterations,
            "evaluations": self.evaluations,
            "converged": self.converged,
            "underdetermined": self.underdetermined,
            "message": self.message,
            "restarts": self.restarts,
            "trace": self.trace,
        }
        if extra:
            doc.update(extra)
        text = json.dumps(doc, indent=1)
        if path is not None:
            with open(path, "w") as fh:
                fh.write(text + "\n")
        return text


def objective_value(spec: CalibrationSpec, factory: ModelFactory, params: ModelParams, cos: CosConfig | None = None):
    """The calibration objective at ``params``.

    Surface objective: unit- or ``spec.weights``-weighted MSE over the
    target's defined cells, the model surface being generated without a price
    floor so that only genuine inversion failures drop out. Skew objective:
    sum of squared skew differences.
    """
    if spec.objective == "surface":
        tgt = spec.target
        model_surf = surface_generate(factory(params), tgt.maturities, tgt.strikes, cos, price_floor=0.0)
        return surface_mse(tgt, model_surf, spec.weights)
    pts = spec.target
    return float(np.sum((atm_skew(factory(params), pts[:, 0], cos=cos) - pts[:, 1]) ** 2))


def _start_simplex(z, step: float = SIMPLEX_STEP):
    """Simplex with edges of length ``step`` along each scaled axis, pointing into the box."""
    S = np.tile(np.asarray(z, dtype=float), (z.size + 1, 1))
    for i in range(z.size):
        S[i + 1, i] += step if z[i] + step <= 1.0 else -step
    return S


def calibrate(
    spec: CalibrationSpec,
    factory: ModelFactory | None = None,
    *,
    seed: int = 0,
    n_starts: int = 3,
    jitter: float = 0.1,
    max_iter: int = 500,
    xatol: float = 1e-5,
    cos: CosConfig | None = None,
) -> CalibrationResult:
    """Bounded Nelder-Mead on the free parameters scaled to [0, 1].

    The first start is ``spec.initial``; the remaining ``n_starts - 1`` are
    jittered copies drawn from ``seed``. The best result over all starts is
    returned; ``converged`` is False when no start improved on the initial
    objective or the best run hit the iteration cap.
    """
    factory = factory or ModelFactory()
    if factory.mode == "classical" and "H" in spec.free:
        raise ConfigError("H is not a parameter of the classical model")
    d = len(spec.free)
    trace = []
    best = {"f": np.inf}

    def f(z):
        try:
            val = objective_value(spec, factory, spec.from_scaled(z), cos)
        except LiftedHestonError:
            val = FAILED_OBJECTIVE
        if not np.isfinite(val):
            val = FAILED_OBJECTIVE
        if val < best["f"]:
            best["f"] = val
        trace.append(best["f"])
        return val

    z0 = spec.to_scaled(spec.initial)
    f_init = f(z0)
    rng = np.random.default_rng(seed)
    starts = [z0] + [np.clip(z0 + rng.uniform(-jitter, jitter, d), 0.0, 1.0) for _ in range(n_starts - 1)]

    runs = []
    for z in starts:
        res = minimize(
            f,
            z,
            method="Nelder-Mead",
            bounds=[(0.0, 1.0)] * d,
            options={
                "maxiter": max_iter,
                "xatol": xatol,
                "fatol": np.inf,
                "adaptive": d > 3,
                "initial_simplex": _start_simplex(z),
            },
        )
        runs.append(res)
    k = int(np.argmin([r.fun for r in runs]))
    top = runs[k]
    params = spec.from_scaled(top.x)
    improved = top.fun < f_init
    underdetermined = False
    if spec.objective == "skew":
        underdetermined = len(np.unique(spec.target[:, 0])) < d
    converged = bool(top.success and improved and not underdetermined)
    if not improved:
        msg = "no start improved on the initial objective"
    elif underdetermined:
        msg = "fewer distinct maturities than free parameters"
    else:
        msg = str(top.message)
    return CalibrationResult(
        params=params,
        objective_value=float(top.fun),
        iterations=int(top.nit),
        converged=converged,
        evaluations=len(trace),
        trace=trace,
        restarts=[
            {"objective": float(r.fun), "iterations": int(r.nit), "success": bool(r.success)} for r in runs
        ],
        underdetermined=underdetermined,
        message=msg,
    )


def calibrate_skew(spec: CalibrationSpec, factory: ModelFactory | None = None, **kwargs) -> CalibrationResult:
    """Fit the ATM-skew term structure; ``spec.target`` holds (T, skew) pairs."""
    if spec.objective != "skew":
        raise ConfigError("calibrate_skew needs a skew objective")
    return calibrate(spec, factory, **kwargs)


# ---------------------------------------------------------------- robustness


@dataclass
class RobustnessResult:
    rows: list  # (nu, rho, H, mse) with mse NaN for failed draws
    failures: int
    quantiles: dict

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            out = csv.writer(fh, lineterminator="\n")
            out.writerow(["nu", "rho", "H", "MSE"])
            for row in self.rows:
                out.writerow([repr(float(x)) for x in row])

    def worst(self):
        ok = [r for r in self.rows if np.isfinite(r[3])]
        return max(ok, key=lambda r: r[3])


def _draw(bounds, seq):
    rng = np.random.default_rng(seq)
    return {k: rng.uniform(*bounds[k]) for k in ("nu", "rho", "H")}


def _robustness_task(args):
    base, draw, n, r, maturities, strikes, cos = args
    params = base.with_(**draw)
    try:
        rough = surface_generate(PricingModel(params, "rough"), maturities, strikes, cos)
        lifted = surface_generate(PricingModel(params, "lifted", build_lift_config(n, r, params.H)), maturities, strikes, cos)
        mse = surface_mse(rough, lifted)
    except LiftedHestonError:
        mse = np.nan
    return (draw["nu"], draw["rho"], draw["H"], mse)


def robustness_experiment(
    M: int,
    seed: int,
    bounds: dict | None = None,
    *,
    n: int = 20,
    r: float = 2.5,
    base: ModelParams | None = None,
    maturities=STANDARD_MATURITIES,
    strikes=None,
    cos: CosConfig | None = None,
    workers: int = 1,
) -> RobustnessResult:
    """MSE between rough and lifted surfaces for M random (nu, rho, H) draws.

    Draw k uses its own substream spawned from ``seed``, so results do not
    depend on ``workers``. Other parameters come from ``base`` (default
    V0 = theta = 0.02, lambda = 0).
    """
    if M < 1:
        raise ConfigError("M must be >= 1")
    bounds = dict(ROBUSTNESS_BOUNDS if bounds is None else bounds)
    base = base or ModelParams(V0=0.02, theta=0.02, lam=0.0, nu=0.3, rho=-0.7, H=0.1)
    for k in ("nu", "rho", "H"):
        lo, hi = bounds[k]
        if lo > hi:
            raise ConfigError(f"empty bounds for {k}")
        base.with_(**{k: lo}), base.with_(**{k: hi})
    if strikes is None:
        from .pricing import strike_grid

        strikes = strike_grid(maturities, S0=base.S0)
    draws = [_draw(bounds, s) for s in np.random.SeedSequence(seed).spawn(M)]
    tasks = [(base, d, n, r, maturities, strikes, cos) for d in draws]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            rows = list(pool.map(_robustness_task, tasks))
    else:
        rows = [_robustness_task(t) for t in tasks]
    mses = np.array([row[3] for row in rows])
    ok = mses[np.isfinite(mses)]
    qs = {}
    if ok.size:
        for name, q in (("min", 0.0), ("q1", 0.25), ("median", 0.5), ("q3", 0.75), ("max", 1.0)):
            qs[name] = float(np.quantile(ok, q))
    return RobustnessResult(rows=rows, failures=int(np.sum(~np.isfinite(mses))), quantiles=qs)
