"""Command-line front end.

Each subcommand reads a JSON file of flat dotted keys (``"model.nu": 0.3``),
fills in defaults, applies the ``--seed``/``--workers``/``--mode`` flags on
top and writes CSV/JSON artifacts into ``--out``. The resolved configuration
is echoed into every JSON output so a run can be repeated from it alone.

Exit codes: 0 success, 2 configuration error, 3 numerical failure. Errors
are reported as one JSON object on stderr.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys
import time
from pathlib import Path

import numpy as np

from .calibration import (
    CalibrationSpec,
    ModelFactory,
    calibrate,
    robustness_experiment,
)
from .charfn import ModelParams
from .errors import ConfigError, LiftedHestonError, NumericalError
from .kernel import build_lift_config, classical_lift, kernel_l2_distance, optimal_r, rn_sequence
from .pricing import (
    STANDARD_MATURITIES,
    PRICE_FLOOR,
    CosConfig,
    PricingModel,
    VolSurface,
    atm_skew,
    strike_grid,
    surface_generate,
    surface_mse,
)
from .roughness import VolSeries, autocorr_hurst, qvariation, subsample, vol_series_from_variance
from .simulation import factor_surface, mc_call_price, simulate_paths

__all__ = ["main", "load_config", "COMMANDS"]

# key -> (kind, default); kinds: float, int, str, bool, floats, ints, strs, optint
_MODEL = {
    "model.V0": ("float", 0.02),
    "model.theta": ("float", 0.02),
    "model.lam": ("float", 0.3),
    "model.nu": ("float", 0.3),
    "model.rho": ("float", -0.7),
    "model.H": ("float", 0.1),
    "model.S0": ("float", 1.0),
    "mode": ("str", "lifted"),
    "seed": ("int", 0),
    "workers": ("int", os.cpu_count() or 1),
}
_LIFT = {
    "lift.n": ("int", 20),
    "lift.r": ("float", 2.5),
    "solver.steps": ("optint", None),
    "solver.scheme": ("str", "rational"),
}
_GRID = {
    "grid.maturities": ("floats", list(STANDARD_MATURITIES)),
    "grid.n_strikes": ("int", 80),
    "grid.width": ("float", 0.3),
    "grid.scaling": ("str", "flat"),
    "grid.price_floor": ("float", PRICE_FLOOR),
    "cos.n_terms": ("int", 160),
    "cos.L": ("float", 12.0),
}
_INITIAL = {
    "initial.V0": ("float", 0.03),
    "initial.theta": ("float", 0.03),
    "initial.lam": ("float", 1.0),
    "initial.nu": ("float", 0.5),
    "initial.rho": ("float", -0.5),
    "initial.H": ("float", 0.2),
}

SCHEMAS = {
    "surface": {**_MODEL, **_LIFT, **_GRID},
    "converge": {
        **_MODEL,
        **_GRID,
        "solver.steps": ("optint", None),
        "converge.n": ("ints", [10, 20, 50, 100, 500]),
        "converge.r": ("floats", []),
    },
    "calibrate": {
        **_MODEL,
        **_LIFT,
        **_GRID,
        **_INITIAL,
        "calibrate.experiment": ("str", "fit"),
        "calibrate.target": ("str", ""),
        "calibrate.target_mode": ("str", "rough"),
        "calibrate.free": ("strs", list(ModelParams.FREE)),
        "calibrate.n_starts": ("int", 3),
        "calibrate.max_iter": ("int", 500),
        "calibrate.jitter": ("float", 0.1),
        "robustness.M": ("int", 500),
        "robustness.nu": ("floats", [0.05, 0.5]),
        "robustness.rho": ("floats", [-0.9, -0.5]),
        "robustness.H": ("floats", [0.05, 0.2]),
    },
    "skew": {
        **_MODEL,
        **_LIFT,
        **_INITIAL,
        "cos.n_terms": ("int", 160),
        "cos.L": ("float", 12.0),
        "skew.maturities": ("floats", [1 / 52, 2 / 52, 1 / 12, 2 / 12, 0.25, 0.5, 0.75, 1.0, 1.5, 2.0]),
        "skew.coef": ("float", 0.35),
        "skew.exponent": ("float", -0.41),
        "skew.fit": ("bool", False),
        "skew.free": ("strs", ["nu", "rho", "H"]),
        "calibrate.n_starts": ("int", 3),
        "calibrate.max_iter": ("int", 500),
    },
    "simulate": {
        **_MODEL,
        **_LIFT,
        "sim.T": ("float", 0.5),
        "sim.steps": ("int", 250),
        "sim.n_paths": ("int", 100_000),
        "sim.antithetic": ("bool", False),
        "sim.strike": ("float", 1.0),
        "sim.keep_paths": ("bool", False),
        "sim.export_index": ("int", 0),
        "sim.block_size": ("int", 8192),
    },
    "hurst": {
        **_MODEL,
        **_LIFT,
        "hurst.input": ("str", ""),
        "hurst.input_dt": ("float", 1 / 250),
        "hurst.method": ("str", "autocorr"),
        "hurst.strides": ("ints", [1, 5, 10, 30, 60, 120, 180, 240, 300, 360, 420, 480, 540, 600]),
        "hurst.window": ("int", 500),
        "hurst.K": ("int", 10),
        "hurst.qs": ("floats", [0.5, 1.0, 1.5, 2.0, 3.0]),
        "hurst.max_lag": ("int", 100),
        "hurst.overlapping": ("bool", False),
        "sim.T": ("float", 2.0),
        "sim.steps": ("int", 300_000),
    },
    "kernel": {
        "kernel.n": ("int", 20),
        "kernel.r": ("float", 2.5),
        "kernel.H": ("float", 0.1),
        "kernel.horizons": ("floats", [0.1, 1.0]),
        "kernel.optimal": ("bool", True),
        "kernel.r_max": ("float", 10.0),
        "seed": ("int", 0),
        "workers": ("int", 1),
    },
}

# command-specific defaults that differ from the shared blocks
_OVERRIDES = {
    "hurst": {"model.V0": 0.05, "model.theta": 0.05, "model.nu": 0.1},
    # skew fits keep V0 = theta = 0.02 and lambda = 0 fixed
    "skew": {"initial.V0": 0.02, "initial.theta": 0.02, "initial.lam": 0.0},
}

MODES = ("lifted", "rough", "classical")


def _coerce(key, kind, value):
    def bad():
        return ConfigError(f"{key}: expected {kind}, got {value!r}")

    if kind == "float":
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise bad()
        return float(value)
    if kind == "int":
        if isinstance(value, bool) or not isinstance(value, int):
            raise bad()
        return value
    if kind == "optint":
        return None if value is None else _coerce(key, "int", value)
    if kind == "str":
        if not isinstance(value, str):
            raise bad()
        return value
    if kind == "bool":
        if not isinstance(value, bool):
            raise bad()
        return value
    if kind in ("floats", "ints", "strs"):
        if not isinstance(value, list):
            raise bad()
        return [_coerce(key, kind[:-1], v) for v in value]
    raise AssertionError(kind)


def load_config(command: str, path=None, overrides: dict | None = None) -> dict:
    """Defaults, then the JSON file at ``path``, then ``overrides``; unknown keys rejected."""
    if command not in SCHEMAS:
        raise ConfigError(f"unknown command {command!r}")
    schema = SCHEMAS[command]
    cfg = {k: d for k, (_, d) in schema.items()}
    cfg.update(_OVERRIDES.get(command, {}))
    given = {}
    if path is not None:
        try:
            with open(path, encoding="utf-8") as fh:
                given = json.load(fh)
        except FileNotFoundError as exc:
            raise ConfigError(f"config file not found: {path}") from exc
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config file is not valid JSON: {exc}") from exc
        if not isinstance(given, dict):
            raise ConfigError("config file must hold a JSON object of dotted keys")
    given = {**given, **(overrides or {})}
    unknown = sorted(set(given) - set(schema))
    if unknown:
        raise ConfigError(f"unknown config keys for {command}: {unknown}")
    for key, value in given.items():
        cfg[key] = _coerce(key, schema[key][0], value)
    if "mode" in cfg and cfg["mode"] not in MODES:
        raise ConfigError(f"mode must be one of {MODES}")
    if cfg.get("workers", 1) < 1:
        raise ConfigError("workers must be >= 1")
    return cfg


# ---------------------------------------------------------------- helpers


def _params(cfg, prefix="model") -> ModelParams:
    names = ("V0", "theta", "lam", "nu", "rho", "H")
    kw = {k: cfg[f"{prefix}.{k}"] for k in names}
    return ModelParams(**kw, S0=cfg.get("model.S0", 1.0))


def _lift(cfg, H):
    return build_lift_config(cfg["lift.n"], cfg["lift.r"], H)


def _model(cfg, params=None, mode=None) -> PricingModel:
    params = params or _params(cfg)
    mode = mode or cfg["mode"]
    lift = _lift(cfg, params.H) if mode == "lifted" else None
    return PricingModel(params, mode, lift, cfg.get("solver.steps"), cfg.get("solver.scheme", "rational"))


def _cos(cfg) -> CosConfig:
    return CosConfig(n_terms=cfg["cos.n_terms"], L=cfg["cos.L"])


def _grid(cfg, S0):
    mats = np.array(cfg["grid.maturities"], dtype=float)
    if mats.size == 0 or np.any(mats <= 0):
        raise ConfigError("grid.maturities must be a non-empty list of positive values")
    return mats, strike_grid(mats, cfg["grid.n_strikes"], cfg["grid.width"], S0, cfg["grid.scaling"])


def _write_json(path, payload):
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _write_csv(path, header, rows):
    with open(path, "w", encoding="utf-8", newline="") as fh:
        out = csv.writer(fh, lineterminator="\n")
        out.writerow(header)
        for row in rows:
            out.writerow([repr(float(x)) if isinstance(x, (float, np.floating)) else x for x in row])


def _timed(fn, *args, **kwargs):
    t0 = time.perf_counter()
    res = fn(*args, **kwargs)
    return res, time.perf_counter() - t0


# ---------------------------------------------------------------- commands


def cmd_surface(cfg, out: Path):
    model = _model(cfg)
    mats, strikes = _grid(cfg, model.params.S0)
    surf, seconds = _timed(
        surface_generate, model, mats, strikes, _cos(cfg), price_floor=cfg["grid.price_floor"]
    )
    surf.to_csv(out / "surface.csv")
    _write_json(
        out / "surface.json",
        {"config": cfg, "seconds": seconds, "missing": surf.n_missing, "maturities": mats.tolist()},
    )
    return {"seconds": seconds}


def cmd_converge(cfg, out: Path):
    ns = cfg["converge.n"]
    if not ns:
        raise ConfigError("converge.n must not be empty")
    params = _params(cfg)
    mats, strikes = _grid(cfg, params.S0)
    cos = _cos(cfg)
    floor = cfg["grid.price_floor"]
    ref, ref_seconds = _timed(surface_generate, PricingModel(params, "rough"), mats, strikes, cos, price_floor=floor)
    rows = []
    for n in ns:
        rs = cfg["converge.r"] or [rn_sequence(n)]
        for r in rs:
            model = PricingModel(params, "lifted", build_lift_config(n, r, params.H), cfg["solver.steps"])
            surf, seconds = _timed(surface_generate, model, mats, strikes, cos, price_floor=floor)
            rows.append((n, float(r), seconds, surface_mse(surf, ref)))
    _write_csv(out / "converge.csv", ["n", "r", "seconds", "mse"], rows)
    _write_json(out / "converge.json", {"config": cfg, "rough_seconds": ref_seconds})
    return {"rows": rows}


def _target_surface(cfg, params):
    if cfg["calibrate.target"]:
        path = Path(cfg["calibrate.target"])
        if not path.exists():
            raise ConfigError(f"target surface not found: {path}")
        return VolSurface.from_csv(path, S0=params.S0)
    mats, strikes = _grid(cfg, params.S0)
    return surface_generate(_model(cfg, params, cfg["calibrate.target_mode"]), mats, strikes, _cos(cfg), price_floor=cfg["grid.price_floor"])


def cmd_calibrate(cfg, out: Path):
    params = _params(cfg)
    if cfg["calibrate.experiment"] == "robustness":
        bounds = {k: tuple(cfg[f"robustness.{k}"]) for k in ("nu", "rho", "H")}
        if any(len(b) != 2 for b in bounds.values()):
            raise ConfigError("robustness bounds need two values each")
        mats, strikes = _grid(cfg, params.S0)
        res, seconds = _timed(
            robustness_experiment,
            cfg["robustness.M"],
            cfg["seed"],
            bounds,
            n=cfg["lift.n"],
            r=cfg["lift.r"],
            base=params.with_(lam=0.0),
            maturities=mats,
            strikes=strikes,
            cos=_cos(cfg),
            workers=cfg["workers"],
        )
        res.to_csv(out / "robustness.csv")
        _write_json(
            out / "robustness.json",
            {"config": cfg, "seconds": seconds, "quantiles": res.quantiles, "failures": res.failures, "worst": list(res.worst())},
        )
        return {"quantiles": res.quantiles}
    if cfg["calibrate.experiment"] != "fit":
        raise ConfigError("calibrate.experiment must be 'fit' or 'robustness'")

    mode = cfg["mode"]
    if mode == "rough":
        raise ConfigError("calibration supports the lifted and classical modes")
    target = _target_surface(cfg, params)
    free = tuple(cfg["calibrate.free"])
    initial = _params(cfg, "initial")
    if mode == "classical":
        free = tuple(k for k in free if k != "H")
        initial = initial.with_(H=0.5)
    spec = CalibrationSpec(free=free, initial=initial, target=target)
    factory = ModelFactory(mode, cfg["lift.n"], cfg["lift.r"], cfg["solver.steps"])
    res, seconds = _timed(
        calibrate,
        spec,
        factory,
        seed=cfg["seed"],
        n_starts=cfg["calibrate.n_starts"],
        jitter=cfg["calibrate.jitter"],
        max_iter=cfg["calibrate.max_iter"],
        cos=_cos(cfg),
    )
    fitted = surface_generate(factory(res.params), target.maturities, target.strikes, _cos(cfg), price_floor=0.0)
    fitted.to_csv(out / "fitted_surface.csv")
    target.to_csv(out / "target_surface.csv")
    res.to_json(out / "calibration.json", extra={"config": cfg, "seconds": seconds, "factory": factory.as_dict()})
    return {"mse": res.objective_value}


def cmd_skew(cfg, out: Path):
    T = np.array(cfg["skew.maturities"], dtype=float)
    if T.size < 3 or np.any(T <= 0):
        raise ConfigError("skew.maturities needs at least three positive values")
    target = -cfg["skew.coef"] * T ** cfg["skew.exponent"]
    params = _params(cfg)
    meta = {"config": cfg}
    if cfg["skew.fit"]:
        if cfg["mode"] != "lifted":
            raise ConfigError("skew fitting is available in lifted mode")
        spec = CalibrationSpec(
            free=tuple(cfg["skew.free"]),
            initial=_params(cfg, "initial"),
            target=np.column_stack([T, target]),
            objective="skew",
        )
        factory = ModelFactory("lifted", cfg["lift.n"], cfg["lift.r"], cfg["solver.steps"])
        res, seconds = _timed(
            calibrate, spec, factory, seed=cfg["seed"], n_starts=cfg["calibrate.n_starts"],
            max_iter=cfg["calibrate.max_iter"], cos=_cos(cfg),
        )
        params = res.params
        meta.update(seconds=seconds, calibration=json.loads(res.to_json()))
    skews = atm_skew(_model(cfg, params), T, cos=_cos(cfg))
    slope = float(np.polyfit(np.log(T), np.log(np.abs(skews)), 1)[0])
    _write_csv(out / "skew.csv", ["maturity", "target_skew", "model_skew"], zip(T, target, skews))
    meta.update(params=params.as_dict(), log_log_slope=slope)
    _write_json(out / "skew.json", meta)
    return {"slope": slope}


def _sim_lift(cfg, params):
    return classical_lift() if cfg["mode"] == "classical" else _lift(cfg, params.H)


def cmd_simulate(cfg, out: Path):
    params = _params(cfg)
    if cfg["mode"] == "rough":
        raise ConfigError("simulation supports the lifted and classical modes")
    lift = _sim_lift(cfg, params)
    paths, seconds = _timed(
        simulate_paths,
        params,
        lift,
        cfg["sim.T"],
        cfg["sim.steps"],
        cfg["sim.n_paths"],
        cfg["seed"],
        cfg["solver.scheme"],
        antithetic=cfg["sim.antithetic"],
        keep_paths=cfg["sim.keep_paths"],
        block_size=cfg["sim.block_size"],
        workers=cfg["workers"],
    )
    price, se = mc_call_price(paths, cfg["sim.strike"])
    S = paths.terminal_stock[np.isfinite(paths.terminal_stock)]
    extra = {
        "config": cfg,
        "call_price": price,
        "call_se": se,
        "mean_terminal_stock_se": float(S.std(ddof=1) / np.sqrt(S.size)),
    }
    paths.write_summary(out / "summary.json", extra=extra)
    # wall-clock time kept apart so the seeded outputs are bitwise reproducible
    _write_json(out / "timing.json", {"seconds": seconds})
    if cfg["sim.keep_paths"]:
        idx = cfg["sim.export_index"]
        if not 0 <= idx < paths.n_paths:
            raise ConfigError("sim.export_index out of range")
        paths.write_path_csv(out / "path.csv", idx)
        factor_surface(paths, idx).to_csv(out / "factors.csv")
    return {"call_price": price}


def cmd_hurst(cfg, out: Path):
    method = cfg["hurst.method"]
    if method not in ("autocorr", "qvariation"):
        raise ConfigError("hurst.method must be 'autocorr' or 'qvariation'")
    if cfg["hurst.input"]:
        path = Path(cfg["hurst.input"])
        if not path.exists():
            raise ConfigError(f"input series not found: {path}")
        series = VolSeries.from_csv(path, cfg["hurst.input_dt"])
    else:
        params = _params(cfg)
        if cfg["mode"] == "rough":
            raise ConfigError("hurst simulation supports the lifted and classical modes")
        lift = _sim_lift(cfg, params)
        paths = simulate_paths(params, lift, cfg["sim.T"], cfg["sim.steps"], 1, cfg["seed"], keep_paths=True)
        series = vol_series_from_variance(paths.variance[0], cfg["sim.T"] / cfg["sim.steps"], "simulated")

    rows = []
    if method == "autocorr":
        for stride in cfg["hurst.strides"]:
            sub = subsample(series, stride, cfg["hurst.window"])
            rep = autocorr_hurst(sub, cfg["hurst.K"])
            rows.append((sub.label, stride, sub.dt, rep.H_hat, rep.r_squared))
        _write_csv(out / "hurst.csv", ["timescale", "stride", "dt", "H_hat", "r_squared"], rows)
        summary = {"estimates": [{"timescale": r[0], "H_hat": r[3]} for r in rows]}
    else:
        rep = qvariation(
            series, cfg["hurst.qs"], range(1, cfg["hurst.max_lag"] + 1), overlapping=cfg["hurst.overlapping"]
        )
        rep.table_csv(out / "hurst_table.csv")
        _write_csv(out / "hurst.csv", ["q", "zeta"], zip(rep.qs, rep.zeta))
        summary = rep.to_dict()
    _write_json(out / "hurst.json", {"config": cfg, **summary})
    return summary


def cmd_kernel(cfg, out: Path):
    n, r, H = cfg["kernel.n"], cfg["kernel.r"], cfg["kernel.H"]
    lift = build_lift_config(n, r, H)
    rows = []
    for T in cfg["kernel.horizons"]:
        dist = kernel_l2_distance(lift, H, T)
        r_star = optimal_r(n, H, [(T, 1.0)], r_max=cfg["kernel.r_max"]) if cfg["kernel.optimal"] else float("nan")
        rows.append((T, dist, r_star))
    _write_csv(out / "kernel.csv", ["horizon", "l2_distance", "optimal_r"], rows)
    _write_json(
        out / "kernel.json",
        {"config": cfg, "weights": lift.weights.tolist(), "speeds": lift.speeds.tolist()},
    )
    return {"rows": rows}


COMMANDS = {
    "surface": cmd_surface,
    "converge": cmd_converge,
    "calibrate": cmd_calibrate,
    "skew": cmd_skew,
    "simulate": cmd_simulate,
    "hurst": cmd_hurst,
    "kernel": cmd_kernel,
}


def build_parser():
    parser = argparse.ArgumentParser(prog="liftedheston", description="Lifted Heston model experiments")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", type=Path, default=None, help="JSON file of dotted keys")
        p.add_argument("--out", type=Path, default=Path("."), help="output directory")
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--workers", type=int, default=None)
        p.add_argument("--mode", choices=MODES, default=None)
    return parser


def _fail(exc, code):
    payload = {"error": type(exc).__name__, "message": str(exc), "exit_code": code}
    print(json.dumps(payload), file=sys.stderr)
    return code


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    flags = {k: v for k, v in (("seed", args.seed), ("workers", args.workers), ("mode", args.mode)) if v is not None}
    try:
        schema = SCHEMAS[args.command]
        flags = {k: v for k, v in flags.items() if k in schema}
        cfg = load_config(args.command, args.config, flags)
        args.out.mkdir(parents=True, exist_ok=True)
        COMMANDS[args.command](cfg, args.out)
    except ConfigError as exc:
        return _fail(exc, 2)
    except (NumericalError, LiftedHestonError, FloatingPointError) as exc:
        return _fail(exc, 3)
    return 0


if __name__ == "__main__":
    sys.exit(main())
