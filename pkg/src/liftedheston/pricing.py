"""European calls by Fourier-cosine inversion, implied volatilities and surfaces.

Rates and dividends are zero throughout, so S is a martingale and prices are
undiscounted.
"""

from __future__ import annotations

import csv
import json
import time
from dataclasses import dataclass, field

import numpy as np
from scipy.special import ndtr

from .charfn import (
    ModelParams,
    charfn_heston,
    charfn_rough,
    charfn_unconditional,
)
from .errors import ArbitrageBoundError, ConfigError, NumericalError, TruncationError
from .kernel import LiftConfig, classical_lift
from .riccati import DEFAULT_ADAMS_STEPS, DEFAULT_LIFTED_STEPS

__all__ = [
    "STANDARD_MATURITIES",
    "CosConfig",
    "PricingModel",
    "VolSurface",
    "bs_call",
    "implied_vol",
    "cumulants",
    "cos_call_price",
    "strike_grid",
    "surface_generate",
    "surface_mse",
    "atm_skew",
    "classical_as_lifted",
]

WEEK, MONTH = 1 / 52, 1 / 12
# 1w, 1m, 2m, 3m, 6m, 9m, 1y, 1.5y, 2y
STANDARD_MATURITIES = (WEEK, MONTH, 2 * MONTH, 3 * MONTH, 0.5, 0.75, 1.0, 1.5, 2.0)

MODES = ("lifted", "rough", "classical")
# step doublings allowed for transform rows that go unstable at high frequency
REFINEMENTS = 3
# out-of-the-money prices below this fraction of spot are treated as noise
PRICE_FLOOR = 1e-7


# ---------------------------------------------------------------- Black-Scholes


def bs_call(S0, K, T, sigma):
    """Undiscounted Black-Scholes call price, vectorized."""
    S0, K, T, sigma = np.broadcast_arrays(*(np.asarray(a, dtype=float) for a in (S0, K, T, sigma)))
    sd = sigma * np.sqrt(T)
    with np.errstate(divide="ignore", invalid="ignore"):
        d1 = np.log(S0 / K) / sd + 0.5 * sd
    price = S0 * ndtr(d1) - K * ndtr(d1 - sd)
    intrinsic = np.maximum(S0 - K, 0.0)
    out = np.where(sd > 0, price, intrinsic)
    return float(out) if out.ndim == 0 else out


def _bs_vega(S0, K, T, sigma):
    sd = sigma * np.sqrt(T)
    d1 = np.log(S0 / K) / sd + 0.5 * sd
    return S0 * np.sqrt(T) * np.exp(-0.5 * d1 * d1) / np.sqrt(2 * np.pi)


def implied_vol(price, S0, K, T, tol: float = 1e-10, max_iter: int = 200, *, strict: bool = True):
    """Black-Scholes implied volatility by safeguarded Newton with bisection fallback.

    The bracket [lo, hi] on sigma is maintained throughout; a Newton step
    leaving it is replaced by bisection. Converged when the price residual is
    below ``tol`` and the next Newton step is negligible. With ``strict=False`` out-of-bound prices give NaN instead
    of raising.
    """
    price, S0, K, T = np.broadcast_arrays(*(np.asarray(a, dtype=float) for a in (price, S0, K, T)))
    lower = np.maximum(S0 - K, 0.0)
    below = ~(price > lower)
    above = ~(price < S0)
    if strict and np.any(below):
        i = np.flatnonzero(below.ravel())[0]
        raise ArbitrageBoundError(
            f"price {price.flat[i]!r} is below lower bound {lower.flat[i]!r} (intrinsic value)", "lower"
        )
    if strict and np.any(above):
        i = np.flatnonzero(above.ravel())[0]
        raise ArbitrageBoundError(f"price {price.flat[i]!r} is above upper bound {S0.flat[i]!r} (spot)", "upper")
    ok = ~(below | above)

    lo = np.zeros_like(price)
    hi = np.ones_like(price)
    # grow the upper end until it brackets
    for _ in range(60):
        short = ok & (bs_call(S0, K, T, hi) < price)
        if not short.any():
            break
        lo = np.where(short, hi, lo)
        hi = np.where(short, 2 * hi, hi)
    sigma = np.where(ok, 0.5 * (lo + hi), np.nan)
    # start Newton from the inflection point where it is globally convergent
    infl = np.sqrt(np.abs(2 * np.log(S0 / K)) / np.where(T > 0, T, 1.0))
    sigma = np.where(ok & (infl > lo) & (infl < hi), infl, sigma)
    done = ~ok
    for _ in range(max_iter):
        s = np.where(done, 0.5, sigma)
        diff = bs_call(S0, K, T, s) - price
        vega = _bs_vega(S0, K, T, s)
        with np.errstate(divide="ignore", invalid="ignore"):
            newton = s - diff / vega
        # small price residual alone leaves ~tol / vega in sigma; also require a tiny step
        conv = (np.abs(diff) <= tol) & ~(np.abs(newton - s) > 1e-13 * s)
        done = done | conv
        if done.all():
            break
        lo = np.where(diff < 0, s, lo)
        hi = np.where(diff > 0, s, hi)
        good = np.isfinite(newton) & (newton > lo) & (newton < hi)
        step = np.where(good, newton, 0.5 * (lo + hi))
        # the bracket can collapse below the price tolerance in flat wings
        collapsed = (hi - lo) <= 1e-15 * np.maximum(hi, 1.0)
        done = done | collapsed
        sigma = np.where(done, sigma, step)
        sigma = np.where(conv | collapsed, s, sigma)
    else:
        if not done.all():
            raise NumericalError("implied volatility iteration did not converge")
    sigma = np.where(ok, sigma, np.nan)
    return float(sigma) if sigma.ndim == 0 else sigma


# ---------------------------------------------------------------- COS method


@dataclass(frozen=True)
class CosConfig:
    """Cosine-expansion settings.

    The truncation interval for log(S_T / S0) is either given explicitly as
    ``interval = (a, b)`` or taken from the cumulant rule c1 -/+ L sqrt(c2)
    (``rule="c2"``) or c1 -/+ L sqrt(c2 + sqrt(c4)) (``rule="c2c4"``).
    """

    n_terms: int = 160
    L: float = 12.0
    interval: tuple[float, float] | None = None
    rule: str = "c2"
    mass_tol: float = 1e-3
    max_widen: int = 2

    def __post_init__(self):
        if int(self.n_terms) != self.n_terms or self.n_terms < 16:
            raise ConfigError("n_terms must be an integer >= 16")
        if not self.L > 0:
            raise ConfigError("L must be positive")
        if self.interval is not None and not self.interval[0] < self.interval[1]:
            raise ConfigError("truncation interval needs a < b")
        if self.rule not in ("c2", "c2c4"):
            raise ConfigError(f"unknown cumulant rule {self.rule!r}")


def cumulants(log_cf, scale: float):
    """First, second and fourth cumulants of X from its log-transform.

    ``log_cf(s)`` must return log E[exp(i s X)] for a real array ``s``
    (broadcast over extra axes). The cumulant expansion is fitted to three
    small imaginary-axis probes of size ~ ``scale`` / sd(X).
    """
    h = np.asarray(scale, dtype=float)
    probes = np.stack([h, 2 * h, 3 * h])
    k = log_cf(probes)
    R, I = k.real, k.imag
    # Re k(j h) = -c2 (jh)^2/2 + c4 (jh)^4/24 - c6 (jh)^6/720
    # Im k(j h) = c1 jh - c3 (jh)^3/6 + c5 (jh)^5/120
    m = np.array([[-0.5 * j**2, j**4 / 24.0, -(j**6) / 720.0] for j in (1, 2, 3)])
    coef = np.linalg.solve(m, R.reshape(3, -1)).reshape((3,) + R.shape[1:])
    c2 = coef[0] / h**2
    c4 = coef[1] / h**4
    mi = np.array([[j, -(j**3) / 6.0, j**5 / 120.0] for j in (1, 2, 3)])
    coefi = np.linalg.solve(mi, I.reshape(3, -1)).reshape((3,) + I.shape[1:])
    c1 = coefi[0] / h
    return c1, c2, c4


def _interval(c1, c2, c4, cos: CosConfig):
    spread = np.abs(c2) if cos.rule == "c2" else np.abs(c2) + np.sqrt(np.abs(c4))
    width = cos.L * np.sqrt(spread)
    return c1 - width, c1 + width


def _chi_psi(omega, a, lo, hi):
    """int_lo^hi e^y cos(w (y - a)) dy and int_lo^hi cos(w (y - a)) dy.

    ``omega`` has shape (m, 1), ``lo``/``hi`` shape (K,); rows are terms.
    """
    w = omega
    cl, ch = np.cos(w * (lo - a)), np.cos(w * (hi - a))
    sl, sh = np.sin(w * (lo - a)), np.sin(w * (hi - a))
    el, eh = np.exp(lo), np.exp(hi)
    chi = (ch * eh - cl * el + w * (sh * eh - sl * el)) / (1 + w * w)
    w_safe = np.where(w == 0, 1.0, w)
    psi = np.where(w == 0, hi - lo, (sh - sl) / w_safe)
    return chi, psi


def _cos_prices(phi, a, b, S0, K, n_terms):
    """Call prices and recovered share-measure mass from transform values.

    ``phi`` holds E[exp(i w_k log(S_T/S0))] at w_k = k pi / (b - a).
    """
    kk = np.arange(n_terms)
    omega = (kk * np.pi / (b - a))[:, None]
    terms = (phi * np.exp(-1j * kk * np.pi * a / (b - a))).real
    terms[0] *= 0.5
    logk = np.log(np.asarray(K, dtype=float) / S0)
    lo = np.clip(logk, a, b)
    chi, psi = _chi_psi(omega, a, lo, np.full_like(lo, b))
    V = 2.0 / (b - a) * S0 * (chi - np.exp(logk) * psi)
    price = terms @ V
    chi_all, _ = _chi_psi(omega, a, np.array([a]), np.array([b]))
    mass = float(terms @ (2.0 / (b - a) * chi_all[:, 0]))
    return price, mass


def cos_call_price(cf, S0: float, K, T: float, cos: CosConfig | None = None, *, scale_hint: float | None = None):
    """Undiscounted call prices for strikes ``K`` by the COS method.

    ``cf(u)`` returns E[exp(u log S_T)] for complex arrays ``u``. When the
    recovered E[S_T / S0; a <= log(S_T/S0) <= b] deviates from 1 by more than
    ``cos.mass_tol`` the interval is doubled, at most ``cos.max_widen`` times.
    """
    cos = cos or CosConfig()
    if not T > 0:
        raise ConfigError("T must be positive")
    K_arr = np.atleast_1d(np.asarray(K, dtype=float))
    if np.any(K_arr <= 0):
        raise ConfigError("strikes must be positive")
    logS0 = np.log(S0)

    def log_cf(s):
        return np.log(cf(1j * s)) - 1j * s * logS0

    if cos.interval is not None:
        a, b = cos.interval
    else:
        sd = scale_hint if scale_hint is not None else 1.0
        for _ in range(2):
            c1, c2, c4 = cumulants(log_cf, 0.25 / sd)
            sd = float(np.sqrt(abs(c2)))
        a, b = _interval(float(c1), float(c2), float(c4), cos)

    for attempt in range(cos.max_widen + 1):
        omega = np.arange(cos.n_terms) * np.pi / (b - a)
        phi = cf(1j * omega) * np.exp(-1j * omega * logS0)
        price, mass = _cos_prices(phi, a, b, S0, K_arr, cos.n_terms)
        if abs(mass - 1.0) <= cos.mass_tol:
            break
        mid, half = 0.5 * (a + b), (b - a)
        a, b = mid - half, mid + half
    else:
        raise TruncationError(f"recovered mass {mass:.6f} outside tolerance after widening")
    return float(price[0]) if np.ndim(K) == 0 else price


# ---------------------------------------------------------------- models


@dataclass(frozen=True)
class PricingModel:
    """A model together with its transform engine.

    ``mode`` is ``"lifted"`` (needs ``lift``), ``"rough"`` (Adams scheme) or
    ``"classical"`` (closed-form Heston, H ignored). ``steps`` defaults to the
    mode's standard step count.
    """

    params: ModelParams
    mode: str = "lifted"
    lift: LiftConfig | None = None
    steps: int | None = None
    scheme: str = "rational"

    def __post_init__(self):
        if self.mode not in MODES:
            raise ConfigError(f"unknown mode {self.mode!r}")
        if self.mode == "lifted" and self.lift is None:
            raise ConfigError("lifted mode needs a LiftConfig")

    @property
    def n_steps(self) -> int:
        if self.steps is not None:
            return self.steps
        return DEFAULT_ADAMS_STEPS if self.mode == "rough" else DEFAULT_LIFTED_STEPS

    def cf(self, u, T):
        if self.mode == "lifted":
            return charfn_unconditional(
                self.params, self.lift, u, T, self.n_steps, scheme=self.scheme, max_refine=REFINEMENTS
            )
        if self.mode == "rough":
            return charfn_rough(self.params, u, T, self.n_steps, max_refine=REFINEMENTS)
        return charfn_heston(self.params, u, T)

    def with_params(self, params: ModelParams) -> "PricingModel":
        return PricingModel(params, self.mode, self.lift, self.steps, self.scheme)


def classical_as_lifted(params: ModelParams, steps: int = 10_000) -> PricingModel:
    """The lifted engine run on the one-factor lift c = 1, x = 0."""
    return PricingModel(params, "lifted", classical_lift(), steps)


# ---------------------------------------------------------------- surfaces


@dataclass
class VolSurface:
    """Implied volatilities on a maturity x strike grid.

    ``strikes`` and ``vols``/``weights`` are lists with one 1-d array per
    maturity. Missing cells (failed inversions) are NaN.
    """

    maturities: np.ndarray
    strikes: list
    vols: list
    weights: list
    S0: float = 1.0
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.maturities = np.asarray(self.maturities, dtype=float)
        self.strikes = [np.asarray(k, dtype=float) for k in self.strikes]
        self.vols = [np.asarray(v, dtype=float) for v in self.vols]
        if self.weights is None:
            self.weights = [np.ones_like(k) for k in self.strikes]
        self.weights = [np.asarray(w, dtype=float) for w in self.weights]
        m = len(self.maturities)
        if not (len(self.strikes) == len(self.vols) == len(self.weights) == m):
            raise ConfigError("one strike, vol and weight row per maturity")
        for k, v, w in zip(self.strikes, self.vols, self.weights):
            if not (k.shape == v.shape == w.shape) or k.ndim != 1:
                raise ConfigError("strike, vol and weight rows must match")
            if np.any(k <= 0):
                raise ConfigError("strikes must be positive")
            if np.any(w < 0):
                raise ConfigError("weights must be nonnegative")
            if np.any(v[np.isfinite(v)] <= 0):
                raise ConfigError("vols must be positive where defined")

    @property
    def n_missing(self) -> int:
        return int(sum(np.isnan(v).sum() for v in self.vols))

    def log_moneyness(self):
        return [np.log(k / self.S0) for k in self.strikes]

    def same_grid(self, other: "VolSurface") -> bool:
        return (
            np.array_equal(self.maturities, other.maturities)
            and len(self.strikes) == len(other.strikes)
            and all(np.array_equal(a, b) for a, b in zip(self.strikes, other.strikes))
        )

    def records(self):
        for T, K, k, v, w in zip(self.maturities, self.strikes, self.log_moneyness(), self.vols, self.weights):
            for row in zip(np.full_like(K, T), K, k, v, w):
                yield row

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            out = csv.writer(fh, lineterminator="\n")
            out.writerow(["maturity", "strike", "log_moneyness", "vol", "weight"])
            for row in self.records():
                out.writerow([_fmt(x) for x in row])

    @classmethod
    def from_csv(cls, path, S0: float = 1.0) -> "VolSurface":
        rows = {}
        with open(path, newline="") as fh:
            reader = csv.DictReader(fh)
            if reader.fieldnames != ["maturity", "strike", "log_moneyness", "vol", "weight"]:
                raise ConfigError(f"unexpected surface CSV header {reader.fieldnames}")
            for r in reader:
                T = float(r["maturity"])
                rows.setdefault(T, []).append((float(r["strike"]), float(r["vol"]), float(r["weight"])))
        mats = list(rows)
        return cls(
            maturities=np.array(mats),
            strikes=[np.array([x[0] for x in rows[T]]) for T in mats],
            vols=[np.array([x[1] for x in rows[T]]) for T in mats],
            weights=[np.array([x[2] for x in rows[T]]) for T in mats],
            S0=S0,
        )

    def to_json(self, path=None):
        doc = {
            "S0": self.S0,
            "maturities": self.maturities.tolist(),
            "strikes": [k.tolist() for k in self.strikes],
            "vols": [[None if np.isnan(x) else float(x) for x in v] for v in self.vols],
            "weights": [w.tolist() for w in self.weights],
            "meta": self.meta,
        }
        text = json.dumps(doc, indent=1)
        if path is not None:
            with open(path, "w") as fh:
                fh.write(text + "\n")
        return text

    @classmethod
    def from_json(cls, path_or_text) -> "VolSurface":
        text = path_or_text
        if not str(text).lstrip().startswith("{"):
            with open(path_or_text) as fh:
                text = fh.read()
        doc = json.loads(text)
        return cls(
            maturities=doc["maturities"],
            strikes=doc["strikes"],
            vols=[[np.nan if x is None else x for x in v] for v in doc["vols"]],
            weights=doc["weights"],
            S0=doc["S0"],
            meta=doc.get("meta", {}),
        )


def _fmt(x: float) -> str:
    return "nan" if np.isnan(x) else repr(float(x))


def strike_grid(maturities, n_strikes: int = 80, width: float = 0.3, S0: float = 1.0, scaling: str = "flat"):
    """Strikes with log-moneyness uniform in [-w, w] per maturity.

    ``scaling="flat"`` uses w = ``width`` for every maturity; ``"sqrt"`` uses
    w = ``width`` * min(sqrt(T), 1).
    """
    if n_strikes < 1:
        raise ConfigError("need at least one strike")
    if scaling not in ("flat", "sqrt"):
        raise ConfigError(f"unknown strike scaling {scaling!r}")
    out = []
    for T in maturities:
        half = width if scaling == "flat" else width * min(np.sqrt(T), 1.0)
        k = np.linspace(-half, half, n_strikes) if n_strikes > 1 else np.zeros(1)
        out.append(S0 * np.exp(k))
    return out


def _surface_prices(model: PricingModel, maturities, strikes, cos: CosConfig):
    """Call prices on the grid with all Fourier nodes of all maturities in one batch."""
    p = model.params
    logS0 = np.log(p.S0)
    T = np.asarray(maturities, dtype=float)
    if cos.interval is not None:
        a = np.full_like(T, cos.interval[0])
        b = np.full_like(T, cos.interval[1])
    else:
        sd = np.sqrt(T * max(p.V0, p.theta, 1e-4))

        def log_cf(s):
            return np.log(model.cf(1j * s, T)) - 1j * s * logS0

        for _ in range(2):
            c1, c2, c4 = cumulants(log_cf, 0.25 / sd)
            sd = np.sqrt(np.abs(c2))
        a, b = _interval(c1, c2, c4, cos)

    prices = [None] * len(T)
    pending = np.arange(len(T))
    for attempt in range(cos.max_widen + 1):
        omega = np.arange(cos.n_terms)[None, :] * np.pi / (b - a)[pending, None]
        phi = model.cf(1j * omega, T[pending, None]) * np.exp(-1j * omega * logS0)
        retry = []
        for row, j in enumerate(pending):
            price, mass = _cos_prices(phi[row], a[j], b[j], p.S0, strikes[j], cos.n_terms)
            if abs(mass - 1.0) <= cos.mass_tol:
                prices[j] = price
            else:
                retry.append(j)
        if not retry:
            return prices
        pending = np.array(retry)
        mid, half = 0.5 * (a + b), (b - a)
        a = np.where(np.isin(np.arange(len(T)), pending), mid - half, a)
        b = np.where(np.isin(np.arange(len(T)), pending), mid + half, b)
    raise TruncationError(f"recovered mass outside tolerance for maturities {T[pending].tolist()}")


def surface_generate(
    model: PricingModel,
    maturities=STANDARD_MATURITIES,
    strikes=None,
    cos: CosConfig | None = None,
    weights=None,
    price_floor: float = PRICE_FLOOR,
) -> VolSurface:
    """Implied-vol surface of ``model``; failed inversions become NaN cells.

    Cells whose out-of-the-money price (call above the spot, put below) is
    under ``price_floor * S0`` are also left missing: there the implied vol
    is dominated by the cosine-series error. Wall-clock time of the numerical
    core is stored in ``meta["seconds"]``.
    """
    cos = cos or CosConfig()
    maturities = np.asarray(maturities, dtype=float)
    if maturities.ndim != 1 or maturities.size == 0 or np.any(np.diff(maturities) <= 0) or maturities[0] <= 0:
        raise ConfigError("maturities must be positive and strictly increasing")
    S0 = model.params.S0
    strikes = strike_grid(maturities, S0=S0) if strikes is None else [np.asarray(k, float) for k in strikes]
    if len(strikes) != len(maturities):
        raise ConfigError("one strike row per maturity")
    if any(np.any(k <= 0) for k in strikes):
        raise ConfigError("strikes must be positive")

    start = time.perf_counter()
    prices = _surface_prices(model, maturities, strikes, cos)
    vols = []
    for c, K, T in zip(prices, strikes, maturities):
        otm = np.where(K >= S0, c, c - (S0 - K))
        v = implied_vol(c, S0, K, T, strict=False)
        vols.append(np.where(otm < price_floor * S0, np.nan, v))
    seconds = time.perf_counter() - start
    meta = {"mode": model.mode, "steps": model.n_steps, "seconds": seconds, "n_terms": cos.n_terms}
    if model.lift is not None and model.mode == "lifted":
        meta.update(n=model.lift.n, r=model.lift.r)
    surf = VolSurface(maturities, strikes, vols, weights, S0=S0, meta=meta)
    surf.meta["missing"] = surf.n_missing
    return surf


def surface_mse(a: VolSurface, b: VolSurface, weights=None) -> float:
    """sum w (sigma_a - sigma_b)^2 / sum w over cells defined on both surfaces.

    ``weights`` defaults to the weights stored on ``a``.
    """
    if not a.same_grid(b):
        raise ConfigError("surfaces are on different grids")
    w = a.weights if weights is None else [np.asarray(x, dtype=float) for x in weights]
    num = den = 0.0
    for va, vb, wr in zip(a.vols, b.vols, w):
        if wr.shape != va.shape:
            raise ConfigError("weight rows must match the grid")
        ok = np.isfinite(va) & np.isfinite(vb)
        num += float(np.sum(wr[ok] * (va[ok] - vb[ok]) ** 2))
        den += float(np.sum(wr[ok]))
    if den <= 0:
        raise NumericalError("no common defined cells with positive weight")
    return num / den


def atm_skew(model: PricingModel, T, bump: float = 1e-3, wide_bump: float = 5e-3, cos: CosConfig | None = None):
    """d sigma / d k at k = 0 by central difference, for one or several maturities."""
    T_in = np.atleast_1d(np.asarray(T, dtype=float))
    T_arr, inverse = np.unique(T_in, return_inverse=True)
    S0 = model.params.S0

    def skews(db):
        strikes = [S0 * np.exp(np.array([-db, db]))] * len(T_arr)
        surf = surface_generate(model, T_arr, strikes, cos, price_floor=0.0)
        return np.array([(v[1] - v[0]) / (2 * db) for v in surf.vols])[inverse]

    out = skews(bump)
    bad = ~np.isfinite(out)
    if bad.any():
        out[bad] = skews(wide_bump)[bad]
        if not np.all(np.isfinite(out)):
            raise NumericalError("implied volatility inversion failed near the money")
    return float(out[0]) if np.ndim(T) == 0 else out
