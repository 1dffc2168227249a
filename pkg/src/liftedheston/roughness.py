"""Hurst-index estimators for volatility time series.

Two regressions are provided: the q-variation scaling of log-increments
moments against the lag, and the autocorrelation regression
log(1 - rho(k dt)) = b + 2 H log(k dt). Both are plain least-squares fits on
log-log data and report R^2 so that a poor fit is visible.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, NumericalError

__all__ = [
    "VolSeries",
    "HurstReport",
    "qvariation",
    "autocorr_hurst",
    "subsample",
    "timescale_label",
    "vol_series_from_variance",
    "DAYS_PER_YEAR",
    "HOURS_PER_DAY",
    "MIN_LENGTH",
]

DAYS_PER_YEAR = 250
HOURS_PER_DAY = 10
MINUTES_PER_YEAR = DAYS_PER_YEAR * HOURS_PER_DAY * 60
MIN_LENGTH = 100


@dataclass(frozen=True)
class VolSeries:
    """Uniformly sampled volatility values; ``dt`` is the sampling interval in years."""

    values: np.ndarray
    dt: float
    label: str = ""

    def __post_init__(self):
        v = np.array(self.values, dtype=float)
        if v.ndim != 1 or v.size < 2:
            raise ConfigError("values must be a 1-d series of length >= 2")
        # zero is allowed: a clamped variance step gives sigma = sqrt(V+) = 0
        if not np.all(np.isfinite(v)) or np.any(v < 0):
            raise ConfigError("volatility values must be finite and nonnegative")
        if not self.dt > 0:
            raise ConfigError("dt must be positive")
        v.setflags(write=False)
        object.__setattr__(self, "values", v)

    def __len__(self):
        return self.values.size

    @classmethod
    def from_csv(cls, path, dt: float, label: str | None = None) -> "VolSeries":
        """Read a two-column CSV (timestamp or index, vol) with a header row."""
        with open(path, newline="", encoding="utf-8") as fh:
            rows = list(csv.reader(fh))
        if len(rows) < 2 or len(rows[0]) < 2:
            raise ConfigError(f"{path}: expected a header and two columns")
        try:
            vals = [float(r[1]) for r in rows[1:] if r]
        except ValueError as exc:
            raise ConfigError(f"{path}: non-numeric volatility value") from exc
        return cls(np.array(vals), dt, label if label is not None else str(path))

    def to_csv(self, path):
        with open(path, "w", newline="", encoding="utf-8") as fh:
            out = csv.writer(fh, lineterminator="\n")
            out.writerow(["index", "vol"])
            for k, v in enumerate(self.values):
                out.writerow([k, repr(float(v))])


def vol_series_from_variance(variance, dt: float, label: str = "") -> VolSeries:
    """sqrt(V+) of a simulated variance path, as fed to the square root in the scheme."""
    v = np.sqrt(np.maximum(np.asarray(variance, dtype=float), 0.0))
    return VolSeries(v, dt, label)


@dataclass
class HurstReport:
    method: str
    H_hat: float
    r_squared: float
    residuals: np.ndarray
    # q-variation only: per-q slopes zeta_q and the log-log table
    qs: np.ndarray | None = None
    zeta: np.ndarray | None = None
    lags: np.ndarray | None = None
    log_moments: np.ndarray | None = None
    # autocorrelation only
    autocorr: np.ndarray | None = None
    meta: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        out = {
            "method": self.method,
            "H_hat": self.H_hat,
            "r_squared": self.r_squared,
            "residuals": self.residuals.tolist(),
            "meta": self.meta,
        }
        for name in ("qs", "zeta", "lags", "autocorr"):
            val = getattr(self, name)
            if val is not None:
                out[name] = np.asarray(val).tolist()
        return out

    def to_json(self, path):
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_dict(), fh, indent=2)

    def table_csv(self, path):
        """Log-log regression table: one row per lag."""
        with open(path, "w", newline="", encoding="utf-8") as fh:
            out = csv.writer(fh, lineterminator="\n")
            if self.method == "QVariation":
                out.writerow(["lag", "log_lag"] + [f"log_m_q{q:g}" for q in self.qs])
                for j, lag in enumerate(self.lags):
                    out.writerow([int(lag), repr(float(np.log(lag)))] + [repr(float(x)) for x in self.log_moments[:, j]])
            else:
                out.writerow(["lag", "log_lag_time", "autocorr", "log_one_minus_autocorr"])
                dt = self.meta["dt"]
                for lag, rho in zip(self.lags, self.autocorr):
                    out.writerow([int(lag), repr(float(np.log(lag * dt))), repr(float(rho)), repr(float(np.log1p(-rho)))])


def _ols(x, y):
    """Slope, intercept, R^2 and residuals of an unweighted straight-line fit."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    A = np.column_stack([x, np.ones_like(x)])
    (slope, intercept), *_ = np.linalg.lstsq(A, y, rcond=None)
    resid = y - (slope * x + intercept)
    ss_tot = np.sum((y - y.mean()) ** 2)
    r2 = 1.0 - np.sum(resid**2) / ss_tot if ss_tot > 0 else 1.0
    return float(slope), float(intercept), float(r2), resid


def _check_length(series: VolSeries):
    if len(series) < MIN_LENGTH:
        raise ConfigError(f"series needs at least {MIN_LENGTH} points, got {len(series)}")


def qvariation(
    series: VolSeries, qs=(0.5, 1.0, 1.5, 2.0, 3.0), lags=range(1, 101), *, overlapping: bool = False
) -> HurstReport:
    """Hurst estimate from m(q, lag) = mean |sigma_{k lag} - sigma_{(k-1) lag}|^q.

    By default increments are non-overlapping: for each lag the series is
    read every ``lag`` points. ``overlapping=True`` uses all differences
    sigma_{j + lag} - sigma_j instead. log m is regressed on log lag for each
    q to get zeta_q, then zeta_q on q (through a free intercept) to get H.
    """
    _check_length(series)
    qs = np.asarray(list(qs), dtype=float)
    lags = np.asarray(list(lags), dtype=int)
    if qs.size < 2 or np.any((qs <= 0) | (qs > 4)):
        raise ConfigError("need at least two q values in (0, 4]")
    if lags.size < 2 or np.any(lags < 1) or np.any(np.diff(lags) <= 0):
        raise ConfigError("lags must be increasing positive integers, at least two")
    if lags[-1] > len(series) / 5:
        raise ConfigError(f"max lag {lags[-1]} exceeds length/5 = {len(series) / 5:g}")

    sigma = series.values
    log_m = np.empty((qs.size, lags.size))
    for j, lag in enumerate(lags):
        inc = np.abs(sigma[lag:] - sigma[:-lag]) if overlapping else np.abs(np.diff(sigma[::lag]))
        if not np.any(inc > 0):
            raise NumericalError(f"all increments vanish at lag {lag}; log-moment undefined")
        log_m[:, j] = np.log(np.mean(inc[None, :] ** qs[:, None], axis=1))

    log_lag = np.log(lags)
    zeta = np.array([_ols(log_lag, row)[0] for row in log_m])
    slope, _, r2, resid = _ols(qs, zeta)
    return HurstReport(
        method="QVariation",
        H_hat=slope,
        r_squared=r2,
        residuals=resid,
        qs=qs,
        zeta=zeta,
        lags=lags,
        log_moments=log_m,
        meta={"n": len(series), "dt": series.dt, "label": series.label, "overlapping": overlapping},
    )


def _lag_correlation(x, k):
    a, b = x[:-k], x[k:]
    a = a - a.mean()
    b = b - b.mean()
    den = np.sqrt(np.dot(a, a) * np.dot(b, b))
    if den == 0:
        return 1.0
    return float(np.dot(a, b) / den)


def autocorr_hurst(series: VolSeries, K: int = 10) -> HurstReport:
    """Hurst estimate from log(1 - rho(k dt)) = b + 2 H log(k dt), k = 1..K.

    rho(k dt) is the Pearson correlation between the series and itself
    shifted by k samples.
    """
    _check_length(series)
    if int(K) != K or K < 3:
        raise ConfigError("K must be an integer >= 3")
    K = int(K)
    if K > len(series) // 2:
        raise ConfigError("K must not exceed half the series length")
    x = series.values
    rho = np.array([_lag_correlation(x, k) for k in range(1, K + 1)])
    if np.any(rho >= 1):
        k = int(np.flatnonzero(rho >= 1)[0]) + 1
        raise NumericalError(f"autocorrelation at lag {k} is 1; log(1 - rho) undefined")
    lags = np.arange(1, K + 1)
    slope, _, r2, resid = _ols(np.log(lags * series.dt), np.log1p(-rho))
    return HurstReport(
        method="AutoCorr",
        H_hat=slope / 2,
        r_squared=r2,
        residuals=resid,
        lags=lags,
        autocorr=rho,
        meta={"n": len(series), "dt": series.dt, "label": series.label, "K": K},
    )


def timescale_label(dt: float) -> str:
    """Human label for a sampling interval in years, under 250 days of 10 hours."""
    minutes = dt * MINUTES_PER_YEAR
    m = round(minutes)
    if abs(minutes - m) > 1e-6 * max(1.0, minutes) or m < 1:
        return f"{minutes:g}min"
    day = HOURS_PER_DAY * 60
    if m % day == 0:
        return f"{m // day}day"
    if m % 60 == 0:
        return f"{m // 60}h"
    return f"{m}min"


def subsample(series: VolSeries, stride: int, window: int) -> VolSeries:
    """Every ``stride``-th point, first ``window`` of them; dt scales with the stride."""
    if int(stride) != stride or stride < 1 or int(window) != window or window < 2:
        raise ConfigError("stride must be >= 1 and window >= 2")
    stride, window = int(stride), int(window)
    if stride * window > len(series):
        raise ConfigError(f"series of length {len(series)} too short for stride {stride} x window {window}")
    dt = series.dt * stride
    return VolSeries(series.values[: stride * (window - 1) + 1 : stride], dt, timescale_label(dt))
