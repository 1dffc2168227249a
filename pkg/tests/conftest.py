import numpy as np
import pytest

from liftedheston.charfn import THETA0
from liftedheston.kernel import build_lift_config


@pytest.fixture(scope="session")
def theta0():
    return THETA0


@pytest.fixture(scope="session")
def lift20():
    """The n=20, r=2.5 lift at H=0.1, the reference configuration."""
    return build_lift_config(20, 2.5, 0.1)


def fbm_path(n, H, rng):
    """Exact fBM on 0, 1, ..., n from a Cholesky factor of its covariance (test oracle only)."""
    t = np.arange(1, n + 1, dtype=float)
    cov = 0.5 * (t[:, None] ** (2 * H) + t[None, :] ** (2 * H) - np.abs(t[:, None] - t[None, :]) ** (2 * H))
    return np.concatenate([[0.0], np.linalg.cholesky(cov) @ rng.standard_normal(n)])


def fbm_paths(n, H, seeds):
    t = np.arange(1, n + 1, dtype=float)
    cov = 0.5 * (t[:, None] ** (2 * H) + t[None, :] ** (2 * H) - np.abs(t[:, None] - t[None, :]) ** (2 * H))
    L = np.linalg.cholesky(cov)
    out = []
    for s in seeds:
        z = np.random.default_rng(s).standard_normal(n)
        out.append(np.concatenate([[0.0], L @ z]))
    return out


# ---------------------------------------------------------------- acceptance report

# criterion number -> list of (part, passed, detail), filled by test_acceptance
ACCEPTANCE = {}


def record_criterion(k, passed, detail="", part=""):
    """Log one criterion (or part of one) and print its status line."""
    ACCEPTANCE.setdefault(k, []).append((part, bool(passed), detail))
    label = f"{k}{part}"
    print(f"CRITERION {label}: {'PASS' if passed else 'FAIL'}  {detail}")
    return bool(passed)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(ACCEPTANCE):
        parts = ACCEPTANCE[k]
        status = "PASS" if all(p for _, p, _ in parts) else "FAIL"
        terminalreporter.write_line(f"CRITERION {k}: {status}")
        for part, passed, detail in parts:
            terminalreporter.write_line(f"    {part or '-'} {'ok' if passed else 'not met'}: {detail}")
