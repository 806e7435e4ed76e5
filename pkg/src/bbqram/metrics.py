"""Error-model fits, cost factors and closed-form protocol baselines."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Dict, Iterable, Sequence, Tuple

import numpy as np

from .topology import Scheme

COST_PROTOCOLS = ("nonparallel", "high-bandwidth", "parallel", "hb-parallel")
UNSUPPORTED_PROTOCOLS = ("quantum-walk",)


class FitError(ValueError):
    pass


class UnsupportedError(ValueError):
    pass


@dataclass(frozen=True)
class FitResult:
    A: float
    C: float
    r_squared: float
    points: int


@dataclass(frozen=True)
class LinearFit:
    slope: float
    intercept: float
    r_squared: float


@dataclass(frozen=True)
class CostFactorReport:
    protocol: str
    n: int
    k: int
    c: int
    value: float


def _r_squared(y: np.ndarray, resid: np.ndarray) -> float:
    sse = float(resid @ resid)
    sst = float(np.sum((y - y.mean()) ** 2))
    if sst == 0.0:
        return 1.0 if sse <= 1e-30 else 0.0
    return float(np.clip(1.0 - sse / sst, 0.0, 1.0))


def fit_error_model(samples: Iterable[Tuple[float, float, float, float]]) -> FitResult:
    """Least-squares fit of 1 - F = A (C n^2 + n k) eps over (n, k, eps, F) samples.

    Solved on the linear reparameterization 1 - F = a1 n^2 eps + a2 n k eps,
    giving A = a2 and C = a1 / a2.
    """
    data = np.asarray(list(samples), dtype=float).reshape(-1, 4)
    if len(data) < 4:
        raise FitError("need at least 4 samples")
    n, k, eps, F = data.T
    if len(np.unique(n)) < 2 or len(np.unique(k)) < 2:
        raise FitError("samples must span at least two values of n and of k")
    X = np.column_stack([n ** 2 * eps, n * k * eps])
    y = 1.0 - F
    if np.linalg.matrix_rank(X) < 2:
        raise FitError("degenerate design")
    (a1, a2), *_ = np.linalg.lstsq(X, y, rcond=None)
    resid = y - X @ np.array([a1, a2])
    if a2 == 0.0 or np.all(y == 0):
        A, C = 0.0, 0.0
    else:
        A, C = float(a2), float(a1 / a2)
    return FitResult(A, C, _r_squared(y, resid), len(data))


def linear_fit(x: Sequence[float], y: Sequence[float]) -> LinearFit:
    """Ordinary least squares y = slope x + intercept."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if len(x) < 2 or len(np.unique(x)) < 2:
        raise FitError("need at least two distinct x values")
    slope, intercept = np.polyfit(x, y, 1)
    return LinearFit(float(slope), float(intercept), _r_squared(y, y - (slope * x + intercept)))


# ---------------------------------------------------------------------------
# Cost factors
# ---------------------------------------------------------------------------

def _time_and_error(protocol: str, n: int, k: int, c: int) -> Tuple[float, float]:
    """(time complexity, qutrit error scaling in units of eps) for the leading terms."""
    if protocol == "nonparallel":
        return n * k, k * n ** 2
    if protocol == "high-bandwidth":
        return n * k / c, k * n ** 2
    if protocol == "parallel":
        return n + k, (n + k) * n
    if protocol == "hb-parallel":
        # every node carries c data qubits, so each tick costs c n eps
        return n + k / c, c * (n + k / c) * n
    raise UnsupportedError(f"no cost model for protocol {protocol!r}")


def cost_factor(protocol: str, n: int, k: int, c: int = 1,
                scheme: Scheme = Scheme.QUTRIT) -> CostFactorReport:
    """T eps_t / (n eps) (qutrit) or T eps_t / (n^2 eps) (qubit, one extra n in eps_t)."""
    if protocol in UNSUPPORTED_PROTOCOLS or protocol not in COST_PROTOCOLS:
        raise UnsupportedError(f"no cost model for protocol {protocol!r}")
    if n < 1 or k < 1 or c < 1:
        raise ValueError("n, k and c must be positive")
    if protocol in ("nonparallel", "parallel") and c != 1:
        raise ValueError(f"{protocol} has bandwidth 1")
    if k % c:
        raise ValueError(f"bandwidth {c} must divide the word length {k}")
    T, err = _time_and_error(protocol, n, k, c)
    if Scheme(scheme) is Scheme.QUBIT:
        err, norm = err * n, n ** 2
    else:
        norm = n
    return CostFactorReport(protocol, n, k, c, float(T * err / norm))


def analytic_baselines(n: int, m: int, k: int) -> Dict[str, int]:
    """Hybrid QRAM+QROM versus hybrid-parallel: time and error order (qutrit, per eps)."""
    if n < 1 or k < 1 or m < 0:
        raise ValueError("need n, k >= 1 and m >= 0")
    qrom_time = (1 << m) * (n + k)
    par_time = (1 << m) * k + n
    return {
        "hybrid_qrom_time": qrom_time,
        "hybrid_qrom_error_order": qrom_time * n,
        "hybrid_parallel_time": par_time,
        "hybrid_parallel_error_order": par_time * n,
    }


def optimal_bandwidth(n: int, k: int) -> int:
    """Divisor c of k minimizing c n^2 + k^2 / c + 2 k n (smallest on ties)."""
    if n < 1 or k < 1:
        raise ValueError("need n, k >= 1")
    divisors = [c for c in range(1, k + 1) if k % c == 0]
    return min(divisors, key=lambda c: (c * n * n + k * k / c + 2 * k * n, c))
