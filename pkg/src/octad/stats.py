"""Student-t tail probabilities and the calibrated paired t-test.

The regularized incomplete beta function is evaluated with the modified
Lentz continued fraction; no statistics library is required.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

from .store import ValidationError

_FPMIN = 1e-300
_EPS = 1e-16
_MAX_ITER = 500


def _betacf(a: float, b: float, x: float) -> float:
    qab, qap, qam = a + b, a + 1.0, a - 1.0
    c = 1.0
    d = 1.0 - qab * x / qap
    if abs(d) < _FPMIN:
        d = _FPMIN
    d = 1.0 / d
    h = d
    for m in range(1, _MAX_ITER + 1):
        m2 = 2 * m
        aa = m * (b - m) * x / ((qam + m2) * (a + m2))
        d = 1.0 + aa * d
        if abs(d) < _FPMIN:
            d = _FPMIN
        c = 1.0 + aa / c
        if abs(c) < _FPMIN:
            c = _FPMIN
        d = 1.0 / d
        h *= d * c
        aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2))
        d = 1.0 + aa * d
        if abs(d) < _FPMIN:
            d = _FPMIN
        c = 1.0 + aa / c
        if abs(c) < _FPMIN:
            c = _FPMIN
        d = 1.0 / d
        delta = d * c
        h *= delta
        if abs(delta - 1.0) < _EPS:
            return h
    raise ArithmeticError(f"incomplete beta continued fraction did not converge (a={a}, b={b})")


def betainc(a: float, b: float, x: float) -> float:
    """Regularized incomplete beta I_x(a, b)."""
    if a <= 0 or b <= 0:
        raise ValidationError("betainc needs a, b > 0")
    if not 0.0 <= x <= 1.0:
        raise ValidationError("betainc needs 0 <= x <= 1")
    if x == 0.0 or x == 1.0:
        return x
    log_front = (math.lgamma(a + b) - math.lgamma(a) - math.lgamma(b)
                 + a * math.log(x) + b * math.log1p(-x))
    front = math.exp(log_front)
    if x < (a + 1.0) / (a + b + 2.0):
        return front * _betacf(a, b, x) / a
    return 1.0 - front * _betacf(b, a, 1.0 - x) / b


def t_sf(t: float, df: float) -> float:
    """P(T > t) for Student's t with ``df`` degrees of freedom."""
    if df <= 0:
        raise ValidationError("df must be > 0")
    if math.isinf(t):
        return 0.0 if t > 0 else 1.0
    tail = 0.5 * betainc(df / 2.0, 0.5, df / (df + t * t))
    return tail if t >= 0 else 1.0 - tail


def t_two_sided_p(t: float, df: float) -> float:
    if math.isinf(t):
        return 0.0
    return min(1.0, betainc(df / 2.0, 0.5, df / (df + t * t)))


@dataclass(frozen=True)
class TTestResult:
    t_statistic: float
    p_value: float
    df: float
    variance_correction: float
    degenerate: bool = False


def calibrated_t_test(
    a: Sequence[float],
    b: Sequence[float],
    rho: float = 0.25,
    df: float | None = None,
) -> TTestResult:
    """Paired t-test on per-run scores with variance inflated by ``rho``.

    ``t = mean(d) / sqrt((1/n + rho) * var(d))`` with the n-1 sample
    variance; ``rho = n_test / n_train`` corrects for overlapping training
    sets and ``rho = 0`` gives the ordinary paired t-test.
    """
    if len(a) != len(b):
        raise ValidationError("paired samples must have equal length")
    n = len(a)
    if n < 2:
        raise ValidationError("need at least two paired values")
    if rho < 0:
        raise ValidationError("rho must be >= 0")
    df = float(n - 1) if df is None else float(df)
    d = [float(x) - float(y) for x, y in zip(a, b)]
    mean = math.fsum(d) / n
    var = math.fsum((x - mean) ** 2 for x in d) / (n - 1)
    if var == 0.0:
        if mean == 0.0:
            return TTestResult(0.0, 1.0, df, rho)
        return TTestResult(math.copysign(math.inf, mean), 0.0, df, rho, degenerate=True)
    t = mean / math.sqrt((1.0 / n + rho) * var)
    return TTestResult(t, t_two_sided_p(t, df), df, rho)
