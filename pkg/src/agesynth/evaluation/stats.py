"""Group statistics: one-way ANOVA, relative volume change, Jacobian-map error."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np


class StatsError(ValueError):
    pass


class DegenerateError(StatsError):
    pass


_CF_EPS = 1e-16
_CF_TINY = 1e-300
_CF_MAX_ITER = 100_000


def _beta_cf(a: float, b: float, x: float) -> float:
    """Continued fraction for the incomplete beta function (modified Lentz)."""
    qab, qap, qam = a + b, a + 1.0, a - 1.0
    c, d = 1.0, 1.0 - qab * x / qap
    d = 1.0 / (d if abs(d) > _CF_TINY else _CF_TINY)
    h = d
    for m in range(1, _CF_MAX_ITER + 1):
        m2 = 2 * m
        aa = m * (b - m) * x / ((qam + m2) * (a + m2))
        d = 1.0 + aa * d
        d = 1.0 / (d if abs(d) > _CF_TINY else _CF_TINY)
        c = 1.0 + aa / c
        c = c if abs(c) > _CF_TINY else _CF_TINY
        h *= d * c
        aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2))
        d = 1.0 + aa * d
        d = 1.0 / (d if abs(d) > _CF_TINY else _CF_TINY)
        c = 1.0 + aa / c
        c = c if abs(c) > _CF_TINY else _CF_TINY
        delta = d * c
        h *= delta
        if abs(delta - 1.0) < _CF_EPS:
            return h
    raise ArithmeticError(f"incomplete beta continued fraction did not converge (a={a}, b={b}, x={x})")


def regularized_incomplete_beta(a: float, b: float, x: float) -> float:
    if a <= 0 or b <= 0:
        raise StatsError("beta parameters must be positive")
    if not 0.0 <= x <= 1.0:
        raise StatsError("x must lie in [0, 1]")
    if x == 0.0 or x == 1.0:
        return x
    log_front = math.lgamma(a + b) - math.lgamma(a) - math.lgamma(b) + a * math.log(x) + b * math.log1p(-x)
    front = math.exp(log_front)
    if x < (a + 1.0) / (a + b + 2.0):
        return front * _beta_cf(a, b, x) / a
    return 1.0 - front * _beta_cf(b, a, 1.0 - x) / b


def f_survival(f: float, dfn: float, dfd: float) -> float:
    """P(F > f) for an F(dfn, dfd) variable."""
    if f <= 0:
        return 1.0
    return regularized_incomplete_beta(dfd / 2.0, dfn / 2.0, dfd / (dfd + dfn * f))


@dataclass(frozen=True)
class AnovaResult:
    F: float
    p: float
    df_between: int
    df_within: int

    def __iter__(self):
        return iter((self.F, self.p))


def one_way_anova(groups) -> AnovaResult:
    groups = [np.asarray(g, dtype=np.float64).ravel() for g in groups]
    if len(groups) < 2:
        raise StatsError("one-way ANOVA needs at least 2 groups")
    if any(len(g) < 2 for g in groups):
        raise StatsError("every group needs at least 2 observations")
    n = sum(len(g) for g in groups)
    k = len(groups)
    grand = np.concatenate(groups).mean()
    ss_between = sum(len(g) * (g.mean() - grand) ** 2 for g in groups)
    ss_within = sum(((g - g.mean()) ** 2).sum() for g in groups)
    if ss_within == 0 or ss_within < 1e-24 * (ss_between + ss_within):
        raise DegenerateError("zero within-group variance")
    df_b, df_w = k - 1, n - k
    F = (ss_between / df_b) / (ss_within / df_w)
    return AnovaResult(float(F), f_survival(F, df_b, df_w), df_b, df_w)


def relative_change(v_base: float, v_x: float) -> float:
    """(v_x - v_base) / v_base; atrophy gives a negative value."""
    if not v_base > 0:
        raise StatsError(f"baseline volume must be > 0, got {v_base}")
    return (v_x - v_base) / v_base


def jacobian_relative_error(j_real, j_syn) -> float:
    """||j_real - j_syn||_1 / ||j_real||_1 over all voxels."""
    j_real = np.asarray(j_real, dtype=np.float64)
    j_syn = np.asarray(j_syn, dtype=np.float64)
    if j_real.shape != j_syn.shape:
        raise StatsError(f"Jacobian maps differ in shape: {j_real.shape} vs {j_syn.shape}")
    if not (np.isfinite(j_real).all() and np.isfinite(j_syn).all()):
        raise StatsError("Jacobian maps must be finite")
    ref = np.abs(j_real).sum()
    if ref == 0:
        raise DegenerateError("reference Jacobian map has zero L1 norm")
    return float(np.abs(j_real - j_syn).sum() / ref)
