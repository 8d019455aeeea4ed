"""Functional distance between two response-rate curves.

``L_p(a, b) = (integral_a^b |theta2(t) - theta1(t)|^p dt)^(1/p)``, with the
sup-norm for ``p = inf``. The integrand has kinks where the two curves
cross, so the crossings are located first and each piece between them is
integrated separately by adaptive Simpson quadrature.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .models import ResponseCurve

GRID_POINTS = 512
SUP_GRID_POINTS = 1024
ROOT_TOL = 1e-10
QUAD_TOL = 1e-8


class InvalidSpecError(ValueError):
    pass


class InsufficientReplicatesError(ValueError):
    pass


@dataclass(frozen=True)
class MetricSpec:
    p: float = 1.0
    a: float = 5.0
    b: float = 20.0
    margin_d: float | None = None

    def __post_init__(self):
        if not (self.p >= 1.0):
            raise InvalidSpecError(f"p must be >= 1 or inf, got {self.p}")
        if not (0.0 <= self.a < self.b < math.inf):
            raise InvalidSpecError(f"need 0 <= a < b < inf, got ({self.a}, {self.b})")
        if self.margin_d is not None and not self.margin_d > 0:
            raise InvalidSpecError("margin_d must be positive")

    @property
    def is_sup(self) -> bool:
        return math.isinf(self.p)

    def as_dict(self) -> dict:
        return {
            "p": "inf" if self.is_sup else self.p,
            "a": self.a,
            "b": self.b,
            "margin_d": self.margin_d,
        }


@dataclass(frozen=True)
class MetricResult:
    value: float
    scaled_value: float
    quadrature_abs_error: float
    sign_change_points: tuple = field(default_factory=tuple)
    spec: MetricSpec | None = None

    def as_dict(self) -> dict:
        return {
            "value": self.value,
            "scaled_value": self.scaled_value,
            "quadrature_abs_error": self.quadrature_abs_error,
            "sign_change_points": list(self.sign_change_points),
            **({"spec": self.spec.as_dict()} if self.spec else {}),
        }


def _bisect(fn, lo, hi, flo, tol):
    while hi - lo > tol:
        mid = 0.5 * (lo + hi)
        fm = fn(mid)
        if fm == 0.0:
            return mid
        if (fm > 0) == (flo > 0):
            lo, flo = mid, fm
        else:
            hi = mid
    return 0.5 * (lo + hi)


def find_sign_changes(delta: Callable, a: float, b: float, *,
                      n_grid: int = GRID_POINTS, tol: float = ROOT_TOL) -> list[float]:
    """Roots of ``delta`` strictly inside ``(a, b)`` found on a uniform grid.

    Each bracketed sign change is refined by bisection to ``tol``. Crossings
    narrower than the grid spacing can be missed.
    """
    grid = np.linspace(a, b, n_grid)
    vals = np.asarray(delta(grid), dtype=np.float64)

    def scalar(x):
        return float(np.asarray(delta(np.array([x])))[0])

    roots = []
    for i in range(1, n_grid - 1):
        if vals[i] == 0.0 and vals[i - 1] != 0.0:
            roots.append(float(grid[i]))
    for i in np.flatnonzero(vals[:-1] * vals[1:] < 0):
        roots.append(float(_bisect(scalar, grid[i], grid[i + 1], vals[i], tol)))
    return sorted(r for r in roots if a < r < b)


def adaptive_simpson(fn: Callable, a: float, b: float, tol: float = QUAD_TOL, *,
                     initial_pieces: int = 8, max_depth: int = 40) -> tuple[float, float]:
    """Integrate a vectorized ``fn`` over ``[a, b]``.

    Intervals are refined breadth-first: every round evaluates the quarter
    points of all unconverged intervals in one call. Returns
    ``(integral, error_estimate)``.
    """
    if b <= a:
        return 0.0, 0.0
    edges = np.linspace(a, b, initial_pieces + 1)
    lo, hi = edges[:-1], edges[1:]
    mid = 0.5 * (lo + hi)
    pts = fn(np.concatenate([lo, mid, hi]))
    k = lo.size
    f_lo, f_mid, f_hi = pts[:k], pts[k:2 * k], pts[2 * k:]
    whole = (hi - lo) / 6.0 * (f_lo + 4 * f_mid + f_hi)
    tols = np.full(k, tol / initial_pieces)

    total = 0.0
    err_total = 0.0
    for depth in range(max_depth + 1):
        if lo.size == 0:
            break
        lm = 0.5 * (lo + mid)
        rm = 0.5 * (mid + hi)
        q = fn(np.concatenate([lm, rm]))
        f_lm, f_rm = q[: lo.size], q[lo.size:]
        h = (hi - lo) / 12.0
        left = h * (f_lo + 4 * f_lm + f_mid)
        right = h * (f_mid + 4 * f_rm + f_hi)
        diff = left + right - whole
        done = np.abs(diff) <= 15.0 * tols
        if depth == max_depth:
            done[:] = True
        total += float(np.sum((left + right + diff / 15.0)[done]))
        err_total += float(np.sum(np.abs(diff[done]) / 15.0))
        keep = ~done
        lo, mid, hi = lo[keep], mid[keep], hi[keep]
        f_lo, f_mid, f_hi = f_lo[keep], f_mid[keep], f_hi[keep]
        lm, rm, f_lm, f_rm = lm[keep], rm[keep], f_lm[keep], f_rm[keep]
        left, right, tols = left[keep], right[keep], tols[keep] / 2.0
        lo, mid, hi, f_lo, f_mid, f_hi, whole = (
            np.concatenate([lo, mid]),
            np.concatenate([lm, rm]),
            np.concatenate([mid, hi]),
            np.concatenate([f_lo, f_mid]),
            np.concatenate([f_lm, f_rm]),
            np.concatenate([f_mid, f_hi]),
            np.concatenate([left, right]),
        )
        tols = np.concatenate([tols, tols])
    return total, err_total


def _golden_max(fn, lo, hi, tol=1e-10):
    invphi = (math.sqrt(5) - 1) / 2
    c = hi - invphi * (hi - lo)
    d = lo + invphi * (hi - lo)
    fc, fd = fn(c), fn(d)
    while hi - lo > tol:
        if fc > fd:
            hi, d, fd = d, c, fc
            c = hi - invphi * (hi - lo)
            fc = fn(c)
        else:
            lo, c, fc = c, d, fd
            d = lo + invphi * (hi - lo)
            fd = fn(d)
    x = 0.5 * (lo + hi)
    return x, fn(x)


def sup_abs(delta: Callable, a: float, b: float, n_grid: int = SUP_GRID_POINTS) -> float:
    grid = np.linspace(a, b, n_grid)
    vals = np.abs(np.asarray(delta(grid)))
    i = int(np.argmax(vals))
    best = float(vals[i])
    lo, hi = grid[max(i - 1, 0)], grid[min(i + 1, n_grid - 1)]

    def f(x):
        return float(abs(np.asarray(delta(np.array([x])))[0]))

    _, refined = _golden_max(f, lo, hi)
    return max(best, refined)


def lp_metric(curve1: ResponseCurve, curve2: ResponseCurve, spec: MetricSpec,
              tol: float = QUAD_TOL) -> MetricResult:
    """``L_p(a, b)`` between two curves, plus its length-scaled version."""
    if not isinstance(spec, MetricSpec):
        raise InvalidSpecError("spec must be a MetricSpec")
    a, b, p = spec.a, spec.b, spec.p

    def delta(t):
        t = np.asarray(t, dtype=np.float64)
        return np.asarray(curve2(t)) - np.asarray(curve1(t))

    roots = find_sign_changes(delta, a, b)
    if spec.is_sup:
        value = sup_abs(delta, a, b)
        return MetricResult(value, value, 0.0, tuple(roots), spec)

    def integrand(t):
        return np.abs(delta(t)) ** p

    knots = [a, *roots, b]
    lengths = np.diff(knots)
    integral = 0.0
    err = 0.0
    # fixed left-to-right order keeps the sum reproducible
    for lo, hi, length in zip(knots[:-1], knots[1:], lengths):
        part, part_err = adaptive_simpson(integrand, lo, hi, tol * length / (b - a))
        integral += part
        err += part_err
    value = max(integral, 0.0) ** (1.0 / p)
    # (b - a)^(1/p) so a constant gap c scales to |c| for every p; equals b - a at p = 1
    scaled = value / (b - a) ** (1.0 / p)
    return MetricResult(value, scaled, err, tuple(roots), spec)


def upper_percentile(values, level: float = 0.95) -> float:
    return float(np.quantile(np.asarray(values, dtype=np.float64), level, method="hazen"))


def noninferiority_decision(boot, margin_d: float, level: float = 0.95,
                            min_replicates: int = 200) -> dict:
    """Declare similarity when the one-sided upper bootstrap bound is at most ``margin_d``.

    ``boot`` is a bootstrap result exposing ``replicate_values``.
    """
    values = np.asarray(getattr(boot, "replicate_values", boot), dtype=np.float64)
    if values.size < min_replicates:
        raise InsufficientReplicatesError(
            f"need at least {min_replicates} replicates, got {values.size}"
        )
    if not margin_d > 0:
        raise InvalidSpecError("margin_d must be positive")
    bound = upper_percentile(values, level)
    reject = bound <= margin_d
    return {
        "upper_bound": bound,
        "level": level,
        "margin_d": margin_d,
        "reject_h0": bool(reject),
        "decision": "similar" if reject else "not shown similar",
    }
