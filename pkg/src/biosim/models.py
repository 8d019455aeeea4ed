"""Response-rate curve families.

Three families are supported:

* exponential decay, ``alpha * (1 - exp(-beta * t))``
* log-logistic, ``1 / (1 + exp(-alpha - beta * log t))``
* a three-piece Bernstein curve on a window ``[t_min, t_max]`` with a
  rational tail beyond ``t_max``

Every curve is an immutable object with ``__call__`` accepting a scalar or an
array of times and returning rates in ``[0, 1]``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Union

import numpy as np
from numpy.typing import ArrayLike, NDArray
from scipy.special import betainc, expit

# round-off allowance before a rate outside [0, 1] is treated as a bug
ROUNDOFF = 1e-12


class InvalidParameterError(ValueError):
    """Curve parameters violate the family's constraints."""


class InvariantError(ArithmeticError):
    """An evaluated rate left [0, 1] by more than round-off."""


def _clamp_unit(values: NDArray[np.floating]) -> NDArray[np.floating]:
    if values.size and (values.min() < -ROUNDOFF or values.max() > 1 + ROUNDOFF):
        raise InvariantError(
            f"rate outside [0, 1]: range [{values.min():.3g}, {values.max():.3g}]"
        )
    return np.clip(values, 0.0, 1.0)


def _as_times(t: ArrayLike) -> NDArray[np.floating]:
    t = np.asarray(t, dtype=np.float64)
    if np.any(t < 0) or np.any(np.isnan(t)):
        raise ValueError("times must be non-negative")
    return t


def _scalar_or_array(out: NDArray[np.floating], t: ArrayLike):
    return float(out) if np.ndim(t) == 0 else out


# ---------------------------------------------------------------------------
# Parametric families
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ExpDecayParams:
    """Exponential decay curve with asymptote ``alpha`` and rate ``beta``."""

    alpha: float
    beta: float

    kind = "exp-decay"

    def __post_init__(self):
        if not (0.0 < self.alpha <= 1.0) or not np.isfinite(self.alpha):
            raise InvalidParameterError(f"alpha must lie in (0, 1], got {self.alpha}")
        if not (self.beta > 0.0) or not np.isfinite(self.beta):
            raise InvalidParameterError(f"beta must be positive, got {self.beta}")

    def __call__(self, t: ArrayLike):
        return exp_decay_eval(self, t)

    def as_dict(self) -> dict:
        return {"kind": self.kind, "alpha": self.alpha, "beta": self.beta}


@dataclass(frozen=True)
class LogLogisticParams:
    """Log-logistic curve; ``alpha`` is the location and ``beta`` the slope."""

    alpha: float
    beta: float

    kind = "log-logistic"

    def __post_init__(self):
        if not np.isfinite(self.alpha):
            raise InvalidParameterError(f"alpha must be finite, got {self.alpha}")
        if not (self.beta >= 0.0) or not np.isfinite(self.beta):
            raise InvalidParameterError(f"beta must be non-negative, got {self.beta}")

    def __call__(self, t: ArrayLike):
        return log_logistic_eval(self, t)

    def as_dict(self) -> dict:
        return {"kind": self.kind, "alpha": self.alpha, "beta": self.beta}


def exp_decay_eval(params: ExpDecayParams, t: ArrayLike):
    tt = _as_times(t)
    out = params.alpha * -np.expm1(-params.beta * tt)
    return _scalar_or_array(_clamp_unit(np.asarray(out)), t)


def log_logistic_eval(params: LogLogisticParams, t: ArrayLike):
    """Evaluate the log-logistic curve.

    At ``t = 0`` the value is the limit of the formula: 0 when ``beta > 0``
    and the constant ``expit(alpha)`` when ``beta == 0``.
    """
    tt = _as_times(t)
    if params.beta == 0.0:
        out = np.full_like(tt, expit(params.alpha))
    else:
        with np.errstate(divide="ignore"):
            logt = np.where(tt > 0, np.log(np.where(tt > 0, tt, 1.0)), -np.inf)
        out = expit(params.alpha + params.beta * logt)
    return _scalar_or_array(_clamp_unit(np.asarray(out)), t)


# ---------------------------------------------------------------------------
# Bernstein curves
# ---------------------------------------------------------------------------


def bernstein_basis_F(x: ArrayLike, l: int, M: int):
    """Beta(l, M - l + 1) CDF at ``x``, i.e. the tail sum of Bernstein weights.

    ``F_M(x; l) = sum_{k=l}^{M} C(M, k) x^k (1 - x)^(M - k)``.
    """
    if not (1 <= l <= M):
        raise IndexError(f"basis index {l} outside 1..{M}")
    xx = np.asarray(x, dtype=np.float64)
    if np.any(xx < 0) or np.any(xx > 1):
        raise ValueError("x must lie in [0, 1]")
    out = betainc(l, M - l + 1, xx)
    return float(out) if np.ndim(x) == 0 else out


def bernstein_design(x: ArrayLike, M: int) -> NDArray[np.floating]:
    """Matrix of basis values, shape ``(len(x), M)``; column ``l-1`` is F_M(x; l)."""
    xx = np.clip(np.atleast_1d(np.asarray(x, dtype=np.float64)), 0.0, 1.0)
    ls = np.arange(1, M + 1, dtype=np.float64)
    return betainc(ls[None, :], M - ls[None, :] + 1.0, xx[:, None])


def eta_from_gamma(gamma: ArrayLike) -> NDArray[np.floating]:
    return np.cumsum(np.asarray(gamma, dtype=np.float64))


def gamma_from_eta(eta: ArrayLike) -> NDArray[np.floating]:
    return np.diff(np.asarray(eta, dtype=np.float64), prepend=0.0)


STRICT = "strict"
RELAXED = "relaxed"
ORIGIN_AUGMENTED = "origin-augmented"
CONSTRAINT_MODES = (STRICT, RELAXED, ORIGIN_AUGMENTED)

# feasibility slack when validating fitted coefficients
_FEAS_TOL = 1e-8


@dataclass(frozen=True)
class BernsteinCurve:
    """Bernstein curve of degree ``degree_m`` parameterized by increments ``gamma``.

    ``mode`` selects which shape constraints are validated: ``strict`` (and
    ``origin-augmented``, which shares its constraints) require every
    increment to be non-negative; ``relaxed`` frees the first ``m // 3``
    increments while keeping every partial sum inside ``[0, 1]``.
    """

    degree_m: int
    gamma: tuple
    t_min: float
    t_max: float
    mode: str = STRICT

    kind = "bernstein"

    def __post_init__(self):
        g = np.asarray(self.gamma, dtype=np.float64)
        object.__setattr__(self, "gamma", tuple(float(v) for v in g))
        if self.degree_m < 1 or g.shape != (self.degree_m,):
            raise InvalidParameterError(
                f"need {self.degree_m} coefficients, got shape {g.shape}"
            )
        if not (0.0 <= self.t_min < self.t_max < np.inf):
            raise InvalidParameterError("need 0 <= t_min < t_max < inf")
        if self.mode not in CONSTRAINT_MODES:
            raise InvalidParameterError(f"unknown constraint mode {self.mode!r}")
        eta = np.cumsum(g)
        tol = _FEAS_TOL
        if self.mode == RELAXED:
            free = self.degree_m // 3
            ok = (
                np.all(g[free:] >= -tol)
                and np.all(eta >= -tol)
                and np.all(eta <= 1 + tol)
            )
        else:
            ok = np.all(g >= -tol) and eta[-1] <= 1 + tol
        if not ok:
            raise InvalidParameterError(
                f"coefficients violate {self.mode} constraints: gamma={g}"
            )

    @property
    def eta(self) -> NDArray[np.floating]:
        return eta_from_gamma(self.gamma)

    def __call__(self, t: ArrayLike):
        return bernstein_eval(self, t)

    def as_dict(self) -> dict:
        return {
            "kind": self.kind,
            "degree_m": self.degree_m,
            "gamma": list(self.gamma),
            "eta": self.eta.tolist(),
            "t_min": self.t_min,
            "t_max": self.t_max,
            "mode": self.mode,
        }


def bernstein_eval(curve: BernsteinCurve, t: ArrayLike):
    tt = _as_times(t)
    flat = np.atleast_1d(tt).ravel()
    out = np.zeros_like(flat)
    gamma = np.asarray(curve.gamma)
    eta_m = float(gamma.sum())
    span = curve.t_max - curve.t_min

    mid = (flat > curve.t_min) & (flat < curve.t_max)
    if mid.any():
        x = (flat[mid] - curve.t_min) / span
        out[mid] = bernstein_design(x, curve.degree_m) @ gamma
    tail = flat >= curve.t_max
    if tail.any():
        s = flat[tail] - curve.t_max
        out[tail] = eta_m + (1.0 - eta_m) * s / (s + 1.0)
    out = _clamp_unit(out).reshape(np.shape(tt))
    return _scalar_or_array(out, t)


# ---------------------------------------------------------------------------
# Generic curves and differences
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ClosedFormCurve:
    """Arbitrary rate function, used for simulation truths and tests."""

    func: Callable[[NDArray[np.floating]], NDArray[np.floating]]
    label: str = "closed-form"

    kind = "closed-form"

    def __call__(self, t: ArrayLike):
        tt = _as_times(t)
        out = _clamp_unit(np.asarray(self.func(tt), dtype=np.float64) * np.ones_like(tt))
        return _scalar_or_array(out, t)

    def as_dict(self) -> dict:
        return {"kind": self.kind, "label": self.label}


ResponseCurve = Union[ExpDecayParams, LogLogisticParams, BernsteinCurve, ClosedFormCurve]


def evaluate(curve: ResponseCurve, t: ArrayLike):
    return curve(t)


def delta_eval(curve1: ResponseCurve, curve2: ResponseCurve, t: ArrayLike):
    """Pointwise difference ``curve2(t) - curve1(t)``."""
    d = np.asarray(curve2(t)) - np.asarray(curve1(t))
    return float(d) if np.ndim(t) == 0 else d


def curve_from_dict(d: dict) -> ResponseCurve:
    kind = d["kind"]
    if kind == ExpDecayParams.kind:
        return ExpDecayParams(d["alpha"], d["beta"])
    if kind == LogLogisticParams.kind:
        return LogLogisticParams(d["alpha"], d["beta"])
    if kind == BernsteinCurve.kind:
        return BernsteinCurve(
            d["degree_m"], tuple(d["gamma"]), d["t_min"], d["t_max"], d.get("mode", STRICT)
        )
    raise InvalidParameterError(f"cannot rebuild curve of kind {kind!r}")
