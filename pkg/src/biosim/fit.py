"""Curve estimation from binomial time series.

Parametric curves are fitted by maximum likelihood with a multi-start
Nelder-Mead search on unconstrained coordinates. Bernstein curves are fitted
by constrained weighted least squares on Anscombe-corrected proportions, and
their degree is chosen by a Kolmogorov-Smirnov criterion on standardized
residuals.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np
from scipy.special import expit, logit, ndtr, xlog1py, xlogy

from .models import (
    CONSTRAINT_MODES,
    ORIGIN_AUGMENTED,
    RELAXED,
    STRICT,
    BernsteinCurve,
    ExpDecayParams,
    LogLogisticParams,
    ResponseCurve,
    bernstein_design,
)
from ._simplex import nelder_mead_batch
from .qp import QPError, solve_qp

EXP_DECAY = "exp-decay"
LOG_LOGISTIC = "log-logistic"
PARAMETRIC_KINDS = (EXP_DECAY, LOG_LOGISTIC)


class FitError(RuntimeError):
    pass


class DegenerateDataError(FitError):
    pass


class ConvergenceError(FitError):
    pass


class InsufficientDataError(FitError, ValueError):
    pass


@dataclass(frozen=True)
class TrialSeries:
    """Responder counts for one arm of ``n`` subjects at increasing times."""

    arm_id: str
    n: int
    times: tuple
    counts: tuple

    def __post_init__(self):
        t = np.asarray(self.times, dtype=np.float64)
        y = np.asarray(self.counts)
        object.__setattr__(self, "times", tuple(float(v) for v in t))
        object.__setattr__(self, "counts", tuple(int(v) for v in y))
        if int(self.n) != self.n or self.n < 1:
            raise ValueError(f"arm size must be a positive integer, got {self.n}")
        if t.shape != y.shape or t.ndim != 1:
            raise ValueError("times and counts must be 1-d and of equal length")
        if np.any(y != np.round(y)) or np.any(y < 0) or np.any(y > self.n):
            raise ValueError("counts must be integers in [0, n]")
        if np.any(t < 0) or np.any(np.diff(t) <= 0):
            raise ValueError("times must be non-negative and strictly increasing")

    @classmethod
    def from_pairs(cls, arm_id, n, pairs):
        pairs = list(pairs)
        return cls(arm_id, n, tuple(p[0] for p in pairs), tuple(p[1] for p in pairs))

    @property
    def t(self) -> np.ndarray:
        return np.asarray(self.times)

    @property
    def y(self) -> np.ndarray:
        return np.asarray(self.counts, dtype=np.float64)

    def __len__(self):
        return len(self.times)

    def with_counts(self, counts) -> "TrialSeries":
        return TrialSeries(self.arm_id, self.n, self.times, tuple(int(c) for c in counts))


# ---------------------------------------------------------------------------
# Likelihood and parametric MLE
# ---------------------------------------------------------------------------


def _loglik_values(y, n, theta):
    # xlogy/xlog1py give 0 * log(0) = 0, so boundary counts only use their live term
    with np.errstate(divide="ignore", invalid="ignore"):
        return xlogy(y, theta) + xlog1py(n - y, -theta)


def loglik(series: TrialSeries, curve: ResponseCurve) -> float:
    """Binomial log-likelihood (without the binomial coefficients).

    Returns ``-inf`` when the curve puts zero probability on an observation.
    """
    theta = np.asarray(curve(series.t), dtype=np.float64)
    total = float(np.sum(_loglik_values(series.y, series.n, theta)))
    return -math.inf if math.isnan(total) else total


@dataclass(frozen=True)
class MLEOptions:
    """Multi-start settings for :func:`fit_parametric_mle`.

    A ``grid_size`` x ``grid_size`` grid of starting points is scored and
    Nelder-Mead is run from the ``n_polish`` best of them, then restarted
    once from the incumbent. ``warm_start`` (unconstrained coordinates) adds
    one more starting point ahead of the grid.
    """

    grid_size: int = 5
    n_polish: int = 2
    restart_at_best: bool = True
    warm_start: tuple | None = None
    xatol: float = 1e-10
    fatol: float = 1e-10
    max_iter: int = 2000
    stability_tol: float = 1e-8
    compute_se: bool = True


@dataclass(frozen=True)
class ParametricFit:
    model_kind: str
    params: ResponseCurve
    loglik: float
    converged: bool
    n_restarts_used: int
    se: tuple = (math.nan, math.nan)

    @property
    def curve(self) -> ResponseCurve:
        return self.params

    def as_dict(self) -> dict:
        return {
            "model_kind": self.model_kind,
            "alpha": self.params.alpha,
            "beta": self.params.beta,
            "se_alpha": self.se[0],
            "se_beta": self.se[1],
            "loglik": self.loglik,
            "converged": self.converged,
            "n_restarts_used": self.n_restarts_used,
        }


def _family(model_kind):
    """Return ``(theta(u, v, t), to_params(u, v), start_grid)``."""
    if model_kind == EXP_DECAY:
        def theta(u, v, t):
            return expit(u)[..., None] * -np.expm1(-np.exp(v)[..., None] * t)

        def to_params(u, v):
            return ExpDecayParams(float(min(expit(u), 1.0)), float(np.exp(v)))

        def grid(k):
            return logit(np.linspace(0.1, 0.9, k)), np.log(np.geomspace(0.01, 2.0, k))

    elif model_kind == LOG_LOGISTIC:
        def theta(u, v, t):
            with np.errstate(divide="ignore"):
                logt = np.where(t > 0, np.log(np.where(t > 0, t, 1.0)), -np.inf)
            return expit(u[..., None] + np.exp(v)[..., None] * logt)

        def to_params(u, v):
            return LogLogisticParams(float(u), float(np.exp(v)))

        def grid(k):
            return np.linspace(-4.0, 2.0, k), np.log(np.geomspace(0.1, 3.0, k))

    else:
        raise ValueError(f"unknown parametric model {model_kind!r}")
    return theta, to_params, grid


def _observed_info_se(series, model_kind, params) -> tuple:
    """Standard errors of (alpha, beta) from a finite-difference Hessian."""
    if model_kind == EXP_DECAY:
        def f(p):
            a, b = p
            if not (0 < a <= 1 and b > 0):
                return -math.inf
            return loglik(series, ExpDecayParams(a, b))
    else:
        def f(p):
            a, b = p
            if b < 0:
                return -math.inf
            return loglik(series, LogLogisticParams(a, b))

    x = np.array([params.alpha, params.beta])
    h = 1e-4 * np.maximum(np.abs(x), 1e-2)
    if model_kind == EXP_DECAY:
        # keep the stencil inside alpha <= 1 by using a one-sided shift
        x = x.copy()
        x[0] = min(x[0], 1.0 - 2 * h[0])
    hess = np.empty((2, 2))
    f0 = f(x)
    for i in range(2):
        for j in range(i, 2):
            ei = np.eye(2)[i] * h[i]
            ej = np.eye(2)[j] * h[j]
            if i == j:
                val = (f(x + ei) - 2 * f0 + f(x - ei)) / h[i] ** 2
            else:
                val = (f(x + ei + ej) - f(x + ei - ej) - f(x - ei + ej) + f(x - ei - ej)) / (
                    4 * h[i] * h[j]
                )
            hess[i, j] = hess[j, i] = val
    try:
        cov = np.linalg.inv(-hess)
    except np.linalg.LinAlgError:
        return (math.nan, math.nan)
    d = np.diag(cov)
    return tuple(float(math.sqrt(v)) if v > 0 and np.isfinite(v) else math.nan for v in d)


def _batch_negll(model_kind, t_live, y_live, n):
    """Vectorized negative log-likelihood ``fun(Z, rows)`` on unconstrained coordinates."""
    ny_live = n - y_live
    log_t = np.log(t_live) if model_kind == LOG_LOGISTIC else None

    def fun(Z, rows):
        u, v = Z[:, 0], np.minimum(Z[:, 1], 700.0)
        if model_kind == EXP_DECAY:
            th = expit(u)[:, None] * -np.expm1(-np.exp(v)[:, None] * t_live)
        else:
            th = expit(u[:, None] + np.exp(v)[:, None] * log_t)
        with np.errstate(divide="ignore", invalid="ignore"):
            ll = np.sum(xlogy(y_live[rows], th) + xlog1py(ny_live[rows], -th), axis=1)
        out = -ll
        out[~np.isfinite(out)] = 1e300
        return out

    return fun


def fit_parametric_mle_batch(times, counts, n: int, model_kind: str = EXP_DECAY,
                             options: MLEOptions | None = None, arm_id: str = "arm"):
    """Fit the same parametric family to many count vectors observed at ``times``.

    ``counts`` has shape ``(B, N)``. Returns ``(fits, errors)``: ``fits[i]``
    is a :class:`ParametricFit` or ``None``, and ``errors`` maps the index of
    every failed row to a :class:`FitError`.
    """
    options = options or MLEOptions()
    t = np.asarray(times, dtype=np.float64)
    Y = np.atleast_2d(np.asarray(counts, dtype=np.float64))
    B = Y.shape[0]
    if t.size < 3:
        raise InsufficientDataError("need at least 3 observations")
    _, to_params, grid = _family(model_kind)

    live = t > 0
    errors: dict[int, FitError] = {}
    for i in np.flatnonzero(~np.any(Y > 0, axis=1)):
        errors[int(i)] = DegenerateDataError(f"arm {arm_id!r} has no responders")
    # every subject responding at every positive time puts the MLE on the boundary
    for i in np.flatnonzero(np.all(Y[:, live] >= n, axis=1)):
        errors.setdefault(int(i), DegenerateDataError(f"arm {arm_id!r} has all subjects responding"))
    for i in np.flatnonzero(np.any(Y[:, ~live] > 0, axis=1)):
        errors.setdefault(int(i), DegenerateDataError(f"arm {arm_id!r} has responders at time 0"))
    ok_rows = np.array([i for i in range(B) if i not in errors], dtype=int)
    fits: list[ParametricFit | None] = [None] * B
    if ok_rows.size == 0:
        return fits, errors

    t_live = t[live]
    y_live = Y[np.ix_(ok_rows, live)]
    fun = _batch_negll(model_kind, t_live, y_live, float(n))
    R = ok_rows.size
    local = np.arange(R)

    gu, gv = grid(options.grid_size)
    G = np.stack(np.meshgrid(gu, gv, indexing="ij"), axis=-1).reshape(-1, 2)
    scores = np.stack([fun(np.repeat(g[None], R, axis=0), local) for g in G], axis=1)
    ranked = np.argsort(scores, axis=1, kind="stable")

    starts = []
    if options.warm_start is not None:
        ws = np.asarray(options.warm_start, dtype=np.float64)
        starts.append(np.broadcast_to(ws, (R, 2)).copy())
    for k in range(min(options.n_polish, G.shape[0])):
        starts.append(G[ranked[:, k]])

    nm = dict(xatol=options.xatol, fatol=options.fatol, max_iter=options.max_iter)
    runs_x, runs_f, runs_ok = [], [], []
    for x0 in starts:
        x, f, _, ok = nelder_mead_batch(fun, x0, **nm)
        runs_x.append(x)
        runs_f.append(f)
        runs_ok.append(ok)
    if options.restart_at_best:
        # a fresh simplex around the incumbent; a genuine optimum reproduces itself
        F = np.stack(runs_f, axis=1)
        X = np.stack(runs_x, axis=1)
        x, f, _, ok = nelder_mead_batch(fun, X[local, np.argmin(F, axis=1)], **nm)
        runs_x.append(x)
        runs_f.append(f)
        runs_ok.append(ok)

    F = np.stack(runs_f, axis=1)
    X = np.stack(runs_x, axis=1)
    OK = np.stack(runs_ok, axis=1)
    finite = F < 1e299
    order = np.argsort(F, axis=1, kind="stable")
    for r, row in enumerate(ok_rows):
        n_used = int(finite[r].sum())
        if n_used == 0:
            errors[int(row)] = ConvergenceError(
                f"no restart produced a finite likelihood for {arm_id!r}"
            )
            continue
        best, second = order[r, 0], order[r, 1] if F.shape[1] > 1 else None
        best_f = F[r, best]
        if second is not None and finite[r, second]:
            converged = abs(F[r, second] - best_f) <= options.stability_tol * max(1.0, abs(best_f))
        else:
            converged = bool(OK[r, best])
        try:
            params = to_params(*X[r, best])
        except ValueError as exc:
            errors[int(row)] = ConvergenceError(f"optimum left the parameter space: {exc}")
            continue
        fits[row] = ParametricFit(
            model_kind=model_kind,
            params=params,
            loglik=-float(best_f),
            converged=bool(converged),
            n_restarts_used=n_used,
        )
    return fits, errors


def fit_parametric_mle(series: TrialSeries, model_kind: str = EXP_DECAY,
                       options: MLEOptions | None = None) -> ParametricFit:
    """Maximum-likelihood fit of an exponential-decay or log-logistic curve.

    The search runs on unconstrained coordinates (``logit alpha, log beta``
    for exponential decay, ``alpha, log beta`` for log-logistic).

    Raises
    ------
    InsufficientDataError
        Fewer than three observations.
    DegenerateDataError
        No responders at any time point.
    ConvergenceError
        Every restart failed to produce a finite likelihood.
    """
    options = options or MLEOptions()
    if len(series) < 3:
        raise InsufficientDataError("need at least 3 observations")
    fits, errors = fit_parametric_mle_batch(
        series.t, series.y[None, :], series.n, model_kind, options, series.arm_id
    )
    if errors:
        raise errors[0]
    fit = fits[0]
    se = _observed_info_se(series, model_kind, fit.params) if options.compute_se else fit.se
    return replace(fit, loglik=loglik(series, fit.params), se=se)


# ---------------------------------------------------------------------------
# Bernstein weighted least squares
# ---------------------------------------------------------------------------


def anscombe_proportions(series: TrialSeries) -> np.ndarray:
    """Empirical proportions with ``(y + 3/8) / (n + 3/4)`` at y = 0 and its mirror at y = n."""
    y, n = series.y, float(series.n)
    p = y / n
    corr = 0.375 / (n + 0.75)
    p = np.where(y == 0, corr, p)
    p = np.where(y == n, 1.0 - corr, p)
    return p


@dataclass(frozen=True)
class NonparametricFit:
    curve: BernsteinCurve
    constraint_mode: str
    objective: float
    ks_pvalue: float = math.nan
    series: TrialSeries | None = field(default=None, compare=False, repr=False)

    def as_dict(self) -> dict:
        out = self.curve.as_dict()
        out.update(
            constraint_mode=self.constraint_mode,
            objective=self.objective,
            ks_pvalue=self.ks_pvalue,
        )
        return out


def augment_origin(series: TrialSeries) -> TrialSeries:
    """Prepend a ``(0, 0)`` pseudo-observation unless time 0 is already observed."""
    if series.times[0] == 0.0:
        return series
    return TrialSeries(series.arm_id, series.n, (0.0,) + series.times, (0,) + series.counts)


def shape_constraints(m: int, constraint_mode: str):
    """Constraint rows ``R gamma >= b`` for the given shape mode."""
    if constraint_mode in (STRICT, ORIGIN_AUGMENTED):
        R = np.vstack([np.eye(m), -np.ones((1, m))])
        b = np.concatenate([np.zeros(m), [-1.0]])
    elif constraint_mode == RELAXED:
        free = m // 3
        L = np.tril(np.ones((m, m)))
        R = np.vstack([np.eye(m)[free:], L, -L])
        b = np.concatenate([np.zeros(m - free), np.zeros(m), -np.ones(m)])
    else:
        raise ValueError(f"unknown constraint mode {constraint_mode!r}")
    return R, b


def fit_bernstein_wls(series: TrialSeries, m: int, constraint_mode: str = STRICT,
                      t_min: float = 0.0, t_max: float | None = None) -> NonparametricFit:
    if constraint_mode not in CONSTRAINT_MODES:
        raise ValueError(f"unknown constraint mode {constraint_mode!r}")
    if m < 2:
        raise ValueError("degree must be at least 2")
    if len(series) < 3:
        raise InsufficientDataError("need at least 3 observations")
    data = augment_origin(series) if constraint_mode == ORIGIN_AUGMENTED else series
    t_max = float(data.times[-1]) if t_max is None else float(t_max)
    if t_max < data.times[-1]:
        raise ValueError("t_max must cover the last observation time")
    if not (t_min == 0.0 or t_min < data.times[0]):
        raise ValueError("t_min must precede the first observation")

    p_hat = anscombe_proportions(data)
    w = data.n / (p_hat * (1.0 - p_hat))
    X = bernstein_design((data.t - t_min) / (t_max - t_min), m)
    X[data.t <= t_min] = 0.0

    H = X.T @ (w[:, None] * X)
    f = X.T @ (w * p_hat)
    norm = float(np.trace(H)) / m or 1.0
    R, b = shape_constraints(m, constraint_mode)
    sol = solve_qp(H / norm, f / norm, R, b)
    gamma = sol.x.copy()
    # project away sub-tolerance infeasibility left by the solver
    if constraint_mode != RELAXED:
        gamma = np.maximum(gamma, 0.0)
        total = gamma.sum()
        if total > 1.0:
            gamma /= total
    resid = p_hat - X @ gamma
    curve = BernsteinCurve(m, tuple(gamma), float(t_min), t_max, constraint_mode)
    return NonparametricFit(curve, constraint_mode, float(np.sum(w * resid**2)), series=series)


# ---------------------------------------------------------------------------
# Kolmogorov-Smirnov degree selection
# ---------------------------------------------------------------------------


def kolmogorov_sf(lam: float) -> float:
    """Survival function of the limiting Kolmogorov distribution."""
    if lam <= 0:
        return 1.0
    if lam < 1.0:
        # the alternating series converges slowly here; use the theta-function form
        s = sum(
            math.exp(-((2 * k - 1) ** 2) * math.pi**2 / (8 * lam * lam)) for k in range(1, 8)
        )
        return min(1.0, max(0.0, 1.0 - math.sqrt(2 * math.pi) / lam * s))
    total = 0.0
    for k in range(1, 101):
        term = math.exp(-2.0 * k * k * lam * lam)
        total += term if k % 2 else -term
        if term < 1e-17:
            break
    return min(1.0, max(0.0, 2.0 * total))


def ks_statistic(z: Sequence[float]) -> float:
    z = np.sort(np.asarray(z, dtype=np.float64))
    N = z.size
    cdf = ndtr(z)
    i = np.arange(1, N + 1)
    return float(max(np.max(i / N - cdf), np.max(cdf - (i - 1) / N)))


def ks_pvalue(z: Sequence[float]) -> float:
    """Two-sided one-sample KS p-value against N(0, 1), asymptotic with small-N adjustment."""
    z = np.asarray(z, dtype=np.float64)
    if z.size < 3:
        raise ValueError("need at least 3 residuals")
    N = z.size
    d = ks_statistic(z)
    rn = math.sqrt(N)
    return kolmogorov_sf((rn + 0.12 + 0.11 / rn) * d)


def candidate_degrees(N: int) -> range:
    return range(2, math.ceil(N / math.log(N)) + 1)


def standardized_residuals(series: TrialSeries, fit: NonparametricFit,
                           clip: float = 1e-6) -> np.ndarray:
    fitted = np.clip(np.asarray(fit.curve(series.t)), clip, 1.0 - clip)
    p_hat = anscombe_proportions(series)
    return math.sqrt(series.n) * (p_hat - fitted) / np.sqrt(fitted * (1.0 - fitted))


@dataclass(frozen=True)
class DegreeSelection:
    candidates: tuple
    chosen_m: int | None
    alpha_threshold: float
    fits: dict = field(default_factory=dict, compare=False, repr=False)
    failures: dict = field(default_factory=dict, compare=False)

    @property
    def chosen_fit(self) -> NonparametricFit | None:
        return None if self.chosen_m is None else self.fits[self.chosen_m]

    def best_by_pvalue(self) -> int:
        """Candidate with the highest p-value, preferring the larger degree on ties."""
        if not self.candidates:
            raise FitError("no candidate degree could be fitted")
        return max(self.candidates, key=lambda mp: (mp[1], mp[0]))[0]

    def as_dict(self) -> dict:
        return {
            "candidates": [{"m": m, "ks_pvalue": p} for m, p in self.candidates],
            "chosen_m": self.chosen_m,
            "alpha_threshold": self.alpha_threshold,
            "failures": {str(k): v for k, v in self.failures.items()},
        }


def choose_degree(candidates, alpha_threshold) -> int | None:
    for m, p in candidates:
        if p >= alpha_threshold:
            return m
    return None


def select_degree_ks(series: TrialSeries, alpha_threshold: float = 0.2,
                     constraint_mode: str = STRICT, t_min: float = 0.0,
                     t_max: float | None = None, max_workers: int | None = None
                     ) -> DegreeSelection:
    """Smallest Bernstein degree whose standardized residuals pass a KS check.

    Degrees ``m = 2, ..., ceil(N / ln N)`` are fitted; the first whose KS
    p-value is at least ``alpha_threshold`` is chosen. A candidate whose fit
    raises is recorded in ``failures`` and skipped.
    """
    if not 0 < alpha_threshold < 1:
        raise ValueError("alpha_threshold must lie in (0, 1)")
    N = len(series)
    if N < 4:
        raise InsufficientDataError("need at least 4 observations for degree selection")

    def one(m):
        try:
            fit = fit_bernstein_wls(series, m, constraint_mode, t_min, t_max)
        except (QPError, FitError, ValueError) as exc:
            return m, None, f"{type(exc).__name__}: {exc}"
        z = standardized_residuals(series, fit)
        p = ks_pvalue(z)
        return m, NonparametricFit(fit.curve, fit.constraint_mode, fit.objective, p, series), None

    degrees = list(candidate_degrees(N))
    if max_workers and max_workers > 1:
        with ThreadPoolExecutor(max_workers) as pool:
            outcomes = list(pool.map(one, degrees))
    else:
        outcomes = [one(m) for m in degrees]

    fits, failures, cands = {}, {}, []
    for m, fit, err in outcomes:
        if fit is None:
            failures[m] = err
        else:
            fits[m] = fit
            cands.append((m, fit.ks_pvalue))
    return DegreeSelection(
        tuple(cands), choose_degree(cands, alpha_threshold), alpha_threshold, fits, failures
    )
