"""Bootstrap sampling distributions of the functional metric.

Replicate ``i`` draws from its own generator seeded by ``(seed, i)``, so the
replicate values do not depend on execution order.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .fit import (
    FitError,
    MLEOptions,
    NonparametricFit,
    ParametricFit,
    TrialSeries,
    fit_bernstein_wls,
    fit_parametric_mle_batch,
    select_degree_ks,
)
from .metric import MetricSpec, lp_metric
from .qp import QPError

MIN_REPLICATES = 200
MAX_FAIL_FRACTION = 0.05

# replicate refits: one polished grid start plus the restart check
BOOTSTRAP_MLE_OPTIONS = MLEOptions(n_polish=1, compute_se=False)


class BootstrapError(RuntimeError):
    pass


class TooManyFailuresError(BootstrapError):
    pass


def replicate_rng(seed: int, index: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(index,)))


def percentile_ci(values, level: float = 0.95) -> tuple[float, float]:
    """Equal-tailed percentile interval.

    Quantiles interpolate linearly between order statistics placed at
    ``(k - 0.5) / n``.
    """
    v = np.asarray(values, dtype=np.float64)
    if v.size == 0:
        raise ValueError("empty input")
    if v.size < 2:
        raise ValueError("need at least 2 values")
    if not 0 <= level < 1:
        raise ValueError("level must lie in [0, 1)")
    tail = (1.0 - level) / 2.0
    lo, hi = np.quantile(v, [tail, 1.0 - tail], method="hazen")
    return float(lo), float(hi)


@dataclass(frozen=True)
class BootstrapResult:
    replicate_values: np.ndarray
    point_estimate: float
    se: float
    ci_lower: float
    ci_upper: float
    n_failed: int
    seed: int
    B: int
    level: float = 0.95
    unreliable: bool = False
    failure_reasons: dict = field(default_factory=dict, compare=False)

    @property
    def median(self) -> float:
        return float(np.median(self.replicate_values))

    def as_dict(self, include_replicates: bool = False) -> dict:
        out = {
            "point_estimate": self.point_estimate,
            "se": self.se,
            "ci_lower": self.ci_lower,
            "ci_upper": self.ci_upper,
            "median": self.median,
            "level": self.level,
            "B": self.B,
            "n_failed": self.n_failed,
            "seed": self.seed,
            "unreliable": self.unreliable,
        }
        if include_replicates:
            out["replicate_values"] = self.replicate_values.tolist()
        return out


def _summarize(values, point, n_failed, seed, B, level, strict, reasons):
    frac = n_failed / B
    if frac > MAX_FAIL_FRACTION and strict:
        sample = "; ".join(sorted(set(reasons.values()))[:3])
        raise TooManyFailuresError(
            f"{n_failed} of {B} replicates failed ({frac:.1%}): {sample}"
        )
    values = np.asarray(values, dtype=np.float64)
    if values.size < 2:
        raise TooManyFailuresError(f"only {values.size} usable replicates")
    lo, hi = percentile_ci(values, level)
    return BootstrapResult(
        replicate_values=values,
        point_estimate=float(point),
        se=float(np.std(values, ddof=1)),
        ci_lower=lo,
        ci_upper=hi,
        n_failed=int(n_failed),
        seed=int(seed),
        B=int(B),
        level=level,
        unreliable=frac > MAX_FAIL_FRACTION,
        failure_reasons=reasons,
    )


def _draw_counts(series_pair, curves, B, seed):
    """Binomial counts for both arms, shape ``(B, N_j)`` each."""
    probs = [np.asarray(c(s.t), dtype=np.float64) for s, c in zip(series_pair, curves)]
    out = [np.empty((B, s.t.size), dtype=np.int64) for s in series_pair]
    for i in range(B):
        rng = replicate_rng(seed, i)
        for j, s in enumerate(series_pair):
            out[j][i] = rng.binomial(s.n, probs[j])
    return out


def parametric_bootstrap(series1: TrialSeries, series2: TrialSeries,
                         fits: tuple[ParametricFit, ParametricFit], spec: MetricSpec,
                         B: int = 1000, seed: int = 42, level: float = 0.95, *,
                         options: MLEOptions | None = None, strict: bool = True,
                         min_replicates: int = MIN_REPLICATES) -> BootstrapResult:
    """Resample counts from both fitted parametric curves, refit, recompute the metric."""
    if B < min_replicates:
        raise ValueError(f"need B >= {min_replicates}, got {B}")
    fit1, fit2 = fits
    if not (fit1.converged and fit2.converged):
        raise BootstrapError("both original fits must have converged")
    options = options or BOOTSTRAP_MLE_OPTIONS
    point = lp_metric(fit1.params, fit2.params, spec).value

    Y1, Y2 = _draw_counts((series1, series2), (fit1.params, fit2.params), B, seed)
    refits = []
    reasons: dict[int, str] = {}
    for s, Y, fit in ((series1, Y1, fit1), (series2, Y2, fit2)):
        got, errors = fit_parametric_mle_batch(s.t, Y, s.n, fit.model_kind, options, s.arm_id)
        for i, exc in errors.items():
            reasons.setdefault(i, f"{type(exc).__name__}: {exc}")
        for i, f in enumerate(got):
            if f is not None and not f.converged:
                reasons.setdefault(i, "restarts disagree beyond tolerance")
        refits.append(got)

    values = [
        lp_metric(refits[0][i].params, refits[1][i].params, spec).value
        for i in range(B)
        if i not in reasons
    ]
    return _summarize(values, point, len(reasons), seed, B, level, strict, reasons)


def nonparametric_bootstrap(series1: TrialSeries, series2: TrialSeries,
                            fits: tuple[NonparametricFit, NonparametricFit], spec: MetricSpec,
                            B: int = 1000, seed: int = 42, level: float = 0.95, *,
                            reselect: bool = False, alpha_threshold: float = 0.2,
                            strict: bool = True,
                            min_replicates: int = MIN_REPLICATES) -> BootstrapResult:
    """Resample from the fitted Bernstein curves and refit each replicate.

    Replicates keep each arm's degree and constraint mode unless ``reselect``
    is set, in which case the degree is chosen again by the KS rule (falling
    back to the best p-value when no degree passes).
    """
    if B < min_replicates:
        raise ValueError(f"need B >= {min_replicates}, got {B}")
    fit1, fit2 = fits
    point = lp_metric(fit1.curve, fit2.curve, spec).value
    Y1, Y2 = _draw_counts((series1, series2), (fit1.curve, fit2.curve), B, seed)

    def refit(series, counts, fit):
        s = series.with_counts(counts)
        c = fit.curve
        if reselect:
            sel = select_degree_ks(s, alpha_threshold, fit.constraint_mode, c.t_min, c.t_max)
            m = sel.chosen_m if sel.chosen_m is not None else sel.best_by_pvalue()
            return sel.fits[m].curve
        return fit_bernstein_wls(s, c.degree_m, fit.constraint_mode, c.t_min, c.t_max).curve

    values = []
    reasons: dict[int, str] = {}
    for i in range(B):
        try:
            c1 = refit(series1, Y1[i], fit1)
            c2 = refit(series2, Y2[i], fit2)
        except (FitError, QPError, ValueError) as exc:
            reasons[i] = f"{type(exc).__name__}: {exc}"
            continue
        values.append(lp_metric(c1, c2, spec).value)
    return _summarize(values, point, len(reasons), seed, B, level, strict, reasons)
