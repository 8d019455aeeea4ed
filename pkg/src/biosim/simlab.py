"""Monte Carlo study of metric estimators under a two-arm exponential-decay truth.

Each repetition simulates both arms, then estimates ``L_1(5, 20)`` three ways:

* ``TP`` exponential-decay MLE (the correctly specified model)
* ``MP`` log-logistic MLE (misspecified)
* ``NP`` Bernstein least squares with KS degree selection

and records the relative bias against the metric of the true curves.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .fit import (
    EXP_DECAY,
    LOG_LOGISTIC,
    FitError,
    MLEOptions,
    TrialSeries,
    fit_parametric_mle_batch,
    select_degree_ks,
)
from .inference import replicate_rng
from .metric import MetricSpec, lp_metric
from .models import STRICT, ExpDecayParams, ResponseCurve
from .qp import QPError

log = logging.getLogger(__name__)

ESTIMATORS = ("TP", "MP", "NP")
MAX_FAIL_FRACTION = 0.05


class StudyAborted(RuntimeError):
    pass


def simulate_trial(curve: ResponseCurve, n: int, times, seed=None, *,
                   rng: np.random.Generator | None = None, arm_id: str = "arm") -> TrialSeries:
    """Draw ``y_i ~ Binomial(n, curve(t_i))`` independently at each time."""
    rng = rng if rng is not None else np.random.default_rng(seed)
    t = np.asarray(times, dtype=np.float64)
    if np.any(np.diff(t) <= 0):
        raise ValueError("times must be strictly increasing")
    y = rng.binomial(n, np.asarray(curve(t), dtype=np.float64))
    return TrialSeries(arm_id, n, tuple(t), tuple(int(v) for v in y))


def relative_bias(estimate: float, truth: float) -> float:
    if truth == 0:
        raise ZeroDivisionError("relative bias is undefined for a zero truth")
    return (estimate - truth) / truth


@dataclass(frozen=True)
class StudyConfig:
    truth1: ExpDecayParams = ExpDecayParams(0.6, 0.2)
    truth2: ExpDecayParams = ExpDecayParams(0.9, 0.08)
    horizon: float = 30.0
    spacing: int = 2
    n: int = 100
    reps: int = 200
    metric_spec: MetricSpec = MetricSpec(1.0, 5.0, 20.0)
    ks_threshold: float = 0.5
    constraint_mode: str = STRICT
    seed: int = 42

    def __post_init__(self):
        if self.spacing not in (1, 2):
            raise ValueError("spacing must be 1 or 2 time units")
        if self.reps < 1:
            raise ValueError("reps must be positive")
        if self.n < 1:
            raise ValueError("n must be positive")

    @property
    def times(self) -> np.ndarray:
        return np.arange(0.0, self.horizon + 1e-9, float(self.spacing))

    def as_dict(self) -> dict:
        return {
            "truth1": self.truth1.as_dict(),
            "truth2": self.truth2.as_dict(),
            "horizon": self.horizon,
            "spacing": self.spacing,
            "N": int(self.times.size),
            "n": self.n,
            "reps": self.reps,
            "metric_spec": self.metric_spec.as_dict(),
            "ks_threshold": self.ks_threshold,
            "constraint_mode": self.constraint_mode,
            "seed": self.seed,
        }


@dataclass
class StudyResult:
    config: StudyConfig
    L0: float
    estimates: dict  # estimator -> array of L-hat (nan where the repetition failed)
    selected_m: np.ndarray  # (reps, 2)
    failures: dict = field(default_factory=dict)
    np_fallbacks: int = 0

    def rb(self, estimator: str) -> np.ndarray:
        v = self.estimates[estimator]
        return (v[np.isfinite(v)] - self.L0) / self.L0

    def mean_rb(self, estimator: str) -> float:
        return float(np.mean(self.rb(estimator)))

    def mc_se(self, estimator: str) -> float:
        r = self.rb(estimator)
        return float(np.std(r, ddof=1) / math.sqrt(r.size)) if r.size > 1 else math.nan

    def mean_m(self, arm: int) -> float:
        return float(np.mean(self.selected_m[:, arm]))

    def m_se(self, arm: int) -> float:
        m = self.selected_m[:, arm]
        return float(np.std(m, ddof=1) / math.sqrt(m.size)) if m.size > 1 else math.nan

    def as_dict(self, include_vectors: bool = False) -> dict:
        out = {
            "config": self.config.as_dict(),
            "L0": self.L0,
            "relative_bias": {
                e: {"mean": self.mean_rb(e), "mc_se": self.mc_se(e), "n_ok": int(self.rb(e).size)}
                for e in ESTIMATORS
            },
            "selected_m": {
                f"arm{j + 1}": {"mean": self.mean_m(j), "mc_se": self.m_se(j)} for j in range(2)
            },
            "failures": {e: len(v) for e, v in self.failures.items()},
            "np_fallbacks": self.np_fallbacks,
        }
        if include_vectors:
            out["rb_vectors"] = {e: self.rb(e).tolist() for e in ESTIMATORS}
            out["selected_m_vectors"] = self.selected_m.tolist()
        return out


def run_mc_study(config: StudyConfig, mle_options: MLEOptions | None = None) -> StudyResult:
    mle_options = mle_options or MLEOptions(compute_se=False)
    t = config.times
    truths = (config.truth1, config.truth2)
    spec = config.metric_spec
    L0 = lp_metric(config.truth1, config.truth2, spec).value
    reps = config.reps

    probs = [np.asarray(c(t)) for c in truths]
    Y = [np.empty((reps, t.size), dtype=np.int64) for _ in range(2)]
    for r in range(reps):
        rng = replicate_rng(config.seed, r)
        for j in range(2):
            Y[j][r] = rng.binomial(config.n, probs[j])

    estimates = {e: np.full(reps, np.nan) for e in ESTIMATORS}
    failures: dict[str, dict[int, str]] = {e: {} for e in ESTIMATORS}

    for est, kind in (("TP", EXP_DECAY), ("MP", LOG_LOGISTIC)):
        arms = []
        for j in range(2):
            fits, errors = fit_parametric_mle_batch(
                t, Y[j], config.n, kind, mle_options, f"arm{j + 1}"
            )
            for r, exc in errors.items():
                failures[est].setdefault(r, f"{type(exc).__name__}: {exc}")
            arms.append(fits)
        for r in range(reps):
            if r in failures[est]:
                continue
            estimates[est][r] = lp_metric(arms[0][r].params, arms[1][r].params, spec).value

    selected = np.zeros((reps, 2), dtype=int)
    fallbacks = 0
    for r in range(reps):
        curves = []
        try:
            for j in range(2):
                series = TrialSeries(f"arm{j + 1}", config.n, tuple(t), tuple(Y[j][r]))
                sel = select_degree_ks(series, config.ks_threshold, config.constraint_mode)
                m = sel.chosen_m
                if m is None:
                    m = sel.best_by_pvalue()
                    fallbacks += 1
                selected[r, j] = m
                curves.append(sel.fits[m].curve)
        except (FitError, QPError, ValueError) as exc:
            failures["NP"][r] = f"{type(exc).__name__}: {exc}"
            continue
        estimates["NP"][r] = lp_metric(curves[0], curves[1], spec).value

    for est, fails in failures.items():
        if len(fails) > MAX_FAIL_FRACTION * reps:
            raise StudyAborted(f"{est}: {len(fails)} of {reps} repetitions failed")
        if fails:
            log.warning("%s: %d repetitions failed", est, len(fails))
    return StudyResult(config, L0, estimates, selected, failures, fallbacks)
