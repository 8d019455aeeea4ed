"""Random-coefficient exponential-decay curves across studies.

Study ``i`` has its own ``(alpha_i, beta_i)`` with ``(log alpha_i, log beta_i)``
bivariate normal. The marginal mean curve splits as
``E[alpha] - E[alpha exp(-beta t)]``; conditioning ``log alpha`` on
``log beta`` turns the second term into a closed-form prefactor times a
one-dimensional lognormal expectation, evaluated by Gauss-Hermite quadrature.

Fitting maximizes the marginal likelihood with the per-study double
integral computed by tensor-product Gauss-Hermite quadrature centered on a
Gaussian approximation of each study's posterior (adaptive quadrature).
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import numpy as np
from scipy.optimize import minimize
from scipy.special import gammaln, ndtr

from .fit import TrialSeries


class IntegrationError(ArithmeticError):
    pass


class RandomEffectsError(RuntimeError):
    pass


@dataclass(frozen=True)
class RandomCoefParams:
    mu_a: float
    mu_b: float
    sigma_a: float
    sigma_b: float
    sigma_ab: float = 0.0

    def __post_init__(self):
        if not (self.sigma_a > 0 and self.sigma_b > 0):
            raise ValueError("sigma_a and sigma_b must be positive")
        if not abs(self.sigma_ab) < self.sigma_a * self.sigma_b:
            raise ValueError("covariance matrix must be positive definite")

    @property
    def mean(self) -> np.ndarray:
        return np.array([self.mu_a, self.mu_b])

    @property
    def cov(self) -> np.ndarray:
        return np.array(
            [[self.sigma_a**2, self.sigma_ab], [self.sigma_ab, self.sigma_b**2]]
        )

    def prob_alpha_above_one(self) -> float:
        return float(ndtr(self.mu_a / self.sigma_a))

    def as_dict(self) -> dict:
        return {
            "mu_a": self.mu_a,
            "mu_b": self.mu_b,
            "sigma_a": self.sigma_a,
            "sigma_b": self.sigma_b,
            "sigma_ab": self.sigma_ab,
        }


def _hermite(n):
    x, w = np.polynomial.hermite.hermgauss(n)
    return x, w / math.sqrt(math.pi)


def _second_term(params: RandomCoefParams, t: np.ndarray, n_nodes: int) -> np.ndarray:
    """``E[alpha exp(-beta t)]`` via the conditional-lognormal factorization."""
    k = params.sigma_ab / params.sigma_b**2
    pref = math.exp(
        params.mu_a
        - k * params.mu_b
        + 0.5 * (params.sigma_a**2 - (params.sigma_ab / params.sigma_b) ** 2)
    )
    x, w = _hermite(n_nodes)
    log_beta = params.mu_b + math.sqrt(2.0) * params.sigma_b * x
    beta = np.exp(log_beta)
    vals = np.exp(-np.outer(t, beta) + k * log_beta[None, :])
    return pref * (vals @ w)


def marginal_theta_expectation(params: RandomCoefParams, t, n_nodes: int = 64,
                               check_nodes: int = 128, tol: float = 1e-6):
    """Mean response ``E[alpha_i (1 - exp(-beta_i t))]`` over the study population."""
    tt = np.atleast_1d(np.asarray(t, dtype=np.float64))
    if np.any(tt < 0):
        raise ValueError("times must be non-negative")
    if params.prob_alpha_above_one() > 0.05:
        warnings.warn(
            f"P(alpha > 1) = {params.prob_alpha_above_one():.3f} under these parameters",
            RuntimeWarning,
            stacklevel=2,
        )
    e_alpha = math.exp(params.mu_a + 0.5 * params.sigma_a**2)
    coarse = _second_term(params, tt, n_nodes)
    fine = _second_term(params, tt, check_nodes)
    gap = float(np.max(np.abs(coarse - fine)))
    if gap > tol:
        raise IntegrationError(f"quadrature changed by {gap:.2e} when doubling nodes")
    out = np.where(tt == 0, 0.0, e_alpha - fine)
    out = np.maximum(out, 0.0)
    return float(out[0]) if np.ndim(t) == 0 else out


# ---------------------------------------------------------------------------
# Marginal maximum likelihood
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class REOptions:
    n_nodes: int = 16
    max_iter: int = 4000
    fd_step: float = 1e-4


@dataclass(frozen=True)
class RandomCoefFit:
    params: RandomCoefParams
    se: dict
    loglik: float
    converged: bool
    n_studies: int

    def as_dict(self) -> dict:
        return {
            "params": self.params.as_dict(),
            "se": self.se,
            "loglik": self.loglik,
            "converged": self.converged,
            "n_studies": self.n_studies,
        }


class _Study:
    """One study's data plus a Gaussian approximation of its likelihood in log space."""

    def __init__(self, series: TrialSeries):
        self.t = series.t
        self.y = series.y
        self.n = float(series.n)
        self.const = float(np.sum(gammaln(self.n + 1) - gammaln(self.y + 1)
                                  - gammaln(self.n - self.y + 1)))
        self.center, self.precision = self._laplace()

    def loglik(self, la, lb):
        """Log-likelihood at arrays of ``log alpha``, ``log beta`` (same shape)."""
        th = np.exp(la)[..., None] * -np.expm1(-np.exp(lb)[..., None] * self.t)
        th = np.clip(th, 0.0, 1.0)
        with np.errstate(divide="ignore", invalid="ignore"):
            ll = np.where(self.y > 0, self.y * np.log(th), 0.0) + np.where(
                self.n - self.y > 0, (self.n - self.y) * np.log1p(-th), 0.0
            )
        out = np.sum(ll, axis=-1) + self.const
        return np.where(np.isnan(out), -np.inf, out)

    def _laplace(self):
        def f(z):
            v = float(self.loglik(np.array(z[0]), np.array(z[1])))
            return -v if np.isfinite(v) else 1e300

        p_hat = np.clip(self.y / self.n, 1e-3, 0.999)
        starts = [(math.log(max(p_hat.max(), 1e-3)), math.log(b)) for b in (0.05, 0.2, 1.0)]
        best = min((minimize(f, s, method="Nelder-Mead",
                             options={"xatol": 1e-8, "fatol": 1e-10, "maxiter": 2000})
                    for s in starts), key=lambda r: r.fun)
        z = best.x
        h = 1e-4
        H = np.empty((2, 2))
        for i in range(2):
            for j in range(2):
                ei, ej = np.eye(2)[i] * h, np.eye(2)[j] * h
                H[i, j] = (f(z + ei + ej) - f(z + ei - ej) - f(z - ei + ej) + f(z - ei - ej)) / (
                    4 * h * h
                )
        H = 0.5 * (H + H.T)
        w, V = np.linalg.eigh(H)
        # flat or non-concave directions carry no information about the center
        w = np.where(np.isfinite(w), np.maximum(w, 1e-6), 1e-6)
        return z, (V * w) @ V.T


def _unpack(z) -> RandomCoefParams:
    mu_a, mu_b, ls_a, ls_b, r = z
    sa, sb = math.exp(ls_a), math.exp(ls_b)
    return RandomCoefParams(mu_a, mu_b, sa, sb, math.tanh(r) * sa * sb)


def _pack(p: RandomCoefParams):
    rho = p.sigma_ab / (p.sigma_a * p.sigma_b)
    return np.array([p.mu_a, p.mu_b, math.log(p.sigma_a), math.log(p.sigma_b), math.atanh(rho)])


def marginal_loglik(params: RandomCoefParams, studies, n_nodes: int = 16) -> float:
    """Sum over studies of the log marginal likelihood (adaptive tensor Gauss-Hermite)."""
    if not isinstance(studies[0], _Study):
        studies = [_Study(s) for s in studies]
    x, w = _hermite(n_nodes)
    X1, X2 = np.meshgrid(x, x, indexing="ij")
    nodes = np.stack([X1.ravel(), X2.ravel()], axis=1) * math.sqrt(2.0)
    logw = np.log(np.outer(w, w).ravel())

    mu = params.mean
    prior_prec = np.linalg.inv(params.cov)
    _, prior_logdet = np.linalg.slogdet(params.cov)
    total = 0.0
    for s in studies:
        prec = s.precision + prior_prec
        cov = np.linalg.inv(prec)
        center = cov @ (s.precision @ s.center + prior_prec @ mu)
        L = np.linalg.cholesky(cov)
        u = center + nodes @ L.T
        _, q_logdet = np.linalg.slogdet(cov)
        # importance ratio prior(u) / q(u) for q = N(center, cov); the 2*pi factors cancel
        d = u - mu
        log_prior = -0.5 * np.einsum("ij,jk,ik->i", d, prior_prec, d) - 0.5 * prior_logdet
        log_q = -0.5 * np.sum(nodes**2, axis=1) - 0.5 * q_logdet
        terms = s.loglik(u[:, 0], u[:, 1]) + log_prior - log_q + logw
        m = np.max(terms)
        if not np.isfinite(m):
            return -math.inf
        total += m + math.log(np.sum(np.exp(terms - m)))
    return float(total)


def _numeric_hessian(f, x, step):
    k = x.size
    H = np.empty((k, k))
    h = step * np.maximum(np.abs(x), 1.0)
    for i in range(k):
        for j in range(i, k):
            ei = np.zeros(k)
            ej = np.zeros(k)
            ei[i], ej[j] = h[i], h[j]
            H[i, j] = H[j, i] = (
                f(x + ei + ej) - f(x + ei - ej) - f(x - ei + ej) + f(x - ei - ej)
            ) / (4 * h[i] * h[j])
    return H


def fit_random_coef_mle(data, options: REOptions | None = None,
                        start: RandomCoefParams | None = None) -> RandomCoefFit:
    """Marginal maximum-likelihood estimate of the population parameters.

    ``data`` is a sequence of :class:`TrialSeries`, one per study. Standard
    errors come from a finite-difference Hessian in the natural
    parameterization ``(mu_a, mu_b, sigma_a, sigma_b, sigma_ab)``.
    """
    options = options or REOptions()
    data = list(data)
    if len(data) < 2:
        raise ValueError("random-effects fitting needs at least 2 studies")
    if any(len(s) < 3 for s in data):
        raise ValueError("every study needs at least 3 time points")
    studies = [_Study(s) for s in data]

    if start is None:
        centers = np.array([s.center for s in studies])
        sd = np.maximum(centers.std(axis=0, ddof=1), 0.05)
        start = RandomCoefParams(*centers.mean(axis=0), *sd, 0.0)

    def negll(z):
        try:
            p = _unpack(z)
        except ValueError:
            return 1e300
        v = marginal_loglik(p, studies, options.n_nodes)
        return -v if np.isfinite(v) else 1e300

    res = minimize(negll, _pack(start), method="Nelder-Mead",
                   options={"xatol": 1e-7, "fatol": 1e-9, "maxiter": options.max_iter,
                            "maxfev": 2 * options.max_iter, "adaptive": True})
    nm_ok = bool(res.success)
    res = minimize(negll, res.x, method="BFGS", options={"gtol": 1e-6})
    # BFGS often stops on precision loss at a flat optimum; accept a small gradient
    converged = bool(res.success) or (nm_ok and float(np.max(np.abs(res.jac))) < 1e-3)
    params = _unpack(res.x)

    def nat_negll(v):
        try:
            p = RandomCoefParams(*v)
        except ValueError:
            return math.nan
        return -marginal_loglik(p, studies, options.n_nodes)

    x = np.array([params.mu_a, params.mu_b, params.sigma_a, params.sigma_b, params.sigma_ab])
    H = _numeric_hessian(nat_negll, x, options.fd_step)
    try:
        cov = np.linalg.inv(H)
    except np.linalg.LinAlgError as exc:
        raise RandomEffectsError("singular Hessian at the optimum") from exc
    var = np.diag(cov)
    if not np.all(np.isfinite(var)) or np.any(var <= 0):
        raise RandomEffectsError("Hessian at the optimum is not positive definite")
    names = ("mu_a", "mu_b", "sigma_a", "sigma_b", "sigma_ab")
    se = {k: float(math.sqrt(v)) for k, v in zip(names, var)}
    return RandomCoefFit(params, se, -float(res.fun), converged, len(studies))
