"""Dense primal active-set solver for small convex quadratic programs.

Solves::

    minimize    0.5 * x' H x - f' x
    subject to  R x >= b

for symmetric positive semidefinite ``H``. Zero-curvature directions are
handled by a ratio test along the descent direction, so singular ``H`` is
fine as long as the objective is bounded below on the feasible set.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.linalg import null_space
from scipy.optimize import linprog


class QPError(RuntimeError):
    pass


class InfeasibleError(QPError):
    pass


class NumericalFailure(QPError):
    pass


@dataclass(frozen=True)
class QPSolution:
    x: np.ndarray
    multipliers: np.ndarray
    active: tuple
    iterations: int
    objective: float


def qp_objective(H, f, x) -> float:
    return float(0.5 * x @ H @ x - f @ x)


def kkt_residuals(H, f, R, b, x, lam) -> dict:
    """Stationarity, primal/dual feasibility and complementarity residuals."""
    slack = R @ x - b
    return {
        "stationarity": float(np.max(np.abs(H @ x - f - R.T @ lam), initial=0.0)),
        "primal": float(max(0.0, -np.min(slack, initial=0.0))),
        "dual": float(max(0.0, -np.min(lam, initial=0.0))),
        "complementarity": float(np.max(np.abs(lam * slack), initial=0.0)),
    }


def _feasible_start(R, b, tol):
    n = R.shape[1]
    x0 = np.zeros(n)
    if np.all(R @ x0 - b >= -tol):
        return x0
    res = linprog(np.zeros(n), A_ub=-R, b_ub=-b, bounds=[(None, None)] * n, method="highs")
    if res.status == 2:
        raise InfeasibleError("constraint set is empty")
    if not res.success:
        raise NumericalFailure(f"phase-one LP failed: {res.message}")
    return res.x


def _lstsq(A, y):
    return np.linalg.lstsq(A, y, rcond=None)[0]


def solve_qp(hessian, linear, constraint_matrix, constraint_rhs, *, x0=None,
             tol: float = 1e-10, max_iter: int | None = None) -> QPSolution:
    H = np.asarray(hessian, dtype=np.float64)
    f = np.asarray(linear, dtype=np.float64)
    R = np.atleast_2d(np.asarray(constraint_matrix, dtype=np.float64))
    b = np.asarray(constraint_rhs, dtype=np.float64)
    n = f.size
    if H.shape != (n, n) or R.shape[1] != n or R.shape[0] != b.size:
        raise ValueError("inconsistent QP dimensions")
    H = 0.5 * (H + H.T)
    scale = max(1.0, float(np.max(np.abs(H))), float(np.max(np.abs(f), initial=0.0)))
    row_norm = np.linalg.norm(R, axis=1)
    row_norm[row_norm == 0] = 1.0

    x = _feasible_start(R, b, tol) if x0 is None else np.asarray(x0, dtype=np.float64).copy()
    if np.any(R @ x - b < -1e-9 * (1 + np.abs(b))):
        raise InfeasibleError("starting point is infeasible")

    slack = (R @ x - b) / row_norm
    work: list[int] = []
    for i in np.flatnonzero(slack <= tol):
        cand = work + [int(i)]
        if np.linalg.matrix_rank(R[cand]) == len(cand):
            work = cand

    max_iter = max_iter or 50 * (n + R.shape[0]) + 50
    lam_w = np.zeros(0)
    for it in range(1, max_iter + 1):
        g = H @ x - f
        Aw = R[work]
        Z = null_space(Aw) if work else np.eye(n)
        p = np.zeros(n)
        unbounded_dir = False
        if Z.shape[1] > 0:
            Hz = Z.T @ H @ Z
            gz = Z.T @ g
            w, V = np.linalg.eigh(Hz)
            pos = w > 1e-12 * max(1.0, abs(w).max(initial=0.0))
            coef = V.T @ gz
            # Newton step in the curved subspace, steepest descent in the flat one
            flat = ~pos & (np.abs(coef) > tol * scale)
            if flat.any():
                p = -Z @ (V[:, flat] @ coef[flat])
                unbounded_dir = True
            else:
                step = np.zeros_like(coef)
                step[pos] = -coef[pos] / w[pos]
                p = Z @ (V @ step)

        if np.max(np.abs(p), initial=0.0) <= tol * max(1.0, np.max(np.abs(x), initial=0.0)):
            lam_w = _lstsq(Aw.T, g) if work else np.zeros(0)
            if not work or lam_w.min() >= -tol * scale:
                lam = np.zeros(R.shape[0])
                lam[work] = np.maximum(lam_w, 0.0)
                return QPSolution(x, lam, tuple(sorted(work)), it, qp_objective(H, f, x))
            work.pop(int(np.argmin(lam_w)))
            continue

        Rp = R @ p
        alpha = np.inf if unbounded_dir else 1.0
        blocking = None
        for i in range(R.shape[0]):
            if i in work or Rp[i] >= -1e-14 * row_norm[i] * np.linalg.norm(p):
                continue
            a_i = (b[i] - R[i] @ x) / Rp[i]
            a_i = max(a_i, 0.0)
            if a_i < alpha:
                alpha, blocking = a_i, i
        if not np.isfinite(alpha):
            raise NumericalFailure("objective unbounded below on the feasible set")
        x = x + alpha * p
        if blocking is not None:
            work.append(blocking)
    raise NumericalFailure(f"active-set iterations exceeded {max_iter}")
