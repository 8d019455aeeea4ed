"""Nelder-Mead over a batch of independent problems.

Each row of the batch carries its own simplex; every iteration performs the
reflect / expand / contract / shrink decisions row-wise with masks, so one
vectorized objective call serves all rows still running. Coefficients,
initial simplex and stopping rule follow SciPy's ``Nelder-Mead``.
"""

from __future__ import annotations

import numpy as np


def nelder_mead_batch(fun, x0, *, xatol=1e-10, fatol=1e-10, max_iter=2000,
                      nonzdelt=0.05):
    """Minimize ``fun`` independently for every row of ``x0``.

    ``fun(X, rows)`` must return objective values for points ``X`` (shape
    ``(k, d)``) belonging to batch rows ``rows``. Returns
    ``(x_best, f_best, n_iter, converged)`` arrays.
    """
    x0 = np.atleast_2d(np.asarray(x0, dtype=np.float64))
    B, d = x0.shape
    rows_all = np.arange(B)

    sim = np.repeat(x0[:, None, :], d + 1, axis=1)
    for k in range(d):
        col = sim[:, k + 1, k]
        sim[:, k + 1, k] = np.where(col != 0, (1 + nonzdelt) * col, 0.00025)
    fs = np.empty((B, d + 1))
    for j in range(d + 1):
        fs[:, j] = fun(sim[:, j], rows_all)

    n_iter = np.full(B, max_iter)
    done = np.zeros(B, dtype=bool)
    for it in range(1, max_iter + 1):
        act = np.flatnonzero(~done)
        order = np.argsort(fs[act], axis=1, kind="stable")
        fs[act] = np.take_along_axis(fs[act], order, axis=1)
        sim[act] = np.take_along_axis(sim[act], order[:, :, None], axis=1)

        s, f = sim[act], fs[act]
        spread_x = np.max(np.abs(s[:, 1:] - s[:, :1]), axis=(1, 2))
        spread_f = np.max(np.abs(f[:, 1:] - f[:, :1]), axis=1)
        stop = (spread_x <= xatol) & (spread_f <= fatol)
        if stop.any():
            done[act[stop]] = True
            n_iter[act[stop]] = it
            act, s, f = act[~stop], s[~stop], f[~stop]
        if act.size == 0:
            break

        centroid = s[:, :-1].mean(axis=1)
        worst = s[:, -1]
        xr = 2.0 * centroid - worst
        fr = fun(xr, act)
        new_x = xr.copy()
        new_f = fr.copy()
        shrink = np.zeros(act.size, dtype=bool)

        expand = fr < f[:, 0]
        if expand.any():
            xe = 3.0 * centroid[expand] - 2.0 * worst[expand]
            fe = fun(xe, act[expand])
            take = fe < fr[expand]
            idx = np.flatnonzero(expand)[take]
            new_x[idx] = xe[take]
            new_f[idx] = fe[take]

        outside = ~expand & (fr >= f[:, -2]) & (fr < f[:, -1])
        if outside.any():
            xc = 1.5 * centroid[outside] - 0.5 * worst[outside]
            fc = fun(xc, act[outside])
            ok = fc <= fr[outside]
            idx = np.flatnonzero(outside)
            new_x[idx[ok]] = xc[ok]
            new_f[idx[ok]] = fc[ok]
            shrink[idx[~ok]] = True

        inside = ~expand & (fr >= f[:, -1])
        if inside.any():
            xc = 0.5 * centroid[inside] + 0.5 * worst[inside]
            fc = fun(xc, act[inside])
            ok = fc < f[inside, -1]
            idx = np.flatnonzero(inside)
            new_x[idx[ok]] = xc[ok]
            new_f[idx[ok]] = fc[ok]
            shrink[idx[~ok]] = True

        keep = ~shrink
        sim[act[keep], -1] = new_x[keep]
        fs[act[keep], -1] = new_f[keep]

        if shrink.any():
            rows = act[shrink]
            best = sim[rows, :1]
            sim[rows, 1:] = best + 0.5 * (sim[rows, 1:] - best)
            for j in range(1, d + 1):
                fs[rows, j] = fun(sim[rows, j], rows)

    best = np.argmin(fs, axis=1)
    return sim[rows_all, best], fs[rows_all, best], n_iter, done
