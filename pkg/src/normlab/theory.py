"""Min-norm and max-margin interpolants with and without feature normalization.

With per-feature standard deviations ``U`` on the diagonal, normalizing the
design matrix and then taking the minimum Euclidean norm solution is the same
as minimizing ``||U theta||`` over the original interpolants. Every routine
here works with the diagonal as a 1-D array ``u``.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field

import numpy as np
from .rng import stream

RANK_RTOL = 1e-10
U_EPS = 1e-8


class RankError(ValueError):
    pass


class ConvergenceError(RuntimeError):
    pass


@dataclass
class Estimator:
    theta: np.ndarray
    kind: str
    residual: float = 0.0
    diagnostics: dict = field(default_factory=dict)


def numerical_rank(X: np.ndarray) -> int:
    s = np.linalg.svd(X, compute_uv=False)
    if s.size == 0 or s[0] == 0:
        return 0
    return int(np.sum(s > RANK_RTOL * s[0]))


def _check_u(u, d: int) -> np.ndarray:
    u = np.asarray(u, dtype=np.float64)
    if u.shape != (d,):
        raise ValueError(f"scaling diagonal has shape {u.shape}, expected ({d},)")
    if np.any(u < U_EPS):
        bad = int(np.argmin(u))
        raise ValueError(f"feature {bad} has scale {u[bad]:.3g} < {U_EPS}; normalization is undefined")
    return u


def _min_norm_qr(X: np.ndarray, Y: np.ndarray) -> np.ndarray:
    # X^T = QR  =>  X = R^T Q^T, and the row-space interpolant is Q (R^T)^{-1} Y
    q, r = np.linalg.qr(X.T)
    z = np.linalg.solve(r.T, Y)
    return q @ z


def min_norm_solve(X, Y) -> Estimator:
    """Minimum Euclidean norm solution of ``X theta = Y`` for full-row-rank ``X``."""
    X = np.asarray(X, dtype=np.float64)
    Y = np.asarray(Y, dtype=np.float64)
    n, d = X.shape
    rank = numerical_rank(X)
    if rank < n:
        raise RankError(f"X has numerical rank {rank} < n = {n}")
    theta = _min_norm_qr(X, Y)
    return Estimator(theta, "unnormalized", float(np.linalg.norm(X @ theta - Y)), {"rank": rank})


def lstsq_min_norm(X, Y) -> np.ndarray:
    """Minimum-norm least-squares solution via truncated SVD; tolerates rank deficiency."""
    X = np.asarray(X, dtype=np.float64)
    uu, s, vt = np.linalg.svd(X, full_matrices=False)
    if s.size == 0 or s[0] == 0:
        raise RankError("matrix has numerical rank 0")
    keep = s > RANK_RTOL * s[0]
    return vt[keep].T @ ((uu[:, keep].T @ np.asarray(Y, dtype=np.float64)) / s[keep])


def normalized_min_norm_solve(X, Y, u) -> Estimator:
    """Interpolant minimizing ``||diag(u) theta||``, via the min-norm fit of ``X diag(u)^-1``."""
    X = np.asarray(X, dtype=np.float64)
    Y = np.asarray(Y, dtype=np.float64)
    u = _check_u(u, X.shape[1])
    beta = min_norm_solve(X / u, Y)
    theta = beta.theta / u
    return Estimator(theta, "normalized", float(np.linalg.norm(X @ theta - Y)), {"beta": beta.theta})


def weighted_min_norm_direct(X, Y, u) -> np.ndarray:
    """Closed form ``U^-2 X^T (X U^-2 X^T)^-1 Y`` solved by Cholesky; a second route to the same point."""
    X = np.asarray(X, dtype=np.float64)
    u = _check_u(u, X.shape[1])
    xw = X / (u * u)
    gram = xw @ X.T
    c = np.linalg.cholesky(gram)
    z = np.linalg.solve(c.T, np.linalg.solve(c, np.asarray(Y, dtype=np.float64)))
    return xw.T @ z


def projection_matrix(X) -> np.ndarray:
    """Orthogonal projector onto the row space of ``X`` (``X^T (X X^T)^-1 X``)."""
    X = np.asarray(X, dtype=np.float64)
    rank = numerical_rank(X)
    if rank < X.shape[0]:
        raise RankError(f"X has numerical rank {rank} < n = {X.shape[0]}")
    q, _ = np.linalg.qr(X.T)
    return q @ q.T


def check_projection_identity(zeta, theta, X) -> dict:
    P = projection_matrix(X)
    diff = np.asarray(theta) - np.asarray(zeta)
    return {
        "row_space_gap": float(np.linalg.norm(P @ diff)),
        "null_space_gap": float(np.linalg.norm(diff - P @ diff)),
        "idempotence_error": float(np.linalg.norm(P @ P - P)),
        "symmetry_error": float(np.linalg.norm(P - P.T)),
    }


# ---------------------------------------------------------------------------
# max margin


def nnls(A: np.ndarray, b: np.ndarray, maxiter: int | None = None) -> tuple[np.ndarray, float]:
    """Lawson-Hanson active-set solution of ``min ||A x - b||`` subject to ``x >= 0``."""
    m, n = A.shape
    maxiter = maxiter or 30 * max(n, 1)
    x = np.zeros(n)
    passive = np.zeros(n, dtype=bool)
    tol = 10 * np.finfo(np.float64).eps * np.abs(A).sum(axis=0).max(initial=0.0) * max(m, n)
    w = A.T @ b
    it = 0
    while (~passive).any() and np.max(np.where(passive, -np.inf, w)) > tol:
        passive[np.argmax(np.where(passive, -np.inf, w))] = True
        while True:
            it += 1
            if it > maxiter:
                raise ConvergenceError("nnls iteration limit reached")
            z = np.zeros(n)
            z[passive] = np.linalg.lstsq(A[:, passive], b, rcond=None)[0]
            if z[passive].min() > 0:
                break
            # step back to the boundary and drop the variables that hit zero
            neg = passive & (z <= 0)
            alpha = np.min(x[neg] / (x[neg] - z[neg]))
            x = x + alpha * (z - x)
            passive &= x > tol
            x[~passive] = 0.0
        x = z
        w = A.T @ (b - A @ x)
    return x, float(np.linalg.norm(A @ x - b))


def _least_distance(G: np.ndarray) -> np.ndarray:
    """Minimum-norm ``b`` with ``G b >= 1`` (Lawson-Hanson least-distance programming through NNLS)."""
    n, d = G.shape
    E = np.vstack([G.T, np.ones((1, n))])
    f = np.zeros(d + 1)
    f[-1] = 1.0
    w, _ = nnls(E, f)
    r = E @ w - f
    if abs(r[-1]) < 1e-14:
        raise ConvergenceError("constraints are infeasible (data not separable)")
    return -r[:d] / r[-1]


def _kkt_multipliers(u2theta: np.ndarray, support: np.ndarray) -> tuple[np.ndarray, float]:
    """Nonnegative combination of the active rows reproducing ``U^2 theta``, and its relative residual."""
    if support.shape[0] == 0:
        return np.zeros(0), float(np.linalg.norm(u2theta))
    alpha, res = nnls(support.T, u2theta)
    return alpha, float(res / max(np.linalg.norm(u2theta), 1e-300))


def max_margin_solve(X, Y, u=None, active_tol: float = 1e-4) -> Estimator:
    """Minimize ``||diag(u) theta||^2`` subject to ``y_i x_i . theta >= 1``.

    Solved as a least-distance program in normalized coordinates, then polished on
    the active set.
    """
    X = np.asarray(X, dtype=np.float64)
    Y = np.asarray(Y, dtype=np.float64)
    n, d = X.shape
    if not np.all(np.isin(Y, (-1.0, 1.0))):
        raise ValueError("labels must be in {-1, +1}")
    u = np.ones(d) if u is None else _check_u(u, d)
    G = (Y[:, None] * X) / u  # constraints in normalized coordinates b = u * theta
    b = _least_distance(G)

    # polish: exact min-norm point of the detected active constraints, kept only if it
    # stays feasible and fits the stationarity condition at least as well
    polished = False
    active = G @ b <= 1.0 + active_tol
    if active.any():
        b_eq = lstsq_min_norm(G[active], np.ones(int(active.sum())))
        if np.min(G @ b_eq) >= 1.0 - 1e-9:
            _, res_eq = _kkt_multipliers(b_eq, G[active])
            _, res_cur = _kkt_multipliers(b, G[active])
            if res_eq <= res_cur:
                b, polished = b_eq, True

    theta = b / u
    margins = Y * (X @ theta)
    active = margins <= 1.0 + active_tol
    support = Y[active, None] * X[active]
    alpha, stat = _kkt_multipliers(u * u * theta, support)
    min_margin = float(margins.min())
    if min_margin < 1.0 - 1e-6:
        raise ConvergenceError(f"max-margin solve ended with max violation {1.0 - min_margin:.3g}")
    return Estimator(
        theta,
        "max_margin" if np.all(u == 1.0) else "normalized_max_margin",
        0.0,
        {
            "min_margin": min_margin,
            "stationarity_residual": stat,
            "multipliers": alpha,
            "active": np.flatnonzero(active),
            "active_fraction": float(active.mean()),
            "polished": polished,
        },
    )


# ---------------------------------------------------------------------------
# centering


def centering_analysis(X, Y, probes=None) -> dict:
    """Compare the raw min-norm interpolant with the one fit on mean-centered data.

    The centered predictor is ``(x - mu_X) . theta + mu_Y``.
    """
    X = np.asarray(X, dtype=np.float64)
    Y = np.asarray(Y, dtype=np.float64)
    if X.shape[0] < 2:
        raise ValueError("centering needs n >= 2")
    mu_x = X.mean(axis=0)
    mu_y = Y.mean()
    # truncated SVD so an already-centered X (rank n - 1) is still handled
    zeta = lstsq_min_norm(X, Y)
    Xc = X - mu_x
    if numerical_rank(Xc) == 0:
        raise RankError("centered matrix has numerical rank 0")
    theta = lstsq_min_norm(Xc, Y - mu_y)

    def raw(Z):
        return Z @ zeta

    def centered(Z):
        return (Z - mu_x) @ theta + mu_y

    report = {
        "in_sample_gap": float(np.max(np.abs(raw(X) - centered(X)))),
        "param_gap": float(np.linalg.norm(theta - zeta)),
        "centered_rank": numerical_rank(Xc),
        "zeta": zeta,
        "theta": theta,
    }
    if probes is not None:
        probes = np.asarray(probes, dtype=np.float64)
        report["off_sample_gap"] = float(np.max(np.abs(raw(probes) - centered(probes))))
    return report


# ---------------------------------------------------------------------------
# low-variance bias statistic


def group_ratio(theta: np.ndarray, low_count: int) -> float:
    """Mean |weight| on the first ``low_count`` features over mean |weight| on the rest."""
    a = np.abs(theta)
    return float(a[:low_count].mean() / a[low_count:].mean())


@dataclass
class BiasRow:
    seed: int
    n: int
    d: int
    sigma_low: float
    sigma_high: float
    r_unnorm: float
    r_norm: float
    residual_unnorm: float
    residual_norm: float


def bias_instance(seed: int, n: int, d: int, low_count: int, sigma_low: float, sigma_high: float,
                  u_source: str = "true") -> BiasRow:
    if u_source not in ("true", "sample"):
        raise ValueError(f"unknown u_source {u_source!r}")
    rng = stream(seed, "variance-bias", n, d)
    sig = np.r_[np.full(low_count, sigma_low), np.full(d - low_count, sigma_high)]
    X = rng.normal(size=(n, d)) * sig
    theta_star = rng.normal(size=d)
    Y = X @ theta_star
    u = X.std(axis=0) if u_source == "sample" else sig
    z = min_norm_solve(X, Y)
    t = normalized_min_norm_solve(X, Y, u)
    return BiasRow(seed, n, d, sigma_low, sigma_high, group_ratio(z.theta, low_count),
                   group_ratio(t.theta, low_count), z.residual, t.residual)


def variance_bias_statistic(seeds, n: int, d: int, low_count: int, sigma_low: float, sigma_high: float,
                            u_source: str = "true") -> dict:
    """Per-seed low/high weight ratios of both estimators, plus their medians."""
    if not sigma_low > 0 or not sigma_high > 0:
        raise ValueError("feature standard deviations must be positive")
    if sigma_low > sigma_high:
        raise ValueError("sigma_low must not exceed sigma_high")
    if d <= n:
        raise ValueError("need d > n")
    if not 0 < low_count < d:
        raise ValueError("low_count must split the features into two nonempty groups")
    rows = [bias_instance(s, n, d, low_count, sigma_low, sigma_high, u_source) for s in seeds]
    return {
        "rows": rows,
        "median_r_unnorm": float(np.median([r.r_unnorm for r in rows])),
        "median_r_norm": float(np.median([r.r_norm for r in rows])),
    }


def analytic_ratio_gain(d: int, low_count: int, sigma_low: float, sigma_high: float) -> float:
    """Ratio gain on the one-sample instance x = (1, ..., 1), y = 1; equals (sigma_high / sigma_low)^2."""
    X = np.ones((1, d))
    Y = np.ones(1)
    u = np.r_[np.full(low_count, sigma_low), np.full(d - low_count, sigma_high)]
    z = min_norm_solve(X, Y).theta
    t = normalized_min_norm_solve(X, Y, u).theta
    return group_ratio(t, low_count) / group_ratio(z, low_count)


def bias_rows_csv(rows: list[BiasRow]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["seed", "n", "d", "sigma_low", "sigma_high", "r_unnorm", "r_norm", "residual_unnorm",
                "residual_norm"])
    for r in rows:
        w.writerow([r.seed, r.n, r.d, repr(r.sigma_low), repr(r.sigma_high), repr(r.r_unnorm), repr(r.r_norm),
                    repr(r.residual_unnorm), repr(r.residual_norm)])
    return buf.getvalue()
