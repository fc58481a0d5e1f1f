"""nu one-class SVM with RBF kernel on latent codes.

Solves the standard dual

    minimize   0.5 * sum_ij alpha_i alpha_j k(z_i, z_j)
    subject to 0 <= alpha_i <= 1/(nu*N),  sum_i alpha_i = 1

with pairwise working-set coordinate descent (SMO-style), most-violating
pair selection, and lowest-index tie-breaking so fits are reproducible.
The decision function is d(z) = sum_i alpha_i k(z_i, z) - rho; points
with d(z) < 0 are candidate anomalies.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

DEFAULT_TOLERANCE = 1e-6
DEFAULT_MAX_ITER = 200_000


@dataclass(frozen=True)
class OneClassSvmModel:
    """Fitted boundary: support rows (alpha > 0) with their coefficients."""

    support_codes: np.ndarray    # (n_sv, dim)
    support_alphas: np.ndarray   # (n_sv,), each in (0, 1/(nu*N)], summing to 1
    rho: float
    gamma: float
    nu: float
    n_train: int
    degenerate: bool             # all training codes identical
    converged: bool
    iterations: int
    boundary_tolerance: float = DEFAULT_TOLERANCE

    @property
    def dim(self) -> int:
        return self.support_codes.shape[1]


def rbf_gamma_heuristic(codes) -> float:
    """Kernel width 1/(dim * mean per-component variance); 1.0 when degenerate."""
    codes = np.asarray(codes, dtype=np.float64)
    mean_var = float(codes.var(axis=0).mean())
    if mean_var <= 0.0:
        return 1.0
    return 1.0 / (codes.shape[1] * mean_var)


def _rbf_cross(a: np.ndarray, b: np.ndarray, gamma: float) -> np.ndarray:
    sq = (np.square(a).sum(axis=1)[:, None]
          + np.square(b).sum(axis=1)[None, :]
          - 2.0 * (a @ b.T))
    np.maximum(sq, 0.0, out=sq)
    return np.exp(-gamma * sq)


def fit_ocsvm(codes, nu: float, gamma: float, tolerance: float = DEFAULT_TOLERANCE,
              max_iter: int = DEFAULT_MAX_ITER) -> OneClassSvmModel:
    """Fit the nu one-class SVM to KKT tolerance on the given codes."""
    z = np.asarray(codes, dtype=np.float64)
    if z.ndim != 2 or z.shape[0] < 2:
        raise ValueError("need a 2-D code matrix with at least 2 rows")
    if not 0.0 < nu <= 1.0:
        raise ValueError(f"nu must lie in (0, 1], got {nu}")
    if gamma <= 0.0:
        raise ValueError(f"gamma must be positive, got {gamma}")
    n = z.shape[0]
    cap = 1.0 / (nu * n)
    degenerate = bool(np.all(z == z[0]))

    q = _rbf_cross(z, z, gamma)

    # Deterministic feasible start: fill the box from the lowest index.
    alpha = np.zeros(n)
    full = int(np.floor(nu * n))
    alpha[:full] = cap
    if full < n:
        alpha[full] = 1.0 - full * cap
    grad = q @ alpha

    iterations = 0
    converged = False
    box_slack = cap * 1e-12
    while iterations < max_iter:
        up = alpha < cap - box_slack       # alpha_i may still grow
        low = alpha > box_slack            # alpha_j may still shrink
        if not up.any() or not low.any():
            converged = True
            break
        # Most violating pair; argmin/argmax take the lowest index on ties.
        i = np.flatnonzero(up)[np.argmin(grad[up])]
        j = np.flatnonzero(low)[np.argmax(grad[low])]
        if grad[j] - grad[i] < tolerance:
            converged = True
            break
        eta = q[i, i] + q[j, j] - 2.0 * q[i, j]
        if eta <= 0.0:
            eta = 1e-12
        step = (grad[j] - grad[i]) / eta
        step = min(step, cap - alpha[i], alpha[j])
        alpha[i] += step
        alpha[j] -= step
        grad += step * (q[:, i] - q[:, j])
        iterations += 1

    # Offset from the KKT conditions: free support vectors sit on d(z)=0.
    free = (alpha > cap * 1e-8) & (alpha < cap * (1.0 - 1e-8))
    at_cap = alpha >= cap * (1.0 - 1e-8)
    at_zero = alpha <= cap * 1e-8
    if free.any():
        rho = float(grad[free].mean())
    elif at_cap.any() and at_zero.any():
        rho = float((grad[at_cap].max() + grad[at_zero].min()) / 2.0)
    elif at_cap.any():
        rho = float(grad[at_cap].max())
    else:
        rho = float(grad[at_zero].min())

    support = alpha > 0.0
    return OneClassSvmModel(
        support_codes=z[support].copy(),
        support_alphas=alpha[support].copy(),
        rho=rho,
        gamma=gamma,
        nu=nu,
        n_train=n,
        degenerate=degenerate,
        converged=converged,
        iterations=iterations,
        boundary_tolerance=tolerance,
    )


def decision_values(model: OneClassSvmModel, codes) -> np.ndarray:
    """d(z) for each row; negative means candidate anomaly."""
    z = np.asarray(codes, dtype=np.float64)
    if z.ndim != 2 or z.shape[1] != model.dim:
        raise ValueError(f"expected codes with {model.dim} columns")
    k = _rbf_cross(z, model.support_codes, model.gamma)
    return k @ model.support_alphas - model.rho


def predict_candidates(model: OneClassSvmModel, codes) -> np.ndarray:
    """Indices with negative decision value; boundary cases are inliers.

    A dual solved to finite KKT tolerance places on-boundary points at
    d(z) = +/-O(tolerance), so "negative" is resolved at that scale:
    flagged means d(z) < -boundary_tolerance.
    """
    return np.flatnonzero(decision_values(model, codes) < -model.boundary_tolerance)


def dual_objective(model: OneClassSvmModel) -> float:
    """0.5 * alpha^T Q alpha at the fitted solution (support block suffices)."""
    k = _rbf_cross(model.support_codes, model.support_codes, model.gamma)
    return float(0.5 * model.support_alphas @ k @ model.support_alphas)
