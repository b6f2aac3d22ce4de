"""Next-generation matrices and the effective reproduction number."""

from __future__ import annotations

import numpy as np


def build_next_gen(lam, gamma, phi=None, weights=None):
    """A_t with diagonal ``(1 - gamma_r) lambda_r`` and off-diagonal
    ``(1 - gamma_r) phi_r w[r', r]`` in row r, column r'.
    """
    lam = np.asarray(lam, dtype=float)
    gamma = np.broadcast_to(np.asarray(gamma, dtype=float), lam.shape)
    R = lam.size
    A = np.zeros((R, R))
    if phi is not None and weights is not None:
        phi = np.broadcast_to(np.asarray(phi, dtype=float), lam.shape)
        A = ((1.0 - gamma) * phi)[:, None] * np.asarray(weights, dtype=float).T
        np.fill_diagonal(A, 0.0)
    A[np.diag_indices(R)] = (1.0 - gamma) * lam
    return A


def reproduction_number(A, tol=1e-12, max_iter=100_000):
    """Dominant eigenvalue of a nonnegative matrix by power iteration.

    Starts from the uniform vector and stops once the Rayleigh quotient
    settles and the eigen-residual is negligible; falls back to a dense
    eigensolver if that does not happen within ``max_iter`` steps.
    """
    A = np.asarray(A, dtype=float)
    if A.shape == (1, 1):
        return abs(float(A[0, 0]))
    if not A.any():
        return 0.0
    x = np.full(A.shape[0], 1.0 / np.sqrt(A.shape[0]))
    rq_old = np.inf
    for _ in range(max_iter):
        y = A @ x
        ny = np.linalg.norm(y)
        if ny == 0.0:
            break
        rq = float(x @ y)
        resid = np.linalg.norm(y - rq * x)
        if abs(rq - rq_old) <= tol * max(1.0, abs(rq)) and resid <= 1e-10 * ny:
            return abs(rq)
        rq_old = rq
        x = y / ny
    return float(np.max(np.abs(np.linalg.eigvals(A))))


def reproduction_series(lam, gamma, phi=None, weights=None):
    """R_t for every row of (T' x R) surfaces.

    Without a neighbourhood component A_t is diagonal and R_t is simply
    ``max_r (1 - gamma_rt) lambda_rt``.
    """
    lam = np.atleast_2d(lam)
    gamma = np.broadcast_to(gamma, lam.shape)
    if phi is None or weights is None or not np.any(phi):
        return np.max((1.0 - gamma) * lam, axis=1)
    phi = np.broadcast_to(phi, lam.shape)
    return np.array([reproduction_number(build_next_gen(lam[i], gamma[i], phi[i], weights))
                     for i in range(lam.shape[0])])
