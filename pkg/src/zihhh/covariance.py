"""Covariance of the unit-level random intercepts.

Random effects are stacked component-major, ``b = (b_1, ..., b_C)`` with
each block of length R.  Their covariance is either diagonal,
``blockdiag(sigma_c^2 I_R)``, or ``Omega kron I_R`` with
``Omega = D L L^T D``: D holds the standard deviations and the rows of
the lower-triangular L are unit vectors built from unconstrained reals
(spherical parametrization).
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

STRUCTURES = ("none", "uncorrelated", "correlated")


def n_spherical(C):
    return C * (C - 1) // 2


def build_cholesky_factor(r, C):
    """Lower-triangular L with unit-norm rows.

    Row i uses ``r[i(i-1)/2 : i(i+1)/2]``; entry (i, j) is
    ``r_k / sqrt(r_k^2 + 1)`` times the product of ``1 / sqrt(r_m^2 + 1)``
    over the earlier parameters m of that row, and the diagonal is the
    full product.
    """
    r = np.asarray(r, dtype=float)
    if r.shape != (n_spherical(C),):
        raise ValueError(f"need {n_spherical(C)} spherical parameters for C={C}")
    L = np.zeros((C, C))
    L[0, 0] = 1.0
    k = 0
    for i in range(1, C):
        scale = 1.0
        for j in range(i):
            h = np.sqrt(r[k] ** 2 + 1.0)
            L[i, j] = scale * r[k] / h
            scale /= h
            k += 1
        L[i, i] = scale
    return L


@dataclass(frozen=True)
class CovarianceSpec:
    structure: str
    components: tuple = ()
    log_sigma: np.ndarray = field(default_factory=lambda: np.zeros(0))
    spherical_r: np.ndarray = field(default_factory=lambda: np.zeros(0))
    R: int = 1

    def __post_init__(self):
        if self.structure not in STRUCTURES:
            raise ValueError(f"unknown covariance structure {self.structure!r}")
        ls = np.asarray(self.log_sigma, dtype=float).reshape(-1)
        rr = np.asarray(self.spherical_r, dtype=float).reshape(-1)
        C = len(self.components)
        if self.structure == "none" and C:
            raise ValueError("structure 'none' cannot carry random-effect components")
        if self.structure != "none" and C == 0:
            raise ValueError("random-effect covariance needs at least one component")
        if self.structure == "correlated" and C < 2:
            raise ValueError("correlated random effects need at least two components")
        if ls.shape != (C,):
            raise ValueError(f"need {C} log standard deviations, got {ls.size}")
        nr = n_spherical(C) if self.structure == "correlated" else 0
        if rr.size == 0 and nr:
            rr = np.zeros(nr)
        if rr.shape != (nr,):
            raise ValueError(f"need {nr} spherical parameters, got {rr.size}")
        object.__setattr__(self, "components", tuple(self.components))
        object.__setattr__(self, "log_sigma", ls)
        object.__setattr__(self, "spherical_r", rr)

    @property
    def C(self):
        return len(self.components)

    @property
    def sigma(self):
        return np.exp(self.log_sigma)

    @property
    def n_params(self):
        return self.C + self.spherical_r.size

    def to_vector(self):
        return np.concatenate([self.log_sigma, self.spherical_r])

    def from_vector(self, x):
        x = np.asarray(x, dtype=float)
        return replace(self, log_sigma=x[:self.C], spherical_r=x[self.C:])


def omega(spec: CovarianceSpec):
    """C x C covariance of one unit's random intercepts."""
    if spec.structure == "correlated":
        DL = spec.sigma[:, None] * build_cholesky_factor(spec.spherical_r, spec.C)
        return DL @ DL.T
    return np.diag(spec.sigma ** 2)


def correlation(spec: CovarianceSpec):
    if spec.structure != "correlated":
        return np.eye(spec.C)
    L = build_cholesky_factor(spec.spherical_r, spec.C)
    return L @ L.T


def omega_inverse(spec: CovarianceSpec):
    if spec.structure == "correlated":
        DL = spec.sigma[:, None] * build_cholesky_factor(spec.spherical_r, spec.C)
        Linv = np.linalg.solve(DL, np.eye(spec.C))  # DL is lower triangular
        return Linv.T @ Linv
    return np.diag(np.exp(-2 * spec.log_sigma))


def sigma_logdet(spec: CovarianceSpec):
    """log|Sigma| from the parametrization, without factorizing anything."""
    if spec.structure == "none":
        return 0.0
    val = 2 * spec.R * np.sum(spec.log_sigma)
    if spec.structure == "correlated":
        val -= spec.R * np.sum(np.log1p(spec.spherical_r ** 2))
    return float(val)


def quad_form_and_solve(b, spec: CovarianceSpec):
    """Return ``(b' Sigma^{-1} b, Sigma^{-1} b)`` using the Kronecker structure."""
    b = np.asarray(b, dtype=float)
    if spec.structure == "none":
        if b.size:
            raise ValueError("random effects given but covariance structure is 'none'")
        return 0.0, b.copy()
    B = b.reshape(spec.C, spec.R)
    sol = (omega_inverse(spec) @ B).reshape(-1)
    return float(b @ sol), sol


def sigma_inverse(spec: CovarianceSpec):
    """Dense ``Sigma^{-1}`` (C*R square); only for building F_pen."""
    if spec.structure == "none":
        return np.zeros((0, 0))
    return np.kron(omega_inverse(spec), np.eye(spec.R))


def initial_spec(structure, components, R, sigma=0.3):
    components = tuple(components)
    if structure == "none" or not components:
        return CovarianceSpec("none", (), R=R)
    return CovarianceSpec(structure, components,
                          log_sigma=np.full(len(components), np.log(sigma)), R=R)
