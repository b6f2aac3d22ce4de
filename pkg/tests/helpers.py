"""Shared builders and independent oracles for the test suite.

The oracles below use their own parameter layout and scipy.stats
densities; nothing is imported from ``zihhh.likelihood``.
"""

from __future__ import annotations

import numpy as np
from scipy import optimize, special, stats

from zihhh.covariance import CovarianceSpec, n_spherical
from zihhh.data_model import SurveillanceData, build_weights
from zihhh.design import Component, ModelFormula, assemble_design
from zihhh.likelihood import LikelihoodContext

PATH3 = np.array([[0, 1, 0], [1, 0, 1], [0, 1, 0]], dtype=float)


def central_diff(f, x, h=1e-5):
    """Central differences of a scalar or vector function, one column per coordinate."""
    x = np.asarray(x, dtype=float)
    cols = []
    for j in range(x.size):
        e = np.zeros_like(x)
        e[j] = h
        cols.append((np.asarray(f(x + e)) - np.asarray(f(x - e))) / (2 * h))
    return np.stack(cols, axis=-1)


def random_counts(rng, T, R, mean=4.0, zero_frac=0.3):
    y = rng.negative_binomial(2, 2 / (2 + mean), size=(T, R))
    y[rng.random((T, R)) < zero_frac] = 0
    return y


def full_instance(seed, T=20, R=3, structure="correlated"):
    """All four components, covariates, seasonality, AR lag in zi, unit psi
    and random intercepts in every component."""
    rng = np.random.default_rng(seed)
    y = random_counts(rng, T, R)
    cov1 = rng.normal(size=(T, R))
    cov2 = rng.uniform(0.5, 1.5, size=(T, R))
    data = SurveillanceData(y, [f"u{i}" for i in range(R)], freq=26,
                            covariates={"z1": cov1}, offsets={"o1": cov2}, adjacency=PATH3[:R, :R])
    formula = ModelFormula(
        ar=Component(covariates=("z1",), random=True),
        ne=Component(offset="o1", random=True),
        end=Component(seasonality=((26, 1),), offset="o1", random=True),
        zi=Component(covariates=("z1",), seasonality=((26, 1),), lag=True, random=True),
        family="nb", psi="unit", random_effects=structure)
    design = assemble_design(formula, data)
    x = np.zeros(design.P)
    x[design.theta_slice] = rng.normal(0, 0.3, design.n_theta)
    for name, base in (("ar", -0.7), ("ne", -1.0), ("end", 0.8), ("zi", -0.5)):
        x[design.index(f"{name}.intercept")] = base + rng.normal(0, 0.2)
    x[design.index("zi.y_lag")] = -0.2 + rng.normal(0, 0.05)
    x[design.b_slice] = rng.normal(0, 0.3, design.n_b)
    x[design.psi_slice] = rng.uniform(-0.5, 2.0, design.n_psi)
    C = 4
    r = rng.normal(0, 0.7, n_spherical(C)) if structure == "correlated" else ()
    cov = CovarianceSpec(structure, ("ar", "ne", "end", "zi"),
                         log_sigma=rng.normal(-0.8, 0.3, C), spherical_r=r, R=R)
    return data, formula, design, LikelihoodContext(design), x, cov


# Plain NB / Poisson HHH oracle -------------------------------------------


class HHHOracle:
    """Endemic-epidemic likelihood without zero inflation or random effects.

    Parameters are ordered component by component (ar, ne, end), each as
    [intercept, covariates...], followed by log k (one or one per unit) for
    the NB family.
    """

    def __init__(self, Y, W, comps, family="nb", psi="shared"):
        self.Y = np.asarray(Y, float)
        self.W = np.asarray(W, float)
        self.comps = comps  # name -> (list of T x R covariate matrices, T x R log offset)
        self.family = family
        self.psi = psi
        self.names = [n for n in ("ar", "ne", "end") if n in comps]
        self.sizes = [1 + len(comps[n][0]) for n in self.names]
        T, R = self.Y.shape
        self.n_k = 0 if family == "poisson" else (1 if psi == "shared" else R)
        self.P = sum(self.sizes) + self.n_k
        self.y = self.Y[1:]
        self.lagged = {"ar": self.Y[:-1], "ne": self.Y[:-1] @ self.W,
                       "end": np.ones_like(self.y)}

    def _design(self, name):
        covs, _ = self.comps[name]
        return [np.ones_like(self.y)] + [c[1:] for c in covs]

    def _parts(self, p):
        pos = 0
        parts = {}
        for name, size in zip(self.names, self.sizes):
            beta = p[pos:pos + size]
            X = self._design(name)
            eta = sum(b * x for b, x in zip(beta, X)) + self.comps[name][1][1:]
            parts[name] = (pos, X, np.exp(eta) * self.lagged[name])
            pos += size
        mu = sum(v[2] for v in parts.values())
        k = None
        if self.n_k:
            lk = p[pos:]
            k = np.exp(lk[0]) * np.ones_like(self.y) if self.psi == "shared" else np.exp(lk)[None, :] * np.ones_like(self.y)
        return parts, mu, k, pos

    def loglik(self, p):
        _, mu, k, _ = self._parts(p)
        if k is None:
            return float(np.sum(stats.poisson.logpmf(self.y, mu)))
        return float(np.sum(stats.nbinom.logpmf(self.y, k, k / (k + mu))))

    def _cell_derivs(self, mu, k):
        y = self.y
        if k is None:
            return y / mu - 1, -y / mu ** 2, None, None, None
        dmu = y / mu - (y + k) / (k + mu)
        dmumu = -y / mu ** 2 + (y + k) / (k + mu) ** 2
        dk = special.digamma(y + k) - special.digamma(k) + np.log(k / (k + mu)) + (mu - y) / (k + mu)
        dkk = (special.polygamma(1, y + k) - special.polygamma(1, k) + 1 / k - 1 / (k + mu)
               - (mu - y) / (k + mu) ** 2)
        dmuk = (y - mu) / (k + mu) ** 2
        return dmu, dmumu, k * dk, k * k * dkk + k * dk, k * dmuk

    def _k_index(self, pos):
        T1, R = self.y.shape
        if self.psi == "shared":
            return [np.full((T1, R), True)], [pos]
        return [np.broadcast_to(np.arange(R) == r, (T1, R)) for r in range(R)], list(range(pos, pos + R))

    def score(self, p):
        parts, mu, k, pos = self._parts(p)
        dmu, _, dpsi, _, _ = self._cell_derivs(mu, k)
        s = np.zeros(self.P)
        for name, (start, X, m) in parts.items():
            for j, x in enumerate(X):
                s[start + j] = np.sum(dmu * m * x)
        if k is not None:
            for mask, i in zip(*self._k_index(pos)):
                s[i] = np.sum(dpsi[mask])
        return s

    def hessian(self, p):
        parts, mu, k, pos = self._parts(p)
        dmu, dmumu, dpsi, dpsipsi, dmupsi = self._cell_derivs(mu, k)
        H = np.zeros((self.P, self.P))
        grads = []
        for name, (start, X, m) in parts.items():
            for j, x in enumerate(X):
                grads.append((start + j, name, m * x, x))
        for i, ni, gi, xi in grads:
            for j, nj, gj, xj in grads:
                val = np.sum(dmumu * gi * gj)
                if ni == nj:
                    val += np.sum(dmu * gi * xj)  # d2 mu / d beta d beta' = m x x'
                H[i, j] = val
        if k is not None:
            for mask, kk in zip(*self._k_index(pos)):
                H[kk, kk] = np.sum(dpsipsi[mask])
                for i, _, gi, _ in grads:
                    H[i, kk] = H[kk, i] = np.sum((dmupsi * gi)[mask])
        return H

    def fit(self, p0, tol=1e-11, max_iter=200):
        """trust-exact, then undamped Newton polishing to |score| < tol."""
        res = optimize.minimize(lambda p: -self.loglik(p), p0, jac=lambda p: -self.score(p),
                                hess=lambda p: -self.hessian(p), method="trust-exact",
                                options={"gtol": tol, "maxiter": max_iter})
        p = res.x
        for _ in range(50):
            g = self.score(p)
            if np.max(np.abs(g)) < tol:
                break
            p = p - np.linalg.solve(self.hessian(p), g)
        return p, float(np.max(np.abs(self.score(p))))


def oracle_for(design_data, formula):
    """HHHOracle matching a ModelFormula with ar/ne/end covariates and offsets."""
    data = design_data
    comps = {}
    for name in ("ar", "ne", "end"):
        c = formula.component(name)
        if c is None:
            continue
        covs = [data.covariates[v] for v in c.covariates]
        off = np.log(data.offsets[c.offset]) if c.offset else np.zeros(data.counts.shape)
        comps[name] = (covs, off)
    W = build_weights(data.adjacency, formula.normalize_weights)
    return HHHOracle(data.counts, W, comps, formula.family, formula.psi)


def oracle_permutation(design, oracle):
    """Index map: oracle parameter i lives at design position perm[i]."""
    perm = []
    for name in oracle.names:
        cd = design.comps[name]
        perm += list(cd.fixed_idx)
    perm += list(range(design.psi_slice.start, design.P))
    return np.array(perm)


def zinb_loglik_oracle(y, mu, psi, gamma):
    """Direct mixture log-likelihood from scipy densities."""
    y, mu, psi, gamma = np.broadcast_arrays(*(np.asarray(a, float) for a in (y, mu, psi, gamma)))
    out = np.empty(y.shape)
    for i in np.ndindex(y.shape):
        if psi[i] == 0:
            f = stats.poisson.pmf(y[i], mu[i])
        else:
            k = 1 / psi[i]
            f = stats.nbinom.pmf(y[i], k, k / (k + mu[i]))
        out[i] = np.log(gamma[i] * (y[i] == 0) + (1 - gamma[i]) * f)
    return out
