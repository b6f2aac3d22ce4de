"""Negative binomial and zero-inflated negative binomial distributions.

The NB law is parametrized by its mean ``mu`` and overdispersion ``psi``
(variance ``mu * (1 + psi * mu)``), i.e. size ``1/psi`` and success
probability ``1 / (1 + psi * mu)``.  ``psi = 0`` is the Poisson limit.
All functions broadcast over array arguments.
"""

from __future__ import annotations

from typing import NamedTuple

import numpy as np
from scipy import special, stats


class ZinbParams(NamedTuple):
    mu: np.ndarray | float
    psi: np.ndarray | float
    gamma: np.ndarray | float = 0.0


K_ASYMPTOTIC = 1e3  # size above which Stirling-type expansions replace gammaln/digamma
PSI_POISSON = np.finfo(float).tiny  # below this 1/psi overflows; treated as the Poisson limit


def lgamma_ratio(y, k):
    """log Gamma(y + k) - log Gamma(k) without cancellation for large ``k``."""
    y, k = np.broadcast_arrays(np.asarray(y, float), np.asarray(k, float))
    out = np.empty(y.shape)
    big = k >= K_ASYMPTOTIC
    small = ~big
    if small.any():
        out[small] = special.gammaln(y[small] + k[small]) - special.gammaln(k[small])
    if big.any():
        yb, kb = y[big], k[big]
        z = kb + yb
        # Stirling: (z - 1/2) log z - z + sum of B_2n / (2n (2n-1) z^(2n-1))
        lead = (z - 0.5) * np.log1p(yb / kb) + yb * np.log(kb) - yb
        corr = ((1 / z - 1 / kb) / 12 - (z ** -3 - kb ** -3) / 360
                + (z ** -5 - kb ** -5) / 1260)
        out[big] = lead + corr
    return out[()] if out.ndim == 0 else out


def log1p_minus(d):
    """log(1 + d) - d, accurate for small ``d``."""
    d = np.asarray(d, float)
    out = np.log1p(d) - d
    small = np.abs(d) < 1e-2
    if np.any(small):
        ds = d[small]
        acc = np.zeros_like(ds)
        for j in range(12, 1, -1):
            acc = acc * ds + (-1.0) ** (j + 1) / j
        out[small] = acc * ds * ds
    return out


def _check_mu(mu):
    if np.any(~(mu > 0)):
        raise ValueError("NB mean must be strictly positive")


def nb_logpmf(y, mu, psi):
    y, mu, psi = np.broadcast_arrays(np.asarray(y, float), np.asarray(mu, float),
                                     np.asarray(psi, float))
    _check_mu(mu)
    if np.any(psi < 0):
        raise ValueError("overdispersion must be nonnegative")
    out = np.empty(y.shape)
    pois = psi < PSI_POISSON
    if pois.any():
        yp, mp = y[pois], mu[pois]
        out[pois] = special.xlogy(yp, mp) - mp - special.gammaln(yp + 1)
    nb = ~pois
    if nb.any():
        yn, mn, pn = y[nb], mu[nb], psi[nb]
        k = 1.0 / pn
        pm = pn * mn
        out[nb] = (lgamma_ratio(yn, k) - special.gammaln(yn + 1)
                   - k * np.log1p(pm) + special.xlogy(yn, pm / (1.0 + pm)))
    return out[()] if out.ndim == 0 else out


def zinb_logpmf(y, mu, psi, gamma=0.0):
    """log(gamma * 1{y=0} + (1 - gamma) * f_NB(y))."""
    y = np.asarray(y, float)
    lf = nb_logpmf(y, mu, psi)
    y, lf, gamma = np.broadcast_arrays(y, np.asarray(lf), np.asarray(gamma, float))
    if np.any((gamma < 0) | (gamma > 1)):
        raise ValueError("zero-inflation probability must lie in [0, 1]")
    with np.errstate(divide="ignore"):
        log1mg = np.log1p(-gamma)
        zero = np.logaddexp(np.log(gamma), log1mg + lf)
    out = np.where(y == 0, zero, log1mg + lf)
    out = np.where(gamma == 0, lf, out)
    return out[()] if out.ndim == 0 else out


def zinb_mean(mu, gamma=0.0):
    return (1.0 - np.asarray(gamma)) * np.asarray(mu)


def zinb_var(mu, psi, gamma=0.0):
    mu, psi, gamma = (np.asarray(a, float) for a in (mu, psi, gamma))
    return (1.0 - gamma) * (1.0 + mu * psi + gamma * mu) * mu


def nb_cdf(y, mu, psi):
    y, mu, psi = np.broadcast_arrays(np.asarray(y, float), np.asarray(mu, float),
                                     np.asarray(psi, float))
    _check_mu(mu)
    out = np.empty(y.shape)
    pois = psi < PSI_POISSON
    out[pois] = stats.poisson.cdf(y[pois], mu[pois])
    nb = ~pois
    out[nb] = stats.nbinom.cdf(y[nb], 1.0 / psi[nb], 1.0 / (1.0 + psi[nb] * mu[nb]))
    return out[()] if out.ndim == 0 else out


def zinb_cdf(y, mu, psi, gamma=0.0):
    """gamma + (1 - gamma) * F_NB(y)."""
    gamma = np.asarray(gamma, float)
    out = gamma + (1.0 - gamma) * nb_cdf(y, mu, psi)
    return np.minimum(out, 1.0)


def zinb_sample(rng, mu, psi, gamma=0.0, size=None):
    """Draw from the hierarchical form: W ~ Bernoulli(gamma), Y | W=0 ~ NB(mu, psi).

    NB draws use the gamma-Poisson mixture; ``psi = 0`` draws Poisson.
    """
    mu, psi, gamma = (np.asarray(a, float) for a in (mu, psi, gamma))
    if size is None:
        size = np.broadcast_shapes(mu.shape, psi.shape, gamma.shape)
    mu, psi, gamma = (np.broadcast_to(a, size) for a in (mu, psi, gamma))
    _check_mu(mu)
    w = rng.random(size) < gamma
    lam = mu.copy()
    nb = psi >= PSI_POISSON
    if nb.any():
        k = 1.0 / psi[nb]
        lam[nb] = rng.gamma(k, mu[nb] / k)
    y = rng.poisson(lam)
    y[w] = 0
    return y
