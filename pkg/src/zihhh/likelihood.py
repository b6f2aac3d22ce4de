"""Log-likelihood, penalized score and Fisher information, Laplace marginal.

Every cell's log-likelihood depends on the parameters only through three
cell-level quantities: the NB mean ``mu``, ``psi_tilde`` and the
zero-inflation linear predictor ``eta``.  Derivatives are computed per
cell in those coordinates and then chained to the packed parameter
vector.  With ``p = (1 - gamma) f / f_ZI`` (posterior probability of the
at-risk state) the HHH parts are

    dl/di       = p * dlH/di
    d2l/didj    = p * [(1 - p) dlH/di dlH/dj' + d2lH/didj']

for i, j among the ar/ne/end blocks and psi_tilde, and the zero-inflation
parts follow from d gamma / d xi = g'(eta) u.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import linalg, special

from .covariance import CovarianceSpec, quad_form_and_solve, sigma_inverse, sigma_logdet
from .design import DesignMatrices, NumericError, eval_predictors
from .distributions import K_ASYMPTOTIC, lgamma_ratio, log1p_minus


@dataclass
class CellTerms:
    """Per-cell log-likelihood with first/second derivatives in (mu, psi_tilde, eta)."""

    l: np.ndarray
    lH: np.ndarray
    surfaces: object
    g_mu: np.ndarray
    g_psi: np.ndarray
    g_eta: np.ndarray
    h_mumu: np.ndarray = None
    h_mupsi: np.ndarray = None
    h_psipsi: np.ndarray = None
    h_mueta: np.ndarray = None
    h_psieta: np.ndarray = None
    h_etaeta: np.ndarray = None


def size_derivs(y, mu, k):
    """First and second derivatives of the NB log-pmf in the size ``k``.

    For large ``k`` the O(1/k) terms cancel analytically; the remainder is
    assembled from digamma/trigamma asymptotic series.
    """
    y, mu, k = np.broadcast_arrays(*(np.asarray(a, float) for a in (y, mu, k)))
    km = k + mu
    dk = np.empty(y.shape)
    dkk = np.empty(y.shape)
    small = k < K_ASYMPTOTIC
    if small.any():
        ys, ms, ks, kms = y[small], mu[small], k[small], km[small]
        dk[small] = (special.digamma(ys + ks) - special.digamma(ks) - np.log1p(ms / ks)
                     + (ms - ys) / kms)
        dkk[small] = (special.polygamma(1, ys + ks) - special.polygamma(1, ks)
                      + ms / (ks * kms) - (ms - ys) / kms ** 2)
    big = ~small
    if big.any():
        yb, mb, kb, kmb = y[big], mu[big], k[big], km[big]
        z = kb + yb
        d = (yb - mb) / kmb
        a, b = 1.0 / kb, 1.0 / z
        yab = yb * a * b                    # y / (k z), bounded by 1/k
        # digamma(z) - digamma(k) minus its log/1-over-z leading parts
        dk[big] = (log1p_minus(d) + yab / 2 + yab * (2 + yb * a) * b / 12
                   + (b ** 4 - a ** 4) / 120 - (b ** 6 - a ** 6) / 252)
        dkk[big] = (d * d * b - yab * (2 + yb * a) * b / 2
                    - yab * (3 * b * b + 3 * yb * a * b * b + yab * yab) / 6
                    - (b ** 5 - a ** 5) / 30 + (b ** 7 - a ** 7) / 42)
    return dk, dkk


def hhh_terms(y, mu, k=None):
    """NB (size ``k``) or Poisson (``k is None``) log-pmf and its derivatives.

    Returns ``(lH, dmu, dpsi, dmumu, dmupsi, dpsipsi)`` where psi refers to
    ``psi_tilde = log k``.
    """
    if k is None:
        lH = special.xlogy(y, mu) - mu - special.gammaln(y + 1)
        dmu = y / mu - 1.0
        dmumu = -y / mu ** 2
        zero = np.zeros_like(mu)
        return lH, dmu, zero, dmumu, zero, zero
    km = k + mu
    lH = (lgamma_ratio(y, k) - special.gammaln(y + 1)
          - k * np.log1p(mu / k) + special.xlogy(y, mu / km))
    dmu = y / mu - (y + k) / km
    dmumu = -y / mu ** 2 + (y + k) / km ** 2
    dk, dkk = size_derivs(y, mu, k)
    dpsi = k * dk
    dpsipsi = k * k * dkk + k * dk
    dmupsi = k * (y - mu) / km ** 2
    return lH, dmu, dpsi, dmumu, dmupsi, dpsipsi


def cell_terms(x, design: DesignMatrices, order=2):
    surf = eval_predictors(x, design)
    y, mu = design.y, surf.mu
    k = None if design.psi_idx is None else np.exp(x[design.psi_idx])
    lH, hm, hp, hmm, hmp, hpp = hhh_terms(y, mu, k)
    n = y.size
    if "zi" in surf.eta:
        eta = surf.eta["zi"]
        gam = surf.gamma
        log_g = special.log_expit(eta)
        log_1mg = special.log_expit(-eta)
        zero = y == 0
        l = np.where(zero, np.logaddexp(log_g, log_1mg + lH), log_1mg + lH)
        p = np.where(zero, np.exp(log_1mg + lH - l), 1.0)
        # dl/deta = (1{y=0} - f) / f_ZI * g'(eta)
        g_eta = np.where(zero, -np.expm1(lH) * np.exp(log_g + log_1mg - l), -gam)
        h_etaeta = -g_eta ** 2 + g_eta * (1.0 - 2.0 * gam)
        c_eta = np.where(zero, -np.exp(log_g + log_1mg + lH - l) - g_eta * p, 0.0)
        clamped = surf.zi_clamped
        if clamped.any():
            g_eta = np.where(clamped, 0.0, g_eta)
            h_etaeta = np.where(clamped, 0.0, h_etaeta)
            c_eta = np.where(clamped, 0.0, c_eta)
    else:
        l = lH
        p = np.ones(n)
        g_eta = h_etaeta = c_eta = np.zeros(n)
    w = design.mask
    if not w.all():
        l, lH, p, g_eta, h_etaeta, c_eta = (np.where(w, a, 0.0)
                                            for a in (l, lH, p, g_eta, h_etaeta, c_eta))
        hm, hp, hmm, hmp, hpp = (np.where(w, a, 0.0) for a in (hm, hp, hmm, hmp, hpp))
    terms = CellTerms(l=l, lH=lH, surfaces=surf, g_mu=p * hm, g_psi=p * hp, g_eta=g_eta)
    if order >= 2:
        q = 1.0 - p
        terms.h_mumu = p * (q * hm * hm + hmm)
        terms.h_mupsi = p * (q * hm * hp + hmp)
        terms.h_psipsi = p * (q * hp * hp + hpp)
        terms.h_mueta = c_eta * hm
        terms.h_psieta = c_eta * hp
        terms.h_etaeta = h_etaeta
    return terms


def _mu_factors(surf, design):
    """dmu/d(eta_c) for the log-linear components."""
    return {"ar": surf.ar * design.y_own, "ne": surf.ne * design.y_nbr, "end": surf.end}


def _component_jacobian(design, name):
    """Dense d(eta_c)/d(x) restricted to the columns of component c."""
    cd = design.comps[name]
    if not cd.random:
        return cd.X
    Z = np.zeros((design.n, design.R))
    Z[np.arange(design.n), design.unit] = 1.0
    return np.hstack([cd.X, Z])


def jacobians(x, design: DesignMatrices, terms: CellTerms):
    """Dense n x P Jacobians of (mu, psi_tilde, eta) w.r.t. the packed parameters."""
    n, P = design.n, design.P
    surf = terms.surfaces
    fac = _mu_factors(surf, design)
    J_mu = np.zeros((n, P))
    for name in ("ar", "ne", "end"):
        if name in design.comps:
            J_mu[:, design.comps[name].idx] += fac[name][:, None] * _component_jacobian(design, name)
    J_psi = np.zeros((n, P))
    if design.psi_idx is not None:
        J_psi[np.arange(n), design.psi_idx] = 1.0
    J_eta = np.zeros((n, P))
    if "zi" in design.comps:
        J_eta[:, design.comps["zi"].idx] = _component_jacobian(design, "zi")
    return J_mu, J_psi, J_eta


class LikelihoodContext:
    """Read-only design plus a one-entry cache of cell terms."""

    def __init__(self, design: DesignMatrices):
        self.design = design
        self._key = None
        self._terms = None

    def terms(self, x, order=2):
        x = np.asarray(x, dtype=float)
        key = (x.tobytes(), order)
        if self._key is not None and self._key[0] == key[0] and self._key[1] >= order:
            return self._terms
        t = cell_terms(x, self.design, order=order)
        self._key, self._terms = key, t
        return t


def _ctx(ctx):
    return ctx if isinstance(ctx, LikelihoodContext) else LikelihoodContext(ctx)


def _vec(x, design):
    if hasattr(x, "theta"):
        return design.pack(x)
    return np.asarray(x, dtype=float)


def loglik(x, ctx):
    """Sum of zero-inflated NB log-probabilities over cells t = 2..T."""
    ctx = _ctx(ctx)
    x = _vec(x, ctx.design)
    l = ctx.terms(x, order=1).l
    if not np.isfinite(l).all():
        k = int(np.flatnonzero(~np.isfinite(l))[0])
        d = ctx.design
        raise NumericError(f"non-finite log-likelihood at unit {d.unit_names[d.unit[k]]}, "
                           f"t={d.time[k]}")
    return math.fsum(l)


def penalty(x, cov: CovarianceSpec, design):
    b = x[design.b_slice]
    if cov is None or cov.structure == "none":
        return 0.0, np.zeros_like(b)
    qf, sol = quad_form_and_solve(b, cov)
    return 0.5 * qf, sol


def penloglik(x, cov, ctx):
    ctx = _ctx(ctx)
    x = _vec(x, ctx.design)
    return loglik(x, ctx) - penalty(x, cov, ctx.design)[0]


def score(x, ctx):
    """Unpenalized score vector."""
    ctx = _ctx(ctx)
    d = ctx.design
    x = _vec(x, d)
    t = ctx.terms(x, order=1)
    s = np.zeros(d.P)
    fac = _mu_factors(t.surfaces, d)
    for name, cd in d.comps.items():
        w = t.g_eta if name == "zi" else t.g_mu * fac[name]
        s[cd.fixed_idx] += cd.X.T @ w
        if cd.random:
            s[cd.re_idx] += np.bincount(d.unit, weights=w, minlength=d.R)
    if d.psi_idx is not None:
        s[d.psi_slice] += np.bincount(d.psi_idx - d.psi_slice.start, weights=t.g_psi,
                                      minlength=d.n_psi)
    return s


def score_pen(x, cov, ctx):
    ctx = _ctx(ctx)
    x = _vec(x, ctx.design)
    s = score(x, ctx)
    s[ctx.design.b_slice] -= penalty(x, cov, ctx.design)[1]
    return s


def fisher(x, ctx):
    """Observed Fisher information of the unpenalized log-likelihood."""
    ctx = _ctx(ctx)
    d = ctx.design
    x = _vec(x, d)
    t = ctx.terms(x, order=2)
    J_mu, J_psi, J_eta = jacobians(x, d, t)
    M_mu = t.h_mumu[:, None] * J_mu + t.h_mupsi[:, None] * J_psi + t.h_mueta[:, None] * J_eta
    M_psi = t.h_mupsi[:, None] * J_mu + t.h_psipsi[:, None] * J_psi + t.h_psieta[:, None] * J_eta
    M_eta = t.h_mueta[:, None] * J_mu + t.h_psieta[:, None] * J_psi + t.h_etaeta[:, None] * J_eta
    H = J_mu.T @ M_mu + J_psi.T @ M_psi + J_eta.T @ M_eta
    # second derivative of mu itself: d2mu/dxi_c dxi_c' = mu-part_c * u u'
    fac = _mu_factors(t.surfaces, d)
    for name in ("ar", "ne", "end"):
        if name in d.comps:
            U = _component_jacobian(d, name)
            idx = d.comps[name].idx
            H[np.ix_(idx, idx)] += U.T @ ((t.g_mu * fac[name])[:, None] * U)
    F = -H
    return 0.5 * (F + F.T)


def penalty_matrix(cov, design):
    F = np.zeros((design.P, design.P))
    if cov is not None and cov.structure != "none":
        b = design.b_slice
        F[b, b] = sigma_inverse(cov)
    return F


def fisher_pen(x, cov, ctx):
    ctx = _ctx(ctx)
    x = _vec(x, ctx.design)
    return fisher(x, ctx) + penalty_matrix(cov, ctx.design)


def logdet_pd(F, max_tries=6):
    """log|F| via Cholesky; on failure add a ridge growing tenfold per retry.

    Returns ``None`` when F stays non-PD so the caller can reject the point.
    """
    F = np.asarray(F, dtype=float)
    if F.size == 0:
        return 0.0
    scale = float(np.mean(np.abs(np.diag(F)))) or 1.0
    ridge = 0.0
    for i in range(max_tries + 1):
        try:
            c = linalg.cholesky(F + ridge * np.eye(F.shape[0]), lower=True,
                                check_finite=True)
            return 2.0 * float(np.sum(np.log(np.diag(c))))
        except (linalg.LinAlgError, ValueError):
            ridge = 1e-8 * scale * 10.0 ** i
    return None


def marginal_loglik(cov, x, ctx, F0=None):
    """Approximate marginal log-likelihood of the covariance parameters.

    ``-1/2 log|Sigma| - 1/2 b' Sigma^{-1} b - 1/2 log|F_pen|`` at fixed
    (theta, b, psi_tilde); ``F0`` is the unpenalized Fisher information at
    ``x`` (recomputed when omitted).  Returns ``-inf`` when F_pen is not
    positive definite even after ridging.
    """
    ctx = _ctx(ctx)
    d = ctx.design
    x = _vec(x, d)
    if F0 is None:
        F0 = fisher(x, ctx)
    pen, _ = penalty(x, cov, d)
    ld = logdet_pd(F0 + penalty_matrix(cov, d))
    if ld is None:
        return -np.inf
    return -0.5 * sigma_logdet(cov) - pen - 0.5 * ld
