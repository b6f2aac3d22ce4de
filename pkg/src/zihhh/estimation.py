"""Penalized maximum likelihood fitting and Wald inference.

Without random effects the log-likelihood is maximized by Newton-Raphson
with the analytic score and Fisher information.  With random effects the
fit alternates between

1. maximizing the penalized log-likelihood over (theta, b, psi_tilde)
   for the current covariance, and
2. maximizing the Laplace-approximate marginal log-likelihood over the
   covariance parameters (log standard deviations and spherical
   parameters) by Nelder-Mead, holding (theta, b, psi_tilde) fixed,

until the marginal log-likelihood stabilizes.
"""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field

import numpy as np
import pandas as pd
from scipy import linalg, optimize, special, stats

from . import likelihood as lik
from .covariance import CovarianceSpec, correlation, initial_spec
from .data_model import SurveillanceData, amplitude_phase, validate
from .design import (ConfigurationError, DesignMatrices, ModelFormula, NumericError,
                     ParameterState, assemble_design, eval_predictors)
from .epidemiology import reproduction_series

log = logging.getLogger(__name__)

# relative size of rounding noise in a summed log-likelihood
NOISE_REL = 1e-12
# psi = exp(-20) ~ 2e-9 is Poisson for any realistic mean; the cap keeps a
# unit at the Poisson boundary from drifting (its score vanishes like 1/k).
PSI_TILDE_MAX = 20.0


class DataValidationError(ValueError):
    def __init__(self, report):
        super().__init__(str(report))
        self.report = report


@dataclass
class FitOptions:
    inner_tol: float = 1e-6
    outer_tol: float = 1e-5
    max_inner_iter: int = 500
    max_outer_iter: int = 300
    max_halvings: int = 20
    ridge_start: float = 1e-8
    ridge_max: float = 1e10
    nm_step: float = 0.25
    nm_maxiter: int = 2000
    verbose: bool = False

    def __post_init__(self):
        if self.inner_tol <= 0 or self.outer_tol <= 0:
            raise ConfigurationError("tolerances must be positive")
        if self.max_inner_iter < 1 or self.max_outer_iter < 1:
            raise ConfigurationError("iteration caps must be at least 1")


@dataclass
class InnerResult:
    x: np.ndarray
    value: float
    converged: bool
    iterations: int
    max_score: float
    stalled: bool = False
    history: list = field(default_factory=list)


@dataclass
class FitResult:
    formula: ModelFormula
    design: DesignMatrices
    x: np.ndarray
    cov: CovarianceSpec
    loglik: float
    penloglik: float
    marginal_loglik: float | None
    fisher: np.ndarray
    vcov: np.ndarray | None
    converged: bool
    diagnostics: dict

    @property
    def labels(self):
        return self.design.labels

    @property
    def state(self):
        return self.design.unpack(self.x)

    @property
    def fixed_index(self):
        d = self.design
        return np.r_[np.arange(d.n_theta), np.arange(d.psi_slice.start, d.P)]

    @property
    def se(self):
        if self.vcov is None:
            return np.full(self.design.P, np.nan)
        v = np.diag(self.vcov).copy()
        v[v < 0] = np.nan
        return np.sqrt(v)

    def coef(self, label):
        return float(self.x[self.design.index(label)])

    def psi(self):
        """Overdispersion on the natural scale (empty for Poisson models)."""
        return np.exp(-self.x[self.design.psi_slice])

    def surfaces(self):
        return eval_predictors(self.x, self.design)

    def coef_table(self, level=0.95):
        return wald_ci(self, level)

    def amplitudes(self):
        """Amplitude/phase of every sine-cosine pair of fitted coefficients."""
        rows = []
        for name, cd in self.design.comps.items():
            cols = list(cd.columns)
            for j, c in enumerate(cols):
                if not c.startswith("sin("):
                    continue
                k = cols.index("cos(" + c[4:])
                A, ph = amplitude_phase(self.x[cd.fixed_idx[j]], self.x[cd.fixed_idx[k]])
                rows.append({"component": name, "term": c[4:-1], "amplitude": A, "phase": ph})
        return pd.DataFrame(rows, columns=["component", "term", "amplitude", "phase"])

    def reproduction_numbers(self):
        """R_t for every fitted period t = 2..T."""
        s = self.surfaces()
        d = self.design
        lam = d.as_matrix(s.ar)
        gam = d.as_matrix(s.gamma)
        phi = d.as_matrix(s.ne) if "ne" in d.comps else None
        return reproduction_series(lam, gam, phi, d.weights)

    def random_effects(self):
        """Random intercepts with rate ratios (exp) or odds ratios (zi)."""
        d = self.design
        rows = []
        for name in self.formula.re_components:
            b = self.x[d.comps[name].re_idx]
            for u, v in zip(d.unit_names, b):
                rows.append({"component": name, "unit": u, "estimate": v,
                             "ratio": float(np.exp(v)),
                             "ratio_kind": "odds ratio" if name == "zi" else "rate ratio"})
        return pd.DataFrame(rows, columns=["component", "unit", "estimate", "ratio", "ratio_kind"])

    def summary(self):
        rt = self.reproduction_numbers()
        out = {
            "converged": bool(self.converged),
            "loglik": self.loglik,
            "penloglik": self.penloglik,
            "marginal_loglik": self.marginal_loglik,
            "n_cells": int(self.design.mask.sum()),
            "maxEV_range": [float(np.min(rt)), float(np.max(rt))],
            "diagnostics": {k: _jsonable(v) for k, v in self.diagnostics.items()},
        }
        if self.design.n_psi:
            out["psi_range"] = [float(self.psi().min()), float(self.psi().max())]
        if "zi.y_lag" in self.labels:
            beta = self.coef("zi.y_lag")
            out["zi_lag_odds_multiplier"] = float(np.exp(beta))
        if self.cov.structure != "none":
            out["random_effects"] = {
                "structure": self.cov.structure,
                "components": list(self.cov.components),
                "sigma": self.cov.sigma.tolist(),
                "spherical_r": self.cov.spherical_r.tolist(),
                "correlation": correlation(self.cov).tolist(),
            }
        return out


def _jsonable(v):
    if isinstance(v, (np.floating, np.integer, np.bool_)):
        return v.item()
    return v


def wald_interval(estimate, se, level=0.95):
    z = stats.norm.ppf(0.5 * (1.0 + level))
    estimate, se = np.asarray(estimate, float), np.asarray(se, float)
    return estimate - z * se, estimate + z * se


def lag_odds_multiplier(beta):
    """Factor by which one extra lagged case multiplies the odds of an excess zero."""
    return float(np.exp(beta))


def wald_ci(result: FitResult, level=0.95):
    """Estimates, standard errors and Wald intervals for theta and psi_tilde."""
    idx = result.fixed_index
    est = result.x[idx]
    se = result.se[idx]
    lo, hi = wald_interval(est, se, level)
    return pd.DataFrame({"estimate": est, "se": se, "lower": lo, "upper": hi},
                        index=pd.Index([result.labels[i] for i in idx], name="parameter"))


def initialize(formula: ModelFormula, data: SurveillanceData, design=None):
    """Deterministic starting values."""
    if design is None:
        design = assemble_design(formula, data)
    y = design.y[design.mask]
    x = np.zeros(design.P)
    if "end" in design.comps:
        off = np.exp(design.comps["end"].log_offset[design.mask])
        m = float(np.mean(y / off))
        if m <= 0:
            warnings.warn("all counts are zero; endemic intercept floored at log(1e-4)",
                          stacklevel=2)
            m = 1e-4
        x[design.comps["end"].fixed_idx[0]] = np.log(m)
    for name in ("ar", "ne"):
        if name in design.comps:
            x[design.comps[name].fixed_idx[0]] = -1.0
    if "zi" in design.comps:
        mean = max(float(np.mean(y)), 1e-4)
        f0 = np.exp(-mean) if formula.family == "poisson" else 1.0 / (1.0 + mean)
        excess = float(np.mean(y == 0)) - f0
        x[design.comps["zi"].fixed_idx[0]] = special.logit(min(max(0.05, excess), 0.95))
    cov = initial_spec(formula.re_structure, formula.re_components, design.R)
    return design.unpack(x), cov


def newton_direction(F, s, ridge_start=1e-8, ridge_max=1e10):
    """Solve ``F d = s``, adding ``mu * I`` (mu escalated tenfold) until F is PD."""
    ridge = 0.0
    eye = np.eye(F.shape[0])
    while True:
        try:
            c = linalg.cho_factor(F + ridge * eye, lower=True)
            return linalg.cho_solve(c, s), ridge
        except (linalg.LinAlgError, ValueError):
            ridge = ridge_start if ridge == 0.0 else ridge * 10.0
            if ridge > ridge_max:
                raise NumericError("Fisher information could not be regularized")


def _safe_penloglik(x, cov, ctx):
    try:
        v = lik.penloglik(x, cov, ctx)
    except (NumericError, ValueError, FloatingPointError):
        return -np.inf
    return v if np.isfinite(v) else -np.inf


def inner_step(x, cov, ctx, opts: FitOptions):
    """Maximize the penalized log-likelihood by damped Newton-Raphson."""
    ctx = lik._ctx(ctx)
    x = np.asarray(x, dtype=float).copy()
    f = _safe_penloglik(x, cov, ctx)
    if not np.isfinite(f):
        raise NumericError("penalized log-likelihood is not finite at the starting values")
    history = [f]
    df = 0.0
    converged = stalled = False
    it = 0
    smax = np.inf
    psi = np.arange(ctx.design.P)[ctx.design.psi_slice]
    x[psi] = np.minimum(x[psi], PSI_TILDE_MAX)

    def free_mask(x, s):
        # psi_tilde coordinates held at the cap while the score pushes outward
        m = np.ones(x.size, dtype=bool)
        m[psi] = ~((x[psi] >= PSI_TILDE_MAX) & (s[psi] > 0))
        return m

    def project(x):
        x[psi] = np.minimum(x[psi], PSI_TILDE_MAX)
        return x

    with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
        for it in range(1, opts.max_inner_iter + 1):
            s = lik.score_pen(x, cov, ctx)
            free = free_mask(x, s)
            smax = float(np.max(np.abs(s[free]))) if free.any() else 0.0
            if smax < opts.inner_tol and abs(df) < opts.inner_tol:
                converged = True
                break
            F = lik.fisher_pen(x, cov, ctx)
            d = np.zeros(x.size)
            try:
                d[free], _ = newton_direction(F[np.ix_(free, free)], s[free],
                                              opts.ridge_start, opts.ridge_max)
            except NumericError:
                stalled = True
                break
            step = 1.0
            noise = NOISE_REL * (1.0 + abs(f))
            for _ in range(opts.max_halvings + 1):
                xn = project(x + step * d)
                fn = _safe_penloglik(xn, cov, ctx)
                if fn >= f:
                    break
                # gains below rounding noise: fall back to a score decrease
                if fn >= f - noise:
                    sn = lik.score_pen(xn, cov, ctx)
                    if np.max(np.abs(sn[free_mask(xn, sn)])) < smax:
                        break
                step *= 0.5
            else:
                stalled = True
                break
            df = fn - f
            x, f = xn, fn
            history.append(f)
            if opts.verbose:
                log.info("inner %d: l_pen=%.8f |s|=%.3g step=%g", it, f, smax, step)
    if stalled:
        s = lik.score_pen(x, cov, ctx)
        free = free_mask(x, s)
        smax = float(np.max(np.abs(s[free]))) if free.any() else 0.0
        converged = smax < opts.inner_tol
    return InnerResult(x, f, converged, it, smax, stalled and not converged, history)


def outer_step(cov: CovarianceSpec, x, ctx, opts: FitOptions, F0=None):
    """Nelder-Mead update of the covariance parameters; returns (cov, l_marg, stalled)."""
    ctx = lik._ctx(ctx)
    if F0 is None:
        F0 = lik.fisher(x, ctx)

    def objective(v):
        val = lik.marginal_loglik(cov.from_vector(v), x, ctx, F0)
        return -val if np.isfinite(val) else np.inf

    v = cov.to_vector()
    best = objective(v)
    start = best
    n = v.size
    for _ in range(2):  # initial run plus one restart from the incumbent
        simplex = np.vstack([v, v + opts.nm_step * np.eye(n)])
        res = optimize.minimize(objective, v, method="Nelder-Mead",
                                options={"initial_simplex": simplex, "xatol": 1e-6,
                                         "fatol": 0.1 * opts.outer_tol,
                                         "maxiter": opts.nm_maxiter})
        if res.fun < best:
            v, best = res.x, float(res.fun)
    stalled = not np.isfinite(start) and not np.isfinite(best)
    return cov.from_vector(v), -best, stalled


def fit(formula: ModelFormula, data: SurveillanceData, opts: FitOptions | None = None,
        init=None, design=None):
    """Fit a (zero-inflated) endemic-epidemic model.

    ``init`` may be a ``(ParameterState, CovarianceSpec)`` pair, e.g. a
    previous fit's estimates for warm starts.
    """
    opts = opts or FitOptions()
    report = validate(data)
    if not report.ok:
        raise DataValidationError(report)
    if design is None:
        design = assemble_design(formula, data)
    ctx = lik.LikelihoodContext(design)
    if init is None:
        state, cov = initialize(formula, data, design)
    else:
        state, cov = init
    x = design.pack(state) if isinstance(state, ParameterState) else np.asarray(state, float)
    if x.size != design.P:
        raise ConfigurationError(f"initial values have length {x.size}, model needs {design.P}")

    diag = {"inner_iterations": 0, "outer_iterations": 0, "inner_stalls": 0,
            "outer_stalls": 0}
    inner = inner_step(x, cov, ctx, opts)
    diag["inner_iterations"] += inner.iterations
    diag["inner_stalls"] += int(inner.stalled)
    x = inner.x
    lmarg = None
    outer_ok = True
    if cov.structure != "none":
        outer_ok = False
        lm_old = lik.marginal_loglik(cov, x, ctx)
        for k in range(1, opts.max_outer_iter + 1):
            lm_pre = lik.marginal_loglik(cov, x, ctx)
            cov, lm_post, stalled = outer_step(cov, x, ctx, opts)
            # improvement from the Sigma update alone, at fixed (theta, b, psi)
            gain = lm_post - lm_pre if np.isfinite(lm_pre) else np.inf
            diag["outer_stalls"] += int(stalled)
            inner = inner_step(x, cov, ctx, opts)
            diag["inner_iterations"] += inner.iterations
            diag["inner_stalls"] += int(inner.stalled)
            x = inner.x
            lmarg = lik.marginal_loglik(cov, x, ctx)
            diag["outer_iterations"] = k
            if opts.verbose:
                log.info("outer %d: l_marg=%.8f gain=%.3g sigma=%s", k, lmarg, gain, cov.sigma)
            # A unit whose psi_tilde drifts to the Poisson boundary shifts
            # log|F_pen| by a Sigma-free amount every cycle, so the Sigma
            # gain is checked alongside the raw change.
            if inner.converged and (abs(lmarg - lm_old) < opts.outer_tol
                                    or gain < opts.outer_tol):
                outer_ok = True
                break
            lm_old = lmarg

    F = lik.fisher_pen(x, cov, ctx)
    vcov = None
    try:
        linalg.cholesky(F, lower=True)
        diag["fisher_pd"] = True
    except linalg.LinAlgError:
        diag["fisher_pd"] = False
    try:
        vcov = linalg.inv(F)
    except (linalg.LinAlgError, ValueError):
        vcov = None
    diag["max_score"] = inner.max_score
    diag["inner_converged"] = inner.converged
    diag["outer_converged"] = outer_ok
    converged = bool(inner.converged and outer_ok)
    return FitResult(
        formula=formula,
        design=design,
        x=x,
        cov=cov,
        loglik=lik.loglik(x, ctx),
        penloglik=lik.penloglik(x, cov, ctx),
        marginal_loglik=lmarg,
        fisher=F,
        vcov=vcov,
        converged=converged,
        diagnostics=diag,
    )
