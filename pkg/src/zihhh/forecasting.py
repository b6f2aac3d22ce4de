"""One-step-ahead forecasts and proper scoring rules for count predictions.

All scores are negatively oriented: smaller is better.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np
import pandas as pd

from .data_model import SurveillanceData
from .design import ModelFormula, assemble_design, eval_predictors
from .distributions import zinb_cdf, zinb_logpmf, zinb_mean, zinb_var
from .estimation import FitOptions, fit

SCORES = ("LS", "DSS", "RPS", "SES")
RPS_EPS = 1e-12
RPS_TAIL_TOL = 1e-10


@dataclass
class ForecastSet:
    """Plug-in predictive distributions for the cells of a test window."""

    time: np.ndarray
    unit: np.ndarray
    y: np.ndarray
    mu: np.ndarray
    psi: np.ndarray
    gamma: np.ndarray
    valid: np.ndarray
    unit_names: tuple
    meta: dict = field(default_factory=dict)

    @property
    def mean(self):
        return zinb_mean(self.mu, self.gamma)

    @property
    def var(self):
        return zinb_var(self.mu, self.psi, self.gamma)

    def scores(self):
        """Per-cell scores (invalid cells are NaN)."""
        out = {}
        v = self.valid
        args = (self.y[v], self.mu[v], self.psi[v], self.gamma[v])
        for name, fn in (("LS", score_ls), ("DSS", score_dss), ("RPS", score_rps),
                         ("SES", score_ses)):
            s = np.full(self.y.size, np.nan)
            if v.any():
                if name == "RPS":
                    s[v], capped, bound = score_rps(*args, return_info=True)
                    self.meta["rps_capped_cells"] = int(capped)
                    self.meta["rps_tail_bound"] = float(bound)
                else:
                    s[v] = fn(*args)
            out[name] = s
        return pd.DataFrame(out)

    def to_frame(self):
        return pd.DataFrame({
            "t": self.time, "unit": [self.unit_names[u] for u in self.unit],
            "y": self.y, "mu": self.mu, "psi": self.psi, "gamma": self.gamma,
            "mean": self.mean, "valid": self.valid,
        })

    @classmethod
    def from_frame(cls, df, meta=None):
        names = tuple(dict.fromkeys(df["unit"]))
        code = {u: i for i, u in enumerate(names)}
        return cls(df["t"].to_numpy(), np.array([code[u] for u in df["unit"]]),
                   df["y"].to_numpy(float), df["mu"].to_numpy(float),
                   df["psi"].to_numpy(float), df["gamma"].to_numpy(float),
                   df["valid"].to_numpy(bool), names, dict(meta or {}))


def _predictive(res, design, rows):
    """(mu, psi, gamma) of the cells in ``rows`` under fitted parameters."""
    s = eval_predictors(res.x, design)
    if design.psi_idx is None:
        psi = np.zeros(design.n)
    else:
        psi = np.exp(-res.x[design.psi_idx])
    return s.mu[rows], psi[rows], s.gamma[rows]


def osa_forecast(formula: ModelFormula, data: SurveillanceData, test_start, refit="each_step",
                 opts: FitOptions | None = None):
    """One-step-ahead predictive distributions for periods ``test_start..T``.

    ``test_start`` is a 1-based row position.  ``refit="each_step"`` refits
    on rows ``1..t-1`` before forecasting row t (warm-started from the
    previous fit); ``"once"`` uses a single fit on rows ``1..test_start-1``.
    """
    if refit not in ("each_step", "once"):
        raise ValueError(f"refit must be 'each_step' or 'once', got {refit!r}")
    T, R = data.T, data.R
    if not 3 <= test_start <= T:
        raise ValueError(f"test_start must lie in [3, {T}]")
    design = assemble_design(formula, data)
    n_test = T - test_start + 1
    mu = np.full(n_test * R, np.nan)
    psi = np.full(n_test * R, np.nan)
    gam = np.full(n_test * R, np.nan)
    valid = np.zeros(n_test * R, dtype=bool)
    excluded = []
    res = None
    init = None
    for i, t in enumerate(range(test_start, T + 1)):
        if res is None or refit == "each_step":
            try:
                res = fit(formula, data.slice_time(t - 1), opts, init=init)
            except Exception as exc:  # reported through the excluded list
                warnings.warn(f"fit for t={t} failed: {exc}", stacklevel=2)
                res = None
            if res is not None:
                init = (res.state, res.cov)
        block = slice(i * R, (i + 1) * R)
        if res is None or not res.converged:
            excluded.append(int(data.time[t - 1]))
            if res is None:
                continue
        rows = np.arange((t - 2) * R, (t - 1) * R)
        mu[block], psi[block], gam[block] = _predictive(res, design, rows)
        valid[block] = res.converged
    meta = {"refit": refit, "test_start": int(test_start), "plug_in": True,
            "excluded_times": excluded, "n_excluded_cells": int((~valid).sum())}
    return ForecastSet(np.repeat(data.time[test_start - 1:], R), np.tile(np.arange(R), n_test),
                       data.counts[test_start - 1:].reshape(-1), mu, psi, gam, valid,
                       data.unit_names, meta)


def score_ls(y, mu, psi, gamma=0.0):
    """Logarithmic score, -log f(y)."""
    return -zinb_logpmf(y, mu, psi, gamma)


def score_ses(y, mu, psi=0.0, gamma=0.0):
    """Squared error of the predictive mean."""
    return (np.asarray(y, float) - zinb_mean(mu, gamma)) ** 2


def score_dss(y, mu, psi, gamma=0.0):
    """Dawid-Sebastiani score ((y - m)/s)^2 + 2 log s.

    A degenerate predictive (s = 0) scores +inf unless it hits y exactly,
    in which case the limit is -inf.
    """
    y = np.asarray(y, float)
    m = zinb_mean(mu, gamma)
    v = zinb_var(mu, psi, gamma)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = (y - m) ** 2 / v + np.log(v)
    degenerate = v == 0
    if np.any(degenerate):
        warnings.warn("degenerate predictive variance in DSS", stacklevel=2)
        out = np.where(degenerate, np.where(y == m, -np.inf, np.inf), out)
    return out


def rps_truncation(mu, psi, gamma=0.0):
    """Cap on the summation range: max(1000, mean + 40 sd)."""
    m = float(zinb_mean(mu, gamma))
    sd = float(np.sqrt(zinb_var(mu, psi, gamma)))
    return int(max(1000, np.ceil(m + 40 * sd)))


def _rps_one(y, mu, psi, gamma):
    cap = max(rps_truncation(mu, psi, gamma), int(y))
    k = np.arange(cap + 1)
    F = zinb_cdf(k, mu, psi, gamma)
    above = np.flatnonzero(F > 1.0 - RPS_EPS)
    K = int(above[0]) if above.size else cap
    K = max(K, int(y))
    ind = (k[:K + 1] >= y).astype(float)
    # sum_{k>K} (1 - F(k))^2 <= (1 - F(K)) * E[(Y - K)+] <= (1 - F(K)) * mean
    bound = 0.0 if above.size else (1.0 - F[K]) * float(zinb_mean(mu, gamma))
    return float(np.sum((F[:K + 1] - ind) ** 2)), not above.size, bound


def score_rps(y, mu, psi, gamma=0.0, return_info=False):
    """Ranked probability score, sum_k (F(k) - 1{y <= k})^2.

    With ``return_info`` also returns the number of cells whose summation
    hit the cap and the largest bound on the neglected tail.
    """
    y, mu, psi, gamma = np.broadcast_arrays(*(np.asarray(a, float) for a in (y, mu, psi, gamma)))
    out = np.empty(y.shape)
    capped = 0
    worst = 0.0
    for i in np.ndindex(y.shape):
        out[i], hit, bound = _rps_one(y[i], mu[i], psi[i], gamma[i])
        capped += hit
        worst = max(worst, bound)
    if worst > RPS_TAIL_TOL:
        warnings.warn(f"RPS truncation cap reached in {capped} cell(s); neglected tail "
                      f"up to {worst:.3g}", stacklevel=2)
    out = out[()] if out.ndim == 0 else out
    if return_info:
        return out, capped, worst
    return out


def aggregate(scores):
    """Mean scores per model over cells valid for every model.

    ``scores`` maps model name -> DataFrame of per-cell scores (columns
    LS, DSS, RPS, SES).  Adds maxLS and RMSE = sqrt(mean SES).
    """
    if not scores:
        raise ValueError("no scores to aggregate")
    frames = list(scores.values())
    common = np.ones(len(frames[0]), dtype=bool)
    for df in frames:
        if len(df) != len(common):
            raise ValueError("models were scored on different cell sets")
        common &= np.isfinite(df[list(SCORES)].to_numpy()).all(axis=1)
    if not common.any():
        raise ValueError("no cells to aggregate")
    rows = {}
    for name, df in scores.items():
        sub = df[common]
        row = {s: float(sub[s].mean()) for s in SCORES}
        row["maxLS"] = float(sub["LS"].max())
        row["RMSE"] = float(np.sqrt(row["SES"]))
        row["n_cells"] = int(common.sum())
        rows[name] = row
    return pd.DataFrame.from_dict(rows, orient="index")


def permutation_test(a, b, n_perm=9999, seed=None, chunk=1000):
    """Two-sided paired sign-flip test for a difference in mean scores.

    ``p = (1 + #{|mean of flipped differences| >= observed}) / (n_perm + 1)``.
    """
    d = np.asarray(a, float) - np.asarray(b, float)
    if d.shape != np.shape(b) or d.ndim != 1:
        raise ValueError("score vectors must be paired 1-d arrays of equal length")
    if not np.any(d):
        return 1.0
    n = d.size
    obs = abs(d.mean())
    thresh = obs * (1.0 - 1e-12)
    rng = np.random.default_rng(seed)
    count = 0
    done = 0
    while done < n_perm:
        m = min(chunk, n_perm - done)
        signs = rng.integers(0, 2, size=(m, n)) * 2.0 - 1.0
        count += int(np.sum(np.abs(signs @ d) / n >= thresh))
        done += m
    return (1.0 + count) / (n_perm + 1.0)


def pairwise_tests(scores, score="LS", n_perm=9999, seed=None):
    """Permutation p-values for every pair of models on their common cells."""
    names = list(scores)
    common = np.ones(len(scores[names[0]]), dtype=bool)
    for df in scores.values():
        common &= np.isfinite(df[list(SCORES)].to_numpy()).all(axis=1)
    rows = []
    for i, a in enumerate(names):
        for b in names[i + 1:]:
            sa = scores[a][score].to_numpy()[common]
            sb = scores[b][score].to_numpy()[common]
            rows.append({"model_a": a, "model_b": b, "score": score,
                         "mean_diff": float(np.mean(sa - sb)),
                         "p_value": permutation_test(sa, sb, n_perm, seed)})
    return pd.DataFrame(rows, columns=["model_a", "model_b", "score", "mean_diff", "p_value"])
