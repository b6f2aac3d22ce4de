"""Forward simulation and replicated simulation studies."""

from __future__ import annotations

import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np
import pandas as pd
from scipy import special

from .covariance import CovarianceSpec, build_cholesky_factor, initial_spec
from .data_model import SurveillanceData, germany_states
from .design import ETA_CLAMP, Component, ModelFormula, assemble_design
from .distributions import zinb_sample
from .estimation import FitOptions, fit, wald_interval

MAX_COUNT = 1e9


class SimulationError(RuntimeError):
    pass


@dataclass
class SimConfig:
    """Data-generating process plus study settings.

    ``template`` supplies units, adjacency, covariates, offsets and the
    time axis; its counts are ignored.  ``truth`` maps parameter labels to
    values (``psi`` may be given on the natural scale).
    """

    formula: ModelFormula
    template: SurveillanceData
    truth: dict
    cov: CovarianceSpec | None = None
    y_init: np.ndarray | None = None
    n_reps: int = 1
    base_seed: int = 1
    ci_levels: tuple = (0.95, 0.50)
    redraw_random_effects: bool = True
    fit_options: FitOptions = field(default_factory=FitOptions)

    def __post_init__(self):
        if self.n_reps < 1:
            raise ValueError("n_reps must be at least 1")
        if self.y_init is not None and np.any(np.asarray(self.y_init) < 0):
            raise ValueError("y_init must be nonnegative")
        if self.cov is None:
            self.cov = initial_spec(self.formula.re_structure, self.formula.re_components,
                                    self.template.R)

    @property
    def T(self):
        return self.template.T

    def with_length(self, T):
        """Same process on the first ``T`` periods of a (longer) template."""
        if T > self.template.T:
            raise ValueError(f"template has only {self.template.T} periods")
        cfg = SimConfig(**{k: getattr(self, k) for k in self.__dataclass_fields__})
        cfg.template = self.template.slice_time(T)
        return cfg


def replicate_rng(base_seed, index):
    """Independent generator per (base seed, replicate index)."""
    return np.random.default_rng(np.random.SeedSequence([int(base_seed), int(index)]))


def draw_random_effects(rng, cov: CovarianceSpec):
    if cov.structure == "none":
        return np.zeros(0)
    z = rng.standard_normal((cov.C, cov.R))
    if cov.structure == "correlated":
        DL = cov.sigma[:, None] * build_cholesky_factor(cov.spherical_r, cov.C)
        return (DL @ z).reshape(-1)
    return (cov.sigma[:, None] * z).reshape(-1)


def simulate(config: SimConfig, seed=None, rng=None, return_truth=False):
    """Generate a T x R count matrix period by period."""
    if rng is None:
        rng = np.random.default_rng(seed)
    formula = config.formula
    tmpl = config.template.with_counts(np.zeros(config.template.counts.shape))
    design = assemble_design(formula, tmpl)
    x = design.vector_from_dict(config.truth)
    if config.cov.structure != "none":
        b = draw_random_effects(rng, config.cov)
        if not config.redraw_random_effects and "b" in config.truth:
            b = np.asarray(config.truth["b"], dtype=float)
        x[design.b_slice] = b
    T, R = tmpl.T, tmpl.R
    W = design.weights

    base = {}
    for name, cd in design.comps.items():
        e = cd.X @ x[cd.fixed_idx] + cd.log_offset
        if cd.random:
            e = e + x[cd.re_idx][design.unit]
        base[name] = e.reshape(T - 1, R)
    lag_coef = 0.0
    if "zi" in design.comps and design.comps["zi"].lag_col is not None:
        cd = design.comps["zi"]
        lag_coef = x[cd.fixed_idx[cd.lag_col]]
    if formula.family == "nb":
        psi = np.exp(-x[design.psi_idx[:R]])
    else:
        psi = np.zeros(R)

    y = np.zeros((T, R), dtype=np.int64)
    if config.y_init is not None:
        y[0] = np.asarray(config.y_init, dtype=np.int64)
    else:
        rate = np.ones(R)
        if "end" in design.comps:
            off = formula.end.offset
            o1 = tmpl.offsets.get(off, tmpl.covariates.get(off))[0] if off else 1.0
            rate = np.exp(x[design.comps["end"].fixed_idx[0]]) * o1 * np.ones(R)
        y[0] = rng.poisson(rate)
    for t in range(1, T):
        prev = y[t - 1].astype(float)
        mu = np.zeros(R)
        if "ar" in base:
            mu += np.exp(base["ar"][t - 1]) * prev
        if "ne" in base:
            mu += np.exp(base["ne"][t - 1]) * (prev @ W)
        if "end" in base:
            mu += np.exp(base["end"][t - 1])
        gamma = np.zeros(R)
        if "zi" in base:
            eta = np.clip(base["zi"][t - 1] + lag_coef * prev, -ETA_CLAMP, ETA_CLAMP)
            gamma = special.expit(eta)
        if not np.all(np.isfinite(mu)) or np.any(mu > MAX_COUNT):
            raise SimulationError(f"explosive trajectory at t={tmpl.time[t]}")
        mu = np.maximum(mu, 1e-300)
        y[t] = zinb_sample(rng, mu, psi, gamma)
        if np.any(y[t] > MAX_COUNT):
            raise SimulationError(f"count above {MAX_COUNT:g} at t={tmpl.time[t]}")
    if return_truth:
        return y, x
    return y


@dataclass
class SimStudyReport:
    table: pd.DataFrame
    estimates: np.ndarray
    se: np.ndarray
    converged: np.ndarray
    labels: list
    truth: np.ndarray
    ci_levels: tuple
    n_reps: int
    failures: dict = field(default_factory=dict)

    @property
    def convergence_rate(self):
        return float(np.mean(self.converged))

    def to_csv(self, path):
        self.table.to_csv(path, index_label="parameter", float_format="%.10g")


def _run_replicate(args):
    config, index = args
    rng = replicate_rng(config.base_seed, index)
    try:
        y, x_true = simulate(config, rng=rng, return_truth=True)
        res = fit(config.formula, config.template.with_counts(y), config.fit_options)
    except Exception as exc:  # a failed replicate is reported, not fatal
        return index, None, None, False, f"{type(exc).__name__}: {exc}"
    idx = res.fixed_index
    return index, res.x[idx], res.se[idx], bool(res.converged), None


def _worker_count(workers):
    if workers is None:
        workers = int(os.environ.get("ZIHHH_THREADS", os.cpu_count() or 1))
    return max(1, int(workers))


def simulation_study(config: SimConfig, workers=None):
    """Simulate and refit ``n_reps`` replicates; summarize estimates and coverage.

    Non-converged replicates are excluded from means, SDs and coverage.
    """
    design = assemble_design(config.formula,
                             config.template.with_counts(np.zeros(config.template.counts.shape)))
    truth_x = design.vector_from_dict(config.truth)
    fixed = np.r_[np.arange(design.n_theta), np.arange(design.psi_slice.start, design.P)]
    labels = [design.labels[i] for i in fixed]
    truth = truth_x[fixed]
    jobs = [(config, i) for i in range(config.n_reps)]
    workers = _worker_count(workers)
    if workers > 1 and config.n_reps > 1:
        with ProcessPoolExecutor(max_workers=workers) as ex:
            out = list(ex.map(_run_replicate, jobs, chunksize=max(1, len(jobs) // (4 * workers))))
    else:
        out = [_run_replicate(j) for j in jobs]
    out.sort(key=lambda r: r[0])
    p = len(labels)
    est = np.full((config.n_reps, p), np.nan)
    se = np.full((config.n_reps, p), np.nan)
    conv = np.zeros(config.n_reps, dtype=bool)
    failures = {}
    for i, e, s, c, err in out:
        if e is not None:
            est[i], se[i] = e, s
        conv[i] = c
        if err:
            failures[i] = err
    return SimStudyReport(summarize(est, se, conv, truth, labels, config.ci_levels),
                          est, se, conv, labels, truth, tuple(config.ci_levels),
                          config.n_reps, failures)


def summarize(est, se, conv, truth, labels, ci_levels):
    ok = conv & np.all(np.isfinite(est), axis=1)
    E, S = est[ok], se[ok]
    n = int(ok.sum())
    rows = {}
    for j, lab in enumerate(labels):
        e = E[:, j]
        row = {"truth": truth[j], "mean": e.mean() if n else np.nan,
               "sd": e.std(ddof=1) if n > 1 else np.nan}
        row["mc_se"] = row["sd"] / np.sqrt(n) if n > 1 else np.nan
        for lev in ci_levels:
            lo, hi = wald_interval(e, S[:, j], lev)
            row[f"coverage_{round(100 * lev)}"] = float(np.mean((lo <= truth[j]) & (truth[j] <= hi))) if n else np.nan
        rows[lab] = row
        if lab.startswith("psi_tilde"):
            psi = np.exp(-e)
            rows[lab.replace("psi_tilde", "psi")] = {
                "truth": float(np.exp(-truth[j])), "mean": psi.mean() if n else np.nan,
                "sd": psi.std(ddof=1) if n > 1 else np.nan,
                "mc_se": psi.std(ddof=1) / np.sqrt(n) if n > 1 else np.nan}
    tab = pd.DataFrame.from_dict(rows, orient="index")
    tab["n_converged"] = n
    tab["convergence_rate"] = float(np.mean(conv)) if conv.size else np.nan
    return tab


# The simulation design with 16 German states.

GERMANY_TRUTH = {
    "ar.intercept": -0.3,
    "ne.intercept": 0.5,
    "end.intercept": 0.5,
    "zi.intercept": 0.2,
    "zi.sin(2*pi*t/26)": 0.4,
    "zi.cos(2*pi*t/26)": -0.3,
    "zi.y_lag": -0.1,
    "psi": 0.5,
}


def germany_formula():
    return ModelFormula(
        ar=Component(),
        ne=Component(offset="pop_frac"),
        end=Component(),
        zi=Component(seasonality=((26, 1),), lag=True),
        family="nb",
        psi="shared",
    )


def germany_template(T, freq=26):
    codes, A, pop = germany_states()
    frac = np.broadcast_to(pop / pop.sum(), (T, len(codes)))
    return SurveillanceData(np.zeros((T, len(codes))), codes, freq=freq,
                            offsets={"pop_frac": frac}, adjacency=A)


def germany_config(T=500, n_reps=1, base_seed=1, **kwargs):
    """Zero-inflated HHH process on the 16 German states, no random effects."""
    return SimConfig(germany_formula(), germany_template(T), dict(GERMANY_TRUTH),
                     n_reps=n_reps, base_seed=base_seed, **kwargs)
