"""Regenerate the bundled synthetic datasets.

germany/  : 16 states, T=500, simulated from the zero-inflated process
            used by the recovery study (no covariates).
measles/  : 16 states, T=364, vaccination coverage and population
            covariates, simulated from the ZI3 preset (correlated random intercepts
            in the ar, end and zi components).
"""

from pathlib import Path

import numpy as np

from zihhh.covariance import CovarianceSpec
from zihhh.data_model import SurveillanceData, germany_states
from zihhh.presets import apply_preset_transforms, preset_formula
from zihhh.readwrite import write_data
from zihhh.simulation import SimConfig, germany_config, simulate

HERE = Path(__file__).resolve().parent

MEASLES_TRUTH = {
    "ar.intercept": 0.9,
    "ar.sin(2*pi*t/26)": 0.4,
    "ar.cos(2*pi*t/26)": 0.2,
    "ar.sin(2*pi*t/52)": 0.1,
    "ar.cos(2*pi*t/52)": -0.1,
    "end.intercept": 3.8,
    "end.sin(2*pi*t/26)": 0.5,
    "end.cos(2*pi*t/26)": 0.3,
    "end.sin(2*pi*t/52)": 0.1,
    "end.cos(2*pi*t/52)": 0.0,
    "zi.intercept": 0.5,
    "zi.y_lag": -0.8,
    "psi": 1.0,
}


def measles_template(T=364, seed=11):
    rng = np.random.default_rng(seed)
    codes, A, pop = germany_states()
    R = len(codes)
    t = np.arange(T)[:, None]
    base = rng.uniform(0.86, 0.93, R)
    vacc = np.clip(base + 0.04 * t / T + rng.normal(0, 0.003, (T, R)), 0.5, 0.99)
    popm = pop * (1.0 + 0.01 * t / T)
    data = SurveillanceData(np.zeros((T, R)), codes, freq=26,
                            covariates={"vacc": vacc, "pop": popm}, adjacency=A)
    return apply_preset_transforms(data)


def main():
    cfg = germany_config(T=500)
    y = simulate(cfg, seed=2021)
    write_data(HERE / "germany", cfg.template.with_counts(y))

    tmpl = measles_template()
    cov = CovarianceSpec("correlated", ("ar", "end", "zi"), log_sigma=np.log([0.3, 0.5, 0.8]),
                         spherical_r=[0.5, -0.3, 0.4], R=tmpl.R)
    mcfg = SimConfig(preset_formula("ZI3"), tmpl, MEASLES_TRUTH, cov=cov, y_init=np.ones(tmpl.R))
    y = simulate(mcfg, seed=364)
    raw = SurveillanceData(y, tmpl.unit_names, freq=26,
                           covariates={k: tmpl.covariates[k] for k in ("vacc", "pop")},
                           adjacency=tmpl.adjacency)
    write_data(HERE / "measles", raw)


if __name__ == "__main__":
    main()
