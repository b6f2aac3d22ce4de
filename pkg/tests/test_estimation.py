import dataclasses
import types

import numpy as np
import pytest
from scipy import stats

import zihhh.estimation as est
from helpers import PATH3, oracle_for, oracle_permutation, random_counts
from zihhh.covariance import CovarianceSpec
from zihhh.data_model import SurveillanceData
from zihhh.design import Component, ConfigurationError, ModelFormula, assemble_design
from zihhh.estimation import (DataValidationError, FitOptions, fit, initialize, inner_step,
                              lag_odds_multiplier, outer_step, wald_ci, wald_interval)
from zihhh.likelihood import LikelihoodContext, marginal_loglik, penloglik, score_pen
from zihhh.simulation import SimConfig, germany_template, simulate


def hhh_data(seed, T=60, R=3):
    rng = np.random.default_rng(seed)
    return SurveillanceData(random_counts(rng, T, R, mean=5, zero_frac=0.05),
                            [f"u{i}" for i in range(R)],
                            covariates={"z": rng.normal(size=(T, R))},
                            offsets={"o": rng.uniform(0.5, 2, (T, R))}, adjacency=PATH3[:R, :R])


def hhh_formula(family="nb", psi="shared"):
    return ModelFormula(ar=Component(covariates=("z",)), ne=Component(offset="o"),
                        end=Component(covariates=("z",), offset="o"), family=family, psi=psi)


class TestOracleFits:
    @pytest.mark.parametrize("seed", range(3))
    @pytest.mark.parametrize("family, psi", [("poisson", "shared"), ("nb", "shared"), ("nb", "unit")])
    def test_matches_plain_hhh(self, seed, family, psi):
        f = hhh_formula(family, psi)
        tmpl = hhh_data(seed, T=200)
        truth = {"ar.intercept": -0.7, "ne.intercept": -1.2, "end.intercept": 1.0,
                 "ar.z": 0.2, "end.z": -0.3, "psi": 0.4}
        if family == "poisson":
            del truth["psi"]
        data = tmpl.with_counts(simulate(SimConfig(f, tmpl, truth), seed=seed))
        res = fit(f, data, FitOptions(inner_tol=1e-9))
        assert res.converged
        orc = oracle_for(data, f)
        perm = oracle_permutation(res.design, orc)
        p, smax = orc.fit(res.x[perm] + 0.05)
        assert smax < 1e-8
        np.testing.assert_allclose(res.x[perm], p, atol=1e-6)


class TestWald:
    def test_anchor_interval(self):
        lo, hi = wald_interval(-0.82, 0.1276, 0.95)
        assert (round(float(lo), 2), round(float(hi), 2)) == (-1.07, -0.57)

    def test_fifty_percent(self):
        lo, hi = wald_interval(0.0, 2.0, 0.5)
        assert hi == pytest.approx(stats.norm.ppf(0.75) * 2.0)
        assert hi / 2.0 == pytest.approx(0.6745, abs=1e-4)

    def test_zero_se(self):
        assert wald_interval(1.3, 0.0) == (1.3, 1.3)

    def test_odds_multiplier(self):
        assert lag_odds_multiplier(-0.82) == np.exp(-0.82)
        assert round(1 - lag_odds_multiplier(-0.82), 2) == 0.56

    def test_table_and_missing_vcov(self, germany_data_500):
        cfg, data = germany_data_500
        res = fit(cfg.formula, data)
        tab = wald_ci(res, 0.9)
        assert list(tab.index) == [lab for lab in res.labels if "ri." not in lab]
        z = stats.norm.ppf(0.95)
        np.testing.assert_allclose(tab.upper - tab.estimate, z * tab.se)
        broken = dataclasses.replace(res, vcov=None)
        assert wald_ci(broken).se.isna().all()


class TestInitialize:
    def test_deterministic(self, germany_data_500):
        cfg, data = germany_data_500
        a, _ = initialize(cfg.formula, data)
        b, _ = initialize(cfg.formula, data)
        np.testing.assert_array_equal(a.theta, b.theta)
        assert np.isfinite(penloglik(a, None, assemble_design(cfg.formula, data)))

    def test_defaults(self, germany_data_500):
        cfg, data = germany_data_500
        s, cov = initialize(cfg.formula, data)
        des = assemble_design(cfg.formula, data)
        x = des.pack(s)
        assert x[des.index("ar.intercept")] == -1 and x[des.index("ne.intercept")] == -1
        assert x[des.index("end.intercept")] == pytest.approx(np.log(data.counts[1:].mean()))
        assert not x[des.index("zi.y_lag")] and not s.psi_tilde.any()
        assert cov.structure == "none"

    def test_all_zero(self):
        d = SurveillanceData(np.zeros((30, 3)), ["a", "b", "c"], adjacency=PATH3)
        f = ModelFormula(ar=Component(), end=Component())
        with pytest.warns(UserWarning, match="all counts are zero"):
            s, _ = initialize(f, d)
        assert s.theta[1] == pytest.approx(np.log(1e-4))
        with pytest.warns(UserWarning):
            res = fit(f, d)
        assert np.isfinite(res.loglik)

    def test_random_effect_start(self):
        f = ModelFormula(ar=Component(random=True), end=Component(random=True),
                         random_effects="correlated")
        _, cov = initialize(f, hhh_data(0))
        np.testing.assert_allclose(cov.sigma, 0.3)
        np.testing.assert_array_equal(cov.spherical_r, [0.0])


class TestInnerStep:
    def test_quadratic_one_step(self, monkeypatch):
        A = np.array([[4.0, 1.0, 0.5], [1.0, 3.0, 0.2], [0.5, 0.2, 2.0]])
        a = np.array([1.0, -2.0, 0.5])
        fake = types.SimpleNamespace(
            _ctx=lambda c: c,
            penloglik=lambda x, cov, ctx: -0.5 * (x - a) @ A @ (x - a),
            score_pen=lambda x, cov, ctx: A @ (a - x),
            fisher_pen=lambda x, cov, ctx: A)
        monkeypatch.setattr(est, "lik", fake)
        ctx = types.SimpleNamespace(design=types.SimpleNamespace(P=3, psi_slice=slice(3, 3)))
        res = inner_step(np.zeros(3), None, ctx, FitOptions(inner_tol=1e-10))
        assert res.converged
        # the first Newton step lands on the maximum (value 0); any later
        # iteration only confirms the objective-change criterion
        assert res.history[1] == pytest.approx(0.0, abs=1e-12)
        np.testing.assert_allclose(res.x, a, atol=1e-12)

    def test_monotone_and_first_order(self, germany_data_500):
        cfg, data = germany_data_500
        des = assemble_design(cfg.formula, data)
        ctx = LikelihoodContext(des)
        x0 = des.pack(initialize(cfg.formula, data, des)[0])
        res = inner_step(x0, None, ctx, FitOptions())
        h = np.array(res.history)
        assert (np.diff(h) >= -1e-12 * (1 + np.abs(h[1:]))).all()
        assert res.converged and np.abs(score_pen(res.x, None, ctx)).max() < 1e-6

    def test_truth_perturbed_start(self, germany_data_500):
        cfg, data = germany_data_500
        des = assemble_design(cfg.formula, data)
        truth = des.vector_from_dict(cfg.truth)
        x0 = truth + np.random.default_rng(0).normal(0, 0.1, des.P)
        res = inner_step(x0, None, LikelihoodContext(des), FitOptions())
        assert res.converged and res.iterations < 50


class TestFit:
    def test_recovers_truth(self, germany_data_500):
        cfg, data = germany_data_500
        res = fit(cfg.formula, data)
        assert res.converged and res.diagnostics["max_score"] < 1e-6
        truth = res.design.vector_from_dict(cfg.truth)
        z = (res.x - truth) / res.se
        assert np.abs(z).max() < 4

    def test_invalid_data(self):
        y = np.ones((10, 3))
        y[2, 1] = -1
        d = SurveillanceData(y, ["a", "b", "c"], adjacency=PATH3)
        with pytest.raises(DataValidationError, match="nonnegative"):
            fit(ModelFormula(end=Component()), d)

    def test_bad_init_length(self):
        f = ModelFormula(end=Component())
        with pytest.raises(ConfigurationError):
            fit(f, hhh_data(0), init=(np.zeros(5), CovarianceSpec("none")))

    def test_bad_options(self):
        with pytest.raises(ConfigurationError):
            FitOptions(inner_tol=0)
        with pytest.raises(ConfigurationError):
            FitOptions(max_outer_iter=0)

    def test_outputs(self, germany_data_500):
        cfg, data = germany_data_500
        res = fit(cfg.formula, data)
        amp = res.amplitudes()
        assert list(amp.component) == ["zi"]
        d, z = res.coef("zi.sin(2*pi*t/26)"), res.coef("zi.cos(2*pi*t/26)")
        assert amp.amplitude[0] == pytest.approx(np.hypot(d, z))
        rt = res.reproduction_numbers()
        assert rt.shape == (data.T - 1,) and (rt > 0).all()
        summ = res.summary()
        assert summ["maxEV_range"] == [rt.min(), rt.max()]
        assert summ["zi_lag_odds_multiplier"] == pytest.approx(np.exp(res.coef("zi.y_lag")))
        assert res.random_effects().empty


@pytest.fixture(scope="module")
def single_re():
    """Endemic random intercepts only, sigma = 0.6, R=16, T=500."""
    f = ModelFormula(ar=Component(), ne=Component(offset="pop_frac"),
                     end=Component(random=True), family="nb")
    cov = CovarianceSpec("uncorrelated", ("end",), log_sigma=[np.log(0.6)], R=16)
    cfg = SimConfig(f, germany_template(500),
                    {"ar.intercept": -0.5, "ne.intercept": 0.0, "end.intercept": 1.0, "psi": 0.3},
                    cov=cov)
    data = cfg.template.with_counts(simulate(cfg, seed=12))
    return f, data, fit(f, data)


class TestRandomEffects:
    def test_sigma_recovered(self, single_re):
        _, _, res = single_re
        assert res.converged
        assert res.cov.n_params == 1
        assert abs(res.cov.sigma[0] / 0.6 - 1) < 0.5

    def test_outer_ascent(self, single_re):
        f, data, res = single_re
        ctx = LikelihoodContext(res.design)
        start = res.cov.from_vector([np.log(0.2)])
        before = marginal_loglik(start, res.x, ctx)
        new, after, stalled = outer_step(start, res.x, ctx, FitOptions())
        assert not stalled and after >= before
        assert after == pytest.approx(marginal_loglik(new, res.x, ctx))

    def test_ratio_table(self, single_re):
        _, _, res = single_re
        re = res.random_effects()
        assert len(re) == 16 and set(re.ratio_kind) == {"rate ratio"}
        np.testing.assert_allclose(re.ratio, np.exp(re.estimate))

    def test_uncorrelated_parameter_count(self):
        f = ModelFormula(ar=Component(random=True), end=Component(random=True), family="poisson")
        res = fit(f, hhh_data(3, T=80), FitOptions(max_outer_iter=5))
        assert res.cov.structure == "uncorrelated" and res.cov.n_params == 2
