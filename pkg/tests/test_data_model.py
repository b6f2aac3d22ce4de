import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from zihhh.data_model import (SurveillanceData, amplitude_phase, apply_transform, build_weights,
                              germany_states, seasonal_covariates, transform_values, validate)


def make(T=364, R=16, **kw):
    y = np.random.default_rng(0).poisson(2.0, (T, R))
    A = np.zeros((R, R))
    for r in range(R - 1):
        A[r, r + 1] = A[r + 1, r] = 1
    kw.setdefault("adjacency", A)
    return SurveillanceData(y, [f"u{r}" for r in range(R)], **kw)


class TestValidate:
    def test_well_formed_passes(self):
        rep = validate(make())
        assert rep.ok and not rep.errors

    def test_nonzero_diagonal(self):
        d = make(T=10, R=3)
        A = d.adjacency.copy()
        A[1, 1] = 1
        rep = validate(SurveillanceData(d.counts, d.unit_names, adjacency=A))
        assert not rep.ok
        assert any("adjacency diagonal must be zero" in e for e in rep.errors)

    def test_negative_count(self):
        d = make(T=10, R=3)
        y = d.counts.copy()
        y[4, 2] = -1
        rep = validate(d.with_counts(y))
        assert any("counts must be nonnegative" in e for e in rep.errors)
        assert "row 5" in str(rep) and "u2" in str(rep)

    @pytest.mark.parametrize("bad, msg", [
        (np.array([[0, 1, 0], [0, 0, 1], [0, 1, 0]]), "symmetric"),
        (np.array([[0, 2, 0], [2, 0, 1], [0, 1, 0]]), "binary"),
        (np.ones((2, 2)) - np.eye(2), "3x3"),
    ])
    def test_adjacency_errors(self, bad, msg):
        d = make(T=10, R=3)
        rep = validate(SurveillanceData(d.counts, d.unit_names, adjacency=bad))
        assert any(msg in e for e in rep.errors)

    def test_nan_count_reported(self):
        y = make(T=10, R=3).counts.copy()
        y[3, 0] = np.nan
        rep = validate(make(T=10, R=3).with_counts(y))
        assert any("finite" in e for e in rep.errors)

    def test_noninteger_and_offset(self):
        d = make(T=10, R=3, offsets={"o": np.zeros((10, 3))})
        y = d.counts.copy()
        y[0, 0] = 0.5
        rep = validate(d.with_counts(y))
        assert any("integers" in e for e in rep.errors)
        assert any("offset 'o'" in e for e in rep.errors)

    def test_isolated_unit_warns(self):
        d = make(T=10, R=3, adjacency=np.zeros((3, 3)))
        rep = validate(d)
        assert rep.ok and rep.warnings

    def test_single_period_fails(self):
        assert not validate(make(T=1, R=2)).ok


class TestSurveillanceData:
    def test_immutable(self):
        d = make(T=5, R=2)
        with pytest.raises(ValueError):
            d.counts[0, 0] = 3

    def test_slice_keeps_time(self):
        d = make(T=20, R=2).slice_time(15, start=5)
        assert d.T == 10
        np.testing.assert_array_equal(d.time, np.arange(6, 16))

    def test_scalar_covariate_broadcast(self):
        d = make(T=5, R=2, covariates={"c": 0.5})
        assert d.covariates["c"].shape == (5, 2)


class TestWeights:
    def test_path_graph_normalized(self):
        A = np.array([[0, 1, 0], [1, 0, 1], [0, 1, 0]])
        W = build_weights(A, normalize=True)
        expected = np.array([[0, 1, 0], [0.5, 0, 0.5], [0, 1, 0]])
        np.testing.assert_allclose(W, expected)
        # each sending unit's weights sum to one
        np.testing.assert_allclose(W.sum(axis=1), 1.0)

    def test_single_unit(self):
        np.testing.assert_array_equal(build_weights(np.zeros((1, 1)), True), np.zeros((1, 1)))
        np.testing.assert_array_equal(build_weights(np.zeros((1, 1)), False), np.zeros((1, 1)))

    def test_complete_k3(self):
        W = build_weights(np.ones((3, 3)) - np.eye(3))
        np.testing.assert_allclose(W, 0.5 * (np.ones((3, 3)) - np.eye(3)))

    def test_unnormalized_is_adjacency(self):
        A = np.array([[0, 1, 1], [1, 0, 0], [1, 0, 0]])
        np.testing.assert_array_equal(build_weights(A, normalize=False), A)

    def test_isolated_row_zero(self):
        A = np.array([[0, 1, 0], [1, 0, 0], [0, 0, 0]])
        with pytest.warns(UserWarning):
            W = build_weights(A)
        assert not W[2].any() and not W[:, 2].any()


class TestSeasonality:
    def test_full_period(self):
        np.testing.assert_allclose(seasonal_covariates(np.array([26]), 1, 26), [[0, 1]], atol=1e-15)

    def test_half_period(self):
        np.testing.assert_allclose(seasonal_covariates(np.array([13]), 1, 26), [[0, -1]], atol=1e-15)

    def test_two_harmonics(self):
        w = 2 * np.pi / 26
        np.testing.assert_allclose(seasonal_covariates(np.array([1]), 2, 26),
                                   [[np.sin(w), np.cos(w), np.sin(2 * w), np.cos(2 * w)]])

    @given(st.integers(1, 2000), st.integers(1, 4), st.integers(2, 60))
    def test_periodicity(self, t, S, freq):
        a = seasonal_covariates(np.array([t]), S, freq)
        b = seasonal_covariates(np.array([t + freq]), S, freq)
        np.testing.assert_allclose(a, b, atol=1e-9)

    @pytest.mark.parametrize("S, freq", [(0, 26), (1, 1)])
    def test_bad_arguments(self, S, freq):
        with pytest.raises(ValueError):
            seasonal_covariates(np.arange(5), S, freq)


class TestAmplitude:
    def test_three_four_five(self):
        A, _ = amplitude_phase(0.4, -0.3)
        assert A == pytest.approx(0.5)

    def test_pure_sine(self):
        assert amplitude_phase(1.0, 0.0) == (pytest.approx(1.0), pytest.approx(0.0))

    def test_degenerate(self):
        A, ph = amplitude_phase(0.0, 0.0)
        assert A == 0 and np.isnan(ph)

    @given(st.floats(-5, 5), st.floats(-5, 5))
    def test_reconstructs_wave(self, d, z):
        A, ph = amplitude_phase(d, z)
        if A == 0:
            return
        t = np.linspace(0, 26, 7)
        w = 2 * np.pi * t / 26
        np.testing.assert_allclose(d * np.sin(w) + z * np.cos(w), A * np.sin(w + ph), atol=1e-9)


class TestTransforms:
    def setup_method(self):
        x = np.full((4, 2), 0.9)
        n = np.array([[1.0, 3.0]] * 4)
        self.d = SurveillanceData(np.zeros((4, 2)), ["a", "b"], covariates={"vacc": x, "pop": n})

    @pytest.mark.parametrize("op, expected", [
        ("log1m", np.log(0.1)),
        ("log1m_kappa", np.log(1 - 0.92 * 0.9)),
        ("one_minus_kappa", 1 - 0.92 * 0.9),
    ])
    def test_values(self, op, expected):
        np.testing.assert_allclose(transform_values(op, self.d, "vacc"), expected)

    def test_population_fractions(self):
        np.testing.assert_allclose(transform_values("pop_fraction", self.d, "pop")[0], [0.25, 0.75])
        np.testing.assert_allclose(transform_values("unvacc_pop", self.d, "vacc", pop="pop")[0],
                                   (1 - 0.92 * 0.9) * np.array([0.25, 0.75]))

    def test_offset_ops_go_to_offsets(self):
        d = apply_transform(self.d, "u", "one_minus_kappa", "vacc", kappa=0.5)
        assert "u" in d.offsets and "u" not in d.covariates
        np.testing.assert_allclose(d.offsets["u"], 0.55)

    def test_unknown(self):
        with pytest.raises(ValueError):
            transform_values("sqrt", self.d, "vacc")
        with pytest.raises(KeyError):
            transform_values("log", self.d, "nope")


def test_germany_states_graph():
    codes, A, pop = germany_states()
    assert len(codes) == 16 and pop.shape == (16,)
    np.testing.assert_array_equal(A, A.T)
    assert not np.diag(A).any() and (A.sum(axis=1) > 0).all()
    # Berlin is enclosed by Brandenburg; Bremen by Lower Saxony
    assert A[codes.index("BE")].sum() == 1 and A[codes.index("BE"), codes.index("BB")] == 1
    assert A[codes.index("HB")].sum() == 1 and A[codes.index("HB"), codes.index("NI")] == 1
