"""Tests for the shared statistical primitives."""

import warnings

import numpy as np
import pytest

from mnar_factor.errors import InsufficientDataError, SmallSampleWarning
from mnar_factor.stats_util import (
    DegenerateLabelsError,
    EmptyInputError,
    SingularDesignError,
    grenander_density,
    local_fdr,
    logistic_fit,
    ols_masked,
    project_out,
    storey_pi0,
    storey_qvalues,
    t_statistics,
)


@pytest.fixture
def line_data():
    """Four points with a known least-squares line."""
    x = np.array([0.0, 1.0, 2.0, 3.0])
    y = np.array([1.0, 2.0, 3.0, 5.0])
    design = np.column_stack([np.ones(4), x])
    return y, design


class TestOlsMasked:
    """Tests for ols_masked."""

    def test_matches_hand_computation(self, line_data):
        """Test slope, intercept and t statistic against a hand calculation."""
        y, design = line_data
        fit = ols_masked(y, design)

        assert fit.coefficients == pytest.approx([0.8, 1.3])
        assert fit.residual_variance == pytest.approx(0.15)
        assert fit.df_residual == 2
        assert fit.standard_errors[1] == pytest.approx(np.sqrt(0.03))
        assert fit.t_statistics[1] == pytest.approx(7.5055, abs=1e-4)

    def test_masked_rows_are_ignored(self, line_data):
        """Test that a masked row holding NaN leaves the fit unchanged."""
        y, design = line_data
        y_extra = np.append(y, np.nan)
        design_extra = np.vstack([design, [1.0, 100.0]])
        mask = np.array([1, 1, 1, 1, 0])

        fit = ols_masked(y_extra, design_extra, mask)

        assert fit.coefficients == pytest.approx([0.8, 1.3])

    def test_too_few_rows(self, line_data):
        """Test that as many rows as columns is rejected."""
        y, design = line_data
        with pytest.raises(InsufficientDataError):
            ols_masked(y, design, np.array([1, 1, 0, 0]))

    def test_rank_deficient_design(self, line_data):
        """Test that duplicated columns raise SingularDesignError."""
        y, design = line_data
        with pytest.raises(SingularDesignError):
            ols_masked(y, np.column_stack([design, design[:, 1]]))


def test_t_statistics_zero_standard_error():
    """Test the zero standard error conventions."""
    t = t_statistics(np.array([2.0, -1.0, 0.0]), np.array([0.0, 0.0, 0.0]))
    assert t[0] == np.inf
    assert t[1] == -np.inf
    assert t[2] == 0.0


def test_project_out_is_orthogonal_to_basis():
    """Test that projected rows are orthogonal to the basis columns."""
    rng = np.random.default_rng(1)
    basis = np.column_stack([np.ones(20), rng.normal(size=20)])
    matrix = rng.normal(size=(5, 20))

    projected = project_out(matrix, basis)

    assert np.abs(projected @ basis).max() < 1e-10


class TestLogisticFit:
    """Tests for logistic_fit."""

    def test_intercept_only_recovers_mean(self):
        """Test that an intercept-only fit returns the label mean."""
        labels = np.array([1, 1, 1, 0, 1, 1, 1, 0])
        fit = logistic_fit(labels, np.ones((8, 1)))

        assert fit.converged
        assert fit.probabilities == pytest.approx(np.full(8, 0.75))
        assert fit.coefficients[0] == pytest.approx(np.log(3.0))

    def test_degenerate_labels(self):
        """Test that constant labels raise DegenerateLabelsError."""
        with pytest.raises(DegenerateLabelsError):
            logistic_fit(np.ones(6), np.ones((6, 1)))

    def test_empty_labels(self):
        """Test that empty input raises EmptyInputError."""
        with pytest.raises(EmptyInputError):
            logistic_fit(np.zeros(0), np.zeros((0, 1)))

    def test_separation_stops_at_bound(self):
        """Test that perfectly separated labels leave the slope clipped at +-15."""
        x = np.array([-2.0, -1.5, -1.0, -0.5, 0.5, 1.0, 1.5, 2.0])
        labels = (x > 0).astype(float)
        design = np.column_stack([np.ones_like(x), x])
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            fit = logistic_fit(labels, design)

        assert fit.clipped
        assert fit.coefficients[1] == pytest.approx(15.0)
        assert np.all(np.abs(fit.coefficients) <= 15.0)

    def test_score_is_zero_at_optimum(self):
        """Test that the fitted probabilities solve the score equations X'(y - mu) = 0."""
        rng = np.random.default_rng(11)
        x = rng.normal(size=200)
        design = np.column_stack([np.ones_like(x), x])
        labels = (rng.uniform(size=200) < 1.0 / (1.0 + np.exp(-(0.3 + 1.2 * x)))).astype(float)
        fit = logistic_fit(labels, design)

        assert fit.converged
        assert not fit.clipped
        assert design.T @ (labels - fit.probabilities) == pytest.approx(np.zeros(2), abs=1e-6)


class TestQValues:
    """Tests for storey_pi0 and storey_qvalues."""

    def test_step_up_with_known_pi0(self):
        """Test q-values against the step-up formula with pi0 = 1."""
        q = storey_qvalues(np.array([0.01, 0.04, 0.03, 0.5]), pi0=1.0)
        assert q == pytest.approx([0.04, 0.16 / 3, 0.16 / 3, 0.5])

    def test_qvalues_are_monotone_in_p(self):
        """Test that q-values never decrease as p-values grow."""
        p = np.random.default_rng(3).uniform(size=200)
        q = storey_qvalues(p)
        order = np.argsort(p)
        assert np.all(np.diff(q[order]) >= -1e-15)
        assert q.max() <= 1.0

    def test_pi0_near_one_for_uniform(self):
        """Test that uniform p-values give pi0 close to 1."""
        p = np.linspace(0.0005, 0.9995, 1000)
        assert storey_pi0(p) == pytest.approx(1.0, abs=0.05)

    def test_pi0_floor(self):
        """Test that pi0 is floored at 1/m when every p-value is tiny."""
        p = np.full(40, 1e-4)
        assert storey_pi0(p) == pytest.approx(1.0 / 40)

    def test_invalid_pvalues(self):
        """Test that p-values outside [0, 1] are rejected."""
        with pytest.raises(Exception):
            storey_qvalues(np.array([0.2, 1.5]))
        with pytest.raises(EmptyInputError):
            storey_qvalues(np.array([]))


class TestLocalFdr:
    """Tests for grenander_density and local_fdr."""

    def test_density_is_nonincreasing(self):
        """Test that the Grenander estimate decreases with p."""
        rng = np.random.default_rng(7)
        p = np.concatenate([rng.beta(0.3, 4.0, size=100), rng.uniform(size=300)])
        density = grenander_density(p)
        order = np.argsort(p, kind="stable")
        assert np.all(np.diff(density[order]) <= 1e-9)

    def test_uniform_density_near_one(self):
        """Test that an evenly spread sample has density near 1."""
        p = (np.arange(1, 501) - 0.5) / 500
        density = grenander_density(p)
        assert np.median(density) == pytest.approx(1.0, abs=0.1)

    def test_small_sample_falls_back_to_pi0(self):
        """Test that fewer than 50 p-values give lfdr = pi0 with a warning."""
        p = np.linspace(0.01, 0.99, 20)
        with pytest.warns(SmallSampleWarning):
            lfdr = local_fdr(p, pi0=0.9)
        assert lfdr == pytest.approx(np.full(20, 0.9))

    def test_lfdr_small_for_strong_signals(self):
        """Test that the smallest p-values get the smallest lfdr."""
        rng = np.random.default_rng(11)
        p = np.concatenate([np.full(30, 1e-6), rng.uniform(size=270)])
        with warnings.catch_warnings():
            warnings.simplefilter("error", SmallSampleWarning)
            lfdr = local_fdr(p)
        assert lfdr[:30].max() < 0.2
        assert np.all((lfdr >= 0.0) & (lfdr <= 1.0))
