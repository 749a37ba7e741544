"""Tests for links, moment conditions and the two-step GMM estimator."""

import numpy as np
import pytest

from mnar_factor.errors import InputError, InsufficientDataError, RidgeWarning
from mnar_factor.gmm import (
    LOGISTIC,
    PROBIT,
    T4,
    InsufficientMissingnessError,
    Link,
    MissingnessMechanism,
    moment_h,
    psi_eval,
    moment_matrix,
    sample_moments,
    stabilised_inverse,
    two_step_gmm,
)

LINKS = [LOGISTIC, PROBIT, T4]


def mnar_feature(n=2000, alpha=1.5, delta=-0.5, link=LOGISTIC, seed=0):
    """One feature whose two instruments drive its mean."""
    rng = np.random.default_rng(seed)
    U = rng.normal(size=(n, 2))
    y = 0.8 * U[:, 0] + 0.6 * U[:, 1] + rng.normal(scale=0.5, size=n)
    prob = MissingnessMechanism(link, alpha, delta).probability(y)
    r = (rng.uniform(size=n) < prob).astype(int)
    return y, r, U


class TestLink:
    """Tests for the Link type."""

    @pytest.mark.parametrize(
        "text,kind,df",
        [("logistic", "logistic", None), ("logit", "logistic", None), ("probit", "probit", None),
         ("t4", "t", 4.0), ("T(2.5)", "t", 2.5)],
    )
    def test_parse(self, text, kind, df):
        """Test the accepted link spellings."""
        link = Link.parse(text)
        assert link.kind == kind
        assert link.df == df

    def test_parse_unknown(self):
        """Test that an unknown link is an input error."""
        with pytest.raises(InputError):
            Link.parse("cauchy")

    def test_names(self):
        """Test display names."""
        assert T4.name == "t4"
        assert LOGISTIC.name == "logistic"

    def test_values_at_zero(self):
        """Test cdf and pdf at zero for every link."""
        assert LOGISTIC.cdf(np.array(0.0)) == pytest.approx(0.5)
        assert LOGISTIC.pdf(np.array(0.0)) == pytest.approx(0.25)
        assert PROBIT.pdf(np.array(0.0)) == pytest.approx(1.0 / np.sqrt(2.0 * np.pi))
        assert T4.cdf(np.array(0.0)) == pytest.approx(0.5)
        assert T4.pdf(np.array(0.0)) == pytest.approx(3.0 / 8.0)

    def test_mechanism_requires_positive_alpha(self):
        """Test that alpha <= 0 is rejected."""
        with pytest.raises(InputError):
            MissingnessMechanism(LOGISTIC, 0.0, 1.0)


class TestMoments:
    """Tests for the moment function and its gradient."""

    def test_missing_cell_moment_is_design_row(self):
        """Test that h = (1, A) when r = 0, whatever y is."""
        mech = MissingnessMechanism(LOGISTIC, 1.0, 0.0)
        h = moment_h(np.nan, 0, np.array([0.5, -2.0]), mech)
        assert h.tolist() == [1.0, 0.5, -2.0]

    def test_observed_cell_at_delta(self):
        """Test that h = -(1, A) for an observed cell at y = delta under the logistic link."""
        mech = MissingnessMechanism(LOGISTIC, 2.0, 3.0)
        h = moment_h(3.0, 1, np.array([1.0, 2.0]), mech)
        assert h == pytest.approx([-1.0, -1.0, -2.0])

    def test_matrix_rows_match_moment_h(self):
        """Test that moment_matrix stacks moment_h rows."""
        y, r, U = mnar_feature(n=30)
        H = moment_matrix(y, r, U, 1.3, 0.2, T4)
        mech = MissingnessMechanism(T4, 1.3, 0.2)
        for i in range(30):
            assert H[i] == pytest.approx(moment_h(y[i], r[i], U[i], mech))

    @pytest.mark.parametrize("link", LINKS, ids=lambda link: link.name)
    def test_mean_zero_at_truth(self, link):
        """Test the moment identity by Monte Carlo at the generating parameters."""
        y, r, U = mnar_feature(n=200_000, alpha=0.6, delta=-0.5, link=link, seed=5)
        H = moment_matrix(y, r, U, 0.6, -0.5, link)
        standard_error = H.std(axis=0) / np.sqrt(H.shape[0])
        assert np.all(np.abs(H.mean(axis=0)) < 4.0 * standard_error)

    @pytest.mark.parametrize("link", LINKS, ids=lambda link: link.name)
    def test_gradient_matches_finite_differences(self, link):
        """Test the analytic Gamma against central differences at random points."""
        rng = np.random.default_rng(17)
        y, r, U = mnar_feature(n=100, link=link, seed=2)
        step = 1e-6
        for _ in range(100):
            alpha = float(np.exp(rng.uniform(-0.5, 0.5)))
            delta = float(rng.uniform(-1.0, 0.5))
            gamma = sample_moments(y, r, U, alpha, delta, link).Gamma

            def h_bar(a, d):
                return sample_moments(y, r, U, a, d, link).h_bar

            d_alpha = (h_bar(alpha + step, delta) - h_bar(alpha - step, delta)) / (2 * step)
            d_delta = (h_bar(alpha, delta + step) - h_bar(alpha, delta - step)) / (2 * step)
            np.testing.assert_allclose(gamma[:, 0], d_alpha, rtol=1e-4, atol=1e-7)
            np.testing.assert_allclose(gamma[:, 1], d_delta, rtol=1e-4, atol=1e-7)


def test_stabilised_inverse_ridges_singular_matrix():
    """Test that a singular matrix is ridged with a warning."""
    singular = np.array([[1.0, 1.0], [1.0, 1.0]])
    with pytest.warns(RidgeWarning):
        inverse = stabilised_inverse(singular)
    assert np.all(np.isfinite(inverse))
    assert np.allclose(inverse, inverse.T)


class TestTwoStepGmm:
    """Tests for two_step_gmm."""

    def test_recovers_mechanism(self):
        """Test that a large sample recovers alpha and delta."""
        y, r, U = mnar_feature()
        fit = two_step_gmm(y, r, U, link=LOGISTIC)

        assert fit.log_alpha_hat == pytest.approx(np.log(1.5), abs=0.3)
        assert fit.delta_hat == pytest.approx(-0.5, abs=0.3)
        assert fit.J >= 0.0
        assert fit.n_obs == int(r.sum())

    def test_covariance_is_symmetric_psd(self):
        """Test that V_hat and R_hat are symmetric positive semi-definite."""
        y, r, U = mnar_feature(n=800, seed=3)
        fit = two_step_gmm(y, r, U, link=LOGISTIC)

        assert np.allclose(fit.V_hat, fit.V_hat.T)
        assert np.linalg.eigvalsh(fit.R_hat).min() >= -1e-12
        assert fit.theta.shape == (2,)

    def test_location_equivariance(self):
        """Test that shifting y by c shifts delta by c and leaves alpha unchanged."""
        y, r, U = mnar_feature(n=800, seed=3)
        fit = two_step_gmm(y, r, U, link=LOGISTIC)
        shifted = two_step_gmm(y + 5.0, r, U, link=LOGISTIC)

        assert shifted.alpha_hat == pytest.approx(fit.alpha_hat, rel=1e-4)
        assert shifted.delta_hat == pytest.approx(fit.delta_hat + 5.0, abs=1e-4)
        assert shifted.J == pytest.approx(fit.J, rel=1e-3, abs=1e-8)

    def test_no_missing_cells(self):
        """Test that a fully observed feature is rejected."""
        y, _, U = mnar_feature(n=50)
        with pytest.raises(InsufficientMissingnessError):
            two_step_gmm(y, np.ones(50, dtype=int), U)

    def test_too_few_observed(self):
        """Test that fewer than ten observed cells are rejected."""
        y, _, U = mnar_feature(n=50)
        r = np.zeros(50, dtype=int)
        r[:9] = 1
        with pytest.raises(InsufficientDataError):
            two_step_gmm(y, r, U)


def test_psi_eval_clamps_values():
    """Test that Psi is kept inside (0, 1) in the far tails."""
    value, derivative = psi_eval(LOGISTIC, np.array([-1000.0, 0.0, 1000.0]))
    assert np.all(value > 0.0)
    assert np.all(value < 1.0)
    assert value[1] == pytest.approx(0.5)
    assert derivative[1] == pytest.approx(0.25)
