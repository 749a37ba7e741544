"""Tests for latent covariate recovery and per-feature association."""

import numpy as np
import pandas as pd
import pytest

from mnar_factor.data_model import DesignMatrices, IntensityMatrix, partition_metabolites
from mnar_factor.errors import InputError
from mnar_factor.ipw import MechanismWeights
from mnar_factor.latent import (
    associate,
    estimate_C2,
    estimate_Omega,
    fit_latent_model,
    interest_residual,
    naive_associate,
    qq_table,
    recover_C,
    select_latent_K,
)
from mnar_factor.stats_util import ols_masked, project_out


def confounded_data(p=80, n=50, seed=0, missing_rows=0):
    """Two latent factors orthogonal to a two-column design, plus optional partly missing rows."""
    rng = np.random.default_rng(seed)
    x = rng.normal(size=n)
    design = DesignMatrices(X_interest=x, X_nuisance=np.ones(n))
    C2 = project_out(rng.normal(size=(2, n)), design.X).T
    C2 = np.sqrt(n) * np.linalg.qr(C2)[0]
    L = rng.normal(scale=2.0, size=(p, 2))
    values = 5.0 + L @ C2.T + rng.normal(size=(p, n))
    mask = np.ones((p, n), dtype=int)
    for g in range(missing_rows):
        mask[g, rng.choice(n, size=n // 5, replace=False)] = 0
    matrix = IntensityMatrix(
        values=values,
        mask=mask,
        feature_ids=tuple(f"F{i}" for i in range(p)),
        sample_ids=tuple(f"S{j}" for j in range(n)),
    )
    return matrix, design, C2


class TestEstimateC2:
    """Tests for estimate_C2."""

    def test_constraints_and_objective(self):
        """Test the orthogonality and scale constraints and a non-increasing objective."""
        matrix, design, _ = confounded_data()
        C2, beta, ell, trace = estimate_C2(matrix.values, matrix.mask.astype(float), design.X, 2)

        n = matrix.n_samples
        assert C2.shape == (n, 2)
        assert np.abs(C2.T @ design.X).max() < 1e-8
        assert np.abs(C2.T @ C2 / n - np.eye(2)).max() < 1e-8
        assert beta.shape == (matrix.n_features, 2)
        assert ell.shape == (matrix.n_features, 2)
        assert np.all(np.diff(trace) <= 1e-6 * np.asarray(trace[:-1]))

    def test_spans_generating_factors(self):
        """Test that C2_hat spans the generating latent factors."""
        matrix, design, C2_true = confounded_data(seed=1)
        C2, *_ = estimate_C2(matrix.values, matrix.mask.astype(float), design.X, 2)

        coef, *_ = np.linalg.lstsq(C2, C2_true, rcond=None)
        residual = C2_true - C2 @ coef
        assert np.linalg.norm(residual) / np.linalg.norm(C2_true) < 0.2

    @pytest.mark.parametrize("K", [0, 48])
    def test_factor_count_range(self, K):
        """Test that K outside [1, n - d) is an input error."""
        matrix, design, _ = confounded_data()
        with pytest.raises(InputError):
            estimate_C2(matrix.values, matrix.mask.astype(float), design.X, K)


def test_estimate_omega_screens_signal_features():
    """Test that Omega is recovered with a few true signals among the features."""
    rng = np.random.default_rng(4)
    m = 200
    Omega_true = np.array([[0.5, -0.3]])
    ell = rng.normal(size=(m, 2))
    beta_tilde = ell @ Omega_true.T + rng.normal(scale=0.2, size=(m, 1))
    beta_tilde[:10, 0] += 3.0 * rng.choice([-1.0, 1.0], size=10)
    tau = np.full((m, 1), 0.04)

    Omega = estimate_Omega(beta_tilde, ell, tau)

    assert Omega.shape == (1, 2)
    np.testing.assert_allclose(Omega, Omega_true, atol=0.06)


def test_estimate_omega_lowers_weighted_residuals():
    """Test that the refined Omega leaves smaller weighted residuals on null features than Omega = 0."""
    rng = np.random.default_rng(6)
    m = 200
    ell = rng.normal(size=(m, 2))
    beta_tilde = ell @ np.array([[0.5, -0.3]]).T + rng.normal(scale=0.2, size=(m, 1))
    beta_tilde[:10, 0] += 3.0 * rng.choice([-1.0, 1.0], size=10)
    tau = np.full((m, 1), 0.04)

    Omega = estimate_Omega(beta_tilde, ell, tau, rounds=3)

    def objective(omega):
        residual = beta_tilde[10:] - ell[10:] @ omega.T
        return float(np.sum(residual**2 / tau[10:]))

    assert objective(Omega) < objective(np.zeros((1, 2)))
    assert objective(Omega) < 1.5 * m


def test_recover_c():
    """Test C_hat = X Omega + C2."""
    X = np.arange(6.0).reshape(3, 2)
    Omega = np.array([[1.0], [0.5]])
    C2 = np.ones((3, 1))
    assert recover_C(X, Omega, C2) == pytest.approx(X @ Omega + C2)


def test_interest_residual_is_orthogonal_to_nuisance():
    """Test that the nuisance columns are projected out of X_interest."""
    rng = np.random.default_rng(0)
    design = DesignMatrices(
        X_interest=rng.normal(size=20) + 3.0,
        X_nuisance=np.column_stack([np.ones(20), rng.normal(size=20)]),
    )
    residual = interest_residual(design)
    assert residual.shape == (20, 1)
    assert np.abs(design.X_nuisance.T @ residual).max() < 1e-10


def test_fit_latent_model_shapes():
    """Test the recovered latent covariates on complete data."""
    matrix, design, _ = confounded_data(seed=2)
    partition = partition_metabolites(matrix)

    model = fit_latent_model(matrix, design, partition, None, K=2)

    assert model.K == 2
    assert model.C_hat.shape == (matrix.n_samples, 2)
    assert model.Omega_hat.shape == (1, 2)
    assert model.features.tolist() == list(range(matrix.n_features))
    assert np.abs(model.C2_hat.T @ design.X).max() < 1e-8


def test_select_latent_k():
    """Test that the design-projected parallel analysis finds two factors."""
    matrix, design, _ = confounded_data(seed=3)
    partition = partition_metabolites(matrix)
    assert select_latent_K(matrix, partition, design.X, n_perm=19, seed=1) == 2


class TestAssociate:
    """Tests for associate and naive_associate."""

    def test_known_factors_reduce_to_ols(self):
        """Test that complete features with known C give OLS on (X, C)."""
        matrix, design, C = confounded_data(p=10, n=40)
        partition = partition_metabolites(matrix)

        results = associate(matrix, design, C, partition, None)

        Z = np.hstack([design.X, C])
        for g in range(10):
            fit = ols_masked(matrix.values[g], Z)
            assert results.beta[g, 0] == pytest.approx(fit.coefficients[0], abs=1e-10)
            assert results.se[g, 0] == pytest.approx(fit.standard_errors[0], rel=1e-8)
        assert set(results.method) == {"ols"}
        assert set(results.status) == {"ok"}
        assert results.K == 2

    def test_invariant_to_factor_basis(self):
        """Test that only the column space of C_hat matters."""
        matrix, design, C = confounded_data(p=10, n=40, seed=5)
        partition = partition_metabolites(matrix)
        A = np.array([[2.0, 1.0], [0.0, -1.0]])

        first = associate(matrix, design, C, partition, None)
        second = associate(matrix, design, C @ A, partition, None)

        np.testing.assert_allclose(first.beta, second.beta, rtol=1e-8, atol=1e-12)
        np.testing.assert_allclose(first.se, second.se, rtol=1e-8)

    def test_missing_features(self):
        """Test IPW for features with weights and NaN for features without."""
        matrix, design, C = confounded_data(p=12, n=40, missing_rows=2)
        partition = partition_metabolites(matrix)
        assert partition.missing_set.tolist() == [0, 1]
        observed = matrix.mask[:1] == 1
        weights = MechanismWeights(
            features=np.array([0]),
            w_hat=observed.astype(float),
            v_hat=observed.astype(float),
            gamma_hat=np.ones((1, 40)),
            in_subset=np.array([False]),
        )

        results = associate(matrix, design, C, partition, weights)

        Z = np.hstack([design.X, C])
        expected = ols_masked(matrix.values[0], Z, matrix.mask[0]).coefficients[0]
        assert results.method[:2] == ("ipw", "ipw")
        assert results.beta[0, 0] == pytest.approx(expected, abs=1e-10)
        assert results.flagged[0]
        assert np.isnan(results.beta[1, 0])
        assert results.status[1] == "no mechanism estimate"
        assert np.isnan(results.q_values[1, 0])

    def test_results_frame(self):
        """Test the long-format result table."""
        matrix, design, C = confounded_data(p=6, n=40)
        results = associate(matrix, design, C, partition_metabolites(matrix), None)
        frame = results.to_frame()

        assert isinstance(frame, pd.DataFrame)
        assert len(frame) == 6
        assert frame["covariate"].unique().tolist() == ["interest_1"]
        assert frame["q"].between(0.0, 1.0).all()

    def test_naive_associate(self):
        """Test that the baseline fits every retained feature by OLS."""
        matrix, design, _ = confounded_data(p=12, n=40, missing_rows=3)
        mask = np.array(matrix.mask)
        mask[11, :30] = 0
        matrix = IntensityMatrix(matrix.values, mask, matrix.feature_ids, matrix.sample_ids)
        partition = partition_metabolites(matrix)

        results = naive_associate(matrix, design, 2, partition)

        assert partition.dropped_set.tolist() == [11]
        assert len(results.feature_ids) == matrix.n_features - 1
        assert set(results.method) == {"naive"}
        assert not results.flagged.any()


def test_qq_table():
    """Test the sorted expected and observed -log10 p-values."""
    table = qq_table(np.array([0.5, np.nan, 0.01, 0.2]))

    assert len(table) == 3
    assert table["observed"].tolist() == pytest.approx(-np.log10([0.01, 0.2, 0.5]))
    assert np.all(np.diff(table["expected"]) < 0)
