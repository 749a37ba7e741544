"""Stabilised inverse-probability-weighted regression for missing-set features.

Observed cells are weighted by w_hat * gamma_hat, where w_hat estimates
1/Psi and gamma_hat is the instrument-predicted observation probability.
The sandwich variance inflates each cell by (1 - h_i)^-2 for its leverage.
"""

import warnings
from dataclasses import dataclass
from functools import cached_property

import numpy as np

from mnar_factor.errors import LeverageWarning, NumericalError
from mnar_factor.stats_util import DegenerateLabelsError, logistic_fit, ols_masked

MAX_CONDITION = 1e12

# Smallest 1 - h allowed in the leverage correction
LEVERAGE_GAP = 1e-8


class SingularWeightedDesignError(NumericalError):
    """Raised when Z' W Z is singular or too ill-conditioned to invert."""

    pass


@dataclass(frozen=True)
class WeightedFit:
    """IPW estimate for one feature.

    Attributes:
        eta_hat: Coefficients on the columns of Z
        covariance: Leverage-corrected sandwich covariance of eta_hat
        leverage: h_i of the weighted design (0 where the weight is 0)
        residuals: y_i - z_i' eta_hat at observed cells, 0 elsewhere
        gamma_hat: Stabilisation probabilities used in the weights
    """

    eta_hat: np.ndarray
    covariance: np.ndarray
    leverage: np.ndarray
    residuals: np.ndarray
    gamma_hat: np.ndarray

    @property
    def standard_errors(self) -> np.ndarray:
        return np.sqrt(np.clip(np.diag(self.covariance), 0.0, None))


def stabilization_probabilities(r: np.ndarray, U: np.ndarray) -> np.ndarray:
    """P(r = 1 | U) from a logistic regression of r on (1 | U).

    When r shows no variation the fit is undefined and every entry is mean(r).
    """
    r = np.asarray(r, dtype=float)
    U = np.asarray(U, dtype=float)
    if U.ndim == 1:
        U = U[:, None]
    design = np.hstack([np.ones((r.size, 1)), U])
    try:
        return logistic_fit(r, design).probabilities
    except DegenerateLabelsError:
        return np.full(r.size, float(np.clip(r.mean(), 1e-12, 1.0 - 1e-12)))


def _weighted_bread(Z: np.ndarray, weights: np.ndarray) -> np.ndarray:
    bread = (Z * weights[:, None]).T @ Z
    bread = (bread + bread.T) / 2.0
    condition = np.linalg.cond(bread)
    if not np.isfinite(condition) or condition > MAX_CONDITION:
        raise SingularWeightedDesignError(
            f"weighted design has condition number {condition:.3g}"
        )
    return bread


def ipw_point(
    y: np.ndarray, Z: np.ndarray, w_hat: np.ndarray, gamma_hat: np.ndarray
) -> np.ndarray:
    """Weighted least squares with weights w_hat * gamma_hat.

    Cells with zero weight never contribute, whatever y holds there.

    Raises:
        SingularWeightedDesignError: If Z' W Z has condition number above 1e12
    """
    Z = np.asarray(Z, dtype=float)
    weights = np.asarray(w_hat, dtype=float) * np.asarray(gamma_hat, dtype=float)
    y = np.where(weights > 0, np.asarray(y, dtype=float), 0.0)
    bread = _weighted_bread(Z, weights)
    return np.linalg.solve(bread, Z.T @ (weights * y))


def ipw_variance(
    y: np.ndarray,
    Z: np.ndarray,
    eta_hat: np.ndarray,
    w_hat: np.ndarray,
    v_hat: np.ndarray,
    gamma_hat: np.ndarray,
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Leverage-corrected sandwich covariance of an IPW estimate.

    A^-1 {sum_i (1 - h_i)^-2 gamma_i^2 v_i e_i^2 z_i z_i'} A^-1 with
    A = Z' W Z and h_i = w_i gamma_i z_i' A^-1 z_i. A leverage within 1e-8
    of one has its correction capped (LeverageWarning).

    Returns:
        (covariance, leverage, residuals)
    """
    Z = np.asarray(Z, dtype=float)
    w_hat = np.asarray(w_hat, dtype=float)
    gamma_hat = np.asarray(gamma_hat, dtype=float)
    weights = w_hat * gamma_hat
    positive = weights > 0
    y = np.where(positive, np.asarray(y, dtype=float), 0.0)

    bread_inv = np.linalg.inv(_weighted_bread(Z, weights))
    leverage = weights * np.einsum("ij,jk,ik->i", Z, bread_inv, Z)
    residuals = np.where(positive, y - Z @ np.asarray(eta_hat, dtype=float), 0.0)

    gap = 1.0 - leverage
    capped = positive & (gap < LEVERAGE_GAP)
    if capped.any():
        warnings.warn(
            f"{int(capped.sum())} cells have leverage within {LEVERAGE_GAP:g} of 1; "
            "their correction was capped",
            LeverageWarning,
            stacklevel=2,
        )
    gap = np.maximum(gap, LEVERAGE_GAP)

    scale = np.where(
        positive, gamma_hat**2 * np.asarray(v_hat, dtype=float) * residuals**2 / gap**2, 0.0
    )
    meat = (Z * scale[:, None]).T @ Z
    covariance = bread_inv @ meat @ bread_inv
    return (covariance + covariance.T) / 2.0, np.where(positive, leverage, 0.0), residuals


def ipw_fit(
    y: np.ndarray,
    mask: np.ndarray,
    Z: np.ndarray,
    w_hat: np.ndarray,
    v_hat: np.ndarray,
    gamma_hat: np.ndarray,
) -> WeightedFit:
    """Point estimate and corrected covariance in one call.

    Weights at cells where ``mask`` is 0 are forced to zero.
    """
    observed = np.asarray(mask) == 1
    w_hat = np.where(observed, np.asarray(w_hat, dtype=float), 0.0)
    v_hat = np.where(observed, np.asarray(v_hat, dtype=float), 0.0)
    eta_hat = ipw_point(y, Z, w_hat, gamma_hat)
    covariance, leverage, residuals = ipw_variance(y, Z, eta_hat, w_hat, v_hat, gamma_hat)
    return WeightedFit(
        eta_hat=eta_hat,
        covariance=covariance,
        leverage=leverage,
        residuals=residuals,
        gamma_hat=np.asarray(gamma_hat, dtype=float),
    )


def ols_complete(
    y: np.ndarray, Z: np.ndarray, mask: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    """Masked OLS for observed-set features: (eta_hat, covariance) with df = sum(mask) - cols.

    Raises:
        InsufficientDataError: If no residual degrees of freedom remain
    """
    fit = ols_masked(y, Z, mask)
    return fit.coefficients, fit.covariance


@dataclass(frozen=True)
class MechanismWeights:
    """Inverse-probability weights for the missing-set features of one matrix.

    Rows follow ``features`` (row indices of the intensity matrix); columns
    are samples.

    Attributes:
        features: Feature indices with estimated mechanisms
        w_hat: E(1/Psi) at observed cells, 0 at missing cells
        v_hat: E(1/Psi^2) at observed cells, 0 at missing cells
        gamma_hat: Stabilisation probabilities
        in_subset: True where the mechanism passed the J-test screen
    """

    features: np.ndarray
    w_hat: np.ndarray
    v_hat: np.ndarray
    gamma_hat: np.ndarray
    in_subset: np.ndarray

    @cached_property
    def _rows(self) -> dict[int, int]:
        return {int(g): i for i, g in enumerate(self.features)}

    def row(self, g: int) -> int | None:
        """Row of feature g, or None if it has no weights."""
        return self._rows.get(int(g))
