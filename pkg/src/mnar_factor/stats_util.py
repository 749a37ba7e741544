"""Shared statistical primitives: masked OLS, logistic IRLS, q-values and lfdr."""

import warnings
from dataclasses import dataclass

import numpy as np
from scipy import linalg, special, stats

from mnar_factor.errors import (
    ConvergenceWarning,
    InputError,
    InsufficientDataError,
    NumericalError,
    SmallSampleWarning,
)

# Storey tuning grid for the null proportion
DEFAULT_LAMBDAS = np.round(np.arange(0.05, 0.951, 0.05), 2)

# Separation guard for logistic coefficients
LOGISTIC_COEF_BOUND = 15.0

# Minimum number of p-values for the Grenander density
LFDR_MIN_PVALUES = 50


class SingularDesignError(NumericalError):
    """Raised when a design matrix loses full column rank."""

    pass


class DegenerateLabelsError(InputError):
    """Raised when binary labels show no variation."""

    pass


class EmptyInputError(InputError):
    """Raised when a statistical routine receives no values."""

    pass


@dataclass(frozen=True)
class OlsFit:
    """Ordinary least squares fit on the observed rows.

    Attributes:
        coefficients: Estimated coefficients (length q)
        standard_errors: Homoskedastic standard errors
        t_statistics: coefficients / standard_errors
        p_values: Two-sided t-distribution p-values
        residual_variance: RSS / df_residual
        df_residual: Observed rows minus q
        covariance: residual_variance * (D'D)^-1
    """

    coefficients: np.ndarray
    standard_errors: np.ndarray
    t_statistics: np.ndarray
    p_values: np.ndarray
    residual_variance: float
    df_residual: int
    covariance: np.ndarray


@dataclass(frozen=True)
class LogisticFit:
    """Maximum-likelihood logistic regression fitted by IRLS."""

    coefficients: np.ndarray
    probabilities: np.ndarray
    converged: bool
    iterations: int
    clipped: bool


def project_out(matrix: np.ndarray, basis: np.ndarray) -> np.ndarray:
    """Return ``matrix @ P_perp`` where P_perp projects off the column space of ``basis``.

    ``matrix`` is rows x n and ``basis`` is n x t.
    """
    q, _ = np.linalg.qr(np.asarray(basis, dtype=float))
    matrix = np.asarray(matrix, dtype=float)
    return matrix - (matrix @ q) @ q.T


def t_statistics(coefficients: np.ndarray, standard_errors: np.ndarray) -> np.ndarray:
    """coef / se elementwise; a zero se gives +-inf for nonzero coef and 0 otherwise."""
    coefficients = np.asarray(coefficients, dtype=float)
    standard_errors = np.asarray(standard_errors, dtype=float)
    with np.errstate(divide="ignore", invalid="ignore"):
        t = np.where(
            standard_errors > 0,
            coefficients / np.where(standard_errors > 0, standard_errors, 1.0),
            np.where(coefficients == 0, 0.0, np.sign(coefficients) * np.inf),
        )
    return t


def ols_masked(
    y: np.ndarray, design: np.ndarray, mask: np.ndarray | None = None
) -> OlsFit:
    """Fit OLS of ``y`` on ``design`` using only rows where ``mask`` is 1.

    Masked rows may hold any value, including NaN; they never enter the fit.

    Raises:
        InsufficientDataError: If observed rows do not exceed the number of columns
        SingularDesignError: If the observed design is rank deficient
    """
    y = np.asarray(y, dtype=float)
    design = np.asarray(design, dtype=float)
    if design.ndim == 1:
        design = design[:, None]
    observed = np.ones(y.shape[0], dtype=bool) if mask is None else np.asarray(mask) == 1

    d_obs = design[observed]
    y_obs = y[observed]
    n_obs, q = d_obs.shape
    df = n_obs - q
    if df <= 0:
        raise InsufficientDataError(
            f"OLS needs more observed rows than columns ({n_obs} rows, {q} columns)"
        )
    if np.linalg.matrix_rank(d_obs) < q:
        raise SingularDesignError(
            f"observed design ({n_obs} x {q}) does not have full column rank"
        )

    coefficients, _, _, _ = np.linalg.lstsq(d_obs, y_obs, rcond=None)
    residuals = y_obs - d_obs @ coefficients
    rss = float(residuals @ residuals)
    sigma2 = rss / df

    xtx_inv = linalg.inv(d_obs.T @ d_obs)
    covariance = sigma2 * xtx_inv
    standard_errors = np.sqrt(np.clip(np.diag(covariance), 0.0, None))
    t = t_statistics(coefficients, standard_errors)
    p_values = np.clip(2.0 * stats.t.sf(np.abs(t), df), 0.0, 1.0)

    return OlsFit(
        coefficients=coefficients,
        standard_errors=standard_errors,
        t_statistics=t,
        p_values=p_values,
        residual_variance=sigma2,
        df_residual=df,
        covariance=covariance,
    )


def logistic_fit(
    labels: np.ndarray,
    design: np.ndarray,
    max_iter: int = 100,
    tol: float = 1e-8,
) -> LogisticFit:
    """Fit a logistic regression by iteratively reweighted least squares.

    Each Newton step is clipped so that every coefficient stays within
    +-LOGISTIC_COEF_BOUND; under separation the fit stops at that bound.

    Args:
        labels: Binary outcome vector
        design: n x q design matrix (include an intercept column explicitly)
        max_iter: Maximum number of Newton steps
        tol: Convergence tolerance on the largest coefficient change

    Returns:
        The fit; non-convergence is reported with a ConvergenceWarning and the last iterate

    Raises:
        DegenerateLabelsError: If all labels are identical
    """
    labels = np.asarray(labels, dtype=float)
    design = np.asarray(design, dtype=float)
    if design.ndim == 1:
        design = design[:, None]
    if labels.size == 0:
        raise EmptyInputError("logistic_fit received no labels")
    if np.all(labels == labels[0]):
        raise DegenerateLabelsError(
            f"all {labels.size} labels equal {labels[0]:g}; logistic fit is undefined"
        )

    q = design.shape[1]
    beta = np.zeros(q)
    converged = False
    iteration = 0
    for iteration in range(1, max_iter + 1):
        mu = special.expit(design @ beta)
        weights = mu * (1.0 - mu)
        gradient = design.T @ (labels - mu)
        hessian = (design * weights[:, None]).T @ design + 1e-10 * np.eye(q)
        try:
            step = linalg.solve(hessian, gradient, assume_a="pos")
        except linalg.LinAlgError:
            step = np.linalg.lstsq(hessian, gradient, rcond=None)[0]
        beta_new = np.clip(beta + step, -LOGISTIC_COEF_BOUND, LOGISTIC_COEF_BOUND)
        change = np.max(np.abs(beta_new - beta))
        beta = beta_new
        if change < tol:
            converged = True
            break

    if not converged:
        warnings.warn(
            f"logistic IRLS did not converge in {max_iter} iterations",
            ConvergenceWarning,
            stacklevel=2,
        )

    probabilities = np.clip(special.expit(design @ beta), 1e-12, 1.0 - 1e-12)
    return LogisticFit(
        coefficients=beta,
        probabilities=probabilities,
        converged=converged,
        iterations=iteration,
        clipped=bool(np.any(np.abs(beta) >= LOGISTIC_COEF_BOUND)),
    )


def _validate_pvalues(p_values: np.ndarray) -> np.ndarray:
    p = np.asarray(p_values, dtype=float).ravel()
    if p.size == 0:
        raise EmptyInputError("no p-values supplied")
    if np.any(~np.isfinite(p)) or p.min() < 0.0 or p.max() > 1.0:
        raise InputError("p-values must be finite and lie in [0, 1]")
    return p


def storey_pi0(
    p_values: np.ndarray, lambdas: np.ndarray = DEFAULT_LAMBDAS
) -> float:
    """Estimate the proportion of true nulls.

    pi0(lambda) = mean(p >= lambda) / (1 - lambda) is computed on the grid,
    smoothed by a quadratic fit and read off at the largest lambda. The
    result is clipped to [1/m, 1].
    """
    p = _validate_pvalues(p_values)
    m = p.size
    lambdas = np.asarray(lambdas, dtype=float)

    pi0_lambda = np.array([np.mean(p >= lam) / (1.0 - lam) for lam in lambdas])
    if lambdas.size >= 3:
        coefficients = np.polyfit(lambdas, pi0_lambda, deg=2)
        pi0 = float(np.polyval(coefficients, lambdas[-1]))
    else:
        pi0 = float(pi0_lambda[-1])

    return float(np.clip(pi0, 1.0 / m, 1.0))


def storey_qvalues(p_values: np.ndarray, pi0: float | None = None) -> np.ndarray:
    """Storey q-values with the step-up minimum, returned in input order.

    Args:
        p_values: Vector of p-values in [0, 1]
        pi0: Null proportion; estimated with storey_pi0 when None

    Raises:
        EmptyInputError: If no p-values are given
    """
    p = _validate_pvalues(p_values)
    m = p.size
    if pi0 is None:
        pi0 = storey_pi0(p)

    order = np.argsort(p, kind="stable")
    ranked = p[order]
    raw = pi0 * ranked * m / np.arange(1, m + 1)
    stepped = np.minimum.accumulate(raw[::-1])[::-1]

    q = np.empty(m)
    q[order] = np.minimum(stepped, 1.0)
    return q


def _concave_majorant(x: np.ndarray, y: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Upper convex hull of points sorted by x (monotone chain)."""
    hull: list[tuple[float, float]] = []
    for point in zip(x.tolist(), y.tolist()):
        while len(hull) >= 2:
            (ox, oy), (ax, ay) = hull[-2], hull[-1]
            cross = (ax - ox) * (point[1] - oy) - (ay - oy) * (point[0] - ox)
            if cross >= 0:
                hull.pop()
            else:
                break
        hull.append(point)
    knots = np.array(hull)
    return knots[:, 0], knots[:, 1]


def grenander_density(p_values: np.ndarray) -> np.ndarray:
    """Monotone decreasing density estimate on [0, 1], evaluated at each p.

    The estimate is the left derivative of the least concave majorant of
    the empirical CDF.
    """
    p = _validate_pvalues(p_values)
    m = p.size

    values, counts = np.unique(p, return_counts=True)
    ecdf = np.cumsum(counts) / m
    if values[0] == 0.0:
        # mass at zero becomes a very steep first segment
        values[0] = np.nextafter(0.0, 1.0)
    x = np.concatenate([[0.0], values])
    y = np.concatenate([[0.0], ecdf])
    if x[-1] < 1.0:
        x = np.concatenate([x, [1.0]])
        y = np.concatenate([y, [1.0]])

    knots_x, knots_y = _concave_majorant(x, y)
    slopes = np.diff(knots_y) / np.diff(knots_x)

    segment = np.clip(np.searchsorted(knots_x, p, side="left"), 1, knots_x.size - 1) - 1
    return slopes[segment]


def local_fdr(p_values: np.ndarray, pi0: float | None = None) -> np.ndarray:
    """Local false discovery rates pi0 / f(p) with a Grenander density f.

    With fewer than LFDR_MIN_PVALUES values the density cannot be estimated
    and every lfdr is pi0 (SmallSampleWarning).
    """
    p = _validate_pvalues(p_values)
    if pi0 is None:
        pi0 = storey_pi0(p)

    if p.size < LFDR_MIN_PVALUES:
        warnings.warn(
            f"only {p.size} p-values; lfdr set to pi0 = {pi0:.3f}",
            SmallSampleWarning,
            stacklevel=2,
        )
        return np.full(p.size, pi0)

    density = grenander_density(p)
    with np.errstate(divide="ignore"):
        lfdr = np.where(density > 0, pi0 / np.where(density > 0, density, 1.0), 1.0)
    return np.clip(lfdr, 0.0, 1.0)
