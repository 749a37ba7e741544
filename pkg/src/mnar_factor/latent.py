"""Latent covariates and the final per-feature association.

The latent factors C are split into a part in the image of the design and a
part orthogonal to it, C = X Omega + C2. C2 is fitted by weighted alternating
least squares over the complete features and the well-specified missing-set
features; Omega is recovered by regressing the design coefficients on the
loadings with a q-value screen against features that carry real signal.
"""

import warnings
from dataclasses import dataclass, field

import numpy as np
import pandas as pd
from scipy import linalg, stats

from mnar_factor.data_model import DesignMatrices, IntensityMatrix, Partition
from mnar_factor.errors import InputError, MnarFactorError, NumericalError, SelectionWarning
from mnar_factor.factor import estimate_complete_factors, parallel_analysis
from mnar_factor.ipw import MechanismWeights, ipw_fit, ols_complete
from mnar_factor.stats_util import SingularDesignError, project_out, storey_qvalues

DEFAULT_EPS_QVALUE = 0.1
DEFAULT_OMEGA_ROUNDS = 3

# Relative objective increase tolerated from the constraint projection
MONOTONE_SLACK = 1e-6


class ConvergenceError(NumericalError):
    """Raised when the alternating fit of C2 increases its objective."""

    pass


@dataclass(frozen=True)
class C2Estimate:
    """Orthogonal latent factors and the per-feature coefficients fitted with them.

    Rows of ``beta_tilde``, ``ell_hat``, ``tau_hat`` and ``covariances``
    follow ``features``. ``covariances`` is the joint covariance of
    (beta_tilde, ell_hat) for each feature.
    """

    C2_hat: np.ndarray
    beta_tilde: np.ndarray
    ell_hat: np.ndarray
    tau_hat: np.ndarray
    covariances: np.ndarray
    features: np.ndarray
    sweeps: int
    objective: list[float] = field(default_factory=list)


@dataclass(frozen=True)
class LatentModel:
    """Recovered latent covariates C_hat = X Omega_hat + C2_hat."""

    C2_hat: np.ndarray
    Omega_hat: np.ndarray
    C_hat: np.ndarray
    beta_tilde: np.ndarray
    ell_hat: np.ndarray
    tau_hat: np.ndarray
    features: np.ndarray
    sweeps: int

    @property
    def K(self) -> int:
        return self.C_hat.shape[1]


@dataclass(frozen=True)
class AssociationResults:
    """Per-feature estimates of the interest coefficients.

    Arrays are features x interest covariates. Failed features hold NaN and
    a non-"ok" status.
    """

    feature_ids: tuple[str, ...]
    covariates: tuple[str, ...]
    beta: np.ndarray
    se: np.ndarray
    p_values: np.ndarray
    q_values: np.ndarray
    method: tuple[str, ...]
    flagged: np.ndarray
    status: tuple[str, ...]
    K: int

    def to_frame(self) -> pd.DataFrame:
        """Long table with one row per (feature, covariate)."""
        records = []
        for i, feature in enumerate(self.feature_ids):
            for j, covariate in enumerate(self.covariates):
                records.append(
                    {
                        "feature": feature,
                        "covariate": covariate,
                        "beta": self.beta[i, j],
                        "se": self.se[i, j],
                        "p": self.p_values[i, j],
                        "q": self.q_values[i, j],
                        "method": self.method[i],
                        "flagged": bool(self.flagged[i]),
                        "status": self.status[i],
                    }
                )
        return pd.DataFrame.from_records(
            records,
            columns=["feature", "covariate", "beta", "se", "p", "q", "method", "flagged", "status"],
        )


def _weighted_rows(
    Y: np.ndarray, weights: np.ndarray, Z: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    """Row-wise weighted least squares of Y on Z; returns (coefficients, objective terms)."""
    gram = np.einsum("gi,ia,ib->gab", weights, Z, Z)
    rhs = np.einsum("gi,ia->ga", weights * Y, Z)
    try:
        coefficients = np.linalg.solve(gram, rhs[:, :, None])[:, :, 0]
    except np.linalg.LinAlgError:
        raise SingularDesignError("a feature's weighted design (X C2) is singular")
    residuals = Y - coefficients @ Z.T
    return coefficients, np.sum(weights * residuals**2, axis=1)


def _normalise_c2(C2: np.ndarray, X: np.ndarray) -> np.ndarray:
    """Project C2 off im(X) and rescale so that C2'C2 / n = I."""
    n = C2.shape[0]
    C2 = project_out(C2.T, X).T
    u, _, vt = linalg.svd(C2, full_matrices=False)
    return np.sqrt(n) * u @ vt


def _initial_c2(Y: np.ndarray, weights: np.ndarray, X: np.ndarray, K: int) -> np.ndarray:
    observed = weights > 0
    counts = np.maximum(observed.sum(axis=1), 1)
    means = (Y * observed).sum(axis=1) / counts
    filled = np.where(observed, Y, means[:, None])
    _, _, vt = linalg.svd(project_out(filled, X), full_matrices=False)
    return np.sqrt(Y.shape[1]) * vt[:K].T


def estimate_C2(
    Y: np.ndarray,
    weights: np.ndarray,
    X: np.ndarray,
    K: int,
    max_sweeps: int = 500,
    tol: float = 1e-8,
) -> tuple[np.ndarray, np.ndarray, np.ndarray, list[float]]:
    """Maximise the weighted quasi-likelihood over (beta_tilde, ell, C2).

    Minimises sum_g sum_i W_gi (y_gi - x_i' beta_g - c_i' ell_g)^2 subject to
    C2' X = 0 and C2' C2 / n = I. Each sweep fits every feature by weighted
    least squares on (X C2), then updates each row of C2 by weighted least
    squares given the loadings and projects back onto the constraint set.

    Args:
        Y: Features x samples intensities; values at zero weight are ignored
        weights: Features x samples weights (the mask for complete features,
            w_hat * gamma_hat for missing-set features)
        X: n x d design
        K: Number of latent factors
        max_sweeps: Sweep cap
        tol: Relative objective change that ends the iterations

    Returns:
        (C2_hat, beta_tilde, ell_hat, objective trace)

    Raises:
        InputError: If K is not in [1, n - d)
        ConvergenceError: If a sweep increases the objective by more than 1e-6 relative
    """
    Y = np.asarray(Y, dtype=float)
    weights = np.asarray(weights, dtype=float)
    X = np.asarray(X, dtype=float)
    n, d = X.shape
    if Y.shape[0] == 0:
        raise InputError("no features available to estimate latent factors")
    if K < 1 or K >= n - d:
        raise InputError(f"K={K} latent factors requested; need 1 <= K < n - d = {n - d}")
    Y = np.where(weights > 0, Y, 0.0)

    C2 = _normalise_c2(_initial_c2(Y, weights, X, K), X)
    trace: list[float] = []
    coefficients = np.zeros((Y.shape[0], d + K))
    sweeps = 0
    for sweeps in range(1, max_sweeps + 1):
        coefficients, terms = _weighted_rows(Y, weights, np.hstack([X, C2]))
        objective = float(terms.sum())
        if trace and objective > trace[-1] * (1.0 + MONOTONE_SLACK) + 1e-300:
            raise ConvergenceError(
                f"latent factor objective rose from {trace[-1]:.6g} to {objective:.6g} "
                f"at sweep {sweeps}"
            )
        trace.append(objective)
        if len(trace) >= 2 and abs(trace[-2] - trace[-1]) <= tol * max(trace[-2], 1e-300):
            break

        beta = coefficients[:, :d]
        ell = coefficients[:, d:]
        partial = Y - beta @ X.T
        gram = np.einsum("gi,ga,gb->iab", weights, ell, ell) + 1e-10 * np.eye(K)
        rhs = np.einsum("gi,ga->ia", weights * partial, ell)
        C2 = _normalise_c2(np.linalg.solve(gram, rhs[:, :, None])[:, :, 0], X)

    return C2, coefficients[:, :d], coefficients[:, d:], trace


def fit_C2(
    matrix: IntensityMatrix,
    design: DesignMatrices,
    partition: Partition,
    weights: MechanismWeights | None,
    K: int,
    max_sweeps: int = 500,
) -> C2Estimate:
    """Fit C2 on the complete features plus the well-specified missing-set features.

    After the alternating fit, each feature is refitted on
    (X_interest | X_nuisance | C2): complete features by masked OLS and
    missing-set features by IPW, giving beta_tilde for the interest columns,
    the loadings and their joint covariance.
    """
    features = [int(g) for g in partition.observed_set]
    rows = [matrix.mask[g].astype(float) for g in features]
    if weights is not None:
        for k, g in enumerate(weights.features):
            if weights.in_subset[k]:
                features.append(int(g))
                rows.append(weights.w_hat[k] * weights.gamma_hat[k])

    feature_index = np.array(features, dtype=int)
    W = np.vstack(rows) if rows else np.zeros((0, matrix.n_samples))
    X = design.X
    C2, _, _, trace = estimate_C2(matrix.values[feature_index], W, X, K, max_sweeps=max_sweeps)

    d_int = design.n_interest
    Z = np.hstack([X, C2])
    block = np.r_[np.arange(d_int), np.arange(X.shape[1], X.shape[1] + K)]
    betas, ells, taus, covs, kept = [], [], [], [], []
    for g in feature_index:
        try:
            eta, cov = _feature_fit(matrix, g, Z, weights)
        except (MnarFactorError, np.linalg.LinAlgError):
            continue
        betas.append(eta[:d_int])
        ells.append(eta[X.shape[1] :])
        taus.append(np.diag(cov)[:d_int])
        covs.append(cov[np.ix_(block, block)])
        kept.append(int(g))

    return C2Estimate(
        C2_hat=C2,
        beta_tilde=np.array(betas).reshape(len(kept), d_int),
        ell_hat=np.array(ells).reshape(len(kept), K),
        tau_hat=np.array(taus).reshape(len(kept), d_int),
        covariances=np.array(covs).reshape(len(kept), d_int + K, d_int + K),
        features=np.array(kept, dtype=int),
        sweeps=len(trace),
        objective=trace,
    )


def _feature_fit(
    matrix: IntensityMatrix, g: int, Z: np.ndarray, weights: MechanismWeights | None
) -> tuple[np.ndarray, np.ndarray]:
    row = None if weights is None else weights.row(g)
    if row is None:
        return ols_complete(matrix.values[g], Z, matrix.mask[g])
    fit = ipw_fit(
        matrix.values[g],
        matrix.mask[g],
        Z,
        weights.w_hat[row],  # type: ignore[union-attr]
        weights.v_hat[row],  # type: ignore[union-attr]
        weights.gamma_hat[row],  # type: ignore[union-attr]
    )
    return fit.eta_hat, fit.covariance


def _precision_regression(
    beta_j: np.ndarray, ell: np.ndarray, tau_j: np.ndarray, keep: np.ndarray
) -> np.ndarray:
    precision = np.where(keep, 1.0 / tau_j, 0.0)
    gram = (ell * precision[:, None]).T @ ell
    try:
        return linalg.solve(gram, ell.T @ (precision * beta_j), assume_a="sym")
    except linalg.LinAlgError:
        raise SingularDesignError("precision-weighted loading matrix is singular")


def estimate_Omega(
    beta_tilde: np.ndarray,
    ell_hat: np.ndarray,
    tau_hat: np.ndarray,
    eps_q: float = DEFAULT_EPS_QVALUE,
    rounds: int = DEFAULT_OMEGA_ROUNDS,
    covariances: np.ndarray | None = None,
) -> np.ndarray:
    """Regress the design coefficients on the loadings, screening signal features.

    Round 0 regresses beta_tilde[:, j] on ell with precisions 1/tau[:, j].
    Each later round recomputes beta = beta_tilde - Omega ell, tests every
    coefficient against chi-square(1), and refits each row of Omega on the
    features whose q-value exceeds ``eps_q``. When a screen removes every
    feature the previous row is kept (SelectionWarning).

    Args:
        beta_tilde: m x d design coefficients from the C2 fit
        ell_hat: m x K loadings
        tau_hat: m x d variances of beta_tilde
        eps_q: q-value screen
        rounds: Number of refinement rounds
        covariances: m x (d+K) x (d+K) joint covariances of (beta_tilde, ell);
            when given, each round's variances are transformed exactly,
            otherwise tau is used

    Returns:
        d x K matrix Omega_hat
    """
    beta_tilde = np.asarray(beta_tilde, dtype=float)
    ell = np.asarray(ell_hat, dtype=float)
    tau = np.asarray(tau_hat, dtype=float)
    usable = np.all(np.isfinite(tau) & (tau > 0), axis=1) & np.all(np.isfinite(ell), axis=1)
    beta_tilde, ell, tau = beta_tilde[usable], ell[usable], tau[usable]
    if covariances is not None:
        covariances = np.asarray(covariances, dtype=float)[usable]
    m, d = beta_tilde.shape
    K = ell.shape[1]

    everyone = np.ones(m, dtype=bool)
    Omega = np.vstack([_precision_regression(beta_tilde[:, j], ell, tau[:, j], everyone) for j in range(d)])

    for _ in range(rounds):
        beta = beta_tilde - ell @ Omega.T
        if covariances is None:
            variances = tau
        else:
            variances = np.empty((m, d))
            for j in range(d):
                # beta_j = e_j' beta_tilde - Omega_j' ell
                contrast = np.zeros(d + K)
                contrast[j] = 1.0
                contrast[d:] = -Omega[j]
                variances[:, j] = np.einsum("a,gab,b->g", contrast, covariances, contrast)
        variances = np.maximum(variances, 1e-300)
        p_values = stats.chi2.sf(beta**2 / variances, df=1)

        updated = Omega.copy()
        for j in range(d):
            keep = storey_qvalues(p_values[:, j]) > eps_q
            if keep.sum() < K:
                warnings.warn(
                    f"q-value screen left {int(keep.sum())} features for design column {j}; "
                    "keeping the previous estimate",
                    SelectionWarning,
                    stacklevel=2,
                )
                continue
            updated[j] = _precision_regression(beta_tilde[:, j], ell, tau[:, j], keep)
        Omega = updated

    return Omega


def recover_C(X: np.ndarray, Omega_hat: np.ndarray, C2_hat: np.ndarray) -> np.ndarray:
    """C_hat = X Omega_hat + C2_hat."""
    return np.asarray(X, dtype=float) @ np.asarray(Omega_hat, dtype=float) + np.asarray(C2_hat, dtype=float)


def interest_residual(design: DesignMatrices) -> np.ndarray:
    """X_interest with the nuisance columns projected out."""
    return project_out(design.X_interest.T, design.X_nuisance).T


def fit_latent_model(
    matrix: IntensityMatrix,
    design: DesignMatrices,
    partition: Partition,
    weights: MechanismWeights | None,
    K: int,
    eps_q: float = DEFAULT_EPS_QVALUE,
    rounds: int = DEFAULT_OMEGA_ROUNDS,
) -> LatentModel:
    """Estimate C2, Omega and C_hat for one design.

    Omega acts on X_interest with the nuisance columns projected out, so
    C_hat differs from the full-design form only within im(X_nuisance).
    """
    c2 = fit_C2(matrix, design, partition, weights, K)
    Omega = estimate_Omega(
        c2.beta_tilde, c2.ell_hat, c2.tau_hat, eps_q=eps_q, rounds=rounds, covariances=c2.covariances
    )
    C_hat = recover_C(interest_residual(design), Omega, c2.C2_hat)
    return LatentModel(
        C2_hat=c2.C2_hat,
        Omega_hat=Omega,
        C_hat=C_hat,
        beta_tilde=c2.beta_tilde,
        ell_hat=c2.ell_hat,
        tau_hat=c2.tau_hat,
        features=c2.features,
        sweeps=c2.sweeps,
    )


def select_latent_K(
    matrix: IntensityMatrix,
    partition: Partition,
    X: np.ndarray,
    n_perm: int = 99,
    seed: int = 0,
    workers: int = 1,
) -> int:
    """Parallel analysis on the complete features with the design projected out."""
    complete = matrix.subset(partition.observed_set)
    observed = complete.mask == 1
    counts = np.maximum(observed.sum(axis=1), 1)
    means = (complete.values * observed).sum(axis=1) / counts
    filled = np.where(observed, complete.values, means[:, None])
    K = parallel_analysis(project_out(filled, X), n_perm=n_perm, seed=seed, workers=workers)
    return max(int(K), 1)


def _normal_pvalues(beta: np.ndarray, se: np.ndarray) -> np.ndarray:
    with np.errstate(divide="ignore", invalid="ignore"):
        z = beta / se
    return np.clip(2.0 * stats.norm.sf(np.abs(z)), 0.0, 1.0)


def _columnwise_qvalues(p_values: np.ndarray) -> np.ndarray:
    q = np.full_like(p_values, np.nan)
    for j in range(p_values.shape[1]):
        finite = np.isfinite(p_values[:, j])
        if finite.any():
            q[finite, j] = storey_qvalues(p_values[finite, j])
    return q


def associate(
    matrix: IntensityMatrix,
    design: DesignMatrices,
    C_hat: np.ndarray,
    partition: Partition,
    weights: MechanismWeights | None,
) -> AssociationResults:
    """Per-feature inference for the interest covariates given C_hat.

    Complete features use masked OLS on Z = (X_interest | X_nuisance | C_hat);
    missing-set features use stabilised IPW with the leverage-corrected
    sandwich. Missing-set features whose mechanism failed the J-test screen
    are still estimated and marked ``flagged``. Features without weights get
    NaN estimates and a status explaining why.
    """
    Z = np.hstack([design.X, np.asarray(C_hat, dtype=float)])
    d_int = design.n_interest
    features = np.sort(np.concatenate([partition.observed_set, partition.missing_set])).astype(int)

    beta = np.full((features.size, d_int), np.nan)
    se = np.full_like(beta, np.nan)
    methods: list[str] = []
    statuses: list[str] = []
    flagged = np.zeros(features.size, dtype=bool)
    missing = set(partition.missing_set.tolist())

    for i, g in enumerate(features):
        row = None if weights is None else weights.row(int(g))
        if g in missing:
            methods.append("ipw")
            if row is None:
                statuses.append("no mechanism estimate")
                continue
            flagged[i] = not bool(weights.in_subset[row])  # type: ignore[union-attr]
        else:
            methods.append("ols")
        try:
            if g in missing:
                fit = ipw_fit(
                    matrix.values[g],
                    matrix.mask[g],
                    Z,
                    weights.w_hat[row],  # type: ignore[union-attr, index]
                    weights.v_hat[row],  # type: ignore[union-attr, index]
                    weights.gamma_hat[row],  # type: ignore[union-attr, index]
                )
                eta, cov = fit.eta_hat, fit.covariance
            else:
                eta, cov = ols_complete(matrix.values[g], Z, matrix.mask[g])
        except (MnarFactorError, np.linalg.LinAlgError) as e:
            statuses.append(f"{type(e).__name__}: {e}")
            continue
        beta[i] = eta[:d_int]
        se[i] = np.sqrt(np.clip(np.diag(cov)[:d_int], 0.0, None))
        statuses.append("ok")

    p_values = _normal_pvalues(beta, se)
    return AssociationResults(
        feature_ids=tuple(matrix.feature_ids[g] for g in features),
        covariates=design.interest_names,
        beta=beta,
        se=se,
        p_values=p_values,
        q_values=_columnwise_qvalues(p_values),
        method=tuple(methods),
        flagged=flagged,
        status=tuple(statuses),
        K=Z.shape[1] - design.X.shape[1],
    )


def naive_associate(
    matrix: IntensityMatrix, design: DesignMatrices, K: int, partition: Partition
) -> AssociationResults:
    """Baseline that treats all missingness as ignorable.

    Factors come from the complete features with the design projected out,
    and every non-dropped feature is fitted by masked OLS on its observed cells.
    """
    complete = matrix.subset(partition.observed_set)
    C = estimate_complete_factors(complete, K, Z=design.X).C_hat
    ignorable = Partition(
        observed_set=np.sort(np.concatenate([partition.observed_set, partition.missing_set])),
        missing_set=np.zeros(0, dtype=int),
        dropped_set=partition.dropped_set,
        eps_miss=partition.eps_miss,
        max_miss=partition.max_miss,
    )
    results = associate(matrix, design, C, ignorable, None)
    return AssociationResults(
        feature_ids=results.feature_ids,
        covariates=results.covariates,
        beta=results.beta,
        se=results.se,
        p_values=results.p_values,
        q_values=results.q_values,
        method=tuple("naive" for _ in results.method),
        flagged=results.flagged,
        status=results.status,
        K=results.K,
    )


def qq_table(p_values: np.ndarray) -> pd.DataFrame:
    """Expected and observed -log10 p-values, both sorted decreasingly."""
    p = np.asarray(p_values, dtype=float).ravel()
    p = np.sort(p[np.isfinite(p)])
    m = p.size
    expected = -np.log10((np.arange(1, m + 1) - 0.5) / m)
    observed = -np.log10(np.maximum(p, np.finfo(float).tiny))
    return pd.DataFrame({"expected": expected, "observed": observed})
