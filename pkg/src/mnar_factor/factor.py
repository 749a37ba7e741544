"""Instrument-generating factors from nearly complete features.

Factors are estimated from the features in the observed set only, so that
they are approximately independent of the missingness indicators of the
features in the missing set.
"""

import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy import linalg

from mnar_factor.data_model import IntensityMatrix, NoCompleteFeaturesError, Partition
from mnar_factor.errors import ConvergenceWarning, InputError, NumericalError, SelectionWarning
from mnar_factor.parallel import map_tasks
from mnar_factor.stats_util import project_out


class RankError(NumericalError):
    """Raised when more factors are requested than the data can support."""

    pass


@dataclass(frozen=True)
class FactorEstimate:
    """Estimated factors with n^-1 C'C = I and C'1 = 0.

    Attributes:
        C_hat: n x K factor matrix
        loadings: p_s x K loadings (U S / sqrt(n))
        column_scales: Singular values for each column, nonincreasing
        centered: Whether the data were projected off an intercept-containing basis
        iterations: EM iterations used (0 for the closed form)
        converged: False when the EM loop hit its iteration cap
    """

    C_hat: np.ndarray
    loadings: np.ndarray
    column_scales: np.ndarray
    centered: bool = True
    iterations: int = 0
    converged: bool = True

    @property
    def K(self) -> int:
        return self.C_hat.shape[1]


@dataclass(frozen=True)
class KMissSelection:
    """Outcome of the K_miss rule: the chosen k and f(k) for every k evaluated."""

    k_miss: int
    coverage: dict[int, float] = field(default_factory=dict)
    fallback: bool = False


def with_intercept(Z: np.ndarray | None, n: int) -> np.ndarray:
    """Return Z with the all-ones column appended unless it already lies in im(Z)."""
    ones = np.ones((n, 1))
    if Z is None:
        return ones
    Z = np.asarray(Z, dtype=float)
    if Z.ndim == 1:
        Z = Z[:, None]
    residual = project_out(ones.T, Z)
    if np.linalg.norm(residual) <= 1e-8 * np.sqrt(n):
        return Z
    return np.hstack([ones, Z])


def _flip_signs(C: np.ndarray, loadings: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    # entry of largest magnitude in each column is made positive
    rows = np.argmax(np.abs(C), axis=0)
    signs = np.sign(C[rows, np.arange(C.shape[1])])
    signs[signs == 0] = 1.0
    return C * signs, loadings * signs


def _top_k(residual: np.ndarray, K: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    u, s, vt = linalg.svd(residual, full_matrices=False)
    return u[:, :K], s[:K], vt[:K]


def estimate_complete_factors(
    matrix: IntensityMatrix,
    K: int,
    Z: np.ndarray | None = None,
    max_iter: int = 200,
    tol: float = 1e-6,
) -> FactorEstimate:
    """Estimate K factors from a matrix of (nearly) complete features.

    Without missing cells the factors are sqrt(n) times the top-K right
    singular vectors of Y P_perp(Z). With trace missingness the missing cells
    are first filled with feature means and then refilled from the rank-K
    reconstruction until successive reconstructions agree.

    Args:
        matrix: Intensity matrix restricted to the observed set
        K: Number of factors
        Z: n x t observed covariates; the intercept is added when absent
        max_iter: EM iteration cap
        tol: Relative Frobenius tolerance between successive reconstructions

    Raises:
        NoCompleteFeaturesError: If the matrix has no features
        RankError: If K >= min(p_s, n - t)
    """
    if matrix.n_features == 0:
        raise NoCompleteFeaturesError("no features available for factor estimation")
    n = matrix.n_samples
    Z = with_intercept(Z, n)
    t = np.linalg.matrix_rank(Z)
    if K < 1 or K >= min(matrix.n_features, n - t):
        raise RankError(
            f"K={K} factors requested but at most {min(matrix.n_features, n - t) - 1} "
            f"are estimable from {matrix.n_features} features and {n} samples"
        )

    observed = matrix.mask == 1
    y = np.array(matrix.values, dtype=float)
    iterations = 0
    converged = True

    if observed.all():
        u, s, vt = _top_k(project_out(y, Z), K)
    else:
        counts = np.maximum(observed.sum(axis=1), 1)
        row_means = (y * observed).sum(axis=1) / counts
        y = np.where(observed, y, row_means[:, None])

        q_z, _ = np.linalg.qr(Z)
        previous: np.ndarray | None = None
        converged = False
        for iterations in range(1, max_iter + 1):
            fitted_z = (y @ q_z) @ q_z.T
            u, s, vt = _top_k(y - fitted_z, K)
            reconstruction = fitted_z + (u * s) @ vt
            y = np.where(observed, y, reconstruction)
            if previous is not None:
                change = np.linalg.norm(reconstruction - previous) / max(
                    np.linalg.norm(previous), 1e-300
                )
                if change < tol:
                    converged = True
                    break
            previous = reconstruction

        if not converged:
            warnings.warn(
                f"factor EM stopped after {max_iter} iterations without converging",
                ConvergenceWarning,
                stacklevel=2,
            )
        u, s, vt = _top_k(project_out(y, Z), K)

    C = np.sqrt(n) * vt.T
    loadings = u * s / np.sqrt(n)
    C, loadings = _flip_signs(C, loadings)

    return FactorEstimate(
        C_hat=C,
        loadings=loadings,
        column_scales=s,
        centered=True,
        iterations=iterations,
        converged=converged,
    )


def _filled_centered(values: np.ndarray | IntensityMatrix) -> np.ndarray:
    if isinstance(values, IntensityMatrix):
        observed = values.mask == 1
        y = np.array(values.values, dtype=float)
        counts = np.maximum(observed.sum(axis=1), 1)
        row_means = (y * observed).sum(axis=1) / counts
        y = np.where(observed, y, row_means[:, None])
    else:
        y = np.array(values, dtype=float)
    return y - y.mean(axis=1, keepdims=True)


def _permuted_singular_values(task: tuple[np.ndarray, int, int]) -> np.ndarray:
    centered, seed, index = task
    rng = np.random.default_rng([seed, index])
    permuted = rng.permuted(centered, axis=1)
    return linalg.svdvals(permuted)


def parallel_analysis(
    values: np.ndarray | IntensityMatrix,
    n_perm: int = 99,
    seed: int = 0,
    workers: int = 1,
    quantile: float = 0.95,
) -> int:
    """Count leading singular values that beat their permutation null.

    Each permutation shuffles every feature (row) independently. Component k
    is retained while its singular value exceeds the ``quantile`` of the
    k-th permuted singular values; counting stops at the first failure.

    Raises:
        InputError: If the matrix is empty or n_perm < 19
    """
    if n_perm < 19:
        raise InputError(f"parallel analysis needs at least 19 permutations, got {n_perm}")
    centered = _filled_centered(values)
    if centered.size == 0:
        raise InputError("parallel analysis received an empty matrix")

    observed = linalg.svdvals(centered)
    null = np.vstack(
        map_tasks(
            _permuted_singular_values,
            [(centered, seed, b) for b in range(n_perm)],
            workers,
        )
    )
    thresholds = np.quantile(null, quantile, axis=0, method="higher")

    # the last singular value of a row-centered matrix is structurally ~0
    usable = min(centered.shape[0], centered.shape[1] - 1)
    exceed = observed[:usable] > thresholds[:usable]
    if exceed.all():
        return int(usable)
    return int(np.argmin(exceed))


def select_K_miss(
    matrix: IntensityMatrix,
    partition: Partition,
    K_PA: int,
    Z: np.ndarray | None = None,
    q_threshold: float = 0.05,
    coverage: float = 0.9,
) -> KMissSelection:
    """Smallest k in {2, ..., K_PA} whose second instrument is significant for enough features.

    f(k) is the fraction of missing-set features whose second-best q-value
    is at most ``q_threshold`` when k factors are estimated. Candidates are
    evaluated in increasing order and the search stops at the first k with
    f(k) >= ``coverage``. When none qualifies K_PA is returned with a
    SelectionWarning. With no missing-set feature K_PA is returned unchanged.
    """
    from mnar_factor.instruments import instrument_scan

    if partition.missing_set.size == 0:
        return KMissSelection(k_miss=K_PA)

    complete = matrix.subset(partition.observed_set)
    n = matrix.n_samples
    ceiling = min(complete.n_features, n - np.linalg.matrix_rank(with_intercept(Z, n))) - 1
    upper = min(K_PA, ceiling)
    if upper < 2:
        warnings.warn(
            f"K_PA={K_PA} leaves fewer than two instruments; using K_miss=2",
            SelectionWarning,
            stacklevel=2,
        )
        return KMissSelection(k_miss=2, fallback=True)

    fractions: dict[int, float] = {}
    for k in range(2, upper + 1):
        factors = estimate_complete_factors(complete, k, Z=Z)
        tables = instrument_scan(matrix, partition.missing_set, factors, Z=Z)
        if tables.q_values.shape[0] == 0:
            fractions[k] = 0.0
            continue
        second_best = np.sort(tables.q_values, axis=1)[:, 1]
        fractions[k] = float(np.mean(second_best <= q_threshold))
        if fractions[k] >= coverage:
            return KMissSelection(k_miss=k, coverage=fractions)

    warnings.warn(
        f"no k in 2..{upper} reached instrument coverage {coverage:.2f}; using K_miss={upper}",
        SelectionWarning,
        stacklevel=2,
    )
    return KMissSelection(k_miss=upper, coverage=fractions, fallback=True)
