"""Over-identification test of a fitted mechanism.

The J statistic is compared against a bootstrap null drawn from the
empirical distribution reweighted (by empirical likelihood) so that the
moment conditions hold exactly at the estimate. Features whose local false
discovery rate falls below a threshold are flagged as misspecified.
"""

import warnings
from collections.abc import Sequence
from dataclasses import dataclass

import numpy as np
from scipy import linalg, stats

from mnar_factor.errors import (
    InputError,
    MnarFactorError,
    NumericalError,
    SmallSampleWarning,
)
from mnar_factor.gmm import DEFAULT_LINK, GmmFit, Link, moment_matrix, two_step_gmm
from mnar_factor.parallel import map_tasks
from mnar_factor.stats_util import LFDR_MIN_PVALUES, local_fdr, storey_pi0

DEFAULT_BOOTSTRAP_B = 200
DEFAULT_LFDR_THRESHOLD = 0.8

# Grid points per axis inside bootstrap replicates
BOOTSTRAP_GRID_SIZE = 7


class HullViolationError(NumericalError):
    """Raised when zero is not inside the convex hull of the moment vectors."""

    pass


class BootstrapDegenerateError(NumericalError):
    """Raised when too many bootstrap replicates fail."""

    pass


@dataclass(frozen=True)
class BootstrapResult:
    """Bootstrap null of J for one feature.

    Attributes:
        j_observed: J at the original estimate
        j_null_samples: B bootstrap J values
        p_value: (1 + #{null >= observed}) / (B + 1)
        el_weights: Resampling weights (uniform when el_fallback is set)
        n_failed: Replicates whose inner GMM failed and were redrawn
        el_fallback: True when the empirical-likelihood solve failed
    """

    j_observed: float
    j_null_samples: np.ndarray
    p_value: float
    el_weights: np.ndarray
    n_failed: int = 0
    el_fallback: bool = False


@dataclass(frozen=True)
class MechanismFlags:
    """lfdr per feature and membership of the well-specified subset."""

    lfdr: np.ndarray
    in_subset: np.ndarray
    pi0: float


def el_weights(H: np.ndarray, max_iter: int = 50, tol: float = 1e-10) -> np.ndarray:
    """Empirical-likelihood weights eta maximising prod(eta) subject to sum(eta h_i) = 0.

    Solves the dual in lambda by damped Newton: eta_i = 1 / (n (1 + lambda' h_i)).

    Raises:
        HullViolationError: If the dual does not converge or the weights violate their constraints
    """
    H = np.asarray(H, dtype=float)
    n = H.shape[0]
    lam = np.zeros(H.shape[1])

    def dual(lam_: np.ndarray) -> float:
        return float(np.sum(np.log(1.0 + H @ lam_)))

    converged = False
    for _ in range(max_iter):
        denom = 1.0 + H @ lam
        gradient = H.T @ (1.0 / denom)
        if np.max(np.abs(gradient)) / n < tol:
            converged = True
            break
        scaled = H / denom[:, None]
        hessian = scaled.T @ scaled
        step = np.linalg.lstsq(hessian, gradient, rcond=None)[0]

        current = dual(lam)
        size = 1.0
        for _ in range(60):
            candidate = lam + size * step
            if np.all(1.0 + H @ candidate > 1.0 / n) and dual(candidate) >= current:
                break
            size /= 2.0
        else:
            raise HullViolationError("empirical-likelihood dual step could not be damped")
        lam = candidate

    denom = 1.0 + H @ lam
    if not converged or np.any(denom <= 0):
        raise HullViolationError(
            "empirical-likelihood dual did not converge; zero is not inside the hull of the moments"
        )

    eta = 1.0 / (n * denom)
    if abs(eta.sum() - 1.0) > 1e-8 or np.max(np.abs(eta @ H)) > 1e-8:
        raise HullViolationError("empirical-likelihood weights violate their constraints")
    return eta / eta.sum()


def p_chi2(J: float | np.ndarray) -> float | np.ndarray:
    """Asymptotic chi-square(1) p-value of J (diagnostic only)."""
    return stats.chi2.sf(J, df=1)


def _bootstrap_replicate(
    task: tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray, Link, int, np.ndarray, tuple[int, ...]],
) -> float | None:
    y, r, U, weights, link, grid_size, start, stream = task
    rng = np.random.default_rng(list(stream))
    index = rng.choice(r.size, size=r.size, replace=True, p=weights)
    try:
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            fit = two_step_gmm(
                y[index],
                r[index],
                U[index],
                link=link,
                grid_size=grid_size,
                start=start,
                warn=False,
            )
    except (MnarFactorError, linalg.LinAlgError, ValueError):
        return None
    if not np.isfinite(fit.J):
        return None
    return fit.J


def bootstrap_j_null(
    fit: GmmFit,
    y: np.ndarray,
    r: np.ndarray,
    U: np.ndarray,
    B: int = DEFAULT_BOOTSTRAP_B,
    seed: int | Sequence[int] = 0,
    link: Link | None = None,
    grid_size: int = BOOTSTRAP_GRID_SIZE,
    workers: int = 1,
) -> BootstrapResult:
    """Bootstrap null distribution of J under the fitted mechanism.

    Each replicate resamples n triplets (y, r, U) with the empirical-likelihood
    weights and reruns the two-step GMM (warm-started at the original
    estimate on a coarser grid). Replicate number ``attempt`` draws from
    ``default_rng([*seed, attempt])``; failed replicates are redrawn with the
    next attempt numbers, up to 2B attempts.

    If the empirical-likelihood solve fails, uniform weights are used and
    ``el_fallback`` is set.

    Raises:
        InputError: If B < 99
        BootstrapDegenerateError: If more than B replicates fail
    """
    if B < 99:
        raise InputError(f"bootstrap needs B >= 99 replicates, got {B}")
    link = link or fit.link
    y = np.asarray(y, dtype=float)
    r = np.asarray(r).astype(int)
    U = np.asarray(U, dtype=float)
    n = r.size
    base_seed = [int(seed)] if np.isscalar(seed) else [int(s) for s in seed]  # type: ignore[arg-type]

    H = moment_matrix(y, r, U, fit.alpha_hat, fit.delta_hat, link)
    fallback = False
    try:
        weights = el_weights(H)
    except HullViolationError:
        weights = np.full(n, 1.0 / n)
        fallback = True

    y_safe = np.where(r == 1, y, 0.0)
    start = fit.theta
    samples: list[float] = []
    failed = 0
    attempt = 0
    while len(samples) < B and attempt < 2 * B:
        batch = range(attempt, min(attempt + B - len(samples), 2 * B))
        results = map_tasks(
            _bootstrap_replicate,
            [
                (y_safe, r, U, weights, link, grid_size, start, (*base_seed, a))
                for a in batch
            ],
            workers,
        )
        for value in results:
            if value is None:
                failed += 1
            else:
                samples.append(value)
        attempt = batch.stop
        if failed > B:
            break

    if len(samples) < B:
        raise BootstrapDegenerateError(
            f"{failed} of {attempt} bootstrap replicates failed; fewer than B={B} succeeded"
        )

    null = np.array(samples[:B])
    p_value = (1.0 + np.sum(null >= fit.J)) / (B + 1.0)
    return BootstrapResult(
        j_observed=fit.J,
        j_null_samples=null,
        p_value=float(p_value),
        el_weights=weights,
        n_failed=failed,
        el_fallback=fallback,
    )


def flag_mechanism_fit(
    p_values: np.ndarray, lfdr_threshold: float = DEFAULT_LFDR_THRESHOLD
) -> MechanismFlags:
    """Keep features whose lfdr of the J-test p-value is at least ``lfdr_threshold``.

    With fewer than 50 p-values the lfdr cannot be estimated; every feature is
    kept and the reported lfdr is pi0 (SmallSampleWarning).
    """
    p = np.asarray(p_values, dtype=float)
    if p.size == 0:
        return MechanismFlags(lfdr=np.zeros(0), in_subset=np.zeros(0, dtype=bool), pi0=1.0)

    pi0 = storey_pi0(p)
    if p.size < LFDR_MIN_PVALUES:
        warnings.warn(
            f"only {p.size} J-test p-values; no mechanism is flagged",
            SmallSampleWarning,
            stacklevel=2,
        )
        return MechanismFlags(
            lfdr=np.full(p.size, pi0), in_subset=np.ones(p.size, dtype=bool), pi0=pi0
        )

    lfdr = local_fdr(p, pi0=pi0)
    return MechanismFlags(lfdr=lfdr, in_subset=lfdr >= lfdr_threshold, pi0=pi0)
