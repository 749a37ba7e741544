"""Hierarchical Bayesian GMM refinement of the mechanism estimates.

An empirical-Bayes normal prior on (log alpha, delta) is pooled across the
missing-set features. Each feature is then sampled from the pseudo-posterior
N3(h_bar | 0, Sigma_hat / n) x N2(theta | mu, U) with an adaptive random-walk
Metropolis chain, and the inverse-probability weights are posterior means.
"""

import warnings
from collections.abc import Sequence
from dataclasses import dataclass

import numpy as np
from scipy import linalg

from mnar_factor.errors import ChainStuckWarning, NumericalError
from mnar_factor.gmm import DEFAULT_LINK, GmmFit, Link, MAX_CONDITION, moment_matrix, psi_eval

EIGEN_FLOOR = 1e-6

# Random-walk scaling for a 2-dimensional target
PROPOSAL_SCALE = 2.38**2 / 2.0

TARGET_ACCEPTANCE = 0.3
STUCK_ACCEPTANCE = 0.05


class PriorDegenerateError(NumericalError):
    """Raised when too few mechanism fits are available to pool."""

    pass


@dataclass(frozen=True)
class MechanismPrior:
    """N2(mu, U) prior on (log alpha, delta)."""

    mu: np.ndarray
    U: np.ndarray
    iterations: int = 0


@dataclass(frozen=True)
class ChainSettings:
    iterations: int = 5000
    burn_in: int = 1000
    thin: int = 2


@dataclass(frozen=True)
class PosteriorSummary:
    """Posterior means and inverse-probability weights for one feature.

    Attributes:
        alpha_hat: E(alpha | data)
        delta_hat: E(delta | data)
        w_hat: r_i E(1/Psi_i | data); zero at missing cells
        v_hat: r_i E(1/Psi_i^2 | data); at least w_hat^2
        ess: Smallest effective sample size over the two coordinates
        acceptance_rate: Acceptance after burn-in
        draws: Retained (log alpha, delta) draws
    """

    alpha_hat: float
    delta_hat: float
    w_hat: np.ndarray
    v_hat: np.ndarray
    ess: float
    acceptance_rate: float
    draws: np.ndarray


def floor_eigenvalues(matrix: np.ndarray, floor: float = EIGEN_FLOOR) -> np.ndarray:
    """Symmetrise and raise every eigenvalue to at least ``floor``."""
    matrix = (np.asarray(matrix, dtype=float) + np.asarray(matrix, dtype=float).T) / 2.0
    values, vectors = np.linalg.eigh(matrix)
    values = np.maximum(values, floor)
    return (vectors * values) @ vectors.T


def _marginal_loglik(x: np.ndarray, mu: np.ndarray, R: np.ndarray, U: np.ndarray) -> float:
    total = R + U[None, :, :]
    diff = x - mu
    sign, logdet = np.linalg.slogdet(total)
    solved = np.linalg.solve(total, diff[:, :, None])[:, :, 0]
    quad = np.einsum("ga,ga->g", diff, solved)
    return float(-0.5 * np.sum(quad + logdet + 2.0 * np.log(2.0 * np.pi)))


def estimate_prior(
    fits: Sequence[GmmFit],
    max_iter: int = 50,
    tol: float = 1e-8,
    floor: float = EIGEN_FLOOR,
) -> MechanismPrior:
    """Empirical-Bayes prior from the converged two-step fits.

    mu is the mean of (log alpha_hat, delta_hat). U maximises
    prod_g N(x_g | mu, R_g + U) by random-effects EM with mu held fixed,
    started from the moment estimate cov(x) - mean(R_g) and floored at
    ``floor`` eigenvalues.

    Raises:
        PriorDegenerateError: If fewer than two converged fits are given
    """
    usable = [f for f in fits if f.converged and np.all(np.isfinite(f.R_hat))]
    if len(usable) < 2:
        raise PriorDegenerateError(
            f"{len(usable)} converged mechanism fits; at least 2 are needed for the prior"
        )

    x = np.array([f.theta for f in usable])
    R = np.array([floor_eigenvalues(f.R_hat, 1e-12) for f in usable])
    mu = x.mean(axis=0)

    diff = x - mu
    U = floor_eigenvalues(diff.T @ diff / len(usable) - R.mean(axis=0), floor)
    loglik = _marginal_loglik(x, mu, R, U)

    iteration = 0
    for iteration in range(1, max_iter + 1):
        U_inv = np.linalg.inv(U)
        R_inv = np.linalg.inv(R)
        P = np.linalg.inv(U_inv[None, :, :] + R_inv)
        rhs = (U_inv @ mu)[None, :] + np.einsum("gab,gb->ga", R_inv, x)
        m = np.einsum("gab,gb->ga", P, rhs)
        dev = m - mu
        U = floor_eigenvalues(
            np.einsum("ga,gb->ab", dev, dev) / len(usable) + P.mean(axis=0), floor
        )
        updated = _marginal_loglik(x, mu, R, U)
        change = abs(updated - loglik)
        loglik = updated
        if change < tol:
            break

    return MechanismPrior(mu=mu, U=U, iterations=iteration)


def gaussian_logpdf(x: np.ndarray, mean: np.ndarray, cov: np.ndarray) -> float:
    """Multivariate normal log density via a Cholesky factor; -inf if cov is not PD."""
    try:
        factor = linalg.cho_factor(cov, lower=True)
    except linalg.LinAlgError:
        return -np.inf
    diff = np.asarray(x, dtype=float) - np.asarray(mean, dtype=float)
    solved = linalg.cho_solve(factor, diff)
    logdet = 2.0 * np.sum(np.log(np.diag(factor[0])))
    return float(-0.5 * (diff @ solved + logdet + diff.size * np.log(2.0 * np.pi)))


def pseudo_posterior_logdensity(
    y: np.ndarray,
    r: np.ndarray,
    U: np.ndarray,
    theta: np.ndarray,
    prior: MechanismPrior,
    link: Link = DEFAULT_LINK,
) -> float:
    """log N3(h_bar; 0, Sigma_hat / n) + log N2(theta; mu, U) at theta = (log alpha, delta)."""
    alpha = float(np.exp(theta[0]))
    if not np.isfinite(alpha) or alpha <= 0:
        return -np.inf
    with np.errstate(over="ignore", invalid="ignore"):
        H = moment_matrix(y, r, U, alpha, float(theta[1]), link)
        n = H.shape[0]
        h_bar = H.mean(axis=0)
        centered = H - h_bar
        sigma = centered.T @ centered / n
    if not (np.all(np.isfinite(h_bar)) and np.all(np.isfinite(sigma))):
        return -np.inf

    condition = np.linalg.cond(sigma)
    if not np.isfinite(condition) or condition > MAX_CONDITION:
        sigma = sigma + 1e-8 * max(np.trace(sigma), 1e-300) / 3.0 * np.eye(3)

    likelihood = gaussian_logpdf(h_bar, np.zeros(3), sigma / n)
    return likelihood + gaussian_logpdf(np.asarray(theta, dtype=float), prior.mu, prior.U)


def effective_sample_size(draws: np.ndarray) -> float:
    """ESS of a 1-d chain from its autocorrelations, summed up to the first negative pair."""
    x = np.asarray(draws, dtype=float)
    m = x.size
    if m < 4 or np.var(x) == 0:
        return float(m)
    x = x - x.mean()
    size = 1 << (2 * m - 1).bit_length()
    spectrum = np.fft.rfft(x, size)
    acov = np.fft.irfft(spectrum * np.conj(spectrum), size)[:m] / m
    rho = acov / acov[0]

    total = 0.0
    for lag in range(1, m - 1, 2):
        pair = rho[lag] + rho[lag + 1]
        if pair < 0:
            break
        total += pair
    tau = -1.0 + 2.0 * (1.0 + total) if total > 0 else 1.0
    return float(m / max(tau, 1.0 / m))


def _safe_cholesky(cov: np.ndarray) -> np.ndarray:
    cov = np.asarray(cov, dtype=float)
    if not np.all(np.isfinite(cov)):
        cov = np.eye(2) * 0.01
    return np.linalg.cholesky(floor_eigenvalues(cov, 1e-10))


def sample_posterior(
    y: np.ndarray,
    r: np.ndarray,
    U: np.ndarray,
    prior: MechanismPrior,
    start: np.ndarray,
    proposal_cov: np.ndarray,
    link: Link = DEFAULT_LINK,
    chain: ChainSettings = ChainSettings(),
    seed: int | Sequence[int] = 0,
) -> PosteriorSummary:
    """Adaptive random-walk Metropolis on (log alpha, delta) for one feature.

    Proposals are N(theta, s^2 2.38^2/2 proposal_cov). During burn-in log s
    follows a Robbins-Monro recursion towards 30% acceptance; after burn-in
    s is frozen. Every ``thin``-th post-burn-in draw is kept.

    Args:
        y, r, U: Intensities, observation indicators and the n x 2 instruments
        prior: Empirical-Bayes prior
        start: Initial (log alpha, delta), usually the GMM estimate
        proposal_cov: Base proposal covariance, usually GmmFit.R_hat
        link: Link function Psi
        chain: Iterations, burn-in and thinning
        seed: Seed or seed sequence of this chain's generator
    """
    rng = np.random.default_rng(seed if np.isscalar(seed) else list(seed))  # type: ignore[arg-type]
    y = np.asarray(y, dtype=float)
    r = np.asarray(r).astype(int)
    observed = r == 1

    chol = _safe_cholesky(PROPOSAL_SCALE * np.asarray(proposal_cov, dtype=float))
    theta = np.asarray(start, dtype=float).copy()
    current = pseudo_posterior_logdensity(y, r, U, theta, prior, link)
    log_scale = 0.0

    kept: list[np.ndarray] = []
    accepted_after = 0
    steps_after = 0
    for t in range(chain.iterations):
        proposal = theta + np.exp(log_scale) * (chol @ rng.standard_normal(2))
        candidate = pseudo_posterior_logdensity(y, r, U, proposal, prior, link)
        log_ratio = candidate - current
        accept_prob = 1.0 if log_ratio >= 0 else float(np.exp(log_ratio)) if np.isfinite(log_ratio) else 0.0
        if rng.uniform() < accept_prob:
            theta, current = proposal, candidate
            accepted = True
        else:
            accepted = False

        if t < chain.burn_in:
            log_scale += (t + 1.0) ** -0.6 * (accept_prob - TARGET_ACCEPTANCE)
        else:
            steps_after += 1
            accepted_after += int(accepted)
            if (t - chain.burn_in) % chain.thin == 0:
                kept.append(theta.copy())

    draws = np.array(kept) if kept else theta[None, :]
    acceptance = accepted_after / steps_after if steps_after else 0.0
    if acceptance < STUCK_ACCEPTANCE:
        warnings.warn(
            f"chain acceptance {acceptance:.3f} is below {STUCK_ACCEPTANCE}",
            ChainStuckWarning,
            stacklevel=2,
        )

    alphas = np.exp(draws[:, 0])
    inverse_sum = np.zeros(int(observed.sum()))
    inverse_sq_sum = np.zeros_like(inverse_sum)
    y_obs = y[observed]
    for chunk in np.array_split(np.arange(draws.shape[0]), max(1, draws.shape[0] // 500)):
        x = alphas[chunk, None] * (y_obs[None, :] - draws[chunk, 1][:, None])
        psi, _ = psi_eval(link, x)
        with np.errstate(over="ignore"):
            inverse = 1.0 / psi
            inverse_sum += inverse.sum(axis=0)
            inverse_sq_sum += (inverse**2).sum(axis=0)

    m = draws.shape[0]
    w_hat = np.zeros(r.size)
    v_hat = np.zeros(r.size)
    w_hat[observed] = inverse_sum / m
    v_hat[observed] = np.maximum(inverse_sq_sum / m, w_hat[observed] ** 2)

    ess = min(effective_sample_size(draws[:, 0]), effective_sample_size(draws[:, 1]))
    return PosteriorSummary(
        alpha_hat=float(alphas.mean()),
        delta_hat=float(draws[:, 1].mean()),
        w_hat=w_hat,
        v_hat=v_hat,
        ess=ess,
        acceptance_rate=acceptance,
        draws=draws,
    )
