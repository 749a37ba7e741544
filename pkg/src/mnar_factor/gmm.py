"""Moment conditions and the two-step GMM estimator of a missingness mechanism.

A feature g is observed with probability Psi{alpha (y - delta)}. With the
two selected instruments A_i the moment function is

    h_i = (1, A_i)' (1 - r_i / Psi{alpha (y_i - delta)})

which has mean zero at the true (alpha, delta). Three moments and two
parameters leave one over-identifying restriction, tested in jtest.
"""

import re
import warnings
from dataclasses import dataclass

import numpy as np
from scipy import linalg, optimize, special, stats

from mnar_factor.errors import InputError, InsufficientDataError, RidgeWarning

PSI_FLOOR = 1e-300
PSI_CEILING = 1.0 - 1e-16

# Condition number above which the weight matrix is ridged
MAX_CONDITION = 1e12

MIN_OBSERVED = 10


class InsufficientMissingnessError(InputError):
    """Raised when a feature has no missing cells to model."""

    pass


@dataclass(frozen=True)
class Link:
    """The link Psi: logistic, probit or a Student t CDF with ``df`` degrees of freedom."""

    kind: str
    df: float | None = None

    def __post_init__(self) -> None:
        if self.kind not in ("logistic", "probit", "t"):
            raise InputError(f"Unknown link '{self.kind}'")
        if self.kind == "t" and (self.df is None or not self.df > 0):
            raise InputError("t link requires positive degrees of freedom")

    @classmethod
    def parse(cls, text: str) -> "Link":
        """Parse 'logistic', 'probit' or 't<df>' (e.g. 't4')."""
        value = str(text).strip().lower()
        if value in ("logistic", "logit"):
            return cls("logistic")
        if value == "probit":
            return cls("probit")
        match = re.fullmatch(r"t\(?([0-9]*\.?[0-9]+)\)?", value)
        if match:
            return cls("t", float(match.group(1)))
        raise InputError(f"Unknown link '{text}'; use logistic, probit or t<df>")

    @property
    def name(self) -> str:
        if self.kind == "t":
            return f"t{self.df:g}"
        return self.kind

    def cdf(self, x: np.ndarray) -> np.ndarray:
        if self.kind == "logistic":
            return special.expit(x)
        if self.kind == "probit":
            return special.ndtr(x)
        return stats.t.cdf(x, self.df)

    def pdf(self, x: np.ndarray) -> np.ndarray:
        if self.kind == "logistic":
            v = special.expit(x)
            return v * (1.0 - v)
        if self.kind == "probit":
            return stats.norm.pdf(x)
        return stats.t.pdf(x, self.df)


LOGISTIC = Link("logistic")
PROBIT = Link("probit")
T4 = Link("t", 4.0)
DEFAULT_LINK = T4


@dataclass(frozen=True)
class MissingnessMechanism:
    """P(r = 1 | y) = Psi{alpha (y - delta)}."""

    link: Link
    alpha: float
    delta: float

    def __post_init__(self) -> None:
        if not self.alpha > 0:
            raise InputError(f"alpha must be positive, got {self.alpha}")

    def probability(self, y: np.ndarray) -> np.ndarray:
        return psi_eval(self.link, self.alpha * (np.asarray(y, dtype=float) - self.delta))[0]


def psi_eval(link: Link, x: np.ndarray | float) -> tuple[np.ndarray, np.ndarray]:
    """Psi(x) clamped to [PSI_FLOOR, PSI_CEILING] and its analytic derivative."""
    x = np.asarray(x, dtype=float)
    value = np.clip(link.cdf(x), PSI_FLOOR, PSI_CEILING)
    return value, link.pdf(x)


def _design(U: np.ndarray) -> np.ndarray:
    U = np.asarray(U, dtype=float)
    if U.ndim == 1:
        U = U[:, None]
    return np.hstack([np.ones((U.shape[0], 1)), U])


def moment_h(y: float, r: int, A: np.ndarray, mech: MissingnessMechanism) -> np.ndarray:
    """Moment vector for one sample; y is ignored when r = 0."""
    a = np.concatenate([[1.0], np.asarray(A, dtype=float).ravel()])
    if r == 0:
        return a
    psi, _ = psi_eval(mech.link, mech.alpha * (y - mech.delta))
    return a * (1.0 - 1.0 / float(psi))


def _moment_factor(
    y: np.ndarray, observed: np.ndarray, alpha: float, delta: float, link: Link
) -> np.ndarray:
    factor = np.ones(y.shape[0])
    psi, _ = psi_eval(link, alpha * (y[observed] - delta))
    with np.errstate(over="ignore", divide="ignore"):
        factor[observed] = 1.0 - 1.0 / psi
    return factor


def moment_matrix(
    y: np.ndarray,
    r: np.ndarray,
    U: np.ndarray,
    alpha: float,
    delta: float,
    link: Link = DEFAULT_LINK,
) -> np.ndarray:
    """n x 3 matrix whose rows are h_i(alpha, delta)."""
    y = np.asarray(y, dtype=float)
    observed = np.asarray(r) == 1
    return _design(U) * _moment_factor(y, observed, alpha, delta, link)[:, None]


@dataclass(frozen=True)
class SampleMoments:
    """h_bar (3), the centred covariance Sigma_hat (3x3) and Gamma = d h_bar / d(alpha, delta) (3x2)."""

    h_bar: np.ndarray
    Sigma_hat: np.ndarray
    Gamma: np.ndarray


def sample_moments(
    y: np.ndarray,
    r: np.ndarray,
    U: np.ndarray,
    alpha: float,
    delta: float,
    link: Link = DEFAULT_LINK,
) -> SampleMoments:
    """Sample mean, centred second moment and analytic gradient of the moments."""
    y = np.asarray(y, dtype=float)
    observed = np.asarray(r) == 1
    a = _design(U)
    n = a.shape[0]

    H = a * _moment_factor(y, observed, alpha, delta, link)[:, None]
    h_bar = H.mean(axis=0)
    centered = H - h_bar
    sigma = centered.T @ centered / n

    # d/dtheta of -r/Psi(x) is r Psi'(x)/Psi(x)^2 dx/dtheta
    scale = np.zeros(n)
    psi, dpsi = psi_eval(link, alpha * (y[observed] - delta))
    with np.errstate(over="ignore", divide="ignore", invalid="ignore"):
        scale[observed] = (dpsi / psi) / psi
    residual = np.where(observed, y - delta, 0.0)
    d_alpha = (a * (scale * residual)[:, None]).mean(axis=0)
    d_delta = (a * (-alpha * scale)[:, None]).mean(axis=0)

    return SampleMoments(
        h_bar=h_bar, Sigma_hat=sigma, Gamma=np.column_stack([d_alpha, d_delta])
    )


def stabilised_inverse(matrix: np.ndarray, warn: bool = True) -> np.ndarray:
    """Inverse of a symmetric PSD matrix, ridged by 1e-8 trace/dim when ill-conditioned."""
    matrix = (matrix + matrix.T) / 2.0
    dim = matrix.shape[0]
    condition = np.linalg.cond(matrix)
    if not np.isfinite(condition) or condition > MAX_CONDITION:
        ridge = 1e-8 * max(np.trace(matrix), 1e-300) / dim
        if warn:
            warnings.warn(
                f"moment second-moment matrix has condition number {condition:.3g}; "
                f"adding ridge {ridge:.3g}",
                RidgeWarning,
                stacklevel=3,
            )
        matrix = matrix + ridge * np.eye(dim)
    inverse = linalg.pinvh(matrix)
    return (inverse + inverse.T) / 2.0


@dataclass(frozen=True)
class GmmFit:
    """Two-step GMM estimate of one feature's mechanism.

    ``V_hat`` is the asymptotic covariance of sqrt(n) (alpha_hat - alpha,
    delta_hat - delta); ``R_hat`` rescales it to the covariance of
    (log alpha_hat, delta_hat) itself.
    """

    alpha_hat: float
    delta_hat: float
    first_step: tuple[float, float]
    W: np.ndarray
    V_hat: np.ndarray
    J: float
    n_samples: int
    n_obs: int
    converged: bool
    gamma_condition: float
    link: Link = DEFAULT_LINK

    @property
    def log_alpha_hat(self) -> float:
        return float(np.log(self.alpha_hat))

    @property
    def theta(self) -> np.ndarray:
        """(log alpha_hat, delta_hat)."""
        return np.array([self.log_alpha_hat, self.delta_hat])

    @property
    def R_hat(self) -> np.ndarray:
        jacobian = np.diag([1.0 / self.alpha_hat, 1.0])
        return jacobian @ self.V_hat @ jacobian / self.n_samples


class _Objective:
    """h_bar' W h_bar over (log alpha, delta), precomputed for one feature."""

    def __init__(self, y: np.ndarray, r: np.ndarray, U: np.ndarray, link: Link):
        self.observed = np.asarray(r) == 1
        self.y_obs = np.asarray(y, dtype=float)[self.observed]
        self.a = _design(U)
        self.a_obs = self.a[self.observed]
        self.a_missing_sum = self.a[~self.observed].sum(axis=0)
        self.n = self.a.shape[0]
        self.link = link

    def h_bar(self, log_alpha: float, deltas: np.ndarray) -> np.ndarray:
        alpha = np.exp(np.clip(log_alpha, -30.0, 30.0))
        x = alpha * (self.y_obs[None, :] - np.asarray(deltas, dtype=float)[:, None])
        psi = np.clip(self.link.cdf(x), PSI_FLOOR, PSI_CEILING)
        with np.errstate(over="ignore", divide="ignore", invalid="ignore"):
            factor = 1.0 - 1.0 / psi
            return (factor @ self.a_obs + self.a_missing_sum) / self.n

    def values(self, log_alpha: float, deltas: np.ndarray, W: np.ndarray) -> np.ndarray:
        h = self.h_bar(log_alpha, deltas)
        with np.errstate(over="ignore", invalid="ignore"):
            value = np.einsum("gi,ij,gj->g", h, W, h)
        return np.where(np.isfinite(value), value, np.inf)

    def __call__(self, theta: np.ndarray, W: np.ndarray) -> float:
        return float(self.values(theta[0], np.array([theta[1]]), W)[0])


def _minimise(
    objective: _Objective,
    W: np.ndarray,
    log_alpha_grid: np.ndarray,
    delta_grid: np.ndarray,
    n_starts: int,
    extra_starts: list[np.ndarray],
    max_iter: int,
) -> tuple[np.ndarray, bool]:
    grid_values = np.vstack(
        [objective.values(la, delta_grid, W) for la in log_alpha_grid]
    )
    best = np.argsort(grid_values, axis=None, kind="stable")[:n_starts]
    starts = [
        np.array([log_alpha_grid[i], delta_grid[j]])
        for i, j in zip(*np.unravel_index(best, grid_values.shape))
    ]
    starts.extend(extra_starts)

    best_theta = starts[0]
    best_value = np.inf
    converged = False
    for start in starts:
        result = optimize.minimize(
            objective,
            start,
            args=(W,),
            method="Nelder-Mead",
            options={"xatol": 1e-8, "fatol": 1e-10, "maxiter": max_iter},
        )
        if result.fun < best_value:
            best_value = float(result.fun)
            best_theta = np.asarray(result.x, dtype=float)
            converged = bool(result.success)
    return best_theta, converged


def two_step_gmm(
    y: np.ndarray,
    r: np.ndarray,
    U: np.ndarray,
    link: Link = DEFAULT_LINK,
    grid_size: int = 21,
    n_starts: int = 3,
    start: np.ndarray | None = None,
    max_iter: int = 500,
    warn: bool = True,
) -> GmmFit:
    """Two-step GMM estimate of (alpha, delta) for one feature.

    Both steps search a coarse grid (log alpha on [-3, 3], delta on the 1st
    to 50th percentiles of observed y) and refine the best ``n_starts`` grid
    points with Nelder-Mead. Step one uses W = I; step two uses the inverse
    uncentred second moment of h at the step-one estimate.

    Args:
        y: Intensities (values at missing cells are ignored)
        r: Observation indicators
        U: n x 2 instruments
        link: Link function Psi
        grid_size: Points per grid axis
        n_starts: Grid points refined by Nelder-Mead
        start: Optional extra starting point (log alpha, delta)
        max_iter: Nelder-Mead iteration cap per start
        warn: Emit RidgeWarning when the weight matrix is ridged

    Raises:
        InsufficientMissingnessError: If no cell is missing
        InsufficientDataError: If fewer than 10 cells are observed
    """
    r = np.asarray(r).astype(int)
    y = np.asarray(y, dtype=float)
    n = r.size
    n_obs = int(r.sum())
    if n_obs == n:
        raise InsufficientMissingnessError("feature has no missing cells")
    if n_obs < MIN_OBSERVED:
        raise InsufficientDataError(
            f"feature has {n_obs} observed cells; at least {MIN_OBSERVED} are needed"
        )

    objective = _Objective(y, r, U, link)
    log_alpha_grid = np.linspace(-3.0, 3.0, grid_size)
    delta_grid = np.quantile(objective.y_obs, np.linspace(0.01, 0.5, grid_size))
    extra = [np.asarray(start, dtype=float)] if start is not None else []

    theta_1, _ = _minimise(
        objective, np.eye(3), log_alpha_grid, delta_grid, n_starts, extra, max_iter
    )
    alpha_1, delta_1 = float(np.exp(theta_1[0])), float(theta_1[1])

    H = moment_matrix(y, r, U, alpha_1, delta_1, link)
    W = stabilised_inverse(H.T @ H / n, warn=warn)

    theta, converged = _minimise(
        objective, W, log_alpha_grid, delta_grid, n_starts, extra + [theta_1], max_iter
    )
    alpha, delta = float(np.exp(theta[0])), float(theta[1])

    moments = sample_moments(y, r, U, alpha, delta, link)
    information = moments.Gamma.T @ W @ moments.Gamma
    information = (information + information.T) / 2.0
    gamma_condition = float(np.linalg.cond(information))
    V_hat = linalg.pinvh(information)
    J = float(n * moments.h_bar @ W @ moments.h_bar)

    return GmmFit(
        alpha_hat=alpha,
        delta_hat=delta,
        first_step=(alpha_1, delta_1),
        W=W,
        V_hat=(V_hat + V_hat.T) / 2.0,
        J=max(J, 0.0),
        n_samples=n,
        n_obs=n_obs,
        converged=converged and np.isfinite(J),
        gamma_condition=gamma_condition,
        link=link,
    )
