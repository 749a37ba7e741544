"""Simulated metabolite panels with latent confounding and intensity-dependent missingness.

Every law is drawn from its own generator ``default_rng([seed, law])`` in a
fixed order, so a dataset depends only on its configuration and seed.
"""

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import pandas as pd

from mnar_factor.data_model import DesignMatrices, IntensityMatrix
from mnar_factor.errors import InputError, NumericalError
from mnar_factor.gmm import LOGISTIC, Link, psi_eval
from mnar_factor.stats_util import ols_masked

DEFAULT_EIGENVALUES = (0.61, 0.33, 0.19, 0.14, 0.12, 0.08, 0.07, 0.05, 0.05, 0.05)

# Generator stream per law, in drawing order
STREAM_MECHANISM = 0
STREAM_FACTORS = 1
STREAM_LOADINGS = 2
STREAM_MEAN_VARIANCE = 3
STREAM_EFFECTS = 4
STREAM_INTENSITIES = 5
STREAM_MASK = 6

CALIBRATION_SEED = 20190501
CALIBRATION_TOLERANCE = 0.10
CALIBRATION_REPLICATES = 20


class CalibrationError(NumericalError):
    """Raised when the loading variances cannot reach the target spectrum."""

    pass


class InfiniteVarianceError(InputError):
    """Raised when a link's distribution has no finite variance."""

    pass


@dataclass(frozen=True)
class SimulationConfig:
    """Generative model settings.

    Attributes:
        n: Samples; the first half are cases
        p: Features
        K: Latent factors
        link: Missingness link used to draw the mask
        mu_alpha: Mean of log alpha; None gives unit variance under ``link``
        sd_log_alpha: Standard deviation of log alpha
        mu_delta: Mean of delta
        sd_delta: Standard deviation of delta
        mu_mean: Mean of the feature means
        sd_mean: Standard deviation of the feature means
        sigma_shape_rate: Shape and rate of the Gamma law for residual variances
        beta_sparsity: Probability that an effect is exactly zero
        beta_sd: Standard deviation of nonzero effects
        confounding_r2: Expected share of Var(X_interest) explained by C
        target_eigenvalues: Expected nonzero eigenvalues of the confounding signal
        loading_sparsity: Probability pi_k that a loading on factor k is exactly
            zero; one value shared by all factors or K values
        seed: Dataset seed
    """

    n: int = 600
    p: int = 1200
    K: int = 10
    link: Link = LOGISTIC
    mu_alpha: float | None = None
    sd_log_alpha: float = 0.4
    mu_delta: float = 16.0
    sd_delta: float = 1.2
    mu_mean: float = 18.0
    sd_mean: float = 5.0
    sigma_shape_rate: float = 25.0
    beta_sparsity: float = 0.8
    beta_sd: float = 0.4
    confounding_r2: float = 0.075
    target_eigenvalues: tuple[float, ...] | None = None
    loading_sparsity: float | tuple[float, ...] = 0.5
    seed: int = 0

    def __post_init__(self) -> None:
        if self.n < 4 or self.n % 2:
            raise InputError(f"n must be even and at least 4, got {self.n}")
        if self.p < 1 or self.K < 1:
            raise InputError("p and K must be positive")
        scales = (self.sd_log_alpha, self.sd_delta, self.sd_mean, self.sigma_shape_rate, self.beta_sd)
        if any(not s > 0 for s in scales):
            raise InputError("all scale parameters must be positive")
        if not 0.0 <= self.beta_sparsity <= 1.0:
            raise InputError("beta_sparsity must lie in [0, 1]")
        if isinstance(self.loading_sparsity, (int, float)):
            sparsity = (float(self.loading_sparsity),) * self.K
        else:
            sparsity = tuple(float(s) for s in self.loading_sparsity)
        if len(sparsity) != self.K:
            raise InputError(f"loading_sparsity needs one value or K={self.K} values")
        if any(not 0.0 <= s < 1.0 for s in sparsity):
            raise InputError("loading_sparsity must lie in [0, 1); a factor without loadings cannot be calibrated")
        object.__setattr__(self, "loading_sparsity", sparsity)
        if not 0.0 <= self.confounding_r2 < 1.0:
            raise InputError("confounding_r2 must lie in [0, 1)")
        if self.target_eigenvalues is None:
            if self.K > len(DEFAULT_EIGENVALUES):
                raise InputError(f"K={self.K} needs explicit target_eigenvalues")
            object.__setattr__(self, "target_eigenvalues", DEFAULT_EIGENVALUES[: self.K])
        targets = tuple(float(t) for t in self.target_eigenvalues)  # type: ignore[union-attr]
        if len(targets) != self.K or any(not t > 0 for t in targets):
            raise InputError("target_eigenvalues must be K positive values")
        object.__setattr__(self, "target_eigenvalues", targets)

    @property
    def spike_probabilities(self) -> np.ndarray:
        """pi_k for each factor."""
        return np.asarray(self.loading_sparsity, dtype=float)

    @property
    def confounding_scale(self) -> float:
        """a such that a X_interest in the first factor explains confounding_r2 of Var(X_interest)."""
        r2 = self.confounding_r2
        return 2.0 * float(np.sqrt(r2 / (1.0 - r2)))

    @property
    def resolved_mu_alpha(self) -> float:
        return mu_alpha_for_unit_variance(self.link) if self.mu_alpha is None else self.mu_alpha


@dataclass(frozen=True)
class SimulationTruth:
    """Drawn parameters and latent variables of one dataset."""

    beta: np.ndarray
    C: np.ndarray
    L: np.ndarray
    alpha: np.ndarray
    delta: np.ndarray
    mu: np.ndarray
    sigma2: np.ndarray
    tau2: np.ndarray
    pi: np.ndarray
    a: float
    realized_r2: float
    config: dict = field(default_factory=dict)

    def to_json(self, path: str | Path, feature_ids: tuple[str, ...]) -> None:
        payload = {
            "config": self.config,
            "feature_ids": list(feature_ids),
            "a": self.a,
            "realized_r2": self.realized_r2,
            "pi": self.pi.tolist(),
            "tau2": self.tau2.tolist(),
            "beta": self.beta.tolist(),
            "alpha": self.alpha.tolist(),
            "delta": self.delta.tolist(),
            "mu": self.mu.tolist(),
            "sigma2": self.sigma2.tolist(),
            "C": self.C.tolist(),
            "L": self.L.tolist(),
        }
        with open(path, "w") as f:
            json.dump(payload, f)


@dataclass(frozen=True)
class SimulatedDataset:
    matrix: IntensityMatrix
    design: DesignMatrices
    truth: SimulationTruth


@dataclass(frozen=True)
class LoadingCalibration:
    """Spike probabilities pi_k, slab variances tau_k^2 and the mean spectrum they reach."""

    pi: np.ndarray
    tau2: np.ndarray
    achieved: np.ndarray
    iterations: int


def mu_alpha_for_unit_variance(link: Link) -> float:
    """Mean of log alpha that gives the scaled link distribution unit variance.

    If T has CDF Psi then T / exp(mu) has CDF Psi(exp(mu) x), so
    mu = log(Var T) / 2.

    Raises:
        InfiniteVarianceError: For a t link with df <= 2
    """
    if link.kind == "logistic":
        return float(np.log(np.pi / np.sqrt(3.0)))
    if link.kind == "probit":
        return 0.0
    df = float(link.df)  # type: ignore[arg-type]
    if df <= 2.0:
        raise InfiniteVarianceError(f"t link with {df:g} degrees of freedom has infinite variance")
    return 0.5 * float(np.log(df / (df - 2.0)))


def interest_column(n: int) -> np.ndarray:
    """Case indicator: ones for the first n/2 samples, zeros after."""
    return np.r_[np.ones(n // 2), np.zeros(n - n // 2)]


def _draw_factors(cfg: SimulationConfig, rng: np.random.Generator) -> np.ndarray:
    C = rng.standard_normal((cfg.n, cfg.K))
    C[:, 0] += cfg.confounding_scale * interest_column(cfg.n)
    return C


def _draw_loadings(cfg: SimulationConfig, tau2: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    spikes = rng.uniform(size=(cfg.p, cfg.K)) < cfg.spike_probabilities
    return np.where(spikes, 0.0, rng.standard_normal((cfg.p, cfg.K)) * np.sqrt(tau2))


def _draw_variances(cfg: SimulationConfig, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    mu = rng.normal(cfg.mu_mean, cfg.sd_mean, size=cfg.p)
    sigma2 = rng.gamma(cfg.sigma_shape_rate, 1.0 / cfg.sigma_shape_rate, size=cfg.p)
    return mu, sigma2


def _factor_root(C: np.ndarray) -> np.ndarray:
    """Symmetric square root of the centred factor covariance (n-1)^-1 C' P C."""
    centered = C - C.mean(axis=0)
    values, vectors = np.linalg.eigh(centered.T @ centered / (C.shape[0] - 1))
    return (vectors * np.sqrt(np.clip(values, 0.0, None))) @ vectors.T


def _spectrum(C: np.ndarray, L: np.ndarray, sigma2: np.ndarray) -> np.ndarray:
    """Nonzero eigenvalues of (n-1)^-1 P C S C' P, largest first."""
    root = _factor_root(C)
    S = (L / sigma2[:, None]).T @ L / L.shape[0]
    return np.sort(np.linalg.eigvalsh(root @ S @ root))[::-1]


def calibrate_loadings(
    cfg: SimulationConfig, max_iter: int = 200, replicates: int = CALIBRATION_REPLICATES
) -> LoadingCalibration:
    """Slab variances so that the expected confounding spectrum matches the targets.

    The expectation is a mean over ``replicates`` datasets drawn with the
    simulation's own laws from fixed calibration seeds. Each replicate is
    drawn once at unit slab variance; tau_k^2 then rescales factor k's
    loadings and is updated multiplicatively by target_k / mean_k until the
    mean sorted spectrum agrees to 0.1%.

    Raises:
        CalibrationError: If any mean eigenvalue ends more than 10% from its target
    """
    targets = np.asarray(cfg.target_eigenvalues, dtype=float)
    pi = cfg.spike_probabilities
    unit = np.ones(cfg.K)

    roots, grams = [], []
    for r in range(replicates):
        C = _draw_factors(cfg, np.random.default_rng([CALIBRATION_SEED, r, STREAM_FACTORS]))
        L = _draw_loadings(cfg, unit, np.random.default_rng([CALIBRATION_SEED, r, STREAM_LOADINGS]))
        _, sigma2 = _draw_variances(cfg, np.random.default_rng([CALIBRATION_SEED, r, STREAM_MEAN_VARIANCE]))
        roots.append(_factor_root(C))
        grams.append((L / sigma2[:, None]).T @ L / cfg.p)

    def mean_spectrum(tau2: np.ndarray) -> np.ndarray:
        scale = np.sqrt(tau2)
        spectra = [
            np.sort(np.linalg.eigvalsh(root @ (gram * np.outer(scale, scale)) @ root))[::-1]
            for root, gram in zip(roots, grams)
        ]
        return np.mean(spectra, axis=0)

    tau2 = targets / (1.0 - pi)
    achieved = mean_spectrum(tau2)
    iteration = 0
    for iteration in range(1, max_iter + 1):
        tau2 = tau2 * targets / np.maximum(achieved, 1e-300)
        achieved = mean_spectrum(tau2)
        if np.max(np.abs(achieved / targets - 1.0)) < 1e-3:
            break

    if np.max(np.abs(achieved / targets - 1.0)) > CALIBRATION_TOLERANCE:
        raise CalibrationError(
            "loading calibration missed its targets; achieved spectrum "
            + ", ".join(f"{v:.3f}" for v in achieved)
        )
    return LoadingCalibration(pi=pi, tau2=tau2, achieved=achieved, iterations=iteration)


def realized_confounding_r2(X_interest: np.ndarray, C: np.ndarray) -> float:
    """R^2 of X_interest regressed on (1, C)."""
    x = np.asarray(X_interest, dtype=float).ravel()
    design = np.hstack([np.ones((x.size, 1)), np.asarray(C, dtype=float)])
    fit = ols_masked(x, design)
    residual = x - design @ fit.coefficients
    total = np.sum((x - x.mean()) ** 2)
    return float(1.0 - residual @ residual / total) if total > 0 else 0.0


def simulate_dataset(cfg: SimulationConfig) -> SimulatedDataset:
    """Draw one dataset in the fixed law order.

    log alpha and delta, then C, the loadings, mean and variance, the
    effects, the intensities and finally the mask r ~ Bernoulli(Psi(alpha (y - delta))).
    """
    calibration = calibrate_loadings(cfg)
    n, p = cfg.n, cfg.p

    rng = np.random.default_rng([cfg.seed, STREAM_MECHANISM])
    alpha = np.exp(rng.normal(cfg.resolved_mu_alpha, cfg.sd_log_alpha, size=p))
    delta = rng.normal(cfg.mu_delta, cfg.sd_delta, size=p)

    C = _draw_factors(cfg, np.random.default_rng([cfg.seed, STREAM_FACTORS]))
    L = _draw_loadings(cfg, calibration.tau2, np.random.default_rng([cfg.seed, STREAM_LOADINGS]))
    mu, sigma2 = _draw_variances(cfg, np.random.default_rng([cfg.seed, STREAM_MEAN_VARIANCE]))

    rng = np.random.default_rng([cfg.seed, STREAM_EFFECTS])
    nonzero = rng.uniform(size=p) >= cfg.beta_sparsity
    beta = np.where(nonzero, rng.normal(0.0, cfg.beta_sd, size=p), 0.0)

    x_interest = interest_column(n)
    rng = np.random.default_rng([cfg.seed, STREAM_INTENSITIES])
    mean = mu[:, None] + beta[:, None] * x_interest[None, :] + L @ C.T
    y = mean + rng.standard_normal((p, n)) * np.sqrt(sigma2)[:, None]

    rng = np.random.default_rng([cfg.seed, STREAM_MASK])
    psi, _ = psi_eval(cfg.link, alpha[:, None] * (y - delta[:, None]))
    mask = (rng.uniform(size=(p, n)) < psi).astype(np.int8)

    width = len(str(p))
    matrix = IntensityMatrix(
        values=y,
        mask=mask,
        feature_ids=tuple(f"M{g + 1:0{width}d}" for g in range(p)),
        sample_ids=tuple(f"S{i + 1:0{len(str(n))}d}" for i in range(n)),
    )
    design = DesignMatrices(
        X_interest=x_interest[:, None],
        X_nuisance=np.ones((n, 1)),
        interest_names=("case",),
        nuisance_names=("intercept",),
    )
    config = asdict(cfg)
    config["link"] = cfg.link.name
    truth = SimulationTruth(
        beta=beta,
        C=C,
        L=L,
        alpha=alpha,
        delta=delta,
        mu=mu,
        sigma2=sigma2,
        tau2=calibration.tau2,
        pi=calibration.pi,
        a=cfg.confounding_scale,
        realized_r2=realized_confounding_r2(x_interest, C),
        config=config,
    )
    return SimulatedDataset(matrix=matrix, design=design, truth=truth)


def write_design(design: DesignMatrices, sample_ids: tuple[str, ...], path: str | Path) -> None:
    """Write the design as a samples x covariates TSV readable by load_design."""
    frame = pd.DataFrame(
        np.hstack([design.X_interest, design.X_nuisance]),
        index=pd.Index(sample_ids, name="sample"),
        columns=[*design.interest_names, *design.nuisance_names],
    )
    frame.to_csv(path, sep="\t")


def load_truth(path: str | Path) -> dict:
    """Read a truth JSON written by SimulationTruth.to_json, with arrays restored."""
    path = Path(path)
    if not path.exists():
        raise InputError(f"Truth file not found: {path}")
    try:
        with open(path) as f:
            payload = json.load(f)
    except json.JSONDecodeError as e:
        raise InputError(f"{path}: invalid truth JSON: {e}")
    for key in ("beta", "alpha", "delta", "mu", "sigma2", "C", "L", "pi", "tau2"):
        if key in payload:
            payload[key] = np.asarray(payload[key], dtype=float)
    return payload
