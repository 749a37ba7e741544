"""End-to-end workflows behind the command-line interface.

Mechanism estimation reads only the intensity matrix; association reads the
matrix, a design and previously written mechanism artifacts.
"""

import time
from dataclasses import dataclass
from pathlib import Path
from typing import Any

import click
import numpy as np
import pandas as pd

from mnar_factor.artifacts import (
    FACTORS,
    GMM_FITS,
    INSTRUMENTS,
    JTEST,
    MECHANISMS,
    Diagnostics,
    load_weights,
    read_manifest,
    read_table,
    write_manifest,
    write_table,
    write_weights,
)
from mnar_factor.config import PipelineConfig
from mnar_factor.data_model import (
    IntensityMatrix,
    Partition,
    load_design,
    load_intensity_matrix,
    partition_metabolites,
    write_intensity_matrix,
)
from mnar_factor.errors import InputError, MnarFactorError
from mnar_factor.evaluation import evaluate_results, mechanism_rmse
from mnar_factor.factor import estimate_complete_factors, parallel_analysis, select_K_miss
from mnar_factor.gmm import GmmFit, Link, two_step_gmm
from mnar_factor.hbgmm import (
    ChainSettings,
    MechanismPrior,
    PosteriorSummary,
    estimate_prior,
    sample_posterior,
)
from mnar_factor.instruments import assignments_frame, instrument_scan, select_instruments
from mnar_factor.ipw import MechanismWeights, stabilization_probabilities
from mnar_factor.jtest import BootstrapResult, bootstrap_j_null, flag_mechanism_fit, p_chi2
from mnar_factor.latent import associate, fit_latent_model, naive_associate, qq_table, select_latent_K
from mnar_factor.parallel import map_tasks
from mnar_factor.sim import SimulationConfig, load_truth, simulate_dataset, write_design

# Generator streams; every randomised task seeds default_rng((seed, stream, index))
STREAM_BOOTSTRAP = 1
STREAM_MCMC = 2

RESULTS = "results.tsv"
QQ = "qq.tsv"

# q-value cutoff for the discovery count in the summary line
DISCOVERY_Q = 0.1


@dataclass(frozen=True)
class _FeatureTask:
    g: int
    y: np.ndarray
    r: np.ndarray
    U: np.ndarray
    link: Link
    bootstrap_b: int
    seed: int


@dataclass(frozen=True)
class _FeatureFit:
    g: int
    fit: GmmFit | None = None
    bootstrap: BootstrapResult | None = None
    stage: str = ""
    error: MnarFactorError | None = None


def _fit_feature(task: _FeatureTask) -> _FeatureFit:
    """Two-step GMM and bootstrap J null for one feature."""
    try:
        fit = two_step_gmm(task.y, task.r, task.U, link=task.link)
    except MnarFactorError as e:
        return _FeatureFit(g=task.g, stage="gmm", error=e)
    try:
        boot = bootstrap_j_null(
            fit,
            task.y,
            task.r,
            task.U,
            B=task.bootstrap_b,
            seed=(task.seed, STREAM_BOOTSTRAP, task.g),
            link=task.link,
        )
    except MnarFactorError as e:
        return _FeatureFit(g=task.g, fit=fit, stage="jtest", error=e)
    return _FeatureFit(g=task.g, fit=fit, bootstrap=boot)


@dataclass(frozen=True)
class _ChainTask:
    g: int
    y: np.ndarray
    r: np.ndarray
    U: np.ndarray
    prior: MechanismPrior
    fit: GmmFit
    link: Link
    chain: ChainSettings
    seed: int


def _sample_feature(task: _ChainTask) -> tuple[int, PosteriorSummary | MnarFactorError, np.ndarray]:
    gamma = stabilization_probabilities(task.r, task.U)
    try:
        summary = sample_posterior(
            task.y,
            task.r,
            task.U,
            task.prior,
            start=task.fit.theta,
            proposal_cov=task.fit.R_hat,
            link=task.link,
            chain=task.chain,
            seed=(task.seed, STREAM_MCMC, task.g),
        )
    except MnarFactorError as e:
        return task.g, e, gamma
    return task.g, summary, gamma


def _gmm_frame(fits: dict[int, GmmFit], feature_ids: tuple[str, ...]) -> pd.DataFrame:
    rows = []
    for g, fit in fits.items():
        rows.append(
            {
                "feature": feature_ids[g],
                "alpha": fit.alpha_hat,
                "delta": fit.delta_hat,
                "alpha_first": fit.first_step[0],
                "delta_first": fit.first_step[1],
                "J": fit.J,
                "n_obs": fit.n_obs,
                "converged": fit.converged,
                "gamma_condition": fit.gamma_condition,
                "V_aa": fit.V_hat[0, 0],
                "V_ad": fit.V_hat[0, 1],
                "V_dd": fit.V_hat[1, 1],
            }
        )
    return pd.DataFrame(rows, columns=[
        "feature", "alpha", "delta", "alpha_first", "delta_first", "J", "n_obs",
        "converged", "gamma_condition", "V_aa", "V_ad", "V_dd",
    ])


def _load_matrix(path: str | Path, config: PipelineConfig) -> IntensityMatrix:
    return load_intensity_matrix(path, delimiter=config.get_delimiter())


def estimate_mechanism_workflow(
    matrix_path: str | Path,
    output_dir: str | Path,
    config: PipelineConfig,
    verbose: bool = False,
) -> dict[str, Any]:
    """Estimate the missingness mechanism of every missing-set feature.

    This function:
    1. Partitions features by missing fraction
    2. Chooses K_miss and estimates factors from the complete features
    3. Assigns two instruments per missing-set feature
    4. Fits the two-step GMM and bootstraps the J-test null per feature
    5. Pools the fits into a prior and samples each feature's posterior
    6. Writes the mechanism artifacts to ``output_dir``

    Args:
        matrix_path: Intensity matrix file
        output_dir: Artifact directory, created if needed
        config: Pipeline configuration
        verbose: If True, show progress for every stage

    Returns:
        Dictionary with run results

    Raises:
        InputError: If the matrix or configuration is unusable
        NumericalError: If a whole-matrix stage fails
    """
    started = time.perf_counter()
    output = Path(output_dir)
    output.mkdir(parents=True, exist_ok=True)
    diagnostics = Diagnostics()

    try:
        matrix = _load_matrix(matrix_path, config)
        seed = config.get_seed()
        workers = config.get_workers()
        link = config.get_link()

        partition = partition_metabolites(matrix, config.get_eps_miss(), config.get_max_miss())
        if verbose:
            click.echo(f"Loaded {matrix.n_features} features x {matrix.n_samples} samples")
            click.echo(
                f"Partition: {partition.observed_set.size} observed, "
                f"{partition.missing_set.size} missing, {partition.dropped_set.size} dropped"
            )
        for g in partition.dropped_set:
            diagnostics.add(matrix.feature_ids[g], "partition", "dropped: too many missing cells")

        complete = matrix.subset(partition.observed_set)
        K_PA = parallel_analysis(
            complete, n_perm=config.get_permutations(), seed=seed, workers=workers
        )
        fixed_k = config.get_k_miss()
        if fixed_k is None:
            selection = select_K_miss(matrix, partition, K_PA)
            K_miss, coverage = selection.k_miss, selection.coverage
        else:
            K_miss, coverage = fixed_k, {}
        if verbose:
            click.echo(f"Parallel analysis K: {K_PA}; K_miss: {K_miss}")

        # K_miss is below 1 only when no feature needs instruments
        C_hat = np.zeros((matrix.n_samples, 0))
        if K_miss >= 1:
            factors = estimate_complete_factors(complete, K_miss)
            C_hat = factors.C_hat
        write_table(
            pd.DataFrame(
                C_hat,
                index=pd.Index(matrix.sample_ids, name="sample"),
                columns=[f"factor_{k}" for k in range(C_hat.shape[1])],
            ),
            output / FACTORS,
            index=True,
        )

        fits: dict[int, GmmFit] = {}
        boots: dict[int, BootstrapResult] = {}
        instruments: dict[int, np.ndarray] = {}
        if partition.missing_set.size:
            tables = instrument_scan(matrix, partition.missing_set, factors)
            for g in tables.excluded:
                diagnostics.add(matrix.feature_ids[g], "instruments", "too few observed cells")
            assignments = [select_instruments(tables, int(g)) for g in tables.features]
            write_table(assignments_frame(assignments, matrix.feature_ids), output / INSTRUMENTS)
            for a in assignments:
                instruments[a.feature] = C_hat[:, list(a.indices)]

            if verbose:
                click.echo(f"Fitting {len(assignments)} mechanisms with {config.get_bootstrap_b()} bootstrap replicates...")
            tasks = [
                _FeatureTask(
                    g=g,
                    y=np.asarray(matrix.values[g]),
                    r=np.asarray(matrix.mask[g]),
                    U=U,
                    link=link,
                    bootstrap_b=config.get_bootstrap_b(),
                    seed=seed,
                )
                for g, U in instruments.items()
            ]
            for outcome in map_tasks(_fit_feature, tasks, workers):
                if outcome.fit is not None:
                    fits[outcome.g] = outcome.fit
                if outcome.bootstrap is not None:
                    boots[outcome.g] = outcome.bootstrap
                if outcome.error is not None:
                    diagnostics.add(matrix.feature_ids[outcome.g], outcome.stage, outcome.error)
        else:
            write_table(assignments_frame([], matrix.feature_ids), output / INSTRUMENTS)

        write_table(_gmm_frame(fits, matrix.feature_ids), output / GMM_FITS)

        tested = sorted(boots)
        flags = flag_mechanism_fit(
            np.array([boots[g].p_value for g in tested]), config.get_lfdr_threshold()
        )
        in_subset = {g: bool(flags.in_subset[i]) for i, g in enumerate(tested)}
        lfdr = {g: float(flags.lfdr[i]) for i, g in enumerate(tested)}
        jtest = pd.DataFrame(
            {
                "feature": [matrix.feature_ids[g] for g in fits],
                "J": [fits[g].J for g in fits],
                "p_boot": [boots[g].p_value if g in boots else np.nan for g in fits],
                "p_chi2": [float(p_chi2(fits[g].J)) for g in fits],
                "lfdr": [lfdr.get(g, np.nan) for g in fits],
                "in_subset": [in_subset.get(g, False) for g in fits],
                "el_fallback": [boots[g].el_fallback if g in boots else False for g in fits],
            }
        )
        write_table(jtest, output / JTEST)
        if verbose:
            click.echo(
                f"J-test: {sum(in_subset.values())} of {len(fits)} mechanisms kept (pi0 = {flags.pi0:.3f})"
            )

        weights, mechanisms, prior = _posterior_stage(
            matrix, fits, instruments, in_subset, config, diagnostics, verbose
        )
        write_table(mechanisms, output / MECHANISMS)
        write_weights(output, weights, matrix)

        write_manifest(
            output,
            matrix,
            {
                "config": config.as_dict(),
                "k-pa": int(K_PA),
                "k-miss": int(K_miss),
                "k-miss-coverage": {int(k): float(v) for k, v in coverage.items()},
                "partition": {
                    "observed": int(partition.observed_set.size),
                    "missing": int(partition.missing_set.size),
                    "dropped": int(partition.dropped_set.size),
                },
                "prior": None
                if prior is None
                else {"mu": prior.mu.tolist(), "U": prior.U.tolist(), "iterations": prior.iterations},
                "pi0": float(flags.pi0),
            },
        )
    finally:
        diagnostics.write(output)

    elapsed = time.perf_counter() - started
    click.echo(f"✓ Mechanisms estimated for {weights.features.size} features in {elapsed:.1f}s")
    click.echo(f"✓ Artifacts written to {output}")
    return {
        "output_dir": output,
        "k_pa": int(K_PA),
        "k_miss": int(K_miss),
        "mechanisms": int(weights.features.size),
        "diagnostics": len(diagnostics),
    }


def _posterior_stage(
    matrix: IntensityMatrix,
    fits: dict[int, GmmFit],
    instruments: dict[int, np.ndarray],
    in_subset: dict[int, bool],
    config: PipelineConfig,
    diagnostics: Diagnostics,
    verbose: bool,
) -> tuple[MechanismWeights, pd.DataFrame, MechanismPrior | None]:
    """Prior from the retained fits, then one chain per fitted feature."""
    columns = ["feature", "alpha_hat", "delta_hat", "ess", "acceptance"]
    n = matrix.n_samples
    empty = MechanismWeights(
        features=np.zeros(0, dtype=int),
        w_hat=np.zeros((0, n)),
        v_hat=np.zeros((0, n)),
        gamma_hat=np.zeros((0, n)),
        in_subset=np.zeros(0, dtype=bool),
    )
    if not fits:
        return empty, pd.DataFrame(columns=columns), None

    pooled = [fits[g] for g in fits if in_subset.get(g, False)]
    if len(pooled) < 2:
        pooled = list(fits.values())
    try:
        prior = estimate_prior(pooled)
    except MnarFactorError as e:
        diagnostics.add("*", "prior", e)
        return empty, pd.DataFrame(columns=columns), None

    if verbose:
        click.echo(
            f"Prior: mu = ({prior.mu[0]:.3f}, {prior.mu[1]:.3f}) after {prior.iterations} EM iterations"
        )
        click.echo(f"Sampling {len(fits)} posteriors...")

    link = config.get_link()
    chain = config.get_chain_settings()
    seed = config.get_seed()
    tasks = [
        _ChainTask(
            g=g,
            y=np.asarray(matrix.values[g]),
            r=np.asarray(matrix.mask[g]),
            U=instruments[g],
            prior=prior,
            fit=fit,
            link=link,
            chain=chain,
            seed=seed,
        )
        for g, fit in fits.items()
    ]

    features, w_rows, v_rows, gamma_rows, rows = [], [], [], [], []
    for g, outcome, gamma in map_tasks(_sample_feature, tasks, config.get_workers()):
        if isinstance(outcome, MnarFactorError):
            diagnostics.add(matrix.feature_ids[g], "posterior", outcome)
            continue
        features.append(g)
        w_rows.append(outcome.w_hat)
        v_rows.append(outcome.v_hat)
        gamma_rows.append(gamma)
        rows.append(
            {
                "feature": matrix.feature_ids[g],
                "alpha_hat": outcome.alpha_hat,
                "delta_hat": outcome.delta_hat,
                "ess": outcome.ess,
                "acceptance": outcome.acceptance_rate,
            }
        )

    if not features:
        return empty, pd.DataFrame(columns=columns), prior

    weights = MechanismWeights(
        features=np.array(features, dtype=int),
        w_hat=np.vstack(w_rows),
        v_hat=np.vstack(v_rows),
        gamma_hat=np.vstack(gamma_rows),
        in_subset=np.array([in_subset.get(g, False) for g in features], dtype=bool),
    )
    return weights, pd.DataFrame(rows, columns=columns), prior


def _artifact_partition(matrix: IntensityMatrix, manifest: dict[str, Any]) -> Partition:
    # the partition must match the one the mechanisms were estimated under
    used = manifest.get("config", {})
    return partition_metabolites(matrix, float(used["eps-miss"]), float(used["max-miss"]))


def associate_workflow(
    matrix_path: str | Path,
    design_path: str | Path,
    interest: list[str],
    output_dir: str | Path,
    config: PipelineConfig,
    artifacts_dir: str | Path | None = None,
    instruments: list[str] | None = None,
    naive: bool = False,
    verbose: bool = False,
) -> dict[str, Any]:
    """Recover the latent factors for one design and test every feature.

    Args:
        matrix_path: Intensity matrix file
        design_path: Samples x covariates design file
        interest: Design columns of interest
        output_dir: Directory for results.tsv and qq.tsv
        config: Pipeline configuration
        artifacts_dir: Mechanism artifacts of this matrix; required unless ``naive``
        instruments: Design columns used as observed instruments
        naive: Ignore the mechanism and treat missing cells as ignorable
        verbose: If True, show progress

    Returns:
        Dictionary with run results

    Raises:
        StaleArtifactError: If the artifacts belong to another matrix
    """
    started = time.perf_counter()
    output = Path(output_dir)
    output.mkdir(parents=True, exist_ok=True)

    matrix = _load_matrix(matrix_path, config)
    design = load_design(
        design_path, interest, matrix.sample_ids, instruments, delimiter=config.get_delimiter()
    )

    weights = None
    if naive:
        partition = partition_metabolites(matrix, config.get_eps_miss(), config.get_max_miss())
    else:
        if artifacts_dir is None:
            raise InputError("--artifacts is required unless --naive is given")
        manifest = read_manifest(artifacts_dir, matrix)
        partition = _artifact_partition(matrix, manifest)
        weights = load_weights(artifacts_dir, matrix)
        if verbose:
            click.echo(f"Loaded mechanisms for {weights.features.size} features from {artifacts_dir}")

    K = config.get_latent_k()
    if K is None:
        K = select_latent_K(
            matrix,
            partition,
            design.X,
            n_perm=config.get_permutations(),
            seed=config.get_seed(),
            workers=config.get_workers(),
        )
    if verbose:
        click.echo(f"Latent factors: K = {K}")

    if naive:
        results = naive_associate(matrix, design, K, partition)
    else:
        model = fit_latent_model(
            matrix,
            design,
            partition,
            weights,
            K,
            eps_q=config.get_eps_qvalue(),
            rounds=config.get_omega_rounds(),
        )
        if verbose:
            click.echo(f"C2 converged after {model.sweeps} sweeps on {model.features.size} features")
        results = associate(matrix, design, model.C_hat, partition, weights)

    frame = results.to_frame()
    write_table(frame, output / RESULTS)
    write_table(qq_table(results.p_values), output / QQ)

    ok = frame["status"] == "ok"
    discoveries = int((frame.loc[ok, "q"] <= DISCOVERY_Q).sum())
    elapsed = time.perf_counter() - started
    click.echo(
        f"✓ Tested {len(results.feature_ids)} features in {elapsed:.1f}s, "
        f"{discoveries} discoveries at q <= {DISCOVERY_Q}"
    )
    click.echo(f"✓ Results written to {output / RESULTS}")
    return {
        "output_dir": output,
        "K": int(K),
        "features": len(results.feature_ids),
        "discoveries": discoveries,
        "results": frame,
    }


def simulate_workflow(
    output_dir: str | Path, cfg: SimulationConfig, verbose: bool = False
) -> dict[str, Any]:
    """Draw one dataset and write matrix.tsv, design.tsv and truth.json."""
    output = Path(output_dir)
    output.mkdir(parents=True, exist_ok=True)
    dataset = simulate_dataset(cfg)

    write_intensity_matrix(dataset.matrix, output / "matrix.tsv")
    write_design(dataset.design, dataset.matrix.sample_ids, output / "design.tsv")
    dataset.truth.to_json(output / "truth.json", dataset.matrix.feature_ids)

    missing_fraction = 1.0 - float(dataset.matrix.mask.mean())
    if verbose:
        click.echo(f"Confounding R^2: {dataset.truth.realized_r2:.4f} (target {cfg.confounding_r2})")
        click.echo(f"Missing cells: {missing_fraction:.1%}")
    click.echo(f"✓ Simulated {cfg.p} features x {cfg.n} samples into {output}")
    return {
        "output_dir": output,
        "missing_fraction": missing_fraction,
        "realized_r2": dataset.truth.realized_r2,
    }


def evaluate_workflow(
    results_path: str | Path,
    truth_path: str | Path,
    artifacts_dir: str | Path | None = None,
    q_threshold: float = 0.1,
    level: float = 0.95,
) -> dict[str, Any]:
    """Score association results, and optionally mechanism estimates, against a truth file."""
    truth = load_truth(truth_path)
    results = read_table(results_path)
    results["feature"] = results["feature"].astype(str)
    summary = evaluate_results(results, truth, q_threshold=q_threshold, level=level)

    rmse: dict[str, dict[str, float]] = {}
    if artifacts_dir is not None:
        artifacts = Path(artifacts_dir)
        posterior = read_table(artifacts / MECHANISMS).rename(
            columns={"alpha_hat": "alpha", "delta_hat": "delta"}
        )
        two_step = read_table(artifacts / GMM_FITS)
        for frame in (posterior, two_step):
            frame["feature"] = frame["feature"].astype(str)
        if len(posterior):
            rmse["hbgmm"] = mechanism_rmse(posterior, truth)
        if len(two_step):
            rmse["gmm"] = mechanism_rmse(two_step, truth)
    return {"summary": summary, "rmse": rmse}
