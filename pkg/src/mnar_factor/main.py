"""CLI interface for mnar-factor."""

import sys
import warnings
from collections import Counter
from collections.abc import Iterator
from contextlib import contextmanager

import click

from mnar_factor import __version__
from mnar_factor.config import ConfigError, load_config, load_simulation_config
from mnar_factor.errors import (
    EXIT_INPUT_ERROR,
    EXIT_NUMERICAL_ERROR,
    InputError,
    MnarFactorWarning,
    NumericalError,
)
from mnar_factor.pipeline import (
    associate_workflow,
    estimate_mechanism_workflow,
    evaluate_workflow,
    simulate_workflow,
)


def add_help_option(f):
    """Custom decorator to add '-h' as an alias for '--help'."""
    f = click.help_option("--help", "-h")(f)
    return f


def pipeline_options(f):
    """Options shared by the commands that run the estimation pipeline."""
    options = [
        click.option(
            "--config",
            "-c",
            type=click.Path(exists=True, dir_okay=False),
            default=None,
            help="Path to configuration file (default: built-in defaults)",
        ),
        click.option(
            "--set",
            "overrides",
            multiple=True,
            metavar="KEY.PATH=VALUE",
            help="Override a configuration value, e.g. --set mcmc.iterations=2000 (repeatable)",
        ),
        click.option("--seed", type=int, default=None, help="Seed for every randomised stage"),
        click.option(
            "--workers",
            type=int,
            default=None,
            help="Worker processes (default: MNAR_FACTOR_WORKERS or 1)",
        ),
        click.option(
            "--verbose",
            "-v",
            is_flag=True,
            help="Show progress for every stage and a summary of warnings",
        ),
    ]
    for option in reversed(options):
        f = option(f)
    return f


def _collect_overrides(overrides: tuple[str, ...], **flags: object) -> list[str]:
    """Turn dedicated flags into ``key=value`` overrides after the --set ones."""
    collected = list(overrides)
    for key, value in flags.items():
        if value is not None:
            collected.append(f"{key}={value}")
    return collected


def _echo_warnings(caught: list[warnings.WarningMessage]) -> None:
    counts = Counter(
        (w.category.__name__, str(w.message))
        for w in caught
        if issubclass(w.category, MnarFactorWarning)
    )
    if not counts:
        return
    click.echo("\nWarnings:", err=True)
    for (name, message), count in counts.items():
        suffix = f" [x{count}]" if count > 1 else ""
        click.echo(f"Warning ({name}): {message}{suffix}", err=True)


@contextmanager
def run_command(verbose: bool) -> Iterator[None]:
    """Map package errors to exit codes and summarise warnings in verbose mode."""
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always", MnarFactorWarning)
        try:
            yield
        except ConfigError as e:
            click.echo(f"Configuration error: {e}", err=True)
            sys.exit(EXIT_INPUT_ERROR)
        except InputError as e:
            click.echo(f"Input error: {e}", err=True)
            sys.exit(EXIT_INPUT_ERROR)
        except NumericalError as e:
            click.echo(f"Numerical error: {e}", err=True)
            sys.exit(EXIT_NUMERICAL_ERROR)
        except Exception as e:
            click.echo(f"Error: {e}", err=True)
            sys.exit(1)
        finally:
            if verbose:
                _echo_warnings(caught)


@click.group()
@add_help_option
@click.version_option(__version__, "--version", "-v")
def cli():
    """mnar-factor - Association testing for features with nonignorable missing values."""
    pass


@cli.command()
@add_help_option
@click.option(
    "--output",
    "-o",
    required=True,
    type=click.Path(file_okay=False),
    help="Directory for matrix.tsv, design.tsv and truth.json",
)
@click.option("--seed", type=int, required=True, help="Dataset seed (required)")
@click.option(
    "--config",
    "-c",
    type=click.Path(exists=True, dir_okay=False),
    default=None,
    help="YAML file with simulation settings in kebab-case",
)
@click.option("--samples", "-n", type=int, default=None, help="Number of samples (default: 600)")
@click.option("--features", "-p", type=int, default=None, help="Number of features (default: 1200)")
@click.option("--factors", "-k", type=int, default=None, help="Number of latent factors (default: 10)")
@click.option("--link", default=None, help="Missingness link: logistic, probit or t<df>")
@click.option("--verbose", "-v", is_flag=True, help="Show dataset summary statistics")
def simulate(
    output: str,
    seed: int,
    config: str | None,
    samples: int | None,
    features: int | None,
    factors: int | None,
    link: str | None,
    verbose: bool,
):
    """Simulate a dataset with confounding factors and nonignorable missingness.

    Writes the intensity matrix, a case/control design and the full truth
    (effects, factors, mechanism parameters) as JSON.
    """
    with run_command(verbose):
        cfg = load_simulation_config(
            config, seed=seed, n=samples, p=features, K=factors, link=link
        )
        simulate_workflow(output, cfg, verbose=verbose)


@cli.command()
@add_help_option
@click.argument("matrix", type=click.Path(exists=True, dir_okay=False))
@click.option(
    "--output",
    "-o",
    required=True,
    type=click.Path(file_okay=False),
    help="Directory for the mechanism artifacts",
)
@pipeline_options
@click.option("--eps-miss", type=float, default=None, help="Largest missing fraction of a complete feature")
@click.option("--link", default=None, help="Missingness link: logistic, probit or t<df>")
@click.option("--k-miss", default=None, help="Number of instrument factors, or 'auto'")
def estimate_mechanism(
    matrix: str,
    output: str,
    config: str | None,
    overrides: tuple[str, ...],
    seed: int | None,
    workers: int | None,
    verbose: bool,
    eps_miss: float | None,
    link: str | None,
    k_miss: str | None,
):
    """Estimate the missingness mechanism of every feature.

    Uses only the intensity matrix: no design is read. The artifacts can be
    reused by any number of associate runs on the same matrix.

    \b
    Stages:
    1. Partition features by missing fraction
    2. Estimate factors from the complete features and pick instruments
    3. Two-step GMM and bootstrap J-test per feature
    4. Pool the fits into a prior and sample each feature's posterior
    """
    with run_command(verbose):
        cfg = load_config(
            config,
            _collect_overrides(
                overrides, seed=seed, workers=workers, **{"eps-miss": eps_miss, "link": link, "k-miss": k_miss}
            ),
        )
        estimate_mechanism_workflow(matrix, output, cfg, verbose=verbose)


@cli.command()
@add_help_option
@click.argument("matrix", type=click.Path(exists=True, dir_okay=False))
@click.option(
    "--design",
    "-d",
    required=True,
    type=click.Path(exists=True, dir_okay=False),
    help="Samples x covariates table; the first column holds sample ids",
)
@click.option(
    "--interest",
    "-i",
    required=True,
    multiple=True,
    help="Design column of interest (repeatable)",
)
@click.option(
    "--instrument",
    multiple=True,
    help="Design column used as an observed instrument (repeatable)",
)
@click.option(
    "--artifacts",
    "-a",
    type=click.Path(exists=True, file_okay=False),
    default=None,
    help="Mechanism artifacts written by estimate-mechanism",
)
@click.option(
    "--output",
    "-o",
    required=True,
    type=click.Path(file_okay=False),
    help="Directory for results.tsv and qq.tsv",
)
@click.option(
    "--naive",
    is_flag=True,
    help="Treat missing values as ignorable (baseline; no artifacts needed)",
)
@pipeline_options
def associate(
    matrix: str,
    design: str,
    interest: tuple[str, ...],
    instrument: tuple[str, ...],
    artifacts: str | None,
    output: str,
    naive: bool,
    config: str | None,
    overrides: tuple[str, ...],
    seed: int | None,
    workers: int | None,
    verbose: bool,
):
    """Test every feature for association with the covariates of interest.

    Recovers the latent factors for this design and fits each feature by
    OLS (complete features) or inverse-probability weighting (features with
    nonignorable missingness).
    """
    with run_command(verbose):
        cfg = load_config(config, _collect_overrides(overrides, seed=seed, workers=workers))
        associate_workflow(
            matrix,
            design,
            list(interest),
            output,
            cfg,
            artifacts_dir=artifacts,
            instruments=list(instrument) or None,
            naive=naive,
            verbose=verbose,
        )


@cli.command()
@add_help_option
@click.argument("results", type=click.Path(exists=True, dir_okay=False))
@click.option(
    "--truth",
    "-t",
    required=True,
    type=click.Path(exists=True, dir_okay=False),
    help="truth.json written by simulate",
)
@click.option(
    "--artifacts",
    "-a",
    type=click.Path(exists=True, file_okay=False),
    default=None,
    help="Also score the mechanism estimates in this artifact directory",
)
@click.option("--q-threshold", type=float, default=0.1, show_default=True, help="Discovery cutoff")
@click.option("--level", type=float, default=0.95, show_default=True, help="Confidence level")
@click.option("--verbose", "-v", is_flag=True, help="Show warnings")
def evaluate(
    results: str,
    truth: str,
    artifacts: str | None,
    q_threshold: float,
    level: float,
    verbose: bool,
):
    """Score association results against a simulation truth.

    Prints false discovery proportion, power and interval coverage for the
    complete features, the features with missing values, and all features.
    """
    with run_command(verbose):
        scores = evaluate_workflow(results, truth, artifacts, q_threshold=q_threshold, level=level)
        click.echo(scores["summary"].to_string(index=False, float_format=lambda x: f"{x:.4f}"))
        for method, rmse in scores["rmse"].items():
            click.echo(
                f"{method}: RMSE log alpha {rmse['rmse_log_alpha']:.4f}, "
                f"RMSE delta {rmse['rmse_delta']:.4f}"
            )


@cli.command()
@add_help_option
def generate_config():
    """Generate a complete configuration file template.

    Outputs a documented template with every key at its default value.

    Usage:
        mnar-factor generate-config > mnar-factor.yaml
        mnar-factor estimate-mechanism data.tsv -o mechanisms -c mnar-factor.yaml
    """
    from mnar_factor.templates import generate_config_template

    template = generate_config_template()
    click.echo(template)


@cli.command()
@add_help_option
@click.argument(
    "shell",
    type=click.Choice(["bash", "zsh", "fish"], case_sensitive=False),
)
def completion(shell: str):
    """Generate shell completion script.

    \b
    Usage:
      mnar-factor completion bash > ~/.bash_completions/mnar-factor.bash
      mnar-factor completion zsh > ~/.mnar-factor.zsh
      mnar-factor completion fish > ~/.config/fish/completions/mnar-factor.fish
    """
    from mnar_factor.shell_completion import generate_completion_script

    completion_script = generate_completion_script(cli, shell)
    click.echo(completion_script)


if __name__ == "__main__":
    cli()
