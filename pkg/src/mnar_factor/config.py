"""Configuration loading and parsing for mnar-factor."""

import copy
from dataclasses import fields
from pathlib import Path
from typing import Any

import yaml
from jsonpath_ng import parse
from jsonpath_ng.exceptions import JsonPathParserError

from mnar_factor.errors import InputError
from mnar_factor.gmm import Link
from mnar_factor.hbgmm import ChainSettings
from mnar_factor.parallel import default_workers
from mnar_factor.sim import SimulationConfig

DEFAULT_CONFIG_PATH = "mnar-factor.yaml"

DEFAULTS: dict[str, Any] = {
    "eps-miss": 0.05,
    "max-miss": 0.5,
    "link": "t4",
    "k-miss": "auto",
    "latent-k": "auto",
    "lfdr-threshold": 0.8,
    "eps-qvalue": 0.1,
    "omega-rounds": 3,
    "bootstrap-b": 200,
    "parallel-analysis": {"permutations": 99},
    "mcmc": {"iterations": 5000, "burn-in": 1000, "thin": 2},
    "seed": 0,
    "workers": None,
    "delimiter": None,
}


class ConfigError(InputError):
    """Raised when configuration is invalid or cannot be loaded."""

    pass


def _merge(base: dict[str, Any], update: dict[str, Any]) -> dict[str, Any]:
    merged = copy.deepcopy(base)
    for key, value in update.items():
        if isinstance(value, dict) and isinstance(merged.get(key), dict):
            merged[key] = _merge(merged[key], value)
        else:
            merged[key] = value
    return merged


def apply_override(data: dict[str, Any], assignment: str) -> None:
    """Apply one ``key.path=value`` override in place; the value is parsed as YAML.

    Raises:
        ConfigError: If the assignment is malformed
    """
    if "=" not in assignment:
        raise ConfigError(f"Override '{assignment}' must have the form key.path=value")
    key, raw = assignment.split("=", 1)
    key = key.strip()
    if not key:
        raise ConfigError(f"Override '{assignment}' has an empty key")
    try:
        value = yaml.safe_load(raw) if raw.strip() else None
    except yaml.YAMLError as e:
        raise ConfigError(f"Override '{assignment}' has an invalid value: {e}")

    path = "$." + ".".join(f"'{part}'" for part in key.split("."))
    try:
        parse(path).update_or_create(data, value)
    except JsonPathParserError as e:
        raise ConfigError(f"Override key '{key}' is not a valid path: {e}")


class PipelineConfig:
    """Pipeline configuration loaded from a YAML file plus command-line overrides."""

    def __init__(
        self,
        config_path: str | Path | None = None,
        overrides: list[str] | tuple[str, ...] = (),
    ):
        """Load configuration from YAML, falling back to defaults.

        Args:
            config_path: Path to the configuration file; None means defaults only
            overrides: ``key.path=value`` assignments applied after loading

        Raises:
            ConfigError: If the file doesn't exist or a value is invalid
        """
        loaded: dict[str, Any] = {}
        self.config_path = Path(config_path) if config_path is not None else None
        if self.config_path is not None:
            if not self.config_path.exists():
                raise ConfigError(f"Configuration file not found: {self.config_path}")
            with open(self.config_path, "r") as f:
                try:
                    loaded = yaml.safe_load(f) or {}
                except yaml.YAMLError as e:
                    raise ConfigError(f"Configuration file is not valid YAML: {e}")
            if not isinstance(loaded, dict):
                raise ConfigError("Configuration file must contain a mapping")

        self._config: dict[str, Any] = _merge(DEFAULTS, loaded)
        for assignment in overrides:
            apply_override(self._config, assignment)

        self._validate_config()

    def _validate_config(self) -> None:
        """Check every value once so that getters can trust them."""
        unknown = set(self._config) - set(DEFAULTS)
        if unknown:
            raise ConfigError(f"Unknown configuration keys: {', '.join(sorted(unknown))}")

        for key in ("eps-miss", "max-miss", "lfdr-threshold", "eps-qvalue"):
            value = self._config[key]
            if not isinstance(value, (int, float)) or not 0.0 <= value <= 1.0:
                raise ConfigError(f"'{key}' must be a number in [0, 1]")
        if self._config["eps-miss"] >= self._config["max-miss"]:
            raise ConfigError("'eps-miss' must be smaller than 'max-miss'")

        try:
            Link.parse(str(self._config["link"]))
        except InputError as e:
            raise ConfigError(f"'link': {e}")

        self._check_auto_or_int("k-miss", minimum=2)
        self._check_auto_or_int("latent-k", minimum=1)
        self._check_int("omega-rounds", self._config["omega-rounds"], minimum=0)
        self._check_int("bootstrap-b", self._config["bootstrap-b"], minimum=99)
        self._check_int("seed", self._config["seed"], minimum=0)

        pa = self._config["parallel-analysis"]
        if not isinstance(pa, dict):
            raise ConfigError("'parallel-analysis' must be a mapping")
        self._check_int("parallel-analysis.permutations", pa.get("permutations"), minimum=19)

        mcmc = self._config["mcmc"]
        if not isinstance(mcmc, dict):
            raise ConfigError("'mcmc' must be a mapping")
        self._check_int("mcmc.iterations", mcmc.get("iterations"), minimum=1)
        self._check_int("mcmc.burn-in", mcmc.get("burn-in"), minimum=0)
        self._check_int("mcmc.thin", mcmc.get("thin"), minimum=1)
        if mcmc["burn-in"] >= mcmc["iterations"]:
            raise ConfigError("'mcmc.burn-in' must be smaller than 'mcmc.iterations'")

        if self._config["workers"] is not None:
            self._check_int("workers", self._config["workers"], minimum=1)
        delimiter = self._config["delimiter"]
        if delimiter is not None and not isinstance(delimiter, str):
            raise ConfigError("'delimiter' must be a string")

    @staticmethod
    def _check_int(key: str, value: Any, minimum: int) -> None:
        if isinstance(value, bool) or not isinstance(value, int) or value < minimum:
            raise ConfigError(f"'{key}' must be an integer >= {minimum}")

    def _check_auto_or_int(self, key: str, minimum: int) -> None:
        value = self._config[key]
        if value == "auto":
            return
        self._check_int(key, value, minimum)

    def get_eps_miss(self) -> float:
        return float(self._config["eps-miss"])

    def get_max_miss(self) -> float:
        return float(self._config["max-miss"])

    def get_link(self) -> Link:
        """Get the link used when fitting mechanisms (default t4)."""
        return Link.parse(str(self._config["link"]))

    def get_k_miss(self) -> int | None:
        """Get the fixed number of instrument factors, or None for automatic selection."""
        value = self._config["k-miss"]
        return None if value == "auto" else int(value)

    def get_latent_k(self) -> int | None:
        value = self._config["latent-k"]
        return None if value == "auto" else int(value)

    def get_lfdr_threshold(self) -> float:
        return float(self._config["lfdr-threshold"])

    def get_eps_qvalue(self) -> float:
        return float(self._config["eps-qvalue"])

    def get_omega_rounds(self) -> int:
        return int(self._config["omega-rounds"])

    def get_bootstrap_b(self) -> int:
        return int(self._config["bootstrap-b"])

    def get_permutations(self) -> int:
        return int(self._config["parallel-analysis"]["permutations"])

    def get_chain_settings(self) -> ChainSettings:
        mcmc = self._config["mcmc"]
        return ChainSettings(
            iterations=int(mcmc["iterations"]),
            burn_in=int(mcmc["burn-in"]),
            thin=int(mcmc["thin"]),
        )

    def get_seed(self) -> int:
        return int(self._config["seed"])

    def get_workers(self) -> int:
        """Get the worker count; unset means the MNAR_FACTOR_WORKERS environment variable, else 1."""
        workers = self._config["workers"]
        return default_workers() if workers is None else int(workers)

    def get_delimiter(self) -> str | None:
        return self._config["delimiter"]

    def as_dict(self) -> dict[str, Any]:
        """Resolved configuration, as recorded in artifact manifests."""
        resolved = copy.deepcopy(self._config)
        resolved["workers"] = self.get_workers()
        return resolved


def load_config(
    config_path: str | Path | None = None,
    overrides: list[str] | tuple[str, ...] = (),
) -> PipelineConfig:
    """Load pipeline configuration from file.

    Args:
        config_path: Path to configuration file, or None for defaults
        overrides: ``key.path=value`` assignments

    Returns:
        Loaded configuration object

    Raises:
        ConfigError: If config file is invalid or cannot be loaded
    """
    return PipelineConfig(config_path, overrides)


def load_simulation_config(
    config_path: str | Path | None = None, **overrides: Any
) -> SimulationConfig:
    """Build a SimulationConfig from an optional YAML file plus keyword overrides.

    File keys are the SimulationConfig field names in kebab-case
    (``confounding-r2``, ``target-eigenvalues``, ...). Overrides that are None
    are ignored.

    Raises:
        ConfigError: If the file is unreadable or names an unknown field
    """
    values: dict[str, Any] = {}
    if config_path is not None:
        path = Path(config_path)
        if not path.exists():
            raise ConfigError(f"Simulation configuration not found: {path}")
        with open(path, "r") as f:
            try:
                loaded = yaml.safe_load(f) or {}
            except yaml.YAMLError as e:
                raise ConfigError(f"Simulation configuration is not valid YAML: {e}")
        if not isinstance(loaded, dict):
            raise ConfigError("Simulation configuration must contain a mapping")
        values = {str(k).replace("-", "_"): v for k, v in loaded.items()}

    values.update({k: v for k, v in overrides.items() if v is not None})
    known = {f.name for f in fields(SimulationConfig)}
    unknown = set(values) - known
    if unknown:
        raise ConfigError(
            f"Unknown simulation keys: {', '.join(sorted(k.replace('_', '-') for k in unknown))}"
        )
    if isinstance(values.get("link"), str):
        values["link"] = Link.parse(values["link"])
    if values.get("target_eigenvalues") is not None:
        values["target_eigenvalues"] = tuple(values["target_eigenvalues"])
    return SimulationConfig(**values)
