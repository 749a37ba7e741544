"""Tests for configuration generation and loading."""

import tempfile
from pathlib import Path

import pytest
import yaml

from mnar_factor.config import (
    DEFAULTS,
    ConfigError,
    PipelineConfig,
    apply_override,
    load_config,
    load_simulation_config,
)
from mnar_factor.gmm import LOGISTIC, T4
from mnar_factor.parallel import WORKERS_ENV_VAR
from mnar_factor.templates import generate_config_template


def write_config(tmp_path, content):
    path = tmp_path / "mnar-factor.yaml"
    path.write_text(content)
    return path


def test_generate_config_template_is_valid_yaml():
    """Test that generated template is valid YAML."""
    template = generate_config_template()

    try:
        config_dict = yaml.safe_load(template)
        assert isinstance(config_dict, dict)
    except yaml.YAMLError as e:
        pytest.fail(f"Generated template is not valid YAML: {e}")


def test_generate_config_template_lists_every_key():
    """Test that the template documents every configuration key with its default."""
    config_dict = yaml.safe_load(generate_config_template())
    assert config_dict == DEFAULTS


def test_generate_config_template_includes_documentation():
    """Test that generated template includes type comments."""
    template = generate_config_template()
    assert "# Type:" in template
    assert "--set" in template


def test_generated_config_can_be_loaded():
    """Test that generated config can be successfully loaded by PipelineConfig."""
    template = generate_config_template()

    with tempfile.NamedTemporaryFile(mode="w", suffix=".yaml", delete=False) as temp_file:
        temp_file.write(template)
        temp_file_path = temp_file.name

    try:
        config = PipelineConfig(temp_file_path)

        assert config.get_link() == T4
        assert config.get_k_miss() is None
        assert config.get_bootstrap_b() == 200
    finally:
        Path(temp_file_path).unlink()


class TestPipelineConfig:
    """Tests for PipelineConfig."""

    def test_defaults_without_file(self):
        """Test the defaults when no file is given."""
        config = load_config()

        assert config.get_eps_miss() == 0.05
        assert config.get_max_miss() == 0.5
        assert config.get_latent_k() is None
        assert config.get_lfdr_threshold() == 0.8
        assert config.get_eps_qvalue() == 0.1
        assert config.get_omega_rounds() == 3
        assert config.get_permutations() == 99
        assert config.get_seed() == 0
        assert config.get_delimiter() is None

        chain = config.get_chain_settings()
        assert (chain.iterations, chain.burn_in, chain.thin) == (5000, 1000, 2)

    def test_file_values_merge_with_defaults(self, tmp_path):
        """Test that a partial nested section keeps its other defaults."""
        path = write_config(tmp_path, "link: logistic\nk-miss: 4\nmcmc:\n  iterations: 800\n  burn-in: 200\n")
        config = load_config(path)

        assert config.get_link() == LOGISTIC
        assert config.get_k_miss() == 4
        chain = config.get_chain_settings()
        assert (chain.iterations, chain.burn_in, chain.thin) == (800, 200, 2)

    def test_missing_file(self, tmp_path):
        """Test that a missing file is a configuration error."""
        with pytest.raises(ConfigError, match="not found"):
            load_config(tmp_path / "absent.yaml")

    def test_invalid_yaml(self, tmp_path):
        """Test that malformed YAML is reported."""
        path = write_config(tmp_path, "link: [unclosed\n")
        with pytest.raises(ConfigError, match="not valid YAML"):
            load_config(path)

    def test_overrides(self):
        """Test dotted and hyphenated override paths with YAML-typed values."""
        config = load_config(
            overrides=["parallel-analysis.permutations=19", "mcmc.burn-in=10", "link=probit", "seed=7"]
        )

        assert config.get_permutations() == 19
        assert config.get_chain_settings().burn_in == 10
        assert config.get_link().kind == "probit"
        assert config.get_seed() == 7

    def test_unknown_key(self):
        """Test that unknown keys are rejected."""
        with pytest.raises(ConfigError, match="Unknown configuration keys: colour"):
            load_config(overrides=["colour=blue"])

    @pytest.mark.parametrize(
        "override",
        [
            "eps-miss=1.5",
            "eps-miss=0.6",
            "link=cauchy",
            "k-miss=1",
            "bootstrap-b=50",
            "parallel-analysis.permutations=5",
            "mcmc.thin=0",
            "workers=0",
            "seed=true",
        ],
    )
    def test_invalid_values(self, override):
        """Test that out-of-range values are rejected."""
        with pytest.raises(ConfigError):
            load_config(overrides=[override])

    def test_burn_in_must_precede_iterations(self):
        """Test the burn-in ordering check."""
        with pytest.raises(ConfigError, match="burn-in"):
            load_config(overrides=["mcmc.iterations=100", "mcmc.burn-in=100"])

    def test_workers_from_environment(self, monkeypatch):
        """Test that an unset worker count reads the environment."""
        monkeypatch.setenv(WORKERS_ENV_VAR, "3")
        assert load_config().get_workers() == 3
        assert load_config(overrides=["workers=2"]).get_workers() == 2

    def test_as_dict_resolves_workers(self, monkeypatch):
        """Test that the recorded configuration holds a concrete worker count."""
        monkeypatch.delenv(WORKERS_ENV_VAR, raising=False)
        resolved = load_config().as_dict()
        assert resolved["workers"] == 1
        assert resolved["mcmc"] == DEFAULTS["mcmc"]


class TestApplyOverride:
    """Tests for apply_override."""

    def test_creates_nested_value(self):
        """Test that the value is parsed as YAML and set at the path."""
        data = {"mcmc": {"iterations": 5}}
        apply_override(data, "mcmc.iterations=12")
        assert data["mcmc"]["iterations"] == 12

    @pytest.mark.parametrize("assignment", ["no-equals-sign", "=3"])
    def test_malformed(self, assignment):
        """Test that malformed assignments are rejected."""
        with pytest.raises(ConfigError):
            apply_override({}, assignment)


class TestLoadSimulationConfig:
    """Tests for load_simulation_config."""

    def test_file_and_overrides(self, tmp_path):
        """Test kebab-case file keys, link parsing and keyword overrides."""
        path = write_config(
            tmp_path, "n: 40\np: 30\nK: 2\nlink: logistic\nconfounding-r2: 0.2\ntarget-eigenvalues: [0.5, 0.2]\n"
        )
        cfg = load_simulation_config(path, seed=9, p=None)

        assert (cfg.n, cfg.p, cfg.K) == (40, 30, 2)
        assert cfg.link == LOGISTIC
        assert cfg.confounding_r2 == 0.2
        assert cfg.target_eigenvalues == (0.5, 0.2)
        assert cfg.seed == 9

    def test_unknown_key(self, tmp_path):
        """Test that unknown simulation keys are rejected."""
        path = write_config(tmp_path, "samples: 40\n")
        with pytest.raises(ConfigError, match="samples"):
            load_simulation_config(path)

    def test_defaults(self):
        """Test that no file and no overrides give the default settings."""
        cfg = load_simulation_config()
        assert (cfg.n, cfg.p, cfg.K) == (600, 1200, 10)
