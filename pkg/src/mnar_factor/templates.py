"""Configuration file template."""


def generate_config_template() -> str:
    """Generate a complete configuration file template with all parameters documented.

    Returns:
        YAML configuration template as a string with inline documentation
    """
    template = """# mnar-factor configuration
#
# Every key is optional; the values below are the defaults.
# Any key can also be overridden on the command line:
#   mnar-factor estimate-mechanism data.tsv -o out --set mcmc.iterations=2000

# ============================================================================
# FEATURE PARTITION
# ============================================================================

# Features missing in at most this fraction of samples are treated as complete
# Type: number in [0, 1]
eps-miss: 0.05

# Features missing in more than this fraction of samples are dropped
# Type: number in [0, 1], larger than eps-miss
max-miss: 0.5

# ============================================================================
# MISSINGNESS MECHANISM
# ============================================================================

# Link function of the observation probability
# Type: "logistic", "probit" or "t<df>" (Student t CDF, e.g. t4)
link: t4

# Number of instrument-generating factors
# Type: "auto" or integer >= 2
k-miss: auto

# Features whose J-test lfdr falls below this value are flagged as misspecified
# Type: number in [0, 1]
lfdr-threshold: 0.8

# Bootstrap replicates for the J-test null distribution
# Type: integer >= 99
bootstrap-b: 200

# Parallel analysis settings
parallel-analysis:
  # Permutations of the complete features
  # Type: integer >= 19
  permutations: 99

# Random-walk Metropolis settings for the hierarchical posterior
mcmc:
  # Total iterations per feature
  iterations: 5000
  # Iterations used for scale adaptation and then discarded
  burn-in: 1000
  # Keep every thin-th draw after burn-in
  thin: 2

# ============================================================================
# LATENT FACTORS AND ASSOCIATION
# ============================================================================

# Number of latent factors in the association model
# Type: "auto" (parallel analysis) or integer >= 1
latent-k: auto

# q-value screen used when estimating the design part of the latent factors
# Type: number in [0, 1]
eps-qvalue: 0.1

# Refinement rounds of that screen
# Type: integer >= 0
omega-rounds: 3

# ============================================================================
# EXECUTION
# ============================================================================

# Seed for every randomised stage
seed: 0

# Worker processes; null uses MNAR_FACTOR_WORKERS or 1
workers: null

# Field separator of input tables; null picks comma for .csv and tab otherwise
delimiter: null
"""
    return template
