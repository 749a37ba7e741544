"""mnar-factor - Missing-not-at-random mechanism estimation with latent factor adjustment."""

from importlib.metadata import version

try:
    __version__ = version("mnar-factor")
except Exception:
    __version__ = "0.0.0-dev"
