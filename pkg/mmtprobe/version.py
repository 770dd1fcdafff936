"""Version information for the mmt-probe package."""

__version__ = "0.1.0"
