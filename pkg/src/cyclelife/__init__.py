"""Early-life lithium-ion cell lifetime prediction from weekly RPT data."""

__version__ = "0.1.0"
