"""EHR event harmonization and concept embedding toolkit."""

__version__ = "0.1.0"
