"""Self-guided radiology report generation at desk scale, built on a small numpy autodiff engine."""

__version__ = "0.1.0"
