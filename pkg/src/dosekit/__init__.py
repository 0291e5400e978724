"""Site-agnostic radiotherapy dose-prediction workbench."""

__version__ = "0.1.0"
