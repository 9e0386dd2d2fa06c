"""Knowledge distillation for set-prediction detectors."""

__version__ = "0.1.0"
