"""Multi-teacher knowledge distillation with a meta-learned per-instance teacher weighting."""

__version__ = "0.1.0"
