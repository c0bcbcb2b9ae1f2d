"""Object mask priors for partially supervised instance segmentation on synthetic shapes."""

__version__ = "0.1.0"
