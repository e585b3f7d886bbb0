"""Full-body pose estimation from head and wrist tracking with a guided diffusion sampler."""

__version__ = "0.1.0"

__all__ = ["__version__", "cli"]
