"""Finite-population symmetric stochastic games coupled through the deep state."""

from .model import GameSpec, ModelError, build_example1, load, random_spec, save, validate

__version__ = "0.1.0"

__all__ = ["GameSpec", "ModelError", "build_example1", "load", "random_spec", "save", "validate", "__version__"]
