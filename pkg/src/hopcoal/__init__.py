"""Hopping and coalescing particles: microscopic simulation, kinetic
equation solver and configuration-space harmonic analysis."""

from .errors import NumericalError, ValidationError
from .kernels import KernelSet, make_kernels

__version__ = "0.1.0"

__all__ = ["KernelSet", "make_kernels", "ValidationError", "NumericalError", "__version__"]
