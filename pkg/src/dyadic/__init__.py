"""Simulation and verification toolkit for a stochastic inviscid dyadic shell model.

Subpackages by responsibility:

* :mod:`dyadic.model`    closed-form constants of the wavenumber sequence
* :mod:`dyadic.sde`      path simulation (nonlinear, linearized, deterministic)
* :mod:`dyadic.ctmc`     event-driven birth-death escape-time sampling
* :mod:`dyadic.forward`  truncated Kolmogorov forward equations
* :mod:`dyadic.analysis` decay-rate, reweighting and diagnostic reports
* :mod:`dyadic.cli`      reproducible experiment runner
"""

__version__ = "0.1.0"

from .model import SpectralModel, Regularity  # noqa: F401
