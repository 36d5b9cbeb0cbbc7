"""Angle-free state estimation for balanced radial distribution feeders."""

from .estimator import assemble, postfilter_antisymmetry, solve_wls
from .measurement import NoiseConfig, check_observability, select_set, synthesize_pool
from .netmodel import NetworkModel, load_fixture, load_network, validate_radial
from .powerflow import Dispatch, generate_dispatch, solve_exact, solve_linear

__version__ = "0.1.0"

__all__ = [
    "Dispatch",
    "NetworkModel",
    "NoiseConfig",
    "assemble",
    "check_observability",
    "generate_dispatch",
    "load_fixture",
    "load_network",
    "postfilter_antisymmetry",
    "select_set",
    "solve_exact",
    "solve_linear",
    "solve_wls",
    "synthesize_pool",
    "validate_radial",
]
