"""Superadiabatic representations and exponentially small transitions for
one-dimensional two-level semiclassical Schroedinger systems."""

from .model import DiabaticModel, derived_params, potential_matrix, adiabatic_frame, theta_derivative
from .spectral import Grid1D, GridFunction, PolyPSymbol, moyal_term, weyl_apply
from .superadiabatic import ab_tables, coefficient_tables, coupling_symbol, projection_symbol, projection_defect
from .dynamics import PacketSpec, TwoLevelState, prepare_incoming, strang_evolve, superadiabatic_components
from .transition import (
    TransitionParams,
    formula_transmitted,
    history_perturbative,
    lz_probability,
    optimal_representation,
)

__version__ = "0.1.0"
