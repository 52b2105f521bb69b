"""Finite abstractions, closeness bounds, barrier certificates and compositional
analysis for discrete-time stochastic control systems with Gaussian noise."""
from .model import Box, InputDependentGain, LinearDtScs, Region, UnsupportedModel, room_model, step
from .spec import Dfa, HorizonSpec, LabelMap, reach_avoid_dfa
from .grid import Grid, build_grid, quantize
from .abstraction import FiniteMdp, TruncationPolicy, abstract, transition_row
from .synthesis import brute_force_value, refine_policy, value_iterate

__version__ = "0.1.0"

__all__ = [
    "Box", "Region", "InputDependentGain", "LinearDtScs", "UnsupportedModel", "room_model", "step",
    "Dfa", "HorizonSpec", "LabelMap", "reach_avoid_dfa",
    "Grid", "build_grid", "quantize",
    "FiniteMdp", "TruncationPolicy", "abstract", "transition_row",
    "value_iterate", "brute_force_value", "refine_policy",
]
