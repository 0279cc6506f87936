"""Numerical laboratory for multiple SLE driven by Dyson Brownian motion."""
from .conformal import MapChain, SlitElement, HullSampler, apply, invert, boundary_derivative
from .conformal import hcap_mc_oracle, map_out_curve
from .sde import (DrivingPaths, SdeParams, drift_vector, simulate_bessel, simulate_dyson,
                  simulate_dyson_ensemble, simulate_flowline_driver)

__version__ = "0.1.0"

__all__ = [
    "MapChain", "SlitElement", "HullSampler", "apply", "invert", "boundary_derivative",
    "hcap_mc_oracle", "map_out_curve", "DrivingPaths", "SdeParams", "drift_vector",
    "simulate_bessel", "simulate_dyson", "simulate_dyson_ensemble", "simulate_flowline_driver",
]
