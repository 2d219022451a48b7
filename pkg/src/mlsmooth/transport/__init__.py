"""Monotone triangular transport maps and the multilevel transport smoother."""

from mlsmooth.transport.basis import BasisSpec
from mlsmooth.transport.fixed_point import (
    FixedPointMapPair,
    ReapproximationWarning,
    TransportConfig,
    compose_and_reapproximate,
    coupled_sample_pair,
    fixed_point_maps,
    lag1_maps,
    lag1_pushforward,
    multilevel_transport_estimate,
)
from mlsmooth.transport.maps import MonotoneTriangularMap, leading, map_from_text, map_to_text
from mlsmooth.transport.objective import KLObjective, NonFiniteTargetError, kl_objective
from mlsmooth.transport.optimize import NewtonConfig, NonConvergenceError, OptimizeResult, optimize_map
from mlsmooth.transport.quadrature import QuadratureRule, gauss_hermite
from mlsmooth.transport.targets import TargetDensity, build_fixedpoint_target, build_lag1_target

__all__ = [
    "BasisSpec",
    "FixedPointMapPair",
    "ReapproximationWarning",
    "TransportConfig",
    "compose_and_reapproximate",
    "coupled_sample_pair",
    "fixed_point_maps",
    "lag1_maps",
    "lag1_pushforward",
    "multilevel_transport_estimate",
    "MonotoneTriangularMap",
    "leading",
    "map_from_text",
    "map_to_text",
    "KLObjective",
    "NonFiniteTargetError",
    "kl_objective",
    "NewtonConfig",
    "NonConvergenceError",
    "OptimizeResult",
    "optimize_map",
    "QuadratureRule",
    "gauss_hermite",
    "TargetDensity",
    "build_fixedpoint_target",
    "build_lag1_target",
]
