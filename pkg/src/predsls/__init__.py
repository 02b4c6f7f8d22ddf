"""Distributed predictive control on networked linear systems.

Locality-constrained closed-loop maps that use disturbance predictions,
their per-agent realization, baseline controllers and regret analysis.
"""

from .control import (CommunicationError, PerAgentPredSLSController, PredSLSController, make_controller,
                      parse_controller)
from .lqr import LocalizabilityError, RiccatiError, solve_dare
from .model import (DisturbanceSpec, ModelError, NetworkedSystem, build_chain_example, build_graph_system,
                    generate_disturbances, validate)
from .sim import estimate_regret, optimal_cost, rollout
from .synthesis import ClosedLoopMaps, KKTError, synthesize
from .topology import Topology

__version__ = "0.1.0"

__all__ = [
    "ClosedLoopMaps",
    "CommunicationError",
    "DisturbanceSpec",
    "KKTError",
    "LocalizabilityError",
    "ModelError",
    "NetworkedSystem",
    "PerAgentPredSLSController",
    "PredSLSController",
    "RiccatiError",
    "Topology",
    "build_chain_example",
    "build_graph_system",
    "estimate_regret",
    "generate_disturbances",
    "make_controller",
    "optimal_cost",
    "parse_controller",
    "rollout",
    "solve_dare",
    "synthesize",
    "validate",
]
