"""Distribution flows of finite positivity preserving Markov semigroups.

Exact linear-algebra oracles and importance-weighted path simulation for
generators that may create mass, plus the stopping-time, additive
functional and optional-measure layers built on them.
"""

from .errors import (BetaTooSmall, BeyondHorizon, Censored, DimensionMismatch, FlowlabError,
                     HorizonOverflow, InvalidModel, NonMetzler, NotExcessive, NotSolvable,
                     NotStrictlyPositive, ScenarioError, UnknownCheck, WitnessFound)
from .flows import CylinderFunctional, FlowQuery, flow_exact, flow_mc
from .htransform import build_h_transform, q_kernel
from .model import make_bundle
from .semigroup import engine_for

__all__ = [
    "BetaTooSmall", "BeyondHorizon", "Censored", "CylinderFunctional", "DimensionMismatch",
    "FlowQuery", "FlowlabError", "HorizonOverflow", "InvalidModel", "NonMetzler", "NotExcessive",
    "NotSolvable", "NotStrictlyPositive", "ScenarioError", "UnknownCheck", "WitnessFound",
    "build_h_transform", "engine_for", "flow_exact", "flow_mc", "make_bundle", "q_kernel",
]
