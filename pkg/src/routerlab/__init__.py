"""Mixture-of-experts routing laboratory."""

from .errors import FormatError, ParameterError, RouterLabError, ShapeError
from .moe import ExpertFfn, MoeLayer, RoutingDecision, aux_loss, moe_forward, select_topk
from .routers import ROUTER_NAMES, Router, RouterConfig, build_router, param_count

__version__ = "0.1.0"

__all__ = [
    "ROUTER_NAMES",
    "ExpertFfn",
    "FormatError",
    "MoeLayer",
    "ParameterError",
    "Router",
    "RouterConfig",
    "RouterLabError",
    "RoutingDecision",
    "ShapeError",
    "aux_loss",
    "build_router",
    "moe_forward",
    "param_count",
    "select_topk",
]
