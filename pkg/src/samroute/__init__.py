"""Hierarchical switch-and-mixture expert routing at toy scale."""

from .routers import (
    BatchRouting,
    RouterParams,
    RoutingDecision,
    Topology,
    route_batch,
    route_moe_topk,
    route_sam_nonshared,
    route_sam_shared,
    route_switch,
)
from .tensor import Rng, gaussian, matvec, softmax, topk

__version__ = "0.1.0"
