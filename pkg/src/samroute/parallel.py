"""Expert-parallel simulation: capacity-limited dispatch and traffic counting.

Communication is counted, not timed. A routed token that has to leave its
home device costs ``dispatch_and_gather`` messages (out to the expert and
back), each carrying ``d_model`` activations.

For flat policies (switch, moe_topk) that cost is paid once per selected
expert living off the token's device. SAM policies pick one group and then
all ``k`` experts inside it, so the combine happens on that device and the
cost is paid at most once per token regardless of ``k``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Sequence, Union

import numpy as np

from .routers import KINDS, SAM_KINDS, BatchRouting, RoutingDecision, Topology
from .tensor import Rng

Decisions = Union[BatchRouting, Sequence[RoutingDecision]]


@dataclass(frozen=True)
class CommModel:
    d_model: int
    bytes_per_element: int = 4
    dispatch_and_gather: int = 2

    def __post_init__(self):
        if self.d_model < 1 or self.bytes_per_element < 1 or self.dispatch_and_gather < 1:
            raise ValueError("CommModel fields must be positive")

    @property
    def bytes_per_message(self) -> int:
        return self.d_model * self.bytes_per_element


@dataclass
class DispatchPlan:
    """Token-to-expert assignments after capacity clipping.

    ``assignments[t]`` lists ``(expert, combine_weight)`` pairs that fit;
    ``overflow[t]`` lists the experts whose buffer was already full.
    ``survived`` is the same information as a (n_tokens, k) boolean mask.
    """

    assignments: list[list[tuple[int, float]]]
    overflow: list[list[int]]
    expert_counts: np.ndarray
    capacity: int
    survived: np.ndarray

    @property
    def n_tokens(self) -> int:
        return len(self.assignments)

    @property
    def n_assigned(self) -> int:
        return int(self.expert_counts.sum())

    @property
    def n_overflow(self) -> int:
        return sum(len(o) for o in self.overflow)


@dataclass
class CommReport:
    policy: str
    k: int
    n_tokens: int
    cross_device_messages: int
    cross_device_bytes: int
    per_device_load: np.ndarray


def expert_capacity(capacity_factor: float, n_tokens: int, k: int, n_expert: int) -> int:
    if not capacity_factor > 0:
        raise ValueError("capacity_factor must be > 0")
    if math.isinf(capacity_factor):
        return n_tokens * k
    return math.ceil(capacity_factor * n_tokens * k / n_expert)


def capacity_mask(experts: np.ndarray, n_expert: int, capacity: int) -> np.ndarray:
    """Boolean (B, k) mask of slots that fit, filling buffers in batch order.

    Slots are visited token by token, and within a token in selection order;
    the first ``capacity`` visits to an expert survive.
    """
    flat = experts.ravel()
    order = np.argsort(flat, kind="stable")
    sorted_e = flat[order]
    starts = np.searchsorted(sorted_e, np.arange(n_expert))
    rank = np.empty(flat.size, dtype=np.int64)
    rank[order] = np.arange(flat.size) - starts[sorted_e]
    return (rank < capacity).reshape(experts.shape)


def _as_batch(decisions: Decisions, kind: str = "switch") -> BatchRouting:
    if isinstance(decisions, BatchRouting):
        return decisions
    return BatchRouting.from_decisions(kind, list(decisions))


def plan_dispatch(decisions: Decisions, topo: Topology, capacity_factor: float) -> DispatchPlan:
    r = _as_batch(decisions)
    n, k = r.experts.shape
    cap = expert_capacity(capacity_factor, n, k, topo.n_expert)
    if n == 0:
        return DispatchPlan([], [], np.zeros(topo.n_expert, dtype=np.int64), cap,
                            np.zeros((0, k), dtype=bool))
    mask = capacity_mask(r.experts, topo.n_expert, cap)
    assignments, overflow = [], []
    for t in range(n):
        kept, dropped = [], []
        for j in range(k):
            e = int(r.experts[t, j])
            if mask[t, j]:
                kept.append((e, float(r.weights[t, j])))
            else:
                dropped.append(e)
        assignments.append(kept)
        overflow.append(dropped)
    counts = np.bincount(r.experts[mask], minlength=topo.n_expert).astype(np.int64)
    return DispatchPlan(assignments, overflow, counts, cap, mask)


def comm_cost(decisions: Decisions, topo: Topology, model: CommModel, policy: str,
              local_groups: Optional[np.ndarray] = None) -> CommReport:
    """Count cross-device messages and bytes for one batch of routing decisions."""
    if policy not in KINDS:
        raise ValueError(f"unknown policy {policy!r}")
    r = _as_batch(decisions, policy)
    n, k = r.experts.shape
    home = topo.local_groups(n) if local_groups is None else np.asarray(local_groups)
    expert_groups = r.experts // topo.experts_per_group
    if policy in SAM_KINDS:
        if n and not np.all(expert_groups == r.groups[:, None]):
            raise ValueError("SAM decision selects experts outside its group")
        remote = int(np.count_nonzero(r.groups != home))
        load = np.bincount(r.groups, minlength=topo.n_groups).astype(np.float64)
    else:
        remote = int(np.count_nonzero(expert_groups != home[:, None]))
        load = np.bincount(expert_groups.ravel(), minlength=topo.n_groups).astype(np.float64)
    messages = model.dispatch_and_gather * remote
    return CommReport(policy, k, n, messages, messages * model.bytes_per_message, load)


@dataclass
class LoadStats:
    expert_fractions: np.ndarray
    group_fractions: np.ndarray
    entropy: float
    group_entropy: float


def _entropy(f: np.ndarray) -> float:
    nz = f[f > 0]
    return float(-np.sum(nz * np.log(nz))) + 0.0  # no negative zero


def load_stats(plan: DispatchPlan, topo: Topology) -> LoadStats:
    """Per-expert and per-group dispatch fractions with entropies in nats."""
    total = plan.n_assigned
    if total == 0:
        raise ValueError("load_stats needs a plan with at least one assignment")
    f = plan.expert_counts / total
    fg = f.reshape(topo.n_groups, topo.experts_per_group).sum(axis=1)
    return LoadStats(f, fg, _entropy(f), _entropy(fg))


# ---------------------------------------------------------------------------
# synthetic routing for traffic sweeps


def synthetic_routing(policy: str, topo: Topology, n_tokens: int, k: int, rng: Rng) -> BatchRouting:
    """Uniformly random routing decisions for ``policy``.

    Group choices come from ``rng.child(0)`` and do not depend on ``k`` or on
    the policy, so SAM sweeps over ``k`` see identical group selections.
    SAM experts are ``k`` distinct experts of the chosen group; flat experts
    are ``k`` distinct experts drawn uniformly from all of them.
    Combine weights are uniform ``1/k`` (they do not affect traffic).
    """
    if policy == "switch" and k != 1:
        raise ValueError("switch routing activates exactly one expert")
    if policy in SAM_KINDS and k > topo.experts_per_group:
        raise ValueError(f"k={k} exceeds experts_per_group={topo.experts_per_group}")
    if policy not in SAM_KINDS and k > topo.n_expert:
        raise ValueError(f"k={k} exceeds n_expert={topo.n_expert}")
    weights = np.full((n_tokens, k), 1.0 / k)
    if policy in SAM_KINDS:
        groups = rng.child(0).integers(topo.n_groups, n_tokens)
        local = _distinct(rng.child(1), n_tokens, topo.experts_per_group, k)
        experts = groups[:, None] * topo.experts_per_group + local
        return BatchRouting(policy, experts, weights, groups)
    experts = _distinct(rng.child(2 + k), n_tokens, topo.n_expert, k)
    return BatchRouting(policy, experts, weights, np.full(n_tokens, -1))


def _distinct(rng: Rng, n: int, pool: int, k: int) -> np.ndarray:
    # k draws without replacement per row: argsort of uniform keys
    if n == 0:
        return np.zeros((0, k), dtype=np.int64)
    keys = rng.uniform(n * pool).reshape(n, pool)
    return np.argsort(keys, axis=1, kind="stable")[:, :k].astype(np.int64)
