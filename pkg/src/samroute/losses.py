"""Alignment and load-balance losses for hierarchical routing.

The scalar functions work on one token / one batch summary and are the
reference definitions. :func:`router_aux_losses` evaluates the same losses
over a batch routed by :func:`samroute.routers.route_batch` and returns
their gradients with respect to the router probability tensors, which
:func:`samroute.layer.backward_batch` consumes.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .routers import BatchRouting, RoutingDecision, Topology
from .tensor import as_vector


@dataclass(frozen=True)
class LossWeights:
    alpha_balance: float = 0.01
    alpha_align: float = 0.01

    def __post_init__(self):
        for name in ("alpha_balance", "alpha_align"):
            v = getattr(self, name)
            if not (math.isfinite(v) and v >= 0):
                raise ValueError(f"{name} must be finite and >= 0, got {v}")


def align_hinge_loss(expert_scores, selected: RoutingDecision, topo: Topology) -> float:
    """Sum over experts outside the chosen group of ``max(p_e - p_K, 0)``.

    ``p_K`` is the lowest score among the selected experts (the k-th highest
    selected score).
    """
    p = as_vector(expert_scores)
    if not selected.selected_experts:
        raise ValueError("no experts selected")
    if p.size != topo.n_expert:
        raise ValueError("hinge loss needs scores over all experts")
    g = selected.selected_group
    if g is None:
        raise ValueError("hinge loss needs a grouped (SAM) decision")
    p_k = min(p[i] for i in selected.selected_experts)
    inside = set(range(topo.group_slice(g).start, topo.group_slice(g).stop))
    total = 0.0
    for e in range(topo.n_expert):
        if e not in inside:
            total += max(p[e] - p_k, 0.0)
    return total


def align_group_nll(group_scores, selected_group: int) -> float:
    """``-log(g_sel / sum(g))``; the sum is kept even when ``g`` is normalised."""
    g = np.asarray(group_scores, dtype=np.float64)
    if g.ndim != 1 or g.size == 0:
        raise ValueError("group_scores must be a non-empty vector")
    if not 0 <= selected_group < g.size:
        raise ValueError(f"selected_group {selected_group} out of range")
    if g[selected_group] <= 0:
        raise ValueError("selected group score must be positive")
    return -math.log(g[selected_group] / g.sum())


def load_balance_loss(f, P) -> float:
    """``N * sum_i f_i * P_i``; equals 1 when both are uniform."""
    f = np.asarray(f, dtype=np.float64)
    P = np.asarray(P, dtype=np.float64)
    if f.shape != P.shape or f.ndim != 1:
        raise ValueError(f"length mismatch: f {f.shape} vs P {P.shape}")
    return float(f.size * np.dot(f, P))


@dataclass
class LossBreakdown:
    total: float
    task: float
    align: float
    balance_groups: float
    balance_experts: float


def total_loss(task_loss: float, align_loss: float, balance_losses: Sequence[float],
               weights: LossWeights) -> LossBreakdown:
    bg, be = balance_losses
    total = task_loss + weights.alpha_align * align_loss + weights.alpha_balance * (bg + be)
    return LossBreakdown(total, task_loss, align_loss, bg, be)


# ---------------------------------------------------------------------------
# batched losses with gradients


def hinge_batch(p: np.ndarray, r: BatchRouting, topo: Topology):
    """Mean hinge loss over the batch and its gradient w.r.t. ``p`` (B, n_expert)."""
    B = p.shape[0]
    rows = np.arange(B)
    sel_scores = p[rows[:, None], r.experts]
    kth = r.experts[rows, np.argmin(sel_scores, axis=1)]
    p_k = p[rows, kth]
    outside = (np.arange(topo.n_expert)[None, :] // topo.experts_per_group) != r.groups[:, None]
    diff = p - p_k[:, None]
    active = outside & (diff > 0)  # subgradient 0 at the kink
    value = float(np.sum(np.where(active, diff, 0.0)) / B)
    dp = active / B
    np.add.at(dp, (rows, kth), -active.sum(axis=1) / B)
    return value, dp, active


def group_nll_batch(g: np.ndarray, groups: np.ndarray):
    """Mean of ``-log(g_sel / sum g)`` over the batch and its gradient w.r.t. ``g``."""
    B = g.shape[0]
    rows = np.arange(B)
    g_sel = g[rows, groups]
    s = g.sum(axis=1)
    value = float(np.mean(-np.log(g_sel / s)))
    dg = np.repeat((1.0 / (B * s))[:, None], g.shape[1], axis=1)
    dg[rows, groups] -= 1.0 / (B * g_sel)
    return value, dg


def balance_batch(f: np.ndarray, probs: np.ndarray):
    """``N * sum_i f_i * mean_b probs[b, i]`` and its gradient w.r.t. ``probs``."""
    B, N = probs.shape
    value = float(N * np.dot(f, probs.mean(axis=0)))
    return value, np.broadcast_to(N * f / B, probs.shape).copy()


@dataclass
class ScoreGrads:
    """Gradient of one loss component w.r.t. the router probability tensors."""

    d_probs: Optional[np.ndarray] = None
    d_group_probs: Optional[np.ndarray] = None
    d_mixture_probs: Optional[np.ndarray] = None

    def scaled_add(self, other: "ScoreGrads", c: float) -> None:
        for name in ("d_probs", "d_group_probs", "d_mixture_probs"):
            o = getattr(other, name)
            if o is None or c == 0.0:
                continue
            cur = getattr(self, name)
            setattr(self, name, c * o if cur is None else cur + c * o)


@dataclass
class AuxLosses:
    align: float = 0.0
    balance_groups: float = 0.0
    balance_experts: float = 0.0
    grads: dict = field(default_factory=dict)
    hinge_active: Optional[np.ndarray] = None

    def combined_grads(self, weights: LossWeights) -> ScoreGrads:
        out = ScoreGrads()
        if "align" in self.grads:
            out.scaled_add(self.grads["align"], weights.alpha_align)
        for name in ("balance_groups", "balance_experts"):
            if name in self.grads:
                out.scaled_add(self.grads[name], weights.alpha_balance)
        return out


def dispatch_fractions(r: BatchRouting, topo: Topology):
    """Router-intended (pre-capacity) token fractions per expert and per group."""
    B, k = r.experts.shape
    f_exp = np.bincount(r.experts.ravel(), minlength=topo.n_expert) / (B * k)
    if r.groups.size and r.groups[0] >= 0:
        f_grp = np.bincount(r.groups, minlength=topo.n_groups) / B
    else:
        f_grp = f_exp.reshape(topo.n_groups, topo.experts_per_group).sum(axis=1)
    return f_exp, f_grp


def router_aux_losses(r: BatchRouting, topo: Topology) -> AuxLosses:
    """Alignment and balance losses for a routed batch.

    * flat routers: balance over all experts using the full softmax; no group
      term and no alignment term.
    * sam_shared: hinge alignment on the global scores; group balance on each
      group's probability mass; expert balance on the global scores.
    * sam_nonshared: group NLL alignment on the Switch Router scores; group
      balance on those scores; expert balance on the joint probability
      ``g_w * p_w,i`` over all experts.
    """
    out = AuxLosses()
    if r.n_tokens == 0:
        return out
    f_exp, f_grp = dispatch_fractions(r, topo)
    B, G, epg = r.n_tokens, topo.n_groups, topo.experts_per_group

    if r.kind in ("switch", "moe_topk"):
        out.balance_experts, dp = balance_batch(f_exp, r.probs)
        out.grads["balance_experts"] = ScoreGrads(d_probs=dp)
        return out

    if r.kind == "sam_shared":
        p = r.probs
        out.align, dp_align, out.hinge_active = hinge_batch(p, r, topo)
        out.grads["align"] = ScoreGrads(d_probs=dp_align)
        mass = p.reshape(B, G, epg).sum(axis=2)
        out.balance_groups, d_mass = balance_batch(f_grp, mass)
        out.grads["balance_groups"] = ScoreGrads(d_probs=np.repeat(d_mass, epg, axis=1))
        out.balance_experts, dp = balance_batch(f_exp, p)
        out.grads["balance_experts"] = ScoreGrads(d_probs=dp)
        return out

    g, q = r.group_probs, r.mixture_probs
    out.align, dg_align = group_nll_batch(g, r.groups)
    out.grads["align"] = ScoreGrads(d_group_probs=dg_align)
    out.balance_groups, dg = balance_batch(f_grp, g)
    out.grads["balance_groups"] = ScoreGrads(d_group_probs=dg)
    joint = (g[:, :, None] * q).reshape(B, G * epg)
    out.balance_experts, dj = balance_batch(f_exp, joint)
    dj = dj.reshape(B, G, epg)
    out.grads["balance_experts"] = ScoreGrads(d_group_probs=np.sum(dj * q, axis=2),
                                              d_mixture_probs=dj * g[:, :, None])
    return out
