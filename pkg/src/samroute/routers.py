"""Routing policies: noisy top-k, Switch, and the two hierarchical SAM routers.

Every policy exists twice. The per-token functions (``route_switch`` and
friends) are direct transcriptions built from :mod:`samroute.tensor` kernels
and return a :class:`RoutingDecision`. :func:`route_batch` is the vectorised
path used for training; it returns a :class:`BatchRouting` that carries the
probabilities needed by :func:`router_backward`. The two paths are tested
against each other.

Ties at every argmax / top-k break towards the lower index.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from .tensor import Rng, as_vector, gaussian, matvec, softmax, softmax_rows, topk, topk_rows

KINDS = ("switch", "moe_topk", "sam_shared", "sam_nonshared")
SAM_KINDS = ("sam_shared", "sam_nonshared")


@dataclass(frozen=True)
class Topology:
    """Experts laid out as ``n_groups`` devices of ``experts_per_group`` each.

    Global expert ``i`` lives in group ``i // experts_per_group``.
    ``local_group`` pins every token to one home device for communication
    accounting; ``None`` means tokens are sharded round-robin (token ``t`` is
    local to group ``t % n_groups``).
    """

    n_groups: int
    experts_per_group: int
    local_group: Optional[int] = None

    def __post_init__(self):
        if self.n_groups < 1 or self.experts_per_group < 1:
            raise ValueError("n_groups and experts_per_group must be >= 1")
        if self.local_group is not None and not 0 <= self.local_group < self.n_groups:
            raise ValueError(f"local_group {self.local_group} outside [0, {self.n_groups})")

    @property
    def n_expert(self) -> int:
        return self.n_groups * self.experts_per_group

    def group_of(self, expert):
        return np.asarray(expert) // self.experts_per_group

    def group_slice(self, group: int) -> slice:
        lo = group * self.experts_per_group
        return slice(lo, lo + self.experts_per_group)

    def local_groups(self, n_tokens: int) -> np.ndarray:
        if self.local_group is not None:
            return np.full(n_tokens, self.local_group, dtype=np.int64)
        return np.arange(n_tokens, dtype=np.int64) % self.n_groups


@dataclass
class RouterParams:
    """Router weights for one policy.

    ``w_global`` (n_expert x d_model) serves switch, moe_topk and sam_shared.
    ``w_group`` (n_groups x d_model) and ``w_mixture``
    (n_groups x experts_per_group x d_model) serve sam_nonshared.
    """

    kind: str
    w_global: Optional[np.ndarray] = None
    w_group: Optional[np.ndarray] = None
    w_mixture: Optional[np.ndarray] = None
    noise_scale: float = 0.0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown router kind {self.kind!r}; expected one of {KINDS}")
        if self.noise_scale < 0 or not np.isfinite(self.noise_scale):
            raise ValueError("noise_scale must be finite and non-negative")
        if self.kind == "sam_nonshared":
            if self.w_group is None or self.w_mixture is None or self.w_global is not None:
                raise ValueError("sam_nonshared needs w_group and w_mixture only")
            self.w_group = np.asarray(self.w_group, dtype=np.float64)
            self.w_mixture = np.asarray(self.w_mixture, dtype=np.float64)
            if self.w_group.ndim != 2 or self.w_mixture.ndim != 3:
                raise ValueError("w_group must be 2-D and w_mixture 3-D")
            if self.w_mixture.shape[0] != self.w_group.shape[0] or self.w_mixture.shape[2] != self.w_group.shape[1]:
                raise ValueError("w_mixture must be (n_groups, experts_per_group, d_model)")
        else:
            if self.w_global is None or self.w_group is not None or self.w_mixture is not None:
                raise ValueError(f"{self.kind} needs w_global only")
            self.w_global = np.asarray(self.w_global, dtype=np.float64)
            if self.w_global.ndim != 2:
                raise ValueError("w_global must be 2-D")

    @property
    def d_model(self) -> int:
        w = self.w_group if self.kind == "sam_nonshared" else self.w_global
        return w.shape[1]

    def check(self, topo: Topology) -> None:
        if self.kind == "sam_nonshared":
            want = (topo.n_groups, topo.experts_per_group, self.d_model)
            if self.w_mixture.shape != want:
                raise ValueError(f"w_mixture shape {self.w_mixture.shape} does not match topology {want}")
        elif self.w_global.shape[0] != topo.n_expert:
            raise ValueError(f"w_global has {self.w_global.shape[0]} rows, topology has {topo.n_expert} experts")

    def arrays(self) -> dict[str, np.ndarray]:
        if self.kind == "sam_nonshared":
            return {"w_group": self.w_group, "w_mixture": self.w_mixture}
        return {"w_global": self.w_global}


def init_router(kind: str, topo: Topology, d_model: int, rng: Optional[Rng] = None,
                std: float = 0.0, noise_scale: float = 0.0) -> RouterParams:
    """Gaussian(0, std^2) router weights; ``std=0`` gives an all-zero router."""

    def draw(*shape):
        if std == 0.0 or rng is None:
            return np.zeros(shape)
        return std * gaussian(rng, int(np.prod(shape))).reshape(shape)

    if kind == "sam_nonshared":
        return RouterParams(kind, w_group=draw(topo.n_groups, d_model),
                            w_mixture=draw(topo.n_groups, topo.experts_per_group, d_model),
                            noise_scale=noise_scale)
    return RouterParams(kind, w_global=draw(topo.n_expert, d_model), noise_scale=noise_scale)


@dataclass
class RoutingDecision:
    """Routing outcome for a single token.

    ``expert_scores`` covers all experts for flat and shared routers but only
    the selected group's experts for sam_nonshared. ``group_scores`` is set
    for SAM policies only; ``selected_group`` is ``None`` for flat routers.
    """

    selected_group: Optional[int]
    selected_experts: list[int]
    combine_weights: list[float]
    expert_scores: np.ndarray
    group_scores: Optional[np.ndarray] = None

    @property
    def k(self) -> int:
        return len(self.selected_experts)


def _check_h(params: RouterParams, h) -> np.ndarray:
    h = as_vector(h)
    if h.size != params.d_model:
        raise ValueError(f"hidden state has length {h.size}, router expects {params.d_model}")
    return h


def _expect(params: RouterParams, kind: str) -> None:
    if params.kind != kind:
        raise ValueError(f"router params are {params.kind!r}, expected {kind!r}")


def route_switch(params: RouterParams, h) -> RoutingDecision:
    _expect(params, "switch")
    h = _check_h(params, h)
    p = softmax(matvec(params.w_global, h))
    (i,) = topk(p, 1)
    return RoutingDecision(None, [i], [float(p[i])], p)


def route_moe_topk(params: RouterParams, h, k: int, rng: Optional[Rng] = None,
                   train_mode: bool = False) -> RoutingDecision:
    _expect(params, "moe_topk")
    h = _check_h(params, h)
    logits = matvec(params.w_global, h)
    if not 1 <= k <= logits.size:
        raise ValueError(f"k={k} out of range for {logits.size} experts")
    clean = softmax(logits)
    if train_mode and params.noise_scale > 0:
        if rng is None:
            raise ValueError("train-mode noisy routing needs an Rng")
        logits = logits + params.noise_scale * gaussian(rng, logits.size)
    sel = topk(logits, k)
    w = softmax(logits[sel])
    return RoutingDecision(None, sel, [float(x) for x in w], clean)


def _check_sam(topo: Topology, k: int) -> None:
    if not 1 <= k <= topo.experts_per_group:
        raise ValueError(f"k={k} must be in [1, experts_per_group={topo.experts_per_group}]")


def route_sam_shared(params: RouterParams, topo: Topology, h, k: int) -> RoutingDecision:
    _expect(params, "sam_shared")
    params.check(topo)
    _check_sam(topo, k)
    h = _check_h(params, h)
    p = softmax(matvec(params.w_global, h))
    return sam_shared_from_scores(p, topo, k)


def sam_shared_from_scores(p, topo: Topology, k: int) -> RoutingDecision:
    """Shared-router selection given the global expert probabilities ``p``."""
    p = as_vector(p)
    g = np.zeros(topo.n_groups)
    local_top = []
    for w in range(topo.n_groups):
        block = p[topo.group_slice(w)]
        idx = topk(block, k)
        local_top.append(idx)
        s = 0.0
        for i in idx:
            s += block[i]
        g[w] = s
    (w,) = topk(g, 1)
    base = w * topo.experts_per_group
    sel = [base + i for i in local_top[w]]
    return RoutingDecision(w, sel, [float(p[i]) for i in sel], p, g)


def route_sam_nonshared(params: RouterParams, topo: Topology, h, k: int) -> RoutingDecision:
    _expect(params, "sam_nonshared")
    params.check(topo)
    _check_sam(topo, k)
    h = _check_h(params, h)
    g = softmax(matvec(params.w_group, h))
    (w,) = topk(g, 1)
    q = softmax(matvec(params.w_mixture[w], h))
    local = topk(q, k)
    sel = [w * topo.experts_per_group + i for i in local]
    weights = [float(g[w] * q[i]) for i in local]
    return RoutingDecision(w, sel, weights, q, g)


def route(params: RouterParams, topo: Topology, h, k: int, rng: Optional[Rng] = None,
          train_mode: bool = False) -> RoutingDecision:
    """Dispatch to the per-token router matching ``params.kind``."""
    if params.kind == "switch":
        if k != 1:
            raise ValueError("switch routing activates exactly one expert")
        return route_switch(params, h)
    if params.kind == "moe_topk":
        return route_moe_topk(params, h, k, rng, train_mode)
    if params.kind == "sam_shared":
        return route_sam_shared(params, topo, h, k)
    return route_sam_nonshared(params, topo, h, k)


# ---------------------------------------------------------------------------
# batched path


@dataclass
class BatchRouting:
    """Routing for a batch of ``B`` tokens.

    ``experts`` (B, k) are global expert ids in selection order and
    ``weights`` (B, k) their combine weights. ``groups`` (B,) is the selected
    group, or -1 for flat routers. ``probs`` (B, n_expert) is the full
    noise-free softmax over experts (flat and shared routers);
    ``group_probs`` (B, n_groups) and ``mixture_probs``
    (B, n_groups, experts_per_group) are set for sam_nonshared.
    ``noise`` (B, n_expert) holds the logit noise actually added (moe_topk).
    """

    kind: str
    experts: np.ndarray
    weights: np.ndarray
    groups: np.ndarray
    probs: Optional[np.ndarray] = None
    group_probs: Optional[np.ndarray] = None
    mixture_probs: Optional[np.ndarray] = None
    noise: Optional[np.ndarray] = None
    group_scores: Optional[np.ndarray] = field(default=None, repr=False)

    @property
    def n_tokens(self) -> int:
        return self.experts.shape[0]

    @property
    def k(self) -> int:
        return self.experts.shape[1]

    def selection(self) -> "BatchRouting":
        """Copy carrying only the discrete choices (used to freeze routing)."""
        return BatchRouting(self.kind, self.experts.copy(), self.weights.copy(), self.groups.copy(),
                            noise=None if self.noise is None else self.noise.copy())

    def same_selection(self, other: "BatchRouting") -> bool:
        return (np.array_equal(self.experts, other.experts)
                and np.array_equal(self.groups, other.groups))

    def decisions(self, topo: Topology) -> list[RoutingDecision]:
        out = []
        for b in range(self.n_tokens):
            g = int(self.groups[b])
            if self.kind == "sam_nonshared":
                scores = self.mixture_probs[b, g]
                gs = self.group_probs[b]
            else:
                scores = self.probs[b] if self.probs is not None else np.array([])
                gs = None if self.group_scores is None else self.group_scores[b]
            out.append(RoutingDecision(None if g < 0 else g,
                                       [int(e) for e in self.experts[b]],
                                       [float(x) for x in self.weights[b]], scores, gs))
        return out

    @classmethod
    def from_decisions(cls, kind: str, decisions: list[RoutingDecision], k: Optional[int] = None) -> "BatchRouting":
        if not decisions:
            k = k or 1
            return cls(kind, np.zeros((0, k), dtype=np.int64), np.zeros((0, k)),
                       np.zeros(0, dtype=np.int64))
        experts = np.array([d.selected_experts for d in decisions], dtype=np.int64)
        weights = np.array([d.combine_weights for d in decisions], dtype=np.float64)
        groups = np.array([-1 if d.selected_group is None else d.selected_group for d in decisions],
                          dtype=np.int64)
        return cls(kind, experts, weights, groups)


def route_batch(params: RouterParams, topo: Topology, H: np.ndarray, k: int,
                rng: Optional[Rng] = None, train_mode: bool = False,
                fixed: Optional[BatchRouting] = None) -> BatchRouting:
    """Route a (B, d_model) batch. With ``fixed`` the discrete choices (and any
    noise) are taken from it and only the scores are recomputed."""
    params.check(topo)
    B = H.shape[0]
    kind = params.kind
    if kind == "switch" and k != 1:
        raise ValueError("switch routing activates exactly one expert")
    if kind in SAM_KINDS:
        _check_sam(topo, k)
    elif not 1 <= k <= topo.n_expert:
        raise ValueError(f"k={k} out of range for {topo.n_expert} experts")
    rows = np.arange(B)[:, None]

    if kind == "sam_nonshared":
        g = softmax_rows(H @ params.w_group.T)
        q = softmax_rows(np.einsum("bd,wed->bwe", H, params.w_mixture))
        if fixed is None:
            groups = np.argmax(g, axis=1)
            local = topk_rows(q[np.arange(B), groups], k)
            experts = groups[:, None] * topo.experts_per_group + local
        else:
            groups, experts = fixed.groups, fixed.experts
            local = experts - groups[:, None] * topo.experts_per_group
        weights = g[np.arange(B), groups][:, None] * q[rows, groups[:, None], local]
        return BatchRouting(kind, experts, weights, groups, group_probs=g, mixture_probs=q,
                            group_scores=g)

    logits = H @ params.w_global.T
    p = softmax_rows(logits)
    noise = None
    if kind == "moe_topk":
        if fixed is not None:
            noise = fixed.noise
        elif train_mode and params.noise_scale > 0:
            if rng is None:
                raise ValueError("train-mode noisy routing needs an Rng")
            noise = params.noise_scale * gaussian(rng, logits.size).reshape(logits.shape)
        noisy = logits if noise is None else logits + noise
        experts = topk_rows(noisy, k) if fixed is None else fixed.experts
        weights = softmax_rows(noisy[rows, experts])
        return BatchRouting(kind, experts, weights, np.full(B, -1), probs=p, noise=noise)

    if kind == "switch":
        experts = topk_rows(p, 1) if fixed is None else fixed.experts
        return BatchRouting(kind, experts, p[rows, experts], np.full(B, -1), probs=p)

    # sam_shared
    G, epg = topo.n_groups, topo.experts_per_group
    blocks = p.reshape(B, G, epg)
    local_all = topk_rows(blocks, k)
    top_vals = np.take_along_axis(blocks, local_all, axis=2)
    gscore = np.zeros((B, G))
    for j in range(k):  # same accumulation order as the per-token path
        gscore += top_vals[:, :, j]
    if fixed is None:
        groups = np.argmax(gscore, axis=1)
        experts = groups[:, None] * epg + local_all[np.arange(B), groups]
    else:
        groups, experts = fixed.groups, fixed.experts
    return BatchRouting(kind, experts, p[rows, experts], groups, probs=p, group_scores=gscore)


def _softmax_backward(p: np.ndarray, dp: np.ndarray) -> np.ndarray:
    return p * (dp - np.sum(p * dp, axis=-1, keepdims=True))


def router_backward(params: RouterParams, topo: Topology, H: np.ndarray, r: BatchRouting,
                    d_weights: np.ndarray, d_probs: Optional[np.ndarray] = None,
                    d_group_probs: Optional[np.ndarray] = None,
                    d_mixture_probs: Optional[np.ndarray] = None):
    """Backpropagate into the router.

    ``d_weights`` is dL/d(combine weights) with shape (B, k). The optional
    ``d_*`` arrays are gradients with respect to the probability tensors of
    the same name on ``r`` (from auxiliary losses). Returns ``(grads, dH)``
    where ``grads`` is keyed like :meth:`RouterParams.arrays`.
    """
    B = H.shape[0]
    rows = np.arange(B)[:, None]
    if params.kind == "sam_nonshared":
        g, q = r.group_probs, r.mixture_probs
        dg = np.zeros_like(g) if d_group_probs is None else d_group_probs.copy()
        dq = np.zeros_like(q) if d_mixture_probs is None else d_mixture_probs.copy()
        grp = r.groups
        local = r.experts - grp[:, None] * topo.experts_per_group
        q_sel = q[rows, grp[:, None], local]
        g_sel = g[np.arange(B), grp]
        dg[np.arange(B), grp] += np.sum(d_weights * q_sel, axis=1)
        np.add.at(dq, (np.repeat(np.arange(B), r.k), np.repeat(grp, r.k), local.ravel()),
                  (d_weights * g_sel[:, None]).ravel())
        dlg = _softmax_backward(g, dg)
        dlq = _softmax_backward(q, dq)
        grads = {"w_group": dlg.T @ H, "w_mixture": np.einsum("bwe,bd->wed", dlq, H)}
        dH = dlg @ params.w_group + np.einsum("bwe,wed->bd", dlq, params.w_mixture)
        return grads, dH

    p = r.probs
    dp = np.zeros_like(p) if d_probs is None else d_probs.copy()
    if params.kind == "moe_topk":
        w = r.weights
        dl_sel = w * (d_weights - np.sum(w * d_weights, axis=1, keepdims=True))
        dl = _softmax_backward(p, dp)
        np.add.at(dl, (np.repeat(np.arange(B), r.k), r.experts.ravel()), dl_sel.ravel())
    else:
        np.add.at(dp, (np.repeat(np.arange(B), r.k), r.experts.ravel()), d_weights.ravel())
        dl = _softmax_backward(p, dp)
    return {"w_global": dl.T @ H}, dl @ params.w_global


def scaled(params: RouterParams, c: float) -> RouterParams:
    """Copy of ``params`` with every weight multiplied by ``c``."""
    if params.kind == "sam_nonshared":
        return replace(params, w_group=params.w_group * c, w_mixture=params.w_mixture * c)
    return replace(params, w_global=params.w_global * c)
