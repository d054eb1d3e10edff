"""Expert FFNs and the sparse layer built on top of a router.

An expert is ``w_out @ relu(w_in @ h)`` with no biases. The layer output is
the combine-weighted sum of the selected experts' outputs; slots that
overflowed their expert's capacity contribute nothing.

Backward treats the discrete selection as fixed: gradients flow through the
combine weights into the router and through the selected experts, never
through the choice of indices.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import routers
from .parallel import capacity_mask, expert_capacity
from .routers import BatchRouting, RouterParams, RoutingDecision, Topology
from .tensor import Rng, as_vector, gaussian, matvec


@dataclass
class ExpertParams:
    """One FFN expert; ``w_in`` is (d_ffn, d_model), ``w_out`` (d_model, d_ffn)."""

    w_in: np.ndarray
    w_out: np.ndarray

    def __post_init__(self):
        if self.w_in.ndim != 2 or self.w_out.shape != self.w_in.shape[::-1]:
            raise ValueError(f"inconsistent expert shapes {self.w_in.shape} / {self.w_out.shape}")


def relu(x):
    return np.maximum(x, 0.0)


def expert_forward(e: ExpertParams, h) -> np.ndarray:
    h = as_vector(h)
    if h.size != e.w_in.shape[1]:
        raise ValueError(f"expert expects d_model={e.w_in.shape[1]}, got {h.size}")
    return matvec(e.w_out, relu(matvec(e.w_in, h)))


@dataclass
class SamLayer:
    """A sparse expert layer: router, stacked expert weights and ``k``.

    ``w_in`` is (n_expert, d_ffn, d_model) and ``w_out`` is
    (n_expert, d_model, d_ffn); expert ``i`` is ``(w_in[i], w_out[i])``.
    """

    topo: Topology
    router: RouterParams
    w_in: np.ndarray
    w_out: np.ndarray
    k: int

    def __post_init__(self):
        self.router.check(self.topo)
        E = self.topo.n_expert
        if self.w_in.ndim != 3 or self.w_in.shape[0] != E:
            raise ValueError(f"w_in must be ({E}, d_ffn, d_model), got {self.w_in.shape}")
        if self.w_out.shape != (E, self.w_in.shape[2], self.w_in.shape[1]):
            raise ValueError(f"w_out shape {self.w_out.shape} inconsistent with w_in {self.w_in.shape}")
        if self.w_in.shape[2] != self.router.d_model:
            raise ValueError("router and experts disagree on d_model")
        if self.router.kind == "switch" and self.k != 1:
            raise ValueError("switch routing requires k=1")
        if self.router.kind in routers.SAM_KINDS and not 1 <= self.k <= self.topo.experts_per_group:
            raise ValueError(f"k={self.k} must be in [1, experts_per_group={self.topo.experts_per_group}]")
        if not 1 <= self.k <= E:
            raise ValueError(f"k={self.k} out of range for {E} experts")

    @property
    def d_model(self) -> int:
        return self.w_in.shape[2]

    @property
    def d_ffn(self) -> int:
        return self.w_in.shape[1]

    @property
    def experts(self) -> list[ExpertParams]:
        return [ExpertParams(self.w_in[i], self.w_out[i]) for i in range(self.topo.n_expert)]

    def params(self) -> dict[str, np.ndarray]:
        """Live views of every trainable array, keyed by a stable name."""
        out = {f"router.{k}": v for k, v in self.router.arrays().items()}
        out["w_in"] = self.w_in
        out["w_out"] = self.w_out
        return out

    def n_params(self) -> int:
        return sum(v.size for v in self.params().values())


def init_layer(kind: str, topo: Topology, d_model: int, d_ffn: int, k: int, rng: Rng,
               router_std: float = 0.0, noise_scale: float = 0.0) -> SamLayer:
    """He-style expert init (``w_in`` std sqrt(2/d_model), ``w_out`` std sqrt(1/d_ffn))."""
    E = topo.n_expert
    router = routers.init_router(kind, topo, d_model, rng.child(0), router_std, noise_scale)
    er = rng.child(1)
    w_in = np.sqrt(2.0 / d_model) * gaussian(er, E * d_ffn * d_model).reshape(E, d_ffn, d_model)
    w_out = np.sqrt(1.0 / d_ffn) * gaussian(er, E * d_model * d_ffn).reshape(E, d_model, d_ffn)
    return SamLayer(topo, router, w_in, w_out, k)


@dataclass
class LayerCache:
    H: np.ndarray
    routing: BatchRouting
    survived: np.ndarray
    z: np.ndarray
    a: np.ndarray
    out: np.ndarray
    signature: tuple

    @property
    def effective_weights(self) -> np.ndarray:
        return self.routing.weights * self.survived


def forward_batch(layer: SamLayer, H: np.ndarray, rng: Optional[Rng] = None, train_mode: bool = False,
                  capacity_factor: float = float("inf"), fixed: Optional[BatchRouting] = None,
                  fixed_survived: Optional[np.ndarray] = None):
    """Forward a (B, d_model) batch. Returns ``(Y, cache)``.

    ``fixed`` / ``fixed_survived`` freeze the routing selection and the
    capacity outcome (used by finite-difference checks).
    """
    H = np.asarray(H, dtype=np.float64)
    if H.ndim != 2 or H.shape[1] != layer.d_model:
        raise ValueError(f"expected (B, {layer.d_model}) inputs, got {H.shape}")
    r = routers.route_batch(layer.router, layer.topo, H, layer.k, rng, train_mode, fixed)
    B, k = r.experts.shape
    if fixed_survived is not None:
        survived = fixed_survived
    else:
        cap = expert_capacity(capacity_factor, B, k, layer.topo.n_expert)
        survived = capacity_mask(r.experts, layer.topo.n_expert, cap)
    z = np.einsum("bkfd,bd->bkf", layer.w_in[r.experts], H)
    a = relu(z)
    out = np.einsum("bkdf,bkf->bkd", layer.w_out[r.experts], a)
    c = r.weights * survived
    Y = np.einsum("bk,bkd->bd", c, out)
    cache = LayerCache(H, r, survived, z, a, out, (layer.topo, layer.router.kind, layer.w_in.shape, B))
    return Y, cache


def backward_batch(layer: SamLayer, cache: LayerCache, dY: np.ndarray,
                   d_probs=None, d_group_probs=None, d_mixture_probs=None):
    """Gradients of a scalar loss given ``dY = dL/dY``.

    The optional ``d_*`` arguments add gradients with respect to the
    router's probability tensors (auxiliary losses). Returns
    ``(grads, dH)`` with ``grads`` keyed like :meth:`SamLayer.params`.
    Experts that received no surviving slot get exact zeros.
    """
    if cache.signature != (layer.topo, layer.router.kind, layer.w_in.shape, cache.H.shape[0]):
        raise ValueError("cache was produced by a different layer or batch")
    dY = np.asarray(dY, dtype=np.float64)
    if dY.shape != cache.out.shape[::2]:
        raise ValueError(f"dY shape {dY.shape} does not match forward output {cache.out.shape[::2]}")
    r = cache.routing
    B, k = r.experts.shape
    m = cache.survived
    c = r.weights * m
    # dL/d(combine weight); dropped slots contribute nothing
    d_weights = np.einsum("bd,bkd->bk", dY, cache.out) * m
    d_out = c[:, :, None] * dY[:, None, :]
    dW_out_slots = np.einsum("bkd,bkf->bkdf", d_out, cache.a)
    da = np.einsum("bkdf,bkd->bkf", layer.w_out[r.experts], d_out)
    dz = da * (cache.z > 0)
    dW_in_slots = np.einsum("bkf,bd->bkfd", dz, cache.H)
    dH = np.einsum("bkfd,bkf->bd", layer.w_in[r.experts], dz)

    flat = r.experts.ravel()
    n_expert = layer.topo.n_expert
    dW_in = segment_sum(flat, dW_in_slots.reshape(B * k, *layer.w_in.shape[1:]), n_expert)
    dW_out = segment_sum(flat, dW_out_slots.reshape(B * k, *layer.w_out.shape[1:]), n_expert)

    rgrads, dH_router = routers.router_backward(layer.router, layer.topo, cache.H, r, d_weights,
                                                d_probs, d_group_probs, d_mixture_probs)
    grads = {f"router.{name}": g for name, g in rgrads.items()}
    grads["w_in"] = dW_in
    grads["w_out"] = dW_out
    return grads, dH + dH_router


def segment_sum(index: np.ndarray, values: np.ndarray, n: int) -> np.ndarray:
    """``out[i] = sum(values[index == i])`` summed in slot order; zeros elsewhere."""
    out = np.zeros((n,) + values.shape[1:])
    if index.size == 0:
        return out
    order = np.argsort(index, kind="stable")
    sorted_idx = index[order]
    starts = np.flatnonzero(np.r_[True, sorted_idx[1:] != sorted_idx[:-1]])
    out[sorted_idx[starts]] = np.add.reduceat(values[order], starts, axis=0)
    return out


def layer_forward(layer: SamLayer, h, rng: Optional[Rng] = None, train_mode: bool = False):
    """Single-token forward: returns ``(y, decision, cache)``."""
    h = as_vector(h)
    Y, cache = forward_batch(layer, h[None, :], rng, train_mode)
    return Y[0], cache.routing.decisions(layer.topo)[0], cache


def layer_backward(layer: SamLayer, cache: LayerCache, dy):
    """Single-token backward: returns ``(grads, dh)``."""
    dy = as_vector(dy)
    grads, dH = backward_batch(layer, cache, dy[None, :])
    return grads, dH[0]


def masked_dense_forward(layer: SamLayer, h, decision: RoutingDecision,
                         survived: Optional[list[bool]] = None) -> np.ndarray:
    """Evaluate every expert, then keep only the routed ones. Reference path."""
    h = as_vector(h)
    outs = [expert_forward(e, h) for e in layer.experts]
    mask = np.zeros(layer.topo.n_expert)
    weight = np.zeros(layer.topo.n_expert)
    for j, (i, w) in enumerate(zip(decision.selected_experts, decision.combine_weights)):
        if survived is None or survived[j]:
            mask[i] = 1.0
            weight[i] = w
    y = np.zeros(layer.d_model)
    for i, o in enumerate(outs):
        y += mask[i] * weight[i] * o
    return y
