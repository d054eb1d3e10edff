"""Central-difference gradient checking for the sparse layer and its losses.

Routing selection and the capacity outcome are frozen at the unperturbed
point, so the checked function is smooth except at ReLU and hinge kinks.
A perturbation is excluded (and counted) when it changes any discrete
quantity: the free routing choice, the capacity mask, a ReLU sign or the
hinge active set.

Error per parameter block is ``max|analytic - numeric|`` divided by the
largest magnitude of either gradient in that block. That denominator is
floored at ``RESOLUTION * max(1, |loss|)`` (RESOLUTION = 1e-4): central differences carry
roundoff of order ``ulp(loss) / eps`` (about 1e-11 at eps=1e-5), so a block
whose true gradient is zero would otherwise report pure noise as error 1.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .config import ExperimentConfig
from .layer import SamLayer
from .parallel import capacity_mask, expert_capacity
from .routers import route_batch
from .task import TaskBatch
from .tensor import Rng
from .train import build_layer, build_task, evaluate_losses, gradients

COMPONENTS = ("task", "align", "balance_groups", "balance_experts", "total")
MAX_PARAMS = 10_000
RESOLUTION = 1e-4


class GradCheckTooLarge(ValueError):
    pass


@dataclass
class GradCheckReport:
    errors: dict = field(default_factory=dict)  # (component, block) -> max relative error
    excluded: dict = field(default_factory=dict)  # block -> perturbations dropped at kinks
    checked: int = 0

    @property
    def max_error(self) -> float:
        return max(self.errors.values(), default=0.0)

    def passed(self, tol: float = 1e-5) -> bool:
        return self.max_error < tol

    def lines(self) -> list[str]:
        out = []
        for (comp, block), err in sorted(self.errors.items()):
            out.append(f"{comp:16s} {block:18s} max_rel_err={err:.3e}")
        for block, n in sorted(self.excluded.items()):
            if n:
                out.append(f"excluded {block}: {n} kink-crossing perturbations")
        return out


def _loss_vector(ev) -> np.ndarray:
    lb = ev.losses
    return np.array([lb.task, lb.align, lb.balance_groups, lb.balance_experts, lb.total])


def _free_selection(layer: SamLayer, batch: TaskBatch, cfg: ExperimentConfig, noise) -> list:
    """Routing choice and capacity mask with selection left free (same noise)."""
    if noise is not None:
        logits = batch.inputs @ layer.router.w_global.T + noise
        experts = np.argsort(-logits, axis=1, kind="stable")[:, :layer.k]
        groups = np.zeros(0, dtype=np.int64)
    else:
        r = route_batch(layer.router, layer.topo, batch.inputs, layer.k)
        experts, groups = r.experts, r.groups
    cap = expert_capacity(cfg.capacity_factor, *experts.shape, layer.topo.n_expert)
    return [experts.tobytes(), groups.tobytes(),
            capacity_mask(experts, layer.topo.n_expert, cap).tobytes()]


def _signature(layer: SamLayer, batch: TaskBatch, cfg: ExperimentConfig, ev, frozen) -> tuple:
    key = [(ev.cache.z > 0).tobytes()]
    if ev.aux.hinge_active is not None:
        key.append(ev.aux.hinge_active.tobytes())
    key += _free_selection(layer, batch, cfg, frozen.noise)
    return tuple(key)


def grad_check(layer: SamLayer, batch: TaskBatch, cfg: ExperimentConfig, eps: float = 1e-5,
               rng: Optional[Rng] = None, corrupt: bool = False) -> GradCheckReport:
    """Compare analytic gradients of every loss component to central differences."""
    n = layer.n_params()
    if n > MAX_PARAMS:
        raise GradCheckTooLarge(
            f"model has {n} parameters; gradient checking is limited to {MAX_PARAMS}. "
            "Reduce d_model, d_ffn_base or the number of experts.")
    base = evaluate_losses(layer, batch, cfg, rng, train_mode=True)
    frozen = base.cache.routing.selection()
    survived = base.cache.survived
    analytic = {c: gradients(layer, base, cfg, c) for c in COMPONENTS}
    if corrupt:
        analytic = {c: {b: g * 1.01 + 1e-3 for b, g in blocks.items()} for c, blocks in analytic.items()}

    def at_point():
        ev = evaluate_losses(layer, batch, cfg, None, True, fixed=frozen, fixed_survived=survived)
        return _loss_vector(ev), _signature(layer, batch, cfg, ev, frozen)

    loss0, sig0 = at_point()
    report = GradCheckReport()
    for name, arr in layer.params().items():
        numeric = np.zeros((len(COMPONENTS),) + arr.shape)
        keep = np.ones(arr.shape, dtype=bool)
        flat = arr.reshape(-1)
        for i in range(flat.size):
            old = flat[i]
            flat[i] = old + eps
            lp, sp = at_point()
            flat[i] = old - eps
            lm, sm = at_point()
            flat[i] = old
            idx = np.unravel_index(i, arr.shape)
            if sp != sig0 or sm != sig0:
                keep[idx] = False
                continue
            numeric[(slice(None),) + idx] = (lp - lm) / (2 * eps)
        report.excluded[name] = int((~keep).sum())
        report.checked += int(keep.sum())
        for ci, comp in enumerate(COMPONENTS):
            a = np.where(keep, analytic[comp][name], 0.0)
            num = np.where(keep, numeric[ci], 0.0)
            scale = max(np.abs(a).max(initial=0.0), np.abs(num).max(initial=0.0),
                        RESOLUTION * max(1.0, abs(loss0[ci])))
            report.errors[(comp, name)] = float(np.abs(a - num).max(initial=0.0) / scale)
    return report


def gradcheck_config(cfg: ExperimentConfig, n_tokens: int = 8, corrupt: bool = False) -> GradCheckReport:
    """Grad-check a freshly initialised model from ``cfg`` on a small task batch."""
    layer = build_layer(cfg)
    task = build_task(cfg)
    batch = task.sample(Rng(cfg.seed).child(99), n_tokens)
    return grad_check(layer, batch, cfg, rng=Rng(cfg.seed).child(98), corrupt=corrupt)
