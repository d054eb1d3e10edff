"""Toy-scale training: input -> sparse expert layer -> output, MSE task loss.

There is no residual path, so tokens whose experts overflowed get a partial
(or zero) output and the damage shows up directly in the task loss.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from . import cost
from .config import ExperimentConfig
from .layer import LayerCache, SamLayer, backward_batch, forward_batch, init_layer
from .losses import AuxLosses, LossBreakdown, LossWeights, router_aux_losses, total_loss
from .parallel import CommModel, comm_cost, load_stats, plan_dispatch
from .routers import BatchRouting
from .task import MixtureTask, TaskBatch
from .tensor import Rng

log = logging.getLogger(__name__)

METRIC_COLUMNS = (
    "step", "task_loss", "align_loss", "balance_group_loss", "balance_expert_loss", "total_loss",
    "comm_messages", "comm_bytes", "dropped_fraction", "expert_entropy", "flops_per_token",
    "sparsity_ratio",
)

# Rng streams, all children of Rng(cfg.seed)
_INIT, _TASK, _DATA, _NOISE, _EVAL = range(5)


class NumericalError(FloatingPointError):
    pass


def build_layer(cfg: ExperimentConfig) -> SamLayer:
    return init_layer(cfg.router, cfg.topology, cfg.d_model, cfg.d_ffn, cfg.k,
                      Rng(cfg.seed).child(_INIT), cfg.router_init_std, cfg.noise_scale)


def build_task(cfg: ExperimentConfig) -> MixtureTask:
    return MixtureTask.from_config(cfg, Rng(cfg.seed).child(_TASK))


def loss_weights(cfg: ExperimentConfig) -> LossWeights:
    return LossWeights(cfg.alpha_balance, cfg.alpha_align)


@dataclass
class Evaluation:
    """Everything one forward pass over a batch produces."""

    Y: np.ndarray
    cache: LayerCache
    aux: AuxLosses
    losses: LossBreakdown
    d_task: np.ndarray  # dL_task / dY


def evaluate_losses(layer: SamLayer, batch: TaskBatch, cfg: ExperimentConfig,
                    rng: Optional[Rng] = None, train_mode: bool = True,
                    fixed: Optional[BatchRouting] = None,
                    fixed_survived: Optional[np.ndarray] = None) -> Evaluation:
    Y, cache = forward_batch(layer, batch.inputs, rng, train_mode, cfg.capacity_factor, fixed, fixed_survived)
    err = Y - batch.targets
    task = float(np.mean(err * err))
    aux = router_aux_losses(cache.routing, layer.topo)
    losses = total_loss(task, aux.align, (aux.balance_groups, aux.balance_experts), loss_weights(cfg))
    return Evaluation(Y, cache, aux, losses, 2.0 * err / err.size)


def gradients(layer: SamLayer, ev: Evaluation, cfg: ExperimentConfig, component: str = "total"):
    """Analytic gradient of one loss component (or ``"total"``) w.r.t. the layer params."""
    B = ev.Y.shape[0]
    if component == "total":
        sg = ev.aux.combined_grads(loss_weights(cfg))
        dY = ev.d_task
    elif component == "task":
        sg, dY = None, ev.d_task
    else:
        sg, dY = ev.aux.grads.get(component), np.zeros_like(ev.Y)
    kw = {} if sg is None else dict(d_probs=sg.d_probs, d_group_probs=sg.d_group_probs,
                                    d_mixture_probs=sg.d_mixture_probs)
    grads, _ = backward_batch(layer, ev.cache, dY, **kw)
    return grads


class Adam:
    def __init__(self, params: dict, lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.t = 0
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}

    def step(self, params: dict, grads: dict) -> None:
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for name in sorted(params):
            g = grads[name]
            m, v = self.m[name], self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            params[name] -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def _check_finite(step: int, losses: LossBreakdown, grads: dict) -> None:
    for name in ("task", "align", "balance_groups", "balance_experts", "total"):
        v = getattr(losses, name)
        if not np.isfinite(v):
            raise NumericalError(f"step {step}: {name} loss is {v}")
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NumericalError(f"step {step}: non-finite gradient in {name}")


def train_step(layer: SamLayer, batch: TaskBatch, opt: Adam, cfg: ExperimentConfig, rng: Rng,
               step: int = 0) -> dict:
    """One forward/backward/Adam update. Returns a metrics row."""
    ev = evaluate_losses(layer, batch, cfg, rng, train_mode=True)
    grads = gradients(layer, ev, cfg)
    _check_finite(step, ev.losses, grads)
    opt.step(layer.params(), grads)

    r = ev.cache.routing
    topo = layer.topo
    comm = comm_cost(r, topo, CommModel(cfg.d_model, cfg.bytes_per_element), cfg.router)
    plan = plan_dispatch(r, topo, cfg.capacity_factor)
    stats = load_stats(plan, topo)
    return {
        "step": step,
        "task_loss": ev.losses.task,
        "align_loss": ev.losses.align,
        "balance_group_loss": ev.losses.balance_groups,
        "balance_expert_loss": ev.losses.balance_experts,
        "total_loss": ev.losses.total,
        "comm_messages": comm.cross_device_messages,
        "comm_bytes": comm.cross_device_bytes,
        "dropped_fraction": plan.n_overflow / r.experts.size,
        "expert_entropy": stats.entropy,
        "flops_per_token": cost.flop_count(cfg.k, cfg.d_model, cfg.d_ffn),
        "sparsity_ratio": cfg.sparsity_ratio,
    }


def eval_task_loss(layer: SamLayer, task: MixtureTask, cfg: ExperimentConfig) -> float:
    """Mean task MSE on a fixed held-out sample (no routing noise, same capacity rule)."""
    rng = Rng(cfg.seed).child(_EVAL)
    total, n = 0.0, 0
    remaining = cfg.eval_size
    while remaining > 0:
        b = min(cfg.batch_size, remaining)
        batch = task.sample(rng, b)
        ev = evaluate_losses(layer, batch, cfg, train_mode=False)
        total += ev.losses.task * b
        n += b
        remaining -= b
    return total / n


@dataclass
class TrainResult:
    cfg: ExperimentConfig
    layer: SamLayer
    rows: list = field(default_factory=list)
    final_eval_loss: float = float("nan")

    @property
    def final_entropy(self) -> float:
        return self.rows[-1]["expert_entropy"] if self.rows else float("nan")


def train(cfg: ExperimentConfig, on_row: Optional[Callable[[dict], None]] = None,
          keep_rows: bool = True) -> TrainResult:
    layer = build_layer(cfg)
    task = build_task(cfg)
    opt = Adam(layer.params(), cfg.lr, cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps)
    data = Rng(cfg.seed).child(_DATA)
    noise = Rng(cfg.seed).child(_NOISE)
    result = TrainResult(cfg, layer)
    for step in range(cfg.steps):
        batch = task.sample(data, cfg.batch_size)
        row = train_step(layer, batch, opt, cfg, noise, step)
        if keep_rows:
            result.rows.append(row)
        if on_row is not None:
            on_row(row)
    result.final_eval_loss = eval_task_loss(layer, task, cfg)
    log.info("trained %s k=%d SR=%s: eval task loss %.6g", cfg.router, cfg.k, cfg.sparsity_ratio,
             result.final_eval_loss)
    return result

