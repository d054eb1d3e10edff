"""FLOP-matched experiment sets on the synthetic task.

Two comparisons live here:

* ordering: a dense FFN, switch routing over 16 experts, and SAM with k=2
  and k=4, all at the same per-token FLOPs; the three sparse arms also
  share the same sparsity ratio (16) and hence the same expert parameters.
* sparsity sweep: SR in {4, 8, 16, 32} at fixed FLOPs, once with a single
  active expert and once with four.

Every run is independent and deterministic given its config.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from statistics import median
from typing import Callable, Iterable, Optional

from .config import ExperimentConfig
from .cost import check_iso_flop
from .train import train

ORDERING_ARMS = ("dense", "switch", "sam_k2", "sam_k4")
SWEEP_SRS = (4, 8, 16, 32)

# shared by every arm; no capacity limit so that routing quality, not
# token dropping, decides the comparison (the toy model has no residual path)
BASE = dict(d_model=32, input_dim=32, d_ffn_base=64, n_clusters=16, batch_size=64,
            capacity_factor=math.inf, lr=3e-3)


def ordering_configs(steps: int = 5000, seed: int = 1, sam_router: str = "sam_nonshared",
                     **overrides) -> dict[str, ExperimentConfig]:
    base = dict(BASE, steps=steps, seed=seed, **overrides)
    cfgs = {
        "dense": ExperimentConfig(**base, router="switch", n_groups=1, experts_per_group=1, k=1),
        "switch": ExperimentConfig(**base, router="switch", n_groups=4, experts_per_group=4, k=1),
        "sam_k2": ExperimentConfig(**base, router=sam_router, n_groups=4, experts_per_group=8, k=2),
        "sam_k4": ExperimentConfig(**base, router=sam_router, n_groups=4, experts_per_group=16, k=4),
    }
    check_iso_flop(cfgs.values())
    return cfgs


def sweep_configs(k: int, steps: int = 2000, seed: int = 1, **overrides) -> dict[int, ExperimentConfig]:
    """One config per SR; k=1 uses switch routing, k>1 flat top-k routing.

    Experts are spread over 4 groups (1 group when there are fewer than 4).
    """
    base = dict(BASE, steps=steps, seed=seed, **overrides)
    router = "switch" if k == 1 else "moe_topk"
    out = {}
    for sr in SWEEP_SRS:
        n_expert = sr * k
        G = 4 if n_expert % 4 == 0 else 1
        out[sr] = ExperimentConfig(**base, router=router, n_groups=G, experts_per_group=n_expert // G, k=k)
    check_iso_flop(out.values())
    return out


@dataclass
class ArmResult:
    name: str
    losses: list[float]

    @property
    def median(self) -> float:
        return median(self.losses)


def run_arms(make: Callable[[int], dict], seeds: Iterable[int],
             log: Optional[Callable[[str], None]] = None) -> dict:
    """Train every arm of ``make(seed)`` for each seed; returns name -> ArmResult."""
    results: dict = {}
    for seed in seeds:
        for name, cfg in make(seed).items():
            loss = train(cfg, keep_rows=False).final_eval_loss
            results.setdefault(name, ArmResult(name, [])).losses.append(loss)
            if log is not None:
                log(f"seed={seed} arm={name} final_task_loss={loss:.6g}")
    return results


def ordering_holds(medians: dict[str, float]) -> bool:
    """dense >= switch >= sam_k2 >= sam_k4, with dense > sam_k4 strictly."""
    m = [medians[a] for a in ORDERING_ARMS]
    return all(a >= b for a, b in zip(m, m[1:])) and m[0] > m[-1]


def best_sr(medians: dict[int, float]) -> int:
    """SR with the lowest median loss (the lower SR wins an exact tie)."""
    return min(sorted(medians), key=lambda sr: medians[sr])


def diminishing_returns(medians: dict[int, float]) -> bool:
    """Gain from the last SR doubling is smaller than from the first."""
    srs = sorted(medians)
    first = medians[srs[0]] - medians[srs[1]]
    last = medians[srs[-2]] - medians[srs[-1]]
    return last < first
