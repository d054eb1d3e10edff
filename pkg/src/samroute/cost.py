"""Per-token compute and parameter accounting for expert layers.

Only the expert FFNs are counted; router weights are reported separately.
An expert does two matmuls (d_model x d_ffn each) and a multiply-add counts
as two FLOPs, so one token costs ``4 * k * d_model * d_ffn``.
"""

from __future__ import annotations

from dataclasses import dataclass
from fractions import Fraction
from typing import Sequence


def _positive(**kw):
    for name, v in kw.items():
        if not isinstance(v, int) or v < 1:
            raise ValueError(f"{name} must be a positive integer, got {v!r}")


def flop_count(k: int, d_model: int, d_ffn: int) -> int:
    _positive(k=k, d_model=d_model, d_ffn=d_ffn)
    return 4 * k * d_model * d_ffn


def param_count(n_expert: int, d_model: int, d_ffn: int) -> int:
    """Expert parameters in one layer, both FFN matrices."""
    _positive(n_expert=n_expert, d_model=d_model, d_ffn=d_ffn)
    return 2 * n_expert * d_model * d_ffn


def nominal_param_count(n_expert: int, d_model: int, d_ffn: int) -> int:
    """The one-matrix-per-expert size ``n_expert * d_model * d_ffn``."""
    _positive(n_expert=n_expert, d_model=d_model, d_ffn=d_ffn)
    return n_expert * d_model * d_ffn


def router_param_count(kind: str, n_groups: int, experts_per_group: int, d_model: int) -> int:
    if kind == "sam_nonshared":
        return n_groups * d_model + n_groups * experts_per_group * d_model
    return n_groups * experts_per_group * d_model


def sparsity_ratio(n_expert: int, k: int) -> Fraction:
    _positive(n_expert=n_expert, k=k)
    return Fraction(n_expert, k)


@dataclass(frozen=True)
class CostSummary:
    k: int
    n_expert: int
    d_model: int
    d_ffn: int
    flops_per_token: int
    params: int
    params_nominal: int
    router_params: int
    sparsity_ratio: Fraction


def summarize(cfg) -> CostSummary:
    return CostSummary(
        k=cfg.k, n_expert=cfg.n_expert, d_model=cfg.d_model, d_ffn=cfg.d_ffn,
        flops_per_token=flop_count(cfg.k, cfg.d_model, cfg.d_ffn),
        params=param_count(cfg.n_expert, cfg.d_model, cfg.d_ffn),
        params_nominal=nominal_param_count(cfg.n_expert, cfg.d_model, cfg.d_ffn),
        router_params=router_param_count(cfg.router, cfg.n_groups, cfg.experts_per_group, cfg.d_model),
        sparsity_ratio=sparsity_ratio(cfg.n_expert, cfg.k),
    )


class IsoFlopError(ValueError):
    pass


def check_iso_flop(configs: Sequence) -> int:
    """Return the shared per-token FLOP count or raise if configs disagree."""
    counts = {flop_count(c.k, c.d_model, c.d_ffn) for c in configs}
    if len(counts) != 1:
        raise IsoFlopError(f"configs are not FLOP-matched: {sorted(counts)}")
    return counts.pop()
