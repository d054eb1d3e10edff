"""Experiment configuration and its flat ``key = value`` file format.

Format: one ``key = value`` pair per line, ``#`` starts a comment, blank
lines are ignored. Keys are exactly the :class:`ExperimentConfig` field
names; unknown or repeated keys are errors. Missing keys take their
defaults. Floats are written with ``repr`` so a round trip is lossless.
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Union

from .routers import KINDS, SAM_KINDS, Topology


class ConfigError(ValueError):
    """Invalid configuration; ``line`` is set when the problem has a source line.

    ``key`` may be a tuple of related keys; the first one found in the file
    supplies the line number.
    """

    def __init__(self, message: str, line: int | None = None, key=None):
        self.line = line
        self.keys = (key,) if isinstance(key, str) else tuple(key or ())
        self.key = self.keys[0] if self.keys else None
        where = f"line {line}: " if line is not None else ""
        super().__init__(f"{where}{message}")


@dataclass
class ExperimentConfig:
    # model
    d_model: int = 32
    d_ffn_base: int = 64
    n_groups: int = 4
    experts_per_group: int = 4
    k: int = 2
    router: str = "sam_nonshared"
    router_init_std: float = 0.1
    noise_scale: float = 1.0
    capacity_factor: float = 2.0
    # losses
    alpha_balance: float = 0.01
    alpha_align: float = 0.01
    # optimiser
    lr: float = 3e-3
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    batch_size: int = 64
    steps: int = 1000
    seed: int = 0
    # synthetic task
    n_clusters: int = 16
    input_dim: int = 32
    noise_std: float = 0.0
    center_std: float = 1.0
    cluster_std: float = 0.5
    eval_size: int = 2048
    # communication accounting (-1: round-robin token sharding)
    local_group: int = -1
    bytes_per_element: int = 4

    def __post_init__(self):
        self.validate()

    @property
    def n_expert(self) -> int:
        return self.n_groups * self.experts_per_group

    @property
    def d_ffn(self) -> int:
        return self.d_ffn_base // self.k

    @property
    def sparsity_ratio(self) -> float:
        return self.n_expert / self.k

    @property
    def topology(self) -> Topology:
        return Topology(self.n_groups, self.experts_per_group,
                        None if self.local_group < 0 else self.local_group)

    def validate(self) -> None:
        def need(cond, key, msg):
            if not cond:
                raise ConfigError(msg, key=key)

        for f in fields(self):
            v = getattr(self, f.name)
            if f.type in ("float", float):
                need(isinstance(v, (int, float)) and math.isfinite(v) or
                     (f.name == "capacity_factor" and v == math.inf), f.name, f"{f.name} must be finite")
        for name in ("d_model", "d_ffn_base", "n_groups", "experts_per_group", "k", "batch_size",
                     "n_clusters", "input_dim", "eval_size", "bytes_per_element"):
            need(getattr(self, name) >= 1, name, f"{name} must be >= 1")
        need(self.steps >= 0, "steps", "steps must be >= 0")
        need(0 <= self.seed < 2**64, "seed", "seed must be an unsigned 64-bit integer")
        need(self.router in KINDS, "router", f"router must be one of {', '.join(KINDS)}")
        need(self.d_ffn_base % self.k == 0, ("k", "d_ffn_base"), "k must divide d_ffn_base")
        need(self.input_dim == self.d_model, ("input_dim", "d_model"), "input_dim must equal d_model (no input projection)")
        need(self.k <= self.n_expert, "k", "k must not exceed n_groups * experts_per_group")
        if self.router == "switch":
            need(self.k == 1, "k", "switch routing requires k = 1")
        if self.router in SAM_KINDS:
            need(self.k <= self.experts_per_group, "k", "SAM routing requires k <= experts_per_group")
        need(self.capacity_factor > 0, "capacity_factor", "capacity_factor must be > 0")
        for name in ("alpha_balance", "alpha_align", "noise_scale", "router_init_std", "noise_std",
                     "center_std", "cluster_std", "lr", "adam_eps"):
            need(getattr(self, name) >= 0, name, f"{name} must be >= 0")
        need(0 <= self.adam_beta1 < 1 and 0 <= self.adam_beta2 < 1, "adam_beta1",
             "Adam betas must be in [0, 1)")
        need(-1 <= self.local_group < self.n_groups, "local_group",
             "local_group must be -1 (round-robin) or a group index")

    def replace(self, **changes) -> "ExperimentConfig":
        return dataclasses.replace(self, **changes)


_TYPES = {f.name: f.type for f in fields(ExperimentConfig)}


def _convert(key: str, raw: str, line: int | None):
    typ = _TYPES[key]
    try:
        if typ in ("int", int):
            return int(raw, 10)
        if typ in ("float", float):
            return float(raw)
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {raw!r} as {typ}", line, key) from None
    return raw


def parse_config(text: str, **overrides) -> ExperimentConfig:
    values = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        body = line.split("#", 1)[0].strip()
        if not body:
            continue
        if "=" not in body:
            raise ConfigError(f"expected 'key = value', got {body!r}", lineno)
        key, raw = (s.strip() for s in body.split("=", 1))
        if key not in _TYPES:
            raise ConfigError(f"unknown key {key!r}", lineno, key)
        if key in values:
            raise ConfigError(f"duplicate key {key!r}", lineno, key)
        if not raw:
            raise ConfigError(f"{key}: missing value", lineno, key)
        values[key] = _convert(key, raw, lineno)
    values.update({k: v for k, v in overrides.items() if v is not None})
    try:
        return ExperimentConfig(**values)
    except ConfigError as e:
        lines = [ln.split("#", 1)[0].split("=", 1)[0].strip() for ln in text.splitlines()]
        for key in e.keys:
            if key in lines:
                raise ConfigError(str(e), lines.index(key) + 1, e.keys) from None
        raise


def load_config(path: Union[str, Path], **overrides) -> ExperimentConfig:
    return parse_config(Path(path).read_text(), **overrides)


def format_config(cfg: ExperimentConfig) -> str:
    lines = []
    for f in fields(cfg):
        v = getattr(cfg, f.name)
        lines.append(f"{f.name} = {v!r}" if isinstance(v, float) else f"{f.name} = {v}")
    return "\n".join(lines) + "\n"
