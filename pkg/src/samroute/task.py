"""Synthetic mixture-of-linear-maps regression task.

Each of ``n_clusters`` clusters has a Gaussian input distribution around a
random centre and its own random linear map. A sample picks a cluster
uniformly, draws ``x = centre + cluster_std * z`` and returns
``y = W_c x + noise_std * z'``. Good routing sends each cluster to experts
that specialise in its map.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterator

import numpy as np

from .config import ExperimentConfig
from .tensor import Rng, gaussian


@dataclass
class TaskBatch:
    inputs: np.ndarray
    targets: np.ndarray
    cluster_ids: np.ndarray  # diagnostics only; never fed to the model


@dataclass
class MixtureTask:
    centers: np.ndarray  # (n_clusters, input_dim)
    maps: np.ndarray  # (n_clusters, d_model, input_dim)
    cluster_std: float
    noise_std: float

    @classmethod
    def from_config(cls, cfg: ExperimentConfig, rng: Rng) -> "MixtureTask":
        C, d_in, d_out = cfg.n_clusters, cfg.input_dim, cfg.d_model
        centers = cfg.center_std * gaussian(rng, C * d_in).reshape(C, d_in)
        maps = gaussian(rng, C * d_out * d_in).reshape(C, d_out, d_in) / np.sqrt(d_in)
        return cls(centers, maps, cfg.cluster_std, cfg.noise_std)

    @property
    def n_clusters(self) -> int:
        return self.centers.shape[0]

    def sample(self, rng: Rng, n: int) -> TaskBatch:
        C, d_in = self.centers.shape
        ids = rng.integers(C, n)
        x = self.centers[ids] + self.cluster_std * gaussian(rng, n * d_in).reshape(n, d_in)
        y = np.einsum("noi,ni->no", self.maps[ids], x)
        if self.noise_std > 0:
            y = y + self.noise_std * gaussian(rng, y.size).reshape(y.shape)
        return TaskBatch(x, y, ids)


def gen_mixture_task(cfg: ExperimentConfig, rng: Rng) -> Iterator[TaskBatch]:
    """Endless stream of ``cfg.batch_size`` batches.

    The task itself is drawn from ``rng.child(0)`` and the samples from
    ``rng.child(1)``, so the stream depends only on the seed.
    """
    task = MixtureTask.from_config(cfg, rng.child(0))
    data = rng.child(1)
    while True:
        yield task.sample(data, cfg.batch_size)
