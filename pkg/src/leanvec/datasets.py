"""Synthetic low-rank datasets with in- or out-of-distribution queries.

Database vectors are ``x = M z + noise`` with latent ``z`` of dimension
``rank`` (decaying per-coordinate scales) and isotropic Gaussian noise whose
total energy is ``noise`` times the signal energy. In-distribution queries are
drawn exactly like database vectors from held-out latents. Out-of-distribution
queries come in two flavours:

* ``"subspace"``: held-out latents pushed through an independent random map,
  so queries live in a different ``rank``-dimensional subspace.
* ``"spectrum"``: same subspace as the data but with the latent scales
  reversed, so queries weight most the directions the data varies least in.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass
class SyntheticDataset:
    data: np.ndarray
    learn_queries: np.ndarray
    test_queries: np.ndarray
    ood: str | None

    @property
    def dim(self) -> int:
        return self.data.shape[1]


def make_dataset(
    n: int,
    dim: int,
    rank: int,
    *,
    n_learn: int = 1000,
    n_test: int = 1000,
    noise: float = 0.05,
    ood: str | None = None,
    decay: float = 0.5,
    seed: int = 0,
    dtype=np.float32,
) -> SyntheticDataset:
    rng = np.random.default_rng(seed)
    scales = 1.0 / np.arange(1, rank + 1) ** decay
    basis = np.linalg.qr(rng.standard_normal((dim, rank)))[0]
    signal_energy = np.sum(scales**2)
    noise_std = np.sqrt(noise * signal_energy / dim)

    def latents(count, s=scales):
        return rng.standard_normal((count, rank)) * s

    data = latents(n) @ basis.T + noise_std * rng.standard_normal((n, dim))
    if ood == "subspace":
        query_map = rng.standard_normal((dim, rank)) / np.sqrt(dim)
        learn = latents(n_learn) @ query_map.T
        test = latents(n_test) @ query_map.T
    elif ood == "spectrum":
        learn = latents(n_learn, scales[::-1]) @ basis.T
        test = latents(n_test, scales[::-1]) @ basis.T
    elif ood is None:
        learn = latents(n_learn) @ basis.T + noise_std * rng.standard_normal((n_learn, dim))
        test = latents(n_test) @ basis.T + noise_std * rng.standard_normal((n_test, dim))
    else:
        raise ValueError(f"unknown ood mode {ood!r}")
    return SyntheticDataset(data.astype(dtype), learn.astype(dtype), test.astype(dtype), ood)
