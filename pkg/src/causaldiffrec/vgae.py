"""Variational graph autoencoder: per-node Gaussian latents and inner-product decoding.

The encoder is one shared propagation (norm_adj @ features @ W) followed by
linear mean / log-std heads. Reconstruction scores full edge probabilities
as sigmoid(Z Z^T); the training loss only touches observed edges plus an
equal number of sampled non-edges.
"""

import math
from dataclasses import dataclass

import numpy as np
import torch
from torch import nn
from torch.nn import functional as F

from .diffusion import _init_linear
from .graph import BipartiteGraph


@dataclass
class LatentGaussianState:
    mu: torch.Tensor
    sigma: torch.Tensor
    eps: torch.Tensor | None = None
    sample: torch.Tensor | None = None


class GraphEncoder(nn.Module):
    def __init__(self, feature_dim: int, latent_dim: int,
                 sigma_min: float = 1e-4, sigma_max: float = 10.0,
                 gen: torch.Generator | None = None, dtype=torch.float64):
        super().__init__()
        self.feature_dim = feature_dim
        self.latent_dim = latent_dim
        self.log_sigma_bounds = (math.log(sigma_min), math.log(sigma_max))
        self.shared = nn.Linear(feature_dim, latent_dim, bias=False, dtype=dtype)
        self.mean_head = nn.Linear(latent_dim, latent_dim, dtype=dtype)
        self.log_std_head = nn.Linear(latent_dim, latent_dim, dtype=dtype)
        for layer in (self.shared, self.mean_head, self.log_std_head):
            _init_linear(layer, gen)

    def forward(self, norm_adj: torch.Tensor, features: torch.Tensor):
        if features.shape[1] != self.feature_dim:
            raise ValueError(f"feature width {features.shape[1]} does not match "
                             f"encoder width {self.feature_dim}")
        h = torch.sparse.mm(norm_adj, self.shared(features))
        mu = self.mean_head(h)
        log_sigma = self.log_std_head(h).clamp(*self.log_sigma_bounds)
        return mu, torch.exp(log_sigma)


def encode(view: BipartiteGraph, features: torch.Tensor,
           params: GraphEncoder) -> LatentGaussianState:
    """Per-node Gaussian parameters for one graph view (no sample yet)."""
    mu, sigma = params(view.normalized_torch(dtype=features.dtype), features)
    return LatentGaussianState(mu=mu, sigma=sigma)


def reparameterize(state: LatentGaussianState,
                   rng: torch.Generator | None = None,
                   eps: torch.Tensor | None = None) -> LatentGaussianState:
    """Fill the sample as mu + sigma * eps, recording eps."""
    if eps is None:
        eps = torch.randn(state.mu.shape, generator=rng, dtype=state.mu.dtype)
    state.eps = eps
    state.sample = state.mu + state.sigma * eps
    return state


def decode(latents: torch.Tensor) -> torch.Tensor:
    """Full inner-product edge probabilities sigmoid(Z Z^T); exactly symmetric."""
    return torch.sigmoid(latents @ latents.T)


def decode_pair_logits(latents: torch.Tensor, users: np.ndarray,
                       items: np.ndarray, num_users: int) -> torch.Tensor:
    u = latents[torch.as_tensor(users, dtype=torch.long)]
    i = latents[torch.as_tensor(items, dtype=torch.long) + num_users]
    return (u * i).sum(dim=1)


def sample_non_edges(view: BipartiteGraph, count: int,
                     rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Uniform (user, item) pairs outside the view's edge set."""
    edge_set = set(zip(*view.inc.nonzero()))
    m, n = view.num_users, view.num_items
    if len(edge_set) >= m * n:
        raise ValueError("graph is complete; no non-edges to sample")
    users, items = [], []
    while len(users) < count:
        cand_u = rng.integers(0, m, size=2 * (count - len(users)))
        cand_i = rng.integers(0, n, size=2 * (count - len(users)))
        for u, i in zip(cand_u, cand_i):
            if (u, i) not in edge_set:
                users.append(int(u))
                items.append(int(i))
                if len(users) == count:
                    break
    return np.asarray(users), np.asarray(items)


def reconstruction_bce(view: BipartiteGraph, latents: torch.Tensor,
                       rng: np.random.Generator | None = None, neg_ratio: int = 1,
                       neg_pairs: tuple[np.ndarray, np.ndarray] | None = None) -> torch.Tensor:
    """Mean binary cross-entropy over all edges plus neg_ratio sampled non-edges.

    Pass `neg_pairs` to pin the sampled non-edges (reproducibility checks);
    otherwise they are drawn from `rng`.
    """
    pos_u, pos_i = view.inc.nonzero()
    if neg_pairs is not None:
        neg_u, neg_i = neg_pairs
    else:
        neg_u, neg_i = sample_non_edges(view, neg_ratio * len(pos_u), rng)
    logits = torch.cat([
        decode_pair_logits(latents, pos_u, pos_i, view.num_users),
        decode_pair_logits(latents, neg_u, neg_i, view.num_users),
    ])
    targets = torch.cat([
        torch.ones(len(pos_u), dtype=latents.dtype),
        torch.zeros(len(neg_u), dtype=latents.dtype),
    ])
    return F.binary_cross_entropy_with_logits(logits, targets)


def gaussian_kl(mu: torch.Tensor, sigma: torch.Tensor) -> torch.Tensor:
    """KL(N(mu, sigma^2) || N(0, I)) summed over all entries."""
    return 0.5 * (mu ** 2 + sigma ** 2 - 1.0 - 2.0 * torch.log(sigma)).sum()


def vgae_loss(view: BipartiteGraph, state: LatentGaussianState,
              recon_latents: torch.Tensor, rng: np.random.Generator | None = None,
              neg_ratio: int = 1,
              neg_pairs: tuple[np.ndarray, np.ndarray] | None = None) -> torch.Tensor:
    """Negated ELBO to minimize: reconstruction BCE plus the Gaussian KL.

    `recon_latents` are the node vectors the decoder scores (the diffusion
    reconstruction during training); the KL is taken on the encoder's own
    (mu, sigma).
    """
    return (reconstruction_bce(view, recon_latents, rng, neg_ratio, neg_pairs)
            + gaussian_kl(state.mu, state.sigma))
