"""Variational environment inference: pooled latents -> Gaussian environment variable.

The environment is a continuous latent with a fixed standard-normal prior;
its sample conditions the reverse diffusion. Mean pooling keeps the
inference permutation-invariant in the node order.
"""

import math
from dataclasses import dataclass

import torch
from torch import nn

from .diffusion import _init_linear
from .vgae import gaussian_kl


@dataclass
class EnvLatent:
    mu: torch.Tensor       # (env_dim,)
    sigma: torch.Tensor    # (env_dim,), positive
    eps: torch.Tensor | None = None
    z: torch.Tensor | None = None


class EnvInference(nn.Module):
    def __init__(self, latent_dim: int, hidden_dim: int, env_dim: int,
                 sigma_min: float = 1e-4, sigma_max: float = 10.0,
                 gen: torch.Generator | None = None, dtype=torch.float64):
        super().__init__()
        self.latent_dim = latent_dim
        self.env_dim = env_dim
        self.log_sigma_bounds = (math.log(sigma_min), math.log(sigma_max))
        self.hidden = nn.Linear(latent_dim, hidden_dim, dtype=dtype)
        self.out = nn.Linear(hidden_dim, 2 * env_dim, dtype=dtype)
        _init_linear(self.hidden, gen)
        _init_linear(self.out, gen)

    def forward(self, node_latents: torch.Tensor):
        if node_latents.shape[1] != self.latent_dim:
            raise ValueError(f"latent width {node_latents.shape[1]} does not "
                             f"match inference width {self.latent_dim}")
        pooled = node_latents.mean(dim=0)
        h = torch.tanh(self.hidden(pooled))
        out = self.out(h)
        mu, log_sigma = out[:self.env_dim], out[self.env_dim:]
        return mu, torch.exp(log_sigma.clamp(*self.log_sigma_bounds))


def infer_env(node_latents: torch.Tensor, params: EnvInference,
              rng: torch.Generator | None = None,
              eps: torch.Tensor | None = None) -> EnvLatent:
    """Pool node latents, emit (mu, sigma), and sample z by reparameterization."""
    mu, sigma = params(node_latents)
    if eps is None:
        eps = torch.randn(mu.shape, generator=rng, dtype=mu.dtype)
    return EnvLatent(mu=mu, sigma=sigma, eps=eps, z=mu + sigma * eps)


def env_kl(latent: EnvLatent) -> torch.Tensor:
    """KL between the inferred environment and its standard-normal prior."""
    return gaussian_kl(latent.mu, latent.sigma)


def env_elbo_loss(reconstruction_term: torch.Tensor | float,
                  kl: torch.Tensor | float) -> torch.Tensor:
    """Negated environment ELBO: -E_Q[log P(Y|G,E,I)] + KL(Q || prior).

    `reconstruction_term` is the conditional log-likelihood surrogate, i.e.
    the negated task (diffusion + ranking) loss on the view under z.
    """
    recon = torch.as_tensor(reconstruction_term, dtype=torch.float64) \
        if not torch.is_tensor(reconstruction_term) else reconstruction_term
    kl_t = torch.as_tensor(kl, dtype=recon.dtype) if not torch.is_tensor(kl) else kl
    return -recon + kl_t
