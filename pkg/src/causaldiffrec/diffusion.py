"""Conditional denoising diffusion over node latents.

Standard DDPM conventions: per-step alpha_t = 1 - beta_t, cumulative
alpha_bar_t with alpha_bar_0 = 1, exact Gaussian posterior variance
beta_t * (1 - alpha_bar_{t-1}) / (1 - alpha_bar_t), and the final reverse
step (t = 1) is deterministic.
"""

import math
from dataclasses import dataclass, field

import numpy as np
import torch
from torch import nn


@dataclass(frozen=True)
class NoiseSchedule:
    betas: np.ndarray            # length T, betas[t-1] is beta_t
    alphas: np.ndarray           # 1 - betas
    alpha_bars: np.ndarray       # length T+1, alpha_bars[t] cumulative, [0] = 1
    T: int = field(init=False, default=0)

    def __post_init__(self):
        object.__setattr__(self, "T", len(self.betas))

    def beta(self, t: int) -> float:
        self._check(t)
        return float(self.betas[t - 1])

    def alpha(self, t: int) -> float:
        self._check(t)
        return float(self.alphas[t - 1])

    def alpha_bar(self, t: int) -> float:
        if not 0 <= t <= self.T:
            raise ValueError(f"step {t} outside [0, {self.T}]")
        return float(self.alpha_bars[t])

    def posterior_var(self, t: int) -> float:
        self._check(t)
        return float(self.betas[t - 1] * (1.0 - self.alpha_bars[t - 1])
                     / (1.0 - self.alpha_bars[t]))

    def _check(self, t: int) -> None:
        if not 1 <= t <= self.T:
            raise ValueError(f"step {t} outside [1, {self.T}]")


def make_schedule(T: int, beta_start: float = 1e-4, beta_end: float = 0.02,
                  kind: str = "linear") -> NoiseSchedule:
    """Linear beta schedule with precomputed cumulative products."""
    if kind != "linear":
        raise ValueError(f"unknown schedule kind {kind!r}")
    if not 1 <= T <= 1000:
        raise ValueError(f"T={T} outside [1, 1000]")
    if not 0 < beta_start <= beta_end < 1:
        raise ValueError("need 0 < beta_start <= beta_end < 1")
    betas = np.linspace(beta_start, beta_end, T, dtype=np.float64)
    alphas = 1.0 - betas
    alpha_bars = np.concatenate([[1.0], np.cumprod(alphas)])
    return NoiseSchedule(betas, alphas, alpha_bars)


def q_sample(x0: torch.Tensor, t: int, eps: torch.Tensor,
             schedule: NoiseSchedule) -> torch.Tensor:
    """Closed-form forward marginal: sqrt(abar_t) x0 + sqrt(1 - abar_t) eps."""
    abar = schedule.alpha_bar(t)
    if t < 1:
        raise ValueError(f"step {t} outside [1, {schedule.T}]")
    return math.sqrt(abar) * x0 + math.sqrt(1.0 - abar) * eps


def time_embedding(t: int, dim: int, dtype=torch.float64) -> torch.Tensor:
    """Sinusoidal embedding of an integer step."""
    if dim % 2:
        raise ValueError("time embedding width must be even")
    half = dim // 2
    freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=dtype) / half)
    args = float(t) * freqs
    return torch.cat([torch.sin(args), torch.cos(args)])


def _init_linear(layer: nn.Linear, gen: torch.Generator | None) -> None:
    # mirrors the nn.Linear default but draws from an explicit generator
    bound = 1.0 / math.sqrt(layer.in_features)
    with torch.no_grad():
        layer.weight.uniform_(-bound, bound, generator=gen)
        if layer.bias is not None:
            layer.bias.uniform_(-bound, bound, generator=gen)


class Denoiser(nn.Module):
    """MLP noise predictor conditioned on a shared environment latent and the step.

    Applied row-wise: each node latent is concatenated with the (broadcast)
    environment vector and sinusoidal time embedding.
    """

    def __init__(self, latent_dim: int, env_dim: int, hidden_dim: int = 64,
                 time_embed_dim: int = 16, gen: torch.Generator | None = None,
                 dtype=torch.float64):
        super().__init__()
        self.latent_dim = latent_dim
        self.env_dim = env_dim
        self.time_embed_dim = time_embed_dim
        self.dtype = dtype
        in_dim = latent_dim + env_dim + time_embed_dim
        self.net = nn.Sequential(
            nn.Linear(in_dim, hidden_dim, dtype=dtype),
            nn.SiLU(),
            nn.Linear(hidden_dim, hidden_dim, dtype=dtype),
            nn.SiLU(),
            nn.Linear(hidden_dim, latent_dim, dtype=dtype),
        )
        for mod in self.net:
            if isinstance(mod, nn.Linear):
                _init_linear(mod, gen)

    def forward(self, x_t: torch.Tensor, z_causal: torch.Tensor, t: int) -> torch.Tensor:
        n = x_t.shape[0]
        z = z_causal.reshape(1, -1).expand(n, -1)
        emb = time_embedding(t, self.time_embed_dim, self.dtype)
        emb = emb.reshape(1, -1).expand(n, -1)
        return self.net(torch.cat([x_t, z, emb], dim=1))


def predict_noise(x_t: torch.Tensor, z_causal: torch.Tensor, t: int,
                  params: Denoiser) -> torch.Tensor:
    if x_t.shape[1] != params.latent_dim:
        raise ValueError("latent width does not match denoiser")
    if z_causal.numel() != params.env_dim:
        raise ValueError("environment width does not match denoiser")
    return params(x_t, z_causal, t)


def denoise_step(x_t: torch.Tensor, t: int, z_causal: torch.Tensor,
                 params: Denoiser, schedule: NoiseSchedule,
                 rng: torch.Generator | None = None,
                 noise: torch.Tensor | None = None) -> torch.Tensor:
    """One reverse step x_t -> x_{t-1}; deterministic at t = 1."""
    if t < 1:
        raise ValueError(f"step {t} outside [1, {schedule.T}]")
    eps_hat = predict_noise(x_t, z_causal, t, params)
    beta = schedule.beta(t)
    alpha = schedule.alpha(t)
    abar = schedule.alpha_bar(t)
    mean = (x_t - beta / math.sqrt(1.0 - abar) * eps_hat) / math.sqrt(alpha)
    if t == 1:
        return mean
    sigma = math.sqrt(schedule.posterior_var(t))
    if noise is None:
        noise = torch.randn(x_t.shape, generator=rng, dtype=x_t.dtype)
    return mean + sigma * noise


def reverse_sample(x_start: torch.Tensor, z_causal: torch.Tensor,
                   params: Denoiser, schedule: NoiseSchedule,
                   rng: torch.Generator | None = None,
                   t_start: int | None = None,
                   noises: list[torch.Tensor] | None = None) -> torch.Tensor:
    """Run the reverse chain from t_start (default T) down to 1.

    `noises` optionally freezes the per-step stochastic terms (t_start..2,
    in loop order) for reproducibility checks.
    """
    t_start = schedule.T if t_start is None else t_start
    if not 1 <= t_start <= schedule.T:
        raise ValueError(f"t_start {t_start} outside [1, {schedule.T}]")
    x = x_start
    for idx, t in enumerate(range(t_start, 0, -1)):
        noise = noises[idx] if (noises is not None and t > 1) else None
        x = denoise_step(x, t, z_causal, params, schedule, rng, noise=noise)
        if not torch.isfinite(x).all():
            raise RuntimeError(f"non-finite latents during reverse sampling at step t={t}")
    return x


def corrupt_and_reconstruct(x0: torch.Tensor, z_causal: torch.Tensor,
                            params: Denoiser, schedule: NoiseSchedule,
                            rng: torch.Generator | None = None,
                            t_start: int | None = None,
                            corrupt_eps: torch.Tensor | None = None,
                            noises: list[torch.Tensor] | None = None) -> torch.Tensor:
    """Corrupt latents to t_start with the closed-form marginal, then denoise back.

    This is the inference handoff: embeddings keep user/item identity because
    the chain starts from partially corrupted latents, not pure noise.
    """
    t_start = schedule.T // 2 if t_start is None else t_start
    if t_start == 0:
        return x0
    if corrupt_eps is None:
        corrupt_eps = torch.randn(x0.shape, generator=rng, dtype=x0.dtype)
    x_t = q_sample(x0, t_start, corrupt_eps, schedule)
    return reverse_sample(x_t, z_causal, params, schedule, rng,
                          t_start=t_start, noises=noises)


def diffusion_loss(x0: torch.Tensor, z_causal: torch.Tensor, params: Denoiser,
                   schedule: NoiseSchedule, rng: torch.Generator | None = None,
                   t: int | None = None,
                   eps: torch.Tensor | None = None) -> torch.Tensor:
    """Simplified noise-matching objective: mean squared error of predicted noise.

    Draws t uniformly from {1..T} and fresh Gaussian noise unless both are
    pinned; averages over nodes and dimensions.
    """
    if t is None:
        t = int(torch.randint(1, schedule.T + 1, (1,), generator=rng).item())
    if eps is None:
        eps = torch.randn(x0.shape, generator=rng, dtype=x0.dtype)
    x_t = q_sample(x0, t, eps, schedule)
    eps_hat = predict_noise(x_t, z_causal, t, params)
    return ((eps - eps_hat) ** 2).mean()
