import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from causaldiffrec.env_inference import (EnvInference, EnvLatent,
                                         env_elbo_loss, env_kl, infer_env)
from causaldiffrec.seeding import numpy_rng, torch_generator

KL_SIGMA2 = 0.8068528194400547  # 0.5 * (4 - 1 - ln 4), mpmath


class TestInferEnv:
    def test_zero_everything_yields_biases(self):
        net = EnvInference(3, 4, 2)
        with torch.no_grad():
            for p in net.parameters():
                p.zero_()
            net.out.bias.copy_(torch.tensor([0.3, -0.2, 0.1, 0.4],
                                            dtype=torch.float64))
        latent = infer_env(torch.zeros(5, 3, dtype=torch.float64), net,
                           eps=torch.zeros(2, dtype=torch.float64))
        assert torch.allclose(latent.mu, torch.tensor([0.3, -0.2],
                                                      dtype=torch.float64))
        assert torch.allclose(latent.sigma,
                              torch.exp(torch.tensor([0.1, 0.4],
                                                     dtype=torch.float64)))

    def test_permutation_invariance(self):
        net = EnvInference(3, 4, 2, gen=torch_generator(0, "env"))
        x = torch.randn(9, 3, generator=torch_generator(1, "env_x"),
                        dtype=torch.float64)
        eps = torch.zeros(2, dtype=torch.float64)
        perm = torch.randperm(9, generator=torch_generator(2, "env_perm"))
        a = infer_env(x, net, eps=eps)
        b = infer_env(x[perm], net, eps=eps)
        assert torch.allclose(a.mu, b.mu, atol=1e-14)
        assert torch.allclose(a.z, b.z, atol=1e-14)

    def test_matches_pool_affine_oracle(self):
        net = EnvInference(2, 3, 2, gen=torch_generator(3, "env_oracle"))
        x = torch.randn(3, 2, generator=torch_generator(4, "env_ox"),
                        dtype=torch.float64)
        latent = infer_env(x, net, eps=torch.zeros(2, dtype=torch.float64))
        pooled = x.mean(dim=0).numpy()
        h = np.tanh(pooled @ net.hidden.weight.detach().numpy().T
                    + net.hidden.bias.detach().numpy())
        out = h @ net.out.weight.detach().numpy().T + net.out.bias.detach().numpy()
        np.testing.assert_allclose(latent.mu.detach().numpy(), out[:2], atol=1e-12)
        np.testing.assert_allclose(latent.sigma.detach().numpy(),
                                   np.exp(out[2:]), atol=1e-12)

    def test_dimension_mismatch(self):
        net = EnvInference(3, 4, 2)
        with pytest.raises(ValueError, match="width"):
            infer_env(torch.zeros(5, 7, dtype=torch.float64), net)

    def test_reparameterization_identity(self):
        net = EnvInference(3, 4, 2, gen=torch_generator(5, "env_rep"))
        x = torch.randn(4, 3, dtype=torch.float64)
        latent = infer_env(x, net, rng=torch_generator(6, "env_draw"))
        assert torch.allclose(latent.z, latent.mu + latent.sigma * latent.eps)


class TestEnvKL:
    def cases(self):
        t = lambda *v: torch.tensor(v, dtype=torch.float64)
        return [
            (t(0.0), t(1.0), 0.0),
            (t(1.0), t(1.0), 0.5),
            (t(0.0), t(2.0), KL_SIGMA2),
        ]

    def test_closed_forms(self):
        for mu, sigma, expected in self.cases():
            kl = env_kl(EnvLatent(mu=mu, sigma=sigma))
            assert float(kl) == pytest.approx(expected, abs=1e-9)

    @settings(max_examples=200, deadline=None)
    @given(st.lists(st.floats(-4, 4), min_size=1, max_size=5),
           st.lists(st.floats(0.05, 6), min_size=1, max_size=5))
    def test_nonnegative(self, mus, sigmas):
        n = min(len(mus), len(sigmas))
        latent = EnvLatent(mu=torch.tensor(mus[:n], dtype=torch.float64),
                           sigma=torch.tensor(sigmas[:n], dtype=torch.float64))
        assert float(env_kl(latent)) >= -1e-12


class TestEnvElbo:
    def test_zero_case(self):
        assert float(env_elbo_loss(0.0, 0.0)) == 0.0

    def test_monotone_in_kl(self):
        base = float(env_elbo_loss(-0.3, 0.1))
        for kl in (0.2, 0.5, 1.7):
            assert float(env_elbo_loss(-0.3, kl)) > base
            base = float(env_elbo_loss(-0.3, kl))

    def test_bound_on_enumerable_toy(self):
        # two-state environment with known likelihoods: for ANY q, the ELBO
        # (recon - KL) may not exceed the exact log-evidence
        rng = numpy_rng(0, "elbo_toy")
        for _ in range(300):
            prior = rng.dirichlet([1.0, 1.0])
            lik = rng.uniform(0.05, 1.0, size=2)      # p(y | e)
            q = rng.dirichlet([1.0, 1.0])
            recon = float(np.sum(q * np.log(lik)))
            kl = float(np.sum(q * np.log(q / prior)))
            elbo = -float(env_elbo_loss(recon, kl))
            evidence = math.log(float(np.sum(prior * lik)))
            assert elbo <= evidence + 1e-9
