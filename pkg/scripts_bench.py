"""Scratch experiment for the directional OOD criterion (not shipped)."""
import sys
import time

import torch

from causaldiffrec.evaluation import evaluate
from causaldiffrec.graph import BipartiteGraph
from causaldiffrec.synthetic import popularity_shift_benchmark
from causaldiffrec.training import TrainConfig, fit, inference_embeddings

EPOCHS = int(sys.argv[1]) if len(sys.argv) > 1 else 8
LAM2 = float(sys.argv[2]) if len(sys.argv) > 2 else 1e-3

def run(seed, full):
    bundle = popularity_shift_benchmark(num_users=500, num_items=300, seed=seed)
    kw = dict(epochs=EPOCHS, batch_size=1024, latent_dim=16, diffusion_steps=20,
              env_dim=8, env_hidden_dim=16, denoiser_hidden=32,
              time_embed_dim=8, candidate_cap=30, edits_per_node=2,
              learning_rate=1e-3, seed=seed, patience=50)
    if full:
        cfg = TrainConfig(n_envs=2, lambda1=0.1, lambda2=LAM2, lambda3=1e-3, **kw)
    else:
        cfg = TrainConfig(n_envs=1, no_generator=True, no_env_inference=True,
                          lambda1=0, lambda2=0, lambda3=0, **kw)
    t0 = time.time()
    result = fit(bundle, cfg)
    state = result.state
    state.model.load_state_dict(result.best_model_state)
    final = inference_embeddings(state.model, state.graph, cfg)
    report = evaluate(final, bundle, ks=(20,))
    return (report.aggregate("recall", 20), report.aggregate("ndcg", 20),
            time.time() - t0)

wins_r = wins_n = 0
tot = 0.0
for seed in range(5):
    r_full, n_full, t1 = run(seed, True)
    r_plain, n_plain, t2 = run(seed, False)
    tot += t1 + t2
    wins_r += r_full > r_plain
    wins_n += n_full > n_plain
    print(f"seed {seed}: full R@20={r_full:.4f} N@20={n_full:.4f} | "
          f"plain R@20={r_plain:.4f} N@20={n_plain:.4f} | "
          f"dR={r_full-r_plain:+.4f} dN={n_full-n_plain:+.4f} "
          f"({t1:.0f}s/{t2:.0f}s)", flush=True)
print(f"wins: recall {wins_r}/5, ndcg {wins_n}/5, total {tot:.0f}s")
