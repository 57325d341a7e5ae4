"""CausalDiffRec: environment-augmented causal diffusion for OOD graph recommendation."""

from .data import (InteractionRecord, InteractionTable, SplitBundle,
                   exposure_split, load_interactions, popularity_uniform_split,
                   random_iid_split, sample_negatives, temporal_split)
from .diffusion import (Denoiser, NoiseSchedule, denoise_step, diffusion_loss,
                        make_schedule, predict_noise, q_sample, reverse_sample)
from .env_generator import (EditPolicy, GeneratedEnvironment,
                            edit_probabilities, reinforce_update, sample_view,
                            variance_loss)
from .env_inference import EnvInference, EnvLatent, env_elbo_loss, env_kl, infer_env
from .evaluation import (RankingReport, compare_iid_ood, evaluate,
                         export_embeddings, ndcg_at_k, recall_at_k)
from .graph import BipartiteGraph, EditMask, apply_edits
from .recommender import (EmbeddingTable, bpr_loss, propagate, recommend_topk,
                          score)
from .training import (CausalDiffRecModel, LossBreakdown, TrainConfig, fit,
                       gradient_check, joint_loss, train_epoch)
from .vgae import (GraphEncoder, LatentGaussianState, decode, encode,
                   gaussian_kl, reparameterize, vgae_loss)

__version__ = "0.1.0"
