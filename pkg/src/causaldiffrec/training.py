"""Joint training loop: environment views, latent diffusion, and the weighted objective.

Per batch: the K edit policies sample graph views, the VGAE encodes each
view, the environment latent is inferred and conditions both the
noise-matching loss and the reverse reconstruction whose output seeds the
LightGCN backbone. The weighted sum of all terms trains the shared
parameters through AdamW; the policies train separately by REINFORCE.

Every random draw comes from a named per-epoch substream, so runs are
reproducible bit-for-bit under one seed and concurrency cannot reorder
draws.
"""

import logging
import math
from dataclasses import asdict, dataclass, field, fields

import numpy as np
import torch
from torch import nn

from . import diffusion as diff
from . import env_inference as envinf
from . import vgae
from .data import SplitBundle, sample_negatives
from .env_generator import (EditPolicy, GeneratedEnvironment, reinforce_update,
                            sample_view, variance_loss)
from .evaluation import evaluate
from .graph import BipartiteGraph
from .recommender import EmbeddingTable, bpr_loss, propagate
from .seeding import numpy_rng, torch_generator

logger = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "causaldiffrec-checkpoint"
CHECKPOINT_VERSION = 1


@dataclass
class TrainConfig:
    # joint objective
    lambda1: float = 0.1
    lambda2: float = 1e-3
    lambda3: float = 1e-3
    learning_rate: float = 1e-3
    weight_decay: float = 1e-4
    epochs: int = 30
    batch_size: int = 1024
    seed: int = 0
    patience: int = 10
    # environment generator
    n_envs: int = 2
    edits_per_node: int = 2
    candidate_cap: int = 50
    generator_lr: float = 1.0
    variance_sign: float = 1.0
    use_reward_baseline: bool = True
    # vgae
    latent_dim: int = 16
    feature_dim: int = 0          # 0 means "same as latent_dim"
    sigma_min: float = 1e-4
    sigma_max: float = 10.0
    recon_neg_ratio: int = 1
    # environment inference
    env_dim: int = 16
    env_hidden_dim: int = 32
    # diffusion
    diffusion_steps: int = 20
    beta_start: float = 1e-4
    beta_end: float = 0.02
    t_start_infer: int = -1       # -1 means "T // 2"
    time_embed_dim: int = 16
    denoiser_hidden: int = 64
    # backbone
    gcn_layers: int = 2
    topk: tuple = (10, 20)
    # ablations (Table-3 style arms)
    no_generator: bool = False
    no_env_inference: bool = False

    def validate(self) -> None:
        if min(self.lambda1, self.lambda2, self.lambda3) < 0:
            raise ValueError("loss weights must be nonnegative")
        if self.n_envs < 1:
            raise ValueError("need at least one environment")
        if not self.no_generator and self.n_envs < 2:
            raise ValueError("the environment generator needs K >= 2")
        if not 1 <= self.diffusion_steps <= 1000:
            raise ValueError("diffusion_steps outside [1, 1000]")
        if self.t_start_infer != -1 and not 0 <= self.t_start_infer <= self.diffusion_steps:
            raise ValueError("t_start_infer outside [0, T]")
        if self.batch_size < 1 or self.epochs < 0:
            raise ValueError("batch_size >= 1 and epochs >= 0 required")
        if not self.topk:
            raise ValueError("topk list must be nonempty")

    @property
    def effective_envs(self) -> int:
        return 1 if self.no_generator else self.n_envs

    @property
    def resolved_feature_dim(self) -> int:
        return self.feature_dim if self.feature_dim > 0 else self.latent_dim

    @property
    def resolved_t_start(self) -> int:
        return (self.diffusion_steps // 2 if self.t_start_infer == -1
                else self.t_start_infer)

    @property
    def plain_backbone(self) -> bool:
        """Both causal components off and their handoff unweighted: pure LightGCN+BPR."""
        return self.no_generator and self.no_env_inference and self.lambda2 == 0

    def to_dict(self) -> dict:
        out = asdict(self)
        out["topk"] = list(self.topk)
        return out

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        kwargs = dict(d)
        if "topk" in kwargs:
            kwargs["topk"] = tuple(kwargs["topk"])
        cfg = cls(**kwargs)
        cfg.validate()
        return cfg


@dataclass
class LossBreakdown:
    rec: float = 0.0
    generator: float = 0.0
    vgae: float = 0.0
    inv_simple: float = 0.0
    env_inf: float = 0.0
    total: float = 0.0

    def recompose(self, config: TrainConfig) -> float:
        return (self.rec + config.lambda1 * self.generator
                + config.lambda2 * (self.vgae + self.inv_simple)
                + config.lambda3 * self.env_inf)

    def render(self) -> str:
        return " ".join(f"{name}={getattr(self, name):.17g}"
                        for name in ("rec", "generator", "vgae", "inv_simple",
                                     "env_inf", "total"))


def joint_loss(rec, generator, vgae_term, inv_simple, env_inf,
               config: TrainConfig) -> tuple[torch.Tensor, LossBreakdown]:
    """Weighted objective: rec + l1*generator + l2*(vgae + inv_simple) + l3*env_inf.

    The ELBO terms arrive pre-negated (losses to minimize). Returns the
    differentiable total together with a float breakdown whose `total`
    recomposes from the components exactly.
    """
    parts = {"rec": rec, "generator": generator, "vgae": vgae_term,
             "inv_simple": inv_simple, "env_inf": env_inf}
    vals = {}
    for name, part in parts.items():
        val = float(part) if not torch.is_tensor(part) else float(part.detach())
        if not math.isfinite(val):
            raise ValueError(f"non-finite loss component: {name}")
        vals[name] = val
    as_t = {k: (v if torch.is_tensor(v) else torch.as_tensor(float(v), dtype=torch.float64))
            for k, v in parts.items()}
    total = (as_t["rec"] + config.lambda1 * as_t["generator"]
             + config.lambda2 * (as_t["vgae"] + as_t["inv_simple"])
             + config.lambda3 * as_t["env_inf"])
    breakdown = LossBreakdown(vals["rec"], vals["generator"], vals["vgae"],
                              vals["inv_simple"], vals["env_inf"], 0.0)
    breakdown.total = breakdown.recompose(config)
    return total, breakdown


class CausalDiffRecModel(nn.Module):
    """Shared learnable modules: free node features, VGAE encoder, env MLP, denoiser."""

    def __init__(self, num_users: int, num_items: int, config: TrainConfig):
        super().__init__()
        self.num_users = num_users
        self.num_items = num_items
        f = config.resolved_feature_dim
        feat = torch.empty(num_users + num_items, f, dtype=torch.float64)
        feat.normal_(0.0, 0.1, generator=torch_generator(config.seed, "init/features"))
        self.features = nn.Parameter(feat)
        self.encoder = vgae.GraphEncoder(
            f, config.latent_dim, config.sigma_min, config.sigma_max,
            gen=torch_generator(config.seed, "init/encoder"))
        self.env_net = envinf.EnvInference(
            config.latent_dim, config.env_hidden_dim, config.env_dim,
            config.sigma_min, config.sigma_max,
            gen=torch_generator(config.seed, "init/env"))
        self.denoiser = diff.Denoiser(
            config.latent_dim, config.env_dim, config.denoiser_hidden,
            config.time_embed_dim, gen=torch_generator(config.seed, "init/denoiser"))
        self.schedule = diff.make_schedule(config.diffusion_steps,
                                           config.beta_start, config.beta_end)


@dataclass
class EpochStreams:
    batching: np.random.Generator
    negatives: np.random.Generator
    generator: torch.Generator
    vgae: torch.Generator
    env: torch.Generator
    diffusion: torch.Generator
    recon_pairs: np.random.Generator


def make_epoch_streams(seed: int, epoch: int) -> EpochStreams:
    tag = f"epoch{epoch}"
    return EpochStreams(
        batching=numpy_rng(seed, f"{tag}/batching"),
        negatives=numpy_rng(seed, f"{tag}/negatives"),
        generator=torch_generator(seed, f"{tag}/generator"),
        vgae=torch_generator(seed, f"{tag}/vgae"),
        env=torch_generator(seed, f"{tag}/env"),
        diffusion=torch_generator(seed, f"{tag}/diffusion"),
        recon_pairs=numpy_rng(seed, f"{tag}/recon_pairs"),
    )


@dataclass
class EnvDraws:
    """All stochastic quantities of one environment branch, pre-drawn.

    Freezing these makes the joint loss a deterministic function of the
    parameters, which the finite-difference gradient check relies on.
    """

    vgae_eps: torch.Tensor
    env_eps: torch.Tensor | None
    diff_t: int
    diff_eps: torch.Tensor
    corrupt_eps: torch.Tensor
    reverse_noises: list[torch.Tensor]
    recon_neg: tuple[np.ndarray, np.ndarray]


def draw_env_randomness(view: BipartiteGraph, config: TrainConfig,
                        streams: EpochStreams) -> EnvDraws:
    n_nodes, d = view.num_nodes, config.latent_dim
    shape = (n_nodes, d)
    vgae_eps = torch.randn(shape, generator=streams.vgae, dtype=torch.float64)
    env_eps = None
    if not config.no_env_inference:
        env_eps = torch.randn((config.env_dim,), generator=streams.env,
                              dtype=torch.float64)
    t = int(torch.randint(1, config.diffusion_steps + 1, (1,),
                          generator=streams.diffusion).item())
    diff_eps = torch.randn(shape, generator=streams.diffusion, dtype=torch.float64)
    corrupt_eps = torch.randn(shape, generator=streams.diffusion, dtype=torch.float64)
    t_start = config.resolved_t_start
    reverse_noises = [torch.randn(shape, generator=streams.diffusion, dtype=torch.float64)
                      for _ in range(max(t_start - 1, 0))]
    n_neg = config.recon_neg_ratio * view.num_edges
    recon_neg = vgae.sample_non_edges(view, n_neg, streams.recon_pairs)
    return EnvDraws(vgae_eps, env_eps, t, diff_eps, corrupt_eps,
                    reverse_noises, recon_neg)


def environment_components(model: CausalDiffRecModel, view: BipartiteGraph,
                           batch_users, batch_pos, batch_neg,
                           config: TrainConfig, draws: EnvDraws) -> dict:
    """One environment branch of the joint loss; returns per-term tensors."""
    adj = view.normalized_torch()
    mu, sigma = model.encoder(adj, model.features)
    state = vgae.LatentGaussianState(mu=mu, sigma=sigma)
    vgae.reparameterize(state, eps=draws.vgae_eps)
    x0 = state.sample

    if config.no_env_inference:
        z = torch.zeros(config.env_dim, dtype=torch.float64)
        kl_e = torch.zeros((), dtype=torch.float64)
    else:
        env_latent = envinf.infer_env(x0, model.env_net, eps=draws.env_eps)
        z = env_latent.z
        kl_e = envinf.env_kl(env_latent)

    inv = diff.diffusion_loss(x0, z, model.denoiser, model.schedule,
                              t=draws.diff_t, eps=draws.diff_eps)
    e0 = diff.corrupt_and_reconstruct(
        x0, z, model.denoiser, model.schedule,
        t_start=config.resolved_t_start, corrupt_eps=draws.corrupt_eps,
        noises=draws.reverse_noises)
    final = propagate(EmbeddingTable(e0, config.gcn_layers), adj)
    bpr = bpr_loss(final, batch_users, batch_pos, batch_neg, model.num_users)

    recon = vgae.reconstruction_bce(view, e0, rng=None,
                                    neg_ratio=config.recon_neg_ratio,
                                    neg_pairs=draws.recon_neg)
    vgae_term = recon + vgae.gaussian_kl(mu, sigma)
    # environment ELBO: reconstruction surrogate is the negated task loss
    env_term = (torch.zeros((), dtype=torch.float64) if config.no_env_inference
                else envinf.env_elbo_loss(-(inv + bpr), kl_e))
    return {"bpr": bpr, "inv": inv, "vgae": vgae_term, "env": env_term}


@dataclass
class TrainState:
    model: CausalDiffRecModel
    policies: list[EditPolicy]
    optimizer: torch.optim.AdamW
    graph: BipartiteGraph
    config: TrainConfig
    next_epoch: int = 0


def init_state(bundle: SplitBundle, config: TrainConfig) -> TrainState:
    config.validate()
    torch.set_num_threads(1)  # keeps sparse reductions bit-stable
    graph = BipartiteGraph.from_interactions(bundle.train)
    model = CausalDiffRecModel(bundle.train.num_users, bundle.train.num_items,
                               config)
    policies = []
    if not config.no_generator:
        policies = [EditPolicy.build(graph, config.edits_per_node,
                                     config.candidate_cap,
                                     numpy_rng(config.seed, f"init/policy{k}"))
                    for k in range(config.n_envs)]
    optimizer = torch.optim.AdamW(model.parameters(), lr=config.learning_rate,
                                  weight_decay=config.weight_decay)
    return TrainState(model, policies, optimizer, graph, config)


def _grads_finite(model: nn.Module) -> bool:
    return all(p.grad is None or torch.isfinite(p.grad).all()
               for p in model.parameters())


def _batch_negatives(train, users, rng) -> np.ndarray:
    return np.array([sample_negatives(train, int(u), 1, rng)[0] for u in users])


def train_epoch(state: TrainState, bundle: SplitBundle, config: TrainConfig,
                epoch: int) -> LossBreakdown:
    """One pass over the train interactions; returns the mean loss breakdown."""
    model, train = state.model, bundle.train
    streams = make_epoch_streams(config.seed, epoch)
    perm = streams.batching.permutation(len(train))
    sums = LossBreakdown()
    n_batches = 0
    consecutive_skips = 0
    for start in range(0, len(perm), config.batch_size):
        chunk = perm[start:start + config.batch_size]
        users = train.users[chunk]
        pos = train.items[chunk]
        neg = _batch_negatives(train, users, streams.negatives)

        if config.plain_backbone:
            final = propagate(EmbeddingTable(model.features, config.gcn_layers),
                              state.graph)
            rec = bpr_loss(final, users, pos, neg, model.num_users)
            zero = torch.zeros((), dtype=torch.float64)
            total, breakdown = joint_loss(rec, zero, zero, zero, zero, config)
            envs = []
        else:
            if config.no_generator:
                envs = [GeneratedEnvironment(state.graph,
                                             torch.zeros(()), None)]
            else:
                envs = [sample_view(policy, state.graph, streams.generator)
                        for policy in state.policies]
            comps = []
            for env in envs:
                draws = draw_env_randomness(env.view, config, streams)
                comps.append(environment_components(
                    model, env.view, users, pos, neg, config, draws))
            bprs = [c["bpr"] for c in comps]
            rec = torch.stack(bprs).mean()
            inv = torch.stack([c["inv"] for c in comps]).mean()
            vgae_term = torch.stack([c["vgae"] for c in comps]).mean()
            env_term = torch.stack([c["env"] for c in comps]).mean()
            gen_term = (config.variance_sign * variance_loss(bprs)
                        if not config.no_generator
                        else torch.zeros((), dtype=torch.float64))
            total, breakdown = joint_loss(rec, gen_term, vgae_term, inv,
                                          env_term, config)
            for env, bpr in zip(envs, bprs):
                env.reward = -float(bpr.detach())

        state.optimizer.zero_grad()
        total.backward()
        if not _grads_finite(model):
            consecutive_skips += 1
            logger.warning("skipping step with non-finite gradients "
                           "(epoch %d, batch %d)", epoch, n_batches)
            if consecutive_skips >= 3:
                raise RuntimeError("training: aborting epoch after 3 "
                                   "consecutive non-finite gradient steps")
            continue
        consecutive_skips = 0
        state.optimizer.step()
        if state.policies and envs:
            reinforce_update(envs, state.policies, config.generator_lr,
                             config.use_reward_baseline)

        for name in ("rec", "generator", "vgae", "inv_simple", "env_inf", "total"):
            setattr(sums, name, getattr(sums, name) + getattr(breakdown, name))
        n_batches += 1
    if n_batches == 0:
        raise RuntimeError("training: epoch made no optimizer steps")
    for name in ("rec", "generator", "vgae", "inv_simple", "env_inf", "total"):
        setattr(sums, name, getattr(sums, name) / n_batches)
    state.next_epoch = epoch + 1
    return sums


def inference_embeddings(model: CausalDiffRecModel, graph: BipartiteGraph,
                         config: TrainConfig, stream: str = "eval") -> torch.Tensor:
    """Final embeddings for scoring: trained diffusion sampling + propagation.

    All noise comes from substreams named by `stream`, so evaluation is
    reproducible under the config seed.
    """
    with torch.no_grad():
        if config.plain_backbone:
            return propagate(EmbeddingTable(model.features, config.gcn_layers),
                             graph)
        adj = graph.normalized_torch()
        mu, _ = model.encoder(adj, model.features)
        x0 = mu  # posterior mean at inference; corruption noise below is seeded
        if config.no_env_inference:
            z = torch.zeros(config.env_dim, dtype=torch.float64)
        else:
            z = envinf.infer_env(
                x0, model.env_net,
                rng=torch_generator(config.seed, f"{stream}/env")).z
        e0 = diff.corrupt_and_reconstruct(
            x0, z, model.denoiser, model.schedule,
            rng=torch_generator(config.seed, f"{stream}/diffusion"),
            t_start=config.resolved_t_start)
        return propagate(EmbeddingTable(e0, config.gcn_layers), adj)


@dataclass
class FitResult:
    state: TrainState
    history: list[dict] = field(default_factory=list)
    best_epoch: int = -1
    best_metric: float = float("-inf")
    best_model_state: dict | None = None
    best_policy_states: list[dict] | None = None


def _early_stop_metric(report, ks) -> float:
    k = 20 if 20 in ks else max(ks)
    return report.aggregate("ndcg", k)


def fit(bundle: SplitBundle, config: TrainConfig) -> FitResult:
    """Train with early stopping on validation NDCG@20; keep the best snapshot."""
    state = init_state(bundle, config)
    result = FitResult(state)
    has_valid = len(bundle.valid) > 0
    if not has_valid:
        logger.warning("validation set empty; early stopping disabled")
    since_best = 0
    for epoch in range(config.epochs):
        breakdown = train_epoch(state, bundle, config, epoch)
        entry = {"epoch": epoch, "loss": breakdown, "valid": None}
        if has_valid:
            final = inference_embeddings(state.model, state.graph, config)
            valid_bundle = SplitBundle(bundle.train, bundle.test, bundle.valid,
                                       bundle.shift_kind)
            report = evaluate(final, valid_bundle, ks=config.topk)
            entry["valid"] = report.metrics()
            metric = _early_stop_metric(report, config.topk)
            if metric > result.best_metric:
                result.best_metric = metric
                result.best_epoch = epoch
                result.best_model_state = {
                    k: v.detach().clone()
                    for k, v in state.model.state_dict().items()}
                result.best_policy_states = [p.state_dict()
                                             for p in state.policies]
                since_best = 0
            else:
                since_best += 1
        result.history.append(entry)
        logger.info("epoch %d %s", epoch, breakdown.render())
        if has_valid and since_best >= config.patience:
            logger.info("early stopping at epoch %d (best epoch %d)",
                        epoch, result.best_epoch)
            break
    if result.best_model_state is None:
        result.best_model_state = {k: v.detach().clone()
                                   for k, v in state.model.state_dict().items()}
        result.best_policy_states = [p.state_dict() for p in state.policies]
        result.best_epoch = config.epochs - 1
    return result


def save_checkpoint(path, result: FitResult, config: TrainConfig,
                    meta: dict | None = None) -> None:
    payload = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "config": config.to_dict(),
        "meta": dict(meta or {}),
        "num_users": result.state.model.num_users,
        "num_items": result.state.model.num_items,
        "model_state": result.best_model_state,
        "policy_states": result.best_policy_states or [],
        "optimizer_state": result.state.optimizer.state_dict(),
        "rng": {"seed": config.seed, "next_epoch": result.state.next_epoch},
        "best": {"epoch": result.best_epoch, "metric": result.best_metric},
    }
    torch.save(payload, path)


def load_checkpoint(path) -> dict:
    try:
        payload = torch.load(path, weights_only=False)
    except Exception as exc:
        raise ValueError(f"corrupted checkpoint {path}: {exc}") from exc
    if not isinstance(payload, dict) or payload.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"corrupted checkpoint {path}: unrecognized format")
    return payload


def restore_model(payload: dict) -> tuple[CausalDiffRecModel, list[EditPolicy], TrainConfig]:
    config = TrainConfig.from_dict(payload["config"])
    model = CausalDiffRecModel(payload["num_users"], payload["num_items"], config)
    model.load_state_dict(payload["model_state"])
    policies = [EditPolicy.from_state_dict(s) for s in payload["policy_states"]]
    return model, policies, config


@dataclass
class GradCheckReport:
    max_rel_error: float
    worst_param: str
    per_group: dict
    tol: float
    passed: bool

    def render(self) -> str:
        lines = [f"{name} max_rel_error={err:.6g}"
                 for name, err in sorted(self.per_group.items())]
        lines.append(f"max_rel_error={self.max_rel_error:.6g} "
                     f"worst={self.worst_param} tol={self.tol:.6g} "
                     f"passed={'yes' if self.passed else 'NO'}")
        return "\n".join(lines)


def _micro_config(seed: int) -> TrainConfig:
    return TrainConfig(
        lambda1=0.1, lambda2=0.01, lambda3=0.001,
        latent_dim=3, feature_dim=3, n_envs=2, edits_per_node=1,
        candidate_cap=3, diffusion_steps=4, t_start_infer=2,
        env_dim=2, env_hidden_dim=3, denoiser_hidden=6, time_embed_dim=4,
        gcn_layers=1, batch_size=64, seed=seed)


def _micro_bundle() -> SplitBundle:
    from .data import InteractionTable
    users = np.repeat(np.arange(5), 3)
    items = np.array([(u + j) % 5 for u in range(5) for j in range(3)])
    train = InteractionTable(users, items, num_users=5, num_items=5)
    empty = train.subset(np.array([], dtype=np.int64))
    return SplitBundle(train, empty, empty, "random_iid")


def gradient_check(seed: int = 0, step: float = 1e-5,
                   tol: float = 1e-3) -> GradCheckReport:
    """Compare autograd gradients of the joint loss with central differences.

    Runs a 10-node full-pipeline instance at float64 with every random draw
    frozen (views, latent/diffusion noise, negatives), so the loss is a
    smooth deterministic function of the parameters. The policy logits are
    excluded: their score-function path is not part of the backpropagated
    objective.
    """
    config = _micro_config(seed)
    bundle = _micro_bundle()
    state = init_state(bundle, config)
    streams = make_epoch_streams(seed, 0)
    envs = [sample_view(policy, state.graph, streams.generator)
            for policy in state.policies]
    draws = [draw_env_randomness(env.view, config, streams) for env in envs]
    train = bundle.train
    users, pos = train.users, train.items
    neg = _batch_negatives(train, users, streams.negatives)

    def compute_total() -> torch.Tensor:
        comps = [environment_components(state.model, env.view, users, pos,
                                        neg, config, dr)
                 for env, dr in zip(envs, draws)]
        bprs = [c["bpr"] for c in comps]
        rec = torch.stack(bprs).mean()
        inv = torch.stack([c["inv"] for c in comps]).mean()
        vgae_term = torch.stack([c["vgae"] for c in comps]).mean()
        env_term = torch.stack([c["env"] for c in comps]).mean()
        gen_term = config.variance_sign * variance_loss(bprs)
        total, _ = joint_loss(rec, gen_term, vgae_term, inv, env_term, config)
        return total

    params = dict(state.model.named_parameters())
    analytic = torch.autograd.grad(compute_total(), list(params.values()))
    per_group = {}
    worst_name, worst_err = "", 0.0
    for (name, param), grad in zip(params.items(), analytic):
        flat = param.detach().view(-1)
        g_flat = grad.reshape(-1)
        group_err = 0.0
        for i in range(flat.numel()):
            orig = float(flat[i])
            with torch.no_grad():
                flat[i] = orig + step
                up = float(compute_total())
                flat[i] = orig - step
                down = float(compute_total())
                flat[i] = orig
            fd = (up - down) / (2.0 * step)
            a = float(g_flat[i])
            err = abs(a - fd) / max(abs(a), abs(fd), 1e-6)
            group_err = max(group_err, err)
        per_group[name] = group_err
        if group_err > worst_err:
            worst_name, worst_err = name, group_err
    return GradCheckReport(worst_err, worst_name, per_group, tol,
                           worst_err <= tol)
