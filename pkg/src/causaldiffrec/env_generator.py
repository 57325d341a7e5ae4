"""Learned edge-edit policies producing diverse graph views, trained by REINFORCE.

Each of the K policies keeps per-user logits over a capped candidate list
(the user's edges plus sampled non-edges). Sampling a view toggles the
chosen candidate edges; the policy is scored by the view's task loss and
updated with the score-function estimator against a mean-reward baseline.
"""

import logging
from dataclasses import dataclass

import numpy as np
import torch

from .graph import BipartiteGraph, EditMask, apply_edits

logger = logging.getLogger(__name__)


class EditPolicy:
    """Per-user edit logits over fixed candidate items for one environment."""

    def __init__(self, logits: torch.Tensor, candidates: torch.Tensor,
                 valid: torch.Tensor, edits_per_node: int):
        self.logits = logits              # (U, C) parameter
        self.candidates = candidates      # (U, C) item indices, padded
        self.valid = valid                # (U, C) bool, False on padding
        self.edits_per_node = edits_per_node

    @classmethod
    def build(cls, graph: BipartiteGraph, edits_per_node: int,
              candidate_cap: int, rng: np.random.Generator,
              dtype=torch.float64) -> "EditPolicy":
        """Candidate list per user: all existing edges, padded with sampled non-edges."""
        m, n = graph.num_users, graph.num_items
        cap = min(candidate_cap, n)
        cands = np.zeros((m, cap), dtype=np.int64)
        valid = np.zeros((m, cap), dtype=bool)
        inc = graph.inc
        for u in range(m):
            edges = inc.indices[inc.indptr[u]:inc.indptr[u + 1]]
            if len(edges) >= cap:
                chosen = rng.choice(edges, size=cap, replace=False)
                chosen.sort()
            else:
                non_edges = np.setdiff1d(np.arange(n), edges, assume_unique=False)
                extra = rng.choice(non_edges, size=min(cap - len(edges), len(non_edges)),
                                   replace=False)
                chosen = np.concatenate([edges, np.sort(extra)])
            cands[u, :len(chosen)] = chosen
            valid[u, :len(chosen)] = True
        logits = torch.zeros((m, cap), dtype=dtype, requires_grad=True)
        return cls(logits, torch.from_numpy(cands), torch.from_numpy(valid),
                   edits_per_node)

    @property
    def num_users(self) -> int:
        return self.logits.shape[0]

    def masked_logits(self) -> torch.Tensor:
        return self.logits.masked_fill(~self.valid, float("-inf"))

    def state_dict(self) -> dict:
        return {"logits": self.logits.detach().clone(),
                "candidates": self.candidates.clone(),
                "valid": self.valid.clone(),
                "edits_per_node": self.edits_per_node}

    @classmethod
    def from_state_dict(cls, state: dict) -> "EditPolicy":
        logits = state["logits"].clone().requires_grad_(True)
        return cls(logits, state["candidates"], state["valid"],
                   int(state["edits_per_node"]))


@dataclass
class GeneratedEnvironment:
    view: BipartiteGraph
    log_prob: torch.Tensor          # scalar, keeps the policy graph
    mask: EditMask
    reward: float | None = None


def edit_probabilities(policy: EditPolicy, node: int) -> torch.Tensor:
    """Softmax over the node's candidate logits (valid entries only)."""
    valid = policy.valid[node]
    if not bool(valid.any()):
        raise ValueError(f"node {node} has an empty candidate list")
    return torch.softmax(policy.logits[node][valid], dim=0)


def sample_view(policy: EditPolicy, base: BipartiteGraph,
                rng: torch.Generator) -> GeneratedEnvironment:
    """Draw s edits per user without replacement and toggle them on the base graph.

    The recorded log-probability is the sum over chosen actions of their
    softmax log-probabilities (the product form of the policy likelihood),
    kept differentiable in the policy logits.
    """
    s = policy.edits_per_node
    if s == 0:
        zero = torch.zeros((), dtype=policy.logits.dtype)
        empty = EditMask([], [], base.num_users, base.num_items, s)
        return GeneratedEnvironment(base, zero, empty)
    lens = policy.valid.sum(dim=1)
    min_len = int(lens.min())
    if min_len == 0:
        raise ValueError("a node has an empty candidate list")
    if s > min_len:
        logger.warning("edits_per_node=%d exceeds the smallest candidate list "
                       "(%d); clamping per node", s, min_len)
    log_probs = torch.log_softmax(policy.masked_logits(), dim=1)
    probs = torch.exp(log_probs.detach())
    rows, cols = [], []
    if min_len >= s:
        picked = torch.multinomial(probs, s, replacement=False, generator=rng)
        for u in range(policy.num_users):
            for c in picked[u].tolist():
                rows.append(u)
                cols.append(c)
    else:
        for u in range(policy.num_users):
            s_u = min(s, int(lens[u]))
            picked_u = torch.multinomial(probs[u], s_u, replacement=False,
                                         generator=rng)
            for c in picked_u.tolist():
                rows.append(u)
                cols.append(c)
    rows_t = torch.as_tensor(rows, dtype=torch.long)
    cols_t = torch.as_tensor(cols, dtype=torch.long)
    log_prob = log_probs[rows_t, cols_t].sum()
    users = rows_t.numpy()
    items = policy.candidates[rows_t, cols_t].numpy()
    mask = EditMask(users, items, base.num_users, base.num_items,
                    policy.edits_per_node)
    return GeneratedEnvironment(apply_edits(base, mask), log_prob, mask)


def reinforce_update(envs: list[GeneratedEnvironment],
                     policies: list[EditPolicy], lr: float,
                     use_baseline: bool = True) -> list[EditPolicy]:
    """Ascend the score-function gradient of expected reward for each policy.

    reward = negated task loss on the view; the baseline is the mean reward
    across environments, so equal rewards produce a zero update exactly.
    Environments with non-finite rewards are skipped.
    """
    if len(envs) != len(policies):
        raise ValueError("need one environment per policy")
    usable = [(env, pol) for env, pol in zip(envs, policies)
              if env.reward is not None and np.isfinite(env.reward)]
    skipped = len(envs) - len(usable)
    if skipped:
        logger.warning("reinforce_update skipping %d environments with "
                       "non-finite rewards", skipped)
    if not usable:
        return policies
    rewards = [env.reward for env, _ in usable]
    if use_baseline and len(set(rewards)) == 1:
        return policies  # baseline cancels exactly
    baseline = sum(rewards) / len(rewards) if use_baseline else 0.0
    for env, policy in usable:
        advantage = env.reward - baseline
        if advantage == 0.0 or not env.log_prob.requires_grad:
            continue
        (grad,) = torch.autograd.grad(env.log_prob, policy.logits)
        with torch.no_grad():
            policy.logits += lr * advantage * grad
    return policies


def variance_loss(env_losses: list[torch.Tensor]) -> torch.Tensor:
    """Population variance (divide by K) of the per-environment task losses."""
    if len(env_losses) < 2:
        raise ValueError("variance needs >=2 environments")
    stacked = torch.stack([loss if torch.is_tensor(loss)
                           else torch.as_tensor(loss, dtype=torch.float64)
                           for loss in env_losses])
    return ((stacked - stacked.mean()) ** 2).mean()
