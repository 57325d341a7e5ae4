"""LightGCN backbone: propagation, dot-product scoring, BPR loss, top-k selection."""

import logging
from dataclasses import dataclass

import numpy as np
import torch
from torch.nn import functional as F

from .graph import BipartiteGraph

logger = logging.getLogger(__name__)


@dataclass
class EmbeddingTable:
    e0: torch.Tensor      # (m+n, d) layer-0 embeddings
    layers: int           # propagation depth L


@dataclass(frozen=True)
class BPRTriplet:
    user: int
    pos_item: int
    neg_item: int


def _as_sparse_adj(graph, dtype) -> torch.Tensor:
    if isinstance(graph, BipartiteGraph):
        return graph.normalized_torch(dtype=dtype)
    return graph


def propagate(table: EmbeddingTable, graph) -> torch.Tensor:
    """Mean of embeddings over propagation layers 0..L (parameter-free LightGCN)."""
    if table.layers < 0:
        raise ValueError("layer count must be >= 0")
    adj = _as_sparse_adj(graph, table.e0.dtype)
    layers = [table.e0]
    for _ in range(table.layers):
        layers.append(torch.sparse.mm(adj, layers[-1]))
    return torch.stack(layers).mean(dim=0)


def score(final: torch.Tensor, user: int, item: int, num_users: int) -> float:
    num_items = final.shape[0] - num_users
    if not (0 <= user < num_users and 0 <= item < num_items):
        raise IndexError(f"user {user} or item {item} out of range")
    return float(final[user] @ final[num_users + item])


def bpr_loss(final: torch.Tensor, users, pos_items, neg_items,
             num_users: int) -> torch.Tensor:
    """Mean -log sigmoid(r+ - r-) over the batch, in softplus form."""
    u = torch.as_tensor(np.asarray(users), dtype=torch.long)
    p = torch.as_tensor(np.asarray(pos_items), dtype=torch.long) + num_users
    n = torch.as_tensor(np.asarray(neg_items), dtype=torch.long) + num_users
    pos_scores = (final[u] * final[p]).sum(dim=1)
    neg_scores = (final[u] * final[n]).sum(dim=1)
    return F.softplus(neg_scores - pos_scores).mean()


def user_item_scores(final: torch.Tensor, user: int, num_users: int) -> np.ndarray:
    return (final[user] @ final[num_users:].T).detach().numpy()


def recommend_topk(final: torch.Tensor, user: int, k: int, exclude,
                   num_users: int) -> np.ndarray:
    """Top-k items by score with the user's train items masked out.

    Ties break by ascending item index. If fewer than k items remain the
    full remainder is returned (logged).
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    scores = user_item_scores(final, user, num_users)
    exclude = np.asarray(exclude, dtype=np.int64)
    scores[exclude] = -np.inf
    available = len(scores) - len(exclude)
    if k > available:
        logger.warning("top-%d requested but only %d items available for "
                       "user %d", k, available, user)
        k = available
    order = np.lexsort((np.arange(len(scores)), -scores))
    return order[:k]
