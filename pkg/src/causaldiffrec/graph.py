"""Bipartite user-item adjacency, symmetric normalization, and edge edits."""

import numpy as np
import scipy.sparse as sp
import torch

from .data import InteractionTable


class BipartiteGraph:
    """Binary bipartite adjacency over user nodes [0, m) and item nodes [m, m+n).

    The user-item incidence block is the source of truth; the full symmetric
    adjacency and its D^(-1/2) A D^(-1/2) normalization are derived views.
    Instances are immutable: edits produce new graphs.
    """

    def __init__(self, incidence: sp.csr_matrix, num_users: int, num_items: int):
        inc = incidence.tocsr().astype(np.int8)
        inc.eliminate_zeros()
        if inc.shape != (num_users, num_items):
            raise ValueError("incidence shape mismatch")
        if len(inc.data) and not np.all(inc.data == 1):
            raise ValueError("adjacency must be binary")
        self.inc = inc
        self.num_users = num_users
        self.num_items = num_items
        self._norm = None

    @classmethod
    def from_interactions(cls, train: InteractionTable) -> "BipartiteGraph":
        if len(train) == 0:
            raise ValueError("empty interaction table")
        data = np.ones(len(train), dtype=np.int8)
        inc = sp.csr_matrix((data, (train.users, train.items)),
                            shape=(train.num_users, train.num_items))
        inc.data[:] = 1  # duplicates collapse to a binary edge
        return cls(inc, train.num_users, train.num_items)

    @property
    def num_nodes(self) -> int:
        return self.num_users + self.num_items

    @property
    def num_edges(self) -> int:
        return int(self.inc.nnz)

    def degrees(self) -> np.ndarray:
        du = np.asarray(self.inc.sum(axis=1)).ravel()
        di = np.asarray(self.inc.sum(axis=0)).ravel()
        return np.concatenate([du, di]).astype(np.int64)

    def adjacency(self) -> sp.csr_matrix:
        """Full (m+n) x (m+n) symmetric adjacency with zero diagonal blocks."""
        m, n = self.num_users, self.num_items
        zero_uu = sp.csr_matrix((m, m), dtype=np.int8)
        zero_ii = sp.csr_matrix((n, n), dtype=np.int8)
        return sp.bmat([[zero_uu, self.inc], [self.inc.T, zero_ii]], format="csr")

    def normalized(self) -> sp.csr_matrix:
        """Symmetric-normalized adjacency; zero-degree nodes keep zero rows."""
        if self._norm is None:
            deg = self.degrees().astype(np.float64)
            inv_sqrt = np.zeros_like(deg)
            nz = deg > 0
            inv_sqrt[nz] = 1.0 / np.sqrt(deg[nz])
            d = sp.diags(inv_sqrt)
            self._norm = (d @ self.adjacency().astype(np.float64) @ d).tocsr()
        return self._norm

    def normalized_torch(self, dtype=torch.float64) -> torch.Tensor:
        coo = self.normalized().tocoo()
        idx = torch.from_numpy(np.vstack([coo.row, coo.col])).long()
        val = torch.from_numpy(coo.data).to(dtype)
        return torch.sparse_coo_tensor(idx, val, size=coo.shape,
                                       check_invariants=False).coalesce()

    def dump_edges(self, path) -> None:
        coo = self.inc.tocoo()
        order = np.lexsort((coo.col, coo.row))
        with open(path, "w", encoding="utf-8") as fh:
            for r, c in zip(coo.row[order], coo.col[order]):
                fh.write(f"{r}\t{c}\n")


class EditMask:
    """Boolean user-item positions whose edge state should flip, <= budget per user row."""

    def __init__(self, users, items, num_users: int, num_items: int,
                 edits_per_node: int | None = None):
        self.users = np.asarray(users, dtype=np.int64)
        self.items = np.asarray(items, dtype=np.int64)
        if len(self.users) != len(self.items):
            raise ValueError("users/items length mismatch")
        if len(self.users):
            if self.users.min() < 0 or self.users.max() >= num_users:
                raise ValueError("mask user index out of range")
            if self.items.min() < 0 or self.items.max() >= num_items:
                raise ValueError("mask item index out of range")
            pairs = set(zip(self.users.tolist(), self.items.tolist()))
            if len(pairs) != len(self.users):
                raise ValueError("duplicate mask positions")
            if edits_per_node is not None:
                counts = np.bincount(self.users, minlength=num_users)
                if counts.max() > edits_per_node:
                    raise ValueError("mask exceeds per-node edit budget")
        self.num_users = num_users
        self.num_items = num_items
        self.edits_per_node = edits_per_node

    @classmethod
    def from_full_matrix(cls, mat: sp.spmatrix, num_users: int, num_items: int,
                         edits_per_node: int | None = None) -> "EditMask":
        """Accept a full (m+n)^2 boolean matrix; reject off-block entries."""
        coo = mat.tocoo()
        m = num_users
        on_block = ((coo.row < m) & (coo.col >= m)) | ((coo.row >= m) & (coo.col < m))
        if not np.all(on_block[coo.data != 0]):
            raise ValueError("edit mask touches a user-user or item-item block")
        keep = (coo.row < m) & (coo.col >= m) & (coo.data != 0)
        return cls(coo.row[keep], coo.col[keep] - m, num_users, num_items,
                   edits_per_node)

    def __len__(self) -> int:
        return len(self.users)

    def to_incidence(self) -> sp.csr_matrix:
        data = np.ones(len(self.users), dtype=np.int8)
        mask = sp.csr_matrix((data, (self.users, self.items)),
                             shape=(self.num_users, self.num_items))
        mask.data[:] = 1
        return mask


def apply_edits(graph: BipartiteGraph, mask: EditMask) -> BipartiteGraph:
    """Flip the edge state at every masked position and re-normalize.

    Masked existing edges disappear, masked non-edges appear; this is the
    edit semantics that keeps the graph binary. Applying the same mask
    twice returns the original graph.
    """
    if (mask.num_users, mask.num_items) != (graph.num_users, graph.num_items):
        raise ValueError("mask shape does not match graph")
    if len(mask) == 0:
        return graph
    summed = (graph.inc + mask.to_incidence()).tocsr()
    summed.data = (summed.data % 2).astype(np.int8)
    summed.eliminate_zeros()
    return BipartiteGraph(summed, graph.num_users, graph.num_items)
