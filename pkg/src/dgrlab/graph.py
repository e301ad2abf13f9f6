"""Distortion graph construction.

A batch of per-sample features becomes one graph: learned node embeddings
(row-wise MLP), an edge tensor initialized from pairwise Hadamard products
and refined by a GCN over the line graph of all ordered pairs, and the two
pooling operators that bridge edges back to nodes.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .autodiff import Tensor, gather_rows, matmul, mean_over_axis, relu
from .nn import GcnStack, Mlp


@dataclass
class DGR:
    """One distortion's graph: nodes V (N x C), edges E (N x N x C_E), and
    the node adjacency A_V derived from E by channel-average pooling."""

    V: Tensor
    E: Tensor
    A_V: Tensor
    type_id: int | None = None

    @property
    def n(self) -> int:
        return self.V.shape[0]


def build_nodes(features: Tensor, node_builder: Mlp) -> Tensor:
    """Row-wise node embeddings from backbone features."""
    return node_builder(features)


def init_edges(v: Tensor) -> Tensor:
    """Initial edge embeddings e0[i, j] = v[i] * v[j] (Hadamard), shape (N, N, C)."""
    n, c = v.shape
    idx_i = np.repeat(np.arange(n), n)
    idx_j = np.tile(np.arange(n), n)
    e0 = gather_rows(v, idx_i) * gather_rows(v, idx_j)
    return e0.reshape(n, n, c)


def line_graph_adjacency(n: int) -> np.ndarray:
    """Binary adjacency over the N^2 ordered node pairs.

    Edges (i, j) and (p, q) are adjacent iff they share an endpoint as sets
    ({i, j} and {p, q} intersect) and are not the same pair. Zero diagonal.
    """
    if n < 1:
        raise ValueError(f"need at least one node, got n={n}")
    idx_i = np.repeat(np.arange(n), n)
    idx_j = np.tile(np.arange(n), n)
    share = ((idx_i[:, None] == idx_i[None, :]) | (idx_i[:, None] == idx_j[None, :])
             | (idx_j[:, None] == idx_i[None, :]) | (idx_j[:, None] == idx_j[None, :]))
    adj = share.astype(np.float64)
    np.fill_diagonal(adj, 0.0)
    return adj


def normalize_adjacency(a: Tensor) -> Tensor:
    """Symmetric renormalization D^{-1/2} (A + I) D^{-1/2}.

    D holds the row sums of A + I; the self-loop keeps every degree
    positive, and the output has spectral radius at most 1 for symmetric
    nonnegative input. Differentiable in A.
    """
    m = a.shape[0]
    if a.ndim != 2 or a.shape[1] != m:
        raise ValueError(f"adjacency must be square, got shape {a.shape}")
    with_loops = a + Tensor(np.eye(m))
    d = with_loops.sum_over_axis(1)
    d_inv_sqrt = d ** -0.5
    return with_loops * d_inv_sqrt.reshape(m, 1) * d_inv_sqrt.reshape(1, m)


@lru_cache(maxsize=64)
def normalized_line_graph(n: int) -> np.ndarray:
    """Cached constant: normalize_adjacency(line_graph_adjacency(n))."""
    out = normalize_adjacency(Tensor(line_graph_adjacency(n))).data
    out.flags.writeable = False
    return out


def edge_gcn(e0: Tensor, stack: GcnStack) -> Tensor:
    """Refine edges over the line graph: E <- ReLU(A_hat E W) per layer,
    last layer linear. Input (N, N, C), output (N, N, C_E)."""
    n = e0.shape[0]
    flat = e0.reshape(n * n, e0.shape[2])
    adj = Tensor(normalized_line_graph(n))
    out = stack.propagate(adj, flat, final_relu=False)
    return out.reshape(n, n, stack.out_dim)


def node_pooling(e: Tensor) -> Tensor:
    """Channel-average the edge tensor into a node adjacency, then symmetrize
    and take magnitudes so it is a valid normalize_adjacency input."""
    m = mean_over_axis(e, 2)
    sym = (m + m.T) * 0.5
    return sym.abs()


def edge_pooling(e: Tensor) -> Tensor:
    """Per-node average over incident edges: row i of E averaged over j."""
    return mean_over_axis(e, 1)


def self_loop_edges(e: Tensor) -> Tensor:
    """Rows e[i, i], shape (N, C_E)."""
    n, _, c = e.shape
    diag = np.arange(n) * n + np.arange(n)
    return gather_rows(e.reshape(n * n, c), diag)


def build_dgr(features: Tensor, node_builder: Mlp, edge_builder: GcnStack,
              type_id: int | None = None) -> DGR:
    """Assemble the full graph from a feature batch."""
    v = build_nodes(features, node_builder)
    e0 = init_edges(v)
    e = edge_gcn(e0, edge_builder)
    a_v = node_pooling(e)
    return DGR(V=v, E=e, A_V=a_v, type_id=type_id)
