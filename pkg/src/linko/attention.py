"""Multi-head attention over directed graphs (GAT) and hypergraphs (HAT)."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from . import autodiff as ad
from .autodiff import Module, Tensor
from .errors import NumericalError, ShapeError


@dataclass(frozen=True)
class EdgeGraph:
    """Edges grouped by target node: ``src[seg_ptr[p]:seg_ptr[p+1]]`` is p's neighbourhood."""

    src: np.ndarray
    seg_ptr: np.ndarray
    n_nodes: int

    @property
    def dst(self) -> np.ndarray:
        return np.repeat(np.arange(self.n_nodes), np.diff(self.seg_ptr))

    @property
    def n_edges(self) -> int:
        return len(self.src)

    @classmethod
    def from_adjacency(cls, adj, direction: str = "rows") -> "EdgeGraph":
        """``direction="rows"``: node p attends over {q : A[p, q] = 1}; ``"cols"`` flips it."""
        m = sp.csr_matrix(adj)
        if direction == "cols":
            m = m.T.tocsr()
        elif direction != "rows":
            raise ValueError(f"unknown direction {direction!r}")
        m.eliminate_zeros()
        m.sort_indices()
        if m.shape[0] != m.shape[1]:
            raise ShapeError(f"adjacency must be square, got {m.shape}")
        seg_ptr = m.indptr.astype(np.int64)
        if np.any(np.diff(seg_ptr) == 0):
            bad = int(np.flatnonzero(np.diff(seg_ptr) == 0)[0])
            raise NumericalError(f"node {bad} has no incoming edges (missing self-loop)")
        return cls(m.indices.astype(np.int64), seg_ptr, m.shape[0])


@dataclass(frozen=True)
class HyperGraph:
    """Incidence in both orientations: members per hyperedge and hyperedges per node."""

    edge_members: np.ndarray  # node ids, grouped by hyperedge
    edge_ptr: np.ndarray
    node_edges: np.ndarray  # hyperedge ids, grouped by node
    node_ptr: np.ndarray
    n_nodes: int
    n_edges: int

    @classmethod
    def from_incidence(cls, incidence, add_singletons: bool = True) -> "HyperGraph":
        h = sp.csr_matrix(incidence).astype(np.int8)
        h.eliminate_zeros()
        n, m = h.shape
        if add_singletons:
            lonely = np.flatnonzero(np.diff(h.indptr) == 0)
            if len(lonely):
                extra = sp.csr_matrix(
                    (np.ones(len(lonely), dtype=np.int8), (lonely, np.arange(len(lonely)))),
                    shape=(n, len(lonely)),
                )
                h = sp.hstack([h, extra]).tocsr()
                m = h.shape[1]
        csc = h.tocsc()
        csc.sort_indices()
        if np.any(np.diff(csc.indptr) == 0):
            raise NumericalError("hypergraph has an empty hyperedge")
        csr = h.tocsr()
        csr.sort_indices()
        if np.any(np.diff(csr.indptr) == 0):
            raise NumericalError("hypergraph node without any hyperedge")
        return cls(
            csc.indices.astype(np.int64), csc.indptr.astype(np.int64),
            csr.indices.astype(np.int64), csr.indptr.astype(np.int64), n, m,
        )


def glorot(rng, shape, fan_in=None, fan_out=None):
    fan_in = shape[0] if fan_in is None else fan_in
    fan_out = shape[-1] if fan_out is None else fan_out
    r = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-r, r, size=shape)


def _head_scores(x3: Tensor, a: Tensor) -> Tensor:
    # (N, H, F) . (H, F) -> (N, H)
    return ad.tsum(ad.mul(x3, a), axis=-1)


class GatLayer(Module):
    """Single GAT layer: per-head linear map, additive pair scores, concatenated heads, ELU."""

    def __init__(self, d_in, d_out, heads, rng, slope=0.2, dropout=0.0, init="glorot", name="gat"):
        if d_out % heads:
            raise ShapeError(f"output width {d_out} not divisible by {heads} heads")
        self.heads = heads
        self.f = d_out // heads
        self.slope = slope
        self.dropout = dropout
        if init == "identity":
            if d_in != d_out:
                raise ShapeError("identity init requires d_in == d_out")
            w = np.eye(d_in)
        else:
            w = glorot(rng, (d_in, d_out))
        self.W = ad.parameter(w, f"{name}.W")
        self.a_src = ad.parameter(glorot(rng, (heads, self.f), self.f, 1), f"{name}.a_src")
        self.a_dst = ad.parameter(glorot(rng, (heads, self.f), self.f, 1), f"{name}.a_dst")
        self.last_attention = None

    def transform(self, x: Tensor) -> Tensor:
        return ad.reshape(ad.matmul(x, self.W), (x.shape[0], self.heads, self.f))

    def forward(self, x: Tensor, graph: EdgeGraph, rng=None) -> Tensor:
        if x.shape[0] != graph.n_nodes:
            raise ShapeError(f"{x.shape[0]} feature rows for a {graph.n_nodes}-node graph")
        h = self.transform(x)
        s_src = _head_scores(h, self.a_src)
        s_dst = _head_scores(h, self.a_dst)
        e = ad.add(ad.embedding_gather(s_dst, graph.dst), ad.embedding_gather(s_src, graph.src))
        alpha = ad.segment_softmax(ad.leaky_relu(e, self.slope), graph.seg_ptr)
        self.last_attention = alpha.data
        alpha = ad.dropout(alpha, self.dropout, rng, self.training)
        out = ad.spmm_heads(alpha, graph.src, graph.seg_ptr, h)
        return ad.elu(ad.reshape(out, (graph.n_nodes, self.heads * self.f)))

    __call__ = forward


class HatLayer(Module):
    """Hypergraph attention: nodes -> hyperedges, then hyperedges -> nodes."""

    def __init__(self, d_in, d_out, heads, rng, slope=0.2, dropout=0.0, init="glorot", name="hat"):
        if d_out % heads:
            raise ShapeError(f"output width {d_out} not divisible by {heads} heads")
        self.heads = heads
        self.f = d_out // heads
        self.slope = slope
        self.dropout = dropout
        w = np.eye(d_in) if init == "identity" else glorot(rng, (d_in, d_out))
        self.W = ad.parameter(w, f"{name}.W")
        self.a_member = ad.parameter(glorot(rng, (heads, self.f), self.f, 1), f"{name}.a_member")
        self.a_node = ad.parameter(glorot(rng, (heads, self.f), self.f, 1), f"{name}.a_node")
        self.a_edge = ad.parameter(glorot(rng, (heads, self.f), self.f, 1), f"{name}.a_edge")
        self.last_attention = None

    def forward(self, x: Tensor, graph: HyperGraph, rng=None) -> Tensor:
        if x.shape[0] != graph.n_nodes:
            raise ShapeError(f"{x.shape[0]} feature rows for a {graph.n_nodes}-node hypergraph")
        h = ad.reshape(ad.matmul(x, self.W), (x.shape[0], self.heads, self.f))
        # phase 1: each hyperedge attends over its member nodes
        member_score = ad.leaky_relu(_head_scores(h, self.a_member), self.slope)
        beta = ad.segment_softmax(ad.embedding_gather(member_score, graph.edge_members), graph.edge_ptr)
        beta_weights = beta.data
        beta = ad.dropout(beta, self.dropout, rng, self.training)
        edge_feat = ad.spmm_heads(beta, graph.edge_members, graph.edge_ptr, h)
        # phase 2: each node attends over its incident hyperedges
        node_of_pair = np.repeat(np.arange(graph.n_nodes), np.diff(graph.node_ptr))
        s = ad.add(
            ad.embedding_gather(_head_scores(h, self.a_node), node_of_pair),
            ad.embedding_gather(_head_scores(edge_feat, self.a_edge), graph.node_edges),
        )
        alpha = ad.segment_softmax(ad.leaky_relu(s, self.slope), graph.node_ptr)
        self.last_attention = (beta_weights, alpha.data)
        alpha = ad.dropout(alpha, self.dropout, rng, self.training)
        out = ad.spmm_heads(alpha, graph.node_edges, graph.node_ptr, edge_feat)
        return ad.elu(ad.reshape(out, (graph.n_nodes, self.heads * self.f)))

    __call__ = forward


def gat_forward(x, adj, layer: GatLayer, direction="rows", rng=None) -> Tensor:
    return layer(ad.as_tensor(x), EdgeGraph.from_adjacency(adj, direction), rng)


def hat_forward(x, incidence, layer: HatLayer, rng=None) -> Tensor:
    return layer(ad.as_tensor(x), HyperGraph.from_incidence(incidence), rng)
