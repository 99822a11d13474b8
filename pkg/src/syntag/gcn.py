"""Graph convolution over dependency trees.

The tree is viewed as an undirected graph with self-loops: the adjacency has
a 1 for each head-dependent pair in both directions and on the diagonal.
A layer aggregates transformed neighbor features, normalizes by the degree
(neighbor count including self) and applies ReLU:

    out_t = relu( sum_j a[t, j] * (g_prev[j] @ w) / degree_t + b )

A config switch (`self_only`) changes the feature term to use only the
node's own row, in which case the neighbor sum collapses and the layer is
relu(g_prev @ w + b) exactly; the default is the aggregation above.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import Tensor, bmm_const, constant, matmul, relu, reshape
from .errors import DimensionError
from .initializers import glorot, zeros


@dataclass
class AdjacencyMatrix:
    n: int
    a: np.ndarray
    degrees: np.ndarray

    def normalized(self):
        return self.a / self.degrees[:, None]


def build_adjacency(heads):
    """Symmetric 0/1 adjacency with self-loops from a validated head list."""
    n = len(heads)
    a = np.eye(n)
    for i, h in enumerate(heads):
        if h != 0:
            a[i, h - 1] = 1.0
            a[h - 1, i] = 1.0
    return AdjacencyMatrix(n=n, a=a, degrees=a.sum(axis=1))


def batch_normalized_adjacency(heads_list, n_max):
    """Stack row-normalized adjacencies padded to n_max.

    Padded positions get a bare self-loop so their degree is 1; their
    output rows are never consumed downstream.
    """
    batch = len(heads_list)
    out = np.zeros((batch, n_max, n_max))
    for b, heads in enumerate(heads_list):
        adj = build_adjacency(heads)
        out[b, : adj.n, : adj.n] = adj.normalized()
        for i in range(adj.n, n_max):
            out[b, i, i] = 1.0
    return out


class GcnParams:
    """Per-layer weight and bias; the first layer maps input_dim -> hidden."""

    def __init__(self, input_dim, hidden, layers, rng):
        if layers < 1:
            raise DimensionError(f"need at least one layer, got {layers}")
        self.input_dim = input_dim
        self.hidden = hidden
        self.weights = []
        self.biases = []
        for l in range(layers):
            d_in = input_dim if l == 0 else hidden
            self.weights.append(glorot(rng, d_in, hidden))
            self.biases.append(zeros(hidden))

    @property
    def num_layers(self):
        return len(self.weights)

    def parameters(self):
        out = {}
        for l, (w, b) in enumerate(zip(self.weights, self.biases)):
            out[f"{l}.w"] = w
            out[f"{l}.b"] = b
        return out


def gcn_layer(g_prev, adj, w, b, self_only=False):
    """One layer over a single sentence: (n, D) -> (n, H)."""
    if g_prev.data.shape[1] != w.data.shape[0]:
        raise DimensionError(
            f"gcn_layer: input dim {g_prev.data.shape} does not match "
            f"weight {w.data.shape}"
        )
    msg = matmul(g_prev, w)
    if self_only:
        return relu(msg + b)
    agg = matmul(constant(adj.normalized()), msg)
    return relu(agg + b)


def encode(g0, adj, params, self_only=False):
    """Full L-layer encoding of one sentence."""
    g = g0
    for w, b in zip(params.weights, params.biases):
        g = gcn_layer(g, adj, w, b, self_only=self_only)
    return g


def encode_batch(g0_flat, adj_norm, params, self_only=False):
    """L layers over a padded batch.

    g0_flat is (B * n_max, D); adj_norm is the (B, n_max, n_max) stack from
    batch_normalized_adjacency. Returns (B * n_max, H).
    """
    batch, n_max = adj_norm.shape[0], adj_norm.shape[1]
    g = g0_flat
    for w, b in zip(params.weights, params.biases):
        msg = matmul(g, w)
        if not self_only:
            msg3 = reshape(msg, (batch, n_max, w.data.shape[1]))
            msg = reshape(bmm_const(adj_norm, msg3), (batch * n_max, w.data.shape[1]))
        g = relu(msg + b)
    return g
