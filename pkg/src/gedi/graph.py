"""Batch-level similarity graph construction and GCN propagation.

The graph is rebuilt on every forward pass from the current observation
embeddings: project, cosine similarity, threshold-sparsify, symmetrically
normalize. Gradients flow through the surviving similarity values and the
normalization; the keep/drop pattern itself is piecewise-constant.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .encoder import glorot
from .errors import NumericError
from .tensor import Tensor


@dataclass
class SimilarityGraph:
    """Sparse view of one batch adjacency (COO), plus degrees and threshold."""
    rows: np.ndarray
    cols: np.ndarray
    values: np.ndarray
    degree: np.ndarray
    epsilon: float
    size: int

    @property
    def nnz(self) -> int:
        return self.values.size


def init_graph_params(in_dim: int, cfg, rng: np.random.Generator) -> dict:
    d = cfg.dim
    params = {"proj.W": Tensor(glorot(rng, in_dim, d), requires_grad=True)}
    gin = in_dim
    for layer in range(cfg.gcn_layers):
        params[f"gcn.W{layer}"] = Tensor(glorot(rng, gin, d), requires_grad=True)
        gin = d
    return params


def project_embeddings(Z: Tensor, W_proj: Tensor) -> Tensor:
    return T.relu(T.matmul(Z, W_proj))


def cosine_similarity_matrix(Zs: Tensor) -> Tensor:
    """Pairwise cosine similarities; zero-norm rows get similarity 0.

    Symmetrized as (S + S^T)/2 so the result is exactly symmetric.
    """
    n = T.l2norm_rows(Zs)                         # (B, 1)
    safe = n + Tensor((n.data == 0.0).astype(np.float64))
    Zn = Zs / safe
    S = T.matmul(Zn, T.transpose(Zn))
    return (S + T.transpose(S)) * 0.5


def sparsify(S: Tensor, epsilon: float) -> Tensor:
    """Keep entries with S_ij strictly above epsilon (ties dropped).

    Positive diagonal entries (self-similarity) are always retained so each
    active node keeps its self-loop.
    """
    if not 0.0 <= epsilon < 1.0:
        raise ValueError(f"epsilon must lie in [0, 1), got {epsilon}")
    keep = S.data > epsilon
    diag = np.eye(S.shape[0], dtype=bool) & (S.data > 0.0)
    return S * Tensor((keep | diag).astype(np.float64))


def normalize_adjacency(Sstar: Tensor) -> Tensor:
    """A = D^{-1/2} S* D^{-1/2} with D the degree (row-sum) matrix."""
    deg = T.sum_(Sstar, axis=-1, keepdims=True)   # (B, 1)
    if np.any(deg.data <= 0.0):
        raise NumericError("degenerate zero-degree row in similarity graph")
    dinv = T.pow_scalar(deg, -0.5)
    # group the degree factors first: d_i * d_j is bitwise commutative, so
    # the normalized adjacency stays exactly symmetric
    return Sstar * (dinv * T.transpose(dinv))


def build_graph(Z: Tensor, params: dict, epsilon: float) -> tuple[Tensor, SimilarityGraph]:
    """Full graph generator: returns the dense adjacency Tensor used by the
    GCN plus a sparse COO snapshot for inspection/reporting."""
    Zs = project_embeddings(Z, params["proj.W"])
    S = cosine_similarity_matrix(Zs)
    Sstar = sparsify(S, epsilon)
    # all-ReLU-dead rows have zero self-similarity; give them a unit
    # self-loop (constant, no gradient) so normalization stays total
    dead = np.diag(Sstar.data) == 0.0
    if np.any(dead):
        Sstar = Sstar + Tensor(np.diag(dead.astype(np.float64)))
    A = normalize_adjacency(Sstar)
    rows, cols = np.nonzero(A.data)
    graph = SimilarityGraph(rows=rows, cols=cols, values=A.data[rows, cols].copy(),
                            degree=Sstar.data.sum(axis=-1), epsilon=epsilon,
                            size=A.shape[0])
    return A, graph


def gcn_forward(Z: Tensor, A: Tensor, params: dict, n_layers: int) -> Tensor:
    G = Z
    for layer in range(n_layers):
        G = T.relu(T.matmul(A, T.matmul(G, params[f"gcn.W{layer}"])))
    return G
