import numpy as np
import pytest

from gedi.data import ColumnSpec
from gedi.errors import NumericError
from gedi.graph import (build_graph, cosine_similarity_matrix, gcn_forward,
                        normalize_adjacency, project_embeddings, sparsify)
from gedi.model import ModelConfig, init_model_params, model_forward
from gedi.rng import substream
from gedi.tensor import Tensor


def test_projection_identity_nonnegative():
    Z = Tensor(np.array([[1.0, 2.0], [0.5, 0.0]]))
    out = project_embeddings(Z, Tensor(np.eye(2)))
    assert np.array_equal(out.data, Z.data)


def test_projection_negative_row_zeroed():
    Z = Tensor(np.array([[-1.0, -2.0]]))
    out = project_embeddings(Z, Tensor(np.eye(2)))
    assert np.array_equal(out.data, np.zeros((1, 2)))


def test_projection_hand_case():
    Z = Tensor(np.array([[1.0, -1.0], [2.0, 0.5]]))
    W = Tensor(np.array([[0.5, -1.0], [1.0, 2.0]]))
    out = project_embeddings(Z, W)
    assert np.allclose(out.data, np.maximum(Z.data @ W.data, 0.0))


def test_cosine_identical_rows():
    S = cosine_similarity_matrix(Tensor(np.array([[1.0, 2.0], [1.0, 2.0]])))
    assert np.allclose(S.data, 1.0)


def test_cosine_orthogonal_and_hand_value():
    S = cosine_similarity_matrix(Tensor(np.array([[1.0, 0.0], [0.0, 1.0], [1.0, 1.0]])))
    assert abs(S.data[0, 1]) < 1e-12
    assert abs(S.data[2, 0] - 1.0 / np.sqrt(2.0)) < 1e-9  # 0.70711


def test_cosine_zero_row_safe():
    S = cosine_similarity_matrix(Tensor(np.array([[0.0, 0.0], [1.0, 1.0]])))
    assert np.all(S.data[0] == 0.0)


def test_cosine_exact_symmetry():
    Zs = Tensor(np.abs(substream(0, "sym").normal(size=(16, 8))))
    S = cosine_similarity_matrix(Zs).data
    assert np.array_equal(S, S.T)  # bitwise


def test_sparsify_strict_threshold():
    S = Tensor(np.array([[1.0, 0.5], [0.5, 1.0]]))
    out = sparsify(S, 0.5)  # tie at the threshold is dropped
    assert out.data[0, 1] == 0.0 and out.data[1, 0] == 0.0
    assert out.data[0, 0] == 1.0  # diagonal survives epsilon below 1


def test_sparsify_monotone_in_epsilon():
    S = cosine_similarity_matrix(Tensor(np.abs(substream(1, "mono").normal(size=(12, 6)))))
    nnz = [np.count_nonzero(sparsify(S, e).data) for e in (0.0, 0.3, 0.6, 0.9)]
    assert nnz == sorted(nnz, reverse=True)


def test_sparsify_invalid_epsilon():
    S = Tensor(np.eye(2))
    with pytest.raises(ValueError):
        sparsify(S, 1.0)


def test_normalize_identity():
    A = normalize_adjacency(Tensor(np.eye(3)))
    assert np.allclose(A.data, np.eye(3))


def test_normalize_hand_case():
    A = normalize_adjacency(Tensor(np.array([[1.0, 0.9], [0.9, 1.0]])))
    assert np.allclose(A.data, [[1 / 1.9, 0.9 / 1.9], [0.9 / 1.9, 1 / 1.9]], atol=1e-5)
    assert abs(A.data[0, 0] - 0.52632) < 1e-5


def test_normalize_isolated_node():
    Sstar = np.array([[1.0, 0.0], [0.0, 0.7]])
    A = normalize_adjacency(Tensor(Sstar))
    assert np.allclose(A.data[0], [1.0, 0.0])


def test_normalize_zero_degree_raises():
    with pytest.raises(NumericError):
        normalize_adjacency(Tensor(np.array([[1.0, 0.0], [0.0, 0.0]])))


def test_gcn_identity_case():
    Z = Tensor(np.array([[1.0, 2.0], [3.0, 0.5]]))
    params = {"gcn.W0": Tensor(np.eye(2))}
    G = gcn_forward(Z, Tensor(np.eye(2)), params, 1)
    assert np.array_equal(G.data, Z.data)


def test_gcn_disconnected_node_local():
    A = Tensor(np.array([[1.0, 0.0], [0.0, 1.0]]))
    W = Tensor(substream(0, "w").normal(size=(3, 3)))
    Z1 = np.array([[1.0, 2.0, 3.0], [4.0, 5.0, 6.0]])
    Z2 = Z1.copy()
    Z2[1] = [9.0, 9.0, 9.0]
    g1 = gcn_forward(Tensor(Z1), A, {"gcn.W0": W}, 1).data
    g2 = gcn_forward(Tensor(Z2), A, {"gcn.W0": W}, 1).data
    assert np.array_equal(g1[0], g2[0])


def test_gcn_two_node_hand_case():
    A = np.array([[0.6, 0.4], [0.4, 0.6]])
    Z = np.array([[1.0, -1.0], [2.0, 0.5]])
    W = np.array([[1.0, 0.5], [-0.5, 1.0]])
    G = gcn_forward(Tensor(Z), Tensor(A), {"gcn.W0": Tensor(W)}, 1)
    assert np.allclose(G.data, np.maximum(A @ Z @ W, 0.0))


def test_build_graph_properties_random_batches():
    specs = [ColumnSpec("a", "continuous"), ColumnSpec("b", "continuous"),
             ColumnSpec("c", "categorical", ["x", "y"])]
    cfg = ModelConfig(dim=8, heads=2, layers=1, head_width=8, epsilon=0.4)
    for seed, B in ((0, 8), (1, 32), (2, 64)):
        params = init_model_params(specs, cfg, substream(seed, "init"))
        rng = substream(seed, "bx")
        X = rng.normal(size=(B, 3))
        X[:, 2] = rng.integers(0, 2, size=B)
        M = (rng.random((B, 3)) >= 0.3).astype(np.float64)
        fwd = model_forward(params, X, M, specs, cfg)
        # reconstruct the dense adjacency from the COO snapshot
        A = np.zeros((B, B))
        A[fwd.graph.rows, fwd.graph.cols] = fwd.graph.values
        assert np.array_equal(A, A.T)
        assert np.all(fwd.graph.degree > 0.0)
        ev = np.linalg.eigvalsh(A)
        assert ev.min() >= -1.0 - 1e-9 and ev.max() <= 1.0 + 1e-9


def test_dead_row_gets_unit_self_loop():
    Z = Tensor(np.array([[1.0, 1.0], [-5.0, -5.0]]))  # second row dies under ReLU
    params = {"proj.W": Tensor(np.eye(2)), "gcn.W0": Tensor(np.eye(2))}
    A, graph = build_graph(Z, params, 0.5)
    assert A.data[1, 1] == 1.0
    assert np.all(graph.degree > 0.0)
