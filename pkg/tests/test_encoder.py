import numpy as np

from gedi import tensor as T
from gedi.checks import tiny_model_config
from gedi.data import ColumnSpec
from gedi.encoder import embed_features, encode_observations, init_encoder_params, transformer_layer
from gedi.rng import substream
from gedi.tensor import Tensor


def _setup(seed=0):
    cfg = tiny_model_config()
    specs = [ColumnSpec("a", "continuous"), ColumnSpec("b", "continuous"),
             ColumnSpec("c", "categorical", ["x", "y", "z"])]
    params = init_encoder_params(specs, cfg, substream(seed, "init"))
    return cfg, specs, params


def test_categorical_embedding_gathers_first_row():
    cfg, specs, params = _setup()
    X = np.array([[0.0, 0.0, 0.0]])
    E = embed_features(params, X, np.ones((1, 3)), specs, cfg)
    assert np.array_equal(E.data[0, 2], params["emb.c"].data[0])


def test_equal_continuous_values_distinct_embeddings():
    cfg, specs, params = _setup()
    X = np.array([[1.7, 1.7, 0.0]])
    E = embed_features(params, X, np.ones((1, 3)), specs, cfg)
    assert not np.allclose(E.data[0, 0], E.data[0, 1])  # distinct feature one-hots


def test_zero_value_embedding_is_bare_onehot_projection():
    cfg, specs, params = _setup()
    X = np.array([[0.0, 3.0, 1.0]])
    E = embed_features(params, X, np.ones((1, 3)), specs, cfg)
    onehot = np.zeros(3)
    onehot[1] = 1.0  # [value, onehot(feature 0)] with value 0
    expected = onehot @ params["cont.W"].data + params["cont.b"].data
    assert np.allclose(E.data[0, 0], expected)


def test_single_observed_feature_gets_full_attention():
    cfg, specs, params = _setup()
    # with one unmasked key, every query's attention weight on it is 1
    scores = Tensor(substream(0, "sc").normal(size=(1, 2, 3, 3)))
    mask = np.array([[0.0, 1.0, 0.0]]).reshape(1, 1, 1, 3)
    attn = T.masked_softmax(scores, mask)
    assert np.allclose(attn.data[..., 1], 1.0)
    assert np.all(attn.data[..., [0, 2]] == 0.0)


def test_permutation_equivariance():
    cfg, specs, params = _setup()
    X = substream(0, "x").normal(size=(2, 3))
    M = np.array([[1.0, 1.0, 1.0], [1.0, 0.0, 1.0]])
    E = embed_features(params, X, M, specs, cfg)
    out = transformer_layer(params, "tf0.", E, M, cfg).data
    perm = [2, 0, 1]
    Ep = Tensor(E.data[:, perm])
    outp = transformer_layer(params, "tf0.", Ep, M[:, perm], cfg).data
    assert np.allclose(outp, out[:, perm], atol=1e-12)  # no positional encoding


def test_masked_value_does_not_leak():
    cfg, specs, params = _setup()
    X = substream(0, "x").normal(size=(3, 3))
    X[:, 2] = [0.0, 1.0, 2.0]  # valid category indices
    M = np.array([[1.0, 0.0, 1.0], [1.0, 1.0, 1.0], [0.0, 1.0, 1.0]])
    Z = encode_observations(params, X, M, specs, cfg).data
    X2 = X.copy()
    X2[0, 1] = 999.0
    X2[2, 0] = -999.0
    Z2 = encode_observations(params, X2, M, specs, cfg).data
    assert np.array_equal(Z, Z2)  # bit-identical


def test_pooling_single_observed_feature():
    cfg, specs, params = _setup()
    X = substream(1, "x").normal(size=(1, 3))
    M = np.array([[0.0, 1.0, 0.0]])
    E = embed_features(params, X, M, specs, cfg)
    final = E
    for layer in range(cfg.layers):
        final = transformer_layer(params, f"tf{layer}.", final, M, cfg)
    Z = encode_observations(params, X, M, specs, cfg)
    assert np.allclose(Z.data[0], final.data[0, 1], atol=1e-12)


def test_pooling_identical_representations():
    x = np.tile(np.arange(4.0), (1, 3, 1))  # all features identical
    for mask in ([1.0, 1.0, 1.0], [1.0, 0.0, 0.0], [0.0, 1.0, 1.0]):
        pooled = T.masked_mean_pool(Tensor(x), np.array([mask]))
        assert np.allclose(pooled.data[0], np.arange(4.0))


def test_pooling_respects_mask():
    cfg, specs, params = _setup()
    X = substream(2, "x").normal(size=(1, 3))
    full = encode_observations(params, X, np.ones((1, 3)), specs, cfg).data
    part = encode_observations(params, X, np.array([[1.0, 1.0, 0.0]]), specs, cfg).data
    assert not np.allclose(full, part)


def test_fully_masked_row_is_zero():
    cfg, specs, params = _setup()
    X = substream(3, "x").normal(size=(1, 3))
    Z = encode_observations(params, X, np.zeros((1, 3)), specs, cfg)
    assert np.array_equal(Z.data, np.zeros((1, cfg.dim)))
