import numpy as np
import pytest

from gedi import tensor as T
from gedi.checks import tiny_dataset, tiny_model_config
from gedi.data import ColumnSpec
from gedi.encoder import init_encoder_params, transformer_layer, embed_features
from gedi.errors import UsageError
from gedi.model import init_model_params
from gedi.rng import substream
from gedi.tensor import Tape, Tensor, backward, grad_check
from gedi.training import compute_losses


def test_matmul_identity():
    B = np.arange(12, dtype=np.float64).reshape(3, 4)
    out = T.matmul(Tensor(np.eye(3)), Tensor(B))
    assert np.array_equal(out.data, B)


def test_masked_softmax_excludes_masked():
    out = T.masked_softmax(Tensor(np.array([[1.0, 1.0, 1.0]])), np.array([[1.0, 0.0, 1.0]]))
    assert np.allclose(out.data, [[0.5, 0.0, 0.5]])
    assert out.data[0, 1] == 0.0


def test_masked_softmax_all_masked_row_is_zero():
    out = T.masked_softmax(Tensor(np.array([[3.0, -1.0]])), np.array([[0.0, 0.0]]))
    assert np.array_equal(out.data, [[0.0, 0.0]])


def test_layer_norm_two_points():
    out = T.layer_norm(Tensor(np.array([[1.0, 3.0]])), Tensor(np.ones(2)), Tensor(np.zeros(2)))
    expected = np.array([-1.0, 1.0]) / np.sqrt(1.0 + 1e-5)
    assert np.allclose(out.data, [expected], atol=1e-12)
    assert abs(out.data[0, 1] - 1.0) < 1e-4


def test_sum_gradient_is_ones():
    x = Tensor(np.random.default_rng(0).normal(size=(2, 3, 4)), requires_grad=True)
    with Tape():
        backward(T.sum_(x))
    assert np.array_equal(x.grad, np.ones((2, 3, 4)))


def test_elementwise_square_gradient():
    x = Tensor(np.array([2.0, 3.0]), requires_grad=True)
    with Tape():
        backward(T.sum_(x * x))
    assert np.allclose(x.grad, [4.0, 6.0])


def test_backward_requires_active_tape():
    x = Tensor(np.array([1.0]), requires_grad=True)
    y = T.sum_(x * x)
    with pytest.raises(UsageError):
        backward(y)


def test_gradcheck_square():
    x = Tensor(np.array([1.0, 2.0]), requires_grad=True)
    err = grad_check(lambda: T.sum_(x * x), [x], step=1e-5)
    assert err < 1e-6


def test_gradcheck_masked_softmax_cross_entropy():
    rng = substream(0, "cetest")
    logits = Tensor(rng.normal(size=(3, 4)), requires_grad=True)
    mask = np.ones((3, 4))
    mask[1, 2] = 0.0
    onehot = np.zeros((3, 4))
    onehot[np.arange(3), rng.integers(0, 2, size=3)] = 1.0

    def f():
        p = T.masked_softmax(logits, mask)
        return -T.sum_(T.log(p + Tensor(1e-12)) * Tensor(onehot))

    assert grad_check(f, [logits], 1e-5) < 1e-4


def test_gradcheck_transformer_layer():
    cfg = tiny_model_config()
    specs = [ColumnSpec("a", "continuous"), ColumnSpec("b", "continuous"),
             ColumnSpec("c", "categorical", ["x", "y"])]
    params = init_encoder_params(specs, cfg, substream(0, "init"))
    X = substream(0, "x").normal(size=(2, 3))
    M = np.array([[1.0, 1.0, 1.0], [1.0, 0.0, 1.0]])

    def f():
        E = embed_features(params, X, M, specs, cfg)
        return T.sum_(transformer_layer(params, "tf0.", E, M, cfg))

    plist = [params[n] for n in sorted(params) if n.startswith(("tf0.", "cont.", "emb."))]
    assert grad_check(f, plist, 1e-5) < 1e-4


def test_gradcheck_full_model_imputation_loss():
    # 4x3 random dataset through the full model
    cfg = tiny_model_config()
    ds = tiny_dataset(0)
    rng = substream(0, "mask43")
    Mp = (rng.random(ds.X.shape) >= 0.4).astype(np.float64)
    params = init_model_params(ds.schema, cfg, substream(0, "init"))
    for p in params.values():  # move off exact-zero bias inits (ReLU kinks)
        p.data += substream(0, "jit").normal(0.0, 0.01, size=p.shape)

    def f():
        _, L_im, _, _ = compute_losses(params, ds.X, ds.M, Mp, ds.schema, cfg)
        total = L_im[0]
        for l in L_im[1:]:
            total = total + l
        return total

    assert grad_check(f, [params[n] for n in sorted(params)], 1e-5) < 1e-4


def test_broadcast_add_gradient():
    a = Tensor(np.random.default_rng(1).normal(size=(3, 4)), requires_grad=True)
    b = Tensor(np.random.default_rng(2).normal(size=(4,)), requires_grad=True)
    assert grad_check(lambda: T.sum_((a + b) * (a + b)), [a, b], 1e-5) < 1e-4


def test_float64_everywhere():
    x = Tensor([1, 2, 3])
    assert x.data.dtype == np.float64
    assert T.relu(x).data.dtype == np.float64
