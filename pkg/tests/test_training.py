import numpy as np
import pytest

from gedi.checks import tiny_dataset, tiny_model_config
from gedi.data import MaskSet, generate_mcar_mask, generate_synthetic, split_train_test
from gedi.errors import DataError, NumericError
from gedi.model import ModelConfig, init_model_params
from gedi.rng import substream
from gedi.tensor import Tensor
from gedi.training import (Adam, TrainConfig, init_weightnet_params, joint_loss,
                           load_checkpoint, meta_step, save_checkpoint,
                           softplus_one_bias, task_kind_onehots, task_weights,
                           train_imputation, train_predict, _softplus_np)


def _masks(ds, seed=1):
    return MaskSet(M_test=generate_mcar_mask(ds.n, ds.k, 0.3, seed),
                   M_valid=generate_mcar_mask(ds.n, ds.k, 0.1, seed + 100),
                   rate_test=0.3, rate_valid=0.1)


def test_adam_zero_gradient_no_move():
    p = Tensor(np.array([1.0, -2.0]), requires_grad=True)
    opt = Adam({"p": p}, lr=0.1)
    opt.step(grads={"p": np.zeros(2)})
    assert np.array_equal(p.data, [1.0, -2.0])


def test_adam_first_step_is_lr_times_sign():
    p = Tensor(np.array(0.0), requires_grad=True)
    opt = Adam({"p": p}, lr=0.1)
    opt.step(grads={"p": np.array(1.0)})
    assert abs(float(p.data) + 0.1) < 1e-9  # bias correction -> -lr * sign(g)


def test_adam_deterministic():
    def run():
        p = Tensor(np.array([0.3, -0.7]), requires_grad=True)
        opt = Adam({"p": p}, lr=0.01)
        for i in range(5):
            opt.step(grads={"p": np.array([1.0, -0.5]) * (i + 1)})
        return p.data.copy()
    assert np.array_equal(run(), run())


def test_adam_nonfinite_gradient_raises():
    p = Tensor(np.array(0.0), requires_grad=True)
    opt = Adam({"p": p}, lr=0.1)
    with pytest.raises(NumericError):
        opt.step(grads={"p": np.array(np.nan)})


def test_softplus_one_bias_exact():
    assert _softplus_np(softplus_one_bias()) == 1.0


def test_initial_task_weights_are_exactly_one():
    wp = init_weightnet_params(3, tiny_model_config(), substream(0, "wn"))
    kinds = task_kind_onehots([c for c in tiny_dataset(0).schema])
    w = task_weights(wp, np.array([0.5, 0.2, 0.3, 0.1]), kinds)
    assert np.all(w.data == 1.0)


def test_joint_loss_arithmetic():
    w = Tensor(np.array([[2.0], [1.0], [1.0]]))
    L_ta = Tensor(np.array(0.5))
    L_im = [Tensor(np.array(0.25)), Tensor(np.array(0.25))]
    assert float(joint_loss(w, L_ta, L_im).data) == 1.5


def test_joint_loss_equal_weights_is_plain_sum():
    w = Tensor(np.ones((3, 1)))
    L_ta = Tensor(np.array(0.4))
    L_im = [Tensor(np.array(0.3)), Tensor(np.array(0.2))]
    assert abs(float(joint_loss(w, L_ta, L_im).data) - 0.9) < 1e-15


def test_joint_loss_zero_imputation_weights():
    w = Tensor(np.array([[1.7], [0.0], [0.0]]))
    L_ta = Tensor(np.array(0.4))
    L_im = [Tensor(np.array(0.3)), Tensor(np.array(0.2))]
    assert abs(float(joint_loss(w, L_ta, L_im).data) - 1.7 * 0.4) < 1e-15


def test_meta_step_two_folds_on_four_rows():
    ds = tiny_dataset(0, n=8)
    mcfg = tiny_model_config()
    theta = init_model_params(ds.schema, mcfg, substream(0, "init"))
    wp = init_weightnet_params(ds.k, mcfg, substream(0, "wn"))
    wp["g.W"].data[:] = substream(0, "gw").normal(0.0, 0.2, wp["g.W"].shape)
    adam_w = Adam(wp, lr=5e-3)
    labeled = np.zeros(ds.n)
    labeled[:4] = 1.0
    Mp = (substream(0, "mp").random(ds.X.shape) >= 0.3).astype(np.float64)
    info = meta_step(theta, wp, adam_w, ds.X, ds.M, Mp, ds.Y, labeled,
                     ds.schema, mcfg, alpha=1e-3, folds=2,
                     rng_folds=substream(0, "folds"))
    assert info["folds_used"] == 2


def test_meta_step_too_few_labeled_rows():
    ds = tiny_dataset(0, n=8)
    mcfg = tiny_model_config()
    theta = init_model_params(ds.schema, mcfg, substream(0, "init"))
    wp = init_weightnet_params(ds.k, mcfg, substream(0, "wn"))
    with pytest.raises(DataError):
        meta_step(theta, wp, Adam(wp, 1e-3), ds.X, ds.M, np.ones_like(ds.M), ds.Y,
                  np.array([1.0] + [0.0] * 7), ds.schema, mcfg, 1e-3, 3,
                  substream(0, "folds"))


def test_zero_epochs_returns_initialization():
    ds = tiny_dataset(0, n=8)
    mcfg = tiny_model_config()
    res = train_imputation(ds, _masks(ds), mcfg, TrainConfig(mode="impute", epochs=0,
                                                             batch_size=8, seed=0))
    init = init_model_params(ds.schema, mcfg, substream(0, "init"))
    for n in init:
        assert np.array_equal(res.params[n].data, init[n].data)


def test_imputation_trajectory_deterministic():
    ds = generate_synthetic(120, 0)
    mcfg = tiny_model_config()
    cfg = TrainConfig(mode="impute", epochs=10, batch_size=64, seed=4)
    t1 = train_imputation(ds, _masks(ds), mcfg, cfg).history["train_loss"]
    t2 = train_imputation(ds, _masks(ds), mcfg, cfg).history["train_loss"]
    assert t1 == t2


def test_mode_equivalences_bitwise():
    ds = generate_synthetic(120, 0)
    masks = _masks(ds)
    ds.V, valid_idx = split_train_test(ds.n, 0.7, 0.2, 3)
    mcfg = tiny_model_config()

    def run(mode, **kw):
        cfg = TrainConfig(mode=mode, epochs=8, batch_size=120, seed=0, **kw)
        return train_predict(ds, masks, valid_idx, mcfg, cfg)

    mt = run("multi-task")
    pinned = run("multi-task", pin_weights=True)
    meta0 = run("meta", lr_weight=0.0)  # weight net frozen at its init (= all ones)
    for n in mt.params:
        assert np.array_equal(mt.params[n].data, pinned.params[n].data)
        assert np.array_equal(mt.params[n].data, meta0.params[n].data)


def test_two_step_trains_only_label_head():
    ds = generate_synthetic(120, 0)
    masks = _masks(ds)
    ds.V, valid_idx = split_train_test(ds.n, 0.7, 0.2, 3)
    mcfg = tiny_model_config()
    cfg = TrainConfig(mode="two-step", epochs=6, batch_size=120, seed=0)
    res = train_predict(ds, masks, valid_idx, mcfg, cfg)
    imp = train_imputation(ds, masks, mcfg, TrainConfig(mode="impute", epochs=6,
                                                        batch_size=120, seed=0))
    for n in res.params:  # everything except the label head matches the imputer
        if not n.startswith("label."):
            assert np.array_equal(res.params[n].data, imp.params[n].data)
    assert not np.array_equal(res.params["label.W"].data, imp.params["label.W"].data)


def test_checkpoint_roundtrip(tmp_path):
    ds = tiny_dataset(0)
    params = init_model_params(ds.schema, tiny_model_config(), substream(0, "init"))
    path = str(tmp_path / "ck.bin")
    save_checkpoint(path, params)
    loaded = load_checkpoint(path)
    assert sorted(loaded) == sorted(params)
    for n in params:
        assert np.array_equal(loaded[n].data, params[n].data)


def test_checkpoint_version_check(tmp_path):
    path = str(tmp_path / "bad.bin")
    with open(path, "wb") as fh:
        fh.write(b'{"format_version": 99, "params": []}\n')
    with pytest.raises(DataError):
        load_checkpoint(path)
