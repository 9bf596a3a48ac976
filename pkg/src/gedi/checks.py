"""Gradient verification suite: per-primitive checks, composite losses
through the full model, and the meta-gradient oracle. Used by both the CLI
gradcheck command and the acceptance tests."""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .data import ColumnSpec, encode_table
from .model import ModelConfig, init_model_params
from .rng import substream
from .tensor import Tape, Tensor, backward, grad_check, stop_taping
from .training import (compute_losses, fold_weight_gradient, init_weightnet_params,
                       joint_loss, task_kind_onehots, task_weights)

PRIMITIVE_TOL = 1e-4
META_TOL = 1e-2


def _rand(rng, *shape):
    return Tensor(rng.uniform(-2.0, 2.0, size=shape), requires_grad=True)


def primitive_checks(seed: int, step: float = 1e-5, forced_bug: bool = False) -> dict:
    """Max relative gradient error per differentiable primitive."""
    rng = substream(seed, "gradcheck")
    a = _rand(rng, 3, 4)
    b = _rand(rng, 4, 5)
    c = _rand(rng, 3, 4)
    pos = Tensor(rng.uniform(0.5, 2.0, size=(3, 4)), requires_grad=True)
    gain = _rand(rng, 4)
    bias = _rand(rng, 4)
    mask = (rng.random((3, 4)) < 0.7).astype(np.float64)
    mask[0] = 1.0  # keep at least one fully active row
    idx = rng.integers(0, 3, size=6)
    table = _rand(rng, 3, 4)

    def s(x):
        return T.sum_(x * x)

    checks = {
        "matmul": (lambda: s(T.matmul(a, b)), [a, b]),
        "add": (lambda: s(a + c), [a, c]),
        "sub": (lambda: s(a - c), [a, c]),
        "mul": (lambda: s(a * c), [a, c]),
        "div": (lambda: s(a / pos), [a, pos]),
        "neg": (lambda: s(-a), [a]),
        "relu": (lambda: s(T.relu(a)), [a]),
        "exp": (lambda: s(T.exp(a)), [a]),
        "log": (lambda: s(T.log(pos)), [pos]),
        "pow": (lambda: s(T.pow_scalar(pos, -0.5)), [pos]),
        "sigmoid": (lambda: s(T.sigmoid(a)), [a]),
        "softplus": (lambda: s(T.softplus(a)), [a]),
        "masked_softmax": (lambda: s(T.masked_softmax(a, mask)), [a]),
        "log_softmax": (lambda: s(T.log_softmax(a)), [a]),
        "layer_norm": (lambda: s(T.layer_norm(a, gain, bias)), [a, gain, bias]),
        "masked_mean_pool": (lambda: s(T.masked_mean_pool(
            T.reshape(a, (3, 2, 2)), mask[:, :2])), [a]),
        "concat": (lambda: s(T.concat([a, c], axis=-1)), [a, c]),
        "l2norm_rows": (lambda: s(T.l2norm_rows(a)), [a]),
        "transpose": (lambda: s(T.matmul(T.transpose(a), c)), [a, c]),
        "reshape": (lambda: s(T.reshape(a, (4, 3))), [a]),
        "gather_rows": (lambda: s(T.gather_rows(table, idx)), [table]),
        "sum": (lambda: T.sum_(a * a), [a]),
        "mean": (lambda: T.mean_(a * a), [a]),
    }
    if forced_bug:
        # intentionally broken derivative, for CI self-test
        checks["forced_bug"] = (lambda: T.sum_(_broken_square(a)), [a])
    return {name: grad_check(f, params, step) for name, (f, params) in checks.items()}


def _broken_square(x: Tensor):
    out = x.data * x.data

    def bw(g):
        T._accum(x, g * x.data)  # missing factor 2, on purpose

    return T._make(out, (x,), bw)


def tiny_model_config() -> ModelConfig:
    return ModelConfig(dim=8, heads=2, layers=1, gcn_layers=1, ff_mult=2,
                       head_width=8, epsilon=0.3)


def tiny_dataset(seed: int, n: int = 4):
    rng = substream(seed, "tinydata")
    specs = [ColumnSpec("u", "continuous"), ColumnSpec("v", "continuous"),
             ColumnSpec("w", "categorical", ["a", "b"])]
    cells = [[rng.normal(), rng.normal(), "a" if rng.random() < 0.5 else "b"]
             for _ in range(n)]
    ds = encode_table(cells, specs)
    ds.Y = (rng.random(n) < 0.5).astype(np.float64)
    return ds


def _jitter(params: dict, rng) -> None:
    """Nudge parameters off exact-zero initializations so the checks run at
    a generic (differentiable) point; ReLU kinks at zero-initialized biases
    would otherwise make finite differences disagree with the subgradient."""
    for p in params.values():
        p.data += rng.normal(0.0, 0.01, size=p.shape)


def composite_checks(seed: int, step: float = 1e-5) -> dict:
    """Gradient checks of the three composite losses through the full model:
    imputation loss, target loss, and the joint loss (which routes gradients
    through graph construction and the weight net)."""
    mcfg = tiny_model_config()
    ds = tiny_dataset(seed)
    rng = substream(seed, "tinymask")
    Mp = (rng.random(ds.X.shape) >= 0.4).astype(np.float64)
    if np.all(Mp == 1.0):
        Mp[0, 0] = 0.0
    params = init_model_params(ds.schema, mcfg, substream(seed, "init"))
    wparams = init_weightnet_params(ds.k, mcfg, substream(seed, "weightnet"))
    # give the weight net a nonzero linear map so its gradients are exercised
    wparams["g.W"].data[:] = substream(seed, "wg").normal(0.0, 0.2, wparams["g.W"].shape)
    _jitter(params, substream(seed, "jitter"))
    kinds = task_kind_onehots(ds.schema)
    ta_rows = np.ones(ds.n)

    def imp_loss():
        _, L_im, _, _ = compute_losses(params, ds.X, ds.M, Mp, ds.schema, mcfg)
        total = L_im[0]
        for l in L_im[1:]:
            total = total + l
        return total

    def tgt_loss():
        L_ta, _, _, _ = compute_losses(params, ds.X, ds.M, Mp, ds.schema, mcfg,
                                       Y=ds.Y, ta_rows=ta_rows)
        return L_ta

    # the loss component of each task descriptor is a detached constant, so
    # it is frozen at the base-point losses for both sides of the check
    with stop_taping():
        L_ta0, L_im0, _, _ = compute_losses(params, ds.X, ds.M, Mp, ds.schema, mcfg,
                                            Y=ds.Y, ta_rows=ta_rows)
        base_vals = np.array([float(L_ta0.data)] + [float(l.data) for l in L_im0])

    def jnt_loss():
        L_ta, L_im, _, _ = compute_losses(params, ds.X, ds.M, Mp, ds.schema, mcfg,
                                          Y=ds.Y, ta_rows=ta_rows)
        weights = task_weights(wparams, base_vals, kinds)
        return joint_loss(weights, L_ta, L_im)

    plist = [params[n] for n in sorted(params)]
    wlist = [wparams[n] for n in sorted(wparams)]
    return {
        "imputation_loss": grad_check(imp_loss, plist, step),
        "target_loss": grad_check(tgt_loss, plist, step),
        "joint_loss_through_graph": grad_check(jnt_loss, plist + wlist, step),
    }


def meta_gradient_check(seed: int) -> float:
    """Relative error of the finite-difference HVP meta-gradient against a
    coordinate-wise central-difference oracle of the post-step target loss,
    over every weight-net coordinate. Model kept under 500 parameters."""
    mcfg = ModelConfig(dim=4, heads=2, layers=1, gcn_layers=1, ff_mult=2,
                       head_width=4, epsilon=0.3)
    ds = tiny_dataset(seed, n=8)
    rng = substream(seed, "metamask")
    Mp = (rng.random(ds.X.shape) >= 0.3).astype(np.float64)
    theta = init_model_params(ds.schema, mcfg, substream(seed, "init"))
    wparams = init_weightnet_params(ds.k, mcfg, substream(seed, "weightnet"))
    wparams["g.W"].data[:] = substream(seed, "wg").normal(0.0, 0.2, wparams["g.W"].shape)
    n_theta = sum(p.size for p in theta.values())
    assert n_theta <= 500, f"oracle model has {n_theta} parameters"
    alpha = 0.05
    train_rows = np.zeros(ds.n)
    train_rows[: ds.n // 2] = 1.0
    valid_rows = 1.0 - train_rows
    kinds = task_kind_onehots(ds.schema)

    analytic = fold_weight_gradient(theta, wparams, ds.X, ds.M, Mp, ds.Y,
                                    train_rows, valid_rows, ds.schema, mcfg, alpha)
    assert analytic is not None

    # xi loss inputs are held at the unperturbed-theta losses, matching the
    # convention that the loss enters the descriptor as a detached constant
    with stop_taping():
        L_ta0, L_im0, _, _ = compute_losses(theta, ds.X, ds.M, Mp, ds.schema, mcfg,
                                            Y=ds.Y, ta_rows=train_rows)
        base_losses = np.array([float(L_ta0.data)] + [float(l.data) for l in L_im0])

    def post_step_target_loss() -> float:
        for p in theta.values():
            p.grad = None
        for p in wparams.values():
            p.grad = None
        with Tape():
            L_ta, L_im, _, _ = compute_losses(theta, ds.X, ds.M, Mp, ds.schema, mcfg,
                                              Y=ds.Y, ta_rows=train_rows)
            weights = task_weights(wparams, base_losses, kinds)
            backward(joint_loss(weights, L_ta, L_im))
        theta_hat = {n: Tensor(p.data - alpha * (p.grad if p.grad is not None
                                                 else np.zeros_like(p.data)))
                     for n, p in theta.items()}
        with stop_taping():
            L_ta_v, _, _, _ = compute_losses(theta_hat, ds.X, ds.M, Mp, ds.schema,
                                             mcfg, Y=ds.Y, ta_rows=valid_rows)
        return float(L_ta_v.data)

    h = 1e-4
    worst = 0.0
    for name in sorted(wparams):
        p = wparams[name]
        fd = np.zeros_like(p.data)
        flat = p.data.ravel()
        fdflat = fd.ravel()
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            fp = post_step_target_loss()
            flat[i] = orig - h
            fm = post_step_target_loss()
            flat[i] = orig
            fdflat[i] = (fp - fm) / (2.0 * h)
        ga = analytic[name]
        err = np.linalg.norm(ga - fd) / max(np.linalg.norm(ga), np.linalg.norm(fd), 1e-8)
        worst = max(worst, err)
    return worst


def run_gradient_suite(seeds=(0, 1, 2), step: float = 1e-5,
                       forced_bug: bool = False, with_meta: bool = True) -> dict:
    """Full suite across seeds; returns per-check max errors and a verdict."""
    report: dict = {"step": step, "seeds": list(seeds), "primitives": {},
                    "composites": {}, "meta_gradient": None}
    for seed in seeds:
        for name, err in primitive_checks(seed, step, forced_bug).items():
            report["primitives"][name] = max(report["primitives"].get(name, 0.0), err)
        for name, err in composite_checks(seed, step).items():
            report["composites"][name] = max(report["composites"].get(name, 0.0), err)
    if with_meta:
        report["meta_gradient"] = max(meta_gradient_check(s) for s in seeds)
    ok = all(e < PRIMITIVE_TOL for e in report["primitives"].values())
    ok = ok and all(e < PRIMITIVE_TOL for e in report["composites"].values())
    if with_meta:
        ok = ok and report["meta_gradient"] < META_TOL
    report["passed"] = bool(ok)
    return report
