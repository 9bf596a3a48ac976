"""Training loops and bi-level loss weighting.

Modes:
- impute: reconstruction-only training with a fresh random training mask
  per epoch and early stopping on the validation-mask error;
- two-step: impute-train, then freeze everything but the label head;
- direct: minimize the target loss alone;
- multi-task: joint loss with the weight net frozen at its equal-weight
  initialization (all task weights exactly 1);
- meta: every fifth epoch the per-task weights are updated from the target
  loss measured after a simulated one-step model update, averaged over C
  cross-validation folds; the second-order term is a central-difference
  Hessian-vector product so the differentiation engine stays first-order.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace

import numpy as np

from . import tensor as T
from .data import MaskSet, TabularDataset, compose_masks
from .errors import DataError, NumericError
from .heads import assemble_imputed, imputation_loss, predict_label_logit, target_loss
from .metrics import auprc
from .model import ModelConfig, model_forward
from .model import init_model_params
from .rng import substream
from .tensor import Tape, Tensor, backward, stop_taping

MODES = ("impute", "two-step", "direct", "multi-task", "meta")
META_CADENCE = 5  # meta weight update every this many epochs


@dataclass
class TrainConfig:
    mode: str = "impute"
    epochs: int | None = None          # None -> per-mode default
    lr: float = 1e-3
    lr_weight: float = 5e-3
    batch_size: int | None = None      # None -> per-mode default
    train_mask_rate: float = 0.1
    folds: int = 3
    patience: int = 200
    eval_every: int = 10
    seed: int = 0
    pin_weights: bool = False          # force all task weights to exactly 1

    def resolved(self) -> "TrainConfig":
        cfg = replace(self)
        if cfg.epochs is None:
            cfg.epochs = 10000 if cfg.mode == "impute" else 5000
        if cfg.batch_size is None:
            cfg.batch_size = 5000 if cfg.mode == "impute" else 2000
        return cfg


# ---------------------------------------------------------------------------
# Adam
# ---------------------------------------------------------------------------


class Adam:
    """Standard Adam with bias correction over a named parameter dict."""

    def __init__(self, params: dict, lr: float, b1: float = 0.9, b2: float = 0.999,
                 eps: float = 1e-8):
        self.params = params
        self.lr = lr
        self.b1, self.b2, self.eps = b1, b2, eps
        self.t = 0
        self.m = {n: np.zeros_like(p.data) for n, p in params.items()}
        self.v = {n: np.zeros_like(p.data) for n, p in params.items()}

    def step(self, grads: dict | None = None):
        """Apply one update; grads default to each parameter's .grad
        (missing gradients count as zero)."""
        self.t += 1
        for name in sorted(self.params):
            p = self.params[name]
            g = grads.get(name) if grads is not None else p.grad
            if g is None:
                g = np.zeros_like(p.data)
            if not np.all(np.isfinite(g)):
                raise NumericError(f"non-finite gradient for parameter {name!r}")
            self.m[name] = self.b1 * self.m[name] + (1.0 - self.b1) * g
            self.v[name] = self.b2 * self.v[name] + (1.0 - self.b2) * g * g
            mhat = self.m[name] / (1.0 - self.b1 ** self.t)
            vhat = self.v[name] / (1.0 - self.b2 ** self.t)
            p.data -= self.lr * mhat / (np.sqrt(vhat) + self.eps)

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None


# ---------------------------------------------------------------------------
# weight net
# ---------------------------------------------------------------------------

_DESC_EXTRA = 4  # detached loss value + 3-way task-kind one-hot


def _softplus_np(x: float) -> float:
    a = np.float64(x)
    return float(np.maximum(a, 0.0) + np.log1p(np.exp(-np.abs(a))))


def softplus_one_bias() -> float:
    """Bias whose softplus is exactly 1.0 in float64 (so the weight net
    starts at the equal-weight multi-task configuration, bit-exactly)."""
    b = math.log(math.e - 1.0)
    for _ in range(64):
        v = _softplus_np(b)
        if v == 1.0:
            return b
        b = math.nextafter(b, math.inf if v < 1.0 else -math.inf)
    return math.log(math.e - 1.0)


def init_weightnet_params(k: int, cfg: ModelConfig, rng: np.random.Generator) -> dict:
    din = cfg.task_emb + _DESC_EXTRA
    return {
        "task.emb": Tensor(rng.normal(0.0, 0.1, size=(k + 1, cfg.task_emb)), requires_grad=True),
        "g.W": Tensor(np.zeros((din, 1)), requires_grad=True),
        "g.b": Tensor(np.full(1, softplus_one_bias()), requires_grad=True),
    }


def task_kind_onehots(schema) -> np.ndarray:
    """Rows: label task then one per feature; columns: {label, continuous,
    categorical-or-ordinal}."""
    k = len(schema)
    oh = np.zeros((k + 1, 3))
    oh[0, 0] = 1.0
    for j, col in enumerate(schema):
        oh[j + 1, 1 if col.is_numeric else 2] = 1.0
    return oh


def task_weights(wparams: dict, loss_values: np.ndarray, kind_onehots: np.ndarray) -> Tensor:
    """g(xi_i; w) for all k+1 tasks, shape (k+1, 1). Loss values enter as
    detached constants."""
    n = kind_onehots.shape[0]
    emb = T.gather_rows(wparams["task.emb"], np.arange(n))
    xi = T.concat([emb, Tensor(loss_values.reshape(n, 1)), Tensor(kind_onehots)], axis=-1)
    z = T.matmul(xi, wparams["g.W"]) + wparams["g.b"]
    return T.softplus(z)


def joint_loss(weights: Tensor, L_ta: Tensor, L_im: list) -> Tensor:
    """Weighted sum g_0 L_ta + sum_i g_i L_im,i."""
    n = 1 + len(L_im)
    vec = T.concat([T.reshape(L_ta, (1,))] + [T.reshape(l, (1,)) for l in L_im], axis=0)
    return T.sum_(T.reshape(weights, (n,)) * vec)


# ---------------------------------------------------------------------------
# loss assembly
# ---------------------------------------------------------------------------


def compute_losses(params: dict, X: np.ndarray, M_obs: np.ndarray, Mprime: np.ndarray,
                   schema, mcfg: ModelConfig, Y: np.ndarray | None = None,
                   ta_rows: np.ndarray | None = None):
    """Forward one batch and return (L_ta or None, [L_im per feature], flags).

    Imputation losses are evaluated on entries observed in M_obs but hidden
    by Mprime; the target loss covers rows with ta_rows == 1.
    """
    Mhat = compose_masks(Mprime, M_obs)
    fwd = model_forward(params, X, Mhat, schema, mcfg, want_preds=Y is not None)
    eval_mask = M_obs * (1.0 - Mprime)
    L_im, flags = imputation_loss(X, fwd.logits, eval_mask, schema)
    L_ta = None
    if Y is not None and ta_rows is not None:
        X_hat = assemble_imputed(fwd.preds, schema)
        L_ta = target_loss(predict_label_logit(X_hat, params), Y, ta_rows)
    return L_ta, L_im, flags, fwd


def _loss_values(L_ta, L_im) -> np.ndarray:
    vals = [float(L_ta.data) if L_ta is not None else 0.0]
    vals += [float(l.data) for l in L_im]
    return np.array(vals)


def _current_weights(wparams: dict | None, loss_vals: np.ndarray,
                     kinds: np.ndarray, pin: bool) -> Tensor:
    if pin or wparams is None:
        return Tensor(np.ones((kinds.shape[0], 1)))
    return task_weights(wparams, loss_vals, kinds)


# ---------------------------------------------------------------------------
# meta step
# ---------------------------------------------------------------------------

HVP_SCALE = 1e-2  # finite-difference step is HVP_SCALE / ||u||


def _grads_of(params: dict) -> dict:
    return {n: (p.grad.copy() if p.grad is not None else np.zeros_like(p.data))
            for n, p in params.items()}


def _zero(params: dict):
    for p in params.values():
        p.grad = None


def fold_weight_gradient(theta: dict, wparams: dict, X: np.ndarray, M_obs: np.ndarray,
                         Mprime: np.ndarray, Y: np.ndarray, train_rows: np.ndarray,
                         valid_rows: np.ndarray, schema, mcfg: ModelConfig,
                         alpha: float) -> dict | None:
    """Weight-net gradient of the post-step target loss for one fold.

    Simulates a single gradient step on a scratch copy of the model under
    the joint loss on the meta-train rows, measures the target-loss gradient
    u at the stepped parameters on the held-out rows, and recovers the
    weight-net gradient through a central-difference Hessian-vector product.
    Returns None when the target loss is flat (||u|| = 0). The real model
    parameters are never modified.
    """
    kinds = task_kind_onehots(schema)
    # inner step direction: grad of the joint loss on the meta-train rows
    _zero(theta)
    _zero(wparams)
    with Tape():
        L_ta, L_im, _, _ = compute_losses(theta, X, M_obs, Mprime, schema, mcfg,
                                          Y=Y, ta_rows=train_rows)
        base_losses = _loss_values(L_ta, L_im)
        weights = task_weights(wparams, base_losses, kinds)
        backward(joint_loss(weights, L_ta, L_im))
    g_theta = _grads_of(theta)
    _zero(theta)
    _zero(wparams)
    # scratch one-step update (never leaks into theta)
    theta_hat = {n: Tensor(p.data - alpha * g_theta[n], requires_grad=True)
                 for n, p in theta.items()}
    with Tape():
        L_ta_v, _, _, _ = compute_losses(theta_hat, X, M_obs, Mprime, schema, mcfg,
                                         Y=Y, ta_rows=valid_rows)
        backward(L_ta_v)
    u = _grads_of(theta_hat)
    unorm = math.sqrt(sum(float((g * g).sum()) for g in u.values()))
    if unorm == 0.0:
        return None
    r = HVP_SCALE / (unorm + 1e-12)
    side = {}
    for sign in (1.0, -1.0):
        theta_p = {n: Tensor(p.data + sign * r * u[n]) for n, p in theta.items()}
        with stop_taping():
            L_ta_p, L_im_p, _, _ = compute_losses(theta_p, X, M_obs, Mprime, schema,
                                                  mcfg, Y=Y, ta_rows=train_rows)
            vals_p = _loss_values(L_ta_p, L_im_p)
        _zero(wparams)
        with Tape():
            # xi inputs stay at the unperturbed losses; only the loss
            # multipliers move with the perturbation
            weights = task_weights(wparams, base_losses, kinds)
            backward(joint_loss(weights, Tensor(vals_p[0]),
                                [Tensor(v) for v in vals_p[1:]]))
        side[sign] = _grads_of(wparams)
    return {n: -alpha * (side[1.0][n] - side[-1.0][n]) / (2.0 * r) for n in wparams}


def meta_step(theta: dict, wparams: dict, adam_w: Adam, X: np.ndarray,
              M_obs: np.ndarray, Mprime: np.ndarray, Y: np.ndarray,
              labeled_rows: np.ndarray, schema, mcfg: ModelConfig,
              alpha: float, folds: int, rng_folds: np.random.Generator) -> dict:
    """One weight-net update (the model step itself is left to the caller).

    The labeled training rows of the batch are redrawn into C folds; the
    per-fold gradients of fold_weight_gradient are averaged and applied by
    Adam at the weight-net learning rate.
    """
    labeled = np.flatnonzero(labeled_rows)
    if labeled.size < folds:
        raise DataError(f"need >= {folds} labeled rows for {folds}-fold meta update")
    perm = rng_folds.permutation(labeled)
    parts = np.array_split(perm, folds)
    acc = {n: np.zeros_like(p.data) for n, p in wparams.items()}
    used = 0
    n_rows = X.shape[0]
    for c in range(folds):
        valid_rows = np.zeros(n_rows)
        valid_rows[parts[c]] = 1.0
        train_rows = np.zeros(n_rows)
        for o in range(folds):
            if o != c:
                train_rows[parts[o]] = 1.0
        g = fold_weight_gradient(theta, wparams, X, M_obs, Mprime, Y,
                                 train_rows, valid_rows, schema, mcfg, alpha)
        if g is None:
            continue
        for n in acc:
            acc[n] += g[n]
        used += 1
    info = {"folds_used": used, "grad_norm": 0.0}
    if used:
        grads = {n: a / used for n, a in acc.items()}
        info["grad_norm"] = math.sqrt(sum(float((g * g).sum()) for g in grads.values()))
        _zero(wparams)
        adam_w.step(grads)
    return info


# ---------------------------------------------------------------------------
# training loops
# ---------------------------------------------------------------------------


@dataclass
class TrainResult:
    params: dict
    weight_params: dict | None = None
    history: dict = field(default_factory=dict)


def _copy_params(params: dict) -> dict:
    return {n: Tensor(p.data.copy(), requires_grad=True) for n, p in params.items()}


def _sample_batch(rng: np.random.Generator, n: int, batch_size: int) -> np.ndarray:
    if batch_size >= n:
        return np.arange(n)
    return np.sort(rng.choice(n, size=batch_size, replace=False))


def _draw_mprime(rng: np.random.Generator, shape, rate: float) -> np.ndarray:
    return (rng.random(shape) >= rate).astype(np.float64)


def _validation_imputation_error(params: dict, ds: TabularDataset, M_obs: np.ndarray,
                                 M_valid: np.ndarray, mcfg: ModelConfig) -> float:
    with stop_taping():
        _, L_im, flags, _ = compute_losses(params, ds.X, M_obs, M_valid, ds.schema, mcfg)
    vals = [float(l.data) for l, f in zip(L_im, flags) if not f]
    return float(np.mean(vals)) if vals else 0.0


def train_imputation(ds: TabularDataset, masks: MaskSet, mcfg: ModelConfig,
                     tcfg: TrainConfig) -> TrainResult:
    """Reconstruction-only training; returns the best-validation parameters."""
    tcfg = tcfg.resolved()
    M_obs = compose_masks(ds.M, masks.M_test)
    if M_obs.sum() == 0:
        raise DataError("dataset has no observed entries to train on")
    params = init_model_params(ds.schema, mcfg, substream(tcfg.seed, "init"))
    adam = Adam(params, tcfg.lr)
    rng_batch = substream(tcfg.seed, "batch")
    rng_mask = substream(tcfg.seed, "trainmask")
    best = _copy_params(params)
    best_err = math.inf
    best_epoch = -1
    epochs_since = 0
    trajectory = []
    for epoch in range(tcfg.epochs):
        rows = _sample_batch(rng_batch, ds.n, tcfg.batch_size)
        Xb, Mb = ds.X[rows], M_obs[rows]
        Mp = _draw_mprime(rng_mask, Mb.shape, tcfg.train_mask_rate)
        adam.zero_grad()
        with Tape():
            _, L_im, _, _ = compute_losses(params, Xb, Mb, Mp, ds.schema, mcfg)
            total = L_im[0]
            for l in L_im[1:]:
                total = total + l
            backward(total)
        trajectory.append(float(total.data))
        adam.step()
        if (epoch + 1) % tcfg.eval_every == 0 or epoch == tcfg.epochs - 1:
            err = _validation_imputation_error(params, ds, M_obs, masks.M_valid, mcfg)
            if err < best_err:
                best_err = err
                best = _copy_params(params)
                best_epoch = epoch
                epochs_since = 0
            else:
                epochs_since += tcfg.eval_every
                if epochs_since >= tcfg.patience:
                    break
    history = {"train_loss": trajectory, "best_epoch": best_epoch,
               "best_validation_error": None if best_epoch < 0 else best_err}
    return TrainResult(params=best, history=history)


def _valid_auprc(params: dict, ds: TabularDataset, M_obs: np.ndarray,
                 valid_idx: np.ndarray, mcfg: ModelConfig) -> float:
    with stop_taping():
        fwd = model_forward(params, ds.X, M_obs, ds.schema, mcfg)
        X_hat = assemble_imputed(fwd.preds, ds.schema)
        logit = predict_label_logit(X_hat, params)
    scores = logit.data.reshape(-1)[valid_idx]
    labels = ds.Y[valid_idx]
    if labels.sum() == 0 or labels.sum() == labels.size:
        return 0.5  # degenerate validation fold: AUPRC undefined
    return auprc(scores, labels)


def train_predict(ds: TabularDataset, masks: MaskSet, valid_idx: np.ndarray,
                  mcfg: ModelConfig, tcfg: TrainConfig) -> TrainResult:
    """Label-prediction training in two-step / direct / multi-task / meta
    modes; early stopping on validation AUPRC."""
    tcfg = tcfg.resolved()
    if ds.Y is None or ds.V is None:
        raise DataError("label prediction requires labels and a train/test split")
    if tcfg.mode not in MODES or tcfg.mode == "impute":
        raise DataError(f"train_predict got mode {tcfg.mode!r}")
    M_obs = compose_masks(ds.M, masks.M_test)
    train_rows = ds.V.copy()
    train_rows[valid_idx] = 0.0  # validation rows never enter a training loss

    if tcfg.mode == "two-step":
        return _train_two_step(ds, masks, valid_idx, train_rows, M_obs, mcfg, tcfg)

    params = init_model_params(ds.schema, mcfg, substream(tcfg.seed, "init"))
    wparams = init_weightnet_params(ds.k, mcfg, substream(tcfg.seed, "weightnet"))
    adam = Adam(params, tcfg.lr)
    adam_w = Adam(wparams, tcfg.lr_weight)
    rng_batch = substream(tcfg.seed, "batch")
    rng_mask = substream(tcfg.seed, "trainmask")
    rng_folds = substream(tcfg.seed, "folds")
    kinds = task_kind_onehots(ds.schema)
    best = _copy_params(params)
    best_w = _copy_params(wparams)
    best_score = -math.inf
    best_epoch = -1
    since = 0
    trajectory = []
    for epoch in range(tcfg.epochs):
        rows = _sample_batch(rng_batch, ds.n, tcfg.batch_size)
        Xb, Mb, Yb = ds.X[rows], M_obs[rows], ds.Y[rows]
        ta_rows = train_rows[rows]
        Mp = (_draw_mprime(rng_mask, Mb.shape, tcfg.train_mask_rate)
              if tcfg.mode != "direct" else np.ones_like(Mb))
        if tcfg.mode == "meta" and epoch % META_CADENCE == 0:
            meta_step(params, wparams, adam_w, Xb, Mb, Mp, Yb, ta_rows,
                      ds.schema, mcfg, tcfg.lr, tcfg.folds, rng_folds)
        adam.zero_grad()
        _zero(wparams)
        with Tape():
            L_ta, L_im, _, _ = compute_losses(params, Xb, Mb, Mp, ds.schema, mcfg,
                                              Y=Yb, ta_rows=ta_rows)
            if tcfg.mode == "direct":
                loss = L_ta
            else:
                weights = _current_weights(wparams, _loss_values(L_ta, L_im), kinds,
                                           tcfg.pin_weights or tcfg.mode == "multi-task")
                loss = joint_loss(weights, L_ta, L_im)
            backward(loss)
        trajectory.append(float(L_ta.data))
        adam.step()
        if (epoch + 1) % tcfg.eval_every == 0 or epoch == tcfg.epochs - 1:
            score = _valid_auprc(params, ds, M_obs, valid_idx, mcfg)
            if score > best_score:
                best_score = score
                best = _copy_params(params)
                best_w = _copy_params(wparams)
                best_epoch = epoch
                since = 0
            else:
                since += tcfg.eval_every
                if since >= tcfg.patience:
                    break
    history = {"target_loss": trajectory, "best_epoch": best_epoch,
               "best_validation_auprc": None if best_epoch < 0 else best_score,
               "task_weights": final_task_weights(best, best_w, ds, masks, mcfg, tcfg)}
    return TrainResult(params=best, weight_params=best_w, history=history)


def _train_two_step(ds, masks, valid_idx, train_rows, M_obs, mcfg, tcfg) -> TrainResult:
    imp_cfg = replace(tcfg, mode="impute", epochs=tcfg.epochs, batch_size=tcfg.batch_size)
    imputer = train_imputation(ds, masks, mcfg, imp_cfg)
    params = imputer.params
    # frozen imputer: the label head sees a fixed imputed matrix
    with stop_taping():
        fwd = model_forward(params, ds.X, M_obs, ds.schema, mcfg)
        X_hat_const = assemble_imputed(fwd.preds, ds.schema).data
    head = {"label.W": params["label.W"], "label.b": params["label.b"]}
    adam = Adam(head, tcfg.lr)
    best_wb = {n: p.data.copy() for n, p in head.items()}
    best_score = -math.inf
    best_epoch = -1
    since = 0
    trajectory = []
    for epoch in range(tcfg.epochs):
        adam.zero_grad()
        with Tape():
            logit = predict_label_logit(Tensor(X_hat_const), params)
            loss = target_loss(logit, ds.Y, train_rows)
            backward(loss)
        trajectory.append(float(loss.data))
        adam.step()
        if (epoch + 1) % tcfg.eval_every == 0 or epoch == tcfg.epochs - 1:
            scores = (X_hat_const @ params["label.W"].data
                      + params["label.b"].data).reshape(-1)[valid_idx]
            labels = ds.Y[valid_idx]
            score = auprc(scores, labels) if 0 < labels.sum() < labels.size else 0.5
            if score > best_score:
                best_score = score
                best_wb = {n: p.data.copy() for n, p in head.items()}
                best_epoch = epoch
                since = 0
            else:
                since += tcfg.eval_every
                if since >= tcfg.patience:
                    break
    for n, v in best_wb.items():
        params[n].data = v
    history = {"target_loss": trajectory, "best_epoch": best_epoch,
               "best_validation_auprc": None if best_epoch < 0 else best_score,
               "imputer_history": imputer.history}
    return TrainResult(params=params, history=history)


def final_task_weights(params: dict, wparams: dict, ds: TabularDataset,
                       masks: MaskSet, mcfg: ModelConfig, tcfg: TrainConfig) -> dict:
    """Learned per-task weights evaluated at the current losses."""
    M_obs = compose_masks(ds.M, masks.M_test)
    rng_mask = substream(tcfg.seed, "weightprobe")
    Mp = _draw_mprime(rng_mask, M_obs.shape, tcfg.train_mask_rate)
    with stop_taping():
        L_ta, L_im, _, _ = compute_losses(params, ds.X, M_obs, Mp, ds.schema, mcfg,
                                          Y=ds.Y, ta_rows=ds.V if ds.V is not None else np.ones(ds.n))
        kinds = task_kind_onehots(ds.schema)
        w = task_weights(wparams, _loss_values(L_ta, L_im), kinds)
    names = ["__label__"] + [c.name for c in ds.schema]
    return {n: float(v) for n, v in zip(names, w.data.reshape(-1))}


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

CHECKPOINT_VERSION = 1


def save_checkpoint(path: str, params: dict):
    """JSON header line + little-endian float64 payload."""
    names = sorted(params)
    entries = []
    offset = 0
    for n in names:
        shape = list(params[n].shape)
        entries.append({"name": n, "shape": shape, "offset": offset})
        offset += int(np.prod(shape) or 1) * 8
    header = json.dumps({"format_version": CHECKPOINT_VERSION, "params": entries},
                        sort_keys=True)
    with open(path, "wb") as fh:
        fh.write(header.encode("utf-8") + b"\n")
        for n in names:
            fh.write(params[n].data.astype("<f8").tobytes())


def load_checkpoint(path: str) -> dict:
    with open(path, "rb") as fh:
        header = json.loads(fh.readline().decode("utf-8"))
        payload = fh.read()
    if header.get("format_version") != CHECKPOINT_VERSION:
        raise DataError(f"unsupported checkpoint version {header.get('format_version')}")
    params = {}
    for e in header["params"]:
        shape = tuple(e["shape"])
        count = int(np.prod(shape) or 1)
        arr = np.frombuffer(payload, dtype="<f8", count=count, offset=e["offset"])
        params[e["name"]] = Tensor(arr.reshape(shape).copy(), requires_grad=True)
    return params
