"""Output heads: representation merge, per-feature prediction, losses and
raw-unit post-processing of the completed matrix."""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .data import ColumnSpec, TabularDataset, raw_column
from .encoder import glorot
from .tensor import Tensor


def label_input_width(schema: list[ColumnSpec]) -> int:
    return sum(1 if c.is_numeric else c.cardinality for c in schema)


def init_head_params(schema: list[ColumnSpec], cfg, merge_in: int,
                     rng: np.random.Generator) -> dict:
    hw = cfg.head_width
    params = {
        "merge.W": Tensor(glorot(rng, merge_in, hw), requires_grad=True),
        "merge.b": Tensor(np.zeros(hw), requires_grad=True),
    }
    for col in schema:
        width = 1 if col.is_numeric else col.cardinality
        params[f"out.{col.name}.W"] = Tensor(glorot(rng, hw, width), requires_grad=True)
        params[f"out.{col.name}.b"] = Tensor(np.zeros(width), requires_grad=True)
    din = label_input_width(schema)
    params["label.W"] = Tensor(glorot(rng, din, 1), requires_grad=True)
    params["label.b"] = Tensor(np.zeros(1), requires_grad=True)
    return params


def merge_representations(parts: list[Tensor], params: dict) -> Tensor:
    """H = ReLU(concat(parts) W + b)."""
    x = parts[0] if len(parts) == 1 else T.concat(parts, axis=-1)
    return T.relu(T.matmul(x, params["merge.W"]) + params["merge.b"])


def feature_logits(H: Tensor, params: dict, schema: list[ColumnSpec]) -> list[Tensor]:
    """Per-feature raw outputs: (B, 1) scalars for numeric columns, (B, c)
    class logits for categorical/ordinal ones."""
    return [T.matmul(H, params[f"out.{c.name}.W"]) + params[f"out.{c.name}.b"] for c in schema]


def predict_features(H: Tensor, params: dict, schema: list[ColumnSpec]) -> list[Tensor]:
    """Numeric columns: scalar predictions in standardized space.
    Categorical/ordinal: probability vectors (softmax over class logits)."""
    out = []
    for col, lg in zip(schema, feature_logits(H, params, schema)):
        if col.is_numeric:
            out.append(lg)
        else:
            out.append(T.masked_softmax(lg, np.ones(lg.shape)))
    return out


def imputation_loss(X: np.ndarray, logits: list[Tensor], eval_mask: np.ndarray,
                    schema: list[ColumnSpec]) -> tuple[list[Tensor], list[bool]]:
    """Per-feature mean loss over eval_mask == 1 entries.

    MSE for numeric columns, softmax cross-entropy for categorical/ordinal.
    Features with no evaluated entries contribute a constant 0 and are
    flagged.
    """
    B = X.shape[0]
    losses, empty = [], []
    for j, col in enumerate(schema):
        e = eval_mask[:, j]
        cnt = float(e.sum())
        if cnt == 0.0:
            losses.append(Tensor(0.0))
            empty.append(True)
            continue
        empty.append(False)
        if col.is_numeric:
            pred = T.reshape(logits[j], (B,))
            diff = pred - Tensor(X[:, j])
            losses.append(T.sum_(diff * diff * Tensor(e)) * (1.0 / cnt))
        else:
            ls = T.log_softmax(logits[j])
            onehot = np.zeros((B, col.cardinality))
            onehot[np.arange(B), np.rint(X[:, j]).astype(int)] = 1.0
            nll = -T.sum_(ls * Tensor(onehot), axis=-1)
            losses.append(T.sum_(nll * Tensor(e)) * (1.0 / cnt))
    return losses, empty


def assemble_imputed(preds: list[Tensor], schema: list[ColumnSpec]) -> Tensor:
    """Differentiable imputed matrix: continuous scalars alongside full
    probability vectors, concatenated in schema order."""
    return T.concat(preds, axis=-1)


def predict_label_logit(X_hat: Tensor, params: dict) -> Tensor:
    return T.matmul(X_hat, params["label.W"]) + params["label.b"]


def predict_label(X_hat: Tensor, params: dict) -> Tensor:
    """Per-row probability of the positive class."""
    return T.sigmoid(predict_label_logit(X_hat, params))


def target_loss(logit: Tensor, Y: np.ndarray, rows_mask: np.ndarray) -> Tensor:
    """Binary cross-entropy from logits, averaged over rows_mask == 1."""
    B = Y.shape[0]
    cnt = float(rows_mask.sum())
    z = T.reshape(logit, (B,))
    per_row = T.softplus(z) - Tensor(Y) * z
    return T.sum_(per_row * Tensor(rows_mask)) * (1.0 / max(cnt, 1.0))


def finalize_output(preds: list[Tensor], ds: TabularDataset, M_visible: np.ndarray) -> list[list]:
    """Completed matrix in raw units, one list per column.

    Entries observed under M_visible pass through from the dataset; hidden
    numeric entries are de-standardized (count features rounded and clamped
    to the observed range), hidden categorical/ordinal entries take the
    argmax category.
    """
    n = ds.n
    columns = []
    for j, col in enumerate(ds.schema):
        vis = M_visible[:, j] == 1.0
        raw_true = raw_column(ds, j)
        if col.is_numeric:
            raw_pred = preds[j].data.reshape(n) * col.std + col.mean
            if col.kind == "count":
                raw_pred = np.rint(raw_pred)
                obs = raw_true[ds.M[:, j] == 1.0]
                if obs.size:
                    raw_pred = np.clip(raw_pred, obs.min(), obs.max())
            out = np.where(vis, raw_true, raw_pred)
            columns.append(list(out))
        else:
            idx_pred = preds[j].data.argmax(axis=-1)
            columns.append([raw_true[i] if vis[i] else col.categories[int(idx_pred[i])]
                            for i in range(n)])
    return columns
