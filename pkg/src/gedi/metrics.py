"""Evaluation metrics and the two reference imputers (mean/mode, kNN).

Per-feature errors use raw units: NRMSE (range-normalized) for numeric
features, accuracy error for categorical, normalized rank displacement for
ordinal. The mean imputation error averages per-feature errors over features
with at least one evaluated entry.
"""

from __future__ import annotations

import numpy as np

from .data import TabularDataset, compose_masks, raw_column as _raw_column
from .errors import DataError, SchemaError


def nrmse(truth: np.ndarray, pred: np.ndarray, eval_mask: np.ndarray) -> float:
    """RMSE over evaluated entries divided by the observed ground-truth
    range; constant-range features divide by 1."""
    e = eval_mask.astype(bool)
    if not e.any():
        raise DataError("nrmse: no evaluated entries")
    rmse = float(np.sqrt(np.mean((truth[e] - pred[e]) ** 2)))
    rng = float(truth.max() - truth.min())
    return rmse / (rng if rng > 0 else 1.0)


def accuracy_error(truth, pred, eval_mask: np.ndarray) -> float:
    e = eval_mask.astype(bool)
    if not e.any():
        raise DataError("accuracy_error: no evaluated entries")
    t = np.asarray(truth, dtype=object)[e]
    p = np.asarray(pred, dtype=object)[e]
    return 1.0 - float(np.mean(t == p))


def displacement_error(truth_rank: np.ndarray, pred_rank: np.ndarray,
                       eval_mask: np.ndarray, cardinality: int) -> float:
    """Mean |rank(truth) - rank(pred)| / (c - 1) over evaluated entries."""
    if cardinality < 2:
        raise SchemaError("displacement error needs cardinality >= 2")
    e = eval_mask.astype(bool)
    if not e.any():
        raise DataError("displacement_error: no evaluated entries")
    return float(np.mean(np.abs(truth_rank[e] - pred_rank[e]))) / (cardinality - 1)


def auprc(scores: np.ndarray, labels: np.ndarray) -> float:
    """Area under the precision-recall curve with step interpolation;
    tied scores are grouped at one threshold."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.float64)
    if not np.all(np.isfinite(scores)):
        raise DataError("auprc: non-finite scores")
    n_pos = labels.sum()
    if n_pos == 0:
        raise DataError("auprc: no positive labels")
    order = np.argsort(-scores, kind="stable")
    s = scores[order]
    y = labels[order]
    tp = np.cumsum(y)
    fp = np.cumsum(1.0 - y)
    # keep only the last index of each tied-score group
    last = np.ones(s.size, dtype=bool)
    last[:-1] = s[:-1] != s[1:]
    tp, fp = tp[last], fp[last]
    precision = tp / (tp + fp)
    recall = tp / n_pos
    prev_r = np.concatenate([[0.0], recall[:-1]])
    return float(np.sum((recall - prev_r) * precision))


def per_feature_errors(ds: TabularDataset, truth_columns: list[list],
                       completed_columns: list[list], eval_mask: np.ndarray) -> list[dict]:
    """One entry per feature: name, kind, error (or a no-eval flag)."""
    out = []
    for j, col in enumerate(ds.schema):
        e = eval_mask[:, j]
        entry = {"name": col.name, "kind": col.kind}
        if e.sum() == 0:
            entry["error"] = None
            entry["no_evaluated_entries"] = True
            out.append(entry)
            continue
        if col.is_numeric:
            entry["error"] = nrmse(np.asarray(truth_columns[j], dtype=np.float64),
                                   np.asarray(completed_columns[j], dtype=np.float64), e)
        elif col.kind == "ordinal":
            rank = {lab: i for i, lab in enumerate(col.categories)}
            tr = np.array([rank[v] for v in truth_columns[j]], dtype=np.float64)
            pr = np.array([rank[v] for v in completed_columns[j]], dtype=np.float64)
            entry["error"] = displacement_error(tr, pr, e, col.cardinality)
        else:
            entry["error"] = accuracy_error(truth_columns[j], completed_columns[j], e)
        out.append(entry)
    return out


def mean_imputation_error(per_feature: list[dict]) -> float | None:
    vals = [p["error"] for p in per_feature if p.get("error") is not None]
    return float(np.mean(vals)) if vals else None


# ---------------------------------------------------------------------------
# baselines
# ---------------------------------------------------------------------------


def baseline_mean_mode(ds: TabularDataset, masks) -> list[list]:
    """Column mean (numeric) / mode (categorical) computed on the entries
    the model is allowed to see; hidden entries get the statistic."""
    M_obs = compose_masks(ds.M, masks.M_test)
    columns = []
    for j, col in enumerate(ds.schema):
        obs = M_obs[:, j] == 1.0
        raw_true = _raw_column(ds, j)
        if col.is_numeric:
            fill = float(np.mean(raw_true[obs])) if obs.any() else 0.0
            if col.kind == "count":
                fill = float(np.rint(fill))
            columns.append(list(np.where(obs, raw_true, fill)))
        else:
            if obs.any():
                labels, counts = np.unique(raw_true[obs], return_counts=True)
                fill = labels[counts.argmax()]
            else:
                fill = col.categories[0]
            columns.append([raw_true[i] if obs[i] else fill for i in range(ds.n)])
    return columns


def baseline_knn(ds: TabularDataset, masks, k_neighbors: int = 50) -> list[list]:
    """Mixed-type kNN imputer.

    Distance is Euclidean over co-observed standardized numeric features
    plus a 0/1 mismatch indicator per co-observed categorical feature.
    Hidden numeric cells take the mean of the k nearest donors' observed
    values; categorical cells take the plurality vote. k is truncated to
    the donors available; with no donors the cell falls back to mean/mode.
    """
    M_obs = compose_masks(ds.M, masks.M_test)
    n, k = ds.n, ds.k
    num_idx = ds.numeric_indices()
    cat_idx = ds.categorical_indices()
    Xn = ds.X[:, num_idx] if num_idx else np.zeros((n, 0))
    Mn = M_obs[:, num_idx] if num_idx else np.zeros((n, 0))
    Xc = ds.X[:, cat_idx] if cat_idx else np.zeros((n, 0))
    Mc = M_obs[:, cat_idx] if cat_idx else np.zeros((n, 0))
    # pairwise squared distances over co-observed features
    d2 = np.zeros((n, n))
    for c in range(Xn.shape[1]):
        both = np.outer(Mn[:, c], Mn[:, c])
        diff = Xn[:, c][:, None] - Xn[:, c][None, :]
        d2 += both * diff * diff
    for c in range(Xc.shape[1]):
        both = np.outer(Mc[:, c], Mc[:, c])
        mismatch = (Xc[:, c][:, None] != Xc[:, c][None, :]).astype(np.float64)
        d2 += both * mismatch
    dist = np.sqrt(d2)
    np.fill_diagonal(dist, np.inf)

    fallback = baseline_mean_mode(ds, masks)
    columns = []
    for j, col in enumerate(ds.schema):
        raw_true = _raw_column(ds, j)
        donors = np.flatnonzero(M_obs[:, j] == 1.0)
        vals = []
        for i in range(n):
            if M_obs[i, j] == 1.0:
                vals.append(raw_true[i])
                continue
            cand = donors
            if cand.size == 0:
                vals.append(fallback[j][i])
                continue
            order = cand[np.argsort(dist[i, cand], kind="stable")]
            nearest = order[:min(k_neighbors, order.size)]
            if col.is_numeric:
                v = float(np.mean([raw_true[t] for t in nearest]))
                if col.kind == "count":
                    v = float(np.rint(v))
                vals.append(v)
            else:
                labels, counts = np.unique(np.asarray([raw_true[t] for t in nearest],
                                                      dtype=object), return_counts=True)
                vals.append(labels[counts.argmax()])
        columns.append(vals)
    return columns

