"""Heterogeneous feature encoder.

Projects each feature of a row into a shared d-dimensional space (embedding
tables for categorical/ordinal features, one shared linear map over
[value || one-hot(feature id)] for continuous ones), runs a stack of
masked transformer layers without positional encodings, and pools the
observed positions into one embedding per observation.
"""

from __future__ import annotations

import math

import numpy as np

from . import tensor as T
from .data import ColumnSpec
from .errors import SchemaError
from .tensor import Tensor


def glorot(rng: np.random.Generator, fan_in: int, fan_out: int, shape=None) -> np.ndarray:
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape or (fan_in, fan_out))


def init_encoder_params(schema: list[ColumnSpec], cfg, rng: np.random.Generator) -> dict:
    d = cfg.dim
    n_cont = sum(1 for c in schema if c.is_numeric)
    params: dict[str, Tensor] = {}
    for col in schema:
        if not col.is_numeric:
            params[f"emb.{col.name}"] = Tensor(
                rng.normal(0.0, 1.0 / math.sqrt(d), size=(col.cardinality, d)), requires_grad=True)
    params["cont.W"] = Tensor(glorot(rng, 1 + n_cont, d), requires_grad=True)
    params["cont.b"] = Tensor(np.zeros(d), requires_grad=True)
    ff = cfg.ff_mult * d
    for layer in range(cfg.layers):
        p = f"tf{layer}."
        for nm in ("Wq", "Wk", "Wv", "Wo"):
            params[p + nm] = Tensor(glorot(rng, d, d), requires_grad=True)
            params[p + nm.replace("W", "b")] = Tensor(np.zeros(d), requires_grad=True)
        params[p + "ff.W1"] = Tensor(glorot(rng, d, ff), requires_grad=True)
        params[p + "ff.b1"] = Tensor(np.zeros(ff), requires_grad=True)
        params[p + "ff.W2"] = Tensor(glorot(rng, ff, d), requires_grad=True)
        params[p + "ff.b2"] = Tensor(np.zeros(d), requires_grad=True)
        params[p + "ln1.g"] = Tensor(np.ones(d), requires_grad=True)
        params[p + "ln1.b"] = Tensor(np.zeros(d), requires_grad=True)
        params[p + "ln2.g"] = Tensor(np.ones(d), requires_grad=True)
        params[p + "ln2.b"] = Tensor(np.zeros(d), requires_grad=True)
    return params


def embed_features(params: dict, X: np.ndarray, M: np.ndarray,
                   schema: list[ColumnSpec], cfg) -> Tensor:
    """Per-feature embeddings, shape (B, k, d).

    Input cells hidden by the mask are sanitized to the fill value 0 before
    use so masked raw values can never reach the computation.
    """
    B = X.shape[0]
    d = cfg.dim
    Xs = X * M  # fill-value sanitation (categorical indices collapse to 0)
    cont_ids = [j for j, c in enumerate(schema) if c.is_numeric]
    n_cont = len(cont_ids)
    per_feature = []
    for j, col in enumerate(schema):
        if col.is_numeric:
            inp = np.zeros((B, 1 + n_cont))
            inp[:, 0] = Xs[:, j]
            inp[:, 1 + cont_ids.index(j)] = 1.0
            e = T.matmul(Tensor(inp), params["cont.W"]) + params["cont.b"]
        else:
            idx = np.rint(Xs[:, j]).astype(np.int64)
            if np.any(idx >= col.cardinality) or np.any(idx < 0):
                raise SchemaError(f"column {col.name!r}: category index out of range")
            e = T.gather_rows(params[f"emb.{col.name}"], idx)
        per_feature.append(T.reshape(e, (B, 1, d)))
    return T.concat(per_feature, axis=1)


def transformer_layer(params: dict, prefix: str, E: Tensor, M: np.ndarray, cfg) -> Tensor:
    """Post-norm transformer block with key-side attention masking."""
    B, k, d = E.shape
    H = cfg.heads
    dh = d // H

    def split_heads(x):
        return T.transpose(T.reshape(x, (B, k, H, dh)), 1, 2)  # (B, H, k, dh)

    q = split_heads(T.matmul(E, params[prefix + "Wq"]) + params[prefix + "bq"])
    kk = split_heads(T.matmul(E, params[prefix + "Wk"]) + params[prefix + "bk"])
    v = split_heads(T.matmul(E, params[prefix + "Wv"]) + params[prefix + "bv"])
    scores = T.matmul(q, T.transpose(kk)) * (1.0 / math.sqrt(dh))  # (B, H, k, k)
    key_mask = M.reshape(B, 1, 1, k)
    attn = T.masked_softmax(scores, key_mask)
    ctx = T.reshape(T.transpose(T.matmul(attn, v), 1, 2), (B, k, d))
    mha = T.matmul(ctx, params[prefix + "Wo"]) + params[prefix + "bo"]
    x = T.layer_norm(E + mha, params[prefix + "ln1.g"], params[prefix + "ln1.b"])
    ff = T.matmul(T.relu(T.matmul(x, params[prefix + "ff.W1"]) + params[prefix + "ff.b1"]),
                  params[prefix + "ff.W2"]) + params[prefix + "ff.b2"]
    return T.layer_norm(x + ff, params[prefix + "ln2.g"], params[prefix + "ln2.b"])


def encode_observations(params: dict, X: np.ndarray, Mhat: np.ndarray,
                        schema: list[ColumnSpec], cfg) -> Tensor:
    """Contextual observation embeddings Z, shape (B, d).

    Only positions with Mhat == 1 act as attention keys and enter the mean
    pool; rows with no observed feature map to the zero vector.
    """
    E = embed_features(params, X, Mhat, schema, cfg)
    for layer in range(cfg.layers):
        E = transformer_layer(params, f"tf{layer}.", E, Mhat, cfg)
    return T.masked_mean_pool(E, Mhat)
