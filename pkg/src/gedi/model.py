"""Full imputation model: configuration, parameter initialization and the
variant-aware forward pass (full model, feature-encoder-only, graph-only)."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import heads
from .data import ColumnSpec
from .encoder import encode_observations, init_encoder_params
from .errors import ConfigError
from .graph import SimilarityGraph, build_graph, gcn_forward, init_graph_params
from .heads import init_head_params
from .tensor import Tensor

VARIANTS = ("gedi", "gedi-f", "gedi-g")


@dataclass
class ModelConfig:
    variant: str = "gedi"
    dim: int = 32
    heads: int = 4
    layers: int = 2
    gcn_layers: int = 1
    ff_mult: int = 2
    head_width: int = 32
    epsilon: float = 0.8
    task_emb: int = 8

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ConfigError(f"unknown variant {self.variant!r}")
        if self.dim % self.heads != 0:
            raise ConfigError("head count must divide the model width")


def raw_node_width(schema: list[ColumnSpec]) -> int:
    return sum(1 if c.is_numeric else c.cardinality for c in schema)


def raw_node_features(X: np.ndarray, M: np.ndarray, schema: list[ColumnSpec]) -> np.ndarray:
    """Zero-filled standardized / one-hot node features for the graph-only
    variant (no transformer involved)."""
    B = X.shape[0]
    cols = []
    for j, col in enumerate(schema):
        if col.is_numeric:
            cols.append((X[:, j] * M[:, j]).reshape(B, 1))
        else:
            oh = np.zeros((B, col.cardinality))
            idx = np.rint(X[:, j]).astype(int)
            oh[np.arange(B), idx] = 1.0
            cols.append(oh * M[:, j].reshape(B, 1))
    return np.concatenate(cols, axis=1)


def init_model_params(schema: list[ColumnSpec], cfg: ModelConfig,
                      rng: np.random.Generator) -> dict:
    params: dict[str, Tensor] = {}
    if cfg.variant in ("gedi", "gedi-f"):
        params.update(init_encoder_params(schema, cfg, rng))
    if cfg.variant == "gedi":
        params.update(init_graph_params(cfg.dim, cfg, rng))
        merge_in = 2 * cfg.dim
    elif cfg.variant == "gedi-g":
        params.update(init_graph_params(raw_node_width(schema), cfg, rng))
        merge_in = cfg.dim
    else:
        merge_in = cfg.dim
    params.update(init_head_params(schema, cfg, merge_in, rng))
    return params


@dataclass
class ForwardResult:
    Z: Tensor | None
    G: Tensor | None
    H: Tensor
    graph: SimilarityGraph | None
    logits: list[Tensor]
    preds: list[Tensor] = field(default_factory=list)


def model_forward(params: dict, X: np.ndarray, Mhat: np.ndarray,
                  schema: list[ColumnSpec], cfg: ModelConfig,
                  want_preds: bool = True) -> ForwardResult:
    """Run the configured variant on one batch.

    X is the encoded matrix, Mhat the composed visibility mask for this
    pass. Cells hidden by Mhat never influence the outputs.
    """
    Z = G = None
    graph = None
    if cfg.variant == "gedi":
        Z = encode_observations(params, X, Mhat, schema, cfg)
        A, graph = build_graph(Z, params, cfg.epsilon)
        G = gcn_forward(Z, A, params, cfg.gcn_layers)
        H = heads.merge_representations([G, Z], params)
    elif cfg.variant == "gedi-f":
        Z = encode_observations(params, X, Mhat, schema, cfg)
        H = heads.merge_representations([Z], params)
    else:  # gedi-g
        R = Tensor(raw_node_features(X, Mhat, schema))
        A, graph = build_graph(R, params, cfg.epsilon)
        G = gcn_forward(R, A, params, cfg.gcn_layers)
        H = heads.merge_representations([G], params)
    logits = heads.feature_logits(H, params, schema)
    res = ForwardResult(Z=Z, G=G, H=H, graph=graph, logits=logits)
    if want_preds:
        res.preds = [lg if col.is_numeric else _probs(lg)
                     for col, lg in zip(schema, logits)]
    return res


def _probs(lg: Tensor):
    from . import tensor as T
    return T.masked_softmax(lg, np.ones(lg.shape))
