"""Graph-enhanced deep imputation for mixed-type tabular data.

End-to-end imputation and downstream binary label prediction: a masked
transformer feature encoder, a learned similarity-graph encoder, per-feature
imputation heads, and a bi-level meta-learned task weighting scheme, all on
a small numpy-backed reverse-mode autodiff engine.
"""

__version__ = "0.1.0"

from .data import (ColumnSpec, MaskSet, TabularDataset, compose_masks,
                   encode_table, generate_mcar_mask, generate_synthetic,
                   load_csv, load_schema, split_train_test, write_csv,
                   write_schema)
from .errors import (ConfigError, DataError, DimensionError, GediError,
                     NumericError, ParseError, SchemaError, UsageError)
from .metrics import (accuracy_error, auprc, baseline_knn, baseline_mean_mode,
                      displacement_error, mean_imputation_error, nrmse,
                      per_feature_errors)
from .model import ForwardResult, ModelConfig, VARIANTS, model_forward, init_model_params
from .tensor import Tape, Tensor, backward, grad_check, stop_taping
from .training import (Adam, MODES, TrainConfig, TrainResult, load_checkpoint,
                       save_checkpoint, train_imputation, train_predict)

__all__ = [
    "__version__",
    "ColumnSpec", "MaskSet", "TabularDataset", "compose_masks", "encode_table",
    "generate_mcar_mask", "generate_synthetic", "load_csv", "load_schema",
    "split_train_test", "write_csv", "write_schema",
    "ConfigError", "DataError", "DimensionError", "GediError", "NumericError",
    "ParseError", "SchemaError", "UsageError",
    "accuracy_error", "auprc", "baseline_knn", "baseline_mean_mode",
    "displacement_error", "mean_imputation_error", "nrmse", "per_feature_errors",
    "ForwardResult", "ModelConfig", "VARIANTS", "model_forward", "init_model_params",
    "Tape", "Tensor", "backward", "grad_check", "stop_taping",
    "Adam", "MODES", "TrainConfig", "TrainResult", "load_checkpoint",
    "save_checkpoint", "train_imputation", "train_predict",
]
