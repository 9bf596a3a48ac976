"""Schema-driven tabular data handling.

Covers CSV ingestion, feature encoding/normalization, MCAR mask generation,
mask composition, train/test splitting and the synthetic fixture used by the
test suite.

Encoding conventions:
- continuous/count columns are standardized to zero mean / unit variance
  using the *observed* entries only (population std; constant columns keep
  std 1 and are flagged);
- categorical/ordinal columns are stored as category indices;
- missing entries hold the fill value 0 after encoding.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass

import numpy as np

from .errors import DataError, ParseError, SchemaError
from .rng import substream

NUMERIC_KINDS = ("continuous", "count")
CATEGORICAL_KINDS = ("categorical", "ordinal")
KINDS = NUMERIC_KINDS + CATEGORICAL_KINDS


@dataclass
class ColumnSpec:
    name: str
    kind: str
    categories: list[str] | None = None
    mean: float = 0.0
    std: float = 1.0
    constant: bool = False

    def __post_init__(self):
        if self.kind not in KINDS:
            raise SchemaError(f"column {self.name!r}: unknown kind {self.kind!r}")
        if self.kind in CATEGORICAL_KINDS:
            if not self.categories or len(self.categories) < 2:
                raise SchemaError(f"column {self.name!r}: needs >= 2 categories")
            if len(set(self.categories)) != len(self.categories):
                raise SchemaError(f"column {self.name!r}: duplicate categories")

    @property
    def is_numeric(self) -> bool:
        return self.kind in NUMERIC_KINDS

    @property
    def cardinality(self) -> int:
        return len(self.categories) if self.categories else 0


@dataclass
class TabularDataset:
    schema: list[ColumnSpec]
    X: np.ndarray          # (n, k) encoded
    M: np.ndarray          # (n, k) observed mask, 1 = observed
    Y: np.ndarray | None = None   # (n,) binary labels
    V: np.ndarray | None = None   # (n,) 1 = train, 0 = test
    raw: list | None = None       # k raw-unit columns as ingested (None = missing)

    @property
    def n(self) -> int:
        return self.X.shape[0]

    @property
    def k(self) -> int:
        return self.X.shape[1]

    def numeric_indices(self) -> list[int]:
        return [j for j, c in enumerate(self.schema) if c.is_numeric]

    def categorical_indices(self) -> list[int]:
        return [j for j, c in enumerate(self.schema) if not c.is_numeric]

    def decode_cell(self, i: int, j: int):
        """Raw-unit value of an observed encoded cell."""
        col = self.schema[j]
        v = self.X[i, j]
        if col.is_numeric:
            return v * col.std + col.mean
        return col.categories[int(round(v))]


@dataclass
class MaskSet:
    M_test: np.ndarray
    M_valid: np.ndarray
    rate_test: float
    rate_valid: float


# ---------------------------------------------------------------------------
# schema io
# ---------------------------------------------------------------------------


def load_schema(path: str) -> tuple[list[ColumnSpec], str | None]:
    with open(path, "r", encoding="utf-8") as fh:
        obj = json.load(fh)
    if "columns" not in obj:
        raise SchemaError("schema file missing 'columns'")
    specs = []
    for c in obj["columns"]:
        specs.append(ColumnSpec(name=c["name"], kind=c["kind"], categories=c.get("categories")))
    target = obj.get("target", {}).get("name") if isinstance(obj.get("target"), dict) else None
    return specs, target


def write_schema(path: str, specs: list[ColumnSpec], target: str | None = None):
    cols = []
    for c in specs:
        entry = {"name": c.name, "kind": c.kind}
        if c.categories is not None:
            entry["categories"] = list(c.categories)
        cols.append(entry)
    obj: dict = {"columns": cols}
    if target is not None:
        obj["target"] = {"name": target}
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")


# ---------------------------------------------------------------------------
# encoding
# ---------------------------------------------------------------------------


def encode_table(cells: list[list], specs: list[ColumnSpec],
                 labels: list | None = None, target_categories: list[str] | None = None) -> TabularDataset:
    """Encode raw cells (None = missing) into a TabularDataset.

    Fits normalization statistics / checks categories in place on `specs`.
    """
    n = len(cells)
    k = len(specs)
    X = np.zeros((n, k), dtype=np.float64)
    M = np.zeros((n, k), dtype=np.float64)
    raw_columns: list = []
    for j, col in enumerate(specs):
        raw = [row[j] for row in cells]
        if col.is_numeric:
            vals, obs = [], []
            for i, v in enumerate(raw):
                if v is None:
                    vals.append(0.0)
                    continue
                try:
                    x = float(v)
                except (TypeError, ValueError):
                    raise ParseError(f"column {col.name!r}, row {i}: non-numeric value {v!r}")
                vals.append(x)
                obs.append((i, x))
                M[i, j] = 1.0
            if obs:
                ov = np.array([x for _, x in obs])
                col.mean = float(ov.mean())
                std = float(ov.std())  # population std
                col.constant = std == 0.0
                col.std = 1.0 if col.constant else std
            for i, x in obs:
                X[i, j] = (x - col.mean) / col.std
            raw_columns.append([v if M[i, j] == 1.0 else None
                                for i, v in enumerate(vals)])
        else:
            lut = {lab: idx for idx, lab in enumerate(col.categories)}
            for i, v in enumerate(raw):
                if v is None:
                    continue
                if v not in lut:
                    raise SchemaError(f"column {col.name!r}, row {i}: unknown category {v!r}")
                X[i, j] = float(lut[v])
                M[i, j] = 1.0
            raw_columns.append([v for v in raw])
    Y = None
    if labels is not None:
        Y = np.zeros(n, dtype=np.float64)
        if target_categories:
            lut = {lab: idx for idx, lab in enumerate(target_categories)}
            for i, v in enumerate(labels):
                if v not in lut:
                    raise SchemaError(f"target, row {i}: unknown label {v!r}")
                Y[i] = float(lut[v])
        else:
            for i, v in enumerate(labels):
                try:
                    Y[i] = float(v)
                except (TypeError, ValueError):
                    raise ParseError(f"target, row {i}: non-numeric label {v!r}")
        if not np.all(np.isin(Y, (0.0, 1.0))):
            raise DataError("target labels must be binary (0/1)")
    return TabularDataset(schema=specs, X=X, M=M, Y=Y, raw=raw_columns)


def load_csv(path: str, specs: list[ColumnSpec], target: str | None = None) -> TabularDataset:
    """Read a comma-separated, UTF-8, headered file; empty cells are missing."""
    with open(path, "r", encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise DataError(f"{path}: empty file")
        rows = [r for r in reader]
    names = [c.name for c in specs]
    col_pos = {}
    for c in specs:
        if c.name not in header:
            raise SchemaError(f"column {c.name!r} missing from header {header}")
        col_pos[c.name] = header.index(c.name)
    tgt_pos = None
    if target is not None:
        if target not in header:
            raise SchemaError(f"target column {target!r} missing from header")
        tgt_pos = header.index(target)
    cells = []
    labels = [] if tgt_pos is not None else None
    for r in rows:
        cells.append([r[col_pos[nm]].strip() or None for nm in names])
        if tgt_pos is not None:
            labels.append(r[tgt_pos].strip())
    return encode_table(cells, specs, labels=labels)


def write_csv(path: str, specs: list[ColumnSpec], columns: list[list], target: str | None = None,
              labels: list | None = None):
    """Write raw-unit columns back out in the input dialect."""
    header = [c.name for c in specs]
    if target is not None:
        header = header + [target]
    n = len(columns[0]) if columns else 0
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for i in range(n):
            row = []
            for j, col in enumerate(specs):
                v = columns[j][i]
                if v is None:
                    row.append("")
                elif col.is_numeric:
                    row.append(repr(float(v)))
                else:
                    row.append(str(v))
            if labels is not None:
                row.append(repr(float(labels[i])) if labels[i] is not None else "")
            w.writerow(row)


# ---------------------------------------------------------------------------
# masks and splits
# ---------------------------------------------------------------------------


def generate_mcar_mask(n: int, k: int, rate: float, seed: int) -> np.ndarray:
    """Binary mask with each entry independently 0 (hidden) w.p. `rate`."""
    if not 0.0 <= rate <= 1.0:
        raise ValueError(f"missing rate must lie in [0, 1], got {rate}")
    rng = substream(seed, "mask")
    return (rng.random((n, k)) >= rate).astype(np.float64)


def compose_masks(M: np.ndarray, M2: np.ndarray) -> np.ndarray:
    if M.shape != M2.shape:
        raise ValueError(f"mask shape mismatch {M.shape} vs {M2.shape}")
    return M * M2


def split_train_test(n: int, train_fraction: float, valid_fraction_of_train: float,
                     seed: int) -> tuple[np.ndarray, np.ndarray]:
    """Random train/test indicator V (1 = train) plus validation index set.

    Validation indices are a subset of the train rows.
    """
    if not (0.0 < train_fraction < 1.0 and 0.0 < valid_fraction_of_train < 1.0):
        raise ValueError("fractions must lie in (0, 1)")
    if n < 5:
        raise ValueError("need at least 5 rows to form train/valid/test")
    rng = substream(seed, "split")
    perm = rng.permutation(n)
    n_train = int(round(n * train_fraction))
    n_train = min(max(n_train, 2), n - 1)
    train_idx = perm[:n_train]
    n_valid = int(round(n_train * valid_fraction_of_train))
    n_valid = min(max(n_valid, 1), n_train - 1)
    valid_idx = np.sort(train_idx[:n_valid])
    V = np.zeros(n, dtype=np.float64)
    V[train_idx] = 1.0
    return V, valid_idx


# ---------------------------------------------------------------------------
# synthetic fixture
# ---------------------------------------------------------------------------

SYNTH_LABEL_FEATURE = "x2"        # the one feature that determines the label
SYNTH_PLANTED_FEATURE = "c1"      # deterministic function of sign(x1)

_QUINTILES = (-0.8416212335729143, -0.2533471031357997, 0.2533471031357997, 0.8416212335729143)


def generate_synthetic(n: int, seed: int) -> TabularDataset:
    """Mixed-type dataset with planted dependencies.

    Planted structure: c1 == sign(x1); x4 is a near-copy of x1; c2 bins x3;
    o1 bins x2 into quintiles; the binary label is a noisy threshold of x2
    alone; c3 is independent noise.
    """
    if n < 100:
        raise ValueError("synthetic fixture needs n >= 100")
    rng = substream(seed, "synthetic")
    x1 = rng.standard_normal(n)
    x2 = rng.standard_normal(n)
    x3 = rng.standard_normal(n)
    x4 = 0.9 * x1 + 0.25 * rng.standard_normal(n)
    c1 = np.where(x1 > 0, "pos", "neg")
    c2 = np.where(x3 < -0.4307, "a", np.where(x3 < 0.4307, "b", "c"))
    o1_rank = np.searchsorted(_QUINTILES, x2)
    o1_levels = ["q1", "q2", "q3", "q4", "q5"]
    c3 = np.where(rng.random(n) < 0.35, "v", "u")
    y = (x2 + 0.4 * rng.standard_normal(n) > 0).astype(np.float64)

    specs = [
        ColumnSpec("x1", "continuous"),
        ColumnSpec("x2", "continuous"),
        ColumnSpec("x3", "continuous"),
        ColumnSpec("x4", "continuous"),
        ColumnSpec("c1", "categorical", ["neg", "pos"]),
        ColumnSpec("c2", "categorical", ["a", "b", "c"]),
        ColumnSpec("o1", "ordinal", o1_levels),
        ColumnSpec("c3", "categorical", ["u", "v"]),
    ]
    cells = []
    for i in range(n):
        cells.append([x1[i], x2[i], x3[i], x4[i], c1[i], c2[i], o1_levels[o1_rank[i]], c3[i]])
    ds = encode_table(cells, specs)
    ds.Y = y
    return ds


def raw_column(ds: TabularDataset, j: int) -> np.ndarray:
    """Raw-unit values for one column; entries missing at ingestion fall
    back to the decoded fill value (they are never evaluated)."""
    col = ds.schema[j]
    if col.is_numeric:
        decoded = ds.X[:, j] * col.std + col.mean
        if ds.raw is None:
            return decoded
        return np.array([r if r is not None else d
                         for r, d in zip(ds.raw[j], decoded)], dtype=np.float64)
    labels = [col.categories[int(round(v))] for v in ds.X[:, j]]
    if ds.raw is not None:
        labels = [r if r is not None else d for r, d in zip(ds.raw[j], labels)]
    return np.asarray(labels, dtype=object)


def synthetic_raw_columns(ds: TabularDataset) -> list[list]:
    """Ground-truth raw-unit columns of a fully observed dataset."""
    return [list(raw_column(ds, j)) for j in range(ds.k)]
