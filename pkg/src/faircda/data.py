"""Tabular ingestion, encoding, splits, batching, and synthetic generators.

The encoder is fitted on the training split only: numerics are z-scored with
train statistics, categoricals are one-hot over the train vocabulary, and
categories unseen at train time encode to an all-zero block.  The sensitive
column is excluded from the feature matrix by default; it supervises the
attribute branch instead.  A flag includes it (as a raw 0/1 column) for the
attribute-flip baseline, which needs an input it can flip.
"""

from __future__ import annotations

import csv
import json
import warnings
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

TRAIN, VAL, TEST = 0, 1, 2
SPLIT_NAMES = {"train": TRAIN, "val": VAL, "test": TEST}


class DataError(Exception):
    pass


@dataclass(frozen=True)
class ColumnSpec:
    name: str
    kind: str  # "numeric" | "categorical"

    def __post_init__(self):
        if self.kind not in ("numeric", "categorical"):
            raise DataError(f"column '{self.name}': unknown kind '{self.kind}'")


@dataclass
class DatasetSchema:
    columns: list[ColumnSpec]
    label: str
    label_positive: str
    sensitive: str
    sensitive_group1: str
    include_sensitive_feature: bool = False
    missing_token: str = "?"
    missing_policy: str = "drop"  # "drop" | "error"

    def __post_init__(self):
        names = [c.name for c in self.columns]
        if len(set(names)) != len(names):
            raise DataError("duplicate column names in schema")
        if self.missing_policy not in ("drop", "error"):
            raise DataError(f"unknown missing policy '{self.missing_policy}'")

    @property
    def feature_columns(self) -> list[ColumnSpec]:
        out = []
        for c in self.columns:
            if c.name == self.label:
                continue
            if c.name == self.sensitive and not self.include_sensitive_feature:
                continue
            out.append(c)
        return out

    def column(self, name: str) -> ColumnSpec:
        for c in self.columns:
            if c.name == name:
                return c
        raise DataError(f"schema has no column '{name}'")

    def to_dict(self) -> dict:
        return {
            "columns": [{"name": c.name, "kind": c.kind} for c in self.columns],
            "label": self.label,
            "label_positive": self.label_positive,
            "sensitive": self.sensitive,
            "sensitive_group1": self.sensitive_group1,
            "include_sensitive_feature": self.include_sensitive_feature,
            "missing_token": self.missing_token,
            "missing_policy": self.missing_policy,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "DatasetSchema":
        return cls(
            columns=[ColumnSpec(c["name"], c["kind"]) for c in d["columns"]],
            label=d["label"],
            label_positive=d["label_positive"],
            sensitive=d["sensitive"],
            sensitive_group1=d["sensitive_group1"],
            include_sensitive_feature=d.get("include_sensitive_feature", False),
            missing_token=d.get("missing_token", "?"),
            missing_policy=d.get("missing_policy", "drop"),
        )

    def save(self, path):
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_dict(), fh, indent=2)

    @classmethod
    def load(cls, path) -> "DatasetSchema":
        with open(path, encoding="utf-8") as fh:
            return cls.from_dict(json.load(fh))


@dataclass
class RawTable:
    schema: DatasetSchema
    rows: list[dict]  # column name -> float (numeric) or str (categorical/label/sensitive)
    n_missing_dropped: int = 0
    rejected: list[tuple[int, str]] = field(default_factory=list)

    def __len__(self):
        return len(self.rows)


def _parse_rows(header: Sequence[str], raw_rows: Iterable[Sequence[str]],
                schema: DatasetSchema) -> RawTable:
    for col in schema.columns:
        if col.name not in header:
            raise DataError(f"missing column '{col.name}' in header")
    idx = {c.name: header.index(c.name) for c in schema.columns}
    numeric = {c.name for c in schema.columns if c.kind == "numeric"
               and c.name not in (schema.label, schema.sensitive)}

    rows: list[dict] = []
    dropped = 0
    rejected: list[tuple[int, str]] = []
    for i, raw in enumerate(raw_rows):
        if len(raw) != len(header):
            rejected.append((i, f"expected {len(header)} fields, got {len(raw)}"))
            continue
        record: dict = {}
        missing = False
        bad = None
        for c in schema.columns:
            val = raw[idx[c.name]].strip()
            if val == schema.missing_token or val == "":
                missing = True
                break
            if c.name in numeric:
                try:
                    record[c.name] = float(val)
                except ValueError:
                    bad = f"column '{c.name}': cannot parse '{val}' as numeric"
                    break
            else:
                record[c.name] = val
        if bad is not None:
            rejected.append((i, bad))
            continue
        if missing:
            if schema.missing_policy == "error":
                raise DataError(f"row {i}: missing value under policy 'error'")
            dropped += 1
            continue
        rows.append(record)
    return RawTable(schema=schema, rows=rows, n_missing_dropped=dropped, rejected=rejected)


def load_csv(path, schema: DatasetSchema) -> RawTable:
    """Read a comma-delimited UTF-8 CSV with header into typed rows.

    Rows with the wrong field count or unparseable numerics are rejected and
    reported with their index; missing values follow the schema policy.
    """
    with open(path, encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise DataError(f"{path}: empty file") from None
        return _parse_rows(header, reader, schema)


# ---------------------------------------------------------------------------
# encoding
# ---------------------------------------------------------------------------

@dataclass
class EncoderState:
    numeric_stats: dict[str, tuple[float, float | None]]  # col -> (mean, sd or None)
    vocab: dict[str, list[str]]                            # col -> sorted train categories
    feature_names: list[str]
    feature_slices: dict[str, tuple[int, int]]             # col -> [j0, j1) block
    sensitive_feature_index: int | None = None

    def to_dict(self) -> dict:
        return {
            "numeric_stats": {k: [v[0], v[1]] for k, v in self.numeric_stats.items()},
            "vocab": self.vocab,
            "feature_names": self.feature_names,
            "feature_slices": {k: list(v) for k, v in self.feature_slices.items()},
            "sensitive_feature_index": self.sensitive_feature_index,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "EncoderState":
        return cls(
            numeric_stats={k: (v[0], v[1]) for k, v in d["numeric_stats"].items()},
            vocab={k: list(v) for k, v in d["vocab"].items()},
            feature_names=list(d["feature_names"]),
            feature_slices={k: (v[0], v[1]) for k, v in d["feature_slices"].items()},
            sensitive_feature_index=d.get("sensitive_feature_index"),
        )


@dataclass
class DataView:
    """One split of an encoded dataset."""

    x: np.ndarray
    y: np.ndarray
    a: np.ndarray

    def __len__(self):
        return len(self.y)


@dataclass
class EncodedDataset:
    x: np.ndarray       # [n, d] float64
    y: np.ndarray       # [n] 0/1
    a: np.ndarray       # [n] 0/1
    split: np.ndarray   # [n] in {TRAIN, VAL, TEST}
    encoder: EncoderState | None = None
    schema: DatasetSchema | None = None
    pair_id: np.ndarray | None = None

    @property
    def dim(self) -> int:
        return self.x.shape[1]

    def view(self, which) -> DataView:
        code = SPLIT_NAMES[which] if isinstance(which, str) else which
        sel = self.split == code
        return DataView(self.x[sel], self.y[sel], self.a[sel])

    def __len__(self):
        return len(self.y)


def split_indices(n: int, fracs: Sequence[float], seed: int) -> np.ndarray:
    if abs(sum(fracs) - 1.0) > 1e-9 or len(fracs) != 3:
        raise DataError(f"split fractions must be three values summing to 1, got {fracs}")
    rng = np.random.Generator(np.random.PCG64(seed))
    perm = rng.permutation(n)
    n_train = int(round(fracs[0] * n))
    n_val = int(round(fracs[1] * n))
    out = np.full(n, TEST, dtype=np.int64)
    out[perm[:n_train]] = TRAIN
    out[perm[n_train:n_train + n_val]] = VAL
    return out


def fit_encode(table: RawTable, schema: DatasetSchema | None = None, seed: int = 0,
               fracs: Sequence[float] = (0.6, 0.2, 0.2)) -> EncodedDataset:
    """Split, then fit the encoder on the training rows only.

    Numerics: z-score with train mean and sample sd (ddof=1; the zero-sd
    degenerate case encodes as constant 0 with a warning).  Categoricals:
    one-hot over the sorted train vocabulary; unseen values map to all zeros.
    """
    schema = schema or table.schema
    rows = table.rows
    if not rows:
        raise DataError("no rows to encode")
    split = split_indices(len(rows), fracs, seed)
    train_rows = [r for r, s in zip(rows, split) if s == TRAIN]
    if not train_rows:
        raise DataError("training split is empty")

    numeric_stats: dict[str, tuple[float, float | None]] = {}
    vocab: dict[str, list[str]] = {}
    for col in schema.feature_columns:
        if col.name == schema.sensitive:
            continue  # handled as a raw 0/1 column below
        if col.kind == "numeric":
            vals = np.array([r[col.name] for r in train_rows], dtype=np.float64)
            mean = float(vals.mean())
            sd = float(vals.std(ddof=1)) if len(vals) > 1 else 0.0
            if sd == 0.0:
                warnings.warn(f"numeric column '{col.name}' has zero variance on train; "
                              "encoding as constant 0")
                numeric_stats[col.name] = (mean, None)
            else:
                numeric_stats[col.name] = (mean, sd)
        else:
            vocab[col.name] = sorted({str(r[col.name]) for r in train_rows})

    feature_names: list[str] = []
    feature_slices: dict[str, tuple[int, int]] = {}
    for col in schema.feature_columns:
        if col.name == schema.sensitive:
            continue
        j0 = len(feature_names)
        if col.kind == "numeric":
            feature_names.append(col.name)
        else:
            feature_names.extend(f"{col.name}={v}" for v in vocab[col.name])
        feature_slices[col.name] = (j0, len(feature_names))
    sensitive_index = None
    if schema.include_sensitive_feature:
        sensitive_index = len(feature_names)
        feature_names.append(f"sensitive:{schema.sensitive}")
        feature_slices[schema.sensitive] = (sensitive_index, sensitive_index + 1)

    vocab_index = {c: {v: i for i, v in enumerate(vv)} for c, vv in vocab.items()}
    n, d = len(rows), len(feature_names)
    x = np.zeros((n, d))
    y = np.zeros(n)
    a = np.zeros(n)
    for i, r in enumerate(rows):
        y[i] = 1.0 if str(r[schema.label]) == schema.label_positive else 0.0
        a[i] = 1.0 if str(r[schema.sensitive]) == schema.sensitive_group1 else 0.0
        for col in schema.feature_columns:
            if col.name == schema.sensitive:
                continue
            j0, j1 = feature_slices[col.name]
            if col.kind == "numeric":
                mean, sd = numeric_stats[col.name]
                x[i, j0] = 0.0 if sd is None else (r[col.name] - mean) / sd
            else:
                # unseen categories stay all zeros
                k = vocab_index[col.name].get(str(r[col.name]))
                if k is not None:
                    x[i, j0 + k] = 1.0
        if sensitive_index is not None:
            x[i, sensitive_index] = a[i]

    encoder = EncoderState(numeric_stats=numeric_stats, vocab=vocab,
                           feature_names=feature_names, feature_slices=feature_slices,
                           sensitive_feature_index=sensitive_index)
    return EncodedDataset(x=x, y=y, a=a, split=split, encoder=encoder, schema=schema)


def decode_row(encoded_row: np.ndarray, encoder: EncoderState,
               schema: DatasetSchema) -> dict:
    """Invert the encoding of one feature row (unseen one-hot blocks -> None)."""
    out: dict = {}
    for col in schema.feature_columns:
        if col.name == schema.sensitive:
            continue
        j0, j1 = encoder.feature_slices[col.name]
        if col.kind == "numeric":
            mean, sd = encoder.numeric_stats[col.name]
            out[col.name] = mean if sd is None else encoded_row[j0] * sd + mean
        else:
            block = encoded_row[j0:j1]
            if block.max() <= 0.0:
                out[col.name] = None
            else:
                out[col.name] = encoder.vocab[col.name][int(np.argmax(block))]
    return out


# ---------------------------------------------------------------------------
# batching
# ---------------------------------------------------------------------------

@dataclass
class LabeledBatch:
    x: np.ndarray
    y: np.ndarray
    a: np.ndarray

    def __len__(self):
        return len(self.y)


def group_balanced_batch(view: DataView, per_group: int,
                         rng: np.random.Generator) -> LabeledBatch:
    """Exactly ``per_group`` rows from each attribute group, shuffled.

    Groups smaller than ``per_group`` are sampled with replacement.
    """
    chosen = []
    for g in (0.0, 1.0):
        pool = np.flatnonzero(view.a == g)
        if len(pool) == 0:
            raise DataError(f"attribute group {int(g)} is empty; cannot form a balanced batch")
        replace = len(pool) < per_group
        chosen.append(rng.choice(pool, size=per_group, replace=replace))
    idx = np.concatenate(chosen)
    rng.shuffle(idx)
    return LabeledBatch(x=view.x[idx], y=view.y[idx], a=view.a[idx])


# ---------------------------------------------------------------------------
# synthetic generator (two-group Gaussian mixture)
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SynthSpec:
    """Two-group Gaussian mixture with controllable label-attribute coupling.

    The label direction is axis 0 (class means at +-label_sep/2) and the
    group direction is axis 1 (group means at +-shift/2); the remaining
    dimensions are pure noise.  ``corr`` is the difference in positive base
    rate between the two groups.  ``group_label_leak`` additionally shifts
    the group axis by the label, entangling a removable label signal with
    the group direction (the unfairness an invariance-trained model can
    actually shed).  ``pair_flip`` mode appends sample pairs with identical
    features whose attribute and label are both flipped.
    """

    n: int = 4000
    dim: int = 8
    shift: float = 2.0
    corr: float = 0.4
    label_sep: float = 2.0
    group_label_leak: float = 0.0
    mode: str = "gaussian"  # "gaussian" | "pair_flip"
    pair_frac: float = 0.4
    fracs: tuple = (0.6, 0.2, 0.2)

    def __post_init__(self):
        if self.mode not in ("gaussian", "pair_flip"):
            raise DataError(f"unknown synth mode '{self.mode}'")
        if not (0.0 <= self.corr <= 1.0) or self.n <= 0 or self.dim < 2:
            raise DataError("invalid synth spec")

    def to_dict(self) -> dict:
        return {"n": self.n, "dim": self.dim, "shift": self.shift, "corr": self.corr,
                "label_sep": self.label_sep, "group_label_leak": self.group_label_leak,
                "mode": self.mode, "pair_frac": self.pair_frac, "fracs": list(self.fracs)}

    @classmethod
    def from_dict(cls, d: dict) -> "SynthSpec":
        d = dict(d)
        if "fracs" in d:
            d["fracs"] = tuple(d["fracs"])
        return cls(**d)


def _synth_means(spec: SynthSpec, y: np.ndarray, a: np.ndarray) -> np.ndarray:
    mu = np.zeros((len(y), spec.dim))
    mu[:, 0] = (2.0 * y - 1.0) * spec.label_sep / 2.0
    mu[:, 1] = ((2.0 * a - 1.0) * spec.shift / 2.0
                + (2.0 * y - 1.0) * spec.group_label_leak / 2.0)
    return mu


def synth_generate(spec: SynthSpec, seed: int) -> EncodedDataset:
    rng = np.random.Generator(np.random.PCG64(seed))
    if spec.mode == "gaussian":
        a = (rng.random(spec.n) < 0.5).astype(np.float64)
        p_pos = 0.5 + spec.corr * (a - 0.5)
        y = (rng.random(spec.n) < p_pos).astype(np.float64)
        x = _synth_means(spec, y, a) + rng.standard_normal((spec.n, spec.dim))
        pair_id = None
    else:
        n_pairs = int(spec.n * spec.pair_frac / 2.0)
        n_bg = spec.n - 2 * n_pairs
        a_bg = (rng.random(n_bg) < 0.5).astype(np.float64)
        p_pos = 0.5 + spec.corr * (a_bg - 0.5)
        y_bg = (rng.random(n_bg) < p_pos).astype(np.float64)
        x_bg = _synth_means(spec, y_bg, a_bg) + rng.standard_normal((n_bg, spec.dim))
        # pairs: identical features near the group boundary, (y=a) flipped together
        base = rng.standard_normal((n_pairs, spec.dim))
        base[:, 1] = 0.25 * base[:, 1]  # hug the boundary along the group axis
        x_p = np.concatenate([base, base], axis=0)
        y_p = np.concatenate([np.zeros(n_pairs), np.ones(n_pairs)])
        a_p = y_p.copy()
        x = np.concatenate([x_bg, x_p], axis=0)
        y = np.concatenate([y_bg, y_p])
        a = np.concatenate([a_bg, a_p])
        pair_id = np.concatenate([
            np.full(n_bg, -1, dtype=np.int64),
            np.arange(n_pairs, dtype=np.int64),
            np.arange(n_pairs, dtype=np.int64),
        ])
    split = split_indices(len(y), spec.fracs, seed + 1)
    encoder = EncoderState(numeric_stats={}, vocab={},
                           feature_names=[f"f{i}" for i in range(spec.dim)],
                           feature_slices={})
    return EncodedDataset(x=x, y=y, a=a, split=split, encoder=encoder,
                          schema=None, pair_id=pair_id)


def synth_bayes_posterior(spec: SynthSpec, x: np.ndarray) -> np.ndarray:
    """Closed-form p(y=1 | x) under the gaussian generating process."""
    pris = {}
    for yv in (0.0, 1.0):
        for av in (0.0, 1.0):
            p_a = 0.5
            p_y_given_a = 0.5 + spec.corr * (av - 0.5)
            pris[(yv, av)] = p_a * (p_y_given_a if yv == 1.0 else 1.0 - p_y_given_a)
    x = np.atleast_2d(x)
    log_dens = {}
    for (yv, av), pri in pris.items():
        mu = _synth_means(spec, np.full(len(x), yv), np.full(len(x), av))
        log_dens[(yv, av)] = np.log(pri) - 0.5 * np.sum((x - mu) ** 2, axis=1)
    num = np.exp(log_dens[(1.0, 0.0)]) + np.exp(log_dens[(1.0, 1.0)])
    den = num + np.exp(log_dens[(0.0, 0.0)]) + np.exp(log_dens[(0.0, 1.0)])
    return num / den


def synth_fair_posterior(spec: SynthSpec, x: np.ndarray) -> np.ndarray:
    """p(y=1 | label-axis projection only): ignores every group-informative axis."""
    x = np.atleast_2d(x)
    z = x[:, 0]
    log_pos = -0.5 * (z - spec.label_sep / 2.0) ** 2
    log_neg = -0.5 * (z + spec.label_sep / 2.0) ** 2
    return 1.0 / (1.0 + np.exp(log_neg - log_pos))
