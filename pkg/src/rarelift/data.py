"""Dataset container, synthetic generator, CSV io, preprocessing, splits."""

from __future__ import annotations

import csv
import math
import warnings
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.special import expit

from .errors import ConfigError, DataError, SchemaError

COLUMN_KINDS = ("numeric", "count", "binary")


@dataclass(frozen=True)
class Column:
    name: str
    kind: str

    def __post_init__(self):
        if self.kind not in COLUMN_KINDS:
            raise ConfigError(
                f"column {self.name!r}: kind must be one of {COLUMN_KINDS}, got {self.kind!r}"
            )


@dataclass(frozen=True)
class ColumnSchema:
    """Feature column names and kinds, plus the id / label column names."""

    columns: tuple[Column, ...]
    id_column: str = "id"
    label_column: str = "label"

    def __post_init__(self):
        if len(self.columns) == 0:
            raise ConfigError("schema needs at least one feature column")
        names = [c.name for c in self.columns]
        if len(set(names)) != len(names):
            dupes = sorted({n for n in names if names.count(n) > 1})
            raise ConfigError(f"duplicate feature columns: {dupes}")
        for reserved in (self.id_column, self.label_column):
            if reserved in names:
                raise ConfigError(f"{reserved!r} cannot double as a feature column")

    @property
    def feature_names(self) -> tuple[str, ...]:
        return tuple(c.name for c in self.columns)

    @property
    def kinds(self) -> tuple[str, ...]:
        return tuple(c.kind for c in self.columns)

    def index_of(self, name: str) -> int:
        for i, c in enumerate(self.columns):
            if c.name == name:
                return i
        raise SchemaError(f"unknown feature column {name!r}")


@dataclass(frozen=True)
class LabeledDataset:
    """Immutable row-aligned bundle of ids, feature matrix and optional labels.

    Missing cells are carried in an explicit boolean mask; the value stored at
    a masked cell is NaN and must never be read directly. After preprocessing
    the mask is gone and every value is finite.
    """

    ids: np.ndarray
    features: np.ndarray
    labels: np.ndarray | None
    schema: ColumnSchema
    missing: np.ndarray | None = None

    def __post_init__(self):
        ids = np.asarray(self.ids)
        feats = np.asarray(self.features, dtype=np.float64)
        if feats.ndim != 2:
            raise DataError("features must be a 2-d matrix")
        n, d = feats.shape
        if n == 0:
            raise DataError("dataset has no rows")
        if d != len(self.schema.columns):
            raise SchemaError(
                f"feature matrix has {d} columns, schema lists {len(self.schema.columns)}"
            )
        if ids.shape != (n,):
            raise DataError("ids must align with feature rows")
        if len(np.unique(ids)) != n:
            raise DataError("row ids must be unique")
        labels = self.labels
        if labels is not None:
            labels = np.asarray(labels)
            if labels.shape != (n,):
                raise DataError("labels must align with feature rows")
            vals = np.unique(labels)
            if not np.all(np.isin(vals, (0, 1))):
                raise DataError(f"labels must be 0/1, saw values {vals[:5]}")
            labels = labels.astype(np.int8)
        miss = self.missing
        if miss is not None:
            miss = np.asarray(miss, dtype=bool)
            if miss.shape != feats.shape:
                raise DataError("missing mask must match the feature matrix shape")
            if not miss.any():
                miss = None
        if miss is None:
            if not np.isfinite(feats).all():
                raise DataError("features contain non-finite values outside the missing mask")
        else:
            if not np.isfinite(feats[~miss]).all():
                raise DataError("features contain non-finite values outside the missing mask")
        for arr in (ids, feats, labels, miss):
            if arr is not None:
                arr.setflags(write=False)
        object.__setattr__(self, "ids", ids)
        object.__setattr__(self, "features", feats)
        object.__setattr__(self, "labels", labels)
        object.__setattr__(self, "missing", miss)

    @property
    def n_rows(self) -> int:
        return self.features.shape[0]

    @property
    def n_features(self) -> int:
        return self.features.shape[1]

    @property
    def feature_names(self) -> tuple[str, ...]:
        return self.schema.feature_names

    def take(self, indices: np.ndarray) -> "LabeledDataset":
        """Row subset, preserving order of `indices`."""
        idx = np.asarray(indices)
        return LabeledDataset(
            ids=self.ids[idx],
            features=self.features[idx],
            labels=None if self.labels is None else self.labels[idx],
            schema=self.schema,
            missing=None if self.missing is None else self.missing[idx],
        )

    def column(self, name: str) -> np.ndarray:
        return self.features[:, self.schema.index_of(name)]


# ---------------------------------------------------------------------------
# synthetic generator


@dataclass(frozen=True)
class SynthConfig:
    n_rows: int
    n_features: int = 40
    positive_rate: float = 0.005
    intent_signal_strength: float = 1.0
    noise_features: int | None = None
    seed: int = 0

    def __post_init__(self):
        if self.n_rows < 2:
            raise ConfigError("n_rows must be at least 2")
        if not (0.0 < self.positive_rate < 0.5):
            raise ConfigError(
                f"positive_rate must lie in (0, 0.5), got {self.positive_rate}"
            )
        if self.n_rows * self.positive_rate < 10:
            raise ConfigError(
                "n_rows * positive_rate must be at least 10 "
                f"(got {self.n_rows * self.positive_rate:.2f}); "
                "too few positives to learn or evaluate on"
            )
        if self.n_features < 1:
            raise ConfigError("n_features must be positive")
        if self.intent_signal_strength < 0:
            raise ConfigError("intent_signal_strength must be >= 0")
        noise = self.resolved_noise_features
        if not (0 <= noise < self.n_features):
            raise ConfigError(
                "noise_features must leave at least one informative feature"
            )

    @property
    def resolved_noise_features(self) -> int:
        if self.noise_features is None:
            return (self.n_features * 2) // 5
        return self.noise_features


@dataclass(frozen=True)
class SynthColumn:
    """Generative law of one column: see `generate_synthetic_with_params`."""

    name: str
    kind: str
    informative: bool
    a: float
    b: float


@dataclass(frozen=True)
class SynthParams:
    """Ground-truth generative parameters, kept for oracle tests."""

    latent_coef: float
    intercept: float
    columns: tuple[SynthColumn, ...]

    @property
    def informative_names(self) -> tuple[str, ...]:
        return tuple(c.name for c in self.columns if c.informative)


_KIND_SUFFIX = {"count": "cnt", "numeric": "num", "binary": "bin"}
_LATENT_COEF = 2.0


def _calibrate_intercept(z: np.ndarray, c: float, rate: float) -> float:
    """Bisect the intercept t so mean(sigmoid(c*z + t)) hits `rate`."""
    lo, hi = -60.0, 20.0
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if float(np.mean(expit(c * z + mid))) < rate:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


def generate_synthetic_with_params(
    config: SynthConfig,
) -> tuple[LabeledDataset, SynthParams]:
    """Draw a synthetic behavioral dataset plus its generative record.

    A single latent intent factor z ~ Normal(0, 1) drives everything.
    Informative count columns are Poisson(exp(a + b*z)), numeric columns are
    a + b*z + Gaussian noise, binary columns are Bernoulli(sigmoid(a + b*z)).
    Noise columns use the same families with b = 0. The label is 1 when
    sigmoid(c*z + intercept) exceeds an independent uniform draw, with the
    intercept calibrated so the expected positive rate matches the config.
    `intent_signal_strength` scales every feature's b; at 0 the features are
    independent of the label.
    """
    rng = np.random.default_rng(config.seed)
    n, d = config.n_rows, config.n_features
    n_noise = config.resolved_noise_features
    n_info = d - n_noise
    strength = config.intent_signal_strength

    z = rng.standard_normal(n)

    # Kind layout before the position shuffle: informative columns lean on
    # counts, noise columns split between counts and numerics.
    kinds: list[tuple[str, bool]] = []
    for i in range(n_info):
        r = i % 5
        if r in (0, 1, 2):
            kinds.append(("count", True))
        elif r == 3:
            kinds.append(("numeric", True))
        else:
            kinds.append(("binary", True))
    for i in range(n_noise):
        kinds.append(("count" if i % 2 == 0 else "numeric", False))

    order = rng.permutation(d)
    placed = [kinds[i] for i in order]

    cols: list[SynthColumn] = []
    values = np.empty((n, d))
    for pos, (kind, informative) in enumerate(placed):
        name = f"f{pos:02d}_{_KIND_SUFFIX[kind]}"
        if kind == "count":
            a = rng.uniform(np.log(0.5), np.log(3.0))
            b = strength * rng.uniform(0.15, 0.6) if informative else 0.0
            values[:, pos] = rng.poisson(np.exp(a + b * z))
        elif kind == "numeric":
            a = rng.uniform(-1.0, 1.0)
            b = strength * rng.uniform(0.3, 0.9) if informative else 0.0
            values[:, pos] = a + b * z + rng.standard_normal(n)
        else:
            a = rng.uniform(-2.0, -0.5)
            b = strength * rng.uniform(0.5, 1.5) if informative else 0.0
            values[:, pos] = (rng.uniform(size=n) < expit(a + b * z)).astype(np.float64)
        cols.append(SynthColumn(name, kind, informative, float(a), float(b)))

    intercept = _calibrate_intercept(z, _LATENT_COEF, config.positive_rate)
    p_true = expit(_LATENT_COEF * z + intercept)
    labels = (rng.uniform(size=n) < p_true).astype(np.int8)

    schema = ColumnSchema(columns=tuple(Column(c.name, c.kind) for c in cols))
    data = LabeledDataset(
        ids=np.arange(n, dtype=np.int64),
        features=values,
        labels=labels,
        schema=schema,
    )
    params = SynthParams(_LATENT_COEF, float(intercept), tuple(cols))
    return data, params


def generate_synthetic(config: SynthConfig) -> LabeledDataset:
    """Synthetic dataset only; see `generate_synthetic_with_params`."""
    data, _ = generate_synthetic_with_params(config)
    return data


# ---------------------------------------------------------------------------
# CSV io
#
# Format: header row, an id column first, then one column per schema feature
# (any order, matched by name), and optionally the label column. Floats are
# written with Python repr, which round-trips exactly; empty cells are
# missing values.


def save_csv(data: LabeledDataset, path: str) -> None:
    schema = data.schema
    header = [schema.id_column, *schema.feature_names]
    if data.labels is not None:
        header.append(schema.label_column)
    miss = data.missing
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for i in range(data.n_rows):
            row = [str(data.ids[i])]
            for j in range(data.n_features):
                if miss is not None and miss[i, j]:
                    row.append("")
                else:
                    row.append(repr(float(data.features[i, j])))
            if data.labels is not None:
                row.append(str(int(data.labels[i])))
            writer.writerow(row)


def load_csv(path: str, schema: ColumnSchema) -> LabeledDataset:
    """Read a dataset in the documented CSV format, validating against `schema`."""
    try:
        fh = open(path, newline="")
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc}") from exc
    with fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise DataError(f"{path}: empty file") from None
        cols = {name: i for i, name in enumerate(header)}
        if len(cols) != len(header):
            raise DataError(f"{path}: duplicate columns in header")
        if schema.id_column not in cols:
            raise SchemaError(f"{path}: missing id column {schema.id_column!r}")
        missing_cols = [n for n in schema.feature_names if n not in cols]
        if missing_cols:
            raise SchemaError(f"{path}: missing feature columns {missing_cols}")
        has_label = schema.label_column in cols
        known = {schema.id_column, *schema.feature_names}
        if has_label:
            known.add(schema.label_column)
        unknown = [n for n in header if n not in known]
        if unknown:
            raise SchemaError(f"{path}: unexpected columns {unknown}")

        id_pos = cols[schema.id_column]
        feat_pos = [cols[n] for n in schema.feature_names]
        label_pos = cols[schema.label_column] if has_label else None

        ids: list[str] = []
        rows: list[list[float]] = []
        mask_rows: list[list[bool]] = []
        labels: list[int] = []
        any_missing = False
        for lineno, row in enumerate(reader, start=2):
            if len(row) != len(header):
                raise DataError(
                    f"{path}:{lineno}: expected {len(header)} cells, got {len(row)}"
                )
            ids.append(row[id_pos])
            vals = []
            miss = []
            for name, pos in zip(schema.feature_names, feat_pos):
                cell = row[pos]
                if cell == "":
                    vals.append(math.nan)
                    miss.append(True)
                    any_missing = True
                    continue
                try:
                    x = float(cell)
                except ValueError:
                    raise DataError(
                        f"{path}:{lineno}: column {name!r}: cannot parse {cell!r} as a number"
                    ) from None
                if not math.isfinite(x):
                    raise DataError(f"{path}:{lineno}: column {name!r}: non-finite value")
                vals.append(x)
                miss.append(False)
            rows.append(vals)
            mask_rows.append(miss)
            if label_pos is not None:
                cell = row[label_pos]
                try:
                    y = float(cell)
                except ValueError:
                    raise DataError(
                        f"{path}:{lineno}: label: cannot parse {cell!r}"
                    ) from None
                if y not in (0.0, 1.0):
                    raise DataError(f"{path}:{lineno}: label must be 0 or 1, got {cell!r}")
                labels.append(int(y))

    if not rows:
        raise DataError(f"{path}: no data rows")
    id_arr: np.ndarray = np.array(ids)
    if all(s.isdigit() or (s.startswith("-") and s[1:].isdigit()) for s in ids) and all(
        str(int(s)) == s for s in ids
    ):
        id_arr = np.array([int(s) for s in ids], dtype=np.int64)
    if len(np.unique(id_arr)) != len(ids):
        raise DataError(f"{path}: duplicate row ids")
    return LabeledDataset(
        ids=id_arr,
        features=np.array(rows, dtype=np.float64),
        labels=np.array(labels, dtype=np.int8) if labels else None,
        schema=schema,
        missing=np.array(mask_rows, dtype=bool) if any_missing else None,
    )


# ---------------------------------------------------------------------------
# preprocessing


@dataclass(frozen=True)
class PreprocessSpec:
    """What the fitted preprocessor should do per column kind.

    Count and numeric columns are median-imputed and clipped to nearest-rank
    percentile caps; kinds named in `scale_kinds` are then standardized, with
    count columns passed through log1p first. Binary columns are imputed only.
    """

    cap_percentiles: tuple[float, float] = (1.0, 99.0)
    scale_kinds: tuple[str, ...] = ("numeric", "count")

    def __post_init__(self):
        lo, hi = self.cap_percentiles
        if not (0.0 <= lo < hi <= 100.0):
            raise ConfigError(f"cap percentiles must satisfy 0 <= low < high <= 100, got {self.cap_percentiles}")
        for k in self.scale_kinds:
            if k not in COLUMN_KINDS:
                raise ConfigError(f"unknown kind in scale_kinds: {k!r}")


@dataclass(frozen=True)
class ColumnTransform:
    name: str
    kind: str
    impute_value: float
    cap_low: float | None
    cap_high: float | None
    log1p: bool
    center: float
    scale: float


@dataclass(frozen=True)
class FittedPreprocessor:
    schema: ColumnSchema
    spec: PreprocessSpec
    transforms: tuple[ColumnTransform, ...]


def _nearest_rank(sorted_vals: np.ndarray, q: float) -> float:
    """Nearest-rank percentile: the ceil(q/100 * n)-th smallest value."""
    n = len(sorted_vals)
    rank = max(1, math.ceil(q / 100.0 * n))
    return float(sorted_vals[min(rank, n) - 1])


def fit_apply_preprocess(
    train: LabeledDataset, spec: PreprocessSpec | None = None
) -> tuple[LabeledDataset, FittedPreprocessor]:
    """Fit imputation, caps and scaling on `train` and return the cleaned copy.

    Every statistic comes from `train` alone. Caps are nearest-rank
    percentiles computed after imputation; scaling uses population mean/std.
    A column with no observed values imputes to 0, and a constant column
    keeps scale 1; both emit warnings.
    """
    spec = spec or PreprocessSpec()
    feats = train.features
    miss = train.missing
    transforms: list[ColumnTransform] = []
    for j, col_def in enumerate(train.schema.columns):
        col = feats[:, j].copy()
        observed = col if miss is None else col[~miss[:, j]]
        if observed.size == 0:
            warnings.warn(
                f"column {col_def.name!r} has no observed values; imputing 0",
                stacklevel=2,
            )
            impute = 0.0
        else:
            impute = float(np.median(observed))
        if miss is not None:
            col[miss[:, j]] = impute

        cap_low = cap_high = None
        if col_def.kind in ("numeric", "count"):
            lo_q, hi_q = spec.cap_percentiles
            ordered = np.sort(col)
            cap_low = _nearest_rank(ordered, lo_q)
            cap_high = _nearest_rank(ordered, hi_q)
            col = np.clip(col, cap_low, cap_high)

        use_log1p = col_def.kind == "count" and "count" in spec.scale_kinds
        if use_log1p:
            col = np.log1p(col)
        center, scale = 0.0, 1.0
        if col_def.kind in spec.scale_kinds:
            center = float(np.mean(col))
            scale = float(np.std(col))
            if scale == 0.0:
                warnings.warn(
                    f"column {col_def.name!r} is constant after capping; scaling by 1",
                    stacklevel=2,
                )
                scale = 1.0
        transforms.append(
            ColumnTransform(
                name=col_def.name,
                kind=col_def.kind,
                impute_value=impute,
                cap_low=cap_low,
                cap_high=cap_high,
                log1p=use_log1p,
                center=center,
                scale=scale,
            )
        )
    pre = FittedPreprocessor(schema=train.schema, spec=spec, transforms=tuple(transforms))
    return apply_preprocess(pre, train), pre


def apply_preprocess(pre: FittedPreprocessor, data: LabeledDataset) -> LabeledDataset:
    """Apply a fitted preprocessor; output has no missing cells."""
    if data.schema.feature_names != pre.schema.feature_names:
        raise SchemaError(
            "preprocessor was fitted on different columns: "
            f"{pre.schema.feature_names} vs {data.schema.feature_names}"
        )
    out = data.features.copy()
    miss = data.missing
    for j, t in enumerate(pre.transforms):
        col = out[:, j]
        gap = miss[:, j] if miss is not None else ~np.isfinite(col)
        if gap.any():
            col[gap] = t.impute_value
        if t.cap_low is not None:
            col = np.clip(col, t.cap_low, t.cap_high)
        if t.log1p:
            if np.any(col < 0):
                raise DataError(f"column {t.name!r}: negative value in a count column")
            col = np.log1p(col)
        out[:, j] = (col - t.center) / t.scale
    if not np.isfinite(out).all():
        raise DataError("preprocessing produced non-finite values")
    return LabeledDataset(
        ids=data.ids, features=out, labels=data.labels, schema=data.schema
    )


# ---------------------------------------------------------------------------
# splits


def split_dataset(
    data: LabeledDataset, fraction: float, seed: int
) -> tuple[LabeledDataset, LabeledDataset]:
    """Random row partition into (train, holdout); `fraction` goes to train."""
    if not (0.0 < fraction < 1.0):
        raise ConfigError(f"split fraction must lie in (0, 1), got {fraction}")
    n = data.n_rows
    n_train = int(round(fraction * n))
    if n_train < 1 or n_train > n - 1:
        raise ConfigError(
            f"split fraction {fraction} leaves an empty side for {n} rows"
        )
    perm = np.random.default_rng(seed).permutation(n)
    train_idx = np.sort(perm[:n_train])
    hold_idx = np.sort(perm[n_train:])
    return data.take(train_idx), data.take(hold_idx)


def stratified_split_indices(
    labels: np.ndarray, fraction: float, seed: int
) -> tuple[np.ndarray, np.ndarray]:
    """Indices for a label-stratified (rest, carved) split.

    Carves `fraction` of each class, at least one row per class when the
    class is present. Used for early-stopping slices.
    """
    if not (0.0 < fraction < 1.0):
        raise ConfigError(f"fraction must lie in (0, 1), got {fraction}")
    labels = np.asarray(labels)
    rng = np.random.default_rng(seed)
    carved: list[np.ndarray] = []
    for cls in (0, 1):
        idx = np.flatnonzero(labels == cls)
        if idx.size == 0:
            continue
        take = max(1, int(round(fraction * idx.size)))
        if take >= idx.size:
            take = idx.size - 1
        if take <= 0:
            continue
        carved.append(rng.permutation(idx)[:take])
    if not carved:
        raise DataError("dataset too small to carve a validation slice")
    val_idx = np.sort(np.concatenate(carved))
    rest = np.setdiff1d(np.arange(labels.size), val_idx)
    if rest.size == 0:
        raise DataError("validation carve consumed every row")
    return rest, val_idx
