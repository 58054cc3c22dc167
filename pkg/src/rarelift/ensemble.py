"""Out-of-fold stacking and group-relative score features.

Base learners are cross-fitted so that every training row gets a prediction
from a model that never saw it. The per-row vector of base predictions is
then expanded into features describing how the models relate to each other
on that row: where each score sits against the group mean, and how the
models rank among themselves.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from .data import LabeledDataset, stratified_split_indices
from .errors import ConfigError, DataError, SchemaError
from .learners.base import LearnerSpec, fit_learner

NORM_EPS = 1e-8
_ES_CARVE_FRACTION = 0.2

GROUP_STAT_NAMES = ("mean", "std", "median", "max", "min")


# ---------------------------------------------------------------------------
# group-relative features


def group_stats(p: np.ndarray) -> np.ndarray:
    """Five summary statistics of one row of base predictions.

    The std is the population form (divides by the number of models); the
    median uses the midpoint convention for even counts.
    """
    p = np.asarray(p, dtype=np.float64)
    return np.array([p.mean(), p.std(), np.median(p), p.max(), p.min()])


def relative_features(p: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray, float]:
    """(normalized scores, deviations from mean, ranks, score range).

    Rank 1 is the highest score; ties go to the lower model index.
    """
    p = np.asarray(p, dtype=np.float64)
    mean = p.mean()
    std = p.std()
    norm = (p - mean) / (std + NORM_EPS)
    diff = p - mean
    order = np.argsort(-p, kind="stable")
    rank = np.empty(p.size)
    rank[order] = np.arange(1, p.size + 1)
    return norm, diff, rank, float(p.max() - p.min())


def meta_feature_vector(p: np.ndarray) -> np.ndarray:
    """Expand one row of base predictions into the meta-feature layout.

    Layout: raw scores, five group stats, normalized scores, deviations,
    ranks, range. Length 4 * n_models + 6.
    """
    p = np.asarray(p, dtype=np.float64)
    if p.ndim != 1 or p.size < 2:
        raise ConfigError("meta features need a 1-d vector of at least 2 scores")
    stats = group_stats(p)
    norm, diff, rank, spread = relative_features(p)
    return np.concatenate([p, stats, norm, diff, rank, [spread]])


def meta_feature_matrix(p: np.ndarray) -> np.ndarray:
    """Vectorized `meta_feature_vector` over rows of a (rows, models) matrix."""
    p = np.asarray(p, dtype=np.float64)
    if p.ndim != 2 or p.shape[1] < 2:
        raise ConfigError("meta features need a (rows, models >= 2) matrix")
    n, m = p.shape
    mean = p.mean(axis=1)
    std = p.std(axis=1)
    med = np.median(p, axis=1)
    mx = p.max(axis=1)
    mn = p.min(axis=1)
    diff = p - mean[:, None]
    norm = diff / (std + NORM_EPS)[:, None]
    order = np.argsort(-p, axis=1, kind="stable")
    rank = np.empty((n, m))
    np.put_along_axis(rank, order, np.broadcast_to(np.arange(1.0, m + 1), (n, m)), axis=1)
    stats = np.column_stack([mean, std, med, mx, mn])
    return np.concatenate([p, stats, norm, diff, rank, (mx - mn)[:, None]], axis=1)


def meta_feature_names(learner_names: list[str] | tuple[str, ...]) -> tuple[str, ...]:
    names = list(learner_names)
    if len(names) < 2:
        raise ConfigError("meta features need at least 2 learners")
    out = [f"raw_{n}" for n in names]
    out += list(GROUP_STAT_NAMES)
    out += [f"norm_{n}" for n in names]
    out += [f"diff_mean_{n}" for n in names]
    out += [f"rank_{n}" for n in names]
    out.append("range")
    return tuple(out)


# ---------------------------------------------------------------------------
# out-of-fold predictions


@dataclass(frozen=True)
class OofMatrix:
    """Cross-fitted base predictions for every training row."""

    ids: np.ndarray
    labels: np.ndarray
    learner_names: tuple[str, ...]
    values: np.ndarray  # (rows, learners) probabilities
    fold_assignment: np.ndarray

    def __post_init__(self):
        n = self.ids.shape[0]
        if self.labels.shape != (n,):
            raise DataError("labels must align with ids")
        if self.values.shape != (n, len(self.learner_names)):
            raise DataError("prediction matrix shape must be (rows, learners)")
        if self.fold_assignment.shape != (n,):
            raise DataError("fold assignment must align with ids")
        if len(set(self.learner_names)) != len(self.learner_names):
            raise ConfigError("learner names must be unique")
        if not np.isfinite(self.values).all():
            raise DataError("predictions must be finite")
        if ((self.values < 0) | (self.values > 1)).any():
            raise DataError("predictions must lie in [0, 1]")

    @property
    def n_rows(self) -> int:
        return self.ids.shape[0]

    @property
    def n_learners(self) -> int:
        return len(self.learner_names)

    def column(self, name: str) -> np.ndarray:
        try:
            j = self.learner_names.index(name)
        except ValueError:
            raise SchemaError(f"no learner named {name!r}") from None
        return self.values[:, j]


def stratified_fold_assignment(labels: np.ndarray, k_folds: int, seed: int) -> np.ndarray:
    """Spread each class round-robin over folds after a seeded shuffle."""
    labels = np.asarray(labels)
    if k_folds < 2:
        raise ConfigError(f"k_folds must be >= 2, got {k_folds}")
    n_pos = int((labels == 1).sum())
    if n_pos < k_folds:
        raise DataError(
            f"{n_pos} positive rows cannot stratify {k_folds} folds; "
            f"use fewer folds"
        )
    rng = np.random.default_rng(seed)
    fold = np.empty(labels.shape[0], dtype=np.int32)
    for cls in (0, 1):
        idx = np.flatnonzero(labels == cls)
        fold[rng.permutation(idx)] = np.arange(idx.size) % k_folds
    return fold


def _fit_for_oof(spec: LearnerSpec, data: LabeledDataset, seed: int):
    """Fit one learner, carving a stratified validation slice only when the
    learner's params ask for early stopping."""
    rounds = getattr(spec.resolved_params(), "early_stopping_rounds", None)
    if rounds is None:
        return fit_learner(spec, data, None)
    rest, carved = stratified_split_indices(data.labels, _ES_CARVE_FRACTION, seed)
    return fit_learner(spec, data.take(rest), data.take(carved))


def fit_ensemble(specs: list[LearnerSpec], train: LabeledDataset, seed: int = 0) -> list:
    """Full-data fits of every spec, in order: the ensemble that ships."""
    names = [s.name for s in specs]
    if len(set(names)) != len(names):
        raise ConfigError(f"duplicate learner names in {names}")
    if train.labels is None:
        raise DataError("ensemble fitting needs labeled data")
    return [_fit_for_oof(spec, train, seed) for spec in specs]


def oof_predictions(
    specs: list[LearnerSpec],
    train: LabeledDataset,
    k_folds: int = 5,
    seed: int = 0,
    fold_assignment: np.ndarray | None = None,
) -> tuple[OofMatrix, list]:
    """Cross-fitted predictions plus full-data refits of every learner.

    Each fold's rows are scored by models trained on the other folds, so the
    returned matrix is leak-free; the refits are what ships.
    """
    if not specs:
        raise ConfigError("at least one learner spec is required")
    names = [s.name for s in specs]
    if len(set(names)) != len(names):
        raise ConfigError(f"duplicate learner names in {names}")
    if train.labels is None:
        raise DataError("out-of-fold predictions need labeled data")

    if fold_assignment is None:
        fold_assignment = stratified_fold_assignment(train.labels, k_folds, seed)
    else:
        fold_assignment = np.asarray(fold_assignment, dtype=np.int32)
        if fold_assignment.shape != (train.n_rows,):
            raise ConfigError("fold_assignment must give one fold per row")
        present = np.unique(fold_assignment)
        if not np.array_equal(present, np.arange(k_folds)):
            raise ConfigError(
                f"fold_assignment must use every fold in [0, {k_folds}), "
                f"found {present.tolist()}"
            )

    values = np.empty((train.n_rows, len(specs)))
    for f in range(k_folds):
        test_idx = np.flatnonzero(fold_assignment == f)
        fold_train = train.take(np.flatnonzero(fold_assignment != f))
        fold_test = train.take(test_idx)
        for m, spec in enumerate(specs):
            model = _fit_for_oof(spec, fold_train, seed + f)
            values[test_idx, m] = model.predict(fold_test)

    refits = [_fit_for_oof(spec, train, seed + k_folds) for spec in specs]
    return (
        OofMatrix(
            ids=train.ids.copy(),
            labels=train.labels.copy(),
            learner_names=tuple(names),
            values=values,
            fold_assignment=fold_assignment,
        ),
        refits,
    )


def correlation_matrix(oof: OofMatrix) -> np.ndarray:
    """Pairwise correlation of the learners' out-of-fold scores."""
    return np.corrcoef(oof.values, rowvar=False)


# ---------------------------------------------------------------------------
# persistence


def oof_to_csv(oof: OofMatrix, path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["id", "label", "fold", *oof.learner_names])
        for i in range(oof.n_rows):
            writer.writerow(
                [
                    oof.ids[i],
                    int(oof.labels[i]),
                    int(oof.fold_assignment[i]),
                    *[repr(float(v)) for v in oof.values[i]],
                ]
            )


def oof_from_csv(path) -> OofMatrix:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or header[:3] != ["id", "label", "fold"]:
            raise SchemaError(f"{path}: expected header id,label,fold,<learners>")
        names = tuple(header[3:])
        if not names:
            raise SchemaError(f"{path}: no learner columns")
        ids, labels, folds, rows = [], [], [], []
        for lineno, row in enumerate(reader, start=2):
            if len(row) != 3 + len(names):
                raise DataError(f"{path}:{lineno}: expected {3 + len(names)} fields")
            ids.append(row[0])
            try:
                labels.append(int(row[1]))
                folds.append(int(row[2]))
                rows.append([float(v) for v in row[3:]])
            except ValueError as exc:
                raise DataError(f"{path}:{lineno}: {exc}") from None
    if not rows:
        raise DataError(f"{path}: no data rows")
    id_arr = np.array(ids)
    if all(s.isdigit() and str(int(s)) == s for s in ids):
        id_arr = id_arr.astype(np.int64)
    return OofMatrix(
        ids=id_arr,
        labels=np.array(labels, dtype=np.int8),
        learner_names=names,
        values=np.array(rows),
        fold_assignment=np.array(folds, dtype=np.int32),
    )


# ---------------------------------------------------------------------------
# meta dataset


@dataclass(frozen=True)
class MetaDataset:
    """Meta-feature matrix derived from an OofMatrix, ready for fusion."""

    ids: np.ndarray
    features: np.ndarray
    labels: np.ndarray
    feature_names: tuple[str, ...]
    n_models: int
    learner_names: tuple[str, ...] = field(default=())

    @property
    def n_rows(self) -> int:
        return self.ids.shape[0]

    @property
    def raw_slice(self) -> slice:
        """Columns holding the untransformed base predictions."""
        return slice(0, self.n_models)

    @property
    def relative_slice(self) -> slice:
        """Columns holding the group stats and relative features."""
        return slice(self.n_models, self.features.shape[1])


def build_meta_dataset(oof: OofMatrix) -> MetaDataset:
    return MetaDataset(
        ids=oof.ids,
        features=meta_feature_matrix(oof.values),
        labels=oof.labels,
        feature_names=meta_feature_names(oof.learner_names),
        n_models=oof.n_learners,
        learner_names=oof.learner_names,
    )
