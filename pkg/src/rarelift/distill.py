"""Compressing the full ensemble into one boosted-tree regressor.

The teacher is the complete scoring path: every base model, the meta-feature
expansion, the fusion network. Its probability outputs become regression
targets for a single GBDT student, which then serves predictions at a
fraction of the teacher's cost.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit

from .data import LabeledDataset
from .ensemble import NORM_EPS, meta_feature_matrix
from .errors import ConfigError, DataError, SchemaError
from .learners.base import project_features, resolve_pos_weight
from .learners.gbdt import (
    GbdtModel,
    GbdtParams,
    _boost,
    _LogLossObjective,
    _SoftCrossEntropyObjective,
    _SquaredErrorObjective,
)
from .meta_model import MetaModel

STUDENT_LOSSES = ("mse", "hard_label", "kl")


@dataclass(frozen=True)
class TeacherBundle:
    """The full scoring pipeline, packaged: ordered base models, the fusion
    network over their meta features, the schema they were trained on, and
    the epsilon the normalized deviations were built with."""

    base_models: tuple
    meta: MetaModel
    learner_names: tuple[str, ...]
    feature_names: tuple[str, ...]
    epsilon: float = NORM_EPS

    def __post_init__(self):
        object.__setattr__(self, "base_models", tuple(self.base_models))
        object.__setattr__(self, "learner_names", tuple(self.learner_names))
        object.__setattr__(self, "feature_names", tuple(self.feature_names))
        if len(self.base_models) != len(self.learner_names):
            raise ConfigError("one name per base model required")
        if len(self.base_models) < 2:
            raise ConfigError("a teacher needs at least two base models")
        if len(set(self.learner_names)) != len(self.learner_names):
            raise ConfigError("base model names must be unique")
        if self.meta.n_models != len(self.base_models):
            raise ConfigError(
                f"fusion network expects {self.meta.n_models} models, "
                f"bundle has {len(self.base_models)}"
            )
        known = set(self.feature_names)
        for name, model in zip(self.learner_names, self.base_models):
            stray = [f for f in model.feature_names if f not in known]
            if stray:
                raise SchemaError(
                    f"base model {name!r} expects columns missing from the "
                    f"bundle schema: {stray[:3]}"
                )
        if self.epsilon != NORM_EPS:
            raise ConfigError(
                f"meta features are built with epsilon {NORM_EPS}; "
                f"a bundle declaring {self.epsilon} would not reproduce them"
            )

    @property
    def n_models(self) -> int:
        return len(self.base_models)


def base_prediction_matrix(teacher: TeacherBundle, data) -> np.ndarray:
    """Column j holds base model j's probabilities, in bundle order.

    `data` is a LabeledDataset, or a bare matrix whose columns follow the
    bundle's feature_names order.
    """
    if isinstance(data, LabeledDataset):
        return np.column_stack([m.predict(data) for m in teacher.base_models])
    x = np.asarray(data, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != len(teacher.feature_names):
        raise SchemaError(
            f"expected a matrix with {len(teacher.feature_names)} columns, "
            f"got shape {x.shape}"
        )
    if x.shape[0] == 0:
        return np.zeros((0, teacher.n_models))
    pos = {n: i for i, n in enumerate(teacher.feature_names)}
    cols = []
    for model in teacher.base_models:
        idx = [pos[n] for n in model.feature_names]
        cols.append(model.predict_matrix(x[:, idx]))
    return np.column_stack(cols)


def teacher_predict(teacher: TeacherBundle, data) -> np.ndarray:
    """Base predictions, meta-feature expansion, fusion network: the exact
    three-step composition. Empty input yields an empty vector."""
    raw = base_prediction_matrix(teacher, data)
    if raw.shape[0] == 0:
        return np.zeros(0)
    return teacher.meta.predict_matrix(meta_feature_matrix(raw))


@dataclass(frozen=True)
class DistillDataset:
    """Original features paired with the teacher's soft targets; ground-truth
    labels ride along when known so student quality can be tracked."""

    ids: np.ndarray
    features: np.ndarray
    soft_targets: np.ndarray
    feature_names: tuple[str, ...]
    labels: np.ndarray | None = None

    def __post_init__(self):
        feats = np.asarray(self.features, dtype=np.float64)
        targets = np.asarray(self.soft_targets, dtype=np.float64)
        n = feats.shape[0]
        if targets.shape != (n,):
            raise DataError("soft targets must align with feature rows")
        if targets.size and (targets.min() < 0.0 or targets.max() > 1.0):
            raise DataError("soft targets must lie in [0, 1]")
        if feats.shape[1] != len(self.feature_names):
            raise DataError("feature names must match the matrix width")
        if self.labels is not None and np.asarray(self.labels).shape != (n,):
            raise DataError("labels must align with feature rows")
        object.__setattr__(self, "features", feats)
        object.__setattr__(self, "soft_targets", targets)
        object.__setattr__(self, "feature_names", tuple(self.feature_names))

    @property
    def n_rows(self) -> int:
        return self.features.shape[0]


def build_distill_set(teacher: TeacherBundle, data: LabeledDataset) -> DistillDataset:
    return DistillDataset(
        ids=data.ids,
        features=data.features,
        soft_targets=teacher_predict(teacher, data),
        feature_names=data.feature_names,
        labels=data.labels,
    )


def split_distill_set(
    dset: DistillDataset, fraction: float, seed: int
) -> tuple[DistillDataset, DistillDataset]:
    """Seeded row split into (fit, validation) slices; `fraction` is carved
    for validation."""
    if not (0.0 < fraction < 1.0):
        raise ConfigError(f"fraction must lie in (0, 1), got {fraction}")
    n = dset.n_rows
    n_valid = max(1, int(round(fraction * n)))
    if n_valid >= n:
        raise DataError(f"{n} rows cannot carve a validation slice")
    perm = np.random.default_rng([seed, 23]).permutation(n)
    parts = []
    for idx in (np.sort(perm[n_valid:]), np.sort(perm[:n_valid])):
        parts.append(
            DistillDataset(
                ids=dset.ids[idx],
                features=dset.features[idx],
                soft_targets=dset.soft_targets[idx],
                feature_names=dset.feature_names,
                labels=None if dset.labels is None else dset.labels[idx],
            )
        )
    return parts[0], parts[1]


def distill_set_to_csv(dset: DistillDataset, path) -> None:
    with open(path, "w") as fh:
        cols = ",".join(dset.feature_names)
        fh.write(f"id,{cols},soft_target,label\n")
        for i in range(dset.n_rows):
            feats = ",".join(repr(float(v)) for v in dset.features[i])
            label = "" if dset.labels is None else str(int(dset.labels[i]))
            fh.write(f"{dset.ids[i]},{feats},{repr(float(dset.soft_targets[i]))},{label}\n")


class StudentModel:
    """Single boosted-tree regressor on teacher probabilities; output is
    clipped to [0,1] because squared-error leaves can overshoot."""

    kind = "student"

    def __init__(self, model: GbdtModel, loss: str, metadata: dict):
        self.model = model
        self.loss = loss
        self.metadata = dict(metadata)

    @property
    def feature_names(self) -> tuple[str, ...]:
        return self.model.feature_names

    @property
    def n_trees(self) -> int:
        return self.model.n_trees

    def predict_matrix(self, x: np.ndarray) -> np.ndarray:
        return np.clip(self.model.predict_matrix(x), 0.0, 1.0)

    def predict(self, data: LabeledDataset) -> np.ndarray:
        return self.predict_matrix(project_features(data, self.feature_names))

    def gain_importance(self) -> np.ndarray:
        return self.model.gain_importance()


def student_predict(model: StudentModel, data: LabeledDataset) -> np.ndarray:
    return model.predict(data)


def _plain_log_loss(p: np.ndarray, y: np.ndarray) -> float:
    p = np.clip(p, 1e-15, 1.0 - 1e-15)
    return float(-np.mean(y * np.log(p) + (1.0 - y) * np.log(1.0 - p)))


def distill_student(
    dset: DistillDataset,
    valid: DistillDataset | None,
    params: GbdtParams | None = None,
    loss: str = "mse",
) -> StudentModel:
    """Train the student on soft targets (or ground truth for the hard arm).

    mse regresses the probabilities directly; kl uses soft-target
    cross-entropy through a sigmoid; hard_label ignores the teacher and
    boosts plain log loss on the labels. Early stopping always watches
    validation MSE against the teacher, while validation log loss against
    the ground truth is recorded alongside when labels are available.
    """
    if loss not in STUDENT_LOSSES:
        raise ConfigError(f"loss must be one of {STUDENT_LOSSES}, got {loss!r}")
    params = params or GbdtParams()
    if params.objective != "logloss":
        raise ConfigError("student params must leave objective at its default; "
                          "the loss argument selects the student objective")
    if loss == "hard_label" and dset.labels is None:
        raise DataError("hard_label distillation needs ground-truth labels")

    x = dset.features
    t = dset.soft_targets
    if loss == "mse":
        objective = _SquaredErrorObjective()
        link = "identity"
        y_fit = t
        w = np.ones(x.shape[0])
    elif loss == "kl":
        objective = _SoftCrossEntropyObjective()
        link = "sigmoid"
        y_fit = t
        w = np.ones(x.shape[0])
    else:
        objective = _LogLossObjective()
        link = "sigmoid"
        y_fit = dset.labels.astype(np.float64)
        pos_w = resolve_pos_weight(params.scale_pos_weight, y_fit)
        w = np.where(y_fit == 1.0, pos_w, 1.0)

    valid_x = None
    valid_eval = None
    gt_logloss: list[float] = []
    if valid is not None:
        if tuple(valid.feature_names) != tuple(dset.feature_names):
            raise DataError("validation features must share the training schema")
        valid_x = valid.features
        t_val = valid.soft_targets
        y_val = None if valid.labels is None else valid.labels.astype(np.float64)

        def valid_eval(raw):
            pred = expit(raw) if link == "sigmoid" else np.clip(raw, 0.0, 1.0)
            if y_val is not None:
                gt_logloss.append(_plain_log_loss(pred, y_val))
            return float(np.mean((pred - t_val) ** 2))

    result = _boost(objective, x, y_fit, w, params, valid_x, valid_eval)
    gbdt = GbdtModel(
        feature_names=dset.feature_names,
        params=params,
        focal=None,
        init_raw=result.init_raw,
        trees=result.trees,
        link=link,
        metadata={
            "best_iteration": result.best_iteration,
            "train_loss": result.train_loss,
            "valid_metric": result.valid_primary,
        },
    )
    return StudentModel(
        gbdt,
        loss,
        metadata={
            "valid_mse_to_teacher": result.valid_primary,
            "valid_logloss_to_labels": gt_logloss[: len(result.valid_primary)],
            "best_iteration": result.best_iteration,
        },
    )


def distill_mse(student: StudentModel, dset: DistillDataset) -> float:
    """Mean squared gap between student output and the teacher's targets."""
    pred = student.predict_matrix(dset.features)
    return float(np.mean((pred - dset.soft_targets) ** 2))
