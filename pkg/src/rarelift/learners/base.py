"""Schema alignment helpers and the learner spec union used by the ensemble."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..data import LabeledDataset
from ..errors import ConfigError, SchemaError, TrainingError

LEARNER_KINDS = ("gbdt", "mlp", "fm")


def resolve_pos_weight(configured: float | None, y: np.ndarray) -> float:
    """Configured positive-class weight, or the negative/positive count ratio."""
    n_pos = int(np.sum(y == 1))
    n_neg = int(np.sum(y == 0))
    if n_pos == 0 or n_neg == 0:
        raise TrainingError("training labels contain a single class")
    if configured is not None:
        return configured
    return n_neg / n_pos


def project_features(data: LabeledDataset, names: tuple[str, ...]) -> np.ndarray:
    """Feature matrix aligned to `names`, matched by column name.

    The dataset may carry extra columns; missing ones raise a SchemaError
    listing every offender.
    """
    if data.feature_names == tuple(names):
        return data.features
    have = {n: i for i, n in enumerate(data.feature_names)}
    missing = [n for n in names if n not in have]
    if missing:
        raise SchemaError(f"data lacks feature columns {missing}")
    idx = np.array([have[n] for n in names])
    return data.features[:, idx]


def predict(model, data: LabeledDataset) -> np.ndarray:
    """Score a dataset with any fitted model; row-aligned probabilities."""
    return model.predict(data)


@dataclass(frozen=True)
class LearnerSpec:
    """One base learner in an ensemble: a kind, its params, optional extras.

    `focal` only makes sense for gbdt kind; `feature_mask` restricts any
    learner to the named columns (the shipped ensemble uses it for the
    tree-based specialist).
    """

    name: str
    kind: str
    params: object = None
    focal: object = None
    feature_mask: tuple[str, ...] | None = None

    def __post_init__(self):
        if self.kind not in LEARNER_KINDS:
            raise ConfigError(f"unknown learner kind {self.kind!r}")
        if not self.name:
            raise ConfigError("learner spec needs a name")
        if self.focal is not None and self.kind != "gbdt":
            raise ConfigError("focal parameters only apply to gbdt learners")
        if self.feature_mask is not None:
            object.__setattr__(self, "feature_mask", tuple(self.feature_mask))

    def resolved_params(self):
        """The configured params, or this kind's defaults."""
        if self.params is not None:
            return self.params
        from .fm import FmParams
        from .gbdt import GbdtParams
        from .mlp import MlpParams

        return {"gbdt": GbdtParams, "mlp": MlpParams, "fm": FmParams}[self.kind]()


def fit_learner(
    spec: LearnerSpec, train: LabeledDataset, valid: LabeledDataset | None
):
    """Train the learner a spec describes. Dispatch point for OOF stacking."""
    from .fm import fit_fm
    from .gbdt import fit_gbdt, fit_subset
    from .mlp import fit_mlp

    params = spec.resolved_params()
    if spec.kind == "gbdt":
        if spec.feature_mask is not None:
            return fit_subset(train, valid, spec.feature_mask, params, spec.focal)
        return fit_gbdt(train, valid, params, spec.focal)

    if spec.feature_mask is not None:
        train = _restrict(train, spec.feature_mask)
        valid = None if valid is None else _restrict(valid, spec.feature_mask)
    if spec.kind == "mlp":
        return fit_mlp(train, valid, params)
    return fit_fm(train, valid, params)


def _restrict(data: LabeledDataset, names: tuple[str, ...]) -> LabeledDataset:
    from ..data import Column, ColumnSchema

    kinds = {c.name: c.kind for c in data.schema.columns}
    missing = [n for n in names if n not in kinds]
    if missing:
        raise SchemaError(f"feature mask names unknown columns {missing}")
    return LabeledDataset(
        ids=data.ids,
        features=project_features(data, tuple(names)),
        labels=data.labels,
        schema=ColumnSchema(tuple(Column(n, kinds[n]) for n in names)),
    )
