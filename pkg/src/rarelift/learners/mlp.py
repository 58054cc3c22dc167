"""Feed-forward classifier on weighted cross-entropy, trained by SGD."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..data import LabeledDataset
from ..errors import ConfigError, TrainingError
from ..nn import SigmoidNet, fit_binary_net
from .base import project_features, resolve_pos_weight


@dataclass(frozen=True)
class MlpParams:
    hidden_sizes: tuple[int, ...] = (64, 32, 16)
    learning_rate: float = 0.05
    epochs: int = 25
    batch_size: int = 512
    l2: float = 1e-4
    class_weight_pos: float | None = None
    early_stopping_rounds: int | None = 5
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "hidden_sizes", tuple(self.hidden_sizes))
        if len(self.hidden_sizes) == 0:
            raise ConfigError("an MLP needs at least one hidden layer")
        if any(h < 1 for h in self.hidden_sizes):
            raise ConfigError(f"hidden sizes must be positive, got {self.hidden_sizes}")
        if self.epochs < 0:
            raise ConfigError("epochs must be >= 0")
        if self.epochs > 0 and self.learning_rate <= 0:
            raise ConfigError("learning_rate must be positive")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.l2 < 0:
            raise ConfigError("l2 must be >= 0")
        if self.class_weight_pos is not None and self.class_weight_pos <= 0:
            raise ConfigError("class_weight_pos must be positive")
        if self.early_stopping_rounds is not None and self.early_stopping_rounds < 1:
            raise ConfigError("early_stopping_rounds must be >= 1 or None")


class MlpModel:
    kind = "mlp"

    def __init__(self, feature_names, params: MlpParams, net: SigmoidNet, metadata):
        self.feature_names = tuple(feature_names)
        self.params = params
        self.net = net
        self.metadata = dict(metadata)

    def predict_matrix(self, x: np.ndarray) -> np.ndarray:
        return self.net.predict_proba(x)

    def predict(self, data: LabeledDataset) -> np.ndarray:
        return self.predict_matrix(project_features(data, self.feature_names))


def fit_mlp(
    train: LabeledDataset,
    valid: LabeledDataset | None,
    params: MlpParams | None = None,
) -> MlpModel:
    """ReLU network with a sigmoid head on weighted binary cross-entropy.

    Positives carry class_weight_pos (negative/positive ratio by default).
    Weights start He-initialized from the seed; training is plain mini-batch
    gradient descent, early-stopped on validation log loss with the best
    epoch's weights restored. epochs=0 returns the untrained network, whose
    outputs are still valid probabilities.
    """
    params = params or MlpParams()
    if train.labels is None:
        raise TrainingError("fit_mlp needs labeled training data")
    y = train.labels.astype(np.float64)
    pos_w = resolve_pos_weight(params.class_weight_pos, y)
    net = SigmoidNet([train.n_features, *params.hidden_sizes, 1], seed=params.seed)
    valid_pair = None
    if valid is not None:
        if valid.labels is None:
            raise TrainingError("validation data needs labels for early stopping")
        valid_pair = (
            project_features(valid, train.feature_names),
            valid.labels.astype(np.float64),
        )
    history = fit_binary_net(
        net,
        train.features,
        y,
        learning_rate=params.learning_rate,
        epochs=params.epochs,
        batch_size=params.batch_size,
        l2=params.l2,
        pos_weight=pos_w,
        early_stopping_rounds=params.early_stopping_rounds,
        seed=params.seed,
        valid=valid_pair,
    )
    return MlpModel(
        feature_names=train.feature_names,
        params=params,
        net=net,
        metadata={"pos_weight": pos_w, **history},
    )
