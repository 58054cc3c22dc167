"""Factorization machine with an optional shared-embedding deep head.

The second-order term uses the O(k*d) identity
    sum_{i<j} <v_i, v_j> x_i x_j = 0.5 * sum_f [ (sum_i v_if x_i)^2
                                                 - sum_i v_if^2 x_i^2 ],
so scoring never touches feature pairs explicitly. When deep_hidden_sizes is
set, a small MLP runs over the flattened per-feature embedding vectors
(x_i * v_i) and its output is added to the score before the sigmoid, with
gradients flowing back into the shared embeddings.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import expit

from ..data import LabeledDataset
from ..errors import ConfigError, TrainingError
from ..nn import DenseStack, fit_binary_net, flatten_grads
from .base import project_features, resolve_pos_weight

_EMBED_INIT_STD = 0.05


@dataclass(frozen=True)
class FmParams:
    embedding_dim: int = 8
    learning_rate: float = 0.02
    epochs: int = 25
    batch_size: int = 512
    l2: float = 1e-4
    deep_hidden_sizes: tuple[int, ...] | None = (32,)
    class_weight_pos: float | None = None
    early_stopping_rounds: int | None = 5
    seed: int = 0

    def __post_init__(self):
        if self.embedding_dim < 1:
            raise ConfigError("embedding_dim must be >= 1")
        if self.epochs < 0:
            raise ConfigError("epochs must be >= 0")
        if self.epochs > 0 and self.learning_rate <= 0:
            raise ConfigError("learning_rate must be positive")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.l2 < 0:
            raise ConfigError("l2 must be >= 0")
        if self.deep_hidden_sizes is not None:
            object.__setattr__(self, "deep_hidden_sizes", tuple(self.deep_hidden_sizes))
            if any(h < 1 for h in self.deep_hidden_sizes):
                raise ConfigError("deep hidden sizes must be positive")
        if self.class_weight_pos is not None and self.class_weight_pos <= 0:
            raise ConfigError("class_weight_pos must be positive")
        if self.early_stopping_rounds is not None and self.early_stopping_rounds < 1:
            raise ConfigError("early_stopping_rounds must be >= 1 or None")


class FmCore:
    """Parameter bundle exposing the network protocol `fit_binary_net` needs."""

    def __init__(self, n_features: int, params: FmParams):
        rng = np.random.default_rng(params.seed)
        self.w0 = np.zeros(1)
        self.w = np.zeros(n_features)
        self.v = rng.normal(0.0, _EMBED_INIT_STD, size=(n_features, params.embedding_dim))
        self.deep: DenseStack | None = None
        if params.deep_hidden_sizes is not None:
            d_in = n_features * params.embedding_dim
            self.deep = DenseStack([d_in, *params.deep_hidden_sizes, 1], rng)

    def second_order(self, x: np.ndarray) -> np.ndarray:
        s = x @ self.v
        q = (x * x) @ (self.v * self.v)
        return 0.5 * ((s * s).sum(axis=1) - q.sum(axis=1))

    def forward(self, x: np.ndarray):
        s = x @ self.v
        q = (x * x) @ (self.v * self.v)
        z = self.w0[0] + x @ self.w + 0.5 * ((s * s).sum(axis=1) - q.sum(axis=1))
        deep_cache = None
        embed = None
        if self.deep is not None:
            n, d = x.shape
            embed = (x[:, :, None] * self.v[None, :, :]).reshape(n, -1)
            out, deep_cache = self.deep.forward(embed)
            z = z + out[:, 0]
        return z, (x, s, deep_cache)

    def backward(self, cache, dz: np.ndarray) -> list[np.ndarray]:
        x, s, deep_cache = cache
        d_w0 = np.array([dz.sum()])
        d_w = x.T @ dz
        d_v = x.T @ (dz[:, None] * s) - self.v * ((x * x).T @ dz)[:, None]
        grads = [d_w0, d_w, d_v]
        if self.deep is not None:
            deep_grads, d_embed = self.deep.backward(deep_cache, dz[:, None])
            n, d = x.shape
            d_embed = d_embed.reshape(n, d, -1)
            d_v += np.einsum("ni,nik->ik", x, d_embed)
            grads.extend(flatten_grads(deep_grads))
        return grads

    def param_arrays(self) -> list[np.ndarray]:
        arrays = [self.w0, self.w, self.v]
        if self.deep is not None:
            arrays.extend(self.deep.param_arrays())
        return arrays

    def weight_flags(self) -> list[bool]:
        flags = [False, True, True]
        if self.deep is not None:
            flags.extend(self.deep.weight_flags())
        return flags

    def predict_proba(self, x: np.ndarray) -> np.ndarray:
        z, _ = self.forward(x)
        return expit(z)


class FmModel:
    kind = "fm"

    def __init__(self, feature_names, params: FmParams, core: FmCore, metadata):
        self.feature_names = tuple(feature_names)
        self.params = params
        self.core = core
        self.metadata = dict(metadata)

    def predict_matrix(self, x: np.ndarray) -> np.ndarray:
        return self.core.predict_proba(x)

    def predict(self, data: LabeledDataset) -> np.ndarray:
        return self.predict_matrix(project_features(data, self.feature_names))


def fit_fm(
    train: LabeledDataset,
    valid: LabeledDataset | None,
    params: FmParams | None = None,
) -> FmModel:
    """Factorization machine on weighted cross-entropy.

    Same training protocol as the MLP: mini-batch gradient descent,
    class-weighted positives, early stopping on validation log loss.
    """
    params = params or FmParams()
    if train.labels is None:
        raise TrainingError("fit_fm needs labeled training data")
    y = train.labels.astype(np.float64)
    pos_w = resolve_pos_weight(params.class_weight_pos, y)
    core = FmCore(train.n_features, params)
    valid_pair = None
    if valid is not None:
        if valid.labels is None:
            raise TrainingError("validation data needs labels for early stopping")
        valid_pair = (
            project_features(valid, train.feature_names),
            valid.labels.astype(np.float64),
        )
    history = fit_binary_net(
        core,
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
    return FmModel(
        feature_names=train.feature_names,
        params=params,
        core=core,
        metadata={"pos_weight": pos_w, **history},
    )
