"""Fusion of stacked base predictions.

The centerpiece is a two-branch network: raw predictions flow through one
dense stack, the derived group/relative features through another, and the
concatenated hidden representations feed a sigmoid head. The simpler fusion
baselines it is benchmarked against (averaging, logistic stacking, tree
stacking, a single undivided network) live here too, behind one
fit-and-predict interface so ablations can swap them freely.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit, log_expit

from .data import Column, ColumnSchema, LabeledDataset, stratified_split_indices
from .ensemble import MetaDataset, meta_feature_matrix, meta_feature_names
from .errors import ConfigError, DataError
from .learners.base import resolve_pos_weight
from .learners.gbdt import GbdtParams, fit_gbdt
from .metrics import auc
from .nn import SigmoidNet, TwoBranchNet, fit_binary_net

_ES_FRACTION = 0.2
_AUC_FIT_CAP = 50_000
_WEIGHT_GRID = np.linspace(0.0, 1.0, 21)
_MAX_COORDINATE_UPDATES = 200

FUSION_NAMES = (
    "simple_average",
    "weighted_average",
    "stacking_logreg",
    "stacking_gbdt",
    "hybrid_no_split",
    "hybrid",
)


@dataclass(frozen=True)
class HybridParams:
    """Architecture and optimizer settings for the two-branch fusion net.

    `class_weight_pos=None` weights positives by the negative/positive count
    ratio of the training slice.
    """

    raw_branch_hidden: tuple[int, ...] = (16,)
    rel_branch_hidden: tuple[int, ...] = (32,)
    fusion_hidden: tuple[int, ...] = (16,)
    learning_rate: float = 0.05
    epochs: int = 40
    batch_size: int = 512
    l2: float = 1e-4
    class_weight_pos: float | None = None
    early_stopping_rounds: int | None = 5
    seed: int = 0

    def __post_init__(self):
        for label, sizes in (
            ("raw_branch_hidden", self.raw_branch_hidden),
            ("rel_branch_hidden", self.rel_branch_hidden),
            ("fusion_hidden", self.fusion_hidden),
        ):
            sizes = tuple(int(s) for s in sizes)
            object.__setattr__(self, label, sizes)
            if len(sizes) == 0:
                raise ConfigError(f"{label} needs at least one layer")
            if any(s < 1 for s in sizes):
                raise ConfigError(f"{label} sizes must be >= 1, got {sizes}")
        if self.learning_rate <= 0:
            raise ConfigError("learning_rate must be positive")
        if self.epochs < 0:
            raise ConfigError("epochs must be >= 0")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.l2 < 0:
            raise ConfigError("l2 must be >= 0")
        if self.class_weight_pos is not None and self.class_weight_pos <= 0:
            raise ConfigError("class_weight_pos must be positive")
        if self.early_stopping_rounds is not None and self.early_stopping_rounds < 1:
            raise ConfigError("early_stopping_rounds must be >= 1 or None")


class MetaModel:
    """Fitted two-branch fusion network over a meta-feature layout.

    Column routing is positional: the first `n_models` columns (the raw base
    predictions) feed the first branch, everything after (group stats,
    normalized and raw deviations, ranks, spread) feeds the second.
    """

    kind = "meta"

    def __init__(self, net: TwoBranchNet, n_models: int, params: HybridParams, metadata: dict):
        self.net = net
        self.n_models = n_models
        self.params = params
        self.metadata = dict(metadata)

    @property
    def n_features(self) -> int:
        return 4 * self.n_models + 6

    @property
    def raw_indices(self) -> np.ndarray:
        return np.arange(self.n_models)

    @property
    def relative_indices(self) -> np.ndarray:
        return np.arange(self.n_models, self.n_features)

    def predict_matrix(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        if x.ndim != 2 or x.shape[1] != self.n_features:
            raise DataError(
                f"meta feature matrix must have {self.n_features} columns, "
                f"got shape {x.shape}"
            )
        return self.net.predict_proba(x)


def train_meta(meta: MetaDataset, params: HybridParams | None = None) -> MetaModel:
    params = params or HybridParams()
    labels = np.asarray(meta.labels, dtype=np.float64)
    n_pos = int(labels.sum())
    if n_pos == 0 or n_pos == labels.size:
        raise DataError("meta training needs both classes present")
    net = TwoBranchNet(
        meta.n_models,
        3 * meta.n_models + 6,
        params.raw_branch_hidden,
        params.rel_branch_hidden,
        params.fusion_hidden,
        params.seed,
    )
    history, pos_w = _fit_sigmoid_head(net, meta.features, labels, params)
    return MetaModel(
        net,
        meta.n_models,
        params,
        metadata={
            "history": history,
            "pos_weight": pos_w,
            "learner_names": list(meta.learner_names),
        },
    )


def _fit_sigmoid_head(net, x, labels, params: HybridParams):
    """Shared training loop for the fusion networks: optional stratified
    early-stopping carve, auto positive weighting, weighted BCE descent.

    Checkpoints are selected by validation AUC rather than log loss: the
    fused score is consumed as a ranking, and at positive rates well under
    1% the log loss of a near-constant net can beat a genuinely better
    ranker on a small carve."""
    if params.early_stopping_rounds is not None:
        rest, carved = stratified_split_indices(labels, _ES_FRACTION, params.seed)
        x_tr, y_tr = x[rest], labels[rest]
        valid = (x[carved], labels[carved])
    else:
        x_tr, y_tr = x, labels
        valid = None
    pos_w = resolve_pos_weight(params.class_weight_pos, y_tr)
    history = fit_binary_net(
        net,
        x_tr,
        y_tr,
        learning_rate=params.learning_rate,
        epochs=params.epochs,
        batch_size=params.batch_size,
        l2=params.l2,
        pos_weight=pos_w,
        early_stopping_rounds=params.early_stopping_rounds,
        seed=params.seed,
        valid=valid,
        monitor="auc",
    )
    return history, pos_w


def meta_predict(model: MetaModel, v: np.ndarray) -> float:
    """Probability for one meta-feature vector."""
    v = np.asarray(v, dtype=np.float64)
    if v.ndim != 1:
        raise DataError("meta_predict takes a single 1-d feature vector")
    if v.size != model.n_features:
        raise DataError(
            f"meta feature vector has length {v.size}, expected {model.n_features}"
        )
    return float(model.predict_matrix(v[None, :])[0])


class DenseFusionModel:
    """Single undivided sigmoid network over the full meta-feature vector."""

    kind = "meta_dense"

    def __init__(self, net: SigmoidNet, n_models: int, params: HybridParams, metadata: dict):
        self.net = net
        self.n_models = n_models
        self.params = params
        self.metadata = dict(metadata)

    @property
    def n_features(self) -> int:
        return 4 * self.n_models + 6

    def predict_matrix(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        if x.ndim != 2 or x.shape[1] != self.n_features:
            raise DataError(
                f"meta feature matrix must have {self.n_features} columns, "
                f"got shape {x.shape}"
            )
        return self.net.predict_proba(x)


@dataclass(frozen=True)
class FittedFusion:
    """One fitted fusion strategy; exactly the fields its `name` needs are
    set. Weighted averaging keeps nonnegative weights summing to 1."""

    name: str
    n_models: int
    weights: np.ndarray | None = None
    coefficients: np.ndarray | None = None
    intercept: float | None = None
    model: object | None = None
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.name not in FUSION_NAMES:
            raise ConfigError(f"unknown fusion strategy {self.name!r}")
        if self.name == "weighted_average":
            w = np.asarray(self.weights, dtype=np.float64)
            if w.shape != (self.n_models,):
                raise ConfigError("weights must have one entry per model")
            if np.any(w < 0) or abs(w.sum() - 1.0) > 1e-9:
                raise ConfigError("weights must be nonnegative and sum to 1")
            object.__setattr__(self, "weights", w)


def fusion_predict(fusion: FittedFusion, raw: np.ndarray) -> np.ndarray:
    """Scores from a fitted strategy on a (rows, models) prediction matrix."""
    raw = _check_raw(raw, fusion.n_models)
    if fusion.name == "simple_average":
        return raw.mean(axis=1)
    if fusion.name == "weighted_average":
        return raw @ fusion.weights
    if fusion.name == "stacking_logreg":
        return expit(raw @ fusion.coefficients + fusion.intercept)
    if fusion.name == "stacking_gbdt":
        return fusion.model.predict_matrix(raw)
    # the hybrid variants consume the expanded meta-feature matrix
    return fusion.model.predict_matrix(meta_feature_matrix(raw))


def fuse_baseline(
    name: str,
    raw: np.ndarray,
    labels: np.ndarray | None,
    *,
    seed: int = 0,
    hybrid_params: HybridParams | None = None,
    gbdt_params: GbdtParams | None = None,
) -> tuple[FittedFusion, np.ndarray]:
    """Fit one fusion strategy on base-model predictions.

    `raw` holds one column per base model. Every strategy except
    simple_average fits against `labels`. With a single model there is
    nothing to fuse, so only simple_average is allowed.
    """
    if name not in FUSION_NAMES:
        raise ConfigError(f"unknown fusion strategy {name!r}")
    raw = _check_raw(raw, None)
    m = raw.shape[1]
    if m == 1 and name != "simple_average":
        raise ConfigError("a single-model ensemble only supports simple_average")
    if name == "simple_average":
        fusion = FittedFusion(name, m)
        return fusion, fusion_predict(fusion, raw)
    if labels is None:
        raise DataError(f"fitting {name} requires labels")
    labels = np.asarray(labels, dtype=np.float64)
    if labels.shape != (raw.shape[0],):
        raise DataError("labels must align with prediction rows")

    if name == "weighted_average":
        weights, best_auc = _fit_weighted_average(raw, labels, seed)
        fusion = FittedFusion(name, m, weights=weights, metadata={"fit_auc": best_auc})
    elif name == "stacking_logreg":
        coef, intercept = _fit_logreg(raw, labels)
        fusion = FittedFusion(name, m, coefficients=coef, intercept=intercept)
    elif name == "stacking_gbdt":
        # a stump-depth fuser: the input is M probability columns, and at
        # sub-percent positive rates anything deeper memorizes fold noise
        params = gbdt_params or GbdtParams(
            n_trees=60, max_depth=2, learning_rate=0.1, early_stopping_rounds=None, seed=seed
        )
        schema = ColumnSchema(tuple(Column(f"m{j}", "numeric") for j in range(m)))
        data = LabeledDataset(
            ids=np.arange(raw.shape[0], dtype=np.int64),
            features=raw,
            labels=labels.astype(np.int8),
            schema=schema,
        )
        model = fit_gbdt(data, None, params)
        fusion = FittedFusion(name, m, model=model)
    elif name == "hybrid":
        params = hybrid_params or HybridParams(seed=seed)
        names = tuple(f"m{j}" for j in range(m))
        meta = MetaDataset(
            ids=np.arange(raw.shape[0], dtype=np.int64),
            features=meta_feature_matrix(raw),
            labels=labels.astype(np.int8),
            feature_names=meta_feature_names(names),
            n_models=m,
            learner_names=names,
        )
        fusion = FittedFusion(name, m, model=train_meta(meta, params))
    else:  # hybrid_no_split
        params = hybrid_params or HybridParams(seed=seed)
        fusion = FittedFusion(name, m, model=_train_no_split(raw, labels, params))
    return fusion, fusion_predict(fusion, raw)


def _train_no_split(raw: np.ndarray, labels: np.ndarray, params: HybridParams) -> DenseFusionModel:
    """The undivided control: one sigmoid stack over all meta features, with
    hidden widths matching the relative branch followed by the fusion head."""
    m = raw.shape[1]
    x = meta_feature_matrix(raw)
    hidden = list(params.rel_branch_hidden) + list(params.fusion_hidden)
    net = SigmoidNet([x.shape[1], *hidden, 1], params.seed)
    history, pos_w = _fit_sigmoid_head(net, x, labels, params)
    return DenseFusionModel(net, m, params, {"history": history, "pos_weight": pos_w})


def _check_raw(raw: np.ndarray, expect_models: int | None) -> np.ndarray:
    raw = np.asarray(raw, dtype=np.float64)
    if raw.ndim != 2 or raw.shape[1] < 1:
        raise DataError("base predictions must form a (rows, models) matrix")
    if expect_models is not None and raw.shape[1] != expect_models:
        raise DataError(
            f"prediction matrix has {raw.shape[1]} model columns, expected {expect_models}"
        )
    if raw.size and (raw.min() < 0.0 or raw.max() > 1.0 or not np.isfinite(raw).all()):
        raise DataError("base predictions must lie in [0, 1]")
    return raw


def _auc_fit_rows(labels: np.ndarray, seed: int) -> np.ndarray:
    """Row subset used to score candidate weights; keeps every positive and
    caps the total so weight fitting stays fast on large inputs."""
    n = labels.size
    if n <= _AUC_FIT_CAP:
        return np.arange(n)
    rng = np.random.default_rng(seed)
    pos = np.flatnonzero(labels == 1.0)
    neg = np.flatnonzero(labels == 0.0)
    if pos.size >= _AUC_FIT_CAP // 2:
        return np.sort(rng.permutation(n)[:_AUC_FIT_CAP])
    keep_neg = rng.permutation(neg)[: _AUC_FIT_CAP - pos.size]
    return np.sort(np.concatenate([pos, keep_neg]))


def _reweight(w: np.ndarray, j: int, v: float) -> np.ndarray:
    """Set coordinate j to v and rescale the rest to keep the simplex."""
    out = np.empty_like(w)
    rest = 1.0 - w[j]
    if rest <= 0.0:
        out[:] = (1.0 - v) / (w.size - 1)
    else:
        out[:] = w * ((1.0 - v) / rest)
    out[j] = v
    return out


def _fit_weighted_average(raw, labels, seed) -> tuple[np.ndarray, float]:
    """Coordinate ascent on AUC over the weight simplex.

    Each update scans one coordinate over a fixed 21-point grid (the other
    coordinates rescale proportionally) and keeps the best strict
    improvement; passes over all coordinates repeat until one changes
    nothing, capped at 200 updates. Restarts: uniform weights, the best
    single model, and two seeded random draws.
    """
    n, m = raw.shape
    if labels.sum() == 0 or labels.sum() == n:
        raise DataError("weight fitting needs both classes present")
    rows = _auc_fit_rows(labels, seed)
    sub_raw, sub_labels = raw[rows], labels[rows]

    def score(w: np.ndarray) -> float:
        return auc(sub_labels, sub_raw @ w)

    singles = [score(np.eye(m)[j]) for j in range(m)]
    rng = np.random.default_rng(seed)
    starts = [np.full(m, 1.0 / m), np.eye(m)[int(np.argmax(singles))]]
    starts.extend(rng.dirichlet(np.ones(m)) for _ in range(2))

    best_w, best_a = None, -np.inf
    for w0 in starts:
        w = w0.copy()
        current = score(w)
        updates = 0
        improved = True
        while improved and updates < _MAX_COORDINATE_UPDATES:
            improved = False
            for j in range(m):
                if updates >= _MAX_COORDINATE_UPDATES:
                    break
                updates += 1
                cands = [_reweight(w, j, v) for v in _WEIGHT_GRID]
                scores = [score(c) for c in cands]
                k = int(np.argmax(scores))
                if scores[k] > current + 1e-12:
                    w, current = cands[k], scores[k]
                    improved = True
        if current > best_a:
            best_w, best_a = w, current
    return best_w, best_a


def _fit_logreg(
    x: np.ndarray, y: np.ndarray, ridge: float = 1e-8, max_iter: int = 25
) -> tuple[np.ndarray, float]:
    """Damped Newton logistic regression; ridge keeps the system solvable
    when the inputs are separable or collinear. Intercept is unpenalized."""
    n, m = x.shape
    design = np.c_[x, np.ones(n)]
    reg = np.full(m + 1, ridge)
    reg[m] = 0.0
    beta = np.zeros(m + 1)

    def penalized_loss(b):
        z = design @ b
        nll = float(-np.mean(y * log_expit(z) + (1.0 - y) * log_expit(-z)))
        return nll + 0.5 * float(reg @ (b * b)) / n

    loss = penalized_loss(beta)
    for _ in range(max_iter):
        z = design @ beta
        p = expit(z)
        g = design.T @ (p - y) / n + reg * beta / n
        w = np.maximum(p * (1.0 - p), 1e-12)
        hess = (design * w[:, None]).T @ design / n + np.diag(reg) / n
        step = np.linalg.solve(hess, g)
        # backtrack: a full Newton step can overshoot once saturated
        t = 1.0
        for _half in range(12):
            cand = beta - t * step
            cand_loss = penalized_loss(cand)
            if cand_loss <= loss:
                break
            t *= 0.5
        if cand_loss > loss - 1e-14:
            beta = cand if cand_loss < loss else beta
            break
        beta, loss = cand, cand_loss
    return beta[:m], float(beta[m])
