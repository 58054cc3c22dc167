"""Histogram gradient-boosted trees with Newton leaf values.

Trees grow level by level on quantile-binned features. Each boosting round
fits the current gradient/hessian statistics; leaf values are the Newton step
-G / (H + reg_lambda) scaled by the learning rate. Two classification
objectives are built in (weighted log loss and focal loss) plus the two
regression objectives the distillation stage needs. Growth is fully
deterministic: no row or feature subsampling.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.special import expit, log_expit

from ..data import Column, ColumnSchema, LabeledDataset
from ..errors import ConfigError, TrainingError
from .base import project_features, resolve_pos_weight

_HESS_FLOOR = 1e-12
_MIN_GAIN = 1e-12


@dataclass(frozen=True)
class FocalParams:
    """Focusing strength gamma and positive-class weight alpha."""

    gamma: float = 2.0
    alpha: float = 0.25

    def __post_init__(self):
        if self.gamma < 0:
            raise ConfigError(f"gamma must be >= 0, got {self.gamma}")
        if not (0.0 < self.alpha < 1.0):
            raise ConfigError(f"alpha must lie in (0, 1), got {self.alpha}")


@dataclass(frozen=True)
class GbdtParams:
    n_trees: int = 150
    max_depth: int = 6
    learning_rate: float = 0.1
    min_samples_leaf: int = 20
    n_bins: int = 64
    scale_pos_weight: float | None = None
    objective: str = "logloss"
    early_stopping_rounds: int | None = 25
    reg_lambda: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.n_trees < 1:
            raise ConfigError("n_trees must be >= 1")
        if self.max_depth < 1:
            raise ConfigError("max_depth must be >= 1")
        # 0 is legal and degenerate: every tree contributes nothing, so the
        # model predicts the base rate everywhere.
        if not (0.0 <= self.learning_rate <= 1.0):
            raise ConfigError(
                f"learning_rate must lie in [0, 1], got {self.learning_rate}"
            )
        if self.min_samples_leaf < 1:
            raise ConfigError("min_samples_leaf must be >= 1")
        if not (2 <= self.n_bins <= 256):
            raise ConfigError("n_bins must lie in [2, 256]")
        if self.scale_pos_weight is not None and self.scale_pos_weight <= 0:
            raise ConfigError("scale_pos_weight must be positive")
        if self.objective not in ("logloss", "focal"):
            raise ConfigError(f"objective must be logloss or focal, got {self.objective!r}")
        if self.early_stopping_rounds is not None and self.early_stopping_rounds < 1:
            raise ConfigError("early_stopping_rounds must be >= 1 or None")
        if self.reg_lambda < 0:
            raise ConfigError("reg_lambda must be >= 0")


# ---------------------------------------------------------------------------
# objectives


def focal_loss_value(z, y, gamma: float = 2.0, alpha: float = 0.25) -> np.ndarray:
    """Per-sample focal loss on raw scores z with labels y in {0, 1}."""
    z = np.asarray(z, dtype=np.float64)
    y = np.asarray(y)
    p = expit(z)
    q = expit(-z)
    pos = -alpha * np.power(q, gamma) * log_expit(z)
    neg = -(1.0 - alpha) * np.power(p, gamma) * log_expit(-z)
    return np.where(y == 1, pos, neg)


def _pos_grad_hess(z, gamma, alpha):
    # y = 1 branch; the y = 0 branch is this under z -> -z, alpha -> 1-alpha.
    p = expit(z)
    q = expit(-z)
    log_p = log_expit(z)
    qg = np.power(q, gamma)
    g = alpha * qg * (gamma * p * log_p - q)
    h = alpha * p * qg * (
        gamma * log_p * (1.0 - p * (gamma + 1.0)) + (2.0 * gamma + 1.0) * q
    )
    return g, h


def focal_grad_hess(z, y, gamma: float = 2.0, alpha: float = 0.25):
    """Analytic d/dz and d2/dz2 of the focal loss; hessian floored at 1e-12."""
    z = np.asarray(z, dtype=np.float64)
    y = np.asarray(y)
    gp, hp = _pos_grad_hess(z, gamma, alpha)
    gn, hn = _pos_grad_hess(-z, gamma, 1.0 - alpha)
    g = np.where(y == 1, gp, -gn)
    h = np.where(y == 1, hp, hn)
    return g, np.maximum(h, _HESS_FLOOR)


class _LogLossObjective:
    name = "logloss"
    link = "sigmoid"

    def init_raw(self, y, w):
        p0 = float(np.sum(w * y) / np.sum(w))
        p0 = min(max(p0, 1e-15), 1.0 - 1e-15)
        return math.log(p0 / (1.0 - p0))

    def grad_hess(self, raw, y, w):
        # p - y written via expit(-raw) so it stays exact near p = 1
        p = expit(raw)
        q = expit(-raw)
        g = w * np.where(y == 1, -q, p)
        h = w * np.maximum(p * q, _HESS_FLOOR)
        return g, h

    def train_loss(self, raw, y, w):
        per = -y * log_expit(raw) - (1.0 - y) * log_expit(-raw)
        return float(np.sum(w * per) / np.sum(w))


class _FocalObjective:
    name = "focal"
    link = "sigmoid"

    def __init__(self, focal: FocalParams):
        self.focal = focal

    def init_raw(self, y, w):
        return _LogLossObjective().init_raw(y, w)

    def grad_hess(self, raw, y, w):
        g, h = focal_grad_hess(raw, y, self.focal.gamma, self.focal.alpha)
        return w * g, w * h

    def train_loss(self, raw, y, w):
        per = focal_loss_value(raw, y, self.focal.gamma, self.focal.alpha)
        return float(np.sum(w * per) / np.sum(w))


class _SquaredErrorObjective:
    """Regression on continuous targets; used for mse distillation."""

    name = "mse"
    link = "identity"

    def init_raw(self, y, w):
        return float(np.sum(w * y) / np.sum(w))

    def grad_hess(self, raw, y, w):
        return 2.0 * w * (raw - y), 2.0 * w * np.ones_like(raw)

    def train_loss(self, raw, y, w):
        return float(np.sum(w * (raw - y) ** 2) / np.sum(w))


class _SoftCrossEntropyObjective:
    """Cross-entropy against probabilistic targets; used for kl distillation."""

    name = "soft_ce"
    link = "sigmoid"

    def init_raw(self, y, w):
        p0 = float(np.sum(w * y) / np.sum(w))
        p0 = min(max(p0, 1e-15), 1.0 - 1e-15)
        return math.log(p0 / (1.0 - p0))

    def grad_hess(self, raw, y, w):
        p = expit(raw)
        g = w * (p - y)
        h = w * np.maximum(p * (1.0 - p), _HESS_FLOOR)
        return g, h

    def train_loss(self, raw, y, w):
        per = -y * log_expit(raw) - (1.0 - y) * log_expit(-raw)
        return float(np.sum(w * per) / np.sum(w))


# ---------------------------------------------------------------------------
# binning


def _bin_columns(x: np.ndarray, n_bins: int) -> tuple[np.ndarray, list[np.ndarray]]:
    """Quantile-bin every column. Returns (bins as (d, n), per-column edges).

    bin(v) counts edges strictly below v, so rows with v <= edges[b] are
    exactly the rows with bin <= b; split thresholds reuse the edge values.
    """
    n, d = x.shape
    binned = np.empty((d, n), dtype=np.uint8)
    edges: list[np.ndarray] = []
    qs = np.linspace(0.0, 1.0, n_bins + 1)[1:-1]
    for j in range(d):
        col = x[:, j]
        e = np.unique(np.quantile(col, qs))
        e = e[e < col.max()] if e.size else e
        if e.size > n_bins - 1:
            e = e[: n_bins - 1]
        binned[j] = np.searchsorted(e, col, side="left").astype(np.uint8)
        edges.append(e)
    return binned, edges


# ---------------------------------------------------------------------------
# tree growth


@dataclass
class _Tree:
    feature: np.ndarray  # int32; -1 marks a leaf
    threshold: np.ndarray
    left: np.ndarray
    right: np.ndarray
    value: np.ndarray  # leaf contribution, already learning-rate scaled
    gain_by_feature: np.ndarray


def _grow_tree(
    xb: np.ndarray,
    edges: list[np.ndarray],
    g: np.ndarray,
    h: np.ndarray,
    params: GbdtParams,
) -> tuple[_Tree, np.ndarray]:
    """Grow one tree on binned features laid out (feature, row).

    Level-wise. Histograms are built only for the smaller child of each
    split; the sibling's histogram is the parent's minus it.
    """
    d, n = xb.shape
    lam = params.reg_lambda
    min_leaf = params.min_samples_leaf
    max_bins = max((len(e) for e in edges), default=0) + 1

    feature = [np.int32(-1)]
    threshold = [0.0]
    left = [np.int32(-1)]
    right = [np.int32(-1)]
    value = [0.0]
    gain_by_feature = np.zeros(d)

    # bins past a column's edge list never hold a split
    valid_bin = np.zeros((d, max_bins), dtype=bool)
    for j, e in enumerate(edges):
        valid_bin[j, : len(e)] = True

    row_node = np.zeros(n, dtype=np.int32)
    frontier = np.array([0], dtype=np.int32)
    node_g = np.array([g.sum()])
    node_h = np.array([h.sum()])
    node_c = np.array([n], dtype=np.int64)
    prev = None  # (hg, hh, hc) of the previous level
    par_of = sib_of = small = None

    for _depth in range(params.max_depth):
        if frontier.size == 0:
            break
        nb = frontier.size
        node_local = np.full(len(feature), -1, dtype=np.int32)
        node_local[frontier] = np.arange(nb, dtype=np.int32)
        loc = node_local[row_node]
        act = np.flatnonzero(loc >= 0)

        denom = node_h + lam
        with np.errstate(divide="ignore", invalid="ignore"):
            parent_score = np.where(denom > 0, (node_g * node_g) / denom, 0.0)
        can_split = node_c >= 2 * min_leaf

        best_gain = np.zeros(nb)
        best_feat = np.full(nb, -1, dtype=np.int32)
        best_bin = np.zeros(nb, dtype=np.int32)

        if can_split.any():
            if prev is None:
                direct = act
            else:
                direct = act[small[loc[act]]]
            key_base = loc[direct].astype(np.int32) * max_bins
            cols = xb[:, direct]
            g_dir = g[direct]
            h_dir = h[direct]
            nk = nb * max_bins
            hg = np.zeros((d, nb, max_bins))
            hh = np.zeros((d, nb, max_bins))
            hc = np.zeros((d, nb, max_bins), dtype=np.int64)
            for j in range(d):
                if len(edges[j]) == 0:
                    continue
                key = key_base + cols[j]
                hg[j] = np.bincount(key, weights=g_dir, minlength=nk).reshape(
                    nb, max_bins
                )
                hh[j] = np.bincount(key, weights=h_dir, minlength=nk).reshape(
                    nb, max_bins
                )
                hc[j] = np.bincount(key, minlength=nk).reshape(nb, max_bins)
            if prev is not None:
                big = np.flatnonzero(~small)
                if big.size:
                    pg, ph, pc = prev
                    hg[:, big, :] = pg[:, par_of[big], :] - hg[:, sib_of[big], :]
                    hh[:, big, :] = ph[:, par_of[big], :] - hh[:, sib_of[big], :]
                    hc[:, big, :] = pc[:, par_of[big], :] - hc[:, sib_of[big], :]

            gl = np.cumsum(hg, axis=2)
            hl = np.cumsum(hh, axis=2)
            cl = np.cumsum(hc, axis=2)
            gr = node_g[None, :, None] - gl
            hr = node_h[None, :, None] - hl
            cr = node_c[None, :, None] - cl
            ok = (
                (cl >= min_leaf)
                & (cr >= min_leaf)
                & (hl + lam > 0)
                & (hr + lam > 0)
                & can_split[None, :, None]
                & valid_bin[:, None, :]
            )
            with np.errstate(divide="ignore", invalid="ignore"):
                gain = np.where(
                    ok,
                    0.5
                    * (
                        (gl * gl) / (hl + lam)
                        + (gr * gr) / (hr + lam)
                        - parent_score[None, :, None]
                    ),
                    -np.inf,
                )
            # first argmax over feature-major (feature, bin) keeps the
            # lowest pair on exact gain ties
            flat = gain.transpose(1, 0, 2).reshape(nb, d * max_bins)
            cand = np.argmax(flat, axis=1)
            cand_gain = flat[np.arange(nb), cand]
            hit = cand_gain > _MIN_GAIN
            best_feat[hit] = (cand[hit] // max_bins).astype(np.int32)
            best_bin[hit] = (cand[hit] % max_bins).astype(np.int32)
            best_gain[hit] = cand_gain[hit]

        split_mask = best_feat >= 0
        if not split_mask.any():
            for i, node in enumerate(frontier):
                value[node] = _leaf_value(
                    node_g[i], node_h[i], lam, params.learning_rate
                )
            frontier = np.array([], dtype=np.int32)
            break

        si = np.flatnonzero(split_mask)
        sj, sb = best_feat[si], best_bin[si]
        lg, lh, lc = gl[sj, si, sb], hl[sj, si, sb], cl[sj, si, sb]

        n_new = 2 * si.size
        new_g = np.empty(n_new)
        new_h = np.empty(n_new)
        new_c = np.empty(n_new, dtype=np.int64)
        new_par = np.empty(n_new, dtype=np.int32)
        new_sib = np.empty(n_new, dtype=np.int32)
        new_small = np.empty(n_new, dtype=bool)
        new_frontier: list[int] = []
        left_of = np.full(nb, -1, dtype=np.int32)
        right_of = np.full(nb, -1, dtype=np.int32)
        for k, i in enumerate(si):
            node = int(frontier[i])
            j, b = int(sj[k]), int(sb[k])
            gain_by_feature[j] += best_gain[i]
            feature[node] = np.int32(j)
            threshold[node] = float(edges[j][b])
            lid, rid = len(feature), len(feature) + 1
            left[node], right[node] = np.int32(lid), np.int32(rid)
            for _ in range(2):
                feature.append(np.int32(-1))
                threshold.append(0.0)
                left.append(np.int32(-1))
                right.append(np.int32(-1))
                value.append(0.0)
            left_of[i], right_of[i] = lid, rid
            new_frontier.extend((lid, rid))
            a, bpos = 2 * k, 2 * k + 1
            new_g[a], new_g[bpos] = lg[k], node_g[i] - lg[k]
            new_h[a], new_h[bpos] = lh[k], node_h[i] - lh[k]
            new_c[a], new_c[bpos] = lc[k], node_c[i] - lc[k]
            new_par[a] = new_par[bpos] = i
            new_sib[a], new_sib[bpos] = bpos, a
            left_small = lc[k] * 2 <= node_c[i]
            new_small[a], new_small[bpos] = left_small, not left_small
        for i in np.flatnonzero(~split_mask):
            value[int(frontier[i])] = _leaf_value(
                node_g[i], node_h[i], lam, params.learning_rate
            )

        sf = best_feat[loc[act]]
        rows = act[sf >= 0]
        loc_rows = loc[rows]
        bins_row = xb[best_feat[loc_rows], rows]
        goes_left = bins_row <= best_bin[loc_rows]
        row_node[rows] = np.where(
            goes_left, left_of[loc_rows], right_of[loc_rows]
        ).astype(np.int32)
        frontier = np.array(new_frontier, dtype=np.int32)
        node_g, node_h, node_c = new_g, new_h, new_c
        par_of, sib_of, small = new_par, new_sib, new_small
        prev = (hg, hh, hc)

    # anything still open ran out of depth
    for i, node in enumerate(frontier):
        value[node] = _leaf_value(node_g[i], node_h[i], lam, params.learning_rate)

    tree = _Tree(
        feature=np.array(feature, dtype=np.int32),
        threshold=np.array(threshold),
        left=np.array(left, dtype=np.int32),
        right=np.array(right, dtype=np.int32),
        value=np.array(value),
        gain_by_feature=gain_by_feature,
    )
    return tree, tree.value[row_node]


def _leaf_value(g_sum: float, h_sum: float, lam: float, lr: float) -> float:
    if h_sum <= 0:
        return 0.0
    return float(-g_sum / (h_sum + lam) * lr)


def _tree_predict_raw(tree: _Tree, x: np.ndarray) -> np.ndarray:
    n = x.shape[0]
    node = np.zeros(n, dtype=np.int32)
    rows = np.arange(n)
    while True:
        feat = tree.feature[node]
        open_ = feat >= 0
        if not open_.any():
            break
        r = rows[open_]
        nd = node[open_]
        go_left = x[r, feat[open_]] <= tree.threshold[nd]
        node[open_] = np.where(go_left, tree.left[nd], tree.right[nd])
    return tree.value[node]


# ---------------------------------------------------------------------------
# boosting engine


@dataclass
class _BoostResult:
    trees: list[_Tree]
    init_raw: float
    train_loss: list[float]
    valid_primary: list[float]
    best_iteration: int


def _boost(
    objective,
    x: np.ndarray,
    y: np.ndarray,
    w: np.ndarray,
    params: GbdtParams,
    valid_x: np.ndarray | None,
    valid_eval,
) -> _BoostResult:
    """Shared Newton-boosting loop.

    `valid_eval(raw_valid) -> float` supplies the early-stopping metric
    (lower is better); pass None with valid_x=None to disable.
    """
    xb, edges = _bin_columns(x, params.n_bins)
    init = objective.init_raw(y, w)
    raw = np.full(x.shape[0], init)
    raw_valid = None if valid_x is None else np.full(valid_x.shape[0], init)

    trees: list[_Tree] = []
    train_loss: list[float] = []
    valid_primary: list[float] = []
    best = np.inf
    best_iter = -1
    stall = 0
    for _t in range(params.n_trees):
        g, h = objective.grad_hess(raw, y, w)
        tree, contrib = _grow_tree(xb, edges, g, h, params)
        trees.append(tree)
        raw = raw + contrib
        loss = objective.train_loss(raw, y, w)
        if not np.isfinite(loss):
            raise TrainingError(f"non-finite training loss at boosting round {_t}")
        train_loss.append(loss)
        if raw_valid is not None:
            raw_valid = raw_valid + _tree_predict_raw(tree, valid_x)
            metric = valid_eval(raw_valid)
            valid_primary.append(metric)
            if metric < best:
                best = metric
                best_iter = _t
                stall = 0
            else:
                stall += 1
                if (
                    params.early_stopping_rounds
                    and stall >= params.early_stopping_rounds
                ):
                    break
    if raw_valid is not None and best_iter >= 0:
        trees = trees[: best_iter + 1]
    else:
        best_iter = len(trees) - 1
    return _BoostResult(trees, init, train_loss, valid_primary, best_iter)


# ---------------------------------------------------------------------------
# public model


class GbdtModel:
    """Fitted boosted-tree classifier. Predicts by feature name alignment."""

    kind = "gbdt"

    def __init__(self, feature_names, params, focal, init_raw, trees, link, metadata):
        self.feature_names = tuple(feature_names)
        self.params = params
        self.focal = focal
        self.init_raw = init_raw
        self.trees = trees
        self.link = link
        self.metadata = dict(metadata)

    @property
    def n_trees(self) -> int:
        return len(self.trees)

    def raw_scores(self, x: np.ndarray) -> np.ndarray:
        raw = np.full(x.shape[0], self.init_raw)
        for tree in self.trees:
            raw += _tree_predict_raw(tree, x)
        return raw

    def predict_matrix(self, x: np.ndarray) -> np.ndarray:
        raw = self.raw_scores(x)
        return expit(raw) if self.link == "sigmoid" else raw

    def predict(self, data: LabeledDataset) -> np.ndarray:
        return self.predict_matrix(project_features(data, self.feature_names))

    def gain_importance(self) -> np.ndarray:
        """Total split gain per feature, unnormalized."""
        total = np.zeros(len(self.feature_names))
        for tree in self.trees:
            total += tree.gain_by_feature
        return total


def fit_gbdt(
    train: LabeledDataset,
    valid: LabeledDataset | None,
    params: GbdtParams | None = None,
    focal: FocalParams | None = None,
) -> GbdtModel:
    """Boosted-tree classifier on a labeled dataset.

    Positives carry scale_pos_weight (defaulting to the negative/positive
    ratio) in the gradient statistics. With a validation set, boosting stops
    once validation log loss fails to improve for early_stopping_rounds and
    the model is truncated back to the best round; valid=None trains the full
    n_trees.
    """
    params = params or GbdtParams()
    if train.labels is None:
        raise TrainingError("fit_gbdt needs labeled training data")
    if params.objective == "focal":
        objective = _FocalObjective(focal or FocalParams())
    else:
        if focal is not None:
            raise ConfigError("focal parameters supplied but objective is logloss")
        objective = _LogLossObjective()
    y = train.labels.astype(np.float64)
    pos_w = resolve_pos_weight(params.scale_pos_weight, y)
    w = np.where(y == 1.0, pos_w, 1.0)

    valid_x = None
    valid_eval = None
    if valid is not None:
        if valid.labels is None:
            raise TrainingError("validation data needs labels for early stopping")
        valid_x = project_features(valid, train.feature_names)
        y_val = valid.labels.astype(np.float64)

        def valid_eval(raw):
            p = np.clip(expit(raw), 1e-15, 1.0 - 1e-15)
            return float(-np.mean(y_val * np.log(p) + (1.0 - y_val) * np.log(1.0 - p)))

    result = _boost(
        objective, train.features, y, w, params, valid_x, valid_eval
    )
    focal_used = objective.focal if params.objective == "focal" else None
    return GbdtModel(
        feature_names=train.feature_names,
        params=params,
        focal=focal_used,
        init_raw=result.init_raw,
        trees=result.trees,
        link="sigmoid",
        metadata={
            "pos_weight": pos_w,
            "best_iteration": result.best_iteration,
            "train_loss": result.train_loss,
            "valid_metric": result.valid_primary,
        },
    )


def fit_subset(
    train: LabeledDataset,
    valid: LabeledDataset | None,
    mask: tuple[str, ...] | list[str],
    params: GbdtParams | None = None,
    focal: FocalParams | None = None,
) -> GbdtModel:
    """GBDT restricted to the named feature subset.

    The returned model's schema is the mask itself, and prediction aligns
    columns by name, so the restriction applies automatically to any dataset
    scored later. An unknown name in the mask raises; mask covering every
    feature reproduces plain fit_gbdt.
    """
    mask = tuple(mask)
    if len(mask) == 0:
        raise ConfigError("feature mask must name at least one column")
    if len(set(mask)) != len(mask):
        raise ConfigError("feature mask contains duplicates")
    train_sub = _project_dataset(train, mask)
    valid_sub = None if valid is None else _project_dataset(valid, mask)
    model = fit_gbdt(train_sub, valid_sub, params, focal)
    model.metadata["feature_mask"] = list(mask)
    return model


def _project_dataset(data: LabeledDataset, names: tuple[str, ...]) -> LabeledDataset:
    cols = project_features(data, names)
    kinds = {c.name: c.kind for c in data.schema.columns}
    schema = ColumnSchema(tuple(Column(n, kinds[n]) for n in names))
    return LabeledDataset(
        ids=data.ids, features=cols, labels=data.labels, schema=schema
    )
