"""Ranking metrics, lead lists, PR curves, drift statistic, score reports.

Every function here is pure: arrays in, numbers out. Wherever a ranking is
materialized, ties are broken by ascending id, so repeated evaluation of the
same scores is bit-for-bit reproducible.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass

import numpy as np
from scipy.stats import rankdata

from .data import LabeledDataset
from .errors import ConfigError, DataError, SchemaError

_HISTOGRAM_BINS = 50
_PSI_FLOOR = 1e-6
_PSI_BINS = 10
_PSI_MIN_ROWS = 100


def _as_labels(labels) -> np.ndarray:
    labels = np.asarray(labels)
    if labels.ndim != 1:
        raise DataError("labels must be one-dimensional")
    if labels.size and not np.all((labels == 0) | (labels == 1)):
        raise DataError("labels must contain only 0 and 1")
    return labels.astype(np.float64)


def _as_scores(scores, n: int | None = None) -> np.ndarray:
    scores = np.asarray(scores, dtype=np.float64)
    if scores.ndim != 1:
        raise DataError("scores must be one-dimensional")
    if n is not None and scores.size != n:
        raise DataError(f"scores have length {scores.size}, expected {n}")
    if scores.size and not np.isfinite(scores).all():
        raise DataError("scores contain non-finite values")
    return scores


@dataclass(frozen=True)
class LeadList:
    """Top-k ids by score, descending; `k` is the requested cut, so the list
    is shorter than `k` only when fewer rows exist."""

    ids: np.ndarray
    scores: np.ndarray
    k: int

    def __post_init__(self):
        if len(self.ids) != len(self.scores):
            raise DataError("lead ids and scores must align")
        if np.any(np.diff(self.scores) > 0):
            raise DataError("lead scores must be non-increasing")


def rank_top_k(ids, scores, k: int) -> LeadList:
    """The k highest-scoring ids; equal scores sort by ascending id."""
    if k < 1:
        raise ConfigError(f"k must be >= 1, got {k}")
    ids = np.asarray(ids)
    scores = _as_scores(scores, ids.shape[0] if ids.ndim == 1 else None)
    if ids.ndim != 1:
        raise DataError("ids must be one-dimensional")
    n = ids.size
    if n == 0:
        raise DataError("cannot rank an empty score set")
    if k > n:
        warnings.warn(f"k={k} exceeds the {n} available rows; returning all rows")
    order = np.lexsort((ids, -scores))[: min(k, n)]
    return LeadList(ids=ids[order], scores=scores[order], k=k)


def precision_at_k(labels, scores, k: int) -> float:
    labels = _as_labels(labels)
    scores = _as_scores(scores, labels.size)
    top = rank_top_k(np.arange(labels.size), scores, k)
    return float(labels[top.ids].sum()) / k


def business_recall_at_k(labels, scores, k: int) -> float:
    """Top-k positives over a third of all positives.

    The denominator scales total positives down to a monthly average across
    the three-month label window, so values above 1 are legitimate.
    """
    labels = _as_labels(labels)
    scores = _as_scores(scores, labels.size)
    total = float(labels.sum())
    if total == 0:
        raise DataError("business recall is undefined with zero positives")
    top = rank_top_k(np.arange(labels.size), scores, k)
    hits = float(labels[top.ids].sum())
    return 3.0 * (hits / total)


def auc(labels, scores) -> float:
    """Rank-based AUC; tied scores contribute half a concordant pair."""
    labels = _as_labels(labels)
    scores = _as_scores(scores, labels.size)
    n_pos = int(labels.sum())
    n_neg = labels.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise DataError("AUC needs both classes present")
    ranks = rankdata(scores)
    pos_rank_sum = float(ranks[labels == 1.0].sum())
    return (pos_rank_sum - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg)


def log_loss(labels, scores, clip: float = 1e-15) -> float:
    if not (0.0 < clip < 0.5):
        raise ConfigError(f"clip must lie in (0, 0.5), got {clip}")
    labels = _as_labels(labels)
    p = np.clip(_as_scores(scores, labels.size), clip, 1.0 - clip)
    return float(-np.mean(labels * np.log(p) + (1.0 - labels) * np.log(1.0 - p)))


def lift_at_k(labels, scores, k: int) -> float:
    """precision@k over the base positive rate."""
    labels = _as_labels(labels)
    base = float(labels.mean())
    if base == 0:
        raise DataError("lift is undefined with zero positives")
    return precision_at_k(labels, scores, k) / base


def pr_curve(labels, scores, n_points: int = 100) -> list[tuple[float, float]]:
    """(recall, precision) at every distinct score threshold, descending
    threshold order, thinned to at most n_points while keeping both ends."""
    if n_points < 2:
        raise ConfigError(f"n_points must be >= 2, got {n_points}")
    labels = _as_labels(labels)
    scores = _as_scores(scores, labels.size)
    total = float(labels.sum())
    if total == 0 or total == labels.size:
        raise DataError("a PR curve needs both classes present")
    order = np.argsort(-scores, kind="stable")
    s = scores[order]
    tp = np.cumsum(labels[order])
    last_of_value = np.flatnonzero(np.r_[s[1:] != s[:-1], True])
    recall = tp[last_of_value] / total
    precision = tp[last_of_value] / (last_of_value + 1.0)
    if recall.size > n_points:
        pick = np.unique(np.round(np.linspace(0, recall.size - 1, n_points)).astype(int))
        recall, precision = recall[pick], precision[pick]
    return [(float(r), float(p)) for r, p in zip(recall, precision)]


@dataclass(frozen=True)
class ScoreDistribution:
    bin_edges: np.ndarray
    counts: np.ndarray
    cutoff_score: float
    cutoff_percentile: float


def score_distribution(scores, k: int) -> ScoreDistribution:
    """Fixed 50-bin histogram over [0,1] plus the k-th largest score and the
    fraction of scores strictly below it."""
    if k < 1:
        raise ConfigError(f"k must be >= 1, got {k}")
    scores = _as_scores(scores)
    n = scores.size
    if n == 0:
        raise DataError("cannot summarize an empty score set")
    counts, edges = np.histogram(scores, bins=_HISTOGRAM_BINS, range=(0.0, 1.0))
    kk = min(k, n)
    cutoff = float(np.partition(scores, n - kk)[n - kk])
    percentile = float(np.mean(scores < cutoff))
    return ScoreDistribution(edges, counts, cutoff, percentile)


def feature_importance(model) -> list[tuple[str, float]]:
    """Per-feature share of total split gain, scaled to sum 100, descending.

    Only tree models carry split gains; anything else is rejected.
    """
    gain_fn = getattr(model, "gain_importance", None)
    if gain_fn is None:
        raise ConfigError(
            f"feature importance needs a tree model, got kind={getattr(model, 'kind', '?')!r}"
        )
    gains = np.asarray(gain_fn(), dtype=np.float64)
    total = gains.sum()
    if total <= 0:
        raise DataError("model has no splits to attribute importance to")
    share = gains / total * 100.0
    order = np.argsort(-share, kind="stable")
    names = model.feature_names
    return [(names[j], float(share[j])) for j in order]


def psi_drift(reference: LabeledDataset, current: LabeledDataset) -> dict[str, float]:
    """Population stability index per feature.

    Bins are the reference deciles; proportions are floored at 1e-6 so
    disjoint supports stay finite. Values above 0.25 conventionally flag a
    shift worth investigating.
    """
    if reference.schema != current.schema:
        raise SchemaError("drift comparison needs identical schemas")
    if reference.n_rows < _PSI_MIN_ROWS or current.n_rows < _PSI_MIN_ROWS:
        raise DataError(f"PSI needs at least {_PSI_MIN_ROWS} rows on each side")
    out: dict[str, float] = {}
    qs = np.linspace(0.0, 1.0, _PSI_BINS + 1)[1:-1]
    for j, name in enumerate(reference.feature_names):
        cuts = np.unique(np.quantile(reference.features[:, j], qs))
        ref_prop = _bin_proportions(reference.features[:, j], cuts)
        cur_prop = _bin_proportions(current.features[:, j], cuts)
        out[name] = float(np.sum((cur_prop - ref_prop) * np.log(cur_prop / ref_prop)))
    return out


def _bin_proportions(col: np.ndarray, cuts: np.ndarray) -> np.ndarray:
    idx = np.searchsorted(cuts, col, side="right")
    counts = np.bincount(idx, minlength=cuts.size + 1).astype(np.float64)
    return np.maximum(counts / col.size, _PSI_FLOOR)


@dataclass(frozen=True)
class EvalReport:
    """Everything a scoring run reports for one model on one split."""

    k: int
    n: int
    n_positives: int
    precision_at_k: float
    business_recall_at_k: float
    auc: float
    log_loss: float
    lift_at_k: float
    pr_curve: tuple[tuple[float, float], ...]
    histogram_edges: tuple[float, ...]
    histogram_counts: tuple[int, ...]
    cutoff_score: float
    cutoff_percentile: float


def evaluate_scores(labels, scores, k: int, n_pr_points: int = 100) -> EvalReport:
    labels = _as_labels(labels)
    scores = _as_scores(scores, labels.size)
    dist = score_distribution(scores, k)
    return EvalReport(
        k=k,
        n=labels.size,
        n_positives=int(labels.sum()),
        precision_at_k=precision_at_k(labels, scores, k),
        business_recall_at_k=business_recall_at_k(labels, scores, k),
        auc=auc(labels, scores),
        log_loss=log_loss(labels, scores),
        lift_at_k=lift_at_k(labels, scores, k),
        pr_curve=tuple(pr_curve(labels, scores, n_pr_points)),
        histogram_edges=tuple(float(e) for e in dist.bin_edges),
        histogram_counts=tuple(int(c) for c in dist.counts),
        cutoff_score=dist.cutoff_score,
        cutoff_percentile=dist.cutoff_percentile,
    )


_REPORT_SCALARS = (
    "k",
    "n",
    "n_positives",
    "precision_at_k",
    "business_recall_at_k",
    "auc",
    "log_loss",
    "lift_at_k",
    "cutoff_score",
    "cutoff_percentile",
)


def report_to_json(report: EvalReport) -> str:
    payload = {name: getattr(report, name) for name in _REPORT_SCALARS}
    payload["pr_curve"] = [list(pt) for pt in report.pr_curve]
    payload["histogram_edges"] = list(report.histogram_edges)
    payload["histogram_counts"] = list(report.histogram_counts)
    return json.dumps(payload, indent=2, sort_keys=True)


def report_from_json(text: str) -> EvalReport:
    payload = json.loads(text)
    try:
        return EvalReport(
            pr_curve=tuple((float(r), float(p)) for r, p in payload.pop("pr_curve")),
            histogram_edges=tuple(payload.pop("histogram_edges")),
            histogram_counts=tuple(payload.pop("histogram_counts")),
            **payload,
        )
    except (KeyError, TypeError) as exc:
        raise DataError(f"malformed evaluation report: {exc}") from exc


def lead_list_to_csv(leads: LeadList, path) -> None:
    with open(path, "w") as fh:
        fh.write("rank,id,score\n")
        for rank, (i, s) in enumerate(zip(leads.ids, leads.scores), start=1):
            fh.write(f"{rank},{i},{repr(float(s))}\n")


def pr_curve_to_csv(report: EvalReport, path) -> None:
    with open(path, "w") as fh:
        fh.write("recall,precision\n")
        for r, p in report.pr_curve:
            fh.write(f"{repr(float(r))},{repr(float(p))}\n")
