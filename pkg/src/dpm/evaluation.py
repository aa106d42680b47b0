"""Scoring, ROC analysis and the last-touch diagnostic.

Pooled ROC rows are (customer, label day) pairs. The DPM score of a row is the
filter's one-step-ahead probability built from the preceding days only, which
is the same information the lagged regressions see for that row.
"""
from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Mapping, Optional, Sequence

import numpy as np

from .baselines import GlmFit, build_lagged_design, predict_design
from .model import ContractError, CustomerHistory, ModelParams
from .particles import FilterConfig, run_filter


def _map(fn, items, threads: int):
    if threads <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, items))


def predictive_scores(params: ModelParams, history: CustomerHistory, filter_config: FilterConfig) -> np.ndarray:
    """Length T+1: entry ``t`` is P(purchase on day t+1 | days 1..t)."""
    return run_filter(params, history, filter_config).predicted


def score_customer(params: ModelParams, history: CustomerHistory, filter_config: FilterConfig) -> np.ndarray:
    """For each day t = 1..T, the probability of a purchase on day t+1 given days 1..t."""
    return predictive_scores(params, history, filter_config)[1:]


@dataclass
class ScoredRows:
    scores: np.ndarray
    labels: np.ndarray
    keys: list  # (customer id, label day)


def dpm_rows(
    params: ModelParams,
    dataset: Sequence[CustomerHistory],
    filter_config: FilterConfig,
    min_day: int = 1,
    threads: int = 1,
) -> ScoredRows:
    """Label-day rows ``t >= min_day`` scored with P(y_t = 1 | days before t)."""
    preds = _map(lambda h: predictive_scores(params, h, filter_config), dataset, threads)
    scores, labels, keys = [], [], []
    for h, p in zip(dataset, preds):
        days = np.arange(min_day, h.T + 1)
        scores.append(p[days - 1])
        labels.append(h.y[days - 1])
        keys.extend((h.id, int(t)) for t in days)
    return ScoredRows(np.concatenate(scores), np.concatenate(labels).astype(np.int8), keys)


def glm_rows(fit: GlmFit, dataset: Sequence[CustomerHistory], min_day: int = 1) -> ScoredRows:
    """Baseline scores on label days ``t >= max(min_day, lag + 1)``."""
    design = build_lagged_design(dataset, fit.lag)
    keep = np.array([t >= min_day for _, t in design.keys], dtype=bool)
    scores = predict_design(fit, design)[keep]
    keys = [k for k, ok in zip(design.keys, keep) if ok]
    return ScoredRows(scores, design.y[keep].astype(np.int8), keys)


@dataclass
class RocCurve:
    fpr: np.ndarray
    tpr: np.ndarray
    thresholds: np.ndarray  # thresholds[i] produced point i+1; point 0 is (0, 0)
    auc: float


def roc_curve(scores, labels) -> RocCurve:
    """ROC points over the distinct score values, highest first, and the trapezoidal AUC.

    Equal scores form a single step, so the area counts tied
    positive/negative pairs as one half.
    """
    scores = np.asarray(scores, dtype=float)
    labels = np.asarray(labels)
    if scores.shape != labels.shape or scores.ndim != 1:
        raise ContractError("scores and labels must be vectors of equal length")
    if not np.all(np.isin(labels, (0, 1))):
        raise ContractError("labels must be binary")
    if np.any(np.isnan(scores)):
        raise ContractError("scores contain NaN")
    n_pos = int(labels.sum())
    n_neg = labels.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise ContractError("ROC needs both label classes")
    order = np.argsort(-scores, kind="stable")
    s = scores[order]
    yy = labels[order].astype(np.int64)
    # last index of every run of equal scores
    ends = np.flatnonzero(np.r_[s[1:] != s[:-1], True])
    tp = np.r_[0, np.cumsum(yy)[ends]]
    fp = np.r_[0, np.cumsum(1 - yy)[ends]]
    # twice the area in integer units, so the result is exact
    twice_area = int(np.sum((fp[1:] - fp[:-1]) * (tp[1:] + tp[:-1])))
    return RocCurve(fp / n_neg, tp / n_pos, s[ends], twice_area / (2 * n_pos * n_neg))


def auc(scores, labels) -> float:
    return roc_curve(scores, labels).auc


def align_rows(rows: Mapping[str, ScoredRows]) -> dict:
    """Restrict every model to the keys all of them score, in a common order."""
    common = None
    for r in rows.values():
        ks = set(r.keys)
        common = ks if common is None else common & ks
    out = {}
    for name, r in rows.items():
        pos = {k: i for i, k in enumerate(r.keys)}
        idx = np.array([pos[k] for k in sorted(common, key=_key_order)], dtype=np.int64)
        out[name] = ScoredRows(r.scores[idx], r.labels[idx], [r.keys[i] for i in idx])
    return out


def _key_order(key):
    cid, t = key
    return (str(type(cid)), cid, t)


def compare_auc(
    params: ModelParams,
    fits: Mapping[str, GlmFit],
    dataset: Sequence[CustomerHistory],
    filter_config: FilterConfig,
    min_day: Optional[int] = None,
    threads: int = 1,
) -> dict:
    """Pooled AUC of the DPM and each baseline on one shared set of rows."""
    if min_day is None:
        min_day = 1 + max([f.lag for f in fits.values()], default=0)
    rows = {"dpm": dpm_rows(params, dataset, filter_config, min_day, threads)}
    for name, f in fits.items():
        rows[name] = glm_rows(f, dataset, min_day)
    return {name: auc(r.scores, r.labels) for name, r in align_rows(rows).items()}


def last_touch_histogram(dataset: Sequence[CustomerHistory], max_days: int) -> np.ndarray:
    """Counts per channel (rows r.1..r.K, m.1..m.L) of days between the last touch and the purchase.

    Column ``d`` counts purchasers whose most recent touch on that channel came
    ``d`` days before the purchase day (0 = same day).
    """
    if max_days < 0:
        raise ContractError("max_days must be non-negative")
    buyers = [h for h in dataset if h.purchased]
    if not buyers:
        raise ContractError("last-touch histogram needs at least one purchaser")
    J = buyers[0].K + buyers[0].L
    hist = np.zeros((J, max_days + 1), dtype=np.int64)
    for h in buyers:
        touches = np.hstack([h.r, h.m])
        if touches.shape[1] != J:
            raise ContractError(f"customer {h.id} has a different channel count")
        for j in range(J):
            hit = np.flatnonzero(touches[:, j] > 0)
            if hit.size:
                lag = h.T - 1 - int(hit[-1])
                if lag <= max_days:
                    hist[j, lag] += 1
    return hist
