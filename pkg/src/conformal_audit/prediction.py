"""Prediction-set construction from a fitted predictor.

All constructions produce rank-prefix sets: the included classes are exactly
the top-``size`` classes under the tie-broken descending sort. Inclusion of
the class at rank j tests the cumulative mass of classes ranked strictly
above j (``cum_j - p_j``, optionally with the RAPS rank penalty) strictly
against the threshold; the rank-1 prefix is empty, so sets are never empty.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .calibration import (
    CalibratedPredictor,
    apply_temperature,
    effective_probs_matrix,
    randomization_u,
)
from .data import ScoreRecord, ScoreTable, scoring_probs
from .errors import ValidationError
from .scoring import ScoreMethod, sort_orders

# Tolerance for the naive 1 - alpha threshold: a cumulative sum that is equal
# up to accumulated rounding (e.g. ten 0.1 entries) must count as reaching it.
_NAIVE_EPS = 1e-12


@dataclass(frozen=True)
class PredictionSet:
    """Ranked class indices forming one conformal set."""

    classes: tuple[int, ...]
    size: int
    method: str
    group_used: str | None = None

    def __contains__(self, label: int) -> bool:
        return label in self.classes


def _prefix_sizes(probs: np.ndarray, q, method: ScoreMethod | None = None,
                  u=1.0) -> tuple[np.ndarray, np.ndarray]:
    """(sort orders, set sizes) for rows of ``probs`` against thresholds ``q``.

    Rank j is included iff ``cum_j - u * p_j (+ penalty) < q``; with the
    default ``u = 1`` this is exactly the cumulative mass strictly above j.
    """
    p = np.atleast_2d(np.asarray(probs, dtype=float))
    order = sort_orders(p)
    sorted_p = np.take_along_axis(p, order, axis=1)
    cum = np.cumsum(sorted_p, axis=1)
    test = cum - np.atleast_2d(np.asarray(u)).T * sorted_p
    if method is not None and method.kind == "raps" and method.lam > 0:
        ranks = np.arange(1, p.shape[1] + 1)
        test = test + method.lam * np.maximum(0, ranks - method.k_reg)
    q = np.atleast_1d(np.asarray(q, dtype=float))
    sizes = (test < q[:, None]).sum(axis=1)
    return order, np.maximum(sizes, 1)


def build_set_cumulative(probs, q: float, *, method_tag: str = "aps",
                         group_used: str | None = None, u: float = 1.0) -> PredictionSet:
    """Include the class at rank j iff the mass ranked strictly above j is < q."""
    if not (q > 0 or math.isinf(q)):
        raise ValidationError(f"threshold must be positive or +inf, got {q}")
    order, sizes = _prefix_sizes(probs, [q], u=u)
    size = int(sizes[0])
    return PredictionSet(tuple(int(c) for c in order[0, :size]), size, method_tag, group_used)


def build_set_raps(probs, q: float, method: ScoreMethod, *, method_tag: str = "raps",
                   group_used: str | None = None, u: float = 1.0) -> PredictionSet:
    """Cumulative rule with the rank penalty: include rank j iff the score the
    class would receive as the true label, minus its own probability, is < q."""
    if method.kind != "raps":
        raise ValidationError("build_set_raps requires a ScoreMethod of kind 'raps'")
    if not (q > 0 or math.isinf(q)):
        raise ValidationError(f"threshold must be positive or +inf, got {q}")
    order, sizes = _prefix_sizes(probs, [q], method=method, u=u)
    size = int(sizes[0])
    return PredictionSet(tuple(int(c) for c in order[0, :size]), size, method_tag, group_used)


def build_set_naive(probs, alpha: float, *, group_used: str | None = None) -> PredictionSet:
    """Smallest rank-prefix whose cumulative probability reaches 1 - alpha."""
    if not (0.0 < alpha < 1.0):
        raise ValidationError(f"alpha must be in (0,1), got {alpha}")
    p = np.asarray(probs, dtype=float)
    order = sort_orders(p)[0]
    cum = np.cumsum(p[order])
    size = int(np.argmax(cum >= (1.0 - alpha) - _NAIVE_EPS)) + 1
    return PredictionSet(tuple(int(c) for c in order[:size]), size, "naive", group_used)


def _record_u(predictor: CalibratedPredictor, record_id: str) -> float:
    if not predictor.randomized:
        return 1.0
    return randomization_u(predictor.randomize_seed or 0, record_id)


def predict(predictor: CalibratedPredictor, record: ScoreRecord) -> PredictionSet:
    """Build the prediction set for one record, dispatching on the method.

    Group methods use the record's group quantile; a group unseen at
    calibration falls back per the predictor's policy (aggregate quantile by
    default, full set otherwise), reported as ``group_used = None``.
    """
    beta = predictor.temperature_for(record.group)
    if beta is not None:
        z = record.logits if record.logits is not None else _log(scoring_probs(record))
        probs = apply_temperature(z, beta)
    else:
        probs = scoring_probs(record)

    if predictor.method == "naive":
        return build_set_naive(probs, predictor.alpha)
    q, group_used = predictor.quantile_for(record.group)
    u = _record_u(predictor, record.id)
    if predictor.score_method.kind == "raps":
        return build_set_raps(probs, q, predictor.score_method,
                              method_tag=predictor.method, group_used=group_used, u=u)
    return build_set_cumulative(probs, q, method_tag=predictor.method,
                                group_used=group_used, u=u)


def _log(p: np.ndarray) -> np.ndarray:
    with np.errstate(divide="ignore"):
        return np.log(p)


def predict_table(predictor: CalibratedPredictor, table: ScoreTable) -> list[PredictionSet]:
    """Prediction sets for every record, in record order."""
    probs = effective_probs_matrix(table, predictor)
    n = len(table)
    if predictor.method == "naive":
        return [
            build_set_naive(probs[i], predictor.alpha)
            for i in range(n)
        ]
    q = np.empty(n)
    used: list[str | None] = [None] * n
    for i, r in enumerate(table.records):
        q[i], used[i] = predictor.quantile_for(r.group)
    if predictor.randomized:
        u = np.array([_record_u(predictor, r.id) for r in table.records])
    else:
        u = 1.0
    method = predictor.score_method if predictor.score_method.kind == "raps" else None
    order, sizes = _prefix_sizes(probs, q, method=method, u=u)
    return [
        PredictionSet(
            tuple(int(c) for c in order[i, : sizes[i]]),
            int(sizes[i]),
            predictor.method,
            used[i],
        )
        for i in range(n)
    ]
