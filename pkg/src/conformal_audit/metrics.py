"""Evaluation metrics and audit report assembly.

Coverage, set size, pairwise disparities, rule-in/rule-out accuracy on a
configurable critical-class set, epistemic-uncertainty measures, and the rank
correlation between set size and those measures.

Disparity normalization follows the averaged-pairwise-difference definition
with a 1/|A| prefactor over the unordered group pairs; the mean-over-pairs
variant (divide by C(|A|,2)) is available behind ``normalize_pairs``.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from itertools import combinations
from typing import Mapping, Sequence

import numpy as np

from .calibration import CalibratedPredictor
from .data import ScoreRecord, ScoreTable, mean_probs
from .errors import AuditError
from .prediction import PredictionSet, predict_table


def marginal_coverage(sets: Sequence[PredictionSet], labels: Sequence[int]) -> float:
    """Fraction of examples whose true class is in the prediction set."""
    if len(sets) != len(labels):
        raise AuditError(f"{len(sets)} sets vs {len(labels)} labels")
    if not sets:
        raise AuditError("cannot compute coverage of zero examples")
    hits = sum(1 for s, y in zip(sets, labels) if y in s.classes)
    return hits / len(sets)


def average_set_size(sets: Sequence[PredictionSet]) -> float:
    if not sets:
        raise AuditError("cannot average zero set sizes")
    return float(np.mean([s.size for s in sets]))


def _pairwise_disparity(values: Mapping[str, float], normalize_pairs: bool) -> float:
    if len(values) < 2:
        raise AuditError(f"disparity needs at least 2 groups, got {len(values)}")
    vals = list(values.values())
    total = sum(abs(a - b) for a, b in combinations(vals, 2))
    if normalize_pairs:
        n_pairs = len(vals) * (len(vals) - 1) // 2
        return total / n_pairs
    return total / len(vals)


def coverage_disparity(group_coverage: Mapping[str, float], *,
                       normalize_pairs: bool = False) -> float:
    """Average pairwise absolute difference in per-group coverage."""
    return _pairwise_disparity(group_coverage, normalize_pairs)


def set_size_disparity(group_sizes: Mapping[str, float], *,
                       normalize_pairs: bool = False) -> float:
    """Average pairwise absolute difference in per-group mean set size."""
    return _pairwise_disparity(group_sizes, normalize_pairs)


def rule_in_accuracy(
    sets: Sequence[PredictionSet],
    labels: Sequence[int],
    groups: Sequence[str],
    critical: frozenset[int] | set[int],
) -> dict[str, float | None]:
    """Per group, over critical-label records only: fraction whose set contains
    the true class. Groups with no critical records map to None, never 0."""
    if not critical:
        raise AuditError("rule-in evaluation needs a non-empty critical-class set")
    return _per_group_rate(
        sets, labels, groups,
        eligible=lambda y: y in critical,
        correct=lambda s, y: y in s.classes,
    )


def rule_out_accuracy(
    sets: Sequence[PredictionSet],
    labels: Sequence[int],
    groups: Sequence[str],
    critical: frozenset[int] | set[int],
) -> dict[str, float | None]:
    """Per group, over non-critical records only: fraction whose set contains
    no critical class at all."""
    if not critical:
        raise AuditError("rule-out evaluation needs a non-empty critical-class set")
    crit = set(critical)
    return _per_group_rate(
        sets, labels, groups,
        eligible=lambda y: y not in crit,
        correct=lambda s, y: not crit.intersection(s.classes),
    )


def _per_group_rate(sets, labels, groups, eligible, correct) -> dict[str, float | None]:
    if not (len(sets) == len(labels) == len(groups)):
        raise AuditError("sets, labels and groups must have equal lengths")
    hits: dict[str, int] = {}
    totals: dict[str, int] = {}
    out: dict[str, float | None] = {}
    for g in dict.fromkeys(groups):
        out[g] = None
        hits[g] = 0
        totals[g] = 0
    for s, y, g in zip(sets, labels, groups):
        if eligible(y):
            totals[g] += 1
            hits[g] += int(correct(s, y))
    for g in out:
        if totals[g] > 0:
            out[g] = hits[g] / totals[g]
    return out


def max_softmax_prob(record: ScoreRecord) -> float:
    """Max class probability of the record's Monte-Carlo mean vector."""
    return float(mean_probs(record).max())


def predictive_entropy(record: ScoreRecord, *, class_averaged: bool = True) -> float:
    """Entropy of the Monte-Carlo mean vector; 0 log 0 counts as 0.

    ``class_averaged`` divides by K (the primary measure reported here);
    the plain summed entropy is a strictly increasing transform of it, so
    rank correlations are unaffected by the choice.
    """
    p = mean_probs(record)
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(p > 0, p * np.log(p), 0.0)
    h = -float(terms.sum())
    return h / len(p) if class_averaged else h


def average_ranks(x: Sequence[float]) -> np.ndarray:
    """1-based ranks with ties receiving the average of their positions."""
    x = np.asarray(x, dtype=float)
    order = np.argsort(x, kind="stable")
    ranks = np.empty(len(x))
    ranks[order] = np.arange(1, len(x) + 1)
    # average the rank over each tied value
    uniq, inverse, counts = np.unique(x, return_inverse=True, return_counts=True)
    sums = np.zeros(len(uniq))
    np.add.at(sums, inverse, ranks)
    return sums[inverse] / counts[inverse]


def rank_degenerate(x: Sequence[float]) -> bool:
    """True when the vector is constant, so ranks carry no information."""
    x = np.asarray(x, dtype=float)
    return bool(np.all(x == x[0]))


def spearman(x: Sequence[float], y: Sequence[float]) -> float:
    """Pearson correlation of the average-rank-transformed vectors.

    Returns 0.0 when either vector is constant; callers that need the
    degeneracy signal check ``rank_degenerate`` (the audit report records it
    as a flag).
    """
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if len(x) != len(y):
        raise AuditError(f"length mismatch: {len(x)} vs {len(y)}")
    if len(x) < 3:
        raise AuditError(f"rank correlation needs at least 3 points, got {len(x)}")
    if rank_degenerate(x) or rank_degenerate(y):
        return 0.0
    rx = average_ranks(x)
    ry = average_ranks(y)
    rx = rx - rx.mean()
    ry = ry - ry.mean()
    return float((rx * ry).sum() / np.sqrt((rx**2).sum() * (ry**2).sum()))


@dataclass
class MethodAudit:
    """All evaluation quantities for one (method, alpha) on one test table."""

    method: str
    alpha: float
    n_test: int
    aggregate_coverage: float
    group_coverage: dict[str, float]
    aggregate_set_size: float
    group_set_size: dict[str, float]
    coverage_disparity: float | None
    set_size_disparity: float | None
    rule_in: dict[str, float | None] | None
    rule_out: dict[str, float | None] | None
    spearman_softmax: float
    spearman_entropy: float
    group_counts: dict[str, int] = field(default_factory=dict)
    flags: list[str] = field(default_factory=list)
    score_params: dict = field(default_factory=dict)
    temperature: float | None = None

    def to_dict(self) -> dict:
        return {
            "method": self.method,
            "alpha": self.alpha,
            "n_test": self.n_test,
            "aggregate_coverage": self.aggregate_coverage,
            "group_coverage": dict(sorted(self.group_coverage.items())),
            "aggregate_set_size": self.aggregate_set_size,
            "group_set_size": dict(sorted(self.group_set_size.items())),
            "coverage_disparity": self.coverage_disparity,
            "set_size_disparity": self.set_size_disparity,
            "rule_in_accuracy": dict(sorted(self.rule_in.items())) if self.rule_in else None,
            "rule_out_accuracy": dict(sorted(self.rule_out.items())) if self.rule_out else None,
            "spearman_softmax": self.spearman_softmax,
            "spearman_entropy": self.spearman_entropy,
            "group_counts": dict(sorted(self.group_counts.items())),
            "flags": list(self.flags),
            "score_params": self.score_params,
            "temperature": self.temperature,
        }


def audit_predictor(
    predictor: CalibratedPredictor,
    table: ScoreTable,
    *,
    normalize_pairs: bool = False,
) -> MethodAudit:
    """Evaluate one predictor on a test table."""
    sets = predict_table(predictor, table)
    labels = table.labels().tolist()
    groups = table.group_tokens()
    flags: list[str] = []

    group_cov: dict[str, float] = {}
    group_sz: dict[str, float] = {}
    counts: dict[str, int] = {}
    for g, idx in table.group_indices().items():
        gsets = [sets[i] for i in idx]
        glabels = [labels[i] for i in idx]
        group_cov[g] = marginal_coverage(gsets, glabels)
        group_sz[g] = average_set_size(gsets)
        counts[g] = int(len(idx))

    if len(table.groups) >= 2:
        cov_disp = coverage_disparity(group_cov, normalize_pairs=normalize_pairs)
        sz_disp = set_size_disparity(group_sz, normalize_pairs=normalize_pairs)
    else:
        cov_disp = None
        sz_disp = None
        flags.append("disparities undefined: fewer than 2 groups")

    if table.critical_classes:
        rin = rule_in_accuracy(sets, labels, groups, table.critical_classes)
        rout = rule_out_accuracy(sets, labels, groups, table.critical_classes)
    else:
        rin = None
        rout = None
        flags.append("rule-in/rule-out skipped: no critical classes configured")

    if not table.has_mc():
        flags.append("entropy computed from single probability vectors (no Monte-Carlo samples)")
    sizes = [s.size for s in sets]
    msp = [max_softmax_prob(r) for r in table.records]
    ent = [predictive_entropy(r) for r in table.records]
    if rank_degenerate(sizes):
        flags.append("spearman degenerate: constant set sizes")
    if rank_degenerate(msp):
        flags.append("spearman degenerate: constant max softmax probability")
    if rank_degenerate(ent):
        flags.append("spearman degenerate: constant predictive entropy")

    fallbacks = sum(
        1 for s in sets if predictor.is_group_method and s.group_used is None
    )
    if fallbacks:
        flags.append(
            f"{fallbacks} record(s) from groups unseen at calibration handled by "
            f"policy '{predictor.unseen_group_policy}'"
        )

    return MethodAudit(
        method=predictor.method,
        alpha=predictor.alpha,
        n_test=len(table),
        aggregate_coverage=marginal_coverage(sets, labels),
        group_coverage=group_cov,
        aggregate_set_size=average_set_size(sets),
        group_set_size=group_sz,
        coverage_disparity=cov_disp,
        set_size_disparity=sz_disp,
        rule_in=rin,
        rule_out=rout,
        spearman_softmax=spearman(sizes, msp),
        spearman_entropy=spearman(sizes, ent),
        group_counts=counts,
        flags=flags,
        score_params={
            "kind": predictor.score_method.kind,
            "lam": predictor.score_method.lam,
            "k_reg": predictor.score_method.k_reg,
            "randomized": predictor.randomized,
        },
        temperature=predictor.temperature,
    )


@dataclass
class AuditReport:
    """Per-method audits grouped by miscoverage level, plus the config echo."""

    rows: list[MethodAudit]
    config_echo: dict = field(default_factory=dict)

    def to_json_dict(self, version: str) -> dict:
        alphas = sorted({r.alpha for r in self.rows})
        reports = []
        for a in alphas:
            per_method = {r.method: r.to_dict() for r in self.rows if r.alpha == a}
            reports.append({"alpha": a, "per_method": dict(sorted(per_method.items()))})
        return {
            "format": "conformal-audit/report-v1",
            "version": version,
            "config": self.config_echo,
            "reports": reports,
        }


CSV_COLUMNS = [
    "method", "alpha", "group", "n", "coverage", "set_size",
    "rule_in", "rule_out", "spearman_softmax", "spearman_entropy",
    "coverage_disparity", "set_size_disparity",
]


def audit_csv_rows(rows: Sequence[MethodAudit]) -> list[dict]:
    """Flat rows, one per method x alpha x group plus an 'overall' row."""
    out = []
    for r in sorted(rows, key=lambda r: (r.alpha, r.method)):
        shared = {
            "method": r.method,
            "alpha": r.alpha,
            "spearman_softmax": r.spearman_softmax,
            "spearman_entropy": r.spearman_entropy,
            "coverage_disparity": r.coverage_disparity,
            "set_size_disparity": r.set_size_disparity,
        }
        out.append({
            **shared,
            "group": "overall",
            "n": r.n_test,
            "coverage": r.aggregate_coverage,
            "set_size": r.aggregate_set_size,
            "rule_in": None,
            "rule_out": None,
        })
        for g in sorted(r.group_coverage):
            out.append({
                **shared,
                "group": g,
                "n": r.group_counts.get(g),
                "coverage": r.group_coverage[g],
                "set_size": r.group_set_size[g],
                "rule_in": r.rule_in.get(g) if r.rule_in else None,
                "rule_out": r.rule_out.get(g) if r.rule_out else None,
            })
    return out
