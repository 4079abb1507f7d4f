"""Conformal quantile estimation (aggregate and per-group) and temperature fitting.

Quantile convention: with m calibration scores and miscoverage alpha, the
threshold is the k-th smallest score where ``k = ceil((1 - alpha) * (m + 1))``,
i.e. the smallest score with at least k calibration scores at or below it.
When k exceeds m the finite-sample guarantee is unachievable and the quantile
degrades safely to +inf (full prediction sets). The ceiling is evaluated in
exact rational arithmetic on the float value of alpha, so the order index
never drifts by one from binary rounding.

Per-group fitting uses each group's own calibration count in the ceiling.
"""
from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path

import numpy as np
from scipy.optimize import minimize_scalar
from scipy.special import logsumexp

from .data import ScoreTable, scoring_probs
from .errors import CalibrationError, ConfigError, DataError, NumericError, ValidationError
from .scoring import ScoreMethod, conformity_scores

GROUP_METHODS = ("gaps", "graps")
AGGREGATE_METHODS = ("naive", "aps", "raps")
ALL_METHODS = AGGREGATE_METHODS + GROUP_METHODS

# log-beta search interval for temperature fitting
LOG_BETA_BOUNDS = (-6.0, 6.0)


def conformal_quantile(scores, alpha: float) -> float:
    """Finite-sample-corrected upper quantile of the calibration scores."""
    scores = np.asarray(scores, dtype=float)
    if scores.size == 0:
        raise CalibrationError("cannot calibrate on an empty score list")
    if not np.all(np.isfinite(scores)):
        raise NumericError("calibration scores contain non-finite values")
    if not (0.0 < alpha < 1.0):
        raise ValidationError(f"alpha must be in (0,1), got {alpha}")
    m = scores.size
    k = math.ceil((1 - Fraction(alpha)) * (m + 1))
    if k > m:
        return math.inf
    return float(np.sort(scores)[k - 1])


def minimum_group_count(alpha: float) -> int:
    """Smallest calibration count for which the quantile is finite."""
    return math.ceil(1 / Fraction(alpha)) - 1


@dataclass
class CalibratedPredictor:
    """Fitted conformal predictor: method tag, miscoverage, quantile(s).

    Exactly one of ``quantile`` / ``group_quantiles`` is set, matching the
    method family. Group predictors also carry an aggregate quantile fitted on
    the pooled scores for the unseen-group fallback policy. The naive method
    stores its fixed cumulative threshold ``1 - alpha`` as the quantile.
    Instances are immutable once fitted and safe to share across threads.
    """

    method: str
    alpha: float
    score_method: ScoreMethod
    quantile: float | None = None
    group_quantiles: dict[str, float] | None = None
    aggregate_quantile: float | None = None
    temperature: float | None = None
    group_temperatures: dict[str, float] | None = None
    calibration_counts: dict[str, int] = field(default_factory=dict)
    n_calibration: int = 0
    warnings: list[str] = field(default_factory=list)
    unseen_group_policy: str = "fallback-aggregate"
    randomized: bool = False
    randomize_seed: int | None = None
    config: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.method not in ALL_METHODS:
            raise ConfigError(f"unknown method '{self.method}'")
        if not (0.0 < self.alpha < 1.0):
            raise ValidationError(f"alpha must be in (0,1), got {self.alpha}")
        if self.unseen_group_policy not in ("fallback-aggregate", "full-set"):
            raise ConfigError(f"unknown unseen-group policy '{self.unseen_group_policy}'")
        is_group = self.method in GROUP_METHODS
        if is_group and (self.group_quantiles is None or self.quantile is not None):
            raise ConfigError(f"method '{self.method}' requires group quantiles only")
        if not is_group and (self.quantile is None or self.group_quantiles is not None):
            raise ConfigError(f"method '{self.method}' requires a single aggregate quantile")
        if self.temperature is not None and self.temperature <= 0:
            raise ValidationError("temperature must be positive")

    @property
    def is_group_method(self) -> bool:
        return self.method in GROUP_METHODS

    def quantile_for(self, group: str) -> tuple[float, str | None]:
        """(threshold, group actually used) honoring the unseen-group policy."""
        if not self.is_group_method:
            return self.quantile, None
        if group in self.group_quantiles:
            return self.group_quantiles[group], group
        if self.unseen_group_policy == "full-set":
            return math.inf, None
        if self.aggregate_quantile is None:
            return math.inf, None
        return self.aggregate_quantile, None

    def temperature_for(self, group: str) -> float | None:
        if self.group_temperatures is not None and group in self.group_temperatures:
            return self.group_temperatures[group]
        return self.temperature

    def to_json_dict(self) -> dict:
        return {
            "format": "conformal-audit/predictor-v1",
            "method": self.method,
            "alpha": self.alpha,
            "score": {
                "kind": self.score_method.kind,
                "lam": self.score_method.lam,
                "k_reg": self.score_method.k_reg,
            },
            "quantile": _enc_inf(self.quantile),
            "group_quantiles": (
                {g: _enc_inf(q) for g, q in sorted(self.group_quantiles.items())}
                if self.group_quantiles is not None
                else None
            ),
            "aggregate_quantile": _enc_inf(self.aggregate_quantile),
            "temperature": self.temperature,
            "group_temperatures": (
                dict(sorted(self.group_temperatures.items()))
                if self.group_temperatures is not None
                else None
            ),
            "calibration_counts": dict(sorted(self.calibration_counts.items())),
            "n_calibration": self.n_calibration,
            "warnings": list(self.warnings),
            "unseen_group_policy": self.unseen_group_policy,
            "randomized": self.randomized,
            "randomize_seed": self.randomize_seed,
            "config": self.config,
        }

    @classmethod
    def from_json_dict(cls, obj: dict) -> "CalibratedPredictor":
        score = obj.get("score", {})
        return cls(
            method=obj["method"],
            alpha=obj["alpha"],
            score_method=ScoreMethod(
                kind=score.get("kind", "aps"),
                lam=score.get("lam", 0.0),
                k_reg=score.get("k_reg", 1),
            ),
            quantile=_dec_inf(obj.get("quantile")),
            group_quantiles=(
                {g: _dec_inf(q) for g, q in obj["group_quantiles"].items()}
                if obj.get("group_quantiles") is not None
                else None
            ),
            aggregate_quantile=_dec_inf(obj.get("aggregate_quantile")),
            temperature=obj.get("temperature"),
            group_temperatures=obj.get("group_temperatures"),
            calibration_counts={g: int(n) for g, n in obj.get("calibration_counts", {}).items()},
            n_calibration=int(obj.get("n_calibration", 0)),
            warnings=list(obj.get("warnings", [])),
            unseen_group_policy=obj.get("unseen_group_policy", "fallback-aggregate"),
            randomized=bool(obj.get("randomized", False)),
            randomize_seed=obj.get("randomize_seed"),
            config=obj.get("config", {}),
        )

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_json_dict(), indent=2, sort_keys=True) + "\n")

    @classmethod
    def load(cls, path) -> "CalibratedPredictor":
        return cls.from_json_dict(json.loads(Path(path).read_text()))


def _enc_inf(x: float | None):
    if x is None:
        return None
    return "inf" if math.isinf(x) else x


def _dec_inf(x) -> float | None:
    if x is None:
        return None
    return math.inf if x == "inf" else float(x)


def randomization_u(seed: int, record_id: str) -> float:
    """Deterministic per-record uniform draw for the randomized score variant.

    Hash-derived from (seed, record id) so the value does not depend on
    record order within a table.
    """
    digest = hashlib.sha256(f"{seed}:{record_id}".encode()).digest()
    return int.from_bytes(digest[:8], "big") / 2**64


def _table_u(table: ScoreTable, randomize: bool, seed: int | None) -> np.ndarray | float:
    if not randomize:
        return 0.0
    seed = 0 if seed is None else seed
    return np.array([randomization_u(seed, r.id) for r in table.records])


def scaled_probs_matrix(
    table: ScoreTable,
    temperature: float | None = None,
    group_temperatures: dict[str, float] | None = None,
) -> np.ndarray:
    """Scoring probabilities with a temperature applied, if any.

    Records with raw logits are rescaled from them; otherwise from log probs,
    which yields the identical result up to the normalization constant.
    """
    if temperature is None and group_temperatures is None:
        return table.probs_matrix()
    rows = []
    for r in table.records:
        beta = temperature
        if group_temperatures is not None and r.group in group_temperatures:
            beta = group_temperatures[r.group]
        p = scoring_probs(r)
        if beta is None:
            rows.append(p)
        else:
            z = r.logits if r.logits is not None else _safe_log(p)
            rows.append(apply_temperature(z, beta))
    return np.vstack(rows)


def effective_probs_matrix(table: ScoreTable, predictor: CalibratedPredictor) -> np.ndarray:
    return scaled_probs_matrix(table, predictor.temperature, predictor.group_temperatures)


def _safe_log(p: np.ndarray) -> np.ndarray:
    with np.errstate(divide="ignore"):
        return np.log(p)


def _pipeline_scores(
    table: ScoreTable,
    score_method: ScoreMethod,
    temperature,
    group_temperatures,
    randomize: bool,
    randomize_seed,
) -> np.ndarray:
    probs = scaled_probs_matrix(table, temperature, group_temperatures)
    u = _table_u(table, randomize, randomize_seed)
    return conformity_scores(probs, table.labels(), score_method, u=u)


def _clamp_k_reg(score_method: ScoreMethod, k: int) -> tuple[ScoreMethod, list[str]]:
    # the rank penalty is identically zero for ranks beyond K, so k_reg = K is
    # the largest meaningful value; clamp rather than reject
    if score_method.kind == "raps" and score_method.k_reg > k:
        clamped = ScoreMethod(kind="raps", lam=score_method.lam, k_reg=k)
        return clamped, [f"k_reg {score_method.k_reg} exceeds K={k}; clamped to {k}"]
    return score_method, []


def fit_aggregate(
    table: ScoreTable,
    alpha: float,
    score_method: ScoreMethod | None = None,
    *,
    temperature: float | None = None,
    group_temperatures: dict[str, float] | None = None,
    randomize: bool = False,
    randomize_seed: int | None = None,
    config: dict | None = None,
) -> CalibratedPredictor:
    """Fit one conformal quantile over all calibration scores (APS or RAPS)."""
    score_method, warnings = _clamp_k_reg(score_method or ScoreMethod.aps(), table.k)
    scores = _pipeline_scores(table, score_method, temperature, group_temperatures,
                              randomize, randomize_seed)
    return CalibratedPredictor(
        method="aps" if score_method.kind == "aps" else "raps",
        alpha=alpha,
        score_method=score_method,
        quantile=conformal_quantile(scores, alpha),
        temperature=temperature,
        group_temperatures=group_temperatures,
        calibration_counts={g: int(len(ix)) for g, ix in table.group_indices().items()},
        n_calibration=len(table),
        warnings=warnings,
        randomized=randomize,
        randomize_seed=randomize_seed,
        config=config or {},
    )


def fit_group(
    table: ScoreTable,
    alpha: float,
    score_method: ScoreMethod | None = None,
    *,
    temperature: float | None = None,
    group_temperatures: dict[str, float] | None = None,
    unseen_group_policy: str = "fallback-aggregate",
    randomize: bool = False,
    randomize_seed: int | None = None,
    config: dict | None = None,
) -> CalibratedPredictor:
    """Fit one conformal quantile per group, each at its own sample size.

    Groups below the minimum count for a finite quantile at this alpha get a
    +inf quantile (full sets, guarantee trivially held) and a recorded
    warning. An aggregate quantile over the pooled scores is fitted alongside
    for the unseen-group fallback policy.
    """
    score_method, warnings = _clamp_k_reg(score_method or ScoreMethod.aps(), table.k)
    scores = _pipeline_scores(table, score_method, temperature, group_temperatures,
                              randomize, randomize_seed)
    by_group = table.group_indices()
    need = minimum_group_count(alpha)
    group_quantiles: dict[str, float] = {}
    for g in table.groups:
        idx = by_group[g]
        q = conformal_quantile(scores[idx], alpha)
        if math.isinf(q):
            warnings.append(
                f"group '{g}' has {len(idx)} calibration records, below the {need} "
                f"needed for a finite quantile at alpha={alpha}; emitting full sets"
            )
        group_quantiles[g] = q
    return CalibratedPredictor(
        method="gaps" if score_method.kind == "aps" else "graps",
        alpha=alpha,
        score_method=score_method,
        group_quantiles=group_quantiles,
        aggregate_quantile=conformal_quantile(scores, alpha),
        temperature=temperature,
        group_temperatures=group_temperatures,
        calibration_counts={g: int(len(by_group[g])) for g in table.groups},
        n_calibration=len(table),
        warnings=warnings,
        unseen_group_policy=unseen_group_policy,
        randomized=randomize,
        randomize_seed=randomize_seed,
        config=config or {},
    )


def naive_predictor(alpha: float, *, config: dict | None = None) -> CalibratedPredictor:
    """Non-conformal baseline: fixed cumulative threshold at 1 - alpha.

    Requires no calibration data; the stored quantile is the threshold the
    construction applies, not a fitted order statistic.
    """
    return CalibratedPredictor(
        method="naive",
        alpha=alpha,
        score_method=ScoreMethod.aps(),
        quantile=1.0 - alpha,
        config=config or {},
    )


@dataclass(frozen=True)
class TemperatureFit:
    """Result of the scalar NLL minimization over log beta."""

    beta: float
    nll: float
    at_boundary: bool


def apply_temperature(values, beta: float) -> np.ndarray:
    """Exponential normalization of ``values / beta``; preserves the argmax.

    Accepts a single vector or a matrix of rows; the input is treated as raw
    (unnormalized) log-scores.
    """
    if beta <= 0:
        raise ValidationError(f"temperature must be positive, got {beta}")
    z = np.asarray(values, dtype=float)
    squeeze = z.ndim == 1
    z = np.atleast_2d(z) / beta
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=1, keepdims=True)
    return out[0] if squeeze else out


def _nll(logits: np.ndarray, labels: np.ndarray, beta: float) -> float:
    zb = logits / beta
    return float(np.mean(logsumexp(zb, axis=1) - zb[np.arange(len(labels)), labels]))


def fit_temperature(
    table: ScoreTable,
    *,
    per_group: bool = False,
    boundary_tol: float = 1e-2,
) -> TemperatureFit | dict[str, TemperatureFit]:
    """Fit the scalar temperature minimizing validation NLL.

    Bounded derivative-free minimization on log beta over LOG_BETA_BOUNDS,
    converged to well under 1e-6 in beta. ``at_boundary`` flags a non-interior
    optimum (e.g. perfectly separable data, where NLL decreases monotonically
    toward a bound).
    """
    if len(table) == 0:
        raise DataError("cannot fit temperature on an empty table")
    if not table.has_logits():
        raise DataError("temperature fitting requires raw logits on every record")
    if per_group:
        out = {}
        by_group = table.group_indices()
        for g in table.groups:
            out[g] = fit_temperature(table.subset(by_group[g]), per_group=False,
                                     boundary_tol=boundary_tol)
        return out
    logits = np.vstack([r.logits for r in table.records])
    labels = table.labels()

    def objective(logb: float) -> float:
        value = _nll(logits, labels, math.exp(logb))
        if not math.isfinite(value):
            raise NumericError(f"non-finite NLL at beta={math.exp(logb):.6g}")
        return value

    lo, hi = LOG_BETA_BOUNDS
    result = minimize_scalar(objective, bounds=(lo, hi), method="bounded",
                             options={"xatol": 1e-10})
    logb = float(result.x)
    fun = float(result.fun)
    # non-interior optimum: the minimizer sits at a bound, or a bound attains
    # the minimum anyway (separable data plateaus at NLL 0 under float underflow)
    at_boundary = (
        min(logb - lo, hi - logb) < boundary_tol
        or min(objective(lo), objective(hi)) <= fun + 1e-12
    )
    return TemperatureFit(beta=math.exp(logb), nll=fun, at_boundary=at_boundary)
