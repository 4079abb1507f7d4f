"""Conformity scores: cumulative (APS) and rank-regularized (RAPS).

Classes are ranked by probability descending with ties broken by ascending
class index (a stable argsort on the negated vector), so every score here is
a deterministic function of its inputs. The optional randomization knob ``u``
subtracts ``u * p[label]`` from the cumulative score; ``u = 0`` is the
deterministic default used for calibration.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, ValidationError

RAPS_DEFAULT_LAM = 0.01
RAPS_DEFAULT_KREG = 5


@dataclass(frozen=True)
class ScoreMethod:
    """Score family selector. ``lam`` and ``k_reg`` apply to RAPS only."""

    kind: str = "aps"
    lam: float = 0.0
    k_reg: int = 1

    def __post_init__(self):
        if self.kind not in ("aps", "raps"):
            raise ConfigError(f"unknown score kind '{self.kind}'")
        if self.lam < 0:
            raise ConfigError(f"RAPS lambda must be nonnegative, got {self.lam}")
        if self.k_reg < 1:
            raise ConfigError(f"RAPS k_reg must be at least 1, got {self.k_reg}")

    @classmethod
    def aps(cls) -> "ScoreMethod":
        return cls(kind="aps")

    @classmethod
    def raps(cls, lam: float = RAPS_DEFAULT_LAM, k_reg: int = RAPS_DEFAULT_KREG) -> "ScoreMethod":
        return cls(kind="raps", lam=lam, k_reg=k_reg)


def sort_orders(probs: np.ndarray) -> np.ndarray:
    """Class indices of each row sorted by probability desc, index asc on ties."""
    p = np.atleast_2d(np.asarray(probs, dtype=float))
    return np.argsort(-p, axis=1, kind="stable")


def ranks_of(probs: np.ndarray, labels: np.ndarray) -> np.ndarray:
    """1-based sorted position of each row's label."""
    p = np.atleast_2d(np.asarray(probs, dtype=float))
    labels = np.atleast_1d(np.asarray(labels, dtype=int))
    order = sort_orders(p)
    positions = np.argsort(order, axis=1, kind="stable")
    return positions[np.arange(len(labels)), labels] + 1


def rank_of(probs, label: int) -> int:
    """1-based position of ``label`` under the tie-broken descending sort."""
    _check_label(probs, label)
    return int(ranks_of(probs, [label])[0])


def aps_scores(probs: np.ndarray, labels: np.ndarray, u: np.ndarray | float = 0.0) -> np.ndarray:
    """Cumulative probability mass through each label's rank (inclusive)."""
    p = np.atleast_2d(np.asarray(probs, dtype=float))
    labels = np.atleast_1d(np.asarray(labels, dtype=int))
    order = sort_orders(p)
    sorted_p = np.take_along_axis(p, order, axis=1)
    cum = np.cumsum(sorted_p, axis=1)
    rows = np.arange(len(labels))
    pos = np.argsort(order, axis=1, kind="stable")[rows, labels]
    scores = cum[rows, pos]
    if np.any(u != 0.0):
        scores = scores - np.asarray(u) * p[rows, labels]
    return scores


def aps_score(probs, label: int, u: float = 0.0) -> float:
    """Sum of probabilities over classes ranked at or above ``label``."""
    _check_label(probs, label)
    return float(aps_scores(probs, [label], u=u)[0])


def raps_scores(
    probs: np.ndarray, labels: np.ndarray, method: ScoreMethod, u: np.ndarray | float = 0.0
) -> np.ndarray:
    if method.kind != "raps":
        raise ConfigError("raps_scores requires a ScoreMethod of kind 'raps'")
    base = aps_scores(probs, labels, u=u)
    ranks = ranks_of(probs, labels)
    return base + method.lam * np.maximum(0, ranks - method.k_reg)


def raps_score(probs, label: int, method: ScoreMethod, u: float = 0.0) -> float:
    """APS score plus ``lam * max(0, rank(label) - k_reg)``."""
    _check_label(probs, label)
    return float(raps_scores(probs, [label], method, u=u)[0])


def conformity_scores(
    probs: np.ndarray, labels: np.ndarray, method: ScoreMethod, u: np.ndarray | float = 0.0
) -> np.ndarray:
    if method.kind == "aps":
        return aps_scores(probs, labels, u=u)
    return raps_scores(probs, labels, method, u=u)


def conformity_score(probs, label: int, method: ScoreMethod, u: float = 0.0) -> float:
    return float(conformity_scores(probs, [label], method, u=u)[0])


def _check_label(probs, label: int) -> None:
    k = len(np.asarray(probs))
    if not (0 <= label < k):
        raise ValidationError(f"label {label} outside [0, {k})")
