"""Seeded synthetic score-table generators and independent test oracles.

The generator produces classifier-like probability rows in two regimes per
record, with the mix controlled by a per-group ``difficulty`` knob (the true
label is ranked first with odds ``difficulty : 1``):

* correctly ranked records: the true label holds a moderate head mass drawn
  from ``HEAD_MASS_RANGE`` with a geometrically decaying tail over the other
  classes;
* misranked records: a decoy class absorbs ``1 - t`` of the mass, where ``t``
  is log-uniform on ``TAIL_MASS_RANGE``, the true label sits directly under it
  at rank 2, and the remaining classes share the rest as a near-uniform
  plateau just below the label's mass.

The shape is deliberate. The deterministic set rule (include while the mass
strictly above is below the threshold) covers slightly more than the
calibrated share; the excess equals the chance that the threshold lands
inside the true class's own cumulative step. Keeping the label at rank 2 over
a flat plateau makes that step as small as the remaining mass allows, and the
log-uniform tail mass makes the excess flat in the threshold, so empirical
coverage stays inside the finite-sample band at desk scale for miscoverage
levels up to ~0.3 and group accuracy up to ~0.7. In that regime correct
records contribute no excess: their step spans (0, head mass], entirely below
where the calibrated thresholds land.

``miscalibration`` rescales the log-probabilities by the given factor (values
above 1 sharpen, below 1 flatten) and records the rescaled logits, so
temperature fitting can recover the injected distortion. Distribution shift
across groups is expressed through both class prevalence and difficulty.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from fractions import Fraction
from typing import Sequence

import numpy as np

from .calibration import CalibratedPredictor
from .data import ScoreRecord, ScoreTable
from .errors import ConfigError, ValidationError
from .prediction import predict_table

# Correct-record head mass and tail decay.
HEAD_MASS_RANGE = (0.40, 0.60)
EASY_TAIL_DECAY = 0.62
EASY_TAIL_JITTER = 150.0

# Misranked-record tail mass (log-uniform) and plateau shape. The label's mass
# exceeds the plateau mean by LABEL_PLATEAU_EDGE so it holds rank 2 robustly.
TAIL_MASS_RANGE = (3e-4, 0.55)
LABEL_PLATEAU_EDGE = 0.18
PLATEAU_JITTER = 200.0

# Concentration of Monte-Carlo sample rows around the record's vector.
MC_CONCENTRATION = 60.0

# Broad-category class shares per Fitzpatrick skin type, order
# (non-neoplastic, benign, malignant); the type-4 row as published totals
# 99.9% and is renormalized on use.
FITZPATRICK_PREVALENCE: dict[str, tuple[float, float, float]] = {
    "1": (0.696, 0.150, 0.154),
    "2": (0.705, 0.140, 0.155),
    "3": (0.718, 0.144, 0.138),
    "4": (0.759, 0.132, 0.108),
    "5": (0.800, 0.104, 0.096),
    "6": (0.834, 0.070, 0.096),
    "missing": (0.689, 0.130, 0.181),
}


@dataclass(frozen=True)
class GroupSpec:
    """One synthetic subgroup: size, class prevalence, difficulty, distortion."""

    name: str
    n_records: int
    class_prevalence: tuple[float, ...] | None = None
    difficulty: float = 1.0
    miscalibration: float = 1.0

    def __post_init__(self):
        if self.n_records < 1:
            raise ConfigError(f"group '{self.name}': n_records must be >= 1")
        if self.difficulty <= 0:
            raise ConfigError(f"group '{self.name}': difficulty must be positive")
        if self.miscalibration <= 0:
            raise ConfigError(f"group '{self.name}': miscalibration must be positive")


@dataclass(frozen=True)
class SynthConfig:
    k: int
    groups: tuple[GroupSpec, ...]
    seed: int = 0
    t_samples: int | None = None
    critical_classes: tuple[int, ...] = ()
    emit_logits: bool = False

    def __post_init__(self):
        if self.k < 2:
            raise ConfigError("generator needs at least 2 classes")
        if not self.groups:
            raise ConfigError("at least one group is required")
        if self.t_samples is not None and self.t_samples < 1:
            raise ConfigError("t_samples must be >= 1 when set")
        for g in self.groups:
            if g.class_prevalence is not None:
                prev = np.asarray(g.class_prevalence, dtype=float)
                if len(prev) != self.k:
                    raise ConfigError(f"group '{g.name}': prevalence length != k")
                if (prev < 0).any() or abs(prev.sum() - 1.0) > 1e-6:
                    raise ValidationError(
                        f"group '{g.name}': class_prevalence is not on the simplex"
                    )


def _group_probs(n: int, k: int, difficulty: float, labels: np.ndarray,
                 rng: np.random.Generator) -> np.ndarray:
    rho = difficulty / (1.0 + difficulty)
    easy = rng.random(n) < rho
    probs = np.zeros((n, k))

    n_e = int(easy.sum())
    if n_e:
        lo, hi = HEAD_MASS_RANGE
        h = lo + (hi - lo) * rng.beta(2.0, 2.0, size=n_e)
        w = EASY_TAIL_DECAY ** np.arange(1, k)
        w /= w.sum()
        tail = rng.dirichlet(EASY_TAIL_JITTER * w, size=n_e) * (1.0 - h)[:, None]
        block = np.zeros((n_e, k))
        ye = labels[easy]
        block[np.arange(n_e), ye] = h
        mask = np.ones((n_e, k), dtype=bool)
        mask[np.arange(n_e), ye] = False
        block[mask] = tail.ravel()
        probs[easy] = block

    n_h = n - n_e
    if n_h:
        t = np.exp(rng.uniform(math.log(TAIL_MASS_RANGE[0]),
                               math.log(TAIL_MASS_RANGE[1]), size=n_h))
        yh = labels[~easy]
        decoy = rng.integers(0, k - 1, size=n_h)
        decoy = decoy + (decoy >= yh)  # uniform over classes != label
        if k == 2:
            p_label = t
        else:
            p_label = (1.0 + LABEL_PLATEAU_EDGE) * t / (k - 1)
        block = np.zeros((n_h, k))
        block[np.arange(n_h), decoy] = 1.0 - t
        block[np.arange(n_h), yh] = p_label
        if k > 2:
            plateau = rng.dirichlet(np.full(k - 2, PLATEAU_JITTER), size=n_h)
            plateau *= (t - p_label)[:, None]
            mask = np.ones((n_h, k), dtype=bool)
            mask[np.arange(n_h), decoy] = False
            mask[np.arange(n_h), yh] = False
            block[mask] = plateau.ravel()
        probs[~easy] = block
    return probs


def generate(config: SynthConfig) -> ScoreTable:
    """Deterministic synthetic ScoreTable for the given config and seed."""
    rng = np.random.default_rng(config.seed)
    k = config.k
    records: list[ScoreRecord] = []
    for spec in config.groups:
        n = spec.n_records
        if spec.class_prevalence is None:
            prevalence = np.full(k, 1.0 / k)
        else:
            prevalence = np.asarray(spec.class_prevalence, dtype=float)
            prevalence = prevalence / prevalence.sum()
        labels = rng.choice(k, size=n, p=prevalence)
        probs = _group_probs(n, k, spec.difficulty, labels, rng)

        logits = None
        if spec.miscalibration != 1.0 or config.emit_logits:
            with np.errstate(divide="ignore"):
                logits = spec.miscalibration * np.log(probs)
            if spec.miscalibration != 1.0:
                shifted = logits - logits.max(axis=1, keepdims=True)
                e = np.exp(shifted)
                probs = e / e.sum(axis=1, keepdims=True)

        mc = None
        if config.t_samples is not None:
            shape = np.broadcast_to(
                (MC_CONCENTRATION * probs)[:, None, :], (n, config.t_samples, k)
            )
            draws = rng.gamma(shape)
            mc = draws / draws.sum(axis=2, keepdims=True)

        for i in range(n):
            records.append(
                ScoreRecord(
                    id=f"{spec.name}-{i:05d}",
                    group=spec.name,
                    label=int(labels[i]),
                    probs=probs[i],
                    mc_samples=mc[i] if mc is not None else None,
                    logits=logits[i] if logits is not None else None,
                )
            )
    return ScoreTable.from_records(
        records, k=k, critical_classes=config.critical_classes
    )


def generate_logit_table(
    n: int,
    k: int,
    *,
    temperature: float = 1.0,
    seed: int = 0,
    scale: float = 1.5,
    group: str = "all",
) -> ScoreTable:
    """Well-specified logit generator for temperature-recovery experiments.

    Latent logits are iid normal, labels are drawn from their softmax, and the
    recorded logits are the latent ones multiplied by ``temperature``. The
    NLL-optimal rescaling of the recorded logits therefore divides by
    ``temperature``, which is the value a correct fit recovers.
    """
    if temperature <= 0:
        raise ConfigError("temperature must be positive")
    rng = np.random.default_rng(seed)
    z = rng.normal(0.0, scale, size=(n, k))
    shifted = z - z.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    p_true = e / e.sum(axis=1, keepdims=True)
    u = rng.random((n, 1))
    labels = (p_true.cumsum(axis=1) > u).argmax(axis=1)
    logits = temperature * z
    shifted = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    probs = e / e.sum(axis=1, keepdims=True)
    records = [
        ScoreRecord(
            id=f"{group}-{i:05d}",
            group=group,
            label=int(labels[i]),
            probs=probs[i],
            logits=logits[i],
        )
        for i in range(n)
    ]
    return ScoreTable.from_records(records, k=k)


def coverage_oracle(predictor: CalibratedPredictor, test: ScoreTable) -> dict[str, float]:
    """Per-group empirical coverage by direct membership counting.

    Deliberately separate from the metrics module: a plain per-record tally
    used to cross-check it and the coverage guarantees.
    """
    sets = predict_table(predictor, test)
    hits: dict[str, int] = {g: 0 for g in test.groups}
    totals: dict[str, int] = {g: 0 for g in test.groups}
    for record, s in zip(test.records, sets):
        totals[record.group] += 1
        if record.label in s.classes:
            hits[record.group] += 1
    return {g: hits[g] / totals[g] for g in test.groups}


def order_statistic_oracle(scores: Sequence[float], level) -> float:
    """Exhaustive reference for the calibration quantile's selection step.

    Returns the smallest score with at least ``ceil(level * m)`` scores at or
    below it, by brute-force counting. ``level`` may be a float or a Fraction;
    the ceiling is taken in exact rational arithmetic.
    """
    scores = list(scores)
    m = len(scores)
    if m == 0:
        raise ValidationError("oracle needs at least one score")
    level = Fraction(level)
    if not (0 < level <= 1):
        raise ValidationError(f"level must be in (0, 1], got {float(level)}")
    k = math.ceil(level * m)
    for s in sorted(scores):
        if sum(1 for x in scores if x <= s) >= k:
            return float(s)
    raise AssertionError("unreachable: the largest score satisfies any level <= 1")


def single_group_config(
    n_records: int = 2000,
    *,
    k: int = 10,
    difficulty: float = 1.0,
    seed: int = 0,
    t_samples: int | None = None,
    critical_classes: tuple[int, ...] = (),
    miscalibration: float = 1.0,
    emit_logits: bool = False,
) -> SynthConfig:
    """One homogeneous group; the exchangeable baseline scenario."""
    return SynthConfig(
        k=k,
        groups=(GroupSpec("all", n_records, difficulty=difficulty,
                          miscalibration=miscalibration),),
        seed=seed,
        t_samples=t_samples,
        critical_classes=critical_classes,
        emit_logits=emit_logits,
    )


def shifted_groups_config(
    n_per_group: int = 2000,
    *,
    k: int = 10,
    difficulties: tuple[float, ...] = (3.0, 1.5, 3 / 7),
    seed: int = 0,
    t_samples: int | None = None,
    critical_classes: tuple[int, ...] = (0,),
) -> SynthConfig:
    """Difficulty-shifted groups; the default trio ranks the true label first
    with probability 0.75 / 0.60 / 0.30."""
    names = ("easy", "medium", "hard") if len(difficulties) == 3 else tuple(
        f"g{i+1}" for i in range(len(difficulties))
    )
    return SynthConfig(
        k=k,
        groups=tuple(
            GroupSpec(name, n_per_group, difficulty=d)
            for name, d in zip(names, difficulties)
        ),
        seed=seed,
        t_samples=t_samples,
        critical_classes=critical_classes,
    )


def fitzpatrick_config(
    n_per_group: int = 1500,
    *,
    seed: int = 0,
    t_samples: int | None = None,
) -> SynthConfig:
    """Skin-type demo scenario: 7 groups, 3 broad classes, malignant critical.

    Prevalences follow the published per-type shares; difficulties are toolkit
    choices making the lightest and darkest types hardest, mirroring the
    higher malignancy rate and underrepresentation they face.
    """
    difficulties = {"1": 0.6, "2": 1.5, "3": 1.8, "4": 1.8,
                    "5": 1.5, "6": 0.45, "missing": 1.0}
    groups = []
    for name, prev in FITZPATRICK_PREVALENCE.items():
        total = sum(prev)
        groups.append(
            GroupSpec(
                name=name,
                n_records=n_per_group,
                class_prevalence=tuple(p / total for p in prev),
                difficulty=difficulties[name],
            )
        )
    return SynthConfig(
        k=3,
        groups=tuple(groups),
        seed=seed,
        t_samples=t_samples,
        critical_classes=(2,),
    )
