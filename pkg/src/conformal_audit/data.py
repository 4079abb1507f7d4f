"""Score tables: typed records, ingestion, validation, normalization, splitting.

A ScoreTable is an immutable-by-convention collection of per-example classifier
outputs (probability vectors, optional Monte-Carlo sample stacks, optional raw
logits) together with a group attribute per example. All downstream calibration
and auditing operates on these tables; nothing in this package touches images
or models.

File formats:
  CSV    header ``id,group,label,p0,...,p{K-1}`` with optional ``l0..l{K-1}``
         logit columns appended by the writer when logits are present.
  JSONL  one object per line: ``{"id", "group", "label", "probs",
         "mc" (optional T x K), "logits" (optional)}``.

With the logits flag set on the schema, the probability columns/array are
interpreted as raw real-valued scores and stored as logits; probabilities are
then filled in by ``normalize_rows(..., "softmax_from_logits")``.
"""
from __future__ import annotations

import csv
import json
import math
import re
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .errors import (
    ConfigError,
    DataError,
    NumericError,
    ParseError,
    SchemaError,
    SplitError,
    ValidationError,
)

# Rows are accepted if they sum to 1 within this tolerance...
INGEST_SIMPLEX_TOL = 1e-6
# ...and are renormalized so that internally every row sums to 1 within this.
INTERNAL_SIMPLEX_TOL = 1e-9


@dataclass(frozen=True, eq=False)
class ScoreRecord:
    """One example: identifier, group token, true label, classifier scores.

    ``probs`` is None only for freshly parsed logit rows that have not been
    normalized yet. ``mc_samples`` holds one probability vector per
    Monte-Carlo forward pass (T x K). ``logits`` holds the raw pre-softmax
    scores when available.
    """

    id: str
    group: str
    label: int
    probs: np.ndarray | None
    mc_samples: np.ndarray | None = None
    logits: np.ndarray | None = None

    def __eq__(self, other) -> bool:
        if not isinstance(other, ScoreRecord):
            return NotImplemented
        return (
            self.id == other.id
            and self.group == other.group
            and self.label == other.label
            and _arr_eq(self.probs, other.probs)
            and _arr_eq(self.mc_samples, other.mc_samples)
            and _arr_eq(self.logits, other.logits)
        )

    @property
    def k(self) -> int:
        if self.probs is not None:
            return len(self.probs)
        if self.logits is not None:
            return len(self.logits)
        if self.mc_samples is not None:
            return self.mc_samples.shape[1]
        raise DataError(f"record '{self.id}' carries no score vector")


def _arr_eq(a: np.ndarray | None, b: np.ndarray | None) -> bool:
    if a is None or b is None:
        return a is None and b is None
    return np.array_equal(a, b)


@dataclass
class ScoreTable:
    """Validated collection of ScoreRecords with shared class/group vocabularies.

    ``groups`` is exactly the set of group tokens observed, in order of first
    appearance. Instances are treated as immutable after construction and are
    safe for concurrent reads.
    """

    records: list[ScoreRecord]
    k: int
    groups: tuple[str, ...]
    class_names: tuple[str, ...] | None = None
    critical_classes: frozenset[int] = frozenset()
    _cache: dict = field(default_factory=dict, repr=False, compare=False)

    @classmethod
    def from_records(
        cls,
        records: list[ScoreRecord],
        *,
        k: int | None = None,
        class_names=None,
        critical_classes=(),
        validate: bool = True,
    ) -> "ScoreTable":
        if not records:
            raise DataError("cannot build a ScoreTable from zero records")
        ks = {r.k for r in records}
        if len(ks) != 1:
            raise SchemaError(f"inconsistent class counts across rows: {sorted(ks)}")
        k_obs = ks.pop()
        if k is not None and k != k_obs:
            raise SchemaError(f"declared K={k} but rows have K={k_obs}")
        k = k_obs
        groups = tuple(dict.fromkeys(r.group for r in records))
        critical = frozenset(int(c) for c in critical_classes)
        if any(c < 0 or c >= k for c in critical):
            raise ValidationError(f"critical classes {sorted(critical)} outside [0, {k})")
        if class_names is not None:
            class_names = tuple(class_names)
            if len(class_names) != k:
                raise SchemaError(f"{len(class_names)} class names for K={k}")
        table = cls(records=records, k=k, groups=groups,
                    class_names=class_names, critical_classes=critical)
        if validate:
            table.validate()
        return table

    def validate(self) -> None:
        """Check labels in range and every score row on the simplex."""
        bad_ids: list[str] = []
        for r in self.records:
            if not (0 <= r.label < self.k):
                raise ValidationError(f"record '{r.id}' has label {r.label} outside [0, {self.k})")
            for arr in (r.probs, r.mc_samples):
                if arr is None:
                    continue
                rows = arr if arr.ndim == 2 else arr[None, :]
                if not np.all(np.isfinite(rows)):
                    bad_ids.append(r.id)
                    break
                if (rows < -INGEST_SIMPLEX_TOL).any() or (rows > 1 + INGEST_SIMPLEX_TOL).any():
                    bad_ids.append(r.id)
                    break
                if np.abs(rows.sum(axis=1) - 1.0).max() > INGEST_SIMPLEX_TOL:
                    bad_ids.append(r.id)
                    break
        if bad_ids:
            raise ValidationError(
                "probability rows violate the simplex constraint for ids: "
                + ", ".join(bad_ids[:20])
                + ("..." if len(bad_ids) > 20 else "")
            )

    def __len__(self) -> int:
        return len(self.records)

    def has_probs(self) -> bool:
        return all(r.probs is not None for r in self.records)

    def has_logits(self) -> bool:
        return all(r.logits is not None for r in self.records)

    def has_mc(self) -> bool:
        return any(r.mc_samples is not None for r in self.records)

    def probs_matrix(self) -> np.ndarray:
        """(n, K) matrix of the per-record scoring probabilities."""
        if "probs" not in self._cache:
            self._cache["probs"] = np.vstack([scoring_probs(r) for r in self.records])
        return self._cache["probs"]

    def labels(self) -> np.ndarray:
        if "labels" not in self._cache:
            self._cache["labels"] = np.array([r.label for r in self.records], dtype=int)
        return self._cache["labels"]

    def group_tokens(self) -> list[str]:
        return [r.group for r in self.records]

    def group_indices(self) -> dict[str, np.ndarray]:
        """Record positions per group token, preserving record order."""
        if "group_idx" not in self._cache:
            idx: dict[str, list[int]] = {g: [] for g in self.groups}
            for i, r in enumerate(self.records):
                idx[r.group].append(i)
            self._cache["group_idx"] = {g: np.array(v, dtype=int) for g, v in idx.items()}
        return self._cache["group_idx"]

    def subset(self, indices) -> "ScoreTable":
        recs = [self.records[i] for i in indices]
        return ScoreTable.from_records(
            recs, k=self.k, class_names=self.class_names,
            critical_classes=self.critical_classes, validate=False,
        )

    def __eq__(self, other) -> bool:
        if not isinstance(other, ScoreTable):
            return NotImplemented
        return (
            self.k == other.k
            and self.groups == other.groups
            and self.class_names == other.class_names
            and self.critical_classes == other.critical_classes
            and self.records == other.records
        )


@dataclass(frozen=True)
class SplitSpec:
    """Deterministic calibration/test split parameters.

    Splitting permutes record positions with a seeded numpy PCG64 generator
    (one shuffle per group under stratification, in group-vocabulary order),
    so identical seeds give identical partitions.
    """

    calibration_fraction: float = 0.5
    seed: int = 0
    stratify_by_group: bool = True

    def __post_init__(self):
        if not (0.0 < self.calibration_fraction < 1.0):
            raise ValidationError(
                f"calibration_fraction must be in (0,1), got {self.calibration_fraction}"
            )
        if self.seed < 0:
            raise ValidationError("split seed must be a nonnegative integer")


@dataclass(frozen=True)
class TableSchema:
    """Column mapping for CSV ingestion plus the logits reinterpretation flag."""

    id: str = "id"
    group: str = "group"
    label: str = "label"
    prob_prefix: str = "p"
    logit_prefix: str = "l"
    logits: bool = False


def parse_score_table(
    path,
    format: str = "csv",
    schema: TableSchema | None = None,
    *,
    critical_classes=(),
    class_names=None,
) -> ScoreTable:
    """Parse a CSV or JSONL score file into a validated ScoreTable.

    Row order is preserved. With ``schema.logits`` the score columns are kept
    as raw logits and ``probs`` stays unset until normalize_rows is applied.
    """
    path = Path(path)
    if not path.exists():
        raise DataError(f"input file not found: {path}")
    schema = schema or TableSchema()
    if format == "csv":
        records = _parse_csv(path, schema)
    elif format == "jsonl":
        records = _parse_jsonl(path, schema)
    else:
        raise ConfigError(f"unknown format '{format}' (expected csv or jsonl)")
    table = ScoreTable.from_records(
        records, critical_classes=critical_classes, class_names=class_names,
        validate=False,
    )
    if not schema.logits:
        table.validate()
        table = normalize_rows(table, "renormalize")
    return table


def _prob_columns(header: list[str], prefix: str) -> list[str]:
    pat = re.compile(re.escape(prefix) + r"(\d+)$")
    found = {}
    for col in header:
        m = pat.match(col)
        if m:
            found[int(m.group(1))] = col
    if not found:
        return []
    k = max(found) + 1
    if sorted(found) != list(range(k)):
        raise SchemaError(
            f"score columns '{prefix}0..' must be contiguous; found indices {sorted(found)}"
        )
    return [found[i] for i in range(k)]


def _parse_csv(path: Path, schema: TableSchema) -> list[ScoreRecord]:
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None:
            raise ParseError(f"{path}: empty file")
        header = list(reader.fieldnames)
        for col in (schema.id, schema.group, schema.label):
            if col not in header:
                raise SchemaError(f"{path}: missing required column '{col}'")
        pcols = _prob_columns(header, schema.prob_prefix)
        if not pcols:
            raise SchemaError(f"{path}: no '{schema.prob_prefix}0..' score columns found")
        lcols = _prob_columns(header, schema.logit_prefix) if schema.logit_prefix else []
        if lcols and len(lcols) != len(pcols):
            raise SchemaError(f"{path}: {len(lcols)} logit columns for {len(pcols)} score columns")

        records = []
        for rownum, row in enumerate(reader, start=2):  # header is line 1
            try:
                rid = row[schema.id]
                group = row[schema.group]
                label = int(row[schema.label])
                values = np.array([float(row[c]) for c in pcols])
                logits = np.array([float(row[c]) for c in lcols]) if lcols else None
            except (KeyError, TypeError, ValueError) as exc:
                raise ParseError(f"{path}: malformed row at line {rownum}: {exc}") from exc
            if rid is None or group is None:
                raise ParseError(f"{path}: malformed row at line {rownum}: missing fields")
            if schema.logits:
                records.append(ScoreRecord(rid, group, label, probs=None, logits=values))
            else:
                records.append(ScoreRecord(rid, group, label, probs=values, logits=logits))
    if not records:
        raise ParseError(f"{path}: no data rows")
    return records


def _parse_jsonl(path: Path, schema: TableSchema) -> list[ScoreRecord]:
    records = []
    with open(path) as fh:
        for rownum, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
                rid = str(obj["id"])
                group = str(obj["group"])
                label = int(obj["label"])
                values = np.array(obj["probs"], dtype=float)
                mc = np.array(obj["mc"], dtype=float) if obj.get("mc") is not None else None
                logits = (
                    np.array(obj["logits"], dtype=float)
                    if obj.get("logits") is not None
                    else None
                )
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
                raise ParseError(f"{path}: malformed row at line {rownum}: {exc}") from exc
            if values.ndim != 1:
                raise ParseError(f"{path}: row at line {rownum}: probs must be a flat array")
            if mc is not None and (mc.ndim != 2 or mc.shape[1] != len(values)):
                raise ParseError(f"{path}: row at line {rownum}: mc must be T x K")
            if schema.logits:
                records.append(ScoreRecord(rid, group, label, probs=None,
                                           mc_samples=mc, logits=values))
            else:
                records.append(ScoreRecord(rid, group, label, probs=values,
                                           mc_samples=mc, logits=logits))
    if not records:
        raise ParseError(f"{path}: no data rows")
    return records


def write_score_table(table: ScoreTable, path, format: str = "csv") -> None:
    """Serialize in the ingestion schema. Floats use shortest round-trip repr."""
    path = Path(path)
    if format == "csv":
        if table.has_mc():
            raise DataError("Monte-Carlo sample stacks do not fit the CSV schema; use jsonl")
        if not table.has_probs():
            raise DataError("table has unnormalized logit rows; normalize before writing")
        with_logits = table.has_logits()
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            header = ["id", "group", "label"] + [f"p{i}" for i in range(table.k)]
            if with_logits:
                header += [f"l{i}" for i in range(table.k)]
            writer.writerow(header)
            for r in table.records:
                row = [r.id, r.group, r.label] + [repr(float(x)) for x in r.probs]
                if with_logits:
                    row += [repr(float(x)) for x in r.logits]
                writer.writerow(row)
    elif format == "jsonl":
        if not table.has_probs():
            raise DataError("table has unnormalized logit rows; normalize before writing")
        with open(path, "w") as fh:
            for r in table.records:
                obj = {
                    "id": r.id,
                    "group": r.group,
                    "label": int(r.label),
                    "probs": [float(x) for x in r.probs],
                }
                if r.mc_samples is not None:
                    obj["mc"] = [[float(x) for x in row] for row in r.mc_samples]
                if r.logits is not None:
                    obj["logits"] = [float(x) for x in r.logits]
                fh.write(json.dumps(obj) + "\n")
    else:
        raise ConfigError(f"unknown format '{format}'")


def _softmax_rows(z: np.ndarray) -> np.ndarray:
    z = np.atleast_2d(np.asarray(z, dtype=float))
    shifted = z - z.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def normalize_rows(table: ScoreTable, mode: str) -> ScoreTable:
    """Return a new table with every probability row exactly on the simplex.

    ``softmax_from_logits`` exponential-normalizes the raw logit rows;
    ``renormalize`` rescales nonnegative rows by their sum.
    """
    new_records = []
    for r in table.records:
        if mode == "softmax_from_logits":
            if r.logits is None:
                raise DataError(f"record '{r.id}' has no logit row to normalize")
            if not np.all(np.isfinite(r.logits)):
                raise NumericError(f"record '{r.id}' has non-finite logits")
            probs = _softmax_rows(r.logits)[0]
        elif mode == "renormalize":
            if r.probs is None:
                raise DataError(f"record '{r.id}' has no probability row to renormalize")
            if not np.all(np.isfinite(r.probs)):
                raise NumericError(f"record '{r.id}' has non-finite probabilities")
            if (r.probs < 0).any():
                raise ValidationError(f"record '{r.id}' has negative probabilities")
            total = r.probs.sum()
            if total <= 0:
                raise ValidationError(f"record '{r.id}' has zero total probability mass")
            # skip rows already normalized so re-parsing is bit-exact idempotent
            probs = r.probs / total if abs(total - 1.0) > 1e-12 else r.probs
        else:
            raise ConfigError(f"unknown normalization mode '{mode}'")
        mc = r.mc_samples
        if mc is not None:
            sums = mc.sum(axis=1, keepdims=True)
            if not np.all(np.isfinite(mc)):
                raise NumericError(f"record '{r.id}' has non-finite Monte-Carlo rows")
            if (mc < 0).any() or (sums <= 0).any():
                raise ValidationError(f"record '{r.id}' has invalid Monte-Carlo rows")
            off = np.abs(sums - 1.0) > 1e-12
            if off.any():
                mc = np.where(off, mc / sums, mc)
        new_records.append(replace(r, probs=probs, mc_samples=mc))
    return ScoreTable(
        records=new_records, k=table.k, groups=table.groups,
        class_names=table.class_names, critical_classes=table.critical_classes,
    )


def _calibration_count(fraction: float, n: int) -> int:
    # floor(x + 0.5) rather than round(): no banker's rounding surprises
    n_cal = int(math.floor(fraction * n + 0.5))
    return min(max(n_cal, 1), n - 1)


def split_calibration_test(table: ScoreTable, spec: SplitSpec) -> tuple[ScoreTable, ScoreTable]:
    """Disjoint (calibration, test) partition, deterministic in spec.seed."""
    if len(table) == 0:
        raise DataError("cannot split an empty table")
    rng = np.random.default_rng(spec.seed)
    cal_idx: list[int] = []
    if spec.stratify_by_group:
        by_group = table.group_indices()
        for g in table.groups:
            idx = by_group[g]
            if len(idx) < 2:
                raise SplitError(
                    f"group '{g}' has {len(idx)} record(s); stratified splitting needs at least 2"
                )
            perm = rng.permutation(len(idx))
            n_cal = _calibration_count(spec.calibration_fraction, len(idx))
            cal_idx.extend(idx[perm[:n_cal]].tolist())
    else:
        n = len(table)
        if n < 2:
            raise SplitError("need at least 2 records to split")
        perm = rng.permutation(n)
        n_cal = _calibration_count(spec.calibration_fraction, n)
        cal_idx = perm[:n_cal].tolist()
    cal_set = set(cal_idx)
    cal = table.subset(sorted(cal_set))
    test = table.subset([i for i in range(len(table)) if i not in cal_set])
    return cal, test


def mean_probs(record: ScoreRecord) -> np.ndarray:
    """Columnwise mean of the Monte-Carlo stack, else the single probs row."""
    if record.mc_samples is not None:
        return record.mc_samples.mean(axis=0)
    if record.probs is not None:
        return record.probs
    raise DataError(f"record '{record.id}' has neither probs nor Monte-Carlo samples")


def scoring_probs(record: ScoreRecord) -> np.ndarray:
    """Probability vector used for conformity scoring.

    The single model output row when present; the Monte-Carlo mean only as a
    fallback for records ingested without one.
    """
    if record.probs is not None:
        return record.probs
    if record.mc_samples is not None:
        return record.mc_samples.mean(axis=0)
    raise DataError(f"record '{record.id}' has no usable probability vector")
