"""Discrete observational tables and trial summaries.

Observational data is a matrix of dense integer category codes with a declared
cardinality per column. Trial results arrive as per-arm outcome counts plus
optionally published covariate marginals. Both types validate their invariants
at construction and are immutable afterwards; loading and saving round-trip
bit-exactly.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np
from scipy.stats import chi2


class ParseError(ValueError):
    """Unreadable or malformed input file."""


class SchemaError(ValueError):
    """Input disagrees with a declared or inferred schema."""


class ValidationError(ValueError):
    """Structurally readable input violating a semantic invariant."""


MARGINAL_SUM_TOL = 1e-6


@dataclass(frozen=True)
class CategoricalTable:
    """N x |V| matrix of category codes, one cardinality per variable."""

    variable_names: tuple[str, ...]
    cardinalities: tuple[int, ...]
    rows: np.ndarray

    def __post_init__(self):
        names = tuple(self.variable_names)
        cards = tuple(int(c) for c in self.cardinalities)
        rows = np.asarray(self.rows, dtype=np.int64)
        if rows.ndim != 2:
            rows = rows.reshape(-1, len(names))
        object.__setattr__(self, "variable_names", names)
        object.__setattr__(self, "cardinalities", cards)
        object.__setattr__(self, "rows", rows)

        if len(set(names)) != len(names):
            raise ValidationError("variable names must be unique")
        if any(not n or "\x00" in n for n in names):
            raise ValidationError("variable names must be non-empty and printable")
        if len(names) != len(cards) or rows.shape[1] != len(names):
            raise ValidationError("variable_names, cardinalities and row width must agree")
        if any(c < 1 for c in cards):
            raise ValidationError("cardinalities must be positive")
        if rows.size:
            if rows.min() < 0:
                raise SchemaError("negative category code")
            over = rows.max(axis=0) >= np.asarray(cards)
            if over.any():
                j = int(np.argmax(over))
                raise SchemaError(
                    f"column {names[j]!r} holds code {int(rows[:, j].max())}, "
                    f"cardinality is {cards[j]}")
        rows.setflags(write=False)

    @property
    def n(self) -> int:
        return self.rows.shape[0]

    def index(self, var: str) -> int:
        try:
            return self.variable_names.index(var)
        except ValueError:
            raise KeyError(f"unknown variable {var!r}") from None

    def cardinality(self, var: str) -> int:
        return self.cardinalities[self.index(var)]

    def column(self, var: str) -> np.ndarray:
        return self.rows[:, self.index(var)]

    def restrict(self, vars: Iterable[str]) -> "CategoricalTable":
        """Project onto a subset of variables, keeping this table's column order."""
        keep = set(vars)
        unknown = keep - set(self.variable_names)
        if unknown:
            raise KeyError(f"unknown variables: {sorted(unknown)}")
        idx = [i for i, v in enumerate(self.variable_names) if v in keep]
        return CategoricalTable(
            tuple(self.variable_names[i] for i in idx),
            tuple(self.cardinalities[i] for i in idx),
            self.rows[:, idx])


@dataclass(frozen=True)
class Arm:
    """One trial arm: outcome counts under treatment value x."""

    x_value: int
    outcome_counts: tuple[int, ...]
    total: int

    def __post_init__(self):
        counts = tuple(int(c) for c in self.outcome_counts)
        object.__setattr__(self, "outcome_counts", counts)
        object.__setattr__(self, "x_value", int(self.x_value))
        object.__setattr__(self, "total", int(self.total))
        if self.x_value < 0:
            raise ValidationError("arm x value must be a non-negative code")
        if not counts:
            raise ValidationError("arm has no outcome counts")
        if any(c < 0 for c in counts):
            raise ValidationError("outcome counts must be non-negative")
        if sum(counts) != self.total:
            raise ValidationError(
                f"arm x={self.x_value}: counts sum to {sum(counts)}, total is {self.total}")

    @classmethod
    def from_counts(cls, x_value: int, counts: Sequence[int]) -> "Arm":
        return cls(x_value, tuple(int(c) for c in counts), int(sum(counts)))


@dataclass(frozen=True)
class ExperimentSummary:
    """Summary-level trial data: arms, reported covariate marginals, population flag."""

    treatment: str
    outcome: str
    arms: tuple[Arm, ...]
    reported_marginals: Mapping[str, tuple[float, ...]] = field(default_factory=dict)
    population: str = "same"

    def __post_init__(self):
        object.__setattr__(self, "arms", tuple(self.arms))
        object.__setattr__(self, "reported_marginals",
                           {k: tuple(float(p) for p in v)
                            for k, v in dict(self.reported_marginals).items()})
        if self.treatment == self.outcome:
            raise ValidationError("treatment and outcome must differ")
        if self.population not in ("same", "selected"):
            raise ValidationError(f"population must be 'same' or 'selected', got {self.population!r}")
        if not self.arms:
            raise ValidationError("experiment has no arms")
        xs = [a.x_value for a in self.arms]
        if len(set(xs)) != len(xs):
            raise ValidationError("arm x values must be distinct")
        k = len(self.arms[0].outcome_counts)
        if any(len(a.outcome_counts) != k for a in self.arms):
            raise ValidationError("all arms must report the same number of outcome categories")
        for var, vec in self.reported_marginals.items():
            if var in (self.treatment, self.outcome):
                raise ValidationError(f"marginal reported for {var!r}, which is the treatment or outcome")
            if not vec or any(p < 0 for p in vec):
                raise ValidationError(f"marginal for {var!r} must be a non-negative vector")
            if abs(sum(vec) - 1.0) > 1e-9:
                raise ValidationError(f"marginal for {var!r} sums to {sum(vec)}, expected 1")
        if self.population == "selected" and not self.reported_marginals:
            raise ValidationError(
                "population is 'selected' but no covariate marginals are reported; "
                "selection correction is impossible")

    @property
    def n_outcomes(self) -> int:
        return len(self.arms[0].outcome_counts)


# --- file formats


def load_observational(path, schema: Sequence[int] | None = None) -> CategoricalTable:
    """Read a header+integer-codes CSV into a validated table.

    Cardinalities are inferred as max code + 1 per column unless ``schema``
    supplies them explicitly.
    """
    with open(path, encoding="utf-8", newline="") as f:
        reader = csv.reader(f)
        try:
            header = next(reader)
        except StopIteration:
            raise ParseError(f"{path}: empty file") from None
        if not header or all(not h.strip() for h in header):
            raise ParseError(f"{path}: missing header row")
        names = [h.strip() for h in header]

        data = []
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(names):
                raise ParseError(f"{path}: line {lineno}: expected {len(names)} cells, got {len(row)}")
            parsed = []
            for j, cell in enumerate(row):
                try:
                    code = int(cell)
                except ValueError:
                    raise ParseError(
                        f"{path}: line {lineno}, column {names[j]!r}: not an integer: {cell!r}") from None
                if code < 0:
                    raise ParseError(f"{path}: line {lineno}, column {names[j]!r}: negative code {code}")
                parsed.append(code)
            data.append(parsed)

    rows = np.asarray(data, dtype=np.int64).reshape(len(data), len(names))
    if schema is not None:
        cards = tuple(int(c) for c in schema)
        if len(cards) != len(names):
            raise SchemaError(f"{path}: schema declares {len(cards)} variables, file has {len(names)}")
        for j, name in enumerate(names):
            if rows.size and rows[:, j].max() >= cards[j]:
                bad = int(np.argmax(rows[:, j] >= cards[j]))
                raise SchemaError(
                    f"{path}: line {bad + 2}, column {name!r}: code {int(rows[bad, j])} "
                    f"outside declared cardinality {cards[j]}")
    else:
        if not len(rows):
            raise SchemaError(f"{path}: no data rows; cardinalities cannot be inferred without a schema")
        cards = tuple(int(rows[:, j].max()) + 1 for j in range(len(names)))
    return CategoricalTable(tuple(names), cards, rows)


def save_observational(table: CategoricalTable, path) -> None:
    with open(path, "w", encoding="utf-8", newline="") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(table.variable_names)
        writer.writerows(table.rows.tolist())


def load_experiment(path) -> ExperimentSummary:
    """Read a trial-summary JSON file.

    Expected shape::

        {"treatment": "X", "outcome": "Y", "population": "same"|"selected",
         "arms": [{"x": 0, "counts": [30, 70]}, ...],
         "marginals": {"V1": [0.4, 0.6], ...}}

    ``counts[i]`` is the number of units with outcome code i. An optional
    per-arm ``"n"`` must match the count sum. Marginals must sum to 1 within
    1e-6 and are renormalized exactly.
    """
    with open(path, encoding="utf-8") as f:
        try:
            raw = json.load(f)
        except json.JSONDecodeError as e:
            raise ParseError(f"{path}: invalid JSON: {e}") from None
    if not isinstance(raw, dict):
        raise ParseError(f"{path}: top-level value must be an object")

    for key in ("treatment", "outcome", "arms"):
        if key not in raw:
            raise ValidationError(f"{path}: missing required key {key!r}")

    arms = []
    for i, a in enumerate(raw["arms"]):
        if "x" not in a or "counts" not in a:
            raise ValidationError(f"{path}: arm {i}: needs 'x' and 'counts'")
        counts = a["counts"]
        if not all(isinstance(c, int) and not isinstance(c, bool) for c in counts):
            raise ValidationError(f"{path}: arm {i}: counts must be integers")
        arm = Arm.from_counts(a["x"], counts)
        if "n" in a and int(a["n"]) != arm.total:
            raise ValidationError(
                f"{path}: arm {i}: counts sum to {arm.total} but n={a['n']}")
        arms.append(arm)

    marginals = {}
    for var, vec in (raw.get("marginals") or {}).items():
        vec = [float(p) for p in vec]
        s = sum(vec)
        if not math.isfinite(s) or abs(s - 1.0) > MARGINAL_SUM_TOL:
            raise ValidationError(f"{path}: marginal for {var!r} sums to {s}, expected 1")
        if any(p < 0 for p in vec):
            raise ValidationError(f"{path}: marginal for {var!r} has negative entries")
        marginals[var] = tuple(p / s for p in vec)

    try:
        return ExperimentSummary(
            treatment=str(raw["treatment"]),
            outcome=str(raw["outcome"]),
            arms=tuple(arms),
            reported_marginals=marginals,
            population=str(raw.get("population", "same")))
    except ValidationError as e:
        raise ValidationError(f"{path}: {e}") from None


def save_experiment(summary: ExperimentSummary, path) -> None:
    doc = {
        "treatment": summary.treatment,
        "outcome": summary.outcome,
        "population": summary.population,
        "arms": [{"x": a.x_value, "counts": list(a.outcome_counts), "n": a.total}
                 for a in summary.arms],
        "marginals": {v: list(p) for v, p in summary.reported_marginals.items()},
    }
    with open(path, "w", encoding="utf-8") as f:
        json.dump(doc, f, indent=1)
        f.write("\n")


# --- counting and independence testing


def contingency_counts(table: CategoricalTable, vars: Sequence[str]) -> np.ndarray:
    """Count tensor over the joint categories of ``vars``, in the given order.

    The empty variable list yields the 0-d tensor holding N.
    """
    vars = list(vars)
    idx = [table.index(v) for v in vars]
    if len(set(idx)) != len(idx):
        raise ValueError("repeated variable in contingency query")
    cards = [table.cardinalities[i] for i in idx]
    if not idx:
        return np.array(table.n, dtype=np.int64)
    if table.n == 0:
        return np.zeros(cards, dtype=np.int64)
    flat = np.ravel_multi_index([table.rows[:, i] for i in idx], cards)
    counts = np.bincount(flat, minlength=int(np.prod(cards)))
    return counts.reshape(cards)


def g2_independence_test(table: CategoricalTable, a: str, b: str,
                         cond: Sequence[str] = ()) -> float:
    """Conditional-independence p-value via the G² likelihood-ratio statistic.

    Tests a ⊥ b | cond against the chi-squared null with
    (|a|-1)(|b|-1)·∏|c| degrees of freedom. Strata with a zero marginal
    contribute nothing to the statistic.
    """
    cond = list(cond)
    if a == b:
        raise ValueError("a and b must differ")
    if a in cond or b in cond:
        raise ValueError("a and b must not appear in the conditioning set")

    ra, rb = table.cardinality(a), table.cardinality(b)
    counts = contingency_counts(table, [*cond, a, b]).reshape(-1, ra, rb).astype(float)

    n_s = counts.sum(axis=(1, 2), keepdims=True)
    row = counts.sum(axis=2, keepdims=True)
    col = counts.sum(axis=1, keepdims=True)
    with np.errstate(divide="ignore", invalid="ignore"):
        expected = row * col / n_s
        ratio = np.where(counts > 0, counts / expected, 1.0)
        g2 = 2.0 * float(np.sum(np.where(counts > 0, counts * np.log(ratio), 0.0)))

    df = (ra - 1) * (rb - 1) * int(np.prod([table.cardinality(c) for c in cond], dtype=np.int64))
    if df <= 0:
        return 1.0
    return float(chi2.sf(g2, df))
