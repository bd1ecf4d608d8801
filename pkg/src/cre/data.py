"""Observations, decision rules and rule design matrices.

A decision rule is a conjunction of threshold half-intervals on covariates,
``x_k <= t`` (LE, inclusive) or ``x_k > t`` (GT, exclusive).  Binary covariates
coded 0/1 are handled with a threshold of 0.5.
"""
from __future__ import annotations

import csv
import enum
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from ._random import generator
from .errors import (
    ArmError,
    DomainError,
    ParseError,
    SchemaError,
    SelectionInputError,
    ValidationError,
)


def _frozen(a, dtype) -> np.ndarray:
    a = np.array(a, dtype=dtype, copy=True)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class Dataset:
    """Outcome ``y``, binary treatment ``z`` and an ``N x K`` covariate matrix ``x``."""

    y: np.ndarray
    z: np.ndarray
    x: np.ndarray
    column_names: tuple[str, ...]

    def __post_init__(self):
        y = _frozen(self.y, float)
        z = _frozen(self.z, float)
        x = _frozen(self.x, float)
        if x.ndim == 1:
            x = _frozen(x.reshape(-1, 1), float)
        if y.ndim != 1 or z.shape != y.shape or x.ndim != 2 or x.shape[0] != y.shape[0]:
            raise ValidationError(
                f"inconsistent shapes: y {y.shape}, z {z.shape}, x {x.shape}")
        names = tuple(str(c) for c in self.column_names)
        if len(names) != x.shape[1]:
            raise ValidationError(f"{len(names)} column names for {x.shape[1]} covariates")
        if not (np.all(np.isfinite(y)) and np.all(np.isfinite(x)) and np.all(np.isfinite(z))):
            raise ValidationError("dataset contains missing or non-finite values")
        if not np.all((z == 0) | (z == 1)):
            bad = int(np.flatnonzero((z != 0) & (z != 1))[0])
            raise ValidationError(f"treatment must be 0/1; row {bad} has {z[bad]!r}")
        object.__setattr__(self, "y", y)
        object.__setattr__(self, "z", z)
        object.__setattr__(self, "x", x)
        object.__setattr__(self, "column_names", names)

    @property
    def n(self) -> int:
        return self.y.shape[0]

    @property
    def k(self) -> int:
        return self.x.shape[1]

    def subset(self, rows) -> "Dataset":
        rows = np.asarray(rows, dtype=np.intp)
        return Dataset(self.y[rows], self.z[rows], self.x[rows], self.column_names)

    def require_both_arms(self, min_size: int = 1) -> None:
        n1 = int(self.z.sum())
        n0 = self.n - n1
        if n1 < min_size or n0 < min_size:
            raise ArmError(f"need at least {min_size} treated and control units; "
                           f"have {n1} treated, {n0} control")

    def column_index(self, name: str) -> int:
        try:
            return self.column_names.index(name)
        except ValueError:
            raise SchemaError(f"unknown covariate {name!r}") from None

    def __eq__(self, other):
        if not isinstance(other, Dataset):
            return NotImplemented
        return (self.column_names == other.column_names
                and np.array_equal(self.y, other.y)
                and np.array_equal(self.z, other.z)
                and np.array_equal(self.x, other.x))

    __hash__ = None


def load_dataset(path, outcome_col: str, treatment_col: str) -> Dataset:
    """Read a comma-delimited, header-bearing UTF-8 table.

    Every column other than the outcome and treatment becomes a covariate, in
    file order.
    """
    path = Path(path)
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise SchemaError(f"{path}: empty file") from None
        for col in (outcome_col, treatment_col):
            if col not in header:
                raise SchemaError(f"{path}: missing column {col!r}")
        if len(set(header)) != len(header):
            raise SchemaError(f"{path}: duplicate column names")
        rows = []
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != len(header):
                raise ParseError(f"{path}: row {lineno} has {len(row)} fields, expected {len(header)}")
            values = []
            for col, cell in zip(header, row):
                cell = cell.strip()
                try:
                    v = float(cell)
                except ValueError:
                    raise ParseError(
                        f"{path}: row {lineno}, column {col!r}: non-numeric value {cell!r}") from None
                if not math.isfinite(v):
                    raise ParseError(f"{path}: row {lineno}, column {col!r}: missing value {cell!r}")
                values.append(v)
            rows.append(values)
    if not rows:
        raise SchemaError(f"{path}: no data rows")
    table = np.array(rows, dtype=float)
    iy, iz = header.index(outcome_col), header.index(treatment_col)
    cov = [j for j in range(len(header)) if j not in (iy, iz)]
    z = table[:, iz]
    bad = np.flatnonzero((z != 0) & (z != 1))
    if bad.size:
        raise ValidationError(
            f"{path}: row {int(bad[0]) + 2}, column {treatment_col!r}: treatment must be 0 or 1, got {z[bad[0]]!r}")
    return Dataset(table[:, iy], z, table[:, cov], tuple(header[j] for j in cov))


def write_dataset(d: Dataset, path, outcome_col: str = "y", treatment_col: str = "z") -> None:
    """Write ``d`` as CSV; floats use ``repr`` so a reload is bit-identical."""
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow([outcome_col, treatment_col, *d.column_names])
        for i in range(d.n):
            w.writerow([repr(float(d.y[i])), repr(int(d.z[i])), *(repr(float(v)) for v in d.x[i])])


# ---------------------------------------------------------------------------
# sample splitting

@dataclass(frozen=True)
class SplitIndices:
    discovery: tuple[int, ...]
    inference: tuple[int, ...]
    ratio: float
    seed: int

    def to_json(self) -> dict:
        return {"ratio": self.ratio, "seed": self.seed,
                "discovery": list(self.discovery), "inference": list(self.inference)}

    @classmethod
    def from_json(cls, obj: dict) -> "SplitIndices":
        return cls(tuple(int(i) for i in obj["discovery"]), tuple(int(i) for i in obj["inference"]),
                   float(obj["ratio"]), int(obj["seed"]))


def split_sample(d: Dataset, ratio: float = 0.25, seed: int = 0) -> SplitIndices:
    """Random discovery/inference partition; ``ratio`` is the discovery share."""
    if not (0.0 < ratio < 1.0):
        raise DomainError(f"split ratio must lie in (0, 1), got {ratio}")
    n = d.n if isinstance(d, Dataset) else int(d)
    if n < 2:
        raise DomainError("need at least two observations to split")
    n_disc = min(max(int(math.floor(ratio * n + 0.5)), 1), n - 1)
    perm = generator(seed, "split").permutation(n)
    return SplitIndices(tuple(sorted(int(i) for i in perm[:n_disc])),
                        tuple(sorted(int(i) for i in perm[n_disc:])), float(ratio), int(seed))


# ---------------------------------------------------------------------------
# rules

class Direction(enum.Enum):
    LE = "<="
    GT = ">"


_DIR_ORDER = {Direction.LE: 0, Direction.GT: 1}


@dataclass(frozen=True)
class Condition:
    covariate_index: int
    direction: Direction
    threshold: float

    def sort_key(self):
        return (self.covariate_index, _DIR_ORDER[self.direction], self.threshold)

    def holds(self, x: np.ndarray) -> np.ndarray:
        v = x[..., self.covariate_index]
        return v <= self.threshold if self.direction is Direction.LE else v > self.threshold

    def describe(self, names: Sequence[str] | None = None) -> str:
        col = names[self.covariate_index] if names else f"X{self.covariate_index + 1}"
        return f"{col} {self.direction.value} {self.threshold:.6g}"


def canonicalize(conditions: Iterable[Condition]) -> tuple[Condition, ...]:
    """Merge redundant conditions and sort them.

    Raises DomainError for an empty conjunction or one that no point satisfies.
    """
    best: dict[tuple[int, Direction], float] = {}
    for c in conditions:
        key = (int(c.covariate_index), c.direction)
        t = float(c.threshold)
        if key not in best:
            best[key] = t
        elif c.direction is Direction.LE:
            best[key] = min(best[key], t)
        else:
            best[key] = max(best[key], t)
    if not best:
        raise DomainError("a rule needs at least one condition")
    for (idx, direction), t in best.items():
        if direction is Direction.LE and (idx, Direction.GT) in best and best[(idx, Direction.GT)] >= t:
            raise DomainError(f"vacuous rule: covariate {idx} cannot be <= {t} and > {best[(idx, Direction.GT)]}")
    out = [Condition(idx, direction, t) for (idx, direction), t in best.items()]
    return tuple(sorted(out, key=Condition.sort_key))


@dataclass(frozen=True)
class Rule:
    """Canonical conjunction of conditions; equality ignores the label."""

    conditions: tuple[Condition, ...]
    column_names: tuple[str, ...] | None = field(default=None, compare=False, repr=False)

    def __post_init__(self):
        object.__setattr__(self, "conditions", canonicalize(self.conditions))
        if self.column_names is not None:
            object.__setattr__(self, "column_names", tuple(self.column_names))

    @property
    def label(self) -> str:
        return " & ".join(c.describe(self.column_names) for c in self.conditions)

    def __len__(self) -> int:
        return len(self.conditions)

    def __str__(self) -> str:
        return self.label

    def evaluate(self, x: np.ndarray) -> np.ndarray:
        """Vectorised evaluation on a row or a matrix of rows; returns 0/1 ints."""
        x = np.asarray(x, dtype=float)
        k = x.shape[-1]
        for c in self.conditions:
            if not 0 <= c.covariate_index < k:
                raise DomainError(f"condition on covariate {c.covariate_index} but rows have {k} values")
        mask = np.ones(x.shape[:-1], dtype=bool)
        for c in self.conditions:
            mask &= c.holds(x)
        return mask.astype(np.int8)

    def to_json(self, names: Sequence[str] | None = None) -> dict:
        names = names if names is not None else self.column_names
        if names is None:
            names = [f"X{i + 1}" for i in range(max(c.covariate_index for c in self.conditions) + 1)]
        return {
            "conditions": [{"col": names[c.covariate_index], "op": c.direction.value, "value": c.threshold}
                           for c in self.conditions],
            "label": " & ".join(c.describe(names) for c in self.conditions),
        }

    @classmethod
    def from_json(cls, obj: dict, names: Sequence[str]) -> "Rule":
        names = tuple(names)
        conds = []
        for c in obj["conditions"]:
            if c["col"] not in names:
                raise SchemaError(f"rule refers to unknown covariate {c['col']!r}")
            conds.append(Condition(names.index(c["col"]), Direction(c["op"]), float(c["value"])))
        return cls(tuple(conds), names)


def evaluate_rule(r: Rule, x) -> int:
    """1 if the covariate row satisfies every condition of ``r``, else 0."""
    x = np.asarray(x, dtype=float)
    if x.ndim != 1:
        raise DomainError("evaluate_rule expects a single covariate row")
    return int(r.evaluate(x))


# ---------------------------------------------------------------------------
# rule matrix

@dataclass(frozen=True, eq=False)
class RuleMatrix:
    """Binary ``N x M`` matrix of rule evaluations.

    ``dropped`` lists ``(rule, reason)`` for rules removed as constant or as a
    duplicate of an earlier column.
    """

    rules: tuple[Rule, ...]
    values: np.ndarray
    includes_intercept: bool = False
    dropped: tuple[tuple[Rule, str], ...] = ()

    @property
    def n(self) -> int:
        return self.values.shape[0]

    @property
    def m(self) -> int:
        return len(self.rules)

    @property
    def labels(self) -> list[str]:
        return [r.label for r in self.rules]

    def design(self) -> np.ndarray:
        """Float design matrix with a leading intercept column."""
        return np.column_stack([np.ones(self.n), self.values.astype(float)])

    def with_intercept(self) -> "RuleMatrix":
        return RuleMatrix(self.rules, self.values, True, self.dropped)


def evaluate_rules(rules: Sequence[Rule], x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    out = np.empty((x.shape[0], len(rules)), dtype=np.int8)
    for j, r in enumerate(rules):
        out[:, j] = r.evaluate(x)
    return out


def build_rule_matrix(rules: Sequence[Rule], d: Dataset, allow_empty: bool = False) -> RuleMatrix:
    """Evaluate ``rules`` on ``d``, dropping constant and duplicate columns.

    Column order of the survivors is preserved; the first of a set of
    duplicates is the one kept.
    """
    values = evaluate_rules(rules, d.x)
    keep, dropped = [], []
    seen: dict[bytes, int] = {}
    for j, r in enumerate(rules):
        col = values[:, j]
        s = int(col.sum())
        if s == 0 or s == d.n:
            dropped.append((r, "constant"))
            continue
        key = np.packbits(col.astype(bool)).tobytes()
        if key in seen:
            dropped.append((r, f"duplicate of {rules[seen[key]].label}"))
            continue
        seen[key] = j
        keep.append(j)
    if not keep and not allow_empty:
        raise SelectionInputError("no informative rules survive on this sample "
                                  f"({len(dropped)} dropped as constant or duplicate)")
    kept_values = values[:, keep] if keep else np.zeros((d.n, 0), dtype=np.int8)
    kept_values.setflags(write=False)
    return RuleMatrix(tuple(rules[j] for j in keep), kept_values, False, tuple(dropped))


def rules_to_json(rules: Sequence[Rule], names: Sequence[str]) -> list[dict]:
    return [r.to_json(names) for r in rules]


def rules_from_json(objs: Iterable[dict], names: Sequence[str]) -> list[Rule]:
    return [Rule.from_json(o, names) for o in objs]


def dumps(obj) -> str:
    """Canonical JSON text used for every report file."""
    return json.dumps(obj, indent=2, sort_keys=True, allow_nan=False) + "\n"
