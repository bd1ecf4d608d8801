"""Per-unit treatment-effect proxies.

All proxies are oriented treated-minus-control.  The weighting estimators take
propensities as input; the regression-based ones take a pair of per-arm outcome
models (a boosted-tree T-learner).
"""
from __future__ import annotations

import csv
import enum
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .data import Dataset
from .errors import AlignmentError, ArmError, DomainError, ParseError, ValidationError
from .propensity import PropensityModel
from .trees import BoostedEnsemble, EnsembleParams, fit_gradient_boosting


class Method(enum.Enum):
    IPW = "ipw"
    SIPW = "sipw"
    OR = "or"
    IMPUTE_DIFF = "impute-diff"
    EXTERNAL = "external"


@dataclass(frozen=True, eq=False)
class PseudoOutcomes:
    tau_star: np.ndarray
    method: Method
    propensity_used: PropensityModel | None = None

    def __post_init__(self):
        t = np.array(self.tau_star, dtype=float)
        if t.ndim != 1:
            raise ValidationError("pseudo-outcomes must be one-dimensional")
        if not np.all(np.isfinite(t)):
            raise ValidationError("pseudo-outcomes contain non-finite values")
        t.setflags(write=False)
        object.__setattr__(self, "tau_star", t)

    def __len__(self):
        return self.tau_star.shape[0]

    def subset(self, rows) -> "PseudoOutcomes":
        return PseudoOutcomes(self.tau_star[np.asarray(rows, dtype=np.intp)], self.method,
                              self.propensity_used)


def _check_propensity(d: Dataset, e_hat) -> np.ndarray:
    e = np.asarray(e_hat, dtype=float)
    if e.shape != (d.n,):
        raise AlignmentError(f"{e.size} propensities for {d.n} units")
    if np.any(~(e > 0.0) | ~(e < 1.0)):
        raise DomainError("propensities must lie strictly inside (0, 1)")
    return e


def ipw_pseudo(d: Dataset, e_hat, propensity: PropensityModel | None = None) -> PseudoOutcomes:
    """``(z/e - (1-z)/(1-e)) * y``."""
    e = _check_propensity(d, e_hat)
    z, y = d.z, d.y
    return PseudoOutcomes((z / e - (1.0 - z) / (1.0 - e)) * y, Method.IPW, propensity)


def sipw_pseudo(d: Dataset, e_hat, propensity: PropensityModel | None = None) -> PseudoOutcomes:
    """Stabilised IPW: each arm's weights are normalised to average one.

    The sample mean of the result is the Hajek estimate of the ATE.
    """
    e = _check_propensity(d, e_hat)
    d.require_both_arms()
    z, y = d.z, d.y
    w1 = z / e
    w0 = (1.0 - z) / (1.0 - e)
    tau = (w1 / w1.mean() - w0 / w0.mean()) * y
    return PseudoOutcomes(tau, Method.SIPW, propensity)


@dataclass(frozen=True, eq=False)
class OutcomeModel:
    """Per-arm regressions ``m0`` (controls only) and ``m1`` (treated only)."""

    m0: BoostedEnsemble
    m1: BoostedEnsemble

    def predict(self, x) -> tuple[np.ndarray, np.ndarray]:
        return self.m0.predict(x), self.m1.predict(x)


def fit_outcome_models(d: Dataset, gb_params: EnsembleParams = EnsembleParams()) -> OutcomeModel:
    n1 = int(d.z.sum())
    n0 = d.n - n1
    if min(n0, n1) < gb_params.min_leaf:
        raise ArmError(f"each arm needs at least min_leaf={gb_params.min_leaf} units "
                       f"(have {n1} treated, {n0} control)")
    treated = d.z == 1
    p0 = EnsembleParams(**{**gb_params.to_json(), "seed": gb_params.seed * 2})
    p1 = EnsembleParams(**{**gb_params.to_json(), "seed": gb_params.seed * 2 + 1})
    return OutcomeModel(fit_gradient_boosting(d.x[~treated], d.y[~treated], p0),
                        fit_gradient_boosting(d.x[treated], d.y[treated], p1))


def or_pseudo(d: Dataset, om: OutcomeModel) -> PseudoOutcomes:
    """Observed outcome minus the imputed counterfactual, signed by arm."""
    m0, m1 = om.predict(d.x)
    z = d.z
    counterfactual = np.where(z == 1, m0, m1)
    return PseudoOutcomes((2.0 * z - 1.0) * (d.y - counterfactual), Method.OR)


def impute_diff_pseudo(d: Dataset, om: OutcomeModel) -> PseudoOutcomes:
    m0, m1 = om.predict(d.x)
    return PseudoOutcomes(m1 - m0, Method.IMPUTE_DIFF)


def read_column(path) -> np.ndarray:
    path = Path(path)
    with path.open(newline="", encoding="utf-8") as fh:
        rows = [r for r in csv.reader(fh) if r and any(c.strip() for c in r)]
    if not rows:
        raise ParseError(f"{path}: empty file")
    body = rows[1:]
    out = []
    for lineno, r in enumerate(body, start=2):
        if len(r) != 1:
            raise ParseError(f"{path}: row {lineno} has {len(r)} fields, expected 1")
        try:
            out.append(float(r[0]))
        except ValueError:
            raise ParseError(f"{path}: row {lineno}: non-numeric value {r[0]!r}") from None
    return np.array(out, dtype=float)


def load_external_pseudo(path, d: Dataset | int) -> PseudoOutcomes:
    """Read externally computed CATE estimates (one headered column, in row order)."""
    values = read_column(path)
    n = d.n if isinstance(d, Dataset) else int(d)
    if values.size != n:
        raise AlignmentError(f"{path}: {values.size} values for {n} units")
    return PseudoOutcomes(values, Method.EXTERNAL)


def write_column(values, path, header: str = "tau") -> None:
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow([header])
        for v in values:
            w.writerow([repr(float(v))])
