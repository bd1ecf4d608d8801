"""The two-step causal rule ensemble procedure.

``discover`` runs on the discovery subsample: unit-level effect estimates,
tree ensembles fitted to them, rule extraction and stability selection.
``estimate`` runs on the inference subsample with the selected rules treated
as fixed.
"""
from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field, replace
from typing import Sequence

import numpy as np

from ._random import derive_seed
from .data import Dataset, Rule, RuleMatrix, build_rule_matrix
from .errors import DomainError
from .inference import InferenceResult, fit_inference, independent_columns
from .propensity import fit_logistic
from .pseudo import (
    Method,
    PseudoOutcomes,
    fit_outcome_models,
    impute_diff_pseudo,
    ipw_pseudo,
    or_pseudo,
    sipw_pseudo,
)
from .selection import SelectionParams, StabilitySelectionResult, stability_select
from .trees import EnsembleParams, extract_rules, fit_gradient_boosting, fit_random_forest

log = logging.getLogger(__name__)

# pseudo-outcomes that carry the large-sample guarantees of the rule-effect estimator
ASYMPTOTIC_METHODS = (Method.IPW, Method.SIPW)


def parse_method(method) -> Method:
    if isinstance(method, Method):
        return method
    key = str(method).lower().replace("_", "-")
    for m in Method:
        if m.value == key:
            return m
    raise DomainError(f"unknown pseudo-outcome method {method!r}; choose from {[m.value for m in Method]}")


def compute_pseudo(d: Dataset, method, ensemble: EnsembleParams = EnsembleParams(), clip: float = 0.01,
                   external: PseudoOutcomes | None = None) -> PseudoOutcomes:
    method = parse_method(method)
    if method in (Method.IPW, Method.SIPW):
        model = fit_logistic(d.x, d.z, clip=clip)
        e = model.predict(d.x)
        return ipw_pseudo(d, e, model) if method is Method.IPW else sipw_pseudo(d, e, model)
    if method in (Method.OR, Method.IMPUTE_DIFF):
        om = fit_outcome_models(d, ensemble)
        return or_pseudo(d, om) if method is Method.OR else impute_diff_pseudo(d, om)
    if external is None:
        raise DomainError("method 'external' needs externally computed estimates")
    if len(external) != d.n:
        raise DomainError(f"{len(external)} external estimates for {d.n} units")
    return external


@dataclass(frozen=True)
class DiscoveryConfig:
    method: str = "impute-diff"
    ensemble: EnsembleParams = field(default_factory=EnsembleParams)
    selection: SelectionParams = field(default_factory=SelectionParams)
    max_rule_length: int = 3
    min_support: float = 0.02
    clip: float = 0.01

    def to_json(self) -> dict:
        out = asdict(self)
        out["method"] = parse_method(self.method).value
        return out


@dataclass(frozen=True, eq=False)
class DiscoveryResult:
    tau_hat: PseudoOutcomes
    candidates: tuple[Rule, ...]
    rule_matrix: RuleMatrix
    stability: StabilitySelectionResult
    selected: tuple[Rule, ...]
    seed: int

    def selection_report(self) -> list[dict]:
        return self.stability.report(self.rule_matrix)


def discover(d: Dataset, config: DiscoveryConfig = DiscoveryConfig(), seed: int = 0, threads: int | None = 1,
             external: PseudoOutcomes | None = None) -> DiscoveryResult:
    outcome_params = replace(config.ensemble, seed=derive_seed(seed, "outcome"))
    tau_hat = compute_pseudo(d, config.method, outcome_params, config.clip, external)
    forest = fit_random_forest(d.x, tau_hat.tau_star, replace(config.ensemble, seed=derive_seed(seed, "forest")),
                               threads=threads)
    boost = fit_gradient_boosting(d.x, tau_hat.tau_star, replace(config.ensemble, seed=derive_seed(seed, "boost")))
    candidates = extract_rules(list(forest) + list(boost.trees), d.x, config.max_rule_length,
                               config.min_support, d.column_names)
    rm = build_rule_matrix(candidates, d)
    ss = stability_select(rm, tau_hat.tau_star, config.selection, seed=derive_seed(seed, "stability"),
                          threads=threads)
    selected = tuple(rm.rules[j] for j in ss.selected)
    return DiscoveryResult(tau_hat, tuple(candidates), rm, ss, selected, seed)


@dataclass(frozen=True)
class InferenceConfig:
    method: str = "sipw"
    hc_flavor: str | None = None      # None: HC0 for N >= 500, HC3 below
    alpha: float = 0.05
    clip: float = 0.01
    wald_include_intercept: bool = False
    # account for the estimated propensity (and weight normalisation) in the
    # IPW/SIPW variance; False gives the plain sandwich
    propensity_adjusted: bool = True
    ensemble: EnsembleParams = field(default_factory=EnsembleParams)

    def to_json(self) -> dict:
        out = asdict(self)
        out["method"] = parse_method(self.method).value
        return out


def usable_rules(rules: Sequence[Rule], d: Dataset) -> tuple[list[Rule], list[tuple[Rule, str]]]:
    """Drop rules that are constant, duplicated or collinear on ``d`` (earlier rules win)."""
    rm = build_rule_matrix(list(rules), d, allow_empty=True)
    dropped = list(rm.dropped)
    keep_cols = independent_columns(rm.design())
    keep = [rm.rules[j - 1] for j in keep_cols if j > 0]
    for j, r in enumerate(rm.rules):
        if j + 1 not in keep_cols:
            dropped.append((r, "collinear with earlier rules"))
    for r, why in dropped:
        log.warning("dropping rule %s on the inference sample: %s", r.label, why)
    return keep, dropped


@dataclass(frozen=True, eq=False)
class EstimationResult:
    inference: InferenceResult
    rules: tuple[Rule, ...]
    dropped: tuple[tuple[Rule, str], ...]
    tau_star: PseudoOutcomes


def estimate(d: Dataset, rules: Sequence[Rule], config: InferenceConfig = InferenceConfig(), seed: int = 0,
             external: PseudoOutcomes | None = None) -> EstimationResult:
    kept, dropped = usable_rules(rules, d)
    rm = build_rule_matrix(kept, d, allow_empty=True)
    method = parse_method(config.method)
    tau = compute_pseudo(d, method, replace(config.ensemble, seed=derive_seed(seed, "inference-outcome")),
                         config.clip, external)
    notes = []
    if method not in ASYMPTOTIC_METHODS:
        notes.append(f"pseudo-outcome method '{method.value}' is not covered by the asymptotic "
                     "normality result; intervals are indicative only")
    for r, why in dropped:
        notes.append(f"dropped {r.label}: {why}")
    adjustment = None
    if config.propensity_adjusted and method in ASYMPTOTIC_METHODS:
        adjustment = {"y": d.y, "z": d.z, "x_propensity": d.x, "e_hat": tau.propensity_used.predict(d.x),
                      "clip": config.clip, "stabilized": method is Method.SIPW}
    res = fit_inference(rm, tau, config.hc_flavor, config.alpha, config.wald_include_intercept, notes, adjustment)
    return EstimationResult(res, tuple(kept), tuple(dropped), tau)


def predict_effects(result: EstimationResult, x) -> np.ndarray:
    """Fitted CATE ``beta_0 + sum_j beta_j r_j(x)`` at covariate rows ``x``."""
    from .data import evaluate_rules

    x = np.asarray(x, dtype=float)
    design = np.column_stack([np.ones(x.shape[0]), evaluate_rules(result.rules, x).astype(float)])
    return design @ result.inference.beta_hat
