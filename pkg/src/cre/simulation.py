"""Synthetic data-generating processes and Monte Carlo experiment drivers.

Ten binary covariates are drawn by dichotomising an equicorrelated Gaussian at
zero.  Treatment follows ``expit(-1 + x1 - x2 + x3)`` and ``Y(0)`` has mean
``x1 + 0.5 x2 + x3`` plus unit Gaussian noise (with ``exp(x1 - x2 x3)`` added
under nonlinear confounding).  ``Y(1) = Y(0) + tau(X)`` where ``tau`` is one of
two piecewise-constant maps over three effect modifiers.
"""
from __future__ import annotations

import csv
import enum
import logging
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.special import expit

from ._random import derive_seed, generator, ordered_map
from .data import Condition, Dataset, Direction, Rule, dumps, evaluate_rules, split_sample
from .errors import CREError, DomainError
from .pipeline import DiscoveryConfig, InferenceConfig, discover, estimate, predict_effects

log = logging.getLogger(__name__)

N_COVARIATES = 10
CONFOUNDERS = (0, 1, 2)
MODIFIER_SETS = {"x1-x3": (0, 1, 2), "x8-x10": (7, 8, 9)}


class Confounding(enum.Enum):
    LINEAR = "linear"
    NONLINEAR = "nonlinear"


@dataclass(frozen=True)
class DgpSpec:
    n: int = 1000
    k_effect: float = 1.0
    n_rules: int = 2
    effect_modifiers: tuple[int, int, int] = (0, 1, 2)
    correlation: float = 0.0
    confounding: Confounding = Confounding.LINEAR
    seed: int = 0

    def __post_init__(self):
        if isinstance(self.effect_modifiers, str):
            key = self.effect_modifiers.lower()
            if key not in MODIFIER_SETS:
                raise DomainError(f"effect_modifiers must be one of {sorted(MODIFIER_SETS)}")
            object.__setattr__(self, "effect_modifiers", MODIFIER_SETS[key])
        object.__setattr__(self, "effect_modifiers", tuple(int(j) for j in self.effect_modifiers))
        if not isinstance(self.confounding, Confounding):
            object.__setattr__(self, "confounding", Confounding(str(self.confounding).lower()))
        if self.n < 100:
            raise DomainError(f"n must be at least 100, got {self.n}")
        if self.n_rules not in (2, 4):
            raise DomainError("n_rules must be 2 or 4")
        if self.effect_modifiers not in MODIFIER_SETS.values():
            raise DomainError("effect_modifiers must be (X1, X2, X3) or (X8, X9, X10)")
        if not (0.0 <= self.correlation < 1.0):
            raise DomainError("correlation must lie in [0, 1)")

    def to_json(self) -> dict:
        names = [f"X{j + 1}" for j in self.effect_modifiers]
        return {"n": self.n, "k_effect": self.k_effect, "n_rules": self.n_rules, "effect_modifiers": names,
                "correlation": self.correlation, "confounding": self.confounding.value, "seed": self.seed}


@dataclass(frozen=True, eq=False)
class SimTruth:
    tau_true: np.ndarray
    y0: np.ndarray
    y1: np.ndarray
    true_rules: tuple[Rule, ...]
    true_beta: np.ndarray      # intercept first, aligned with true_rules
    propensity: np.ndarray


def _cell(mods, values) -> Rule:
    conds = [Condition(j, Direction.GT if v else Direction.LE, 0.5) for j, v in zip(mods, values)]
    return Rule(conds)


def true_rules(spec: DgpSpec) -> tuple[tuple[Rule, ...], np.ndarray]:
    """Ground-truth rules and their coefficients (intercept first)."""
    a, b, c = spec.effect_modifiers
    k = spec.k_effect
    if spec.n_rules == 2:
        rules = (_cell((a, b), (0, 0)), _cell((a, b), (1, 1)))
        beta = [0.0, k, -k]
    else:
        rules = (_cell((a, b, c), (0, 0, 1)), _cell((a, b, c), (0, 0, 0)),
                 _cell((a, b, c), (0, 1, 0)), _cell((a, b, c), (0, 1, 1)))
        beta = [0.0, k, 2 * k, -k, -2 * k]
    return rules, np.array(beta)


def latent_correlation(rho: float) -> float:
    """Gaussian correlation whose zero-dichotomised indicators have correlation ``rho``."""
    return float(np.sin(np.pi * rho / 2.0))


def generate(spec: DgpSpec) -> tuple[Dataset, SimTruth]:
    rng = generator(spec.seed, "dgp")
    n = spec.n
    r = latent_correlation(spec.correlation)
    g = np.sqrt(r) * rng.standard_normal((n, 1)) + np.sqrt(1.0 - r) * rng.standard_normal((n, N_COVARIATES))
    x = (g > 0.0).astype(float)
    x1, x2, x3 = x[:, 0], x[:, 1], x[:, 2]
    e = expit(-1.0 + x1 - x2 + x3)
    z = (rng.random(n) < e).astype(float)
    mean0 = x1 + 0.5 * x2 + x3
    if spec.confounding is Confounding.NONLINEAR:
        mean0 = mean0 + np.exp(x1 - x2 * x3)
    y0 = mean0 + rng.standard_normal(n)
    rules, beta = true_rules(spec)
    tau = np.column_stack([np.ones(n), evaluate_rules(rules, x)]) @ beta
    y1 = y0 + tau
    y = y0 * (1.0 - z) + y1 * z
    names = tuple(f"X{j + 1}" for j in range(N_COVARIATES))
    return Dataset(y, z, x, names), SimTruth(tau, y0, y1, rules, beta, e)


def _truth_key(values: np.ndarray) -> bytes:
    return np.packbits(np.asarray(values, dtype=bool)).tobytes()


def count_discovered(selected: Sequence[Rule], truth: Sequence[Rule], x) -> int:
    """Number of true rules whose truth table on ``x`` matches some selected rule."""
    if not selected:
        return 0
    sel = {_truth_key(v) for v in evaluate_rules(list(selected), x).T}
    return sum(_truth_key(v) in sel for v in evaluate_rules(list(truth), x).T)


@dataclass(frozen=True)
class DiscoveryMetrics:
    spec: DgpSpec
    cdr: float
    pi_all: float
    dr: float
    n_ok: int
    n_failed: int
    per_replicate: tuple[tuple[int, int], ...] = field(default=(), repr=False)   # (discovered, selected)

    def to_json(self) -> dict:
        return {"spec": self.spec.to_json(), "cdr": _finite(self.cdr), "pi_all": _finite(self.pi_all),
                "dr": _finite(self.dr),
                "n_ok": self.n_ok, "n_failed": self.n_failed}


def _finite(v: float):
    return float(v) if np.isfinite(v) else None


def replicate_seed(seed: int, r: int) -> int:
    return derive_seed(seed, "replicate", r)


def _discovery_replicate(spec: DgpSpec, config: DiscoveryConfig, seed: int, r: int):
    d, truth = generate(replace(spec, seed=replicate_seed(seed, r)))
    try:
        res = discover(d, config, seed=derive_seed(seed, "discover", r))
    except CREError as exc:
        log.warning("replicate %d failed: %s", r, exc)
        return None
    return count_discovered(res.selected, truth.true_rules, d.x), len(res.selected)


def run_discovery_experiment(grid: Sequence[DgpSpec], replicates: int, config: DiscoveryConfig = DiscoveryConfig(),
                             seed: int = 0, threads: int | None = 1) -> list[DiscoveryMetrics]:
    """Discovery-step metrics per grid point.

    Replicate ``r`` draws its data with the same derived seed at every grid
    point, so grid points are compared on common random numbers.
    """
    if replicates < 1:
        raise DomainError("replicates must be positive")
    out = []
    for spec in grid:
        rows = ordered_map(lambda r: _discovery_replicate(spec, config, seed, r), range(replicates), threads)
        ok = [t for t in rows if t is not None]
        n_true = spec.n_rules
        if ok:
            found = np.array([t[0] for t in ok], dtype=float)
            sel = np.array([t[1] for t in ok], dtype=float)
            m = DiscoveryMetrics(spec, float(found.mean()), float(np.mean(found == n_true)), float(sel.mean()),
                                 len(ok), replicates - len(ok), tuple(ok))
        else:
            m = DiscoveryMetrics(spec, float("nan"), float("nan"), float("nan"), 0, replicates)
        out.append(m)
    return out


@dataclass(frozen=True)
class EstimationMetrics:
    spec: DgpSpec
    ratio: float
    rmse: float
    n_ok: int
    n_failed: int
    per_replicate: tuple[float, ...] = field(default=(), repr=False)

    def to_json(self) -> dict:
        return {"spec": self.spec.to_json(), "ratio": self.ratio, "rmse": _finite(self.rmse),
                "n_ok": self.n_ok, "n_failed": self.n_failed}


def _estimation_replicate(spec, ratios, dconf, iconf, seed, r, oracle_rules):
    d, truth = generate(replace(spec, seed=replicate_seed(seed, r)))
    out = []
    for ratio in ratios:
        try:
            split = split_sample(d, ratio, seed=derive_seed(seed, "split", r))
            if oracle_rules:
                rules = truth.true_rules
            else:
                rules = discover(d.subset(split.discovery), dconf, seed=derive_seed(seed, "discover", r)).selected
            fit = estimate(d.subset(split.inference), rules, iconf, seed=derive_seed(seed, "estimate", r))
            err = predict_effects(fit, d.x) - truth.tau_true
            out.append(float(np.sqrt(np.mean(err * err))))
        except CREError as exc:
            log.warning("replicate %d ratio %g failed: %s", r, ratio, exc)
            out.append(None)
    return out


def run_estimation_experiment(spec: DgpSpec, split_ratios: Sequence[float], replicates: int,
                              discovery: DiscoveryConfig = DiscoveryConfig(),
                              inference: InferenceConfig = InferenceConfig(), seed: int = 0,
                              threads: int | None = 1, oracle_rules: bool = False) -> list[EstimationMetrics]:
    """RMSE of the fitted CATE against the truth over the full sample, per split ratio.

    Every ratio sees the same draws and split seeds (paired comparison).  With
    ``oracle_rules`` discovery is skipped and the true rules are estimated on
    the inference share.
    """
    if replicates < 1:
        raise DomainError("replicates must be positive")
    ratios = [float(v) for v in split_ratios]
    rows = ordered_map(lambda r: _estimation_replicate(spec, ratios, discovery, inference, seed, r, oracle_rules),
                       range(replicates), threads)
    out = []
    for i, ratio in enumerate(ratios):
        vals = [row[i] for row in rows if row[i] is not None]
        rmse = float(np.mean(vals)) if vals else float("nan")
        out.append(EstimationMetrics(spec, ratio, rmse, len(vals), replicates - len(vals), tuple(vals)))
    return out


def write_discovery_metrics(metrics: Sequence[DiscoveryMetrics], out_dir, config: dict) -> dict[str, Path]:
    """Write wide CSV, JSON and a long plot-ready CSV (effect size vs metric)."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = {"csv": out_dir / "discovery_metrics.csv", "json": out_dir / "discovery_metrics.json",
             "long": out_dir / "discovery_metrics_long.csv"}
    cols = ["n", "k_effect", "n_rules", "effect_modifiers", "correlation", "confounding",
            "cdr", "pi_all", "dr", "n_ok", "n_failed"]
    with paths["csv"].open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(cols)
        for m in metrics:
            s = m.spec.to_json()
            w.writerow([s["n"], repr(s["k_effect"]), s["n_rules"], "-".join(s["effect_modifiers"]),
                        repr(s["correlation"]), s["confounding"], repr(m.cdr), repr(m.pi_all), repr(m.dr),
                        m.n_ok, m.n_failed])
    with paths["long"].open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["n", "k_effect", "metric", "value"])
        for m in metrics:
            for name in ("cdr", "pi_all", "dr"):
                w.writerow([m.spec.n, repr(m.spec.k_effect), name, repr(getattr(m, name))])
    paths["json"].write_text(dumps({"config": config, "results": [m.to_json() for m in metrics]}))
    return paths


def write_estimation_metrics(metrics: Sequence[EstimationMetrics], out_dir, config: dict) -> dict[str, Path]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = {"csv": out_dir / "estimation_metrics.csv", "json": out_dir / "estimation_metrics.json",
             "long": out_dir / "estimation_metrics_long.csv"}
    with paths["csv"].open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["n", "k_effect", "ratio", "rmse", "n_ok", "n_failed"])
        for m in metrics:
            w.writerow([m.spec.n, repr(m.spec.k_effect), repr(m.ratio), repr(m.rmse), m.n_ok, m.n_failed])
    with paths["long"].open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["n", "ratio", "metric", "value"])
        for m in metrics:
            w.writerow([m.spec.n, repr(m.ratio), "rmse", repr(m.rmse)])
    paths["json"].write_text(dumps({"config": config, "results": [m.to_json() for m in metrics]}))
    return paths
