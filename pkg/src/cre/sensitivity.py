"""Percentile-bootstrap sensitivity intervals under a marginal sensitivity model.

Under sensitivity parameter ``Lambda >= 1`` the true odds of treatment may
differ from the fitted logistic odds by a factor in ``[1/Lambda, Lambda]``.
For the stabilised-IPW rule coefficients this turns each arm's contribution
into a weighted mean

    sum_i yt_i (1 + q_i a_i) / sum_i (1 + q_i a_i),   q_i in [1/Lambda, Lambda],

with ``a_i`` the fitted odds against the unit's observed arm.  A
linear-fractional function over a box is extremised at a vertex, and with
``yt`` sorted in decreasing order the minimiser puts ``q = 1/Lambda`` on a
prefix and ``q = Lambda`` on the rest (the maximiser the reverse), so scanning
the ``n + 1`` prefixes with cumulative sums solves it in linear time.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import scipy.linalg

from ._random import generator, ordered_map
from .data import Dataset, Rule, evaluate_rules
from .errors import (
    BootstrapError,
    CollinearityError,
    ContractError,
    DataError,
    DomainError,
    NumericalError,
    SizeError,
)
from .propensity import fit_logistic

MIN, MAX = "min", "max"


def _check_inputs(y, a, want):
    y = np.asarray(y, dtype=float)
    a = np.asarray(a, dtype=float)
    if y.ndim != 1 or y.shape != a.shape:
        raise ContractError("y_tilde and a must be one-dimensional and of equal length")
    if y.size == 0:
        raise SizeError("need at least one unit")
    if np.any(~(a > 0.0)):
        raise DomainError("odds weights a must be strictly positive")
    if want not in (MIN, MAX):
        raise DomainError(f"want must be 'min' or 'max', got {want!r}")
    return y, a


def _extremize_grid(y: np.ndarray, a: np.ndarray, lambdas: np.ndarray, want: str) -> np.ndarray:
    """Extremum for every Lambda in ``lambdas``; ``y`` sorted decreasing, no checks."""
    n = y.size
    ya = y * a
    py = np.concatenate([[0.0], np.cumsum(ya)])           # prefix sums over b = 0..n
    pa = np.concatenate([[0.0], np.cumsum(a)])
    sy, tya, ta = y.sum(), py[-1], pa[-1]
    lam = np.asarray(lambdas, dtype=float)[:, None]
    if want == MIN:
        lo, hi = 1.0 / lam, lam      # prefix weight, suffix weight
    else:
        lo, hi = lam, 1.0 / lam
    num = sy + py * lo + (tya - py) * hi
    den = n + pa * lo + (ta - pa) * hi
    vals = num / den
    return vals.min(axis=1) if want == MIN else vals.max(axis=1)


def extremize_fraction(y_tilde, a, lam: float, want: str = MIN) -> float:
    """Min or max of ``sum y(1+qa)/sum(1+qa)`` over ``q in [1/lam, lam]^n``.

    ``y_tilde`` must be sorted in decreasing order, with ``a`` aligned to it.
    """
    y, a = _check_inputs(y_tilde, a, want)
    if lam < 1.0:
        raise DomainError(f"Lambda must be >= 1, got {lam}")
    if np.any(np.diff(y) > 0.0):
        raise ContractError("y_tilde must be sorted in decreasing order")
    return float(_extremize_grid(y, a, np.array([lam]), want)[0])


def vertex_oracle(y_tilde, a, lam: float, want: str = MIN) -> float:
    """Brute-force extremum over all ``2^n`` corners ``{1/lam, lam}^n`` (n <= 20)."""
    y, a = _check_inputs(y_tilde, a, want)
    n = y.size
    if n > 20:
        raise SizeError(f"vertex enumeration limited to n <= 20, got {n}")
    if lam < 1.0:
        raise DomainError(f"Lambda must be >= 1, got {lam}")
    best = np.inf if want == MIN else -np.inf
    total = 1 << n
    chunk = 1 << min(n, 14)
    bits = np.arange(n)
    for start in range(0, total, chunk):
        codes = np.arange(start, min(start + chunk, total))[:, None]
        q = np.where((codes >> bits) & 1, lam, 1.0 / lam)
        w = 1.0 + q * a
        vals = (w @ y) / w.sum(axis=1)
        best = min(best, vals.min()) if want == MIN else max(best, vals.max())
    return float(best)


@dataclass(frozen=True)
class SensitivityConfig:
    lambda_values: tuple[float, ...] = (1.01, 1.02, 1.03, 1.04, 1.05)
    n_bootstrap: int = 1000
    alpha: float = 0.05
    seed: int = 0
    max_redraws: int = 10

    def __post_init__(self):
        lams = tuple(float(v) for v in self.lambda_values)
        if not lams:
            raise DomainError("the Lambda grid is empty")
        if any(v < 1.0 for v in lams):
            raise DomainError("every Lambda must be >= 1")
        if self.n_bootstrap < 1:
            raise DomainError("n_bootstrap must be positive")
        if not (0.0 < self.alpha < 1.0):
            raise DomainError("alpha must lie in (0, 1)")
        object.__setattr__(self, "lambda_values", lams)

    def to_json(self) -> dict:
        return {"lambda_values": list(self.lambda_values), "n_bootstrap": self.n_bootstrap,
                "alpha": self.alpha, "seed": self.seed, "max_redraws": self.max_redraws}


@dataclass(frozen=True, eq=False)
class SensitivityResult:
    """Intervals ``lower[j, l], upper[j, l]`` for coefficient j (intercept first) at ``lambdas[l]``."""

    labels: tuple[str, ...]
    lambdas: np.ndarray
    lower: np.ndarray
    upper: np.ndarray
    point_estimate: np.ndarray
    n_bootstrap: int
    alpha: float
    redraws: int = 0
    boot_lower: np.ndarray | None = field(default=None, repr=False)
    boot_upper: np.ndarray | None = field(default=None, repr=False)

    def sign_loss_lambda(self) -> list[float | None]:
        """Smallest grid Lambda at which each interval covers zero (None if never)."""
        out = []
        for j in range(len(self.labels)):
            hit = np.flatnonzero((self.lower[j] <= 0.0) & (self.upper[j] >= 0.0))
            out.append(float(self.lambdas[hit[0]]) if hit.size else None)
        return out

    def is_nested(self) -> bool:
        order = np.argsort(self.lambdas, kind="stable")
        lo, hi = self.lower[:, order], self.upper[:, order]
        return bool(np.all(np.diff(lo, axis=1) <= 1e-12) and np.all(np.diff(hi, axis=1) >= -1e-12))

    def to_json(self) -> dict:
        loss = self.sign_loss_lambda()
        rules = []
        for j, lab in enumerate(self.labels):
            rules.append({
                "label": lab,
                "point_estimate": float(self.point_estimate[j]),
                "sign_loss_lambda": loss[j],
                "intervals": [{"lambda": float(l), "lower": float(self.lower[j, i]), "upper": float(self.upper[j, i])}
                              for i, l in enumerate(self.lambdas)],
            })
        return {"alpha": self.alpha, "n_bootstrap": self.n_bootstrap, "redraws": self.redraws, "rules": rules}


def _design(rules: Sequence[Rule], x: np.ndarray) -> np.ndarray:
    return np.column_stack([np.ones(x.shape[0]), evaluate_rules(rules, x).astype(float)])


def _hat_rows(design: np.ndarray) -> np.ndarray:
    """``W = (X'X)^-1 X'`` via a pivoted QR; raises CollinearityError when rank deficient."""
    q, r, piv = scipy.linalg.qr(design, mode="economic", pivoting=True)
    diag = np.abs(np.diag(r))
    if diag[-1] <= 1e-10 * diag[0] * max(design.shape):
        raise CollinearityError("rule design is rank deficient on this sample")
    wp = scipy.linalg.solve_triangular(r, q.T)
    w = np.empty_like(wp)
    w[piv] = wp
    return w


def _arm_odds(e: np.ndarray, z: np.ndarray) -> np.ndarray:
    # treated: (1-e)/e = exp(-gamma'x); control: e/(1-e) = exp(gamma'x)  (before clipping)
    return np.where(z == 1, (1.0 - e) / e, e / (1.0 - e))


def sipw_coefficients(d: Dataset, rules: Sequence[Rule], propensity_columns=None, clip: float = 0.01) -> np.ndarray:
    """Point estimates ``W tau_SIPW`` with the propensity fitted on ``propensity_columns``."""
    cols = list(range(d.k)) if propensity_columns is None else list(propensity_columns)
    w = _hat_rows(_design(rules, d.x))
    e = fit_logistic(d.x[:, cols], d.z, clip=clip).predict(d.x[:, cols])
    z, y = d.z, d.y
    w1, w0 = z / e, (1.0 - z) / (1.0 - e)
    tau = (w1 / w1.mean() - w0 / w0.mean()) * y
    return w @ tau


def bootstrap_indices(n: int, seed: int, ell: int, attempt: int) -> np.ndarray:
    return generator(seed, "bootstrap", ell, attempt).integers(0, n, size=n)


def _one_bootstrap(d: Dataset, rules, cols, clip, config: SensitivityConfig, ell: int):
    lams = np.asarray(config.lambda_values)
    for attempt in range(config.max_redraws + 1):
        idx = bootstrap_indices(d.n, config.seed, ell, attempt)
        x, y, z = d.x[idx], d.y[idx], d.z[idx]
        n1 = int(z.sum())
        if n1 == 0 or n1 == d.n:
            continue
        try:
            w = _hat_rows(_design(rules, x))
            model = fit_logistic(x[:, cols], z, clip=clip)
        except (NumericalError, DataError):
            continue
        a = _arm_odds(model.predict(x[:, cols]), z)
        n = d.n
        t = z == 1
        lo = np.empty((w.shape[0], lams.size))
        hi = np.empty((w.shape[0], lams.size))
        for j in range(w.shape[0]):
            yt = w[j] * y
            o1 = np.argsort(-yt[t], kind="stable")
            o0 = np.argsort(-yt[~t], kind="stable")
            y1, a1 = yt[t][o1], a[t][o1]
            y0, a0 = yt[~t][o0], a[~t][o0]
            lo[j] = n * (_extremize_grid(y1, a1, lams, MIN) - _extremize_grid(y0, a0, lams, MAX))
            hi[j] = n * (_extremize_grid(y1, a1, lams, MAX) - _extremize_grid(y0, a0, lams, MIN))
        return lo, hi, attempt
    raise BootstrapError(f"bootstrap {ell}: no usable resample after {config.max_redraws} redraws "
                         "(empty arm, collapsed rule column, or separated propensity fit)")


def sensitivity_intervals(d_inference: Dataset, rules: Sequence[Rule], config: SensitivityConfig = SensitivityConfig(),
                          propensity_columns=None, clip: float = 0.01, threads: int | None = 1,
                          keep_bootstraps: bool = False) -> SensitivityResult:
    """Sensitivity intervals for the intercept and every rule coefficient.

    For each bootstrap resample the rule design, its hat rows and the logistic
    propensity are all recomputed from the resampled units.  The same resamples
    are reused across the Lambda grid, so the intervals are nested in Lambda.
    ``propensity_columns`` restricts the covariates used by the propensity model.
    """
    d = d_inference
    d.require_both_arms()
    cols = list(range(d.k)) if propensity_columns is None else [int(c) for c in propensity_columns]
    labels = ("(Intercept)",) + tuple(r.label for r in rules)
    point = sipw_coefficients(d, rules, cols, clip)
    draws = ordered_map(lambda ell: _one_bootstrap(d, rules, cols, clip, config, ell),
                        range(config.n_bootstrap), threads)
    boot_lo = np.stack([b[0] for b in draws])
    boot_hi = np.stack([b[1] for b in draws])
    redraws = int(sum(b[2] for b in draws))
    lower = np.quantile(boot_lo, config.alpha / 2.0, axis=0)
    upper = np.quantile(boot_hi, 1.0 - config.alpha / 2.0, axis=0)
    return SensitivityResult(labels, np.asarray(config.lambda_values), lower, upper, point,
                             config.n_bootstrap, config.alpha, redraws,
                             boot_lo if keep_bootstraps else None, boot_hi if keep_bootstraps else None)
