"""OLS estimation of rule-specific effects with heteroskedasticity-robust variance.

The model regresses pseudo-outcomes on an intercept plus the selected rule
indicators.  ``vcov`` is on the scale of the sampling variance of the
coefficient estimates, i.e. the sandwich ``Q^-1 Omega Q^-1`` divided by N.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import scipy.linalg
from scipy.special import gammainc, ndtri

from .data import RuleMatrix
from .errors import CollinearityError, DomainError, LeverageError, SingularityError
from .pseudo import PseudoOutcomes

_RANK_RTOL = 1e-10


def normal_quantile(p: float) -> float:
    if not (0.0 < p < 1.0):
        raise DomainError("quantile level must lie in (0, 1)")
    return float(ndtri(p))


def chi2_quantile(p: float, df: int, tol: float = 1e-10) -> float:
    """Invert the chi-square CDF (regularised lower incomplete gamma) by bisection."""
    if not (0.0 < p < 1.0):
        raise DomainError("quantile level must lie in (0, 1)")
    if df < 1:
        raise DomainError("degrees of freedom must be positive")
    lo, hi = 0.0, max(1.0, float(df))
    while gammainc(df / 2.0, hi / 2.0) < p:
        hi *= 2.0
    while hi - lo > tol * max(1.0, hi):
        mid = 0.5 * (lo + hi)
        if gammainc(df / 2.0, mid / 2.0) < p:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


def independent_columns(design: np.ndarray, rtol: float = 1e-8) -> list[int]:
    """Greedy maximal set of linearly independent columns, scanning left to right."""
    keep: list[int] = []
    basis = np.zeros((design.shape[0], 0))
    for j in range(design.shape[1]):
        col = np.asarray(design[:, j], dtype=float)
        norm = np.linalg.norm(col)
        if norm == 0.0:
            continue
        resid = col
        for _ in range(2):  # re-orthogonalise once for stability
            resid = resid - basis @ (basis.T @ resid)
        rn = np.linalg.norm(resid)
        if rn > rtol * norm:
            keep.append(j)
            basis = np.column_stack([basis, resid / rn])
    return keep


def _design(x_rules) -> tuple[np.ndarray, list[str]]:
    if isinstance(x_rules, RuleMatrix):
        return x_rules.design(), ["(Intercept)"] + x_rules.labels
    x = np.asarray(x_rules, dtype=float)
    return x, [f"b{j}" for j in range(x.shape[1])]


@dataclass(frozen=True, eq=False)
class OLSFit:
    beta_hat: np.ndarray
    fitted: np.ndarray
    residuals: np.ndarray
    design: np.ndarray
    xtx_inv: np.ndarray
    leverage: np.ndarray


def _tau(tau_star) -> np.ndarray:
    return tau_star.tau_star if isinstance(tau_star, PseudoOutcomes) else np.asarray(tau_star, dtype=float)


def ols_fit(design: np.ndarray, tau) -> OLSFit:
    """Least squares through a column-pivoted QR factorisation."""
    design = np.asarray(design, dtype=float)
    tau = _tau(tau)
    n, p = design.shape
    if tau.shape != (n,):
        raise DomainError(f"{tau.size} pseudo-outcomes for {n} design rows")
    if n < p:
        raise CollinearityError(f"{p} coefficients but only {n} rows", independent_columns(design))
    q, r, piv = scipy.linalg.qr(design, mode="economic", pivoting=True)
    diag = np.abs(np.diag(r))
    if diag.size and diag[-1] <= _RANK_RTOL * diag[0] * max(n, p):
        keep = independent_columns(design)
        raise CollinearityError(
            f"design has rank {len(keep)} < {p} columns; independent columns: {keep}", keep)
    coef_p = scipy.linalg.solve_triangular(r, q.T @ tau)
    beta = np.empty(p)
    beta[piv] = coef_p
    r_inv = scipy.linalg.solve_triangular(r, np.eye(p))
    inv_p = r_inv @ r_inv.T
    xtx_inv = np.empty((p, p))
    xtx_inv[np.ix_(piv, piv)] = inv_p
    fitted = design @ beta
    return OLSFit(beta, fitted, tau - fitted, design, xtx_inv, np.sum(q * q, axis=1))


def estimate_beta(x_rules, tau_star) -> np.ndarray:
    """OLS coefficients, intercept first when ``x_rules`` is a RuleMatrix."""
    design, _ = _design(x_rules)
    return ols_fit(design, tau_star).beta_hat


def sandwich_vcov(x_rules, residuals, flavor: str = "HC0", leverage=None) -> np.ndarray:
    """HC0: ``(X'X)^-1 (sum e_i^2 x_i x_i') (X'X)^-1``; HC3 divides each
    ``e_i^2`` by ``(1 - h_ii)^2``."""
    design = x_rules if isinstance(x_rules, np.ndarray) else _design(x_rules)[0]
    design = np.asarray(design, dtype=float)
    e = np.asarray(residuals, dtype=float)
    xtx_inv = np.linalg.inv(design.T @ design)
    flavor = flavor.upper()
    if flavor == "HC0":
        w = e * e
    elif flavor == "HC3":
        h = np.einsum("ij,jk,ik->i", design, xtx_inv, design) if leverage is None else np.asarray(leverage)
        if np.any(1.0 - h <= 1e-10):
            raise LeverageError("an observation has leverage 1; HC3 is undefined")
        w = (e / (1.0 - h)) ** 2
    else:
        raise DomainError(f"unknown sandwich flavour {flavor!r}")
    meat = design.T @ (design * w[:, None])
    v = xtx_inv @ meat @ xtx_inv
    return 0.5 * (v + v.T)


def propensity_adjusted_vcov(x_rules, residuals, y, z, x_propensity, e_hat, clip: float = 0.01,
                             stabilized: bool = True, flavor: str = "HC0", leverage=None) -> np.ndarray:
    """Sandwich covariance that accounts for the fitted logistic propensity.

    Stacks the logistic score equations, the two per-arm weight means (when
    ``stabilized``) and the OLS normal equations, and propagates the first
    stage through the influence function of the coefficients:

        IF_i = Q^-1 [x_i nu_i + D_gamma IF_gamma,i + D_mu1 IF_mu1,i + D_mu0 IF_mu0,i]

    Units whose propensity was clipped do not contribute a derivative.  With
    ``flavor="HC3"`` the residual term uses ``nu_i / (1 - h_ii)``.
    """
    design = x_rules if isinstance(x_rules, np.ndarray) else _design(x_rules)[0]
    X = np.asarray(design, dtype=float)
    n = X.shape[0]
    y, z, e = (np.asarray(v, dtype=float) for v in (y, z, e_hat))
    nu = np.asarray(residuals, dtype=float)
    if flavor.upper() == "HC3":
        h = np.einsum("ij,jk,ik->i", X, np.linalg.inv(X.T @ X), X) if leverage is None else np.asarray(leverage)
        if np.any(1.0 - h <= 1e-10):
            raise LeverageError("an observation has leverage 1; HC3 is undefined")
        nu = nu / (1.0 - h)
    elif flavor.upper() != "HC0":
        raise DomainError(f"unknown sandwich flavour {flavor!r}")
    G = np.column_stack([np.ones(n), np.asarray(x_propensity, dtype=float)])
    inside = ((e > clip) & (e < 1.0 - clip)).astype(float)
    v = e * (1.0 - e) * inside                        # d e_i / d (gamma' g_i)
    H = (G * (e * (1.0 - e))[:, None]).T @ G / n       # logistic information
    try:
        if_gamma = scipy.linalg.solve(H, (G * (z - e)[:, None]).T, assume_a="pos").T
    except np.linalg.LinAlgError:
        raise SingularityError("logistic information matrix is singular") from None
    Q = X.T @ X / n
    if stabilized:
        w1, w0 = z / e, (1.0 - z) / (1.0 - e)
        m1, m0 = w1.mean(), w0.mean()
        dtau_de = -z * y / (e * e * m1) - (1.0 - z) * y / ((1.0 - e) ** 2 * m0)
        d_m1 = X.T @ (-z * y / (e * m1 * m1)) / n
        d_m0 = X.T @ ((1.0 - z) * y / ((1.0 - e) * m0 * m0)) / n
        if_m1 = (w1 - m1) + if_gamma @ (G * (-z * (1.0 - e) / e * inside)[:, None]).mean(axis=0)
        if_m0 = (w0 - m0) + if_gamma @ (G * ((1.0 - z) * e / (1.0 - e) * inside)[:, None]).mean(axis=0)
        extra = np.outer(if_m1, d_m1) + np.outer(if_m0, d_m0)
    else:
        dtau_de = -z * y / (e * e) - (1.0 - z) * y / (1.0 - e) ** 2
        extra = 0.0
    d_gamma = (X * (dtau_de * v)[:, None]).T @ G / n
    score = X * nu[:, None] + if_gamma @ d_gamma.T + extra
    infl = np.linalg.solve(Q, score.T).T
    out = infl.T @ infl / (n * n)
    return 0.5 * (out + out.T)


def default_flavor(n: int) -> str:
    return "HC0" if n >= 500 else "HC3"


@dataclass(frozen=True, eq=False)
class InferenceResult:
    beta_hat: np.ndarray
    vcov: np.ndarray
    residuals: np.ndarray
    fitted: np.ndarray
    hc_flavor: str
    labels: tuple[str, ...]
    alpha: float = 0.05
    wald_stat: float = 0.0
    wald_df: int = 0
    wald_critical: float = float("nan")
    wald_reject: bool = False
    notes: tuple[str, ...] = field(default=())

    @property
    def se(self) -> np.ndarray:
        return np.sqrt(np.clip(np.diag(self.vcov), 0.0, None))

    @property
    def n(self) -> int:
        return self.residuals.shape[0]

    def to_json(self) -> dict:
        lo, hi = confidence_intervals(self, self.alpha)
        rows = [{"label": lab, "estimate": float(b), "se": float(s), "ci_lower": float(a), "ci_upper": float(c)}
                for lab, b, s, a, c in zip(self.labels, self.beta_hat, self.se, lo, hi)]
        crit = None if not np.isfinite(self.wald_critical) else float(self.wald_critical)
        return {"alpha": self.alpha, "hc_flavor": self.hc_flavor, "n": self.n, "coefficients": rows,
                "wald": {"stat": float(self.wald_stat), "df": int(self.wald_df), "critical": crit,
                         "reject": bool(self.wald_reject)},
                "notes": list(self.notes)}


def fit_inference(x_rules, tau_star, flavor: str | None = None, alpha: float = 0.05,
                  include_intercept_in_wald: bool = False, notes: Sequence[str] = (),
                  adjustment: dict | None = None) -> InferenceResult:
    """OLS + sandwich covariance + Wald test in one call.

    ``adjustment`` holds the keyword arguments ``y, z, x_propensity, e_hat,
    clip, stabilized`` of ``propensity_adjusted_vcov``; when given, that
    covariance replaces the plain sandwich and the flavour gets a ``+ps`` suffix.
    """
    design, labels = _design(x_rules)
    fit = ols_fit(design, tau_star)
    flavor = (flavor or default_flavor(design.shape[0])).upper()
    if adjustment is None:
        vcov = sandwich_vcov(design, fit.residuals, flavor, leverage=fit.leverage)
    else:
        vcov = propensity_adjusted_vcov(design, fit.residuals, flavor=flavor, leverage=fit.leverage, **adjustment)
        flavor = flavor + "+ps"
    res = InferenceResult(fit.beta_hat, vcov, fit.residuals, fit.fitted, flavor, tuple(labels), alpha,
                          notes=tuple(notes))
    if design.shape[1] > (0 if include_intercept_in_wald else 1):
        stat, df, crit, reject = wald_test(res, include_intercept=include_intercept_in_wald)
        res = InferenceResult(res.beta_hat, res.vcov, res.residuals, res.fitted, flavor, res.labels, alpha,
                              stat, df, crit, reject, tuple(notes))
    return res


def confidence_intervals(result: InferenceResult, alpha: float = 0.05) -> tuple[np.ndarray, np.ndarray]:
    zq = normal_quantile(1.0 - alpha / 2.0)
    half = zq * result.se
    return result.beta_hat - half, result.beta_hat + half


def wald_test(result: InferenceResult, include_intercept: bool = False,
              alpha: float | None = None) -> tuple[float, int, float, bool]:
    """Joint test that the tested coefficients are all zero.

    Returns ``(statistic, df, critical value, reject)``; by default the
    intercept is excluded.
    """
    alpha = result.alpha if alpha is None else alpha
    idx = np.arange(result.beta_hat.size) if include_intercept else np.arange(1, result.beta_hat.size)
    if idx.size == 0:
        raise DomainError("no coefficients to test")
    b = result.beta_hat[idx]
    v = result.vcov[np.ix_(idx, idx)]
    try:
        chol = scipy.linalg.cho_factor(v)
        stat = float(b @ scipy.linalg.cho_solve(chol, b))
    except np.linalg.LinAlgError:
        raise SingularityError("coefficient covariance is singular; Wald test undefined") from None
    crit = chi2_quantile(1.0 - alpha, idx.size)
    return stat, int(idx.size), crit, bool(stat > crit)


def subgroup_effect(result: InferenceResult, rule_membership, alpha: float | None = None
                    ) -> tuple[float, float, float]:
    """Effect for units whose rule-membership pattern is ``rule_membership``."""
    alpha = result.alpha if alpha is None else alpha
    m = np.asarray(rule_membership, dtype=float)
    if m.shape != (result.beta_hat.size - 1,):
        raise DomainError(f"membership must have {result.beta_hat.size - 1} entries")
    c = np.concatenate([[1.0], m])
    est = float(c @ result.beta_hat)
    se = float(np.sqrt(max(c @ result.vcov @ c, 0.0)))
    half = normal_quantile(1.0 - alpha / 2.0) * se
    return est, est - half, est + half
