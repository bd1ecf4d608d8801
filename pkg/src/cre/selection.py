"""LASSO regularisation paths and stability selection over rule columns.

The LASSO minimises ``(1/2N)||t - b0 - Xs b||^2 + lam * ||b||_1`` where ``Xs``
holds the candidate columns standardised to zero mean and unit variance, and
the intercept ``b0`` is unpenalised.  Coefficients are reported on that
standardised scale.
"""
from __future__ import annotations

from dataclasses import dataclass

import numba
import numpy as np

from ._random import generator, ordered_map
from .data import RuleMatrix
from .errors import ConvergenceError, DomainError, SelectionInputError


@numba.njit(cache=True, nogil=True)
def _soft(v, lam):
    if v > lam:
        return v - lam
    if v < -lam:
        return v + lam
    return 0.0


@numba.njit(cache=True, nogil=True)
def _sweep(G, grad, beta, lam, idx, n_idx):
    biggest = 0.0
    for t in range(n_idx):
        j = idx[t]
        gjj = G[j, j]
        new = _soft(grad[j] + gjj * beta[j], lam) / gjj
        delta = new - beta[j]
        if delta != 0.0:
            for i in range(G.shape[0]):
                grad[i] -= delta * G[i, j]
            beta[j] = new
            if abs(delta) > biggest:
                biggest = abs(delta)
    return biggest


@numba.njit(cache=True, nogil=True)
def _cd_path(G, c, lambdas, tol, max_sweeps, max_entrants):
    m = G.shape[0]
    n_lam = lambdas.shape[0]
    coefs = np.zeros((n_lam, m))
    beta = np.zeros(m)
    grad = c.copy()
    ever = np.zeros(m, dtype=np.bool_)
    n_ever = 0
    all_idx = np.arange(m)
    active = np.empty(m, dtype=np.int64)
    for k in range(n_lam):
        lam = lambdas[k]
        sweeps = 0
        while True:
            d = _sweep(G, grad, beta, lam, all_idx, m)
            sweeps += 1
            if d < tol:
                break
            # iterate on the current active set until it settles
            while True:
                n_act = 0
                for j in range(m):
                    if beta[j] != 0.0:
                        active[n_act] = j
                        n_act += 1
                d = _sweep(G, grad, beta, lam, active, n_act)
                sweeps += 1
                if d < tol or sweeps >= max_sweeps:
                    break
            if sweeps >= max_sweeps:
                return coefs[:k], k, False
        for j in range(m):
            coefs[k, j] = beta[j]
            if beta[j] != 0.0 and not ever[j]:
                ever[j] = True
                n_ever += 1
        if max_entrants > 0 and n_ever >= max_entrants:
            return coefs[:k + 1], k + 1, True
    return coefs, n_lam, True


@dataclass(frozen=True, eq=False)
class LassoPath:
    """Solutions along a decreasing ``lambdas`` grid.

    ``coefficients[k]`` is the standardised coefficient vector at
    ``lambdas[k]``; ``entry_order`` lists columns by first entry into the
    active set (ties within one grid step: larger ``|coef|`` first, then lower
    index).
    """

    lambdas: np.ndarray
    coefficients: np.ndarray
    intercept: float
    entry_order: tuple[int, ...]
    center: np.ndarray
    scale: np.ndarray

    def gradient(self, x, tau, k: int) -> np.ndarray:
        """``Xs'(t - b0 - Xs b)/N`` at grid point ``k`` (for KKT checks)."""
        xs = (np.asarray(x, float) - self.center) / self.scale
        r = np.asarray(tau, float) - self.intercept - xs @ self.coefficients[k]
        return xs.T @ r / xs.shape[0]


def _as_array(x_rules) -> np.ndarray:
    if isinstance(x_rules, RuleMatrix):
        return x_rules.values.astype(float)
    return np.asarray(x_rules, dtype=float)


def lambda_grid(lam_max: float, n_lambda: int = 100, lambda_min_ratio: float = 1e-3) -> np.ndarray:
    if n_lambda < 1:
        raise DomainError("n_lambda must be positive")
    if not (0.0 < lambda_min_ratio < 1.0):
        raise DomainError("lambda_min_ratio must lie in (0, 1)")
    if n_lambda == 1:
        return np.array([lam_max])
    return lam_max * np.logspace(0.0, np.log10(lambda_min_ratio), n_lambda)


def lasso_path(x_rules, tau_hat, n_lambda: int = 100, lambda_min_ratio: float = 1e-3,
               tol: float = 1e-7, max_sweeps: int = 100_000, max_entrants: int | None = None) -> LassoPath:
    """Cyclic coordinate descent with warm starts down a log-spaced grid.

    With ``max_entrants`` the path stops at the first grid point where that
    many distinct columns have entered.
    """
    x = _as_array(x_rules)
    tau = np.asarray(tau_hat, dtype=float)
    n, m = x.shape
    if tau.shape != (n,):
        raise DomainError("tau_hat length must equal the number of rows")
    if m == 0:
        raise SelectionInputError("LASSO needs at least one candidate column")
    center = x.mean(axis=0)
    scale = x.std(axis=0)
    if np.any(scale <= 0.0):
        raise SelectionInputError(f"constant candidate columns: {np.flatnonzero(scale <= 0).tolist()}")
    xs = (x - center) / scale
    t = tau - tau.mean()
    G = np.ascontiguousarray(xs.T @ xs / n)
    c = xs.T @ t / n
    lam_max = float(np.max(np.abs(c)))
    if lam_max <= 0.0:
        lam_max = 1.0  # target orthogonal to every column: the whole path is zero
    lambdas = lambda_grid(lam_max, n_lambda, lambda_min_ratio)
    coefs, n_done, ok = _cd_path(G, c, lambdas, tol, max_sweeps, 0 if max_entrants is None else int(max_entrants))
    if not ok:
        raise ConvergenceError(f"coordinate descent did not converge within {max_sweeps} sweeps "
                               f"at lambda={lambdas[n_done]:.6g}")
    entry: list[int] = []
    seen = np.zeros(m, dtype=bool)
    for k in range(n_done):
        fresh = np.flatnonzero((coefs[k] != 0.0) & ~seen)
        if fresh.size:
            fresh = fresh[np.lexsort((fresh, -np.abs(coefs[k, fresh])))]
            entry.extend(int(j) for j in fresh)
            seen[fresh] = True
    return LassoPath(lambdas[:n_done], coefs, float(tau.mean()), tuple(entry), center, scale)


@dataclass(frozen=True)
class SelectionParams:
    threshold: float = 0.8
    n_subsamples: int = 50
    q_max: int = 20
    n_lambda: int = 100
    lambda_min_ratio: float = 1e-3

    def __post_init__(self):
        if not (0.0 < self.threshold <= 1.0):
            raise DomainError("stability threshold must lie in (0, 1]")
        if self.n_subsamples < 1 or self.q_max < 1:
            raise DomainError("n_subsamples and q_max must be positive")

    def to_json(self) -> dict:
        return {k: getattr(self, k) for k in self.__dataclass_fields__}


@dataclass(frozen=True, eq=False)
class StabilitySelectionResult:
    selection_probability: np.ndarray
    selected: tuple[int, ...]
    threshold: float
    n_subsamples: int
    q_max: int

    def report(self, x_rules: RuleMatrix) -> list[dict]:
        support = x_rules.values.mean(axis=0)
        chosen = set(self.selected)
        return [{"label": r.label, "support": float(support[j]),
                 "selection_probability": float(self.selection_probability[j]),
                 "selected": j in chosen} for j, r in enumerate(x_rules.rules)]


def stability_select(x_rules, tau_hat, params: SelectionParams = SelectionParams(), seed: int = 0,
                     threads: int | None = 1) -> StabilitySelectionResult:
    """Selection probability = share of half-samples in which a column is among
    the first ``q_max`` LASSO entrants.

    ``selected`` is ordered by decreasing probability, then column index.
    """
    x = _as_array(x_rules)
    tau = np.asarray(tau_hat, dtype=float)
    n, m = x.shape
    half = n // 2
    if half < 2:
        raise DomainError("stability selection needs at least 4 rows")

    def one(b):
        rows = np.sort(generator(seed, "stability", b).permutation(n)[:half])
        xb = x[rows]
        usable = np.flatnonzero(xb.std(axis=0) > 0.0)
        if usable.size == 0:
            return []
        try:
            path = lasso_path(xb[:, usable], tau[rows], params.n_lambda, params.lambda_min_ratio,
                              max_entrants=params.q_max)
        except ConvergenceError as exc:
            raise ConvergenceError(f"subsample {b}: {exc}") from exc
        return [int(usable[j]) for j in path.entry_order[:params.q_max]]

    counts = np.zeros(m)
    for hits in ordered_map(one, range(params.n_subsamples), threads):
        counts[hits] += 1.0
    prob = counts / params.n_subsamples
    keep = np.flatnonzero(counts >= params.threshold * params.n_subsamples - 1e-9)
    keep = keep[np.lexsort((keep, -prob[keep]))]
    return StabilitySelectionResult(prob, tuple(int(j) for j in keep), params.threshold,
                                    params.n_subsamples, params.q_max)
