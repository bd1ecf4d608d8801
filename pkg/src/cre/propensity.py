"""Logistic propensity model fitted by iteratively reweighted least squares."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit

from .errors import ArmError, DomainError, RankError, SeparationError

SEPARATION_BOUND = 30.0


@dataclass(frozen=True, eq=False)
class PropensityModel:
    """Coefficients ``gamma`` (intercept first) of ``P(Z=1|x) = expit(gamma'(1, x))``."""

    gamma: np.ndarray
    converged: bool
    iterations: int
    clip: float = 0.01
    loglik_trace: tuple[float, ...] = field(default=(), repr=False)   # per iteration, start value first

    def __post_init__(self):
        if not (0.0 < self.clip < 0.5):
            raise DomainError(f"clip must lie in (0, 0.5), got {self.clip}")
        g = np.array(self.gamma, dtype=float)
        g.setflags(write=False)
        object.__setattr__(self, "gamma", g)

    def linear_predictor(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        if x.shape[-1] != self.gamma.size - 1:
            raise DomainError(f"expected {self.gamma.size - 1} covariates, got {x.shape[-1]}")
        return self.gamma[0] + x @ self.gamma[1:]

    def predict(self, x: np.ndarray, clipped: bool = True) -> np.ndarray:
        p = expit(self.linear_predictor(x))
        return np.clip(p, self.clip, 1.0 - self.clip) if clipped else p

    def to_json(self) -> dict:
        return {"gamma": [float(g) for g in self.gamma], "clip": self.clip}

    @classmethod
    def from_json(cls, obj: dict) -> "PropensityModel":
        return cls(np.asarray(obj["gamma"], float), True, 0, float(obj["clip"]))


def _loglik(eta: np.ndarray, z: np.ndarray) -> float:
    # sum z*eta - log(1 + e^eta), stable for large |eta|
    return float(np.sum(z * eta - np.logaddexp(0.0, eta)))


def fit_logistic(x, z, max_iter: int = 100, tol: float = 1e-8, clip: float = 0.01,
                 max_halvings: int = 10) -> PropensityModel:
    """Maximum-likelihood logistic regression of ``z`` on ``(1, x)``.

    Newton/IRLS steps are halved (up to ``max_halvings`` times) whenever the
    log-likelihood would decrease.  Convergence is declared when the largest
    absolute coefficient change drops below ``tol``.

    Raises
    ------
    SeparationError
        if any coefficient exceeds 30 in absolute value during iteration,
        which is what (quasi-)complete separation looks like.
    RankError
        if the design ``[1, x]`` is rank deficient.
    """
    x = np.asarray(x, dtype=float)
    if x.ndim == 1:
        x = x[:, None]
    z = np.asarray(z, dtype=float)
    n1 = int(z.sum())
    if n1 == 0 or n1 == z.size:
        raise ArmError("logistic fit needs both treated and control units")
    design = np.column_stack([np.ones(x.shape[0]), x])
    if np.linalg.matrix_rank(design) < design.shape[1]:
        raise RankError("propensity design [1, X] is rank deficient; drop collinear covariates")

    gamma = np.zeros(design.shape[1])
    gamma[0] = np.log(n1 / (z.size - n1))
    eta = design @ gamma
    ll = _loglik(eta, z)
    trace = [ll]
    converged = False
    it = 0
    for it in range(1, max_iter + 1):
        p = expit(eta)
        w = p * (1.0 - p)
        grad = design.T @ (z - p)
        hess = design.T @ (design * w[:, None])
        try:
            step = np.linalg.solve(hess, grad)
        except np.linalg.LinAlgError:
            raise RankError("singular weighted normal equations in logistic fit") from None
        if not np.all(np.isfinite(step)):
            raise RankError("singular weighted normal equations in logistic fit")
        t = 1.0
        for _ in range(max_halvings + 1):
            cand = gamma + t * step
            new_eta = design @ cand
            new_ll = _loglik(new_eta, z)
            if new_ll >= ll - 1e-12 * max(1.0, abs(ll)):
                break
            t *= 0.5
        change = float(np.max(np.abs(cand - gamma)))
        gamma, eta, ll = cand, new_eta, new_ll
        trace.append(ll)
        if np.max(np.abs(gamma)) > SEPARATION_BOUND:
            raise SeparationError(
                "logistic fit diverged (|coefficient| > 30): the treatment is (nearly) "
                "perfectly separated by the covariates; review covariates or rely on clipping")
        if change < tol:
            converged = True
            break
    return PropensityModel(gamma, converged, it, clip, tuple(trace))


def predict_propensity(m: PropensityModel, x) -> float | np.ndarray:
    """Clipped propensity for one covariate row (or a matrix of rows)."""
    x = np.asarray(x, dtype=float)
    p = m.predict(x)
    return float(p) if x.ndim == 1 else p
