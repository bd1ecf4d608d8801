"""CART regression trees, random forests and least-squares gradient boosting.

Trees are stored as flat node arrays, root first.  Splits are chosen by greedy
variance reduction with thresholds at midpoints between adjacent observed
values, so training rows never sit on a threshold.  Ties in the reduction are
broken in favour of the lower covariate index and then the lower threshold.

Every non-root node of every tree is a candidate decision rule; see
:func:`extract_rules`.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import NamedTuple, Sequence

import numba
import numpy as np

from ._random import generator, ordered_map
from .data import Condition, Direction, Rule, canonicalize
from .errors import DomainError, RuleGenerationError

_TIE_RTOL = 1e-12


@numba.njit(cache=True, nogil=True)
def _best_split(x, target, rows, features, n_features, min_leaf):
    n = rows.shape[0]
    mean = 0.0
    for i in range(n):
        mean += target[rows[i]]
    mean /= n
    best_gain = 0.0
    best_f = -1
    best_t = 0.0
    vals = np.empty(n)
    for fi in range(n_features):
        f = features[fi]
        for i in range(n):
            vals[i] = x[rows[i], f]
        order = np.argsort(vals, kind="mergesort")
        cum = 0.0
        for pos in range(n - 1):
            r = rows[order[pos]]
            cum += target[r] - mean
            nl = pos + 1
            if nl < min_leaf:
                continue
            if n - nl < min_leaf:
                break
            v0 = vals[order[pos]]
            v1 = vals[order[pos + 1]]
            if v1 <= v0:
                continue
            gain = cum * cum * (1.0 / nl + 1.0 / (n - nl))
            # strict improvement keeps the earliest (covariate, threshold) on ties
            if gain > 0.0 and gain > best_gain * (1.0 + _TIE_RTOL):
                best_gain = gain
                best_f = f
                best_t = 0.5 * (v0 + v1)
    return best_f, best_t, best_gain


@numba.njit(cache=True, nogil=True)
def _fit_tree(x, target, rows, max_depth, min_leaf, feature_orders, n_try, min_gain_rtol):
    max_nodes = 2 ** (max_depth + 1) - 1
    feature = np.full(max_nodes, -1, dtype=np.int64)
    threshold = np.zeros(max_nodes)
    left = np.full(max_nodes, -1, dtype=np.int64)
    right = np.full(max_nodes, -1, dtype=np.int64)
    value = np.zeros(max_nodes)
    depth = np.zeros(max_nodes, dtype=np.int64)
    count = np.zeros(max_nodes, dtype=np.int64)

    # explicit stack of (node id, rows); children are numbered when their parent splits
    stack_rows = [rows]
    stack_node = [0]
    stack_depth = [0]
    n_nodes = 1
    n_internal = 0
    feats = np.empty(feature_orders.shape[1], dtype=np.int64)
    while len(stack_node) > 0:
        node = stack_node.pop()
        r = stack_rows.pop()
        dep = stack_depth.pop()
        n = r.shape[0]
        s = 0.0
        for i in range(n):
            s += target[r[i]]
        mu = s / n
        sst = 0.0
        for i in range(n):
            dlt = target[r[i]] - mu
            sst += dlt * dlt
        value[node] = mu
        depth[node] = dep
        count[node] = n
        if dep >= max_depth or n < 2 * min_leaf or sst <= 0.0:
            continue
        # candidate covariates for this split, evaluated in increasing index order
        row = feature_orders[n_internal % feature_orders.shape[0]]
        n_internal += 1
        for i in range(n_try):
            feats[i] = row[i]
        fsub = np.sort(feats[:n_try])
        f, t, gain = _best_split(x, target, r, fsub, n_try, min_leaf)
        if f < 0 or gain <= min_gain_rtol * sst:
            continue
        mask = np.empty(n, dtype=np.bool_)
        for i in range(n):
            mask[i] = x[r[i], f] <= t
        rl = r[mask]
        rr = r[~mask]
        feature[node] = f
        threshold[node] = t
        lid = n_nodes
        rid = n_nodes + 1
        n_nodes += 2
        left[node] = lid
        right[node] = rid
        # push right first so the left subtree is grown first
        stack_rows.append(rr)
        stack_node.append(rid)
        stack_depth.append(dep + 1)
        stack_rows.append(rl)
        stack_node.append(lid)
        stack_depth.append(dep + 1)
    return (feature[:n_nodes], threshold[:n_nodes], left[:n_nodes], right[:n_nodes],
            value[:n_nodes], depth[:n_nodes], count[:n_nodes])


@numba.njit(cache=True, nogil=True)
def _predict(feature, threshold, left, right, value, x):
    out = np.empty(x.shape[0])
    for i in range(x.shape[0]):
        node = 0
        while feature[node] >= 0:
            if x[i, feature[node]] <= threshold[node]:
                node = left[node]
            else:
                node = right[node]
        out[i] = value[node]
    return out


class TreeNode(NamedTuple):
    split: tuple[int, float] | None
    left: int
    right: int
    prediction: float
    depth: int
    n_samples: int


@dataclass(frozen=True, eq=False)
class Tree:
    """A fitted regression tree in flat-array form (node 0 is the root)."""

    feature: np.ndarray
    threshold: np.ndarray
    left: np.ndarray
    right: np.ndarray
    value: np.ndarray
    depth: np.ndarray
    n_samples: np.ndarray

    @property
    def n_nodes(self) -> int:
        return self.feature.shape[0]

    @property
    def leaves(self) -> np.ndarray:
        return np.flatnonzero(self.feature < 0)

    def node(self, i: int) -> TreeNode:
        f = int(self.feature[i])
        return TreeNode(None if f < 0 else (f, float(self.threshold[i])),
                        int(self.left[i]), int(self.right[i]), float(self.value[i]),
                        int(self.depth[i]), int(self.n_samples[i]))

    def predict(self, x) -> np.ndarray:
        x = np.ascontiguousarray(x, dtype=float)
        return _predict(self.feature, self.threshold, self.left, self.right, self.value, x)

    def paths(self) -> list[tuple[int, tuple[Condition, ...]]]:
        """``(node, conditions from the root)`` for every non-root node."""
        out = []
        stack = [(0, ())]
        while stack:
            node, conds = stack.pop()
            if node:
                out.append((node, conds))
            f = int(self.feature[node])
            if f >= 0:
                t = float(self.threshold[node])
                stack.append((int(self.right[node]), conds + (Condition(f, Direction.GT, t),)))
                stack.append((int(self.left[node]), conds + (Condition(f, Direction.LE, t),)))
        out.sort(key=lambda p: p[0])
        return out

    def to_json(self) -> list[dict]:
        return [{"id": i, "feature": int(self.feature[i]), "threshold": float(self.threshold[i]),
                 "left": int(self.left[i]), "right": int(self.right[i]),
                 "value": float(self.value[i]), "depth": int(self.depth[i]),
                 "n_samples": int(self.n_samples[i])} for i in range(self.n_nodes)]


@dataclass(frozen=True)
class EnsembleParams:
    n_trees_forest: int = 200
    n_trees_boost: int = 200
    max_depth: int = 3
    min_leaf: int = 20
    learning_rate: float = 0.01
    subsample_fraction: float = 0.5
    # None means ceil(sqrt(K)) / K
    feature_fraction_forest: float | None = None
    bootstrap: bool = True
    seed: int = 0

    def __post_init__(self):
        for name in ("n_trees_forest", "n_trees_boost", "max_depth", "min_leaf"):
            if getattr(self, name) < 1:
                raise DomainError(f"{name} must be positive")
        for name in ("learning_rate", "subsample_fraction"):
            v = getattr(self, name)
            if not (0.0 < v <= 1.0):
                raise DomainError(f"{name} must lie in (0, 1]")
        f = self.feature_fraction_forest
        if f is not None and not (0.0 < f <= 1.0):
            raise DomainError("feature_fraction_forest must lie in (0, 1]")

    def features_per_split(self, k: int) -> int:
        if self.feature_fraction_forest is None:
            return max(1, math.ceil(math.sqrt(k)))
        return min(k, max(1, math.ceil(self.feature_fraction_forest * k - 1e-12)))

    def to_json(self) -> dict:
        return {k: getattr(self, k) for k in self.__dataclass_fields__}


def _prepare(x, target):
    x = np.ascontiguousarray(x, dtype=float)
    if x.ndim == 1:
        x = x[:, None]
    target = np.ascontiguousarray(target, dtype=float)
    if target.shape != (x.shape[0],):
        raise DomainError("target length must match the number of rows")
    return x, target


def _grow(x, target, rows, params: EnsembleParams, rng: np.random.Generator | None, n_try: int) -> Tree:
    k = x.shape[1]
    n_rows_orders = 2 ** params.max_depth
    if n_try >= k or rng is None:
        orders = np.tile(np.arange(k, dtype=np.int64), (1, 1))
        n_try = k
    else:
        orders = np.stack([rng.permutation(k) for _ in range(n_rows_orders)]).astype(np.int64)
    arrays = _fit_tree(x, target, np.asarray(rows, dtype=np.int64), params.max_depth,
                       params.min_leaf, orders, n_try, 1e-12)
    return Tree(*arrays)


def fit_regression_tree(x, target, params: EnsembleParams = EnsembleParams(), seed: int | None = None,
                        rows=None, features_per_split: int | None = None) -> Tree:
    """Greedy CART regression tree.

    ``rows`` selects (possibly repeated) training rows; by default all rows are
    used.  ``features_per_split`` < K draws a random covariate subset at each
    split from the stream ``seed``.
    """
    x, target = _prepare(x, target)
    if rows is None:
        rows = np.arange(x.shape[0])
    n_try = x.shape[1] if features_per_split is None else int(features_per_split)
    rng = generator(params.seed if seed is None else seed, "tree") if n_try < x.shape[1] else None
    return _grow(x, target, rows, params, rng, n_try)


def fit_random_forest(x, target, params: EnsembleParams = EnsembleParams(), threads: int | None = 1) -> list[Tree]:
    """Bootstrap-aggregated trees with per-split covariate subsampling."""
    x, target = _prepare(x, target)
    n, k = x.shape
    n_try = params.features_per_split(k)

    def one(t):
        rng = generator(params.seed, "forest", t)
        rows = rng.integers(0, n, size=n) if params.bootstrap else np.arange(n)
        return _grow(x, target, rows, params, rng, n_try)

    return ordered_map(one, range(params.n_trees_forest), threads)


@dataclass(frozen=True, eq=False)
class BoostedEnsemble:
    base_offset: float
    trees: tuple[Tree, ...]
    learning_rate: float
    train_mse: tuple[float, ...] = field(default=())

    def predict(self, x, n_stages: int | None = None) -> np.ndarray:
        x = np.ascontiguousarray(x, dtype=float)
        out = np.full(x.shape[0], self.base_offset)
        for tree in self.trees[:n_stages]:
            out += self.learning_rate * tree.predict(x)
        return out


def fit_gradient_boosting(x, target, params: EnsembleParams = EnsembleParams()) -> BoostedEnsemble:
    """Least-squares boosting; stage trees fit residuals on row subsamples."""
    x, target = _prepare(x, target)
    n = x.shape[0]
    m = max(1, int(math.floor(params.subsample_fraction * n)))
    rng = generator(params.seed, "boost")
    base = float(target.mean())
    pred = np.full(n, base)
    trees, mse = [], [float(np.mean((target - pred) ** 2))]
    for _ in range(params.n_trees_boost):
        resid = target - pred
        rows = np.sort(rng.choice(n, size=m, replace=False)) if m < n else np.arange(n)
        tree = _grow(x, resid, rows, params, None, x.shape[1])
        pred = pred + params.learning_rate * tree.predict(x)
        trees.append(tree)
        mse.append(float(np.mean((target - pred) ** 2)))
    return BoostedEnsemble(base, tuple(trees), params.learning_rate, tuple(mse))


def extract_rules(trees: Sequence[Tree], x, max_length: int = 3, min_support: float = 0.02,
                  column_names: Sequence[str] | None = None) -> list[Rule]:
    """Collect the rule of every non-root node across ``trees``.

    Rules longer than ``max_length`` conditions (after canonicalisation) or
    whose support on ``x`` falls outside ``[min_support, 1 - min_support]``
    are dropped; duplicates are removed keeping first occurrence.
    """
    if len(trees) == 0:
        raise RuleGenerationError("no trees to extract rules from")
    x = np.asarray(x, dtype=float)
    names = tuple(column_names) if column_names is not None else None
    seen: set = set()
    out: list[Rule] = []
    for tree in trees:
        for _, conds in tree.paths():
            canon = canonicalize(conds)
            if len(canon) > max_length or canon in seen:
                continue
            seen.add(canon)
            rule = Rule(canon, names)
            support = float(rule.evaluate(x).mean())
            if support < min_support or support > 1.0 - min_support:
                continue
            out.append(rule)
    if not out:
        raise RuleGenerationError(
            "no candidate rules survived; loosen min_support / max_length or grow deeper trees")
    return out
