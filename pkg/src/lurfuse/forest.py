"""Bagged regression trees with CV-tuned mtry and permutation importance.

CART trees: at each node, mtry candidate features are drawn without
replacement from the tree's random stream and the (feature, threshold)
pair maximizing the SSE decrease over midpoints of sorted unique values
is taken; ties break toward the lower feature index, then the lower
threshold.  Nodes stop at min_node_size or zero variance.

Determinism: tree i of a forest seeded s consumes only stream(s, 0, i):
first the bootstrap row draw (when enabled), then one block of feature
permutations, consumed one row per node in depth-first left-before-right
(preorder) build order.  Results are therefore independent of
scheduling.  The CV partition uses stream(seed, 1), importance
permutations stream(seed, 2, repeat, feature).
"""

from __future__ import annotations

import json
import math
import warnings
from dataclasses import dataclass, replace
from typing import Optional, Sequence

import numpy as np
from numba import njit

from .errors import DomainError
from .rng import DOMAIN_CV, DOMAIN_FOREST, DOMAIN_IMPORTANCE, stream

FOREST_FORMAT_VERSION = 1


@dataclass(frozen=True)
class ForestParams:
    n_trees: int = 500
    mtry: int = 1
    min_node_size: int = 5
    bootstrap: bool = True
    seed: int = 0

    def validate(self, n_features: int) -> None:
        if self.n_trees < 1:
            raise DomainError(f"n_trees must be >= 1, got {self.n_trees}")
        if not (1 <= self.mtry <= n_features):
            raise DomainError(f"mtry must be in [1, {n_features}], got {self.mtry}")
        if self.min_node_size < 1:
            raise DomainError(f"min_node_size must be >= 1, got {self.min_node_size}")


class Tree:
    """A regression tree in flat arrays (preorder node ids; -1 = leaf)."""

    __slots__ = ("feature", "threshold", "left", "right", "value", "n_samples")

    def __init__(self, feature, threshold, left, right, value, n_samples):
        self.feature = np.asarray(feature, dtype=np.int32)
        self.threshold = np.asarray(threshold, dtype=np.float64)
        self.left = np.asarray(left, dtype=np.int32)
        self.right = np.asarray(right, dtype=np.int32)
        self.value = np.asarray(value, dtype=np.float64)
        self.n_samples = np.asarray(n_samples, dtype=np.int64)

    def predict(self, X: np.ndarray) -> np.ndarray:
        node = np.zeros(len(X), dtype=np.int32)
        feature = self.feature
        while True:
            f = feature[node]
            active = f >= 0
            if not active.any():
                return self.value[node]
            sub = node[active]
            fx = X[active, f[active]]
            go_left = fx <= self.threshold[sub]
            node[active] = np.where(go_left, self.left[sub], self.right[sub])

    def root_split(self) -> Optional[tuple[int, float]]:
        """(feature, threshold) of the root, or None for a single leaf."""
        if self.feature[0] < 0:
            return None
        return int(self.feature[0]), float(self.threshold[0])

    def training_sse(self, X: np.ndarray, y: np.ndarray) -> float:
        pred = self.predict(X)
        return float(np.sum((pred - y) ** 2))


def fit_tree(
    X: np.ndarray,
    y: np.ndarray,
    row_idx: np.ndarray,
    params: ForestParams,
    rng: np.random.Generator,
) -> Tree:
    """Grow one CART regression tree on the given bootstrap rows.

    Candidate features for node i (preorder) are the first mtry entries
    of the i-th row of a permutation block drawn from `rng` up front.
    """
    X = np.ascontiguousarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    row_idx = np.asarray(row_idx, dtype=np.intp)
    if len(row_idx) < 1:
        raise DomainError("fit_tree needs at least one row")
    n = len(row_idx)
    p = X.shape[1]
    Xb = np.ascontiguousarray(X[row_idx])
    yb = np.ascontiguousarray(y[row_idx])
    max_nodes = 2 * n  # a binary tree over n rows has at most 2n - 1 nodes
    pool = rng.permuted(np.tile(np.arange(p, dtype=np.int64), (max_nodes, 1)), axis=1)
    feature, threshold, left, right, value, n_samples, n_nodes = _grow_tree(
        Xb, yb, pool, params.mtry, params.min_node_size
    )
    return Tree(
        feature[:n_nodes],
        threshold[:n_nodes],
        left[:n_nodes],
        right[:n_nodes],
        value[:n_nodes],
        n_samples[:n_nodes],
    )


@njit(cache=True)
def _grow_tree(Xb, yb, pool, mtry, min_node_size):  # pragma: no cover (jitted)
    n, p = Xb.shape
    max_nodes = pool.shape[0]
    feature = np.full(max_nodes, -1, np.int32)
    threshold = np.full(max_nodes, np.nan, np.float64)
    left = np.full(max_nodes, -1, np.int32)
    right = np.full(max_nodes, -1, np.int32)
    value = np.full(max_nodes, np.nan, np.float64)
    n_samples = np.zeros(max_nodes, np.int64)

    order = np.arange(n)
    scratch = np.empty(n, np.int64)
    xv = np.empty(n, np.float64)
    yv = np.empty(n, np.float64)

    # explicit DFS stack: (slice lo, slice hi, parent id, is_left);
    # node ids are assigned in pop order, which is preorder because the
    # right child is pushed before the left one
    stack_lo = np.empty(max_nodes, np.int64)
    stack_hi = np.empty(max_nodes, np.int64)
    stack_parent = np.empty(max_nodes, np.int32)
    stack_side = np.empty(max_nodes, np.int8)
    top = 0
    stack_lo[0] = 0
    stack_hi[0] = n
    stack_parent[0] = -1
    stack_side[0] = 0
    top = 1
    n_nodes = 0

    while top > 0:
        top -= 1
        lo = stack_lo[top]
        hi = stack_hi[top]
        parent = stack_parent[top]
        side = stack_side[top]
        node = n_nodes
        n_nodes += 1
        if parent >= 0:
            if side == 1:
                left[parent] = node
            else:
                right[parent] = node

        m = hi - lo
        total = 0.0
        y_min = yb[order[lo]]
        y_max = y_min
        for i in range(m):
            v = yb[order[lo + i]]
            total += v
            if v < y_min:
                y_min = v
            if v > y_max:
                y_max = v
        value[node] = total / m
        n_samples[node] = m
        if m <= min_node_size or y_min == y_max:
            continue

        best_red = 0.0
        best_f = -1
        best_thr = 0.0
        for c in range(mtry):
            f = pool[node, c]
            for i in range(m):
                xv[i] = Xb[order[lo + i], f]
            srt = np.argsort(xv[:m])
            for i in range(m):
                yv[i] = yb[order[lo + srt[i]]]
            sum_left = 0.0
            prev_x = xv[srt[0]]
            for i in range(m - 1):
                sum_left += yv[i]
                cur_x = xv[srt[i + 1]]
                if cur_x > prev_x:
                    nl = i + 1.0
                    sum_right = total - sum_left
                    red = (
                        sum_left * sum_left / nl
                        + sum_right * sum_right / (m - nl)
                        - total * total / m
                    )
                    if red > best_red or (
                        red == best_red
                        and best_f >= 0
                        and (
                            f < best_f
                            or (f == best_f and (prev_x + cur_x) / 2.0 < best_thr)
                        )
                    ):
                        best_red = red
                        best_f = f
                        best_thr = (prev_x + cur_x) / 2.0
                prev_x = cur_x

        if best_f < 0:
            continue  # no candidate admits a strictly positive reduction

        feature[node] = best_f
        threshold[node] = best_thr
        # stable partition of the slice: left block keeps x <= thr
        n_left_rows = 0
        for i in range(m):
            if Xb[order[lo + i], best_f] <= best_thr:
                n_left_rows += 1
        li = 0
        ri = n_left_rows
        for i in range(m):
            row = order[lo + i]
            if Xb[row, best_f] <= best_thr:
                scratch[li] = row
                li += 1
            else:
                scratch[ri] = row
                ri += 1
        for i in range(m):
            order[lo + i] = scratch[i]
        # push right first so the left child is popped (and numbered) first
        stack_lo[top] = lo + n_left_rows
        stack_hi[top] = hi
        stack_parent[top] = node
        stack_side[top] = 0
        top += 1
        stack_lo[top] = lo
        stack_hi[top] = lo + n_left_rows
        stack_parent[top] = node
        stack_side[top] = 1
        top += 1

    return feature, threshold, left, right, value, n_samples, n_nodes


@dataclass
class Forest:
    """A bagged ensemble; prediction is the mean of per-tree leaf means."""

    params: ForestParams
    feature_names: tuple[str, ...]
    trees: tuple[Tree, ...]

    def predict_matrix(self, X: np.ndarray) -> np.ndarray:
        X = self._check_matrix(X)
        out = np.zeros(len(X), dtype=np.float64)
        for tree in self.trees:
            out += tree.predict(X)
        return out / len(self.trees)

    def predict_one(self, x: Sequence[float]) -> float:
        arr = np.asarray(x, dtype=np.float64).reshape(1, -1)
        return float(self.predict_matrix(arr)[0])

    def _check_matrix(self, X) -> np.ndarray:
        X = np.ascontiguousarray(X, dtype=np.float64)
        if X.ndim != 2 or X.shape[1] != len(self.feature_names):
            raise DomainError(
                f"feature-count mismatch: forest expects {len(self.feature_names)}, "
                f"got {X.shape[1] if X.ndim == 2 else X.shape}"
            )
        return X


def predict(forest: Forest, x) -> float:
    """Predict one vector; accepts a PredictorVector or a plain sequence."""
    values = getattr(x, "values", None)
    if isinstance(values, dict):
        if tuple(values.keys()) != forest.feature_names:
            raise DomainError("predictor vector ordering differs from training")
        return forest.predict_one(list(values.values()))
    return forest.predict_one(x)


def fit_forest(
    X: np.ndarray,
    y: np.ndarray,
    params: ForestParams,
    feature_names: Optional[Sequence[str]] = None,
) -> Forest:
    X = np.ascontiguousarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if X.ndim != 2 or len(X) != len(y):
        raise DomainError("X must be (n, p) with matching y")
    params.validate(X.shape[1])
    names = tuple(feature_names) if feature_names else tuple(
        f"x{i}" for i in range(X.shape[1])
    )
    if len(names) != X.shape[1]:
        raise DomainError("feature_names length must match X columns")
    n = len(y)
    trees = []
    for i in range(params.n_trees):
        rng = stream(params.seed, DOMAIN_FOREST, i)
        rows = rng.integers(0, n, size=n) if params.bootstrap else np.arange(n)
        trees.append(fit_tree(X, y, rows, params, rng))
    return Forest(params=params, feature_names=names, trees=tuple(trees))


# ---------------------------------------------------------------------------
# Cross-validation


def rmse(pred: np.ndarray, obs: np.ndarray) -> float:
    return float(np.sqrt(np.mean((np.asarray(pred) - np.asarray(obs)) ** 2)))


def r2_pearson(pred: np.ndarray, obs: np.ndarray) -> float:
    """Squared Pearson correlation; NaN when either side is constant."""
    pred = np.asarray(pred, dtype=float)
    obs = np.asarray(obs, dtype=float)
    pd = pred - pred.mean()
    od = obs - obs.mean()
    spp = float(np.dot(pd, pd))
    soo = float(np.dot(od, od))
    if spp == 0.0 or soo == 0.0:
        return float("nan")
    r = float(np.dot(pd, od)) / math.sqrt(spp * soo)
    return r * r


def r2_sse(pred: np.ndarray, obs: np.ndarray) -> float:
    """1 - SSE/SST (the alternative convention, reported alongside)."""
    pred = np.asarray(pred, dtype=float)
    obs = np.asarray(obs, dtype=float)
    sst = float(np.sum((obs - obs.mean()) ** 2))
    if sst == 0.0:
        return float("nan")
    return 1.0 - float(np.sum((obs - pred) ** 2)) / sst


def cv_folds(n: int, k: int, seed: int) -> list[np.ndarray]:
    """Seeded random partition into k near-equal folds (disjoint cover)."""
    if k > n:
        raise DomainError(f"k={k} exceeds n={n}")
    if k < 2:
        raise DomainError(f"k must be >= 2, got {k}")
    perm = stream(seed, DOMAIN_CV).permutation(n)
    base, extra = divmod(n, k)
    folds = []
    at = 0
    for i in range(k):
        size = base + (1 if i < extra else 0)
        folds.append(np.sort(perm[at : at + size]))
        at += size
    return folds


@dataclass(frozen=True)
class MtryResult:
    mtry: int
    fold_rmse: tuple[float, ...]
    mean_rmse: float
    mean_r2: float  # squared-Pearson convention; NaN folds excluded
    undefined_r2_folds: int


@dataclass(frozen=True)
class CvReport:
    results: tuple[MtryResult, ...]
    chosen_mtry: int
    fold_sizes: tuple[int, ...]
    final_rmse: float  # apparent, on all rows
    final_r2: float  # squared Pearson (headline)
    final_r2_sse: float  # 1 - SSE/SST (alternative)
    final_forest: Forest


def cross_validate(
    X: np.ndarray,
    y: np.ndarray,
    mtry_grid: Sequence[int],
    k: int = 10,
    params: ForestParams = ForestParams(),
    seed: Optional[int] = None,
    feature_names: Optional[Sequence[str]] = None,
) -> CvReport:
    """Grid-search mtry by k-fold CV with RMSE as the selection metric.

    chosen_mtry minimizes the mean held-out RMSE, ties to the smaller
    mtry.  R^2 is the squared Pearson correlation of predictions vs
    observations per fold; folds where it is undefined are excluded
    from the mean with a warning.
    """
    X = np.ascontiguousarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    n, p = X.shape
    grid = sorted(set(int(m) for m in mtry_grid))
    if not grid:
        raise DomainError("mtry_grid is empty")
    for m in grid:
        if not (1 <= m <= p):
            raise DomainError(f"mtry {m} outside [1, {p}]")
    seed = params.seed if seed is None else seed
    folds = cv_folds(n, k, seed)
    all_rows = np.arange(n)
    results = []
    for m in grid:
        fold_rmse = []
        fold_r2 = []
        undefined = 0
        for fold in folds:
            train = np.setdiff1d(all_rows, fold, assume_unique=True)
            model = fit_forest(X[train], y[train], replace(params, mtry=m))
            pred = model.predict_matrix(X[fold])
            fold_rmse.append(rmse(pred, y[fold]))
            r2 = r2_pearson(pred, y[fold])
            if math.isnan(r2):
                undefined += 1
                warnings.warn(
                    f"R^2 undefined in a CV fold (constant values); excluded (mtry={m})"
                )
            else:
                fold_r2.append(r2)
        results.append(
            MtryResult(
                mtry=m,
                fold_rmse=tuple(fold_rmse),
                mean_rmse=float(np.mean(fold_rmse)),
                mean_r2=float(np.mean(fold_r2)) if fold_r2 else float("nan"),
                undefined_r2_folds=undefined,
            )
        )
    best = min(results, key=lambda r: (r.mean_rmse, r.mtry))
    final = fit_forest(X, y, replace(params, mtry=best.mtry), feature_names)
    pred = final.predict_matrix(X)
    return CvReport(
        results=tuple(results),
        chosen_mtry=best.mtry,
        fold_sizes=tuple(len(f) for f in folds),
        final_rmse=rmse(pred, y),
        final_r2=r2_pearson(pred, y),
        final_r2_sse=r2_sse(pred, y),
        final_forest=final,
    )


# ---------------------------------------------------------------------------
# Permutation importance


@dataclass(frozen=True)
class ImportanceReport:
    """(name, raw, scaled) sorted by importance, scaled so max = 100."""

    entries: tuple[tuple[str, float, float], ...]


def variable_importance(
    forest: Forest,
    X: np.ndarray,
    y: np.ndarray,
    n_repeats: int = 5,
    seed: int = 0,
) -> ImportanceReport:
    """Permutation importance: mean RMSE increase when a column is shuffled.

    Scaled linearly so the minimum maps to 0 and the maximum to 100;
    output sorted in decreasing importance.
    """
    X = np.ascontiguousarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    n = len(y)
    p = len(forest.feature_names)
    base = rmse(forest.predict_matrix(X), y)
    # one prediction pass over every (feature, repeat) permuted block
    big = np.tile(X, (p * n_repeats, 1))
    for f in range(p):
        for r in range(n_repeats):
            perm = stream(seed, DOMAIN_IMPORTANCE, r, f).permutation(n)
            at = (f * n_repeats + r) * n
            big[at : at + n, f] = X[perm, f]
    pred = forest.predict_matrix(big)
    raws = []
    for f in range(p):
        increases = []
        for r in range(n_repeats):
            at = (f * n_repeats + r) * n
            increases.append(rmse(pred[at : at + n], y) - base)
        raws.append(float(np.mean(increases)))
    raws = np.array(raws)
    lo, hi = raws.min(), raws.max()
    if hi > lo:
        scaled = (raws - lo) / (hi - lo) * 100.0
    else:
        scaled = np.full_like(raws, 100.0)
    order = sorted(range(len(raws)), key=lambda i: (-raws[i], i))
    entries = tuple(
        (forest.feature_names[i], float(raws[i]), float(scaled[i])) for i in order
    )
    return ImportanceReport(entries=entries)


# ---------------------------------------------------------------------------
# Serialization (versioned JSON, lossless round trip)


def forest_to_dict(forest: Forest) -> dict:
    return {
        "format_version": FOREST_FORMAT_VERSION,
        "params": {
            "n_trees": forest.params.n_trees,
            "mtry": forest.params.mtry,
            "min_node_size": forest.params.min_node_size,
            "bootstrap": forest.params.bootstrap,
            "seed": forest.params.seed,
        },
        "feature_names": list(forest.feature_names),
        "trees": [_tree_to_nested(t, 0) for t in forest.trees],
    }


def _tree_to_nested(tree: Tree, node: int) -> dict:
    if tree.feature[node] < 0:
        return {"mean": float(tree.value[node]), "n": int(tree.n_samples[node])}
    return {
        "feature_index": int(tree.feature[node]),
        "threshold": float(tree.threshold[node]),
        "left": _tree_to_nested(tree, int(tree.left[node])),
        "right": _tree_to_nested(tree, int(tree.right[node])),
    }


def forest_from_dict(doc: dict) -> Forest:
    version = doc.get("format_version")
    if version != FOREST_FORMAT_VERSION:
        raise DomainError(f"unsupported forest format_version {version!r}")
    params = ForestParams(**doc["params"])
    trees = tuple(_tree_from_nested(t) for t in doc["trees"])
    return Forest(params=params, feature_names=tuple(doc["feature_names"]), trees=trees)


def _tree_from_nested(nested: dict) -> Tree:
    feature, threshold, left, right, value, n_samples = [], [], [], [], [], []

    def walk(nd) -> int:
        i = len(feature)
        feature.append(-1)
        threshold.append(math.nan)
        left.append(-1)
        right.append(-1)
        value.append(math.nan)
        n_samples.append(0)
        if "mean" in nd:
            value[i] = float(nd["mean"])
            n_samples[i] = int(nd["n"])
        else:
            feature[i] = int(nd["feature_index"])
            threshold[i] = float(nd["threshold"])
            left[i] = walk(nd["left"])
            right[i] = walk(nd["right"])
        return i

    walk(nested)
    return Tree(feature, threshold, left, right, value, n_samples)


def save_forest(path, forest: Forest) -> None:
    with open(path, "w") as fh:
        json.dump(forest_to_dict(forest), fh, separators=(",", ":"))
        fh.write("\n")


def load_forest(path) -> Forest:
    with open(path) as fh:
        return forest_from_dict(json.load(fh))
