"""Multi-output regression trees and bagged forests.

Two split criteria share one greedy top-down grower:

* ``fit_mse_tree`` -- summed squared error over all output components (CART).
* ``fit_spot_tree`` -- summed decision regret of predicting each child's mean
  cost (SPO trees).

Candidate thresholds are empirical quantiles of the node's samples; a sample
goes left when ``x[feature] <= threshold``.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .spo import DecisionContext

LEAF = -1


@dataclass
class RegressionTree:
    feature: np.ndarray
    threshold: np.ndarray
    left: np.ndarray
    right: np.ndarray
    value: np.ndarray
    max_depth: int = 0

    @property
    def n_nodes(self) -> int:
        return len(self.feature)

    @property
    def depth(self) -> int:
        def _depth(i):
            if self.feature[i] == LEAF:
                return 0
            return 1 + max(_depth(self.left[i]), _depth(self.right[i]))

        return _depth(0)

    def predict(self, X) -> np.ndarray:
        X = np.asarray(X, dtype=float)
        single = X.ndim == 1
        X = np.atleast_2d(X)
        idx = np.zeros(X.shape[0], dtype=int)
        while True:
            feat = self.feature[idx]
            rows = np.flatnonzero(feat != LEAF)
            if rows.size == 0:
                break
            node = idx[rows]
            go_left = X[rows, feat[rows]] <= self.threshold[node]
            idx[rows] = np.where(go_left, self.left[node], self.right[node])
        out = self.value[idx]
        return out[0] if single else out

    def to_dict(self) -> dict:
        nodes = []
        for i in range(self.n_nodes):
            if self.feature[i] == LEAF:
                nodes.append({"leaf": self.value[i].tolist()})
            else:
                nodes.append(
                    {
                        "feature": int(self.feature[i]),
                        "threshold": float(self.threshold[i]),
                        "left": int(self.left[i]),
                        "right": int(self.right[i]),
                    }
                )
        return {"max_depth": self.max_depth, "n_outputs": int(self.value.shape[1]), "nodes": nodes}

    @classmethod
    def from_dict(cls, data: dict) -> "RegressionTree":
        nodes = data["nodes"]
        k = len(nodes)
        d = int(data["n_outputs"])
        tree = cls(
            feature=np.full(k, LEAF),
            threshold=np.zeros(k),
            left=np.full(k, LEAF),
            right=np.full(k, LEAF),
            value=np.zeros((k, d)),
            max_depth=int(data["max_depth"]),
        )
        for i, node in enumerate(nodes):
            if "leaf" in node:
                tree.value[i] = node["leaf"]
            else:
                tree.feature[i] = node["feature"]
                tree.threshold[i] = node["threshold"]
                tree.left[i] = node["left"]
                tree.right[i] = node["right"]
        return tree


@dataclass
class Forest:
    trees: list[RegressionTree]
    feature_rate: float = 0.5
    sample_rate: float = 0.5
    features: list[np.ndarray] = field(default_factory=list)
    rows: list[np.ndarray] = field(default_factory=list)

    @property
    def n_trees(self) -> int:
        return len(self.trees)

    def predict(self, X) -> np.ndarray:
        return np.mean([t.predict(X) for t in self.trees], axis=0)


def predict(model, x) -> np.ndarray:
    """Route ``x`` (vector or batch) through a tree, forest or ensemble."""
    return model.predict(x)


def candidate_thresholds(x: np.ndarray, split_grid: int) -> np.ndarray:
    levels = np.linspace(0.0, 1.0, split_grid + 2)[1:-1]
    thr = np.unique(np.quantile(x, levels))
    # the right child must be non-empty
    return thr[thr < x.max()]


class _Builder:
    """Greedy grower parameterized by a leaf rule and a batched split scorer."""

    def __init__(self, X, max_depth, split_grid, features, score_splits, min_gain):
        self.X = X
        self.max_depth = max_depth
        self.split_grid = split_grid
        self.features = features
        self.score_splits = score_splits
        self.min_gain = min_gain
        self.nodes: list[list] = []

    def leaf(self, value) -> int:
        self.nodes.append([LEAF, 0.0, LEAF, LEAF, value])
        return len(self.nodes) - 1

    def grow(self, idx: np.ndarray, depth: int, leaf_value: np.ndarray, parent_score: float) -> int:
        node = self.leaf(leaf_value)
        if depth >= self.max_depth or idx.size < 2:
            return node
        candidates = []
        for f in self.features:
            xs = self.X[idx, f]
            for thr in candidate_thresholds(xs, self.split_grid):
                mask = xs <= thr
                candidates.append((f, thr, idx[mask], idx[~mask]))
        if not candidates:
            return node
        scores, children = self.score_splits(candidates)
        # first strict minimum: lowest feature index, then lowest threshold
        best = int(np.argmin(scores))
        if not scores[best] < parent_score - self.min_gain(idx.size, parent_score):
            return node
        f, thr, left_idx, right_idx = candidates[best]
        (lv, ls), (rv, rs) = children[best]
        left = self.grow(left_idx, depth + 1, lv, ls)
        right = self.grow(right_idx, depth + 1, rv, rs)
        self.nodes[node][:4] = [f, thr, left, right]
        return node

    def tree(self) -> RegressionTree:
        feat, thr, left, right, val = zip(*self.nodes)
        return RegressionTree(
            feature=np.array(feat, dtype=int),
            threshold=np.array(thr, dtype=float),
            left=np.array(left, dtype=int),
            right=np.array(right, dtype=int),
            value=np.array(val, dtype=float),
            max_depth=self.max_depth,
        )


def _check_inputs(X, Y, max_depth):
    X = np.atleast_2d(np.asarray(X, dtype=float))
    Y = np.asarray(Y, dtype=float)
    if Y.ndim == 1:
        Y = Y[:, None]
    if X.shape[0] == 0:
        raise ValueError("empty data")
    if X.shape[0] != Y.shape[0]:
        raise ValueError(f"X has {X.shape[0]} rows but targets have {Y.shape[0]}")
    if max_depth < 0:
        raise ValueError("max_depth must be >= 0")
    return X, Y


def fit_mse_tree(X, targets, max_depth: int, split_grid: int = 10, features: Optional[Sequence[int]] = None) -> RegressionTree:
    """CART regression tree minimizing summed squared error over all outputs."""
    X, Y = _check_inputs(X, targets, max_depth)
    features = range(X.shape[1]) if features is None else sorted(features)

    def sse(rows):
        mean = Y[rows].mean(axis=0)
        return mean, float(((Y[rows] - mean) ** 2).sum())

    def score_splits(candidates):
        scores, children = [], []
        for _, _, li, ri in candidates:
            lv, ls = sse(li)
            rv, rs = sse(ri)
            scores.append(ls + rs)
            children.append(((lv, ls), (rv, rs)))
        return np.array(scores), children

    builder = _Builder(X, max_depth, split_grid, features, score_splits,
                       min_gain=lambda n, s: 1e-12 * max(1.0, abs(s)))
    root = np.arange(X.shape[0])
    value, score = sse(root)
    builder.grow(root, 0, value, score)
    return builder.tree()


def fit_spot_tree(
    X,
    costs,
    max_depth: int,
    ctx: DecisionContext,
    split_grid: int = 10,
    features: Optional[Sequence[int]] = None,
) -> RegressionTree:
    """Tree whose leaves predict mean cost and whose splits minimize regret."""
    X, C = _check_inputs(X, costs, max_depth)
    if C.shape[1] != ctx.n_z:
        raise ValueError(f"costs must have {ctx.n_z} columns")
    features = range(X.shape[1]) if features is None else sorted(features)
    _, opt = ctx.oracle(C)
    P = ctx.eval_P

    def group_regret(rows_list, means):
        batch = ctx.solve(np.array(means))
        Z = batch.Z
        quad = 0.5 * np.einsum("ki,ij,kj->k", Z, P, Z)
        out = []
        for k, rows in enumerate(rows_list):
            out.append(float(rows.size * quad[k] + C[rows].sum(axis=0) @ Z[k] - opt[rows].sum()))
        return out

    def score_splits(candidates):
        rows_list, means = [], []
        for _, _, li, ri in candidates:
            rows_list += [li, ri]
            means += [C[li].mean(axis=0), C[ri].mean(axis=0)]
        regrets = group_regret(rows_list, means)
        scores = np.array(regrets[0::2]) + np.array(regrets[1::2])
        children = [
            ((means[2 * k], regrets[2 * k]), (means[2 * k + 1], regrets[2 * k + 1]))
            for k in range(len(candidates))
        ]
        return scores, children

    builder = _Builder(X, max_depth, split_grid, features, score_splits,
                       min_gain=lambda n, s: 1e-8 * (n + abs(s)))
    root = np.arange(X.shape[0])
    value = C.mean(axis=0)
    score = group_regret([root], [value])[0] if max_depth > 0 else 0.0
    builder.grow(root, 0, value, score)
    return builder.tree()


def fit_forest(
    X,
    targets,
    max_depth: int,
    n_trees: int = 100,
    feature_rate: float = 0.5,
    sample_rate: float = 0.5,
    base_fitter: str = "mse",
    rng: Optional[np.random.Generator] = None,
    ctx: Optional[DecisionContext] = None,
    split_grid: int = 10,
) -> Forest:
    """Bagged forest; each tree sees a row subsample and a feature subsample.

    Hidden features are excluded from the split search only; prediction
    routes on the original column indices.
    """
    X, Y = _check_inputs(X, targets, max_depth)
    if n_trees < 1:
        raise ValueError("n_trees must be >= 1")
    if base_fitter not in ("mse", "spot"):
        raise ValueError(f"unknown base fitter {base_fitter!r}")
    if base_fitter == "spot" and ctx is None:
        raise ValueError("spot forests need a DecisionContext")
    rng = np.random.default_rng() if rng is None else rng
    m, d = X.shape
    n_rows = max(1, int(round(sample_rate * m)))
    n_feat = max(1, int(round(feature_rate * d)))
    forest = Forest(trees=[], feature_rate=feature_rate, sample_rate=sample_rate)
    for _ in range(n_trees):
        rows = np.sort(rng.choice(m, size=n_rows, replace=False))
        feats = np.sort(rng.choice(d, size=n_feat, replace=False))
        if base_fitter == "mse":
            tree = fit_mse_tree(X[rows], Y[rows], max_depth, split_grid, features=feats)
        else:
            tree = fit_spot_tree(X[rows], Y[rows], max_depth, ctx, split_grid, features=feats)
        forest.trees.append(tree)
        forest.rows.append(rows)
        forest.features.append(feats)
    return forest
