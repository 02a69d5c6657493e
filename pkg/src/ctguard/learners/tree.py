"""CART-style decision tree with exact Gini split search.

Candidate thresholds are the midpoints between consecutive distinct sorted
values of each scanned feature. The chosen split minimizes the weighted
Gini impurity of the two children; ties fall to the lowest feature index,
then the lowest threshold. Splitting continues until a node is pure, the
depth cap is hit, or no candidate satisfies the leaf-size floor.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

FEATURE_BATCH = 256


class LearnerError(Exception):
    pass


class EmptyTrainingSet(LearnerError):
    pass


class DimensionMismatch(LearnerError):
    pass


@dataclass
class DecisionTree:
    """Flat-array tree: feature[i] < 0 marks node i as a leaf."""

    classes: np.ndarray
    feature: np.ndarray
    threshold: np.ndarray
    left: np.ndarray
    right: np.ndarray
    prediction: np.ndarray
    distribution: np.ndarray
    n_features: int
    max_depth: int | None = None
    min_samples_leaf: int = 1

    @property
    def n_nodes(self) -> int:
        return len(self.feature)

    def _leaf_indices(self, X: np.ndarray) -> np.ndarray:
        X = _check_matrix(X, self.n_features)
        node = np.zeros(len(X), dtype=np.int64)
        active = self.feature[node] >= 0
        while active.any():
            rows = np.flatnonzero(active)
            cur = node[rows]
            go_left = X[rows, self.feature[cur]] < self.threshold[cur]
            node[rows] = np.where(go_left, self.left[cur], self.right[cur])
            active = self.feature[node] >= 0
        return node

    def predict(self, X: np.ndarray) -> np.ndarray:
        return self.classes[self.prediction[self._leaf_indices(X)]]

    def scores(self, X: np.ndarray) -> np.ndarray:
        """Per-class fractions of the reached leaf's training members."""
        return self.distribution[self._leaf_indices(X)]


def _check_matrix(X: np.ndarray, n_features: int) -> np.ndarray:
    X = np.asarray(X)
    if X.ndim != 2:
        raise DimensionMismatch(f"expected 2-D matrix, got shape {X.shape}")
    if X.shape[1] != n_features:
        raise DimensionMismatch(f"model wants {n_features} features, matrix has {X.shape[1]}")
    return X


def _best_split(
    X: np.ndarray,
    y_idx: np.ndarray,
    rows: np.ndarray,
    features: np.ndarray,
    n_classes: int,
    min_leaf: int,
) -> tuple[float, int, float] | None:
    """Scan features for the lowest weighted child Gini.

    Returns (weighted_gini, feature, threshold) or None when no candidate
    separates the rows. Features are scanned in ascending index order and
    thresholds in ascending value order, which realizes the tie-break.
    """
    n = len(rows)
    best: tuple[float, int, float] | None = None
    y_rows = y_idx[rows]
    total = np.bincount(y_rows, minlength=n_classes).astype(np.int64)

    for start in range(0, len(features), FEATURE_BATCH):
        feats = features[start : start + FEATURE_BATCH]
        block = X[rows[:, None], feats[None, :]]
        order = np.argsort(block, axis=0, kind="stable")
        sorted_vals = np.take_along_axis(block, order, axis=0)
        sorted_labels = y_rows[order]

        boundary = sorted_vals[:-1] < sorted_vals[1:]
        n_left = np.arange(1, n, dtype=np.int64)
        valid = boundary & ((n_left >= min_leaf) & (n - n_left >= min_leaf))[:, None]
        if not valid.any():
            continue

        sumsq_left = np.zeros((n - 1, len(feats)))
        sumsq_right = np.zeros((n - 1, len(feats)))
        for c in range(n_classes):
            cum = np.cumsum(sorted_labels == c, axis=0)[:-1].astype(np.float64)
            sumsq_left += cum * cum
            rem = total[c] - cum
            sumsq_right += rem * rem
        nl = n_left[:, None].astype(np.float64)
        nr = n - nl
        weighted = (nl - sumsq_left / nl + nr - sumsq_right / nr) / n
        weighted[~valid] = np.inf

        flat = weighted.T.ravel()  # feature-major: lowest feature, then lowest threshold
        pos = int(np.argmin(flat))
        score = float(flat[pos])
        if not np.isfinite(score):
            continue
        f_local, p = divmod(pos, n - 1)
        lo = float(sorted_vals[p, f_local])
        hi = float(sorted_vals[p + 1, f_local])
        thr = (lo + hi) / 2.0
        if thr <= lo:
            thr = hi
        if best is None or score < best[0]:
            best = (score, int(feats[f_local]), thr)
    return best


def fit_tree(
    X: np.ndarray,
    y: np.ndarray,
    *,
    max_depth: int | None = None,
    min_samples_leaf: int = 1,
    classes: np.ndarray | None = None,
    sample_indices: np.ndarray | None = None,
    feature_rng: np.random.Generator | None = None,
    features_per_split: int | None = None,
) -> DecisionTree:
    """Grow a tree on X, y.

    sample_indices restricts (with repetition allowed) which rows train the
    tree; feature_rng plus features_per_split draws a fresh uniform feature
    subset at every split. Both default to using everything, which is the
    plain single-tree estimator.
    """
    X = np.asarray(X)
    y = np.asarray(y)
    if X.ndim != 2:
        raise DimensionMismatch(f"expected 2-D matrix, got shape {X.shape}")
    if len(X) == 0 or len(y) == 0:
        raise EmptyTrainingSet("no training rows")
    if len(X) != len(y):
        raise DimensionMismatch(f"{len(X)} rows vs {len(y)} labels")
    if min_samples_leaf < 1:
        raise ValueError("min_samples_leaf must be >= 1")

    if classes is None:
        classes = np.unique(y)
    n_classes = len(classes)
    y_idx = np.searchsorted(classes, y)
    if not np.array_equal(classes[y_idx], y):
        raise LearnerError("labels outside the provided class set")

    d = X.shape[1]
    m = d if features_per_split is None else min(features_per_split, d)
    all_features = np.arange(d)
    rows0 = np.arange(len(X)) if sample_indices is None else np.asarray(sample_indices)

    feature: list[int] = []
    threshold: list[float] = []
    left: list[int] = []
    right: list[int] = []
    prediction: list[int] = []
    distribution: list[np.ndarray] = []

    def new_node() -> int:
        feature.append(-1)
        threshold.append(0.0)
        left.append(-1)
        right.append(-1)
        prediction.append(0)
        distribution.append(np.zeros(n_classes))
        return len(feature) - 1

    # Explicit depth-first stack; recursion would overflow on chain-shaped
    # trees. side: 0 wires the new node as parent's left child, 1 as right.
    stack: list[tuple[np.ndarray, int, int, int]] = [(rows0, 0, -1, 0)]
    while stack:
        rows, depth, parent, side = stack.pop()
        node = new_node()
        if parent >= 0:
            (left if side == 0 else right)[parent] = node
        counts = np.bincount(y_idx[rows], minlength=n_classes).astype(np.float64)
        distribution[node] = counts / counts.sum()
        prediction[node] = int(np.argmax(counts))

        pure = np.count_nonzero(counts) <= 1
        depth_capped = max_depth is not None and depth >= max_depth
        if pure or depth_capped or len(rows) < 2 * min_samples_leaf:
            continue

        if feature_rng is not None and m < d:
            feats = np.sort(feature_rng.choice(d, size=m, replace=False))
        else:
            feats = all_features
        found = _best_split(X, y_idx, rows, feats, n_classes, min_samples_leaf)
        if found is None:
            continue
        _, f, thr = found
        go_left = X[rows, f] < thr
        feature[node] = f
        threshold[node] = thr
        stack.append((rows[~go_left], depth + 1, node, 1))
        stack.append((rows[go_left], depth + 1, node, 0))
    return DecisionTree(
        classes=classes,
        feature=np.array(feature, dtype=np.int32),
        threshold=np.array(threshold, dtype=np.float64),
        left=np.array(left, dtype=np.int32),
        right=np.array(right, dtype=np.int32),
        prediction=np.array(prediction, dtype=np.int32),
        distribution=np.array(distribution, dtype=np.float64),
        n_features=d,
        max_depth=max_depth,
        min_samples_leaf=min_samples_leaf,
    )
