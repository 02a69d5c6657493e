"""Random forest over the CART trees: bagging plus per-split feature draws.

Tree t derives its generator from seed XOR t, so trees can be fit in any
order or in parallel without changing the model. Prediction is a majority
vote over per-tree class votes; vote ties fall to the lowest class index.
"""
from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .tree import DecisionTree, DimensionMismatch, EmptyTrainingSet, fit_tree


@dataclass
class RandomForest:
    classes: np.ndarray
    trees: list[DecisionTree]
    seed: int
    bootstrap: bool
    features_per_split: int
    n_features: int

    @property
    def n_trees(self) -> int:
        return len(self.trees)

    def scores(self, X: np.ndarray) -> np.ndarray:
        """Fraction of trees voting for each class."""
        votes = np.zeros((len(X), len(self.classes)))
        for tree in self.trees:
            votes[np.arange(len(X)), tree.prediction[tree._leaf_indices(X)]] += 1.0
        return votes / self.n_trees

    def predict(self, X: np.ndarray) -> np.ndarray:
        return self.classes[np.argmax(self.scores(X), axis=1)]


def fit_forest(
    X: np.ndarray,
    y: np.ndarray,
    *,
    n_trees: int = 100,
    seed: int = 0,
    bootstrap: bool = True,
    features_per_split: int | None = None,
    max_depth: int | None = None,
    min_samples_leaf: int = 1,
    n_jobs: int = 1,
) -> RandomForest:
    """Train n_trees bagged trees.

    Each tree draws a bootstrap resample of the rows (size n, with
    replacement) and, at every split, a uniform feature subset of
    features_per_split (default floor(sqrt(d))).
    """
    X = np.asarray(X)
    y = np.asarray(y)
    if X.ndim != 2:
        raise DimensionMismatch(f"expected 2-D matrix, got shape {X.shape}")
    if len(X) == 0:
        raise EmptyTrainingSet("no training rows")
    if n_trees < 1:
        raise ValueError("n_trees must be >= 1")
    d = X.shape[1]
    m = int(math.isqrt(d)) if features_per_split is None else min(features_per_split, d)
    classes = np.unique(y)
    n = len(X)

    def fit_one(t: int) -> DecisionTree:
        rng = np.random.default_rng(seed ^ t)
        indices = rng.integers(0, n, size=n) if bootstrap else np.arange(n)
        return fit_tree(
            X,
            y,
            max_depth=max_depth,
            min_samples_leaf=min_samples_leaf,
            classes=classes,
            sample_indices=indices,
            feature_rng=rng,
            features_per_split=m,
        )

    if n_jobs > 1:
        with ThreadPoolExecutor(max_workers=n_jobs) as pool:
            trees = list(pool.map(fit_one, range(n_trees)))
    else:
        trees = [fit_one(t) for t in range(n_trees)]
    return RandomForest(
        classes=classes,
        trees=trees,
        seed=seed,
        bootstrap=bootstrap,
        features_per_split=m,
        n_features=d,
    )
