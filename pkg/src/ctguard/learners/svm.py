"""Soft-margin SVM trained by sequential minimal optimization.

Working pairs are chosen by maximal KKT violation: i is the most violating
index among those that can grow along +y, j the most violating among those
that can shrink, and training stops when the violation gap drops under
tol. The gradient of the dual objective is maintained incrementally, so
each iteration costs two kernel columns. Multiclass problems train a
one-vs-rest machine per class; scores are signed margins.
"""
from __future__ import annotations

from collections import OrderedDict
from dataclasses import dataclass
from enum import Enum

import numpy as np

from .tree import DimensionMismatch, EmptyTrainingSet, LearnerError

FULL_KERNEL_LIMIT = 8192
_EPS = 1e-12


class SingleClassInput(LearnerError):
    pass


class NonConvergence(LearnerError):
    def __init__(self, max_iter: int, gap: float, partial=None):
        self.max_iter = max_iter
        self.gap = gap
        self.partial = partial
        super().__init__(f"no convergence after {max_iter} iterations (gap {gap:.3g})")


class KernelKind(str, Enum):
    LINEAR = "LINEAR"
    RBF = "RBF"


def resolve_gamma(X: np.ndarray, gamma: float | None) -> float:
    """Default bandwidth: 1 / (n_features * variance of all entries)."""
    if gamma is not None:
        return float(gamma)
    var = float(np.var(X))
    if var <= 0:
        var = 1.0
    return 1.0 / (X.shape[1] * var)


def kernel_matrix(kind: KernelKind, A: np.ndarray, B: np.ndarray, gamma: float) -> np.ndarray:
    A = np.asarray(A, dtype=np.float64)
    B = np.asarray(B, dtype=np.float64)
    lin = A @ B.T
    if kind is KernelKind.LINEAR:
        return lin
    aa = np.sum(A * A, axis=1)[:, None]
    bb = np.sum(B * B, axis=1)[None, :]
    sq = np.maximum(aa + bb - 2.0 * lin, 0.0)
    return np.exp(-gamma * sq)


class _KernelCache:
    """Kernel column provider: full matrix for small n, LRU rows beyond."""

    def __init__(self, X: np.ndarray, kind: KernelKind, gamma: float, limit: int = FULL_KERNEL_LIMIT):
        self.X = np.asarray(X, dtype=np.float64)
        self.kind = kind
        self.gamma = gamma
        n = len(X)
        self.full = None
        self.rows: OrderedDict[int, np.ndarray] = OrderedDict()
        self.limit = limit
        if n <= limit:
            self.full = kernel_matrix(kind, self.X, self.X, gamma)
        self.diag = (
            np.diagonal(self.full).copy()
            if self.full is not None
            else (np.ones(n) if kind is KernelKind.RBF else np.sum(self.X * self.X, axis=1))
        )

    def column(self, i: int) -> np.ndarray:
        if self.full is not None:
            return self.full[:, i]
        row = self.rows.get(i)
        if row is None:
            row = kernel_matrix(self.kind, self.X, self.X[i : i + 1], self.gamma)[:, 0]
            self.rows[i] = row
            if len(self.rows) > self.limit:
                self.rows.popitem(last=False)
        else:
            self.rows.move_to_end(i)
        return row


@dataclass
class _BinaryMachine:
    support_vectors: np.ndarray
    dual_coef: np.ndarray  # alpha_s * y_s over support vectors
    bias: float
    kernel: KernelKind
    gamma: float
    # training diagnostics; train_alpha is not persisted
    iterations: int
    violation_gap: float
    train_alpha: np.ndarray | None = None

    def decision(self, X: np.ndarray) -> np.ndarray:
        K = kernel_matrix(self.kernel, np.asarray(X, dtype=np.float64), self.support_vectors, self.gamma)
        return K @ self.dual_coef + self.bias


def _smo(
    cache: _KernelCache, y_pm: np.ndarray, C: float, tol: float, max_iter: int
) -> tuple[np.ndarray, float, int, float, bool]:
    """Returns (alpha, bias, iterations, final violation gap, converged)."""
    n = len(y_pm)
    alpha = np.zeros(n)
    v = y_pm.astype(np.float64).copy()  # v_t = y_t - sum_s alpha_s y_s K(s, t)
    pos = y_pm > 0
    gap = np.inf
    m = M = None
    converged = False
    it = 0
    while it < max_iter:
        can_grow = np.where(pos, alpha < C - _EPS, alpha > _EPS)
        can_shrink = np.where(pos, alpha > _EPS, alpha < C - _EPS)
        if not can_grow.any() or not can_shrink.any():
            gap = 0.0
            converged = True
            break
        up = np.where(can_grow, v, -np.inf)
        lo = np.where(can_shrink, v, np.inf)
        i = int(np.argmax(up))
        j = int(np.argmin(lo))
        m, M = float(v[i]), float(v[j])
        gap = m - M
        if gap < tol:
            converged = True
            break

        k_i = cache.column(i)
        k_j = cache.column(j)
        eta = cache.diag[i] + cache.diag[j] - 2.0 * k_i[j]
        if eta < _EPS:
            eta = _EPS
        lam = gap / eta
        room_i = (C - alpha[i]) if pos[i] else alpha[i]
        room_j = alpha[j] if pos[j] else (C - alpha[j])
        lam = min(lam, room_i, room_j)

        alpha[i] += lam if pos[i] else -lam
        alpha[j] += -lam if pos[j] else lam
        np.clip(alpha, 0.0, C, out=alpha)
        v -= lam * (k_i - k_j)
        it += 1

    free = (alpha > _EPS) & (alpha < C - _EPS)
    if free.any():
        bias = float(np.mean(v[free]))
    elif m is not None:
        bias = (m + M) / 2.0
    else:
        bias = 0.0
    return alpha, bias, it, float(max(gap, 0.0)), converged


def _fit_binary(
    X: np.ndarray,
    y_pm: np.ndarray,
    C: float,
    kernel: KernelKind,
    gamma: float,
    tol: float,
    max_iter: int,
) -> _BinaryMachine:
    cache = _KernelCache(X, kernel, gamma)
    alpha, bias, iters, gap, converged = _smo(cache, y_pm, C, tol, max_iter)
    sv = alpha > _EPS
    machine = _BinaryMachine(
        support_vectors=np.asarray(X, dtype=np.float64)[sv].copy(),
        dual_coef=(alpha * y_pm)[sv].copy(),
        bias=bias,
        kernel=kernel,
        gamma=gamma,
        iterations=iters,
        violation_gap=gap,
        train_alpha=alpha,
    )
    if not converged:
        raise NonConvergence(max_iter, gap, partial=machine)
    return machine


@dataclass
class SvmModel:
    classes: np.ndarray
    machines: list[_BinaryMachine]  # one for binary, one per class otherwise
    C: float
    kernel: KernelKind
    gamma: float
    tol: float
    n_features: int

    def scores(self, X: np.ndarray) -> np.ndarray:
        """Signed margins: one-vs-rest per class, (-f, +f) for binary."""
        X = np.asarray(X)
        if X.ndim != 2 or X.shape[1] != self.n_features:
            raise DimensionMismatch(f"model wants {self.n_features} features, got {X.shape}")
        if len(self.classes) == 2:
            f = self.machines[0].decision(X)
            return np.stack([-f, f], axis=1)
        return np.stack([mach.decision(X) for mach in self.machines], axis=1)

    def predict(self, X: np.ndarray) -> np.ndarray:
        return self.classes[np.argmax(self.scores(X), axis=1)]


def fit_svm(
    X: np.ndarray,
    y: np.ndarray,
    *,
    C: float = 1.0,
    kernel: KernelKind = KernelKind.RBF,
    gamma: float | None = None,
    tol: float = 1e-3,
    max_iter: int = 100_000,
) -> SvmModel:
    """Train an SVM; binary label sets train one machine, larger sets
    train one-vs-rest machines in class order."""
    X = np.asarray(X)
    y = np.asarray(y)
    if X.ndim != 2:
        raise DimensionMismatch(f"expected 2-D matrix, got shape {X.shape}")
    if len(X) == 0:
        raise EmptyTrainingSet("no training rows")
    if len(X) != len(y):
        raise DimensionMismatch(f"{len(X)} rows vs {len(y)} labels")
    if C <= 0:
        raise ValueError("C must be positive")
    classes = np.unique(y)
    if len(classes) < 2:
        raise SingleClassInput(f"need at least 2 classes, got {classes!r}")
    g = resolve_gamma(X, gamma)

    machines: list[_BinaryMachine] = []
    if len(classes) == 2:
        y_pm = np.where(y == classes[1], 1.0, -1.0)
        machines.append(_fit_binary(X, y_pm, C, kernel, g, tol, max_iter))
    else:
        for cls in classes:
            y_pm = np.where(y == cls, 1.0, -1.0)
            machines.append(_fit_binary(X, y_pm, C, kernel, g, tol, max_iter))
    return SvmModel(
        classes=classes,
        machines=machines,
        C=C,
        kernel=kernel,
        gamma=g,
        tol=tol,
        n_features=X.shape[1],
    )
