from __future__ import annotations

import numpy as np
import pytest

from ctguard.learners import (
    DimensionMismatch,
    KernelKind,
    NonConvergence,
    SingleClassInput,
    fit_svm,
    kernel_matrix,
    resolve_gamma,
)

cvxopt = pytest.importorskip("cvxopt")


def qp_reference_dual(K, y_pm, C):
    """Solve the dual with cvxopt and return (alpha, objective).

    min (1/2) a' Q a - 1' a   s.t.  0 <= a <= C,  y' a = 0
    where Q = (y y') * K.
    """
    from cvxopt import matrix, solvers

    n = len(y_pm)
    Q = matrix(np.outer(y_pm, y_pm) * K)
    p = matrix(-np.ones(n))
    G = matrix(np.vstack([-np.eye(n), np.eye(n)]))
    h = matrix(np.hstack([np.zeros(n), np.full(n, C)]))
    A = matrix(y_pm.astype(float), (1, n))
    b = matrix(0.0)
    solvers.options["show_progress"] = False
    solvers.options["abstol"] = 1e-10
    solvers.options["reltol"] = 1e-10
    sol = solvers.qp(Q, p, G, h, A, b)
    alpha = np.asarray(sol["x"]).ravel()
    obj = 0.5 * alpha @ (np.outer(y_pm, y_pm) * K) @ alpha - alpha.sum()
    return alpha, obj


def dual_objective(alpha, K, y_pm):
    return 0.5 * alpha @ (np.outer(y_pm, y_pm) * K) @ alpha - alpha.sum()


def test_symmetric_pair_boundary_midway():
    X = np.array([[0.0], [1.0]])
    y = np.array([0, 1])
    model = fit_svm(X, y, kernel=KernelKind.LINEAR, C=10.0)
    scores = model.scores(np.array([[0.5]]))
    assert scores.shape == (1, 2)
    assert abs(scores[0, 1]) < 1e-6  # decision value ~0 at the midpoint
    assert model.predict(np.array([[0.0], [1.0]])).tolist() == [0, 1]


def test_xor_needs_rbf():
    X = np.array([[0.0, 0.0], [1.0, 1.0], [0.0, 1.0], [1.0, 0.0]])
    y = np.array([0, 0, 1, 1])
    model = fit_svm(X, y, kernel=KernelKind.RBF, gamma=1.0, C=100.0)
    assert np.array_equal(model.predict(X), y)


def test_dual_coefficients_balance():
    rng = np.random.default_rng(20)
    X = rng.normal(size=(40, 3))
    y = (X[:, 0] + 0.3 * rng.normal(size=40) > 0).astype(int)
    if len(np.unique(y)) < 2:
        pytest.skip("degenerate draw")
    model = fit_svm(X, y, kernel=KernelKind.LINEAR, C=1.0)
    machine = model.machines[0]
    # dual_coef holds alpha_s * y_s, so its sum is the equality constraint.
    assert abs(float(machine.dual_coef.sum())) <= 1e-9


def test_kkt_residuals_within_tolerance():
    rng = np.random.default_rng(21)
    X = rng.normal(size=(50, 4))
    y = (X @ np.array([1.0, -0.5, 0.2, 0.0]) > 0).astype(int)
    tol = 1e-3
    model = fit_svm(X, y, kernel=KernelKind.RBF, C=5.0, tol=tol)
    machine = model.machines[0]
    alpha = machine.train_alpha
    assert alpha is not None
    y_pm = np.where(y == model.classes[1], 1.0, -1.0)
    K = kernel_matrix(machine.kernel, X, X, machine.gamma)
    u = K @ (alpha * y_pm) + machine.bias
    margins = y_pm * u
    # complementarity residuals for the three alpha regimes
    free = (alpha > 1e-9) & (alpha < model.C - 1e-9)
    at_zero = alpha <= 1e-9
    at_c = alpha >= model.C - 1e-9
    assert np.all(np.abs(margins[free] - 1.0) <= tol)
    assert np.all(margins[at_zero] >= 1.0 - tol)
    assert np.all(margins[at_c] <= 1.0 + tol)


@pytest.mark.parametrize("kernel", [KernelKind.LINEAR, KernelKind.RBF])
def test_dual_objective_matches_qp_solver(kernel):
    rng = np.random.default_rng(22)
    for trial in range(4):
        X = rng.normal(size=(30, 3))
        y = rng.integers(0, 2, size=30)
        if len(np.unique(y)) < 2:
            continue
        C = float(rng.uniform(0.5, 5.0))
        gamma = resolve_gamma(X, None) if kernel is KernelKind.RBF else None
        model = fit_svm(X, y, kernel=kernel, gamma=gamma, C=C, tol=1e-8,
                        max_iter=200_000)
        machine = model.machines[0]
        y_pm = np.where(y == model.classes[1], 1.0, -1.0)
        K = kernel_matrix(kernel, X, X, machine.gamma)
        _, ref_obj = qp_reference_dual(K, y_pm, C)
        smo_obj = dual_objective(machine.train_alpha, K, y_pm)
        assert smo_obj <= ref_obj + 1e-4, f"trial {trial}: {smo_obj} vs {ref_obj}"
        assert abs(smo_obj - ref_obj) <= 1e-4, f"trial {trial}"


def test_three_class_one_vs_rest():
    rng = np.random.default_rng(23)
    centers = [(-4.0, 0.0), (4.0, 0.0), (0.0, 4.0)]
    X = np.vstack([rng.normal(loc=c, scale=0.5, size=(30, 2)) for c in centers])
    y = np.repeat(np.arange(3), 30)
    model = fit_svm(X, y, kernel=KernelKind.LINEAR, C=10.0)
    assert len(model.machines) == 3
    acc = float(np.mean(model.predict(X) == y))
    assert acc >= 0.97
    scores = model.scores(X)
    assert scores.shape == (90, 3)


def test_single_class_rejected():
    X = np.zeros((5, 2))
    with pytest.raises(SingleClassInput):
        fit_svm(X, np.zeros(5, dtype=int))


def test_non_convergence_carries_partial_machine():
    rng = np.random.default_rng(24)
    X = rng.normal(size=(60, 2))
    y = rng.integers(0, 2, size=60)  # noisy labels, slow convergence
    with pytest.raises(NonConvergence) as err:
        fit_svm(X, y, kernel=KernelKind.RBF, C=1000.0, tol=1e-12, max_iter=5)
    assert err.value.max_iter == 5
    assert err.value.gap > 1e-12
    assert err.value.partial is not None
    assert err.value.partial.decision(X).shape == (60,)


def test_gamma_default_scales_with_variance():
    rng = np.random.default_rng(25)
    X = rng.normal(size=(20, 4))
    g = resolve_gamma(X, None)
    assert g == pytest.approx(1.0 / (4 * float(X.var())))
    # zero variance: variance is floored so gamma stays finite
    assert resolve_gamma(np.zeros((5, 3)), None) == pytest.approx(1.0 / 3.0)
    assert resolve_gamma(X, 0.25) == 0.25


def test_deterministic_refit():
    rng = np.random.default_rng(26)
    X = rng.normal(size=(40, 3))
    y = rng.integers(0, 2, size=40)
    a = fit_svm(X, y, kernel=KernelKind.RBF, C=2.0)
    b = fit_svm(X, y, kernel=KernelKind.RBF, C=2.0)
    assert np.array_equal(a.machines[0].dual_coef, b.machines[0].dual_coef)
    assert a.machines[0].bias == b.machines[0].bias


def test_predict_dimension_check():
    X = np.array([[0.0, 0.0], [1.0, 1.0]])
    model = fit_svm(X, np.array([0, 1]), kernel=KernelKind.LINEAR)
    with pytest.raises(DimensionMismatch):
        model.predict(np.zeros((3, 5)))


def test_string_class_labels():
    X = np.array([[0.0], [0.1], [1.0], [1.1]])
    y = np.array(["clean", "clean", "tampered", "tampered"])
    model = fit_svm(X, y, kernel=KernelKind.LINEAR, C=10.0)
    assert model.predict(np.array([[-0.2], [1.3]])).tolist() == ["clean", "tampered"]
