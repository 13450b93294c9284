import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.optimize import minimize

from conftest import klr_instance
from iivm import klr
from iivm.errors import NumericalError


def fd_gradient(K_V, K_R, T, lam, alpha, h=1e-6):
    G = np.zeros_like(alpha)
    for idx in np.ndindex(*alpha.shape):
        e = np.zeros_like(alpha)
        e[idx] = h
        G[idx] = (klr._q_at(K_V, K_R, T, lam, alpha + e) - klr._q_at(K_V, K_R, T, lam, alpha - e)) / (2 * h)
    return G


def lbfgs_q(K_V, K_R, T, lam):
    shape = (K_V.shape[1], T.shape[1])

    def f(a):
        a = a.reshape(shape)
        P = klr.probabilities(K_V, a)
        return klr.objective(P, T, a, K_R, lam), klr.gradient(K_V, P, T, a, K_R, lam).ravel()

    res = minimize(f, np.zeros(np.prod(shape)), jac=True, method="L-BFGS-B",
                   options={"gtol": 1e-12, "ftol": 1e-15, "maxiter": 20000})
    return res.fun


def test_one_hot_and_binary_targets():
    T = klr.one_hot([1, 3, 2], 3)
    np.testing.assert_array_equal(T, [[1, 0, 0], [0, 0, 1], [0, 1, 0]])
    np.testing.assert_array_equal(klr.one_hot([1, 2, 2], 2, binary=True), [[0], [1], [1]])
    with pytest.raises(ValueError):
        klr.one_hot([0, 1], 2)
    with pytest.raises(ValueError):
        klr.one_hot([1, 2], 3, binary=True)


def test_objective_at_zero_alpha_is_log_k():
    K_V, K_R, T, lam = klr_instance(0, n_classes=3)
    alpha = np.zeros((K_V.shape[1], 3))
    assert klr._q_at(K_V, K_R, T, lam, alpha) == pytest.approx(np.log(3), rel=1e-12)


@pytest.mark.parametrize("C", [2, 3, 4])
def test_analytic_gradient_matches_finite_differences(C):
    K_V, K_R, T, lam = klr_instance(C, n_classes=C)
    rng = np.random.default_rng(1)
    alpha = rng.normal(scale=0.5, size=(K_V.shape[1], T.shape[1]))
    P = klr.probabilities(K_V, alpha)
    G = klr.gradient(K_V, P, T, alpha, K_R, lam)
    np.testing.assert_allclose(G, fd_gradient(K_V, K_R, T, lam, alpha), atol=1e-8)


def test_irls_step_solves_weighted_least_squares_for_working_response():
    # alpha_new = A^-1 (1/N K' R z) with A = 1/N K'RK + lam K_R, per class
    K_V, K_R, T, lam = klr_instance(3, n_classes=3)
    rng = np.random.default_rng(2)
    alpha = rng.normal(scale=0.3, size=(K_V.shape[1], 3))
    state = klr.IrlsState(K_V, K_R, alpha, lam, T)
    new = klr.irls_step(state)
    R, z, N = state.R, state.z, state.N
    for c in range(3):
        A = K_V.T @ (R[:, c:c + 1] * K_V) / N + lam * K_R
        A[np.diag_indices_from(A)] += klr.jitter(K_R)
        b = K_V.T @ (R[:, c] * z[:, c]) / N + klr.jitter(K_R) * alpha[:, c]
        np.testing.assert_allclose(new[:, c], np.linalg.solve(A, b), rtol=1e-7, atol=1e-9)


@pytest.mark.parametrize("seed", range(6))
def test_fit_reaches_stationary_point_and_first_order_optimum(seed):
    C = 2 if seed % 2 else 3
    K_V, K_R, T, lam = klr_instance(seed, n_classes=C, N=45, V=9)
    alpha, hist = klr.fit(K_V, K_R, T, lam, tol=1e-14, gtol=1e-10, max_iter=200)
    assert np.max(np.abs(fd_gradient(K_V, K_R, T, lam, alpha))) < 1e-8
    assert abs(hist[-1] - lbfgs_q(K_V, K_R, T, lam)) < 1e-6
    assert all(b <= a + 1e-12 for a, b in zip(hist, hist[1:]))


def test_centering_leaves_probabilities_and_lowers_penalty():
    K_V, K_R, T, lam = klr_instance(5)
    alpha = np.random.default_rng(0).normal(size=(K_V.shape[1], 3)) + 2.0
    c = klr.center(alpha)
    np.testing.assert_allclose(klr.probabilities(K_V, c), klr.probabilities(K_V, alpha), atol=1e-12)
    assert klr.penalty(c, K_R, lam) <= klr.penalty(alpha, K_R, lam)


def test_singular_normal_matrix_raises_with_condition():
    A = np.array([[1.0, 1.0], [1.0, 1.0]]) * -1
    with pytest.raises(NumericalError) as exc:
        klr.solve_normal(A, np.ones(2))
    assert "condition" in str(exc.value)


def test_empty_import_set_is_trivial():
    T = klr.one_hot([1, 2, 3], 3)
    alpha, hist = klr.fit(np.empty((3, 0)), np.empty((0, 0)), T, 0.1)
    assert alpha.shape == (0, 3)
    assert hist == [pytest.approx(np.log(3))]


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 10_000), st.integers(1, 4), st.floats(-50, 50))
def test_probabilities_on_simplex(seed, C, scale):
    rng = np.random.default_rng(seed)
    K = rng.uniform(size=(6, 4))
    alpha = scale * rng.normal(size=(4, C))
    P = klr.class_probabilities(klr.probabilities(K, alpha))
    assert np.all((P >= 0) & (P <= 1))
    np.testing.assert_allclose(P.sum(axis=1), 1.0, atol=1e-12)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000))
def test_damped_step_never_increases_objective(seed):
    K_V, K_R, T, lam = klr_instance(seed % 50, n_classes=2 + seed % 2, N=30, V=6)
    alpha = np.random.default_rng(seed).normal(scale=3.0, size=(6, T.shape[1]))
    state = klr.IrlsState(K_V, K_R, alpha, lam, T)
    _, Q, _ = klr.damped_step(state)
    assert Q <= state.Q + 1e-12 * max(1.0, abs(state.Q))
