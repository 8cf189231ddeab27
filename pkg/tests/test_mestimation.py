import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mrt_integration.errors import NonConvergence, SingularBread, SingularNormalEquations
from mrt_integration.mestimation import (
    EquationBlock,
    StackedSystem,
    block_jacobian_check,
    delta_method,
    finite_difference_jacobian,
    sandwich_covariance,
    solve_system,
    weighted_lstsq,
)


def mean_block(name, y, reads=(), shift=None, analytic=True):
    """Score ``y_i - shift(params) - theta``; solved by Newton unless analytic."""
    y = np.asarray(y, dtype=float)

    def score(params):
        off = shift(params) if shift else 0.0
        return (y - off - params[name][0])[:, None]

    jac = (lambda params: {name: np.array([[-1.0]])}) if analytic else None
    return EquationBlock(name, 1, score, reads, None, jac)


def test_single_mean_block():
    sys_ = StackedSystem([mean_block("mu", [1, 2, 3])], 3)
    assert solve_system(sys_)[0] == pytest.approx(2.0, abs=1e-12)


def test_two_stage_residual_mean():
    y = np.array([1.0, 2.0, 3.0])
    sys_ = StackedSystem(
        [mean_block("mu", y), mean_block("theta", y, ("mu",), lambda p: p["mu"][0])], 3
    )
    theta = solve_system(sys_)
    np.testing.assert_allclose(theta, [2.0, 0.0], atol=1e-12)


def test_weighted_least_squares_closed_form():
    # sum w y / sum w = (0 + 0 + 12) / 6
    coef = weighted_lstsq(np.ones((3, 1)), np.array([0.0, 0.0, 3.0]), np.array([1.0, 1.0, 4.0]))
    assert coef[0] == pytest.approx(2.0, abs=1e-14)


def test_rank_deficient_design():
    Z = np.column_stack([np.ones(4), np.ones(4)])
    with pytest.raises(SingularNormalEquations):
        weighted_lstsq(Z, np.arange(4.0), np.ones(4))


def test_sandwich_for_a_mean():
    sys_ = StackedSystem([mean_block("mu", [1, 2, 3])], 3)
    fit = sandwich_covariance(sys_, solve_system(sys_), dof_adjust=False)
    assert fit.bread[0, 0] == pytest.approx(1.0)
    assert fit.meat[0, 0] == pytest.approx(2 / 3)
    assert fit.sigma_hat[0, 0] == pytest.approx(2 / 3)
    assert fit.covariance[0, 0] == pytest.approx(2 / 9)


def test_dof_factor_exact():
    rng = np.random.default_rng(0)
    y = rng.normal(size=10)
    x = rng.normal(size=10)
    sys_ = StackedSystem([mean_block("a", y), mean_block("b", x)], 10)
    theta = solve_system(sys_)
    raw = sandwich_covariance(sys_, theta, dof_adjust=False)
    adj = sandwich_covariance(sys_, theta, dof_adjust=True)
    np.testing.assert_allclose(adj.sigma_hat, raw.sigma_hat * 1.25, rtol=1e-15)
    assert adj.dof_adjusted and not raw.dof_adjusted


def _ols_block(X, y):
    def score(params):
        return X * (y - X @ params["b"])[:, None]

    return EquationBlock(
        "b", X.shape[1], score, (), lambda p: np.linalg.lstsq(X, y, rcond=None)[0],
        lambda p: {"b": -X.T @ X / X.shape[0]},
    )


def test_ols_sandwich_matches_classical_covariance():
    rng = np.random.default_rng(1)
    n = 20000
    X = np.column_stack([np.ones(n), rng.normal(size=n), rng.uniform(-1, 1, n)])
    y = X @ np.array([1.0, -2.0, 0.5]) + rng.normal(0, 1.5, n)
    sys_ = StackedSystem([_ols_block(X, y)], n)
    fit = sandwich_covariance(sys_, solve_system(sys_), dof_adjust=False)
    classical = 1.5**2 * np.linalg.inv(X.T @ X)
    np.testing.assert_allclose(np.diag(fit.covariance), np.diag(classical), rtol=0.05)


def test_participant_order_invariance():
    rng = np.random.default_rng(2)
    n = 200
    X = np.column_stack([np.ones(n), rng.normal(size=n)])
    y = X @ [0.5, 1.0] + rng.standard_t(3, n)
    perm = rng.permutation(n)
    fits = []
    for idx in (np.arange(n), perm):
        sys_ = StackedSystem([_ols_block(X[idx], y[idx])], n)
        fits.append(sandwich_covariance(sys_, solve_system(sys_)))
    np.testing.assert_allclose(fits[0].sigma_hat, fits[1].sigma_hat, rtol=1e-10)


def test_nuisance_propagation_via_finite_differences():
    # theta = mean(y - mu) where mu = mean(x): Var(theta) follows the influence y - x.
    rng = np.random.default_rng(3)
    n = 500
    x = rng.normal(size=n)
    y = x + rng.normal(size=n)
    mu = mean_block("mu", x)
    th = mean_block("theta", y, ("mu",), lambda p: p["mu"][0])
    sys_ = StackedSystem([mu, th], n)
    fit = sandwich_covariance(sys_, solve_system(sys_), dof_adjust=False)
    infl = (y - y.mean()) - (x - x.mean())
    assert fit.sigma_hat[1, 1] == pytest.approx(np.mean(infl**2), rel=1e-8)


def test_sigma_symmetric_psd():
    rng = np.random.default_rng(4)
    n = 300
    X = np.column_stack([np.ones(n), rng.normal(size=(n, 3))])
    y = X @ rng.normal(size=4) + rng.normal(size=n)
    sys_ = StackedSystem([_ols_block(X, y)], n)
    fit = sandwich_covariance(sys_, solve_system(sys_))
    assert np.array_equal(fit.sigma_hat, fit.sigma_hat.T)
    assert np.linalg.eigvalsh(fit.sigma_hat).min() >= -1e-8 * np.linalg.norm(fit.sigma_hat)


def test_newton_block_without_solver():
    # score 2 - exp(theta) has root log 2; no closed-form solver supplied.
    def score(params):
        return np.full((4, 1), 2.0 - np.exp(params["t"][0]))

    sys_ = StackedSystem([EquationBlock("t", 1, score)], 4)
    assert solve_system(sys_)[0] == pytest.approx(np.log(2), abs=1e-9)


def test_non_convergence():
    def score(params):
        return np.full((4, 1), np.exp(params["t"][0]))

    sys_ = StackedSystem([EquationBlock("t", 1, score)], 4)
    with pytest.raises(NonConvergence):
        solve_system(sys_, max_iter=20)


def test_singular_bread():
    def score(params):
        return np.full((4, 1), params["t"][0] ** 3)

    block = EquationBlock(
        "t", 1, score, solve=lambda p: np.array([0.0]), jacobian=lambda p: {"t": np.zeros((1, 1))}
    )
    sys_ = StackedSystem([block], 4)
    with pytest.raises(SingularBread):
        sandwich_covariance(sys_, solve_system(sys_))


def test_delta_identity():
    sys_ = StackedSystem([mean_block("mu", [1.0, 4.0, 2.0, 7.0])], 4)
    fit = sandwich_covariance(sys_, solve_system(sys_))
    _, cov = delta_method(fit, lambda th: th, lambda th: np.eye(1))
    np.testing.assert_allclose(cov, fit.covariance)


def test_delta_square():
    from mrt_integration.mestimation import FitResult

    fit = FitResult(np.array([3.0]), np.array([[4.0]]), np.eye(1), np.eye(1), 1, False, {"t": slice(0, 1)})
    est, cov = delta_method(fit, lambda th: th**2, lambda th: np.array([[2 * th[0]]]))
    assert est[0] == 9.0
    assert cov[0, 0] == pytest.approx(144.0)


def test_delta_jacobian_shape_checked():
    sys_ = StackedSystem([mean_block("mu", [1.0, 2.0, 4.0])], 3)
    fit = sandwich_covariance(sys_, solve_system(sys_))
    with pytest.raises(ValueError):
        delta_method(fit, lambda th: th, lambda th: np.eye(2))


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000))
def test_analytic_jacobian_matches_finite_differences(seed):
    rng = np.random.default_rng(seed)
    n = 40
    X = np.column_stack([np.ones(n), rng.normal(size=n)])
    y = rng.normal(size=n)
    sys_ = StackedSystem([_ols_block(X, y)], n)
    theta = rng.normal(size=2) * 3
    assert max(block_jacobian_check(sys_, theta).values()) <= 1e-4


def test_finite_difference_of_linear_map_is_exact():
    A = np.array([[1.0, 2.0], [3.0, -1.0]])
    J = finite_difference_jacobian(lambda th: A @ th, np.array([0.3, -0.7]))
    np.testing.assert_allclose(J, A, atol=1e-8)


def test_system_rejects_forward_reads():
    with pytest.raises(ValueError):
        StackedSystem([mean_block("b", [1.0], ("a",), lambda p: 0.0), mean_block("a", [1.0])], 1)
