import math

import numpy as np
import pytest
from sklearn.linear_model import ElasticNet, Lasso

from src.core.errors import ConvergenceError, RankDeficiencyError, ValidationError
from src.core.regression import (
    LOG_LAMBDA_FLOOR,
    LOG_LAMBDA_STEP,
    center_and_scale,
    compiled_elastic_net_path,
    elastic_net_cv,
    elastic_net_path,
    lasso_path,
    make_lambda_grid,
    ols_refit_bic,
)


def random_instance(seed: int, n: int = 10, k: int = 15):
    rng = np.random.default_rng(seed)
    X = np.where(rng.random((n, k)) < 0.4, 1.0, -1.0)
    # no constant columns
    X[0, :] = 1.0
    X[1, :] = -1.0
    b = np.zeros(k)
    b[rng.choice(k, size=2, replace=False)] = rng.choice([-2.0, 2.0], size=2)
    y = X @ b + rng.standard_normal(n)
    return X, y


def kkt_residual(data, scaled, lam, nonneg=False):
    gradient = data.X_cs.T @ (data.y_c - data.X_cs @ scaled) / data.n
    worst = 0.0
    for g, b in zip(gradient, scaled):
        if b != 0.0:
            worst = max(worst, abs(g - lam * np.sign(b)))
        elif nonneg:
            worst = max(worst, g - lam, 0.0)
        else:
            worst = max(worst, abs(g) - lam, 0.0)
    return worst


# ============================================================
# Centering and grid
# ============================================================

def test_center_and_scale_normalizes_columns():
    X, y = random_instance(0)
    data = center_and_scale(X, y)
    assert np.allclose(data.X_cs.mean(axis=0), 0.0, atol=1e-12)
    assert np.allclose((data.X_cs ** 2).sum(axis=0), data.n)
    assert data.y_c.mean() == pytest.approx(0.0, abs=1e-12)


def test_center_and_scale_rejects_constant_column():
    X = np.array([[1.0, 1.0], [1.0, -1.0], [1.0, 1.0]])
    with pytest.raises(ValidationError, match="Constant predictor 'C1'"):
        center_and_scale(X, np.array([1.0, 2.0, 3.0]), column_names=["C1", "C2"])


def test_lambda_grid_steps_down_to_floor():
    X, y = random_instance(1)
    data = center_and_scale(X, y)
    grid = make_lambda_grid(data)
    top = math.log(np.max(np.abs(data.X_cs.T @ data.y_c)))
    assert grid.log_values[0] == pytest.approx(top)
    assert grid.log_values[-1] == LOG_LAMBDA_FLOOR
    steps = np.diff(grid.log_values)
    assert np.allclose(steps[:-1], -LOG_LAMBDA_STEP)
    assert -LOG_LAMBDA_STEP - 1e-12 <= steps[-1] < 0


def test_lambda_grid_for_flat_response_is_the_floor():
    X, _ = random_instance(2)
    data = center_and_scale(X, np.full(X.shape[0], 3.0))
    assert make_lambda_grid(data).log_values.tolist() == [LOG_LAMBDA_FLOOR]


# ============================================================
# Coordinate descent
# ============================================================

@pytest.mark.parametrize("seed", range(20))
def test_lasso_path_satisfies_kkt_and_matches_reference_solver(seed):
    X, y = random_instance(seed, n=12, k=15)
    data = center_and_scale(X, y)
    grid = make_lambda_grid(data)
    path = lasso_path(data, grid, tol=1e-10)
    for lam, scaled in zip(grid.lambdas, path.coefficients_cs):
        assert kkt_residual(data, scaled, lam) <= 1e-6
        reference = Lasso(alpha=lam, fit_intercept=False, tol=1e-14, max_iter=1_000_000)
        reference.fit(data.X_cs, data.y_c)
        # k > n: coefficients need not be unique, the fit is
        assert np.allclose(data.X_cs @ scaled, data.X_cs @ reference.coef_, atol=1e-4)


@pytest.mark.parametrize("seed", range(10))
def test_nonneg_path_is_nonnegative_and_optimal(seed):
    X, y = random_instance(100 + seed)
    data = center_and_scale(X, y)
    grid = make_lambda_grid(data)
    path = lasso_path(data, grid, nonneg=True, tol=1e-10)
    assert (path.coefficients_cs >= 0).all()
    assert (path.coefficients >= 0).all()
    for lam, scaled in zip(grid.lambdas, path.coefficients_cs):
        assert kkt_residual(data, scaled, lam, nonneg=True) <= 1e-6
        reference = Lasso(alpha=lam, fit_intercept=False, positive=True, tol=1e-14, max_iter=1_000_000)
        reference.fit(data.X_cs, data.y_c)
        assert np.allclose(data.X_cs @ scaled, data.X_cs @ reference.coef_, atol=1e-4)


def test_elastic_net_path_matches_reference_solver():
    X, y = random_instance(7)
    data = center_and_scale(X, y)
    lambdas = np.geomspace(1.0, 0.01, 8)
    scaled = elastic_net_path(data, lambdas, alpha=0.5, tol=1e-10)
    for lam, row in zip(lambdas, scaled):
        reference = ElasticNet(alpha=lam, l1_ratio=0.5, fit_intercept=False, tol=1e-14, max_iter=1_000_000)
        reference.fit(data.X_cs, data.y_c)
        assert np.allclose(row, reference.coef_, atol=1e-4)


@pytest.mark.parametrize("seed", range(5))
def test_warm_started_path_matches_cold_starts(seed):
    X, y = random_instance(200 + seed, n=12, k=15)
    data = center_and_scale(X, y)
    grid = make_lambda_grid(data)
    path = lasso_path(data, grid, tol=1e-10)
    for lam, warm in zip(grid.lambdas, path.coefficients_cs):
        cold = elastic_net_path(data, [lam], alpha=1.0, tol=1e-10)[-1]
        assert np.allclose(data.X_cs @ warm, data.X_cs @ cold, atol=1e-6)


def test_compiled_path_matches_in_package_solver():
    X, y = random_instance(7)
    data = center_and_scale(X, y)
    lambdas = np.geomspace(1.0, 0.01, 8)
    ours = elastic_net_path(data, lambdas, alpha=0.5, tol=1e-10)
    compiled = compiled_elastic_net_path(data.X_cs, data.y_c, lambdas, 0.5, data.gram, data.xty, tol=1e-10)
    assert compiled.shape == ours.shape
    assert np.allclose(compiled, ours, atol=1e-4)


def test_compiled_path_reports_non_convergence():
    X, y = random_instance(5)
    data = center_and_scale(X, y)
    with pytest.raises(ConvergenceError) as excinfo:
        compiled_elastic_net_path(data.X_cs, data.y_c, [0.01], 0.5, tol=1e-14, max_sweeps=1)
    assert excinfo.value.lam == pytest.approx(0.01)


def test_compiled_path_needs_decreasing_lambdas():
    X, y = random_instance(6)
    data = center_and_scale(X, y)
    with pytest.raises(ValidationError, match="decreasing"):
        compiled_elastic_net_path(data.X_cs, data.y_c, [0.01, 0.1], 0.5)


def test_objective_trace_never_increases():
    X, y = random_instance(3)
    data = center_and_scale(X, y)
    trace = []
    lasso_path(data, make_lambda_grid(data), trace=trace)
    assert len(trace) > 1
    assert all(later <= earlier + 1e-12 * max(1.0, abs(earlier)) for earlier, later in zip(trace, trace[1:]))


def test_path_reports_original_scale_coefficients():
    X, y = random_instance(4)
    data = center_and_scale(X, y)
    path = lasso_path(data, make_lambda_grid(data))
    fitted = path.intercepts[-1] + X @ path.coefficients[-1]
    scaled_fit = data.y_mean + data.X_cs @ path.coefficients_cs[-1]
    assert np.allclose(fitted, scaled_fit)


def test_convergence_failure_carries_lambda():
    X, y = random_instance(5)
    data = center_and_scale(X, y)
    with pytest.raises(ConvergenceError) as excinfo:
        elastic_net_path(data, [0.01], alpha=1.0, max_sweeps=1)
    assert excinfo.value.lam == pytest.approx(0.01)


def test_elastic_net_path_rejects_bad_alpha():
    X, y = random_instance(6)
    with pytest.raises(ValidationError):
        elastic_net_path(center_and_scale(X, y), [0.1], alpha=0.0)


# ============================================================
# OLS refit and cross validation
# ============================================================

def test_ols_refit_bic_matches_least_squares():
    X, y = random_instance(8, n=12, k=6)
    model = ols_refit_bic(X, y, [4, 1])
    A = np.column_stack([np.ones(12), X[:, [1, 4]]])
    solution = np.linalg.lstsq(A, y, rcond=None)[0]
    rss = float(((y - A @ solution) ** 2).sum())
    assert model.support == (1, 4)
    assert np.allclose(model.coefficients, solution[1:])
    assert model.intercept == pytest.approx(solution[0])
    assert model.bic == pytest.approx(12 * math.log(rss / 12) + 3 * math.log(12))


def test_ols_refit_of_empty_support_is_intercept_only():
    X, y = random_instance(9, n=12, k=6)
    model = ols_refit_bic(X, y, [])
    assert model.intercept == pytest.approx(y.mean())
    assert model.rss == pytest.approx(((y - y.mean()) ** 2).sum())


def test_ols_refit_errors():
    X, y = random_instance(10, n=6, k=8)
    with pytest.raises(ValidationError, match="exceeds n - 2"):
        ols_refit_bic(X, y, [0, 1, 2, 3, 4])
    duplicated = np.column_stack([X[:, 0], X[:, 0], X[:, 1]])
    with pytest.raises(RankDeficiencyError):
        ols_refit_bic(duplicated, y, [0, 1])


def test_elastic_net_cv_is_seeded():
    X, y = random_instance(11, n=30, k=12)
    first = elastic_net_cv(X, y, seed=42)
    second = elastic_net_cv(X, y, seed=42)
    assert first.alpha == second.alpha
    assert first.lam == second.lam
    assert np.array_equal(first.coefficients, second.coefficients)
    assert first.alpha in first.alphas
    assert first.cv_errors.shape == (len(first.alphas), 60)
    assert first.cv_error == pytest.approx(first.cv_errors.min())


def test_elastic_net_cv_needs_enough_observations():
    X, y = random_instance(12, n=5, k=4)
    with pytest.raises(ValidationError, match="at least 6"):
        elastic_net_cv(X, y, folds=3)
