"""
Regularized estimation on pooled responses.

Everything is fit on centered/scaled data (each column of X_cs has squared
length n) and reported back on the original +/-1 predictor scale. The shared
solver minimizes

    (1/2n) ||y_c - X_cs b||^2 + lam * ((1 - alpha)/2 ||b||^2 + alpha ||b||_1)

by cyclic coordinate descent with warm starts along a decreasing lambda path;
alpha = 1 is the lasso. The elastic-net cross validation and permutation
refits run the same objective through scikit-learn's compiled path solver on
the precomputed Gram matrix.
"""

import logging
import math
import warnings
from dataclasses import dataclass, field
from functools import cached_property
from typing import List, Optional, Sequence, Tuple

import numpy as np
from scipy import linalg
from sklearn.exceptions import ConvergenceWarning
from sklearn.linear_model import enet_path
from sklearn.model_selection import KFold

from src.core.errors import ConvergenceError, RankDeficiencyError, ValidationError

logger = logging.getLogger(__name__)

LOG_LAMBDA_FLOOR = -5.0
LOG_LAMBDA_STEP = 0.25
DEFAULT_TOL = 1e-7
DEFAULT_MAX_SWEEPS = 100_000
BIC_RSS_FLOOR = 1e-12

ALPHA_GRID = (0.05, 0.25, 0.5, 0.75, 0.95)
ENET_N_LAMBDA = 60
ENET_LAMBDA_RATIO = 1e-3


@dataclass
class CenteredData:
    X_cs: np.ndarray
    y_c: np.ndarray
    column_scales: np.ndarray
    y_mean: float
    x_means: np.ndarray

    @property
    def n(self) -> int:
        return self.X_cs.shape[0]

    @property
    def k(self) -> int:
        return self.X_cs.shape[1]

    @cached_property
    def gram(self) -> np.ndarray:
        return self.X_cs.T @ self.X_cs

    @cached_property
    def xty(self) -> np.ndarray:
        return self.X_cs.T @ self.y_c

    def to_original(self, coefficients_cs: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        """Back-transforms scaled coefficients (rows = fits) into (coefficients, intercepts)."""
        beta = np.atleast_2d(coefficients_cs) / self.column_scales
        intercepts = self.y_mean - beta @ self.x_means
        return beta, intercepts


@dataclass(frozen=True)
class LambdaGrid:
    log_values: np.ndarray

    @property
    def lambdas(self) -> np.ndarray:
        return np.exp(self.log_values)

    def __len__(self) -> int:
        return len(self.log_values)


@dataclass
class LassoPath:
    grid: LambdaGrid
    coefficients: np.ndarray
    intercepts: np.ndarray
    coefficients_cs: np.ndarray
    nonneg: bool = False

    def at_smallest_lambda(self) -> np.ndarray:
        return self.coefficients[-1]


@dataclass
class RefitModel:
    support: Tuple[int, ...]
    coefficients: np.ndarray
    intercept: float
    rss: float
    bic: float


@dataclass
class ElasticNetFit:
    alpha: float
    lam: float
    coefficients: np.ndarray
    intercept: float
    cv_error: float
    lambda_path: np.ndarray
    cv_errors: np.ndarray = field(repr=False)
    alphas: Tuple[float, ...] = ALPHA_GRID
    coefficients_cs: Optional[np.ndarray] = field(default=None, repr=False)


def center_and_scale(X: np.ndarray, y: np.ndarray, column_names: Optional[Sequence[str]] = None) -> CenteredData:
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float)
    if X.ndim != 2 or y.ndim != 1 or X.shape[0] != y.shape[0]:
        raise ValidationError(f"Incompatible shapes: X {X.shape}, y {y.shape}")
    n = X.shape[0]

    x_means = X.mean(axis=0)
    Xc = X - x_means
    norms = np.linalg.norm(Xc, axis=0)
    constant = np.flatnonzero(norms <= 1e-12 * math.sqrt(n))
    if len(constant):
        j = int(constant[0])
        name = column_names[j] if column_names is not None else f"column {j}"
        raise ValidationError(f"Constant predictor '{name}' (compound in all or no pools) cannot be scaled")

    scales = norms / math.sqrt(n)
    y_mean = float(y.mean())
    return CenteredData(Xc / scales, y - y_mean, scales, y_mean, x_means)


def make_lambda_grid(data: CenteredData, floor: float = LOG_LAMBDA_FLOOR, step: float = LOG_LAMBDA_STEP) -> LambdaGrid:
    """log-lambda from log(max|X_cs' y_c|) down to the floor in fixed steps; the floor closes the grid."""
    top_value = float(np.max(np.abs(data.xty))) if data.k else 0.0
    if top_value <= math.exp(floor):
        return LambdaGrid(np.array([floor]))
    top = math.log(top_value)
    count = int(math.floor((top - floor) / step + 1e-9))
    values = top - step * np.arange(count + 1)
    if values[-1] - floor > 1e-9:
        values = np.append(values, floor)
    else:
        values[-1] = floor
    return LambdaGrid(values)


# ---------------------------
# Coordinate descent core
# ---------------------------

def _objective(G, c, yy, n, beta, lam, alpha) -> float:
    loss = (yy - 2.0 * c @ beta + beta @ G @ beta) / (2.0 * n)
    return loss + lam * ((1.0 - alpha) / 2.0 * beta @ beta + alpha * np.abs(beta).sum())


def _coordinate_descent(
    G: np.ndarray,
    c: np.ndarray,
    n: int,
    lam: float,
    alpha: float,
    nonneg: bool,
    beta: np.ndarray,
    Gb: np.ndarray,
    tol: float,
    max_sweeps: int,
    trace: Optional[List[float]] = None,
    yy: float = 0.0,
) -> int:
    """
    One lambda of the path. beta and Gb (= G @ beta) are updated in place.
    Full sweeps alternate with sweeps over the active set until a full sweep
    moves no coefficient by more than tol.
    """
    k = len(beta)
    diag = np.diag(G) / n
    l1 = lam * alpha
    l2 = lam * (1.0 - alpha)

    def sweep(indices) -> float:
        largest = 0.0
        for j in indices:
            denom = diag[j] + l2
            if denom <= 0.0:
                new = 0.0
            else:
                z = (c[j] - Gb[j]) / n + diag[j] * beta[j]
                if nonneg:
                    new = max(z - l1, 0.0) / denom
                elif z > l1:
                    new = (z - l1) / denom
                elif z < -l1:
                    new = (z + l1) / denom
                else:
                    new = 0.0
            step = new - beta[j]
            if step != 0.0:
                beta[j] = new
                Gb[:] += step * G[j]
                largest = max(largest, abs(step))
        if trace is not None:
            trace.append(_objective(G, c, yy, n, beta, lam, alpha))
        return largest

    sweeps = 0
    everything = range(k)
    while True:
        sweeps += 1
        if sweep(everything) <= tol:
            return sweeps
        while True:
            sweeps += 1
            if sweeps > max_sweeps:
                raise ConvergenceError(
                    f"Coordinate descent did not converge within {max_sweeps} sweeps at lambda = {lam:.6g}", lam=lam
                )
            if sweep(np.flatnonzero(beta)) <= tol:
                break


def _solve_path(
    G: np.ndarray,
    c: np.ndarray,
    n: int,
    lambdas: Sequence[float],
    alpha: float,
    nonneg: bool,
    tol: float,
    max_sweeps: int,
    trace: Optional[List[float]] = None,
    yy: float = 0.0,
) -> np.ndarray:
    k = len(c)
    beta = np.zeros(k)
    Gb = np.zeros(k)
    path = np.zeros((len(lambdas), k))
    for idx, lam in enumerate(lambdas):
        _coordinate_descent(G, c, n, float(lam), alpha, nonneg, beta, Gb, tol, max_sweeps, trace, yy)
        path[idx] = beta
    return path


def elastic_net_path(
    data: CenteredData,
    lambdas: Sequence[float],
    alpha: float,
    nonneg: bool = False,
    tol: float = DEFAULT_TOL,
    max_sweeps: int = DEFAULT_MAX_SWEEPS,
    trace: Optional[List[float]] = None,
) -> np.ndarray:
    """Scaled coefficients (one row per lambda, lambdas in the given decreasing order)."""
    if not 0.0 < alpha <= 1.0:
        raise ValidationError(f"alpha must lie in (0, 1], got {alpha}")
    yy = float(data.y_c @ data.y_c)
    return _solve_path(data.gram, data.xty, data.n, lambdas, alpha, nonneg, tol, max_sweeps, trace, yy)


def lasso_path(
    data: CenteredData,
    grid: LambdaGrid,
    nonneg: bool = False,
    tol: float = DEFAULT_TOL,
    max_sweeps: int = DEFAULT_MAX_SWEEPS,
    trace: Optional[List[float]] = None,
) -> LassoPath:
    if len(grid) == 0:
        raise ValidationError("Lambda grid is empty")
    scaled = elastic_net_path(data, grid.lambdas, 1.0, nonneg=nonneg, tol=tol, max_sweeps=max_sweeps, trace=trace)
    coefficients, intercepts = data.to_original(scaled)
    return LassoPath(grid, coefficients, intercepts, scaled, nonneg)


# ---------------------------
# OLS refit
# ---------------------------

def ols_refit_bic(X: np.ndarray, y: np.ndarray, support: Sequence[int]) -> RefitModel:
    """Least squares on intercept + selected columns; BIC = n ln(max(rss, 1e-12)/n) + (|S|+1) ln n."""
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float)
    support = tuple(sorted(int(j) for j in support))
    n = len(y)
    p = len(support)
    if p > n - 2:
        raise ValidationError(f"Support of size {p} exceeds n - 2 = {n - 2}")

    A = np.hstack([np.ones((n, 1)), X[:, list(support)]])
    solution, _, rank, _ = linalg.lstsq(A, y)
    if rank < p + 1:
        raise RankDeficiencyError(f"Refit matrix for support {list(support)} is rank deficient ({rank} < {p + 1})")

    residual = y - A @ solution
    rss = float(residual @ residual)
    bic = n * math.log(max(rss, BIC_RSS_FLOOR) / n) + (p + 1) * math.log(n)
    return RefitModel(support, solution[1:], float(solution[0]), rss, bic)


# ---------------------------
# Elastic net with cross validation
# ---------------------------

def compiled_elastic_net_path(
    X_cs: np.ndarray,
    y_c: np.ndarray,
    lambdas: Sequence[float],
    alpha: float,
    gram: Optional[np.ndarray] = None,
    xty: Optional[np.ndarray] = None,
    tol: float = DEFAULT_TOL,
    max_sweeps: int = DEFAULT_MAX_SWEEPS,
) -> np.ndarray:
    """
    Same objective and lambda scale as elastic_net_path, solved by sklearn's
    enet_path on the Gram matrix. Rows follow the given (decreasing) lambdas.
    """
    if not 0.0 < alpha <= 1.0:
        raise ValidationError(f"alpha must lie in (0, 1], got {alpha}")
    lambdas = np.asarray(lambdas, dtype=float)
    if np.any(np.diff(lambdas) > 0):
        raise ValidationError("Lambdas must be given in decreasing order")
    X_cs = np.asarray(X_cs, dtype=float)
    y_c = np.ascontiguousarray(y_c, dtype=float)
    if gram is None:
        gram = X_cs.T @ X_cs
    if xty is None:
        xty = X_cs.T @ y_c

    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always", ConvergenceWarning)
        _, coefs, gaps = enet_path(
            X_cs, y_c, l1_ratio=alpha, alphas=lambdas,
            precompute=np.ascontiguousarray(gram), Xy=np.ascontiguousarray(xty),
            tol=tol, max_iter=max_sweeps,
        )
    if any(issubclass(w.category, ConvergenceWarning) for w in caught):
        worst = int(np.argmax(gaps))
        raise ConvergenceError(
            f"Elastic net (alpha={alpha:g}) did not converge within {max_sweeps} sweeps "
            f"at lambda = {lambdas[worst]:.6g} (duality gap {gaps[worst]:.3g})",
            lam=float(lambdas[worst]),
        )
    return coefs.T


def elastic_net_lambdas(data: CenteredData, alpha: float, n_lambda: int = ENET_N_LAMBDA,
                        ratio: float = ENET_LAMBDA_RATIO) -> np.ndarray:
    lam_max = float(np.max(np.abs(data.xty))) / (data.n * alpha) if data.k else 0.0
    if lam_max <= 0.0:
        lam_max = 1.0
    return np.geomspace(lam_max, lam_max * ratio, n_lambda)


def elastic_net_cv(
    X: np.ndarray,
    y: np.ndarray,
    alpha_grid: Sequence[float] = ALPHA_GRID,
    folds: int = 3,
    seed: int = 0,
    n_lambda: int = ENET_N_LAMBDA,
    tol: float = DEFAULT_TOL,
    max_sweeps: int = DEFAULT_MAX_SWEEPS,
    data: Optional[CenteredData] = None,
) -> ElasticNetFit:
    """
    Picks (alpha, lambda) by minimum mean out-of-fold squared error and refits on
    the full data. Centering/scaling happens once on the full data; each training
    fold is re-centered (not rescaled) so the held-out prediction keeps an intercept.
    Fold fits and the final refit go through compiled_elastic_net_path.
    """
    y = np.asarray(y, dtype=float)
    n = len(y)
    if n < 2 * folds:
        raise ValidationError(f"Need at least {2 * folds} observations for {folds}-fold cross validation, got {n}")
    if data is None:
        data = center_and_scale(X, y)

    splitter = KFold(n_splits=folds, shuffle=True, random_state=int(seed % 2**32))
    splits = list(splitter.split(data.X_cs))
    if any(len(test) == 0 for _, test in splits):
        raise ValidationError("Cross validation produced an empty fold")

    alphas = tuple(float(a) for a in alpha_grid)
    errors = np.zeros((len(alphas), n_lambda))
    grids = []
    for a_idx, alpha in enumerate(alphas):
        lambdas = elastic_net_lambdas(data, alpha, n_lambda)
        grids.append(lambdas)
        for train, test in splits:
            X_train = data.X_cs[train]
            x_mean = X_train.mean(axis=0)
            y_mean = data.y_c[train].mean()
            X_train = X_train - x_mean
            y_train = data.y_c[train] - y_mean
            path = compiled_elastic_net_path(X_train, y_train, lambdas, alpha, tol=tol, max_sweeps=max_sweeps)
            predicted = y_mean + (data.X_cs[test] - x_mean) @ path.T
            errors[a_idx] += ((data.y_c[test][:, None] - predicted) ** 2).sum(axis=0)
    errors /= n

    a_best, l_best = np.unravel_index(int(np.argmin(errors)), errors.shape)
    alpha = alphas[a_best]
    lambda_path = grids[a_best][: l_best + 1]
    scaled = compiled_elastic_net_path(data.X_cs, data.y_c, lambda_path, alpha, data.gram, data.xty,
                                       tol=tol, max_sweeps=max_sweeps)[-1]
    coefficients, intercepts = data.to_original(scaled)
    logger.debug(f"Elastic net CV: alpha={alpha}, lambda={lambda_path[-1]:.6g}, cv error={errors[a_best, l_best]:.6g}")
    return ElasticNetFit(
        alpha=alpha,
        lam=float(lambda_path[-1]),
        coefficients=coefficients[0],
        intercept=float(intercepts[0]),
        cv_error=float(errors[a_best, l_best]),
        lambda_path=lambda_path,
        cv_errors=errors,
        alphas=alphas,
        coefficients_cs=scaled,
    )
