"""Conditional mean embeddings by kernel ridge regression in dual form.

The embedding of ``A | C = c`` is ``mu(c) = sum_j beta_j(c) phi_A(a_j)`` with
``beta(c) = (K_C + ridge * m * I)^{-1} k_C(c)``. The ridge is per-sample: it
is multiplied by the number of training points ``m`` so the same grid
transfers across training sizes (``ridge * m`` is the absolute regularizer).
Everything downstream works from Gram entries; target features are never
built, except that a linear target kernel's features are the data itself.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.linalg import LinAlgError, cho_factor, cho_solve, eigh

from .errors import ConfigError, NumericalError
from .kernels import KernelSpec, as_points, gram, per_dimension_median

log = logging.getLogger(__name__)

DEFAULT_RIDGE_GRID = tuple(float(v) for v in np.logspace(-6, 1, 10))
DEFAULT_LENGTHSCALE_FACTORS = (1 / 8, 1 / 4, 1 / 2, 1.0, 2.0, 4.0, 8.0)

_LEVERAGE_GUARD = 1e-12


@dataclass(frozen=True, eq=False)
class CmeModel:
    regression_kernel: KernelSpec
    target_kernel: KernelSpec
    ridge: float
    train_c: np.ndarray
    train_targets: np.ndarray
    solve_factor: tuple | None = field(repr=False)
    target_gram: np.ndarray | None = field(default=None, repr=False)
    jitter: float = 0.0
    null: bool = False

    @property
    def m(self) -> int:
        return self.train_c.shape[0]

    def solve(self, b: np.ndarray) -> np.ndarray:
        """Solve ``(K_C + ridge*m*I + jitter*I) x = b``."""
        if self.null:
            return np.zeros_like(b)
        return cho_solve(self.solve_factor, b)

    def dual_coefficients(self, c) -> np.ndarray:
        """Rows are the weights ``beta(c_i)`` over training targets."""
        c = as_points(c)
        if self.null:
            return np.zeros((c.shape[0], self.m))
        Kc = gram(self.regression_kernel, c, self.train_c)
        return self.solve(Kc.T).T

    def predict_mean(self, c) -> np.ndarray:
        """Conditional mean ``E[A | C=c]``; only meaningful for a linear target kernel."""
        if self.target_kernel.kind != "linear":
            raise ConfigError("predict_mean requires a linear target kernel")
        return self.dual_coefficients(c) @ self.train_targets


def _factorize(K: np.ndarray, shift: float) -> tuple[tuple, float]:
    m = K.shape[0]
    A = K + shift * np.eye(m)
    try:
        return cho_factor(A, lower=True), 0.0
    except LinAlgError:
        pass
    base = np.trace(K) / m
    jitter = 1e-10 * base
    while jitter <= 1e-6 * base * (1 + 1e-9):
        try:
            return cho_factor(A + jitter * np.eye(m), lower=True), jitter
        except LinAlgError:
            jitter *= 10
    raise NumericalError(f"Cholesky factorization failed; final jitter {jitter / 10:.3g}")


def fit_cme(train_c, train_targets, regression_kernel: KernelSpec, target_kernel: KernelSpec,
            ridge: float) -> CmeModel:
    train_c = as_points(train_c)
    train_targets = as_points(train_targets)
    m = train_c.shape[0]
    if train_targets.shape[0] != m:
        raise ConfigError(f"{m} conditioning points but {train_targets.shape[0]} targets")
    if m < 2:
        raise ConfigError("need at least two training points")
    if not ridge > 0:
        raise ConfigError(f"ridge must be positive, got {ridge}")
    K = gram(regression_kernel, train_c)
    factor, jitter = _factorize(K, ridge * m)
    if jitter:
        log.debug("CME factorization needed jitter %.3g", jitter)
    return CmeModel(
        regression_kernel, target_kernel, float(ridge), train_c, train_targets,
        factor, gram(target_kernel, train_targets), jitter,
    )


def null_model(train_c, train_targets, regression_kernel: KernelSpec,
               target_kernel: KernelSpec) -> CmeModel:
    """Embedding fixed at zero (the infinite-ridge limit)."""
    train_c = as_points(train_c)
    train_targets = as_points(train_targets)
    return CmeModel(regression_kernel, target_kernel, float("inf"), train_c, train_targets,
                    None, gram(target_kernel, train_targets), 0.0, True)


def centered_test_gram(model: CmeModel, test_c, test_targets) -> np.ndarray:
    """Gram matrix of ``phi(a_i) - mu(c_i)`` over a point set.

    Entry ``(i, j)`` is ``k(a_i, a_j) - <mu(c_i), phi(a_j)> - <phi(a_i), mu(c_j)>
    + <mu(c_i), mu(c_j)>``.
    """
    test_c = as_points(test_c)
    test_targets = as_points(test_targets)
    if test_c.shape[0] != test_targets.shape[0]:
        raise ConfigError(f"{test_c.shape[0]} conditioning points but {test_targets.shape[0]} targets")
    if test_c.shape[1] != model.train_c.shape[1] or test_targets.shape[1] != model.train_targets.shape[1]:
        raise ConfigError("test points do not match the training dimensions")
    Kt = gram(model.target_kernel, test_targets)
    if model.null:
        return Kt
    B = model.dual_coefficients(test_c)
    P = B @ gram(model.target_kernel, test_targets, model.train_targets).T
    G = Kt - P - P.T + B @ model.target_gram @ B.T
    return 0.5 * (G + G.T)


def target_factor(target_kernel: KernelSpec, targets, rtol: float = 1e-12) -> np.ndarray:
    """``F`` with ``F @ F.T`` equal to the target Gram (eigenvalues below ``rtol`` dropped)."""
    targets = as_points(targets)
    if target_kernel.kind == "linear":
        return targets
    s, V = eigh(gram(target_kernel, targets))
    keep = s > rtol * max(s[-1], 0.0)
    return V[:, keep] * np.sqrt(s[keep])


def _loo_errors(K: np.ndarray, factors: Sequence[np.ndarray], ridge_grid: Sequence[float]) -> np.ndarray:
    """Closed-form LOO error for each (target, ridge); NaN where leverage hits 1."""
    m = K.shape[0]
    s, U = eigh(K, driver="evd")
    s = np.clip(s, 0.0, None)
    U2 = U * U
    proj = [U.T @ F for F in factors]
    out = np.full((len(factors), len(ridge_grid)), np.nan)
    for r, lam in enumerate(ridge_grid):
        shrink = lam * m / (s + lam * m)
        one_minus_h = U2 @ shrink
        if np.any(one_minus_h <= _LEVERAGE_GUARD):
            continue
        for t, G in enumerate(proj):
            resid = U @ (shrink[:, None] * G)
            out[t, r] = np.mean(np.sum(resid * resid, axis=1) / one_minus_h**2)
    return out


def _smoothness(spec: KernelSpec) -> float:
    return float(np.sum(np.log(spec.lengthscales))) if spec.kind == "gaussian" else np.inf


def _pick(errors: np.ndarray, grid: Sequence[KernelSpec], ridge_grid: Sequence[float]):
    """argmin LOO; ties go to the larger ridge, then the larger lengthscale."""
    if np.all(np.isnan(errors)):
        raise NumericalError("every LOO candidate was skipped (hat-matrix leverage reached 1)")
    best = np.nanmin(errors)
    tol = 1e-12 * abs(best) + 1e-300
    ties = zip(*np.nonzero(errors <= best + tol))
    g, r = max(ties, key=lambda gr: (ridge_grid[gr[1]], _smoothness(grid[gr[0]]), -gr[0], -gr[1]))
    return grid[g], float(ridge_grid[r]), float(errors[g, r])


def loo_select(train_c, train_targets, regression_grid: Sequence[KernelSpec],
               target_kernel: KernelSpec, ridge_grid: Sequence[float] = DEFAULT_RIDGE_GRID):
    """Choose ``(regression kernel, ridge)`` minimizing closed-form leave-one-out error.

    The error for point ``i`` is the squared RKHS norm (under the target
    kernel) of the held-out embedding residual, ``||resid_i||^2 / (1 - H_ii)^2``
    with hat matrix ``H = K (K + ridge*m*I)^{-1}``; the score is the mean
    over points. Returns ``(kernel, ridge, loo_error)``.
    """
    (choice,) = loo_select_many(train_c, [train_targets], regression_grid, [target_kernel], ridge_grid)
    return choice


def loo_select_many(train_c, targets_list, regression_grid, target_kernels, ridge_grid=DEFAULT_RIDGE_GRID):
    """:func:`loo_select` for several targets sharing one conditioning set.

    Each regression kernel's eigendecomposition is computed once and reused
    across targets and ridges.
    """
    if not regression_grid or not len(ridge_grid):
        raise ConfigError("LOO grids must be non-empty")
    train_c = as_points(train_c)
    factors = [target_factor(tk, t) for tk, t in zip(target_kernels, targets_list)]
    for F in factors:
        if F.shape[0] != train_c.shape[0]:
            raise ConfigError("targets and conditioning points differ in length")
    table = np.stack([_loo_errors(gram(spec, train_c), factors, ridge_grid) for spec in regression_grid], axis=1)
    return [_pick(table[t], regression_grid, ridge_grid) for t in range(len(factors))]


def default_regression_grid(train_c, factors=DEFAULT_LENGTHSCALE_FACTORS) -> list[KernelSpec]:
    """Gaussian kernels at multiples of the (per-dimension) median heuristic."""
    base = per_dimension_median(train_c)
    return [KernelSpec.gaussian(base * f) for f in factors]


def loo_select_coordinatewise(train_c, targets_list, target_kernels, factors=DEFAULT_LENGTHSCALE_FACTORS,
                              ridge_grid=DEFAULT_RIDGE_GRID, sweeps: int = 2):
    """Per-dimension lengthscale search by cyclic coordinate descent on LOO error.

    Starts each target at the per-dimension median heuristic and, for each
    coordinate in turn, tries every multiple in ``factors`` with the other
    coordinates held fixed. Eigendecompositions are cached across targets.
    """
    train_c = as_points(train_c)
    base = per_dimension_median(train_c)
    tfactors = [target_factor(tk, t) for tk, t in zip(target_kernels, targets_list)]
    cache: dict[tuple, np.ndarray] = {}

    def table_for(idx: tuple) -> np.ndarray:
        if idx not in cache:
            spec = KernelSpec.gaussian(base * np.asarray([factors[i] for i in idx]))
            cache[idx] = _loo_errors(gram(spec, train_c), tfactors, ridge_grid)
        return cache[idx]

    mid = list(factors).index(1.0) if 1.0 in factors else len(factors) // 2
    out = []
    for t in range(len(tfactors)):
        current = [mid] * train_c.shape[1]
        for _ in range(sweeps):
            for d in range(train_c.shape[1]):
                cands = [tuple(current[:d] + [i] + current[d + 1:]) for i in range(len(factors))]
                specs = [KernelSpec.gaussian(base * np.asarray([factors[i] for i in idx])) for idx in cands]
                errs = np.stack([table_for(idx)[t] for idx in cands])
                spec, _, _ = _pick(errs, specs, ridge_grid)
                current = list(cands[specs.index(spec)])
        idx = tuple(current)
        spec = KernelSpec.gaussian(base * np.asarray([factors[i] for i in idx]))
        out.append(_pick(table_for(idx)[t][None, :], [spec], ridge_grid))
    return out
