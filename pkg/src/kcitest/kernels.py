"""Kernel functions, Gram matrices and lengthscale heuristics.

Gaussian kernels use the convention

    k(x, y) = exp(-sum_d (x_d - y_d)^2 / (2 * l_d^2))

with one lengthscale per input dimension. A scalar lengthscale is broadcast
to every dimension.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy.spatial.distance import cdist, pdist, squareform

from .errors import ConfigError

KINDS = ("gaussian", "linear", "constant", "weight-product")


def as_points(x) -> np.ndarray:
    """Coerce input to a float ``(n, d)`` array; 1-D input is a column of scalars."""
    x = np.asarray(x, dtype=float)
    if x.ndim == 0:
        return x.reshape(1, 1)
    if x.ndim == 1:
        return x.reshape(-1, 1)
    if x.ndim != 2:
        raise ConfigError(f"point sets must be 1-D or 2-D, got shape {x.shape}")
    return x


def _weight_identity(c: np.ndarray, param: float) -> np.ndarray:
    return c[:, int(param)]


def _weight_sign(c: np.ndarray, param: float) -> np.ndarray:
    w = np.sign(c[:, int(param)])
    w[w == 0] = 1.0
    return w


def _weight_constant(c: np.ndarray, param: float) -> np.ndarray:
    return np.full(c.shape[0], float(param))


# name -> w(points, param); param is a coordinate index or a constant value
WEIGHT_FUNCTIONS: dict[str, Callable[[np.ndarray, float], np.ndarray]] = {
    "identity": _weight_identity,
    "sign": _weight_sign,
    "constant": _weight_constant,
}


@dataclass(frozen=True)
class KernelSpec:
    """Serializable description of a positive-definite kernel.

    ``weight-product`` kernels are ``k(c, c') = w(c) w(c')`` with ``w`` drawn
    from :data:`WEIGHT_FUNCTIONS`; ``weight_param`` is the coordinate index
    for ``identity``/``sign`` and the value for ``constant``.
    """

    kind: str
    lengthscales: tuple[float, ...] = field(default=())
    weight_fn: str | None = None
    weight_param: float = 0.0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ConfigError(f"unknown kernel kind {self.kind!r}")
        if self.kind == "gaussian":
            ls = tuple(float(v) for v in np.atleast_1d(self.lengthscales))
            if not ls:
                raise ConfigError("gaussian kernel needs at least one lengthscale")
            if not all(math.isfinite(v) and v > 0 for v in ls):
                raise ConfigError(f"gaussian lengthscales must be positive and finite, got {ls}")
            object.__setattr__(self, "lengthscales", ls)
        if self.kind == "weight-product" and self.weight_fn not in WEIGHT_FUNCTIONS:
            raise ConfigError(f"unknown weight function {self.weight_fn!r}")

    @classmethod
    def gaussian(cls, lengthscales) -> "KernelSpec":
        return cls("gaussian", tuple(np.atleast_1d(np.asarray(lengthscales, dtype=float))))

    @classmethod
    def gaussian_sq(cls, lengthscales_sq) -> "KernelSpec":
        """Gaussian kernel parameterized by squared lengthscales."""
        return cls.gaussian(np.sqrt(np.atleast_1d(np.asarray(lengthscales_sq, dtype=float))))

    @classmethod
    def linear(cls) -> "KernelSpec":
        return cls("linear")

    @classmethod
    def constant(cls) -> "KernelSpec":
        return cls("constant")

    @classmethod
    def weight_product(cls, name: str, param: float = 0.0) -> "KernelSpec":
        return cls("weight-product", weight_fn=name, weight_param=param)

    @property
    def lengthscales_sq(self) -> tuple[float, ...]:
        return tuple(v * v for v in self.lengthscales)

    @property
    def bound(self) -> float:
        """``sup_x k(x, x)``; infinite for kernels unbounded on R^d."""
        if self.kind in ("gaussian", "constant"):
            return 1.0
        if self.kind == "weight-product" and self.weight_fn in ("sign", "constant"):
            return 1.0 if self.weight_fn == "sign" else float(self.weight_param) ** 2
        return math.inf

    def to_dict(self) -> dict:
        out = {"kind": self.kind}
        if self.kind == "gaussian":
            out["lengthscales"] = list(self.lengthscales)
        if self.kind == "weight-product":
            out["weight_fn"] = self.weight_fn
            out["weight_param"] = self.weight_param
        return out

    @classmethod
    def from_dict(cls, d: dict) -> "KernelSpec":
        return cls(
            d["kind"],
            tuple(d.get("lengthscales", ())),
            d.get("weight_fn"),
            float(d.get("weight_param", 0.0)),
        )


def _check_dims(spec: KernelSpec, d: int) -> None:
    if spec.kind == "gaussian" and len(spec.lengthscales) not in (1, d):
        raise ConfigError(
            f"kernel has {len(spec.lengthscales)} lengthscales but points have dimension {d}"
        )
    if spec.kind == "weight-product" and spec.weight_fn != "constant" and int(spec.weight_param) >= d:
        raise ConfigError(f"weight coordinate {int(spec.weight_param)} out of range for dimension {d}")


def eval_kernel(spec: KernelSpec, x, y) -> float:
    """Evaluate ``k(x, y)`` for two single points."""
    x = np.atleast_1d(np.asarray(x, dtype=float))
    y = np.atleast_1d(np.asarray(y, dtype=float))
    if x.shape != y.shape:
        raise ConfigError(f"dimension mismatch: {x.shape} vs {y.shape}")
    _check_dims(spec, x.size)
    if spec.kind == "gaussian":
        ls = np.broadcast_to(np.asarray(spec.lengthscales), x.shape)
        return float(np.exp(-0.5 * np.sum(((x - y) / ls) ** 2)))
    if spec.kind == "linear":
        return float(x @ y)
    if spec.kind == "constant":
        return 1.0
    w = WEIGHT_FUNCTIONS[spec.weight_fn]
    return float(w(x[None, :], spec.weight_param)[0] * w(y[None, :], spec.weight_param)[0])


def gaussian_from_sqdist(sqdist: np.ndarray) -> np.ndarray:
    return np.exp(-0.5 * sqdist)


def gram(spec: KernelSpec, X, Y=None) -> np.ndarray:
    """Kernel matrix ``K[i, j] = k(X_i, Y_j)``.

    When ``Y`` is omitted the matrix is built from the condensed upper
    triangle, so it is exactly symmetric.
    """
    X = as_points(X)
    sym = Y is None
    Y = X if sym else as_points(Y)
    if X.shape[1] != Y.shape[1]:
        raise ConfigError(f"dimension mismatch: {X.shape[1]} vs {Y.shape[1]}")
    _check_dims(spec, X.shape[1])
    if spec.kind == "gaussian":
        ls = np.asarray(spec.lengthscales)
        Xs, Ys = X / ls, Y / ls
        if sym:
            if X.shape[0] < 2:
                return np.ones((X.shape[0], X.shape[0]))
            return squareform(gaussian_from_sqdist(pdist(Xs, "sqeuclidean")), checks=False) + np.eye(
                X.shape[0]
            )
        return gaussian_from_sqdist(cdist(Xs, Ys, "sqeuclidean"))
    if spec.kind == "linear":
        K = X @ Y.T
        return 0.5 * (K + K.T) if sym else K
    if spec.kind == "constant":
        return np.ones((X.shape[0], Y.shape[0]))
    w = WEIGHT_FUNCTIONS[spec.weight_fn]
    return np.outer(w(X, spec.weight_param), w(Y, spec.weight_param))


def median_heuristic(X) -> float:
    """Median of the strictly positive pairwise Euclidean distances."""
    X = as_points(X)
    d = pdist(X) if X.shape[0] >= 2 else np.empty(0)
    d = d[d > 0]
    if d.size == 0:
        raise ConfigError("median heuristic needs at least two distinct points")
    return float(np.median(d))


def per_dimension_median(X) -> np.ndarray:
    """Median heuristic applied to each coordinate separately."""
    X = as_points(X)
    return np.array([median_heuristic(X[:, [j]]) for j in range(X.shape[1])])


def lengthscale_grid(center: float, factors: Sequence[float]) -> list[float]:
    return [center * f for f in factors]
