"""Synthetic conditional-dependence problems and their closed-form oracles.

Data follow

    C ~ N(0, I),  A = f_A(C[e_A]) + tau r_A,  B = f_B(C[e_B]) + tau r_B,
    (r_A, r_B) | C ~ N(0, [[1, g], [g, 1]]),  g = 0 (null) or sin(beta C[e_C]).

With linear kernels on A and B and a Gaussian kernel on C, KCI and the
variance of its U-statistic have closed forms; with injected regression
errors ``Delta_A``, ``Delta_B`` they reduce to Gaussian expectations that
are evaluated by Gauss-Hermite quadrature.
"""

from __future__ import annotations

import csv
import math
import warnings
from dataclasses import asdict, dataclass, field
from typing import Callable, Sequence

import numpy as np

from .errors import ConfigError, DegenerateError, QuadratureWarning
from .kernels import KernelSpec, as_points
from .statistics import MomentSummary

MEAN_FUNCTIONS: dict[str, Callable[[np.ndarray], np.ndarray]] = {
    "cos": np.cos,
    "exp": np.exp,
    "sin": np.sin,
    "linear": lambda x: np.asarray(x, dtype=float),
    "zero": np.zeros_like,
}

HYPOTHESES = ("null", "alternative")


@dataclass(frozen=True)
class ErrorFunction:
    """A bounded regression-error function of a scalar coordinate.

    ``zero``; ``sin``: ``amplitude * sin(frequency * c)``;
    ``bump``: ``amplitude * exp(-(c - center)^2 / (2 width^2))``;
    ``constant``: ``amplitude``.
    """

    kind: str = "zero"
    amplitude: float = 0.0
    frequency: float = 1.0
    center: float = 0.0
    width: float = 1.0

    def __post_init__(self):
        if self.kind not in ("zero", "sin", "bump", "constant"):
            raise ConfigError(f"unknown error function {self.kind!r}")
        if self.kind == "bump" and not self.width > 0:
            raise ConfigError("bump width must be positive")

    def __call__(self, c) -> np.ndarray:
        c = np.asarray(c, dtype=float)
        if self.kind == "zero":
            return np.zeros_like(c)
        if self.kind == "sin":
            return self.amplitude * np.sin(self.frequency * c)
        if self.kind == "bump":
            return self.amplitude * np.exp(-0.5 * ((c - self.center) / self.width) ** 2)
        return np.full_like(c, self.amplitude)

    @property
    def is_zero(self) -> bool:
        return self.kind == "zero" or self.amplitude == 0.0


@dataclass(frozen=True)
class RegressionErrorSpec:
    delta_a: ErrorFunction = field(default_factory=ErrorFunction)
    delta_b: ErrorFunction = field(default_factory=ErrorFunction)

    @classmethod
    def from_dict(cls, d: dict) -> "RegressionErrorSpec":
        return cls(ErrorFunction(**d.get("delta_a", {})), ErrorFunction(**d.get("delta_b", {})))

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class ScenarioConfig:
    f_a: str = "cos"
    f_b: str = "exp"
    tau: float = 0.1
    beta: float = 1.0
    hypothesis: str = "null"
    dim_c: int = 1
    e_a: int = 1
    e_b: int = 1
    e_c: int = 1

    def __post_init__(self):
        for name in (self.f_a, self.f_b):
            if name not in MEAN_FUNCTIONS:
                raise ConfigError(f"unknown mean function {name!r}")
        if self.hypothesis not in HYPOTHESES:
            raise ConfigError(f"hypothesis must be one of {HYPOTHESES}")
        if self.tau < 0 or self.beta < 0:
            raise ConfigError("tau and beta must be nonnegative")
        if self.dim_c < 1:
            raise ConfigError("dim_c must be positive")
        for e in (self.e_a, self.e_b, self.e_c):
            if not 1 <= e <= self.dim_c:
                raise ConfigError(f"coordinate selector {e} outside 1..{self.dim_c}")

    def gamma(self, c) -> np.ndarray:
        """Conditional residual correlation for each row of ``c``."""
        c = as_points(c)
        if self.hypothesis == "null":
            return np.zeros(c.shape[0])
        return np.sin(self.beta * c[:, self.e_c - 1])

    def means(self, c) -> tuple[np.ndarray, np.ndarray]:
        """True conditional means ``(E[A|C], E[B|C])`` as 1-D arrays."""
        c = as_points(c)
        return (MEAN_FUNCTIONS[self.f_a](c[:, self.e_a - 1]),
                MEAN_FUNCTIONS[self.f_b](c[:, self.e_b - 1]))

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ScenarioConfig":
        return cls(**d)


@dataclass(frozen=True, eq=False)
class Dataset:
    a: np.ndarray
    b: np.ndarray
    c: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "a", as_points(self.a))
        object.__setattr__(self, "b", as_points(self.b))
        object.__setattr__(self, "c", as_points(self.c))
        if not self.a.shape[0] == self.b.shape[0] == self.c.shape[0]:
            raise ConfigError("a, b, c must have the same number of rows")

    def __len__(self) -> int:
        return self.a.shape[0]

    def rows(self, start: int, stop: int) -> "Dataset":
        return Dataset(self.a[start:stop], self.b[start:stop], self.c[start:stop])

    def header(self) -> list[str]:
        return ([f"a_{i + 1}" for i in range(self.a.shape[1])]
                + [f"b_{i + 1}" for i in range(self.b.shape[1])]
                + [f"c_{i + 1}" for i in range(self.c.shape[1])])

    def to_csv(self, path_or_file) -> None:
        table = np.hstack([self.a, self.b, self.c])
        own = isinstance(path_or_file, str)
        fh = open(path_or_file, "w", newline="") if own else path_or_file
        try:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(self.header())
            w.writerows([repr(float(v)) for v in row] for row in table)
        finally:
            if own:
                fh.close()

    @classmethod
    def from_csv(cls, path: str) -> "Dataset":
        with open(path, newline="") as fh:
            reader = csv.reader(fh)
            header = next(reader)
            table = np.array([[float(v) for v in row] for row in reader], dtype=float)
        cols = {p: [i for i, h in enumerate(header) if h.startswith(p + "_")] for p in "abc"}
        if not all(cols.values()):
            raise ConfigError("CSV header needs a_*, b_* and c_* columns")
        table = table.reshape(-1, len(header))
        return cls(table[:, cols["a"]], table[:, cols["b"]], table[:, cols["c"]])


def generate(cfg: ScenarioConfig, n: int, seed) -> Dataset:
    """Draw ``n`` samples; ``r_B = g r_A + sqrt(1 - g^2) z`` gives the exact conditional correlation."""
    if n < 1:
        raise ConfigError("n must be positive")
    rng = np.random.default_rng(seed)
    c = rng.standard_normal((n, cfg.dim_c))
    z = rng.standard_normal((2, n))
    g = cfg.gamma(c)
    r_a = z[0]
    r_b = g * z[0] + np.sqrt(1.0 - g * g) * z[1]
    mean_a, mean_b = cfg.means(c)
    return Dataset(mean_a + cfg.tau * r_a, mean_b + cfg.tau * r_b, c)


def injected_residuals(cfg: ScenarioConfig, data: Dataset, err: RegressionErrorSpec):
    """Residuals against the perturbed means ``E[A|C] + Delta_A``, ``E[B|C] + Delta_B``."""
    mean_a, mean_b = cfg.means(data.c)
    ca = data.c[:, cfg.e_a - 1]
    cb = data.c[:, cfg.e_b - 1]
    return data.a[:, 0] - mean_a - err.delta_a(ca), data.b[:, 0] - mean_b - err.delta_b(cb)


def true_centered_gram(kernel: KernelSpec, targets, means, tau: float) -> np.ndarray:
    """Centered Gram under the exact embedding of ``N(mean_i, tau^2)`` targets.

    Supports linear kernels and Gaussian kernels on scalar targets.
    """
    x = as_points(targets)[:, 0]
    mu = np.asarray(means, dtype=float).reshape(-1)
    if kernel.kind == "linear":
        r = x - mu
        return np.outer(r, r)
    if kernel.kind != "gaussian" or as_points(targets).shape[1] != 1:
        raise ConfigError("exact embeddings are available for linear or scalar Gaussian kernels only")
    l2 = kernel.lengthscales[0] ** 2
    t2 = tau * tau
    K = np.exp(-0.5 * (x[:, None] - x[None, :]) ** 2 / l2)
    # <phi(a_i), mu(c_j)> and <mu(c_i), mu(c_j)> for Gaussian-distributed targets
    P = math.sqrt(l2 / (l2 + t2)) * np.exp(-0.5 * (x[:, None] - mu[None, :]) ** 2 / (l2 + t2))
    M = math.sqrt(l2 / (l2 + 2 * t2)) * np.exp(-0.5 * (mu[:, None] - mu[None, :]) ** 2 / (l2 + 2 * t2))
    G = K - P - P.T + M
    return 0.5 * (G + G.T)


# --------------------------------------------------------------------------
# closed-form oracles
# --------------------------------------------------------------------------

def oracle_kci(tau: float, beta: float, ell_sq: float) -> float:
    """Population KCI for the sinusoidal alternative (linear kernels on A, B)."""
    if math.isinf(ell_sq):
        return 0.0
    if not ell_sq > 0:
        raise ConfigError("ell_sq must be positive")
    b2 = beta * beta
    return 0.5 * tau**4 * math.exp(-b2) * math.sqrt(ell_sq / (ell_sq + 2)) * math.expm1(2 * b2 / (ell_sq + 2))


def _vc_closed(tau, beta, L):
    b2 = beta * beta
    p = (L + 1) * (L + 3)
    pre = tau**8 * L * math.exp(-b2 * L / (L + 1)) / math.sqrt(p)
    return pre * (
        1
        - math.exp(-2 * b2 / p)
        - 0.5 * math.exp(-2 * b2 * (L + 1) / (L + 3))
        + 0.25 * math.exp(-2 * b2 * (L + 2) ** 2 / p)
        + 0.25 * math.exp(-2 * b2 * L * L / p)
    )


def _vs_closed(tau, beta, L):
    b2 = beta * beta
    q = (L + 2) * (L + 4)
    inner = (-2 * math.exp(-8 * b2 / q)
             + 0.5 * math.exp(-2 * b2 * (L + 4) / (L + 2))
             + 0.5 * math.exp(-2 * b2 * L * L / q))
    return tau**8 * math.sqrt(L / (L + 4)) * (
        4 - 2 * math.exp(-2 * b2 * (L + 2) / (L + 4)) + math.exp(-2 * b2 * L / (L + 2)) * inner
    )


def _combine(v_c: float, v_m: float, v_s: float, n: int, u: float) -> MomentSummary:
    if n < 2:
        raise ConfigError("n must be at least 2")
    var = ((4 * n - 8) * v_c - (4 * n - 6) * v_m + 2 * v_s) / (n * (n - 1))
    nu1 = v_c - v_m
    nu2 = v_s - 2 * v_c + v_m
    return MomentSummary(u_mean=u, nu1=nu1, nu2=nu2, var_un=var, sigma2_h1_n=4 * nu1, n=n,
                         v_c=v_c, v_m=v_m, v_s=v_s)


def oracle_variance(tau: float, beta: float, ell_sq: float, n: int) -> MomentSummary:
    """Exact moments of the true-embedding KCI U-statistic for the sinusoidal alternative.

    ``beta = 0`` gives the null. ``sigma2_h1_n`` holds the population target
    ``4 nu1`` of the empirical variance estimator.
    """
    if not (ell_sq > 0 and math.isfinite(ell_sq)):
        raise ConfigError("ell_sq must be positive and finite")
    u = oracle_kci(tau, beta, ell_sq)
    return _combine(_vc_closed(tau, beta, ell_sq), u * u, _vs_closed(tau, beta, ell_sq), n, u)


def hermite_nodes(order: int) -> tuple[np.ndarray, np.ndarray]:
    """Nodes and weights for expectations under N(0, 1)."""
    x, w = np.polynomial.hermite_e.hermegauss(order)
    return x, w / math.sqrt(2 * math.pi)


def _kernel_1d(x: np.ndarray, ell_sq: float, power: int = 1) -> np.ndarray:
    if math.isinf(ell_sq):
        return np.ones((x.size, x.size))
    return np.exp(-0.5 * power * (x[:, None] - x[None, :]) ** 2 / ell_sq)


MAX_ORDER = 256  # numpy Gauss-Hermite weights overflow beyond ~350
RTOL = 1e-8


def _converged(evaluate, order: int, what: str, max_order: int = MAX_ORDER):
    """Evaluate at ``3/4 * order`` and ``order``, doubling while any component moves by more than ``RTOL``.

    ``evaluate(order)`` returns a tuple of floats. A :class:`QuadratureWarning`
    is issued if the values still disagree at ``max_order``.
    """
    lo = evaluate(max(order * 3 // 4, 8))
    while True:
        hi = evaluate(order)
        gap = max(abs(a - b) / max(abs(a), abs(b)) if a != b else 0.0 for a, b in zip(lo, hi))
        if gap <= RTOL:
            return hi
        if order >= max_order:
            warnings.warn(f"{what}: quadrature not converged at order {order} (relative gap {gap:.3g})",
                          QuadratureWarning, stacklevel=3)
            return hi
        lo, order = hi, min(2 * order, max_order)


def _ell_vector(ell_sq, dim_c: int) -> list[float]:
    v = [float(x) for x in np.atleast_1d(ell_sq)]
    if len(v) == 1:
        v = v * dim_c
    if len(v) != dim_c:
        raise ConfigError(f"need {dim_c} squared lengthscales, got {len(v)}")
    if any(not x > 0 for x in v):
        raise ConfigError("squared lengthscales must be positive")
    return v


def _pair_expectation(f: np.ndarray, x, w, ell_sq: float) -> float:
    """E[k(X, X') f(X) f(X')] for independent standard normals."""
    wf = w * f
    return float(wf @ _kernel_1d(x, ell_sq) @ wf)


def _noisy_kci(err, ells, e_a, e_b, order, method):
    x, w = hermite_nodes(order)
    active = {e_a - 1, e_b - 1}
    scale = 1.0
    for d, L in enumerate(ells):
        if d not in active and not math.isinf(L):
            scale *= math.sqrt(L / (L + 2))
    if e_a == e_b:
        return scale * _pair_expectation(err.delta_a(x) * err.delta_b(x), x, w, ells[e_a - 1])
    La, Lb = ells[e_a - 1], ells[e_b - 1]
    if method == "factorized":
        return scale * _pair_expectation(err.delta_a(x), x, w, La) * _pair_expectation(err.delta_b(x), x, w, Lb)
    # joint 4-D tensor quadrature over (x_a, x_a', x_b, x_b') with the full product kernel
    da, db = err.delta_a(x), err.delta_b(x)
    ia = 0.0 if math.isinf(La) else 0.5 / La
    ib = 0.0 if math.isinf(Lb) else 0.5 / Lb
    xa2 = x[:, None, None]
    xb = x[None, :, None]
    xb2 = x[None, None, :]
    wgt = (w * db)[:, None] * (w * db)[None, :]
    total = 0.0
    for i in range(x.size):
        expo = -ia * (x[i] - xa2) ** 2 - ib * (xb - xb2) ** 2
        vals = np.exp(expo) * (w * da)[:, None, None] * wgt[None, :, :]
        total += w[i] * da[i] * float(vals.sum())
    return scale * total


def oracle_noisy_kci(err: RegressionErrorSpec, ell_sq, *, dim_c: int = 1, e_a: int = 1, e_b: int = 1,
                     method: str = "auto", order: int = 64) -> float:
    """Expected KCI under the null when the embeddings carry errors ``Delta_A``, ``Delta_B``.

    ``E[k_C(C, C') Delta_A(C) Delta_B(C) Delta_A(C') Delta_B(C')]`` for a
    product Gaussian ``k_C`` with squared lengthscales ``ell_sq`` (``inf``
    gives the constant kernel in that coordinate). Coordinates the errors do
    not touch contribute ``sqrt(l^2/(l^2+2))`` each. ``method`` is
    ``"factorized"`` (errors on distinct coordinates only), ``"joint"`` or
    ``"auto"``.
    """
    ells = _ell_vector(ell_sq, dim_c)
    for e in (e_a, e_b):
        if not 1 <= e <= dim_c:
            raise ConfigError(f"coordinate selector {e} outside 1..{dim_c}")
    if method == "auto":
        method = "joint" if e_a == e_b else "factorized"
    if method == "factorized" and e_a == e_b:
        raise ConfigError("factorized evaluation needs the errors on distinct coordinates")
    if method not in ("joint", "factorized"):
        raise ConfigError(f"unknown method {method!r}")
    # the 4-D tensor rule costs order^4, so it escalates less far
    cap = 128 if method == "joint" and e_a != e_b else MAX_ORDER
    (val,) = _converged(lambda o: (_noisy_kci(err, ells, e_a, e_b, o, method),), order, "oracle_noisy_kci",
                        max(cap, order))
    return val


def _noisy_moments(err, tau, ell_sq, order):
    x, w = hermite_nodes(order)
    da, db = err.delta_a(x), err.delta_b(x)
    g = da * db
    s = (tau**2 + da**2) * (tau**2 + db**2)
    K = _kernel_1d(x, ell_sq)
    inner = K @ (w * g)
    u = float((w * g) @ inner)
    v_c = float(np.sum(w * s * inner**2))
    v_s = float((w * s) @ (K * K) @ (w * s))
    return u, v_c, v_s


def oracle_noisy_variance(err: RegressionErrorSpec, tau: float, ell_sq: float, n: int,
                          order: int = 64) -> MomentSummary:
    """Exact moments of the KCI U-statistic under the null with embedding errors (scalar C)."""
    if not ell_sq > 0:
        raise ConfigError("ell_sq must be positive")
    u, v_c, v_s = _converged(lambda o: _noisy_moments(err, tau, ell_sq, o), order, "oracle_noisy_variance")
    return _combine(v_c, u * u, v_s, n, u)


@dataclass(frozen=True)
class SnrCurve:
    rows: tuple[tuple[float, float, float, float], ...]  # (ell_sq, kci, var, snr)
    argmax: float

    def to_rows(self) -> list[dict]:
        return [dict(zip(("ell_sq", "kci", "var", "snr"), r)) for r in self.rows]


def oracle_snr_curve(tau: float, beta: float, ell_sq_grid: Sequence[float], n: int) -> SnrCurve:
    """Analytic ``KCI / sqrt(4 nu1 / n)`` over a lengthscale grid."""
    if not len(ell_sq_grid):
        raise ConfigError("grid must be non-empty")
    rows = []
    for L in ell_sq_grid:
        mom = oracle_variance(tau, beta, L, n)
        lead = 4 * mom.nu1 / n
        if not lead > 0:
            raise DegenerateError(f"zero leading variance at ell_sq={L}")
        rows.append((float(L), mom.u_mean, mom.var_un, mom.u_mean / math.sqrt(lead)))
    best = max(range(len(rows)), key=lambda i: (rows[i][3], rows[i][0]))
    return SnrCurve(tuple(rows), rows[best][0])
