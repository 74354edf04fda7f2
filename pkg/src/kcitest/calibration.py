"""Null calibration: wild bootstrap, the Hoeffding-valid test, and Type-I bounds."""

from __future__ import annotations

import math
import warnings
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.linalg import LinAlgError, eigvalsh
from scipy.stats import norm

from .errors import ConfigError, NumericalError
from .statistics import kci_hsic_unbiased

MULTIPLIERS = ("rademacher", "gaussian")


@dataclass(frozen=True)
class BootstrapConfig:
    num_samples: int = 1000
    multiplier: str = "rademacher"
    seed: int = 0
    plus_one: bool = False  # (1 + #exceed) / (S + 1) instead of the plain exceedance rate

    def __post_init__(self):
        if self.num_samples < 1:
            raise ConfigError("bootstrap needs at least one sample")
        if self.multiplier not in MULTIPLIERS:
            raise ConfigError(f"unknown multiplier {self.multiplier!r}")


def draw_multipliers(n: int, cfg: BootstrapConfig) -> np.ndarray:
    """``(n, S)`` matrix of multipliers; column ``s`` comes from its own stream seeded by ``(seed, s)``."""
    cols = []
    for s in range(cfg.num_samples):
        rng = np.random.default_rng([cfg.seed, s])
        if cfg.multiplier == "rademacher":
            cols.append(2.0 * rng.integers(0, 2, size=n) - 1.0)
        else:
            cols.append(rng.standard_normal(n))
    return np.stack(cols, axis=1)


def hsic_bootstrap_samples(K: np.ndarray, L: np.ndarray, Q: np.ndarray, literal: bool = False) -> np.ndarray:
    """:func:`kci_hsic_unbiased` of ``(q q' * K, L)`` for every column ``q`` of ``Q``."""
    n = K.shape[0]
    if literal:
        Kt, Lt, c = K, L, 2.0 / (n - 1)
    else:
        Kt = K - np.diag(np.diag(K))
        Lt = L - np.diag(np.diag(L))
        c = 2.0 / (n - 2)
    l1 = Lt.sum(axis=0)
    trace_term = np.einsum("is,is->s", Q, (Kt * Lt.T) @ Q)
    KQ = Kt @ Q
    sum_k = np.einsum("is,is->s", Q, KQ)
    cross = np.einsum("is,is->s", KQ, Q * l1[:, None])
    total = trace_term + sum_k * l1.sum() / ((n - 1) * (n - 2)) - c * cross
    return total / (n * (n - 3))


def wild_bootstrap_pvalue(K: np.ndarray, L: np.ndarray, observed: float, cfg: BootstrapConfig,
                          literal: bool = False) -> tuple[float, np.ndarray]:
    """Wild-bootstrap p-value ``mean(observed < V_s)`` for the HSIC-form statistic."""
    n = K.shape[0]
    if n < 4:
        raise ConfigError("wild bootstrap needs n >= 4")
    if L.shape != K.shape:
        raise ConfigError("K and L shapes differ")
    samples = hsic_bootstrap_samples(K, L, draw_multipliers(n, cfg), literal)
    exceed = int(np.sum(observed < samples))
    if cfg.plus_one:
        return (1 + exceed) / (cfg.num_samples + 1), samples
    return exceed / cfg.num_samples, samples


def wild_bootstrap_quadratic(H: np.ndarray, cfg: BootstrapConfig, diagonal: str = "center") -> np.ndarray:
    """Draws of ``Y = (1/n) sum h_ij e_i e_j``.

    ``diagonal="exclude"`` sums over ``i != j`` only; ``"center"`` keeps the
    full quadratic form and subtracts its mean ``tr(H)/n``, which for Gaussian
    multipliers has the law of ``sum_r lambda_r (X_r^2 - 1)`` with
    ``lambda_r`` the eigenvalues of ``H/n``.
    """
    n = H.shape[0]
    E = draw_multipliers(n, cfg)
    quad = np.einsum("is,is->s", E, H @ E)
    if diagonal == "exclude":
        quad -= np.einsum("i,is->s", np.diag(H), E * E)
    elif diagonal == "center":
        quad -= np.trace(H)
    else:
        raise ConfigError(f"unknown diagonal mode {diagonal!r}")
    return quad / n


def eigen_mixture_draws(H: np.ndarray, num: int, seed: int) -> np.ndarray:
    """Direct draws of ``sum_r lambda_r (X_r^2 - 1)`` with ``lambda`` the eigenvalues of ``H/n``."""
    lam = eigvalsh(H / H.shape[0])
    X = np.random.default_rng(seed).standard_normal((num, lam.size))
    return (X * X - 1.0) @ lam


def hoeffding_threshold(kappa_a: float, kappa_b: float, kappa_c: float, n: int, alpha: float) -> float:
    """Finite-sample valid threshold ``32 kA kB kC sqrt(log(1/alpha) / (n-1))``."""
    if not 0 < alpha < 1:
        raise ConfigError("alpha must lie in (0, 1)")
    if n < 2:
        raise ConfigError("n must be at least 2")
    if min(kappa_a, kappa_b, kappa_c) <= 0:
        raise ConfigError("kernel bounds must be positive")
    return 32.0 * kappa_a * kappa_b * kappa_c * math.sqrt(math.log(1.0 / alpha) / (n - 1))


def hoeffding_test(kci_n_true_embeddings: float, threshold: float) -> bool:
    return bool(kci_n_true_embeddings > threshold)


def hoeffding_pvalue(statistic: float, kappa: float, n: int) -> float:
    """Smallest level at which :func:`hoeffding_threshold` would reject (``kappa`` = product of bounds)."""
    if statistic <= 0:
        return 1.0
    return float(min(1.0, math.exp(-(n - 1) * (statistic / (32.0 * kappa)) ** 2)))


def cantelli_normal_threshold(kci_hat: float, var_kci_n: float, n: int, rho: float) -> tuple[float, float]:
    """Minimal ``q`` with ``P(stat > q/n) <= rho`` via Cantelli and via a moment-matched normal."""
    if not 0 < rho < 1:
        raise ConfigError("rho must lie in (0, 1)")
    if var_kci_n < 0:
        raise ConfigError("variance must be nonnegative")
    t1 = math.sqrt((1 - rho) / rho)
    t2 = float(norm.ppf(1 - rho))
    spread = math.sqrt(n * n * var_kci_n)
    return n * kci_hat + t1 * spread, n * kci_hat + t2 * spread


def psi(x: float) -> float:
    return x * math.exp(2 * math.pi * x) / math.sqrt(2 * math.pi)


R3 = (2 * math.pi) ** -3.5


@dataclass(frozen=True)
class BoundReport:
    b_shift: float
    k_var: float
    delta: float
    r1: float
    r2: float
    r3: float
    bound: float
    var_y: float
    third_moment_y: float
    warnings: tuple[str, ...] = field(default=())

    def to_dict(self) -> dict:
        d = asdict(self)
        d["warnings"] = list(self.warnings)
        return d


def bootstrap_alignment_bound(H: np.ndarray, kci_hat: float, var_kci_n: float) -> BoundReport:
    """Kolmogorov-distance bound between the Gaussian wild bootstrap and ``n * Z_n``.

    Uses the spectrum of ``H/n``: Schatten norms from absolute eigenvalues,
    ``Var(Y|H) = 2 sum lambda^2`` and third moment ``8 sum lambda^3``.
    """
    H = np.asarray(H, dtype=float)
    n = H.shape[0]
    if H.ndim != 2 or H.shape[1] != n:
        raise ConfigError("H must be square")
    scale = np.max(np.abs(H))
    if np.max(np.abs(H - H.T)) > 1e-10 * scale:
        raise ConfigError("H is not symmetric")
    if not var_kci_n > 0:
        raise ConfigError("var_kci_n must be positive")
    try:
        lam = eigvalsh(0.5 * (H + H.T) / n)
    except LinAlgError as exc:
        raise NumericalError(f"eigensolve failed: {exc}") from exc
    notes = []
    if np.any(lam < -1e-12 * np.max(np.abs(lam))):
        notes.append("negative eigenvalues present; Schatten norms use absolute values")
    a = np.abs(lam)
    s2 = float(np.sum(a**2))
    s3 = float(np.sum(a**3))
    if s2 == 0:
        raise NumericalError("H has no nonzero eigenvalues")
    delta = float(np.max(a) ** 2 / s2)
    if delta >= 0.5:
        raise NumericalError(f"dominant eigenvalue: delta = {delta:.3g} >= 1/2")
    var_y = 2.0 * s2
    k_var = var_y / (n * n * var_kci_n)
    b_shift = kci_hat / math.sqrt(var_kci_n)
    r1 = 4.0 / 3.0 * math.sqrt(2) * math.pi**2 * s3 / s2**1.5
    r2 = 2**-1.25 * math.pi**-2 / math.sqrt(1 - 2 * delta)
    arg = r1 * k_var**1.5 + b_shift + math.pi * abs(k_var - 1)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        try:
            lead = psi(arg)
        except OverflowError:
            lead = math.inf
    bound = lead + r2 / math.sqrt(k_var) + R3
    return BoundReport(b_shift, k_var, delta, r1, r2, R3, bound, var_y, 8.0 * float(np.sum(lam**3)), tuple(notes))
