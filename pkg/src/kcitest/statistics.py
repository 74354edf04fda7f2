"""KCI, HSIC-form and GCM statistics, plus U-statistic moment estimates.

The U-statistic kernel matrix for KCI is the elementwise product
``h = K_C * Kc_A * Kc_B`` of the conditioning Gram and the two centered
Grams. All functions here are pure functions of their array inputs.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from .errors import ConfigError, DegenerateError


@dataclass(frozen=True)
class MomentSummary:
    """Moments of a second-order U-statistic ``U_n`` with kernel ``h``.

    ``nu1 = <mu_h, C_h mu_h>`` and ``nu2 = ||C_h||_HS^2`` give
    ``Var(U_n) = 4 nu1 / n + 2 nu2 / (n (n - 1))``. ``v_c``, ``v_m``, ``v_s``
    are the raw second moments ``E[E[h|X]^2]``, ``(E h)^2`` and ``E[h^2]``
    when an oracle supplies them.
    """

    u_mean: float
    nu1: float
    nu2: float
    var_un: float
    sigma2_h1_n: float
    n: int
    v_c: float | None = None
    v_m: float | None = None
    v_s: float | None = None

    def to_dict(self) -> dict:
        return asdict(self)


def ustat_variance(nu1: float, nu2: float, n: int) -> float:
    return 4.0 * nu1 / n + 2.0 * nu2 / (n * (n - 1))


def h_matrix(kc: np.ndarray, ka: np.ndarray, kb: np.ndarray) -> np.ndarray:
    """Elementwise product ``K_C * Kc_A * Kc_B``."""
    if not kc.shape == ka.shape == kb.shape or kc.shape[0] != kc.shape[1]:
        raise ConfigError(f"factor shapes differ or are not square: {kc.shape}, {ka.shape}, {kb.shape}")
    return kc * ka * kb


def _square(h: np.ndarray, min_n: int) -> int:
    h = np.asarray(h)
    if h.ndim != 2 or h.shape[0] != h.shape[1]:
        raise ConfigError(f"expected a square matrix, got shape {h.shape}")
    n = h.shape[0]
    if n < min_n:
        raise ConfigError(f"need n >= {min_n}, got {n}")
    return n


def kci_ustat(h: np.ndarray) -> float:
    """Off-diagonal mean of ``h``: the unbiased KCI estimate."""
    n = _square(h, 2)
    return float((h.sum() - np.trace(h)) / (n * (n - 1)))


def kci_hsic_unbiased(K: np.ndarray, L: np.ndarray, literal: bool = False) -> float:
    """HSIC-form unbiased estimate of KCI with ``K = Kc_A`` and ``L = Kc_B * K_C``.

    With ``Kt``, ``Lt`` the inputs with zeroed diagonals,

        1/(n(n-3)) [tr(Kt Lt) + 1'Kt1 1'Lt1 / ((n-1)(n-2)) - 2/(n-2) 1'Kt Lt 1]

    which equals the average over distinct index quadruples. ``literal=True``
    evaluates the same expression on the raw matrices with ``2/(n-1)`` in the
    last term instead; that variant is not unbiased.
    """
    n = _square(K, 4)
    if L.shape != K.shape:
        raise ConfigError(f"K and L shapes differ: {K.shape} vs {L.shape}")
    if literal:
        Kt, Lt, c = K, L, 2.0 / (n - 1)
    else:
        Kt = K - np.diag(np.diag(K))
        Lt = L - np.diag(np.diag(L))
        c = 2.0 / (n - 2)
    k1 = Kt.sum(axis=0)
    l1 = Lt.sum(axis=1)
    trace_kl = float(np.sum(Kt * Lt.T))
    total = trace_kl + k1.sum() * l1.sum() / ((n - 1) * (n - 2)) - c * float(k1 @ l1)
    return total / (n * (n - 3))


def _studentize(R: np.ndarray) -> np.ndarray:
    """sqrt(n) * mean / sd over axis 0, population sd."""
    n = R.shape[0]
    sd = R.std(axis=0)
    if np.any(sd <= 1e-12 * np.abs(R).max(axis=0)):
        raise DegenerateError("degenerate residual product: zero standard deviation")
    return np.sqrt(n) * R.mean(axis=0) / sd


def gcm_statistic(resid_a, resid_b) -> tuple[float, np.ndarray]:
    """Generalized covariance measure.

    Returns ``(T, per_entry)`` where ``per_entry[p, q]`` studentizes the
    products ``resid_a[:, p] * resid_b[:, q]`` and ``T = max |per_entry|``.
    """
    return wgcm_statistic(resid_a, resid_b, None)


def wgcm_statistic(resid_a, resid_b, weights) -> tuple[float, np.ndarray]:
    """Weighted GCM: products are multiplied by ``weights[i]`` before studentizing."""
    ra = np.asarray(resid_a, dtype=float)
    rb = np.asarray(resid_b, dtype=float)
    ra = ra.reshape(ra.shape[0], -1)
    rb = rb.reshape(rb.shape[0], -1)
    n = ra.shape[0]
    if rb.shape[0] != n:
        raise ConfigError("residual arrays differ in length")
    if n < 2:
        raise ConfigError("GCM needs n >= 2")
    R = ra[:, :, None] * rb[:, None, :]
    if weights is not None:
        w = np.asarray(weights, dtype=float).reshape(-1)
        if w.shape[0] != n:
            raise ConfigError("weights length differs from residuals")
        R = R * w[:, None, None]
    T = _studentize(R.reshape(n, -1)).reshape(ra.shape[1], rb.shape[1])
    return float(np.max(np.abs(T))), T


def empirical_variance_sigma2(h: np.ndarray) -> float:
    """``4/n^3 sum_i (sum_j h_ij)^2 - 4/n^4 (sum_ij h_ij)^2``, diagonal included, clamped at 0."""
    n = _square(h, 2)
    row = h.sum(axis=1)
    val = 4.0 * float(row @ row) / n**3 - 4.0 * float(row.sum()) ** 2 / n**4
    return max(val, 0.0)


def snr_estimate(h: np.ndarray, lambda_reg: float, numerator: float | None = None) -> float:
    """Signal-to-noise ratio ``U_n / sqrt(sigma2 + lambda_reg)``.

    ``numerator`` overrides ``kci_ustat(h)``, e.g. with the HSIC-form estimate.
    """
    if lambda_reg < 0:
        raise ConfigError("lambda_reg must be nonnegative")
    denom = empirical_variance_sigma2(h) + lambda_reg
    if not denom > 0:
        raise DegenerateError("SNR denominator is zero")
    u = kci_ustat(h) if numerator is None else numerator
    return float(u / np.sqrt(denom))


def population_moments_from_samples(phi_inner: np.ndarray, n: int | None = None) -> MomentSummary:
    """Plug-in (V-statistic) moments from a Gram matrix of ``phi_h`` samples.

    The samples are treated as an equally weighted empirical distribution,
    so passing the full support of a uniform discrete distribution gives its
    exact moments. ``n`` is the U-statistic sample size used for ``var_un``
    (default: the number of samples).
    """
    G = np.asarray(phi_inner, dtype=float)
    size = _square(G, 2)
    n = size if n is None else int(n)
    u = float(G.mean())
    proj = G.mean(axis=1)  # <mu, phi(X_i)>
    second = float(np.mean(proj**2))
    nu1 = max(second - u * u, 0.0)
    nu2 = max(float(np.mean(G * G)) - 2.0 * second + u * u, 0.0)
    return MomentSummary(
        u_mean=u,
        nu1=nu1,
        nu2=nu2,
        var_un=ustat_variance(nu1, nu2, n),
        sigma2_h1_n=empirical_variance_sigma2(G),
        n=n,
        v_c=second,
        v_m=u * u,
        v_s=float(np.mean(G * G)),
    )
