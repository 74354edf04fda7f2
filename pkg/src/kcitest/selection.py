"""Choice of the conditioning kernel ``k_C`` by maximizing an empirical SNR.

Candidates are Gaussian kernels indexed by squared lengthscales. For each
candidate the SNR is ``stat / sqrt(sigma2(h) + reg_const * n^(-1/3))`` with
``h = K_C * Kc_A * Kc_B`` built on the training split, ``sigma2`` the
empirical variance estimate and ``stat`` the HSIC-form estimate (or the
plain U-statistic).
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.optimize import minimize_scalar
from scipy.spatial.distance import pdist, squareform

from .cme import CmeModel, centered_test_gram
from .errors import ConfigError, DegenerateError
from .kernels import KernelSpec, as_points, per_dimension_median
from .statistics import empirical_variance_sigma2, kci_hsic_unbiased, kci_ustat

DEFAULT_GRID = tuple(float(v) for v in np.logspace(-2, 2, 20))
STATISTICS = ("hsic", "ustat")


@dataclass(frozen=True)
class SelectionConfig:
    grid: tuple = DEFAULT_GRID
    reg_const: float = 1e-12
    refine: bool = False
    statistic: str = "hsic"
    sweeps: int = 2

    def __post_init__(self):
        grid = tuple(float(v) for v in np.atleast_1d(np.asarray(self.grid, dtype=float)))
        if not grid:
            raise ConfigError("selection grid must be non-empty")
        if not all(v > 0 and math.isfinite(v) for v in grid):
            raise ConfigError("selection grid values must be positive and finite")
        object.__setattr__(self, "grid", grid)
        if self.reg_const < 0:
            raise ConfigError("reg_const must be nonnegative")
        if self.statistic not in STATISTICS:
            raise ConfigError(f"statistic must be one of {STATISTICS}")
        if self.sweeps < 1:
            raise ConfigError("sweeps must be positive")

    def to_dict(self) -> dict:
        return {"grid": list(self.grid), "reg_const": self.reg_const, "refine": self.refine,
                "statistic": self.statistic, "sweeps": self.sweeps}

    @classmethod
    def from_dict(cls, d: dict) -> "SelectionConfig":
        return cls(**d)


@dataclass(frozen=True)
class CurvePoint:
    lengthscale_sq: tuple[float, ...]
    snr: float
    u_stat: float
    sigma2: float


@dataclass(frozen=True)
class SelectionResult:
    spec: KernelSpec
    snr: float
    curve: tuple[CurvePoint, ...] = field(repr=False)

    @property
    def lengthscale_sq(self) -> tuple[float, ...]:
        return self.spec.lengthscales_sq

    def curve_rows(self) -> list[dict]:
        return [{"lengthscale_sq": ";".join(repr(v) for v in p.lengthscale_sq), "snr": p.snr,
                 "u_stat": p.u_stat, "sigma2": p.sigma2} for p in self.curve]

    def to_csv(self, path: str) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=["lengthscale_sq", "snr", "u_stat", "sigma2"])
            w.writeheader()
            w.writerows(self.curve_rows())


class _SnrEvaluator:
    """Caches per-dimension squared distances and evaluated candidates."""

    def __init__(self, c: np.ndarray, ka: np.ndarray, kb: np.ndarray, cfg: SelectionConfig):
        self.n = c.shape[0]
        self.sqdist = [squareform(pdist(c[:, [d]], "sqeuclidean")) for d in range(c.shape[1])]
        self.ka, self.kb, self.kab = ka, kb, ka * kb
        self.cfg = cfg
        self.lam = cfg.reg_const * self.n ** (-1.0 / 3.0)
        self.seen: dict[tuple, CurvePoint | None] = {}
        self.order: list[tuple] = []

    def __call__(self, ell_sq: tuple) -> CurvePoint | None:
        if ell_sq in self.seen:
            return self.seen[ell_sq]
        expo = sum(D / L for D, L in zip(self.sqdist, ell_sq))
        kc = np.exp(-0.5 * expo)
        h = kc * self.kab
        sigma2 = empirical_variance_sigma2(h)
        if self.cfg.statistic == "hsic":
            u = kci_hsic_unbiased(self.ka, self.kb * kc)
        else:
            u = kci_ustat(h)
        denom = sigma2 + self.lam
        point = CurvePoint(ell_sq, float(u / math.sqrt(denom)), float(u), sigma2) if denom > 0 else None
        self.seen[ell_sq] = point
        self.order.append(ell_sq)
        return point


def _best(points: Sequence[CurvePoint]) -> CurvePoint:
    """argmax SNR; ties go to the larger (smoother) lengthscale."""
    valid = [p for p in points if p is not None]
    if not valid:
        raise DegenerateError("every k_C candidate has a zero SNR denominator")
    return max(valid, key=lambda p: (p.snr, p.lengthscale_sq))


def _refine_1d(ev: _SnrEvaluator, grid: Sequence[float], best: CurvePoint) -> CurvePoint:
    """Golden-section search on ``log l^2`` between the argmax's grid neighbours."""
    g = sorted(grid)
    i = g.index(best.lengthscale_sq[0])
    lo, hi = g[max(i - 1, 0)], g[min(i + 1, len(g) - 1)]
    if lo == hi:
        return best

    def neg(log_l):
        p = ev((float(math.exp(log_l)),))
        return math.inf if p is None else -p.snr

    mid = best.lengthscale_sq[0]
    bracket = (math.log(lo), math.log(mid), math.log(hi))
    try:
        # interior strict maximum: the grid triple is a valid golden-section bracket
        res = minimize_scalar(neg, bracket=bracket, method="golden", options={"xtol": 1e-4})
    except ValueError:
        # argmax on the grid boundary or tied with a neighbour
        res = minimize_scalar(neg, bounds=(bracket[0], bracket[2]), method="bounded", options={"xatol": 1e-3})
    x = min(max(float(res.x), bracket[0]), bracket[2])
    cand = ev((float(math.exp(x)),))
    return cand if cand is not None and cand.snr > best.snr else best


def select_kc(train, cme_a: CmeModel, cme_b: CmeModel, cfg: SelectionConfig = SelectionConfig()) -> SelectionResult:
    """Pick the Gaussian ``k_C`` maximizing the training-split SNR.

    ``train`` is any object with ``a``, ``b``, ``c`` arrays. For scalar C the
    grid is searched exhaustively (with optional bounded 1-D refinement on
    ``log l^2`` between the argmax's grid neighbours). For multi-dimensional
    C each coordinate's squared lengthscale is searched over the same grid by
    cyclic coordinate descent, starting from the per-dimension median
    heuristic.
    """
    c = as_points(train.c)
    n = c.shape[0]
    if n < 4:
        raise ConfigError("selection needs at least 4 training points")
    ka = centered_test_gram(cme_a, c, train.a)
    kb = centered_test_gram(cme_b, c, train.b)
    ev = _SnrEvaluator(c, ka, kb, cfg)
    if c.shape[1] == 1:
        best = _best([ev((v,)) for v in cfg.grid])
        if cfg.refine:
            best = _refine_1d(ev, cfg.grid, best)
    else:
        current = [float(v) ** 2 for v in per_dimension_median(c)]
        best = ev(tuple(current))
        for _ in range(cfg.sweeps):
            for d in range(c.shape[1]):
                cands = [ev(tuple(current[:d] + [v] + current[d + 1:])) for v in cfg.grid]
                if best is not None:
                    cands.append(best)
                best = _best(cands)
                current = list(best.lengthscale_sq)
        if best is None:
            raise DegenerateError("every k_C candidate has a zero SNR denominator")
    curve = tuple(ev.seen[k] for k in ev.order if ev.seen[k] is not None)
    return SelectionResult(KernelSpec.gaussian_sq(best.lengthscale_sq), best.snr, curve)
