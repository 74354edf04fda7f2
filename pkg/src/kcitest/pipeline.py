"""End-to-end testing procedure, repeated experiments and parameter sweeps.

One run splits the data sequentially into a training block of ``m`` rows and
a test block of ``n`` rows, fits both conditional mean embeddings on the
training block (kernel and ridge chosen by leave-one-out), optionally picks
``k_C`` by SNR on the training block, and evaluates the statistic and its
calibration on the test block only.
"""

from __future__ import annotations

import csv
import io
import math
from contextlib import contextmanager
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from typing import Iterable, Sequence

import numpy as np
from scipy.stats import norm

from .calibration import BootstrapConfig, hoeffding_pvalue, hoeffding_threshold, wild_bootstrap_pvalue
from .cme import (DEFAULT_LENGTHSCALE_FACTORS, DEFAULT_RIDGE_GRID, CmeModel, centered_test_gram,
                  default_regression_grid, fit_cme, loo_select, loo_select_coordinatewise,
                  loo_select_many)
from .errors import ConfigError
from .kernels import KernelSpec, as_points, gram, per_dimension_median
from .selection import SelectionConfig, select_kc
from .statistics import gcm_statistic, h_matrix, kci_hsic_unbiased, kci_ustat, wgcm_statistic
from .synthetic import Dataset, ScenarioConfig, generate, oracle_kci, oracle_variance, true_centered_gram

METHODS = ("kci", "kci-powermax", "gcm", "wgcm", "hoeffding-true-embeddings")
TARGET_KERNELS = ("linear", "gaussian")
SWEEP_AXES = ("ell_sq", "beta", "train_size")
CSV_SCHEMA = 1


@dataclass(frozen=True)
class TestConfig:
    __test__ = False  # not a pytest class

    train_size: int = 200
    test_size: int = 200
    alpha: float = 0.05
    method: str = "kci"
    target_kernel: str = "linear"
    kc_lengthscale_sq: tuple | None = None  # fixed k_C; None -> squared per-dimension median
    selection: SelectionConfig = field(default_factory=SelectionConfig)
    bootstrap: BootstrapConfig = field(default_factory=BootstrapConfig)
    ridge_grid: tuple = DEFAULT_RIDGE_GRID
    lengthscale_factors: tuple = DEFAULT_LENGTHSCALE_FACTORS
    master_seed: int = 0
    literal_hsic: bool = False

    def __post_init__(self):
        if self.train_size < 4 or self.test_size < 4:
            raise ConfigError("train_size and test_size must be at least 4")
        if not 0 < self.alpha < 1:
            raise ConfigError("alpha must lie in (0, 1)")
        if self.method not in METHODS:
            raise ConfigError(f"method must be one of {METHODS}")
        if self.target_kernel not in TARGET_KERNELS:
            raise ConfigError(f"target_kernel must be one of {TARGET_KERNELS}")
        if self.kc_lengthscale_sq is not None:
            ls = tuple(float(v) for v in np.atleast_1d(self.kc_lengthscale_sq))
            if not all(v > 0 and math.isfinite(v) for v in ls):
                raise ConfigError("kc_lengthscale_sq must be positive and finite")
            object.__setattr__(self, "kc_lengthscale_sq", ls)
        object.__setattr__(self, "ridge_grid", tuple(float(v) for v in self.ridge_grid))
        object.__setattr__(self, "lengthscale_factors", tuple(float(v) for v in self.lengthscale_factors))
        if not self.ridge_grid or min(self.ridge_grid) <= 0:
            raise ConfigError("ridge grid must be non-empty and positive")
        if not 0 <= int(self.master_seed) < 2**64:
            raise ConfigError("master_seed must be a 64-bit unsigned integer")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["selection"] = self.selection.to_dict()
        d["kc_lengthscale_sq"] = None if self.kc_lengthscale_sq is None else list(self.kc_lengthscale_sq)
        d["ridge_grid"] = list(self.ridge_grid)
        d["lengthscale_factors"] = list(self.lengthscale_factors)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TestConfig":
        d = dict(d)
        if "selection" in d:
            d["selection"] = SelectionConfig.from_dict(d["selection"])
        if "bootstrap" in d:
            d["bootstrap"] = BootstrapConfig(**d["bootstrap"])
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown test config keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class TestResult:
    __test__ = False

    method: str
    statistic: float
    pvalue: float
    reject: bool
    selected_kc: KernelSpec | None = None
    diagnostics: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "method": self.method,
            "statistic": self.statistic,
            "pvalue": self.pvalue,
            "reject": self.reject,
            "selected_kc": None if self.selected_kc is None else self.selected_kc.to_dict(),
            "diagnostics": self.diagnostics,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "TestResult":
        kc = d.get("selected_kc")
        return cls(d["method"], float(d["statistic"]), float(d["pvalue"]), bool(d["reject"]),
                   None if kc is None else KernelSpec.from_dict(kc), dict(d.get("diagnostics", {})))


class TrainSplit:
    """Training rows; the only data CME fitting and k_C selection may see."""

    def __init__(self, data: Dataset):
        self.a, self.b, self.c = data.a, data.b, data.c

    def __len__(self) -> int:
        return self.a.shape[0]


class TestSplit:
    """Test rows behind accessors that count reads made outside a statistic step."""

    __test__ = False

    def __init__(self, data: Dataset):
        self._data = data
        self._open = False
        self.reads = 0

    def __len__(self) -> int:
        return len(self._data)

    @contextmanager
    def statistic_step(self):
        """Reads inside this block are the legitimate ones and are not counted."""
        self._open = True
        try:
            yield self
        finally:
            self._open = False

    def _get(self, name: str) -> np.ndarray:
        if not self._open:
            self.reads += 1
        return getattr(self._data, name)

    @property
    def a(self) -> np.ndarray:
        return self._get("a")

    @property
    def b(self) -> np.ndarray:
        return self._get("b")

    @property
    def c(self) -> np.ndarray:
        return self._get("c")


def split(data: Dataset, m: int, n: int) -> tuple[TrainSplit, TestSplit]:
    if len(data) < m + n:
        raise ConfigError(f"need {m + n} rows for the split, got {len(data)}")
    return TrainSplit(data.rows(0, m)), TestSplit(data.rows(m, m + n))


def run_seeds(seed: int) -> tuple[np.random.SeedSequence, int]:
    """Independent data stream and bootstrap seed derived from one run seed."""
    data_ss, boot_ss = np.random.SeedSequence(int(seed)).spawn(2)
    return data_ss, int(boot_ss.generate_state(1, np.uint64)[0])


def _target_kernel(cfg: TestConfig, targets: np.ndarray) -> KernelSpec:
    if cfg.target_kernel == "linear":
        return KernelSpec.linear()
    return KernelSpec.gaussian(per_dimension_median(targets))


def _fit_pair(train: TrainSplit, kern_a: KernelSpec, kern_b: KernelSpec, cfg: TestConfig):
    """LOO-select and fit the embeddings of A|C and B|C on the training split."""
    if train.c.shape[1] == 1:
        grid = default_regression_grid(train.c, cfg.lengthscale_factors)
        choices = loo_select_many(train.c, [train.a, train.b], grid, [kern_a, kern_b], cfg.ridge_grid)
    else:
        choices = loo_select_coordinatewise(train.c, [train.a, train.b], [kern_a, kern_b],
                                            cfg.lengthscale_factors, cfg.ridge_grid)
    (spec_a, ridge_a, err_a), (spec_b, ridge_b, err_b) = choices
    cme_a = fit_cme(train.c, train.a, spec_a, kern_a, ridge_a)
    cme_b = fit_cme(train.c, train.b, spec_b, kern_b, ridge_b)
    loo = {
        "a": {"kernel": spec_a.to_dict(), "ridge": ridge_a, "loo_error": err_a},
        "b": {"kernel": spec_b.to_dict(), "ridge": ridge_b, "loo_error": err_b},
    }
    return cme_a, cme_b, loo


def _fixed_kc(cfg: TestConfig, train: TrainSplit) -> KernelSpec:
    if cfg.kc_lengthscale_sq is not None:
        return KernelSpec.gaussian_sq(cfg.kc_lengthscale_sq)
    return KernelSpec.gaussian(per_dimension_median(train.c))


def _kci_result(method, cme_a, cme_b, kc: KernelSpec, test: TestSplit, cfg, boot_seed, diag) -> TestResult:
    diag = dict(diag, test_reads_before_statistic=test.reads)
    with test.statistic_step():
        a, b, c = test.a, test.b, test.c
    K = centered_test_gram(cme_a, c, a)
    L = centered_test_gram(cme_b, c, b) * gram(kc, c)
    stat = kci_hsic_unbiased(K, L, literal=cfg.literal_hsic)
    p, _ = wild_bootstrap_pvalue(K, L, stat, replace(cfg.bootstrap, seed=boot_seed), literal=cfg.literal_hsic)
    return TestResult(method, stat, p, bool(p < cfg.alpha), kc, diag)


def _normal_pvalue(per_entry: np.ndarray) -> float:
    """Two-sided normal p-value of max |T|, Bonferroni-adjusted over entries."""
    tmax = float(np.max(np.abs(per_entry)))
    return float(min(1.0, per_entry.size * 2.0 * norm.sf(tmax)))


def _residuals(model: CmeModel, c, targets) -> np.ndarray:
    return as_points(targets) - model.predict_mean(c)


def _wgcm_weights(train: TrainSplit, lin_a: CmeModel, lin_b: CmeModel, test_c, cfg) -> np.ndarray:
    """Sign of a kernel ridge fit of training residual products, evaluated on the test points."""
    ra = _residuals(lin_a, train.c, train.a)
    rb = _residuals(lin_b, train.c, train.b)
    prod = (ra[:, :1] * rb[:, :1])
    grid = default_regression_grid(train.c, cfg.lengthscale_factors) if train.c.shape[1] == 1 else \
        [KernelSpec.gaussian(per_dimension_median(train.c))]
    spec, ridge, _ = loo_select(train.c, prod, grid, KernelSpec.linear(), cfg.ridge_grid)
    fit = fit_cme(train.c, prod, spec, KernelSpec.linear(), ridge)
    w = np.sign(fit.predict_mean(test_c)[:, 0])
    w[w == 0] = 1.0
    return w


def _hoeffding(scenario: ScenarioConfig | None, train: TrainSplit, test: TestSplit, cfg: TestConfig) -> TestResult:
    if scenario is None:
        raise ConfigError("hoeffding-true-embeddings needs a scenario with known conditional means")
    if cfg.target_kernel != "gaussian":
        raise ConfigError("hoeffding-true-embeddings needs bounded (gaussian) target kernels")
    if train.a.shape[1] != 1 or train.b.shape[1] != 1:
        raise ConfigError("hoeffding-true-embeddings supports scalar A and B only")
    kern_a = _target_kernel(cfg, train.a)
    kern_b = _target_kernel(cfg, train.b)
    kc = _fixed_kc(cfg, train)
    kappa = kern_a.bound * kern_b.bound * kc.bound
    diag = {"test_reads_before_statistic": test.reads}
    with test.statistic_step():
        a, b, c = test.a, test.b, test.c
    mean_a, mean_b = scenario.means(c)
    h = h_matrix(gram(kc, c), true_centered_gram(kern_a, a, mean_a, scenario.tau),
                 true_centered_gram(kern_b, b, mean_b, scenario.tau))
    stat = kci_ustat(h)
    n = len(test)
    thr = hoeffding_threshold(kern_a.bound, kern_b.bound, kc.bound, n, cfg.alpha)
    diag["threshold"] = thr
    return TestResult("hoeffding-true-embeddings", stat, hoeffding_pvalue(stat, kappa, n), stat > thr, kc, diag)


def run_methods(source, cfg: TestConfig, methods: Sequence[str] | None = None, seed: int | None = None,
                scenario: ScenarioConfig | None = None) -> dict[str, TestResult]:
    """Run several methods on one dataset, sharing the fitted embeddings.

    ``source`` is a :class:`Dataset` or a :class:`ScenarioConfig` (data are
    then generated from ``seed``, default ``cfg.master_seed``). ``scenario``
    supplies the true means for the Hoeffding method when ``source`` is data.
    """
    methods = tuple(methods or (cfg.method,))
    for meth in methods:
        if meth not in METHODS:
            raise ConfigError(f"unknown method {meth!r}")
    seed = cfg.master_seed if seed is None else seed
    data_ss, boot_seed = run_seeds(seed)
    if isinstance(source, ScenarioConfig):
        scenario = source
        data = generate(source, cfg.train_size + cfg.test_size, data_ss)
    else:
        data = source
    train, test = split(data, cfg.train_size, cfg.test_size)
    out: dict[str, TestResult] = {}

    kern_a = _target_kernel(cfg, train.a)
    kern_b = _target_kernel(cfg, train.b)
    need_kci = any(meth in ("kci", "kci-powermax") for meth in methods)
    need_lin = any(meth in ("gcm", "wgcm") for meth in methods)
    if need_kci or (need_lin and cfg.target_kernel == "linear"):
        cme_a, cme_b, loo = _fit_pair(train, kern_a, kern_b, cfg)
    if need_lin:
        if cfg.target_kernel == "linear":
            lin_a, lin_b, lin_loo = cme_a, cme_b, loo
        else:
            lin_a, lin_b, lin_loo = _fit_pair(train, KernelSpec.linear(), KernelSpec.linear(), cfg)

    for meth in methods:
        if meth == "kci":
            out[meth] = _kci_result(meth, cme_a, cme_b, _fixed_kc(cfg, train), test, cfg, boot_seed, {"loo": loo})
        elif meth == "kci-powermax":
            sel = select_kc(train, cme_a, cme_b, cfg.selection)
            diag = {"loo": loo, "snr_curve": sel.curve_rows(), "selected_snr": sel.snr}
            out[meth] = _kci_result(meth, cme_a, cme_b, sel.spec, test, cfg, boot_seed, diag)
        elif meth in ("gcm", "wgcm"):
            diag = {"loo": lin_loo, "test_reads_before_statistic": test.reads}
            with test.statistic_step():
                ta, tb, tc = test.a, test.b, test.c
            ra = _residuals(lin_a, tc, ta)
            rb = _residuals(lin_b, tc, tb)
            if meth == "gcm":
                stat, per_entry = gcm_statistic(ra, rb)
            else:
                w = _wgcm_weights(train, lin_a, lin_b, tc, cfg)
                stat, per_entry = wgcm_statistic(ra, rb, w)
            p = _normal_pvalue(per_entry)
            out[meth] = TestResult(meth, stat, p, bool(p < cfg.alpha), None, diag)
        else:
            out[meth] = _hoeffding(scenario, train, test, cfg)
    return out


def run_single_test(source, cfg: TestConfig, seed: int | None = None,
                    scenario: ScenarioConfig | None = None) -> TestResult:
    return run_methods(source, cfg, (cfg.method,), seed, scenario)[cfg.method]


@dataclass
class ExperimentSummary:
    method: str
    repetitions: int
    rate: float
    se: float
    rejections: tuple[bool, ...]
    pvalues: tuple[float, ...]
    statistics: tuple[float, ...]

    def to_dict(self) -> dict:
        d = asdict(self)
        for k in ("rejections", "pvalues", "statistics"):
            d[k] = list(d[k])
        return d


def _map(fn, items: Iterable, threads: int) -> list:
    items = list(items)
    if threads <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, items))


def run_experiment(cfg: TestConfig, scenario: ScenarioConfig, repetitions: int,
                   methods: Sequence[str] | None = None, threads: int = 1) -> dict[str, ExperimentSummary]:
    """Repeat the test on fresh data; run ``i`` uses seed ``master_seed XOR i``.

    ``rate`` is the rejection fraction (Type-I error under the null, power
    under the alternative) and ``se = sqrt(rate (1 - rate) / R)``.
    """
    if repetitions < 1:
        raise ConfigError("repetitions must be positive")
    methods = tuple(methods or (cfg.method,))
    runs = _map(lambda i: run_methods(scenario, cfg, methods, int(cfg.master_seed) ^ i), range(repetitions), threads)
    out = {}
    for meth in methods:
        res = [r[meth] for r in runs]
        rej = tuple(r.reject for r in res)
        rate = sum(rej) / repetitions
        out[meth] = ExperimentSummary(meth, repetitions, rate, math.sqrt(rate * (1 - rate) / repetitions), rej,
                                      tuple(r.pvalue for r in res), tuple(r.statistic for r in res))
    return out


def _oracle_columns(cfg: TestConfig, scenario: ScenarioConfig) -> dict:
    """Closed-form KCI and variance when the scenario admits them."""
    ls = cfg.kc_lengthscale_sq
    if scenario.dim_c != 1 or cfg.target_kernel != "linear" or ls is None or len(ls) != 1:
        return {"oracle_kci": "", "oracle_var": ""}
    beta = scenario.beta if scenario.hypothesis == "alternative" else 0.0
    mom = oracle_variance(scenario.tau, beta, ls[0], cfg.test_size)
    return {"oracle_kci": oracle_kci(scenario.tau, beta, ls[0]), "oracle_var": mom.var_un}


SWEEP_FIELDS = ("schema", "axis", "value", "method", "repetitions", "rate", "se", "oracle_kci", "oracle_var")


def sweep(cfg: TestConfig, scenario: ScenarioConfig, axis: str, values: Sequence[float],
          repetitions: int, methods: Sequence[str] | None = None, threads: int = 1) -> list[dict]:
    """One :func:`run_experiment` per value of ``axis``; one row per (value, method)."""
    if axis not in SWEEP_AXES:
        raise ConfigError(f"axis must be one of {SWEEP_AXES}")
    if not len(values):
        raise ConfigError("sweep values must be non-empty")
    rows = []
    for v in values:
        if axis == "ell_sq":
            c, s = replace(cfg, kc_lengthscale_sq=(float(v),) * scenario.dim_c), scenario
        elif axis == "beta":
            c, s = cfg, replace(scenario, beta=float(v))
        else:
            c, s = replace(cfg, train_size=int(v)), scenario
        summaries = run_experiment(c, s, repetitions, methods, threads)
        for meth, summ in summaries.items():
            rows.append({"schema": CSV_SCHEMA, "axis": axis, "value": v, "method": meth,
                         "repetitions": repetitions, "rate": summ.rate, "se": summ.se,
                         **_oracle_columns(c, s)})
    return rows


def rows_to_csv(rows: Sequence[dict], fields: Sequence[str] = SWEEP_FIELDS) -> str:
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=list(fields), lineterminator="\n")
    w.writeheader()
    for r in rows:
        w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in r.items()})
    return buf.getvalue()
