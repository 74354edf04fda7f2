import csv
import io
import json
import math
from dataclasses import replace

import numpy as np
import pytest
from scipy.stats import kstest

from kcitest.calibration import BootstrapConfig, hoeffding_threshold
from kcitest.errors import ConfigError
from kcitest.pipeline import (CSV_SCHEMA, SWEEP_FIELDS, TestConfig, TestResult, TestSplit, _normal_pvalue,
                              rows_to_csv, run_experiment, run_methods, run_single_test, split, sweep)
from kcitest.selection import SelectionConfig
from kcitest.statistics import gcm_statistic
from kcitest.synthetic import ScenarioConfig, generate

NULL = ScenarioConfig(tau=0.1, hypothesis="null")
SMALL = TestConfig(train_size=60, test_size=60, bootstrap=BootstrapConfig(num_samples=200),
                   selection=SelectionConfig(grid=(0.03, 0.3, 3.0)))
ALL_METHODS = ("kci", "kci-powermax", "gcm", "wgcm")


def test_config_validation():
    with pytest.raises(ConfigError):
        TestConfig(train_size=3)
    with pytest.raises(ConfigError):
        TestConfig(test_size=2)
    with pytest.raises(ConfigError):
        TestConfig(alpha=1.0)
    with pytest.raises(ConfigError):
        TestConfig(method="ttest")
    with pytest.raises(ConfigError):
        TestConfig(target_kernel="laplace")
    with pytest.raises(ConfigError):
        TestConfig(kc_lengthscale_sq=(-1.0,))
    with pytest.raises(ConfigError):
        TestConfig(master_seed=2**64)
    with pytest.raises(ConfigError):
        TestConfig.from_dict({"bogus": 1})


def test_config_json_round_trip():
    cfg = replace(SMALL, method="kci-powermax", kc_lengthscale_sq=(0.5,), master_seed=2**63 + 5,
                  target_kernel="gaussian")
    back = TestConfig.from_dict(json.loads(json.dumps(cfg.to_dict())))
    assert back == cfg


def test_result_json_round_trip():
    res = run_single_test(NULL, replace(SMALL, method="kci-powermax"), seed=4)
    back = TestResult.from_dict(json.loads(json.dumps(res.to_dict())))
    assert back.to_dict() == res.to_dict()


@pytest.mark.parametrize("method", ALL_METHODS)
def test_determinism(method):
    cfg = replace(SMALL, method=method)
    first = run_single_test(NULL, cfg, seed=11)
    second = run_single_test(NULL, cfg, seed=11)
    assert first.to_dict() == second.to_dict()
    assert run_single_test(NULL, cfg, seed=12).statistic != first.statistic


@pytest.mark.parametrize("method", ALL_METHODS)
def test_split_hygiene(method):
    res = run_single_test(NULL, replace(SMALL, method=method), seed=2)
    assert res.diagnostics["test_reads_before_statistic"] == 0


def test_split_hygiene_hoeffding():
    cfg = replace(SMALL, method="hoeffding-true-embeddings", target_kernel="gaussian", kc_lengthscale_sq=(1.0,))
    assert run_single_test(NULL, cfg, seed=2).diagnostics["test_reads_before_statistic"] == 0


def test_split_is_sequential_and_counts_reads():
    data = generate(NULL, 10, 0)
    train, test = split(data, 6, 4)
    np.testing.assert_array_equal(train.a, data.a[:6])
    assert isinstance(test, TestSplit) and test.reads == 0
    np.testing.assert_array_equal(test.c, data.c[6:])
    assert test.reads == 1
    with test.statistic_step():
        test.a, test.b
    assert test.reads == 1
    with pytest.raises(ConfigError):
        split(data, 8, 4)


def test_dataset_source_too_small():
    with pytest.raises(ConfigError):
        run_single_test(generate(NULL, 100, 0), SMALL)


def test_dataset_source_matches_generated():
    from kcitest.pipeline import run_seeds
    data_ss, _ = run_seeds(9)
    data = generate(NULL, 120, data_ss)
    assert run_single_test(data, SMALL, seed=9).to_dict() == run_single_test(NULL, SMALL, seed=9).to_dict()


@pytest.mark.parametrize("method", ["kci", "kci-powermax"])
def test_bootstrap_reject_rule(method):
    for seed in range(5):
        res = run_single_test(ScenarioConfig(tau=0.1, beta=3.0, hypothesis="alternative"),
                              replace(SMALL, method=method), seed=seed)
        assert 0.0 <= res.pvalue <= 1.0
        assert res.reject == (res.pvalue < SMALL.alpha)


def test_powermax_diagnostics():
    res = run_single_test(NULL, replace(SMALL, method="kci-powermax"), seed=0)
    assert len(res.diagnostics["snr_curve"]) == 3
    assert min(abs(res.selected_kc.lengthscales_sq[0] - g) / g for g in (0.03, 0.3, 3.0)) < 1e-12
    assert set(res.diagnostics["loo"]) == {"a", "b"}


def test_hoeffding_requires_bounded_kernels():
    with pytest.raises(ConfigError):
        run_single_test(NULL, replace(SMALL, method="hoeffding-true-embeddings"), seed=0)


def test_hoeffding_requires_known_means():
    cfg = replace(SMALL, method="hoeffding-true-embeddings", target_kernel="gaussian")
    with pytest.raises(ConfigError):
        run_single_test(generate(NULL, 120, 0), cfg)


def test_hoeffding_never_rejects_under_null():
    cfg = TestConfig(train_size=4, test_size=200, method="hoeffding-true-embeddings",
                     target_kernel="gaussian", kc_lengthscale_sq=(1.0,))
    summ = run_experiment(cfg, NULL, 500)["hoeffding-true-embeddings"]
    assert summ.rate == 0.0
    res = run_single_test(NULL, cfg, seed=1)
    thr = hoeffding_threshold(1.0, 1.0, 1.0, 200, 0.05)
    assert res.diagnostics["threshold"] == thr
    assert res.reject == (res.statistic > thr)
    assert max(abs(s) for s in summ.statistics) < thr / 100


def test_gcm_pvalues_uniform_under_exact_regression():
    rng = np.random.default_rng(7)
    pvals = []
    for _ in range(500):
        ra, rb = rng.standard_normal((200, 1)), rng.standard_normal((200, 1))
        pvals.append(_normal_pvalue(gcm_statistic(ra, rb)[1]))
    assert kstest(pvals, "uniform").statistic <= 0.1


def test_gcm_blind_to_symmetric_alternative():
    cfg = TestConfig(method="gcm")
    summ = run_experiment(cfg, ScenarioConfig(tau=0.1, beta=3.0, hypothesis="alternative"), 100)["gcm"]
    assert 0.0 <= summ.rate <= 0.12


@pytest.mark.parametrize("method", ["kci", "gcm"])
def test_experiment_summary(method):
    cfg = replace(SMALL, method=method, master_seed=5)
    summ = run_experiment(cfg, NULL, 100)[method]
    assert summ.repetitions == 100 and len(summ.rejections) == 100
    assert summ.rate == sum(summ.rejections) / 100
    assert summ.se == math.sqrt(summ.rate * (1 - summ.rate) / 100)
    assert 0.0 <= summ.rate <= 1.0


def test_experiment_seeds_by_xor():
    cfg = replace(SMALL, master_seed=6)
    summ = run_experiment(cfg, NULL, 4)["kci"]
    for i in range(4):
        assert run_single_test(NULL, cfg, seed=6 ^ i).statistic == summ.statistics[i]


def test_single_repetition():
    summ = run_experiment(SMALL, NULL, 1)["kci"]
    assert summ.rate in (0.0, 1.0) and summ.se == 0.0
    with pytest.raises(ConfigError):
        run_experiment(SMALL, NULL, 0)


def test_power_near_analytic_argmax():
    cfg = TestConfig(train_size=1000, test_size=200, kc_lengthscale_sq=(0.12,),
                     bootstrap=BootstrapConfig(num_samples=500))
    summ = run_experiment(cfg, ScenarioConfig(tau=0.1, beta=2.0, hypothesis="alternative"), 100)["kci"]
    assert summ.rate >= 0.8


def test_sweep_single_value():
    cfg = replace(SMALL, kc_lengthscale_sq=(1.0,))
    rows = sweep(cfg, NULL, "ell_sq", [0.5], 3)
    assert len(rows) == 1
    row = rows[0]
    assert row["schema"] == CSV_SCHEMA and row["axis"] == "ell_sq" and row["value"] == 0.5
    assert row["oracle_kci"] == 0.0 and row["oracle_var"] > 0


def test_sweep_axes_and_oracle_columns():
    rows = sweep(replace(SMALL, target_kernel="gaussian"), NULL, "beta", [1.0, 2.0], 2, ["kci", "gcm"])
    assert [(r["value"], r["method"]) for r in rows] == [(1.0, "kci"), (1.0, "gcm"), (2.0, "kci"), (2.0, "gcm")]
    assert all(r["oracle_kci"] == "" for r in rows)
    rows = sweep(SMALL, NULL, "train_size", [20], 2)
    assert rows[0]["value"] == 20
    with pytest.raises(ConfigError):
        sweep(SMALL, NULL, "alpha", [0.1], 2)
    with pytest.raises(ConfigError):
        sweep(SMALL, NULL, "beta", [], 2)


def test_sweep_csv_independent_of_threads():
    args = (SMALL, ScenarioConfig(tau=0.1, beta=2.0, hypothesis="alternative"), "ell_sq", [0.1, 1.0], 6,
            ["kci", "gcm"])
    one = rows_to_csv(sweep(*args, threads=1))
    three = rows_to_csv(sweep(*args, threads=3))
    assert one == three
    parsed = list(csv.DictReader(io.StringIO(one)))
    assert list(parsed[0]) == list(SWEEP_FIELDS)
    assert parsed[0]["schema"] == "1"


def test_power_band_shifts_with_frequency():
    cfg = TestConfig(train_size=200, test_size=200, bootstrap=BootstrapConfig(num_samples=300))
    grid = [0.003, 0.01, 0.03, 0.1, 0.3, 1.0, 3.0]

    def upper_edge(beta):
        rows = sweep(cfg, ScenarioConfig(tau=0.1, beta=beta, hypothesis="alternative"), "ell_sq", grid, 40)
        return max(r["value"] for r in rows if r["rate"] >= 0.5)

    assert upper_edge(6.0) < upper_edge(2.0)


def test_multiple_methods_share_data():
    res = run_methods(NULL, SMALL, ALL_METHODS, seed=3)
    assert set(res) == set(ALL_METHODS)
    single = run_single_test(NULL, replace(SMALL, method="gcm"), seed=3)
    assert res["gcm"].to_dict() == single.to_dict()
    with pytest.raises(ConfigError):
        run_methods(NULL, SMALL, ["nope"])


def test_multidimensional_conditioning():
    sc = ScenarioConfig(tau=0.1, beta=2.0, hypothesis="alternative", dim_c=3, e_a=1, e_b=2, e_c=3)
    cfg = replace(SMALL, target_kernel="gaussian", selection=SelectionConfig(grid=(0.1, 1.0), sweeps=1))
    res = run_methods(sc, cfg, ALL_METHODS, seed=0)
    assert len(res["kci-powermax"].selected_kc.lengthscales_sq) == 3
    assert all(0.0 <= r.pvalue <= 1.0 for r in res.values())
