import math
import warnings

import numpy as np
import pytest

from kcitest.errors import ConfigError, DegenerateError, QuadratureWarning
from kcitest.kernels import KernelSpec, gram
from kcitest.statistics import h_matrix, kci_ustat
from kcitest.synthetic import (Dataset, ErrorFunction, RegressionErrorSpec, ScenarioConfig, generate,
                               hermite_nodes, injected_residuals, oracle_kci, oracle_noisy_kci,
                               oracle_noisy_variance, oracle_snr_curve, oracle_variance, true_centered_gram)


def test_generate_tau_zero_exact_means():
    cfg = ScenarioConfig(tau=0.0)
    d = generate(cfg, 50, 1)
    np.testing.assert_array_equal(d.a[:, 0], np.cos(d.c[:, 0]))
    np.testing.assert_array_equal(d.b[:, 0], np.exp(d.c[:, 0]))


def test_generate_beta_zero_alternative_equals_null():
    a = generate(ScenarioConfig(beta=0.0, hypothesis="alternative"), 100, 4)
    b = generate(ScenarioConfig(hypothesis="null"), 100, 4)
    np.testing.assert_array_equal(a.b, b.b)


def test_generate_deterministic_and_shapes():
    cfg = ScenarioConfig(dim_c=3, e_a=1, e_b=2, e_c=3, hypothesis="alternative")
    d1, d2 = generate(cfg, 20, 9), generate(cfg, 20, 9)
    np.testing.assert_array_equal(d1.c, d2.c)
    assert d1.c.shape == (20, 3) and d1.a.shape == (20, 1)
    with pytest.raises(ConfigError):
        generate(cfg, 0, 1)


def test_binned_residual_covariance_tracks_sine():
    cfg = ScenarioConfig(tau=1.0, beta=1.0, hypothesis="alternative", f_a="zero", f_b="zero")
    d = generate(cfg, 100_000, 2)
    c, p = d.c[:, 0], d.a[:, 0] * d.b[:, 0]
    edges = np.linspace(-2, 2, 9)
    for lo, hi in zip(edges[:-1], edges[1:]):
        sel = (c >= lo) & (c < hi)
        target = np.mean(np.sin(c[sel]))
        se = p[sel].std(ddof=1) / math.sqrt(sel.sum())
        assert abs(p[sel].mean() - target) <= 3 * se + 1e-12


def test_null_residual_correlation_zero():
    cfg = ScenarioConfig(hypothesis="null", beta=5.0)
    np.testing.assert_array_equal(cfg.gamma(np.linspace(-3, 3, 11)), np.zeros(11))


@pytest.mark.parametrize("kwargs", [dict(f_a="tan"), dict(hypothesis="maybe"), dict(tau=-1.0),
                                    dict(dim_c=1, e_c=2), dict(dim_c=0)])
def test_scenario_validation(kwargs):
    with pytest.raises(ConfigError):
        ScenarioConfig(**kwargs)


def test_scenario_roundtrip():
    cfg = ScenarioConfig(dim_c=3, e_b=2, e_c=3, beta=2.0)
    assert ScenarioConfig.from_dict(cfg.to_dict()) == cfg


def test_dataset_csv_roundtrip(tmp_path):
    d = generate(ScenarioConfig(dim_c=3), 7, 0)
    path = str(tmp_path / "d.csv")
    d.to_csv(path)
    with open(path) as fh:
        assert fh.readline().strip() == "a_1,b_1,c_1,c_2,c_3"
    back = Dataset.from_csv(path)
    np.testing.assert_array_equal(back.c, d.c)
    np.testing.assert_array_equal(back.a, d.a)


def test_error_functions():
    c = np.array([0.0, math.pi / 2])
    np.testing.assert_allclose(ErrorFunction("sin", 0.1, 1.0)(c), [0.0, 0.1])
    np.testing.assert_allclose(ErrorFunction("bump", 2.0, center=0.0, width=1.0)(c)[0], 2.0)
    np.testing.assert_allclose(ErrorFunction("constant", 0.3)(c), [0.3, 0.3])
    assert ErrorFunction().is_zero
    with pytest.raises(ConfigError):
        ErrorFunction("cubic")
    grid = np.linspace(-6, 6, 101)
    for f in (ErrorFunction("sin", 0.1, 3.0), ErrorFunction("bump", 0.2, width=0.5)):
        assert np.all(np.abs(f(grid)) <= 0.2 + 1e-12)


def test_error_spec_roundtrip():
    err = RegressionErrorSpec(ErrorFunction("sin", 0.1, 2.0), ErrorFunction("bump", 0.2))
    assert RegressionErrorSpec.from_dict(err.to_dict()) == err


def test_oracle_kci_examples():
    assert oracle_kci(0.1, 1.0, math.inf) == 0.0
    assert oracle_kci(0.0, 1.0, 2.0) == 0.0
    expected = 0.5e-4 * math.exp(-1) * math.sqrt(0.5) * (math.exp(0.5) - 1)
    assert oracle_kci(0.1, 1.0, 2.0) == pytest.approx(expected, rel=1e-12)
    assert oracle_kci(0.1, 1.0, 2.0) == pytest.approx(8.44e-6, rel=1e-3)


@pytest.mark.parametrize("beta", [1.0, 2.0, 4.0])
def test_oracle_kci_vanishes_at_extremes(beta):
    tau = 0.1
    b2 = beta * beta
    # sqrt(l^2) decay at the small end, 1/l^2 decay at the large end
    small = 0.5 * tau**4 * math.exp(-b2) * math.sqrt(1e-6 / 2) * math.expm1(b2)
    large = tau**4 * b2 * math.exp(-b2) * 1e-6
    assert oracle_kci(tau, beta, 1e-6) == pytest.approx(small, rel=1e-5)
    assert oracle_kci(tau, beta, 1e6) == pytest.approx(large, rel=1e-5)
    assert 0 <= oracle_kci(tau, beta, 1e-18) < 1e-8 * tau**4
    assert 0 <= oracle_kci(tau, beta, 1e10) < 1e-8 * tau**4


@pytest.mark.parametrize("beta, ell_sq", [(1.0, 0.5), (2.0, 1.0), (4.0, 8.0)])
def test_oracle_kci_matches_quadrature(beta, ell_sq):
    x, w = hermite_nodes(120)
    g = np.sin(beta * x)
    K = np.exp(-0.5 * (x[:, None] - x[None, :]) ** 2 / ell_sq)
    quad = 0.1**4 * (w * g) @ K @ (w * g)
    assert oracle_kci(0.1, beta, ell_sq) == pytest.approx(quad, rel=1e-9)


@pytest.mark.parametrize("beta, ell_sq", [(0.0, 1.0), (1.0, 0.5), (2.0, 2.0), (4.0, 8.0)])
def test_oracle_variance_components_match_quadrature(beta, ell_sq):
    tau = 0.1
    x, w = hermite_nodes(120)
    g = np.sin(beta * x)
    K = np.exp(-0.5 * (x[:, None] - x[None, :]) ** 2 / ell_sq)
    s = tau**4 * (1 + 2 * g * g)  # tau^4 E[(r_A r_B)^2 | C]
    inner = K @ (w * tau**2 * g)  # tau^2 E_C'[k g]
    mom = oracle_variance(tau, beta, ell_sq, 200)
    assert mom.v_c == pytest.approx(np.sum(w * s * inner**2), rel=1e-8, abs=1e-300)
    assert mom.v_s == pytest.approx((w * s) @ (K * K) @ (w * s), rel=1e-8)
    assert mom.v_m == pytest.approx(oracle_kci(tau, beta, ell_sq) ** 2)


def test_oracle_variance_identities():
    mom = oracle_variance(0.1, 2.0, 1.0, 200)
    n = 200
    assert mom.var_un == pytest.approx(4 * mom.nu1 / n + 2 * mom.nu2 / (n * (n - 1)), rel=1e-12)
    assert mom.nu1 == pytest.approx(mom.v_c - mom.v_m)
    assert mom.sigma2_h1_n == pytest.approx(4 * mom.nu1)


def test_oracle_variance_tau_zero():
    mom = oracle_variance(0.0, 2.0, 1.0, 50)
    assert (mom.u_mean, mom.v_c, mom.v_m, mom.v_s, mom.var_un) == (0.0, 0.0, 0.0, 0.0, 0.0)


def test_oracle_variance_beta_zero_is_null():
    tau, L, n = 0.1, 1.5, 100
    mom = oracle_variance(tau, 0.0, L, n)
    assert mom.v_c == pytest.approx(0.0, abs=1e-30)
    assert mom.v_s == pytest.approx(tau**8 * math.sqrt(L / (L + 4)) * (4 - 2 + 0.5 - 2 + 0.5 * 1))
    assert mom.var_un == pytest.approx(2 * mom.v_s / (n * (n - 1)))


def test_oracle_variance_bad_inputs():
    with pytest.raises(ConfigError):
        oracle_variance(0.1, 1.0, math.inf, 10)
    with pytest.raises(ConfigError):
        oracle_variance(0.1, 1.0, 1.0, 1)


def test_noisy_kci_zero_error():
    err = RegressionErrorSpec(ErrorFunction(), ErrorFunction("sin", 0.1))
    assert oracle_noisy_kci(err, 1.0) == 0.0


def test_noisy_kci_constant_error_constant_kernel():
    d = 0.3
    err = RegressionErrorSpec(ErrorFunction("constant", d), ErrorFunction("constant", d))
    assert oracle_noisy_kci(err, math.inf) == pytest.approx(d**4, rel=1e-12)


def test_noisy_kci_monte_carlo():
    err = RegressionErrorSpec(ErrorFunction("sin", 0.05, 1.0), ErrorFunction("sin", 0.05, 1.0))
    rng = np.random.default_rng(0)
    c, c2 = rng.standard_normal((2, 1_000_000))
    vals = np.exp(-0.25 * (c - c2) ** 2) * (0.05 * np.sin(c)) ** 2 * (0.05 * np.sin(c2)) ** 2
    se = vals.std(ddof=1) / math.sqrt(vals.size)
    assert abs(oracle_noisy_kci(err, 2.0) - vals.mean()) <= 3 * se


def test_noisy_kci_factorization_scenario2():
    err = RegressionErrorSpec(ErrorFunction("sin", 0.1, 2.0), ErrorFunction("bump", 0.1, width=0.7))
    ells = [1.0, 2.0, 0.5]
    fac = oracle_noisy_kci(err, ells, dim_c=3, e_a=1, e_b=2, method="factorized")
    joint = oracle_noisy_kci(err, ells, dim_c=3, e_a=1, e_b=2, method="joint")
    assert fac == pytest.approx(joint, rel=1e-8)
    assert fac != 0.0


def test_noisy_kci_inactive_dimensions_scale():
    err = RegressionErrorSpec(ErrorFunction("sin", 0.1), ErrorFunction("sin", 0.1))
    one = oracle_noisy_kci(err, 1.0)
    three = oracle_noisy_kci(err, [1.0, 2.0, 3.0], dim_c=3)
    assert three == pytest.approx(one * math.sqrt(2 / 4) * math.sqrt(3 / 5))


def test_noisy_kci_input_checks():
    err = RegressionErrorSpec()
    with pytest.raises(ConfigError):
        oracle_noisy_kci(err, [1.0, 1.0], dim_c=3)
    with pytest.raises(ConfigError):
        oracle_noisy_kci(err, 1.0, method="factorized")
    with pytest.raises(ConfigError):
        oracle_noisy_kci(err, 0.0)


def test_quadrature_warning_for_unresolved_error():
    fast = ErrorFunction("sin", 0.1, 200.0)
    with pytest.warns(QuadratureWarning):
        oracle_noisy_kci(RegressionErrorSpec(fast, fast), 1e-4)


def test_smooth_errors_do_not_warn():
    err = RegressionErrorSpec(ErrorFunction("sin", 0.1, 2.0), ErrorFunction("sin", 0.1, 2.0))
    with warnings.catch_warnings():
        warnings.simplefilter("error", QuadratureWarning)
        oracle_noisy_variance(err, 0.1, 1.0, 200)


def test_noisy_variance_zero_error_reduces_to_null():
    tau, L, n = 0.1, 1.0, 200
    mom = oracle_noisy_variance(RegressionErrorSpec(), tau, L, n)
    ref = oracle_variance(tau, 0.0, L, n)
    assert mom.v_c == 0.0 and mom.v_m == 0.0
    assert mom.v_s == pytest.approx(ref.v_s, rel=1e-10)
    assert mom.var_un == pytest.approx(2 * mom.v_s / (n * (n - 1)))


def test_noisy_variance_all_zero():
    mom = oracle_noisy_variance(RegressionErrorSpec(), 0.0, 1.0, 10)
    assert (mom.u_mean, mom.v_c, mom.v_s, mom.var_un) == (0.0, 0.0, 0.0, 0.0)


def test_snr_curve_shapes_and_errors():
    assert len(oracle_snr_curve(0.1, 2.0, [1.0], 200).rows) == 1
    with pytest.raises(DegenerateError):
        oracle_snr_curve(0.0, 2.0, [1.0, 2.0], 200)
    with pytest.raises(ConfigError):
        oracle_snr_curve(0.1, 2.0, [], 200)


def test_snr_argmax_shifts_with_beta():
    grid = np.logspace(-2, 2, 200)
    assert oracle_snr_curve(0.1, 6.0, grid, 200).argmax < oracle_snr_curve(0.1, 2.0, grid, 200).argmax


def test_true_centered_gram_gaussian_matches_quadrature():
    tau, ell = 0.3, 0.8
    targets = np.array([0.1, -0.4, 1.2])
    means = np.array([0.0, -0.5, 1.0])
    x, w = hermite_nodes(80)
    k = lambda u, v: np.exp(-0.5 * (u - v) ** 2 / ell**2)
    pm = np.array([[np.sum(w * k(targets[i], means[j] + tau * x)) for j in range(3)] for i in range(3)])
    mm = np.array([[np.sum(w[:, None] * w[None, :] * k(means[i] + tau * x[:, None], means[j] + tau * x[None, :]))
                    for j in range(3)] for i in range(3)])
    expected = gram(KernelSpec.gaussian(ell), targets) - pm - pm.T + mm
    np.testing.assert_allclose(true_centered_gram(KernelSpec.gaussian(ell), targets, means, tau), expected, atol=1e-12)


def test_true_centered_gram_linear_and_psd(rng):
    a, mu = rng.standard_normal(6), rng.standard_normal(6)
    np.testing.assert_allclose(true_centered_gram(KernelSpec.linear(), a, mu, 0.1), np.outer(a - mu, a - mu))
    G = true_centered_gram(KernelSpec.gaussian(0.5), rng.standard_normal(30), rng.standard_normal(30), 0.2)
    assert np.linalg.eigvalsh(G).min() >= -1e-8 * 30
    with pytest.raises(ConfigError):
        true_centered_gram(KernelSpec.constant(), a, mu, 0.1)


def test_injected_residuals():
    cfg = ScenarioConfig(tau=0.1)
    d = generate(cfg, 10, 3)
    err = RegressionErrorSpec(ErrorFunction("constant", 0.2), ErrorFunction())
    ra, rb = injected_residuals(cfg, d, err)
    ma, mb = cfg.means(d.c)
    np.testing.assert_allclose(ra, d.a[:, 0] - ma - 0.2)
    np.testing.assert_allclose(rb, d.b[:, 0] - mb)


def test_null_true_embedding_ustat_unbiased():
    cfg = ScenarioConfig(tau=0.1, hypothesis="null")
    kc = KernelSpec.gaussian_sq(1.0)
    vals = []
    for seed in range(500):
        d = generate(cfg, 60, seed)
        ma, mb = cfg.means(d.c)
        ra, rb = d.a[:, 0] - ma, d.b[:, 0] - mb
        vals.append(kci_ustat(h_matrix(gram(kc, d.c), np.outer(ra, ra), np.outer(rb, rb))))
    vals = np.asarray(vals)
    assert abs(vals.mean()) <= 3 * vals.std(ddof=1) / math.sqrt(vals.size)
