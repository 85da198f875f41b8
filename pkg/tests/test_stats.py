import math
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy import stats as sst

from excursion_lab.errors import DegenerateVariance
from excursion_lab.fieldgen import GridSpec, sample_pair
from excursion_lab.models import BargmannFock
from excursion_lab.stats import (EmpiricalDistribution, _autocorr_sums, _coarsen_table,
                                 _tile_values, arm_decay_curve, asclt_average, asclt_radii,
                                 asclt_statistic, bootstrap, clt_suite, functional_samples,
                                 gauss_hermite_expectation, kolmogorov_distance, ks_critical,
                                 lln_curve, mean_ci, variance_ci, variance_curve, volume_suite,
                                 wilson_interval)
from excursion_lab.topology import FunctionalSpec, evaluate_functional, extract_excursion, \
    label_components

COUNT = FunctionalSpec(level=0.0)


# -- Kolmogorov distance ---------------------------------------------------------

def test_ks_single_point():
    assert kolmogorov_distance([0.0], sst.norm.cdf) == pytest.approx(0.5)


@pytest.mark.parametrize("N", [2, 10, 137, 1000])
def test_ks_quantile_sample(N):
    x = sst.norm.ppf((np.arange(1, N + 1) - 0.5) / N)
    assert kolmogorov_distance(x, sst.norm.cdf) == pytest.approx(0.5 / N, rel=1e-9)


@given(st.lists(st.floats(-4, 4), min_size=1, max_size=50))
def test_ks_brute_force(xs):
    x = np.array(xs)
    F = sst.norm.cdf
    # evaluate the step function and its left limits at every jump
    pts = np.unique(x)
    right = np.array([np.mean(x <= p) for p in pts])
    left = np.array([np.mean(x < p) for p in pts])
    brute = max(np.max(np.abs(right - F(pts))), np.max(np.abs(left - F(pts))))
    assert kolmogorov_distance(x, F) == pytest.approx(brute, abs=1e-12)


@given(st.lists(st.floats(-4, 4), min_size=2, max_size=60, unique=True))
def test_ks_matches_scipy(xs):
    assert kolmogorov_distance(xs, sst.norm.cdf) == pytest.approx(
        sst.kstest(xs, "norm").statistic, abs=1e-12)


@given(st.floats(0.1, 10), st.floats(-5, 5))
def test_ks_affine_invariance(a, b):
    x = np.random.default_rng(0).normal(size=40)
    d0 = kolmogorov_distance(x, sst.norm.cdf)
    d1 = kolmogorov_distance(a * x + b, lambda v: sst.norm.cdf(v, loc=b, scale=a))
    assert d1 == pytest.approx(d0, abs=1e-12)


def test_empirical_distribution():
    e = EmpiricalDistribution(np.array([3.0, 1.0, 2.0, 2.0]))
    assert e.N == 4 and e.values.tolist() == [1.0, 2.0, 2.0, 3.0]
    assert e.cdf(2.0) == 0.75 and e.cdf(0.0) == 0.0
    with pytest.raises(ValueError):
        EmpiricalDistribution(np.array([1.0]))


def test_ks_critical():
    assert ks_critical(2000, 0.01) == pytest.approx(1.6276 / math.sqrt(2000), rel=1e-3)


# -- intervals ----------------------------------------------------------------------

def test_wilson_known_values():
    lo, hi = wilson_interval(5, 10)
    assert lo == pytest.approx(0.2366, abs=1e-4) and hi == pytest.approx(0.7634, abs=1e-4)
    assert wilson_interval(0, 50)[0] == 0.0
    assert wilson_interval(50, 50)[1] == 1.0
    assert 0 < wilson_interval(0, 50)[1] < 0.08


def test_mean_ci():
    m, se, (lo, hi) = mean_ci([1.0, 2.0, 3.0])
    assert m == 2.0 and se == pytest.approx(1 / math.sqrt(3))
    assert hi - lo == pytest.approx(2 * 1.959963984540054 * se)


def test_variance_ci_coverage():
    rng = np.random.default_rng(5)
    hits = 0
    for _ in range(400):
        x = rng.normal(scale=2.0, size=60)
        _, _, (lo, hi) = variance_ci(x)
        hits += lo <= 4.0 <= hi
    assert 0.91 <= hits / 400 <= 0.99


def test_bootstrap_deterministic():
    x = np.arange(50.0)
    r1, ci1 = bootstrap(50, lambda i: x[i].mean(), B=100, seed=3)
    r2, ci2 = bootstrap(50, lambda i: x[i].mean(), B=100, seed=3)
    assert np.array_equal(r1, r2) and ci1 == ci2
    assert ci1[0] < 24.5 < ci1[1]


# -- replicate sampling, LLN and variance ----------------------------------------------

def test_functional_samples_deterministic(bf2):
    a = functional_samples(bf2, COUNT, 4, 7, seed=2)
    b = functional_samples(bf2, COUNT, 4, 7, seed=2)
    assert a.tolist() == b.tolist() and len(a) == 7
    grid = GridSpec(2, 4, 0.25)
    f, ft = sample_pair(bf2, grid, 2, replicate=1)
    assert a[2] == evaluate_functional(f, COUNT, None, 0.25)
    assert a[3] == evaluate_functional(ft, COUNT, None, 0.25)


def test_functional_samples_mapper_independent(bf2):
    def reversed_map(fn, it):
        items = list(it)
        res = {i: fn(i) for i in reversed(items)}
        return [res[i] for i in items]

    a = functional_samples(bf2, COUNT, 4, 8, seed=1)
    b = functional_samples(bf2, COUNT, 4, 8, seed=1, mapper=reversed_map)
    assert a.tolist() == b.tolist()


def test_lln_high_level_is_zero(bf2):
    rows = lln_curve(bf2, FunctionalSpec(level=6.0), [4, 8], 20, seed=0)
    assert all(r["mean"] == 0.0 and r["ci_lo"] == r["ci_hi"] == 0.0 for r in rows)
    assert math.isnan(rows[0]["diff"]) and rows[1]["diff"] == 0.0


def test_lln_rejects_unsorted(bf2):
    with pytest.raises(ValueError):
        lln_curve(bf2, COUNT, [8, 4], 10)


def test_variance_curve_from_samples(bf2):
    rng = np.random.default_rng(0)
    samples = [rng.normal(scale=R, size=400) for R in (4, 8)]
    rows = variance_curve(bf2, COUNT, [4, 8], 400, samples=samples)
    for r in rows:
        assert r["ci_lo"] <= 1.0 <= r["ci_hi"]
    with pytest.raises(ValueError):
        variance_curve(bf2, COUNT, [4], 50)


# -- CLT -------------------------------------------------------------------------------

def test_clt_on_gaussian_surrogate(bf2):
    rng = np.random.default_rng(1)
    R = [4, 8, 16]
    samples = [10 * R_**2 + R_ * rng.normal(size=1000) for R_ in R]
    rep = clt_suite(bf2, COUNT, R, 1000, samples=samples, B=50)
    assert rep.sigma == pytest.approx(1.0, rel=0.1)
    assert all(r["dkol"] < rep.ks_band for r in rep.rows)
    assert math.isfinite(rep.eta) and rep.eta_ci[0] <= rep.eta_ci[1]
    assert rep.ks_band == pytest.approx(ks_critical(1000, 0.01))


def test_clt_degenerate_and_small_N(bf2):
    with pytest.raises(ValueError):
        clt_suite(bf2, COUNT, [4, 8], 999)
    with pytest.raises(DegenerateVariance):
        clt_suite(bf2, COUNT, [4, 8], 1000, samples=[np.zeros(1000), np.ones(1000)])


# -- ASCLT -------------------------------------------------------------------------------

def test_asclt_radii_on_grid():
    r, sides, w = asclt_radii(64, 0.25)
    assert w == pytest.approx(math.log(2) / 4)
    assert len(r) == 24 and r[-1] < 64
    assert np.allclose(sides / 0.5, np.round(sides / 0.5)) and sides.min() >= 0.5


def test_asclt_constant_function():
    r, sides, w = asclt_radii(2.0 ** 10, 0.25)
    phit = np.random.default_rng(0).normal(size=len(r))
    assert asclt_average(phit, lambda z: np.full_like(z, 3.0), 2.0 ** 10, w) == pytest.approx(3.0)


def test_asclt_iid_increment_surrogate():
    # partial sums of iid N(0,1) sampled along the geometric radii
    rng = np.random.default_rng(2)
    R_max = 2.0 ** 12
    r, _, w = asclt_radii(R_max, 0.25)
    n = np.maximum(1, np.round(r)).astype(int)
    vals = []
    for _ in range(300):
        S = np.cumsum(rng.normal(size=n[-1]))
        vals.append(asclt_average(S[n - 1] / np.sqrt(n), lambda z: (z <= 0.5).astype(float),
                                  R_max, w))
    target = gauss_hermite_expectation(lambda z: (z <= 0.5).astype(float), 1.0, n=200)
    assert target == pytest.approx(sst.norm.cdf(0.5), abs=0.02)
    vals = np.array(vals)
    assert abs(vals.mean() - sst.norm.cdf(0.5)) <= 4 * vals.std(ddof=1) / math.sqrt(len(vals))


@pytest.mark.parametrize("F,expect", [(lambda z: z**2, lambda s: s * s),
                                      (np.abs, lambda s: s * math.sqrt(2 / math.pi)),
                                      (np.cos, lambda s: math.exp(-s * s / 2))])
@pytest.mark.parametrize("sigma", [0.3, 1.0, 2.5])
def test_gauss_hermite(F, expect, sigma):
    tol = 1e-2 if F is np.abs else 1e-10
    assert gauss_hermite_expectation(F, sigma) == pytest.approx(expect(sigma), rel=tol)


@pytest.mark.parametrize("spec", [COUNT, FunctionalSpec(level=0.3, phi="bounded",
                                                        weight="one_hole")],
                         ids=["count", "one_hole"])
@pytest.mark.parametrize("side", [1.0, 2.0, 4.0])
def test_tile_fast_path_matches_direct(bf2, spec, side):
    fs = sample_pair(bf2, GridSpec(2, 8, 0.25), 4)[0]
    geom = label_components(extract_excursion(fs, spec))
    fast = _tile_values(fs, spec, side, 0.25, geom)
    slow = _tile_values(fs, spec, side, 0.25)
    assert fast == slow


def test_asclt_statistic_small(bf2):
    out = asclt_statistic(bf2, COUNT, 16, [lambda z: np.ones_like(z), np.cos], seed=1,
                          calib_pairs=1)
    assert out["sigma"] > 0
    assert len(out["phitilde"]) == len(out["radii"])
    assert out["targets"][0] == pytest.approx(1.0)
    assert out["values"][0] == pytest.approx(1.0)


# -- arm events ----------------------------------------------------------------------------

def test_arm_curve_high_level(bf2):
    rows = arm_decay_curve(bf2, 5.0, [4, 8], 6, seed=0)
    assert [r["one_arm"] for r in rows] == [0.0, 0.0]
    assert rows[0]["one_arm_ci"][0] == 0.0 and rows[0]["N"] == 6


def test_arm_curve_low_level(bf2):
    rows = arm_decay_curve(bf2, -5.0, [4], 4, seed=0)
    assert rows[0]["one_arm"] == 1.0 and rows[0]["truncated_arm"] == 0.0


# -- unbounded volume ------------------------------------------------------------------------

def test_autocorr_sums_brute_force():
    rng = np.random.default_rng(0)
    X = (rng.random((7, 9)) > 0.4).astype(float)
    L = 3
    ac, cnt = _autocorr_sums(X, L)
    for i in range(-L, L + 1):
        for j in range(-L, L + 1):
            s = 0.0
            c = 0
            for a in range(7):
                for b in range(9):
                    if 0 <= a + i < 7 and 0 <= b + j < 9:
                        s += X[a, b] * X[a + i, b + j]
                        c += 1
            assert ac[i + L, j + L] == pytest.approx(s, abs=1e-9)
            assert cnt[i + L, j + L] == c


def test_coarsen_constant_table():
    L, m = 6, 2
    t = np.ones((2 * L + 1,) * 2)
    out, se, linf = _coarsen_table(t, t, L, m)
    assert out.shape == (5, 5)
    assert np.all(out == m ** 4) and np.allclose(se, m**2)
    assert linf[2, 2] == 0 and linf[0, 4] == 2


def test_volume_suite_small(bf2):
    rep = volume_suite(bf2, -0.5, [4], [2], 4, seed=0, h=0.5, L=2)
    assert rep.lag0_cov == rep.theta_fraction * (1 - rep.theta_fraction)
    assert isinstance(rep.lag0_cov, Fraction)
    assert 0 < rep.theta < 1 and rep.warnings == []
    assert rep.cov_table.shape == (5, 5)
    assert float(rep.cov_table[2, 2]) == pytest.approx(float(rep.lag0_cov))
    us = [r["u"] for r in rep.cox_grimmett]
    assert all(a >= b for a, b in zip(us, us[1:]))
    assert rep.lil.shape == (4, 1)


def test_volume_suite_warns_above_zero(bf2):
    rep = volume_suite(bf2, 0.5, [4], [2], 2, seed=0, h=0.5, L=2)
    assert rep.warnings == ["level outside the supercritical regime (needs level < 0)"]
