import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy import integrate, stats

from excursion_lab.errors import DegenerateCovariance, NotStabilized
from excursion_lab.fieldgen import GridSpec, central_gradient
from excursion_lab.models import BargmannFock, CosineMixture, PolyDecay, ktilde_eval
from excursion_lab.pivotal import (PivotalConfig, conditional_hessian_law,
                                   covariance_determinant, estimate_sigma2,
                                   estimate_topological_derivative_at_infinity,
                                   hessian_product_moment, joint_covariance,
                                   ktilde_box_integral, pivotal_density,
                                   quasi_association_check, sample_conditioned_pair,
                                   sigma2_integrand_local, sigma2_to_json)
from excursion_lab.rng import stream, Role
from excursion_lab.topology import FunctionalSpec, truncated_arm_event

from oracles import bf1_joint_covariance, bf1_sigma2_integrand

# sigma^2 for the Euler characteristic of {f >= 1}, 1D Gaussian kernel:
# adaptive scipy quad of the hand-built integrand over x in [-12, 12] and
# s in [1e-4, 1] with t = 1 - s^2 (oracle script kept out of the package)
SIGMA2_BF1_LEVEL1 = 0.05563648345318319

MODELS = [BargmannFock(d=1), BargmannFock(d=2), PolyDecay(d=2, beta=5.0), CosineMixture(d=2)]


@pytest.mark.parametrize("m", MODELS, ids=lambda m: m.model_id)
@pytest.mark.parametrize("level", [-0.5, 0.0, 1.0])
def test_density_factorizes_at_t_zero(m, level):
    x = np.full(m.d, 0.7)
    lam = m.spectral_moment
    single = stats.norm.pdf(level) * (2 * np.pi * lam) ** (-m.d / 2)
    assert pivotal_density(m, x, 0.0, level) == pytest.approx(single**2, rel=1e-10)


@pytest.mark.parametrize("t", [0.0, 0.5, 0.9])
def test_density_decorrelates_far_away(t):
    m = BargmannFock(d=2)
    lam = m.spectral_moment
    single = stats.norm.pdf(0.5) * (2 * np.pi * lam) ** -1
    assert pivotal_density(m, [10.0, 0.0], t, 0.5) == pytest.approx(single**2, rel=1e-12)


def test_density_against_independent_four_by_four():
    C = bf1_joint_covariance(2.0, 0.5)[:4, :4]
    ref = stats.multivariate_normal(np.zeros(4), C).pdf([0.0, 0.0, 0.0, 0.0])
    assert pivotal_density(BargmannFock(d=1), [2.0], 0.5, 0.0) == pytest.approx(ref, rel=1e-12)
    np.testing.assert_allclose(joint_covariance(BargmannFock(d=1), [2.0], 0.5, True),
                               bf1_joint_covariance(2.0, 0.5), atol=1e-15)


def test_degenerate_joint_covariance():
    with pytest.raises(DegenerateCovariance):
        pivotal_density(BargmannFock(d=1), [0.0], 1.0, 0.0)


@pytest.mark.parametrize("m", MODELS, ids=lambda m: m.model_id)
def test_joint_covariance_symmetric_psd(m):
    S = joint_covariance(m, np.full(m.d, 0.8), 0.6, hessians=True)
    np.testing.assert_allclose(S, S.T, atol=1e-14)
    assert np.linalg.eigvalsh(S).min() > -1e-10


@pytest.mark.parametrize("x,t", [(0.3, 0.2), (0.7, 0.5), (1.5, 0.9), (3.0, 0.99)])
@pytest.mark.parametrize("level", [0.0, 1.0])
def test_local_integrand_against_hand_oracle(x, t, level):
    val, se = sigma2_integrand_local(BargmannFock(d=1), [x], t, level)
    assert val[0] == pytest.approx(bf1_sigma2_integrand(x, t, level), rel=1e-9, abs=1e-15)
    assert se[0] == 0.0


@pytest.mark.parametrize("m", [BargmannFock(d=2), PolyDecay(d=2, beta=5.0)],
                         ids=lambda m: m.family)
def test_exact_moment_matches_monte_carlo(m):
    x = np.array([[0.6, 0.2], [1.2, -0.4], [0.3, 0.3]])
    exact, _ = sigma2_integrand_local(m, x, 0.7, 0.5)
    mc, se = sigma2_integrand_local(m, x, 0.7, 0.5, draws=40000, rng=stream(3, 0, Role.PIVOTAL))
    assert np.all(np.abs(mc - exact) <= 4.5 * se)


@given(st.floats(-2.0, 2.0), st.floats(-2.0, 2.0), st.floats(0.0, 0.95))
def test_integrand_symmetric_under_reflection(a, b, t):
    m = BargmannFock(d=2)
    x = np.array([[a, b], [-a, -b]])
    if np.hypot(a, b) < 0.05:
        return
    v, _ = sigma2_integrand_local(m, x, t, 0.8)
    assert v[0] == pytest.approx(v[1], rel=1e-8, abs=1e-14)


def test_product_moment_isserlis():
    # independent entries with unit variance: E[det H det H'] = product of means
    mean = np.array([[1.0, 2.0]])
    assert hessian_product_moment(mean, np.zeros((1, 2, 2)), 1)[0] == pytest.approx(2.0)
    cov = np.array([[[1.0, 0.3], [0.3, 1.0]]])
    assert hessian_product_moment(mean, cov, 1)[0] == pytest.approx(2.3)
    # 2D, zero mean, identity covariance over (a, b, c, a', b', c'):
    # E[det H] = -E[b^2] = -1 for each independent factor
    mean = np.zeros((1, 6))
    cov = np.eye(6)[None]
    assert hessian_product_moment(mean, cov, 2)[0] == pytest.approx(1.0)
    cov = np.eye(6)[None].copy()
    cov[0, 0, 3] = cov[0, 3, 0] = cov[0, 2, 5] = cov[0, 5, 2] = 1.0
    # det H = ac - b^2 with a' = a, c' = c: E[(ac - b^2)(ac - b'^2)] = 1 + 1 = 2
    assert hessian_product_moment(mean, cov, 2)[0] == pytest.approx(2.0)


def test_conditional_law_shapes():
    mean, cov, dens = conditional_hessian_law(BargmannFock(d=3), np.ones((4, 3)), 0.4, 0.2)
    assert mean.shape == (4, 12) and cov.shape == (4, 12, 12) and dens.shape == (4,)
    assert np.linalg.eigvalsh(cov).min() > -1e-10


def test_sigma2_one_dimensional_frozen():
    res = estimate_sigma2(BargmannFock(d=1), PivotalConfig())
    exact = res["truncation_sensitivity"]["exact_moment"]
    assert exact == pytest.approx(SIGMA2_BF1_LEVEL1, rel=1e-3)
    assert res["se"] > 0
    assert abs(res["sigma2"] - SIGMA2_BF1_LEVEL1) <= 4 * res["se"] + 1e-3 * SIGMA2_BF1_LEVEL1


def test_sigma2_quad_route_at_fixed_t():
    # the radial/angular rule on one t slice against adaptive quad
    t = 0.5
    ref, _ = integrate.quad(lambda x: bf1_sigma2_integrand(x, t, 1.0), -12, 12, points=[0])
    cfg = PivotalConfig()
    from excursion_lab.pivotal import _directions, _radial_nodes
    r, w = _radial_nodes(cfg, math.sqrt(1 - t), 0.0)
    u, wu = _directions(1, cfg.n_angle)
    x = (r[:, None] * u[:, 0][None, :]).reshape(-1, 1)
    W = (w[:, None] * wu[None, :]).ravel()
    val, _ = sigma2_integrand_local(BargmannFock(d=1), x, t, 1.0)
    assert float(np.sum(W * val)) == pytest.approx(ref, rel=1e-3)


def test_sigma2_truncation_diagnostics():
    res = estimate_sigma2(BargmannFock(d=1), PivotalConfig())
    sens = res["truncation_sensitivity"]
    assert set(sens) == {"rho_half", "rho_double", "t_truncated", "t_cap_half",
                         "t_cap_double", "exact_moment"}
    assert abs(sens["rho_double"] - res["sigma2"]) <= 0.02 * abs(res["sigma2"])
    # the capped t rule misses the singular end
    assert sens["t_truncated"] < 0.8 * res["sigma2"]
    assert sens["t_cap_double"] < sens["t_truncated"] < sens["t_cap_half"]


def test_sigma2_zero_weight_is_zero():
    cfg = PivotalConfig(spec=FunctionalSpec(phi="bounded", weight="zero", level=1.0),
                        mode="grid")
    res = estimate_sigma2(BargmannFock(d=2), cfg)
    assert res["sigma2"] == 0.0 and res["se"] == 0.0


def test_sigma2_json_keys():
    res = estimate_sigma2(BargmannFock(d=1), PivotalConfig(n_s=4, n_r=4), diagnostics=False)
    import json
    assert set(json.loads(sigma2_to_json(res))) == {
        "sigma2", "se", "nodes", "dropped_nodes", "truncation_sensitivity"}


def test_config_validation():
    with pytest.raises(ValueError):
        PivotalConfig(t_cap=0.3)
    with pytest.raises(ValueError):
        PivotalConfig(spec=FunctionalSpec(level=1.0))  # count functional in local mode


@pytest.mark.parametrize("m", [BargmannFock(d=1), BargmannFock(d=2)], ids=lambda m: m.model_id)
@pytest.mark.parametrize("r", [0.5, 2.0])
def test_covariance_determinant_decreases_in_t(m, r):
    y = np.zeros(m.d)
    y[0] = r
    dets = [covariance_determinant(m, y, np.zeros(m.d), t) for t in (0.0, 0.5, 0.9, 0.99)]
    assert all(a > b > 0 for a, b in zip(dets, dets[1:]))


def test_grid_mode_small_run():
    cfg = PivotalConfig(mode="grid", n_s=1, n_r=1, rho_max=2.0, draws=2, R_stab=4.0, h=0.25)
    records = []
    res = estimate_sigma2(BargmannFock(d=1), cfg, seed=1, records=records)
    assert math.isfinite(res["sigma2"]) and res["nodes"] > 0
    assert res["excluded_ball"] == 0.5 and res["excluded_ball_contribution"] >= 0
    assert all(r.density > 0 for r in records)


def test_conditioned_pair_meets_constraints():
    m = BargmannFock(d=2)
    g = GridSpec(2, 12, 0.25)
    f, ft = sample_conditioned_pair(m, g, [1.0, 0.5], 0.6, 0.7, seed=2)
    ix, i0 = g.nearest_node(f.meta["x_node"]), g.nearest_node(f.meta["y_node"])
    assert f.values[ix] == pytest.approx(0.7, abs=1e-9)
    assert ft.values[i0] == pytest.approx(0.7, abs=1e-9)
    assert np.linalg.norm(central_gradient(f.values, ix, 0.25)) <= 5 * 0.25


def test_large_component_derivative_implies_truncated_arm():
    # if the large-component count reacts to a perturbation at x, some
    # component through x reaches distance a/2 while staying bounded
    m = BargmannFock(d=2)
    g = GridSpec(2, 16, 0.25)
    a = 2.0
    spec = FunctionalSpec(level=0.3, size_class="large", a=a)
    hits = 0
    for rep in range(40):
        f, _ = sample_conditioned_pair(m, g, [0.0, 0.0], 0.5, 0.3, seed=7, replicate=rep)
        x = f.meta["x_node"]
        try:
            dx, _ = estimate_topological_derivative_at_infinity((f, f), spec, 6.0, x, x)
        except NotStabilized:
            continue
        if dx != 0:
            hits += 1
            assert truncated_arm_event(f, 0.3, x, a / 2)
    assert hits > 0


def test_ktilde_box_integral_against_monte_carlo():
    m = BargmannFock(d=2)
    b1 = [(0.0, 1.0), (0.0, 2.0)]
    b2 = [(3.0, 4.5), (-1.0, 1.0)]
    rng = np.random.default_rng(0)
    n = 40000
    x = np.stack([rng.uniform(lo, hi, n) for lo, hi in b1], axis=1)
    y = np.stack([rng.uniform(lo, hi, n) for lo, hi in b2], axis=1)
    kt = ktilde_eval(m, x - y, levels=2)
    vol = 2.0 * 3.0
    mc, se = kt.mean() * vol, kt.std(ddof=1) * vol / np.sqrt(n)
    val = ktilde_box_integral(m, b1, b2, dz=0.05)
    assert abs(val - mc) <= 4 * se + 0.01 * mc
    assert val > ktilde_box_integral(m, b1, [(5.0, 6.5), (-1.0, 1.0)], dz=0.05)


def test_quasi_association_constant_maps():
    rows = quasi_association_check(BargmannFock(d=2), FunctionalSpec(level=0.0), 2.0,
                                   [1.0, 3.0], lambda v: 0.0, lambda v: 0.0, N=20)
    assert [r["cov"] for r in rows] == [0.0, 0.0]
    assert rows[0]["bound"] > rows[1]["bound"] > 0
