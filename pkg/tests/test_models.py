import json
import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from excursion_lab.models import (BargmannFock, CosineMixture, PolyDecay, covariance_eval,
                                  ktilde_eval, model_from_dict, model_from_json, multi_indices)

MODELS = [BargmannFock(d=1), BargmannFock(d=2), BargmannFock(d=3, scale=1.3),
          PolyDecay(d=2, beta=5.0), PolyDecay(d=3, beta=4.0, scale=0.8),
          CosineMixture(d=2, omega=1.0), CosineMixture(d=1, omega=2.0)]

lags = st.lists(st.floats(-6, 6), min_size=3, max_size=3)


def test_bargmann_fock_values():
    m = BargmannFock(d=2)
    assert covariance_eval(m, [0.0, 0.0]) == 1.0
    assert covariance_eval(m, [1.0, 0.0]) == pytest.approx(math.exp(-0.5), abs=1e-15)
    assert covariance_eval(m, [1.0, 0.0]) == pytest.approx(0.606531, abs=1e-6)


@pytest.mark.parametrize("m", MODELS, ids=lambda m: m.model_id)
def test_unit_variance(m):
    assert covariance_eval(m, np.zeros(m.d)) == pytest.approx(1.0, abs=1e-14)


@pytest.mark.parametrize("m", MODELS, ids=lambda m: m.model_id)
@given(x=lags)
def test_symmetric_and_bounded(m, x):
    x = np.asarray(x[:m.d])
    k = covariance_eval(m, x)
    assert k == pytest.approx(covariance_eval(m, -x), abs=1e-15)
    assert abs(k) <= 1.0 + 1e-15


@pytest.mark.parametrize("m", MODELS, ids=lambda m: m.model_id)
def test_derivatives_match_finite_differences(m):
    rng = np.random.default_rng(0)
    x = rng.normal(size=(5, m.d))
    e = 1e-5
    for order in range(0, 4):
        for a in multi_indices(m.d, order):
            for i in range(m.d):
                b = list(a)
                b[i] += 1
                step = np.zeros(m.d)
                step[i] = e
                fd = (m.deriv(a, x + step) - m.deriv(a, x - step)) / (2 * e)
                np.testing.assert_allclose(m.deriv(tuple(b), x), fd, rtol=1e-5, atol=1e-7)


def test_spectral_moments():
    assert BargmannFock(d=2).spectral_moment == pytest.approx(1.0)
    assert BargmannFock(d=2, scale=2.0).spectral_moment == pytest.approx(0.25)
    assert PolyDecay(d=2, beta=5.0).spectral_moment == pytest.approx(5.0)
    assert CosineMixture(d=2, omega=1.0).spectral_moment == pytest.approx(2.0)


def test_polydecay_envelope_on_lag_grid():
    m = PolyDecay(d=2, beta=5.0)
    r = np.linspace(0.0, 50.0, 100)
    th = np.linspace(0, 2 * np.pi, 100)
    x = np.stack([r * np.cos(th), r * np.sin(th)], axis=1)
    assert np.all(np.abs(m(x)) <= m.envelope_C * (1 + r) ** -5.0 * (1 + 1e-12))
    # the constant is attained at |x| = s^2
    s = m.scale
    assert m([s * s, 0.0]) == pytest.approx(m.envelope_C * (1 + s * s) ** -5.0)


def test_polydecay_requires_beta_above_d():
    with pytest.raises(ValueError):
        PolyDecay(d=3, beta=3.0)


def test_ktilde_examples():
    m = BargmannFock(d=2)
    assert ktilde_eval(m, [0.0, 0.0]) == pytest.approx(1.0)
    assert ktilde_eval(m, [3.0, 0.0]) == pytest.approx(math.exp(-2.0), rel=1e-12)


@pytest.mark.parametrize("m", MODELS, ids=lambda m: m.model_id)
def test_ktilde_dominates_covariance(m):
    rng = np.random.default_rng(1)
    x = rng.uniform(-5, 5, size=(50, m.d))
    assert np.all(ktilde_eval(m, x) >= np.abs(m(x)) - 1e-15)


def test_ktilde_polydecay_tail():
    m = PolyDecay(d=2, beta=5.0)
    for r in (4.0, 8.0, 16.0):
        kt = ktilde_eval(m, [r, 0.0])
        assert kt == pytest.approx(m([r - 1.0, 0.0]), rel=1e-12)
        assert kt <= m.envelope_C * r ** -5.0


@pytest.mark.parametrize("m", MODELS, ids=lambda m: m.model_id)
def test_descriptor_round_trip(m):
    d = json.loads(m.to_json())
    assert set(d) == {"family", "d", "params", "envelopeC"}
    assert model_from_json(m.to_json()) == m
    assert model_from_dict(m.to_dict()).to_json() == m.to_json()


def test_admissibility_proxy():
    for m in MODELS:
        assert m.is_admissible()


def test_unknown_family():
    with pytest.raises(ValueError):
        model_from_dict({"family": "Matern", "d": 2, "params": {}})
