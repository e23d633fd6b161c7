import math

import numpy as np
import pytest

from deepnash import bounds as bnd
from deepnash.model import build_binary_coupled, build_example1, random_spec


def hand_kv_ko(Kc, Kp, Km, b):
    # stages 3, 2, 1 unrolled; the discounted Kc sum runs to t + 1
    kv4 = ko4 = 0.0
    kv3 = Kc + kv4 * Km + Kp * (Kc + b * Kc + b**2 * Kc + b**3 * Kc)
    ko3 = kv4 + ko4
    kv2 = Kc + kv3 * Km + Kp * (Kc + b * Kc + b**2 * Kc)
    ko2 = kv3 + ko3
    kv1 = Kc + kv2 * Km + Kp * (Kc + b * Kc)
    ko1 = kv2 + ko2
    return [kv1, kv2, kv3], [ko1, ko2, ko3]


def test_kv_ko_hand_values():
    Kv, Ko = bnd.kv_ko(0.5, 1.0, 2.0, 0.9, 3)
    hv, ho = hand_kv_ko(1.0, 0.5, 2.0, 0.9)
    assert Kv.tolist() == hv and Ko.tolist() == ho
    np.testing.assert_allclose(Kv, [17.538, 7.794, 2.7195])
    np.testing.assert_allclose(Ko, [10.5135, 2.7195, 0.0])


def test_kv_ko_per_stage_arrays():
    Kv, Ko = bnd.kv_ko([0.0, 0.0], [1.0, 2.0], [1.0, 1.0], None, 2)
    # decoupled, undiscounted: Kv_t = sum of remaining Kc
    assert Kv.tolist() == [3.0, 2.0]
    assert Ko.tolist() == [2.0, 0.0]


def test_discounted_bound_value():
    c = bnd.BoundConstants(0.5, 1.0, 1.0, beta=0.5)
    rep = bnd.discounted_bound(c, 100)
    bracket = 1.5 * 1.0 / 0.5 * 1.0 / 0.5
    assert math.isclose(rep.terms["bracket"], bracket)
    assert math.isclose(rep.value, bracket / 10)
    assert rep.label == bnd.O_LABEL


@pytest.mark.parametrize("Km,refuse", [(1.0, False), (1.1, False), (1.111111, False), (1.2, True), (2.0, True)])
def test_refusal_threshold(Km, refuse):
    c = bnd.BoundConstants(0.1, 1.0, Km, beta=0.9)
    if refuse:
        with pytest.raises(bnd.AssumptionViolation) as exc:
            bnd.discounted_bound(c, 10)
        assert exc.value.to_json()["error"] == "assumption-violation"
    else:
        bnd.discounted_bound(c, 10)


def test_exact_boundary_refuses():
    c = bnd.BoundConstants(0.0, 1.0, 2.0, beta=0.5)
    with pytest.raises(bnd.AssumptionViolation):
        bnd.discounted_bound(c, 10)


def test_decoupled_uses_corollary_constants():
    spec = build_example1(100)
    c = bnd.estimate_constants(spec, 100)
    assert c.decoupled and c.Kp.tolist() == [0.0] and c.Km.tolist() == [1.0]
    rep = bnd.discounted_bound(c, 100)
    assert rep.terms["Kp"] == 0.0 and rep.terms["Km"] == 1.0
    assert c.cost_bound == 5.0


def test_estimates_grow_with_budget():
    spec = build_binary_coupled(10)
    small = bnd.estimate_constants(spec, 50, seed=1)
    big = bnd.estimate_constants(spec, 400, seed=1)
    assert np.all(big.Kp >= small.Kp) and np.all(big.Kc >= small.Kc) and np.all(big.Km >= small.Km)
    # P(1|.) is affine in d(1) with slope 0.25
    np.testing.assert_allclose(big.Kp, 0.25, rtol=1e-9)
    assert big.lower_bound


def test_finite_bound_terms():
    spec = random_spec(0, 10, 2, 2, horizon=3)
    c = bnd.BoundConstants(0.5, 1.0, 2.0, beta=0.9)
    rep = bnd.finite_bound(c, 100, 0.01, horizon=3)
    assert math.isclose(rep.value, 17.538 * 0.01 + 10.5135 / 10)
    out = bnd.guarantee_report(spec, c, 100, 0.01)
    assert "finite" in out and "discounted" not in out


def test_negative_constant_rejected():
    with pytest.raises(ValueError):
        bnd.BoundConstants(-1.0, 1.0, 1.0)


def test_kv_ko_linear_in_kc():
    # the Kp term multiplies a sum of Kc, so linearity holds with Kp held fixed
    Kv, Ko = bnd.kv_ko([0.2, 0.4, 0.1], [1.0, 3.0, 2.0], [1.5, 0.7, 1.1], 0.8, 3)
    Kv2, Ko2 = bnd.kv_ko([0.2, 0.4, 0.1], [2.0, 6.0, 4.0], [1.5, 0.7, 1.1], 0.8, 3)
    np.testing.assert_allclose(Kv2, 2 * Kv, rtol=1e-12)
    np.testing.assert_allclose(Ko2, 2 * Ko, rtol=1e-12)


def test_decoupled_example_bound_value():
    c = bnd.BoundConstants(0.0, 5.0, 1.0, beta=0.9, decoupled=True)
    rep = bnd.discounted_bound(c, 100)
    assert math.isclose(rep.value, 1.1 * 1.0 * (5 / 0.1) / 10)
    assert math.isclose(rep.value, 5.5)


def test_trivial_bound_values():
    assert bnd.discounted_bound(bnd.BoundConstants(0.3, 0.0, 1.0, beta=0.5), 10).value == 0.0
    c = bnd.BoundConstants(0.0, 0.0, 1.0, beta=0.9)
    assert bnd.finite_bound(c, 100, 0.0, horizon=2).value == 0.0
    c = bnd.BoundConstants(0.5, 1.0, 2.0, beta=0.9)
    rep = bnd.finite_bound(c, 100, 0.1, horizon=3)
    assert math.isclose(rep.value, 17.538 * 0.1 + 10.5135 / 10)
