from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from torus_scope.model import ParameterPoint, PiecewiseSystem, linear_zone
from torus_scope.nsbif import (
    INCONCLUSIVE,
    SUBCRITICAL,
    SUPERCRITICAL,
    NSError,
    c1_coefficient,
    classify,
    delta1_zero,
    detect_order,
    eigen_data,
    find_fixed_point,
    lyapunov_from_tensors,
    normalize_frame,
    solve_beta,
)
from torus_scope.tmap import MapSample, derivatives_at

from conftest import rotating_circle_system


def _random_sample(rng, theta=0.9, modulus=1.0):
    J = modulus * np.array([[np.cos(theta), -np.sin(theta)], [np.sin(theta), np.cos(theta)]])
    B = rng.normal(size=(2, 2, 2))
    B = (B + B.transpose(0, 2, 1)) / 2
    C = rng.normal(size=(2, 2, 2, 2))
    C = sum(C.transpose(0, *p) for p in ((1, 2, 3), (1, 3, 2), (2, 1, 3), (2, 3, 1), (3, 1, 2), (3, 2, 1))) / 6
    return MapSample(np.zeros(2), np.zeros(2), J, B, C)


def _rot(phi):
    return np.array([[np.cos(phi), -np.sin(phi)], [np.sin(phi), np.cos(phi)]])


def test_l1_gauge_invariance(rng):
    sample = _random_sample(rng)
    ref = lyapunov_from_tensors(sample)[0]
    for phi in rng.uniform(0, 2 * np.pi, 8):
        assert lyapunov_from_tensors(sample, phase=phi)[0] == pytest.approx(ref, abs=1e-10)
        # rotating the frame is the same gauge freedom
        assert lyapunov_from_tensors(sample.in_frame(_rot(phi)))[0] == pytest.approx(ref, abs=1e-10)


def test_c1_and_expanded_formula_agree(rng):
    for _ in range(5):
        l1_c, l1_x, *_ = lyapunov_from_tensors(_random_sample(rng, theta=rng.uniform(0.3, 2.5)))
        assert l1_c == pytest.approx(l1_x, rel=1e-9, abs=1e-12)


def test_c1_cubic_only():
    lam = np.exp(0.7j)
    assert c1_coefficient(lam, 0, 0, 0, 2.0 - 1.0j) == pytest.approx(1.0 - 0.5j)


@settings(max_examples=30, deadline=None)
@given(st.floats(0.2, 2.9), st.floats(0.5, 1.5), st.floats(-3, 3), st.floats(0.1, 3))
def test_normalize_frame_rotation_scaling(theta, mod, shear, scale):
    S = np.array([[1.0, shear], [0.0, scale]])
    J = S @ (mod * _rot(theta)) @ np.linalg.inv(S)
    for conv in ("unit", "last", "raw"):
        L = normalize_frame(J, conv)
        R = np.linalg.solve(L, J @ L)
        lam = np.linalg.eigvals(J)
        lam = lam[np.argmax(lam.imag)]
        np.testing.assert_allclose(R, [[lam.real, -lam.imag], [lam.imag, lam.real]], atol=1e-10 * max(1, abs(shear)))


def test_normalize_frame_rejects_real_pair():
    with pytest.raises(NSError):
        normalize_frame(np.diag([0.5, 2.0]))
    with pytest.raises(ValueError):
        normalize_frame(_rot(1.0), "other")


def test_hopf_normal_form_l1():
    """``z' = eps (i w z - 2 z|z|^2)`` in unit-frame coordinates: l1 ~ -2 eps."""
    for sign in (1.0, -1.0):
        sys = rotating_circle_system(a=0.0, omega=1.0, sign=sign)
        eps = 1e-2
        s = derivatives_at(sys, np.zeros(2), ParameterPoint(0.0, eps))
        l1 = lyapunov_from_tensors(s.in_frame(normalize_frame(s.jacobian)))[0]
        assert l1 == pytest.approx(-2 * eps * sign, rel=5e-2)


def test_eigen_data_resonance():
    ed = eigen_data(_rot(np.pi / 2), 0.1)
    assert ed.resonance_flags == [False, False, False, True]
    assert ed.resonant
    ed = eigen_data(1.01 * _rot(0.3), 0.1)
    assert not ed.resonant
    assert ed.rho == pytest.approx((1.01**2 - 1) / 0.1)
    with pytest.raises(NSError):
        eigen_data(np.diag([0.9, 1.1]), 0.1)


def _linear_toy(offset=(0.0, 0.0)):
    M = np.array([[0.0, -1.0], [1.0, 0.0]])
    zone = linear_zone([M], [np.asarray(offset, float)], [np.eye(2)])
    return PiecewiseSystem(period=1.0, dim=2, order=1, zones=(zone,), name="toy")


def test_linear_toy_beta_is_zero():
    beta, sigma, J, info = solve_beta(_linear_toy(), 0.05, 0.1, [0.0, 0.0])
    assert beta == pytest.approx(0.0, abs=1e-9)
    np.testing.assert_allclose(sigma, 0.0, atol=1e-9)
    assert info["modulus_defect"] < 1e-10
    with pytest.raises(NSError):
        solve_beta(_linear_toy(), 0.0, 0.0, [0.0, 0.0])


def test_fixed_point_zero_eps_is_delta1_zero(pwl3d_m5):
    x0 = find_fixed_point(pwl3d_m5, [3.0, 0.8], ParameterPoint(0.0, 0.0))
    np.testing.assert_allclose(x0, [np.pi, 1.0], atol=1e-11)
    np.testing.assert_allclose(delta1_zero(pwl3d_m5, [3.0, 0.8], 0.0), x0)


def test_newton_failure_raises():
    # constant drift: Delta1 never vanishes and the map has no fixed point
    zone = linear_zone([np.zeros((2, 2))], [np.array([1.0, 0.0])])
    sys = PiecewiseSystem(period=1.0, dim=2, order=1, zones=(zone,), name="drift")
    with pytest.raises(NSError):
        find_fixed_point(sys, [0.0, 0.0], ParameterPoint(0.0, 0.1))
    with pytest.raises(NSError):
        find_fixed_point(sys, [0.0, 0.0], ParameterPoint(0.0, 0.0))


def test_detect_order(pwl3d_m5):
    assert detect_order(pwl3d_m5, [np.pi, 1.0], 0.0) == 1
    zone = linear_zone([np.zeros((2, 2)), np.eye(2)])
    sys = PiecewiseSystem(period=1.0, dim=2, order=2, zones=(zone,), name="second")
    assert detect_order(sys, [0.3, 0.2], 0.0) == 2


@pytest.mark.parametrize(
    "coeffs, alpha, a_prime, verdict, fp, curve",
    [
        ((0.0, -1.0), 0.1, 1.0, SUPERCRITICAL, "repelling", "attracting"),
        ((0.0, -1.0), -0.1, 1.0, SUPERCRITICAL, "attracting", None),
        ((0.0, 1.0), -0.1, 1.0, SUBCRITICAL, "attracting", "repelling"),
        ((0.0, 1.0), 0.1, 1.0, SUBCRITICAL, "repelling", None),
        ((0.0, 1.0), 0.1, -1.0, SUBCRITICAL, "attracting", "repelling"),
        ((2.0, -1.0), -0.1, -1.0, SUBCRITICAL, "repelling", None),
        ((0.0, 0.0), 0.1, 1.0, INCONCLUSIVE, "repelling", None),
    ],
)
def test_classify_table(coeffs, alpha, a_prime, verdict, fp, curve):
    v = classify(coeffs, 0.0, a_prime, alpha)
    assert (v.verdict, v.fixed_point, v.curve) == (verdict, fp, curve)
    assert v.curve_exists == (curve is not None)


def test_classify_resonant_is_inconclusive():
    v = classify((0.0, -1.0), 0.0, 1.0, 0.1, resonant=True)
    assert v.verdict == INCONCLUSIVE and v.curve is None
