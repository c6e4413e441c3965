from __future__ import annotations

import numpy as np
import pytest

from torus_scope.model import BoundaryEvaluation, ParameterPoint
from torus_scope.nsbif import eigen_rates, find_fixed_point
from torus_scope.pwl3d import (
    REPELLING_TORUS_IC,
    KAPPA,
    Pwl3dParams,
    cartesian_field,
    cartesian_matrices,
    cartesian_reduced_system,
    cartesian_return_map,
    cartesian_section,
    repelling_torus_parameters,
    oracle_delta,
    oracle_fixed_point,
    oracle_ns,
    reduced_field,
)
from torus_scope.tmap import time_t_map

PI = np.pi


def test_b_must_be_nonzero():
    with pytest.raises(ValueError):
        Pwl3dParams(b=0.0)


def test_rotation_at_zero_eps():
    np.testing.assert_allclose(cartesian_field(Pwl3dParams(b=-5), 1.0, 2.0, 3.0), [-2.0, 1.0, 0.0])


def test_upper_matrix_product():
    Ap, cp, _, _ = cartesian_matrices(Pwl3dParams(b=1.0))
    np.testing.assert_allclose(Ap @ [1, 1, 1], [-4 * PI**2 / (8 + 9 * PI**2), -2.0, 0.5])
    # the upper zone also carries the affine term required by the reduced field
    np.testing.assert_allclose(cp, [0.0, (PI**2 + 4) / 4, -2.5])
    f = cartesian_field(Pwl3dParams(b=1.0, epsilon=1.0), 1.0, 1.0, 1.0)
    np.testing.assert_allclose(f, np.array([-1.0, 1.0, 0.0]) + Ap @ [1, 1, 1] + cp)


def test_lower_matrix_product():
    _, _, Am, Bm = cartesian_matrices(Pwl3dParams(b=1.0, alpha=0.0))
    np.testing.assert_allclose(Am @ [1, -1, 1], [-5.0, 0.0, 1.0])
    assert Bm[1, 2] == 1.0 and np.count_nonzero(Bm) == 1


def test_cartesian_boundary():
    with pytest.raises(BoundaryEvaluation):
        cartesian_field(Pwl3dParams(b=1.0), 1.0, 0.0, 0.0)


def test_reduced_field_examples(pwl3d_m5):
    f1_lower = pwl3d_m5.zones[1].terms[0]
    np.testing.assert_allclose(f1_lower(PI / 2, np.array([2.7, 1.3]), 0.0), [0.0, -2.7], atol=1e-15)
    assert not np.any(reduced_field(Pwl3dParams(b=-5), 1.0, 2.0, 1.0))
    with pytest.raises(ValueError):
        reduced_field(Pwl3dParams(b=-5, epsilon=0.1), 1.0, 0.0, 1.0)


def _quotient(params, theta, r, z):
    """Angle-time field from the Cartesian field: (r'/theta', z'/theta')."""
    x, y = r * np.cos(theta), r * np.sin(theta)
    dx, dy, dz = cartesian_field(params, x, y, z)
    rdot = (x * dx + y * dy) / r
    thdot = (x * dy - y * dx) / r**2
    return np.array([rdot, dz]) / thdot


@pytest.mark.parametrize("b", [-5.0, 1.0])
def test_quotient_cross_check(b):
    """First two eps-coefficients of the Cartesian quotient equal F1, F2."""
    from torus_scope.pwl3d import reduced_system

    sys = reduced_system(b)
    rng = np.random.default_rng(7)
    h = np.array([-4, -3, -2, -1, 1, 2, 3, 4]) * 1e-3
    V = np.vstack([h**k for k in range(1, 9)]).T
    worst = 0.0
    for _ in range(30):
        th = rng.uniform(0.05, 2 * PI - 0.05)
        if abs(th - PI) < 0.05:
            continue
        r, z, a = rng.uniform(0.5, 6), rng.uniform(-3, 4), rng.uniform(-0.5, 0.5)
        q = np.array([_quotient(Pwl3dParams(b=b, alpha=a, epsilon=e), th, r, z) for e in h])
        coef = np.linalg.solve(V, q)
        zone = sys.zones[0] if th < PI else sys.zones[1]
        x = np.array([r, z])
        worst = max(worst, np.max(np.abs(coef[0] - zone.terms[0](th, x, a))),
                    np.max(np.abs(coef[1] - zone.terms[1](th, x, a))))
    assert worst <= 1e-8


def test_exact_reduction_is_the_return_map():
    pr = repelling_torus_parameters()
    sysx = cartesian_reduced_system(pr.b)
    p = ParameterPoint(pr.alpha, pr.epsilon)
    for x in ([3.7, 0.65], [0.9, 2.5], [2.2, 1.9]):
        np.testing.assert_allclose(time_t_map(sysx, x, p), cartesian_return_map(pr, *x), atol=1e-9)


def test_section_hits_lie_on_half_plane():
    hits = cartesian_section(repelling_torus_parameters(), REPELLING_TORUS_IC, t_end=200.0)
    assert len(hits) >= 29
    assert np.all(hits[:, 1] > 0)
    assert np.all(np.diff(hits[:, 0]) > 0)


def test_oracle_delta_examples():
    d = oracle_delta(Pwl3dParams(b=-5, alpha=0.0), PI, 1.0)
    np.testing.assert_allclose(d.delta1, [0, 0], atol=1e-14)
    d = oracle_delta(Pwl3dParams(b=-5, alpha=0.0), 1.0, 0.0)
    np.testing.assert_allclose(d.delta1, [(-PI + PI**2 + 4) / 2, 2 - 5 * PI / 2])
    with pytest.raises(ValueError):
        oracle_delta(Pwl3dParams(b=-5), 0.0, 1.0)


def test_oracle_fixed_point():
    (r0, z0), (R1, S1) = oracle_fixed_point(0.0, -5.0)
    assert (r0, z0) == pytest.approx((PI, 1.0), abs=1e-15)
    # frozen from the printed r1, z1 polynomials at alpha = 0
    assert (R1, S1) == pytest.approx((-42.8802806, 41.39090283), abs=1e-7)
    with pytest.raises(ValueError):
        oracle_fixed_point(1 - 16 / PI**2)


@pytest.mark.parametrize("alpha", [-0.2, 0.13, 0.31])
def test_fixed_point_polynomial_transcription(pwl3d_m5, alpha):
    s0, s1 = oracle_fixed_point(alpha, -5.0)
    eps = np.array([4e-3, 2e-3, 1e-3])
    slopes = [(find_fixed_point(pwl3d_m5, s0, ParameterPoint(alpha, e)) - s0) / e for e in eps]
    # quadratic Richardson on slope(eps) = s1 + c eps + d eps^2
    V = np.vstack([np.ones(3), eps, eps**2]).T
    fit = np.linalg.solve(V, np.array(slopes))[0]
    np.testing.assert_allclose(fit, s1, rtol=1e-5)


def test_oracle_ns_printed_values():
    o = oracle_ns(Pwl3dParams(b=-5, alpha=0.0, epsilon=0.0))
    # closed form evaluates to 0.0212017; the quoted 0.0212031 agrees to 1e-4 relative
    assert o.ell12 == pytest.approx(0.0212031, rel=1e-4)
    assert o.ell11 == 0.0
    assert o.beta1 == pytest.approx(2.23934, abs=1e-5)
    assert o.b_rate == pytest.approx(np.sqrt(64 - 4 * PI**2) / 4, rel=1e-15)
    # quoted as 1.23824; the closed form evaluates to 1.237982
    assert o.b_rate == pytest.approx(1.23824, rel=5e-4)
    assert o.a_prime == pytest.approx(PI / 4)
    np.testing.assert_allclose(o.frame, [[-PI / 2, -np.sqrt(16 - PI**2) / 2], [2.0, 0.0]])
    o1 = oracle_ns(Pwl3dParams(b=1, alpha=0.0))
    assert o1.beta1 == pytest.approx(0.75214, abs=1e-5)
    assert o1.ell12 == pytest.approx(-0.0042406, rel=1e-4)


def test_eigen_rates_match_closed_forms(pwl3d_m5):
    al, a, b, a_prime = eigen_rates(pwl3d_m5, [PI, 1.0], [-0.01, 0.0, 0.01])
    assert a[1] == pytest.approx(0.0, abs=2e-4)
    assert b[1] == pytest.approx(np.sqrt(64 - 4 * PI**2) / 4, abs=2e-4)
    assert a_prime == pytest.approx(PI / 4, rel=1e-3)


def test_first_order_beta_from_closed_forms():
    """First-order critical value from the closed-form Delta1/Delta2.

    At the Delta1 zero, the eps-correction to the trace of the map Jacobian is
    tr(D Delta2) + (first-order fixed-point shift) . grad tr(D Delta1); the
    modulus defect vanishes where a(alpha) + that correction / 2 = 0.
    """
    from torus_scope.nsbif import solve_beta
    from torus_scope.pwl3d import reduced_system

    for b in (-5.0, 1.0):
        derived = -(24 * b / KAPPA + 1)
        sys = reduced_system(b)
        vals = []
        for eps in (2e-3, 1e-3):
            beta = solve_beta(sys, eps, 0.0, [PI, 1.0])[0]
            vals.append(beta / eps)
        extrap = 2 * vals[1] - vals[0]
        assert extrap == pytest.approx(derived, abs=0.01)
        printed = -(24 * b / KAPPA - 1)
        assert derived == pytest.approx(printed - 2)
