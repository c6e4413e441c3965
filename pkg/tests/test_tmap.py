from __future__ import annotations

import numpy as np
import pytest

from torus_scope.model import ParameterPoint
from torus_scope.nsbif import find_fixed_point, solve_beta
from torus_scope.tmap import DerivativeScheme, derivatives_at, derivatives_of_map, symmetrize, time_t_map

PI = np.pi


def _poly_batch(eps):
    def batch(X, variational):
        x1, x2 = X
        img = X + eps * np.vstack([x1**2 + x1**3, x1 * x2 + x1 * x2**2])
        if not variational:
            return img, None
        J = np.zeros((2, 2, X.shape[1]))
        J[0, 0] = 1 + eps * (2 * x1 + 3 * x1**2)
        J[1, 0] = eps * (x2 + x2**2)
        J[1, 1] = 1 + eps * (x1 + 2 * x1 * x2)
        return img, J

    return batch


@pytest.mark.parametrize("method", ["jacobian", "stencil"])
def test_polynomial_map_tensors(method):
    eps = 0.3
    s = derivatives_of_map(_poly_batch(eps), np.zeros(2), DerivativeScheme(method))
    B = np.zeros((2, 2, 2))
    B[0, 0, 0] = 2 * eps
    B[1, 0, 1] = B[1, 1, 0] = eps
    np.testing.assert_allclose(s.bilinear, B, atol=1e-6)
    C = np.zeros((2, 2, 2, 2))
    C[0, 0, 0, 0] = 6 * eps
    for idx in [(0, 1, 1), (1, 0, 1), (1, 1, 0)]:
        C[(1,) + idx] = 2 * eps / 1.0
    np.testing.assert_allclose(s.trilinear, C, atol=1e-4)
    np.testing.assert_allclose(s.jacobian, np.eye(2), atol=1e-12)


def test_symmetry_is_exact():
    s = derivatives_of_map(_poly_batch(0.2), np.array([0.3, -0.4]))
    np.testing.assert_array_equal(s.bilinear, symmetrize(s.bilinear))
    u, v = np.array([1.0, 2.0]), np.array([-0.5, 0.7])
    np.testing.assert_allclose(s.B(u, v), s.B(v, u), atol=0, rtol=1e-15)


def test_zero_eps(pwl3d_m5):
    s = derivatives_at(pwl3d_m5, [2.0, 1.0], ParameterPoint(0.0, 0.0))
    np.testing.assert_array_equal(s.jacobian, np.eye(2))
    assert not np.any(s.bilinear)
    assert not np.any(s.trilinear)
    assert np.array_equal(time_t_map(pwl3d_m5, [2.0, 1.0], ParameterPoint(0.0, 0.0)), [2.0, 1.0])


def test_schemes_agree_on_pwl3d(pwl3d_m5):
    p = ParameterPoint(0.0, 0.01)
    x = np.array([3.0, 1.2])
    a = derivatives_at(pwl3d_m5, x, p, DerivativeScheme("jacobian"))
    b = derivatives_at(pwl3d_m5, x, p, DerivativeScheme("stencil"))
    scale = np.max(np.abs(a.bilinear))
    assert np.max(np.abs(a.bilinear - b.bilinear)) <= 1e-3 * scale
    assert a.error_estimate["bilinear_asymmetry"] <= 1e-3 * scale


def test_critical_eigenvalues_near_printed_rate(pwl3d_m5):
    eps = 0.01
    beta, sigma, J, _ = solve_beta(pwl3d_m5, eps, 0.0, [PI, 1.0])
    lam = np.linalg.eigvals(J)
    lam = lam[np.argmax(lam.imag)]
    b0 = np.sqrt(64 - 4 * PI**2) / 4
    assert lam.imag / eps == pytest.approx(b0, rel=0.05)
    assert abs(abs(lam) - 1) <= 1e-9


def test_in_frame_transforms_tensors(pwl3d_m5):
    p = ParameterPoint(0.0, 0.01)
    s = derivatives_at(pwl3d_m5, [3.0, 1.0], p)
    L = np.array([[1.0, 0.5], [-0.2, 2.0]])
    f = s.in_frame(L)
    u, v = np.array([0.3, -1.0]), np.array([1.2, 0.4])
    np.testing.assert_allclose(f.B(u, v), np.linalg.solve(L, s.B(L @ u, L @ v)), atol=1e-14)
    np.testing.assert_allclose(f.jacobian, np.linalg.solve(L, s.jacobian @ L), atol=1e-14)


def test_stencil_leaving_domain(pwl3d_m5):
    with pytest.raises(ValueError, match="domain"):
        derivatives_at(pwl3d_m5, [19.9999, 0.0], ParameterPoint(0.0, 0.01))


def test_variational_vs_central_jacobian(pwl3d_m5):
    p = ParameterPoint(0.02, 0.01)
    x = find_fixed_point(pwl3d_m5, [PI, 1.0], p)
    s = derivatives_at(pwl3d_m5, x, p)
    h = 1e-6
    fd = np.stack([(time_t_map(pwl3d_m5, x + h * e, p) - time_t_map(pwl3d_m5, x - h * e, p)) / (2 * h)
                   for e in np.eye(2)], axis=1)
    np.testing.assert_allclose(s.jacobian, fd, atol=1e-6)
