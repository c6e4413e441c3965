from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.linalg import expm

from torus_scope.integrate import FlowError, Tolerances, flow, flow_batch, flow_with_variationals, write_trace_csv
from torus_scope.model import ParameterPoint, PiecewiseSystem, linear_zone

from conftest import switched_constant_system

PI = np.pi


def _fd_jacobian(fun, x, h=1e-6):
    cols = []
    for k in range(x.size):
        e = np.zeros_like(x)
        e[k] = h
        cols.append((fun(x + e) - fun(x - e)) / (2 * h))
    return np.stack(cols, axis=1)


def test_zero_eps_is_identity(pwl3d_m5):
    tr = flow(pwl3d_m5, [3.0, 2.0], ParameterPoint(0.0, 0.0), 2 * PI)
    assert np.array_equal(tr.end_state, [3.0, 2.0])
    _, J = flow_with_variationals(pwl3d_m5, [3.0, 2.0], ParameterPoint(0.0, 0.0))
    assert np.array_equal(J, np.eye(2))


def test_delta1_zero_moves_at_second_order(pwl3d_m5):
    defects = []
    for eps in (2e-3, 1e-3):
        tr = flow(pwl3d_m5, [PI, 1.0], ParameterPoint(0.0, eps), 2 * PI)
        defects.append(np.linalg.norm(tr.end_state - [PI, 1.0]) / eps**2)
    assert defects[0] / defects[1] == pytest.approx(1.0, abs=0.05)


def test_constant_section_located_at_pi(pwl3d_m5):
    tr = flow(pwl3d_m5, [2.0, 1.0], ParameterPoint(0.0, 0.01), 2 * PI)
    assert len(tr.switch_times) == 1
    ev = tr.switch_times[0]
    assert ev.time == pytest.approx(PI, abs=1e-15)
    assert ev.residual <= 1e-12


def test_variational_matches_finite_differences(pwl3d_m5):
    p = ParameterPoint(0.0, 1e-2)
    x = np.array([2.5, 1.2])
    _, J = flow_with_variationals(pwl3d_m5, x, p)
    fd = _fd_jacobian(lambda y: flow(pwl3d_m5, y, p, keep_samples=False).end_state, x)
    np.testing.assert_allclose(J, fd, atol=1e-6)


def test_smooth_linear_jacobian_is_matrix_exponential():
    A = np.array([[0.2, -1.0], [0.7, -0.1]])
    sys = PiecewiseSystem(period=2.0, dim=2, order=1, zones=(linear_zone([A]),))
    eps = 0.3
    tr, J = flow_with_variationals(sys, [1.0, -0.5], ParameterPoint(0.0, eps), 2.0)
    np.testing.assert_allclose(J, expm(eps * A * 2.0), atol=1e-9)
    np.testing.assert_allclose(tr.end_state, expm(eps * A * 2.0) @ [1.0, -0.5], atol=1e-9)


def test_backward_flow_returns(pwl3d_m5):
    p = ParameterPoint(0.05, 0.02)
    x0 = np.array([2.0, 1.5])
    fwd = flow(pwl3d_m5, x0, p, 2 * PI).end_state
    back = flow(pwl3d_m5, fwd, p, 0.0, t0=2 * PI).end_state
    assert np.max(np.abs(back - x0)) <= 10 * 1e-10 * max(1.0, np.max(np.abs(x0)))


def test_tolerance_halving_convergence(pwl3d_m5):
    p = ParameterPoint(0.0, 0.02)
    coarse = flow(pwl3d_m5, [2.0, 1.5], p, tol=Tolerances(rtol=1e-8, atol=1e-8)).end_state
    fine = flow(pwl3d_m5, [2.0, 1.5], p, tol=Tolerances(rtol=5e-9, atol=5e-9)).end_state
    assert np.max(np.abs(coarse - fine)) < 1e-8


def test_batch_agrees_with_single(pwl3d_m5):
    p = ParameterPoint(0.0, 0.02)
    X = np.array([[2.0, 3.0, 4.0], [1.0, 0.0, -1.0]])
    imgs, jacs = flow_batch(pwl3d_m5, X, p, variational=True)
    for k in range(3):
        tr = flow(pwl3d_m5, X[:, k], p, variational=True)
        np.testing.assert_allclose(imgs[:, k], tr.end_state, atol=1e-9)
        np.testing.assert_allclose(jacs[:, :, k], tr.jacobian, atol=1e-8)


def test_state_dependent_events_and_saltation():
    sys, _, _ = switched_constant_system()
    p = ParameterPoint(0.0, 0.3)
    x = np.array([0.4, -0.2])
    tr = flow(sys, x, p, variational=True)
    assert len(tr.switch_times) == 1
    ev = tr.switch_times[0]
    assert ev.residual <= 1e-12
    # the crossing sits where theta(x(tau)) = tau
    x_tau = tr.at(ev.time)
    assert abs(np.pi + 0.1 * x_tau[0] - ev.time) <= 1e-12
    fd = _fd_jacobian(lambda y: flow(sys, y, p, keep_samples=False).end_state, x)
    np.testing.assert_allclose(tr.jacobian, fd, atol=1e-8)


@settings(max_examples=15, deadline=None)
@given(x1=st.floats(-3, 3), x2=st.floats(-3, 3), eps=st.floats(0.01, 0.4))
def test_event_residuals_property(x1, x2, eps):
    sys, _, _ = switched_constant_system()
    tr = flow(sys, [x1, x2], ParameterPoint(0.0, eps))
    assert all(ev.residual <= 1e-12 for ev in tr.switch_times)
    assert [ev.index for ev in tr.switch_times] == [1]


def test_domain_exit_raises(pwl3d_m5):
    with pytest.raises(FlowError):
        flow(pwl3d_m5, [25.0, 0.0], ParameterPoint(0.0, 0.01))


def test_trace_csv(tmp_path, pwl3d_m5):
    tr = flow(pwl3d_m5, [2.0, 1.0], ParameterPoint(0.0, 0.01))
    path = tmp_path / "trace.csv"
    write_trace_csv(tr, path, {"epsilon": 0.01})
    lines = path.read_text().splitlines()
    assert lines[0].startswith("# torus-scope")
    assert "t,x1,x2" in lines
    assert lines[-1].startswith("# switch j=1 tau=3.1415926535897931")
