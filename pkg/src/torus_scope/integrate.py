"""Zone-by-zone integration of the piecewise flow with located switching times.

The stepper is a batched Dormand-Prince 5(4) pair: a whole batch of initial
states advances on one shared step sequence, so the numerical time-T map is a
single smooth function of the initial state.  That is what makes finite
differences across a stencil batch meaningful well below the integration
tolerance.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.integrate import RK45
from scipy.optimize import brentq

from .model import ParameterPoint, PiecewiseSystem

__all__ = [
    "FlowError",
    "FlowTrace",
    "SwitchEvent",
    "Tolerances",
    "flow",
    "flow_batch",
    "flow_with_variationals",
    "write_trace_csv",
]

log = logging.getLogger(__name__)

# Dormand-Prince 5(4) tableau and its quartic continuous extension.
_A = RK45.A
_B = RK45.B
_C = RK45.C
_E = RK45.E
_P = RK45.P
_NSTAGE = RK45.n_stages


class FlowError(RuntimeError):
    """Integration failure: domain exit, step underflow or a missing event bracket."""

    def __init__(self, message: str, t_last: float | None = None):
        super().__init__(message if t_last is None else f"{message} (last valid t={t_last:.17g})")
        self.t_last = t_last


@dataclass(frozen=True)
class Tolerances:
    rtol: float = 1e-10
    atol: float = 1e-10
    event_tol: float = 1e-12
    max_steps: int = 200_000
    check_domain: bool = True


@dataclass
class SwitchEvent:
    index: int
    time: float
    residual: float


@dataclass
class FlowTrace:
    """A computed trajectory over ``[t0, t_end]``.

    ``samples`` holds accepted step nodes; :meth:`at` interpolates with the
    stepper's dense output.
    """

    times: np.ndarray
    states: np.ndarray
    switch_times: list[SwitchEvent]
    end_state: np.ndarray
    _segments: list = field(default_factory=list, repr=False)
    jacobian: np.ndarray | None = None

    @property
    def samples(self) -> tuple[np.ndarray, np.ndarray]:
        return self.times, self.states

    def at(self, t: float) -> np.ndarray:
        for t0, h, y0, K, smax in self._segments:
            t1 = t0 + smax * h
            lo, hi = (t0, t1) if h > 0 else (t1, t0)
            if lo - 1e-14 <= t <= hi + 1e-14:
                return _dense(y0, K, h, (t - t0) / h)[: self.states.shape[1]]
        raise ValueError(f"t={t} outside trace")


def _dense(y0: np.ndarray, K: np.ndarray, h: float, s: float) -> np.ndarray:
    """State at ``t0 + s*h`` from the step's stages, ``0 <= s <= 1``."""
    Q = np.tensordot(_P.T, K, axes=1)
    powers = s ** np.arange(1, _P.shape[1] + 1)
    return y0 + h * np.tensordot(powers, Q, axes=1)


def _rms(err: np.ndarray, y0: np.ndarray, y1: np.ndarray, tol: Tolerances) -> float:
    scale = tol.atol + tol.rtol * np.maximum(np.abs(y0), np.abs(y1))
    e = err / scale
    if e.ndim == 1:
        return float(np.sqrt(np.mean(e**2)))
    return float(np.max(np.sqrt(np.mean(e**2, axis=0))))


def _step(f, t: float, y: np.ndarray, h: float, k0: np.ndarray):
    K = np.empty((_NSTAGE + 1,) + y.shape, dtype=y.dtype)
    K[0] = k0
    for s in range(1, _NSTAGE):
        dy = np.tensordot(_A[s, :s], K[:s], axes=1)
        K[s] = f(t + _C[s] * h, y + h * dy)
    y_new = y + h * np.tensordot(_B, K[:_NSTAGE], axes=1)
    K[_NSTAGE] = f(t + h, y_new)
    err = h * np.tensordot(_E, K, axes=1)
    return y_new, err, K


def _initial_step(f, t0, y0, direction, span, tol: Tolerances, f0) -> float:
    scale = tol.atol + np.abs(y0) * tol.rtol
    d0 = np.sqrt(np.mean((y0 / scale) ** 2))
    d1 = np.sqrt(np.mean((f0 / scale) ** 2))
    h0 = 1e-6 if d0 < 1e-5 or d1 < 1e-5 else 0.01 * d0 / d1
    h0 = min(h0, span)
    y1 = y0 + direction * h0 * f0
    f1 = f(t0 + direction * h0, y1)
    d2 = np.sqrt(np.mean(((f1 - f0) / scale) ** 2)) / h0
    if d1 <= 1e-15 and d2 <= 1e-15:
        h1 = max(1e-6, h0 * 1e-3)
    else:
        h1 = (0.01 / max(d1, d2)) ** (1 / 5)
    if d1 == 0.0 and d2 == 0.0:
        return span
    return min(100 * h0, h1, span)


def _integrate_span(f, t0, t1, y0, tol: Tolerances, h_guess=None, event=None, keep=False, check=None):
    """Advance ``y' = f(t, y)`` from ``t0`` to ``t1`` (either direction).

    ``event(t, y) -> float`` is watched for a sign change across accepted steps;
    when found, the span ends at the refined root and ``(t_event, y_event)`` is
    returned in place of ``(t1, y1)``.
    """
    direction = 1.0 if t1 >= t0 else -1.0
    span = abs(t1 - t0)
    t, y = t0, y0
    segments = []
    if span == 0.0:
        return t, y, None, segments, False
    k0 = f(t, y)
    h = h_guess if h_guess else _initial_step(f, t, y, direction, span, tol, k0)
    h = min(h, span)
    g_prev = event(t, y) if event is not None else None
    steps = 0
    while True:
        remaining = abs(t1 - t)
        if remaining <= 1e-15 * max(1.0, abs(t1)):
            break
        last = h >= remaining
        h_try = remaining if last else h
        y_new, err, K = _step(f, t, y, direction * h_try, k0)
        en = _rms(err, y, y_new, tol)
        if not np.isfinite(en):
            en = np.inf
        if en <= 1.0:
            t_new = t1 if last else t + direction * h_try
            if check is not None:
                check(t_new, y_new, t)
            if event is not None:
                g_new = event(t_new, y_new)
                if g_prev != 0.0 and np.sign(g_new) != np.sign(g_prev):
                    hd = direction * h_try

                    def g(s):
                        return event(t + s * hd, _dense(y, K, hd, s))

                    s_root = brentq(g, 0.0, 1.0, xtol=tol.event_tol / abs(hd) * 0.5, rtol=4 * np.finfo(float).eps)
                    t_ev = t + s_root * hd
                    y_ev = _dense(y, K, hd, s_root)
                    if keep:
                        # the step is cut at the root; keep its polynomial, limit its range
                        segments.append((t, hd, y, K, s_root))
                    return t_ev, y_ev, h, segments, True
                g_prev = g_new
            if keep:
                segments.append((t, direction * h_try, y, K, 1.0))
            t, y = t_new, y_new
            k0 = K[_NSTAGE]
            factor = 10.0 if en == 0 else min(10.0, 0.9 * en ** (-1 / 5))
            if not last:
                h = h_try * factor
            steps += 1
            if steps > tol.max_steps:
                raise FlowError("maximum step count exceeded", t)
        else:
            h = h_try * max(0.2, 0.9 * en ** (-1 / 5))
        if h < 1e-14 * max(1.0, abs(t)):
            raise FlowError("step size underflow", t)
    return t, y, h, segments, False


def _zone_rhs(sys: PiecewiseSystem, j: int, p: ParameterPoint, dim: int, variational: bool):
    def rhs(t, y):
        x = y[:dim]
        fx = sys.zone_field(j, t, x, p)
        if not variational:
            return fx
        J = sys.zone_jacobian(j, t, x, p)  # (dim, dim, N)
        Phi = y[dim:].reshape((dim, dim) + y.shape[1:])
        dPhi = np.einsum("ik...,kl...->il...", J, Phi)
        return np.concatenate([fx, dPhi.reshape((dim * dim,) + y.shape[1:])])

    return rhs


def _domain_check(sys: PiecewiseSystem, dim: int, tol: Tolerances):
    if not tol.check_domain or sys.domain is None:
        return None

    def check(t, y, t_prev):
        if not np.all(sys.domain.contains(y[:dim])):
            raise FlowError("trajectory left the domain box", t_prev)

    return check


def flow_batch(
    sys: PiecewiseSystem,
    x0: np.ndarray,
    p: ParameterPoint,
    t_end: float | None = None,
    *,
    t0: float = 0.0,
    variational: bool = False,
    tol: Tolerances = Tolerances(),
) -> tuple[np.ndarray, np.ndarray | None]:
    """Map a batch ``x0`` of shape ``(dim, N)`` from ``t0`` to ``t_end``.

    Requires constant switching sections (all trajectories switch together).
    ``t_end < t0`` integrates backward.  Returns the end states and, when
    ``variational`` is set, the Jacobians with shape ``(dim, dim, N)``.
    """
    if not sys.constant_switching:
        raise ValueError("flow_batch needs constant switching sections; use flow()")
    T = sys.period
    t_end = T if t_end is None else t_end
    x0 = np.asarray(x0, dtype=float)
    dim, n = x0.shape
    if variational:
        eye = np.broadcast_to(np.eye(dim).reshape(dim * dim, 1), (dim * dim, n))
        y = np.concatenate([x0, eye])
    else:
        y = x0.copy()
    if p.epsilon == 0.0:
        return (y[:dim], y[dim:].reshape(dim, dim, n) if variational else None)
    edges = _zone_edges(sys, t0, t_end)
    check = _domain_check(sys, dim, tol)
    h = None
    for j, a, b in edges:
        _, y, h, _, _ = _integrate_span(_zone_rhs(sys, j, p, dim, variational), a, b, y, tol, h, check=check)
    return y[:dim], (y[dim:].reshape(dim, dim, n) if variational else None)


def _zone_edges(sys: PiecewiseSystem, t0: float, t1: float):
    """(zone, start, stop) triples for constant sections over ``[t0, t1]``."""
    T = sys.period
    cuts = [s.constant for s in sys.switchers]
    lo, hi = min(t0, t1), max(t0, t1)
    marks = [lo]
    k0 = int(np.floor(lo / T))
    k1 = int(np.ceil(hi / T))
    for k in range(k0, k1 + 1):
        for c in [0.0] + cuts:
            m = k * T + c
            if lo < m < hi:
                marks.append(m)
    marks.append(hi)
    marks = sorted(set(marks))
    pieces = []
    for a, b in zip(marks[:-1], marks[1:]):
        mid = 0.5 * (a + b) % T
        j = sum(1 for c in cuts if mid > c)
        pieces.append((j, a, b))
    if t1 < t0:
        pieces = [(j, b, a) for j, a, b in reversed(pieces)]
    return pieces


def flow(
    sys: PiecewiseSystem,
    x0,
    p: ParameterPoint,
    t_end: float | None = None,
    *,
    t0: float = 0.0,
    tol: Tolerances = Tolerances(),
    keep_samples: bool = True,
    variational: bool = False,
) -> FlowTrace:
    """Integrate one trajectory, locating each crossing ``t = theta_j(x(t))``.

    Crossings are found as sign changes of ``h_j(t) = theta_j(x(t)) - t`` over
    accepted steps and refined on the dense output; integration restarts at
    the crossing with the next zone's field.
    """
    T = sys.period
    t_end = T if t_end is None else float(t_end)
    if not (t_end != t0 and abs(t_end - t0) <= T * (1 + 1e-14)):
        raise ValueError("t_end - t0 must lie in (0, T] in absolute value")
    x0 = np.asarray(x0, dtype=float)
    dim = sys.dim
    if sys.domain is not None and tol.check_domain and not sys.domain.contains(x0):
        raise FlowError("initial state outside the domain box", t0)
    y = np.concatenate([x0, np.eye(dim).ravel()]) if variational else x0.copy()
    backward = t_end < t0
    times = [t0]
    states = [x0.copy()]
    events: list[SwitchEvent] = []
    segments = []
    check = _domain_check(sys, dim, tol)
    if p.epsilon == 0.0:
        jac = np.eye(dim) if variational else None
        return FlowTrace(np.array([t0, t_end]), np.array([x0, x0]), _trivial_events(sys, x0, p, t0, t_end), x0.copy(), [], jac)

    if sys.constant_switching:
        edges = _zone_edges(sys, t0, t_end)
        h = None
        for idx, (j, a, b) in enumerate(edges):
            _, y, h, segs, _ = _integrate_span(_zone_rhs(sys, j, p, dim, variational), a, b, y, tol, h, keep=True, check=check)
            segments += segs
            for t_seg, h_seg, y_seg, K_seg, smax in segs:
                times.append(t_seg + smax * h_seg)
                states.append(_dense(y_seg, K_seg, h_seg, smax)[:dim])
            if idx < len(edges) - 1:
                tb = b % T
                k = _section_index(sys, tb)
                if k is not None:
                    events.append(SwitchEvent(k, b, 0.0))
        jac = y[dim:].reshape(dim, dim) if variational else None
        return FlowTrace(np.array(times), np.array(states), events, y[:dim].copy(), segments, jac)

    # state-dependent sections: one zone at a time with event location
    t = t0
    j = _start_zone(sys, t0, x0, p, backward)
    h = None
    while True:
        if backward:
            target_idx = j - 1 if j >= 1 else None
        else:
            target_idx = j if j < sys.n_switch else None
        sw = sys.switchers[target_idx] if target_idx is not None else None
        event = None if sw is None else (lambda tt, yy, sw=sw: float(sw(yy[:dim], p.alpha)) - tt)
        rhs = _zone_rhs(sys, j, p, dim, variational)
        stop = t_end
        t_new, y_new, h, segs, hit = _integrate_span(rhs, t, stop, y, tol, h, event=event, keep=True, check=check)
        segments += segs
        for t_seg, h_seg, y_seg, K_seg, smax in segs:
            times.append(t_seg + smax * h_seg)
            states.append(_dense(y_seg, K_seg, h_seg, smax)[:dim])
        if not hit:
            y = y_new
            break
        res = abs(float(sw(y_new[:dim], p.alpha)) - t_new)
        if res > tol.event_tol:
            raise FlowError(f"event residual {res:.3g} above tolerance", t_new)
        events.append(SwitchEvent(target_idx + 1, t_new, res))
        j_next = j - 1 if backward else j + 1
        if variational:
            y_new = _apply_saltation(sys, j, j_next, sw, t_new, y_new, p, dim)
        y, t, j = y_new, t_new, j_next
    if not backward:
        expected = sys.n_switch - _start_zone(sys, t0, x0, p, False)
        if t_end >= T * (1 - 1e-14) and t0 == 0.0 and len(events) != expected:
            raise FlowError(f"event bracket not found: located {len(events)} of {expected} crossings", times[-1])
    jac = y[dim:].reshape(dim, dim) if variational else None
    return FlowTrace(np.array(times), np.array(states), events, y[:dim].copy(), segments, jac)


def _trivial_events(sys, x0, p, t0, t_end):
    lo, hi = sorted((t0, t_end))
    th = sys.section_times(x0, p.alpha)
    return [SwitchEvent(i + 1, float(v), 0.0) for i, v in enumerate(th) if lo < v < hi]


def _section_index(sys: PiecewiseSystem, t: float):
    for i, s in enumerate(sys.switchers):
        if abs(s.constant - t) <= 1e-12 * sys.period:
            return i + 1
    return None


def _start_zone(sys, t0, x0, p, backward):
    t = t0 % sys.period
    if backward and t == 0.0:
        return sys.n_switch
    return int(np.sum(t > sys.section_times(x0, p.alpha)))


def _apply_saltation(sys, j_from, j_to, sw, t, y, p, dim):
    """Jump of the variational matrix across ``t = theta(x)``.

    ``S = I + (f_to - f_from) grad(theta)^T / (grad(theta) . f_from - 1)``.
    """
    x = y[:dim]
    f_from = sys.zone_field(j_from, t, x, p)
    f_to = sys.zone_field(j_to, t, x, p)
    g = sw.grad(x, p.alpha)
    denom = float(g @ f_from) - 1.0
    S = np.eye(dim) + np.outer(f_to - f_from, g) / denom
    Phi = y[dim:].reshape(dim, dim)
    return np.concatenate([x, (S @ Phi).ravel()])


def flow_with_variationals(
    sys: PiecewiseSystem,
    x0,
    p: ParameterPoint,
    t_end: float | None = None,
    *,
    t0: float = 0.0,
    tol: Tolerances = Tolerances(),
) -> tuple[FlowTrace, np.ndarray]:
    """Trace plus ``D_x phi(t_end, x0)`` from the variational equations."""
    trace = flow(sys, x0, p, t_end, t0=t0, tol=tol, variational=True)
    jac = trace.jacobian if trace.jacobian is not None else np.eye(sys.dim)
    return trace, jac


def write_trace_csv(trace: FlowTrace, path: str | Path, header: dict | None = None) -> None:
    """Dump a trace: ``t, x1..xd`` rows, switching times as trailing comments."""
    from .report import format_float, header_lines

    path = Path(path)
    dim = trace.states.shape[1]
    with path.open("w") as fh:
        for line in header_lines(header or {}):
            fh.write(line + "\n")
        fh.write(",".join(["t"] + [f"x{i + 1}" for i in range(dim)]) + "\n")
        for t, x in zip(trace.times, trace.states):
            fh.write(",".join(format_float(v) for v in (t, *x)) + "\n")
        for ev in trace.switch_times:
            fh.write(f"# switch j={ev.index} tau={format_float(ev.time)} residual={format_float(ev.residual)}\n")
