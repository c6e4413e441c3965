"""The 3D piecewise-linear torus example, in Cartesian and reduced (r, z) form.

The Cartesian system is

    u' = (-y, x, 0) + eps (A+ u + c+)                 for y > 0
    u' = (-y, x, 0) + eps A- u + eps^2 B- u           for y < 0

and taking the polar angle as the new time gives the reduced 2pi-periodic
system ``(r, z)' = eps F1 + eps^2 F2`` with constant sections at 0 and pi.
The upper-zone affine term ``c+ = (0, (pi^2+4)/4, -5/2)`` is the one the
reduced field requires; without it the Cartesian and reduced forms disagree
at first order.

Everything here is closed form and is used as an oracle for the generic
pipeline.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import expm
from scipy.optimize import brentq

from .model import (
    BoundaryEvaluation,
    DomainBox,
    PiecewiseSystem,
    SwitchingFunction,
    ZoneField,
    stack_components,
)

__all__ = [
    "KAPPA",
    "Pwl3dParams",
    "cartesian_field",
    "cartesian_matrices",
    "cartesian_reduced_system",
    "cartesian_return_map",
    "cartesian_section",
    "cartesian_simulate",
    "repelling_torus_parameters",
    "oracle_delta",
    "oracle_fixed_point",
    "oracle_ns",
    "reduced_field",
    "reduced_system",
]

PI = np.pi
KAPPA = 8 + 9 * PI**2
SQ = np.sqrt(16 - PI**2)
REPELLING_TORUS_IC = (3.669234340877, 0.0, 0.48488236396962971)


@dataclass(frozen=True)
class Pwl3dParams:
    b: float
    alpha: float = 0.0
    epsilon: float = 0.0
    b_minus_delta: np.ndarray | None = field(default=None, compare=False)

    def __post_init__(self):
        if self.b == 0:
            raise ValueError("b must be nonzero")

    @property
    def b_minus(self) -> np.ndarray:
        B = np.zeros((3, 3))
        B[1, 2] = self.b
        if self.b_minus_delta is not None:
            B = B + np.asarray(self.b_minus_delta, dtype=float)
        return B


def repelling_torus_parameters(b: float = -5.0, epsilon: float = 1 / 40) -> Pwl3dParams:
    """``alpha = eps (pi^2/8 - 2)``: below ``beta(eps)`` for ``b = -5``, where a repelling torus exists."""
    return Pwl3dParams(b=b, alpha=epsilon * (PI**2 / 8 - 2), epsilon=epsilon)


# ---------------------------------------------------------------- Cartesian

def cartesian_matrices(params: Pwl3dParams):
    """``(A+, c+, A-, B-)`` for the given parameters."""
    b, a = params.b, params.alpha
    Ap = np.array([[0.0, 0.0, -4 * PI**2 * b / KAPPA], [0.0, -1.0, -1.0], [0.0, 0.0, 0.5]])
    cp = np.array([0.0, (PI**2 + 4) / 4, -2.5])
    Am = np.array([[a, 4.0, -1.0], [0.0, 0.0, 0.0], [0.0, -1.0, 0.0]])
    return Ap, cp, Am, params.b_minus


_ROT = np.array([[0.0, -1.0, 0.0], [1.0, 0.0, 0.0], [0.0, 0.0, 0.0]])


def _zone_affine(params: Pwl3dParams, upper: bool):
    """``(M, c)`` with ``u' = M u + c`` in one half-space."""
    Ap, cp, Am, Bm = cartesian_matrices(params)
    e = params.epsilon
    if upper:
        return _ROT + e * Ap, e * cp
    return _ROT + e * Am + e * e * Bm, np.zeros(3)


def cartesian_field(params: Pwl3dParams, x, y, z) -> np.ndarray:
    if y == 0:
        raise BoundaryEvaluation(1, 0.0, 0.0)
    M, c = _zone_affine(params, y > 0)
    return M @ np.array([x, y, z], dtype=float) + c


class _AffinePropagator:
    """Exact flow ``exp(M t)`` of the augmented affine zone field."""

    def __init__(self, M, c):
        G = np.zeros((4, 4))
        G[:3, :3] = M
        G[:3, 3] = c
        self.G = G
        self._cache: dict[float, np.ndarray] = {}

    def step(self, u, dt: float) -> np.ndarray:
        E = self._cache.get(dt)
        if E is None:
            E = expm(self.G * dt)
            if len(self._cache) < 8:
                self._cache[dt] = E
        return E[:3, :3] @ u + E[:3, 3]


def _propagate(params: Pwl3dParams, u0, t_end: float, dt: float, on_cross=None, on_sample=None):
    """March the exact piecewise-affine flow, locating each ``y = 0`` crossing."""
    props = {True: _AffinePropagator(*_zone_affine(params, True)),
             False: _AffinePropagator(*_zone_affine(params, False))}
    u = np.asarray(u0, dtype=float).copy()
    t = 0.0
    upper = u[1] > 0 if u[1] != 0 else u[0] > 0
    if on_sample:
        on_sample(t, u)
    while t < t_end - 1e-12:
        h = min(dt, t_end - t)
        P = props[upper]
        v = P.step(u, h)
        crossed = (v[1] < 0) if upper else (v[1] > 0)
        if crossed:
            s = brentq(lambda s: P.step(u, s)[1], 0.0, h, xtol=1e-15, rtol=4 * np.finfo(float).eps)
            # nudge past the root so the next zone starts strictly inside
            uc = P.step(u, s)
            uc[1] = 0.0
            t += s
            u = uc
            if on_cross:
                on_cross(t, u, upper)
            upper = not upper
        else:
            t += h
            u = v
        if on_sample:
            on_sample(t, u)
        if not np.all(np.isfinite(u)) or np.max(np.abs(u)) > 1e6:
            raise FloatingPointError(f"trajectory diverged at t={t}")
    return t, u


def cartesian_simulate(params: Pwl3dParams, u0=REPELLING_TORUS_IC, t_end: float = 10000.0, dt: float = 0.05):
    """Sampled trajectory ``(t, x, y, z)`` rows, sampled every ``dt`` and at crossings."""
    rows = []
    _propagate(params, u0, t_end, dt, on_sample=lambda t, u: rows.append((t, *u)))
    return np.array(rows)


def cartesian_section(params: Pwl3dParams, u0=REPELLING_TORUS_IC, t_end: float = 10000.0, dt: float = 0.05):
    """Hits of the section ``y = 0, x > 0``; rows ``(t, x, z)``.

    In the reduced coordinates a hit is the point ``(r, z) = (x, z)``.
    """
    hits = []

    def cross(t, u, was_upper):
        if not was_upper and u[0] > 0:
            hits.append((t, u[0], u[2]))

    _propagate(params, u0, t_end, dt, on_cross=cross)
    return np.array(hits).reshape(-1, 3)


def cartesian_return_map(params: Pwl3dParams, r: float, z: float) -> np.ndarray:
    """First return ``(r, z) -> (r', z')`` to ``y = 0, x > 0`` of the Cartesian flow."""
    hits = []

    def cross(t, u, was_upper):
        if not was_upper and u[0] > 0:
            hits.append((u[0], u[2]))
            raise StopIteration

    try:
        _propagate(params, (r, 0.0, z), 4 * PI, 0.1, on_cross=cross)
    except StopIteration:
        return np.array(hits[0])
    raise RuntimeError("no return to the section within two periods")


# ------------------------------------------------------------------ reduced

def _f1_upper(b):
    def f(t, x, alpha):
        r, z = x[0], x[1]
        s, c = np.sin(t), np.cos(t)
        return stack_components(
            0.25 * s * (-4 * r * s - 4 * z + PI**2 + 4) - 4 * PI**2 * b * z * c / KAPPA,
            (z - 5) / 2 + 0 * r,
        )

    return f


def _f1_lower(t, x, alpha):
    r, z = x[0], x[1]
    s, c = np.sin(t), np.cos(t)
    return stack_components(
        0.5 * (alpha * r * np.cos(2 * t) + alpha * r + 4 * r * np.sin(2 * t) - 2 * z * c),
        -r * s,
    )


def _f2_upper(b):
    def f(t, x, alpha):
        r, z = x[0], x[1]
        s, c = np.sin(t), np.cos(t)
        w = 4 * r * s + 4 * z - PI**2 - 4
        p1 = (16 * PI**2 * b * z * s - KAPPA * c * w) / (16 * KAPPA**2 * r)
        p2 = 16 * PI**2 * b * z * c + KAPPA * s * w
        q = (z - 5) / (8 * KAPPA * r) * (KAPPA * c * w - 16 * PI**2 * b * z * s)
        return stack_components(p1 * p2, q)

    return f


def _f2_lower(B):
    """Second-order lower field; the ``B-`` contribution is kept general."""
    B = np.asarray(B, dtype=float)

    def f(t, x, alpha):
        r, z = x[0], x[1]
        s, c = np.sin(t), np.cos(t)
        w = -alpha * r * c - 4 * r * s + z
        ux, uy = r * c, r * s
        Bu = [B[i, 0] * ux + B[i, 1] * uy + B[i, 2] * z for i in range(3)]
        return stack_components(
            np.sin(2 * t) * w**2 / (2 * r) + c * Bu[0] + s * Bu[1],
            s**2 * w + Bu[2],
        )

    return f


def reduced_system(b: float = -5.0, b_minus_delta=None) -> PiecewiseSystem:
    """Reduced 2pi-periodic system in the ``(r, z)`` plane, sections at pi."""
    pp = Pwl3dParams(b=b, b_minus_delta=b_minus_delta)
    upper = ZoneField(terms=(_f1_upper(b), _f2_upper(b)), analytic=True)
    lower = ZoneField(terms=(_f1_lower, _f2_lower(pp.b_minus)), analytic=True)
    return PiecewiseSystem(
        period=2 * PI,
        dim=2,
        order=2,
        zones=(upper, lower),
        switchers=(SwitchingFunction.at(PI),),
        domain=DomainBox((-20.0, -20.0), (20.0, 20.0), (-0.5, 0.5), 0.1),
        name="pwl3d",
        params={"b": float(b)},
    )


def _exact_zone(params_b, B, upper: bool):
    """Untruncated angle-time field of one half-space, as ``eps^3`` remainder.

    With ``u = (r cos t, r sin t, z)`` and ``u' = Rot u + eps G(u)`` the polar
    angle advances at ``1 + eps Q`` with ``Q = (cos t G_y - sin t G_x) / r``, so
    ``(r, z)`` obeys ``eps (cos t G_x + sin t G_y, G_z) / (1 + eps Q)`` exactly.
    """
    f1 = _f1_upper(params_b) if upper else _f1_lower
    f2 = _f2_upper(params_b) if upper else _f2_lower(B)

    def exact(t, x, alpha, eps):
        r, z = x[0], x[1]
        s, c = np.sin(t), np.cos(t)
        u = (r * c, r * s, z)
        pp = Pwl3dParams(b=params_b, alpha=0.0)
        Ap, cp, Am, _ = cartesian_matrices(pp)
        if upper:
            G = [sum(Ap[i, k] * u[k] for k in range(3)) + cp[i] for i in range(3)]
        else:
            Am = Am.copy()
            Am[0, 0] = 0.0
            G = [sum((Am[i, k] + eps * B[i, k]) * u[k] for k in range(3)) for i in range(3)]
            G[0] = G[0] + alpha * u[0]
        q = (c * G[1] - s * G[0]) / r
        den = 1 + eps * q
        return stack_components(eps * (c * G[0] + s * G[1]) / den, eps * G[2] / den)

    def remainder(t, x, alpha, eps):
        full = exact(t, x, alpha, eps)
        return (full - eps * f1(t, x, alpha) - eps * eps * f2(t, x, alpha)) / eps**3

    return ZoneField(terms=(f1, f2), remainder=remainder, analytic=True)


def cartesian_reduced_system(b: float = -5.0, b_minus_delta=None) -> PiecewiseSystem:
    """The Cartesian model in angle time, without truncation in ``eps``.

    Its time-2pi map is exactly the first return to ``y = 0, x > 0``; the
    first two orders coincide with :func:`reduced_system`.
    """
    pp = Pwl3dParams(b=b, b_minus_delta=b_minus_delta)
    base = reduced_system(b, b_minus_delta)
    zones = (_exact_zone(b, pp.b_minus, True), _exact_zone(b, pp.b_minus, False))
    return PiecewiseSystem(
        period=base.period, dim=2, order=2, zones=zones, switchers=base.switchers,
        domain=base.domain, name="pwl3d-cartesian", params={"b": float(b)},
    )


def reduced_field(params: Pwl3dParams, theta: float, r: float, z: float) -> np.ndarray:
    if r <= 0:
        raise ValueError("reduced field needs r > 0")
    th = float(theta) % (2 * PI)
    if th == 0.0 or th == PI:
        raise BoundaryEvaluation(1 if th == PI else 0, th, th)
    x = np.array([r, z], dtype=float)
    e, a = params.epsilon, params.alpha
    if th < PI:
        return e * _f1_upper(params.b)(th, x, a) + e * e * _f2_upper(params.b)(th, x, a)
    return e * _f1_lower(th, x, a) + e * e * _f2_lower(params.b_minus)(th, x, a)


# ------------------------------------------------------------------ oracles

def oracle_delta(params: Pwl3dParams, r: float, z: float):
    """Closed-form ``(Delta1, Delta2)`` of the reduced system."""
    from .melnikov import MelnikovPair

    if r == 0:
        raise ValueError("Delta2 is singular at r = 0")
    a, b = params.alpha, params.b
    d1 = np.array([
        PI * a * r / 2 + 0.5 * (-PI * r - 4 * z + PI**2 + 4),
        2 * r + PI / 2 * (z - 5),
    ])
    d2 = np.array([
        (PI * (a * (PI * (a - 2) + 8) - 4) * r - 8 * z * ((PI - 2) * a + 2 * b) + 2 * PI * (PI**2 + 4) * a) / 8
        + PI / 8 * (PI * (32 * b * (3 * z - 5) / KAPPA + r - PI) + 16),
        PI * (0.5 * (a - 2) * r + z + PI)
        + PI**2 / 8 * (z - 5) * (1 - 32 * b * z / (KAPPA * r))
        + 8 * r - 4 * z + 4,
    ])
    return MelnikovPair(delta1=d1, delta2=d2, g2_smooth=d2.copy(), g2_jump=np.zeros(2))


def _r1_poly(a, b):
    return (
        8 * PI**5 * (17 * a - 35) * a
        - 16 * PI**4 * (a * (45 * a - 25 * b + 149) + 13 * b - 196)
        - 128 * PI**2 * (-29 * b + 302 + 5 * a * (a + 3 * b + 7))
        - 2048 * (a + 3 * (b + 6))
        - 9 * PI**7 * (a - 1) * a
        + 128 * PI**3 * (a + 16) * a
        + 2048 * PI * a
        + 36 * PI**6 * (2 * a - 1)
    )


def _z1_poly(a, b):
    return (
        128 * PI**2 * (a * (5 * a - 9 * b + 7) - 21 * b + 14)
        - 16 * PI**4 * (a * (10 * a * (b - 4) + 13 * b + 89) - 11 * b - 119)
        + 2048 * (a - b)
        - 9 * PI**7 * (a - 1)
        - 18 * PI**6 * (5 * (a - 2) * a + 7)
        + 8 * PI**5 * (17 * a - 35)
        + 128 * PI**3 * (a + 16)
        + 2048 * PI
    )


def oracle_fixed_point(alpha: float, b: float = -5.0):
    """``((r0, z0), (R1, S1))`` of ``sigma = (r0, z0) + eps (R1, S1) + O(eps^2)``."""
    den = PI**2 * (alpha - 1) + 16
    if abs(den) < 1e-12:
        raise ValueError(f"alpha={alpha} is a pole of the fixed-point expansion")
    r0 = PI * (16 - PI**2) / den
    z0 = (PI**2 * (5 * alpha - 1) + 16) / den
    R1 = PI * _r1_poly(alpha, b) / (4 * KAPPA * den**2)
    S1 = _z1_poly(alpha, b) / (KAPPA * den**2)
    return np.array([r0, z0]), np.array([R1, S1])


@dataclass(frozen=True)
class NSOracle:
    a: float
    b_rate: float
    a_prime: float
    beta1: float
    ell11: float
    ell12: float
    frame: np.ndarray
    re_g20: float
    re_g11: float
    re_g02: float
    re_g21: float


def oracle_ns(params: Pwl3dParams) -> NSOracle:
    """Closed-form Neimark-Sacker data as printed for the example.

    ``beta1`` is the coefficient of the stated first-order critical curve
    ``beta(eps) = beta1 * eps``; ``frame`` is the first-order normalizing
    matrix ``L0 + eps L1`` evaluated at ``params.epsilon``.
    """
    al, b, e = params.alpha, params.b, params.epsilon
    L0 = np.array([[-PI / 2, -SQ / 2], [2.0, 0.0]])
    L1 = np.array([
        [-16 * PI * b / KAPPA - PI**2 / 4 + PI + 2, SQ * (-16 * b - (PI - 4) * KAPPA) / (4 * KAPPA)],
        [0.0, 0.0],
    ])
    s2 = np.sqrt(2 / (16 - PI**2))
    return NSOracle(
        a=PI * al / 4,
        b_rate=np.sqrt(64 - PI**2 * (al - 2) ** 2) / 4,
        a_prime=PI / 4,
        beta1=-(24 * b / KAPPA - 1),
        ell11=0.0,
        ell12=-(PI**2 - 6) * b / (3 * PI * KAPPA),
        frame=L0 + e * L1,
        re_g20=-8 * s2 * b / KAPPA - 5 * PI * b / (np.sqrt(2) * KAPPA),
        re_g11=8 * s2 * b / KAPPA,
        re_g02=8 * s2 * b / KAPPA + 5 * PI * b / (np.sqrt(2) * KAPPA),
        re_g21=4 * b / (PI * KAPPA) - 2 * PI * b / (3 * KAPPA),
    )
