"""Invariant closed curves of the time-T map (sections of limit tori).

A curve around the fixed point ``sigma`` is written in frame coordinates
``y = L^-1 (x - sigma)`` as a radial Fourier series ``y = rho(phi) (cos phi, sin phi)``.
The ring is first relaxed by iterating the map (the inverse map for repelling
curves) with angle re-binning, then the invariance equation

    rho(angle(y_k)) - |y_k| = 0,   y_k = L^-1 (P(x_k) - sigma)

over the ring nodes is solved for the Fourier coefficients by Gauss-Newton
with variational Jacobians.  Iteration alone converges at the transverse
multiplier, which for weakly hyperbolic curves means thousands of sweeps.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial.distance import directed_hausdorff

from .integrate import FlowError, Tolerances
from .model import ParameterPoint, PiecewiseSystem
from .tmap import map_batch

__all__ = [
    "CurveError",
    "InvariantCurve",
    "StabilityEvidence",
    "find_curve",
    "fixed_point_probe",
    "hausdorff",
    "persistence_probe",
    "seed_radius_estimate",
    "stability_probe",
    "winding_number",
]

log = logging.getLogger(__name__)


class CurveError(RuntimeError):
    """No curve found: ring collapse, divergence or non-convergence."""

    def __init__(self, message: str, kind: str = "failure"):
        super().__init__(message)
        self.kind = kind


@dataclass
class InvariantCurve:
    center: np.ndarray
    frame: np.ndarray
    fourier: np.ndarray  # [a0, a1, b1, ..., aM, bM]
    angles: np.ndarray
    nodes: np.ndarray  # (N, dim) state coordinates
    residual: float
    stability: str
    rotation_number_estimate: float
    winding: int
    seed_radius: float
    sweeps: int
    newton_steps: int
    history: list = field(default_factory=list, repr=False)

    @property
    def modes(self) -> int:
        return (len(self.fourier) - 1) // 2

    def radius(self, phi) -> np.ndarray:
        return _series(self.fourier, phi)

    def sample(self, n: int = 1024) -> np.ndarray:
        phi = np.linspace(0, 2 * np.pi, n, endpoint=False)
        return _to_state(self.center, self.frame, self.radius(phi), phi).T

    def mean_radius(self) -> float:
        return float(self.fourier[0])


@dataclass
class StabilityEvidence:
    inner_rate: float
    outer_rate: float
    verdict: str
    consistent: bool | None
    iterations: int
    delta: float


# ------------------------------------------------------------ parametrisation

def _basis(phi, M):
    phi = np.atleast_1d(phi)
    cols = [np.ones_like(phi)]
    for m in range(1, M + 1):
        cols += [np.cos(m * phi), np.sin(m * phi)]
    return np.stack(cols, axis=-1)


def _dbasis(phi, M):
    phi = np.atleast_1d(phi)
    cols = [np.zeros_like(phi)]
    for m in range(1, M + 1):
        cols += [-m * np.sin(m * phi), m * np.cos(m * phi)]
    return np.stack(cols, axis=-1)


def _series(c, phi):
    M = (len(c) - 1) // 2
    return _basis(phi, M) @ c


def _to_state(center, L, rho, phi):
    y = np.vstack([rho * np.cos(phi), rho * np.sin(phi)])
    return center[:, None] + L @ y


def _fit(phi, rho, M):
    c, *_ = np.linalg.lstsq(_basis(phi, M), rho, rcond=None)
    return c


def winding_number(points, center) -> int:
    """Winding number of the closed polygon ``points`` (N, 2) about ``center``."""
    d = np.asarray(points)[:, :2] - np.asarray(center)[:2]
    ang = np.arctan2(d[:, 1], d[:, 0])
    steps = np.diff(np.concatenate([ang, ang[:1]]))
    steps = (steps + np.pi) % (2 * np.pi) - np.pi
    return int(np.rint(steps.sum() / (2 * np.pi)))


def hausdorff(A, B) -> float:
    A = np.asarray(A, dtype=float)
    B = np.asarray(B, dtype=float)
    return float(max(directed_hausdorff(A, B)[0], directed_hausdorff(B, A)[0]))


def seed_radius_estimate(lam_modulus: float, ell1: float) -> float:
    """Normal-form radius ``sqrt(2 (1 - |lambda|) / l1)`` in unit-frame coordinates.

    For ``z -> lambda z + c1 z|z|^2`` the invariant circle has
    ``|z|^2 = (1 - |lambda|)/l1``; with ``y = 2 Re(z q)`` and ``|q| = 1`` the
    frame radius is ``sqrt 2 |z|``.
    """
    val = (1.0 - lam_modulus) / ell1
    if not val > 0:
        raise CurveError("normal form predicts no curve on this side of the critical parameter", "no-curve")
    return float(np.sqrt(2 * val))


# -------------------------------------------------------------------- solver

class _RingMap:
    def __init__(self, sys, p, center, L, integ):
        self.sys, self.p, self.center, self.L, self.integ = sys, p, center, L, integ
        self.Li = np.linalg.inv(L)

    def images(self, rho, phi, inverse=False, variational=False):
        X = _to_state(self.center, self.L, rho, phi)
        try:
            imgs, jacs = map_batch(self.sys, X, self.p, inverse=inverse, variational=variational, tol=self.integ)
        except FlowError as exc:
            raise CurveError(f"ring left the domain: {exc}", "divergence") from exc
        Y = self.Li @ (imgs - self.center[:, None])
        return Y, jacs


def _sweep(ring: _RingMap, c, phi, M, inverse):
    rho = _series(c, phi)
    Y, _ = ring.images(rho, phi, inverse=inverse)
    psi = np.arctan2(Y[1], Y[0])
    return _fit(psi, np.hypot(Y[0], Y[1]), M)


def _gauss_newton_step(ring: _RingMap, c, phi, M):
    """Residuals and Jacobian of ``rho(angle(y_k)) - |y_k|`` w.r.t. the coefficients."""
    rho = _series(c, phi)
    Y, J = ring.images(rho, phi, variational=True)
    r2 = Y[0] ** 2 + Y[1] ** 2
    rad = np.sqrt(r2)
    psi = np.arctan2(Y[1], Y[0])
    res = _series(c, psi) - rad
    Bphi = _basis(phi, M)
    e = np.vstack([np.cos(phi), np.sin(phi)])
    # dy_k/dc = L^-1 J_k L e(phi_k) basis(phi_k)
    dir_k = np.einsum("ai,ijk,jb,bk->ak", ring.Li, J, ring.L, e)
    dpsi = (-Y[1] * dir_k[0] + Y[0] * dir_k[1]) / r2
    drad = (Y[0] * dir_k[0] + Y[1] * dir_k[1]) / rad
    slope = _dbasis(psi, M) @ c
    Jac = _basis(psi, M) + ((slope * dpsi - drad)[:, None]) * Bphi
    return res, Jac, Y, psi


def _node_residual(c, Y, psi, M):
    """Distance of each image to the fitted curve (radial error over the local normal)."""
    rho = _series(c, psi)
    slope = _dbasis(psi, M) @ c
    rad = np.hypot(Y[0], Y[1])
    return np.abs(rho - rad) * rho / np.sqrt(rho**2 + slope**2)


def find_curve(sys: PiecewiseSystem, p: ParameterPoint, center, frame, seed_radius: float, *,
               retries: int = 4, **kwargs) -> InvariantCurve:
    """Locate the invariant curve about ``center`` in the frame ``frame``.

    ``stability`` selects forward (attracting) or inverse (repelling)
    iteration for the relaxation sweeps; the Newton stage is direction-free.
    A seed whose ring leaves the domain is shrunk by 0.8 and a seed that
    collapses onto ``center`` is grown by 1.25 (never past a seed that
    diverged), up to ``retries`` extra attempts.
    """
    seed = float(seed_radius)
    too_big = np.inf
    attempts = []
    for _ in range(retries + 1):
        try:
            curve = _find_curve_once(sys, p, center, frame, seed, **kwargs)
        except CurveError as exc:
            attempts.append((seed, exc.kind))
            if exc.kind == "divergence":
                too_big = seed
                seed *= 0.8
            elif exc.kind == "collapse" and kwargs.get("seed_fourier") is None:
                seed = min(seed * 1.25, 0.5 * (seed + too_big))
            else:
                raise
            log.info("seed radius retry: %s", attempts[-1])
            continue
        curve.seed_radius = float(seed_radius)
        curve.history = [("attempt", s, k) for s, k in attempts] + curve.history
        return curve
    kind = attempts[-1][1]
    raise CurveError(f"no curve after {len(attempts)} seed radii {[round(s, 6) for s, _ in attempts]}", kind)


def _find_curve_once(sys: PiecewiseSystem, p: ParameterPoint, center, frame, seed_radius: float, *,
                     stability: str = "attracting", n_nodes: int = 128, modes: int = 16, tol: float = 1e-9,
                     max_sweeps: int = 10_000, warmup: int = 30, newton: bool = True, max_newton: int = 40,
                     residual_tol: float = 1e-6, collapse_radius: float = 1e-6, seed_fourier=None,
                     integ: Tolerances = Tolerances()) -> InvariantCurve:
    center = np.asarray(center, dtype=float)
    L = np.asarray(frame, dtype=float)
    if sys.dim != 2:
        raise ValueError("find_curve works on planar maps")
    if stability not in ("attracting", "repelling"):
        raise ValueError("stability must be 'attracting' or 'repelling'")
    # the ring equation always has the trivial solution rho = 0
    floor = max(collapse_radius, 1e-2 * seed_radius)
    M = modes
    phi = 2 * np.pi * np.arange(n_nodes) / n_nodes
    if seed_fourier is not None:
        c = np.zeros(2 * M + 1)
        sf = np.asarray(seed_fourier, dtype=float)[: 2 * M + 1]
        c[: len(sf)] = sf
    else:
        c = np.zeros(2 * M + 1)
        c[0] = seed_radius
    ring = _RingMap(sys, p, center, L, integ)
    inverse = stability == "repelling"
    history = []
    sweeps = 0
    change = np.inf
    n_relax = warmup if newton else max_sweeps
    while sweeps < n_relax:
        c_new = _sweep(ring, c, phi, M, inverse)
        sweeps += 1
        change = float(np.max(np.abs(_series(c_new, phi) - _series(c, phi))))
        c = c_new
        history.append(("sweep", change, float(c[0])))
        if c[0] < floor:
            raise CurveError(f"ring collapsed onto the fixed point (mean radius {c[0]:.3e})", "collapse")
        if change <= tol:
            break
    steps = 0
    if newton and change > tol:
        for steps in range(1, max_newton + 1):
            res, Jac, _, _ = _gauss_newton_step(ring, c, phi, M)
            dc, *_ = np.linalg.lstsq(Jac, -res, rcond=None)
            base = float(np.linalg.norm(res))
            lam = 1.0
            while lam > 1e-4:
                trial = c + lam * dc
                if trial[0] > floor:
                    try:
                        r_trial = _gauss_newton_step(ring, trial, phi, M)[0]
                        if np.linalg.norm(r_trial) <= base or lam < 1e-3:
                            break
                    except CurveError:
                        pass
                lam *= 0.5
            c = c + lam * dc
            change = float(np.max(np.abs(_series(lam * dc, phi))))
            history.append(("newton", change, float(c[0])))
            if c[0] < floor:
                raise CurveError("Newton iteration collapsed onto the fixed point", "collapse")
            if change <= tol:
                break
        else:
            raise CurveError(f"Newton polish did not converge (last change {change:.3e})", "no-convergence")
    elif change > tol:
        raise CurveError(f"ring did not converge in {sweeps} sweeps (last change {change:.3e})", "no-convergence")

    _, _, Y, psi = _gauss_newton_step(ring, c, phi, M)
    dist = _node_residual(c, Y, psi, M)
    residual = float(np.max(dist))
    rho = _series(c, phi)
    if np.min(rho) <= 0:
        raise CurveError("fitted radius is not positive; the curve does not enclose the fixed point", "shape")
    if float(c[0]) < floor:
        raise CurveError("curve radius vanished", "collapse")
    nodes = _to_state(center, L, rho, phi).T
    images = _to_state(center, L, np.hypot(Y[0], Y[1]), psi).T
    advance = (psi - phi + np.pi) % (2 * np.pi) - np.pi
    curve = InvariantCurve(
        center=center, frame=L, fourier=c, angles=phi, nodes=nodes, residual=residual,
        stability=stability, rotation_number_estimate=float(np.mean(advance) / (2 * np.pi)),
        winding=winding_number(images, center), seed_radius=float(seed_radius), sweeps=sweeps,
        newton_steps=steps, history=history,
    )
    if residual > residual_tol:
        log.warning("curve residual %.3e above tolerance %.1e", residual, residual_tol)
    return curve


# ------------------------------------------------------------------- probes

def _radial_offset(ring: _RingMap, c, Y):
    psi = np.arctan2(Y[1], Y[0])
    return np.hypot(Y[0], Y[1]) - _series(c, psi)


def stability_probe(sys: PiecewiseSystem, p: ParameterPoint, curve: InvariantCurve, *, delta: float = 1e-3,
                    iterations: int = 40, n_seeds: int = 8, expected: str | None = None,
                    integ: Tolerances = Tolerances()) -> StabilityEvidence:
    """Forward drift of seeds launched at radial offsets ``+-delta`` from the curve.

    Rates are mean per-iterate growth of ``log|offset|``; negative means the
    offsets shrink (attracting).  Iteration stops early when an offset
    exceeds ``max(100 delta, 0.1 * mean radius)``.
    """
    if delta == 0:
        return StabilityEvidence(0.0, 0.0, "inconclusive", None, 0, 0.0)
    ring = _RingMap(sys, p, curve.center, curve.frame, integ)
    phi = 2 * np.pi * (np.arange(n_seeds) + 0.5) / n_seeds
    rates = {}
    for sign, name in ((-1, "inner"), (1, "outer")):
        rho = curve.radius(phi) + sign * delta
        d0 = np.abs(sign * delta) * np.ones(n_seeds)
        Y = np.vstack([rho * np.cos(phi), rho * np.sin(phi)])
        # stop early once the offsets are no longer small, before a strongly
        # repelling curve throws the seeds out of the domain
        cap = max(100 * abs(delta), 0.1 * curve.mean_radius())
        for k in range(1, iterations + 1):
            Y, _ = ring.images(*_polar(Y), inverse=False)
            d = _radial_offset(ring, curve.fourier, Y)
            if np.any(np.sign(d) != sign) or np.max(np.abs(d)) > cap:
                break
        if np.any(np.sign(d) != sign):
            # crossed the curve: treat as strong attraction
            rates[name] = -np.inf
        else:
            rates[name] = float(np.mean(np.log(np.abs(d) / d0)) / k)
    inner, outer = rates["inner"], rates["outer"]
    noise = 1e-9
    if inner < -noise and outer < -noise:
        verdict = "attracting"
    elif inner > noise and outer > noise:
        verdict = "repelling"
    else:
        verdict = "inconclusive"
    consistent = None if expected is None else (verdict == expected)
    return StabilityEvidence(inner, outer, verdict, consistent, iterations, delta)


def fixed_point_probe(sys: PiecewiseSystem, p: ParameterPoint, center, frame, *, delta: float = 1e-3,
                      iterations: int = 40, n_seeds: int = 8, integ: Tolerances = Tolerances()) -> StabilityEvidence:
    """Forward drift of a small ring of radius ``delta`` about the fixed point.

    Only the mean log-radius growth is recorded (``inner_rate`` and
    ``outer_rate`` coincide); positive means the fixed point repels.
    """
    ring = _RingMap(sys, p, np.asarray(center, dtype=float), np.asarray(frame, dtype=float), integ)
    phi = 2 * np.pi * (np.arange(n_seeds) + 0.5) / n_seeds
    rho, ang = np.full(n_seeds, delta), phi
    for k in range(1, iterations + 1):
        Y, _ = ring.images(rho, ang)
        rho, ang = _polar(Y)
        if np.max(rho) > 100 * delta:
            break
    rate = float(np.mean(np.log(rho / delta)) / k)
    noise = 1e-9
    verdict = "repelling" if rate > noise else "attracting" if rate < -noise else "inconclusive"
    return StabilityEvidence(rate, rate, verdict, None, iterations, delta)


def _polar(Y):
    return np.hypot(Y[0], Y[1]), np.arctan2(Y[1], Y[0])


def persistence_probe(perturbed: PiecewiseSystem, p: ParameterPoint, curve: InvariantCurve, *,
                      center_guess=None, integ: Tolerances = Tolerances(), **kwargs):
    """Re-solve for the curve of a perturbed system, seeded from ``curve``.

    Returns ``(new_curve, hausdorff_shift)``.  A collapse raises
    :class:`CurveError` with ``kind="collapse"`` (the curve did not persist).
    """
    from .nsbif import find_fixed_point

    center = find_fixed_point(perturbed, curve.center if center_guess is None else center_guess, p, integ=integ)
    new = find_curve(perturbed, p, center, curve.frame, curve.mean_radius(), stability=curve.stability,
                     modes=curve.modes, n_nodes=len(curve.angles), seed_fourier=curve.fourier, warmup=0,
                     integ=integ, **kwargs)
    return new, hausdorff(curve.sample(), new.sample())
