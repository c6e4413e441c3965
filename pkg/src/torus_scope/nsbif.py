"""Neimark-Sacker analysis of the near-identity time-T map.

Pipeline: fixed point ``sigma(alpha, eps)`` by Newton, eigenvalue pair of
``D P_T`` at ``sigma``, critical parameter ``beta(eps)`` with ``|lambda| = 1``,
a real frame ``L`` bringing the linear part to rotation-scaling form, the
normal-form coefficients ``g20, g11, g02, g21`` with ``q = p = (1, -i)/sqrt 2``,
``c1`` and ``l1 = Re(exp(-i theta) c1)``, and the eps-expansion of ``l1``.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.optimize import brentq

from .integrate import FlowError, Tolerances
from .melnikov import averaged_g1, delta2
from .model import ParameterPoint, PiecewiseSystem
from .tmap import DerivativeScheme, MapSample, derivatives_at, map_batch

__all__ = [
    "EigenData",
    "FixedPointCurve",
    "NSError",
    "NSReport",
    "Verdict",
    "c1_coefficient",
    "classify",
    "detect_order",
    "eigen_data",
    "eigen_rates",
    "find_fixed_point",
    "fixed_point_curve",
    "lyapunov_first",
    "lyapunov_from_tensors",
    "lyapunov_series",
    "normal_form_coefficients",
    "normalize_frame",
    "solve_beta",
]

log = logging.getLogger(__name__)

RESONANCE_TOL = 1e-6
Q = np.array([1.0, -1.0j]) / np.sqrt(2)

SUPERCRITICAL = "supercritical-attracting-curve"
SUBCRITICAL = "subcritical-repelling-curve"
INCONCLUSIVE = "inconclusive"


class NSError(RuntimeError):
    """Analysis failure: Newton divergence, real eigenvalues, missing bracket."""


# ------------------------------------------------------------ fixed points

def _map_and_jac(sys, x, p, tol):
    img, jac = map_batch(sys, np.asarray(x, dtype=float)[:, None], p, variational=True, tol=tol)
    return img[:, 0], jac[:, :, 0]


def _newton(fun, x, tol, max_iter, what):
    """Damped Newton for ``fun(x) -> (residual, jacobian)``."""
    x = np.asarray(x, dtype=float).copy()
    res, J = fun(x)
    norm = float(np.linalg.norm(res))
    for _ in range(max_iter):
        if norm <= tol:
            return x, norm
        try:
            dx = np.linalg.solve(J, -res)
        except np.linalg.LinAlgError as exc:
            raise NSError(f"{what}: singular Newton matrix") from exc
        lam = 1.0
        for _ in range(30):
            try:
                res_new, J_new = fun(x + lam * dx)
                norm_new = float(np.linalg.norm(res_new))
            except (FlowError, ValueError):
                norm_new = np.inf
            if norm_new < norm or norm_new <= tol:
                break
            lam *= 0.5
        else:
            raise NSError(f"{what}: Newton stalled at residual {norm:.3e}")
        x = x + lam * dx
        res, J, norm = res_new, J_new, norm_new
    if norm <= tol:
        return x, norm
    raise NSError(f"{what}: Newton did not converge in {max_iter} iterations (residual {norm:.3e})")


def _melnikov_jacobian(sys, x, alpha, order=1):
    f = averaged_g1 if order == 1 else delta2
    h = np.finfo(float).eps ** (1 / 3) * max(1.0, float(np.linalg.norm(x)))
    J = np.empty((sys.dim, sys.dim))
    for k in range(sys.dim):
        e = np.zeros(sys.dim)
        e[k] = h
        J[:, k] = (f(sys, x + e, alpha) - f(sys, x - e, alpha)) / (2 * h)
    return J


def delta1_zero(sys: PiecewiseSystem, guess, alpha: float, tol: float = 1e-12, max_iter: int = 50) -> np.ndarray:
    """Simple zero of ``Delta1(., alpha)`` near ``guess``."""
    def fun(x):
        return averaged_g1(sys, x, alpha), _melnikov_jacobian(sys, x, alpha)

    x, _ = _newton(fun, guess, tol, max_iter, "Delta1 zero")
    return x


def find_fixed_point(sys: PiecewiseSystem, guess, p: ParameterPoint, *, tol: float = 1e-11,
                     max_iter: int = 50, integ: Tolerances = Tolerances()) -> np.ndarray:
    """Fixed point of ``P_T`` near ``guess``; at ``eps = 0`` the ``Delta1`` zero."""
    if p.epsilon == 0.0:
        return delta1_zero(sys, guess, p.alpha)
    eye = np.eye(sys.dim)

    def fun(x):
        img, J = _map_and_jac(sys, x, p, integ)
        return img - x, J - eye

    x, _ = _newton(fun, guess, tol, max_iter, "fixed point")
    return x


@dataclass
class FixedPointCurve:
    alpha_grid: list
    points: list
    newton_residuals: list


def fixed_point_curve(sys: PiecewiseSystem, guess, alphas: Sequence[float], epsilon: float,
                      integ: Tolerances = Tolerances()) -> FixedPointCurve:
    pts, res = [], []
    x = np.asarray(guess, dtype=float)
    for a in alphas:
        p = ParameterPoint(float(a), epsilon)
        x = find_fixed_point(sys, x, p, integ=integ)
        img, _ = _map_and_jac(sys, x, p, integ)
        pts.append(x.copy())
        res.append(float(np.linalg.norm(img - x)))
    return FixedPointCurve(list(map(float, alphas)), pts, res)


def detect_order(sys: PiecewiseSystem, center, alpha: float, radius: float = 0.5, threshold: float = 1e-8) -> int:
    """Leading Melnikov order: 1 when ``Delta1`` is not identically zero nearby."""
    center = np.asarray(center, dtype=float)
    rng = np.random.default_rng(0)
    probes = [center] + [center + radius * rng.uniform(-1, 1, sys.dim) for _ in range(4)]
    return 1 if max(np.linalg.norm(averaged_g1(sys, x, alpha)) for x in probes) > threshold else 2


# ----------------------------------------------------------- eigen-structure

@dataclass
class EigenData:
    lam: complex
    rho: float
    theta_eps: float
    resonance_flags: list
    a_of_alpha: float | None = None
    b_of_alpha: float | None = None

    @property
    def resonant(self) -> bool:
        return any(self.resonance_flags)


def _complex_pair(J: np.ndarray) -> complex:
    tr = np.trace(J)
    det = np.linalg.det(J)
    disc = tr**2 - 4 * det
    if disc >= 0:
        raise NSError(f"real eigenvalue pair (discriminant {disc:.3e} >= 0)")
    return complex(tr / 2, np.sqrt(-disc) / 2)


def eigen_data(J: np.ndarray, epsilon: float, r: int = 1) -> EigenData:
    lam = _complex_pair(J)
    rho = (abs(lam) ** 2 - 1) / epsilon**r if epsilon else float("nan")
    theta = float(np.angle(lam))
    flags = [bool(abs(np.exp(1j * k * theta) - 1) < RESONANCE_TOL) for k in range(1, 5)]
    return EigenData(lam, float(rho), theta, flags)


def eigen_rates(sys: PiecewiseSystem, guess, alphas: Sequence[float], eps_grid=(4e-3, 2e-3, 1e-3),
                r: int = 1, integ: Tolerances = Tolerances()):
    """Leading rates ``a(alpha) + i b(alpha)`` of ``(lambda - 1)/eps^r`` as ``eps -> 0``.

    Linear Richardson extrapolation over ``eps_grid``; returns
    ``(alphas, a, b, a_prime)`` with ``a_prime`` the central difference of
    ``a`` at the middle alpha.
    """
    a_vals, b_vals = [], []
    x = np.asarray(guess, dtype=float)
    for al in alphas:
        rates = []
        xe = x
        for e in eps_grid:
            p = ParameterPoint(float(al), e)
            xe = find_fixed_point(sys, xe, p, integ=integ)
            _, J = _map_and_jac(sys, xe, p, integ)
            rates.append((_complex_pair(J) - 1) / e**r)
        e = np.asarray(eps_grid, dtype=float)
        V = np.vstack([np.ones_like(e), e]).T
        coef = np.linalg.lstsq(V, np.asarray(rates), rcond=None)[0]
        a_vals.append(float(coef[0].real))
        b_vals.append(float(coef[0].imag))
        x = xe
    al = np.asarray(alphas, dtype=float)
    mid = len(al) // 2
    if len(al) >= 3:
        a_prime = (a_vals[mid + 1] - a_vals[mid - 1]) / (al[mid + 1] - al[mid - 1])
    elif len(al) == 2:
        a_prime = (a_vals[1] - a_vals[0]) / (al[1] - al[0])
    else:
        a_prime = float("nan")
    return al, np.array(a_vals), np.array(b_vals), float(a_prime)


class _FixedPointTracker:
    """Caches fixed points along alpha so root solves warm-start Newton."""

    def __init__(self, sys, guess, epsilon, integ):
        self.sys, self.eps, self.integ = sys, epsilon, integ
        self.known: dict[float, np.ndarray] = {}
        self.seed = np.asarray(guess, dtype=float)

    def __call__(self, alpha: float):
        if alpha in self.known:
            x = self.known[alpha]
        else:
            near = min(self.known, key=lambda a: abs(a - alpha)) if self.known else None
            start = self.known[near] if near is not None else self.seed
            x = find_fixed_point(self.sys, start, ParameterPoint(alpha, self.eps), integ=self.integ)
            self.known[alpha] = x
        _, J = _map_and_jac(self.sys, x, ParameterPoint(alpha, self.eps), self.integ)
        return x, J


def solve_beta(sys: PiecewiseSystem, eps: float, alpha0: float = 0.0, guess=None, *,
               width: float | None = None, r: int = 1, a_prime: float | None = None,
               integ: Tolerances = Tolerances(), tracker=None):
    """Critical parameter ``beta(eps)`` where ``|lambda(beta, eps)| = 1``.

    The bracket around ``alpha0`` is widened geometrically until the modulus
    defect changes sign.  Returns ``(beta, sigma, jacobian, info)``.
    """
    if eps == 0.0:
        raise NSError("beta(eps) is undefined at eps = 0")
    if guess is None:
        raise ValueError("a fixed-point guess is required")
    track = tracker or _FixedPointTracker(sys, guess, eps, integ)
    info = {"degenerate_transversality": False}
    scale = eps**r
    if a_prime is not None and abs(a_prime) < 1e-8:
        # relaxed transversality: the eps^r term of rho is flat in alpha, so
        # the decision moves to the next coefficient
        scale = eps ** (r + 1)
        info["degenerate_transversality"] = True

    def defect(alpha):
        _, J = track(float(alpha))
        lam = _complex_pair(J)
        return (abs(lam) - 1.0) / scale

    w = width if width is not None else max(4 * abs(eps), 1e-3)
    lo_bound, hi_bound = (sys.domain.alpha_range if sys.domain else (-0.5, 0.5))
    f0 = defect(alpha0)
    lo = hi = alpha0
    flo = fhi = f0
    for _ in range(20):
        lo, hi = max(alpha0 - w, lo_bound), min(alpha0 + w, hi_bound)
        flo, fhi = defect(lo), defect(hi)
        if np.sign(flo) != np.sign(fhi):
            break
        if lo == lo_bound and hi == hi_bound:
            raise NSError("no sign change of |lambda| - 1 inside the parameter box")
        w *= 2
    else:
        raise NSError("no sign change of |lambda| - 1 found")
    # narrow the bracket around alpha0 before the final solve
    if np.sign(f0) != np.sign(flo):
        hi, fhi = alpha0, f0
    elif np.sign(f0) != np.sign(fhi):
        lo, flo = alpha0, f0
    beta = brentq(defect, lo, hi, xtol=1e-15, rtol=4 * np.finfo(float).eps, maxiter=200)
    sigma, J = track(beta)
    info["modulus_defect"] = float(abs(abs(_complex_pair(J)) - 1.0))
    info["bracket"] = (float(lo), float(hi))
    return float(beta), sigma, J, info


# ------------------------------------------------------------- normal form

def normalize_frame(J: np.ndarray, convention: str = "unit") -> np.ndarray:
    """Real ``L`` with ``L^-1 J L = [[Re lam, -Im lam], [Im lam, Re lam]]``, ``Im lam > 0``.

    ``L = s [Re v, -Im v]`` for an eigenvector ``v`` of ``lam``.  Under the
    ``"unit"`` convention the complex vector ``L q`` has unit length, which
    makes ``l1`` the frame-free first Lyapunov coefficient of the map.
    ``"last"`` scales ``v`` so its last entry is 2 (``|L q|`` is then not
    fixed); ``"raw"`` keeps numpy's unit eigenvector.
    """
    w, V = np.linalg.eig(J)
    if np.all(np.abs(w.imag) == 0):
        raise NSError("normalize_frame needs a complex eigenvalue pair")
    k = int(np.argmax(w.imag))
    v = V[:, k]
    if convention == "unit":
        v = v / np.linalg.norm(v) * np.sqrt(2)
    elif convention == "last":
        v = 2 * v / v[-1]
    elif convention != "raw":
        raise ValueError(f"unknown frame convention {convention!r}")
    # fix the rotation gauge: make the first component of v real and positive
    # unless the convention already pinned it
    if convention == "unit":
        v = v * np.exp(-1j * np.angle(v[0]))
    return np.column_stack([v.real, -v.imag])


def normal_form_coefficients(sample: MapSample, phase: float = 0.0):
    """``g20, g11, g02, g21`` in a frame where the linear part is rotation-scaling."""
    q = Q * np.exp(1j * phase)
    p = q  # adjoint eigenvector coincides with q in this frame; <p, q> = 1
    B = sample.bilinear
    C = sample.trilinear

    def Bf(u, v):
        return np.einsum("ijk,j,k->i", B, u, v)

    def Cf(u, v, w):
        return np.einsum("ijkl,j,k,l->i", C, u, v, w)

    qb = q.conj()
    g20 = complex(np.vdot(p, Bf(q, q)))
    g11 = complex(np.vdot(p, Bf(q, qb)))
    g02 = complex(np.vdot(p, Bf(qb, qb)))
    g21 = complex(np.vdot(p, Cf(q, q, qb)))
    return g20, g11, g02, g21


def c1_coefficient(lam: complex, g20, g11, g02, g21) -> complex:
    lb = np.conj(lam)
    return (
        g20 * g11 * (1 - 2 * lam) / (2 * (lam**2 - lam))
        + abs(g11) ** 2 / (1 - lb)
        + abs(g02) ** 2 / (2 * (lam**2 - lb))
        + g21 / 2
    )


def lyapunov_from_tensors(sample: MapSample, phase: float = 0.0):
    """``(l1 via c1, l1 via the expanded formula, coefficients, lam0)`` for a framed sample."""
    lam = _complex_pair(sample.jacobian)
    theta = float(np.angle(lam))
    lam0 = np.exp(1j * theta)
    g20, g11, g02, g21 = normal_form_coefficients(sample, phase)
    c1 = c1_coefficient(lam0, g20, g11, g02, g21)
    l1_c = float((np.exp(-1j * theta) * c1).real)
    l1_x = float(
        (np.exp(-1j * theta) * g21 / 2).real
        - ((1 - 2 * lam0) * np.exp(-2j * theta) / (2 * (1 - lam0)) * g20 * g11).real
        - 0.5 * abs(g11) ** 2
        - 0.25 * abs(g02) ** 2
    )
    return l1_c, l1_x, (g20, g11, g02, g21, c1), lam


# ------------------------------------------------------------------ report

@dataclass
class NSReport:
    epsilon: float
    order_r: int
    beta_eps: float
    sigma: np.ndarray
    lam: complex
    modulus_defect: float
    theta_eps: float
    resonance_flags: list
    normal_frame: np.ndarray
    frame_convention: str
    g20: complex
    g11: complex
    g02: complex
    g21: complex
    c1: complex
    ell1: float
    ell1_expanded: float
    transversality: float | None = None
    ell1_series: list | None = None
    verdict: str = INCONCLUSIVE
    notes: list = field(default_factory=list)

    def to_dict(self) -> dict:
        from dataclasses import asdict

        return asdict(self)


def lyapunov_first(sys: PiecewiseSystem, eps: float, guess, *, alpha0: float = 0.0, r: int | None = None,
                   frame: str = "unit", scheme: DerivativeScheme = DerivativeScheme(),
                   integ: Tolerances = Tolerances(), a_prime: float | None = None) -> NSReport:
    """Solve for ``beta(eps)`` and evaluate ``l1`` there."""
    if r is None:
        r = detect_order(sys, guess, alpha0)
    beta, sigma, J, info = solve_beta(sys, eps, alpha0, guess, r=r, integ=integ, a_prime=a_prime)
    p = ParameterPoint(beta, eps)
    sample = derivatives_at(sys, sigma, p, scheme, integ)
    L = normalize_frame(sample.jacobian, frame)
    framed = sample.in_frame(L)
    l1_c, l1_x, (g20, g11, g02, g21, c1), lam = lyapunov_from_tensors(framed)
    ed = eigen_data(sample.jacobian, eps, r)
    verdict = INCONCLUSIVE if ed.resonant else (SUBCRITICAL if l1_c > 0 else SUPERCRITICAL if l1_c < 0 else INCONCLUSIVE)
    notes = []
    if info.get("degenerate_transversality"):
        notes.append("transversality degenerate at order eps^r; root solved on the next coefficient")
    return NSReport(
        epsilon=eps, order_r=r, beta_eps=beta, sigma=sigma, lam=lam,
        modulus_defect=info["modulus_defect"], theta_eps=ed.theta_eps, resonance_flags=ed.resonance_flags,
        normal_frame=L, frame_convention=frame, g20=g20, g11=g11, g02=g02, g21=g21, c1=c1,
        ell1=l1_c, ell1_expanded=l1_x, transversality=a_prime, verdict=verdict, notes=notes,
    )


def lyapunov_series(sys: PiecewiseSystem, eps_grid: Sequence[float], guess, *, alpha0: float = 0.0,
                    frame: str = "unit", scheme: DerivativeScheme = DerivativeScheme(),
                    integ: Tolerances = Tolerances(), slack: int | None = None):
    """Fit ``l1(eps) ~ eps l11 + eps^2 l12 + eps^3 c3 + ...`` over ``eps_grid``.

    ``slack`` is the number of higher powers absorbed by the fit, by default
    ``len(eps_grid) - 3`` so one degree of freedom is left over.  A single
    slack term is not enough when the fixed point moves quickly with ``eps``.
    Returns ``(l11, l12, residual, reports)``; ``residual`` is the RMS misfit.
    """
    eps = np.asarray(sorted(eps_grid), dtype=float)
    if len(eps) < 4 or eps.max() / eps.min() < 3.9:
        raise NSError("lyapunov_series needs at least 4 eps values spanning a factor of ~4")
    reports = []
    x = np.asarray(guess, dtype=float)
    for e in eps:
        rep = lyapunov_first(sys, float(e), x, alpha0=alpha0, frame=frame, scheme=scheme, integ=integ)
        reports.append(rep)
        x = rep.sigma
    l1 = np.array([rep.ell1 for rep in reports])
    n_slack = len(eps) - 3 if slack is None else int(slack)
    if not 0 <= n_slack <= len(eps) - 2:
        raise NSError(f"slack={n_slack} leaves no room for the fit with {len(eps)} points")
    V = np.vstack([eps ** k for k in range(1, 3 + n_slack)]).T
    coef, *_ = np.linalg.lstsq(V, l1, rcond=None)
    resid = float(np.sqrt(np.mean((V @ coef - l1) ** 2)))
    return float(coef[0]), float(coef[1]), resid, reports


# ----------------------------------------------------------- classification

@dataclass(frozen=True)
class Verdict:
    verdict: str
    fixed_point: str
    curve: str | None
    leading_order: int | None
    leading_coefficient: float | None

    @property
    def curve_exists(self) -> bool:
        return self.curve is not None


def classify(ell1_coefficients: Sequence[float], beta: float, a_prime: float, alpha: float,
             noise: float = 1e-8, resonant: bool = False) -> Verdict:
    """Stability side information from ``sign((alpha - beta) a')`` and the leading ``l1`` term.

    ``ell1_coefficients`` lists ``(l11, l12, ...)``; the first one above
    ``noise`` in absolute value decides.
    """
    lead = None
    for s, c in enumerate(ell1_coefficients, start=1):
        if abs(c) > noise:
            lead = (s, float(c))
            break
    side = np.sign((alpha - beta) * a_prime)
    fp = "repelling" if side > 0 else "attracting" if side < 0 else "critical"
    if resonant or lead is None or not np.isfinite(a_prime) or a_prime == 0:
        return Verdict(INCONCLUSIVE, fp, None, None if lead is None else lead[0], None if lead is None else lead[1])
    s, c = lead
    verdict = SUPERCRITICAL if c < 0 else SUBCRITICAL
    curve = None
    if c < 0 and side > 0:
        curve = "attracting"
    elif c > 0 and side < 0:
        curve = "repelling"
    return Verdict(verdict, fp, curve, s, c)
