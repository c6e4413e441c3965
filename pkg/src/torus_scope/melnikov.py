"""First- and second-order Melnikov (averaged) functions by quadrature.

``Delta1 = g1 = int_0^T F1`` and ``Delta2 = g2 + g2_jump`` where

    g2      = int_0^T [D_x F1(s, x) int_0^s F1(t, x) dt + F2(s, x)] ds
    g2_jump = sum_j (F1^{j-1} - F1^j)(theta_j, x) * (D_x theta_j . int_0^theta_j F1)

Every panel lies inside one zone, so the integrands are smooth and
Gauss-Legendre converges spectrally.
"""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .model import PiecewiseSystem

__all__ = [
    "MelnikovPair",
    "QuadratureError",
    "averaged_g1",
    "averaged_g2",
    "delta1",
    "delta2",
    "jump_correction_g2",
    "melnikov_pair",
    "write_grid_csv",
]

_NODES, _WEIGHTS = np.polynomial.legendre.leggauss(32)
_EPS = np.finfo(float).eps


class QuadratureError(RuntimeError):
    pass


@dataclass(frozen=True)
class MelnikovPair:
    delta1: np.ndarray
    delta2: np.ndarray
    g2_smooth: np.ndarray
    g2_jump: np.ndarray


def _gl(f, a: float, b: float) -> np.ndarray:
    half = 0.5 * (b - a)
    t = 0.5 * (a + b) + half * _NODES
    return half * (f(t) @ _WEIGHTS)


def _adaptive(f, a: float, b: float, tol: float = 1e-12, max_depth: int = 24) -> np.ndarray:
    """Gauss-Legendre with bisection until successive estimates agree."""
    whole = _gl(f, a, b)
    stack = [(a, b, whole, 0)]
    total = 0.0
    while stack:
        lo, hi, est, depth = stack.pop()
        mid = 0.5 * (lo + hi)
        left, right = _gl(f, lo, mid), _gl(f, mid, hi)
        refined = left + right
        if np.max(np.abs(refined - est)) <= tol * max(1.0, float(np.max(np.abs(refined)))):
            total = total + refined
        elif depth >= max_depth:
            raise QuadratureError(f"panel [{lo}, {hi}] did not converge")
        else:
            stack.append((lo, mid, left, depth + 1))
            stack.append((mid, hi, right, depth + 1))
    return np.asarray(total, dtype=float)


def _panels(sys: PiecewiseSystem, x, alpha: float):
    """``(zone, start, stop)`` over one period, split at the section times."""
    cuts = [0.0, *sys.section_times(x, alpha), sys.period]
    return [(j, cuts[j], cuts[j + 1]) for j in range(len(cuts) - 1)]


def _term(sys: PiecewiseSystem, j: int, order: int):
    terms = sys.zones[j].terms
    if len(terms) < order:
        return None
    return terms[order - 1]


def _term_values(sys, j, order, x, alpha):
    term = _term(sys, j, order)
    dim = sys.dim

    def f(t):
        if term is None:
            return np.zeros((dim, np.size(t)))
        return np.broadcast_to(term(t, x, alpha), (dim, np.size(t)))

    return f


def _term_jacobian(sys, j, x, alpha):
    """``t -> D_x F1^j(t, x)`` as an array ``(dim, dim, len(t))``."""
    term = _term(sys, j, 1)
    dim = sys.dim
    zone = sys.zones[j]
    if term is None:
        return lambda t: np.zeros((dim, dim, np.size(t)))
    if zone.jacobians is not None and zone.jacobians[0] is not None:
        jf = zone.jacobians[0]
        return lambda t: np.broadcast_to(jf(t, x[:, None], alpha), (dim, dim, np.size(t)))

    def jac(t):
        out = np.empty((dim, dim, np.size(t)))
        for k in range(dim):
            if zone.analytic:
                h = 1e-30
                xc = x.astype(complex)
                xc[k] += 1j * h
                out[:, k, :] = np.broadcast_to(term(t, xc, alpha), (dim, np.size(t))).imag / h
            else:
                h = _EPS ** (1 / 3) * max(1.0, abs(x[k]))
                xp, xm = x.copy(), x.copy()
                xp[k] += h
                xm[k] -= h
                out[:, k, :] = np.broadcast_to((term(t, xp, alpha) - term(t, xm, alpha)) / (2 * h), (dim, np.size(t)))
        return out

    return jac


def averaged_g1(sys: PiecewiseSystem, x, alpha: float, tol: float = 1e-12) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    total = np.zeros(sys.dim)
    for j, a, b in _panels(sys, x, alpha):
        if b > a:
            total = total + _adaptive(_term_values(sys, j, 1, x, alpha), a, b, tol)
    return total


def _prefix_integrals(sys, x, alpha, tol):
    """``int_0^{a_j} F1`` at the start of every panel."""
    out = []
    acc = np.zeros(sys.dim)
    for j, a, b in _panels(sys, x, alpha):
        out.append(acc.copy())
        if b > a:
            acc = acc + _adaptive(_term_values(sys, j, 1, x, alpha), a, b, tol)
    return out, acc


def averaged_g2(sys: PiecewiseSystem, x, alpha: float, tol: float = 1e-12) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    prefixes, _ = _prefix_integrals(sys, x, alpha, tol)
    total = np.zeros(sys.dim)
    for (j, a, b), y_a in zip(_panels(sys, x, alpha), prefixes):
        if b <= a:
            continue
        f1 = _term_values(sys, j, 1, x, alpha)
        f2 = _term_values(sys, j, 2, x, alpha)
        jac = _term_jacobian(sys, j, x, alpha)

        def integrand(s, f1=f1, f2=f2, jac=jac, a=a, y_a=y_a):
            s = np.atleast_1d(s)
            # inner antiderivative int_0^s F1 = y(a) + int_a^s F1, per node
            half = 0.5 * (s - a)
            nodes = 0.5 * (s + a)[None, :] + half[None, :] * _NODES[:, None]
            vals = f1(nodes.ravel()).reshape(sys.dim, len(_NODES), len(s))
            inner = y_a[:, None] + half[None, :] * np.einsum("dns,n->ds", vals, _WEIGHTS)
            return np.einsum("ijs,js->is", jac(s), inner) + f2(s)

        total = total + _adaptive(integrand, a, b, tol)
    return total


def jump_correction_g2(sys: PiecewiseSystem, x, alpha: float, tol: float = 1e-12) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    total = np.zeros(sys.dim)
    if sys.n_switch == 0 or sys.constant_switching:
        return total
    prefixes, _ = _prefix_integrals(sys, x, alpha, tol)
    theta = sys.section_times(x, alpha)
    for jj, sw in enumerate(sys.switchers):
        if sw.is_constant:
            continue
        th = theta[jj]
        grad = sw.grad(x, alpha)
        y_th = prefixes[jj + 1]  # int_0^{theta_j} F1 is the prefix of the next panel
        before = _term_values(sys, jj, 1, x, alpha)(np.array([th]))[:, 0]
        after = _term_values(sys, jj + 1, 1, x, alpha)(np.array([th]))[:, 0]
        total = total + (before - after) * float(grad @ y_th)
    return total


def melnikov_pair(sys: PiecewiseSystem, x, alpha: float, tol: float = 1e-12) -> MelnikovPair:
    g1 = averaged_g1(sys, x, alpha, tol)
    g2 = averaged_g2(sys, x, alpha, tol)
    gj = jump_correction_g2(sys, x, alpha, tol)
    return MelnikovPair(delta1=g1, delta2=g2 + gj, g2_smooth=g2, g2_jump=gj)


def delta1(sys: PiecewiseSystem, x, alpha: float) -> np.ndarray:
    return averaged_g1(sys, x, alpha)


def delta2(sys: PiecewiseSystem, x, alpha: float) -> np.ndarray:
    return averaged_g2(sys, x, alpha) + jump_correction_g2(sys, x, alpha)


def write_grid_csv(sys: PiecewiseSystem, points, alpha: float, path, meta: dict | None = None) -> Path:
    """One row per grid point: ``x..., Delta1..., Delta2..., g2_jump...``."""
    from .report import write_csv

    d = sys.dim
    cols = [f"x{i + 1}" for i in range(d)] + [f"delta1_{i + 1}" for i in range(d)]
    cols += [f"delta2_{i + 1}" for i in range(d)] + [f"g2_jump_{i + 1}" for i in range(d)]
    rows = []
    for x in points:
        m = melnikov_pair(sys, x, alpha)
        rows.append([*x, *m.delta1, *m.delta2, *m.g2_jump])
    meta = dict(meta or {})
    meta.setdefault("alpha", alpha)
    return write_csv(path, cols, rows, meta)
