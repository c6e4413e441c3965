"""The time-T map and its derivatives up to third order.

Two differencing schemes are offered for the bilinear/trilinear tensors:

* ``"jacobian"`` (default): central differences of the variational Jacobian,
  one derivative order lower than differencing map values.
* ``"stencil"``: central differences of the deviation ``g(x) = P(x) - x``.

Because the batched integrator shares one step sequence across a stencil,
both schemes differentiate a single smooth discrete map, so the usable steps
are set by round-off rather than by the integration tolerance.
"""
from __future__ import annotations

import itertools
import warnings
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .integrate import Tolerances, flow, flow_batch
from .model import ParameterPoint, PiecewiseSystem

__all__ = [
    "DerivativeScheme",
    "MapSample",
    "bilinear",
    "derivatives_at",
    "derivatives_of_map",
    "map_batch",
    "symmetrize",
    "time_t_map",
    "trilinear",
]

_EPS = np.finfo(float).eps


def time_t_map(sys: PiecewiseSystem, x, p: ParameterPoint, *, inverse: bool = False,
               tol: Tolerances = Tolerances()) -> np.ndarray:
    """``P_T(x) = phi(T, x)``; with ``inverse`` the backward flow from ``T`` to 0."""
    x = np.asarray(x, dtype=float)
    if inverse:
        return flow(sys, x, p, 0.0, t0=sys.period, tol=tol, keep_samples=False).end_state
    return flow(sys, x, p, sys.period, tol=tol, keep_samples=False).end_state


def map_batch(sys: PiecewiseSystem, X, p: ParameterPoint, *, inverse: bool = False,
              variational: bool = False, tol: Tolerances = Tolerances()):
    """Images of the columns of ``X`` (shape ``(dim, N)``) and optionally Jacobians."""
    X = np.asarray(X, dtype=float)
    t0, t1 = (sys.period, 0.0) if inverse else (0.0, sys.period)
    if sys.constant_switching:
        return flow_batch(sys, X, p, t1, t0=t0, variational=variational, tol=tol)
    imgs = np.empty_like(X)
    jacs = np.empty((X.shape[0], X.shape[0], X.shape[1])) if variational else None
    for k in range(X.shape[1]):
        tr = flow(sys, X[:, k], p, t1, t0=t0, tol=tol, variational=variational)
        imgs[:, k] = tr.end_state
        if variational:
            jacs[:, :, k] = tr.jacobian
    return imgs, jacs


@dataclass(frozen=True)
class DerivativeScheme:
    method: str = "jacobian"
    h2: float | None = None
    h3: float | None = None

    def steps(self, x) -> tuple[float, float]:
        scale = max(1.0, float(np.linalg.norm(x)))
        h2 = self.h2 if self.h2 is not None else _EPS ** 0.25 * scale
        h3 = self.h3 if self.h3 is not None else _EPS ** (1 / 6) * scale
        return h2, h3


@dataclass
class MapSample:
    """Map value and derivative tensors at a point.

    ``bilinear[i, j, k] = d2 P_i / dx_j dx_k`` and likewise for ``trilinear``.
    """

    point: np.ndarray
    image: np.ndarray
    jacobian: np.ndarray
    bilinear: np.ndarray
    trilinear: np.ndarray
    error_estimate: dict = field(default_factory=dict)

    def B(self, u, v):
        return bilinear(self.bilinear, u, v)

    def C(self, u, v, w):
        return trilinear(self.trilinear, u, v, w)

    def in_frame(self, L: np.ndarray) -> "MapSample":
        """Tensors of ``y -> L^-1 (P(c + L y) - c)`` at ``y = 0``, with ``c = point``."""
        Li = np.linalg.inv(L)
        J = Li @ self.jacobian @ L
        B = np.einsum("ai,ijk,jb,kc->abc", Li, self.bilinear, L, L)
        C = np.einsum("ai,ijkl,jb,kc,ld->abcd", Li, self.trilinear, L, L, L)
        return MapSample(np.zeros_like(self.point), Li @ (self.image - self.point), J, B, C,
                         dict(self.error_estimate))


def bilinear(B, u, v):
    return np.einsum("ijk,j,k->i", B, u, v)


def trilinear(C, u, v, w):
    return np.einsum("ijkl,j,k,l->i", C, u, v, w)


def symmetrize(T: np.ndarray) -> np.ndarray:
    """Average over permutations of all indices after the first."""
    axes = list(range(1, T.ndim))
    perms = list(itertools.permutations(axes))
    return sum(np.transpose(T, [0, *p]) for p in perms) / len(perms)


def _asymmetry(T: np.ndarray) -> float:
    return float(np.max(np.abs(T - symmetrize(T)))) if T.size else 0.0


BatchMap = Callable[[np.ndarray, bool], tuple]


def derivatives_of_map(batch: BatchMap, x, scheme: DerivativeScheme = DerivativeScheme(),
                       noise: float | None = None) -> MapSample:
    """Tensors for any batched map ``batch(X, variational) -> (images, jacobians)``.

    ``batch`` may return ``None`` jacobians when ``variational`` is false; with
    the ``"jacobian"`` scheme it must supply them.
    """
    x = np.asarray(x, dtype=float)
    d = x.size
    h2, h3 = scheme.steps(x)
    E = np.eye(d)
    if scheme.method == "jacobian":
        pts = [x]
        for k in range(d):
            pts += [x + h2 * E[k], x - h2 * E[k]]
        for k in range(d):
            pts += [x + h3 * E[k], x - h3 * E[k]]
        pairs = [(k, l) for k in range(d) for l in range(k + 1, d)]
        for k, l in pairs:
            for sk, sl in ((1, 1), (1, -1), (-1, 1), (-1, -1)):
                pts.append(x + h3 * (sk * E[k] + sl * E[l]))
        imgs, jacs = batch(np.stack(pts, axis=1), True)
        J0 = jacs[:, :, 0]
        B = np.empty((d, d, d))
        C = np.empty((d, d, d, d))
        for k in range(d):
            B[:, :, k] = (jacs[:, :, 1 + 2 * k] - jacs[:, :, 2 + 2 * k]) / (2 * h2)
        off = 1 + 2 * d
        for k in range(d):
            C[:, :, k, k] = (jacs[:, :, off + 2 * k] - 2 * J0 + jacs[:, :, off + 2 * k + 1]) / h3**2
        off2 = off + 2 * d
        for idx, (k, l) in enumerate(pairs):
            j = off2 + 4 * idx
            val = (jacs[:, :, j] - jacs[:, :, j + 1] - jacs[:, :, j + 2] + jacs[:, :, j + 3]) / (4 * h3**2)
            C[:, :, k, l] = val
            C[:, :, l, k] = val
        image = imgs[:, 0]
    elif scheme.method == "stencil":
        pts = [x]
        index = {}

        def add(offset):
            key = tuple(np.round(offset, 12))
            if key not in index:
                index[key] = len(pts)
                pts.append(x + offset)
            return index[key]

        # second differences with h2, third with h3 (mixed terms via polarisation)
        plan2 = {}
        for j in range(d):
            for k in range(j, d):
                plan2[j, k] = [add(h2 * (sj * E[j] + sk * E[k])) for sj, sk in ((1, 1), (1, -1), (-1, 1), (-1, -1))]
        plan3 = {}
        for j, k, l in itertools.combinations_with_replacement(range(d), 3):
            terms = []
            for sj, sk, sl in itertools.product((1, -1), repeat=3):
                terms.append((sj * sk * sl, add(h3 * (sj * E[j] + sk * E[k] + sl * E[l]))))
            plan3[j, k, l] = terms
        imgs, _ = batch(np.stack(pts, axis=1), False)
        G = imgs - np.stack(pts, axis=1)  # deviation g = P - id
        image = imgs[:, 0]
        B = np.empty((d, d, d))
        for (j, k), ids in plan2.items():
            val = (G[:, ids[0]] - G[:, ids[1]] - G[:, ids[2]] + G[:, ids[3]]) / (4 * h2**2)
            B[:, j, k] = val
            B[:, k, j] = val
        C = np.empty((d, d, d, d))
        for (j, k, l), terms in plan3.items():
            # sum over sign patterns of s_j s_k s_l g(x + h(s_j e_j + s_k e_k + s_l e_l)) = 8 h^3 D3 g[e_j, e_k, e_l] + O(h^5)
            val = sum(sg * G[:, i] for sg, i in terms) / (8 * h3**3)
            for perm in set(itertools.permutations((j, k, l))):
                C[:, perm[0], perm[1], perm[2]] = val
        jacs = batch(x[:, None], True)[1]
        J0 = jacs[:, :, 0] if jacs is not None else _central_jacobian(batch, x)
    else:
        raise ValueError(f"unknown derivative scheme {scheme.method!r}")
    err = {"bilinear_asymmetry": _asymmetry(B), "trilinear_asymmetry": _asymmetry(C), "h2": h2, "h3": h3}
    scale_B = max(float(np.max(np.abs(B))), 1e-300)
    if noise is not None and err["bilinear_asymmetry"] > 0.1 * scale_B and scale_B > noise:
        warnings.warn(
            f"bilinear tensor differencing is noisy (asymmetry {err['bilinear_asymmetry']:.2e})",
            RuntimeWarning,
            stacklevel=2,
        )
    return MapSample(x.copy(), image, J0, symmetrize(B), symmetrize(C), err)


def _central_jacobian(batch: BatchMap, x) -> np.ndarray:
    d = x.size
    h = _EPS ** (1 / 3) * max(1.0, float(np.linalg.norm(x)))
    pts = np.concatenate([x[:, None] + h * np.eye(d), x[:, None] - h * np.eye(d)], axis=1)
    imgs, _ = batch(pts, False)
    return (imgs[:, :d] - imgs[:, d:]) / (2 * h)


def derivatives_at(sys: PiecewiseSystem, x, p: ParameterPoint,
                   scheme: DerivativeScheme = DerivativeScheme(),
                   tol: Tolerances = Tolerances()) -> MapSample:
    """Jacobian, bilinear and trilinear forms of ``P_T`` at ``x``."""
    x = np.asarray(x, dtype=float)
    h2, h3 = scheme.steps(x)
    reach = max(h2, h3) * np.sqrt(2)
    lo = np.asarray(sys.domain.lower)
    hi = np.asarray(sys.domain.upper)
    if np.any(x - reach <= lo) or np.any(x + reach >= hi):
        raise ValueError("derivative stencil leaves the domain box")

    def batch(X, variational):
        return map_batch(sys, X, p, variational=variational, tol=tol)

    return derivatives_of_map(batch, x, scheme, noise=abs(p.epsilon) * 1e-8)
