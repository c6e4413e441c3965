"""Piecewise-smooth T-periodic systems in standard perturbative form.

A system is ``x' = sum_i eps**i F_i(t, x; alpha) + eps**(k+1) R(t, x; alpha, eps)``
where each ``F_i`` and ``R`` switch between zone fields at the time sections
``t = theta_j(x; alpha)``, ``0 < theta_1 < ... < theta_n < T``.

Field evaluators are vectorised: ``t`` is a scalar or an array of shape
``(N,)`` and ``x`` has shape ``(dim,)`` or ``(dim, N)``; the result broadcasts
to ``(dim,)`` or ``(dim, N)``.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np

__all__ = [
    "BUILTIN_SYSTEMS",
    "BoundaryEvaluation",
    "CONFIG_HEADER",
    "ConfigError",
    "DomainBox",
    "ParameterPoint",
    "PiecewiseSystem",
    "SwitchingFunction",
    "LoadedConfig",
    "ZoneField",
    "affine_switcher",
    "field_at",
    "linear_zone",
    "load_config",
    "load_system",
    "stack_components",
]

FieldFn = Callable[..., np.ndarray]


class ConfigError(ValueError):
    """Malformed configuration text or an inconsistent system definition."""


class BoundaryEvaluation(ValueError):
    """Raised when a field is evaluated exactly on a switching section."""

    def __init__(self, index: int, t: float, theta: float):
        super().__init__(
            f"t={t!r} lies on switching section {index} (theta={theta!r}); caller must pick a side"
        )
        self.index = index
        self.t = t
        self.theta = theta


def stack_components(*components) -> np.ndarray:
    """Stack per-component expressions that may have mismatched shapes."""
    return np.stack(np.broadcast_arrays(*components))


@dataclass(frozen=True)
class ParameterPoint:
    alpha: float
    epsilon: float
    extras: Mapping[str, float] = field(default_factory=dict)

    def with_alpha(self, alpha: float) -> "ParameterPoint":
        return ParameterPoint(float(alpha), self.epsilon, dict(self.extras))

    def with_epsilon(self, epsilon: float) -> "ParameterPoint":
        return ParameterPoint(self.alpha, float(epsilon), dict(self.extras))


@dataclass(frozen=True)
class DomainBox:
    """Declared working box ``D x I x (-eps0, eps0)``."""

    lower: tuple[float, ...]
    upper: tuple[float, ...]
    alpha_range: tuple[float, float] = (-0.5, 0.5)
    eps0: float = 0.1

    def contains(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        lo = np.asarray(self.lower).reshape((-1,) + (1,) * (x.ndim - 1))
        hi = np.asarray(self.upper).reshape((-1,) + (1,) * (x.ndim - 1))
        return np.all((x > lo) & (x < hi), axis=0)

    def check_parameters(self, p: ParameterPoint) -> None:
        if not abs(p.epsilon) < self.eps0:
            raise ValueError(f"epsilon={p.epsilon} outside (-{self.eps0}, {self.eps0})")


@dataclass(frozen=True)
class ZoneField:
    """Coefficients ``F_1^j .. F_k^j`` of one zone plus an optional remainder.

    ``analytic`` marks evaluators that accept complex states, which lets the
    field Jacobian be taken by complex-step differentiation.
    """

    terms: tuple[FieldFn, ...]
    remainder: FieldFn | None = None
    jacobians: tuple[FieldFn | None, ...] | None = None
    analytic: bool = False

    def evaluate(self, t, x, alpha: float, eps: float) -> np.ndarray:
        x = np.asarray(x)
        out = None
        epow = 1.0
        for term in self.terms:
            epow *= eps
            if epow == 0.0:
                break
            val = epow * term(t, x, alpha)
            out = val if out is None else out + val
        if self.remainder is not None and eps != 0.0:
            val = eps ** (len(self.terms) + 1) * self.remainder(t, x, alpha, eps)
            out = val if out is None else out + val
        shape = (x.shape[0],) + np.broadcast_shapes(x.shape[1:], np.shape(t))
        if out is None:
            return np.zeros(shape, dtype=x.dtype)
        return np.broadcast_to(out, shape)


@dataclass(frozen=True)
class SwitchingFunction:
    """Time section ``theta(x; alpha)`` in ``[0, T)``.

    Constant sections carry ``constant`` and have an identically zero gradient.
    """

    fn: Callable[[np.ndarray, float], np.ndarray] | None = None
    constant: float | None = None
    gradient: Callable[[np.ndarray, float], np.ndarray] | None = None

    @classmethod
    def at(cls, value: float) -> "SwitchingFunction":
        return cls(constant=float(value))

    @property
    def is_constant(self) -> bool:
        return self.constant is not None

    def __call__(self, x, alpha: float):
        if self.constant is not None:
            x = np.asarray(x)
            return np.full(x.shape[1:], self.constant) if x.ndim > 1 else self.constant
        return self.fn(np.asarray(x), alpha)

    def grad(self, x, alpha: float, step: float | None = None) -> np.ndarray:
        """Gradient ``D_x theta`` (central differences unless supplied)."""
        x = np.asarray(x, dtype=float)
        if self.constant is not None:
            return np.zeros(x.shape[0])
        if self.gradient is not None:
            return np.asarray(self.gradient(x, alpha), dtype=float)
        h0 = np.finfo(float).eps ** (1 / 3) if step is None else step
        g = np.empty(x.shape[0])
        for k in range(x.shape[0]):
            h = h0 * max(1.0, abs(x[k]))
            e = np.zeros_like(x)
            e[k] = h
            g[k] = (self.fn(x + e, alpha) - self.fn(x - e, alpha)) / (2 * h)
        return g


@dataclass(frozen=True)
class PiecewiseSystem:
    """Immutable T-periodic piecewise-smooth vector field family."""

    period: float
    dim: int
    order: int
    zones: tuple[ZoneField, ...]
    switchers: tuple[SwitchingFunction, ...] = ()
    domain: DomainBox | None = None
    name: str = "custom"
    params: Mapping[str, float] = field(default_factory=dict)
    boundary_tol: float = 1e-12

    def __post_init__(self):
        if not self.period > 0:
            raise ConfigError(f"period must be positive, got {self.period}")
        if self.dim < 1 or self.order < 1:
            raise ConfigError("dim and order must be positive integers")
        if len(self.zones) != len(self.switchers) + 1:
            raise ConfigError(
                f"zone count ({len(self.zones)}) must equal switcher count + 1 ({len(self.switchers) + 1})"
            )
        for z in self.zones:
            if len(z.terms) > self.order:
                raise ConfigError("a zone carries more terms than the declared order")
        consts = [s.constant for s in self.switchers if s.is_constant]
        if len(consts) == len(self.switchers):
            c = np.asarray(consts, dtype=float)
            if np.any(c <= 0) or np.any(c >= self.period) or np.any(np.diff(c) <= 0):
                raise ConfigError("constant switching times must be strictly increasing inside (0, T)")
        if self.domain is None:
            object.__setattr__(
                self, "domain", DomainBox((-20.0,) * self.dim, (20.0,) * self.dim)
            )

    @property
    def n_switch(self) -> int:
        return len(self.switchers)

    @property
    def constant_switching(self) -> bool:
        return all(s.is_constant for s in self.switchers)

    def section_times(self, x, alpha: float) -> np.ndarray:
        """``[theta_1(x), ..., theta_n(x)]`` for a single state."""
        return np.array([float(s(x, alpha)) for s in self.switchers])

    def check_ordering(self, alpha: float, samples: np.ndarray) -> bool:
        """Verify ``theta_1 < ... < theta_n`` on sampled states of shape ``(dim, N)``."""
        if self.n_switch < 2:
            return True
        th = np.array([np.broadcast_to(s(samples, alpha), samples.shape[1:]) for s in self.switchers])
        return bool(np.all(np.diff(th, axis=0) > 0))

    def zone_index(self, t: float, x, alpha: float) -> int:
        """Zone active at time ``t`` (reduced mod T) for state ``x``.

        Raises :class:`BoundaryEvaluation` within ``boundary_tol * T`` of a section.
        """
        t = float(t) % self.period
        tol = self.boundary_tol * self.period
        j = 0
        for idx, s in enumerate(self.switchers):
            th = float(s(x, alpha))
            if abs(t - th) <= tol:
                raise BoundaryEvaluation(idx + 1, t, th)
            if t > th:
                j = idx + 1
        return j

    def zone_field(self, j: int, t, x, p: ParameterPoint) -> np.ndarray:
        return self.zones[j].evaluate(t, x, p.alpha, p.epsilon)

    def zone_jacobian(self, j: int, t, x, p: ParameterPoint) -> np.ndarray:
        """``D_x`` of the full zone field; ``x`` of shape ``(dim, N)`` gives ``(dim, dim, N)``."""
        zone = self.zones[j]
        x = np.asarray(x, dtype=float)
        squeeze = x.ndim == 1
        if squeeze:
            x = x[:, None]
        dim, n = x.shape
        if zone.jacobians is not None and all(jf is not None for jf in zone.jacobians) and zone.remainder is None:
            out = np.zeros((dim, dim, n))
            epow = 1.0
            for jf in zone.jacobians:
                epow *= p.epsilon
                out += epow * np.broadcast_to(jf(t, x, p.alpha), (dim, dim, n))
        elif zone.analytic:
            h = 1e-30
            out = np.empty((dim, dim, n))
            for k in range(dim):
                xc = x.astype(complex)
                xc[k] += 1j * h
                out[:, k, :] = zone.evaluate(t, xc, p.alpha, p.epsilon).imag / h
        else:
            out = np.empty((dim, dim, n))
            h0 = np.finfo(float).eps ** (1 / 3)
            for k in range(dim):
                h = h0 * np.maximum(1.0, np.abs(x[k]))
                xp = x.copy()
                xm = x.copy()
                xp[k] += h
                xm[k] -= h
                out[:, k, :] = (zone.evaluate(t, xp, p.alpha, p.epsilon) - zone.evaluate(t, xm, p.alpha, p.epsilon)) / (2 * h)
        return out[..., 0] if squeeze else out


def field_at(sys: PiecewiseSystem, t: float, x, p: ParameterPoint) -> np.ndarray:
    """Full right-hand side at ``(t, x)``; raises on a switching section."""
    x = np.asarray(x, dtype=float)
    j = sys.zone_index(t, x, p.alpha)
    return sys.zone_field(j, float(t) % sys.period, x, p)


def linear_zone(
    matrices: Sequence[np.ndarray],
    offsets: Sequence[np.ndarray] | None = None,
    alpha_matrices: Sequence[np.ndarray] | None = None,
    alpha_offsets: Sequence[np.ndarray] | None = None,
) -> ZoneField:
    """Zone whose order-``i`` term is ``(M_i + alpha*Ma_i) x + c_i + alpha*ca_i``."""
    k = len(matrices)
    dim = np.asarray(matrices[0]).shape[0]
    zero_m = np.zeros((dim, dim))
    zero_v = np.zeros(dim)
    offsets = offsets or [zero_v] * k
    alpha_matrices = alpha_matrices or [zero_m] * k
    alpha_offsets = alpha_offsets or [zero_v] * k

    def make(i):
        M = np.asarray(matrices[i], dtype=float)
        Ma = np.asarray(alpha_matrices[i], dtype=float)
        c = np.asarray(offsets[i], dtype=float)
        ca = np.asarray(alpha_offsets[i], dtype=float)

        def term(t, x, alpha):
            x = np.asarray(x)
            A = M + alpha * Ma
            b = (c + alpha * ca).reshape((-1,) + (1,) * (x.ndim - 1))
            out = np.tensordot(A, x, axes=1) + b
            if np.ndim(t) and x.ndim == 1:
                out = np.broadcast_to(out[:, None], (dim, np.size(t)))
            return out

        def jac(t, x, alpha):
            return (M + alpha * Ma)[:, :, None]

        return term, jac

    made = [make(i) for i in range(k)]
    return ZoneField(
        terms=tuple(m[0] for m in made),
        jacobians=tuple(m[1] for m in made),
        analytic=True,
    )


def affine_switcher(c0: float, gradient, alpha_coeff: float = 0.0) -> SwitchingFunction:
    """``theta(x; alpha) = c0 + alpha_coeff*alpha + gradient . x``."""
    g = np.asarray(gradient, dtype=float)
    if not np.any(g) and alpha_coeff == 0.0:
        return SwitchingFunction.at(c0)

    def fn(x, alpha):
        return c0 + alpha_coeff * alpha + np.tensordot(g, x, axes=1)

    return SwitchingFunction(fn=fn, gradient=lambda x, alpha: g)


# ------------------------------------------------------------------ config

CONFIG_HEADER = "torus-scope-config v1"
BUILTIN_SYSTEMS = ("pwl3d", "pwl3d-cartesian")


@dataclass(frozen=True)
class LoadedConfig:
    """Everything a config file declares: the system, a parameter point and knobs."""

    system: PiecewiseSystem
    parameters: ParameterPoint
    settings: Mapping[str, Mapping[str, str]]
    builtin: str | None = None

    def get(self, section: str, key: str, default=None, kind=float):
        raw = self.settings.get(section, {}).get(key)
        if raw is None:
            return default
        try:
            return kind(raw)
        except ValueError as exc:
            raise ConfigError(f"[{section}] {key} = {raw!r} is not a valid {kind.__name__}") from exc


def _number(token: str) -> float:
    tok = token.strip().lower().replace(" ", "")
    try:
        return float(tok)
    except ValueError:
        pass
    # the only symbol accepted is pi, optionally scaled: pi, 2*pi, pi/2, -pi
    sign = -1.0 if tok.startswith("-") else 1.0
    body = tok.lstrip("+-")
    try:
        if body == "pi":
            return sign * np.pi
        if body.endswith("*pi"):
            return sign * float(body[:-3]) * np.pi
        if body.startswith("pi/"):
            return sign * np.pi / float(body[3:])
    except ValueError:
        pass
    raise ConfigError(f"cannot parse number {token!r}")


def _vector(text: str) -> np.ndarray:
    return np.array([_number(t) for t in text.split()], dtype=float)


def _matrix(text: str, dim: int) -> np.ndarray:
    rows = [r for r in text.split(";")]
    M = np.array([_vector(r) for r in rows], dtype=float)
    if M.shape != (dim, dim):
        raise ConfigError(f"matrix {text!r} has shape {M.shape}, expected ({dim}, {dim})")
    return M


def _parse(text: str):
    import configparser

    lines = text.splitlines()
    body = [ln for ln in lines if ln.strip() and not ln.lstrip().startswith(("#", ";"))]
    if not body or body[0].strip() != CONFIG_HEADER:
        raise ConfigError(f"config must start with the header line {CONFIG_HEADER!r}")
    start = next(i for i, ln in enumerate(lines) if ln.strip() == CONFIG_HEADER)
    cp = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#",))
    cp.optionxform = str
    try:
        cp.read_string("\n".join(lines[start + 1:]))
    except configparser.Error as exc:
        raise ConfigError(f"config parse error: {exc}") from exc
    return {s: dict(cp[s]) for s in cp.sections()}


def _apply_overrides(settings: dict, overrides: Mapping[str, str], extra_sections=()) -> None:
    for key, value in overrides.items():
        if "." in key and key.split(".", 1)[0] in (*settings, *extra_sections, "domain"):
            section, name = key.split(".", 1)
        else:
            section = next((s for s in ("parameters", "system") if key in settings.get(s, {})), None)
            if section is None:
                if key in ("alpha", "epsilon"):
                    section = "parameters"
                elif key == "b" and settings.get("system", {}).get("name") in BUILTIN_SYSTEMS:
                    section = "system"
                else:
                    raise ConfigError(f"override {key!r} does not name a declared parameter")
            name = key
        settings.setdefault(section, {})[name] = str(value)


def _domain(settings: dict, dim: int, default: DomainBox | None) -> DomainBox:
    d = settings.get("domain", {})
    base = default or DomainBox((-20.0,) * dim, (20.0,) * dim)
    lower = tuple(_vector(d["lower"])) if "lower" in d else base.lower
    upper = tuple(_vector(d["upper"])) if "upper" in d else base.upper
    if len(lower) != dim or len(upper) != dim:
        raise ConfigError(f"domain bounds must have {dim} entries")
    if any(lo >= hi for lo, hi in zip(lower, upper)):
        raise ConfigError("domain lower bounds must be below upper bounds")
    alpha_range = tuple(_vector(d["alpha_range"])) if "alpha_range" in d else base.alpha_range
    eps0 = _number(d["eps0"]) if "eps0" in d else base.eps0
    return DomainBox(lower, upper, alpha_range, eps0)


def _custom_system(settings: dict) -> PiecewiseSystem:
    s = settings.get("system", {})
    try:
        period = _number(s.get("period", "2*pi"))
        dim = int(s["dim"])
        order = int(s.get("order", "1"))
    except KeyError as exc:
        raise ConfigError(f"[system] is missing {exc.args[0]!r}") from exc
    except ValueError as exc:
        raise ConfigError(f"[system] {exc}") from exc
    switchers = []
    times = s.get("switch_times", "").split()
    for tok in times:
        switchers.append(SwitchingFunction.at(_number(tok)))
    for name in sorted(k for k in settings if k.startswith("switch.")):
        sw = settings[name]
        switchers.append(affine_switcher(_number(sw.get("constant", "0")), _vector(sw.get("gradient", "0 " * dim)),
                                         _number(sw.get("alpha", "0"))))
    if times and len(switchers) > len(times):
        raise ConfigError("use either switch_times or [switch.N] sections, not both")
    zone_names = sorted((k for k in settings if k.startswith("zone.")), key=lambda k: int(k.split(".", 1)[1]))
    zones = []
    for zn in zone_names:
        z = settings[zn]
        mats, offs, amats, aoffs = [], [], [], []
        for i in range(1, order + 1):
            mats.append(_matrix(z[f"F{i}"], dim) if f"F{i}" in z else np.zeros((dim, dim)))
            offs.append(_vector(z[f"F{i}_offset"]) if f"F{i}_offset" in z else np.zeros(dim))
            amats.append(_matrix(z[f"F{i}_alpha"], dim) if f"F{i}_alpha" in z else np.zeros((dim, dim)))
            aoffs.append(_vector(z[f"F{i}_alpha_offset"]) if f"F{i}_alpha_offset" in z else np.zeros(dim))
        for v in offs + aoffs:
            if v.shape != (dim,):
                raise ConfigError(f"[{zn}] offset vectors need {dim} entries")
        zones.append(linear_zone(mats, offs, amats, aoffs))
    return PiecewiseSystem(
        period=period, dim=dim, order=order, zones=tuple(zones), switchers=tuple(switchers),
        domain=_domain(settings, dim, None), name=s.get("name", "custom"),
    )


def load_config(text: str, overrides: Mapping[str, str] | None = None, extra_sections=()) -> LoadedConfig:
    """Parse ``torus-scope-config v1`` text.

    Sections: ``[system]`` (``name`` of a built-in plus ``b``, or ``period``,
    ``dim``, ``order``, ``switch_times``), ``[parameters]`` (``alpha``,
    ``epsilon``), optional ``[domain]`` and, for custom systems,
    ``[zone.0] .. [zone.n]`` holding ``F1``, ``F1_offset``, ``F1_alpha``,
    ``F1_alpha_offset`` (and likewise ``F2`` ...) with matrices written
    ``"a b; c d"``.  Affine state-dependent sections go in ``[switch.N]``
    with ``constant``, ``gradient`` and ``alpha``.  ``overrides`` maps
    ``section.key`` (or a bare parameter name) to replacement text;
    ``extra_sections`` lists sections an override may create.
    """
    settings = _parse(text)
    if overrides:
        _apply_overrides(settings, overrides, extra_sections)
    s = settings.get("system")
    if s is None:
        raise ConfigError("config has no [system] section")
    name = s.get("name", "custom")
    builtin = None
    if name in BUILTIN_SYSTEMS:
        from . import pwl3d

        b = _number(s.get("b", "-5"))
        if b == 0:
            raise ConfigError("b must be nonzero")
        delta = None
        if "b_minus_delta" in s:
            delta = _vector(s["b_minus_delta"]).reshape(3, 3)
        base = pwl3d.reduced_system(b, delta) if name == "pwl3d" else pwl3d.cartesian_reduced_system(b, delta)
        sys = PiecewiseSystem(
            period=base.period, dim=base.dim, order=base.order, zones=base.zones, switchers=base.switchers,
            domain=_domain(settings, 2, base.domain), name=base.name, params=base.params,
        )
        builtin = name
    elif name == "custom" or "dim" in s:
        sys = _custom_system(settings)
    else:
        raise ConfigError(f"unknown system name {name!r}; built-ins are {', '.join(BUILTIN_SYSTEMS)}")
    prm = settings.get("parameters", {})
    p = ParameterPoint(_number(prm.get("alpha", "0")), _number(prm.get("epsilon", "0")), dict(sys.params))
    return LoadedConfig(sys, p, settings, builtin)


def load_system(text: str, overrides: Mapping[str, str] | None = None) -> PiecewiseSystem:
    return load_config(text, overrides).system
