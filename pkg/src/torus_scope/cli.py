"""``torus-scope`` command line: config in, deterministic CSV/JSON and figures out.

Exit status is 0 on success, 1 when an analysis step fails and 2 for
configuration errors; failures also print a one-line JSON object on stderr.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys as _sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from .curve import CurveError, find_curve, hausdorff, seed_radius_estimate, stability_probe
from .integrate import FlowError, Tolerances, flow
from .melnikov import QuadratureError, melnikov_pair
from .model import ConfigError, LoadedConfig, ParameterPoint, load_config
from .nsbif import (
    NSError,
    _complex_pair,
    classify,
    delta1_zero,
    eigen_rates,
    find_fixed_point,
    lyapunov_first,
    lyapunov_series,
    normalize_frame,
)
from .report import write_csv, write_json
from .tmap import map_batch

__all__ = ["COMMANDS", "RunManifest", "main", "run"]

COMMANDS = ("simulate", "section", "melnikov", "fixed-point", "ns-analyze", "curve", "sweep")
_INTEGRATOR_KEYS = ("rtol", "atol", "event_tol", "max_steps")
_DEFAULT_TOLS = {
    "rtol": 1e-10, "atol": 1e-10, "event_tol": 1e-12, "max_steps": 200_000,
    "fixed_point": 1e-11, "curve_change": 1e-9, "curve_residual": 1e-6,
}

log = logging.getLogger("torus_scope")


class AnalysisError(RuntimeError):
    pass


@dataclass
class RunManifest:
    command: str
    config_path: Path
    output_dir: Path
    overrides: dict = field(default_factory=dict)
    tolerances: dict = field(default_factory=dict)
    seed_radius: float | None = None
    backward: bool = False
    plots: bool = True
    jobs: int = 1

    def tol(self, name: str) -> float:
        return self.tolerances.get(name, _DEFAULT_TOLS[name])

    def integrator(self) -> Tolerances:
        kw = {k: self.tol(k) for k in _INTEGRATOR_KEYS}
        kw["max_steps"] = int(kw["max_steps"])
        return Tolerances(**kw)

    def all_tolerances(self) -> dict:
        return {k: self.tol(k) for k in _DEFAULT_TOLS}


# ---------------------------------------------------------------- helpers

def _floats(text) -> list[float]:
    from .model import _number

    return [_number(t) for t in str(text).replace(",", " ").split()]


def _opt(cfg: LoadedConfig, section: str, key: str, default):
    raw = cfg.settings.get(section, {}).get(key)
    if raw is None:
        return default
    if isinstance(default, list):
        return _floats(raw)
    if isinstance(default, bool):
        return raw.strip().lower() in ("1", "true", "yes", "on")
    if isinstance(default, int):
        return int(raw)
    return _floats(raw)[0]


def _meta(cfg: LoadedConfig, man: RunManifest, **extra) -> dict:
    meta = {
        "command": man.command,
        "system": cfg.system.name,
        "alpha": cfg.parameters.alpha,
        "epsilon": cfg.parameters.epsilon,
        "tolerances": man.all_tolerances(),
    }
    for k, v in sorted(cfg.system.params.items()):
        meta[k] = v
    meta.update(extra)
    return meta


def _guess_list(cfg: LoadedConfig, section: str) -> np.ndarray:
    """Fixed-point guess from ``[section] guess`` or ``[system] guess``, else a default."""
    raw = cfg.settings.get(section, {}).get("guess") or cfg.settings.get("system", {}).get("guess")
    if raw is not None:
        g = np.asarray(_floats(raw), dtype=float)
        if g.shape != (cfg.system.dim,):
            raise ConfigError(f"guess needs {cfg.system.dim} entries")
        return g
    if cfg.builtin:
        return np.array([np.pi, 1.0])
    return 0.5 * (np.asarray(cfg.system.domain.lower) + np.asarray(cfg.system.domain.upper))


def _fixed_point(cfg: LoadedConfig, man: RunManifest, p: ParameterPoint, guess):
    x0 = delta1_zero(cfg.system, guess, p.alpha)
    return find_fixed_point(cfg.system, x0, p, tol=man.tol("fixed_point"), integ=man.integrator())


# ---------------------------------------------------------------- commands

def cmd_simulate(cfg: LoadedConfig, man: RunManifest) -> dict:
    out = man.output_dir
    if cfg.builtin == "pwl3d-cartesian":
        from .pwl3d import REPELLING_TORUS_IC, Pwl3dParams, cartesian_simulate

        pr = Pwl3dParams(b=cfg.system.params["b"], alpha=cfg.parameters.alpha, epsilon=cfg.parameters.epsilon)
        u0 = _opt(cfg, "simulate", "initial", list(REPELLING_TORUS_IC))
        t_end = _opt(cfg, "simulate", "t_end", 10000.0)
        dt = _opt(cfg, "simulate", "dt", 0.05)
        rows = cartesian_simulate(pr, u0, t_end, dt)
        cols = ["t", "x", "y", "z"]
    else:
        sysm = cfg.system
        x = np.asarray(_opt(cfg, "simulate", "initial", list(_guess_list(cfg, "simulate"))), dtype=float)
        periods = _opt(cfg, "simulate", "periods", 10)
        integ = man.integrator()
        t0 = 0.0
        rows = [np.concatenate([[0.0], x])]
        for _ in range(periods):
            tr = flow(sysm, x, cfg.parameters, sysm.period, tol=integ)
            for t, s in zip(tr.times[1:], tr.states[1:]):
                rows.append(np.concatenate([[t0 + t], s]))
            x = tr.end_state
            t0 += sysm.period
        rows = np.array(rows)
        cols = ["t"] + [f"x{i + 1}" for i in range(sysm.dim)]
    files = [write_csv(out / "trajectory.csv", cols, rows, _meta(cfg, man))]
    if man.plots:
        from .plotting import plot_trajectory

        files.append(plot_trajectory(rows, out / "trajectory.png", labels=tuple(cols[1:])))
    return {"files": files, "rows": len(rows)}


def cmd_section(cfg: LoadedConfig, man: RunManifest) -> dict:
    out = man.output_dir
    if cfg.builtin == "pwl3d-cartesian":
        from .pwl3d import REPELLING_TORUS_IC, Pwl3dParams, cartesian_section

        pr = Pwl3dParams(b=cfg.system.params["b"], alpha=cfg.parameters.alpha, epsilon=cfg.parameters.epsilon)
        u0 = _opt(cfg, "section", "initial", list(REPELLING_TORUS_IC))
        hits = cartesian_section(pr, u0, _opt(cfg, "section", "t_end", 10000.0), _opt(cfg, "section", "dt", 0.05))
        cols = ["t", "x", "z"]
        pts = hits[:, 1:]
    else:
        sysm = cfg.system
        x = np.asarray(_opt(cfg, "section", "initial", list(_guess_list(cfg, "section"))), dtype=float)
        n = _opt(cfg, "section", "iterations", 500)
        direction = man.backward
        rows = [[0.0, *x]]
        for k in range(1, n + 1):
            img, _ = map_batch(sysm, x[:, None], cfg.parameters, inverse=direction, tol=man.integrator())
            x = img[:, 0]
            rows.append([float(-k if direction else k), *x])
        hits = np.array(rows)
        cols = ["iterate"] + [f"x{i + 1}" for i in range(sysm.dim)]
        pts = hits[:, 1:3]
    files = [write_csv(out / "section.csv", cols, hits, _meta(cfg, man, hits=len(hits)))]
    if man.plots:
        from .plotting import plot_section

        files.append(plot_section(pts, out / "section.png", labels=tuple(cols[1:3])))
    return {"files": files, "hits": len(hits)}


def cmd_melnikov(cfg: LoadedConfig, man: RunManifest) -> dict:
    sysm = cfg.system
    dom = sysm.domain
    default_lo = [1.0, -3.0] if cfg.builtin else list(np.asarray(dom.lower) / 2)
    default_hi = [6.0, 4.0] if cfg.builtin else list(np.asarray(dom.upper) / 2)
    lo = _opt(cfg, "melnikov", "lower", default_lo)
    hi = _opt(cfg, "melnikov", "upper", default_hi)
    n = _opt(cfg, "melnikov", "points", 7)
    if sysm.dim != len(lo):
        raise ConfigError(f"[melnikov] bounds need {sysm.dim} entries")
    axes = [np.linspace(a, b, n) for a, b in zip(lo, hi)]
    grid = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, sysm.dim)
    d = sysm.dim
    cols = [f"x{i + 1}" for i in range(d)] + [f"delta1_{i + 1}" for i in range(d)]
    cols += [f"delta2_{i + 1}" for i in range(d)] + [f"g2_jump_{i + 1}" for i in range(d)]
    rows, d1 = [], []
    for x in grid:
        m = melnikov_pair(sysm, x, cfg.parameters.alpha)
        rows.append([*x, *m.delta1, *m.delta2, *m.g2_jump])
        d1.append(m.delta1)
    files = [write_csv(man.output_dir / "melnikov.csv", cols, rows, _meta(cfg, man))]
    if man.plots and d == 2:
        from .plotting import plot_melnikov

        files.append(plot_melnikov(grid, np.array(d1), man.output_dir / "melnikov.png"))
    return {"files": files, "points": len(rows)}


def cmd_fixed_point(cfg: LoadedConfig, man: RunManifest) -> dict:
    sysm = cfg.system
    eps = cfg.parameters.epsilon
    a_lo, a_hi = _opt(cfg, "fixed-point", "alpha_range", [-0.25, 0.25])
    n = _opt(cfg, "fixed-point", "points", 11)
    alphas = np.linspace(a_lo, a_hi, n)
    x = _guess_list(cfg, "fixed-point")
    rows, pts = [], []
    integ = man.integrator()
    d = sysm.dim
    for a in alphas:
        p = ParameterPoint(float(a), eps)
        x = _fixed_point(cfg, man, p, x)
        img, J = map_batch(sysm, x[:, None], p, variational=True, tol=integ)
        ev = np.linalg.eigvals(J[:, :, 0])
        rows.append([a, *x, float(np.max(np.abs(ev))), float(np.linalg.norm(img[:, 0] - x))])
        pts.append(x.copy())
    cols = ["alpha"] + [f"x{i + 1}" for i in range(d)] + ["max_modulus", "residual"]
    files = [write_csv(man.output_dir / "fixed_points.csv", cols, rows, _meta(cfg, man))]
    if man.plots:
        from .plotting import plot_fixed_points

        files.append(plot_fixed_points(alphas, np.array(pts), man.output_dir / "fixed_points.png"))
    return {"files": files, "points": len(rows)}


def _ns_report(cfg: LoadedConfig, man: RunManifest, eps: float, guess) -> dict:
    sysm = cfg.system
    alpha = cfg.parameters.alpha
    integ = man.integrator()
    alpha0 = _opt(cfg, "ns-analyze", "alpha0", 0.0)
    x0 = delta1_zero(sysm, guess, alpha0)
    h = _opt(cfg, "ns-analyze", "rate_step", 0.01)
    al, a, b, a_prime = eigen_rates(sysm, x0, [alpha0 - h, alpha0, alpha0 + h], integ=integ)
    rep = lyapunov_first(sysm, eps, x0, alpha0=alpha0, integ=integ, a_prime=a_prime,
                         frame=cfg.settings.get("ns-analyze", {}).get("frame", "unit"))
    rep.ell1_series = None
    series = _opt(cfg, "ns-analyze", "series", [])
    coeffs = [rep.ell1 / eps**rep.order_r]
    fit = None
    if series:
        l11, l12, resid, reps = lyapunov_series(sysm, series, rep.sigma, alpha0=alpha0, integ=integ)
        fit = {"eps_grid": sorted(series), "ell11": l11, "ell12": l12, "rms_misfit": resid,
               "ell1_values": [r.ell1 for r in reps]}
        rep.ell1_series = [l11, l12]
        coeffs = [l11, l12]
    verdict = classify(coeffs, rep.beta_eps, a_prime, alpha, resonant=any(rep.resonance_flags))
    return {
        "report": rep,
        "eigen_rates": {"alphas": al, "a": a, "b": b, "a_prime": a_prime},
        "series_fit": fit,
        "classification": asdict(verdict) | {"alpha": alpha, "epsilon": eps},
        "verdict": verdict.verdict,
    }


def cmd_ns_analyze(cfg: LoadedConfig, man: RunManifest) -> dict:
    eps = cfg.parameters.epsilon
    if eps == 0:
        raise ConfigError("ns-analyze needs a nonzero epsilon")
    res = _ns_report(cfg, man, eps, _guess_list(cfg, "ns-analyze"))
    path = write_json(man.output_dir / "ns_report.json", _json_meta(cfg, man) | res, man.all_tolerances())
    return {"files": [path], "verdict": res["verdict"], "beta": res["report"].beta_eps}


def _json_meta(cfg, man):
    return {"command": man.command, "system": cfg.system.name, "system_params": dict(cfg.system.params),
            "alpha": cfg.parameters.alpha, "epsilon": cfg.parameters.epsilon}


def cmd_curve(cfg: LoadedConfig, man: RunManifest) -> dict:
    sysm = cfg.system
    p = cfg.parameters
    if p.epsilon == 0:
        raise ConfigError("curve needs a nonzero epsilon")
    integ = man.integrator()
    guess = _guess_list(cfg, "curve")
    sigma = _fixed_point(cfg, man, p, guess)
    _, J = map_batch(sysm, sigma[:, None], p, variational=True, tol=integ)
    J = J[:, :, 0]
    L = normalize_frame(J, "unit")
    modulus = abs(_complex_pair(J))
    seed_info = {}
    stability = cfg.settings.get("curve", {}).get("stability")
    seed = man.seed_radius or _opt(cfg, "curve", "seed_radius", None)
    if seed is None or (stability is None and not man.backward):
        res = _ns_report(cfg, man, p.epsilon, guess)
        ell1 = res["report"].ell1
        seed_info = {"ell1_at_beta": ell1, "beta": res["report"].beta_eps, "verdict": res["verdict"]}
        if seed is None:
            seed = seed_radius_estimate(modulus, ell1)
            seed_info["heuristic"] = "sqrt(2 (1 - |lambda|) / l1) in the unit frame"
        if stability is None:
            stability = "repelling" if ell1 > 0 else "attracting"
    if man.backward:
        stability = "repelling"
    if stability not in ("attracting", "repelling"):
        raise ConfigError(f"[curve] stability must be attracting or repelling, got {stability!r}")
    curve = find_curve(
        sysm, p, sigma, L, float(seed), stability=stability,
        n_nodes=_opt(cfg, "curve", "nodes", 128), modes=_opt(cfg, "curve", "modes", 16),
        tol=man.tol("curve_change"), residual_tol=man.tol("curve_residual"), integ=integ,
    )
    evidence = stability_probe(sysm, p, curve, expected=stability, iterations=_opt(cfg, "curve", "probe_iterations", 40),
                               integ=integ)
    out = man.output_dir
    rows = [[phi, *x] for phi, x in zip(curve.angles, curve.nodes)]
    cols = ["angle"] + [f"x{i + 1}" for i in range(sysm.dim)]
    files = [write_csv(out / "curve.csv", cols, rows, _meta(cfg, man, residual=curve.residual))]
    payload = _json_meta(cfg, man) | {
        "center": curve.center, "frame": curve.frame, "fourier": curve.fourier, "residual": curve.residual,
        "residual_ok": curve.residual <= man.tol("curve_residual"), "stability": curve.stability,
        "stability_probe": evidence, "winding": curve.winding,
        "rotation_number_estimate": curve.rotation_number_estimate, "seed_radius": float(seed),
        "seed": seed_info, "sweeps": curve.sweeps, "newton_steps": curve.newton_steps,
        "fixed_point_modulus": modulus,
    }
    hits = None
    if cfg.builtin == "pwl3d-cartesian" and _opt(cfg, "curve", "compare_section", True):
        from .pwl3d import REPELLING_TORUS_IC, Pwl3dParams, cartesian_section

        pr = Pwl3dParams(b=sysm.params["b"], alpha=p.alpha, epsilon=p.epsilon)
        u0 = _opt(cfg, "section", "initial", list(REPELLING_TORUS_IC))
        hits = cartesian_section(pr, u0, _opt(cfg, "section", "t_end", 10000.0))[:, 1:]
        payload["section_hausdorff"] = hausdorff(curve.sample(4096), hits)
    files.append(write_json(out / "curve.json", payload, man.all_tolerances()))
    if man.plots:
        from .plotting import plot_section

        files.append(plot_section(hits if hits is not None else curve.sample(512), out / "curve.png",
                                  curve=curve, sigma=sigma, labels=("x1", "x2")))
    return {"files": files, "residual": curve.residual, "stability": curve.stability}


def _sweep_block(cfg_text: str, man: RunManifest, b, eps, offsets, absolute, guess):
    over = dict(man.overrides)
    over["epsilon"] = str(eps)
    if b is not None:
        over["b"] = str(b)
    cfg = load_config(cfg_text, over, extra_sections=COMMANDS)
    sysm = cfg.system
    integ = man.integrator()
    x0 = delta1_zero(sysm, guess, 0.0)
    rep = lyapunov_first(sysm, eps, x0, integ=integ)
    beta = rep.beta_eps
    alphas = [beta + o for o in offsets] if not absolute else list(offsets)
    rows = []
    x = rep.sigma
    moduli = []
    for a in alphas:
        p = ParameterPoint(float(a), eps)
        x = find_fixed_point(sysm, x, p, tol=man.tol("fixed_point"), integ=integ)
        _, J = map_batch(sysm, x[:, None], p, variational=True, tol=integ)
        mod = abs(_complex_pair(J[:, :, 0]))
        moduli.append(mod)
        rows.append((a, x.copy(), mod))
    # finite-eps transversality from the modulus slope through beta
    slope = float(np.polyfit(alphas, moduli, 1)[0]) if len(alphas) > 1 else float("nan")
    out = []
    for a, x, mod in rows:
        v = classify([rep.ell1 / eps**rep.order_r], beta, slope, a, resonant=any(rep.resonance_flags))
        out.append([a, eps, sysm.params.get("b", float("nan")), beta, *x, mod, v.fixed_point,
                    v.curve or "none", v.verdict])
    return out, (alphas, moduli, beta)


def cmd_sweep(cfg: LoadedConfig, man: RunManifest) -> dict:
    text = man.config_path.read_text()
    eps_list = _opt(cfg, "sweep", "epsilon", [cfg.parameters.epsilon])
    b_list = _opt(cfg, "sweep", "b", [cfg.system.params["b"]] if cfg.builtin else [None])
    if "alpha" in cfg.settings.get("sweep", {}):
        offsets, absolute = _opt(cfg, "sweep", "alpha", []), True
    else:
        lo, hi = _opt(cfg, "sweep", "offset_range", [-0.05, 0.05])
        offsets, absolute = list(np.linspace(lo, hi, _opt(cfg, "sweep", "points", 11))), False
    if any(e == 0 for e in eps_list):
        raise ConfigError("sweep epsilon values must be nonzero")
    guess = _guess_list(cfg, "sweep")
    blocks = [(b, e) for b in b_list for e in eps_list]
    with ThreadPoolExecutor(max_workers=max(1, man.jobs)) as pool:
        futures = [pool.submit(_sweep_block, text, man, b, e, offsets, absolute, guess) for b, e in blocks]
        results = [f.result() for f in futures]
    rows = [r for block, _ in results for r in block]
    d = cfg.system.dim
    cols = ["alpha", "epsilon", "b", "beta"] + [f"x{i + 1}" for i in range(d)]
    cols += ["modulus", "fixed_point", "curve", "verdict"]
    files = [write_csv(man.output_dir / "sweep.csv", cols, rows, _meta(cfg, man))]
    if man.plots and len(results) == 1:
        from .plotting import plot_sweep

        alphas, moduli, beta = results[0][1]
        files.append(plot_sweep(alphas, moduli, beta, man.output_dir / "sweep.png"))
    return {"files": files, "rows": len(rows)}


_HANDLERS = {
    "simulate": cmd_simulate, "section": cmd_section, "melnikov": cmd_melnikov,
    "fixed-point": cmd_fixed_point, "ns-analyze": cmd_ns_analyze, "curve": cmd_curve, "sweep": cmd_sweep,
}


# ---------------------------------------------------------------- entry

def _pairs(items, what) -> dict:
    out = {}
    for item in items or []:
        if "=" not in item:
            raise ConfigError(f"{what} expects key=value, got {item!r}")
        k, v = item.split("=", 1)
        out[k.strip()] = v.strip()
    return out


def run(man: RunManifest) -> dict:
    """Execute one command; raises the underlying error on failure."""
    if man.command not in _HANDLERS:
        raise ConfigError(f"unknown command {man.command!r}")
    try:
        text = Path(man.config_path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {man.config_path}: {exc}") from exc
    cfg = load_config(text, man.overrides, extra_sections=COMMANDS)
    for name in man.tolerances:
        if name not in _DEFAULT_TOLS:
            raise ConfigError(f"unknown tolerance {name!r}; known: {', '.join(_DEFAULT_TOLS)}")
    try:
        cfg.system.domain.check_parameters(cfg.parameters)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    man.output_dir.mkdir(parents=True, exist_ok=True)
    return _HANDLERS[man.command](cfg, man)


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="torus-scope", description=__doc__.splitlines()[0])
    ap.add_argument("--version", action="version", version=f"torus-scope {__version__}")
    ap.add_argument("command", choices=COMMANDS)
    ap.add_argument("--config", required=True, type=Path, help="torus-scope-config v1 file")
    ap.add_argument("--out", default=Path("out"), type=Path, help="output directory")
    ap.add_argument("--set", dest="overrides", action="append", metavar="KEY=VALUE",
                    help="override a config value (section.key or a parameter name)")
    ap.add_argument("--tol", dest="tolerances", action="append", metavar="NAME=VALUE",
                    help=f"tolerance override; names: {', '.join(_DEFAULT_TOLS)}")
    ap.add_argument("--seed-radius", type=float, default=None, help="initial ring radius for `curve`")
    ap.add_argument("--backward", action="store_true", help="iterate the inverse map")
    ap.add_argument("--no-plots", action="store_true", help="skip figure rendering")
    ap.add_argument("--jobs", type=int, default=1, help="parallel parameter points in `sweep`")
    ap.add_argument("-v", "--verbose", action="store_true")
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        tols = {k: float(v) for k, v in _pairs(args.tolerances, "--tol").items()}
        man = RunManifest(args.command, args.config, args.out, _pairs(args.overrides, "--set"), tols,
                          args.seed_radius, args.backward, not args.no_plots, args.jobs)
        result = run(man)
    except ConfigError as exc:
        return _fail(2, "config", exc)
    except (ValueError, NSError, CurveError, FlowError, QuadratureError, AnalysisError, FloatingPointError, RuntimeError) as exc:
        return _fail(1, getattr(exc, "kind", "analysis"), exc)
    for f in result.get("files", []):
        print(f)
    return 0


def _fail(code: int, kind: str, exc: Exception) -> int:
    err = {"error": kind, "type": type(exc).__name__, "message": str(exc), "exit_code": code}
    print(json.dumps(err, sort_keys=True), file=_sys.stderr)
    return code


if __name__ == "__main__":  # pragma: no cover
    raise SystemExit(main())
