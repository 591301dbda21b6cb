"""Command-line pipeline: profile -> spectrum -> check -> green -> simulate -> report.

Every command reads one JSON run configuration and writes its artifacts into
the output directory.  Each artifact records the hash of the configuration
(and seed) that produced it, and downstream commands refuse inputs produced
under a different hash.

Exit codes: 0 ok, 2 a hypothesis or rate check computed and failed,
3 numerical failure (could not compute), 4 configuration or usage error.
"""
from __future__ import annotations

import argparse
import copy
import hashlib
import json
import logging
import os
import sys
from dataclasses import dataclass, field
from pathlib import Path

EXIT_OK, EXIT_FAIL, EXIT_NUMERIC, EXIT_CONFIG = 0, 2, 3, 4

logger = logging.getLogger("pwstab")

DEFAULTS = {
    "model": {"builtin": "pendulum"},
    "profile": {"center": [0.0, 0.0], "amplitude": 2.0, "m": 128, "s": 0.0},
    "spectrum": {"M": 32, "xi_count": 65, "eps": 0.1, "Xi": 3.0, "n_grid": 129, "count": 8},
    "green": {"times": [10, 20, 40, 80, 160, 320, 640, 1000], "eps": 0.2, "M": 16, "cells": None},
    "simulate": {"cells": 32, "points_per_cell": 64, "T": 100.0, "dt": None, "snapshot_every": 50,
                 "norm_every": 10, "transverse_points": 64, "transverse_length": None,
                 "perturbation": {"kind": "bump", "amplitude": 0.01}},
    "report": {"method": "projection", "window": None, "quantities": None, "theta": 0.1},
}


class ConfigError(ValueError):
    pass


class MissingArtifactError(ConfigError):
    pass


@dataclass
class RunConfig:
    """Fully serializable run description; merged over ``DEFAULTS``."""

    model: dict
    profile: dict
    spectrum: dict
    green: dict
    simulate: dict
    report: dict
    seed: int = 0
    extra: dict = field(default_factory=dict)

    @classmethod
    def from_dict(cls, doc: dict, seed: int | None = None) -> "RunConfig":
        if not isinstance(doc, dict):
            raise ConfigError("configuration must be a JSON object")
        unknown = set(doc) - set(DEFAULTS) - {"seed"}
        if unknown:
            raise ConfigError(f"unknown configuration sections: {sorted(unknown)}")
        merged = copy.deepcopy(DEFAULTS)
        for key, value in doc.items():
            if key == "seed":
                continue
            if not isinstance(value, dict):
                raise ConfigError(f"section {key!r} must be an object")
            if key == "model" or (key == "profile" and ({"file", "constant"} & set(value))):
                merged[key] = copy.deepcopy(value)
            else:
                merged[key].update(copy.deepcopy(value))
        s = int(doc.get("seed", 0) if seed is None else seed)
        if s < 0 or s >= 2 ** 64:
            raise ConfigError("seed must be an unsigned 64-bit integer")
        return cls(merged["model"], merged["profile"], merged["spectrum"], merged["green"],
                   merged["simulate"], merged["report"], s)

    def to_dict(self) -> dict:
        return {"model": self.model, "profile": self.profile, "spectrum": self.spectrum, "green": self.green,
                "simulate": self.simulate, "report": self.report, "seed": self.seed}

    def config_hash(self) -> str:
        text = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(text.encode()).hexdigest()[:16]


# -- artifact helpers --------------------------------------------------------

def _write_json(path: Path, doc: dict) -> None:
    path.write_text(json.dumps(doc, indent=2, sort_keys=True, default=_jsonable) + "\n")


def _jsonable(obj):
    import numpy as np

    if isinstance(obj, np.generic):
        return obj.item()
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, complex):
        return {"re": obj.real, "im": obj.imag}
    raise TypeError(f"cannot serialize {type(obj).__name__}")


def _read_artifact(out: Path, name: str, producer: str, cfg_hash: str) -> dict:
    path = out / name
    if not path.exists():
        raise MissingArtifactError(f"missing {path}; run `{producer}` with the same --config and --out first")
    doc = json.loads(path.read_text())
    if doc.get("config_hash") != cfg_hash:
        raise MissingArtifactError(
            f"{path} was produced under config hash {doc.get('config_hash')}, not {cfg_hash}; "
            f"rerun `{producer}`")
    return doc


def _prepend_hash(path: Path, cfg_hash: str) -> None:
    body = path.read_text()
    path.write_text(f"# config_hash={cfg_hash}\n" + body)


# -- commands ------------------------------------------------------------------

def _build_model(cfg: RunConfig):
    from .model import load_model

    return load_model(cfg.model)


def cmd_profile(cfg: RunConfig, out: Path) -> int:
    from .profile import WaveProfile, check_submersion, guess_from_center, load_profile, profile_to_dict, solve_profile

    model = _build_model(cfg)
    spec = cfg.profile
    if "file" in spec:
        prof = load_profile(spec["file"])
    elif "constant" in spec:
        prof = WaveProfile.constant(model, spec["constant"], m=int(spec.get("m", 16)), X=float(spec.get("X", 1.0)))
    else:
        guess, X = guess_from_center(model, spec["center"], float(spec["amplitude"]), m=int(spec.get("m", 128)),
                                     s=float(spec.get("s", 0.0)), nu=spec.get("nu"))
        prof = solve_profile(model, guess, X, s=float(spec.get("s", 0.0)), q=spec.get("q"), nu=spec.get("nu"),
                             amplitude=float(spec["amplitude"]), tol=float(spec.get("tol", 1e-10)))
    doc = profile_to_dict(prof)
    doc["config_hash"] = cfg.config_hash()
    if not prof.is_constant:
        try:
            doc["submersion"] = check_submersion(model, prof).to_dict()
        except Exception as exc:  # diagnostic only
            doc["submersion"] = {"error": str(exc)}
    _write_json(out / "profile.json", doc)
    print(f"profile: X = {prof.X:.12g}, residual = {prof.check_residual():.3e}")
    return EXIT_OK


def _load_profile(cfg: RunConfig, out: Path):
    from .profile import profile_from_dict

    doc = _read_artifact(out, "profile.json", "profile", cfg.config_hash())
    return profile_from_dict(doc)


def cmd_spectrum(cfg: RunConfig, out: Path) -> int:
    import numpy as np

    from .bloch import assemble, spectrum, write_spectrum_csv
    from .dispersion import angle_grid, build_cluster, continue_surfaces, whitham_report, write_dispersion_csv, \
        write_whitham_json

    prof = _load_profile(cfg, out)
    sp = cfg.spectrum
    M = int(sp["M"])
    xs = np.linspace(-np.pi, np.pi, int(sp["xi_count"]))
    d = prof.model.d
    slices = []
    for x in xs:
        xi = [x] if d == 1 else [x, 0.0]
        slices.append(spectrum(assemble(prof, xi, M), count=int(sp["count"])))
    path = out / "spectrum.csv"
    write_spectrum_csv(path, slices)
    _prepend_hash(path, cfg.config_hash())
    points = []
    for sl in slices:
        points.extend((complex(z).real, complex(z).imag) for z in sl.eigenvalues)
    svg_scatter(out / "spectrum.svg", points, "Bloch spectrum", "Re", "Im")
    if not prof.is_constant:
        clusters = [build_cluster(prof, M, om) for om in angle_grid(d, 8)]
        rep = whitham_report(clusters, prof)
        rep["config_hash"] = cfg.config_hash()
        write_whitham_json(out / "whitham.json", rep)
        surfaces = [continue_surfaces(cl, eps=float(sp["eps"])) for cl in clusters[:1]]
        dpath = out / "dispersion.csv"
        write_dispersion_csv(dpath, surfaces)
        _prepend_hash(dpath, cfg.config_hash())
    print(f"spectrum: {len(slices)} frequencies, top Re = {max(p[0] for p in points):.4g}")
    return EXIT_OK


def run_checks(prof, cfg: RunConfig) -> dict:
    """Verdicts for (H2), (H3), (D1), (D2), (D3); each has a status and a margin."""
    import numpy as np

    from .bloch import check_D1_D2, check_D3_semisimple
    from .dispersion import angle_grid, build_cluster, check_blochfacts
    from .profile import check_submersion

    sp = cfg.spectrum
    M = int(sp["M"])
    verdict = {}

    def guarded(name, fn):
        try:
            verdict[name] = fn()
        except Exception as exc:
            verdict[name] = {"status": "error", "message": f"{type(exc).__name__}: {exc}"}

    def d3():
        r = check_D3_semisimple(prof, M)
        status = "precondition_failed" if r["precondition_failed"] else ("pass" if r["holds"] else "fail")
        r.update(status=status, margin=(r["count"] - r["expected"]) if r["count"] is not None else None)
        return r

    def d12():
        r = check_D1_D2(prof, M=M, eps_fit=float(sp["eps"]), Xi=float(sp["Xi"]), n_grid=int(sp["n_grid"]))
        return r

    def h2():
        if prof.is_constant:
            return {"status": "precondition_failed", "message": "constant state: no periodic family"}
        r = check_submersion(prof.model, prof).to_dict()
        r.update(status="pass" if r["passes_H2"] else "fail", margin=r["singular_values"][-1]
                 if r["singular_values"] else None)
        return r

    def h3():
        if prof.is_constant:
            cl = build_cluster(prof, M, angle_grid(prof.model.d, 1)[0])
            return {"status": "precondition_failed", "a": [complex(a) for a in cl.a], "gap": cl.h3_gap}
        rows, ok, gap = [], True, np.inf
        for om in angle_grid(prof.model.d, 8):
            cl = build_cluster(prof, M, om)
            facts = check_blochfacts(cl, prof)
            rows.append({"omega": om.tolist(), "a": [complex(a) for a in cl.a], "gap": cl.h3_gap,
                         "alignment": facts["alignment"], "max_oscillation": facts["max_oscillation"]})
            ok &= cl.h3
            gap = min(gap, cl.h3_gap)
        return {"status": "pass" if ok else "fail", "margin": gap, "angles": rows}

    guarded("D3", d3)
    guarded("D1D2", d12)
    if "status" in verdict["D1D2"]:
        verdict["D1"] = verdict["D2"] = verdict.pop("D1D2")
    else:
        both = verdict.pop("D1D2")
        verdict["D1"] = dict(both["D1"], status="pass" if both["D1"]["holds"] else "fail")
        verdict["D2"] = dict(both["D2"], status="pass" if both["D2"]["holds"] else "fail",
                             margin=both["D2"]["theta"])
    guarded("H2", h2)
    guarded("H3", h3)
    statuses = [v["status"] for v in verdict.values()]
    if "error" in statuses:
        overall = "could_not_compute"
    elif all(s == "pass" for s in statuses):
        overall = "pass"
    else:
        overall = "fail"
    return {"hypotheses": verdict, "overall": overall}


def cmd_check(cfg: RunConfig, out: Path) -> int:
    prof = _load_profile(cfg, out)
    doc = run_checks(prof, cfg)
    doc["config_hash"] = cfg.config_hash()
    _write_json(out / "hypotheses.json", doc)
    for name, v in doc["hypotheses"].items():
        print(f"{name}: {v['status']}")
    return {"pass": EXIT_OK, "fail": EXIT_FAIL}.get(doc["overall"], EXIT_NUMERIC)


def cmd_green(cfg: RunConfig, out: Path) -> int:
    import numpy as np

    from .greenfn import decompose_and_fit, write_fit_csv

    prof = _load_profile(cfg, out)
    g = cfg.green
    fits = decompose_and_fit(prof, times=np.asarray(g["times"], float), eps=float(g["eps"]), M=int(g["M"]),
                             cells=g.get("cells"))
    path = out / "green_fits.csv"
    write_fit_csv(path, fits)
    _prepend_hash(path, cfg.config_hash())
    series = {f"{f.name} p={f.p:g}": (f.times, f.norms) for f in fits if np.all(np.isfinite(f.norms))}
    if series:
        svg_loglog(out / "green_norms.svg", series, "kernel norms")
    for f in fits:
        print(f"{f.name:6s} p={f.p:<4g} slope={f.slope:8.4f} expected={f.predicted_slope:7.4f} "
              f"{'pass' if f.passed else 'FAIL'}")
    if any(not np.all(np.isfinite(f.norms)) for f in fits):
        print("kernels grow in time: the critical spectrum is not stable", file=sys.stderr)
    return EXIT_OK if all(f.passed for f in fits) else EXIT_FAIL


def cmd_simulate(cfg: RunConfig, out: Path) -> int:
    import numpy as np

    from .simulate import BlowupError, NormObserver, PerturbationSpec, SnapshotObserver, init, run

    prof = _load_profile(cfg, out)
    sim = cfg.simulate
    pert_doc = dict(sim.get("perturbation") or {"kind": "zero"})
    pert_doc.setdefault("seed", cfg.seed)
    if "seed" not in (cfg.simulate.get("perturbation") or {}):
        pert_doc["seed"] = cfg.seed
    pert = PerturbationSpec.from_dict(pert_doc)
    state = init(prof, cells=int(sim["cells"]), perturbation=pert, points_per_cell=int(sim["points_per_cell"]),
                 transverse_points=int(sim["transverse_points"]), transverse_length=sim.get("transverse_length"),
                 dt=sim.get("dt"))
    norms = NormObserver(every=int(sim["norm_every"]))
    snaps = SnapshotObserver(every=int(sim["snapshot_every"]))
    status = EXIT_OK
    try:
        record = run(state, float(sim["T"]), [norms, snaps])
    except BlowupError as exc:
        record = exc.record
        status = EXIT_NUMERIC
        print(f"simulation blew up after t = {exc.last_time:.6g}", file=sys.stderr)
    path = out / "simulation_norms.csv"
    record.write_csv(path)
    _prepend_hash(path, cfg.config_hash())
    times = np.array([t for t, _ in snaps.snapshots])
    fields = np.stack([u for _, u in snaps.snapshots])
    np.savez(out / "snapshots.npz", times=times, u=fields, reference=state.reference)
    meta = {"config_hash": cfg.config_hash(), "lengths": list(state.lengths), "shape": list(state.shape),
            "dt": state.dt, "steps": state.steps, "t_end": state.t, "e0": state.e0,
            "perturbation": pert.to_dict(), "model": prof.model.fingerprint(),
            "blowup_time": record.blowup_time}
    _write_json(out / "snapshots.json", meta)
    print(f"simulate: t = {state.t:.6g} after {state.steps} steps, E0 = {state.e0:.4g}")
    return status


def cmd_report(cfg: RunConfig, out: Path) -> int:
    import numpy as np

    from .modulation import InsufficientWindowError, PREDICTED_EXPONENTS, build_track, damping_from_track, fit_decay, \
        write_fit_report, zeta_track

    prof = _load_profile(cfg, out)
    meta = _read_artifact(out, "snapshots.json", "simulate", cfg.config_hash())
    hyp_path = out / "hypotheses.json"
    if hyp_path.exists():
        _read_artifact(out, "hypotheses.json", "check", cfg.config_hash())
    data = np.load(out / "snapshots.npz")
    snaps = list(zip(data["times"], data["u"]))
    rep = cfg.report
    track = build_track(snaps, prof, meta["lengths"], rep["method"], e0=float(meta["e0"]))
    track.write_csv(out / "modulation_norms.csv")
    _prepend_hash(out / "modulation_norms.csv", cfg.config_hash())
    d = track.d
    quantities = rep.get("quantities") or list(PREDICTED_EXPONENTS[d])
    if prof.is_constant:
        # no phase to modulate: psi vanishes identically and has no decay rate
        quantities = [q for q in quantities if not q.startswith("psi")]
    window = tuple(rep["window"]) if rep.get("window") else None
    fits, errors = [], []
    for q in quantities:
        try:
            fits.append(fit_decay(track, q, window, d))
        except InsufficientWindowError as exc:
            errors.append(f"{q}: {exc}")
    extra = {"config_hash": cfg.config_hash(), "errors": errors}
    damping = damping_from_track(track, float(rep.get("theta", 0.1)))
    extra["damping"] = damping.to_dict()
    if d == 1:
        extra["zeta"] = zeta_track(track).to_dict()
    write_fit_report(out / "decay_fits.json", fits, extra)
    with open(out / "decay_fits.csv", "w") as fh:
        fh.write(f"# config_hash={cfg.config_hash()}\n")
        fh.write("quantity,p,t0,t1,exponent,predicted_exponent,tolerance,comparison,verdict\n")
        for f in fits:
            fh.write(f"{f.quantity},{f.p:g},{f.window[0]:g},{f.window[1]:g},{f.exponent:.6g},"
                     f"{f.predicted_exponent:g},{f.tolerance:g},{f.comparison},{'pass' if f.verdict else 'fail'}\n")
    t = track.times
    series = {}
    for q in ("v_L2", "v_Linf", "psi_L2", "psi_deriv_L2"):
        y = track.column(q)
        keep = (t > 0) & (y > 0)
        if keep.sum() >= 2:
            series[q] = (t[keep], y[keep])
    if series:
        svg_loglog(out / "decay.svg", series, "perturbation norms")
    for f in fits:
        print(f"{f.quantity:16s} exponent={f.exponent:8.4f} expected={f.predicted_exponent:6.3f} "
              f"({f.comparison}) {'pass' if f.verdict else 'FAIL'}")
    for e in errors:
        print(e, file=sys.stderr)
    if errors and not fits:
        return EXIT_CONFIG
    return EXIT_OK if all(f.verdict for f in fits) else EXIT_FAIL


COMMANDS = {"profile": cmd_profile, "spectrum": cmd_spectrum, "check": cmd_check, "green": cmd_green,
            "simulate": cmd_simulate, "report": cmd_report}


# -- SVG output ----------------------------------------------------------------

_COLORS = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b", "#e377c2", "#17becf"]


def _frame(title: str, xlabel: str, ylabel: str, xr, yr, w=640, h=420, m=60):
    def sx(x):
        return m + (x - xr[0]) / (xr[1] - xr[0] or 1.0) * (w - 2 * m)

    def sy(y):
        return h - m - (y - yr[0]) / (yr[1] - yr[0] or 1.0) * (h - 2 * m)

    head = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}">',
            f'<rect width="{w}" height="{h}" fill="white"/>',
            f'<rect x="{m}" y="{m}" width="{w - 2 * m}" height="{h - 2 * m}" fill="none" stroke="black"/>',
            f'<text x="{w / 2}" y="{m / 2}" text-anchor="middle" font-size="14">{title}</text>',
            f'<text x="{w / 2}" y="{h - 15}" text-anchor="middle" font-size="12">{xlabel}</text>',
            f'<text x="15" y="{h / 2}" text-anchor="middle" font-size="12" '
            f'transform="rotate(-90 15 {h / 2})">{ylabel}</text>',
            f'<text x="{m}" y="{h - m + 15}" font-size="10">{xr[0]:.3g}</text>',
            f'<text x="{w - m}" y="{h - m + 15}" text-anchor="end" font-size="10">{xr[1]:.3g}</text>',
            f'<text x="{m - 5}" y="{h - m}" text-anchor="end" font-size="10">{yr[0]:.3g}</text>',
            f'<text x="{m - 5}" y="{m + 10}" text-anchor="end" font-size="10">{yr[1]:.3g}</text>']
    return head, sx, sy


def svg_loglog(path, series: dict, title: str) -> None:
    """Log-log line plot; axis labels show log10 values."""
    import numpy as np

    logs = {k: (np.log10(np.asarray(t, float)), np.log10(np.asarray(y, float))) for k, (t, y) in series.items()}
    xs = np.concatenate([a for a, _ in logs.values()])
    ys = np.concatenate([b for _, b in logs.values()])
    head, sx, sy = _frame(title, "log10 t", "log10 norm", (xs.min(), xs.max()), (ys.min(), ys.max()))
    body = []
    for i, (name, (lx, ly)) in enumerate(logs.items()):
        pts = " ".join(f"{sx(a):.2f},{sy(b):.2f}" for a, b in zip(lx, ly))
        color = _COLORS[i % len(_COLORS)]
        body.append(f'<polyline fill="none" stroke="{color}" stroke-width="1.5" points="{pts}"/>')
        body.append(f'<text x="{70}" y="{80 + 14 * i}" font-size="11" fill="{color}">{name}</text>')
    Path(path).write_text("\n".join(head + body + ["</svg>"]) + "\n")


def svg_scatter(path, points, title: str, xlabel: str, ylabel: str) -> None:
    import numpy as np

    P = np.asarray(points, float)
    if P.size == 0:
        P = np.zeros((1, 2))
    head, sx, sy = _frame(title, xlabel, ylabel, (P[:, 0].min(), P[:, 0].max()), (P[:, 1].min(), P[:, 1].max()))
    body = [f'<circle cx="{sx(a):.2f}" cy="{sy(b):.2f}" r="1.5" fill="{_COLORS[0]}"/>' for a, b in P]
    Path(path).write_text("\n".join(head + body + ["</svg>"]) + "\n")


# -- entry point -------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="pwstab", description=__doc__.splitlines()[0])
    parser.add_argument("--config", type=Path, help="JSON run configuration (defaults are used when omitted)")
    parser.add_argument("--out", type=Path, default=Path("pwstab-out"), help="artifact directory")
    parser.add_argument("--threads", type=int, default=None, help="cap on BLAS/FFT worker threads")
    parser.add_argument("--seed", type=int, default=None, help="unsigned 64-bit seed (overrides the config)")
    parser.add_argument("-v", "--verbose", action="store_true")
    parser.add_argument("command", choices=sorted(COMMANDS))
    return parser


def _limit_threads(n: int) -> None:
    for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS", "NUMEXPR_NUM_THREADS"):
        os.environ[var] = str(n)


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    if args.threads is not None:
        if args.threads < 1:
            print("--threads must be positive", file=sys.stderr)
            return EXIT_CONFIG
        _limit_threads(args.threads)
    try:
        doc = json.loads(args.config.read_text()) if args.config else {}
        cfg = RunConfig.from_dict(doc, seed=args.seed)
    except (OSError, json.JSONDecodeError, ConfigError) as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    args.out.mkdir(parents=True, exist_ok=True)
    _write_json(args.out / "config.json", dict(cfg.to_dict(), config_hash=cfg.config_hash()))
    from .model import ModelConfigError
    from .profile import DegenerateOrbitError, NoConvergenceError

    try:
        return COMMANDS[args.command](cfg, args.out)
    except (ConfigError, ModelConfigError) as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (NoConvergenceError, DegenerateOrbitError, ArithmeticError, RuntimeError,
            __import__("numpy").linalg.LinAlgError) as exc:
        print(f"numerical failure: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
