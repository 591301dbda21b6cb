"""End-to-end acceptance checks.

Every test records one line ``criterion N: PASS|FAIL|N/A  <detail>`` and the
collected lines are printed in a summary section at the end of the pytest
run.  A criterion that cannot be met is left failing rather than loosened.
"""
import json
import math
import time
import warnings

import numpy as np
import pytest
from scipy.optimize import linear_sum_assignment

from pwstab import model
from pwstab.bloch import BlochFamily, check_D3_semisimple, translation_residual
from pwstab.cli import RunConfig, main, run_checks
from pwstab.dispersion import angle_grid, build_cluster, check_blochfacts, fd_speeds, zero_eigenspace
from pwstab.greenfn import (LowFrequencyKernel, SuperdomainOperator, cancellation_test, decompose_and_fit,
                            loglog_slope, sup_y_lp)
from pwstab.modulation import build_track, extract_psi, residual_equation_check
from pwstab.profile import WaveProfile, trig_eval
from pwstab.simulate import NormObserver, PerturbationSpec, SnapshotObserver, damping_monitor, init, run

from .conftest import ACCEPTANCE, solved

pytestmark = pytest.mark.filterwarnings("ignore")


def record(number: int, ok, detail: str) -> None:
    verdict = {True: "PASS", False: "FAIL", None: "N/A"}[ok]
    line = f"criterion {number}: {verdict}  {detail}"
    ACCEPTANCE[number] = line
    print(line)


def matched_error(a, b):
    cost = np.abs(a[:, None] - b[None, :])
    r, c = linear_sum_assignment(cost)
    return cost[r, c].max()


def constant_symbol(A1, A2, xi, M, X):
    out = []
    for k in range(-M, M + 1):
        kap = 2 * np.pi * k + xi[0]
        B = -(kap ** 2) * np.eye(len(A1)) - 1j * kap * X * A1
        if A2 is not None:
            B = B - xi[1] ** 2 * np.eye(len(A1)) - 1j * xi[1] * X * A2
        out.append(np.linalg.eigvals(B))
    return np.concatenate(out)


def quiet_init(*args, **kwargs):
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        return init(*args, **kwargs)


# -- 1. constant-coefficient exactness ------------------------------------------

def test_constant_coefficient_spectra_match_symbol():
    start = time.perf_counter()
    rng = np.random.default_rng(2024)
    A1 = np.array([[0.3, 1.0], [-0.7, 0.2]])
    A2 = np.array([[0.1, -0.4], [0.5, 0.0]])
    M, X = 8, 1.7
    cases = [(model.linear([A1.tolist()]), None, rng.uniform(-np.pi, np.pi, (50, 1))),
             (model.linear([A1.tolist(), A2.tolist()]), A2, rng.uniform(-np.pi, np.pi, (50, 2)))]
    worst = 0.0
    for system, second, xis in cases:
        fam = BlochFamily(WaveProfile.constant(system, [0.0, 0.0], m=16, X=X), M)
        for xi in xis:
            ev = np.linalg.eigvals(fam.matrix(xi))
            worst = max(worst, matched_error(ev, constant_symbol(A1, second, xi, M, X)))
    elapsed = time.perf_counter() - start
    ok = worst < 1e-10 and elapsed < 10
    record(1, ok, f"max eigenvalue error {worst:.2e} over 100 random xi (d=1 and d=2), {elapsed:.1f} s")
    assert ok


# -- 2. translation zero mode ----------------------------------------------------

def test_translation_zero_mode(pendulum_profile):
    start = time.perf_counter()
    res = translation_residual(pendulum_profile, 48)
    rep = check_D3_semisimple(pendulum_profile, 48)
    elapsed = time.perf_counter() - start
    ok = res <= 1e-6 and rep["count"] >= pendulum_profile.n + 1 and elapsed < 30
    record(2, ok, f"|L0 u'|/|u'| = {res:.2e}, zero cluster count {rep['count']} "
                  f"(need >= {pendulum_profile.n + 1}), {elapsed:.1f} s")
    assert ok


# -- 3. translational alignment and constant left modes --------------------------

def test_zero_cluster_structure():
    start = time.perf_counter()
    rows = []
    for name, system, amp in (("pendulum", model.pendulum(), 2.0), ("cubic", model.cubic(), 0.5)):
        prof = solved(system, amp)
        cl = build_cluster(prof, 48, 1.0)
        if not cl.h3 or not check_D3_semisimple(prof, 48)["holds"]:
            continue
        facts = check_blochfacts(cl, prof)
        rows.append((name, facts["alignment"], facts["max_oscillation"]))
    elapsed = time.perf_counter() - start
    ok = bool(rows) and all(a > 1 - 1e-6 and o < 1e-5 for _, a, o in rows) and elapsed < 60
    detail = "; ".join(f"{n}: 1 - alignment {abs(1 - a):.1e}, oscillation {o:.1e}" for n, a, o in rows)
    record(3, ok, f"{detail or 'no profile passed D3/H3'}, {elapsed:.1f} s")
    assert ok


# -- 4. first-order dispersion ---------------------------------------------------

def test_first_order_speeds_match_finite_differences(pendulum_profile, pendulum2_profile):
    start = time.perf_counter()
    cl = build_cluster(pendulum_profile, 48, 1.0)
    err1 = np.abs(fd_speeds(cl) - cl.a).max()
    basis = zero_eigenspace(pendulum2_profile, 32)
    err2 = max(np.abs(fd_speeds(c) - c.a).max()
               for c in (build_cluster(pendulum2_profile, 32, om, basis=basis) for om in angle_grid(2, 8)))
    elapsed = time.perf_counter() - start
    ok = err1 < 1e-4 and err2 < 1e-4 and elapsed < 120
    record(4, ok, f"|a - FD slope| = {err1:.1e} (d=1), {err2:.1e} (d=2, 8 angles), {elapsed:.1f} s")
    assert ok


# -- 5. Green-kernel exponents ---------------------------------------------------

TIMES = np.geomspace(10, 1000, 9)


def _heat_kernel_checks(heat_profile):
    K = LowFrequencyKernel(heat_profile, cells=1024, M=8)
    dx = 1.0 / len(K.theta)
    norms = {key: [] for key in ("Linf", "L2", "x")}
    for t in TIMES:
        norms["Linf"].append(sup_y_lp(K.GI(t).real, dx, np.inf))
        norms["L2"].append(sup_y_lp(K.GI(t).real, dx, 2))
        norms["x"].append(sup_y_lp(K.GI(t, dx=1).real, dx, np.inf))
    s = {k: loglog_slope(TIMES, v) for k, v in norms.items()}
    checks = {"GI Linf": (s["Linf"], -0.5, 0.05), "GI L2": (s["L2"], -0.25, 0.05),
              "dx gain": (s["Linf"] - s["x"], 0.5, 0.1)}
    return checks


def _periodic_kernel_checks(profile):
    fits = {(f.name, f.p): f for f in decompose_and_fit(profile, TIMES, M=12)}
    slope = {key: f.slope for key, f in fits.items()}
    inf = np.inf
    return {"GI Linf": (slope[("GI", inf)], -0.5, 0.05), "GI L2": (slope[("GI", 2.0)], -0.25, 0.05),
            "e dx gain": (slope[("e", inf)] - slope[("e_x", inf)], 0.5, 0.1),
            "e dt gain": (slope[("e", inf)] - slope[("e_t", inf)], 0.5, 0.1),
            "e dy gain": (slope[("e", inf)] - slope[("e_y", inf)], 0.0, 0.1),
            "Gt dy gain": (slope[("Gt", inf)] - slope[("Gt_y", inf)], 0.5, 0.1)}


def _summarize(checks):
    ok = all(np.isfinite(v) and abs(v - target) <= tol for v, target, tol in checks.values())
    text = ", ".join(f"{k} {v:+.3f}" if np.isfinite(v) else f"{k} diverges" for k, (v, _, _) in checks.items())
    return ok, text


def test_green_kernel_exponents(heat_profile, pendulum_profile):
    # a constant state has no e or G-tilde part; its checks are G^I and the x-derivative gain
    start = time.perf_counter()
    heat_ok, heat_text = _summarize(_heat_kernel_checks(heat_profile))
    per_ok, per_text = _summarize(_periodic_kernel_checks(pendulum_profile))
    elapsed = time.perf_counter() - start
    ok = heat_ok and per_ok and elapsed < 600
    record(5, ok, f"heat [{'ok' if heat_ok else 'bad'}: {heat_text}]; pendulum "
                  f"[{'ok' if per_ok else 'bad'}: {per_text}], {elapsed:.1f} s")
    assert heat_ok, heat_text
    assert per_ok, f"periodic kernels do not decay (the profile is spectrally unstable): {per_text}"


# -- 6. cancellation principle ---------------------------------------------------

def _heat_source(profile, steps):
    g = lambda y: np.stack([np.exp(-(y / 3) ** 2), np.sin(2 * np.pi * y) * np.exp(-(y / 3) ** 2)], 1)  # noqa
    return cancellation_test(profile, lambda y, s: (1 - np.exp(-s)) * g(y), 0.5,
                             f_s=lambda y, s: np.exp(-s) * g(y), steps=steps, M=8)


def _translational_source(profile, steps, op):
    cU = np.fft.fft(profile.unit_derivative(), axis=0) / profile.m
    g = lambda y: trig_eval(cU, np.mod(y, 1.0)).real * np.exp(-(y / 4) ** 2)[:, None]  # noqa: E731
    return cancellation_test(profile, lambda y, s: (1 - np.exp(-s)) * g(y), 0.2,
                             f_s=lambda y, s: np.exp(-s) * g(y), steps=steps, op=op)


def test_cancellation_principle(heat_profile, pendulum_profile):
    start = time.perf_counter()
    heat = [_heat_source(heat_profile, s) for s in (16, 32)]
    op = SuperdomainOperator(pendulum_profile, 32, 12)
    pend = [_translational_source(pendulum_profile, s, op) for s in (16, 32)]
    elapsed = time.perf_counter() - start
    ok = all(r[1] < 1e-3 and r[1] < r[0] / 2 for r in (heat, pend)) and elapsed < 300
    record(6, ok, f"heat source {heat[0]:.1e} -> {heat[1]:.1e}; translational source "
                  f"{pend[0]:.1e} -> {pend[1]:.1e}, {elapsed:.1f} s")
    assert ok


# -- 7. conditional nonlinear rates ----------------------------------------------

CATALOG = [
    ("pendulum", {"builtin": "pendulum"}, {"center": [0.0, 0.0], "amplitude": 2.0}),
    ("cubic", {"builtin": "cubic"}, {"center": [0.0, 0.0], "amplitude": 0.5}),
    ("rotor", {"builtin": "rotor"}, {"center": [0.0, 0.0], "amplitude": 1.0}),
    ("pendulum d=2", {"builtin": "pendulum", "d": 2}, {"center": [0.0, 0.0], "amplitude": 2.0}),
    ("cubic d=2", {"builtin": "cubic", "d": 2}, {"center": [0.0, 0.0], "amplitude": 0.5}),
]


def _rates_through_cli(tmp_path, name, model_doc, profile_doc):
    d = int(model_doc.get("d", 1))
    doc = {"model": model_doc, "profile": profile_doc,
           "simulate": {"cells": 64, "points_per_cell": 64, "T": 500.0, "snapshot_every": 200,
                        "perturbation": {"kind": "bump", "amplitude": 0.01}},
           "report": {"window": [20, 500], "quantities": ["v_L2", "v_Linf", "psi_Linf"] if d == 1 else ["v_L2"]}}
    out = tmp_path / name.replace(" ", "_")
    out.mkdir()
    cfg = tmp_path / f"{out.name}.json"
    cfg.write_text(json.dumps(doc))
    for cmd in ("profile", "simulate", "report"):
        code = main(["--config", str(cfg), "--out", str(out), cmd])
        if cmd != "report" and code != 0:
            return False, f"{cmd} exited {code}"
    fits = json.loads((out / "decay_fits.json").read_text())["fits"]
    return all(f["verdict"] for f in fits), ", ".join(f"{f['quantity']} {f['exponent']:+.3f}" for f in fits)


def test_nonlinear_rates_if_admissible(tmp_path):
    start = time.perf_counter()
    admissible, failures = [], []
    for name, model_doc, profile_doc in CATALOG:
        cfg = RunConfig.from_dict({"model": model_doc, "profile": profile_doc, "spectrum": {"M": 24, "n_grid": 65}})
        prof = solved(model.load_model(cfg.model), profile_doc["amplitude"])
        verdict = run_checks(prof, cfg)
        if verdict["overall"] == "pass":
            admissible.append((name, model_doc, profile_doc))
        else:
            bad = [k for k, v in verdict["hypotheses"].items() if v["status"] != "pass"]
            failures.append(f"{name} fails {'/'.join(bad)}")
    if not admissible:
        elapsed = time.perf_counter() - start
        record(7, None, f"not applicable: no admissible system found ({'; '.join(failures)}), {elapsed:.1f} s")
        return
    results = [(name, *_rates_through_cli(tmp_path, name, m, p)) for name, m, p in admissible]
    elapsed = time.perf_counter() - start
    ok = all(r[1] for r in results) and elapsed < 1800
    record(7, ok, "; ".join(f"{n}: {text}" for n, _, text in results) + f", {elapsed:.1f} s")
    assert ok


# -- 8. property suites ----------------------------------------------------------

def test_property_suites(heat_profile, pendulum_profile):
    start = time.perf_counter()
    checks = {}

    fam = BlochFamily(pendulum_profile, 16)
    rng = np.random.default_rng(8)
    checks["conjugation"] = max(
        matched_error(np.linalg.eigvals(fam.matrix([xi])), np.linalg.eigvals(fam.matrix([-xi])).conj())
        for xi in rng.uniform(-np.pi, np.pi, 5)) < 1e-8

    st_ = quiet_init(pendulum_profile, cells=2, points_per_cell=64)
    run(st_, 5.0)
    checks["equilibrium"] = np.abs(st_.u - st_.reference).max() == 0.0

    spec = PerturbationSpec("bump", 0.05, width=2.0, direction=[0.6, 0.8])
    st_ = quiet_init(pendulum_profile, cells=4, points_per_cell=32, perturbation=spec)
    m0 = st_.mass()
    run(st_, 1.0)
    checks["mass"] = np.abs(st_.mass() - m0).max() < 1e-11 * (1 + np.abs(m0).max())

    st_ = quiet_init(pendulum_profile, cells=32, points_per_cell=32,
                     perturbation=PerturbationSpec("bump", 0.05, width=4 * pendulum_profile.X))
    a = extract_psi(st_.u, pendulum_profile, st_.lengths)
    b = extract_psi(np.roll(st_.u, 7, axis=0), pendulum_profile, st_.lengths, origin_index=7)
    X = pendulum_profile.X
    gap = b.fine - (np.roll(a.fine, 7) + 7 * st_.spacing[0])
    checks["gauge"] = np.abs((gap + X / 2) % X - X / 2).max() < 1e-10

    st_ = quiet_init(heat_profile, cells=64, points_per_cell=8, perturbation=PerturbationSpec("bump", 0.01))
    rec = run(st_, 50.0, [NormObserver(every=20)])
    l2 = rec.column("L2") ** 2
    damp = damping_monitor(rec.column("t"), rec.column("HK") ** 2, l2, np.zeros_like(l2))
    checks["damping"] = bool(damp.holds and math.isfinite(damp.C))

    residuals = []
    for dt in (0.01, 0.005):
        st_ = quiet_init(pendulum_profile, cells=32, points_per_cell=64, dt=dt,
                         perturbation=PerturbationSpec("bump", 1e-2, width=4 * pendulum_profile.X))
        ob = SnapshotObserver(every=10)
        run(st_, 6.0, [ob])
        track = build_track(ob.snapshots, pendulum_profile, st_.lengths, e0=st_.e0)
        residuals.append(residual_equation_check(track, pendulum_profile))
    shared = [np.isclose(r.times[:, None], o.times[None, :]).any(axis=1)
              for r, o in ((residuals[0], residuals[1]), (residuals[1], residuals[0]))]
    coarse, fine = (r.relative[k].max() for r, k in zip(residuals, shared))
    order = math.log2(coarse / fine)
    checks["residual order"] = abs(order - 2.0) < 0.3

    elapsed = time.perf_counter() - start
    ok = all(checks.values()) and elapsed < 600
    failed = [k for k, v in checks.items() if not v]
    record(8, ok, f"{len(checks) - len(failed)}/{len(checks)} properties hold"
                  f"{' (failed: ' + ', '.join(failed) + ')' if failed else ''}, residual order {order:.2f}, "
                  f"damping C = {damp.C:.2f}, {elapsed:.1f} s")
    assert ok, failed
