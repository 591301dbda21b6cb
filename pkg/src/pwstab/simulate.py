"""Nonlinear time stepping on a periodic superdomain of many wave periods.

The system  u_t + sum_j g^j(u)_{x_j} = Delta u  is integrated in the frame
moving with the wave and aligned with its direction of propagation, so the
unperturbed wave is stationary: g^1 = nu . f - s u and g^2 = nu_perp . f.
Coordinates are physical (one period has length X).

The scheme is a second-order integrating-factor Runge-Kutta method: the
Laplacian is applied exactly in Fourier space and the flux divergence is
explicit, with 2/3-rule dealiasing.  The state is advanced in perturbation
form w = u - u_bar, with the flux difference g(u_bar + w) - g(u_bar) on the
right-hand side, so the tiled wave is an exact discrete equilibrium and the
mean of u is conserved to rounding error.
"""
from __future__ import annotations

import csv
import json
import logging
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

from .profile import WaveProfile

logger = logging.getLogger(__name__)


class BlowupError(RuntimeError):
    """Raised when the solution stops being finite; carries the partial record."""

    def __init__(self, last_time: float, record: "Trajectory | None" = None):
        self.last_time = last_time
        self.record = record
        super().__init__(f"solution blew up after t = {last_time:.6g}")


class SmallnessWarning(UserWarning):
    pass


class DomainWarning(UserWarning):
    pass


# -- norms ---------------------------------------------------------------

def lp_norm(v: np.ndarray, cell_volume: float, p: float) -> float:
    """L^p norm of a sampled field; the last axis holds the components."""
    mag = np.linalg.norm(np.asarray(v), axis=-1)
    if np.isinf(p):
        return float(mag.max(initial=0.0))
    return float((np.sum(mag ** p) * cell_volume) ** (1.0 / p))


def physical_wavenumbers(shape: Sequence[int], lengths: Sequence[float]) -> list[np.ndarray]:
    """Angular wavenumbers for a full complex FFT of the given grid."""
    return [2 * np.pi * np.fft.fftfreq(nx, L / nx) for nx, L in zip(shape, lengths)]


def hk_norm(v: np.ndarray, lengths: Sequence[float], K: int) -> float:
    """Spectral H^K norm: sum over j <= K of || D^j v ||_2^2, square-rooted.

    D^j is the full tensor of j-th derivatives, whose squared L^2 norm is
    sum |k|^{2j} |v_hat|^2 by Parseval.
    """
    v = np.asarray(v)
    d = v.ndim - 1
    shape = v.shape[:d]
    ks = physical_wavenumbers(shape, lengths)
    k2 = sum(np.meshgrid(*[k ** 2 for k in ks], indexing="ij"))
    weight = sum(k2 ** j for j in range(K + 1))
    vol = float(np.prod(lengths))
    npts = float(np.prod(shape))
    vh = np.fft.fftn(v, axes=tuple(range(d))) / npts
    return float(math.sqrt(vol * np.sum(weight[..., None] * np.abs(vh) ** 2)))


def hk_norm_fd(v: np.ndarray, lengths: Sequence[float], K: int) -> float:
    """H^K norm with fourth-order periodic finite differences (independent check)."""
    v = np.asarray(v, float)
    d = v.ndim - 1
    steps = [L / n for L, n in zip(lengths, v.shape[:d])]
    cell = float(np.prod(steps))

    def diff(a, axis):
        h = steps[axis]
        return (-np.roll(a, -2, axis) + 8 * np.roll(a, -1, axis)
                - 8 * np.roll(a, 1, axis) + np.roll(a, 2, axis)) / (12 * h)

    total = 0.0
    layer = [v]
    for j in range(K + 1):
        total += sum(float(np.sum(a ** 2)) for a in layer) * cell
        if j < K:
            layer = [diff(a, ax) for a in layer for ax in range(d)]
    return math.sqrt(total)


# -- perturbations -------------------------------------------------------

@dataclass
class PerturbationSpec:
    """Initial perturbation of the tiled wave.

    kind:
      "zero"      no perturbation;
      "bump"      amplitude * exp(-|x - center|^2 / width^2) * direction;
      "random"    band-limited random field (wavenumbers below ``band``) under
                  the same Gaussian envelope, scaled to max norm ``amplitude``;
      "translate" the wave itself shifted by ``shift`` along x_1;
      "modulate"  the wave shifted by the local phase amplitude * envelope(x),
                  i.e. u_bar(x_1 - amplitude * exp(-|x - center|^2 / width^2)).
    Lengths are physical; ``width`` and ``center`` default to 4 periods and
    the domain center.  ``norm_report`` is filled in by ``init``.
    """

    kind: str = "bump"
    amplitude: float = 1e-2
    width: float | None = None
    center: Sequence[float] | None = None
    direction: Sequence[float] | None = None
    shift: float = 0.0
    band: float = 1.0
    seed: int = 0
    smallness: float = 1.0
    norm_report: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        out = {k: getattr(self, k) for k in ("kind", "amplitude", "width", "shift", "band", "seed", "smallness")}
        out["center"] = None if self.center is None else [float(c) for c in self.center]
        out["direction"] = None if self.direction is None else [float(c) for c in self.direction]
        out["norm_report"] = dict(self.norm_report)
        return out

    @classmethod
    def from_dict(cls, doc: dict) -> "PerturbationSpec":
        allowed = {"kind", "amplitude", "width", "center", "direction", "shift", "band", "seed", "smallness"}
        unknown = set(doc) - allowed - {"norm_report"}
        if unknown:
            raise ValueError(f"unknown perturbation fields: {sorted(unknown)}")
        return cls(**{k: v for k, v in doc.items() if k in allowed})


# -- state ---------------------------------------------------------------

@dataclass
class SimulationState:
    """Solution on the superdomain.

    ``w_hat`` is the real FFT of the perturbation u - u_bar over the spatial
    axes; ``u`` is kept in sync after every step.  Arrays have shape
    (N1,) + (N2,) + (n,) with the component index last.
    """

    profile: WaveProfile
    cells: int
    points_per_cell: int
    lengths: tuple
    shape: tuple
    reference: np.ndarray
    w_hat: np.ndarray
    u: np.ndarray
    t: float
    dt: float
    steps: int = 0
    observers: list = field(default_factory=list)
    e0: float = 0.0
    perturbation: PerturbationSpec | None = None
    _factor: np.ndarray | None = None
    _k2: np.ndarray | None = None
    _ik: list | None = None
    _mask: np.ndarray | None = None

    @property
    def d(self) -> int:
        return len(self.shape)

    @property
    def n(self) -> int:
        return self.reference.shape[-1]

    @property
    def spacing(self) -> tuple:
        return tuple(L / N for L, N in zip(self.lengths, self.shape))

    @property
    def cell_volume(self) -> float:
        return float(np.prod(self.spacing))

    @property
    def x(self) -> np.ndarray:
        """Coordinates along the propagation direction."""
        return np.arange(self.shape[0]) * self.spacing[0]

    def grids(self) -> list[np.ndarray]:
        return [np.arange(N) * h for N, h in zip(self.shape, self.spacing)]

    @property
    def perturbation_field(self) -> np.ndarray:
        return self.u - self.reference

    def mass(self) -> np.ndarray:
        return self.u.reshape(-1, self.n).sum(axis=0) * self.cell_volume

    def add_observer(self, observer: "Observer") -> None:
        self.observers.append(observer)


def _axes(d: int) -> tuple:
    return tuple(range(d))


def _fluxes(profile: WaveProfile, u: np.ndarray) -> list[np.ndarray]:
    model = profile.model
    out = [model.directional_flux(u, profile.nu) - profile.s * u]
    for perp in profile.transverse_directions():
        out.append(model.directional_flux(u, perp))
    return out


def _max_speed(profile: WaveProfile, u: np.ndarray) -> float:
    model = profile.model
    flat = u.reshape(-1, u.shape[-1])
    J = model.directional_jacobian(flat, profile.nu) - profile.s * np.eye(flat.shape[1])
    speed = np.abs(np.linalg.eigvals(J)).max(axis=-1)
    for perp in profile.transverse_directions():
        J2 = model.directional_jacobian(flat, perp)
        speed = speed + np.abs(np.linalg.eigvals(J2)).max(axis=-1)
    return float(speed.max(initial=0.0))


def init(profile: WaveProfile, cells: int = 32, perturbation: PerturbationSpec | None = None,
         points_per_cell: int = 64, transverse_points: int = 128, transverse_length: float | None = None,
         dt: float | None = None, cfl: float = 0.25, dt_max: float = 0.05) -> SimulationState:
    """Tile the wave over ``cells`` periods and add the perturbation.

    d = 2 uses ``transverse_points`` samples over ``transverse_length``
    (default 16 periods) in the direction perpendicular to propagation.
    """
    d = profile.model.d
    minimum = 32 if d == 1 else 16
    if cells < minimum:
        warnings.warn(f"domain holds {cells} periods; decay fits assume at least {minimum}", DomainWarning)
    if points_per_cell < 8:
        raise ValueError("need at least 8 points per period")
    coeffs = np.abs(np.fft.fft(profile.samples, axis=0)) / profile.m
    modes = np.abs(np.fft.fftfreq(profile.m, 1.0 / profile.m))
    tail = coeffs[modes >= points_per_cell / 3.0].max(initial=0.0) / max(coeffs.max(), 1e-300)
    if tail > 1e-8:
        warnings.warn(f"profile Fourier content {tail:.1e} beyond the dealiasing cutoff; "
                      "increase points_per_cell", DomainWarning)
    X = profile.X
    N1 = cells * points_per_cell
    lengths = [cells * X]
    shape = [N1]
    if d == 2:
        shape.append(int(transverse_points))
        lengths.append(float(transverse_length) if transverse_length else 16 * X)
    elif d != 1:
        raise ValueError("simulation supports d = 1 or 2")
    shape, lengths = tuple(shape), tuple(lengths)
    x1 = np.arange(N1) * lengths[0] / N1
    ref1 = profile.evaluate(x1 / X)
    reference = ref1 if d == 1 else np.broadcast_to(ref1[:, None, :], shape + (profile.n,)).copy()
    spec = perturbation or PerturbationSpec(kind="zero")
    w = _perturbation_field(spec, profile, shape, lengths, reference)

    kf = [2 * np.pi * np.fft.fftfreq(N, L / N) for N, L in zip(shape[:-1], lengths[:-1])]
    kf.append(2 * np.pi * np.fft.rfftfreq(shape[-1], lengths[-1] / shape[-1]))
    mesh = np.meshgrid(*kf, indexing="ij")
    idx = [np.abs(np.fft.fftfreq(N, 1.0 / N)) for N in shape[:-1]]
    idx.append(np.fft.rfftfreq(shape[-1], 1.0 / shape[-1]))
    imesh = np.meshgrid(*idx, indexing="ij")
    mask = np.ones(mesh[0].shape, bool)
    for im, N in zip(imesh, shape):
        mask &= im < N / 3.0
    w_hat = np.fft.rfftn(w, axes=_axes(d)) * mask[..., None]
    w = np.fft.irfftn(w_hat, s=shape, axes=_axes(d))
    u = reference + w

    if dt is None:
        speed = max(_max_speed(profile, u), 1e-12)
        dt = min(cfl * min(L / N for L, N in zip(lengths, shape)) / speed, dt_max)
    state = SimulationState(profile, cells, points_per_cell, lengths, shape, reference, w_hat, u, 0.0, float(dt),
                            perturbation=spec)
    state._ik = [1j * k[..., None] for k in mesh]
    state._mask = mask[..., None]
    state._k2 = sum(k ** 2 for k in mesh)[..., None]
    state._factor = np.exp(-state._k2 * state.dt)
    K = min(profile.model.smoothness_order, 4)
    e0 = lp_norm(w, state.cell_volume, 1) + hk_norm(w, lengths, K)
    state.e0 = e0
    spec.norm_report = {"E0": e0, "L1": lp_norm(w, state.cell_volume, 1), "HK": hk_norm(w, lengths, K),
                        "K": K, "Linf": lp_norm(w, state.cell_volume, np.inf)}
    if spec.kind != "zero" and e0 > spec.smallness:
        warnings.warn(f"perturbation size E0 = {e0:.3g} exceeds the configured smallness {spec.smallness}",
                      SmallnessWarning)
    return state


def _perturbation_field(spec: PerturbationSpec, profile: WaveProfile, shape, lengths, reference) -> np.ndarray:
    n = profile.n
    d = len(shape)
    grids = np.meshgrid(*[np.arange(N) * L / N for N, L in zip(shape, lengths)], indexing="ij")
    if spec.kind == "zero":
        return np.zeros(shape + (n,))
    if spec.kind == "translate":
        x1 = np.arange(shape[0]) * lengths[0] / shape[0]
        shifted = profile.evaluate((x1 - spec.shift) / profile.X)
        if d == 2:
            shifted = np.broadcast_to(shifted[:, None, :], shape + (n,))
        return shifted - reference
    center = spec.center if spec.center is not None else [L / 2 for L in lengths]
    width = spec.width if spec.width is not None else 4 * profile.X
    r2 = sum((g - c) ** 2 for g, c in zip(grids, center))
    envelope = np.exp(-r2 / width ** 2)
    if spec.direction is None:
        direction = np.zeros(n)
        direction[0] = 1.0
    else:
        direction = np.asarray(spec.direction, float)
        if direction.shape != (n,):
            raise ValueError(f"perturbation direction must have {n} components")
    if spec.kind == "modulate":
        phase = spec.amplitude * envelope
        x1 = grids[0]
        return profile.evaluate(((x1 - phase) / profile.X).ravel()).reshape(shape + (n,)) - reference
    if spec.kind == "bump":
        return spec.amplitude * envelope[..., None] * direction
    if spec.kind == "random":
        rng = np.random.default_rng(spec.seed)
        noise = rng.standard_normal(shape + (n,))
        kf = physical_wavenumbers(shape, lengths)
        kmag = np.sqrt(sum(k ** 2 for k in np.meshgrid(*kf, indexing="ij")))
        nh = np.fft.fftn(noise, axes=_axes(d)) * (kmag <= spec.band)[..., None]
        field_ = np.fft.ifftn(nh, axes=_axes(d)).real * envelope[..., None]
        peak = np.abs(field_).max()
        return field_ * (spec.amplitude / peak) if peak > 0 else field_
    raise ValueError(f"unknown perturbation kind {spec.kind!r}")


# -- time stepping -------------------------------------------------------

def _rhs(state: SimulationState, w_hat: np.ndarray) -> np.ndarray:
    """Dealiased Fourier transform of -div (g(u_bar + w) - g(u_bar))."""
    d = state.d
    w = np.fft.irfftn(w_hat, s=state.shape, axes=_axes(d))
    g_new = _fluxes(state.profile, state.reference + w)
    g_ref = _fluxes(state.profile, state.reference)
    out = np.zeros_like(w_hat)
    for ik, a, b in zip(state._ik, g_new, g_ref):
        out -= ik * np.fft.rfftn(a - b, axes=_axes(d))
    return out * state._mask


def step(state: SimulationState, dt: float | None = None) -> SimulationState:
    """Advance one integrating-factor RK2 (Heun) step in place."""
    if dt is None or dt == state.dt:
        _advance(state, state.dt, state._factor)
    else:
        _advance(state, dt, np.exp(-state._k2 * dt))
    return state


def _advance(state: SimulationState, dt: float, E: np.ndarray) -> None:
    w0 = state.w_hat
    N0 = _rhs(state, w0)
    a = E * (w0 + dt * N0)
    w1 = E * w0 + 0.5 * dt * (E * N0 + _rhs(state, a))
    w = np.fft.irfftn(w1, s=state.shape, axes=_axes(state.d))
    if not np.all(np.isfinite(w)) or np.abs(w).max() > 1e8:
        raise BlowupError(state.t)
    state.w_hat = w1
    state.u = state.reference + w
    state.t += dt
    state.steps += 1


# -- observers and runs --------------------------------------------------

class Observer:
    """Called every ``every`` steps (and at t = 0); may return a dict row."""

    every: int = 1

    def __call__(self, state: SimulationState) -> dict | None:  # pragma: no cover - interface
        raise NotImplementedError


class NormObserver(Observer):
    """Mass and perturbation norms |u - u_bar| in L^2, L^inf and H^K."""

    def __init__(self, every: int = 10, K: int | None = None):
        self.every = every
        self.K = K

    def __call__(self, state):
        w = state.perturbation_field
        K = self.K if self.K is not None else min(state.profile.model.smoothness_order, 4)
        row = {"t": state.t, "L2": lp_norm(w, state.cell_volume, 2),
               "Linf": lp_norm(w, state.cell_volume, np.inf), "HK": hk_norm(w, state.lengths, K)}
        for i, m in enumerate(state.mass()):
            row[f"mass{i}"] = float(m)
        return row


class SnapshotObserver(Observer):
    """Keeps copies of u (and optionally writes npz + JSON sidecar files)."""

    def __init__(self, every: int = 10, directory: str | Path | None = None, meta: dict | None = None):
        self.every = every
        self.directory = Path(directory) if directory is not None else None
        self.meta = meta or {}
        self.snapshots: list[tuple[float, np.ndarray]] = []

    def __call__(self, state):
        self.snapshots.append((state.t, state.u.copy()))
        if self.directory is not None:
            stem = self.directory / f"snapshot_{len(self.snapshots) - 1:05d}"
            save_snapshot(stem, state, self.meta)
        return None


@dataclass
class Trajectory:
    times: list = field(default_factory=list)
    rows: list = field(default_factory=list)
    blowup_time: float | None = None

    def column(self, name: str) -> np.ndarray:
        return np.array([r[name] for r in self.rows if name in r])

    def write_csv(self, path: str | Path) -> None:
        if not self.rows:
            Path(path).write_text("")
            return
        names = list(self.rows[0])
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(names)
            for r in self.rows:
                writer.writerow([f"{r[k]:.17g}" for k in names])


def run(state: SimulationState, T: float, observers: Iterable[Observer] | None = None) -> Trajectory:
    """Advance to time T, calling observers at t = 0 and every ``obs.every`` steps.

    The step size is fixed; T is reached by a final shortened step only when it is
    not a whole number of steps.  On blow-up the partial record is attached to the
    raised ``BlowupError``.
    """
    obs = list(state.observers) + list(observers or [])
    record = Trajectory()

    def notify(force: bool = False):
        for o in obs:
            if force or state.steps % o.every == 0:
                row = o(state)
                if row is not None:
                    record.rows.append(row)
        record.times.append(state.t)

    if state.steps == 0:
        notify(force=True)
    nsteps = int(math.floor((T - state.t) / state.dt + 1e-9))
    try:
        for _ in range(nsteps):
            step(state)
            if any(state.steps % o.every == 0 for o in obs):
                notify()
        rest = T - state.t
        if rest > 1e-12 * max(1.0, T):
            step(state, rest)
            notify(force=True)
    except BlowupError as exc:
        record.blowup_time = exc.last_time
        raise BlowupError(exc.last_time, record) from None
    return record


def save_snapshot(stem: str | Path, state: SimulationState, meta: dict | None = None) -> None:
    stem = Path(stem)
    stem.parent.mkdir(parents=True, exist_ok=True)
    np.savez(stem.with_suffix(".npz"), u=state.u, reference=state.reference)
    side = {"t": state.t, "dt": state.dt, "steps": state.steps, "shape": list(state.shape),
            "lengths": list(state.lengths), "cells": state.cells, "points_per_cell": state.points_per_cell,
            "model": state.profile.model.fingerprint(), "X": state.profile.X}
    side.update(meta or {})
    stem.with_suffix(".json").write_text(json.dumps(side, indent=2, sort_keys=True))


# -- damping inequality --------------------------------------------------

@dataclass
class DampingRecord:
    theta: float
    C: float
    times: np.ndarray
    lhs: np.ndarray
    rhs: np.ndarray

    @property
    def holds(self) -> bool:
        return bool(np.isfinite(self.C))

    def to_dict(self) -> dict:
        return {"theta": self.theta, "C": self.C, "holds": self.holds, "samples": int(len(self.times))}


def damping_monitor(times: Sequence[float], v_hk_sq: Sequence[float], v_l2_sq: Sequence[float],
                    psi_hk_sq: Sequence[float], theta: float = 0.1) -> DampingRecord:
    """Smallest C with |v(t)|_{H^K}^2 <= C [e^{-theta t}|v(0)|^2 + int_0^t e^{-theta(t-s)} B(s) ds].

    B = |v|_{L^2}^2 + |(psi_t, psi_x)|_{H^K}^2.  The time integral uses the
    exponentially weighted trapezoid rule along the samples.  C is infinite
    when the left side is positive where the right side vanishes.
    """
    t = np.asarray(times, float)
    lhs = np.asarray(v_hk_sq, float)
    B = np.asarray(v_l2_sq, float) + np.asarray(psi_hk_sq, float)
    integral = np.zeros_like(t)
    for i in range(1, len(t)):
        h = t[i] - t[i - 1]
        decay = math.exp(-theta * h)
        integral[i] = decay * integral[i - 1] + 0.5 * h * (decay * B[i - 1] + B[i])
    rhs = np.exp(-theta * (t - t[0])) * lhs[0] + integral
    tol = 1e-300
    ratio = np.zeros_like(t)
    positive = rhs > tol
    ratio[positive] = lhs[positive] / rhs[positive]
    if np.any((~positive) & (lhs > tol)):
        C = math.inf
    else:
        C = float(ratio.max(initial=0.0))
    return DampingRecord(theta, C, t, lhs, rhs)
