"""Modulation phase extraction, perturbation norms and decay fits.

Given snapshots of a perturbed wave u~(x, t), the phase psi(x, t) is chosen
so that v = u~(x_1 + psi, x~, t) - u_bar(x_1) carries no translational
content.  Two surrogate gauges are offered:

* ``projection``: per period cell, psi solves
  <qt(. - psi), u~ - u_bar(. - psi)>_cell = 0, where qt is the adjoint
  translational zero mode normalized by <qt, u_bar'> = 1.  Linearizing gives
  the inner product of u~ - u_bar against qt.
* ``fit``: per window of two periods, psi minimizes the L^2 distance between
  u~ and u_bar(. - psi) (Newton on the scalar phase).

Both are exact on translates, equivariant under shifting data and windows
together, and return per-cell values low-pass filtered across cells with the
same smooth cutoff used for the low-frequency kernel, then upsampled
spectrally onto the simulation grid.
"""
from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .dispersion import StructureError, build_cluster, translational_mode
from .greenfn import bump
from .profile import WaveProfile, trig_eval
from .simulate import damping_monitor, hk_norm, lp_norm, physical_wavenumbers


class InsufficientWindowError(ValueError):
    pass


# -- periodic helpers ------------------------------------------------------

class _PeriodicFunction:
    """Trigonometric interpolant of unit-cell samples with its derivatives.

    Modes whose coefficients are below 1e-16 of the largest one are dropped,
    which keeps repeated evaluation at shifted points cheap.
    """

    def __init__(self, samples: np.ndarray, X: float):
        self.X = X
        m = samples.shape[0]
        c = np.fft.fft(samples, axis=0) / m
        k = np.fft.fftfreq(m, 1.0 / m)
        if m % 2 == 0:
            c[m // 2] = 0.0
        size = np.abs(c).max(axis=1)
        keep = size > 1e-16 * size.max() if size.max() > 0 else np.zeros(m, bool)
        keep[0] = True
        self._k = k[keep]
        self._c = c[keep]

    def __call__(self, x: np.ndarray, order: int = 0) -> np.ndarray:
        """Value (or physical x-derivative of given order) at physical points x."""
        x = np.asarray(x, float)
        w = 2j * np.pi * self._k
        coeffs = self._c * ((w / self.X) ** order)[:, None]
        E = np.exp(np.outer(x.ravel() / self.X, w))
        vals = (E @ coeffs).real
        return vals.reshape(x.shape + vals.shape[1:])


def adjoint_translational_samples(profile: WaveProfile, M: int = 24, m: int | None = None) -> np.ndarray:
    """Real samples of qt on the unit cell, normalized so int_0^1 qt . U' dy = 1
    and qt annihilates the other right zero modes of the critical cluster."""
    if profile.is_constant or np.abs(profile.unit_derivative()).max() < 1e-12:
        raise StructureError("a constant state has no translational mode")
    omega = np.zeros(profile.model.d)
    omega[0] = 1.0
    cluster = build_cluster(profile, M, omega)
    _, _, qt = translational_mode(cluster, profile)
    fam = cluster.basis.family
    m = profile.m if m is None else m
    y = np.arange(m) / m
    coeffs = qt.reshape(len(fam.ks), fam.n)
    vals = np.exp(2j * np.pi * np.outer(y, fam.ks)) @ coeffs
    # the inner product is conjugate-linear in its first slot
    return np.conj(vals).real


def _shift_eval(u: np.ndarray, shift: np.ndarray, L: float) -> np.ndarray:
    """u(x + shift(x)) along axis 0 by band-limited interpolation.

    ``u`` has shape (N1, ..., n) and ``shift`` shape (N1, ...).  Only modes
    below N1/3 (the dealiased band of the simulation) are used.  The mean
    shift is applied exactly in Fourier space; the remainder is summed as a
    Taylor series in spectral derivatives when it is small compared with the
    resolved wavelengths, and by direct evaluation otherwise.
    """
    N = u.shape[0]
    j = np.fft.fftfreq(N, 1.0 / N)
    k = 2 * np.pi * j / L
    band = np.abs(j) < N / 3.0
    shape = (N,) + (1,) * (u.ndim - 1)
    mean = float(np.mean(shift))
    uh = np.fft.fft(u, axis=0) * (band * np.exp(1j * k * mean)).reshape(shape)
    rest = (shift - mean)[..., None]
    size = np.abs(uh).reshape(N, -1).max(axis=1)
    active = size > 1e-15 * size.max() if size.max() > 0 else np.zeros(N, bool)
    kmax = float(np.abs(k[active]).max(initial=0.0))
    if kmax * float(np.abs(rest).max(initial=0.0)) <= 3.0:
        out = np.fft.ifft(uh, axis=0).real
        scale = np.abs(out).max() + 1e-300
        term_h = uh
        power = np.ones_like(rest)
        for n in range(1, 80):
            term_h = term_h * (1j * k).reshape(shape)
            power = power * rest / n
            term = power * np.fft.ifft(term_h, axis=0).real
            out += term
            if np.abs(term).max() < 1e-17 * scale:
                break
        return out
    return _shift_eval_direct(u, shift, L)


def _shift_eval_direct(u: np.ndarray, shift: np.ndarray, L: float) -> np.ndarray:
    N = u.shape[0]
    j = np.fft.fftfreq(N, 1.0 / N)
    keep = np.abs(j) < N / 3.0
    k = 2 * np.pi * j[keep] / L
    uh = (np.fft.fft(u, axis=0) / N)[keep]
    x = np.arange(N) * L / N
    tail = u.shape[1:-1]
    out = np.empty(u.shape)
    for idx in np.ndindex(*tail):
        sl = (slice(None),) + idx
        pos = x + shift[sl]
        coeffs = uh[sl]
        col = np.empty((N, u.shape[-1]))
        for start in range(0, N, 512):
            E = np.exp(1j * np.outer(pos[start:start + 512], k))
            col[start:start + 512] = (E @ coeffs).real
        out[sl] = col
    return out


def _cell_filter(coarse: np.ndarray, X: float, lengths: Sequence[float], eps: float | None) -> np.ndarray:
    if eps is None:
        return coarse
    N1 = coarse.shape[0]
    xi = [2 * np.pi * np.fft.fftfreq(N1)]
    if coarse.ndim == 2:
        N2 = coarse.shape[1]
        xi.append(X * 2 * np.pi * np.fft.fftfreq(N2, lengths[1] / N2))
    mesh = np.meshgrid(*xi, indexing="ij")
    phi = bump(np.sqrt(sum(m ** 2 for m in mesh)), eps)
    return np.fft.ifftn(np.fft.fftn(coarse) * phi).real


def _upsample(coarse: np.ndarray, x0: float, X: float, x: np.ndarray) -> np.ndarray:
    N1 = coarse.shape[0]
    c = np.fft.fft(coarse, axis=0) / N1
    return trig_eval(c, np.mod((x - x0) / (N1 * X), 1.0)).real


# -- phase extraction ------------------------------------------------------

@dataclass
class PsiField:
    coarse: np.ndarray          # one value per period cell (per transverse line in d = 2)
    fine: np.ndarray            # spectrally upsampled onto the simulation grid
    flags: np.ndarray           # True where the fit fell back to the projection value
    method: str
    origin: float


def _cell_layout(N1: int, cells: int, origin_index: int):
    ppc = N1 // cells
    base = np.arange(cells)[:, None] * ppc + np.arange(ppc)[None, :] + origin_index
    return np.mod(base, N1), ppc


def _newton(F, dF, delta0: np.ndarray, tol: float, max_iter: int = 50, limit: float = np.inf):
    delta = delta0.copy()
    ok = np.zeros(delta.shape, bool)
    for _ in range(max_iter):
        val, der = F(delta), dF(delta)
        bad = ~(np.abs(der) > 0)
        step = np.where(bad, 0.0, val / np.where(bad, 1.0, der))
        delta = delta - np.where(ok, 0.0, step)
        ok |= (np.abs(step) < tol) & ~bad
        if ok.all():
            break
    ok &= np.abs(delta) < limit
    return delta, ok


def extract_psi(u: np.ndarray, profile: WaveProfile, lengths: Sequence[float], method: str = "projection",
                origin_index: int = 0, lowpass_eps: float | None = 0.2, adjoint: np.ndarray | None = None,
                guess: np.ndarray | None = None) -> PsiField:
    """Modulation phase of one snapshot ``u`` (shape (N1, [N2,] n)).

    Cells start at grid index ``origin_index``; shifting the data and the cell
    origin together by j grid points shifts psi by j * dx exactly.
    """
    if method not in ("projection", "fit"):
        raise ValueError(f"unknown extraction method {method!r}")
    X = profile.X
    N1 = u.shape[0]
    L1 = lengths[0]
    cells = int(round(L1 / X))
    if cells * X <= 0 or abs(cells * X - L1) > 1e-9 * L1 or N1 % cells:
        raise ValueError("domain must hold a whole number of periods with equal points per period")
    dx = L1 / N1
    x = np.arange(N1) * dx
    ubar = _PeriodicFunction(profile.samples, X)
    idx, ppc = _cell_layout(N1, cells, origin_index)
    # positions relative to the cell partition, unwrapped so each cell is contiguous
    xc = (np.arange(cells)[:, None] * ppc + np.arange(ppc)[None, :] + origin_index) * dx
    tail = u.shape[1:-1]
    coarse = np.zeros((cells,) + tail)
    flags = np.zeros((cells,) + tail, bool)
    # the fit falls back to the projection value, so both methods need qt
    qt_samples = adjoint if adjoint is not None else adjoint_translational_samples(profile)
    qt = _PeriodicFunction(qt_samples, X)
    for line in np.ndindex(*tail):
        data = u[(slice(None),) + line]
        cell_data = data[idx]                                   # (cells, ppc, n)
        start = guess[(slice(None),) + line] if guess is not None else _scan_start(cell_data, xc, ubar, X)
        proj, ok_p = _project(cell_data, xc, ubar, qt, dx, X, start)
        if method == "projection":
            coarse[(slice(None),) + line] = proj
            flags[(slice(None),) + line] = ~ok_p
            continue
        wdata, wx = _windows(data, idx, xc, ppc, dx, N1)
        fit, ok_f = _fit(wdata, wx, ubar, X, start)
        coarse[(slice(None),) + line] = np.where(ok_f, fit, proj)
        flags[(slice(None),) + line] = ~ok_f
    coarse = _cell_filter(coarse, X, lengths, lowpass_eps)
    x0 = (origin_index + ppc / 2) * dx
    fine = _upsample(coarse, x0, X, x)
    return PsiField(coarse, fine, flags, method, origin_index * dx)


def _scan_start(cell_data, xc, ubar, X, samples: int = 32):
    """Per-cell shift in [-X/2, X/2) minimizing the misfit to u_bar on a coarse grid."""
    shifts = (np.arange(samples) / samples - 0.5) * X
    misfit = np.array([np.sum((cell_data - ubar(xc - d)) ** 2, axis=(1, 2)) for d in shifts])
    return shifts[np.argmin(misfit, axis=0)]


def _project(cell_data, xc, ubar, qt, dx, X, start):
    w = dx / X

    def F(delta):
        y = xc - delta[:, None]
        return np.sum(qt(y) * (cell_data - ubar(y)), axis=(1, 2)) * w

    def dF(delta):
        y = xc - delta[:, None]
        return np.sum(-qt(y, 1) * (cell_data - ubar(y)) + qt(y) * ubar(y, 1), axis=(1, 2)) * w

    return _newton(F, dF, start.astype(float), 1e-13 * X, limit=X / 2)


def _windows(data, idx, xc, ppc, dx, N1):
    half = ppc // 2
    offs = np.arange(-half, ppc + half)
    base = idx[:, :1] + offs[None, :]
    wdata = data[np.mod(base, N1)]
    wx = xc[:, :1] + offs[None, :] * dx
    return wdata, wx


def _fit(wdata, wx, ubar, X, start):
    def G(delta):
        y = wx - delta[:, None]
        return np.sum((wdata - ubar(y)) * ubar(y, 1), axis=(1, 2))

    def dG(delta):
        y = wx - delta[:, None]
        d1 = ubar(y, 1)
        return np.sum(d1 * d1 - (wdata - ubar(y)) * ubar(y, 2), axis=(1, 2))

    delta, ok = _newton(G, dG, start.astype(float), 1e-13 * X, limit=X / 2)
    ok &= dG(delta) > 0
    return delta, ok


# -- modulation track ------------------------------------------------------

@dataclass
class ModulationTrack:
    times: np.ndarray
    lengths: tuple
    psi: np.ndarray            # (T, N1[, N2])
    psi_t: np.ndarray
    psi_x: np.ndarray          # gradient, trailing axis of length d
    v: np.ndarray              # (T, N1[, N2], n)
    u: np.ndarray              # the snapshots themselves
    reference: np.ndarray      # tiled u_bar on the simulation grid
    method: str
    flags: np.ndarray
    K: int
    e0: float = 0.0
    rows: list = field(default_factory=list)

    @property
    def d(self) -> int:
        return len(self.lengths)

    @property
    def cell_volume(self) -> float:
        return float(np.prod([L / N for L, N in zip(self.lengths, self.psi.shape[1:])]))

    def column(self, name: str) -> np.ndarray:
        return np.array([r[name] for r in self.rows])

    def write_csv(self, path: str | Path) -> None:
        names = ["t", "v_L2", "v_Linf", "v_HK", "psi_L2", "psi_Linf", "psi_x_L2", "psi_t_L2", "zeta"]
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(names)
            for r in self.rows:
                writer.writerow([f"{r[k]:.17g}" for k in names])


def _gradient(field_: np.ndarray, lengths: Sequence[float]) -> np.ndarray:
    d = len(lengths)
    ks = physical_wavenumbers(field_.shape[:d], lengths)
    mesh = np.meshgrid(*ks, indexing="ij")
    fh = np.fft.fftn(field_, axes=tuple(range(d)))
    out = []
    for k in mesh:
        sh = k.reshape(k.shape + (1,) * (field_.ndim - d))
        out.append(np.fft.ifftn(1j * sh * fh, axes=tuple(range(d))).real)
    return np.stack(out, axis=-1)


def build_track(snapshots: Sequence[tuple[float, np.ndarray]], profile: WaveProfile, lengths: Sequence[float],
                method: str = "projection", K: int | None = None, lowpass_eps: float | None = 0.2,
                e0: float = 0.0) -> ModulationTrack:
    """Extract psi on every snapshot and tabulate the norm quantities."""
    if len(snapshots) < 3:
        raise ValueError("need at least three snapshots for time derivatives")
    lengths = tuple(float(L) for L in lengths)
    times = np.array([t for t, _ in snapshots], float)
    U = np.stack([u for _, u in snapshots])
    if profile.is_constant:
        # no translational mode: the whole perturbation is v and psi vanishes
        psi = np.zeros(U.shape[:-1])
        flags = [np.zeros(1, bool)] * len(U)
    else:
        adj = adjoint_translational_samples(profile)
        psis, flags = [], []
        guess = None
        for u in U:
            pf = extract_psi(u, profile, lengths, method, lowpass_eps=lowpass_eps, adjoint=adj, guess=guess)
            psis.append(pf.fine)
            flags.append(pf.flags)
            guess = pf.coarse
        psi = np.stack(psis)
    psi_t = np.gradient(psi, times, axis=0, edge_order=2)
    psi_x = np.stack([_gradient(p, lengths) for p in psi])
    ref = _reference(profile, U.shape[1:], lengths)
    v = np.stack([_shift_eval(u, p, lengths[0]) for u, p in zip(U, psi)]) - ref
    K = min(profile.model.smoothness_order, 4) if K is None else K
    track = ModulationTrack(times, lengths, psi, psi_t, psi_x, v, U, ref, method, np.stack(flags), K, e0)
    track.rows = norm_table(track)
    return track


def _reference(profile: WaveProfile, shape, lengths) -> np.ndarray:
    N1 = shape[0]
    x = np.arange(N1) * lengths[0] / N1
    ref = profile.evaluate(x / profile.X)
    if len(shape) == 3:
        ref = np.broadcast_to(ref[:, None, :], shape)
    return ref


def linearized_v(track: ModulationTrack, profile: WaveProfile, i: int) -> np.ndarray:
    """First-order expansion u~ - u_bar + u_bar' psi of the perturbation variable."""
    ref = track.reference
    N1 = track.u.shape[1]
    x = np.arange(N1) * track.lengths[0] / N1
    dref = _PeriodicFunction(profile.samples, profile.X)(x, 1)
    if track.d == 2:
        dref = dref[:, None, :]
    return track.u[i] - ref + dref * track.psi[i][..., None]


def norm_table(track: ModulationTrack) -> list[dict]:
    rows = []
    vol = track.cell_volume
    zeta = 0.0
    for i, t in enumerate(track.times):
        v = track.v[i]
        psi = track.psi[i][..., None]
        px = track.psi_x[i]
        pt = track.psi_t[i][..., None]
        deriv = np.concatenate([pt, px], axis=-1)
        v_hk = hk_norm(v, track.lengths, track.K)
        d_hk = hk_norm(deriv, track.lengths, track.K)
        combined = math.sqrt(v_hk ** 2 + d_hk ** 2)
        zeta = max(zeta, combined * (1 + t) ** (0.25 if track.d == 1 else 0.5))
        rows.append({
            "t": float(t),
            "v_L2": lp_norm(v, vol, 2), "v_Linf": lp_norm(v, vol, np.inf), "v_HK": v_hk,
            "psi_L2": lp_norm(psi, vol, 2), "psi_Linf": lp_norm(psi, vol, np.inf),
            "psi_x_L2": lp_norm(px, vol, 2), "psi_t_L2": lp_norm(pt, vol, 2),
            "psi_deriv_L2": lp_norm(deriv, vol, 2), "psi_deriv_HK": d_hk,
            "psi_x_Linf": float(np.abs(px).max()),
            "perturbation_L2": lp_norm(track.u[i] - track.reference, vol, 2),
            "perturbation_Linf": lp_norm(track.u[i] - track.reference, vol, np.inf),
            "zeta": zeta,
        })
    return rows


# -- perturbation equation -------------------------------------------------

def _fluxes_and_jacobians(profile: WaveProfile, u: np.ndarray):
    model = profile.model
    eye = np.eye(u.shape[-1])
    g = [model.directional_flux(u, profile.nu) - profile.s * u]
    J = [model.directional_jacobian(u, profile.nu) - profile.s * eye]
    for perp in profile.transverse_directions():
        g.append(model.directional_flux(u, perp))
        J.append(model.directional_jacobian(u, perp))
    return g, J


def _apply(J: np.ndarray, v: np.ndarray) -> np.ndarray:
    return np.einsum("...ij,...j->...i", J, v)


def _dx(field_: np.ndarray, lengths, axis: int, order: int = 1) -> np.ndarray:
    d = len(lengths)
    N = field_.shape[axis]
    k = 2 * np.pi * np.fft.fftfreq(N, lengths[axis] / N)
    mult = (1j * k) ** order
    if order % 2 == 1 and N % 2 == 0:
        mult[N // 2] = 0.0
    shape = [1] * field_.ndim
    shape[axis] = N
    out = np.fft.ifft(np.fft.fft(field_, axis=axis) * mult.reshape(shape), axis=axis)
    return out.real


@dataclass
class ResidualReport:
    times: np.ndarray
    relative: np.ndarray          # residual / largest term, per interior snapshot
    terms: dict                   # name -> per-time L2 norms

    @property
    def max_relative(self) -> float:
        return float(self.relative.max(initial=0.0))

    def to_dict(self) -> dict:
        return {"times": self.times.tolist(), "relative": self.relative.tolist(),
                "max_relative": self.max_relative,
                "terms": {k: np.asarray(v).tolist() for k, v in self.terms.items()}}


def residual_equation_check(track: ModulationTrack, profile: WaveProfile) -> ResidualReport:
    """Discrete residual of the perturbation equation along the track.

    d = 1 evaluates  v_t - L v - [(d_t - L)(u_bar' psi) - Q_x + R_x + (d_t + d_x^2) S]
    with Q = g(u_bar + v) - g(u_bar) - dg(u_bar) v,
    R = v psi_t + v psi_xx + (u_bar_x + v_x) psi_x^2 / (1 + psi_x) and S = -v psi_x.
    d = 2 evaluates the identity for u = u~(x_1 + psi, x_2, t) from which the
    two-dimensional perturbation equation is derived:
    u_t + sum_j g^j(u)_{x_j} - Delta u = u~_1 psi_t + sum_j [dg^j(u~) u~_1 - u~_{1j}] psi_{x_j}
    - sum_j (u~_1 psi_{x_j})_{x_j}, with u~ and its derivatives taken at the shifted points.
    Time derivatives are centered differences of the snapshots, so the residual
    is second order in the snapshot spacing.  Interior snapshots only.
    """
    L = track.lengths
    vol = track.cell_volume
    t = track.times
    if track.d == 1:
        return _residual_1d(track, profile, L, vol, t)
    return _residual_2d(track, profile, L, vol, t)


def _residual_1d(track, profile, L, vol, t):
    ref = track.reference
    N1 = ref.shape[0]
    x = np.arange(N1) * L[0] / N1
    ub_x = _PeriodicFunction(profile.samples, profile.X)(x, 1)
    _, (A,) = _fluxes_and_jacobians(profile, ref)
    g_ref = _fluxes_and_jacobians(profile, ref)[0][0]

    def Lop(w):
        return _dx(w, L, 0, 2) - _dx(_apply(A, w), L, 0)

    v_t = np.gradient(track.v, t, axis=0, edge_order=2)
    S_all = -track.v * track.psi_x[..., 0][..., None]
    S_t = np.gradient(S_all, t, axis=0, edge_order=2)
    names = ["v_t", "Lv", "source", "Q_x", "R_x", "S_terms"]
    terms = {k: [] for k in names}
    rel = []
    for i in range(1, len(t) - 1):
        v = track.v[i]
        psi = track.psi[i][:, None]
        psi_t = track.psi_t[i][:, None]
        psi_x = track.psi_x[i][..., 0][:, None]
        psi_xx = _dx(track.psi[i], L, 0, 2)[:, None]
        up_psi = ub_x * psi
        source = ub_x * psi_t - Lop(up_psi)
        g_new, _ = _fluxes_and_jacobians(profile, ref + v)
        Q = g_new[0] - g_ref - _apply(A, v)
        v_x = _dx(v, L, 0)
        R = v * psi_t + v * psi_xx + (ub_x + v_x) * psi_x ** 2 / (1 + psi_x)
        S = S_all[i]
        parts = {"v_t": v_t[i], "Lv": Lop(v), "source": source, "Q_x": _dx(Q, L, 0),
                 "R_x": _dx(R, L, 0), "S_terms": S_t[i] + _dx(S, L, 0, 2)}
        res = parts["v_t"] - parts["Lv"] - (parts["source"] - parts["Q_x"] + parts["R_x"] + parts["S_terms"])
        norms = {k: lp_norm(p, vol, 2) for k, p in parts.items()}
        for k in names:
            terms[k].append(norms[k])
        scale = max(norms.values())
        rel.append(lp_norm(res, vol, 2) / scale if scale > 0 else 0.0)
    return ResidualReport(t[1:-1], np.array(rel), {k: np.array(v) for k, v in terms.items()})


def _residual_2d(track, profile, L, vol, t):
    U = track.reference[None] + track.v
    U_t = np.gradient(U, t, axis=0, edge_order=2)
    names = ["u_t", "flux", "diffusion", "rhs"]
    terms = {k: [] for k in names}
    rel = []
    for i in range(1, len(t) - 1):
        u = U[i]
        raw = track.u[i]
        psi = track.psi[i]
        grad = [track.psi_x[i][..., j] for j in range(2)]
        g, _ = _fluxes_and_jacobians(profile, u)
        flux = sum(_dx(gj, L, j) for j, gj in enumerate(g))
        diffusion = sum(_dx(u, L, j, 2) for j in range(2))
        # derivatives of u~ evaluated at the shifted points
        r1 = _shift_eval(_dx(raw, L, 0), psi, L[0])
        r1j = [_shift_eval(_dx(_dx(raw, L, 0), L, j), psi, L[0]) for j in range(2)]
        shifted = _shift_eval(raw, psi, L[0])
        _, J = _fluxes_and_jacobians(profile, shifted)
        rhs = r1 * track.psi_t[i][..., None]
        for j in range(2):
            rhs = rhs + (_apply(J[j], r1) - r1j[j]) * grad[j][..., None]
            rhs = rhs - _dx(r1 * grad[j][..., None], L, j)
        parts = {"u_t": U_t[i], "flux": flux, "diffusion": diffusion, "rhs": rhs}
        res = U_t[i] + flux - diffusion - rhs
        norms = {k: lp_norm(p, vol, 2) for k, p in parts.items()}
        for k in names:
            terms[k].append(norms[k])
        scale = max(norms.values())
        rel.append(lp_norm(res, vol, 2) / scale if scale > 0 else 0.0)
    return ResidualReport(t[1:-1], np.array(rel), {k: np.array(v) for k, v in terms.items()})


def quadratic_bound_check(track: ModulationTrack, profile: WaveProfile, thetas: int = 9) -> dict:
    """Compare |Q| with c |v|^2, c = (1/2) max over theta of |D^2 g(u_bar + theta v)[e, e]|
    (e = v / |v|), which bounds Q by Taylor's formula with integral remainder.
    Points with |v| below 1e-6 are skipped since Q is then pure rounding."""
    worst_ratio, worst_c, violations = 0.0, 0.0, 0
    ref = track.reference
    g_ref, J = _fluxes_and_jacobians(profile, ref)
    for v in track.v:
        mag = np.linalg.norm(v, axis=-1)
        keep = mag > 1e-6
        if not keep.any():
            continue
        g_new, _ = _fluxes_and_jacobians(profile, ref + v)
        Q = g_new[0] - g_ref[0] - _apply(J[0], v)
        # rounding in the flux difference, which Taylor's bound does not see
        floor = 1e-13 * (1.0 + np.linalg.norm(g_ref[0], axis=-1))
        e = np.where(keep[..., None], v / np.where(keep, mag, 1.0)[..., None], 0.0)
        h = 1e-4
        curv = np.zeros(mag.shape)
        for th in np.linspace(0.0, 1.0, thetas):
            base = ref + th * v
            gp = _fluxes_and_jacobians(profile, base + h * e)[0][0]
            gm = _fluxes_and_jacobians(profile, base - h * e)[0][0]
            g0 = _fluxes_and_jacobians(profile, base)[0][0]
            curv = np.maximum(curv, np.linalg.norm(gp - 2 * g0 + gm, axis=-1) / h ** 2)
        c = 0.5 * curv * 1.05 + 1e-9
        qn = np.linalg.norm(Q, axis=-1)
        ratio = np.where(keep, qn / np.where(keep, mag, 1.0) ** 2, 0.0)
        worst_ratio = max(worst_ratio, float(ratio.max()))
        worst_c = max(worst_c, float(c.max()))
        violations += int(np.sum(keep & (qn > c * mag ** 2 + floor)))
    return {"max_ratio": worst_ratio, "taylor_constant": worst_c, "violations": violations,
            "holds": violations == 0}


# -- decay fits --------------------------------------------------------------

# (exponent, comparison, tolerance): "match" requires |slope - exponent| <= tol,
# "upper" requires slope <= exponent + tol (the estimate is only an upper bound).
PREDICTED_EXPONENTS = {
    1: {"v_L2": (-0.25, "match", 0.08), "v_Linf": (-0.5, "match", 0.1), "v_HK": (-0.25, "upper", 0.08),
        "psi_deriv_L2": (-0.25, "match", 0.08), "psi_x_L2": (-0.25, "upper", 0.08),
        "psi_t_L2": (-0.25, "upper", 0.08), "psi_L2": (0.25, "upper", 0.08), "psi_Linf": (0.0, "upper", 0.1),
        "perturbation_L2": (0.25, "upper", 0.08), "perturbation_Linf": (0.0, "upper", 0.1)},
    2: {"v_L2": (-0.5, "match", 0.1), "v_Linf": (-1.0, "upper", 0.1), "v_HK": (-0.5, "upper", 0.1),
        "psi_deriv_L2": (-1.0, "upper", 0.1), "psi_x_L2": (-1.0, "upper", 0.1), "psi_t_L2": (-1.0, "upper", 0.1),
        "psi_L2": (-0.5, "upper", 0.1), "psi_Linf": (-1.0, "upper", 0.1),
        "perturbation_L2": (-0.5, "upper", 0.1), "perturbation_Linf": (-1.0, "upper", 0.1)},
}


@dataclass
class DecayFit:
    quantity: str
    p: float
    window: tuple
    exponent: float
    predicted_exponent: float
    tolerance: float
    comparison: str
    bounded: bool = True

    @property
    def verdict(self) -> bool:
        if not np.isfinite(self.exponent) or not self.bounded:
            return False
        if self.comparison == "match":
            return abs(self.exponent - self.predicted_exponent) <= self.tolerance
        return self.exponent <= self.predicted_exponent + self.tolerance

    def to_dict(self) -> dict:
        return {"quantity": self.quantity, "p": "inf" if np.isinf(self.p) else self.p,
                "window": list(self.window), "exponent": self.exponent, "predicted_exponent": self.predicted_exponent,
                "tolerance": self.tolerance, "comparison": self.comparison, "verdict": self.verdict}


def loglog_fit(times, values) -> float:
    """Least-squares slope of log(value) against log(1 + t)."""
    t = np.asarray(times, float)
    y = np.asarray(values, float)
    if len(t) < 2 or np.any(y <= 0) or not np.all(np.isfinite(y)):
        return float("nan")
    return float(np.polyfit(np.log1p(t), np.log(y), 1)[0])


def fit_decay(track_or_rows, quantity: str, window: tuple | None = None, d: int | None = None) -> DecayFit:
    """Slope of log(norm) against log(1 + t) on ``window`` (default [20, min(500, t_end)])."""
    rows = track_or_rows.rows if hasattr(track_or_rows, "rows") else list(track_or_rows)
    d = d if d is not None else getattr(track_or_rows, "d", 1)
    times = np.array([r["t"] for r in rows])
    values = np.array([r[quantity] for r in rows])
    if window is None:
        window = (20.0, min(500.0, float(times.max())))
    t0, t1 = window
    sel = (times >= t0) & (times <= t1)
    if sel.sum() < 3:
        raise InsufficientWindowError(f"fewer than three samples in window {window}")
    ts = times[sel]
    if (1 + ts.max()) / (1 + ts.min()) < 10:
        raise InsufficientWindowError(f"window {window} covers less than one decade in 1 + t")
    exponent, comparison, tol = PREDICTED_EXPONENTS[d][quantity]
    p = np.inf if quantity.endswith("Linf") else 2.0
    slope = loglog_fit(ts, values[sel])
    bounded = bool(np.all(np.isfinite(values[sel])))
    return DecayFit(quantity, p, (float(t0), float(t1)), slope, exponent, tol, comparison, bounded)


def write_fit_report(path: str | Path, fits: Sequence[DecayFit], meta: dict | None = None) -> None:
    doc = {"fits": [f.to_dict() for f in fits]}
    doc.update(meta or {})
    Path(path).write_text(json.dumps(doc, indent=2, sort_keys=True))


# -- zeta and damping --------------------------------------------------------

@dataclass
class ZetaReport:
    times: np.ndarray
    zeta: np.ndarray
    e0: float
    C: float
    small_root: float
    below_small_root: bool
    closure_possible: bool
    monotone: bool

    def to_dict(self) -> dict:
        return {"e0": self.e0, "C": self.C, "small_root": self.small_root,
                "below_small_root": self.below_small_root, "closure_possible": self.closure_possible,
                "monotone": self.monotone, "zeta_max": float(self.zeta.max(initial=0.0))}


def zeta_track(track: ModulationTrack, e0: float | None = None) -> ZetaReport:
    """zeta(t) = sup_{s <= t} |(v, psi_t, psi_x)|_{H^K}(s) (1 + s)^{1/4} and the closure
    zeta <= C (E0 + zeta^2) with the smallest such C."""
    if track.d != 1:
        raise ValueError("zeta tracking is defined for d = 1")
    zeta = track.column("zeta")
    e0 = track.e0 if e0 is None else e0
    denom = e0 + zeta ** 2
    C = float(np.max(np.where(denom > 0, zeta / np.where(denom > 0, denom, 1.0), 0.0), initial=0.0))
    small_root = 2 * C * e0
    monotone = bool(np.all(np.diff(zeta) >= -1e-15))
    return ZetaReport(track.times, zeta, e0, C, small_root, bool(np.all(zeta <= small_root + 1e-15)),
                      bool(4 * C * C * e0 < 1), monotone)


def damping_from_track(track: ModulationTrack, theta: float = 0.1):
    """Evaluate the nonlinear damping inequality along the track."""
    v_hk = track.column("v_HK")
    v_l2 = track.column("v_L2")
    d_hk = track.column("psi_deriv_HK")
    return damping_monitor(track.times, v_hk ** 2, v_l2 ** 2, d_hk ** 2, theta)
