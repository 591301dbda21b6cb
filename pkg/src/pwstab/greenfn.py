"""Low-frequency Green kernels and the cancellation identity.

The low-frequency kernel is the inverse Bloch transform of the spectral
projection onto the critical cluster:

    G^I(x,t;y) = (2 pi)^-1 int e^{i xi (x-y)} phi(xi) sum_j e^{lambda_j t} q_j(xi,x) q~_j(xi,y)^* dxi

(d = 1 shown; d = 2 adds a transverse Fourier variable).  The xi integral is
a trapezoid sum on the uniform grid xi = 2 pi r / N, which is exactly the
Bloch inversion on a periodic superdomain of N cells; writing x = p + theta
with integer p turns the sum over xi into one FFT per (theta, y).  N is
chosen so the kernel has decayed long before wrapping around.

All lengths and times are in unit-cell scaling (period 1).
"""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import scipy.linalg as sla
from scipy.optimize import linear_sum_assignment

from .bloch import BlochFamily, biorthonormalize
from .dispersion import build_cluster, translational_mode
from .profile import WaveProfile

logger = logging.getLogger(__name__)


class BranchMatchingError(RuntimeError):
    pass


class GrowingKernelError(RuntimeError):
    pass


def bump(xi, eps: float = 0.2) -> np.ndarray:
    """C-infinity cutoff: 1 for |xi| <= eps, 0 for |xi| >= 2 eps."""
    r = np.abs(np.asarray(xi, float)) / eps

    def h(s):
        out = np.zeros_like(s)
        pos = s > 0
        out[pos] = np.exp(-1.0 / s[pos])
        return out

    a, b = h(2.0 - r), h(r - 1.0)
    return a / (a + b)


def time_cutoff(t: float) -> float:
    """Smooth chi with chi = 0 for t <= 1 and chi = 1 for t >= 2."""
    if t <= 1.0:
        return 0.0
    if t >= 2.0:
        return 1.0
    a, b = np.exp(-1.0 / (t - 1.0)), np.exp(-1.0 / (2.0 - t))
    return float(a / (a + b))


@dataclass
class KernelField:
    t: float
    x_grid: np.ndarray          # unit-cell coordinates, sorted
    y_grid: np.ndarray
    GI: np.ndarray | None       # (len(y), len(x), n, n)
    e_kernel: np.ndarray | None  # (len(y), len(x), n)  row vectors
    Gtilde: np.ndarray | None   # low-frequency part of G - U'(x) e
    cutoff_eps: float
    chi_applied: bool
    derivative: str = ""

    def save(self, stem: str | Path, meta: dict | None = None) -> None:
        stem = Path(stem)
        arrays = {k: v for k, v in (("GI", self.GI), ("e_kernel", self.e_kernel),
                                     ("Gtilde", self.Gtilde)) if v is not None}
        np.savez(stem.with_suffix(".npz"), x_grid=self.x_grid, y_grid=self.y_grid, **arrays)
        side = {"t": self.t, "eps": self.cutoff_eps, "chi_applied": self.chi_applied,
                "derivative": self.derivative, "arrays": sorted(arrays)}
        side.update(meta or {})
        stem.with_suffix(".json").write_text(json.dumps(side, indent=1))


@dataclass
class _Node:
    xi: float
    lam: np.ndarray      # (c,)
    right: np.ndarray    # Galerkin columns
    left: np.ndarray
    j1: int              # translational branch index


class LowFrequencyKernel:
    """Critical-cluster eigendata on the xi nodes of a periodic superdomain.

    ``cells`` is the superdomain length N (a power of two is fastest);
    ``x_per_cell`` / ``y_per_cell`` are the sampling densities inside a cell.
    """

    def __init__(self, profile: WaveProfile, cells: int = 1024, eps: float = 0.2, M: int = 16,
                 x_per_cell: int = 8, y_per_cell: int = 4, translational: bool = True):
        if profile.model.d != 1:
            raise NotImplementedError("use LowFrequencyKernel2D for d = 2")
        self.profile = profile
        self.eps = eps
        self.N = int(cells)
        self.fam = BlochFamily(profile, M)
        self.n = profile.n
        self.theta = np.arange(x_per_cell) / x_per_cell
        self.yc = np.arange(y_per_cell) / y_per_cell
        rr = np.fft.fftfreq(self.N, 1.0 / self.N)
        xis = 2 * np.pi * rr / self.N
        self.active = np.flatnonzero(np.abs(xis) < 2 * eps)
        self.xis = xis[self.active]
        self.phi = bump(self.xis, eps)
        self.translational = translational and not profile.is_constant
        self._solve_nodes()

    # -- eigendata ---------------------------------------------------------
    def _solve_nodes(self) -> None:
        fam = self.fam
        cl = build_cluster(self.profile, fam.M, 1.0, basis=None) if self.translational else None
        if cl is not None:
            self.c = cl.size
            j1, q1, _ = translational_mode(cl, self.profile)
            self._uprime = q1
        else:
            w0 = np.linalg.eigvals(fam.matrix([0.0]))
            self.c = int(np.sum(np.abs(w0) <= 1e-6 * np.abs(w0).max()))
        c = self.c
        order = np.argsort(np.abs(self.xis))
        nodes: dict[int, _Node] = {}
        for side in (1, -1):
            prev = None
            for idx in order:
                xi = self.xis[idx]
                if xi * side < 0 or (xi == 0 and side == -1):
                    continue
                w, vl, vr = sla.eig(fam.matrix([xi]), left=True, right=True)
                sel = np.argsort(np.abs(w))[:c]
                lam, R, L = w[sel], vr[:, sel], vl[:, sel]
                R = R / np.linalg.norm(R, axis=0)
                L = L / np.linalg.norm(L, axis=0)
                if xi == 0.0 and cl is not None:
                    # the xi -> 0 limits are the eigenvectors of Pi0 L1
                    R, lam = cl.q0.copy(), np.zeros(c, complex)
                    L = cl.qtilde0.copy()
                L, cond = biorthonormalize(L, R)
                j1 = -1
                if cl is not None:
                    if xi == 0.0:
                        j1 = int(np.argmax(np.abs(self._uprime.conj() @ cl.q0)))
                    else:
                        if prev is None:
                            cost = np.abs(lam[None, :] + 1j * cl.a[:, None] * xi)
                            _, cols = linear_sum_assignment(cost)
                            j1 = int(np.argmax(np.abs(self._uprime.conj() @ cl.q0)))
                        else:
                            Pn = prev.right / np.linalg.norm(prev.right, axis=0)
                            O = np.abs(Pn.conj().T @ R)
                            _, cols = linear_sum_assignment(-O)
                            if O[np.arange(c), cols].min() < 0.5:
                                raise BranchMatchingError(f"eigenbranch matching failed at xi={xi:.4g}")
                            j1 = prev.j1
                        lam, R, L = lam[cols], R[:, cols], L[:, cols]
                    # fix the scale of the translational branch: unit U' coefficient
                    q = R[:, j1]
                    sc = (self._uprime.conj() @ q) / (self._uprime.conj() @ self._uprime)
                    R[:, j1] = q / sc
                    L[:, j1] = L[:, j1] * np.conj(sc)
                node = _Node(float(xi), lam, R, L, j1)
                nodes[idx] = node
                prev = node
        self.nodes = [nodes[i] for i in range(len(self.xis))]
        self.lam = np.array([nd.lam for nd in self.nodes])
        self.max_growth = float(self.lam.real.max())
        self._tabulate()

    def _tabulate(self) -> None:
        ks = self.fam.ks
        n, c = self.n, self.c
        Ex = np.exp(2j * np.pi * np.outer(self.theta, ks))
        Ey = np.exp(2j * np.pi * np.outer(self.yc, ks))
        dk = 2j * np.pi * ks
        nx = len(self.nodes)
        R = np.array([nd.right.reshape(len(ks), n, c) for nd in self.nodes])  # (node,k,n,c)
        L = np.array([nd.left.reshape(len(ks), n, c) for nd in self.nodes])
        self.qx = np.einsum("xk,mkac->mcxa", Ex, R)
        self.dqx = np.einsum("xk,mkac->mcxa", Ex * dk, R)
        self.qy = np.einsum("yk,mkac->mcya", Ey, L)
        self.dqy = np.einsum("yk,mkac->mcya", Ey * dk, L)
        self.j1 = np.array([nd.j1 for nd in self.nodes])

    # -- kernels -------------------------------------------------------------
    def _check_growth(self, t: float) -> None:
        if self.max_growth * t > 600:
            raise GrowingKernelError(
                f"critical eigenvalues have Re lambda up to {self.max_growth:.3g}; "
                f"kernel overflows at t={t:g} (profile is spectrally unstable)")

    def _fft_cells(self, H: np.ndarray) -> np.ndarray:
        """(2 pi)^-1 sum over xi nodes with weight 2 pi / N -> values on cells p."""
        full = np.zeros((self.N,) + H.shape[1:], dtype=complex)
        full[self.active] = H
        G = np.fft.ifft(full, axis=0)  # includes 1/N
        return np.fft.fftshift(G, axes=0)

    def x_grid(self) -> np.ndarray:
        p = np.arange(-self.N // 2, self.N - self.N // 2)
        return (p[:, None] + self.theta[None, :]).ravel()

    def _weights(self, t: float, dt: int) -> np.ndarray:
        e = np.exp(self.lam * t)
        if dt:
            e = e * self.lam ** dt
        return self.phi[:, None] * e  # (node, c)

    def GI(self, t: float, dx: int = 0, dy: int = 0, dt: int = 0,
           exclude_translational: bool = False) -> np.ndarray:
        """G^I on (y, x) grids: shape (ny, N * nx, n, n)."""
        self._check_growth(t)
        xi = self.xis[:, None, None, None]
        th = self.theta[None, None, :, None]
        qx = self.qx if dx == 0 else (1j * xi * self.qx + self.dqx)
        if dx > 1:
            raise ValueError("dx <= 1 supported")
        qx = qx * np.exp(1j * xi * th)
        w = self._weights(t, dt)
        if exclude_translational:
            w = w.copy()
            w[np.arange(len(w)), self.j1] = 0.0
        out = []
        for iy, y in enumerate(self.yc):
            qy = np.conj(self.qy[:, :, iy, :])
            if dy:
                qy = qy * (-1j * self.xis[:, None, None]) + np.conj(self.dqy[:, :, iy, :])
            ph = np.exp(-1j * self.xis * y)
            H = np.einsum("mc,mcxa,mcb,m->mxab", w, qx, qy, ph)
            G = self._fft_cells(H)  # (N, nx, n, n)
            out.append(G.reshape(self.N * len(self.theta), self.n, self.n))
        return np.array(out)

    def e_tilde(self, t: float, dx: int = 0, dy: int = 0, dt: int = 0) -> np.ndarray:
        """Translational kernel e~ as row vectors: shape (ny, N * nx, n)."""
        if not self.translational:
            raise RuntimeError("no translational branch for this profile")
        self._check_growth(t)
        m = np.arange(len(self.nodes))
        lam1 = self.lam[m, self.j1]
        w = self.phi * np.exp(lam1 * t) * (lam1 ** dt if dt else 1.0)
        if dx:
            w = w * (1j * self.xis) ** dx
        phx = np.exp(1j * self.xis[:, None] * self.theta[None, :])  # (m, x)
        out = []
        for iy, y in enumerate(self.yc):
            qt = self.qy[m, self.j1, iy, :]
            if dy:
                qt_c = np.conj(qt) * (-1j * self.xis[:, None]) + np.conj(self.dqy[m, self.j1, iy, :])
            else:
                qt_c = np.conj(qt)
            ph = np.exp(-1j * self.xis * y)
            H = np.einsum("m,mx,mb->mxb", w * ph, phx, qt_c)
            out.append(self._fft_cells(H).reshape(self.N * len(self.theta), self.n))
        return np.array(out)

    def uprime_on_x(self) -> np.ndarray:
        """U'(x) (unit-cell derivative) on the x grid."""
        up = _periodic_eval(self.profile.unit_derivative(), self.theta)
        return np.tile(up, (self.N, 1))

    def G_residual(self, t: float, dy: int = 0, dt: int = 0) -> np.ndarray:
        """Low-frequency part of G~ = G - U'(x) e for t >= 2 (chi = 1)."""
        G = self.GI(t, dy=dy, dt=dt)
        e = time_cutoff(t) * self.e_tilde(t, dy=dy, dt=dt)
        up = self.uprime_on_x()
        return G - up[None, :, :, None] * e[:, :, None, :]


def _periodic_eval(samples: np.ndarray, y: np.ndarray) -> np.ndarray:
    from .profile import trig_eval
    c = np.fft.fft(samples, axis=0) / samples.shape[0]
    return trig_eval(c, y).real


def assemble_GI(profile: WaveProfile, t: float, cells: int = 1024, eps: float = 0.2, M: int = 16,
                x_per_cell: int = 8, y_per_cell: int = 4,
                kernel: LowFrequencyKernel | None = None) -> KernelField:
    K = kernel or LowFrequencyKernel(profile, cells, eps, M, x_per_cell, y_per_cell)
    G = K.GI(t)
    imag = float(np.abs(G.imag).max() / max(np.abs(G).max(), 1e-300))
    if imag > 1e-8:
        logger.warning("G^I has relative imaginary part %.2e", imag)
    return KernelField(t, K.x_grid(), K.yc, G.real, None, None, K.eps, False)


def assemble_e(profile: WaveProfile, t: float, cells: int = 1024, eps: float = 0.2, M: int = 16,
               x_per_cell: int = 8, y_per_cell: int = 4, dx: int = 0, dy: int = 0, dt: int = 0,
               kernel: LowFrequencyKernel | None = None) -> KernelField:
    K = kernel or LowFrequencyKernel(profile, cells, eps, M, x_per_cell, y_per_cell)
    chi = time_cutoff(t)
    if chi == 0.0:
        e = np.zeros((len(K.yc), K.N * len(K.theta), K.n))
    else:
        e = chi * K.e_tilde(t, dx=dx, dy=dy, dt=dt).real
    tag = "".join(f"d{a}{v}" for a, v in (("x", dx), ("y", dy), ("t", dt)) if v)
    return KernelField(t, K.x_grid(), K.yc, None, e, None, K.eps, True, tag)


# -- norms and fits ----------------------------------------------------------

def pointwise_norm(field_: np.ndarray) -> np.ndarray:
    """Matrix 2-norm (or vector 2-norm) at every grid point: (..., x, n[, n]) -> (..., x)."""
    if field_.ndim >= 2 and field_.shape[-1] == field_.shape[-2] and field_.ndim == 4:
        return np.linalg.norm(field_, ord=2, axis=(-2, -1))
    return np.linalg.norm(field_, axis=-1)


def sup_y_lp(field_: np.ndarray, dx: float, p: float) -> float:
    """sup over the y grid of the L^p(x) norm of the pointwise norm."""
    a = pointwise_norm(field_)
    if np.isinf(p):
        return float(a.max())
    return float(((a ** p).sum(axis=1) * dx).max() ** (1.0 / p))


@dataclass
class BoundFit:
    name: str
    p: float
    q: float
    r: int
    times: np.ndarray
    norms: np.ndarray
    slope: float
    predicted_slope: float
    tolerance: float

    @property
    def margin(self) -> float:
        return self.tolerance - abs(self.slope - self.predicted_slope)

    @property
    def passed(self) -> bool:
        return bool(np.isfinite(self.slope) and self.margin >= 0)


def loglog_slope(times, values) -> float:
    t = np.asarray(times, float)
    v = np.asarray(values, float)
    if np.any(~np.isfinite(v)) or np.any(v <= 0):
        return float("nan")
    return float(np.polyfit(np.log1p(t), np.log(v), 1)[0])


def kernel_exponent(kind: str, p: float, d: int = 1) -> float:
    """Exponent of sup_y ||kernel||_{L^p(x)} for the kernels of the decomposition."""
    base = -(d / 2) * (1 - (0.0 if np.isinf(p) else 1.0 / p))
    gains = {"GI": 0.0, "GI_x": 0.0, "GI_y": 0.0, "e": 0.0, "e_x": -0.5, "e_t": -0.5, "e_y": 0.0,
             "Gt": 0.0, "Gt_y": -0.5, "Gt_yy": -0.5, "Gt_t": -0.5}
    return base + gains[kind]


def decompose_and_fit(profile: WaveProfile, times: Sequence[float] | None = None,
                      ps: Sequence[float] = (2.0, np.inf), kinds: Sequence[str] | None = None,
                      cells: int | None = None, eps: float = 0.2, M: int = 16, x_per_cell: int = 8,
                      y_per_cell: int = 4, tolerance: float = 0.05,
                      kernel: LowFrequencyKernel | None = None) -> list[BoundFit]:
    """Fit log-log decay slopes of kernel norms over a time ladder."""
    times = np.geomspace(10, 1000, 9) if times is None else np.asarray(times, float)
    if kinds is None:
        kinds = ["GI"] if profile.is_constant else ["GI", "e", "e_x", "e_t", "e_y", "Gt", "Gt_y"]
    if kernel is None:
        if cells is None:
            cells = suggest_cells(profile, times.max(), M=M)
        kernel = LowFrequencyKernel(profile, cells, eps, M, x_per_cell, y_per_cell,
                                    translational=any(k != "GI" for k in kinds))
    dx = 1.0 / len(kernel.theta)
    norms = {(k, p): [] for k in kinds for p in ps}
    for t in times:
        try:
            fields = {}
            for k in kinds:
                fields[k] = _kernel_of_kind(kernel, k, t)
            for k in kinds:
                for p in ps:
                    norms[(k, p)].append(sup_y_lp(fields[k], dx, p))
        except GrowingKernelError as exc:
            logger.warning("%s", exc)
            for k in kinds:
                for p in ps:
                    norms[(k, p)].append(np.inf)
    out = []
    for (k, p), vals in norms.items():
        tol = tolerance if k in ("GI",) else 0.1
        slope = loglog_slope(times, vals)
        r = 2 if k.endswith("yy") else int("_" in k)
        out.append(BoundFit(k, p, 1.0, r, times, np.array(vals), slope, kernel_exponent(k, p), tol))
    return out


def _kernel_of_kind(K: LowFrequencyKernel, kind: str, t: float) -> np.ndarray:
    if kind == "GI":
        return K.GI(t).real
    if kind == "GI_x":
        return K.GI(t, dx=1).real
    if kind == "GI_y":
        return K.GI(t, dy=1).real
    chi = time_cutoff(t)
    if kind.startswith("e"):
        opts = {"e": {}, "e_x": {"dx": 1}, "e_t": {"dt": 1}, "e_y": {"dy": 1}}[kind]
        return chi * K.e_tilde(t, **opts).real
    opts = {"Gt": {}, "Gt_y": {"dy": 1}, "Gt_t": {"dt": 1}}[kind]
    return K.G_residual(t, **opts).real


def suggest_cells(profile: WaveProfile, t_max: float, M: int = 16, eps: float = 0.2) -> int:
    """Superdomain size so that kernels up to t_max do not wrap around."""
    fam = BlochFamily(profile, min(M, 12) if M >= 8 else 8)
    speed, diff = 0.0, 1.0
    critical = profile.n + (0 if profile.is_constant else 1)
    for xi in (0.05, -0.05):
        w = np.linalg.eigvals(fam.matrix([xi]))
        w = w[np.argsort(np.abs(w))][:critical]
        speed = max(speed, float(np.abs(w.imag).max() / abs(xi)))
        diff = max(diff, float(np.abs(w.real).max() / xi ** 2))
    reach = speed * t_max + 12 * np.sqrt(diff * t_max) + 8
    return int(2 ** np.ceil(np.log2(2 * reach)))


def write_fit_csv(path, fits: Sequence[BoundFit]) -> None:
    import csv
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(["name", "p", "q", "r", "slope", "predicted_slope", "margin"])
        for f in fits:
            wr.writerow([f.name, f.p, f.q, f.r, f"{f.slope:.6g}", f"{f.predicted_slope:.6g}", f"{f.margin:.6g}"])


# -- semigroup on a periodic superdomain ------------------------------------

class SuperdomainOperator:
    """Linearized operator on N periodic cells, block-diagonalized by Bloch frequency.

    Grid functions have shape (N * m, n) with m points per cell; the global
    FFT index j corresponds to Bloch node r = j mod N and cell mode k with
    j = r + N k.
    """

    def __init__(self, profile: WaveProfile, cells: int, M: int = 16):
        self.profile = profile
        self.N = int(cells)
        self.M = M
        self.m = 2 * M + 2
        self.n = profile.n
        self.fam = BlochFamily(profile, M)
        self.ks = self.fam.ks
        self.rr = np.fft.fftfreq(self.N, 1.0 / self.N).astype(int)
        self.xis = 2 * np.pi * self.rr / self.N
        self.blocks = [self.fam.matrix([xi]) for xi in self.xis]
        self._eig = None
        Ntot = self.N * self.m
        jj = np.fft.fftfreq(Ntot, 1.0 / Ntot).astype(int)
        self._index = np.zeros((self.N, len(self.ks)), dtype=int)
        # the grid starts at -N/2, which multiplies mode j by (-1)^j
        self._sign = ((-1.0) ** (jj % 2))[:, None]
        lookup = {int(j): i for i, j in enumerate(jj)}
        for a, r in enumerate(self.rr):
            for b, k in enumerate(self.ks):
                self._index[a, b] = lookup[int(r + self.N * k)]

    @property
    def grid(self) -> np.ndarray:
        return np.arange(self.N * self.m) / self.m - self.N / 2

    def forward(self, g: np.ndarray) -> np.ndarray:
        """Grid samples (N m, n) -> Bloch coefficients (N, (2M+1) n)."""
        c = np.fft.fft(g, axis=0) / (self.N * self.m) * self._sign
        return c[self._index].reshape(self.N, -1)

    def inverse(self, B: np.ndarray) -> np.ndarray:
        Ntot = self.N * self.m
        c = np.zeros((Ntot, self.n), dtype=complex)
        c[self._index] = B.reshape(self.N, len(self.ks), self.n)
        return np.fft.ifft(c * self._sign, axis=0) * Ntot

    def apply(self, B: np.ndarray) -> np.ndarray:
        return np.array([A @ b for A, b in zip(self.blocks, B)])

    def eig(self):
        if self._eig is None:
            self._eig = []
            for A in self.blocks:
                w, V = np.linalg.eig(A)
                self._eig.append((w, V, np.linalg.inv(V)))
        return self._eig

    def propagate(self, B: np.ndarray, t: float) -> np.ndarray:
        return np.array([sla.expm(t * A) @ b for A, b in zip(self.blocks, B)])

    def max_growth(self) -> float:
        return float(max(w.real.max() for w, _, _ in self.eig()))


def _linear_panel_weights(z: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Integrals of e^{z u} u and e^{z u} (1 - u) over u in [0, 1]."""
    z = np.asarray(z, dtype=complex)
    small = np.abs(z) < 1e-3
    zs = np.where(small, 1.0, z)
    ez = np.exp(zs)
    w_start = (ez * (zs - 1.0) + 1.0) / zs ** 2
    w_end = (ez - 1.0 - zs) / zs ** 2
    zz = np.where(small, z, 0.0)
    w_start = np.where(small, 0.5 + zz / 3 + zz ** 2 / 8 + zz ** 3 / 30, w_start)
    w_end = np.where(small, 0.5 + zz / 6 + zz ** 2 / 24 + zz ** 3 / 120, w_end)
    return w_start, w_end


def cancellation_test(profile: WaveProfile, f: Callable[[np.ndarray, float], np.ndarray], T: float,
                      f_s: Callable[[np.ndarray, float], np.ndarray] | None = None, cells: int = 32,
                      M: int = 12, steps: int = 64, op: SuperdomainOperator | None = None) -> float:
    """Relative L2 residual of  int_0^T int G(x,T-s;y)(d_s - L_y) f(y,s) dy ds = f(x,T).

    The semigroup is applied exactly in the eigenbasis of each Bloch block.
    The source (d_s - L) f is interpolated linearly in s on ``steps`` panels
    and each panel is integrated exactly against e^{lambda (T - s)}, so the
    quadrature error is second order in T / steps and stiff modes are
    handled without a step restriction.  ``f(y, s)`` receives unit-cell
    coordinates of shape (N m,) and returns (N m, n).
    """
    if T <= 0 or steps < 2:
        raise ValueError("need T > 0 and at least two time steps")
    op = op or SuperdomainOperator(profile, cells, M)
    y = op.grid
    if f_s is None:
        h = 1e-5 * max(T, 1.0)
        f_s = lambda yy, s: (f(yy, s + h) - f(yy, s - h)) / (2 * h)  # noqa: E731
    s_nodes = np.linspace(0.0, T, steps + 1)
    hs = T / steps
    eig = op.eig()
    sources = []
    for s in s_nodes:
        Fb = op.forward(f(y, s))
        Sb = op.forward(f_s(y, s))
        src = Sb - op.apply(Fb)
        sources.append([Vi @ src[a] for a, (_, _, Vi) in enumerate(eig)])
    result = []
    for a, (w, V, Vi) in enumerate(eig):
        w_start, w_end = _linear_panel_weights(w * hs)
        acc = np.zeros(len(w), complex)
        for k in range(steps):
            decay = np.exp(w * (T - s_nodes[k + 1]))
            acc += hs * decay * (w_start * sources[k][a] + w_end * sources[k + 1][a])
        result.append(V @ acc)
    result = np.array(result)
    target = op.forward(f(y, T))
    denom = np.linalg.norm(target)
    if denom == 0.0:
        return float(np.linalg.norm(result))
    return float(np.linalg.norm(result - target) / denom)
