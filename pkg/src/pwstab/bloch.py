"""Bloch operators on the unit cell and their spectra (Hill's method).

On the unit cell the linearization about a profile acts on Bloch data
v(y) e^{i xi_1 y + i xi~ . x~} as

    L_xi v = (d + i xi_1)^2 v - (d + i xi_1)(A^1 v) - i xi~ A^2 v - |xi~|^2 v

with periodic v.  In the Fourier basis e^{2 pi i k y} multiplication by A^j
becomes block-Toeplitz convolution with the coefficient FFTs.  Row/column
ordering of the Galerkin matrix is mode-major: index = mode_index * n + comp.
"""
from __future__ import annotations

import csv
import logging
import warnings
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np
import scipy.linalg as sla
from scipy.optimize import minimize, minimize_scalar

from .profile import WaveProfile, fourier_resample

logger = logging.getLogger(__name__)


class TruncationWarning(UserWarning):
    pass


@dataclass
class CoefficientTable:
    """Fourier coefficients of the unit-cell coefficient matrices A^j.

    ``hat[j][k + K]`` is the k-th coefficient of A^{j+1}, |k| <= K.
    """

    hat: list[np.ndarray]
    K: int
    tail: float

    @property
    def n(self) -> int:
        return self.hat[0].shape[-1]

    def block_toeplitz(self, j: int, ks: np.ndarray) -> np.ndarray:
        ks = np.asarray(ks)
        diff = ks[:, None] - ks[None, :]
        n = self.n
        blocks = np.zeros(diff.shape + (n, n), dtype=complex)
        ok = np.abs(diff) <= self.K
        blocks[ok] = self.hat[j][diff[ok] + self.K]
        N = len(ks)
        return blocks.transpose(0, 2, 1, 3).reshape(N * n, N * n)


def coefficient_table(profile: WaveProfile, K: int) -> CoefficientTable:
    """Coefficients up to |k| <= K, evaluated on a grid fine enough to avoid aliasing."""
    m_fine = max(profile.m, 2 * K + 2)
    m_fine += m_fine % 2
    U = fourier_resample(profile.samples, m_fine)
    hat = []
    for A in profile.coefficient_samples(U):
        c = np.fft.fft(A, axis=0) / m_fine
        k = np.fft.fftfreq(m_fine, 1.0 / m_fine).astype(int)
        full = np.zeros((2 * K + 1,) + A.shape[1:], dtype=complex)
        keep = np.abs(k) <= K
        full[k[keep] + K] = c[keep]
        hat.append(full)
    mags = np.linalg.norm(hat[0].reshape(2 * K + 1, -1), axis=1)
    ks = np.arange(-K, K + 1)
    total = mags.sum()
    tail = float(mags[np.abs(ks) > K // 2].sum() / total) if total > 0 else 0.0
    return CoefficientTable(hat, K, tail)


@dataclass
class BlochOperator:
    xi: np.ndarray
    M: int
    ks: np.ndarray
    matrix: np.ndarray
    coefficient_data: CoefficientTable

    @property
    def n(self) -> int:
        return self.coefficient_data.n

    def coefficients_of(self, values: np.ndarray) -> np.ndarray:
        """Galerkin vector of periodic samples (m, n) on the unit cell."""
        m = values.shape[0]
        c = np.fft.fft(values, axis=0) / m
        idx = np.mod(self.ks, m)
        return c[idx].reshape(-1)


class BlochFamily:
    """Caches the convolution blocks of one profile so L_xi is cheap for many xi."""

    def __init__(self, profile: WaveProfile, M: int, ks: Sequence[int] | None = None):
        if M < 8:
            raise ValueError("truncation M must be at least 8")
        self.profile = profile
        self.M = M
        self.ks = np.arange(-M, M + 1) if ks is None else np.asarray(ks, int)
        K = int(np.abs(self.ks).max()) * 2
        self.table = coefficient_table(profile, K)
        if self.table.tail > 1e-10:
            warnings.warn(f"coefficient tail mass {self.table.tail:.2e} beyond |k| > {K // 2}; "
                          "increase M or the profile resolution", TruncationWarning, stacklevel=2)
        self.n = profile.n
        self.d = profile.model.d
        self.conv = [self.table.block_toeplitz(j, self.ks) for j in range(len(self.table.hat))]

    def kappa(self, xi1: float) -> np.ndarray:
        return np.repeat(2 * np.pi * self.ks + xi1, self.n)

    def matrix(self, xi) -> np.ndarray:
        xi = np.atleast_1d(np.asarray(xi, float))
        kap = self.kappa(xi[0])
        tr2 = float(np.sum(xi[1:] ** 2))
        L = -1j * kap[:, None] * self.conv[0]
        L[np.diag_indices_from(L)] -= kap ** 2 + tr2
        for j in range(1, len(self.conv)):
            if xi[j] != 0.0:
                L -= 1j * xi[j] * self.conv[j]
        return L

    def first_order(self, omega) -> np.ndarray:
        """d/dr L_{r omega} at r = 0 (the operator multiplying |xi| in the expansion)."""
        omega = np.atleast_1d(np.asarray(omega, float))
        kap0 = self.kappa(0.0)
        L1 = -1j * omega[0] * self.conv[0]
        L1[np.diag_indices_from(L1)] -= 2 * omega[0] * kap0
        for j in range(1, len(self.conv)):
            L1 -= 1j * omega[j] * self.conv[j]
        return L1

    def operator(self, xi) -> BlochOperator:
        xi = np.atleast_1d(np.asarray(xi, float))
        if xi.size != self.d:
            raise ValueError(f"xi must have {self.d} components")
        return BlochOperator(xi, self.M, self.ks, self.matrix(xi), self.table)

    def eigvals(self, xi) -> np.ndarray:
        w = np.linalg.eigvals(self.matrix(xi))
        return w[np.argsort(-w.real)]

    def top_real(self, xi) -> float:
        return float(np.linalg.eigvals(self.matrix(xi)).real.max())


def assemble(profile: WaveProfile, xi, M: int = 32) -> BlochOperator:
    return BlochFamily(profile, M).operator(xi)


@dataclass
class SpectrumSlice:
    xi: np.ndarray
    eigenvalues: np.ndarray
    right: np.ndarray  # columns are right eigenvectors (unit L2 norm)
    left: np.ndarray   # columns q~ with <q~_i, q_j> = delta_ij
    residuals: np.ndarray
    ks: np.ndarray
    n: int
    near_jordan: bool = False
    gram_condition: float = 1.0
    matrix_norm: float = 1.0

    def values(self, vectors: np.ndarray, y) -> np.ndarray:
        """Periodic parts of eigenfunctions at unit-cell points y: shape (len(y), count, n)."""
        y = np.atleast_1d(np.asarray(y, float))
        E = np.exp(2j * np.pi * np.outer(y, self.ks))
        coeffs = vectors.reshape(len(self.ks), self.n, -1)
        return np.einsum("yk,kcj->yjc", E, coeffs)

    def biorthogonality_error(self) -> float:
        G = self.left.conj().T @ self.right
        return float(np.abs(G - np.eye(G.shape[0])).max())


def biorthonormalize(VL: np.ndarray, VR: np.ndarray) -> tuple[np.ndarray, float]:
    """Rescale left vectors so VL^H VR = I; returns (VL_new, cond of the Gram matrix)."""
    G = VL.conj().T @ VR
    cond = float(np.linalg.cond(G))
    VL_new = VL @ np.linalg.inv(G).conj().T
    return VL_new, cond


def spectrum(op: BlochOperator, count: int | None = None, eig_tol: float = 1e-10) -> SpectrumSlice:
    """Dense eigendecomposition; keeps the ``count`` rightmost eigenpairs."""
    A = op.matrix
    w, vl, vr = sla.eig(A, left=True, right=True)
    order = np.argsort(-w.real, kind="stable")
    count = len(w) if count is None else min(count, len(w))
    sel = order[:count]
    w, vl, vr = w[sel], vl[:, sel], vr[:, sel]
    vr = vr / np.linalg.norm(vr, axis=0)
    vl = vl / np.linalg.norm(vl, axis=0)
    pairing = np.abs(np.sum(vl.conj() * vr, axis=0))
    vl, cond = biorthonormalize(vl, vr)
    res = np.linalg.norm(A @ vr - vr * w, axis=0)
    mnorm = float(np.linalg.norm(A, 2))
    near_jordan = bool(pairing.min() < 1e-8 or cond > 1e8)
    if np.any(res > eig_tol * mnorm * 1e3):
        logger.warning("large eigen-residual %.2e at xi=%s", res.max(), op.xi)
    return SpectrumSlice(op.xi, w, vr, vl, res, op.ks, op.n, near_jordan, cond, mnorm)


# -- hypothesis checks ------------------------------------------------------

def zero_cluster(slice_: SpectrumSlice | np.ndarray, cluster_tol: float) -> np.ndarray:
    w = slice_.eigenvalues if isinstance(slice_, SpectrumSlice) else np.asarray(slice_)
    return np.flatnonzero(np.abs(w) <= cluster_tol)


def translation_residual(profile: WaveProfile, M: int = 32) -> float:
    """||L_0 U'|| / ||U'|| in the Galerkin space."""
    fam = BlochFamily(profile, M)
    op = fam.operator(np.zeros(fam.d))
    v = op.coefficients_of(profile.unit_derivative())
    return float(np.linalg.norm(op.matrix @ v) / np.linalg.norm(v))


def check_D3_semisimple(profile: WaveProfile, M: int = 32, cluster_tol: float | None = None,
                        crosscheck: bool = False) -> dict:
    """Count the zero cluster of L_0 and test that it is semisimple."""
    fam = BlochFamily(profile, M)
    op = fam.operator(np.zeros(fam.d))
    sl = spectrum(op)
    tol = 1e-6 * sl.matrix_norm if cluster_tol is None else cluster_tol
    idx = zero_cluster(sl, tol)
    n = profile.n
    count = len(idx)
    report = {
        "count": count,
        "expected": n + 1,
        "cluster_tol": tol,
        "cluster_eigenvalues": [complex(z) for z in sl.eigenvalues[idx]],
        "gap": float(np.abs(np.delete(sl.eigenvalues, idx)).min()) if count < len(sl.eigenvalues) else None,
        "precondition_failed": profile.is_constant,
    }
    if count:
        w_all, vl_all, vr_all = sla.eig(op.matrix, left=True, right=True)
        near = np.flatnonzero(np.abs(w_all) <= tol)
        VR = vr_all[:, near] / np.linalg.norm(vr_all[:, near], axis=0)
        VL = vl_all[:, near] / np.linalg.norm(vl_all[:, near], axis=0)
        G = VL.conj().T @ VR
        report["gram_condition"] = float(np.linalg.cond(G))
        report["semisimple"] = bool(report["gram_condition"] < 1e6)
    else:
        report["gram_condition"] = None
        report["semisimple"] = False
    report["holds"] = bool(count == n + 1 and report["semisimple"] and not profile.is_constant)
    if crosscheck:
        other = check_D3_semisimple(profile, 2 * M, cluster_tol=tol)
        report["count_2M"] = other["count"]
        report["consistent_2M"] = other["count"] == count
    return report


def _critical_eigs(fam: BlochFamily, xi, c: int) -> np.ndarray:
    w = np.linalg.eigvals(fam.matrix(xi))
    return w[np.argsort(np.abs(w))[:c]]


def check_D1_D2(profile: WaveProfile, xi_grid: Iterable | None = None, M: int = 32,
                eps_fit: float = 0.1, Xi: float = 3.0, n_grid: int = 129, refine: bool = True,
                cluster_size: int | None = None) -> dict:
    """Scan Re sigma(L_xi) over a frequency grid (D1) and fit the quadratic
    bound Re lambda <= -theta |xi|^2 on the critical branches (D2)."""
    fam = BlochFamily(profile, M)
    d = fam.d
    if xi_grid is None:
        g1 = np.linspace(-np.pi, np.pi, n_grid)
        if d == 1:
            pts = g1[:, None]
        else:
            g2 = np.linspace(-Xi, Xi, max(9, n_grid // 4) | 1)
            pts = np.array([(a, b) for a in g1 for b in g2])
    else:
        pts = np.atleast_2d(np.asarray(list(xi_grid), float))
        if pts.shape[1] != d:
            pts = pts.T
    pts = pts[np.linalg.norm(pts, axis=1) > 1e-12]
    tops = np.array([fam.top_real(p) for p in pts])
    i = int(np.argmax(tops))
    worst_xi, worst = pts[i].copy(), float(tops[i])
    if refine and len(pts) > 2:
        h = np.pi / (n_grid - 1)
        if d == 1:
            lo, hi = max(-np.pi, worst_xi[0] - h), min(np.pi, worst_xi[0] + h)
            if hi - lo > 1e-9:
                r = minimize_scalar(lambda x: -fam.top_real([x]), bounds=(lo, hi), method="bounded",
                                    options={"xatol": 1e-6})
                if -r.fun > worst and abs(r.x) > 1e-9:
                    worst, worst_xi = float(-r.fun), np.array([r.x])
        else:
            r = minimize(lambda x: -fam.top_real(x), worst_xi, method="Nelder-Mead",
                         options={"xatol": 1e-5, "fatol": 1e-10, "maxiter": 200})
            if -r.fun > worst and np.linalg.norm(r.x) > 1e-9:
                worst, worst_xi = float(-r.fun), r.x

    # (D2): quadratic bound along rays through the origin
    if cluster_size is None:
        w0 = np.linalg.eigvals(fam.matrix(np.zeros(d)))
        cluster_size = int(np.sum(np.abs(w0) <= 1e-6 * np.abs(w0).max()))
    cluster_size = max(cluster_size, 1)
    radii = np.geomspace(min(1e-2, eps_fit / 2), eps_fit, 12)
    angles = [np.array([1.0]), np.array([-1.0])] if d == 1 else [
        np.array([np.cos(a), np.sin(a)]) for a in np.linspace(0, 2 * np.pi, 8, endpoint=False)]
    ratios, rr, re = [], [], []
    for om in angles:
        for r in radii:
            lam = _critical_eigs(fam, r * om, cluster_size)
            ratios.extend(-lam.real / r ** 2)
            rr.extend([r] * len(lam))
            re.extend(lam.real)
    ratios = np.array(ratios)
    rr, re = np.array(rr), np.array(re)
    theta_ls = float(-np.sum(re * rr ** 2) / np.sum(rr ** 4))
    theta = float(ratios.min())

    # high transverse frequencies should be damped at least like -|xi~|^2 / 2
    hf = None
    if d == 2:
        samples = [np.array([a, b]) for a in (-np.pi, 0.0, 1.0) for b in (Xi, -Xi, 1.5 * Xi)]
        hf = float(max(fam.top_real(p) + 0.5 * p[1] ** 2 for p in samples))

    return {
        "D1": {"holds": bool(worst < 0.0), "max_real": worst, "margin": -worst,
               "worst_xi": [float(v) for v in worst_xi]},
        "D2": {"holds": bool(theta > 0.0), "theta": theta, "theta_ls": theta_ls,
               "cluster_size": cluster_size, "eps_fit": eps_fit},
        "high_frequency_excess": hf,
        "M": M,
    }


def write_spectrum_csv(path, slices: Sequence[SpectrumSlice], count: int | None = None) -> None:
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(["xi1", "xi2", "j", "re", "im", "residual"])
        for sl in slices:
            xi2 = sl.xi[1] if len(sl.xi) > 1 else 0.0
            c = len(sl.eigenvalues) if count is None else min(count, len(sl.eigenvalues))
            for j in range(c):
                lam = sl.eigenvalues[j]
                wr.writerow([f"{sl.xi[0]:.17g}", f"{xi2:.17g}", j, f"{lam.real:.17g}",
                             f"{lam.imag:.17g}", f"{sl.residuals[j]:.3e}"])
