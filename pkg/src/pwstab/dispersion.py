"""Critical eigenvalue surfaces near xi = 0 and first-order (Whitham) speeds.

Expanding L_{r omega} = L_0 + r L^1_omega + O(r^2), the n+1 critical
eigenvalues behave like -i a_j(omega) r where the a_j are eigenvalues of
i * (Pi_0 L^1 restricted to ker L_0).  Here L^1 is taken as the exact
r-derivative of the Galerkin matrix, so it already carries the factor i
that turns the transport operator into a generator.
"""
from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import scipy.linalg as sla
from scipy.optimize import linear_sum_assignment

from .bloch import BlochFamily, biorthonormalize
from .profile import WaveProfile


class StructureError(RuntimeError):
    pass


@dataclass
class ZeroEigenspace:
    """Right/left bases of the zero cluster of L_0 with Lb^H R = I."""

    family: BlochFamily
    right: np.ndarray
    left: np.ndarray
    eigenvalues: np.ndarray
    cluster_tol: float
    gram_condition: float

    @property
    def size(self) -> int:
        return self.right.shape[1]

    def projection(self) -> np.ndarray:
        return self.right @ self.left.conj().T

    def remixed(self, rng: np.random.Generator) -> "ZeroEigenspace":
        """Same eigenspace in a randomly mixed basis."""
        c = self.size
        T = rng.normal(size=(c, c)) + 1j * rng.normal(size=(c, c))
        R = self.right @ T
        Lb = self.left @ np.linalg.inv(T).conj().T
        return ZeroEigenspace(self.family, R, Lb, self.eigenvalues, self.cluster_tol, self.gram_condition)


def zero_eigenspace(profile: WaveProfile, M: int = 32, cluster_tol: float | None = None,
                    family: BlochFamily | None = None) -> ZeroEigenspace:
    fam = BlochFamily(profile, M) if family is None else family
    A = fam.matrix(np.zeros(fam.d))
    w, vl, vr = sla.eig(A, left=True, right=True)
    tol = 1e-6 * np.linalg.norm(A, 2) if cluster_tol is None else cluster_tol
    idx = np.flatnonzero(np.abs(w) <= tol)
    if idx.size == 0:
        raise StructureError("L_0 has no zero cluster")
    R = vr[:, idx] / np.linalg.norm(vr[:, idx], axis=0)
    Lb = vl[:, idx] / np.linalg.norm(vl[:, idx], axis=0)
    Lb, cond = biorthonormalize(Lb, R)
    return ZeroEigenspace(fam, R, Lb, w[idx], float(tol), cond)


@dataclass
class CriticalCluster:
    omega: np.ndarray
    basis: ZeroEigenspace
    L1_restricted: np.ndarray
    a: np.ndarray                 # first-order speeds, lambda_j ~ -i a_j r
    q0: np.ndarray                # right eigenfunctions (Galerkin columns)
    qtilde0: np.ndarray           # left eigenfunctions with <qtilde_i, q_j> = delta_ij
    h3: bool
    h3_gap: float
    near_jordan: bool = False
    projection_error: float = 0.0

    @property
    def size(self) -> int:
        return len(self.a)

    @property
    def weakly_hyperbolic(self) -> bool:
        return bool(np.abs(self.a.imag).max() <= 1e-8 * max(1.0, np.abs(self.a).max()))


def build_cluster(profile: WaveProfile, M: int = 32, omega: Sequence[float] | float = 1.0,
                  basis: ZeroEigenspace | None = None, h3_tol: float = 1e-6,
                  cluster_tol: float | None = None) -> CriticalCluster:
    basis = zero_eigenspace(profile, M, cluster_tol) if basis is None else basis
    fam = basis.family
    omega = np.atleast_1d(np.asarray(omega, float))
    if omega.size != fam.d:
        raise ValueError(f"omega must have {fam.d} components")
    omega = omega / np.linalg.norm(omega)
    c = basis.size
    if c == 0:
        raise StructureError("L_0 has no zero cluster")
    P = basis.projection()
    proj_err = float(np.linalg.norm(P @ P - P, 2))
    L1 = fam.first_order(omega)
    B = basis.left.conj().T @ L1 @ basis.right
    mu, Z, Y = sla.eig(B, left=True, right=True)
    a = 1j * mu
    order = np.lexsort((a.imag, a.real))
    a, Y, Z = a[order], Y[:, order], Z[:, order]
    q0 = basis.right @ Y
    q0 = q0 / np.linalg.norm(q0, axis=0)
    qt = basis.left @ Z
    qt, cond = biorthonormalize(qt, q0)
    if c > 1:
        gaps = np.abs(a[:, None] - a[None, :])
        np.fill_diagonal(gaps, np.inf)
        gap = float(gaps.min())
    else:
        gap = np.inf
    scale = max(1.0, float(np.abs(a).max()))
    near_jordan = bool(cond > 1e8 or basis.gram_condition > 1e8)
    return CriticalCluster(omega, basis, B, a, q0, qt, bool(gap > h3_tol * scale), gap,
                           near_jordan, proj_err)


def _coefficient_vector(fam: BlochFamily, samples: np.ndarray) -> np.ndarray:
    m = samples.shape[0]
    c = np.fft.fft(samples, axis=0) / m
    return c[np.mod(fam.ks, m)].reshape(-1)


def relative_oscillation(fam: BlochFamily, vec: np.ndarray) -> float:
    """||v - mean v|| / ||v|| for a Galerkin vector (mean = k = 0 block)."""
    blocks = vec.reshape(len(fam.ks), fam.n)
    zero = fam.ks == 0
    tot = np.linalg.norm(blocks)
    return float(np.linalg.norm(blocks[~zero]) / tot) if tot > 0 else 0.0


def check_blochfacts(cluster: CriticalCluster, profile: WaveProfile, align_tol: float = 1e-6,
                     const_tol: float = 1e-5) -> dict:
    """Translational alignment of one right eigenfunction and constancy of
    the remaining left eigenfunctions at xi = 0."""
    fam = cluster.basis.family
    up = _coefficient_vector(fam, profile.unit_derivative())
    upn = up / np.linalg.norm(up)
    align = np.abs(upn.conj() @ cluster.q0) / np.linalg.norm(cluster.q0, axis=0)
    j1 = int(np.argmax(align))
    cosine = float(align[j1])
    angle = float(np.arccos(min(1.0, cosine)))
    osc = [relative_oscillation(fam, cluster.qtilde0[:, j]) for j in range(cluster.size) if j != j1]
    # projection-based check: distance of U' from the translational eigenline
    # is basis independent; also confirm U' lies in the cluster range
    P = cluster.basis.projection()
    in_range = float(np.linalg.norm(P @ up - up) / np.linalg.norm(up))
    report = {
        "translational_index": j1,
        "alignment": cosine,
        "angle": angle,
        "aligned": bool(angle < max(align_tol, 1e-3) and 1 - cosine < align_tol),
        "oscillation": osc,
        "max_oscillation": float(max(osc)) if osc else 0.0,
        "left_constant": bool(all(o < const_tol for o in osc)),
        "uprime_in_kernel": in_range,
        "h3": cluster.h3,
    }
    report["violation"] = not (report["aligned"] and report["left_constant"])
    return report


def translational_mode(cluster: CriticalCluster, profile: WaveProfile) -> tuple[int, np.ndarray, np.ndarray]:
    """(index, right, left) of the translational zero mode, scaled so that
    the right eigenfunction equals U' exactly at xi = 0."""
    fam = cluster.basis.family
    up = _coefficient_vector(fam, profile.unit_derivative())
    align = np.abs(up.conj() @ cluster.q0)
    j1 = int(np.argmax(align))
    q = cluster.q0[:, j1]
    scale = (q.conj() @ up) / (q.conj() @ q)
    return j1, q * scale, cluster.qtilde0[:, j1] / np.conj(scale)


def critical_eigenpairs(fam: BlochFamily, xi, count: int):
    """The ``count`` eigenpairs of L_xi closest to 0 (right vectors unit norm)."""
    w, vl, vr = sla.eig(fam.matrix(xi), left=True, right=True)
    idx = np.argsort(np.abs(w))[:count]
    vr = vr[:, idx] / np.linalg.norm(vr[:, idx], axis=0)
    vl = vl[:, idx] / np.linalg.norm(vl[:, idx], axis=0)
    vl, _ = biorthonormalize(vl, vr)
    return w[idx], vr, vl


def _match_to_prediction(lam: np.ndarray, pred: np.ndarray) -> np.ndarray:
    cost = np.abs(lam[None, :] - pred[:, None])
    _, cols = linear_sum_assignment(cost)
    return cols


def fd_speeds(cluster: CriticalCluster, r: float = 1e-3) -> np.ndarray:
    """First-order speeds from central differences of the critical eigenvalues
    along +-r omega: a_j ~ i (lambda_j(r) - lambda_j(-r)) / (2 r)."""
    fam = cluster.basis.family
    c = cluster.size
    lp, _, _ = critical_eigenpairs(fam, r * cluster.omega, c)
    lm, _, _ = critical_eigenpairs(fam, -r * cluster.omega, c)
    lp = lp[_match_to_prediction(lp, -1j * cluster.a * r)]
    lm = lm[_match_to_prediction(lm, 1j * cluster.a * r)]
    return 1j * (lp - lm) / (2 * r)


@dataclass
class DispersionSurface:
    omega: np.ndarray
    radii: np.ndarray
    eigenvalues: np.ndarray       # (len(radii), n_branches)
    min_dominance: float
    slopes: np.ndarray            # lambda_j / r at the smallest radius ~ -i a_j
    curvature: np.ndarray         # fitted coefficient of r^2 in Re lambda_j
    fallback_steps: int = 0


def continue_surfaces(cluster: CriticalCluster, radii: Sequence[float] | None = None,
                      eps: float = 0.2, dominance: float = 0.9) -> DispersionSurface:
    fam = cluster.basis.family
    radii = np.geomspace(1e-3, eps, 20) if radii is None else np.asarray(radii, float)
    c = cluster.size
    lam, vr, _ = critical_eigenpairs(fam, radii[0] * cluster.omega, c)
    perm = _match_to_prediction(lam, -1j * cluster.a * radii[0])
    lam, vr = lam[perm], vr[:, perm]
    out = [lam]
    min_dom = 1.0
    fallbacks = 0
    for r in radii[1:]:
        cand, vc, _ = critical_eigenpairs(fam, r * cluster.omega, c + 2)
        O = np.abs(vr.conj().T @ vc)
        rows, cols = linear_sum_assignment(-O)
        dom = float(O[rows, cols].min())
        if dom < dominance:
            fallbacks += 1
            cols = _match_to_prediction(cand, out[-1])
        min_dom = min(min_dom, dom)
        lam, vr = cand[cols], vc[:, cols]
        out.append(lam)
    ev = np.array(out)
    slopes = ev[0] / radii[0]
    V = np.vstack([radii ** 2, radii ** 3]).T
    curv = np.linalg.lstsq(V, ev.real, rcond=None)[0][0]
    return DispersionSurface(cluster.omega, radii, ev, min_dom, slopes, curv, fallbacks)


def averaged_quantities(profile: WaveProfile) -> dict:
    U = profile.samples
    model = profile.model
    return {
        "M": U.mean(axis=0).tolist(),
        "F": [model.flux(U, j).mean(axis=0).tolist() for j in range(model.d)],
        "wavenumber": 1.0 / profile.X,
        "frequency": profile.s / profile.X,
        "S": profile.s,
        "N": profile.nu.tolist(),
    }


def angle_grid(d: int, count: int = 16) -> list[np.ndarray]:
    if d == 1:
        return [np.array([1.0])]
    th = np.linspace(0.0, 2 * np.pi, count, endpoint=False)
    return [np.array([np.cos(t), np.sin(t)]) for t in th]


def whitham_report(clusters: Sequence[CriticalCluster], profile: WaveProfile | None = None,
                   imag_tol: float = 1e-8) -> dict:
    rows = []
    for i, cl in enumerate(clusters):
        scale = max(1.0, float(np.abs(cl.a).max()))
        weak = bool(np.abs(cl.a.imag).max() <= imag_tol * scale)
        rows.append({
            "index": i,
            "omega": cl.omega.tolist(),
            "a_real": cl.a.real.tolist(),
            "a_imag": cl.a.imag.tolist(),
            "weakly_hyperbolic": weak,
            "strictly_hyperbolic": bool(weak and cl.h3),
            "min_gap": cl.h3_gap,
        })
    rep = {
        "angles": rows,
        "weakly_hyperbolic": all(r["weakly_hyperbolic"] for r in rows),
        "strictly_hyperbolic": all(r["strictly_hyperbolic"] for r in rows),
    }
    if profile is not None:
        rep["averages"] = averaged_quantities(profile)
    return rep


def write_dispersion_csv(path, surfaces: Sequence[DispersionSurface]) -> None:
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(["omega_index", "r", "j", "re", "im"])
        for i, s in enumerate(surfaces):
            for r, row in zip(s.radii, s.eigenvalues):
                for j, lam in enumerate(row):
                    wr.writerow([i, f"{r:.17g}", j, f"{lam.real:.17g}", f"{lam.imag:.17g}"])


def write_whitham_json(path, report: dict) -> None:
    with open(path, "w") as fh:
        json.dump(report, fh, indent=1)
