"""Periodic traveling-wave profiles.

A profile solves  u' = sum_j nu_j f^j(u) - s u - q  with period X.  Internally
everything lives on the unit cell y = x / X in [0, 1), where the equation
reads  U' = X (g(U) - s U - q)  with g the directional flux.  The unit-cell
problem is the original one with fluxes scaled by X, speed X*s and
integration constant X*q (time rescales as t / X**2, viscosity stays 1);
``WaveProfile.unit_parameters`` returns exactly that map.
"""
from __future__ import annotations

import json
import logging
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.integrate import solve_ivp

from .model import ModelSystem, load_model

logger = logging.getLogger(__name__)


class NoConvergenceError(RuntimeError):
    def __init__(self, message: str, residual: float):
        self.residual = residual
        super().__init__(f"{message} (last residual {residual:.3e})")


class DegenerateOrbitError(ValueError):
    pass


class ResolutionWarning(UserWarning):
    """The profile has Fourier content near the grid limit; collocation may be spurious."""


# -- spectral helpers ----------------------------------------------------

def spectral_tail(samples: np.ndarray) -> float:
    """Largest Fourier coefficient with |k| >= m/3, relative to the largest nonzero mode."""
    m = samples.shape[0]
    c = np.abs(np.fft.fft(samples, axis=0)) / m
    k = np.abs(wavenumbers(m))
    scale = c[k > 0].max()
    return float(c[k >= m / 3].max() / scale) if scale > 0 else 0.0


def wavenumbers(m: int) -> np.ndarray:
    """Integer Fourier indices in numpy FFT order."""
    return np.fft.fftfreq(m, 1.0 / m)


def spectral_derivative(samples: np.ndarray, order: int = 1, axis: int = 0) -> np.ndarray:
    """d^order/dy^order of 1-periodic samples on a uniform grid of [0, 1)."""
    m = samples.shape[axis]
    k = wavenumbers(m)
    mult = (2j * np.pi * k) ** order
    if order % 2 == 1 and m % 2 == 0:
        mult[m // 2] = 0.0
    shape = [1] * samples.ndim
    shape[axis] = m
    out = np.fft.ifft(np.fft.fft(samples, axis=axis) * mult.reshape(shape), axis=axis)
    return out.real if np.isrealobj(samples) else out


def differentiation_matrix(m: int) -> np.ndarray:
    return spectral_derivative(np.eye(m), 1, axis=0)


def _phase_matrix(m: int, y: np.ndarray) -> np.ndarray:
    """Rows map FFT coefficients (divided by m) to values of the real trigonometric
    interpolant at points y; for even m the Nyquist mode enters as cos(pi m y)."""
    y = np.atleast_1d(np.asarray(y, float))
    P = np.exp(2j * np.pi * np.outer(y, wavenumbers(m)))
    if m % 2 == 0:
        P[:, m // 2] = np.cos(np.pi * m * y)
    return P


def trig_eval(coeffs: np.ndarray, y) -> np.ndarray:
    """Evaluate the interpolant with FFT coefficients ``coeffs`` (axis 0, already / m)."""
    m = coeffs.shape[0]
    P = _phase_matrix(m, y)
    return (P @ coeffs.reshape(m, -1)).reshape((P.shape[0],) + coeffs.shape[1:])


def interp_weights(m: int, y: float) -> np.ndarray:
    """Row vector w with w @ samples equal to the interpolant at y."""
    return np.real(_phase_matrix(m, y) @ np.fft.fft(np.eye(m), axis=0))[0] / m


def fourier_resample(samples: np.ndarray, m_new: int) -> np.ndarray:
    """Trigonometric interpolation of periodic samples (axis 0) onto m_new points."""
    m = samples.shape[0]
    if m_new == m:
        return samples.copy()
    c = np.fft.fft(samples, axis=0) / m
    out = trig_eval(c, np.arange(m_new) / m_new)
    return out.real if np.isrealobj(samples) else out


# -- profile data --------------------------------------------------------

@dataclass
class WaveProfile:
    """Discretized periodic orbit with its wave parameters.

    ``samples[i]`` is the profile at x = i X / m.  ``unfolding`` records the
    speed correction introduced when an amplitude constraint was imposed; it
    vanishes for genuine members of a conservative family.
    """

    model: ModelSystem
    X: float
    s: float
    q: np.ndarray
    nu: np.ndarray
    samples: np.ndarray
    residual_norm: float = 0.0
    unfolding: float = 0.0
    is_constant: bool = False
    info: dict = field(default_factory=dict)

    @property
    def m(self) -> int:
        return self.samples.shape[0]

    @property
    def n(self) -> int:
        return self.samples.shape[1]

    @property
    def fourier_coeffs(self) -> np.ndarray:
        return np.fft.fft(self.samples, axis=0) / self.m

    @property
    def grid(self) -> np.ndarray:
        return np.arange(self.m) * self.X / self.m

    def unit_derivative(self, order: int = 1) -> np.ndarray:
        """d^order U / dy^order on the unit cell."""
        return spectral_derivative(self.samples, order)

    def derivative(self, order: int = 1) -> np.ndarray:
        return self.unit_derivative(order) / self.X ** order

    def evaluate(self, y) -> np.ndarray:
        """Profile at unit-cell coordinates y (any real values, periodic)."""
        return trig_eval(self.fourier_coeffs, np.mod(np.asarray(y, float), 1.0)).real

    def resampled(self, m_new: int) -> "WaveProfile":
        return WaveProfile(self.model, self.X, self.s, self.q.copy(), self.nu.copy(),
                           fourier_resample(self.samples, m_new), self.residual_norm,
                           self.unfolding, self.is_constant, dict(self.info))

    def shifted(self, delta: float) -> "WaveProfile":
        """Profile translated by delta in unit-cell coordinates: U(y - delta)."""
        y = np.arange(self.m) / self.m - delta
        return WaveProfile(self.model, self.X, self.s, self.q.copy(), self.nu.copy(),
                           self.evaluate(y), self.residual_norm, self.unfolding,
                           self.is_constant, dict(self.info))

    # Unit-cell (X = 1) data used by the Bloch analysis.
    def unit_parameters(self) -> tuple[ModelSystem, float, np.ndarray]:
        return self.model.scaled(self.X), self.s * self.X, self.q * self.X

    def transverse_directions(self) -> list[np.ndarray]:
        if self.model.d == 1:
            return []
        return [np.array([-self.nu[1], self.nu[0]])]

    def coefficient_samples(self, samples: np.ndarray | None = None) -> list[np.ndarray]:
        """Unit-cell coefficient matrices [A^1, A^2, ...] at the sample points.

        A^1 = X (nu . Df(U) - s I) acts along the propagation direction and
        A^2 = X (nu_perp . Df(U)) across it (d = 2 only).
        """
        U = self.samples if samples is None else samples
        eye = np.eye(self.n)
        out = [self.X * (self.model.directional_jacobian(U, self.nu) - self.s * eye)]
        for perp in self.transverse_directions():
            out.append(self.X * self.model.directional_jacobian(U, perp))
        return out

    def unit_residual(self) -> np.ndarray:
        g = self.model.directional_flux(self.samples, self.nu) - self.s * self.samples - self.q
        return self.unit_derivative() - self.X * g

    def check_residual(self) -> float:
        return float(np.abs(self.unit_residual()).max() / self.X)

    @classmethod
    def constant(cls, model: ModelSystem, state: Sequence[float], m: int = 16, X: float = 1.0,
                 nu: Sequence[float] | None = None, s: float = 0.0) -> "WaveProfile":
        """A constant state viewed as an X-periodic 'profile' (control cases only)."""
        state = np.asarray(state, float)
        nu = _default_nu(model.d) if nu is None else np.asarray(nu, float)
        q = model.directional_flux(state, nu) - s * state
        return cls(model, float(X), float(s), q, nu, np.tile(state, (m, 1)), 0.0, 0.0, True)


def _default_nu(d: int) -> np.ndarray:
    nu = np.zeros(d)
    nu[0] = 1.0
    return nu


def _max_location(coeffs: np.ndarray, y0: float) -> float:
    """Refine a local maximum of a scalar trigonometric interpolant by Newton."""
    m = coeffs.shape[0]
    k = wavenumbers(m)
    if m % 2 == 0:
        coeffs = coeffs.copy()
        coeffs[m // 2] = 0.0
    y = y0
    for _ in range(30):
        ph = np.exp(2j * np.pi * k * y)
        d1 = np.real(np.sum(2j * np.pi * k * coeffs * ph))
        d2 = np.real(np.sum((2j * np.pi * k) ** 2 * coeffs * ph))
        if d2 >= 0:
            break
        step = d1 / d2
        y -= step
        if abs(step) < 1e-15:
            break
    return y


def guess_from_center(model: ModelSystem, center: Sequence[float], amplitude: float, m: int = 128,
                      s: float = 0.0, nu: Sequence[float] | None = None,
                      component: int = 0) -> tuple[np.ndarray, float]:
    """Small elliptic orbit around a linear center; returns (samples, period)."""
    center = np.asarray(center, float)
    nu = _default_nu(model.d) if nu is None else np.asarray(nu, float)
    B = model.directional_jacobian(center, nu) - s * np.eye(model.n)
    lam, V = np.linalg.eig(B)
    idx = np.argmax(lam.imag)
    omega = lam[idx].imag
    if omega <= 1e-12:
        raise DegenerateOrbitError("linearization at the given state has no oscillatory pair")
    v = V[:, idx]
    v = v / v[component] if abs(v[component]) > 1e-14 else v / np.abs(v).max()
    y = np.arange(m) / m
    orbit = np.real(np.outer(np.exp(2j * np.pi * y), v))
    scale = amplitude / np.abs(orbit[:, component]).max()
    return center + scale * orbit, 2 * np.pi / omega


def solve_profile(model: ModelSystem, guess: np.ndarray, X_guess: float, s: float = 0.0,
                  q: Sequence[float] | None = None, nu: Sequence[float] | None = None,
                  tol: float = 1e-10, m: int | None = None, amplitude: float | None = None,
                  amplitude_component: int = 0, mean: Sequence[float] | None = None,
                  max_iters: int = 60, degenerate_tol: float = 1e-6, tail_tol: float = 1e-8) -> WaveProfile:
    """Newton solve of the Fourier-collocation profile equations.

    Unknowns are the samples and X.  An integral phase condition removes the
    translation freedom.  Conservative families come in one-parameter
    families at fixed (s, q): pass ``amplitude`` (target maximum of one
    component) and the speed is freed as an unfolding parameter.  Passing
    ``mean`` frees q and pins the cell average instead.

    Collocation can converge to discrete solutions that are not orbits when
    the grid is too coarse; a ResolutionWarning is issued when the spectral
    tail beyond m/3 exceeds ``tail_tol``.
    """
    guess = np.asarray(guess, float)
    if guess.ndim != 2 or guess.shape[1] != model.n:
        raise ValueError(f"guess must have shape (m, {model.n})")
    if np.ptp(guess, axis=0).max() <= degenerate_tol:
        raise DegenerateOrbitError("guess is a constant state; constant solutions are not periodic profiles")
    m = guess.shape[0] if m is None else m
    guess = fourier_resample(guess, m)
    n = model.n
    nu = _default_nu(model.d) if nu is None else np.asarray(nu, float) / np.linalg.norm(nu)
    q = np.zeros(n) if q is None else np.asarray(q, float)
    Dm = differentiation_matrix(m)
    Dbig = np.kron(Dm, np.eye(n))
    g_ref = guess.ravel()
    gprime = (Dm @ guess).ravel()

    free_s = amplitude is not None
    free_q = mean is not None
    nunk = m * n + 1 + int(free_s) + (n if free_q else 0)

    def unpack(z):
        U = z[: m * n].reshape(m, n)
        X = z[m * n]
        i = m * n + 1
        ss = s
        if free_s:
            ss = z[i]
            i += 1
        qq = z[i:i + n] if free_q else q
        return U, X, ss, qq

    def system(z):
        U, X, ss, qq = unpack(z)
        g = model.directional_flux(U, nu) - ss * U - qq
        F = [(Dm @ U - X * g).ravel(), [np.dot(U.ravel() - g_ref, gprime) / m]]
        J = np.zeros((m * n + 1 + int(free_s) + (n if free_q else 0), nunk))
        Dg = model.directional_jacobian(U, nu) - ss * np.eye(n)
        J[: m * n, : m * n] = Dbig
        for i in range(m):
            J[i * n:(i + 1) * n, i * n:(i + 1) * n] -= X * Dg[i]
        J[: m * n, m * n] = -g.ravel()
        J[m * n, : m * n] = gprime / m
        col = m * n + 1
        row = m * n + 1
        if free_s:
            J[: m * n, col] = X * U.ravel()
            c = np.fft.fft(U[:, amplitude_component]) / m
            ystar = _max_location(c, np.argmax(U[:, amplitude_component]) / m)
            w = interp_weights(m, ystar)
            F.append([w @ U[:, amplitude_component] - amplitude])
            J[row, amplitude_component: m * n: n] = w
            col += 1
            row += 1
        if free_q:
            for c_ in range(n):
                J[: m * n, col + c_] = 0.0
                J[c_: m * n: n, col + c_] = X
                J[row + c_, c_: m * n: n] = 1.0 / m
            F.append(U.mean(axis=0) - np.asarray(mean, float))
        return np.concatenate([np.ravel(f) for f in F]), J

    z = np.concatenate([g_ref, [X_guess]] + ([[s]] if free_s else []) + ([q] if free_q else []))
    res, J = system(z)
    norm = np.abs(res).max()
    for it in range(max_iters):
        if norm <= tol * max(1.0, z[m * n]):
            break
        try:
            dz = np.linalg.solve(J, -res)
        except np.linalg.LinAlgError:
            dz = np.linalg.lstsq(J, -res, rcond=None)[0]
        step = 1.0
        while step > 1e-4:
            trial = z + step * dz
            if trial[m * n] > 0:
                res_t, J_t = system(trial)
                norm_t = np.abs(res_t).max()
                if np.isfinite(norm_t) and norm_t < (1 - 1e-4 * step) * norm or norm_t < tol:
                    break
            step *= 0.5
        else:
            raise NoConvergenceError("line search failed in profile Newton iteration", norm)
        z, res, J, norm = trial, res_t, J_t, norm_t
        logger.debug("profile newton it=%d |F|=%.3e step=%.3g", it, norm, step)
    else:
        raise NoConvergenceError(f"profile Newton did not converge in {max_iters} iterations", norm)

    U, X, ss, qq = unpack(z)
    if np.ptp(U, axis=0).max() <= degenerate_tol:
        raise DegenerateOrbitError("Newton iteration collapsed onto a constant state")
    prof = WaveProfile(model, float(X), float(ss), np.array(qq, float), nu, U, 0.0,
                       float(ss - s) if free_s else 0.0)
    prof.residual_norm = prof.check_residual()
    if prof.residual_norm > tol * 10:
        raise NoConvergenceError("profile residual above tolerance after Newton", prof.residual_norm)
    tail = spectral_tail(U)
    if tail > tail_tol:
        warnings.warn(f"profile Fourier tail {tail:.1e} exceeds {tail_tol:.0e} at m={m}; the collocation "
                      "solution may not be a true orbit, increase m", ResolutionWarning, stacklevel=2)
    return prof


# -- (H2): submersion of the period map ------------------------------------

@dataclass
class SubmersionReport:
    jacobian_rank: int
    singular_values: list[float]
    passes_H2: bool
    manifold_dimension_estimate: int
    derivative: np.ndarray
    warnings: list[str] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "jacobian_rank": self.jacobian_rank,
            "singular_values": self.singular_values,
            "passes_H2": self.passes_H2,
            "manifold_dimension_estimate": self.manifold_dimension_estimate,
            "warnings": self.warnings,
        }


def flow(model: ModelSystem, a, X, s, nu, q, rtol: float = 1e-12) -> np.ndarray:
    """Solution at time X of u' = nu . f(u) - s u - q from u(0) = a."""
    nu = np.asarray(nu, float)
    q = np.asarray(q, float)

    def rhs(_, u):
        return model.directional_flux(u, nu) - s * u - q

    sol = solve_ivp(rhs, (0.0, X), np.asarray(a, float), method="DOP853", rtol=rtol, atol=rtol)
    if not sol.success:
        raise NoConvergenceError(f"flow integration failed: {sol.message}", np.inf)
    return sol.y[:, -1]


def check_submersion(model: ModelSystem, profile: WaveProfile, fd_step: float = 1e-5,
                     rank_tol: float = 1e-6) -> SubmersionReport:
    """Rank of dH/d(X, a, s, nu, q) for H = u(X; a, s, nu, q) - a, by central differences."""
    if profile.is_constant:
        raise DegenerateOrbitError("submersion check needs a nonconstant profile")
    n, d = model.n, model.d
    base = {"X": np.array([profile.X]), "a": profile.samples[0].copy(), "s": np.array([profile.s]),
            "nu": profile.nu.copy(), "q": profile.q.copy()}
    order = ["X", "a", "s", "nu", "q"]

    def H(p):
        return flow(model, p["a"], p["X"][0], p["s"][0], p["nu"], p["q"]) - p["a"]

    cols = []
    for key in order:
        for i in range(base[key].size):
            plus = {k: v.copy() for k, v in base.items()}
            minus = {k: v.copy() for k, v in base.items()}
            plus[key][i] += fd_step
            minus[key][i] -= fd_step
            cols.append((H(plus) - H(minus)) / (2 * fd_step))
    D = np.array(cols).T
    sv = np.linalg.svd(D, compute_uv=False)
    rank = int(np.sum(sv > rank_tol * sv[0])) if sv[0] > 0 else 0
    notes = []
    if rank == n and sv[-1] < 1e3 * rank_tol * sv[0]:
        notes.append(f"smallest singular value {sv[-1]:.2e} is close to the rank threshold")
    dim = (2 * n + d + 1) - rank
    return SubmersionReport(rank, [float(v) for v in sv], rank == n, dim, D, notes)


# -- checkpoints ---------------------------------------------------------

def _num(x) -> float:
    return float(f"{float(x):.17g}")


def profile_to_dict(profile: WaveProfile) -> dict:
    return {
        "model": profile.model.to_dict(),
        "X": _num(profile.X),
        "s": _num(profile.s),
        "q": [_num(v) for v in profile.q],
        "nu": [_num(v) for v in profile.nu],
        "m": profile.m,
        "samples": [[_num(v) for v in row] for row in profile.samples],
        "residual_norm": _num(profile.residual_norm),
        "unfolding": _num(profile.unfolding),
        "is_constant": profile.is_constant,
    }


def save_profile(profile: WaveProfile, path: str | Path, extra: dict | None = None) -> None:
    doc = profile_to_dict(profile)
    if extra:
        doc.update(extra)
    Path(path).write_text(json.dumps(doc, indent=1))


def profile_from_dict(doc: dict) -> WaveProfile:
    model = load_model(doc["model"])
    samples = np.array(doc["samples"], float).reshape(int(doc["m"]), model.n)
    return WaveProfile(model, float(doc["X"]), float(doc["s"]), np.array(doc["q"], float),
                       np.array(doc["nu"], float), samples, float(doc.get("residual_norm", 0.0)),
                       float(doc.get("unfolding", 0.0)), bool(doc.get("is_constant", False)))


def load_profile(path: str | Path) -> WaveProfile:
    return profile_from_dict(json.loads(Path(path).read_text()))
