import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.integrate import solve_ivp
from scipy.optimize import linear_sum_assignment

from pwstab import model
from pwstab.bloch import (BlochFamily, TruncationWarning, assemble, check_D1_D2, check_D3_semisimple, spectrum,
                          translation_residual, write_spectrum_csv)
from pwstab.profile import WaveProfile


def matched_error(a, b):
    cost = np.abs(a[:, None] - b[None, :])
    r, c = linear_sum_assignment(cost)
    return cost[r, c].max()


def constant_symbol(A1, A2, xi, M, X=1.0):
    """Eigenvalues of -kappa^2 - |xi2|^2 - i kappa X A1 - i xi2 X A2 for every Fourier mode."""
    out = []
    for k in range(-M, M + 1):
        kap = 2 * np.pi * k + xi[0]
        B = -(kap ** 2) * np.eye(len(A1)) - 1j * kap * X * A1
        if A2 is not None:
            B = B - xi[1] ** 2 * np.eye(len(A1)) - 1j * xi[1] * X * A2
        out.append(np.linalg.eigvals(B))
    return np.concatenate(out)


def test_rotation_generator_gives_real_spectrum():
    # A = [[0, 1], [-1, 0]] has eigenvalues +-i, so the symbol is -(2 pi k)^2 +- 2 pi k, real
    prof = WaveProfile.constant(model.linear(), [0.0, 0.0], m=16)
    ev = spectrum(assemble(prof, [0.0], M=8)).eigenvalues
    k = 2 * np.pi * np.arange(-8, 9)
    expected = np.concatenate([-k ** 2 + k, -k ** 2 - k])
    assert np.abs(ev.imag).max() < 1e-10
    assert matched_error(ev, expected) < 1e-9


@pytest.mark.parametrize("X", [1.0, 2.5])
def test_constant_coefficients_match_symbol_1d(X, rng):
    A1 = np.array([[0.3, 1.0], [-0.7, 0.2]])
    prof = WaveProfile.constant(model.linear([A1.tolist()]), [0.0, 0.0], m=16, X=X)
    fam = BlochFamily(prof, 10)
    for xi in rng.uniform(-np.pi, np.pi, 10):
        ev = np.linalg.eigvals(fam.matrix([xi]))
        ref = constant_symbol(A1, None, [xi], 10, X)
        assert matched_error(ev, ref) < 1e-10 * (1 + np.abs(ref).max())


def test_constant_coefficients_match_symbol_2d(rng):
    A1 = np.array([[0.0, 1.0], [-1.0, 0.5]])
    A2 = np.array([[0.3, -0.2], [0.4, 0.1]])
    prof = WaveProfile.constant(model.linear([A1.tolist(), A2.tolist()]), [0.0, 0.0], m=16)
    fam = BlochFamily(prof, 10)
    for xi in rng.uniform(-np.pi, np.pi, (10, 2)):
        ev = np.linalg.eigvals(fam.matrix(xi))
        assert matched_error(ev, constant_symbol(A1, A2, xi, 10)) < 1e-8


@pytest.mark.filterwarnings("ignore::pwstab.bloch.TruncationWarning")
@settings(max_examples=20, deadline=None)
@given(st.floats(-np.pi, np.pi))
def test_spectrum_is_conjugation_symmetric(xi):
    # real coefficients: sigma(L_{-xi}) = conj(sigma(L_xi))
    prof = _pendulum_small()
    fam = BlochFamily(prof, 16)
    a = np.linalg.eigvals(fam.matrix([xi]))
    b = np.linalg.eigvals(fam.matrix([-xi]))
    assert matched_error(a, b.conj()) < 1e-8 * (1 + np.abs(a).max())


_CACHE = {}


def _pendulum_small():
    if "p" not in _CACHE:
        from .conftest import solved
        _CACHE["p"] = solved(model.pendulum(), 2.0, m=64)
    return _CACHE["p"]


def floquet_mismatch(prof, lam, xi):
    """Smallest singular value of M(lam) - e^{i xi} for the first-order form
    v' = w + A v, w' = lam v of  lam v = v'' - (A v)'."""
    n = prof.n

    def rhs(y, z):
        A = prof.coefficient_samples(prof.evaluate([y]))[0][0]
        v, w = z[:n], z[n:]
        return np.concatenate([w + A @ v, lam * v])

    cols = []
    for j in range(2 * n):
        e = np.zeros(2 * n, complex)
        e[j] = 1.0
        cols.append(solve_ivp(rhs, (0, 1), e, method="DOP853", rtol=1e-11, atol=1e-12).y[:, -1])
    Mon = np.array(cols).T
    s = np.linalg.svd(Mon - np.exp(1j * xi) * np.eye(2 * n), compute_uv=False)
    return s[-1] / s[0]


def test_top_eigenvalue_agrees_with_floquet_shooting(pendulum_profile):
    xi = 0.3
    sl = spectrum(assemble(pendulum_profile, [xi], M=32), count=1)
    lam = complex(sl.eigenvalues[0])
    assert floquet_mismatch(pendulum_profile, lam, xi) < 1e-7
    assert floquet_mismatch(pendulum_profile, lam + 0.05, xi) > 1e-4


def test_eigenpairs_are_biorthonormal(pendulum_profile):
    sl = spectrum(assemble(pendulum_profile, [0.4], M=24), count=6)
    assert sl.biorthogonality_error() < 1e-8
    assert sl.residuals.max() < 1e-8


def test_translation_mode_is_in_kernel(pendulum_profile):
    assert translation_residual(pendulum_profile, 48) < 1e-6


def test_zero_cluster_on_pendulum(pendulum_profile):
    rep = check_D3_semisimple(pendulum_profile, 32, crosscheck=True)
    assert rep["count"] == 3 and rep["expected"] == 3
    assert rep["semisimple"] and rep["holds"] and rep["consistent_2M"]


def test_zero_cluster_on_heat_is_a_precondition_failure(heat_profile):
    rep = check_D3_semisimple(heat_profile, 16)
    assert rep["count"] == 2
    assert rep["precondition_failed"] and not rep["holds"]


def test_heat_satisfies_diffusive_stability(heat_profile):
    rep = check_D1_D2(heat_profile, M=16)
    assert rep["D1"]["holds"] and rep["D2"]["holds"]
    # the heat symbol is exactly -|xi|^2
    assert rep["D2"]["theta"] == pytest.approx(1.0, rel=1e-6)


def test_pendulum_is_spectrally_unstable(pendulum_profile):
    rep = check_D1_D2(pendulum_profile, M=24, n_grid=33)
    assert not rep["D1"]["holds"]
    assert rep["D1"]["max_real"] > 1.0


def test_short_truncation_warns():
    prof = _pendulum_small()
    with pytest.warns(TruncationWarning):
        BlochFamily(prof, 8)


def test_spectrum_csv(tmp_path, heat_profile):
    slices = [spectrum(assemble(heat_profile, [xi], M=8), count=3) for xi in (0.0, 0.5)]
    path = tmp_path / "s.csv"
    write_spectrum_csv(path, slices)
    lines = path.read_text().splitlines()
    assert lines[0].startswith("xi1")
    assert len(lines) == 1 + 6
