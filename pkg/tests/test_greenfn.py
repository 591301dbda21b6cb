import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from pwstab.greenfn import (GrowingKernelError, LowFrequencyKernel, SuperdomainOperator, bump, cancellation_test,
                            decompose_and_fit, kernel_exponent, loglog_slope, sup_y_lp, suggest_cells, time_cutoff,
                            write_fit_csv)
from pwstab.profile import trig_eval

pytestmark = pytest.mark.filterwarnings("ignore::pwstab.bloch.TruncationWarning")


@given(st.floats(0, 0.2))
def test_bump_is_one_inside(xi):
    assert bump(np.array([xi, -xi])) == pytest.approx([1.0, 1.0])


@given(st.floats(0.4, 10))
def test_bump_vanishes_outside(xi):
    assert bump(np.array([xi])) == pytest.approx([0.0])


def test_bump_is_monotone_between():
    xi = np.linspace(0.2, 0.4, 201)
    assert np.all(np.diff(bump(xi)) <= 0)


@given(st.floats(-5, 5))
def test_time_cutoff_range(t):
    c = time_cutoff(t)
    assert 0.0 <= c <= 1.0
    if t <= 1:
        assert c == 0.0
    if t >= 2:
        assert c == 1.0


def test_slope_of_power_law():
    t = np.geomspace(10, 1000, 9)
    assert loglog_slope(t, (1 + t) ** -0.75) == pytest.approx(-0.75, abs=1e-12)
    assert np.isnan(loglog_slope(t, np.full(9, np.inf)))


def test_kernel_exponent_table():
    assert kernel_exponent("GI", np.inf) == -0.5
    assert kernel_exponent("GI", 2.0) == -0.25
    assert kernel_exponent("e_x", 2.0) == -0.75
    assert kernel_exponent("e_y", np.inf) == -0.5
    assert kernel_exponent("Gt_y", 2.0) == -0.75
    assert kernel_exponent("GI", 2.0, d=2) == -0.5


@pytest.fixture(scope="module")
def heat_kernel(heat_profile):
    return LowFrequencyKernel(heat_profile, cells=1024, M=8)


def test_heat_kernel_matches_filtered_gaussian(heat_kernel):
    # independent quadrature of (2 pi)^-1 int phi(xi) e^{-xi^2 t} e^{i xi z} dxi
    t = 5.0
    G = heat_kernel.GI(t)[0, :, 0, 0].real
    x = heat_kernel.x_grid()
    xi = np.linspace(-0.4, 0.4, 4001)
    for z in (0.0, 3.25, -17.5, 40.0):
        ref = np.trapezoid(bump(xi) * np.exp(-xi ** 2 * t) * np.cos(xi * z), xi) / (2 * np.pi)
        i = int(np.argmin(np.abs(x - z)))
        assert G[i] == pytest.approx(ref, abs=1e-10)
    assert np.abs(heat_kernel.GI(t)[0, :, 0, 1]).max() < 1e-14


def test_heat_kernel_approaches_gaussian_amplitude(heat_kernel):
    t = 1000.0
    G = heat_kernel.GI(t).real
    assert sup_y_lp(G, 1 / 8, np.inf) * np.sqrt(4 * np.pi * t) == pytest.approx(1.0, rel=1e-4)
    assert sup_y_lp(G, 1 / 8, 2) * (8 * np.pi * t) ** 0.25 == pytest.approx(1.0, rel=1e-4)


def test_heat_kernel_derivative_gains_half_power(heat_kernel):
    t = np.geomspace(50, 1000, 6)
    vals = [sup_y_lp(heat_kernel.GI(s, dx=1).real, 1 / 8, np.inf) for s in t]
    assert loglog_slope(t, vals) == pytest.approx(-1.0, abs=0.05)


def test_heat_kernel_independent_of_superdomain(heat_profile, heat_kernel):
    bigger = LowFrequencyKernel(heat_profile, cells=2048, M=8)
    a = sup_y_lp(heat_kernel.GI(10).real, 1 / 8, 2)
    b = sup_y_lp(bigger.GI(10).real, 1 / 8, 2)
    assert abs(a - b) / a < 1e-8


def test_heat_decomposition_rates(heat_profile):
    fits = decompose_and_fit(heat_profile, M=8)
    assert {(f.name, f.p) for f in fits} == {("GI", 2.0), ("GI", np.inf)}
    for f in fits:
        assert f.passed, (f.name, f.p, f.slope)


def test_unstable_profile_kernels_overflow(pendulum_profile):
    K = LowFrequencyKernel(pendulum_profile, cells=256, M=12)
    assert K.max_growth > 0
    with pytest.raises(GrowingKernelError):
        K.GI(1e4)
    fits = decompose_and_fit(pendulum_profile, times=[10, 100, 1e4], M=12, kernel=K)
    assert not any(f.passed for f in fits)


def test_fit_csv(tmp_path, heat_profile):
    fits = decompose_and_fit(heat_profile, times=[10, 100, 1000], M=8)
    write_fit_csv(tmp_path / "g.csv", fits)
    rows = (tmp_path / "g.csv").read_text().splitlines()
    assert rows[0] == "name,p,q,r,slope,predicted_slope,margin"
    assert len(rows) == 3


def test_suggested_superdomain_is_a_power_of_two(pendulum_profile):
    N = suggest_cells(pendulum_profile, 100.0, M=12)
    assert N & (N - 1) == 0 and N >= 64


@pytest.fixture(scope="module")
def superdomain(pendulum_profile):
    return SuperdomainOperator(pendulum_profile, 16, 12)


def test_superdomain_transform_round_trip(superdomain):
    y = superdomain.grid
    g = np.stack([np.exp(-(y / 1.5) ** 2), np.cos(2 * np.pi * y) * np.exp(-(y / 1.5) ** 2)], axis=1)
    back = superdomain.inverse(superdomain.forward(g))
    assert np.abs(back - g).max() < 1e-8


def test_semigroup_property(superdomain, rng):
    B = rng.normal(size=(superdomain.N, len(superdomain.ks) * 2)) * 1e-2
    one = superdomain.propagate(B, 0.03)
    two = superdomain.propagate(superdomain.propagate(B, 0.01), 0.02)
    assert np.abs(one - two).max() < 1e-10 * np.abs(one).max()
    # eigen-decomposition agrees with the matrix exponential
    via_eig = np.array([V @ (np.exp(w * 0.03) * (Vi @ b)) for (w, V, Vi), b in zip(superdomain.eig(), B)])
    assert np.abs(via_eig - one).max() < 1e-8 * np.abs(one).max()


def test_superdomain_growth_matches_bloch_instability(superdomain):
    assert superdomain.max_growth() > 1.0


def _heat_case(heat_profile, steps):
    g = lambda y: np.stack([np.exp(-(y / 3) ** 2), np.sin(2 * np.pi * y) * np.exp(-(y / 3) ** 2)], 1)  # noqa
    f = lambda y, s: (1 - np.exp(-s)) * g(y)  # noqa: E731
    fs = lambda y, s: np.exp(-s) * g(y)  # noqa: E731
    return cancellation_test(heat_profile, f, 0.5, f_s=fs, steps=steps, M=8)


def _pendulum_case(profile, steps, op=None):
    cU = np.fft.fft(profile.unit_derivative(), axis=0) / profile.m
    up = lambda y: trig_eval(cU, np.mod(y, 1.0)).real  # noqa: E731
    psi = lambda y: np.exp(-(y / 4) ** 2)  # noqa: E731
    f = lambda y, s: (1 - np.exp(-s)) * up(y) * psi(y)[:, None]  # noqa: E731
    fs = lambda y, s: np.exp(-s) * up(y) * psi(y)[:, None]  # noqa: E731
    return cancellation_test(profile, f, 0.2, f_s=fs, steps=steps, op=op)


def test_cancellation_on_heat_converges(heat_profile):
    r = [_heat_case(heat_profile, s) for s in (8, 16, 32)]
    assert r[-1] < 1e-3
    assert r[1] < r[0] / 2 and r[2] < r[1] / 2


def test_cancellation_on_translational_source(pendulum_profile):
    op = SuperdomainOperator(pendulum_profile, 32, 12)
    r = [_pendulum_case(pendulum_profile, s, op) for s in (16, 32)]
    assert r[-1] < 1e-3
    assert r[1] < r[0] / 2


def test_cancellation_with_numerical_time_derivative(heat_profile):
    f = lambda y, s: (s ** 2) * np.stack([np.exp(-(y / 3) ** 2)] * 2, 1)  # noqa: E731
    assert cancellation_test(heat_profile, f, 0.5, steps=32, M=8) < 1e-3


def test_cancellation_rejects_bad_arguments(heat_profile):
    with pytest.raises(ValueError):
        cancellation_test(heat_profile, lambda y, s: np.zeros((len(y), 2)), 0.0)
