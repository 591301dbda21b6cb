import json

import numpy as np
import pytest

from pwstab import model
from pwstab.dispersion import (StructureError, angle_grid, averaged_quantities, build_cluster, check_blochfacts,
                               continue_surfaces, fd_speeds, translational_mode, whitham_report,
                               write_dispersion_csv, write_whitham_json, zero_eigenspace)
from pwstab.profile import WaveProfile


@pytest.fixture(scope="module")
def pendulum_cluster(pendulum_profile):
    return build_cluster(pendulum_profile, 48, 1.0)


def test_cluster_has_n_plus_one_members(pendulum_cluster):
    assert pendulum_cluster.size == 3
    assert pendulum_cluster.h3
    assert pendulum_cluster.projection_error < 1e-8


def test_speeds_match_finite_differences_1d(pendulum_cluster):
    fd = fd_speeds(pendulum_cluster)
    assert np.abs(fd - pendulum_cluster.a).max() < 1e-4


def test_speeds_match_finite_differences_on_eight_angles(pendulum2_profile):
    basis = zero_eigenspace(pendulum2_profile, 32)
    for omega in angle_grid(2, 8):
        cl = build_cluster(pendulum2_profile, 32, omega, basis=basis)
        assert np.abs(fd_speeds(cl) - cl.a).max() < 1e-4


def test_linear_speeds_are_matrix_eigenvalues():
    A = np.array([[1.0, 0.0], [0.0, 2.0]])
    prof = WaveProfile.constant(model.linear([A.tolist()]), [0.0, 0.0], m=16)
    cl = build_cluster(prof, 16, 1.0)
    assert np.allclose(np.sort(cl.a.real), [1.0, 2.0], atol=1e-10)
    assert np.abs(cl.a.imag).max() < 1e-10
    assert np.allclose(np.sort(fd_speeds(cl).real), [1.0, 2.0], atol=1e-6)


def test_rotation_generator_speeds_are_complex():
    prof = WaveProfile.constant(model.linear(), [0.0, 0.0], m=16)
    cl = build_cluster(prof, 16, 1.0)
    rep = whitham_report([cl])
    assert np.allclose(np.sort(np.abs(cl.a.imag)), [1.0, 1.0], atol=1e-10)
    assert not rep["weakly_hyperbolic"]


def test_translational_alignment_and_constant_left_modes(pendulum_profile, pendulum_cluster):
    facts = check_blochfacts(pendulum_cluster, pendulum_profile)
    assert facts["alignment"] > 1 - 1e-6
    assert facts["max_oscillation"] < 1e-5
    assert not facts["violation"]


def test_alignment_is_basis_independent(pendulum_profile, pendulum_cluster):
    remixed = pendulum_cluster.basis.remixed(np.random.default_rng(3))
    cl = build_cluster(pendulum_profile, 48, 1.0, basis=remixed)
    assert np.allclose(np.sort_complex(cl.a), np.sort_complex(pendulum_cluster.a), atol=1e-8)
    assert check_blochfacts(cl, pendulum_profile)["alignment"] > 1 - 1e-6


def test_translational_mode_is_scaled_to_derivative(pendulum_profile, pendulum_cluster):
    j1, q, qt = translational_mode(pendulum_cluster, pendulum_profile)
    fam = pendulum_cluster.basis.family
    up = np.fft.fft(pendulum_profile.unit_derivative(), axis=0) / pendulum_profile.m
    up = up[np.mod(fam.ks, pendulum_profile.m)].reshape(-1)
    assert np.abs(q - up).max() < 1e-8 * np.abs(up).max()
    assert abs(qt.conj() @ q - 1) < 1e-8


def test_surfaces_start_with_first_order_speeds(pendulum_cluster):
    surf = continue_surfaces(pendulum_cluster, eps=0.05)
    assert surf.min_dominance > 0.9
    assert np.abs(surf.slopes - (-1j * pendulum_cluster.a)).max() < 1e-2


def test_heat_cluster_has_no_translational_mode(heat_profile):
    cl = build_cluster(heat_profile, 16, 1.0)
    assert cl.size == 2
    assert np.allclose(cl.a, 0.0, atol=1e-12)


def test_empty_cluster_raises():
    prof = WaveProfile.constant(model.linear(), [0.0, 0.0], m=16)
    with pytest.raises(StructureError):
        build_cluster(prof, 16, 1.0, cluster_tol=-1.0)


def test_whitham_outputs(tmp_path, pendulum_profile, pendulum_cluster):
    rep = whitham_report([pendulum_cluster], pendulum_profile)
    avg = averaged_quantities(pendulum_profile)
    assert avg["wavenumber"] == pytest.approx(1 / pendulum_profile.X)
    assert rep["averages"]["M"] == avg["M"]
    write_whitham_json(tmp_path / "w.json", rep)
    assert json.loads((tmp_path / "w.json").read_text())["angles"][0]["index"] == 0
    surf = continue_surfaces(pendulum_cluster, radii=[1e-3, 2e-3, 4e-3])
    write_dispersion_csv(tmp_path / "d.csv", [surf])
    assert len((tmp_path / "d.csv").read_text().splitlines()) == 1 + 3 * 3
