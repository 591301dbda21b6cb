import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from pwstab import model
from pwstab.model import ModelConfigError, UnsupportedDimensionError, load_model

finite = st.floats(-3, 3, allow_nan=False)


@pytest.mark.parametrize("name", ["pendulum", "heat", "linear", "cubic", "rotor"])
def test_builtin_jacobians_match_finite_differences(name):
    system = load_model({"builtin": name})
    assert system.check_jacobian() < 1e-7


def test_pendulum_2d_has_linear_transverse_flux():
    system = model.pendulum(2)
    u = np.array([0.3, -1.1])
    assert np.allclose(system.flux(u, 1), [0.5 * 0.3, 0.25 * -1.1])
    assert np.allclose(system.jacobian(u, 1), np.diag([0.5, 0.25]))


def test_document_round_trip():
    system = model.cubic(2)
    again = load_model(system.to_json())
    assert again == system
    assert again.fingerprint() == system.fingerprint()


def test_custom_document_matches_builtin():
    doc = {"n": 2, "d": 1, "flux": [[
        {"kind": "poly", "target": 0, "vars": [0, 1], "coeff": 1.0},
        {"kind": "sin", "target": 1, "vars": [1.0, 0.0], "coeff": -1.0},
    ]]}
    custom = load_model(json.dumps(doc))
    u = np.random.default_rng(0).normal(size=(20, 2))
    assert np.allclose(custom.flux(u), model.pendulum().flux(u))


@pytest.mark.parametrize("doc, exc, field", [
    ({"builtin": "nope"}, ModelConfigError, "builtin"),
    ({"n": 2, "d": 3, "flux": [[], [], []]}, UnsupportedDimensionError, "d"),
    ({"n": 1, "d": 1, "flux": [[]]}, ModelConfigError, "n"),
    ({"n": 2, "d": 1}, ModelConfigError, "flux"),
    ({"n": 2, "d": 1, "flux": [[{"kind": "tan", "target": 0, "vars": [1, 0], "coeff": 1}]]},
     ModelConfigError, "flux[0][0].kind"),
    ({"n": 2, "d": 1, "flux": [[{"kind": "poly", "target": 0, "vars": [1.5, 0], "coeff": 1}]]},
     ModelConfigError, "flux[0][0].vars"),
    ({"n": 2, "d": 1, "flux": [[{"kind": "poly", "target": 2, "vars": [1, 0], "coeff": 1}]]},
     ModelConfigError, "flux[0][0].target"),
])
def test_invalid_documents_name_the_field(doc, exc, field):
    with pytest.raises(exc) as info:
        load_model(doc)
    assert info.value.field == field


def test_invalid_json_is_a_config_error():
    with pytest.raises(ModelConfigError):
        load_model("{not json")


def test_low_smoothness_order_warns():
    with pytest.warns(UserWarning, match="smoothness_order"):
        load_model({"builtin": "pendulum", "smoothness_order": 3})


@given(st.lists(finite, min_size=2, max_size=2), st.floats(0.1, 5))
def test_scaling_multiplies_every_flux(u, factor):
    system = model.rotor()
    u = np.array(u)
    assert np.allclose(system.scaled(factor).flux(u), factor * system.flux(u), atol=1e-12)


@given(st.lists(finite, min_size=2, max_size=2), st.floats(0, 2 * np.pi))
def test_directional_flux_is_linear_in_direction(u, angle):
    system = model.pendulum(2)
    u = np.array(u)
    nu = np.array([np.cos(angle), np.sin(angle)])
    expected = nu[0] * system.flux(u, 0) + nu[1] * system.flux(u, 1)
    assert np.allclose(system.directional_flux(u, nu), expected)


@settings(max_examples=30)
@given(st.lists(finite, min_size=2, max_size=2))
def test_rotor_flux_is_rotation_equivariant(u):
    system = model.rotor()
    u = np.array(u)
    th = 0.7
    R = np.array([[np.cos(th), -np.sin(th)], [np.sin(th), np.cos(th)]])
    assert np.allclose(system.flux(R @ u), R @ system.flux(u), atol=1e-10)
