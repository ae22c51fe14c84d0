import numpy as np
import pytest

from sfdde.catalog import (coefficients_from_config, functional_from_config, generator_from_config,
                           initial_point_from_config)
from sfdde.errors import CatalogMiss, ConfigInvalid
from sfdde.levy import TimeGrid

G = TimeGrid(0.0, 1.0, 0.5, 5)
H = np.tile(np.linspace(0.0, 1.0, 6), (2, 1))
X = np.array([1.0, -2.0])


def test_drift_terms_sum_and_lipschitz():
    c = coefficients_from_config({"mu": [{"type": "linear", "a": -1.0, "b": 0.5},
                                         {"type": "delayed_tap", "a": 2.0, "theta": -0.5},
                                         {"type": "distributed_delay",
                                          "atoms": [{"theta": -0.5, "weight": 1.0}, {"theta": 0.0, "weight": -1.0}]}]},
                                 G)
    assert np.allclose(c.mu(0.0, H, X), -X + 0.5 + 2.0 * 0.0 + (0.0 - 1.0))
    assert c.lipschitz_K == 1.0 + 2.0 + 2.0


def test_jump_terms():
    c = coefficients_from_config({"gamma": [{"type": "additive", "scale": 2.0}, {"type": "geometric"}]}, G)
    assert np.allclose(c.gamma(0.0, H, X, 0.5), 1.0 + 0.5 * X)
    assert np.allclose(coefficients_from_config({}, G).gamma(0.0, H, X, 0.5), 0.0)


def test_tap_outside_window():
    with pytest.raises(ConfigInvalid):
        coefficients_from_config({"mu": {"type": "delayed_tap", "theta": -0.7}}, G)


def test_functionals():
    assert np.allclose(functional_from_config({"type": "monomial", "k": 3}, G)(H, X), X**3)
    assert np.allclose(functional_from_config({"type": "segment_average"}, G)(H, X), 0.5)
    assert np.allclose(functional_from_config({"type": "ramp", "threshold": 0.0, "width": 1.0}, G)(H, X), [1.0, 0.0])
    call = functional_from_config({"type": "call_smoothed", "strike": 0.0, "eps": 1e-3}, G)(H, X)
    assert call == pytest.approx([1.0, 0.0], abs=1e-3)
    with pytest.raises(CatalogMiss):
        functional_from_config({"type": "digital"}, G)


def test_generators():
    y, z, u = np.array([1.0, 2.0]), np.array([0.5, 0.5]), np.array([3.0, 0.0])
    g = generator_from_config({"type": "lipschitz", "a": 1.0, "b": 2.0, "c": 0.5, "d": -1.0})
    assert np.allclose(g(0.0, H, X, y, z, u), y + 2 * z + 0.5 * u - 1.0)
    assert g.lipschitz == 3.5
    assert np.allclose(generator_from_config({"type": "constant", "value": -0.7})(0.0, H, X, y, z, u), -0.7)
    assert np.allclose(generator_from_config(None)(0.0, H, X, y, z, u), 0.0)
    with pytest.raises(ConfigInvalid):
        generator_from_config({"type": "constant"})


def test_initial_points():
    assert initial_point_from_config(2.0, G).present == 2.0
    r = initial_point_from_config({"ramp": {"start": 0.0, "end": 1.0}, "present": 5.0}, G)
    assert r.history[-1] == 1.0 and r.present == 5.0
    s = initial_point_from_config({"samples": [0, 1, 2, 3, 4, 5]}, G)
    assert s.present == 5.0
    with pytest.raises(ConfigInvalid):
        initial_point_from_config({"samples": [0, 1]}, G)
    with pytest.raises(ConfigInvalid):
        initial_point_from_config({"spline": 1}, G)
