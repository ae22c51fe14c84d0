import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from conftest import const
from sfdde.bsde import BsdeProblem, RegressionBasis, u_representation
from sfdde.catalog import Generator
from sfdde.control import (ConstantControl, ControlProblem, LinearFeedback, RandomControl, TIE_TOL, evaluate_cost,
                           control_problem_from_config, hamiltonian, hamiltonian_batch, select_from_gradient,
                           solve_hjb, synthesize_feedback, verification_battery)
from sfdde.errors import CatalogMiss, SigmaSingular
from sfdde.forward import Coefficients
from sfdde.levy import LevyModel, TimeGrid
from sfdde.segment import DelfourMitterPoint

BROWNIAN = Coefficients(sigma=const(1.0))
G = TimeGrid(0.0, 1.0, 0.1, 5)
INIT = DelfourMitterPoint.constant(1.0, G.M, G.dt)
FREE = LevyModel.jump_free()
POLY = RegressionBasis(("x", "x2", "x3"))


def problem(h, F, grid, g=lambda x: np.zeros_like(x), coeffs=BROWNIAN, **kw):
    return ControlProblem(F, h, g, np.asarray(grid, dtype=float), 10.0, coeffs, **kw)


def test_zero_bracket_whole_grid():
    p = problem(lambda t, x, a: 0.0 * a, lambda t, x, a: 0.0 * a, [-1, 0, 1])
    hv = hamiltonian(p, 0.0, 0.3, 2.0)
    assert hv.value == 0.0 and hv.argmin_set == (-1.0, 0.0, 1.0) and hv.selected == -1.0


def test_five_point_enumeration():
    p = problem(lambda t, x, a: a * a, lambda t, x, a: a + 0 * x, [-1, -0.5, 0, 0.5, 1])
    hv = hamiltonian(p, 0.0, 0.0, 1.0)
    assert hv.value == 0.25 and hv.argmin_set == (-0.5,)


def test_abs_cost_zero_gradient():
    p = problem(lambda t, x, a: np.abs(a) + 0 * x, lambda t, x, a: a + 0 * x, [-1, -0.5, 0, 0.5, 1])
    hv = hamiltonian(p, 0.0, 0.0, 0.0)
    assert hv.value == 0.0 and hv.argmin_set == (0.0,)


def test_sigma_singular_reports_state():
    p = problem(lambda t, x, a: a * a, lambda t, x, a: a, [0, 1], coeffs=Coefficients(sigma=const(1e-3)))
    with pytest.raises(SigmaSingular) as exc:
        hamiltonian(p, 0.2, 0.5, 1.0)
    assert exc.value.state == (0.2, 0.5)


ACTIONS = np.linspace(-2, 2, 41)


@settings(max_examples=50)
@given(st.floats(-5, 5), st.floats(-5, 5), st.floats(0.01, 100))
def test_argmin_scale_invariant(x, z, c):
    h = lambda t, x, a: (a - 0.3) ** 2 + x * a
    p = problem(h, lambda t, x, a: a + 0 * x, ACTIONS)
    q = problem(lambda t, x, a: c * h(t, x, a), lambda t, x, a: c * a + 0 * x, ACTIONS)
    hp, hq = hamiltonian(p, 0.0, x, z), hamiltonian(q, 0.0, x, z)
    assert hp.selected == hq.selected
    assert hq.value == pytest.approx(c * hp.value, rel=1e-9, abs=1e-9)


@settings(max_examples=50)
@given(st.floats(-5, 5), st.floats(-5, 5), st.lists(st.floats(-3, 3), min_size=1, max_size=10))
def test_enrich_grid_never_raises_min(x, z, extra):
    h = lambda t, x, a: a * a + np.sin(a * x)
    p = problem(h, lambda t, x, a: a + 0 * x, ACTIONS)
    q = problem(h, lambda t, x, a: a + 0 * x, np.concatenate([ACTIONS, extra]))
    assert -hamiltonian(q, 0.0, x, z).value <= -hamiltonian(p, 0.0, x, z).value


@settings(max_examples=50)
@given(st.floats(-5, 5), st.floats(-5, 5))
def test_selected_in_gamma(x, z):
    p = problem(lambda t, x, a: a * a + x * x, lambda t, x, a: a + 0 * x, ACTIONS)
    val, act, idx = hamiltonian_batch(p, 0.0, np.array([x]), np.array([z]))
    bracket = act[0] ** 2 + x * x + z * act[0]
    assert abs(bracket - (-val[0])) <= TIE_TOL
    assert act[0] in ACTIONS


class _FakeSolution:
    """Value-function stub ``u = x^2`` for policy checks."""

    def d_dx(self, i, hist, x):
        return 2.0 * np.asarray(x, dtype=float)


class _FakeHjb:
    solution = _FakeSolution()
    u0 = 0.0


def test_feedback_ignores_gradient_without_F():
    p = problem(lambda t, x, a: (a - 1.0) ** 2 + 0 * x, lambda t, x, a: 0.0 * a + 0 * x, ACTIONS)
    pol = synthesize_feedback(p, _FakeHjb())
    assert np.all(pol(0, 0.0, None, np.array([-3.0, 0.0, 4.0])) == 1.0)


def test_single_action_constant_policy():
    p = problem(lambda t, x, a: a * a + 0 * x, lambda t, x, a: a + 0 * x, [0.7])
    pol = synthesize_feedback(p, _FakeHjb())
    assert np.all(pol(0, 0.0, None, np.linspace(-3, 3, 7)) == 0.7)


def test_lq_policy_against_enumeration():
    p = control_problem_from_config({"type": "lq"})
    rng = np.random.default_rng(3)
    ts, xs = rng.uniform(0, 1, 100), rng.uniform(-2, 2, 100)
    grid = p.action_grid
    pol = synthesize_feedback(p, _FakeHjb())
    for t, x in zip(ts, xs):
        pgrad = 2 * x
        a = pol(0, t, None, np.array([x]))[0]
        enum = grid[np.argmin(grid**2 + x * x + pgrad * grid)]
        assert a == enum
        assert abs(a - np.clip(-pgrad / 2, grid[0], grid[-1])) <= 0.5 * (grid[1] - grid[0]) + 1e-12


def test_literal_reading_differs():
    p = control_problem_from_config({"type": "lq", "sigma": 2.0, "gradient_reading": "literal"})
    v_lit, _ = select_from_gradient(p, 0.0, np.array([1.0]), np.array([-1.0]))
    q = control_problem_from_config({"type": "lq", "sigma": 2.0})
    v_sig, _ = select_from_gradient(q, 0.0, np.array([1.0]), np.array([-1.0]))
    assert v_lit[0] != v_sig[0]


def test_cost_constant_terminal():
    p = problem(lambda t, x, a: 0.0 * x, lambda t, x, a: a + 0 * x, [0, 1], g=lambda x: np.ones_like(x))
    est = evaluate_cost(p, ConstantControl(1.0), FREE, G, INIT, 100, 1)
    assert est.J == 1.0 and est.std_error == 0.0


def test_cost_constant_running():
    p = problem(lambda t, x, a: 0.0 * x + 0.4, lambda t, x, a: a + 0 * x, [0, 1])
    est = evaluate_cost(p, lambda t: 0.0, FREE, G, INIT, 100, 1)
    assert est.J == pytest.approx(0.4 * (G.T - G.tau), rel=1e-12)


def test_controlled_drift_is_additive():
    zero = Coefficients(sigma=const(1.0))
    p = problem(lambda t, x, a: 0.0 * x, lambda t, x, a: a + 0 * x, [0, 1], g=lambda x: x, coeffs=zero)
    base = evaluate_cost(p, ConstantControl(0.0), FREE, G, INIT, 500, 2)
    push = evaluate_cost(p, ConstantControl(1.0), FREE, G, INIT, 500, 2)
    assert push.J - base.J == pytest.approx(G.T - G.tau, rel=1e-10)


def test_uncontrolled_cost_matches_bsde():
    c = Coefficients(mu=lambda t, h, x: -x, sigma=const(0.5))
    h = lambda t, x, a: x * x + 0 * a
    p = problem(h, lambda t, x, a: 0.0 * a + 0 * x, [0.0], g=lambda x: np.abs(x), coeffs=c)
    J = evaluate_cost(p, ConstantControl(0.0), FREE, G, INIT, 20_000, 3)
    gen = Generator(lambda t, hist, x, y, z, u: x * x, "running")
    u = u_representation(BsdeProblem(gen, lambda hist, x: np.abs(x)), c, FREE, G, INIT, 20_000, 4, POLY)
    assert abs(J.J - u.value) < 3 * math.hypot(J.std_error, u.std_error)


def test_random_control_reproducible():
    rc = RandomControl(ACTIONS)
    rc.reset(4, 3, 9)
    first = rc(1, 0.0, None, np.zeros(4)).copy()
    rc.reset(4, 3, 9)
    assert np.array_equal(first, rc(1, 0.0, None, np.zeros(4)))
    assert set(first) <= set(ACTIONS)


def test_battery_irrelevant_control():
    p = problem(lambda t, x, a: x * x + 0 * a, lambda t, x, a: 0.0 * a + 0 * x, ACTIONS, g=lambda x: x * x)
    rep = verification_battery(p, FREE, G, INIT, 4000, 4000, 1, POLY)
    for cand in rep.candidates + (rep.feedback,):
        assert abs(cand.gap) < 3 * cand.band
    assert rep.none_beat


def test_battery_decoupled_target():
    p = problem(lambda t, x, a: (a - 1.0) ** 2 + 0 * x, lambda t, x, a: 0.0 * a + 0 * x, ACTIONS)
    hjb = solve_hjb(p, FREE, G, INIT, 2000, 1, POLY)
    pol = synthesize_feedback(p, hjb)
    assert np.all(pol(0, 0.0, None, np.linspace(-2, 2, 9)) == 1.0)
    assert hjb.u0 == pytest.approx(0.0, abs=1e-12)
    assert set(pol(0, 0.0, None, np.linspace(-2, 2, 9))) <= set(p.action_grid)


def test_config_catalog():
    for kind in ("lq", "tracking", "bang_bang"):
        p = control_problem_from_config({"type": kind})
        assert p.action_grid.size >= 1 and p.name == kind
    assert control_problem_from_config({"type": "bang_bang"}).action_grid.tolist() == [-3.0, 0.0, 3.0]
    with pytest.raises(CatalogMiss):
        control_problem_from_config({"type": "exotic"})
    with pytest.raises(ValueError):
        problem(lambda t, x, a: a, lambda t, x, a: a, [])
