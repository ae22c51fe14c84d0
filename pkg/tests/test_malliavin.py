import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from conftest import additive_jumps, const
from sfdde.catalog import Functional
from sfdde.errors import NotAnAtom, OffGridTime, WindowTooLong
from sfdde.forward import Coefficients, simulate_path
from sfdde.levy import LevyModel, NoiseBatch, TimeGrid, compensated_J_grid, sample_noise
from sfdde.malliavin import (_windows, brownian_path, chain_rule_check, directional_gradient_qv,
                             joint_qv_estimator, jump_sum_qv, malliavin_forward, qv_compare, qv_study, u_along)
from sfdde.segment import DelfourMitterPoint, trapezoid

G = TimeGrid(0.0, 1.0, 0.5, 10)
JUMPS = LevyModel.from_atoms([(0.5, 2.0), (-0.3, 1.0)])
INIT = DelfourMitterPoint.ramp(0.5, 1.0, G.M, G.dt)
RICH = Coefficients(mu=lambda t, h, x: -0.5 * h[:, 0] - 0.3 * x, sigma=lambda t, h, x: 0.4 + 0.1 * np.sin(x),
                    gamma=lambda t, h, x, z: x * z)


def _base(coeffs=RICH, p=0, model=JUMPS):
    return simulate_path(coeffs, INIT, sample_noise(model, G, 3, p))


def test_zero_gamma_zero_derivative():
    c = Coefficients(mu=lambda t, h, x: -x, sigma=const(0.3))
    pert = malliavin_forward(c, _base(c), 0.3, 0.5)
    assert np.all(pert.derivative == 0.0)


def test_additive_translation():
    c = Coefficients(gamma=additive_jumps())
    pert = malliavin_forward(c, _base(c), 0.3, -0.3)
    j = G.index_of(0.3)
    assert np.all(pert.derivative[:j] == 0.0)
    assert np.all(pert.derivative[j:] == -0.3)


def test_linear_recursion_oracle():
    c = Coefficients(mu=lambda t, h, x: -x, gamma=additive_jumps())
    pert = malliavin_forward(c, _base(c), 0.25, 0.5)
    j = pert.step
    k = np.arange(G.n_steps + 1 - j)
    assert np.allclose(pert.derivative[j:], 0.5 * (1 - G.dt) ** k, rtol=1e-13, atol=0)


def test_not_an_atom_and_off_grid():
    with pytest.raises(NotAnAtom):
        malliavin_forward(RICH, _base(), 0.3, 0.4)
    with pytest.raises(OffGridTime):
        malliavin_forward(RICH, _base(), 0.333, 0.5)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 30), st.integers(0, G.n_steps - 1), st.sampled_from([0.5, -0.3]))
def test_adaptedness_exact(p, j, z):
    base = _base(p=p)
    pert = malliavin_forward(RICH, base, G.time(j), z)
    assert np.all(pert.derivative[:j] == 0.0)
    assert np.array_equal(pert.perturbed.values[:j], base.values[:j])
    gam = RICH.gamma(G.time(j), _windows(INIT.history, base.values)[j][None, :], base.values[j: j + 1], z)
    assert pert.derivative[j] == float(np.asarray(gam).reshape(-1)[0])


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 30), st.integers(0, G.n_steps - 1), st.sampled_from([0.5, -0.3]),
       st.sampled_from(["x", "x2", "avg", "exp"]))
def test_chain_rule_identically_zero(p, j, z, name):
    fns = {"x": lambda h, x: x, "x2": lambda h, x: x * x, "avg": lambda h, x: trapezoid(h, G.dt) / G.r,
           "exp": lambda h, x: np.exp(-x * x) + h[:, 0]}
    pert = malliavin_forward(RICH, _base(p=p), G.time(j), z)
    for i in range(j, G.n_steps + 1):
        assert chain_rule_check(Functional(fns[name], name), pert, G.time(i)).residual == 0.0


def test_chain_rule_values():
    pert = malliavin_forward(RICH, _base(), 0.2, 0.5)
    i = G.n_steps
    D, X = pert.derivative[i], pert.base.values[i]
    assert chain_rule_check(Functional(lambda h, x: x, "x"), pert, 1.0).direct == pytest.approx(D, rel=1e-12)
    sq = chain_rule_check(Functional(lambda h, x: x * x, "x2"), pert, 1.0)
    assert sq.direct == pytest.approx(2 * X * D + D * D, rel=1e-10)
    assert abs(sq.direct - 2 * X * D) > 1e-6
    avg = chain_rule_check(Functional(lambda h, x: trapezoid(h, G.dt) / G.r, "avg"), pert, 1.0)
    assert avg.direct == pytest.approx(trapezoid(pert.derivative_segment(i), G.dt) / G.r, rel=1e-10)
    with pytest.raises(OffGridTime):
        chain_rule_check(Functional(lambda h, x: x, "x"), pert, 0.1)


def test_constant_u_zero_qv():
    j = np.random.default_rng(0).normal(size=G.n_steps + 1)
    assert joint_qv_estimator(np.ones(G.n_steps + 1), j, G, G.dt) == 0.0


def test_window_too_long():
    v = np.zeros(G.n_steps + 1)
    with pytest.raises(WindowTooLong):
        joint_qv_estimator(v, v, G, 2 * G.dt, window_end=G.T - G.dt)
    with pytest.raises(OffGridTime):
        joint_qv_estimator(v, v, G, 0.5 * G.dt)


def test_qv_estimator_hand_expansion():
    # u(x) = x, gamma = z, mu = sigma = 0 on a path with exactly three jumps
    m = LevyModel.from_atoms([(0.5, 2.0), (-0.3, 1.0)])
    c = Coefficients(gamma=additive_jumps())
    for p in range(200):
        noise = sample_noise(m, G, 17, p)
        if noise.jump_times.size == 3 and noise.jump_times.max() <= G.T - G.dt:
            break
    rec = simulate_path(c, INIT, noise)
    u = rec.values
    J = compensated_J_grid(NoiseBatch.from_paths([noise]))[0]
    end = G.T - G.dt
    c_eps = float(joint_qv_estimator(u, J, G, G.dt, end))
    dj = np.diff(J)[: G.index_of(end)]
    assert c_eps == pytest.approx(float((dj * dj).sum()), rel=1e-12)
    comp = m.first_moment * G.dt
    zs = noise.marks
    assert c_eps == pytest.approx(float((zs**2).sum()), abs=2 * comp * np.abs(zs).sum() + 40 * comp**2)
    assert jump_sum_qv(lambda t, h, x: x, rec, c, end) == pytest.approx(float((zs**2).sum()), rel=1e-12)


def test_jump_sum_square_hand_expansion():
    c = Coefficients(gamma=additive_jumps())
    rec = _base(c, p=4)
    zs, steps = rec.noise.marks, rec.noise.jump_steps
    assert zs.size >= 1
    expected = sum(z * (2 * rec.values[i] * z + z * z) for z, i in zip(zs, steps))
    assert jump_sum_qv(lambda t, h, x: x * x, rec, c) == pytest.approx(expected, rel=1e-12)


def test_jump_sum_without_jumps():
    rec = _base(RICH, model=LevyModel.jump_free())
    assert jump_sum_qv(lambda t, h, x: x * x, rec, RICH) == 0.0


def test_directional_gradient_examples():
    rec = _base()
    sig_sum = sum(G.dt * float(np.asarray(RICH.sigma(G.time(i), None, rec.values[i: i + 1])).reshape(-1)[0])
                  for i in range(G.n_steps))
    assert directional_gradient_qv(lambda t, h, x: x, rec, RICH) == pytest.approx(sig_sum, rel=1e-8)
    assert directional_gradient_qv(lambda t, h, x: np.full_like(x, 3.0), rec, RICH) == 0.0


def test_directional_gradient_matches_brownian_qv():
    g = TimeGrid(0.0, 1.0, 0.5, 100)
    c = Coefficients(sigma=const(1.0))
    init = DelfourMitterPoint.constant(0.0, g.M, g.dt, present=1.0)
    diffs = []
    for p in range(50):
        rec = simulate_path(c, init, sample_noise(LevyModel.jump_free(), g, 2, p))
        u = u_along(lambda t, h, x: x * x, rec)
        end = g.T - g.dt
        c_eps = float(joint_qv_estimator(u, brownian_path(rec.noise), g, g.dt, end))
        formula = directional_gradient_qv(lambda t, h, x: x * x, rec, c, end)
        assert formula == pytest.approx(float(g.dt * 2 * rec.values[: g.index_of(end)].sum()), rel=1e-6)
        diffs.append(c_eps - formula)
    assert abs(np.mean(diffs)) < 4 * np.std(diffs) / math.sqrt(len(diffs)) + 3 * math.sqrt(g.dt)


def test_qv_compare_window():
    est = qv_compare(lambda t, h, x: x * x, _base(), RICH)
    assert est.epsilon == G.dt
    assert est.window == (0.0, pytest.approx(G.T - G.dt, abs=1e-12))


def test_qv_study_decreases():
    c = Coefficients(mu=lambda t, h, x: -0.5 * x, gamma=additive_jumps())
    g = TimeGrid(0.0, 1.0, 0.5, 20)
    init = DelfourMitterPoint.constant(1.0, g.M, g.dt)
    st_ = qv_study(c, JUMPS, g, init, lambda t, h, x: x * x, 300, 1, 3)
    assert len(st_.levels) == 3 and len(st_.ratios) == 2
    assert st_.levels[0].mean_abs_diff > st_.levels[1].mean_abs_diff > st_.levels[2].mean_abs_diff
    assert st_.to_rows()[0][0] == g.dt
