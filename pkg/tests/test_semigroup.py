import math

import numpy as np
import pytest

from conftest import additive_jumps, const
from sfdde.catalog import Functional
from sfdde.errors import AllPathsDiverged, OffGridTime
from sfdde.forward import Coefficients, simulate_ensemble
from sfdde.levy import LevyModel, TimeGrid
from sfdde.segment import DelfourMitterPoint, segment_average
from sfdde.semigroup import estimate_from_ensemble, markov_property_test, semigroup_apply

G = TimeGrid(0.0, 1.0, 0.5, 5)
JUMPS = LevyModel.from_atoms([(0.5, 1.0)])
X = Functional(lambda h, x: x, "present")


def test_constant_functional():
    one = Functional(lambda h, x: np.ones_like(x), "one")
    est = semigroup_apply(Coefficients(sigma=const(1.0)), JUMPS, G, one, DelfourMitterPoint.constant(0.0, 5, 0.1),
                          1.0, 200, 1)
    assert est.value == 1.0 and est.std_error == 0.0


def test_zero_coefficients_present():
    init = DelfourMitterPoint.constant(0.0, 5, 0.1, present=2.5)
    est = semigroup_apply(Coefficients.zero(), JUMPS, G, X, init, 0.6, 50, 1)
    assert est.value == 2.5 and est.std_error == 0.0


def test_brownian_second_moment():
    init = DelfourMitterPoint.constant(0.0, 5, 0.1, present=0.5)
    sq = Functional(lambda h, x: x * x, "x2")
    est = semigroup_apply(Coefficients(sigma=const(1.0)), LevyModel.jump_free(), G, sq, init, 1.0, 40_000, 3)
    assert abs(est.value - (1.0 + 0.25)) < 4 * est.std_error
    assert est.std_error > 0


def test_off_grid_time():
    with pytest.raises(OffGridTime):
        semigroup_apply(Coefficients.zero(), JUMPS, G, X, DelfourMitterPoint.constant(0.0, 5, 0.1), 0.55, 5, 1)


def test_all_paths_diverged():
    bad = Coefficients(mu=lambda t, h, x: 1e6 * x * x)
    with pytest.raises(AllPathsDiverged):
        semigroup_apply(bad, JUMPS, G, X, DelfourMitterPoint.constant(1.0, 5, 0.1), 1.0, 5, 1)


def test_linear_in_phi_on_same_paths():
    coeffs = Coefficients(mu=lambda t, h, x: -h[:, 0], sigma=const(0.4), gamma=additive_jumps())
    ens = simulate_ensemble(coeffs, DelfourMitterPoint.constant(1.0, 5, 0.1), JUMPS, G, 5, 500)
    f = Functional(lambda h, x: x * x, "x2")
    g = Functional(lambda h, x: segment_average(h, 0.1), "avg")
    comb = Functional(lambda h, x: 2.0 * f(h, x) - 3.0 * g(h, x), "comb")
    a, b, c = (estimate_from_ensemble(p, ens, G.n_steps).value for p in (f, g, comb))
    assert c == pytest.approx(2 * a - 3 * b, rel=1e-12, abs=1e-12)


def test_chapman_kolmogorov():
    coeffs = Coefficients(mu=lambda t, h, x: -0.5 * h[:, 0], sigma=const(0.5), gamma=additive_jumps())
    init = DelfourMitterPoint.ramp(0.0, 1.0, 5, 0.1)
    direct = semigroup_apply(coeffs, JUMPS, G, X, init, 1.0, 20_000, 1)
    outer = simulate_ensemble(coeffs, init, JUMPS, G, 2, 200)
    s = G.index_of(0.5)
    inner_vals = []
    for o in range(outer.n_paths):
        p = outer.path(o)
        start = DelfourMitterPoint(p.segment(s), p.values[s], G.dt)
        inner_vals.append(semigroup_apply(coeffs, JUMPS, G.subgrid(s), X, start, 1.0, 100, 100 + o).value)
    nested = float(np.mean(inner_vals))
    nested_se = float(np.std(inner_vals, ddof=1) / math.sqrt(len(inner_vals)))
    assert abs(nested - direct.value) < 4 * math.hypot(nested_se, direct.std_error)


def test_markov_zero_coefficients_exact():
    init = DelfourMitterPoint.ramp(0.0, 1.0, 5, 0.1)
    rep = markov_property_test(Coefficients.zero(), JUMPS, G, X, init, 0.5, 1.0, 10, 20, 1)
    assert np.all(rep.diffs == 0.0)


def test_markov_coupled_exact_for_delay():
    coeffs = Coefficients(mu=lambda t, h, x: 2.0 * h[:, 0], sigma=const(1.0), gamma=additive_jumps())
    init = DelfourMitterPoint.ramp(0.0, 1.0, 5, 0.1)
    rep = markov_property_test(coeffs, JUMPS, G, X, init, 0.5, 1.0, 10, 30, 1, coupled=True)
    assert np.all(rep.diffs == 0.0)


def test_markov_memoryless_diffusion():
    coeffs = Coefficients(mu=lambda t, h, x: -x, sigma=const(1.0), gamma=additive_jumps())
    init = DelfourMitterPoint.constant(1.0, 5, 0.1)
    rep = markov_property_test(coeffs, JUMPS, G, X, init, 0.5, 1.0, 40, 100, 2)
    assert rep.consistent


def test_markov_history_matters_for_control():
    coeffs = Coefficients(mu=lambda t, h, x: 10.0 * h[:, 0], sigma=const(1.0))
    init = DelfourMitterPoint.ramp(1.0, 2.0, 5, 0.1)
    seg = markov_property_test(coeffs, LevyModel.jump_free(), G, X, init, 0.5, 1.0, 30, 100, 3)
    pres = markov_property_test(coeffs, LevyModel.jump_free(), G, X, init, 0.5, 1.0, 30, 100, 3, restart="present")
    assert seg.consistent
    assert abs(pres.z_aggregate) > 4
    d = pres.to_dict()
    assert d["restart"] == "present" and not d["consistent"]


def test_markov_needs_s_before_t():
    with pytest.raises(OffGridTime):
        markov_property_test(Coefficients.zero(), JUMPS, G, X, DelfourMitterPoint.constant(0.0, 5, 0.1),
                             1.0, 0.5, 2, 2, 1)
