"""Experiment dispatch for the command line.

Every experiment returns ``(results, tables, status)``: a JSON-able mapping,
a dict of CSV tables ``name -> (header, rows)`` and an exit status.
"""

from __future__ import annotations

import math

import numpy as np

from . import bsde, catalog, control, forward, malliavin, semigroup
from .config import RunConfig
from .errors import ConfigInvalid
from .levy import LevyModel, TimeGrid, derive_seed, sample_noise_batch, validate_levy_model

OK, CONFIG_ERROR, NUMERICAL, INCONCLUSIVE = 0, 2, 3, 4


def _grid(cfg: RunConfig) -> TimeGrid:
    g = cfg["grid"]
    return TimeGrid(g["tau"], g["T"], g["r"], g["M"])


def _model(cfg: RunConfig) -> LevyModel:
    lv = cfg["levy"]
    m = LevyModel.from_atoms([(a["z"], a["rate"]) for a in lv["atoms"]], lv["delta"])
    validate_levy_model(m)
    return m


def _param(cfg, key, default):
    return cfg["params"].get(key, default)


def _grid_time(cfg, key, default, grid: TimeGrid):
    v = _param(cfg, key, default)
    if isinstance(v, bool) or not isinstance(v, (int, float)):
        raise ConfigInvalid(f"params.{key}", f"expected a grid time, got {v!r}")
    try:
        grid.index_of(float(v))
    except Exception as exc:
        raise ConfigInvalid(f"params.{key}", str(exc)) from exc
    return float(v)


def _setup(cfg: RunConfig):
    grid = _grid(cfg)
    model = _model(cfg)
    coeffs = catalog.coefficients_from_config(cfg["coefficients"], grid)
    init = catalog.initial_point_from_config(cfg["init"], grid)
    phi = catalog.functional_from_config(cfg["phi"], grid)
    return grid, model, coeffs, init, phi


def _basis(cfg: RunConfig) -> bsde.RegressionBasis:
    feats = _param(cfg, "features", list(bsde.ALL_FEATURES))
    ridge = _param(cfg, "ridge_lambda", None)
    try:
        return bsde.RegressionBasis(tuple(feats), ridge)
    except (ValueError, TypeError) as exc:
        raise ConfigInvalid("params.features", str(exc)) from exc


def _convention(cfg):
    conv = _param(cfg, "convention", "mild")
    if conv not in bsde.CONVENTIONS:
        raise ConfigInvalid("params.convention", f"must be one of {sorted(bsde.CONVENTIONS)}")
    return conv


# ---------------------------------------------------------------------------


def run_simulate(cfg):
    grid, model, coeffs, init, _ = _setup(cfg)
    ens = forward.simulate_ensemble(coeffs, init, model, grid, cfg.seed, cfg["budget"]["n_paths"])
    n = min(cfg["budget"]["csv_paths"], ens.n_paths)
    rows = []
    times = grid.times
    for p in range(n):
        cnt = ens.noise.counts[p].sum(axis=1) if model.n_atoms else np.zeros(grid.n_steps, int)
        for i in range(grid.n_steps + 1):
            rows.append([int(ens.path_indices[p]), i, float(times[i]), float(ens.values[p, i]),
                         int(cnt[i - 1]) if i else 0])
    res = {"stats": ens.stats().to_dict(), "n_steps": grid.n_steps, "dt": grid.dt}
    return res, {"paths": (["path_index", "step", "t", "X", "jumps"], rows)}, OK


def run_semigroup(cfg):
    grid, model, coeffs, init, phi = _setup(cfg)
    t = _grid_time(cfg, "t", grid.T, grid)
    est = semigroup.semigroup_apply(coeffs, model, grid, phi, init, t, cfg["budget"]["n_paths"], cfg.seed)
    return {"estimate": est.to_dict(), "t": t}, {}, OK


def run_markov(cfg):
    grid, model, coeffs, init, phi = _setup(cfg)
    s = _grid_time(cfg, "s", grid.tau + grid.r, grid)
    t = _grid_time(cfg, "t", grid.T, grid)
    restart = _param(cfg, "restart", "segment")
    if restart not in ("segment", "present"):
        raise ConfigInvalid("params.restart", "must be 'segment' or 'present'")
    b = cfg["budget"]
    rep = semigroup.markov_property_test(coeffs, model, grid, phi, init, s, t, b["n_outer"], b["n_inner"],
                                         cfg.seed, restart=restart, coupled=bool(_param(cfg, "coupled", False)))
    status = OK if (rep.consistent or restart == "present") else INCONCLUSIVE
    rows = [[o, float(d), float(e), float(z)] for o, (d, e, z) in
            enumerate(zip(rep.diffs, rep.std_errors, rep.z_per_outer))]
    return {"markov": rep.to_dict(), "s": s, "t": t}, {"markov_outer": (["outer", "diff", "std_error", "z"], rows)}, status


def run_malliavin(cfg):
    grid, model, coeffs, init, phi = _setup(cfg)
    if not model.n_atoms:
        raise ConfigInvalid("levy.atoms", "the jump derivative needs at least one atom")
    b = cfg["budget"]
    noise = sample_noise_batch(model, grid, cfg.seed, range(b["n_paths"]))
    paths = [forward.simulate_path(coeffs, init, p) for p in noise.paths]
    rng = np.random.Generator(np.random.Philox(derive_seed(cfg.seed, 5)))
    before_bad = at_bad = 0
    max_res = 0.0
    rows = []
    for k in range(b["n_probes"]):
        p = int(rng.integers(len(paths)))
        j = int(rng.integers(grid.n_steps))
        z = float(model.marks[rng.integers(model.n_atoms)])
        base = paths[p]
        pert = malliavin.malliavin_forward(coeffs, base, grid.time(j), z)
        w = malliavin._windows(init.history, base.values)[j][None, :]
        gam = float(np.asarray(coeffs.gamma(grid.time(j), w, base.values[j: j + 1], z)).reshape(-1)[0])
        before_ok = bool(np.all(pert.derivative[:j] == 0.0)) and np.array_equal(pert.perturbed.values[:j], base.values[:j])
        at_ok = pert.derivative[j] == gam
        before_bad += not before_ok
        at_bad += not at_ok
        cr = malliavin.chain_rule_check(phi, pert, grid.T)
        max_res = max(max_res, cr.residual)
        rows.append([k, p, grid.time(j), z, float(pert.derivative[-1]), cr.direct, cr.residual])
    res = {"n_probes": b["n_probes"], "adaptedness_violations": before_bad, "jump_value_violations": at_bad,
           "max_chain_rule_residual": max_res}
    status = OK if (before_bad == 0 and at_bad == 0 and max_res == 0.0) else NUMERICAL
    return res, {"probes": (["probe", "path", "s", "z", "D_T", "D_phi", "residual"], rows)}, status


def run_qv(cfg):
    grid, model, coeffs, init, phi = _setup(cfg)
    b = cfg["budget"]
    u = lambda t, h, x: phi(h, x)
    study = malliavin.qv_study(coeffs, model, grid, init, u, b["n_paths"], cfg.seed, b["n_levels"])
    res = {"levels": [l.__dict__ for l in study.levels], "ratios": list(study.ratios),
           "window_end": study.window_end}
    return res, {"qv_study": (["dt", "epsilon", "mean_abs_diff", "std_error"], study.to_rows())}, OK


def _bsde_problem(cfg, grid, phi):
    psi = catalog.generator_from_config(cfg["psi"])
    return bsde.BsdeProblem(psi, phi, psi.lipschitz, 1.0, f"{psi.name}|{phi.name}")


def run_solve_bsde(cfg):
    grid, model, coeffs, init, phi = _setup(cfg)
    prob = _bsde_problem(cfg, grid, phi)
    est = bsde.u_representation(prob, coeffs, model, grid, init, cfg["budget"]["n_paths"], cfg.seed,
                                _basis(cfg), _convention(cfg), int(_param(cfg, "implicit_iters", 0)))
    sol = est.solution
    sg = semigroup.estimate_from_ensemble(phi, sol.ensemble, grid.n_steps)
    summ = sol.summary()
    rows = [[summ["t"][i], summ["y_mean"][i], summ["z_mean"][i] if i < grid.n_steps else math.nan,
             summ["u_tilde_mean"][i] if i < grid.n_steps else math.nan] for i in range(grid.n_steps + 1)]
    res = {"bsde": est.to_dict(), "semigroup_phi": sg.to_dict(),
           "feynman_kac_gap": est.value - sg.value}
    return res, {"bsde_slices": (["t", "y_mean", "z_mean", "u_tilde_mean"], rows)}, OK


def run_mild(cfg):
    grid, model, coeffs, init, phi = _setup(cfg)
    prob = _bsde_problem(cfg, grid, phi)
    b = cfg["budget"]
    est = bsde.u_representation(prob, coeffs, model, grid, init, b["n_paths"], cfg.seed,
                                _basis(cfg), _convention(cfg), int(_param(cfg, "implicit_iters", 0)), split=False)
    t = _param(cfg, "t", None)
    if t is not None:
        t = _grid_time(cfg, "t", grid.tau, grid)
    mr = bsde.mild_residual(est.solution, b["n_check"], derive_seed(cfg.seed, 3), t,
                            n_outer=int(_param(cfg, "n_outer", 1)))
    res = {"bsde": est.to_dict(), "mild": mr.to_dict(),
           "within_3_se": bool(mr.residual < 3 * mr.std_error) if mr.std_error > 0 else mr.residual == 0}
    return res, {}, OK


def run_control(cfg):
    grid, model, _, init, _ = _setup(cfg)
    coeffs = catalog.coefficients_from_config(cfg["coefficients"], grid) if cfg["coefficients"] else None
    prob = control.control_problem_from_config(cfg["control"], coeffs)
    b = cfg["budget"]
    rep = control.verification_battery(prob, model, grid, init, b["n_solve"], b["n_eval"], cfg.seed, _basis(cfg))
    status = OK if rep.passed and not rep.inconclusive else INCONCLUSIVE
    return {"verification": rep.to_dict()}, {}, status


EXPERIMENTS = {
    "simulate": run_simulate,
    "semigroup": run_semigroup,
    "markov-test": run_markov,
    "malliavin": run_malliavin,
    "qv-study": run_qv,
    "solve-bsde": run_solve_bsde,
    "mild-residual": run_mild,
    "control-verify": run_control,
}


def run(cfg: RunConfig):
    return EXPERIMENTS[cfg.experiment](cfg)
