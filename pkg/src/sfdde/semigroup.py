"""Monte-Carlo transition semigroup and a statistical test of the Markov property
of the segment process."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import AllPathsDiverged, NumericalBlowup, OffGridTime
from .forward import Coefficients, Ensemble, euler_kernel, simulate_ensemble
from .levy import LevyModel, TimeGrid, derive_seed, sample_noise_batch
from .segment import DelfourMitterPoint


@dataclass(frozen=True)
class SemigroupEstimate:
    value: float
    std_error: float
    n_paths: int
    phi: str
    n_diverged: int = 0

    def to_dict(self) -> dict:
        return dict(self.__dict__)


def phi_on_ensemble(phi, ens: Ensemble, i: int) -> np.ndarray:
    hist, x = ens.segment(i)
    return phi(hist, x)


def _mean_se(v: np.ndarray):
    n = v.size
    if n == 0:
        raise AllPathsDiverged("no finite path left to average")
    mean = float(v.mean())
    se = float(v.std(ddof=1) / math.sqrt(n)) if n > 1 else 0.0
    return mean, se


def estimate_from_ensemble(phi, ens: Ensemble, i: int) -> SemigroupEstimate:
    order = np.argsort(ens.path_indices, kind="stable")
    ok = order[~ens.diverged[order]]
    vals = phi_on_ensemble(phi, ens, i)[ok]
    mean, se = _mean_se(vals)
    return SemigroupEstimate(mean, se, ens.n_paths, getattr(phi, "name", "phi"), int(ens.diverged.sum()))


def semigroup_apply(coeffs: Coefficients, model: LevyModel, grid: TimeGrid, phi,
                    init: DelfourMitterPoint, t: float, n_paths: int, seed: int) -> SemigroupEstimate:
    """``E[phi(X_t, X(t))]`` started from ``init`` at ``grid.tau``."""
    i = grid.index_of(t)
    try:
        ens = simulate_ensemble(coeffs, init, model, grid, seed, n_paths)
    except NumericalBlowup as exc:
        raise AllPathsDiverged(str(exc)) from exc
    return estimate_from_ensemble(phi, ens, i)


# ---------------------------------------------------------------------------
# Markov property


@dataclass(frozen=True)
class MarkovReport:
    diffs: np.ndarray        # continuation minus restart, per outer path
    std_errors: np.ndarray
    z_per_outer: np.ndarray
    z_aggregate: float
    continuation_mean: float
    restart_mean: float
    restart_mean_se: float
    n_outer: int
    n_inner: int
    restart: str
    n_diverged: int

    @property
    def consistent(self) -> bool:
        return abs(self.z_aggregate) < 4.0

    def to_dict(self) -> dict:
        return {
            "z_aggregate": self.z_aggregate,
            "consistent": self.consistent,
            "mean_diff": float(self.diffs.mean()),
            "max_abs_z": float(np.abs(self.z_per_outer).max()) if self.z_per_outer.size else 0.0,
            "continuation_mean": self.continuation_mean,
            "restart_mean": self.restart_mean,
            "restart_mean_se": self.restart_mean_se,
            "n_outer": self.n_outer,
            "n_inner": self.n_inner,
            "restart": self.restart,
            "n_diverged": self.n_diverged,
        }


def _inner_noise(model, sub: TimeGrid, seed: int, outer_index: int, kind: int, n_inner: int):
    return sample_noise_batch(model, sub, derive_seed(seed, outer_index, kind), range(n_inner))


def markov_property_test(coeffs: Coefficients, model: LevyModel, grid: TimeGrid, phi,
                         init: DelfourMitterPoint, s: float, t: float, n_outer: int, n_inner: int,
                         seed: int, restart: str = "segment", restart_coeffs: Coefficients | None = None,
                         coupled: bool = False) -> MarkovReport:
    """Compare continuation and restart estimates of ``E[phi(X_t) | F_s]``.

    Continuation re-simulates each outer path from ``tau`` with its own noise
    up to ``s`` and fresh noise afterwards.  Restart launches from the
    extracted state at ``s`` (``restart="segment"``) or from the present value
    alone with the history zeroed (``restart="present"``, a negative control).
    With ``coupled=True`` both use the same fresh noise.
    """
    i_s, i_t = grid.index_of(s), grid.index_of(t)
    if not i_s < i_t:
        raise OffGridTime(f"need s < t, got s={s}, t={t}")
    if restart not in ("segment", "present"):
        raise ValueError("restart must be 'segment' or 'present'")
    restart_coeffs = restart_coeffs or coeffs
    outer = simulate_ensemble(coeffs, init, model, grid, seed, n_outer)
    sub = grid.subgrid(i_s)
    M = grid.M
    buf = outer.buffer()
    rows_cont = []
    dW_c, cnt_c, dW_r, cnt_r, eta_r, x_r = [], [], [], [], [], []
    for o in range(n_outer):
        if outer.diverged[o]:
            continue
        fresh = _inner_noise(model, sub, seed, o, 1, n_inner)
        other = fresh if coupled else _inner_noise(model, sub, seed, o, 2, n_inner)
        pre_w = np.broadcast_to(outer.noise.dW[o, :i_s], (n_inner, i_s))
        pre_c = np.broadcast_to(outer.noise.counts[o, :i_s], (n_inner, i_s, model.n_atoms))
        dW_c.append(np.concatenate([pre_w, fresh.dW], axis=1))
        cnt_c.append(np.concatenate([pre_c, fresh.counts], axis=1))
        dW_r.append(other.dW)
        cnt_r.append(other.counts)
        hist, x = outer.segment(i_s, buf)
        h = np.array(hist[o], dtype=float)
        if restart == "present":
            h = np.zeros_like(h)
        eta_r.append(np.broadcast_to(h, (n_inner, M + 1)))
        x_r.append(np.full(n_inner, x[o]))
        rows_cont.append(o)
    if not rows_cont:
        raise AllPathsDiverged("every outer path diverged")
    n_ok = len(rows_cont)
    vc, dc = euler_kernel(coeffs, model, grid, init.history, init.present,
                          np.concatenate(dW_c), np.concatenate(cnt_c))
    vr, dr = euler_kernel(restart_coeffs, model, sub, np.concatenate(eta_r), np.concatenate(x_r),
                          np.concatenate(dW_r), np.concatenate(cnt_r))
    # phi at t for both bundles
    bc = np.concatenate([np.broadcast_to(init.history, (vc.shape[0], M + 1))[:, :M], vc], axis=1)
    fc = phi(bc[:, i_t: i_t + M + 1], vc[:, i_t])
    j = i_t - i_s
    er = np.concatenate(eta_r)
    br = np.concatenate([er[:, :M], vr], axis=1)
    fr = phi(br[:, j: j + M + 1], vr[:, j])
    fc = fc.reshape(n_ok, n_inner)
    fr = fr.reshape(n_ok, n_inner)
    dc, dr = dc.reshape(n_ok, n_inner), dr.reshape(n_ok, n_inner)
    diffs, ses, means_c, means_r = [], [], [], []
    for o in range(n_ok):
        a, b = fc[o][~dc[o]], fr[o][~dr[o]]
        ma, sa = _mean_se(a)
        mb, sb = _mean_se(b)
        diffs.append(ma - mb)
        ses.append(math.hypot(sa, sb))
        means_c.append(ma)
        means_r.append(mb)
    diffs, ses = np.array(diffs), np.array(ses)
    with np.errstate(divide="ignore", invalid="ignore"):
        z = np.where(ses > 0, diffs / np.where(ses > 0, ses, 1.0), 0.0)
    tot_se = math.sqrt(float((ses**2).sum()))
    z_agg = float(diffs.sum() / tot_se) if tot_se > 0 else (0.0 if not diffs.any() else math.inf)
    means_r = np.array(means_r)
    rm_se = float(means_r.std(ddof=1) / math.sqrt(n_ok)) if n_ok > 1 else 0.0
    return MarkovReport(diffs, ses, z, z_agg, float(np.mean(means_c)), float(means_r.mean()), rm_se,
                        n_outer, n_inner, restart, int(dc.sum() + dr.sum() + outer.diverged.sum()))
