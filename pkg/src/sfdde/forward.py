"""Euler simulation of the segment-driven jump SDE, a Picard cross-check, and
statistical checks of the moment and Lipschitz estimates.

Coefficient callables are vectorised over paths::

    mu(t, hist, x)        hist: (n, M+1) window samples, x: (n,)
    sigma(t, hist, x)
    gamma(t, hist, x, z)  z: a scalar mark

and must return arrays broadcastable to ``(n,)``.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .errors import AllPathsDiverged, GridMismatch, NoConvergence, NumericalBlowup
from .levy import LevyModel, NoiseBatch, NoisePath, TimeGrid, sample_noise_batch
from .segment import DelfourMitterPoint, history_buffer, m2_norm_sq, segment_from_buffer

BLOWUP_GUARD = 1e12


def _zero(t, hist, x):
    return np.zeros_like(x)


def _zero_jump(t, hist, x, z):
    return np.zeros_like(x)


@dataclass(frozen=True)
class Coefficients:
    mu: Callable = _zero
    sigma: Callable = _zero
    gamma: Callable = _zero_jump
    lipschitz_K: float = 0.0
    growth_m: float = 0.0
    name: str = "custom"

    @classmethod
    def zero(cls) -> "Coefficients":
        return cls(name="zero")


def _as_rows(v, n):
    return np.broadcast_to(np.asarray(v, dtype=float), (n,))


def step_increment(coeffs: Coefficients, model: LevyModel, t: float, dt: float,
                   hist: np.ndarray, x: np.ndarray, dw: np.ndarray, counts: np.ndarray):
    """One Euler increment at the left endpoint, jumps priced at the pre-step state.

    Returns ``(increment, jump_values)`` where ``jump_values[:, k]`` is
    ``gamma(t, hist, x, z_k)``.
    """
    n = x.shape[0]
    inc = _as_rows(coeffs.mu(t, hist, x), n) * dt + _as_rows(coeffs.sigma(t, hist, x), n) * dw
    K = model.n_atoms
    gv = np.empty((n, K))
    if K:
        for k, (z, lam) in enumerate(model.atoms):
            gv[:, k] = _as_rows(coeffs.gamma(t, hist, x, z), n)
        inc = inc + (counts * gv).sum(axis=1) - dt * (gv * model.rates).sum(axis=1)
    return inc, gv


def euler_kernel(coeffs: Coefficients, model: LevyModel, grid: TimeGrid,
                 eta: np.ndarray, x0, dW: np.ndarray, counts: np.ndarray,
                 extra_drift: Optional[Callable] = None):
    """Vectorised Euler sweep.

    ``eta`` is ``(M+1,)`` or per-path ``(n, M+1)``; ``x0`` scalar or ``(n,)``.
    ``extra_drift(i, t, hist, x)`` adds a drift term (used by closed-loop
    control).  Returns ``(values, diverged)``; diverged rows are NaN after
    the step where they crossed the guard.
    """
    n, N = dW.shape
    M = grid.M
    dt = grid.dt
    eta = np.asarray(eta, dtype=float)
    values = np.empty((n, N + 1))
    values[:, 0] = np.broadcast_to(np.asarray(x0, dtype=float), (n,))
    buf = np.empty((n, M + N + 1))
    buf[:, :M] = np.broadcast_to(eta, (n, M + 1))[:, :M]
    buf[:, M] = values[:, 0]
    diverged = ~np.isfinite(values[:, 0])
    eta_rows = np.broadcast_to(eta, (n, M + 1))
    with np.errstate(over="ignore", invalid="ignore"):
        for i in range(N):
            t = grid.time(i)
            hist = eta_rows if i == 0 else buf[:, i: i + M + 1]
            x = buf[:, M + i]
            inc, _ = step_increment(coeffs, model, t, dt, hist, x, dW[:, i], counts[:, i, :])
            if extra_drift is not None:
                inc = inc + _as_rows(extra_drift(i, t, hist, x), n) * dt
            nxt = x + inc
            bad = ~np.isfinite(nxt) | (np.abs(nxt) > BLOWUP_GUARD)
            if bad.any():
                diverged |= bad
                nxt = np.where(diverged, np.nan, nxt)
            buf[:, M + i + 1] = nxt
    values[:, 1:] = buf[:, M + 1:]
    return values, diverged


# ---------------------------------------------------------------------------
# path records


@dataclass(frozen=True, eq=False)
class PathRecord:
    grid: TimeGrid
    initial: DelfourMitterPoint
    values: np.ndarray
    noise: NoisePath
    jump_log: tuple = ()
    diverged: bool = False
    residual: float = 0.0        # Picard only
    iterations: int = 0          # Picard only
    converged: bool = True       # Picard only

    def buffer(self) -> np.ndarray:
        return history_buffer(self.initial.history, self.values)

    def segment(self, i: int) -> np.ndarray:
        return segment_from_buffer(self.buffer(), self.initial.history, i)


def _jump_log(coeffs, model, grid, init_hist, values, noise: NoisePath):
    if not len(noise.jump_times):
        return ()
    buf = history_buffer(init_hist, values)
    log = []
    for s, k, i in zip(noise.jump_times, noise.jump_atoms, noise.jump_steps):
        hist = segment_from_buffer(buf[None, :], init_hist, int(i))
        x = values[int(i): int(i) + 1]
        z = model.marks[k]
        g = float(_as_rows(coeffs.gamma(grid.time(int(i)), hist.reshape(1, -1), x, z), 1)[0])
        log.append((float(s), float(z), g))
    return tuple(log)


def _check_init(init: DelfourMitterPoint, grid: TimeGrid):
    if init.M != grid.M or not math.isclose(init.dt, grid.dt, rel_tol=1e-12):
        raise GridMismatch(f"initial segment (M={init.M}, dt={init.dt}) does not match grid "
                           f"(M={grid.M}, dt={grid.dt})")


def simulate_path(coeffs: Coefficients, init: DelfourMitterPoint, noise: NoisePath,
                  strict: bool = False) -> PathRecord:
    grid = noise.grid
    _check_init(init, grid)
    batch = NoiseBatch.from_paths([noise])
    values, div = euler_kernel(coeffs, noise.model, grid, init.history, init.present,
                               batch.dW, batch.counts)
    v = values[0]
    if div[0] and strict:
        raise NumericalBlowup(f"path {noise.path_index} exceeded |X| > {BLOWUP_GUARD:g}")
    log = () if div[0] else _jump_log(coeffs, noise.model, grid, init.history, v, noise)
    return PathRecord(grid, init, v, noise, log, bool(div[0]))


# ---------------------------------------------------------------------------
# ensembles


@dataclass(frozen=True)
class EnsembleStats:
    times: np.ndarray
    mean: np.ndarray
    var: np.ndarray
    sup_abs_mean: float
    sup_abs_max: float
    n_paths: int
    n_diverged: int

    def to_dict(self) -> dict:
        return {
            "n_paths": self.n_paths,
            "n_diverged": self.n_diverged,
            "mean_final": float(self.mean[-1]),
            "var_final": float(self.var[-1]),
            "sup_abs_mean": self.sup_abs_mean,
            "sup_abs_max": self.sup_abs_max,
        }


@dataclass(frozen=True, eq=False)
class Ensemble:
    """Many paths from the same grid; per-path initial data allowed."""

    coeffs: Coefficients
    grid: TimeGrid
    init_history: np.ndarray    # (M+1,) or (n, M+1)
    init_present: np.ndarray    # () or (n,)
    values: np.ndarray          # (n, N+1)
    noise: NoiseBatch
    diverged: np.ndarray
    seed: int
    path_indices: np.ndarray

    @property
    def model(self) -> LevyModel:
        return self.noise.model

    @property
    def n_paths(self) -> int:
        return self.values.shape[0]

    def buffer(self) -> np.ndarray:
        h = np.broadcast_to(self.init_history, (self.n_paths, self.grid.M + 1))
        return np.concatenate([h[:, : self.grid.M], self.values], axis=1)

    def segment(self, i: int, buf: Optional[np.ndarray] = None):
        """``(hist, x)`` at step ``i`` for all paths."""
        if i == 0:
            h = np.broadcast_to(self.init_history, (self.n_paths, self.grid.M + 1))
            return h, self.values[:, 0]
        buf = self.buffer() if buf is None else buf
        return buf[:, i: i + self.grid.M + 1], self.values[:, i]

    def initial_point(self, p: int) -> DelfourMitterPoint:
        h = np.asarray(self.init_history)
        hp = h if h.ndim == 1 else h[p]
        x = np.asarray(self.init_present)
        xp = float(x) if x.ndim == 0 else float(x[p])
        return DelfourMitterPoint(hp, xp, self.grid.dt)

    def path(self, p: int) -> PathRecord:
        init = self.initial_point(p)
        v = self.values[p].copy()
        noise = self.noise.paths[p]
        log = () if self.diverged[p] else _jump_log(self.coeffs, self.model, self.grid,
                                                     init.history, v, noise)
        return PathRecord(self.grid, init, v, noise, log, bool(self.diverged[p]))

    def stats(self) -> EnsembleStats:
        order = np.argsort(self.path_indices, kind="stable")
        ok = order[~self.diverged[order]]
        v = self.values[ok]
        if v.shape[0] == 0:
            raise AllPathsDiverged("every path diverged")
        sup = np.abs(v).max(axis=1)
        return EnsembleStats(self.grid.times, v.mean(axis=0), v.var(axis=0, ddof=1) if len(ok) > 1
                             else np.zeros(v.shape[1]), float(sup.mean()), float(sup.max()),
                             self.n_paths, int(self.diverged.sum()))


def run_ensemble(coeffs: Coefficients, grid: TimeGrid, eta, x0, noise: NoiseBatch,
                 seed: int = 0, path_indices=None, extra_drift=None) -> Ensemble:
    values, div = euler_kernel(coeffs, noise.model, grid, eta, x0, noise.dW, noise.counts,
                               extra_drift=extra_drift)
    idx = np.array([p.path_index for p in noise.paths]) if path_indices is None else np.asarray(path_indices)
    return Ensemble(coeffs, grid, np.asarray(eta, dtype=float), np.asarray(x0, dtype=float),
                    values, noise, div, int(seed), idx)


def simulate_ensemble(coeffs: Coefficients, init: DelfourMitterPoint, model: LevyModel,
                      grid: TimeGrid, seed: int, n_paths: int | None = None,
                      path_indices: Sequence[int] | None = None) -> Ensemble:
    """Independent paths ``path_index = 0..n_paths-1`` (or the given indices)."""
    _check_init(init, grid)
    if path_indices is None:
        if n_paths is None or n_paths < 1:
            raise ValueError("n_paths must be >= 1")
        path_indices = range(n_paths)
    path_indices = list(path_indices)
    noise = sample_noise_batch(model, grid, seed, path_indices)
    ens = run_ensemble(coeffs, grid, init.history, init.present, noise, seed, path_indices)
    if ens.diverged.all():
        raise NumericalBlowup(f"all {ens.n_paths} paths diverged")
    return ens


def write_paths_csv(ens: Ensemble, path, max_paths: int | None = None) -> None:
    """Long-format CSV: ``path_index, step, t, X, jumps`` (jumps in the step ending at t)."""
    n = ens.n_paths if max_paths is None else min(max_paths, ens.n_paths)
    times = ens.grid.times
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["path_index", "step", "t", "X", "jumps"])
        for p in range(n):
            cnt = ens.noise.counts[p].sum(axis=1) if ens.model.n_atoms else np.zeros(ens.grid.n_steps, int)
            for i in range(ens.grid.n_steps + 1):
                j = int(cnt[i - 1]) if i > 0 else 0
                w.writerow([int(ens.path_indices[p]), i, repr(float(times[i])), repr(float(ens.values[p, i])), j])


# ---------------------------------------------------------------------------
# Picard cross-check


def picard_solve(coeffs: Coefficients, init: DelfourMitterPoint, noise: NoisePath,
                 n_iter: int = 50, tol: float = 1e-10, strict: bool = False) -> PathRecord:
    """Fixed-point iteration of the integral equation against fixed noise.

    The drift integral uses the trapezoid rule and the stochastic integrals
    are left-point sums, so the fixed point is a different discretisation
    from :func:`simulate_path`; the two agree to first order in ``dt``.
    """
    grid = noise.grid
    _check_init(init, grid)
    model = noise.model
    N, M, dt = grid.n_steps, grid.M, grid.dt
    dw = noise.brownian_increments
    counts = noise.step_counts()
    x = init.present
    cur = np.full(N + 1, x)
    residual = math.inf
    it = 0
    for it in range(1, n_iter + 1):
        buf = history_buffer(init.history, cur)
        mu = np.empty(N + 1)
        noise_inc = np.zeros(N)
        for i in range(N + 1):
            hist = segment_from_buffer(buf[None, :], init.history, i).reshape(1, -1)
            xi = cur[i: i + 1]
            t = grid.time(i)
            mu[i] = _as_rows(coeffs.mu(t, hist, xi), 1)[0]
            if i < N:
                s = _as_rows(coeffs.sigma(t, hist, xi), 1)[0] * dw[i]
                for k, (z, lam) in enumerate(model.atoms):
                    g = _as_rows(coeffs.gamma(t, hist, xi, z), 1)[0]
                    s += g * (counts[i, k] - lam * dt)
                noise_inc[i] = s
        drift_inc = 0.5 * dt * (mu[:-1] + mu[1:])
        nxt = np.empty(N + 1)
        nxt[0] = x
        nxt[1:] = x + np.cumsum(drift_inc + noise_inc)
        with np.errstate(invalid="ignore"):
            residual = float(np.max(np.abs(nxt - cur)))
        cur = nxt
        if not np.all(np.isfinite(cur)) or np.max(np.abs(cur)) > BLOWUP_GUARD:
            raise NumericalBlowup("Picard iterate left the overflow guard")
        if residual < tol:
            break
    converged = residual < tol
    if strict and not converged:
        raise NoConvergence(f"Picard residual {residual:g} above tol {tol:g} after {n_iter} iterations")
    log = _jump_log(coeffs, model, grid, init.history, cur, noise)
    return PathRecord(grid, init, cur, noise, log, False, residual, it, converged)


# ---------------------------------------------------------------------------
# moment / Lipschitz estimates


def sliding_m2_norm_sq(buf: np.ndarray, first_history: np.ndarray, present: np.ndarray,
                       M: int, dt: float) -> np.ndarray:
    """M^2 norm squared of ``(X_{t_i}, X(t_i))`` for every step, shape ``(n, N+1)``.

    ``buf`` is the history buffer (see ``history_buffer``); the step-0 window
    is ``first_history`` verbatim.
    """
    sq = buf * buf
    n, L = sq.shape
    N = L - M - 1
    cs = np.concatenate([np.zeros((n, 1)), np.cumsum(sq, axis=1)], axis=1)
    i = np.arange(N + 1)
    window = cs[:, i + M + 1] - cs[:, i]
    trap = dt * (window - 0.5 * (sq[:, i] + sq[:, i + M]))
    fh = np.broadcast_to(np.asarray(first_history, dtype=float), (n, M + 1))
    f2 = fh * fh
    trap[:, 0] = dt * (f2.sum(axis=1) - 0.5 * (f2[:, 0] + f2[:, -1]))
    return trap + present * present


@dataclass(frozen=True)
class PairReport:
    init_distance_sq: float
    sup_distance_sq_mean: float
    sup_distance_sq_se: float
    ratio: Optional[float]
    ratio_se: Optional[float]
    degenerate: bool


@dataclass(frozen=True)
class LipschitzReport:
    pairs: tuple
    gronwall_bound: float
    max_ratio: Optional[float]
    growth_ratios: tuple   # E sup |X|_2^2 / (1 + |(eta, x)|_2^2) per distinct init
    n_paths: int

    @property
    def bounded(self) -> bool:
        return self.max_ratio is None or self.max_ratio <= self.gronwall_bound

    def to_dict(self) -> dict:
        return {
            "gronwall_bound": self.gronwall_bound,
            "max_ratio": self.max_ratio,
            "bounded": self.bounded,
            "n_paths": self.n_paths,
            "pairs": [p.__dict__ for p in self.pairs],
            "growth_ratios": list(self.growth_ratios),
        }


def gronwall_constant(coeffs: Coefficients, grid: TimeGrid) -> float:
    """``(1 + r) exp(2 K (T - tau))``: bound on the sup-ratio for K-Lipschitz drift
    with state-independent noise (the window adds at most ``r`` times the sup)."""
    return (1.0 + grid.r) * math.exp(2.0 * coeffs.lipschitz_K * (grid.T - grid.tau))


def check_initial_lipschitz(coeffs: Coefficients, model: LevyModel, grid: TimeGrid, seed: int,
                            pairs: Sequence[tuple], n_paths: int) -> LipschitzReport:
    """Common-random-number estimate of ``E sup_t |X^1 - X^2|_2^2 / |init^1 - init^2|_2^2``."""
    noise = sample_noise_batch(model, grid, seed, range(n_paths))
    reports = []
    growth = []
    seen = {}
    for a, b in pairs:
        _check_init(a, grid)
        _check_init(b, grid)
        ea = run_ensemble(coeffs, grid, a.history, a.present, noise, seed)
        eb = run_ensemble(coeffs, grid, b.history, b.present, noise, seed)
        ok = ~(ea.diverged | eb.diverged)
        d0 = m2_norm_sq(a - b)
        buf = ea.buffer()[ok] - eb.buffer()[ok]
        dn = sliding_m2_norm_sq(buf, a.history - b.history,
                                ea.values[ok] - eb.values[ok], grid.M, grid.dt)
        sup = dn.max(axis=1)
        mean = float(sup.mean())
        se = float(sup.std(ddof=1) / math.sqrt(len(sup))) if len(sup) > 1 else 0.0
        if d0 == 0.0:
            reports.append(PairReport(0.0, mean, se, None, None, True))
        else:
            reports.append(PairReport(d0, mean, se, mean / d0, se / d0, False))
        for init, ens in ((a, ea), (b, eb)):
            key = (init.history.tobytes(), init.present)
            if key in seen:
                continue
            okk = ~ens.diverged
            nn = sliding_m2_norm_sq(ens.buffer()[okk], init.history, ens.values[okk], grid.M, grid.dt)
            seen[key] = float(nn.max(axis=1).mean() / (1.0 + m2_norm_sq(init)))
            growth.append(seen[key])
    ratios = [p.ratio for p in reports if p.ratio is not None]
    return LipschitzReport(tuple(reports), gronwall_constant(coeffs, grid),
                           max(ratios) if ratios else None, tuple(growth), n_paths)
