"""Jump-perturbation derivative by path coupling, chain-rule checks, and joint
quadratic-variation estimators."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .errors import NotAnAtom, OffGridTime, WindowTooLong
from .forward import BLOWUP_GUARD, Coefficients, PathRecord, euler_kernel, step_increment
from .levy import LevyModel, NoiseBatch, NoisePath, TimeGrid, compensated_J_grid, refine_noise, \
    sample_noise_batch
from .segment import DelfourMitterPoint, history_buffer, segment_at


def _windows(init_history: np.ndarray, values: np.ndarray) -> np.ndarray:
    """All step windows of one path, shape ``(N+1, M+1)``; row 0 is the initial history."""
    m = init_history.size - 1
    buf = history_buffer(init_history, values)
    w = np.lib.stride_tricks.sliding_window_view(buf, m + 1)[: values.size].copy()
    w[0] = init_history
    return w


@dataclass(frozen=True, eq=False)
class JumpPerturbation:
    s: float
    z: float
    step: int
    base: PathRecord
    perturbed: PathRecord
    derivative: np.ndarray   # D_{s,z} X(t_i), zero before ``step``

    def derivative_segment(self, i: int) -> np.ndarray:
        zeros = np.zeros(self.base.initial.M + 1)
        return _windows(zeros, self.derivative)[i]


def malliavin_forward(coeffs: Coefficients, base: PathRecord, s: float, z: float) -> JumpPerturbation:
    """Couple ``base`` with the path that takes one extra jump ``gamma(s, ., z)`` at ``s``.

    The difference ``D`` is propagated directly,
    ``D_{i+1} = D_i + inc(X + D) - inc(X)`` with identical noise, so that
    ``D`` is exactly zero before ``s`` and exactly ``gamma`` at ``s``; the
    perturbed trajectory is recorded as ``X + D``.
    """
    grid = base.grid
    model = base.noise.model
    if model.atom_index(z) < 0:
        raise NotAnAtom(f"mark {z} is not an atom of the Lévy measure")
    j = grid.index_of(s)
    N, dt = grid.n_steps, grid.dt
    eta = base.initial.history
    wx = _windows(eta, base.values)
    M = grid.M
    dbuf = np.zeros(M + N + 1)
    D = dbuf[M:]
    x_s = base.values[j: j + 1]
    gam = np.asarray(coeffs.gamma(grid.time(j), wx[j][None, :], x_s, z), dtype=float)
    D[j] = float(np.broadcast_to(gam, (1,))[0])
    counts = base.noise.step_counts()
    dw = base.noise.brownian_increments
    zeros = np.zeros(M + 1)
    diverged = base.diverged
    with np.errstate(over="ignore", invalid="ignore"):
        for i in range(j, N):
            wd = dbuf[i: i + M + 1] if i > 0 else zeros
            hx = wx[i][None, :]
            hp = (wx[i] + wd)[None, :]
            xi = base.values[i: i + 1]
            t = grid.time(i)
            c = counts[i][None, :]
            incx, _ = step_increment(coeffs, model, t, dt, hx, xi, dw[i: i + 1], c)
            incp, _ = step_increment(coeffs, model, t, dt, hp, xi + D[i], dw[i: i + 1], c)
            D[i + 1] = D[i] + (incp[0] - incx[0])
            if not math.isfinite(D[i + 1]) or abs(base.values[i + 1] + D[i + 1]) > BLOWUP_GUARD:
                diverged = True
                D[i + 1:] = np.nan
                break
    D = D.copy()
    pert_vals = base.values + D
    pert = PathRecord(grid, base.initial, pert_vals, base.noise, base.jump_log + ((float(s), float(z), D[j]),),
                      diverged)
    return JumpPerturbation(float(s), float(z), j, base, pert, D)


@dataclass(frozen=True)
class ChainRule:
    direct: float         # phi(perturbed state) - phi(base state)
    via_derivative: float  # phi(X_t + D X_t, X(t) + D X(t)) - phi(X_t, X(t))
    residual: float


def chain_rule_check(phi, pert: JumpPerturbation, t: float) -> ChainRule:
    grid = pert.base.grid
    i = grid.index_of(t)
    if i < pert.step:
        raise OffGridTime(f"t={t} precedes the perturbation time {pert.s}")
    b = segment_at(pert.base, t)
    p = segment_at(pert.perturbed, t)
    dseg = pert.derivative_segment(i)
    base_val = phi(b.history[None, :], np.array([b.present]))[0]
    direct = phi(p.history[None, :], np.array([p.present]))[0] - base_val
    shifted = phi((b.history + dseg)[None, :], np.array([b.present + pert.derivative[i]]))[0]
    via = shifted - base_val
    return ChainRule(float(direct), float(via), float(abs(direct - via)))


# ---------------------------------------------------------------------------
# quadratic variation


@dataclass(frozen=True)
class QvEstimate:
    epsilon: float
    c_eps: float
    jump_sum: float
    window: tuple


def _window_steps(grid: TimeGrid, epsilon: float, window_end: float | None) -> tuple[int, int]:
    k = epsilon / grid.dt
    kr = int(round(k))
    if kr < 1 or abs(k - kr) > 1e-9 * max(1.0, k):
        raise OffGridTime(f"epsilon={epsilon} is not a positive multiple of dt={grid.dt}")
    end = grid.T - epsilon if window_end is None else window_end
    n = grid.index_of(end)
    if n + kr > grid.n_steps:
        raise WindowTooLong(f"window end {end} + epsilon {epsilon} exceeds T={grid.T}")
    return kr, n


def joint_qv_estimator(u_path, j_path, grid: TimeGrid, epsilon: float, window_end: float | None = None) -> float:
    """``(1/eps) sum_i dt (u(t_i+eps) - u(t_i)) (J(t_i+eps) - J(t_i))`` over ``t_i in [tau, T')``."""
    k, n = _window_steps(grid, epsilon, window_end)
    u = np.asarray(u_path, dtype=float)
    j = np.asarray(j_path, dtype=float)
    du = u[..., k: n + k] - u[..., :n]
    dj = j[..., k: n + k] - j[..., :n]
    return (du * dj).sum(axis=-1) * grid.dt / (k * grid.dt)


def u_along(u: Callable, path: PathRecord) -> np.ndarray:
    """``u(t_i, X_{t_i}, X(t_i))`` on every grid time."""
    w = _windows(path.initial.history, path.values)
    return np.asarray([float(np.asarray(u(path.grid.time(i), w[i][None, :], path.values[i: i + 1])).reshape(-1)[0])
                       for i in range(path.values.size)])


def jump_sum_qv(u: Callable, path: PathRecord, coeffs: Coefficients, window_end: float | None = None) -> float:
    """``sum_j z_j [u(s_j, ., X + gamma) - u(s_j, ., X)]`` over jumps in ``(tau, T']``, pre-jump state."""
    g = path.grid
    end = g.T if window_end is None else window_end
    w = _windows(path.initial.history, path.values)
    model = path.noise.model
    total = 0.0
    for s, k, i in zip(path.noise.jump_times, path.noise.jump_atoms, path.noise.jump_steps):
        if s > end + 1e-12:
            continue
        i = int(i)
        t = g.time(i)
        h = w[i][None, :]
        x = path.values[i: i + 1]
        z = model.marks[k]
        gam = np.asarray(coeffs.gamma(t, h, x, z), dtype=float).reshape(-1)[0]
        du = float(np.asarray(u(t, h, x + gam)).reshape(-1)[0] - np.asarray(u(t, h, x)).reshape(-1)[0])
        total += z * du
    return float(total)


def directional_gradient_qv(u: Callable, path: PathRecord, coeffs: Coefficients,
                            window_end: float | None = None) -> float:
    """``sum_i dt du/dx(t_i, .) sigma(t_i, .)`` by central differences, step ``1e-5 (1+|x|)``."""
    g = path.grid
    end = g.T if window_end is None else window_end
    n = g.index_of(end)
    w = _windows(path.initial.history, path.values)
    total = 0.0
    for i in range(n):
        t = g.time(i)
        h = w[i][None, :]
        x = path.values[i: i + 1]
        step = 1e-5 * (1.0 + abs(x[0]))
        up = np.asarray(u(t, h, x + step)).reshape(-1)[0]
        dn = np.asarray(u(t, h, x - step)).reshape(-1)[0]
        sig = np.asarray(coeffs.sigma(t, h, x), dtype=float).reshape(-1)[0]
        total += g.dt * (up - dn) / (2 * step) * sig
    return float(total)


def qv_compare(u: Callable, path: PathRecord, coeffs: Coefficients, epsilon: float | None = None,
               window_end: float | None = None) -> QvEstimate:
    g = path.grid
    eps = g.dt if epsilon is None else epsilon
    k, n = _window_steps(g, eps, window_end)
    end = g.time(n)
    batch = NoiseBatch.from_paths([path.noise])
    j = compensated_J_grid(batch)[0]
    c = float(joint_qv_estimator(u_along(u, path), j, g, eps, end))
    js = jump_sum_qv(u, path, coeffs, end)
    return QvEstimate(eps, c, js, (g.tau, end))


def brownian_path(noise: NoisePath) -> np.ndarray:
    return np.concatenate([[0.0], np.cumsum(noise.brownian_increments)])


# ---------------------------------------------------------------------------
# convergence study


@dataclass(frozen=True)
class QvLevel:
    dt: float
    epsilon: float
    mean_abs_diff: float
    std_error: float


@dataclass(frozen=True)
class QvStudy:
    levels: tuple
    ratios: tuple
    window_end: float
    n_paths: int

    def to_rows(self) -> list:
        return [[l.dt, l.epsilon, l.mean_abs_diff, l.std_error] for l in self.levels]


def qv_study(coeffs: Coefficients, model: LevyModel, grid: TimeGrid, init: DelfourMitterPoint,
             u: Callable, n_paths: int, seed: int, n_levels: int = 3,
             window_end: float | None = None) -> QvStudy:
    """Mean ``|C^dt - jump sum|`` as ``dt`` halves; finer noise is Brownian-bridge refined
    from the coarse draw with the same jumps, so levels are coupled path by path."""
    end = grid.T - grid.dt if window_end is None else window_end
    coarse = sample_noise_batch(model, grid, seed, range(n_paths)).paths
    levels = []
    noises = list(coarse)
    g = grid
    ini = init
    for lev in range(n_levels):
        if lev > 0:
            noises = [refine_noise(p) for p in noises]
            g = g.refined(2)
            ini = DelfourMitterPoint(np.interp(g.theta, grid.theta, init.history), init.present, g.dt)
        batch = NoiseBatch.from_paths(noises)
        vals, div = euler_kernel(coeffs, model, g, ini.history, ini.present, batch.dW, batch.counts)
        diffs = []
        for p in range(n_paths):
            if div[p]:
                continue
            rec = PathRecord(g, ini, vals[p], noises[p])
            est = qv_compare(u, rec, coeffs, g.dt, end)
            diffs.append(abs(est.c_eps - est.jump_sum))
        d = np.array(diffs)
        levels.append(QvLevel(g.dt, g.dt, float(d.mean()), float(d.std(ddof=1) / math.sqrt(d.size))))
    ratios = tuple(levels[i].mean_abs_diff / levels[i + 1].mean_abs_diff for i in range(n_levels - 1))
    return QvStudy(tuple(levels), ratios, end, n_paths)
