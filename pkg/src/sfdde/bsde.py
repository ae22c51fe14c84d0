"""Least-squares Monte-Carlo solver for the backward equation coupled to the
forward segment process, and the value-function tools built on it.

Sign convention.  ``convention="mild"`` (default) steps
``Y_i = E_i[Y_{i+1}] + dt * psi``, so that ``u = P phi + int P psi``.
``convention="bsde"`` steps ``Y_i = E_i[Y_{i+1}] - dt * psi``, which is the
form the control Hamiltonian is written for.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from .errors import BasisTooRich, BudgetTooSmall, NotAnAtom, SingularRegression
from .forward import Coefficients, Ensemble, euler_kernel, simulate_ensemble
from .levy import LevyModel, TimeGrid, derive_seed, sample_noise_batch, validate_levy_model
from .segment import DelfourMitterPoint, legendre1_coefficient, m2_norm, segment_average

CONVENTIONS = {"mild": 1.0, "bsde": -1.0}
ALL_FEATURES = ("x", "x2", "x3", "seg_avg", "tap", "legendre1")


@dataclass(frozen=True)
class BsdeProblem:
    psi: Callable     # (t, hist, x, y, z, u_tilde) -> (n,)
    phi: Callable     # (hist, x) -> (n,)
    K: float = 0.0
    m: float = 0.0
    name: str = "problem"


@dataclass(frozen=True)
class RegressionBasis:
    """Features over ``(segment, x)``; the intercept is always present and unpenalised."""

    features: tuple = ALL_FEATURES
    ridge_lambda: Optional[float] = None   # None -> 1e-8 * n_paths

    def __post_init__(self):
        bad = [f for f in self.features if f not in ALL_FEATURES]
        if bad:
            raise ValueError(f"unknown features {bad}; choose from {ALL_FEATURES}")
        if self.ridge_lambda is not None and self.ridge_lambda < 0:
            raise ValueError("ridge_lambda must be >= 0")

    @property
    def size(self) -> int:
        return 1 + len(self.features)

    def check(self, n_paths: int) -> None:
        if self.size > n_paths / 20:
            raise BasisTooRich(f"{self.size} features need at least {20 * self.size} paths, got {n_paths}")

    def ridge(self, n_paths: int) -> float:
        return 1e-8 * n_paths if self.ridge_lambda is None else self.ridge_lambda

    def design(self, hist: np.ndarray, x: np.ndarray, dt: float) -> np.ndarray:
        cols = []
        for f in self.features:
            if f == "x":
                cols.append(x)
            elif f == "x2":
                cols.append(x * x)
            elif f == "x3":
                cols.append(x * x * x)
            elif f == "seg_avg":
                cols.append(segment_average(hist, dt))
            elif f == "tap":
                cols.append(hist[:, 0])
            else:
                cols.append(legendre1_coefficient(hist, dt))
        n = x.shape[0]
        return np.stack([np.broadcast_to(c, (n,)) for c in cols], axis=1) if cols else np.zeros((n, 0))


@dataclass(frozen=True, eq=False)
class SliceFit:
    """Standardised ridge fit of several targets on one time slice."""

    keep: np.ndarray
    loc: np.ndarray
    scale: np.ndarray
    intercept: np.ndarray   # (q,)
    coef: np.ndarray        # (p_kept, q)

    @property
    def degenerate(self) -> bool:
        return not self.keep.any()

    def predict(self, raw: np.ndarray) -> np.ndarray:
        if self.degenerate:
            return np.broadcast_to(self.intercept, (raw.shape[0], self.intercept.size)).copy()
        a = (raw[:, self.keep] - self.loc) / self.scale
        return self.intercept + a @ self.coef

    def depends_on(self, column: int) -> bool:
        return bool(self.keep[column]) if column >= 0 else False


def fit_slice(raw: np.ndarray, targets: np.ndarray, ridge: float) -> SliceFit:
    n, p = raw.shape
    loc = raw.mean(axis=0) if p else np.zeros(0)
    scale = raw.std(axis=0) if p else np.zeros(0)
    keep = scale > 1e-12 * (1.0 + np.abs(loc))
    tbar = targets.mean(axis=0)
    if not keep.any():
        return SliceFit(keep, loc[keep], scale[keep], tbar, np.zeros((0, targets.shape[1])))
    a = (raw[:, keep] - loc[keep]) / scale[keep]
    g = a.T @ a
    b = a.T @ (targets - tbar)
    lam = ridge
    for attempt in range(2):
        try:
            L = np.linalg.cholesky(g + lam * np.eye(g.shape[0]))
            coef = np.linalg.solve(L.T, np.linalg.solve(L, b))
            if np.all(np.isfinite(coef)):
                return SliceFit(keep, loc[keep], scale[keep], tbar, coef)
        except np.linalg.LinAlgError:
            pass
        lam = max(lam, 1e-8 * n) * 10.0
    raise SingularRegression("design matrix is singular even after ridge fallback")


@dataclass(frozen=True, eq=False)
class BsdeSolution:
    problem: BsdeProblem
    basis: RegressionBasis
    ensemble: Ensemble
    convention: str
    fits: tuple        # SliceFit per step i = 0..N-1, targets (cont, Z, U_1..U_K)
    y: np.ndarray      # (n, N+1)
    z: np.ndarray      # (n, N)
    u: np.ndarray      # (n, N, K)
    u_tilde: np.ndarray  # (n, N)
    xi: np.ndarray     # pathwise phi + sum dt * sign * psi
    implicit_iters: int = 0

    @property
    def grid(self) -> TimeGrid:
        return self.ensemble.grid

    @property
    def sign(self) -> float:
        return CONVENTIONS[self.convention]

    @property
    def u0(self) -> float:
        return float(self.y[:, 0].mean())

    @property
    def std_error(self) -> float:
        n = self.xi.size
        return float(self.xi.std(ddof=1) / math.sqrt(n)) if n > 1 else 0.0

    @property
    def k_norm_sq(self) -> float:
        dt = self.grid.dt
        rates = self.ensemble.model.rates
        sup_y = (self.y**2).max(axis=1).mean()
        zz = (dt * self.z**2).sum(axis=1).mean()
        uu = (dt * (self.u**2 * rates).sum(axis=2)).sum(axis=1).mean() if rates.size else 0.0
        return float(sup_y + zz + uu)

    @property
    def k_norm(self) -> float:
        return math.sqrt(self.k_norm_sq)

    # -- surfaces -------------------------------------------------------

    def _targets_at(self, i: int, hist, x):
        raw = self.basis.design(hist, x, self.grid.dt)
        out = self.fits[i].predict(raw)
        K = self.ensemble.model.n_atoms
        cont, z = out[:, 0], out[:, 1]
        uk = out[:, 2: 2 + K]
        ut = uk @ (self.ensemble.model.delta_values * self.ensemble.model.rates) if K else np.zeros_like(cont)
        return cont, z, uk, ut

    def value(self, i: int, hist, x) -> np.ndarray:
        """The fitted ``u(t_i, hist, x)``; ``phi`` at the terminal step."""
        hist = np.atleast_2d(np.asarray(hist, dtype=float))
        x = np.atleast_1d(np.asarray(x, dtype=float))
        if i >= self.grid.n_steps:
            return np.asarray(self.problem.phi(hist, x), dtype=float)
        cont, z, _, ut = self._targets_at(i, hist, x)
        t = self.grid.time(i)
        y = cont + self.sign * self.grid.dt * self.problem.psi(t, hist, x, cont, z, ut)
        for _ in range(self.implicit_iters):
            y = cont + self.sign * self.grid.dt * self.problem.psi(t, hist, x, y, z, ut)
        return y

    def surface_step(self, i: int) -> int:
        """First step ``>= i`` whose fit depends on the present value.

        At a slice where every path shares one state (the start) the fit is
        intercept-only; derivatives and jump shifts are then read from the
        next informative slice.
        """
        col = self.basis.features.index("x") if "x" in self.basis.features else -1
        for j in range(i, self.grid.n_steps):
            if self.fits[j].depends_on(col):
                return j
        return self.grid.n_steps

    def d_dx(self, i: int, hist, x) -> np.ndarray:
        j = self.surface_step(i)
        x = np.atleast_1d(np.asarray(x, dtype=float))
        h = 1e-5 * (1.0 + np.abs(x))
        return (self.value(j, hist, x + h) - self.value(j, hist, x - h)) / (2 * h)

    def summary(self) -> dict:
        times = self.grid.times
        return {
            "t": times.tolist(),
            "y_mean": self.y.mean(axis=0).tolist(),
            "z_mean": self.z.mean(axis=0).tolist(),
            "u_tilde_mean": self.u_tilde.mean(axis=0).tolist(),
        }


def _phi_terminal(problem: BsdeProblem, ens: Ensemble, buf) -> np.ndarray:
    hist, x = ens.segment(ens.grid.n_steps, buf)
    return np.asarray(problem.phi(hist, x), dtype=float).copy()


def solve_backward(problem: BsdeProblem, ens: Ensemble, basis: RegressionBasis | None = None,
                   convention: str = "mild", implicit_iters: int = 0, tol: float = 1e-10) -> BsdeSolution:
    """Backward induction with one multi-target regression per slice."""
    if convention not in CONVENTIONS:
        raise ValueError(f"convention must be one of {sorted(CONVENTIONS)}")
    if not 0 <= implicit_iters <= 5:
        raise ValueError("implicit_iters must be in 0..5")
    basis = basis or RegressionBasis()
    keep = ~ens.diverged
    if not keep.all():
        ens = Ensemble(ens.coeffs, ens.grid,
                       ens.init_history if np.ndim(ens.init_history) == 1 else ens.init_history[keep],
                       ens.init_present if np.ndim(ens.init_present) == 0 else ens.init_present[keep],
                       ens.values[keep], ens.noise.subset(np.flatnonzero(keep)),
                       ens.diverged[keep], ens.seed, ens.path_indices[keep])
    n = ens.n_paths
    basis.check(n)
    grid, model = ens.grid, ens.model
    N, dt = grid.n_steps, grid.dt
    K = model.n_atoms
    sign = CONVENTIONS[convention]
    ridge = basis.ridge(n)
    lam = model.rates
    dweights = model.delta_values * lam
    buf = ens.buffer()
    y = np.empty((n, N + 1))
    zz = np.empty((n, N))
    uu = np.empty((n, N, K))
    ut = np.empty((n, N))
    y[:, N] = _phi_terminal(problem, ens, buf)
    drive = np.zeros(n)
    fits = [None] * N
    for i in range(N - 1, -1, -1):
        hist, x = ens.segment(i, buf)
        raw = basis.design(hist, x, dt)
        nxt = y[:, i + 1]
        first = fit_slice(raw, nxt[:, None], ridge)
        cont = first.predict(raw)[:, 0]
        resid = nxt - cont
        cols = [resid * ens.noise.dW[:, i] / dt]
        for k in range(K):
            dn = ens.noise.counts[:, i, k] - lam[k] * dt
            cols.append(resid * dn / (lam[k] * dt))
        second = fit_slice(raw, np.stack(cols, axis=1), ridge)
        fz = second.predict(raw)
        z = fz[:, 0]
        uk = fz[:, 1:]
        u_t = uk @ dweights if K else np.zeros(n)
        fits[i] = SliceFit(first.keep, first.loc, first.scale,
                           np.concatenate([first.intercept, second.intercept]),
                           np.concatenate([first.coef, second.coef], axis=1))
        t = grid.time(i)
        ps = np.asarray(problem.psi(t, hist, x, cont, z, u_t), dtype=float)
        yi = cont + sign * dt * ps
        for _ in range(implicit_iters):
            ps = np.asarray(problem.psi(t, hist, x, yi, z, u_t), dtype=float)
            new = cont + sign * dt * ps
            done = np.max(np.abs(new - yi)) < tol
            yi = new
            if done:
                break
        y[:, i] = yi
        zz[:, i] = z
        uu[:, i] = uk
        ut[:, i] = u_t
        drive += sign * dt * ps
    xi = y[:, N] + drive
    return BsdeSolution(problem, basis, ens, convention, tuple(fits), y, zz, uu, ut, xi, implicit_iters)


# ---------------------------------------------------------------------------
# value function


@dataclass(frozen=True, eq=False)
class UEstimate:
    value: float
    std_error: float
    split_std_error: float
    solution: BsdeSolution

    def to_dict(self) -> dict:
        s = self.solution
        return {"u0": self.value, "std_error": self.std_error, "split_std_error": self.split_std_error,
                "k_norm": s.k_norm, "n_paths": s.ensemble.n_paths, "convention": s.convention}


def u_representation(problem: BsdeProblem, coeffs: Coefficients, model: LevyModel, grid: TimeGrid,
                     init: DelfourMitterPoint, n_paths: int, seed: int,
                     basis: RegressionBasis | None = None, convention: str = "mild",
                     implicit_iters: int = 0, split: bool = True) -> UEstimate:
    """``u(tau, eta, x)`` from a fresh ensemble.

    ``std_error`` is the standard error of the pathwise representation
    ``phi(X_T) +- sum dt psi``; ``split_std_error`` compares two independent
    half-sample solves.
    """
    validate_levy_model(model)
    ens = simulate_ensemble(coeffs, init, model, grid, seed, n_paths)
    sol = solve_backward(problem, ens, basis, convention, implicit_iters)
    split_se = math.nan
    if split and n_paths >= 2 * 20 * (basis or RegressionBasis()).size:
        half = n_paths // 2
        rows = np.arange(n_paths)
        parts = []
        for sel in (rows[:half], rows[half: 2 * half]):
            sub = Ensemble(ens.coeffs, grid, ens.init_history, ens.init_present, ens.values[sel],
                           ens.noise.subset(sel), ens.diverged[sel], ens.seed, ens.path_indices[sel])
            if sub.diverged.all():
                break
            parts.append(solve_backward(problem, sub, basis, convention, implicit_iters).u0)
        if len(parts) == 2:
            split_se = abs(parts[0] - parts[1]) / 2.0
    return UEstimate(sol.u0, sol.std_error, split_se, sol)


def u_jump_shift(sol: BsdeSolution, i: int, hist, x, z: float) -> np.ndarray:
    """``u(t, hist, x + gamma(t, hist, x, z)) - u(t, hist, x)`` on the fitted surface."""
    model = sol.ensemble.model
    if model.atom_index(z) < 0:
        raise NotAnAtom(f"mark {z} is not an atom of the Lévy measure")
    hist = np.atleast_2d(np.asarray(hist, dtype=float))
    x = np.atleast_1d(np.asarray(x, dtype=float))
    j = sol.surface_step(i)
    g = np.broadcast_to(np.asarray(sol.ensemble.coeffs.gamma(sol.grid.time(i), hist, x, z), dtype=float), x.shape)
    return sol.value(j, hist, x + g) - sol.value(j, hist, x)


def jump_operator(sol: BsdeSolution, i: int, hist, x) -> np.ndarray:
    """``sum_k rate_k delta(z_k) (u(., x + gamma_k) - u(., x))``."""
    model = sol.ensemble.model
    x = np.atleast_1d(np.asarray(x, dtype=float))
    out = np.zeros_like(x)
    for (z, lam), d in zip(model.atoms, model.delta_values):
        out = out + lam * d * u_jump_shift(sol, i, hist, x, z)
    return out


# ---------------------------------------------------------------------------
# mild residual


@dataclass(frozen=True)
class MildResidual:
    lhs: float
    rhs: float
    residual: float
    std_error: float
    n_outer: int
    n_inner: int

    def to_dict(self) -> dict:
        return dict(self.__dict__)


def _rhs_paths(sol: BsdeSolution, start: int, eta, x0, noise) -> tuple[np.ndarray, np.ndarray]:
    """Pathwise ``phi(X_T) + sign * sum dt psi(u, du/dx * sigma, J u)`` from step ``start``."""
    ens = sol.ensemble
    grid = ens.grid
    sub = grid.subgrid(start) if start > 0 else grid
    vals, div = euler_kernel(ens.coeffs, ens.model, sub, eta, x0, noise.dW, noise.counts)
    n = vals.shape[0]
    M, dt = grid.M, grid.dt
    eta_rows = np.broadcast_to(np.asarray(eta, dtype=float), (n, M + 1))
    buf = np.concatenate([eta_rows[:, :M], vals], axis=1)
    acc = np.zeros(n)
    with np.errstate(invalid="ignore", over="ignore"):
        for k in range(sub.n_steps):
            i = start + k
            hist = eta_rows if k == 0 else buf[:, k: k + M + 1]
            x = vals[:, k]
            t = grid.time(i)
            u_val = sol.value(i, hist, x)
            sig = np.broadcast_to(np.asarray(ens.coeffs.sigma(t, hist, x), dtype=float), x.shape)
            zeta = sol.d_dx(i, hist, x) * sig
            ju = jump_operator(sol, i, hist, x)
            acc += sol.sign * dt * np.asarray(sol.problem.psi(t, hist, x, u_val, zeta, ju), dtype=float)
        hist_T = buf[:, sub.n_steps: sub.n_steps + M + 1] if sub.n_steps > 0 else eta_rows
        total = np.asarray(sol.problem.phi(hist_T, vals[:, -1]), dtype=float) + acc
    return total, div


def mild_residual(sol: BsdeSolution, n_paths: int, seed: int, t: float | None = None,
                  n_outer: int = 1, tol: float | None = None) -> MildResidual:
    """``|u(t, .) - (P_{t,T} phi + int_t^T P_{t,s} psi(...) ds)|`` on fresh paths.

    ``t = tau`` compares ``u0`` with the right-hand side at the initial point.
    For ``t > tau`` the comparison is averaged over ``n_outer`` states
    reached at ``t``, with ``n_paths`` inner paths per state.
    """
    ens = sol.ensemble
    grid = ens.grid
    model = ens.model
    start = 0 if t is None else grid.index_of(t)
    if start == 0:
        init_h = np.asarray(ens.init_history, dtype=float)
        init_x = np.asarray(ens.init_present, dtype=float)
        if init_h.ndim != 1 or init_x.ndim != 0:
            raise ValueError("mild residual at tau needs a common initial point")
        noise = sample_noise_batch(model, grid, derive_seed(seed, 0, 7), range(n_paths))
        vals, div = _rhs_paths(sol, 0, init_h, float(init_x), noise)
        v = vals[~div]
        rhs = float(v.mean())
        rhs_se = float(v.std(ddof=1) / math.sqrt(v.size))
        lhs, lhs_se = sol.u0, sol.std_error
        se = math.hypot(rhs_se, lhs_se)
        res = abs(lhs - rhs)
        n_outer = 1
    else:
        init = ens.initial_point(0)
        outer = simulate_ensemble(ens.coeffs, init, model, grid, derive_seed(seed, 1, 7), n_outer)
        obuf = outer.buffer()
        hist, x = outer.segment(start, obuf)
        lhs_o, rhs_o = [], []
        for o in range(n_outer):
            if outer.diverged[o]:
                continue
            lhs_o.append(float(sol.value(start, hist[o][None, :], x[o: o + 1])[0]))
            noise = sample_noise_batch(model, grid.subgrid(start), derive_seed(seed, 2, o), range(n_paths))
            vals, div = _rhs_paths(sol, start, np.array(hist[o]), float(x[o]), noise)
            rhs_o.append(float(vals[~div].mean()))
        d = np.array(lhs_o) - np.array(rhs_o)
        lhs, rhs = float(np.mean(lhs_o)), float(np.mean(rhs_o))
        res = abs(float(d.mean()))
        se = float(d.std(ddof=1) / math.sqrt(d.size)) if d.size > 1 else math.inf
    if tol is not None and se > tol:
        raise BudgetTooSmall(f"residual standard error {se:.3g} exceeds tolerance {tol:.3g}")
    return MildResidual(lhs, rhs, res, se, n_outer, n_paths)


# ---------------------------------------------------------------------------
# Lipschitz dependence on the initial point


@dataclass(frozen=True)
class ULipschitzFit:
    constant: float
    ratios: tuple
    values: tuple     # (u(p), u(q)) per pair
    n_paths: int

    def to_dict(self) -> dict:
        return {"constant": self.constant, "ratios": list(self.ratios), "n_paths": self.n_paths,
                "values": [list(v) for v in self.values]}


def u_lipschitz_fit(problem: BsdeProblem, coeffs: Coefficients, model: LevyModel, grid: TimeGrid,
                    pairs, n_paths: int, seed: int, basis: RegressionBasis | None = None,
                    convention: str = "mild") -> ULipschitzFit:
    """Smallest ``C`` with ``|u(p) - u(q)| <= C |p - q|_2 (1 + |p|_2 + |q|_2)^m`` over the pairs.

    Every initial point is solved on the same seed, so the differences are
    common-random-number paired.  Identical points are skipped.
    """
    cache = {}

    def u_at(p):
        key = (p.history.tobytes(), p.present)
        if key not in cache:
            cache[key] = u_representation(problem, coeffs, model, grid, p, n_paths, seed, basis,
                                          convention, split=False).value
        return cache[key]

    ratios, values = [], []
    for p, q in pairs:
        d = m2_norm(p - q)
        up, uq = u_at(p), u_at(q)
        values.append((up, uq))
        if d == 0.0:
            continue
        weight = (1.0 + m2_norm(p) + m2_norm(q)) ** problem.m
        ratios.append(abs(up - uq) / (d * weight))
    return ULipschitzFit(max(ratios) if ratios else 0.0, tuple(ratios), tuple(values), n_paths)
