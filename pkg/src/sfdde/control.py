"""Finite-action optimal control of the delay equation: Hamiltonian enumeration,
feedback synthesis from a solved value function, closed-loop costs and the
verification battery ``J >= u`` with equality at the feedback.

Gradient reading.  With ``gradient_reading="sigma"`` (default) the
Hamiltonian's ``z`` is the directional gradient ``du/dx * sigma`` and the
bracket ``h + z sigma^{-1} F`` reduces to ``h + du/dx F``.  The
``"literal"`` reading feeds ``z = du/dx * sigma^{-1} F`` (formed per action)
into the same bracket, which counts ``sigma^{-1} F`` twice.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np

from .bsde import BsdeProblem, BsdeSolution, RegressionBasis, UEstimate, u_representation
from .catalog import Generator
from .errors import CatalogMiss, ConfigInvalid, SigmaSingular
from .forward import Coefficients, euler_kernel
from .levy import LevyModel, TimeGrid, derive_seed, sample_noise_batch
from .segment import DelfourMitterPoint

TIE_TOL = 1e-12


@dataclass(frozen=True)
class ControlProblem:
    F: Callable          # (t, x, a) -> controlled drift, broadcasting
    h: Callable          # (t, x, a) -> running cost
    g: Callable          # x -> terminal cost
    action_grid: np.ndarray
    C_sigma: float
    coeffs: Coefficients   # uncontrolled mu, sigma(t, x), gamma(t, x, z)
    C_F: float = math.inf
    name: str = "control"
    gradient_reading: str = "sigma"

    def __post_init__(self):
        a = np.array(self.action_grid, dtype=float).reshape(-1)
        if a.size == 0:
            raise ValueError("action grid must be nonempty")
        a.setflags(write=False)
        object.__setattr__(self, "action_grid", a)
        if not self.C_sigma > 0:
            raise ValueError("C_sigma must be positive")
        if self.gradient_reading not in ("sigma", "literal"):
            raise ValueError("gradient_reading must be 'sigma' or 'literal'")

    def sigma(self, t, x) -> np.ndarray:
        x = np.atleast_1d(np.asarray(x, dtype=float))
        return np.broadcast_to(np.asarray(self.coeffs.sigma(t, x[:, None], x), dtype=float), x.shape)


def _bracket(problem: ControlProblem, t, x, z):
    x = np.atleast_1d(np.asarray(x, dtype=float))
    z = np.broadcast_to(np.asarray(z, dtype=float), x.shape)
    sig = problem.sigma(t, x)
    small = np.abs(sig) < 1.0 / problem.C_sigma
    if small.any():
        k = int(np.flatnonzero(small)[0])
        raise SigmaSingular(f"|sigma| = {abs(sig[k]):.3g} below 1/C_sigma at t={t}, x={x[k]:.6g}",
                            state=(float(t), float(x[k])))
    a = problem.action_grid[None, :]
    xx = x[:, None]
    out = problem.h(t, xx, a) + (z / sig)[:, None] * problem.F(t, xx, a)
    return np.broadcast_to(np.asarray(out, dtype=float), (x.size, a.size))


@dataclass(frozen=True)
class HamiltonianValue:
    value: float
    argmin_set: tuple
    selected: float


def hamiltonian(problem: ControlProblem, t: float, x: float, z: float) -> HamiltonianValue:
    """``-min_a {h + z sigma^{-1} F}`` over the grid, with the near-argmin set."""
    b = _bracket(problem, t, x, z)[0]
    m = b.min()
    idx = np.flatnonzero(b <= m + TIE_TOL)
    acts = tuple(float(problem.action_grid[k]) for k in idx)
    return HamiltonianValue(float(-m), acts, acts[0])


def hamiltonian_batch(problem: ControlProblem, t, x, z):
    """Vectorised ``(value, selected action, selected index)``; ties go to the smallest index."""
    b = _bracket(problem, t, x, z)
    m = b.min(axis=1)
    first = np.argmax(b <= (m + TIE_TOL)[:, None], axis=1)
    return -m, problem.action_grid[first], first


def _literal_bracket(problem: ControlProblem, t, x, p):
    """``h + z sigma^{-1} F`` with ``z = p sigma^{-1} F`` formed per action."""
    x = np.atleast_1d(np.asarray(x, dtype=float))
    sig = problem.sigma(t, x)
    _bracket(problem, t, x, np.zeros_like(x))  # sigma audit
    a = problem.action_grid[None, :]
    xx = x[:, None]
    f = np.broadcast_to(np.asarray(problem.F(t, xx, a), dtype=float), (x.size, a.size))
    out = problem.h(t, xx, a) + np.asarray(p, dtype=float).reshape(-1, 1) * (f / sig[:, None]) ** 2
    return np.broadcast_to(np.asarray(out, dtype=float), (x.size, a.size))


def select_from_gradient(problem: ControlProblem, t, x, p):
    """``(value, action)`` for present-value gradient ``p = du/dx`` under the problem's reading."""
    if problem.gradient_reading == "sigma":
        v, act, _ = hamiltonian_batch(problem, t, x, p * problem.sigma(t, x))
        return v, act
    b = _literal_bracket(problem, t, x, p)
    m = b.min(axis=1)
    first = np.argmax(b <= (m + TIE_TOL)[:, None], axis=1)
    return -m, problem.action_grid[first]


def hjb_generator(problem: ControlProblem) -> Generator:
    """``psi(t, ., x, y, z, u) = -min_a {h + z sigma^{-1} F}`` with ``z`` the regressed ``Z``,
    i.e. ``du/dx = Z / sigma``; the reading decides how the gradient enters the bracket."""

    def psi(t, hist, x, y, z, ut):
        if problem.gradient_reading == "sigma":
            return hamiltonian_batch(problem, t, x, z)[0]
        return select_from_gradient(problem, t, x, z / problem.sigma(t, x))[0]

    return Generator(psi, f"hjb:{problem.name}")


@dataclass(frozen=True, eq=False)
class HjbSolution:
    problem: ControlProblem
    estimate: UEstimate

    @property
    def solution(self) -> BsdeSolution:
        return self.estimate.solution

    @property
    def u0(self) -> float:
        return self.estimate.value

    @property
    def std_error(self) -> float:
        return self.estimate.std_error


def solve_hjb(problem: ControlProblem, model: LevyModel, grid: TimeGrid, init: DelfourMitterPoint,
              n_paths: int, seed: int, basis: RegressionBasis | None = None) -> HjbSolution:
    """Value function of the control problem as a backward equation on uncontrolled paths."""
    bp = BsdeProblem(hjb_generator(problem), lambda hist, x: np.asarray(problem.g(x), dtype=float),
                     name=f"hjb:{problem.name}")
    est = u_representation(bp, problem.coeffs, model, grid, init, n_paths, seed, basis,
                           convention="bsde", split=False)
    return HjbSolution(problem, est)


# ---------------------------------------------------------------------------
# controls


class Control:
    """``alpha(i, t, hist, x) -> actions``; ``reset(n, n_steps, seed)`` before each run."""

    name = "control"

    def reset(self, n: int, n_steps: int, seed: int) -> None:
        pass

    def __call__(self, i, t, hist, x):
        raise NotImplementedError


@dataclass
class FeedbackPolicy(Control):
    """``alpha = selector(t, x, zeta)`` with ``zeta = du/dx * sigma`` read off the solved value."""

    problem: ControlProblem
    hjb: HjbSolution
    name: str = "feedback"
    provenance: str = ""

    def __post_init__(self):
        self.provenance = self.provenance or f"hjb:{self.problem.name}:u0={self.hjb.u0:.6g}"

    def zeta(self, i, t, hist, x):
        return self.hjb.solution.d_dx(i, hist, x) * self.problem.sigma(t, x)

    def __call__(self, i, t, hist, x):
        p = self.hjb.solution.d_dx(i, hist, x)
        return select_from_gradient(self.problem, t, x, p)[1]


def synthesize_feedback(problem: ControlProblem, hjb: HjbSolution) -> FeedbackPolicy:
    return FeedbackPolicy(problem, hjb)


@dataclass
class OpenLoop(Control):
    """Wraps ``alpha(t)``."""

    fn: Callable
    name: str = "open_loop"

    def __call__(self, i, t, hist, x):
        return np.broadcast_to(np.asarray(self.fn(t), dtype=float), x.shape)


@dataclass
class ConstantControl(Control):
    value: float
    name: str = "constant"

    def __call__(self, i, t, hist, x):
        return np.full_like(x, self.value)


@dataclass
class LinearFeedback(Control):
    """``clip(k * x + c)`` to the action range."""

    k: float
    c: float
    lo: float
    hi: float
    name: str = "linear"

    def __call__(self, i, t, hist, x):
        return np.clip(self.k * x + self.c, self.lo, self.hi)


@dataclass
class RandomControl(Control):
    """I.i.d. uniform draws from the action grid, fixed per (seed, path, step)."""

    grid: np.ndarray
    name: str = "random"
    _draws: Optional[np.ndarray] = None

    def reset(self, n, n_steps, seed):
        rng = np.random.Generator(np.random.Philox(derive_seed(seed, 99)))
        self._draws = self.grid[rng.integers(0, self.grid.size, size=(n, n_steps))]

    def __call__(self, i, t, hist, x):
        return self._draws[:, i]


@dataclass
class ShiftedControl(Control):
    base: Control
    shift: float
    lo: float
    hi: float
    name: str = "shifted"

    def reset(self, n, n_steps, seed):
        self.base.reset(n, n_steps, seed)

    def __call__(self, i, t, hist, x):
        return np.clip(self.base(i, t, hist, x) + self.shift, self.lo, self.hi)


# ---------------------------------------------------------------------------
# costs


@dataclass(frozen=True)
class CostEstimate:
    J: float
    std_error: float
    n_paths: int
    n_diverged: int
    name: str = ""


def evaluate_cost(problem: ControlProblem, control, model: LevyModel, grid: TimeGrid,
                  init: DelfourMitterPoint, n_paths: int, seed: int) -> CostEstimate:
    """``E[sum dt h(t_i, X_i, a_i) + g(X_T)]`` on closed-loop paths with drift ``mu + F``."""
    if not isinstance(control, Control):
        control = OpenLoop(control)
    control.reset(n_paths, grid.n_steps, seed)
    ctrl = control
    name = control.name
    noise = sample_noise_batch(model, grid, seed, range(n_paths))
    cost = np.zeros(n_paths)
    dt = grid.dt

    def extra(i, t, hist, x):
        a = np.asarray(ctrl(i, t, hist, x), dtype=float)
        cost[:] += dt * np.broadcast_to(np.asarray(problem.h(t, x, a), dtype=float), x.shape)
        return problem.F(t, x, a)

    vals, div = euler_kernel(problem.coeffs, model, grid, init.history, init.present,
                             noise.dW, noise.counts, extra_drift=extra)
    with np.errstate(invalid="ignore"):
        total = cost + np.asarray(problem.g(vals[:, -1]), dtype=float)
    v = total[~div]
    se = float(v.std(ddof=1) / math.sqrt(v.size)) if v.size > 1 else 0.0
    return CostEstimate(float(v.mean()), se, n_paths, int(div.sum()), name)


# ---------------------------------------------------------------------------
# verification


@dataclass(frozen=True)
class CandidateResult:
    name: str
    strong: bool
    J: float
    std_error: float
    gap: float      # J - u0
    band: float     # combined standard error

    def to_dict(self) -> dict:
        return dict(self.__dict__)


@dataclass(frozen=True)
class VerificationReport:
    u0: float
    u0_std_error: float
    feedback: CandidateResult
    candidates: tuple
    n_sigma: float = 3.0

    @property
    def feedback_consistent(self) -> bool:
        return abs(self.feedback.gap) < self.n_sigma * self.feedback.band

    @property
    def strong_exceed(self) -> bool:
        return all(c.gap > self.n_sigma * c.band for c in self.candidates if c.strong)

    @property
    def none_beat(self) -> bool:
        return all(c.gap >= -self.n_sigma * c.band for c in (self.feedback,) + self.candidates)

    @property
    def inconclusive(self) -> bool:
        """Some weak candidate is neither resolved above ``u0`` nor below it."""
        return any(abs(c.gap) < self.n_sigma * c.band for c in self.candidates if not c.strong)

    @property
    def passed(self) -> bool:
        return self.feedback_consistent and self.strong_exceed and self.none_beat

    def to_dict(self) -> dict:
        return {
            "u0": self.u0,
            "u0_std_error": self.u0_std_error,
            "feedback": self.feedback.to_dict(),
            "candidates": [c.to_dict() for c in self.candidates],
            "feedback_consistent": self.feedback_consistent,
            "strong_exceed": self.strong_exceed,
            "none_beat": self.none_beat,
            "inconclusive": self.inconclusive,
            "passed": self.passed,
        }


def default_candidates(problem: ControlProblem, feedback: FeedbackPolicy) -> list:
    """``(control, strong)`` pairs: constants, anti-feedback and random are far from optimal."""
    a = problem.action_grid
    lo, hi = float(a.min()), float(a.max())
    mid = float(a[np.argmin(np.abs(a))])
    top = float(a[np.argmin(np.abs(a - min(hi, 1.0)))])
    return [
        (ConstantControl(mid, name=f"constant:{mid:g}"), True),
        (ConstantControl(top, name=f"constant:{top:g}"), True),
        (LinearFeedback(1.0, 0.0, lo, hi, name="anti_feedback"), True),
        (RandomControl(a, name="random_uniform"), True),
        (ShiftedControl(feedback, 0.5, lo, hi, name="feedback+0.5"), False),
    ]


def verification_battery(problem: ControlProblem, model: LevyModel, grid: TimeGrid,
                         init: DelfourMitterPoint, n_solve: int, n_eval: int, seed: int,
                         basis: RegressionBasis | None = None, candidates: Sequence | None = None,
                         hjb: HjbSolution | None = None) -> VerificationReport:
    """Solve the HJB, synthesise the feedback, and price it against alternative controls.

    Each control is evaluated on its own noise (seed derived from the root
    seed and the candidate's position).
    """
    hjb = hjb or solve_hjb(problem, model, grid, init, n_solve, derive_seed(seed, 0), basis)
    policy = synthesize_feedback(problem, hjb)
    u0, use = hjb.u0, hjb.std_error

    def run(ctrl, k, strong):
        c = evaluate_cost(problem, ctrl, model, grid, init, n_eval, derive_seed(seed, 1, k))
        band = math.hypot(c.std_error, use)
        return CandidateResult(ctrl.name, strong, c.J, c.std_error, c.J - u0, band)

    fb = run(policy, 0, False)
    cands = candidates if candidates is not None else default_candidates(problem, policy)
    res = tuple(run(c, k + 1, strong) for k, (c, strong) in enumerate(cands))
    return VerificationReport(u0, use, fb, res)


# ---------------------------------------------------------------------------
# catalog


def _num(d, key, default, where):
    v = d.get(key, default)
    if isinstance(v, bool) or not isinstance(v, (int, float)):
        raise ConfigInvalid(f"{where}.{key}", f"expected a number, got {v!r}")
    return float(v)


def control_problem_from_config(spec: dict | None, coeffs: Coefficients | None = None) -> ControlProblem:
    """``lq``: ``h = qa a^2 + qx x^2``, ``g = gx x^2``; ``tracking``: ``h = (a - target)^2 + w (x - ref)^2``;
    ``bang_bang``: ``h = c |a| + x^2``.  All use ``F = a``."""
    spec = spec or {"type": "lq"}
    w = "control"
    kind = spec.get("type", "lq")
    lo = _num(spec, "a_min", -3.0, w)
    hi = _num(spec, "a_max", 3.0, w)
    n_act = int(_num(spec, "n_actions", 121, w))
    if kind == "bang_bang" and "n_actions" not in spec:
        n_act = 3
    if n_act < 1 or hi < lo:
        raise ConfigInvalid(f"{w}.n_actions", "need n_actions >= 1 and a_min <= a_max")
    grid = np.linspace(lo, hi, n_act)
    sig = _num(spec, "sigma", 1.0, w)
    coeffs = coeffs or Coefficients(sigma=lambda t, hist, x: np.full_like(x, sig), name="brownian")
    C_sigma = _num(spec, "C_sigma", 1.0 / abs(sig) * 10 if sig else 1.0, w)
    F = lambda t, x, a: a + 0.0 * x
    if kind == "lq":
        qa, qx, gx = _num(spec, "qa", 1.0, w), _num(spec, "qx", 1.0, w), _num(spec, "gx", 1.0, w)
        h = lambda t, x, a: qa * a * a + qx * x * x
        g = lambda x: gx * x * x
    elif kind == "tracking":
        tgt, ref, wt = _num(spec, "target", 0.0, w), _num(spec, "ref", 1.0, w), _num(spec, "weight", 1.0, w)
        h = lambda t, x, a: (a - tgt) ** 2 + wt * (x - ref) ** 2
        g = lambda x: (x - ref) ** 2
    elif kind == "bang_bang":
        c = _num(spec, "cost", 0.5, w)
        h = lambda t, x, a: c * np.abs(a) + x * x
        g = lambda x: x * x
    else:
        raise CatalogMiss(f"{w}.type", f"unknown control problem {kind!r}")
    return ControlProblem(F, h, g, grid, C_sigma, coeffs, C_F=max(abs(lo), abs(hi)), name=kind,
                          gradient_reading=spec.get("gradient_reading", "sigma"))
