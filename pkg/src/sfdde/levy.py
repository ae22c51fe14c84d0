"""Finite-activity Lévy drivers: the jump measure, the time grid, and noise paths.

The Lévy measure is atomic, ``nu = sum_k rate_k * delta_{z_k}``, so every
jump integral is an exact finite sum.  Noise for path ``p`` is drawn from a
Philox stream whose counter is keyed on ``(stream tag, p)``; a path's noise
therefore depends only on ``(model, grid, seed, p)`` and never on how many
other paths are generated alongside it.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .errors import DeltaBoundViolated, GridError, MalformedModel, OffGridTime, OutOfRange

_BROWNIAN_TAG = 0
_JUMP_TAG = 1
_BRIDGE_TAG = 2  # refinement level l uses tag _BRIDGE_TAG + l


# ---------------------------------------------------------------------------
# time grid


@dataclass(frozen=True)
class TimeGrid:
    """Uniform grid on ``[tau, T]`` whose step also divides the delay window."""

    tau: float
    T: float
    r: float
    M: int

    def __post_init__(self):
        if not (self.r > 0):
            raise GridError(f"delay r must be positive, got {self.r}")
        if int(self.M) != self.M or self.M < 1:
            raise GridError(f"M must be a positive integer, got {self.M}")
        if not (self.T > self.tau) or self.tau < 0:
            raise GridError(f"need 0 <= tau < T, got tau={self.tau}, T={self.T}")
        n = (self.T - self.tau) / self.dt
        if abs(n - round(n)) > 1e-9 * max(1.0, n):
            raise GridError(f"dt = r/M = {self.dt} does not divide T - tau = {self.T - self.tau}")
        object.__setattr__(self, "M", int(self.M))

    @property
    def dt(self) -> float:
        return self.r / self.M

    @property
    def n_steps(self) -> int:
        return int(round((self.T - self.tau) / self.dt))

    def time(self, i: int) -> float:
        return self.tau + i * self.dt

    @property
    def times(self) -> np.ndarray:
        return self.tau + self.dt * np.arange(self.n_steps + 1)

    @property
    def theta(self) -> np.ndarray:
        """Lags ``-r, -r+dt, ..., 0`` of the delay window."""
        return -self.r + self.dt * np.arange(self.M + 1)

    def index_of(self, t: float) -> int:
        k = (t - self.tau) / self.dt
        i = int(round(k))
        if abs(k - i) > 1e-7 or i < 0 or i > self.n_steps:
            raise OffGridTime(f"t={t} is not a grid time of [{self.tau}, {self.T}] with dt={self.dt}")
        return i

    def subgrid(self, start: int) -> "TimeGrid":
        """The same grid restarted at step ``start``."""
        if not 0 <= start < self.n_steps:
            raise OffGridTime(f"cannot restart at step {start} of {self.n_steps}")
        return TimeGrid(self.time(start), self.T, self.r, self.M)

    def refined(self, factor: int = 2) -> "TimeGrid":
        return TimeGrid(self.tau, self.T, self.r, self.M * factor)

    def same_step(self, other: "TimeGrid") -> bool:
        return self.M == other.M and math.isclose(self.r, other.r, rel_tol=1e-12)


# ---------------------------------------------------------------------------
# Lévy measure


def delta_min1abs(z):
    return np.minimum(1.0, np.abs(z))


def delta_one(z):
    return np.ones_like(np.asarray(z, dtype=float))


def delta_abs_capped(cap: float) -> Callable:
    def delta(z):
        return np.minimum(cap, np.abs(z))

    return delta


def parse_delta(name: str, marks: Sequence[float] = ()) -> tuple[Callable, float]:
    """Resolve a builtin weight name to ``(delta, K_delta)``."""
    if name == "min1abs":
        return delta_min1abs, 1.0
    if name == "one":
        # delta = 1 needs K >= 1 / min(1, |z|) on every atom
        k = max([1.0] + [1.0 / min(1.0, abs(z)) for z in marks if z != 0])
        return delta_one, k
    if name.startswith("abs_capped:"):
        try:
            cap = float(name.split(":", 1)[1])
        except ValueError as exc:
            raise MalformedModel(f"bad delta spec {name!r}") from exc
        if cap <= 0:
            raise MalformedModel(f"abs_capped needs a positive cap, got {cap}")
        return delta_abs_capped(cap), max(1.0, cap)
    raise MalformedModel(f"unknown delta builtin {name!r}; use min1abs, one or abs_capped:<K>")


@dataclass(frozen=True)
class LevyModel:
    """Atomic Lévy measure plus the weight ``delta`` of the generator's jump argument."""

    atoms: tuple[tuple[float, float], ...] = ()
    delta_weight: Callable = delta_min1abs
    K_delta: float = 1.0
    delta_name: str = "min1abs"

    def __post_init__(self):
        object.__setattr__(self, "atoms", tuple((float(z), float(lam)) for z, lam in self.atoms))

    @classmethod
    def from_atoms(cls, atoms, delta: str = "min1abs") -> "LevyModel":
        atoms = tuple((float(z), float(lam)) for z, lam in atoms)
        fn, k = parse_delta(delta, [z for z, _ in atoms])
        return cls(atoms, fn, k, delta)

    @classmethod
    def jump_free(cls) -> "LevyModel":
        return cls(())

    @property
    def marks(self) -> np.ndarray:
        return np.array([z for z, _ in self.atoms], dtype=float)

    @property
    def rates(self) -> np.ndarray:
        return np.array([lam for _, lam in self.atoms], dtype=float)

    @property
    def n_atoms(self) -> int:
        return len(self.atoms)

    @property
    def total_intensity(self) -> float:
        return float(self.rates.sum()) if self.atoms else 0.0

    @property
    def second_moment(self) -> float:
        return float((self.rates * self.marks**2).sum()) if self.atoms else 0.0

    @property
    def first_moment(self) -> float:
        """``int z nu(dz)``, the compensator rate of ``J``."""
        return float((self.rates * self.marks).sum()) if self.atoms else 0.0

    @property
    def delta_values(self) -> np.ndarray:
        if not self.atoms:
            return np.zeros(0)
        return np.asarray(self.delta_weight(self.marks), dtype=float).reshape(-1)

    def atom_index(self, z: float) -> int:
        for k, (zk, _) in enumerate(self.atoms):
            if zk == z or math.isclose(zk, z, rel_tol=1e-12, abs_tol=1e-15):
                return k
        return -1

    def to_config(self) -> dict:
        return {"atoms": [{"z": z, "rate": lam} for z, lam in self.atoms], "delta": self.delta_name}


@dataclass(frozen=True)
class ValidationReport:
    total_intensity: float
    second_moment: float
    jump_free: bool
    checks: dict = field(default_factory=dict)

    @property
    def passed(self) -> bool:
        return all(self.checks.values())


def validate_levy_model(model: LevyModel, raise_on_fail: bool = True) -> ValidationReport:
    """Check the integrability and weight conditions on an atomic model.

    With ``raise_on_fail`` the first violation raises ``MalformedModel`` or
    ``DeltaBoundViolated``; otherwise the failing checks are returned.
    """
    checks = {}
    z = model.marks
    lam = model.rates
    checks["nonzero_marks"] = bool(np.all(z != 0)) and bool(np.all(np.isfinite(z)))
    checks["positive_rates"] = bool(np.all(lam > 0)) and bool(np.all(np.isfinite(lam)))
    if raise_on_fail and not checks["nonzero_marks"]:
        raise MalformedModel("the Lévy measure lives on R \\ {0}: found a zero or non-finite mark")
    if raise_on_fail and not checks["positive_rates"]:
        raise MalformedModel("atom rates must be finite and > 0")
    m2 = model.second_moment
    checks["finite_second_moment"] = bool(np.isfinite(m2))

    delta_ok = True
    if model.atoms:
        d = model.delta_values
        bound = model.K_delta * np.minimum(1.0, np.abs(z))
        for k in range(len(z)):
            ok = bool(np.isfinite(d[k]) and d[k] >= 0 and d[k] <= bound[k] * (1 + 1e-12))
            if not ok:
                delta_ok = False
                if raise_on_fail:
                    raise DeltaBoundViolated(
                        f"delta({z[k]}) = {d[k]} violates 0 <= delta <= {model.K_delta} * min(1, |z|)",
                        atom=(float(z[k]), float(lam[k])),
                    )
    checks["delta_bound"] = delta_ok
    return ValidationReport(model.total_intensity, m2, not model.atoms, checks)


# ---------------------------------------------------------------------------
# noise


def _root_key(seed: int) -> np.ndarray:
    return np.random.SeedSequence(int(seed) & ((1 << 64) - 1)).generate_state(2, np.uint64)


def _stream(key: np.ndarray, tag: int, index: int) -> np.random.Generator:
    counter = np.array([0, 0, tag, index], dtype=np.uint64)
    return np.random.Generator(np.random.Philox(key=key, counter=counter))


def derive_seed(seed: int, *keys: int) -> int:
    """Child seed for a sub-experiment, keyed on integers."""
    ss = np.random.SeedSequence(int(seed) & ((1 << 64) - 1), spawn_key=tuple(int(k) for k in keys))
    return int(ss.generate_state(1, np.uint64)[0] >> np.uint64(1))


@dataclass(frozen=True, eq=False)
class NoisePath:
    """Brownian increments and exact jump times/marks for one path."""

    grid: TimeGrid
    model: LevyModel
    brownian_increments: np.ndarray
    jump_times: np.ndarray
    jump_atoms: np.ndarray
    seed: int
    path_index: int
    refinement: int = 0

    @property
    def marks(self) -> np.ndarray:
        return self.model.marks[self.jump_atoms] if len(self.jump_atoms) else np.zeros(0)

    @property
    def jump_steps(self) -> np.ndarray:
        """Grid step ``i`` with ``t_i < s <= t_{i+1}`` for every jump time ``s``."""
        idx = np.ceil((self.jump_times - self.grid.tau) / self.grid.dt - 1e-9).astype(int) - 1
        return np.clip(idx, 0, self.grid.n_steps - 1)

    def step_counts(self) -> np.ndarray:
        counts = np.zeros((self.grid.n_steps, max(self.model.n_atoms, 1)), dtype=np.int32)
        if len(self.jump_times):
            np.add.at(counts, (self.jump_steps, self.jump_atoms), 1)
        return counts[:, : self.model.n_atoms]

    def same_as(self, other: "NoisePath") -> bool:
        return (
            np.array_equal(self.brownian_increments, other.brownian_increments)
            and np.array_equal(self.jump_times, other.jump_times)
            and np.array_equal(self.jump_atoms, other.jump_atoms)
        )


def _sample_jumps(rng: np.random.Generator, model: LevyModel, tau: float, T: float):
    lam = model.total_intensity
    if lam <= 0:
        return np.zeros(0), np.zeros(0, dtype=int)
    span = T - tau
    mean = lam * span
    chunk = int(mean + 6 * math.sqrt(mean) + 8)
    times = np.cumsum(rng.exponential(1.0 / lam, size=chunk))
    while times[-1] <= span:
        more = times[-1] + np.cumsum(rng.exponential(1.0 / lam, size=chunk))
        times = np.concatenate([times, more])
    times = tau + times[times <= span]
    atoms = rng.choice(model.n_atoms, size=len(times), p=model.rates / lam)
    return times, atoms.astype(int)


def sample_noise(model: LevyModel, grid: TimeGrid, seed: int, path_index: int) -> NoisePath:
    """Draw the noise of path ``path_index``; a pure function of its arguments."""
    key = _root_key(seed)
    rng_w = _stream(key, _BROWNIAN_TAG, path_index)
    dw = math.sqrt(grid.dt) * rng_w.standard_normal(grid.n_steps)
    rng_j = _stream(key, _JUMP_TAG, path_index)
    times, atoms = _sample_jumps(rng_j, model, grid.tau, grid.T)
    return NoisePath(grid, model, dw, times, atoms, int(seed), int(path_index))


def refine_noise(noise: NoisePath) -> NoisePath:
    """Halve the step: Brownian-bridge midpoints, identical jumps."""
    key = _root_key(noise.seed)
    rng = _stream(key, _BRIDGE_TAG + noise.refinement, noise.path_index)
    dw = noise.brownian_increments
    xi = rng.standard_normal(len(dw))
    half = 0.5 * math.sqrt(noise.grid.dt) * xi
    fine = np.empty(2 * len(dw))
    fine[0::2] = 0.5 * dw + half
    fine[1::2] = 0.5 * dw - half
    return NoisePath(
        noise.grid.refined(2), noise.model, fine, noise.jump_times, noise.jump_atoms,
        noise.seed, noise.path_index, noise.refinement + 1,
    )


def splice_noise(prefix: NoisePath, step: int, suffix: NoisePath) -> NoisePath:
    """Noise equal to ``prefix`` on steps ``< step`` and to ``suffix`` afterwards."""
    g = prefix.grid
    start = g.time(step)
    if not (g.same_step(suffix.grid) and math.isclose(suffix.grid.tau, start, abs_tol=1e-9 * g.dt)
            and math.isclose(suffix.grid.T, g.T)):
        raise OffGridTime("suffix noise must live on the prefix grid restarted at `step`")
    keep = prefix.jump_times <= start
    dw = np.concatenate([prefix.brownian_increments[:step], suffix.brownian_increments])
    times = np.concatenate([prefix.jump_times[keep], suffix.jump_times])
    atoms = np.concatenate([prefix.jump_atoms[keep], suffix.jump_atoms]).astype(int)
    return NoisePath(g, prefix.model, dw, times, atoms, suffix.seed, suffix.path_index)


@dataclass(frozen=True, eq=False)
class NoiseBatch:
    """Noise of many paths stacked for vectorised stepping."""

    grid: TimeGrid
    model: LevyModel
    dW: np.ndarray        # (n, N)
    counts: np.ndarray    # (n, N, K) jumps of atom k in step i
    paths: tuple          # NoisePath per row (jump logs)

    @classmethod
    def from_paths(cls, paths: Sequence[NoisePath]) -> "NoiseBatch":
        if not paths:
            raise ValueError("empty noise batch")
        g = paths[0].grid
        dw = np.stack([p.brownian_increments for p in paths])
        counts = np.stack([p.step_counts() for p in paths]) if paths[0].model.n_atoms else \
            np.zeros((len(paths), g.n_steps, 0), dtype=np.int32)
        return cls(g, paths[0].model, dw, counts, tuple(paths))

    @property
    def n_paths(self) -> int:
        return self.dW.shape[0]

    def subset(self, rows) -> "NoiseBatch":
        rows = np.asarray(rows)
        return NoiseBatch(self.grid, self.model, self.dW[rows], self.counts[rows],
                          tuple(self.paths[i] for i in rows))


def sample_noise_batch(model: LevyModel, grid: TimeGrid, seed: int, path_indices) -> NoiseBatch:
    validate_levy_model(model)
    key = _root_key(seed)
    out = []
    sq = math.sqrt(grid.dt)
    for p in path_indices:
        p = int(p)
        dw = sq * _stream(key, _BROWNIAN_TAG, p).standard_normal(grid.n_steps)
        times, atoms = _sample_jumps(_stream(key, _JUMP_TAG, p), model, grid.tau, grid.T)
        out.append(NoisePath(grid, model, dw, times, atoms, int(seed), p))
    return NoiseBatch.from_paths(out)


# ---------------------------------------------------------------------------
# compensated jump integral J(t) = int z Ñ(ds, dz)


def compensated_integral_J(noise: NoisePath, model: LevyModel | None, t: float) -> float:
    model = model or noise.model
    g = noise.grid
    tol = 1e-12 * max(1.0, abs(g.T))
    if t < g.tau - tol or t > g.T + tol:
        raise OutOfRange(f"t={t} outside [{g.tau}, {g.T}]")
    if not model.atoms:
        return 0.0
    jumps = model.marks[noise.jump_atoms][noise.jump_times <= t].sum()
    return float(jumps - (t - g.tau) * model.first_moment)


def compensated_J_grid(batch: NoiseBatch) -> np.ndarray:
    """``J(t_i)`` for every path and grid time, shape ``(n, N+1)``."""
    n, N = batch.dW.shape
    out = np.zeros((n, N + 1))
    if batch.model.n_atoms:
        inc = batch.counts @ batch.model.marks - batch.grid.dt * batch.model.first_moment
        out[:, 1:] = np.cumsum(inc, axis=1)
    return out
