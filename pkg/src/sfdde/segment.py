"""Grid representation of the Delfour–Mitter space ``L^2([-r, 0]) x R``.

A point is a pair ``(history, present)``.  ``history`` holds ``M + 1``
samples of a function on ``[-r, 0]``; its last sample need not equal
``present`` because the product space does not couple the two.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import GridMismatch


def trapezoid(values: np.ndarray, dt: float) -> np.ndarray:
    """Composite trapezoid along the last axis."""
    v = np.asarray(values, dtype=float)
    return dt * (v.sum(axis=-1) - 0.5 * (v[..., 0] + v[..., -1]))


def segment_average(history: np.ndarray, dt: float) -> np.ndarray:
    h = np.asarray(history, dtype=float)
    r = dt * (h.shape[-1] - 1)
    return trapezoid(h, dt) / r


def legendre1_coefficient(history: np.ndarray, dt: float) -> np.ndarray:
    """Coefficient of the first Legendre polynomial of the window, by trapezoid."""
    h = np.asarray(history, dtype=float)
    m = h.shape[-1] - 1
    p1 = np.linspace(-1.0, 1.0, m + 1)
    return trapezoid(h * p1, dt) / trapezoid(p1 * p1, dt)


def m2_norm_sq_batch(history: np.ndarray, present: np.ndarray, dt: float) -> np.ndarray:
    history = np.asarray(history, dtype=float)
    return trapezoid(history * history, dt) + np.asarray(present, dtype=float) ** 2


@dataclass(frozen=True, eq=False)
class DelfourMitterPoint:
    history: np.ndarray
    present: float
    dt: float

    def __post_init__(self):
        h = np.array(self.history, dtype=float).reshape(-1)
        if h.size < 2:
            raise ValueError("history needs at least two samples")
        if not (np.all(np.isfinite(h)) and np.isfinite(self.present)):
            raise ValueError("Delfour-Mitter point has non-finite entries")
        h.setflags(write=False)
        object.__setattr__(self, "history", h)
        object.__setattr__(self, "present", float(self.present))
        object.__setattr__(self, "dt", float(self.dt))

    @property
    def M(self) -> int:
        return self.history.size - 1

    @property
    def r(self) -> float:
        return self.M * self.dt

    @classmethod
    def constant(cls, c: float, M: int, dt: float, present: float | None = None):
        return cls(np.full(M + 1, float(c)), c if present is None else present, dt)

    @classmethod
    def ramp(cls, start: float, end: float, M: int, dt: float, present: float | None = None):
        return cls(np.linspace(start, end, M + 1), end if present is None else present, dt)

    def __sub__(self, other: "DelfourMitterPoint") -> "DelfourMitterPoint":
        _check_same_grid(self, other)
        return DelfourMitterPoint(self.history - other.history, self.present - other.present, self.dt)

    def equals(self, other: "DelfourMitterPoint") -> bool:
        return (self.dt == other.dt and np.array_equal(self.history, other.history)
                and self.present == other.present)


def _check_same_grid(p: DelfourMitterPoint, q: DelfourMitterPoint) -> None:
    if p.M != q.M or not np.isclose(p.dt, q.dt, rtol=1e-12, atol=0):
        raise GridMismatch(f"points live on different grids (M={p.M}, dt={p.dt}) vs (M={q.M}, dt={q.dt})")


def m2_norm_sq(p: DelfourMitterPoint) -> float:
    return float(trapezoid(p.history * p.history, p.dt) + p.present**2)


def m2_norm(p: DelfourMitterPoint) -> float:
    return float(np.sqrt(m2_norm_sq(p)))


def m2_inner(p: DelfourMitterPoint, q: DelfourMitterPoint) -> float:
    _check_same_grid(p, q)
    return float(trapezoid(p.history * q.history, p.dt) + p.present * q.present)


def history_buffer(initial_history: np.ndarray, values: np.ndarray) -> np.ndarray:
    """Concatenate the pre-``tau`` samples with the trajectory.

    Entry ``j`` of the result is the value at time ``tau - r + j*dt``; the last
    initial sample (at ``tau``) is replaced by the trajectory's ``X(tau)``.
    Works row-wise for batches.
    """
    h = np.asarray(initial_history, dtype=float)
    v = np.asarray(values, dtype=float)
    m = h.shape[-1] - 1
    if v.ndim == 1:
        return np.concatenate([h[:m], v])
    h = np.broadcast_to(h, (v.shape[0], m + 1))
    return np.concatenate([h[:, :m], v], axis=1)


def segment_from_buffer(buf: np.ndarray, initial_history: np.ndarray, i: int) -> np.ndarray:
    """History at step ``i``: the initial history verbatim at ``i = 0``."""
    m = np.asarray(initial_history).shape[-1] - 1
    if i == 0:
        if buf.ndim == 1:
            return np.asarray(initial_history, dtype=float)
        return np.broadcast_to(np.asarray(initial_history, dtype=float), (buf.shape[0], m + 1))
    return buf[..., i: i + m + 1]


def segment_at(path, t: float) -> DelfourMitterPoint:
    """``(X_t, X(t))`` read from a stored path; a pure read."""
    i = path.grid.index_of(t)
    init = path.initial
    if i == 0:
        if path.values[0] == init.present:
            return init
        return DelfourMitterPoint(init.history, path.values[0], init.dt)
    buf = history_buffer(init.history, path.values)
    return DelfourMitterPoint(buf[i: i + init.M + 1].copy(), path.values[i], init.dt)
