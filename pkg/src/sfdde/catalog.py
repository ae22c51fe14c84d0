"""Builtin coefficient terms, functionals on segments, generators and control problems.

Everything here is addressable by name from a run config; library callers
can bypass the catalog and pass their own callables.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .errors import CatalogMiss, ConfigInvalid
from .forward import Coefficients
from .levy import TimeGrid
from .segment import DelfourMitterPoint, segment_average


@dataclass(frozen=True)
class Functional:
    """A map ``(hist, x) -> value`` on segments, vectorised over rows."""

    fn: Callable
    name: str

    def __call__(self, hist, x):
        x = np.asarray(x, dtype=float)
        return np.broadcast_to(np.asarray(self.fn(hist, x), dtype=float), x.shape)

    def at(self, p: DelfourMitterPoint) -> float:
        return float(self(p.history[None, :], np.array([p.present]))[0])


def _req(d: dict, key: str, where: str):
    if key not in d:
        raise ConfigInvalid(f"{where}.{key}", "required")
    v = d[key]
    if isinstance(v, bool) or not isinstance(v, (int, float)):
        raise ConfigInvalid(f"{where}.{key}", f"expected a number, got {v!r}")
    return float(v)


def _opt(d: dict, key: str, default: float, where: str):
    return _req(d, key, where) if key in d else float(default)


def _terms(spec, where):
    if spec is None:
        return []
    if isinstance(spec, dict):
        return [spec]
    if isinstance(spec, list):
        return spec
    raise ConfigInvalid(where, "expected a term or a list of terms")


# ---------------------------------------------------------------------------
# coefficient terms


def _tap_index(theta: float, grid: TimeGrid, where: str) -> int:
    j = round((theta + grid.r) / grid.dt)
    if not (-grid.r - 1e-12 <= theta <= 1e-12):
        raise ConfigInvalid(where, f"lag {theta} outside [-r, 0]")
    return int(j)


def _drift_term(t: dict, grid: TimeGrid, where: str):
    """Returns ``(fn(t, hist, x), lipschitz contribution)``."""
    kind = t.get("type")
    if kind == "constant":
        c = _req(t, "value", where)
        return (lambda s, h, x: np.full_like(x, c)), 0.0
    if kind == "linear":
        a, b = _opt(t, "a", 0.0, where), _opt(t, "b", 0.0, where)
        return (lambda s, h, x: a * x + b), abs(a)
    if kind == "delayed_tap":
        a = _opt(t, "a", 1.0, where)
        j = _tap_index(_opt(t, "theta", -grid.r, where), grid, where)
        return (lambda s, h, x: a * h[:, j]), abs(a)
    if kind == "distributed_delay":
        atoms = t.get("atoms")
        if not isinstance(atoms, list) or not atoms:
            raise ConfigInvalid(f"{where}.atoms", "need a nonempty list of {theta, weight}")
        idx = np.array([_tap_index(_req(a, "theta", f"{where}.atoms"), grid, where) for a in atoms])
        w = np.array([_req(a, "weight", f"{where}.atoms") for a in atoms])
        return (lambda s, h, x: (h[:, idx] * w).sum(axis=1)), float(np.abs(w).sum())
    raise CatalogMiss(f"{where}.type", f"unknown coefficient term {kind!r}")


def _jump_term(t: dict, where: str):
    kind = t.get("type")
    if kind == "additive":
        c = _opt(t, "scale", 1.0, where)
        return (lambda s, h, x, z: np.full_like(x, c * z)), 0.0
    if kind == "geometric":
        c = _opt(t, "scale", 1.0, where)
        return (lambda s, h, x, z: c * x * z), 0.0
    if kind == "constant":
        c = _req(t, "value", where)
        return (lambda s, h, x, z: np.full_like(x, c)), 0.0
    raise CatalogMiss(f"{where}.type", f"unknown jump term {kind!r}")


def _sum_terms(fns):
    if not fns:
        return None
    if len(fns) == 1:
        return fns[0]

    def total(*args):
        out = fns[0](*args)
        for f in fns[1:]:
            out = out + f(*args)
        return out

    return total


def coefficients_from_config(spec: dict | None, grid: TimeGrid) -> Coefficients:
    spec = spec or {}
    mu = [_drift_term(t, grid, f"coefficients.mu[{k}]") for k, t in enumerate(_terms(spec.get("mu"), "coefficients.mu"))]
    sg = [_drift_term(t, grid, f"coefficients.sigma[{k}]") for k, t in enumerate(_terms(spec.get("sigma"), "coefficients.sigma"))]
    gm = [_jump_term(t, f"coefficients.gamma[{k}]") for k, t in enumerate(_terms(spec.get("gamma"), "coefficients.gamma"))]
    kw = {}
    for key, terms in (("mu", mu), ("sigma", sg), ("gamma", gm)):
        f = _sum_terms([fn for fn, _ in terms])
        if f is not None:
            kw[key] = f
    K = sum(k for _, k in mu) + sum(k for _, k in sg)
    if "lipschitz_K" in spec:
        K = _req(spec, "lipschitz_K", "coefficients")
    m = _opt(spec, "growth_m", 1.0, "coefficients")
    return Coefficients(lipschitz_K=K, growth_m=m, name=str(spec.get("name", "config")), **kw)


# ---------------------------------------------------------------------------
# functionals phi(eta, x)


def functional_from_config(spec: dict | None, grid: TimeGrid, where: str = "phi") -> Functional:
    spec = spec or {"type": "present"}
    kind = spec.get("type")
    dt = grid.dt
    if kind == "present":
        return Functional(lambda h, x: x, "present")
    if kind == "monomial":
        k = int(_req(spec, "k", where))
        if not 0 <= k <= 4:
            raise ConfigInvalid(f"{where}.k", "monomial degree must be in 0..4")
        return Functional(lambda h, x: x**k, f"x^{k}")
    if kind == "segment_average":
        return Functional(lambda h, x: segment_average(h, dt), "segment_average")
    if kind == "exp_neg_sq":
        return Functional(lambda h, x: np.exp(-x * x), "exp_neg_sq")
    if kind == "ramp":
        c, w = _opt(spec, "threshold", 0.0, where), _opt(spec, "width", 0.1, where)
        return Functional(lambda h, x: np.clip((x - c) / w + 0.5, 0.0, 1.0), f"ramp:{c}")
    if kind == "call_smoothed":
        k, eps = _opt(spec, "strike", 1.0, where), _opt(spec, "eps", 0.05, where)
        return Functional(lambda h, x: eps * np.logaddexp(0.0, (x - k) / eps), f"call:{k}")
    if kind == "constant":
        c = _req(spec, "value", where)
        return Functional(lambda h, x: np.full_like(x, c), f"constant:{c}")
    raise CatalogMiss(f"{where}.type", f"unknown functional {kind!r}")


# ---------------------------------------------------------------------------
# generators psi(t, hist, x, y, z, u_tilde)


@dataclass(frozen=True)
class Generator:
    fn: Callable
    name: str
    lipschitz: float = 0.0

    def __call__(self, t, hist, x, y, z, ut):
        return self.fn(t, hist, x, y, z, ut)


def zero_generator() -> Generator:
    return Generator(lambda t, h, x, y, z, u: np.zeros_like(y), "zero")


def constant_generator(c: float) -> Generator:
    return Generator(lambda t, h, x, y, z, u: np.full_like(y, c), f"constant:{c}")


def linear_generator(a: float, b: float = 0.0, c: float = 0.0, d: float = 0.0) -> Generator:
    """``a*y + b*z + c*u_tilde + d``."""
    return Generator(lambda t, h, x, y, z, u: a * y + b * z + c * u + d,
                     f"lipschitz:{a},{b},{c}", abs(a) + abs(b) + abs(c))


def generator_from_config(spec: dict | None) -> Generator:
    spec = spec or {"type": "zero"}
    kind = spec.get("type")
    w = "psi"
    if kind == "zero":
        return zero_generator()
    if kind == "constant":
        return constant_generator(_req(spec, "value", w))
    if kind == "linear":
        return linear_generator(_req(spec, "a", w))
    if kind == "lipschitz":
        return linear_generator(_opt(spec, "a", 0.0, w), _opt(spec, "b", 0.0, w),
                                _opt(spec, "c", 0.0, w), _opt(spec, "d", 0.0, w))
    if kind == "soft_call":
        a, k, eps = _opt(spec, "a", 1.0, w), _opt(spec, "strike", 0.0, w), _opt(spec, "eps", 0.05, w)
        return Generator(lambda t, h, x, y, z, u: a * eps * np.logaddexp(0.0, (y - k) / eps),
                         f"soft_call:{a},{k}", abs(a))
    raise CatalogMiss(f"{w}.type", f"unknown generator {kind!r}")


def initial_point_from_config(spec, grid: TimeGrid) -> DelfourMitterPoint:
    M, dt = grid.M, grid.dt
    if spec is None:
        spec = {"constant": 0.0}
    if isinstance(spec, (int, float)) and not isinstance(spec, bool):
        return DelfourMitterPoint.constant(float(spec), M, dt)
    if not isinstance(spec, dict):
        raise ConfigInvalid("init", "expected a number or a mapping")
    present = spec.get("present")
    if present is not None:
        present = _req(spec, "present", "init")
    if "constant" in spec:
        return DelfourMitterPoint.constant(_req(spec, "constant", "init"), M, dt, present)
    if "ramp" in spec:
        r = spec["ramp"]
        return DelfourMitterPoint.ramp(_req(r, "start", "init.ramp"), _req(r, "end", "init.ramp"), M, dt, present)
    if "samples" in spec:
        s = spec["samples"]
        if not isinstance(s, list) or len(s) != M + 1:
            raise ConfigInvalid("init.samples", f"need exactly M+1 = {M + 1} samples")
        return DelfourMitterPoint(np.array(s, dtype=float), s[-1] if present is None else present, dt)
    raise ConfigInvalid("init", "use one of constant, ramp, samples")
