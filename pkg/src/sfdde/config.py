"""Run configuration: YAML in, validated and fully resolved mapping out.

Schema ``sfdde-run/1``::

    schema: sfdde-run/1
    experiment: simulate | semigroup | markov-test | malliavin | qv-study
                | solve-bsde | mild-residual | control-verify
    seed: 1
    grid: {tau: 0.0, T: 1.0, r: 0.5, M: 10}
    levy: {atoms: [{z: 0.5, rate: 2.0}], delta: min1abs}
    coefficients: {mu: [...], sigma: [...], gamma: [...]}
    init: {constant: 1.0} | {ramp: {start, end}} | {samples: [...]} (+ present)
    phi: {type: present}
    psi: {type: zero}
    control: {type: lq}
    budget: {n_paths: 1000, ...}
    params: {...}            # experiment specific
    out: results/            # optional; --out wins
"""

from __future__ import annotations

import copy
import hashlib
import json
from dataclasses import dataclass

import yaml

from .errors import ConfigInvalid

SCHEMA = "sfdde-run/1"
EXPERIMENTS = ("simulate", "semigroup", "markov-test", "malliavin", "qv-study",
               "solve-bsde", "mild-residual", "control-verify")

BUDGET_DEFAULTS = {
    "simulate": {"n_paths": 100, "csv_paths": 10},
    "semigroup": {"n_paths": 10000},
    "markov-test": {"n_outer": 200, "n_inner": 500},
    "malliavin": {"n_paths": 20, "n_probes": 100},
    "qv-study": {"n_paths": 1000, "n_levels": 3},
    "solve-bsde": {"n_paths": 20000},
    "mild-residual": {"n_paths": 20000, "n_check": 20000},
    "control-verify": {"n_solve": 50000, "n_eval": 50000},
}
TOP_KEYS = {"schema", "experiment", "seed", "grid", "levy", "coefficients", "init", "phi", "psi",
            "control", "budget", "params", "out"}


@dataclass(frozen=True)
class RunConfig:
    """Resolved settings.  ``out`` is kept apart so results do not depend on where they land."""

    data: dict
    out: str = "sfdde-out"

    @property
    def experiment(self) -> str:
        return self.data["experiment"]

    @property
    def seed(self) -> int:
        return self.data["seed"]

    def __getitem__(self, key):
        return self.data[key]

    def get(self, key, default=None):
        return self.data.get(key, default)

    def canonical(self) -> str:
        return json.dumps(self.data, sort_keys=True, separators=(",", ":"))

    def hash(self) -> str:
        return hashlib.sha256(self.canonical().encode()).hexdigest()


def _int(v, field, lo=None):
    if isinstance(v, bool) or not isinstance(v, (int, float)) or int(v) != v:
        raise ConfigInvalid(field, f"expected an integer, got {v!r}")
    v = int(v)
    if lo is not None and v < lo:
        raise ConfigInvalid(field, f"must be >= {lo}")
    return v


def _num(v, field):
    if isinstance(v, bool) or not isinstance(v, (int, float)):
        raise ConfigInvalid(field, f"expected a number, got {v!r}")
    return float(v)


def resolve(raw: dict, seed: int | None = None, out: str | None = None) -> RunConfig:
    if not isinstance(raw, dict):
        raise ConfigInvalid("<root>", "config must be a mapping")
    data = copy.deepcopy(raw)
    unknown = set(data) - TOP_KEYS
    if unknown:
        raise ConfigInvalid(sorted(unknown)[0], "unknown top-level key")
    schema = data.setdefault("schema", SCHEMA)
    if schema != SCHEMA:
        raise ConfigInvalid("schema", f"expected {SCHEMA!r}, got {schema!r}")
    exp = data.get("experiment")
    if exp not in EXPERIMENTS:
        raise ConfigInvalid("experiment", f"must be one of {', '.join(EXPERIMENTS)}")
    if seed is not None:
        data["seed"] = seed
    data["seed"] = _int(data.get("seed", 0), "seed", 0)
    g = data.get("grid")
    if not isinstance(g, dict):
        raise ConfigInvalid("grid", "required mapping {tau, T, r, M}")
    grid = {"tau": _num(g.get("tau", 0.0), "grid.tau"), "T": _num(g.get("T", 1.0), "grid.T"),
            "r": _num(g.get("r", 1.0), "grid.r"), "M": _int(g.get("M", 10), "grid.M", 1)}
    extra = set(g) - set(grid)
    if extra:
        raise ConfigInvalid(f"grid.{sorted(extra)[0]}", "unknown key")
    dt = grid["r"] / grid["M"]
    n = (grid["T"] - grid["tau"]) / dt
    if grid["T"] <= grid["tau"] or abs(n - round(n)) > 1e-9 * max(1.0, n):
        raise ConfigInvalid("grid", f"dt = r/M = {dt} must divide T - tau = {grid['T'] - grid['tau']} > 0")
    data["grid"] = grid
    lv = data.get("levy") or {}
    if not isinstance(lv, dict):
        raise ConfigInvalid("levy", "expected a mapping")
    atoms = lv.get("atoms", [])
    if not isinstance(atoms, list):
        raise ConfigInvalid("levy.atoms", "expected a list of {z, rate}")
    data["levy"] = {"atoms": [{"z": _num(a.get("z"), f"levy.atoms[{k}].z"),
                               "rate": _num(a.get("rate"), f"levy.atoms[{k}].rate")}
                              for k, a in enumerate(atoms) if isinstance(a, dict)] if atoms else [],
                    "delta": str(lv.get("delta", "min1abs"))}
    if len(data["levy"]["atoms"]) != len(atoms):
        raise ConfigInvalid("levy.atoms", "every atom must be a mapping {z, rate}")
    budget = dict(BUDGET_DEFAULTS[exp])
    b = data.get("budget") or {}
    if not isinstance(b, dict):
        raise ConfigInvalid("budget", "expected a mapping")
    for k, v in b.items():
        budget[k] = _int(v, f"budget.{k}", 1)
    data["budget"] = budget
    data.setdefault("coefficients", {})
    data.setdefault("init", {"constant": 0.0})
    data.setdefault("phi", {"type": "present"})
    data.setdefault("psi", {"type": "zero"})
    data.setdefault("params", {})
    if exp == "control-verify":
        data.setdefault("control", {"type": "lq"})
    cfg_out = data.pop("out", None)
    out = out or cfg_out or "sfdde-out"
    if not isinstance(out, str):
        raise ConfigInvalid("out", "expected a directory path")
    return RunConfig(data, out)


def load_config(path, seed: int | None = None, out: str | None = None) -> RunConfig:
    try:
        with open(path) as fh:
            raw = yaml.safe_load(fh)
    except OSError as exc:
        raise ConfigInvalid("config", f"cannot read {path}: {exc.strerror}") from exc
    except yaml.YAMLError as exc:
        raise ConfigInvalid("config", f"not valid YAML: {exc}") from exc
    return resolve(raw, seed, out)
