"""Command-line entry point: ``sfdde --config run.yaml [--seed N] [--out DIR]``.

Exit codes: 0 ok, 2 config error, 3 numerical failure, 4 inconclusive or
failed statistical test.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import math
import os
import sys
import time

RESULTS_SCHEMA = "sfdde-results/1"
_THREAD_VARS = ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS", "NUMEXPR_NUM_THREADS")


def _clean(obj):
    """JSON-safe copy: numpy scalars to Python, non-finite floats to null."""
    if isinstance(obj, dict):
        return {str(k): _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if hasattr(obj, "tolist") and not isinstance(obj, (str, bytes)):
        return _clean(obj.tolist())
    if isinstance(obj, float):
        return obj if math.isfinite(obj) else None
    return obj


def dumps(obj) -> str:
    return json.dumps(_clean(obj), sort_keys=True, indent=2, allow_nan=False) + "\n"


def _write_csv(path, header, rows):
    import csv

    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for r in rows:
            w.writerow([repr(v) if isinstance(v, float) else v for v in r])


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="sfdde", description="Delay-equation Monte Carlo experiments.")
    p.add_argument("--config", required=True, help="YAML run config")
    p.add_argument("--seed", type=int, default=None, help="override the config seed")
    p.add_argument("--out", default=None, help="output directory (default from config or ./sfdde-out)")
    p.add_argument("--threads", type=int, default=None, help="BLAS/OpenMP thread count")
    p.add_argument("--quiet", action="store_true", help="suppress the summary line")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if args.threads is not None:
        if args.threads < 1:
            print("error: --threads must be >= 1", file=sys.stderr)
            return 2
        for var in _THREAD_VARS:
            os.environ[var] = str(args.threads)
    # numpy is imported only after the thread variables are set
    from . import __version__
    from .config import load_config
    from .errors import SfddeError
    from .runner import CONFIG_ERROR, NUMERICAL, run

    config_errors = ("cli.", "levy_driver.grid_error", "levy_driver.malformed_model",
                     "levy_driver.delta_bound_violated", "segment_space.")
    t0 = time.perf_counter()
    try:
        cfg = load_config(args.config, args.seed, args.out)
        results, tables, status = run(cfg)
    except SfddeError as exc:
        code = CONFIG_ERROR if exc.code.startswith(config_errors) else NUMERICAL
        print(f"error [{exc.code}]: {exc}", file=sys.stderr)
        return code
    wall = time.perf_counter() - t0

    out = cfg.out
    os.makedirs(out, exist_ok=True)
    doc = {"schema": RESULTS_SCHEMA, "experiment": cfg.experiment, "seed": cfg.seed,
           "config": cfg.data, "results": results, "status": status}
    text = dumps(doc)
    with open(os.path.join(out, "results.json"), "w") as fh:
        fh.write(text)
    for name, (header, rows) in sorted(tables.items()):
        _write_csv(os.path.join(out, f"{name}.csv"), header, rows)
    import numpy

    manifest = {
        "config_sha256": cfg.hash(),
        "results_sha256": hashlib.sha256(text.encode()).hexdigest(),
        "seed": cfg.seed,
        "version": __version__,
        "numpy": numpy.__version__,
        "python": sys.version.split()[0],
        "wall_time_s": round(wall, 6),
        "files": ["results.json"] + [f"{n}.csv" for n in sorted(tables)],
    }
    with open(os.path.join(out, "manifest.json"), "w") as fh:
        fh.write(dumps(manifest))
    if not args.quiet:
        print(f"{cfg.experiment}: status {status}, results in {out}/results.json ({wall:.2f} s)")
    return status


if __name__ == "__main__":
    sys.exit(main())
