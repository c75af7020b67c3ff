"""Command line entry point: ``python -m connwave`` or ``connwave``.

Exit codes: 0 success, 1 a check or tolerance failed, 2 configuration error,
3 numerical failure.  Numerical modules are imported lazily so that
``--threads`` can set the BLAS/OpenMP thread count before numpy loads.
"""
from __future__ import annotations

import argparse
import logging
import math
import os
import sys
import time
from pathlib import Path
from typing import Optional, Sequence

EXIT_OK, EXIT_CHECK, EXIT_CONFIG, EXIT_NUMERIC = 0, 1, 2, 3
_THREAD_VARS = ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS", "NUMEXPR_NUM_THREADS")

log = logging.getLogger("connwave")


class NumericalFailure(RuntimeError):
    pass


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="connwave", description=__doc__.splitlines()[0],
                                formatter_class=argparse.RawDescriptionHelpFormatter,
                                epilog="exit codes: 0 ok, 1 check failed, 2 config error, 3 numerical failure")
    mode = p.add_mutually_exclusive_group(required=True)
    mode.add_argument("--config", metavar="FILE", help="run the experiments of a TOML scenario file")
    mode.add_argument("--check", metavar="NAME",
                      help="run a built-in acceptance check by name or number, 'all', or 'list'")
    p.add_argument("--seed", type=int, default=None, help="override the scenario seed")
    p.add_argument("--out", metavar="DIR", default=None, help="output directory")
    p.add_argument("--threads", type=int, default=None, metavar="K",
                   help="thread count hint for BLAS/OpenMP (default: library default)")
    p.add_argument("--verbose", "-v", action="count", default=0, help="more logging (repeatable)")
    return p


def _set_threads(k: Optional[int]) -> None:
    if k is None:
        return
    for var in _THREAD_VARS:
        os.environ[var] = str(k)
    try:  # numpy may already be loaded when called in-process
        from threadpoolctl import threadpool_limits
    except ImportError:
        return
    threadpool_limits(k)


def _finite(obj) -> bool:
    if isinstance(obj, dict):
        return all(_finite(v) for v in obj.values())
    if isinstance(obj, (list, tuple)):
        return all(_finite(v) for v in obj)
    if isinstance(obj, float):
        return math.isfinite(obj)
    return True


def _numeric_errors() -> tuple:
    import numpy as np

    from .bundle import BundleError
    from .gaussian_beam import BeamError
    from .geometry import GeometryError
    from .reconstruct import ReconstructionError
    from .wave_solver import SolverError

    return (SolverError, BeamError, ReconstructionError, BundleError, GeometryError, NumericalFailure,
            FloatingPointError, np.linalg.LinAlgError)


# ---------------------------------------------------------------------------
# --check
# ---------------------------------------------------------------------------


def run_checks(name: str, out: Optional[Path]) -> int:
    from . import artifacts
    from .checks import CHECKS, resolve_check, run_check

    if name == "list":
        for key, (number, _fn) in CHECKS.items():
            print(f"{number:2d}  {key}")
        return EXIT_OK
    try:
        names = list(CHECKS) if name == "all" else [resolve_check(name)]
    except KeyError as exc:
        print(f"error: {exc.args[0]}", file=sys.stderr)
        return EXIT_CONFIG
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    files, failed = [], False
    for key in names:
        log.info("running check %s", key)
        try:
            res = run_check(key)
        except _numeric_errors() as exc:
            print(f"[FAIL] {key}: numerical failure: {exc}")
            return EXIT_NUMERIC
        print(res.summary())
        failed |= not res.passed
        if out is not None:
            data = res.to_dict()
            data.pop("runtime", None)  # keep the JSON reproducible
            files.append(artifacts.write_json(out / f"check_{key}.json", data))
            for table, rows in res.tables.items():
                files.append(artifacts.write_csv(out / f"check_{key}_{table}.csv", rows))
    if out is not None:
        artifacts.write_manifest(out, files, {"checks": names})
    return EXIT_CHECK if failed else EXIT_OK


# ---------------------------------------------------------------------------
# --config
# ---------------------------------------------------------------------------


def run_config(path: str, seed: Optional[int], out: Optional[str]) -> int:
    from . import __version__, artifacts
    from .config import ConfigError, load_config
    from .experiments import RUNNERS, build_context

    try:
        cfg = load_config(path)
        seed = cfg.seed if seed is None else seed
        out_dir = Path(out or cfg.out or Path("runs") / cfg.name)
        ctx = build_context(cfg, out_dir, seed)
    except (ConfigError, artifacts.ArtifactError, KeyError) as exc:
        msg = exc.args[0] if isinstance(exc, KeyError) else str(exc)
        print(f"config error: {msg}", file=sys.stderr)
        return EXIT_CONFIG
    except _numeric_errors() as exc:
        print(f"config error: cannot build the grid: {exc}", file=sys.stderr)
        return EXIT_CONFIG

    from .wave_solver import scheme_hash

    out_dir.mkdir(parents=True, exist_ok=True)
    extra = {"scenario": cfg.name, "seed": seed, "schema_version": cfg.schema_version,
             "version": __version__, "scheme": scheme_hash()}
    if not cfg.experiments:
        artifacts.write_manifest(out_dir, [], extra)
        print(f"{cfg.name}: no experiments; wrote {out_dir / 'manifest.json'}")
        return EXIT_OK

    summaries = {}
    for exp in cfg.experiments:
        log.info("experiment %s (%s)", exp.name, exp.kind)
        t0 = time.perf_counter()
        try:
            summary = RUNNERS[exp.kind](ctx, exp.name, exp.params)
            if not _finite(artifacts._jsonable(summary)):
                raise NumericalFailure(f"non-finite value in {exp.name} results")
        except ConfigError as exc:
            print(f"config error in {exp.name}: {exc}", file=sys.stderr)
            return EXIT_CONFIG
        except _numeric_errors() as exc:
            print(f"numerical failure in {exp.name}: {exc}", file=sys.stderr)
            artifacts.write_manifest(out_dir, ctx.files, {**extra, "failed": exp.name})
            return EXIT_NUMERIC
        summaries[exp.name] = {"kind": exp.kind, **summary}
        print(f"{exp.name}: done in {time.perf_counter() - t0:.1f}s")

    lines = [ln.text() for ln in ctx.lines]
    passed = all(ln.passed for ln in ctx.lines)
    for ln in lines:
        print(ln)
    ctx.files.append(artifacts.write_json(out_dir / "summary.json",
                                          {"experiments": summaries, "tolerances": lines,
                                           "passed": passed}))
    artifacts.write_manifest(out_dir, ctx.files, extra)
    print(f"{cfg.name}: {'PASS' if passed else 'FAIL'}; outputs in {out_dir}")
    return EXIT_OK if passed else EXIT_CHECK


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    level = logging.WARNING - 10 * min(args.verbose, 2)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    if args.threads is not None and args.threads < 1:
        print("error: --threads must be positive", file=sys.stderr)
        return EXIT_CONFIG
    _set_threads(args.threads)
    if args.check is not None:
        return run_checks(args.check, Path(args.out) if args.out else None)
    return run_config(args.config, args.seed, args.out)


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
