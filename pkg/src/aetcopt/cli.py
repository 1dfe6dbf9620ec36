"""Command-line front end.

Subcommands::

    aetcopt run --spec experiment.json --out results/ [--seed N] [--workers N] [--force]
    aetcopt alloc --spec alloc.json
    aetcopt loss --spec loss.json [--out DIR]
    aetcopt landscape --spec landscape.json [--out DIR]
    aetcopt fixtures [--out DIR]

``AETCOPT_SEED`` and ``AETCOPT_WORKERS`` override the spec's seed and the
worker count; explicit flags override both. Exit codes: 0 success, 1
runtime error, 2 usage error (bad flags, malformed spec, refusing to
overwrite).
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import platform
import sys
from datetime import datetime, timezone
from importlib import metadata
from pathlib import Path

import numpy as np

from .allocation import GroupFamily, round_allocation, solve_allocation
from .core import AetcError, MomentSet, format_subset, parse_subset
from .harness import ExperimentSpec, loss_sweep, run_experiment, subset_landscape
from .problems import bundled_fixtures, ensemble_from_dict, load_fixture, save_fixture

EXIT_OK, EXIT_RUNTIME, EXIT_USAGE = 0, 1, 2
SPEC_VERSION = 1


class UsageError(Exception):
    pass


def _version() -> str:
    try:
        return metadata.version("artifact")
    except metadata.PackageNotFoundError:
        return "unknown"


def _read_spec(path: str | None) -> tuple[dict, bytes]:
    if path is None:
        raise UsageError("--spec is required")
    p = Path(path)
    if not p.is_file():
        raise UsageError(f"spec file not found: {path}")
    raw = p.read_bytes()
    try:
        d = json.loads(raw)
    except json.JSONDecodeError as err:
        raise UsageError(f"{path}: invalid JSON ({err})") from err
    if not isinstance(d, dict):
        raise UsageError(f"{path}: spec must be a JSON object")
    return d, raw


def _check_keys(d: dict, required: set, optional: set, what: str) -> None:
    if d.get("version") != SPEC_VERSION:
        raise UsageError(f"{what} spec version must be {SPEC_VERSION}, got {d.get('version')!r}")
    keys = set(d) - {"version"}
    extra = keys - required - optional
    if extra:
        raise UsageError(f"unknown {what} spec keys {sorted(extra)}")
    missing = required - keys
    if missing:
        raise UsageError(f"{what} spec is missing {sorted(missing)}")


def _prepare_out(out: str | None, force: bool, names) -> Path | None:
    if out is None:
        return None
    d = Path(out)
    clash = [n for n in names if (d / n).exists()]
    if clash and not force:
        raise UsageError(f"{d} already holds {', '.join(clash)}; pass --force to overwrite")
    d.mkdir(parents=True, exist_ok=True)
    return d


def _env_int(name: str) -> int | None:
    v = os.environ.get(name)
    if v is None or v == "":
        return None
    try:
        return int(v)
    except ValueError as err:
        raise UsageError(f"{name} must be an integer, got {v!r}") from err


def _ensemble(ref, base: Path):
    if isinstance(ref, dict):
        return ensemble_from_dict(ref)
    p = Path(ref)
    if not p.is_absolute() and (base / p).exists():
        p = base / p
    return load_fixture(p)


def cmd_run(args) -> int:
    d, raw = _read_spec(args.spec)
    base = Path(args.spec).parent
    if isinstance(d.get("ensemble"), str):
        ref = Path(d["ensemble"])
        if not ref.is_absolute() and (base / ref).exists():
            d = dict(d, ensemble=str(base / ref))
    try:
        spec = ExperimentSpec.from_dict(d)
    except (TypeError, ValueError) as err:
        raise UsageError(f"invalid experiment spec: {err}") from err
    seed = args.seed if args.seed is not None else _env_int("AETCOPT_SEED")
    if seed is not None:
        spec.seed = int(seed)
    workers = args.workers if args.workers is not None else (_env_int("AETCOPT_WORKERS") or 1)
    if workers < 1:
        raise UsageError("--workers must be at least 1")
    if args.out is None:
        raise UsageError("run needs --out DIR")
    out = _prepare_out(args.out, args.force, ("results.csv", "summary.json", "manifest.json"))
    result = run_experiment(spec, workers=workers)
    (out / "results.csv").write_text(result.to_csv())
    (out / "summary.json").write_text(result.to_json())
    manifest = {
        "spec_sha256": hashlib.sha256(raw).hexdigest(),
        "spec_path": str(args.spec),
        "seed": spec.seed,
        "workers": workers,
        "library": "aetcopt",
        "version": _version(),
        "numpy": np.__version__,
        "python": platform.python_version(),
        "created": datetime.now(timezone.utc).isoformat(timespec="seconds"),
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2) + "\n")
    failed = sum(c.failed for c in result.cells)
    print(f"wrote {out / 'results.csv'} ({len(result.cells)} cells, {failed} failed trials)")
    return EXIT_OK


def cmd_alloc(args) -> int:
    d, _ = _read_spec(args.spec)
    _check_keys(d, {"covariance", "costs", "budget", "sketch"}, {"indices", "groups", "integer"}, "alloc")
    cov = np.asarray(d["covariance"], dtype=float)
    k = cov.shape[0]
    indices = d.get("indices", list(range(k)))
    try:
        mom = MomentSet(indices, np.zeros(k), cov, d["costs"])
        groups = d.get("groups")
        family = (
            GroupFamily.all_subsets(mom.indices)
            if groups is None
            else GroupFamily([parse_subset(g) if isinstance(g, str) else g for g in groups], mom.indices)
        )
    except (ValueError, AetcError) as err:
        raise UsageError(f"invalid alloc spec: {err}") from err
    budget = float(d["budget"])
    sol = solve_allocation(family, mom, d["sketch"], None, budget)
    rounded = round_allocation(sol.allocation, mom, budget, family.universe) if d.get("integer", True) else None
    print("group,continuous,rounded")
    for T in family.groups:
        r = "" if rounded is None else str(int(rounded[T]))
        print(f"\"{format_subset(T)}\",{sol.allocation[T]!r},{r}")
    print(f"objective,{sol.objective!r}")
    print(f"kkt_residual,{sol.kkt_residual!r}")
    return EXIT_OK


def cmd_loss(args) -> int:
    d, _ = _read_spec(args.spec)
    _check_keys(d, {"ensemble", "subset", "budget", "q_grid"}, {"seed", "alpha_base"}, "loss")
    ens = _ensemble(d["ensemble"], Path(args.spec).parent)
    S = parse_subset(d["subset"]) if isinstance(d["subset"], str) else tuple(d["subset"])
    seed = args.seed if args.seed is not None else _env_int("AETCOPT_SEED")
    table = loss_sweep(ens, S, float(d["budget"]), d["q_grid"], d.get("seed", 0) if seed is None else seed,
                       alpha_base=d.get("alpha_base"))
    _emit(table.to_csv(), args, "loss.csv")
    return EXIT_OK


def cmd_landscape(args) -> int:
    d, _ = _read_spec(args.spec)
    _check_keys(d, {"ensemble", "budget"}, {"max_subset_size", "pool", "uniform"}, "landscape")
    ens = _ensemble(d["ensemble"], Path(args.spec).parent)
    pool = d.get("pool")
    if pool is not None:
        pool = [parse_subset(S) if isinstance(S, str) else S for S in pool]
    table = subset_landscape(ens, float(d["budget"]), d.get("max_subset_size"), pool, bool(d.get("uniform", False)))
    _emit(table.to_csv(), args, "landscape.csv")
    return EXIT_OK


def cmd_fixtures(args) -> int:
    names = bundled_fixtures()
    if args.out is None:
        for name in names:
            print(name)
        return EXIT_OK
    out = _prepare_out(args.out, args.force, [f"{n}.json" for n in names])
    for name in names:
        save_fixture(load_fixture(name), out / f"{name}.json")
        print(out / f"{name}.json")
    return EXIT_OK


def _emit(text: str, args, filename: str) -> None:
    if args.out is None:
        sys.stdout.write(text)
        return
    out = _prepare_out(args.out, args.force, (filename,))
    (out / filename).write_text(text)
    print(out / filename)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="aetcopt", description="Multi-fidelity mean estimation experiments.")
    parser.add_argument("--version", action="version", version=f"aetcopt {_version()}")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, fn, help_ in (
        ("run", cmd_run, "run a repeated-trial experiment"),
        ("alloc", cmd_alloc, "solve one sample-allocation problem"),
        ("loss", cmd_loss, "tabulate oracle and estimated loss over exploration counts"),
        ("landscape", cmd_landscape, "tabulate the oracle optimal loss of every subset"),
        ("fixtures", cmd_fixtures, "list or export bundled ensemble fixtures"),
    ):
        p = sub.add_parser(name, help=help_)
        p.add_argument("--spec", metavar="PATH")
        p.add_argument("--out", metavar="DIR")
        p.add_argument("--seed", type=int, metavar="N")
        p.add_argument("--workers", type=int, metavar="N")
        p.add_argument("--force", action="store_true", help="overwrite existing output files")
        p.set_defaults(func=fn)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return args.func(args)
    except UsageError as err:
        print(f"aetcopt: usage error: {err}", file=sys.stderr)
        return EXIT_USAGE
    except AetcError as err:
        print(f"aetcopt: error: {type(err).__name__}: {err}", file=sys.stderr)
        return EXIT_RUNTIME
    except (ValueError, OSError, np.linalg.LinAlgError) as err:
        print(f"aetcopt: error: {type(err).__name__}: {err}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
