"""Command-line interface: run, convergence, verify, project-rates, export-mesh."""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

from .config import ConfigError, ExperimentConfig, load_config, parse_config
from .mesh import build_structured_triangulation, mesh_statistics
from .scheme import SolverError


def _load(args) -> ExperimentConfig:
    cfg = load_config(args.config) if args.config else parse_config("")
    if args.set:
        overrides = "\n".join(args.set)
        merged = (Path(args.config).read_text() if args.config else "")
        cfg = parse_config(merged + "\n" + overrides)
    return cfg


def _add_config_args(p):
    p.add_argument("--config", help="path to a key=value config file")
    p.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE",
                   help="override a config entry (repeatable)")


def cmd_run(args) -> int:
    from .harness import run_experiment

    cfg = _load(args)
    outdir = args.outdir or cfg.output_dir
    artifacts = run_experiment(cfg, outdir)
    rows = artifacts.rows
    last = rows[-1]
    print(f"completed {last['k']} steps to t={last['t']:.6g}; "
          f"energy {last['total_energy']:.12g}")
    if artifacts.csv_path:
        print(f"diagnostics: {artifacts.csv_path}")
    for path in artifacts.vtk_paths:
        print(f"snapshot: {path}")
    return 0


def cmd_convergence(args) -> int:
    from .harness import convergence_study

    cfg = _load(args)
    table = convergence_study(cfg, levels=args.levels)
    print(table.to_text())
    return 0


def cmd_verify(args) -> int:
    from .verify import run_verification

    sizes = tuple(int(s) for s in args.sizes.split(","))
    report = run_verification(seed=args.seed, sizes=sizes,
                              corrupt_flux_sign=args.corrupt_flux_sign)
    print(report.summary())
    if args.json:
        Path(args.json).write_text(report.to_json() + "\n")
        print(f"report: {args.json}")
    return 0 if report.passed else 1


def cmd_project_rates(args) -> int:
    from .verify import suite_projection_rates

    levels = tuple(int(s) for s in args.levels.split(","))
    result = suite_projection_rates(levels)
    print(f"cell-mean projection EOC:   {result.details['eoc_cell']}")
    print(f"face-mean projection EOC:   {result.details['eoc_cr']}")
    print(f"projected gradient EOC:     {result.details['eoc_cr_gradient']}")
    print("PASS" if result.passed else "FAIL")
    return 0 if result.passed else 1


def cmd_export_mesh(args) -> int:
    from .vtkio import write_vtk_mesh

    cfg = _load(args)
    mesh = cfg.mesh()
    stats = mesh_statistics(mesh)
    path = write_vtk_mesh(mesh, args.output)
    print(f"mesh {cfg.nx}x{cfg.ny}: h={stats.h:.6g}, "
          f"{stats.counts['elements']} elements -> {path}")
    return 0


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="fefv",
        description="Mixed FE-FV solver for compressible flow with "
                    "potential temperature transport")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="run one experiment")
    _add_config_args(p)
    p.add_argument("--outdir", help="output directory (default: config)")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("convergence", help="refinement/consistency study")
    _add_config_args(p)
    p.add_argument("--levels", type=int, default=3)
    p.set_defaults(func=cmd_convergence)

    p = sub.add_parser("verify", help="run the property suites")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--sizes", default="4,8,16",
                   help="comma-separated mesh sizes")
    p.add_argument("--json", help="write the machine-readable report here")
    p.add_argument("--corrupt-flux-sign", action="store_true",
                   help="negative control: break flux antisymmetry")
    p.set_defaults(func=cmd_verify)

    p = sub.add_parser("project-rates", help="projection convergence orders")
    p.add_argument("--levels", default="4,8,16,32")
    p.set_defaults(func=cmd_project_rates)

    p = sub.add_parser("export-mesh", help="write the mesh as legacy VTK")
    _add_config_args(p)
    p.add_argument("--output", default="mesh.vtk")
    p.set_defaults(func=cmd_export_mesh)

    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return 2
    except SolverError as exc:
        print(f"solver failure: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    raise SystemExit(main())
