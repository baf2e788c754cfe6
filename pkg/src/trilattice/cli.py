"""Command-line driver: optimize, triangulate, dehomogenize, evaluate, render.

Every stage reads its inputs from and writes its outputs to one artifact
directory (``--out``)::

    problem.txt      validation problem (fine grid)
    checkpoint.txt   optimized design on the simulation grid
    mesh.txt         field-aligned triangulation
    lattice.txt      de-homogenized lattice
    report.json      evaluation report (plus report.txt table)
    *.svg            density, streamline and lattice drawings
    timings.json     wall-clock times of the stages

Exit codes: 0 success, 2 invalid input, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import time

EXIT_OK, EXIT_INVALID, EXIT_NUMERICAL = 0, 2, 3
STAGES = ("optimize", "triangulate", "dehomog", "evaluate", "render")

log = logging.getLogger("trilattice")


class ValidationError(ValueError):
    """User input outside the documented ranges."""


class Artifacts:
    """Paths of the files in an output directory."""

    def __init__(self, root: str):
        self.root = root

    def __getattr__(self, name: str) -> str:
        names = {
            "problem": "problem.txt",
            "checkpoint": "checkpoint.txt",
            "reference": "reference_checkpoint.txt",
            "mesh": "mesh.txt",
            "lattice": "lattice.txt",
            "report": "report.json",
            "timings": "timings.json",
            "density_svg": "density.svg",
            "streamlines_svg": "streamlines.svg",
            "lattice_svg": "lattice.svg",
        }
        if name not in names:
            raise AttributeError(name)
        return os.path.join(self.root, names[name])

    def require(self, *names: str) -> None:
        for n in names:
            if not os.path.exists(getattr(self, n)):
                raise ValidationError(f"missing artifact {getattr(self, n)}; run the earlier stage first")

    def record_time(self, key: str, seconds: float) -> None:
        data = self.timings_dict()
        data[key] = seconds
        with open(self.timings, "w", encoding="ascii") as fh:
            json.dump(data, fh, indent=2, sort_keys=True)

    def timings_dict(self) -> dict:
        if os.path.exists(self.timings):
            with open(self.timings, encoding="ascii") as fh:
                return json.load(fh)
        return {}


# --------------------------------------------------------------------------
# argument checks


def _weight(text: str) -> float:
    w = float(text)
    if not 0.0 < w <= 1.0:
        raise argparse.ArgumentTypeError(f"--weight must lie in the range (0, 1], got {text}")
    return w


def _positive_int(text: str) -> int:
    v = int(text)
    if v < 1:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {text}")
    return v


def _non_negative_int(text: str) -> int:
    v = int(text)
    if v < 0:
        raise argparse.ArgumentTypeError(f"expected a non-negative integer, got {text}")
    return v


def _positive_float(text: str) -> float:
    v = float(text)
    if not v > 0:
        raise argparse.ArgumentTypeError(f"expected a positive number, got {text}")
    return v


def _fraction(text: str) -> float:
    v = float(text)
    if not 0.0 <= v < 1.0:
        raise argparse.ArgumentTypeError(f"expected a value in [0, 1), got {text}")
    return v


# --------------------------------------------------------------------------
# stages


def load_problem_arg(spec: str):
    """``builtin:<name>`` or a problem file path."""
    from . import io, problems

    if spec.startswith("builtin:"):
        return problems.builtin(spec.split(":", 1)[1])
    if not os.path.exists(spec):
        raise ValidationError(f"problem file {spec!r} not found")
    return io.load_problem(spec)


def _fine_problem(args, art: Artifacts):
    from . import io

    if getattr(args, "problem", None):
        return load_problem_arg(args.problem)
    art.require("problem")
    return io.load_problem(art.problem)


def stage_optimize(args, art: Artifacts) -> None:
    from . import io
    from .fea import restrict_problem
    from .optimizer import OptimizationSettings, final_compliance, run_optimization

    fine = _fine_problem(args, art)
    io.save_problem(art.problem, fine)
    coarse = restrict_problem(fine)
    settings = OptimizationSettings(
        init=args.init,
        weight=args.weight,
        max_iter=args.iters,
        filter_radius=args.filter_radius,
        free=args.free_orientations,
        solver=args.solver,
        dump_dir=art.root,
    )
    if settings.init == "uniform" and settings.weight < 1.0 and not settings.free:
        raise ValidationError("uniform initialization has zero regularization; use --weight 1")
    t0 = time.perf_counter()
    design = run_optimization(coarse, settings)
    elapsed = time.perf_counter() - t0
    target = art.reference if args.free_orientations else art.checkpoint
    io.save_checkpoint(target, design)
    art.record_time("reference_optimize" if args.free_orientations else "optimize", elapsed)
    c = final_compliance(coarse, design, solver=args.solver)
    print(f"optimize: {design.iteration} iterations, C = {c:.6g}, V = {design.density.mean():.4f} -> {target}")


def stage_triangulate(args, art: Artifacts) -> None:
    from . import io, problems
    from .meshing import domain_polygon, triangulate

    art.require("checkpoint")
    fine = _fine_problem(args, art)
    design = io.load_checkpoint(art.checkpoint)
    target, h = args.target_lattices, args.edge_length
    if target is None and h is None:
        target = problems.default_lattice_count(fine)
    domain = domain_polygon(fine.active, fine.cell_size)
    mesh = triangulate(
        design, domain, target_lattices=target, edge_length=h,
        smooth_iters=args.smooth_iters, seed=args.seed,
    )
    io.save_mesh(art.mesh, mesh)
    print(
        f"triangulate: {mesh.n_triangles} triangles (target {target}), h = {mesh.h:.4g}, "
        f"min angle >= 40 deg in {100 * mesh.quality():.1f}% -> {art.mesh}"
    )


def stage_dehomog(args, art: Artifacts) -> None:
    from . import io
    from .dehomog import dehomogenize

    art.require("checkpoint", "mesh")
    design = io.load_checkpoint(art.checkpoint)
    mesh = io.load_mesh(art.mesh)
    kw = {} if args.boundary_weight is None else {"boundary_weight": args.boundary_weight}
    lattice = dehomogenize(design, mesh, drop_ratio=args.drop_ratio, fill=not args.no_fill, **kw)
    io.save_lattice(art.lattice, lattice)
    art.record_time("dehomog", lattice.meta["elapsed"])
    print(f"dehomog: V = {lattice.volume_fraction:.4f}, {len(lattice.patches)} gap patches -> {art.lattice}")


def stage_evaluate(args, art: Artifacts) -> None:
    from . import io
    from .validate import evaluate, project_specs
    from .fea import assemble_and_solve

    art.require("checkpoint", "lattice")
    fine = _fine_problem(args, art)
    design = io.load_checkpoint(art.checkpoint)
    lattice = io.load_lattice(art.lattice)
    report = evaluate(lattice, design, fine, solver=args.solver)
    times = art.timings_dict()
    report.t0 = times.get("optimize")
    report.t = times.get("dehomog")
    if os.path.exists(art.reference):
        ref = io.load_checkpoint(art.reference)
        report.C_star = assemble_and_solve(fine, project_specs(ref, fine), solver=args.solver).total_compliance
    io.save_report(art.report, report)
    print(report.table(), end="")


def stage_render(args, art: Artifacts) -> None:
    from . import io, render

    art.require("checkpoint")
    design = io.load_checkpoint(art.checkpoint)
    render.render_density(art.density_svg, design)
    render.render_streamlines(art.streamlines_svg, design)
    written = [art.density_svg, art.streamlines_svg]
    if os.path.exists(art.lattice):
        render.render_lattice(art.lattice_svg, io.load_lattice(art.lattice), design)
        written.append(art.lattice_svg)
    print("render: " + ", ".join(written))


STAGE_FUNCS = {
    "optimize": stage_optimize,
    "triangulate": stage_triangulate,
    "dehomog": stage_dehomog,
    "evaluate": stage_evaluate,
    "render": stage_render,
}


def stage_pipeline(args, art: Artifacts) -> None:
    stages = STAGES if args.stage in (None, "all") else tuple(s.strip() for s in args.stage.split(","))
    unknown = [s for s in stages if s not in STAGE_FUNCS]
    if unknown:
        raise ValidationError(f"unknown stage(s) {unknown}; choose from {', '.join(STAGES)} or all")
    if "optimize" not in stages and args.problem is None and not os.path.exists(art.problem):
        raise ValidationError("no problem given and no problem.txt in the output directory")
    for s in stages:
        t0 = time.perf_counter()
        STAGE_FUNCS[s](args, art)
        log.info("stage %s took %.1f s", s, time.perf_counter() - t0)


# --------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--out", default="trilattice_out", help="artifact directory (default: %(default)s)")
    common.add_argument("--seed", type=int, default=0, help="random seed of the position field")
    common.add_argument("--threads", type=_positive_int, default=None, help="threads for BLAS/OpenMP libraries")
    common.add_argument("--solver", choices=["auto", "direct", "cg"], default="auto")
    common.add_argument("-v", "--verbose", action="count", default=0)

    opt = argparse.ArgumentParser(add_help=False)
    opt.add_argument("--init", choices=["uniform", "stress"], default="stress")
    opt.add_argument("--weight", type=_weight, default=0.5, help="compliance weight W in (0, 1]")
    opt.add_argument("--iters", type=_non_negative_int, default=300)
    opt.add_argument("--filter-radius", type=_positive_float, default=2.0, help="cone filter radius in cells")
    opt.add_argument("--free-orientations", action="store_true", help="optimize all three angles (reference run)")

    tri = argparse.ArgumentParser(add_help=False)
    g = tri.add_mutually_exclusive_group()
    g.add_argument("--target-lattices", type=_positive_int, default=None)
    g.add_argument("--edge-length", type=_positive_float, default=None)
    tri.add_argument("--smooth-iters", type=_non_negative_int, default=0, help="orientation smoothing sweeps")

    deh = argparse.ArgumentParser(add_help=False)
    deh.add_argument("--drop-ratio", type=_fraction, default=0.02, help="drop triangles below this deposition ratio")
    deh.add_argument("--no-fill", action="store_true", help="skip gap patches at lattice joints")
    deh.add_argument(
        "--boundary-weight", type=_positive_float, default=None,
        help="width factor of bars on the domain outline (default: 2)",
    )

    prob = argparse.ArgumentParser(add_help=False)
    prob.add_argument("problem", nargs="?", default=None, help="problem file or builtin:<name>")

    p = argparse.ArgumentParser(prog="trilattice", description=__doc__.split("\n")[0])
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("optimize", parents=[common, prob, opt], help="homogenization-based optimization")
    sub.add_parser("triangulate", parents=[common, prob, tri], help="field-aligned triangulation")
    sub.add_parser("dehomog", parents=[common, deh], help="per-triangle de-homogenization")
    sub.add_parser("evaluate", parents=[common, prob], help="fine-grid evaluation report")
    sub.add_parser("render", parents=[common], help="SVG drawings")
    pl = sub.add_parser("pipeline", parents=[common, prob, opt, tri, deh], help="run several stages")
    pl.add_argument("--stage", default="all", help="comma-separated stages or 'all' (%s)" % ", ".join(STAGES))
    return p


def _set_threads(n: int | None) -> None:
    if n is None:
        return
    for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        os.environ[var] = str(n)


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # argparse reports invalid input with status 2
        return EXIT_OK if exc.code in (0, None) else EXIT_INVALID
    _set_threads(args.threads)
    logging.basicConfig(
        level=logging.WARNING - 10 * min(args.verbose, 2),
        format="%(levelname)s %(name)s: %(message)s",
    )
    from numpy.linalg import LinAlgError

    from .dehomog import DehomogenizationError
    from .fea import SolverError
    from .io import FormatError
    from .meshing import MeshingError
    from .optimizer import OptimizationError

    art = Artifacts(args.out)
    os.makedirs(args.out, exist_ok=True)
    handler = stage_pipeline if args.command == "pipeline" else STAGE_FUNCS[args.command]
    try:
        handler(args, art)
    except (ValidationError, FormatError) as exc:
        print(f"trilattice: error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except (
        SolverError, OptimizationError, MeshingError, DehomogenizationError, LinAlgError, ArithmeticError,
    ) as exc:
        print(f"trilattice: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except ValueError as exc:
        print(f"trilattice: error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    return EXIT_OK


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
