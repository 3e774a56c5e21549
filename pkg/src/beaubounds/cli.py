"""Command-line entry point: ``beaubounds <command> ...``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .arithmetic import ContinuedFraction, convergents
from .circlemap import MapSpec, build
from .distortion import (
    DiffeoBlock,
    CriticalStep,
    admissible_steps,
    c1_bound_constant,
    crd_return_map_max,
    decompose,
    theorem_ceiling,
    verify_negative_schwarzian,
)
from .experiments import (
    PARTITION_MARGIN,
    ExperimentConfig,
    prepare,
    run_beau,
    run_crd_universal,
    run_qs_config,
    run_report,
    run_scaling,
)
from .numerics import PrecisionContext, PrecisionError, auto_bits, format_scalar
from .partition import ReturnStructure, TilingViolation, build_partition
from .report import Chart, Check, ExperimentReport, emit_report, render_partition_strip
from .rotation import TuningError, default_base, tune

log = logging.getLogger("beaubounds")


def _levels(text: str) -> list[int]:
    """``8``, ``2..12`` or ``4,6,8``."""
    if ".." in text:
        lo, hi = text.split("..")
        return list(range(int(lo), int(hi) + 1))
    return [int(s) for s in text.split(",") if s.strip()]


def _map_options(p: argparse.ArgumentParser, levels: bool = True) -> None:
    p.add_argument("--spec", required=True, type=Path, help="map spec (TOML)")
    p.add_argument("--target", default="golden", help="golden, silver or cf:[a0,a1,...]")
    p.add_argument("--bits", type=int, default=0, help="precision (default: raised with the deepest level)")
    p.add_argument("--out", type=Path, default=Path("out"), help="output directory")
    if levels:
        p.add_argument("--levels", type=_levels, default=_levels("2..10"), help="e.g. 2..10 or 4,8")


def _tuned(args, deepest: int):
    spec = MapSpec.load(args.spec)
    target = ContinuedFraction.parse(args.target)
    return prepare(args.spec.stem, spec, target, deepest + PARTITION_MARGIN, args.bits or None)


def cmd_tune(args) -> int:
    spec = MapSpec.load(args.spec)
    cf = ContinuedFraction.parse(args.target, max(64, args.depth + 4))
    table = convergents(cf)
    ctx = PrecisionContext(args.bits or auto_bits(args.depth))
    res = tune(spec, table, args.depth, ctx, resolution_bits=args.resolution, lookahead=args.lookahead)
    out = {
        "target": cf.label(),
        "depth": args.depth,
        "bits": ctx.bits,
        "a_star": format_scalar(res.a_star),
        "verified_depth": res.verified_depth,
        "bracket_width": format_scalar(res.bracket_width),
        "bracket": [format_scalar(x) for x in res.bracket],
        "steps": res.steps,
    }
    text = json.dumps(out, indent=2)
    if args.json:
        args.json.write_text(text + "\n")
    print(text)
    return 0


def cmd_partition(args) -> int:
    spec = MapSpec.load(args.spec)
    cf = ContinuedFraction.parse(args.target, 64)
    n = args.level
    if args.no_tune:
        table = convergents(cf)
        fmap = build(spec, PrecisionContext(args.bits or auto_bits(n + 2)))
        returns = ReturnStructure.compute(fmap, default_base(fmap), table, 1)
    else:
        returns = _tuned(args, n).returns[0]
    p = build_partition(returns, n)
    report = ExperimentReport("partition", meta={"level": n, "target": cf.label(), "bits": returns.ctx.bits})
    t = report.table("atoms", ["index", "generation", "left", "length"])
    for s, a in enumerate(p.atoms):
        t.add(s, a.generation, a.left, a.length)
    report.maxima["B_n"] = p.adjacent_ratio_max()
    args.out.mkdir(parents=True, exist_ok=True)
    emit_report(report, args.out)
    render_partition_strip(p, args.out / "partition.svg")
    print(f"P_{n}: {len(p)} atoms -> {args.out / 'atoms.csv'}")
    return 0


def cmd_crd(args) -> int:
    tm = _tuned(args, max(args.levels))
    spec = tm.fmap.spec
    ceiling = theorem_ceiling(spec.n_critical, spec.max_order) if spec.n_critical else 1.0
    report = ExperimentReport("crd", meta={"target": args.target, "bits": tm.ctx.bits})
    t = report.table("crd", ["map_id", "n", "crd_max", "ceiling", "max_k", "capped_atoms"])
    for n in args.levels:
        r = crd_return_map_max(tm.returns[0], n, partition=tm.partition(n))
        t.add(tm.map_id, n, r.value, ceiling, r.max_admissible, r.capped_atoms)
        report.checks.append(Check(f"ceiling n={n}", float(r.value) <= ceiling,
                                   f"{float(r.value):.6g} <= {ceiling:.6g}"))
    report.charts.append(Chart("crd", "crd", "n", ("crd_max",), "map_id", "Largest CrD of return branches"))
    return _finish(report, args.out)


def cmd_schwarz(args) -> int:
    tm = _tuned(args, max(args.levels))
    report = ExperimentReport("schwarz", meta={"target": args.target, "bits": tm.ctx.bits, "grid": args.grid})
    t = report.table("schwarz", ["n", "all_negative", "worst", "variant_negative", "variant_worst"])
    for n in args.levels:
        r = verify_negative_schwarzian(tm.returns[0], n, args.grid)
        t.add(n, r.all_negative, r.worst, r.variant_all_negative, r.variant_worst)
        if r.zero_family:
            report.meta["zero_schwarzian_family"] = True
    negative = [n for n, ok in zip(args.levels, t.column("all_negative")) if ok]
    report.maxima["first_negative_level"] = min(negative) if negative else None
    return _finish(report, args.out)


def cmd_c1(args) -> int:
    tm = _tuned(args, max(args.levels))
    report = ExperimentReport("c1", meta={"target": args.target, "bits": tm.ctx.bits, "grid": args.grid})
    t = report.table("c1", ["n", "K_n", "return_c1"])
    for n in args.levels:
        r = c1_bound_constant(tm.returns[0], n, args.grid)
        t.add(n, r.K, r.return_map_c1)
    report.maxima["K_max"] = max(t.column("K_n"))
    report.charts.append(Chart("c1", "c1", "n", ("K_n", "return_c1"), None, "C^1 bound constant"))
    return _finish(report, args.out)


def cmd_decompose(args) -> int:
    tm = _tuned(args, args.level)
    p = tm.partition(args.level)
    ks = admissible_steps(p)
    atom = args.atom if args.atom is not None else max(range(len(ks)), key=lambda s: ks[s])
    k = args.k if args.k is not None else ks[atom]
    if k > ks[atom]:
        raise SystemExit(f"k = {k} exceeds the admissible {ks[atom]} for atom {atom}")
    tr = decompose(tm.returns[0], args.level, atom, k, args.epsilon, args.coarse)
    report = ExperimentReport("decompose", meta={"level": args.level, "atom": atom, "k": k})
    t = report.table("decompose", ["start", "kind", "length", "critical_point", "distortion"])
    for b in tr.blocks:
        t.add(b.start, type(b).__name__, b.length,
              b.critical_point_index if isinstance(b, CriticalStep) else None,
              b.measured_distortion if isinstance(b, DiffeoBlock) else None)
    n_crit = tm.fmap.n_critical
    report.checks.append(Check("diffeo blocks", tr.diffeo_count <= 3 * n_crit + 1,
                               f"{tr.diffeo_count} <= {3 * n_crit + 1}"))
    report.checks.append(Check("critical steps", tr.critical_count <= 3 * n_crit,
                               f"{tr.critical_count} <= {3 * n_crit}"))
    report.checks.append(Check("diffeo distortion", tr.distortion_ok, f"epsilon = {args.epsilon}"))
    return _finish(report, args.out)


def _config(args) -> ExperimentConfig:
    cfg = ExperimentConfig.load(args.config)
    if args.out is not None:
        cfg = ExperimentConfig(cfg.maps, cfg.target, cfg.levels, cfg.schwarzian_grid,
                               cfg.distortion_grid, cfg.bits, args.out, cfg.qs_pairs)
    return cfg


def cmd_beau(args) -> int:
    cfg = _config(args)
    return _finish(run_beau(cfg).report, cfg.output)


def cmd_crduni(args) -> int:
    cfg = _config(args)
    return _finish(run_crd_universal(cfg).report, cfg.output)


def cmd_scaling(args) -> int:
    cfg = _config(args)
    return _finish(run_scaling(cfg).report, cfg.output)


def cmd_qs(args) -> int:
    cfg = _config(args)
    if not cfg.qs_pairs:
        raise SystemExit("config has no [[qs]] pairs")
    return _finish(run_qs_config(cfg).report, cfg.output)


def cmd_report(args) -> int:
    cfg = _config(args)
    return _finish(run_report(cfg), cfg.output)


def _finish(report: ExperimentReport, out: Path) -> int:
    files = emit_report(report, out)
    for c in report.checks:
        print(f"{'PASS' if c.passed else 'FAIL'}  {c.name}  {c.detail}")
    print(f"wrote {len(files)} files to {out}")
    return 0 if report.passed else 1


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="beaubounds", description=__doc__)
    parser.add_argument("-v", "--verbose", action="count", default=0)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("tune", help="tune the offset of a map to a target rotation number")
    p.add_argument("--spec", required=True, type=Path)
    p.add_argument("--target", default="golden")
    p.add_argument("--depth", type=int, required=True)
    p.add_argument("--bits", type=int, default=0)
    p.add_argument("--resolution", type=int, default=None, help="bisect until the bracket is 2^-R wide")
    p.add_argument("--lookahead", type=int, default=2)
    p.add_argument("--json", type=Path, default=None, help="also write the result here")
    p.set_defaults(func=cmd_tune)

    p = sub.add_parser("partition", help="atoms of P_n as CSV plus a strip chart")
    _map_options(p, levels=False)
    p.add_argument("--level", type=int, required=True)
    p.add_argument("--no-tune", action="store_true", help="use the offset in the map file as given")
    p.set_defaults(func=cmd_partition)

    p = sub.add_parser("crd", help="largest CrD of return branches per level")
    _map_options(p)
    p.set_defaults(func=cmd_crd)

    p = sub.add_parser("schwarz", help="sign of the Schwarzian of return maps")
    _map_options(p)
    p.add_argument("--grid", type=int, default=64)
    p.set_defaults(func=cmd_schwarz)

    p = sub.add_parser("c1", help="C^1 bound constants of return maps")
    _map_options(p)
    p.add_argument("--grid", type=int, default=32)
    p.set_defaults(func=cmd_c1)

    p = sub.add_parser("decompose", help="block decomposition of one return branch")
    _map_options(p, levels=False)
    p.add_argument("--level", type=int, required=True)
    p.add_argument("--atom", type=int, default=None, help="atom position (default: longest branch)")
    p.add_argument("--k", type=int, default=None)
    p.add_argument("--epsilon", type=float, default=0.5)
    p.add_argument("--coarse", type=int, default=None, help="coarse level (default: level // 2)")
    p.set_defaults(func=cmd_decompose)

    for name, func, text in (
        ("beau", cmd_beau, "bounds and their spread across maps"),
        ("crduni", cmd_crduni, "return-branch CrD against the explicit ceiling"),
        ("scaling", cmd_scaling, "scaling ratios at each critical point"),
        ("qs", cmd_qs, "quasi-symmetric distortion of conjugacies"),
        ("report", cmd_report, "all experiments of a config"),
    ):
        p = sub.add_parser(name, help=text)
        p.add_argument("--config", required=True, type=Path)
        p.add_argument("--out", type=Path, default=None, help="overrides the config's output directory")
        p.set_defaults(func=func)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2),
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (TuningError, PrecisionError, TilingViolation, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
