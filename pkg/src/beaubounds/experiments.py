"""Batch experiments over tuned maps: bounds, universal CrD, scaling ratios, conjugacies."""

from __future__ import annotations

import logging
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Sequence

import gmpy2
from gmpy2 import mpfr

from .arithmetic import ContinuedFraction, ConvergentTable, convergents
from .circlemap import MapSpec, TrigProductMap, build
from .distortion import (
    c1_bound_constant,
    crd_return_map_max,
    decompose,
    admissible_steps,
    theorem_ceiling,
    verify_negative_schwarzian,
)
from .numerics import PrecisionContext, PrecisionExhausted, auto_bits
from .partition import (
    BoundsRow,
    DynamicalPartition,
    ReturnStructure,
    TilingViolation,
    bounds_row,
    build_partition,
)
from .report import Chart, Check, ExperimentReport
from .rotation import TuneResult, TuningError, default_base, tune

try:
    import tomllib
except ModuleNotFoundError:  # Python 3.10
    import tomli as tomllib

log = logging.getLogger(__name__)

# Extra levels of certified combinatorics beyond the deepest level used.
BOUNDS_MARGIN = 4
PARTITION_MARGIN = 3
LOOKAHEAD_BUDGET = 200_000
MAX_LOOKAHEAD = 8

DEFAULT_MAPS: tuple[tuple[str, MapSpec], ...] = (
    ("cubic_c0", MapSpec.of(("0", 3))),
    ("cubic_c03", MapSpec.of(("0.3", 3))),
    ("cubic_c07", MapSpec.of(("0.7", 3))),
    ("bicritical", MapSpec.of(("0", 3), ("1/2", 3))),
    ("quintic", MapSpec.of(("0", 5))),
)
DEFAULT_TARGETS = ("golden", "silver", "cf:[1,2,...]")


@dataclass(frozen=True)
class ExperimentConfig:
    maps: tuple[tuple[str, MapSpec], ...]
    target: ContinuedFraction
    levels: tuple[int, ...]
    schwarzian_grid: int = 64
    distortion_grid: int = 32
    bits: int | None = None
    output: Path = Path("out")
    qs_pairs: tuple[tuple[str, str], ...] = ()

    def __post_init__(self):
        if not self.levels or min(self.levels) < 0:
            raise ValueError("levels must be a non-empty list of non-negative integers")
        ids = [m for m, _ in self.maps]
        if len(set(ids)) != len(ids):
            raise ValueError("map ids must be unique")
        for f, g in self.qs_pairs:
            if f not in ids or g not in ids:
                raise ValueError(f"conjugacy pair ({f}, {g}) names an unknown map")

    @property
    def n_max(self) -> int:
        return max(self.levels)

    def spec(self, map_id: str) -> MapSpec:
        return dict(self.maps)[map_id]

    def same_class(self) -> bool:
        """All maps share ``N`` and the multiset of criticalities."""
        keys = {(s.n_critical, tuple(sorted(Counter(c.order for c in s.critical_points).items())))
                for _, s in self.maps}
        return len(keys) <= 1

    @classmethod
    def default(cls, target: str = "golden", levels: Sequence[int] = range(2, 13), **kw) -> "ExperimentConfig":
        return cls(DEFAULT_MAPS, ContinuedFraction.parse(target), tuple(levels), **kw)

    @classmethod
    def from_mapping(cls, data: dict, base: Path | None = None) -> "ExperimentConfig":
        maps = []
        for i, entry in enumerate(data.get("maps", [])):
            maps.append((str(entry.get("id", f"map{i}")), MapSpec.from_mapping(entry)))
        if not maps:
            raise ValueError("config lists no maps")
        levels = data.get("levels", [2, 12])
        if isinstance(levels, str):
            lo, _, hi = levels.partition("..")
            levels = range(int(lo), int(hi) + 1)
        elif isinstance(levels, dict):
            levels = range(int(levels["from"]), int(levels["to"]) + 1)
        grids = data.get("grids", {})
        bits = int(data.get("bits", 0)) or None
        out = Path(data.get("output", "out"))
        if base is not None and not out.is_absolute():
            out = base / out
        pairs = tuple((str(p["f"]), str(p["g"])) for p in data.get("qs", []))
        return cls(
            maps=tuple(maps),
            target=ContinuedFraction.parse(str(data.get("target", "golden"))),
            levels=tuple(int(n) for n in levels),
            schwarzian_grid=int(grids.get("schwarzian", 64)),
            distortion_grid=int(grids.get("distortion", 32)),
            bits=bits,
            output=out,
            qs_pairs=pairs,
        )

    @classmethod
    def from_toml(cls, text: str, base: Path | None = None) -> "ExperimentConfig":
        return cls.from_mapping(tomllib.loads(text), base)

    @classmethod
    def load(cls, path: str | Path) -> "ExperimentConfig":
        path = Path(path)
        return cls.from_toml(path.read_text(), path.parent)


# -- tuned maps ---------------------------------------------------------------


@dataclass(eq=False)
class TunedMap:
    """A map tuned to a target, with orbits based at each critical point."""

    map_id: str
    fmap: TrigProductMap
    table: ConvergentTable
    tuning: TuneResult
    depth: int
    returns: list[ReturnStructure]
    _partitions: dict[int, DynamicalPartition] = field(default_factory=dict)

    @property
    def ctx(self) -> PrecisionContext:
        return self.fmap.ctx

    def partition(self, n: int) -> DynamicalPartition:
        if n + 2 > self.depth:
            raise ValueError(f"{self.map_id}: level {n} needs combinatorics certified to depth {n + 2}, "
                             f"have {self.depth}")
        if n not in self._partitions:
            self._partitions[n] = build_partition(self.returns[0], n)
        return self._partitions[n]

    def bounds(self, n: int) -> BoundsRow:
        if n + 4 > self.depth:
            raise ValueError(f"{self.map_id}: bounds at level {n} need depth {n + 4}, have {self.depth}")
        self.partition(n), self.partition(n + 2)
        return bounds_row(self.returns, n, self._partitions)


_CACHE: dict[tuple, TunedMap] = {}


def lookahead_for(table: ConvergentTable, depth: int, budget: int = LOOKAHEAD_BUDGET,
                  most: int = MAX_LOOKAHEAD) -> int:
    """Extra certified levels affordable with orbits of at most ``budget`` iterates."""
    extra = 0
    while extra < most and depth + extra + 1 <= table.depth and table.q[depth + extra + 1] <= budget:
        extra += 1
    return extra


def prepare(map_id: str, template: MapSpec, target: ContinuedFraction, depth: int,
            bits: int | None = None) -> TunedMap:
    """Tune ``template`` so its combinatorics match ``target`` to ``depth``; cached per process.

    Certification continues past ``depth`` while the return times stay
    within :data:`LOOKAHEAD_BUDGET`: quotients beyond the requested depth
    still move the geometry of the deepest partitions.
    """
    target = target.extended(depth + MAX_LOOKAHEAD + 2) if target.source == "periodic" else target
    table = convergents(target)
    if table.depth < depth:
        raise ValueError(f"target has return times only to depth {table.depth}, need {depth}")
    key = (template.with_offset(0), target.partial_quotients[: depth + 2], bits)
    for (tpl, quots, b, d), tm in _CACHE.items():
        if (tpl, quots[: depth + 2], b) == key and d >= depth:
            if tm.map_id == map_id:
                return tm
            return TunedMap(map_id, tm.fmap, tm.table, tm.tuning, tm.depth, tm.returns, tm._partitions)
    ctx = PrecisionContext(bits or auto_bits(depth))
    res = tune(template, table, depth, ctx, lookahead=lookahead_for(table, depth))
    fmap = build(res.spec(template), ctx)
    bases = fmap.critical_positions or (default_base(fmap),)
    returns = [ReturnStructure.compute(fmap, b, table, 1) for b in bases]
    tm = TunedMap(map_id, fmap, table, res, res.verified_depth, returns)
    _CACHE[key + (res.verified_depth,)] = tm
    log.info("tuned %s to %s depth %d at %d bits: a = %s", map_id, target.label(), depth,
             ctx.bits, format(res.a_star, ".20g"))
    return tm


def clear_cache() -> None:
    _CACHE.clear()


_FAILURES = (TuningError, PrecisionExhausted, TilingViolation)


def _prepare_all(config: ExperimentConfig, margin: int, report: ExperimentReport) -> list[TunedMap]:
    out = []
    for map_id, spec in config.maps:
        try:
            out.append(prepare(map_id, spec, config.target, config.n_max + margin, config.bits))
        except _FAILURES as exc:
            report.checks.append(Check(f"tune {map_id}", False, str(exc)))
            report.table("skipped", ["map_id", "reason"]).add(map_id, str(exc))
    return out


def _meta(config: ExperimentConfig, margin: int) -> dict[str, Any]:
    return {
        "target": config.target.label(),
        "levels": list(config.levels),
        "bits": config.bits or auto_bits(config.n_max + margin),
        "maps": [m for m, _ in config.maps],
    }


# -- experiments --------------------------------------------------------------


def _ratio_spread(values: Sequence[mpfr]) -> mpfr:
    with gmpy2.context(precision=values[0].precision):
        return max(values) / min(values)


def non_increasing(values: Sequence, slack: float) -> bool:
    """``v[i+1] <= (1 + slack) v[i]`` for consecutive entries."""
    return all(float(b) <= (1 + slack) * float(a) for a, b in zip(values, values[1:]))


@dataclass
class BoundsReport:
    """``rows[map_id]`` holds one :class:`BoundsRow` per level; ``spread[n]`` is
    ``max_f B_n(f) / min_f B_n(f)`` over the maps that tuned."""

    target: str
    levels: tuple[int, ...]
    rows: dict[str, list[BoundsRow]]
    spread: dict[int, mpfr]
    report: ExperimentReport

    def trend_ok(self, window: int = 5, slack: float = 0.05) -> bool:
        last = [self.spread[n] for n in sorted(self.spread)][-window:]
        return non_increasing(last, slack)


def run_beau(config: ExperimentConfig, window: int = 5, slack: float = 0.05) -> BoundsReport:
    """Bounds rows for every map and level, and the spread of ``B_n`` across maps."""
    report = ExperimentReport("beau", meta=_meta(config, BOUNDS_MARGIN))
    if len(config.maps) < 2:
        raise ValueError("a beau experiment needs at least two maps")
    if not config.same_class():
        report.checks.append(Check("same critical class", False,
                                   "maps differ in number or orders of critical points"))
    tuned = _prepare_all(config, BOUNDS_MARGIN, report)
    width = max(max(len(tm.returns) for tm in tuned), 1) if tuned else 1
    table = report.table("bounds", ["map_id", "n", "B_n", "mu_n"] + [f"s_n_c{i}" for i in range(width)])
    rows: dict[str, list[BoundsRow]] = {}
    for tm in tuned:
        rows[tm.map_id] = []
        for n in config.levels:
            row = tm.bounds(n)
            rows[tm.map_id].append(row)
            scal = list(row.scaling) + [None] * (width - len(row.scaling))
            table.add(tm.map_id, n, row.B, row.mu, *scal)
    spread: dict[int, mpfr] = {}
    st = report.table("spread", ["n", "spread"])
    if len(rows) >= 2:
        for i, n in enumerate(config.levels):
            spread[n] = _ratio_spread([r[i].B for r in rows.values()])
            st.add(n, spread[n])
    result = BoundsReport(config.target.label(), config.levels, rows, spread, report)
    if spread:
        last = [spread[n] for n in sorted(spread)][-window:]
        report.checks.append(Check(
            "spread non-increasing", result.trend_ok(window, slack),
            f"last {len(last)} levels: " + ", ".join(f"{float(v):.6g}" for v in last) + f"; slack {slack:.0%}",
        ))
        report.maxima["spread_max"] = max(spread.values())
    if rows:
        report.maxima["B_max"] = max(r.B for rs in rows.values() for r in rs)
    report.charts += [
        Chart("bounds_B", "bounds", "n", ("B_n",), "map_id", "Largest adjacent-atom ratio", "B_n"),
        Chart("spread", "spread", "n", ("spread",), None, "Spread of B_n across maps", "spread_n"),
    ]
    return result


@dataclass
class CrdReport:
    values: dict[str, dict[int, mpfr]]
    ceilings: dict[str, float]
    report: ExperimentReport

    def stable(self, map_id: str, window: int = 3, tolerance: float = 0.2) -> bool:
        """Each of the last ``window`` values within ``tolerance`` of their mean."""
        vals = [float(v) for _, v in sorted(self.values[map_id].items())][-window:]
        mean = sum(vals) / len(vals)
        return all(abs(v - mean) <= tolerance * mean for v in vals)


def run_crd_universal(config: ExperimentConfig, window: int = 3, tolerance: float = 0.2) -> CrdReport:
    """Largest return-branch CrD per map and level against the explicit ceiling."""
    report = ExperimentReport("crduni", meta=_meta(config, PARTITION_MARGIN))
    tuned = _prepare_all(config, PARTITION_MARGIN, report)
    table = report.table("crd", ["map_id", "n", "crd_max", "ceiling", "max_k", "capped_atoms"])
    values: dict[str, dict[int, mpfr]] = {}
    ceilings: dict[str, float] = {}
    for tm in tuned:
        spec = tm.fmap.spec
        ceiling = theorem_ceiling(spec.n_critical, spec.max_order) if spec.n_critical else 1.0
        ceilings[tm.map_id] = ceiling
        values[tm.map_id] = {}
        for n in config.levels:
            res = crd_return_map_max(tm.returns[0], n, partition=tm.partition(n))
            values[tm.map_id][n] = res.value
            table.add(tm.map_id, n, res.value, ceiling, res.max_admissible, res.capped_atoms)
            if res.capped_atoms:
                report.checks.append(Check(f"admissibility resolved {tm.map_id} n={n}", False,
                                           f"{res.capped_atoms} atoms reached the cap"))
    result = CrdReport(values, ceilings, report)
    for map_id, vals in values.items():
        worst = max(vals.values())
        tol = 2 ** (40 - tuned[0].ctx.bits)
        if ceilings[map_id] == 1.0:
            ok = abs(float(worst) - 1) <= tol * 1e6
        else:
            ok = float(worst) <= ceilings[map_id]
        report.checks.append(Check(f"ceiling {map_id}", ok, f"max {float(worst):.6g} vs {ceilings[map_id]:.6g}"))
        if len(vals) >= window:
            report.checks.append(Check(f"stable {map_id}", result.stable(map_id, window, tolerance),
                                       f"last {window} levels within {tolerance:.0%} of their mean"))
        report.maxima[f"crd_max_{map_id}"] = worst
    report.charts.append(Chart("crd", "crd", "n", ("crd_max",), "map_id",
                               "Largest CrD of return branches", "CrD"))
    return result


@dataclass
class ScalingReport:
    values: dict[str, dict[int, tuple[mpfr, ...]]]
    report: ExperimentReport


def run_scaling(config: ExperimentConfig) -> ScalingReport:
    """``s_n(c_i) = |I_{n+1}(c_i)| / |I_n(c_i)|`` per map, level and critical point."""
    report = ExperimentReport("scaling", meta=_meta(config, PARTITION_MARGIN))
    tuned = _prepare_all(config, PARTITION_MARGIN, report)
    table = report.table("scaling", ["map_id", "n", "critical_index", "s_n"])
    values: dict[str, dict[int, tuple[mpfr, ...]]] = {}
    for tm in tuned:
        values[tm.map_id] = {}
        for n in config.levels:
            for rs in tm.returns:
                rs.ensure(tm.table.q[n + 1] + 1)
            with tm.ctx.scope():
                s = tuple(rs.interval_length(n + 1) / rs.interval_length(n) for rs in tm.returns)
            values[tm.map_id][n] = s
            for i, v in enumerate(s):
                table.add(tm.map_id, n, i, v)
        flat = [float(v) for row in values[tm.map_id].values() for v in row]
        levels = sorted(values[tm.map_id])
        drift = [abs(float(a) - float(b)) for la, lb in zip(levels, levels[1:])
                 for a, b in zip(values[tm.map_id][la], values[tm.map_id][lb])]
        bounded = all(0 < v < 1 for v in flat)
        report.checks.append(Check(
            f"bounded {tm.map_id}", bounded,
            f"range [{min(flat):.6g}, {max(flat):.6g}]; last change {drift[-1] if drift else 0:.3g}",
        ))
        report.maxima[f"s_max_{tm.map_id}"] = max(flat)
        report.maxima[f"s_min_{tm.map_id}"] = min(flat)
    report.charts.append(Chart("scaling", "scaling", "n", ("s_n",), "map_id", "Scaling ratios", "s_n"))
    return ScalingReport(values, report)


class CombinatoricsMismatch(ValueError):
    pass


@dataclass(frozen=True)
class ConjugacyEstimate:
    """``sigma_max``: largest ``max(r, 1/r)`` of the conjugacy's symmetric increment ratio ``r``
    over partition endpoints and probe scales."""

    f_id: str
    g_id: str
    level: int
    sigma_max: mpfr
    endpoint: int


def conjugacy_distortion(f: TunedMap, g: TunedMap, level: int, scales: int = 4) -> ConjugacyEstimate:
    """Quasi-symmetric distortion of ``h: f^k(c_0) -> g^k(c_0)`` at level ``level``.

    ``h`` is affine between consecutive orbit points.  At each endpoint
    ``x`` the probes are ``t = min(adjacent atoms) * 2**-m``, ``m < scales``,
    so ``x - t`` and ``x + t`` stay in the two atoms meeting at ``x``.
    """
    pf, pg = f.partition(level), g.partition(level)
    order_f = [(a.generation, a.index) for a in pf.atoms]
    start = next(i for i, a in enumerate(pg.atoms) if (a.generation, a.index) == order_f[0])
    order_g = [(a.generation, a.index) for a in pg.atoms[start:] + pg.atoms[:start]]
    if order_f != order_g:
        raise CombinatoricsMismatch(f"{f.map_id} and {g.map_id} order their level-{level} atoms differently")
    g_atoms = pg.atoms[start:] + pg.atoms[:start]
    total = len(pf)
    ctx = f.ctx
    best, where = None, 0
    with ctx.scope():
        gl = [a.length for a in g_atoms]
        for s in range(total):
            fl_, fr = pf.atoms[s - 1].length, pf.atoms[s].length
            sl, sr = gl[s - 1] / fl_, gl[s] / fr
            t0 = min(fl_, fr)
            for m in range(scales):
                t = t0 / 2 ** m
                r = (sr * t) / (sl * t)
                sigma = r if r >= 1 else 1 / r
                if best is None or sigma > best:
                    best, where = sigma, pf.atoms[s].left_orbit
    return ConjugacyEstimate(f.map_id, g.map_id, level, best, where)


def run_qs(f_spec: MapSpec, g_spec: MapSpec, target: ContinuedFraction, level: int,
           bits: int | None = None, f_id: str = "f", g_id: str = "g") -> ConjugacyEstimate:
    if f_spec.n_critical != g_spec.n_critical:
        raise CombinatoricsMismatch("maps have different numbers of critical points")
    depth = level + PARTITION_MARGIN
    f = prepare(f_id, f_spec, target, depth, bits)
    g = prepare(g_id, g_spec, target, depth, bits)
    if f.ctx.bits != g.ctx.bits:
        raise CombinatoricsMismatch("maps were tuned at different precisions")
    return conjugacy_distortion(f, g, level)


@dataclass
class QsReport:
    estimates: dict[tuple[str, str], dict[int, ConjugacyEstimate]]
    report: ExperimentReport


def run_qs_config(config: ExperimentConfig, window: int = 3, tolerance: float = 0.1) -> QsReport:
    report = ExperimentReport("qs", meta=_meta(config, PARTITION_MARGIN))
    table = report.table("qs", ["pair_id", "level", "sigma_max"])
    estimates: dict[tuple[str, str], dict[int, ConjugacyEstimate]] = {}
    for f_id, g_id in config.qs_pairs:
        pair_id = f"{f_id}~{g_id}"
        estimates[(f_id, g_id)] = {}
        try:
            for n in config.levels:
                est = run_qs(config.spec(f_id), config.spec(g_id), config.target, n, config.bits, f_id, g_id)
                estimates[(f_id, g_id)][n] = est
                table.add(pair_id, n, est.sigma_max)
        except (CombinatoricsMismatch, *_FAILURES) as exc:
            report.checks.append(Check(f"conjugacy {pair_id}", False, str(exc)))
            continue
        vals = [float(e.sigma_max) for _, e in sorted(estimates[(f_id, g_id)].items())][-window:]
        mean = sum(vals) / len(vals)
        report.checks.append(Check(f"level-stable {pair_id}",
                                   all(abs(v - mean) <= tolerance * mean for v in vals),
                                   "last levels: " + ", ".join(f"{v:.6g}" for v in vals)))
        report.maxima[f"sigma_max_{pair_id}"] = max(e.sigma_max for e in estimates[(f_id, g_id)].values())
    report.charts.append(Chart("qs", "qs", "level", ("sigma_max",), "pair_id",
                               "Quasi-symmetric distortion of the conjugacy", "sigma_max"))
    return QsReport(estimates, report)


def run_lemmas(config: ExperimentConfig) -> ExperimentReport:
    """Per map and level: C^1 constant, return-map Schwarzian sign and decomposition counts."""
    report = ExperimentReport("lemmas", meta=_meta(config, PARTITION_MARGIN))
    tuned = _prepare_all(config, PARTITION_MARGIN, report)
    table = report.table("lemmas", ["map_id", "n", "K_n", "return_c1", "schwarzian_negative",
                                    "schwarzian_worst", "variant_negative", "diffeo_blocks",
                                    "critical_steps", "counts_ok"])
    for tm in tuned:
        rs = tm.returns[0]
        for n in config.levels:
            c1 = c1_bound_constant(rs, n, config.distortion_grid)
            neg = verify_negative_schwarzian(rs, n, config.schwarzian_grid)
            p = tm.partition(n)
            ks = admissible_steps(p)
            pos = max(range(len(ks)), key=lambda s: ks[s])
            if n >= 2 and ks[pos] >= 1:
                tr = decompose(rs, n, pos, ks[pos], grid_size=8)
                counts = (tr.diffeo_count, tr.critical_count, tr.counts_ok)
            else:
                counts = (None, None, None)
            table.add(tm.map_id, n, c1.K, c1.return_map_c1, neg.all_negative, neg.worst,
                      neg.variant_all_negative, *counts)
    report.charts.append(Chart("c1", "lemmas", "n", ("K_n",), "map_id", "C^1 bound constant", "K_n"))
    return report


def run_report(config: ExperimentConfig) -> ExperimentReport:
    """Every experiment of ``config`` merged into one report."""
    report = ExperimentReport("report", meta=_meta(config, BOUNDS_MARGIN))
    if len(config.maps) >= 2:
        report.merge(run_beau(config).report)
    report.merge(run_crd_universal(config).report)
    report.merge(run_scaling(config).report)
    report.merge(run_lemmas(config))
    if config.qs_pairs:
        report.merge(run_qs_config(config).report)
    report.kind = "report"
    return report
