"""Configuration-driven experiment harness.

Experiments are described by a flat key = value text file (dotted section
keys, '#' comments; every key is listed in the README).  Presets bundle a
problem, its grid strategies and thresholds; any key can be overridden.
Artifacts (solution CSV, grid dump, contour CSV, resource report, SVG plots,
solver log) are written atomically into the output directory.
"""

from __future__ import annotations

import math
import os
import time
from dataclasses import dataclass, field

import numpy as np

from .adaptivity import (RefinementPolicy, free_boundary_criteria,
                         proximity_criteria, residual_criteria,
                         slope_criteria, stefan_terms_criteria)
from .contour import extract_contour
from .grid import (DomainBox, GridError, GridFunction, QuadtreeGrid,
                   ScaleRequest, build_quadtree)
from .operators import (ProblemDefinition, UpwindDirectional,
                        instantiate_builtin)
from .solvers import (StoppingPolicy, evolve, multiscale_solve, newton_solve)
from . import svgplot

PRESETS = ("artificial_bc", "irregular_dirichlet", "punctured_neumann",
           "obstacle", "stefan", "custom")


class ConfigError(Exception):
    """Bad experiment configuration; the message names the offending field."""


_KNOWN_KEYS = {
    "preset", "seed", "solver",
    "output.dir",
    "domain.side", "domain.x_min", "domain.x_max", "domain.y_min",
    "domain.y_max",
    "grid.depth", "grid.pad_x", "grid.pad_y", "grid.initial_scale",
    "refine.strategy", "refine.thresholds", "refine.scales", "refine.padding",
    "stopping.thresholds", "newton.max_iter",
    "time.T", "time.snapshots", "time.regrid_every",
    "contour.level",
    "problem.kind", "problem.f", "problem.g", "problem.chi",
    "problem.dirichlet",
}


@dataclass
class ExperimentConfig:
    preset: str = "custom"
    seed: int = 0
    solver: str | None = None
    out_dir: str = "out"
    raw: dict = field(default_factory=dict)

    def get(self, key, default=None, cast=str):
        if key not in self.raw:
            return default
        try:
            return cast(self.raw[key])
        except (TypeError, ValueError):
            raise ConfigError("config field %r has a bad value %r"
                              % (key, self.raw[key]))

    def floats(self, key, default=None):
        if key not in self.raw:
            return default
        try:
            return tuple(float(tok) for tok in self.raw[key].split(","))
        except ValueError:
            raise ConfigError("config field %r is not a float list" % key)

    def ints(self, key, default=None):
        if key not in self.raw:
            return default
        try:
            return tuple(int(tok) for tok in self.raw[key].split(","))
        except ValueError:
            raise ConfigError("config field %r is not an int list" % key)


def parse_config(text: str) -> ExperimentConfig:
    raw = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError("config line %d is not 'key = value'" % lineno)
        key, value = (part.strip() for part in line.split("=", 1))
        if key not in _KNOWN_KEYS:
            raise ConfigError("unknown config key %r" % key)
        raw[key] = value
    cfg = ExperimentConfig(raw=raw)
    cfg.preset = raw.get("preset", "custom")
    if cfg.preset not in PRESETS:
        raise ConfigError("config field 'preset' must be one of %s"
                          % (PRESETS,))
    cfg.seed = cfg.get("seed", 0, int)
    cfg.solver = raw.get("solver")
    cfg.out_dir = raw.get("output.dir", "out")
    return cfg


def load_config(path: str) -> ExperimentConfig:
    with open(path, "r", encoding="utf-8") as fh:
        return parse_config(fh.read())


# ---------------------------------------------------------------------------
# safe expression evaluation for the custom preset

_EXPR_NS = {name: getattr(np, name) for name in
            ("sin", "cos", "tan", "exp", "log", "sqrt", "hypot", "arctan2",
             "abs", "minimum", "maximum", "pi", "e", "sign", "where")}
_EXPR_NS["min"] = min
_EXPR_NS["max"] = max


def expression(expr: str):
    code = compile(expr, "<config>", "eval")

    def fn(x, y):
        ns = dict(_EXPR_NS)
        ns.update(x=x, y=y, r=math.hypot(x, y),
                  theta=math.atan2(y, x))
        return float(eval(code, {"__builtins__": {}}, ns))

    return fn


def dirichlet_walls(gfun):
    return (lambda x, y, nx, ny: 0.0,
            lambda x, y, nx, ny: 1.0,
            lambda x, y, nx, ny: gfun(x, y))


def uniform_requests(box: DomainBox, depth: int, scale: int):
    side = 1 << depth
    s = 1 << scale
    return [ScaleRequest(box.x_min + (i + 0.5 * s) * box.lx / side,
                         box.y_min + (j + 0.5 * s) * box.ly / side, scale)
            for i in range(0, side, s) for j in range(0, side, s)]


def _top_maxima(fn, box: DomainBox, count: int, samples: int = 200):
    """Interior local maxima of fn on a scan lattice, highest first."""
    xs = np.linspace(box.x_min, box.x_max, samples + 1)
    ys = np.linspace(box.y_min, box.y_max, samples + 1)
    G = np.array([[fn(x, y) for x in xs] for y in ys])
    found = []
    for j in range(1, samples):
        for i in range(1, samples):
            patch = G[j - 1:j + 2, i - 1:i + 2]
            v = G[j, i]
            if v > 0 and v >= patch.max() and v > patch.min():
                found.append((v, xs[i], ys[j]))
    found.sort(reverse=True)
    out = []
    for (v, x, y) in found:
        if all(math.hypot(x - a, y - b) > 0.2 for (a, b) in out):
            out.append((x, y))
        if len(out) == count:
            break
    return out


# ---------------------------------------------------------------------------
# presets

def _obstacle_fn(x, y):
    r = math.hypot(x, y)
    v = x * x
    if x < 0:
        v *= 2.0 * math.sin(math.pi * y) ** 2
    if r > 0.25:
        v *= math.exp(-r)
    return v


OBSTACLE_WALL_LIFT = 0.20          # wall data sit this far above the obstacle

STEFAN_BACKGROUND = 0.5            # ice depth below zero = latent-heat budget
STEFAN_BUMPS = (((-0.30, -0.25), 0.35, 2.0),
                ((0.35, -0.10), 0.30, 1.6),
                ((0.00, 0.40), 0.32, 1.8))


def stefan_initial(x, y):
    v = -STEFAN_BACKGROUND
    for ((cx, cy), r, a) in STEFAN_BUMPS:
        d2 = ((x - cx) ** 2 + (y - cy) ** 2) / (r * r)
        if d2 < 1.0:
            v += a * (1.0 - d2) ** 2
    return v


@dataclass
class PresetBundle:
    kind: str
    problem: ProblemDefinition
    box: DomainBox
    depth: int
    initial_scale: int
    solver: str
    policy: RefinementPolicy | None = None
    stopping: StoppingPolicy | None = None
    T: float = 0.0
    snapshots: tuple = ()
    contour: tuple | None = None     # ("level", v) or ("contact", eps)
    regions: tuple = ()              # radii splitting the resource report
    u0: object = None                # initial values fn for evolution


def _build_initial(box, depth, scale, pads=None):
    return build_quadtree(uniform_requests(box, depth, scale), depth, box,
                          pads=pads)


def obstacle_strategies(box, depth, initial_cells):
    """The three grid strategies compared on the obstacle problem."""
    targets = _top_maxima(_obstacle_fn, box, 5)
    reach = max(box.lx, box.ly)
    pre = RefinementPolicy(
        proximity_criteria(targets, reach=reach),
        thresholds=(reach - 3.6, reach - 2.2, reach - 1.3, reach - 0.7),
        scales=(3, 2, 1, 0), initial_cells=initial_cells)
    tau = 0.25
    bnd = RefinementPolicy(
        free_boundary_criteria(closeness=tau),
        thresholds=(1e-9, 0.5 * tau, 0.75 * tau, 0.9 * tau),
        scales=(3, 2, 1, 0), initial_cells=initial_cells)
    opr = RefinementPolicy(
        residual_criteria(),
        thresholds=(0.02, 0.08, 0.3, 1.2),
        scales=(3, 2, 1, 0), initial_cells=initial_cells)
    return {"predetermined": pre, "boundary": bnd, "operator": opr}


def stefan_strategies(initial_cells):
    term = RefinementPolicy(stefan_terms_criteria(), thresholds=(2.0, 8.0),
                            scales=(1, 0), initial_cells=initial_cells)
    oper = RefinementPolicy(residual_criteria(), thresholds=(2.0, 8.0),
                            scales=(1, 0), initial_cells=initial_cells)
    return {"term": term, "operator": oper}


def make_preset(cfg: ExperimentConfig) -> PresetBundle:
    name = cfg.preset
    if name == "artificial_bc":
        side = cfg.get("domain.side", 200.0, float)
        depth = cfg.get("grid.depth", 13, int)
        box = DomainBox(-side / 2, side / 2, -side / 2, side / 2)

        def source(x, y):
            r = math.hypot(x, y)
            return r * max(1.0 - r, 0.0) * math.sin(5 * math.pi * r) \
                * math.cos(3 * math.atan2(y, x))

        robin = (lambda x, y, nx, ny: (x * nx + y * ny) / math.hypot(x, y),
                 lambda x, y, nx, ny: 1.0 / math.hypot(x, y),
                 lambda x, y, nx, ny: 0.0)
        problem = ProblemDefinition(f=source, robin=robin)
        initial_scale = cfg.get("grid.initial_scale", depth - 1, int)
        g0_cells = _grid_cells(box, depth, initial_scale)
        # near-field rings: radius below 2^m demands a cell of physical size
        # side/2^13 * 2^(2m); the ladder matches across doubled domains
        radii = [1.0 * (1 << m) for m in range(7)]
        scales = [2 * m - _depth_shift(side, depth) for m in range(7)]
        scales = [max(0, min(depth - 1, s)) for s in scales]
        policy = RefinementPolicy(
            proximity_criteria([(0.0, 0.0)], reach=side),
            thresholds=tuple(side - r for r in reversed(radii)),
            scales=tuple(reversed(scales)),
            initial_cells=g0_cells)
        return PresetBundle(
            kind="poisson_dirichlet", problem=problem, box=box, depth=depth,
            initial_scale=initial_scale, solver="newton_multiscale",
            policy=policy, stopping=StoppingPolicy(
                cfg.floats("stopping.thresholds", (1e-8,))),
            contour=("level", 0.0), regions=(1.0, 10.0, side / 2))

    if name == "irregular_dirichlet":
        depth = cfg.get("grid.depth", 8, int)
        box = DomainBox(0.0, 1.0, 0.0, 1.0)
        chi = lambda x, y: (x - 0.5) ** 2 + (y - 0.5) ** 2 < 0.35 ** 2
        problem = ProblemDefinition(chi=chi, f=lambda x, y: 4.0,
                                    g=lambda x, y: 0.0)
        initial_scale = cfg.get("grid.initial_scale", 4, int)
        cells = _grid_cells(box, depth, initial_scale)
        policy = RefinementPolicy(residual_criteria(),
                                  thresholds=(0.5, 2.0, 8.0, 32.0),
                                  scales=(3, 2, 1, 0), initial_cells=cells)
        return PresetBundle(
            kind="bc_composite", problem=problem, box=box, depth=depth,
            initial_scale=initial_scale, solver="newton_multiscale",
            policy=policy, stopping=StoppingPolicy(
                cfg.floats("stopping.thresholds", (1e-6, 1e-8, 1e-9, 1e-10))),
            contour=("level", 0.05))

    if name == "punctured_neumann":
        depth = cfg.get("grid.depth", 8, int)
        box = DomainBox(0.0, 1.0, 0.0, 1.0)
        cx, cy, rho = 0.5, 0.5, 0.25
        band = 0.08

        def dist(x, y):
            return math.hypot(x - cx, y - cy)

        hop = UpwindDirectional(
            region=lambda x, y: rho - band <= dist(x, y) < rho,
            direction=lambda x, y: ((cx - x) / max(dist(x, y), 1e-12),
                                    (cy - y) / max(dist(x, y), 1e-12)),
            rhs=lambda x, y: 1.0)
        problem = ProblemDefinition(
            chi=lambda x, y: dist(x, y) >= rho,
            f=lambda x, y: 0.0, g=lambda x, y: 0.0, first_order=hop)
        initial_scale = cfg.get("grid.initial_scale", 4, int)
        cells = _grid_cells(box, depth, initial_scale)
        weight = lambda x, y: 1.0 if abs(dist(x, y) - rho) < 0.12 else 0.1
        policy = RefinementPolicy(slope_criteria(weight),
                                  thresholds=(0.2, 0.8, 1.6, 3.2),
                                  scales=(3, 2, 1, 0), initial_cells=cells)
        return PresetBundle(
            kind="bc_composite", problem=problem, box=box, depth=depth,
            initial_scale=initial_scale, solver="newton_multiscale",
            policy=policy, stopping=StoppingPolicy(
                cfg.floats("stopping.thresholds", (1e-7, 1e-8, 1e-9, 1e-10))),
            contour=("level", -0.01))

    if name == "obstacle":
        depth = cfg.get("grid.depth", 8, int)
        box = DomainBox(-4.0, 4.0, -4.0, 4.0)
        lift = OBSTACLE_WALL_LIFT
        problem = ProblemDefinition(
            g=_obstacle_fn,
            robin=dirichlet_walls(lambda x, y: _obstacle_fn(x, y) + lift))
        initial_scale = cfg.get("grid.initial_scale", 5, int)
        cells = _grid_cells(box, depth, initial_scale)
        strategies = obstacle_strategies(box, depth, cells)
        strategy = cfg.get("refine.strategy", "boundary")
        if strategy not in strategies:
            raise ConfigError("config field 'refine.strategy' must be one of "
                              "%s" % sorted(strategies))
        return PresetBundle(
            kind="obstacle", problem=problem, box=box, depth=depth,
            initial_scale=initial_scale, solver="newton_multiscale",
            policy=strategies[strategy], stopping=StoppingPolicy(
                cfg.floats("stopping.thresholds",
                           (1e-6, 1e-7, 1e-8, 1e-9, 1e-9))),
            contour=("contact", 1e-8))

    if name == "stefan":
        depth = cfg.get("grid.depth", 7, int)
        box = DomainBox(-1.0, 1.0, -1.0, 1.0)
        problem = ProblemDefinition(g=lambda x, y: -STEFAN_BACKGROUND)
        coarse_scale = cfg.get("grid.initial_scale", 2, int)
        cells = _grid_cells(box, depth, coarse_scale)
        strategy = cfg.get("refine.strategy", "operator")
        policy = None
        initial_scale = coarse_scale
        if strategy == "uniform_fine":
            initial_scale = 0
        elif strategy == "uniform_coarse":
            pass
        else:
            strategies = stefan_strategies(cells)
            if strategy not in strategies:
                raise ConfigError(
                    "config field 'refine.strategy' must be one of %s"
                    % sorted(list(strategies) +
                             ["uniform_fine", "uniform_coarse"]))
            policy = strategies[strategy]
        return PresetBundle(
            kind="stefan", problem=problem, box=box, depth=depth,
            initial_scale=initial_scale, solver="euler_evolve", policy=policy,
            T=cfg.get("time.T", 0.025, float),
            snapshots=cfg.floats("time.snapshots", (0.005, 0.025)),
            contour=("level", 0.0), u0=stefan_initial)

    # custom: everything from config expressions
    depth = cfg.get("grid.depth", 6, int)
    box = DomainBox(cfg.get("domain.x_min", 0.0, float),
                    cfg.get("domain.x_max", 1.0, float),
                    cfg.get("domain.y_min", 0.0, float),
                    cfg.get("domain.y_max", 1.0, float))
    kind = cfg.get("problem.kind", "poisson_dirichlet")
    f = expression(cfg.get("problem.f", "0"))
    gexpr = expression(cfg.get("problem.g", "0"))
    chi = None
    if "problem.chi" in cfg.raw:
        chi_raw = expression(cfg.raw["problem.chi"])
        chi = lambda x, y: bool(chi_raw(x, y))
    robin = None
    if "problem.dirichlet" in cfg.raw:
        wall = expression(cfg.raw["problem.dirichlet"])
        robin = dirichlet_walls(wall)
    problem = ProblemDefinition(chi=chi, f=f, g=gexpr, robin=robin)
    initial_scale = cfg.get("grid.initial_scale", max(depth - 2, 0), int)
    cells = _grid_cells(box, depth, initial_scale)
    thresholds = cfg.floats("refine.thresholds", (1e9,))
    scales = cfg.ints("refine.scales", None)
    if scales is not None and len(scales) != len(thresholds):
        raise ConfigError("config fields 'refine.thresholds' and "
                          "'refine.scales' must have equal lengths")
    policy = RefinementPolicy(residual_criteria(), thresholds=thresholds,
                              scales=scales,
                              extra_padding=cfg.get("refine.padding", 0, int),
                              initial_cells=cells)
    return PresetBundle(
        kind=kind, problem=problem, box=box, depth=depth,
        initial_scale=initial_scale,
        solver=cfg.solver or "newton_multiscale", policy=policy,
        stopping=StoppingPolicy(cfg.floats("stopping.thresholds", (1e-9,))),
        T=cfg.get("time.T", 0.01, float),
        snapshots=cfg.floats("time.snapshots", ()),
        contour=("level", cfg.get("contour.level", 0.0, float)),
        u0=lambda x, y: gexpr(x, y))


def _depth_shift(side, depth):
    # ring scales assume physical cell size side/2^depth * 2^scale equal to
    # the reference layout (side 200, depth 13); shift keeps sizes aligned
    return round(math.log2((side / (1 << depth)) / (200.0 / (1 << 13))))


def _grid_cells(box, depth, scale):
    g = _build_initial(box, depth, scale)
    return tuple((a, b, k) for (a, b), k in g.cells.items())


# ---------------------------------------------------------------------------
# resource accounting

@dataclass
class ResourceReport:
    regions: list                  # (name, node_share, time_share, area_share)
    newton_by_size: dict           # node-count bucket -> linear solves
    total_solves: int = 0

    def check(self):
        for col in (1, 2, 3):
            total = sum(row[col] for row in self.regions)
            if abs(total - 1.0) > 1e-6:
                raise GridError("resource shares sum to %.8f" % total)


def _region_index(radii, x, y):
    r = math.hypot(x, y)
    for k, bound in enumerate(radii):
        if r < bound:
            return k
    return len(radii)


def region_names(radii):
    names = []
    prev = None
    for bound in radii:
        names.append("r<%g" % bound if prev is None
                     else "%g<r<%g" % (prev, bound))
        prev = bound
    names.append("r>%g" % prev)
    return names


def region_areas(radii, box: DomainBox):
    # radii never exceed the half-width, so disc areas are exact
    areas = []
    prev = 0.0
    for bound in radii:
        areas.append(math.pi * (bound ** 2 - prev ** 2))
        prev = bound
    total = box.lx * box.ly
    areas.append(total - math.pi * prev ** 2)
    return [a / total for a in areas]


def resource_report(grid: QuadtreeGrid, radii, log, region_counts) -> ResourceReport:
    nr = len(radii) + 1
    counts = np.zeros(nr)
    for n in grid.nodes:
        counts[_region_index(radii, n.x, n.y)] += 1
    node_share = counts / counts.sum()

    time_by_region = np.zeros(nr)
    total_time = 0.0
    buckets = {}
    for entry in log:
        if entry.get("event") != "newton":
            continue
        wall = entry.get("wall", 0.0)
        total_time += wall
        frac = region_counts.get(entry["nodes"])
        if frac is not None:
            time_by_region += wall * frac
        bucket = "<5000" if entry["nodes"] < 5000 else ">=5000"
        buckets[bucket] = buckets.get(bucket, 0) + 1
    if total_time > 0:
        time_share = time_by_region / total_time
        missing = 1.0 - time_share.sum()
        time_share = time_share + missing * node_share
    else:
        time_share = node_share.copy()

    rows = list(zip(region_names(radii), node_share, time_share,
                    region_areas(radii, grid.box)))
    rep = ResourceReport(rows, buckets, sum(buckets.values()))
    rep.check()
    return rep


# ---------------------------------------------------------------------------
# experiment driver

def atomic_write(path: str, text: str):
    tmp = path + ".tmp"
    with open(tmp, "w", encoding="utf-8") as fh:
        fh.write(text)
    os.replace(tmp, path)


def solution_csv(grid: QuadtreeGrid, u: GridFunction) -> str:
    lines = ["i,j,x,y,u"]
    for idx, n in enumerate(grid.nodes):
        lines.append("%d,%d,%r,%r,%r" % (n.i, n.j, n.x, n.y,
                                         float(u.values[idx])))
    return "\n".join(lines) + "\n"


def contour_csv(polylines) -> str:
    lines = ["curve_id,seq,x,y"]
    for cid, poly in enumerate(polylines):
        for seq, (x, y) in enumerate(poly):
            lines.append("%d,%d,%r,%r" % (cid, seq, float(x), float(y)))
    return "\n".join(lines) + "\n"


def report_csv(rep: ResourceReport) -> str:
    lines = ["region,node_share,time_share,area_share"]
    for (name, ns, ts, ar) in rep.regions:
        lines.append("%s,%r,%r,%r" % (name, float(ns), float(ts), float(ar)))
    return "\n".join(lines) + "\n"


def solver_log_csv(log) -> str:
    lines = ["event,nodes,iteration,residual,wall,t,tau"]
    for e in log:
        lines.append("%s,%s,%s,%s,%s,%s,%s" % (
            e.get("event", ""), e.get("nodes", ""), e.get("iteration", ""),
            e.get("residual", ""), e.get("wall", ""), e.get("t", ""),
            e.get("tau", "")))
    return "\n".join(lines) + "\n"


def _extract(preset: PresetBundle, grid, u, op):
    mode, val = preset.contour
    if mode == "contact":
        return extract_contour(grid, u.values,
                               predicate=lambda v: v - op.gvals - val)
    return extract_contour(grid, u.values, level=val)


def run_experiment(cfg: ExperimentConfig, out_dir: str | None = None) -> dict:
    """Run one experiment; returns a dict of results and writes artifacts."""
    preset = make_preset(cfg)
    out = out_dir or cfg.out_dir
    os.makedirs(out, exist_ok=True)
    pads = None
    if "grid.pad_x" in cfg.raw or "grid.pad_y" in cfg.raw:
        pads = (cfg.get("grid.pad_x", 1, int), cfg.get("grid.pad_y", 1, int))
    g0 = build_quadtree(uniform_requests(preset.box, preset.depth,
                                         preset.initial_scale),
                        preset.depth, preset.box, pads=pads)
    factory = lambda gr: instantiate_builtin(preset.kind, preset.problem, gr)
    log = []
    results = {"log": log, "preset": preset}
    solver = cfg.solver or preset.solver

    try:
        if solver == "euler_evolve":
            op = factory(g0)
            u0 = GridFunction(g0, np.array([preset.u0(n.x, n.y)
                                            for n in g0.nodes]))
            snapshots = preset.snapshots or (preset.T,)
            snaps = evolve(op, g0, u0, T=preset.T, policy=preset.policy,
                           snapshot_times=snapshots, seed=cfg.seed,
                           regrid_every=cfg.get("time.regrid_every", 1, int),
                           log=log)
            results["snapshots"] = snaps
            for (gr, u, t) in snaps:
                tag = ("%g" % t).replace(".", "p")
                opn = factory(gr)
                polys = _extract(preset, gr, u, opn)
                atomic_write(os.path.join(out, "solution_t%s.csv" % tag),
                             solution_csv(gr, u))
                atomic_write(os.path.join(out, "contours_t%s.csv" % tag),
                             contour_csv(polys))
                results.setdefault("contours", {})[t] = polys
            gr, u, _ = snaps[-1]
        elif solver == "newton_multiscale":
            region_counts = {}
            radii = preset.regions

            def watch(grid):
                if not radii:
                    return
                counts = np.zeros(len(radii) + 1)
                for n in grid.nodes:
                    counts[_region_index(radii, n.x, n.y)] += 1
                region_counts[grid.n_nodes()] = counts / counts.sum()

            u0 = GridFunction(g0, np.zeros(g0.n_nodes()))
            if preset.kind == "obstacle":
                op0 = factory(g0)
                u0 = GridFunction(g0, np.maximum(op0.gvals, 0.0))
            gr, u = multiscale_solve(
                factory, g0, u0, preset.policy, preset.stopping,
                max_iter=cfg.get("newton.max_iter", 100, int), log=log,
                grid_watch=watch)
            op = factory(gr)
            polys = _extract(preset, gr, u, op)
            atomic_write(os.path.join(out, "solution.csv"),
                         solution_csv(gr, u))
            atomic_write(os.path.join(out, "contours.csv"),
                         contour_csv(polys))
            results["contours"] = polys
            if radii:
                rep = resource_report(gr, radii, log, region_counts)
                atomic_write(os.path.join(out, "report.csv"), report_csv(rep))
                results["report"] = rep
        else:
            raise ConfigError("config field 'solver' must be "
                              "newton_multiscale or euler_evolve")
    finally:
        atomic_write(os.path.join(out, "solver_log.csv"), solver_log_csv(log))

    atomic_write(os.path.join(out, "grid.txt"), gr.dump())
    atomic_write(os.path.join(out, "grid.svg"),
                 svgplot.grid_svg(gr))
    atomic_write(os.path.join(out, "solution.svg"),
                 svgplot.solution_svg(gr, u, results.get("contours")))
    results["grid"] = gr
    results["u"] = u
    return results


# ---------------------------------------------------------------------------
# convergence studies

def manufactured_poisson(grid: QuadtreeGrid, exact, lap_exact):
    problem = ProblemDefinition(f=lambda x, y: -lap_exact(x, y), g=exact)
    op = instantiate_builtin("poisson_dirichlet", problem, grid)
    u = newton_solve(op, grid, GridFunction(grid, np.zeros(grid.n_nodes())),
                     StoppingPolicy([1e-11]))
    ex = np.array([exact(n.x, n.y) for n in grid.nodes])
    return float(np.max(np.abs(u.values - ex)))


def convergence_report(family: str, depths, box=None) -> list:
    """Max-norm errors and observed orders for a manufactured solution.

    family: 'uniform' (all-fine grids), 'dangling' (a fixed band of fine
    cells, so hanging nodes persist at every resolution), or 'linear'
    (exact on the stencils; errors at round-off).
    """
    depths = list(depths)
    if len(depths) < 2:
        raise ConfigError("config field 'scales' needs at least 2 entries")
    if box is None:
        box = DomainBox(0.0, 1.0, 0.0, 1.0)
    if family == "linear":
        exact = lambda x, y: 0.75 * x - 0.5 * y + 0.25
        lap = lambda x, y: 0.0
    else:
        exact = lambda x, y: math.sin(math.pi * x) * math.sin(math.pi * y)
        lap = lambda x, y: -2 * math.pi ** 2 * exact(x, y)

    rows = []
    prev_err = None
    for depth in depths:
        if family == "dangling":
            reqs = uniform_requests(box, depth, 1)
            side = 1 << depth
            reqs += [ScaleRequest(box.x_min + (i + 0.5) * box.lx / side,
                                  box.y_min + (j + 0.5) * box.ly / side, 0)
                     for i in range(side // 2) for j in range(side)]
            grid = build_quadtree(reqs, depth, box, pads=(1, 1))
        else:
            grid = _build_initial(box, depth, 0)
        err = manufactured_poisson(grid, exact, lap)
        h = box.lx / (1 << depth)
        rate = math.log2(prev_err / err) if prev_err else float("nan")
        rows.append((h, err, rate))
        prev_err = err
    return rows


def convergence_csv(rows) -> str:
    lines = ["h,error,rate"]
    for (h, e, r) in rows:
        lines.append("%r,%r,%s" % (h, e, "" if math.isnan(r) else repr(r)))
    return "\n".join(lines) + "\n"
