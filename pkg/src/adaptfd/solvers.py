"""Time stepping and static solvers on adaptive quadtree grids.

Parabolic problems march by asynchronous forward Euler: nodes are grouped by
nearest-neighbor distance, each group gets a stable time step from the local
CFL bound (steps differ by powers of two), and one coarse step visits every
group according to a freshly permuted schedule: Jacobi within a group,
Gauss-Seidel across groups.

Static problems use semismooth Newton with the exact generalized Jacobian
and a sparse direct solve, wrapped in coarse-to-fine continuation: solve on
the initial quadtree, admit one finer scale per stage as the refinement
criteria demand, and re-solve until the finest scale converges.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass

import numpy as np
import scipy.sparse.linalg as spla

from .adaptivity import (cells_as_requests, compute_refinement,
                         evaluate_criteria, regrid, _square_request)
from .grid import GridError, GridFunction, QuadtreeGrid
from .operators import OperatorSpec, instantiate_builtin


class InstabilityError(GridError):
    """An explicit update exceeded its contraction bound."""


class NonconvergenceError(GridError):
    def __init__(self, residual_norm, iterations):
        super().__init__("Newton stalled at residual %.3e after %d iterations"
                         % (residual_norm, iterations))
        self.residual_norm = residual_norm
        self.iterations = iterations


class LinearSolveError(GridError):
    """The sparse linear solve failed or missed its residual tolerance."""


@dataclass
class StoppingPolicy:
    """Per-stage residual bounds (nonincreasing), max-norm by default."""
    thresholds: tuple
    norm: str = "max"

    def __post_init__(self):
        self.thresholds = tuple(self.thresholds)
        if not self.thresholds:
            raise GridError("stopping policy needs at least one threshold")
        if any(a < b for a, b in zip(self.thresholds, self.thresholds[1:])):
            raise GridError("stopping thresholds must be nonincreasing")

    def threshold(self, stage=None) -> float:
        if stage is None:
            return self.thresholds[-1]
        return self.thresholds[min(stage, len(self.thresholds) - 1)]


@dataclass
class TimeGroups:
    """Nodes partitioned by nearest-neighbor distance class, with one
    characteristic step per group (powers of two apart) and the visitation
    schedule for one coarse step."""
    groups: list          # node-index arrays
    taus: list            # tau_g, descending from the coarsest group
    mults: list           # m_g = tau_coarse / tau_g
    schedule: np.ndarray  # group ids, each g appearing m_g times
    coarse_tau: float

    def scaled(self, factor: float) -> "TimeGroups":
        return TimeGroups(self.groups, [t * factor for t in self.taus],
                          self.mults, self.schedule,
                          self.coarse_tau * factor)


def build_schedule(grid: QuadtreeGrid, op: OperatorSpec, u: GridFunction,
                   rng=None) -> TimeGroups:
    """Group active nodes by nearest-neighbor distance and assign each group
    the largest stable step of the form tau_coarse / 2^p."""
    u.check(grid)
    if rng is None:
        rng = np.random.default_rng(0)
    lip = op.lipschitz(u.values)
    active = op.active & (lip > 0)
    if not active.any():
        return TimeGroups([], [], [], np.empty(0, dtype=int), 0.0)
    dt = 1.0 / lip[active]
    idx = np.flatnonzero(active)
    spacing = np.array([grid.nodes[i].min_spacing for i in idx])

    groups, dts = [], []
    for s in sorted(set(spacing), reverse=True):
        sel = spacing == s
        groups.append(idx[sel])
        dts.append(float(dt[sel].min()))

    coarse_tau = dts[0]
    taus, mults = [], []
    for dtg in dts:
        p = 0 if dtg >= coarse_tau else max(0, math.ceil(
            math.log2(coarse_tau / dtg) - 1e-12))
        taus.append(coarse_tau / (1 << p))
        mults.append(1 << p)
    order = np.concatenate([np.full(m, gi) for gi, m in enumerate(mults)])
    schedule = rng.permutation(order)
    return TimeGroups(groups, taus, mults, schedule, coarse_tau)


def euler_step(op: OperatorSpec, grid: QuadtreeGrid, u: GridFunction,
               schedule: TimeGroups, work=None) -> GridFunction:
    """One coarse step: u_i <- u_i - tau_g F_i[u] simultaneously within each
    scheduled group, sequentially across groups."""
    u.check(grid)
    v = u.values.copy()
    for gid in schedule.schedule:
        rows = schedule.groups[gid]
        tau = schedule.taus[gid]
        lip = op.lipschitz(v, rows)
        if np.any(tau * lip > 1.0 + 1e-9):
            raise InstabilityError("group step %.3e exceeds 1/L = %.3e"
                                   % (tau, 1.0 / lip.max()))
        v[rows] -= tau * op.residual(v, rows)
        if work is not None:
            work.append(len(rows))
    return GridFunction(grid, v)


def evolve(op: OperatorSpec, grid: QuadtreeGrid, u0: GridFunction, T: float,
           policy=None, snapshot_times=(), seed: int = 0,
           regrid_every: int = 1, infill_cap: int = 20, log=None):
    """March u_t + F[u] = 0 to time T, regridding as the policy demands.

    Returns [(grid, u, t)] at the requested snapshot times (linearly
    interpolated inside the coarse step that crosses each).  Before stepping,
    the refinement loop runs on the interpolated initial data until no new
    cells are demanded.
    """
    if T <= 0:
        raise GridError("final time must be positive")
    rng = np.random.default_rng(seed)
    u = GridFunction(grid, op.apply_pins(u0.values))
    if policy is not None:
        for _ in range(infill_cap):
            vals = evaluate_criteria(policy, op, grid, u)
            reqs = compute_refinement(policy, vals, grid)
            g2, u2 = regrid(grid, u, reqs)
            if g2 is grid:
                break
            grid, u = g2, u2
            op = instantiate_builtin(op.kind, op.problem, grid)
            u = GridFunction(grid, op.apply_pins(u.values))

    times = sorted(snapshot_times)
    out = []
    t = 0.0
    nsnap = 0
    steps = 0
    while t < T - 1e-14:
        sched = build_schedule(grid, op, u, rng)
        if sched.coarse_tau == 0.0:
            tau = T - t
            u2 = u
        else:
            tau = min(sched.coarse_tau, T - t)
            if tau < sched.coarse_tau:
                sched = sched.scaled(tau / sched.coarse_tau)
            u2 = euler_step(op, grid, u, sched)
        while nsnap < len(times) and times[nsnap] <= t + tau + 1e-14:
            w = min(max((times[nsnap] - t) / tau, 0.0), 1.0)
            vals = (1 - w) * u.values + w * u2.values
            out.append((grid, GridFunction(grid, vals), times[nsnap]))
            nsnap += 1
        u = u2
        t += tau
        steps += 1
        if log is not None:
            log.append({"event": "euler", "t": t, "nodes": grid.n_nodes(),
                        "tau": tau})
        if policy is not None and steps % regrid_every == 0 and t < T - 1e-14:
            vals = evaluate_criteria(policy, op, grid, u)
            reqs = compute_refinement(policy, vals, grid)
            g2, u2b = regrid(grid, u, reqs)
            if g2 is not grid:
                grid, u = g2, u2b
                op = instantiate_builtin(op.kind, op.problem, grid)
                u = GridFunction(grid, op.apply_pins(u.values))
    return out


def newton_solve(op: OperatorSpec, grid: QuadtreeGrid, u0, stopping,
                 stage=None, max_iter: int = 100, lin_rtol: float = 1e-10,
                 log=None) -> GridFunction:
    """Semismooth Newton with full steps and a sparse direct linear solve.

    Stops when the max-norm of the residual over active nodes drops below
    the stopping threshold for this stage; the residual is checked before
    iterating, so a converged start returns immediately.
    """
    tol = stopping.threshold(stage) if isinstance(stopping, StoppingPolicy) \
        else float(stopping)
    vals = u0.values if isinstance(u0, GridFunction) else np.asarray(u0)
    u = op.apply_pins(vals)
    act = op.active
    if not act.any():
        return GridFunction(grid, u)
    iters = 0
    while True:
        r = op.residual(u)
        rnorm = float(np.max(np.abs(r[act])))
        if rnorm <= tol:
            return GridFunction(grid, u)
        if iters >= max_iter:
            raise NonconvergenceError(rnorm, iters)
        t0 = time.perf_counter()
        J = op.jacobian(u)[act][:, act].tocsc()
        ra = r[act]
        delta = spla.spsolve(J, -ra)
        if not np.all(np.isfinite(delta)):
            raise LinearSolveError("singular Jacobian")
        lin_res = np.linalg.norm(J @ delta + ra)
        if lin_res > lin_rtol * max(np.linalg.norm(ra), 1e-300):
            raise LinearSolveError("linear solve residual %.3e too large"
                                   % lin_res)
        u[act] += delta
        iters += 1
        if log is not None:
            log.append({"event": "newton", "nodes": grid.n_nodes(),
                        "iteration": iters, "residual": rnorm,
                        "wall": time.perf_counter() - t0})


def _trial_requests(grid: QuadtreeGrid, target_scale: int):
    """Every cell coarser than the target split one level: the probe grid on
    which refinement criteria see the current solution at finer resolution."""
    reqs = []
    for (a, b), k in grid.cells.items():
        if k > target_scale:
            h = 1 << (k - 1)
            for (ca, cb) in ((a, b), (a + h, b), (a, b + h), (a + h, b + h)):
                reqs.append(_square_request(grid, ca, cb, k - 1))
        else:
            reqs.append(_square_request(grid, a, b, k))
    return reqs


def multiscale_solve(op_factory, grid: QuadtreeGrid, u0, policy, stopping,
                     finest_scale=None, infill_cap: int = 6,
                     max_iter: int = 100, log=None, grid_watch=None):
    """Coarse-to-fine continuation: solve on the initial quadtree, then admit
    refinement one scale per stage.

    Per stage, the criteria are probed on a one-level-finer trial grid (the
    interpolated solution exposes its truncation error there), the demanded
    cells are clamped to the stage scale, and Newton re-solves after every
    regrid.  Stage k stops Newton at the k-th stopping threshold.
    """
    op = op_factory(grid)
    if grid_watch is not None:
        grid_watch(grid)
    u = newton_solve(op, grid, u0, stopping, stage=0, max_iter=max_iter,
                     log=log)
    present = sorted(set(grid.scales()), reverse=True)
    if finest_scale is None:
        finest_scale = min(policy.scales)
    start = present[1] if len(present) > 1 else present[0] - 1
    stage = 0
    for target in range(start, finest_scale - 1, -1):
        stage += 1
        for _ in range(infill_cap):
            trial, u_t = regrid(grid, u, _trial_requests(grid, target))
            op_t = op_factory(trial)
            u_t = GridFunction(trial, op_t.apply_pins(u_t.values))
            vals = evaluate_criteria(policy, op_t, trial, u_t)
            reqs = compute_refinement(policy, vals, trial,
                                      coarsest_allowed=target)
            # refinement accumulates down the ladder: solved regions must not
            # coarsen away just because their residual signal went quiet
            reqs += cells_as_requests(grid)
            g2, u2 = regrid(grid, u, reqs)
            if g2 is grid:
                break
            grid, u = g2, u2
            op = op_factory(grid)
            if grid_watch is not None:
                grid_watch(grid)
            u = newton_solve(op, grid, u, stopping, stage=stage,
                             max_iter=max_iter, log=log)
        u = newton_solve(op, grid, u, stopping, stage=stage,
                         max_iter=max_iter, log=log)
    return grid, u
