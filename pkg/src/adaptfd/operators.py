"""Per-node degenerate-elliptic residual operators on quadtree grids.

An operator evaluates F_i(u_i, grad u at x_i) at every active node, exposes
the generalized Jacobian of the active branch, and a per-node Lipschitz bound
whose reciprocal is the stable explicit time step.  Built-in kinds:

  poisson_dirichlet   F = (-Lap_h u) - f with boundary pins / Robin rows
  bc_composite        F = chi*(-Lap_h u - f) + (1-chi)*(u - g), plus an
                      optional first-order region (e.g. upwind Neumann bands)
  obstacle            F = min(-Lap_h u - f, u - g)
  stefan              F = -Lap_h u where u > 0, min(-Lap_h u, -|grad u|^2)
                      where u <= 0

All residuals are nondecreasing in u_i and in each difference u_i - u_j, so
ordered data give ordered solutions and CFL-bounded explicit steps contract.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from .grid import BOUNDARY, GridError, GridFunction, QuadtreeGrid
from .stencils import laplacian_system, one_sided_matrices

BUILTIN_KINDS = ("poisson_dirichlet", "bc_composite", "obstacle", "stefan")

# interior node roles
_PDE, _DATA, _HOP = 0, 1, 2


class OperatorError(GridError):
    """Bad operator construction (unknown kind, missing datum)."""


@dataclass
class ProblemDefinition:
    """Data defining one PDE problem; callables take physical (x, y).

    chi marks the PDE region for bc_composite (sampled at node coordinates:
    the grid, not the stencil, resolves the boundary).  robin supplies wall
    coefficient functions (x, y, nx, ny) -> value; when absent, walls are
    Dirichlet-pinned at g.  first_order optionally replaces the data branch
    on a node subset with a first-order degenerate-elliptic operator.
    """
    chi: object = None
    f: object = None
    g: object = None
    c: object = None
    d: object = None
    robin: tuple | None = None
    obstacle: bool = False
    stefan: bool = False
    first_order: object = None

    def sample(self, fn, grid, default=0.0):
        if fn is None:
            return np.full(grid.n_nodes(), default)
        return np.array([fn(n.x, n.y) for n in grid.nodes], dtype=float)


class UpwindDirectional:
    """First-order operator d_n u - rhs on a node region, discretized with
    the upwind difference per axis so the rows stay degenerate elliptic."""

    def __init__(self, region, direction, rhs):
        self.region = region          # (x, y) -> bool
        self.direction = direction    # (x, y) -> (nx, ny), need not be unit
        self.rhs = rhs                # (x, y) -> float

    def build(self, grid: QuadtreeGrid):
        nn = grid.n_nodes()
        mask = np.zeros(nn, dtype=bool)
        lip = np.zeros(nn)
        const = np.zeros(nn)
        rows, cols, vals = [], [], []

        def add(i, j, w):
            rows.append(i)
            cols.append(j)
            vals.append(w)

        for idx, n in enumerate(grid.nodes):
            if n.klass == BOUNDARY or not self.region(n.x, n.y):
                continue
            nx, ny = self.direction(n.x, n.y)
            mask[idx] = True
            const[idx] = -self.rhs(n.x, n.y)
            for comp, upw, axis in ((nx, "W", "x"), (-nx, "E", "x"),
                                    (ny, "S", "y"), (-ny, "N", "y")):
                if comp <= 0.0:
                    continue
                if upw in n.nbr:
                    dist = n.dist(upw)
                    add(idx, idx, comp / dist)
                    add(idx, n.nbr[upw], -comp / dist)
                elif n.coarse_side == upw and n.drv_pair is not None:
                    dist = n.band * (grid.hx if axis == "x" else grid.hy)
                    add(idx, idx, comp / dist)
                    add(idx, n.drv_pair[0], -0.5 * comp / dist)
                    add(idx, n.drv_pair[1], -0.5 * comp / dist)
                else:
                    raise OperatorError("no upwind neighbor for first-order "
                                        "row at (%d, %d)" % (n.i, n.j))
                lip[idx] += comp / dist
        M = sp.csr_matrix((vals, (rows, cols)), shape=(nn, nn))
        return mask, M, const, lip


@dataclass
class OperatorSpec:
    """A problem bound to one grid: residuals, Jacobians and CFL bounds."""
    kind: str
    problem: ProblemDefinition
    grid: QuadtreeGrid

    def __post_init__(self):
        grid = self.grid
        problem = self.problem
        nn = grid.n_nodes()
        self.name = self.kind
        self.fvals = problem.sample(problem.f, grid)
        self.gvals = problem.sample(problem.g, grid)

        self.L, self.Lconst, self.active, self.pins = \
            laplacian_system(grid, robin=problem.robin)
        if problem.robin is None:
            # Dirichlet walls pinned at g
            if problem.g is None and self.kind != "stefan":
                for n in grid.nodes:
                    if n.klass == BOUNDARY:
                        raise OperatorError(
                            "Dirichlet walls need a boundary datum g")
            for idx, n in enumerate(grid.nodes):
                if n.klass == BOUNDARY:
                    self.pins[idx] = self.gvals[idx]

        self.role = np.full(nn, _PDE, dtype=np.int8)
        self.weights = None
        if self.kind == "bc_composite":
            if problem.c is not None or problem.d is not None:
                # general weighted form c(x)*(PDE) + d(x)*(u - g)
                cvals = problem.sample(problem.c, grid, default=1.0)
                dvals = problem.sample(problem.d, grid, default=0.0)
                if np.any(cvals < 0) or np.any(dvals < 0):
                    raise OperatorError("weights c, d must be nonnegative")
                self.weights = (cvals, dvals)
            elif problem.chi is None:
                raise OperatorError("bc_composite needs a domain indicator "
                                    "or weights")
            if problem.chi is not None:
                chi = np.array([1 if problem.chi(n.x, n.y) else 0
                                for n in grid.nodes], dtype=np.int8)
                self.role[(chi == 0)] = _DATA
        if problem.first_order is not None:
            mask, M, const, lip = problem.first_order.build(grid)
            self.role[mask] = _HOP
            self.hop = (M, const, lip)
        else:
            self.hop = None
        self.role[~self.active] = _DATA   # pins never evaluate PDE rows

        if self.kind in ("obstacle",) and problem.g is None:
            raise OperatorError("obstacle needs an obstacle datum g")
        if self.kind == "stefan":
            self.T, self.Thave = one_sided_matrices(grid)
            # largest axis difference weight per node, for the CFL bound
            self.wx_max = np.zeros(nn)
            self.wy_max = np.zeros(nn)
            for idx, n in enumerate(grid.nodes):
                for s, arr in (("E", self.wx_max), ("W", self.wx_max),
                               ("N", self.wy_max), ("S", self.wy_max)):
                    if s in n.nbr:
                        arr[idx] = max(arr[idx], 1.0 / n.dist(s))
                    elif n.coarse_side == s:
                        h = grid.hx if s in ("E", "W") else grid.hy
                        arr[idx] = max(arr[idx], 1.0 / (n.band * h))
        self.wbar = self.L.diagonal()

    # -- helpers ----------------------------------------------------------

    def apply_pins(self, u: np.ndarray) -> np.ndarray:
        u = np.asarray(u, dtype=float).copy()
        u[~self.active] = self.pins[~self.active]
        return u

    def pde_residual(self, u: np.ndarray, rows=None) -> np.ndarray:
        if rows is None:
            return self.L @ u + self.Lconst - self.fvals
        return self.L[rows] @ u + self.Lconst[rows] - self.fvals[rows]

    def _gradient_sq(self, u, rows=None):
        def tmat(d):
            return self.T[d] if rows is None else self.T[d][rows]

        def hmask(d):
            return self.Thave[d] if rows is None else self.Thave[d][rows]

        cE = tmat("E") @ u
        cW = tmat("W") @ u
        cN = tmat("N") @ u
        cS = tmat("S") @ u
        for c, h in ((cE, "E"), (cW, "W"), (cN, "N"), (cS, "S")):
            c[~hmask(h)] = -np.inf
        rx = np.maximum(np.maximum(cE, cW), 0.0)
        ry = np.maximum(np.maximum(cN, cS), 0.0)
        selE = hmask("E") & (cE >= cW) & (rx > 0)
        selW = hmask("W") & (cW > cE) & (rx > 0)
        selN = hmask("N") & (cN >= cS) & (ry > 0)
        selS = hmask("S") & (cS > cN) & (ry > 0)
        return rx, ry, (selE, selW, selN, selS)

    # -- operator surface ---------------------------------------------------

    def residual(self, u: np.ndarray, rows=None) -> np.ndarray:
        u = np.asarray(u, dtype=float)
        sub = (lambda a: a) if rows is None else (lambda a: a[rows])
        pde = self.pde_residual(u, rows)
        if self.weights is not None:
            c, d = self.weights
            out = sub(c) * pde + sub(d) * (sub(u) - sub(self.gvals))
            out[~sub(self.active)] = 0.0
            return out
        out = np.where(sub(self.role) == _DATA, sub(u) - sub(self.gvals), pde)
        if self.hop is not None:
            M, const, _ = self.hop
            hop = (M @ u + const) if rows is None else (M[rows] @ u + const[rows])
            out = np.where(sub(self.role) == _HOP, hop, out)
        if self.kind == "obstacle":
            out = np.minimum(pde, sub(u) - sub(self.gvals))
        elif self.kind == "stefan":
            rx, ry, _ = self._gradient_sq(u, rows)
            gsq = rx * rx + ry * ry
            out = np.where(sub(u) > 0, pde, np.minimum(pde, -gsq))
        out[~sub(self.active)] = 0.0
        return out

    def branches(self, u: np.ndarray) -> np.ndarray:
        """Active branch per node: 0 = PDE row, 1 = identity-like row,
        2 = first-order row, 3 = gradient-square row.  Ties go to the PDE."""
        u = np.asarray(u, dtype=float)
        br = np.where(self.role == _DATA, 1, 0).astype(np.int8)
        if self.hop is not None:
            br[self.role == _HOP] = 2
        if self.kind == "obstacle":
            pde = self.pde_residual(u)
            br = np.where(pde <= u - self.gvals, 0, 1).astype(np.int8)
        elif self.kind == "stefan":
            pde = self.pde_residual(u)
            rx, ry, _ = self._gradient_sq(u)
            gsq = rx * rx + ry * ry
            br = np.where((u <= 0) & (pde > -gsq), 3, 0).astype(np.int8)
        return br

    def jacobian(self, u: np.ndarray) -> sp.csr_matrix:
        """Exact generalized Jacobian (all nodes; inactive rows are zero)."""
        u = np.asarray(u, dtype=float)
        nn = self.grid.n_nodes()
        mask = sp.diags(self.active.astype(float))
        if self.weights is not None:
            c, d = self.weights
            J = sp.diags(c) @ self.L + sp.diags(d) @ sp.eye(nn, format="csr")
            return (mask @ J).tocsr()
        br = self.branches(u)
        d0 = sp.diags((br == 0).astype(float))
        d1 = sp.diags((br == 1).astype(float))
        J = d0 @ self.L + d1 @ sp.eye(nn, format="csr")
        if self.hop is not None:
            J = J + sp.diags((br == 2).astype(float)) @ self.hop[0]
        if self.kind == "stefan":
            rx, ry, (selE, selW, selN, selS) = self._gradient_sq(u)
            Sx = sp.diags(selE.astype(float)) @ self.T["E"] \
                + sp.diags(selW.astype(float)) @ self.T["W"]
            Sy = sp.diags(selN.astype(float)) @ self.T["N"] \
                + sp.diags(selS.astype(float)) @ self.T["S"]
            Jg = sp.diags(-2.0 * rx) @ Sx + sp.diags(-2.0 * ry) @ Sy
            J = J + sp.diags((br == 3).astype(float)) @ Jg
        return (mask @ J).tocsr()

    def lipschitz(self, u: np.ndarray, rows=None) -> np.ndarray:
        """Per-node bound on dF_i/du_i over the active branches."""
        u = np.asarray(u, dtype=float)
        sub = (lambda a: a) if rows is None else (lambda a: a[rows])
        lip = sub(self.wbar).copy()
        if self.weights is not None:
            c, d = self.weights
            lip = sub(c) * lip + sub(d)
        elif self.kind in ("poisson_dirichlet", "bc_composite"):
            lip = np.where(sub(self.role) == _DATA, 1.0, lip)
            if self.hop is not None:
                lip = np.where(sub(self.role) == _HOP, sub(self.hop[2]), lip)
        elif self.kind == "stefan":
            rx, ry, _ = self._gradient_sq(u, rows)
            gl = 2.0 * (rx * sub(self.wx_max) + ry * sub(self.wy_max))
            lip = np.where(sub(u) <= 0, np.maximum(lip, gl), lip)
        # obstacle: same restriction as the pure Laplacian
        lip[~sub(self.active)] = 0.0
        return lip


def instantiate_builtin(kind: str, problem: ProblemDefinition,
                        grid: QuadtreeGrid) -> OperatorSpec:
    if kind not in BUILTIN_KINDS:
        raise OperatorError("unknown operator kind %r" % (kind,))
    return OperatorSpec(kind, problem, grid)


def assemble_residual(op: OperatorSpec, grid: QuadtreeGrid,
                      u: GridFunction) -> GridFunction:
    u.check(grid)
    return GridFunction(grid, op.residual(u.values))


def assemble_jacobian(op: OperatorSpec, grid: QuadtreeGrid,
                      u: GridFunction) -> sp.csr_matrix:
    """Generalized Jacobian rows for the active nodes (one row per active
    unknown, columns over all nodes)."""
    u.check(grid)
    J = op.jacobian(u.values)
    return J[op.active]


def cfl_bounds(op: OperatorSpec, grid: QuadtreeGrid,
               u: GridFunction) -> GridFunction:
    """Per-node explicit time step dt_i = 1/L_i; +inf where decoupled."""
    u.check(grid)
    lip = op.lipschitz(u.values)
    with np.errstate(divide="ignore"):
        dt = np.where(lip > 0, 1.0 / lip, np.inf)
    return GridFunction(grid, dt)


def dump_triplets(matrix) -> str:
    """`row col value` text dump of a sparse matrix for offline inspection."""
    coo = sp.coo_matrix(matrix)
    order = np.lexsort((coo.col, coo.row))
    lines = ["%d %d %r" % (coo.row[k], coo.col[k], float(coo.data[k]))
             for k in order]
    return "\n".join(lines) + "\n"
