import math

import numpy as np
import pytest
import scipy.sparse.linalg as spla

from adaptfd.grid import (BOUNDARY, DomainBox, GridFunction, ScaleRequest,
                          build_quadtree)
from adaptfd.operators import (OperatorError, ProblemDefinition,
                               UpwindDirectional, assemble_jacobian,
                               assemble_residual, cfl_bounds,
                               instantiate_builtin)
from adaptfd.stencils import laplacian_row
from oracles import random_requests

UNIT = DomainBox(0.0, 1.0, 0.0, 1.0)


def uniform_grid(depth, box=UNIT):
    side = 1 << depth
    reqs = [ScaleRequest(box.x_min + (i + 0.5) * box.lx / side,
                         box.y_min + (j + 0.5) * box.ly / side, 0)
            for i in range(side) for j in range(side)]
    return build_quadtree(reqs, depth, box, pads=(1, 1))


def field(grid, f):
    return np.array([f(n.x, n.y) for n in grid.nodes])


def gfun(grid, f):
    return GridFunction(grid, field(grid, f))


def linear_solve(op, grid):
    """Direct solve of a linear operator, for test setup only."""
    u = op.apply_pins(np.zeros(grid.n_nodes()))
    r = op.residual(u)
    J = op.jacobian(u)
    act = op.active
    delta = spla.spsolve(J[act][:, act].tocsc(), -r[act])
    u[act] += delta
    return u


def test_unknown_kind_rejected():
    g = uniform_grid(2)
    with pytest.raises(OperatorError):
        instantiate_builtin("biharmonic", ProblemDefinition(), g)


def test_missing_datum_rejected():
    g = uniform_grid(2)
    with pytest.raises(OperatorError):
        instantiate_builtin("obstacle", ProblemDefinition(), g)
    with pytest.raises(OperatorError):
        instantiate_builtin("bc_composite", ProblemDefinition(g=lambda x, y: 0.0), g)


def test_obstacle_flat_zero_state_solves():
    g = uniform_grid(3)
    prob = ProblemDefinition(g=lambda x, y: -1.0,
                             robin=(lambda x, y, nx, ny: 0.0,
                                    lambda x, y, nx, ny: 1.0,
                                    lambda x, y, nx, ny: 0.0))
    op = instantiate_builtin("obstacle", prob, g)
    u = GridFunction(g, op.apply_pins(np.zeros(g.n_nodes())))
    r = assemble_residual(op, g, u)
    assert np.max(np.abs(r.values)) == pytest.approx(0.0, abs=1e-14)


def test_stefan_zero_state_is_stationary():
    g = uniform_grid(3)
    op = instantiate_builtin("stefan", ProblemDefinition(), g)
    u = GridFunction(g, np.zeros(g.n_nodes()))
    r = assemble_residual(op, g, u)
    assert np.max(np.abs(r.values)) == 0.0


def test_bc_composite_rows_match_independent_assembly():
    g = build_quadtree([ScaleRequest(0.5, 0.5, 0)], 3, UNIT, pads=(1, 1))
    chi = lambda x, y: (x - 0.5) ** 2 + (y - 0.5) ** 2 < 0.16
    ffun = lambda x, y: 1.0 + x
    gfun_ = lambda x, y: x * y
    prob = ProblemDefinition(chi=chi, f=ffun, g=gfun_)
    op = instantiate_builtin("bc_composite", prob, g)
    rng = np.random.default_rng(2)
    u = rng.normal(size=g.n_nodes())
    r = op.residual(u)
    for idx, n in enumerate(g.nodes):
        if n.klass == BOUNDARY:
            assert r[idx] == 0.0
            continue
        if chi(n.x, n.y):
            want = laplacian_row(g, n).evaluate(u) - ffun(n.x, n.y)
        else:
            want = u[idx] - gfun_(n.x, n.y)
        assert r[idx] == pytest.approx(want, rel=1e-12, abs=1e-12)


def test_poisson_residual_zero_at_discrete_solution():
    g = uniform_grid(3)
    prob = ProblemDefinition(f=lambda x, y: math.sin(math.pi * x),
                             g=lambda x, y: 0.0)
    op = instantiate_builtin("poisson_dirichlet", prob, g)
    u = linear_solve(op, g)
    assert np.max(np.abs(op.residual(u))) < 1e-10


def test_manufactured_residual_is_truncation_error():
    # with u = g everywhere and f = -Lap g, the residual reduces to the
    # second-order truncation error of the stencil
    errs = []
    for depth in (3, 4):
        g = uniform_grid(depth)
        gexact = lambda x, y: math.sin(math.pi * x) * math.sin(math.pi * y)
        lap_g = lambda x, y: -2 * math.pi ** 2 * gexact(x, y)
        prob = ProblemDefinition(chi=lambda x, y: True,
                                 f=lambda x, y: -lap_g(x, y),
                                 g=gexact)
        op = instantiate_builtin("bc_composite", prob, g)
        u = gfun(g, gexact)
        r = assemble_residual(op, g, u)
        errs.append(np.max(np.abs(r.values)))
    assert errs[1] < 0.3 * errs[0]


def test_obstacle_residual_at_obstacle_nonpositive():
    g = uniform_grid(3)
    gobs = lambda x, y: math.sin(2 * x + y)
    prob = ProblemDefinition(g=gobs)
    op = instantiate_builtin("obstacle", prob, g)
    u = gfun(g, gobs)
    r = assemble_residual(op, g, u)
    assert np.all(r.values <= 1e-12)


def test_linear_jacobian_independent_of_state():
    g = uniform_grid(3)
    prob = ProblemDefinition(f=lambda x, y: 1.0, g=lambda x, y: 0.0)
    op = instantiate_builtin("poisson_dirichlet", prob, g)
    rng = np.random.default_rng(3)
    J1 = op.jacobian(rng.normal(size=g.n_nodes()))
    J2 = op.jacobian(rng.normal(size=g.n_nodes()))
    assert (J1 - J2).nnz == 0
    # interior rows are the Laplacian rows
    u = rng.normal(size=g.n_nodes())
    interior = [i for i, n in enumerate(g.nodes) if n.klass != BOUNDARY]
    lu = J1 @ u
    for idx in interior:
        assert lu[idx] == pytest.approx(
            laplacian_row(g, g.nodes[idx]).evaluate(u), rel=1e-12, abs=1e-12)


def test_obstacle_jacobian_identity_row_on_contact_branch():
    g = uniform_grid(3)
    prob = ProblemDefinition(g=lambda x, y: 0.0,
                             robin=(lambda *a: 0.0, lambda *a: 1.0,
                                    lambda *a: 5.0))
    op = instantiate_builtin("obstacle", prob, g)
    # deep in contact: u - g < pde strictly somewhere
    u = op.apply_pins(field(g, lambda x, y: -x * (1 - x) * y * (1 - y)))
    J = op.jacobian(u)
    br = op.branches(u)
    for idx, n in enumerate(g.nodes):
        if n.klass == BOUNDARY or br[idx] != 1:
            continue
        row = J.getrow(idx)
        assert row.nnz == 1 and row[0, idx] == pytest.approx(1.0)


def test_jacobian_matches_finite_differences():
    rng = np.random.default_rng(5)
    kinds = ("poisson_dirichlet", "bc_composite", "obstacle", "stefan")
    for trial in range(8):
        depth = int(rng.integers(2, 5))
        grid = build_quadtree(random_requests(rng, depth, 4, UNIT), depth,
                              UNIT, pads=(1, 1))
        kind = kinds[trial % 4]
        prob = ProblemDefinition(
            chi=(lambda x, y: x + y < 1.1) if kind == "bc_composite" else None,
            f=lambda x, y: math.cos(3 * x) * y,
            g=lambda x, y: 0.3 * math.sin(4 * x * y))
        op = instantiate_builtin(kind, prob, grid)
        u = op.apply_pins(rng.normal(size=grid.n_nodes()))
        J = op.jacobian(u)
        r0 = op.residual(u)
        eps = 1e-6
        cols = rng.choice(np.flatnonzero(op.active),
                          size=min(12, int(op.active.sum())), replace=False)
        for jcol in cols:
            up = u.copy()
            up[jcol] += eps
            um = u.copy()
            um[jcol] -= eps
            fd = (op.residual(up) - op.residual(um)) / (2 * eps)
            col = np.asarray(J[:, jcol].todense()).ravel()
            # skip rows that straddle a branch tie
            rows = np.flatnonzero(np.abs(fd - col) >
                                  1e-6 * np.maximum(1.0, np.abs(col)))
            for i in rows:
                bru = op.branches(up)[i]
                brm = op.branches(um)[i]
                assert bru != brm, (kind, i, jcol, fd[i], col[i])


def test_cfl_uniform_laplacian_quarter_h_squared():
    g = uniform_grid(3)
    h = 1.0 / 8.0
    prob = ProblemDefinition(f=lambda x, y: 0.0, g=lambda x, y: 0.0)
    op = instantiate_builtin("poisson_dirichlet", prob, g)
    u = GridFunction(g, np.zeros(g.n_nodes()))
    dt = cfl_bounds(op, g, u)
    for idx, n in enumerate(g.nodes):
        if n.klass == BOUNDARY:
            assert dt.values[idx] == np.inf
        else:
            assert dt.values[idx] == pytest.approx(h * h / 4)


def test_cfl_obstacle_same_as_laplacian():
    g = uniform_grid(3)
    probp = ProblemDefinition(f=lambda x, y: 0.0, g=lambda x, y: 0.0)
    probo = ProblemDefinition(g=lambda x, y: 0.0,
                              robin=(lambda *a: 0.0, lambda *a: 1.0,
                                     lambda *a: 0.0))
    opp = instantiate_builtin("poisson_dirichlet", probp, g)
    opo = instantiate_builtin("obstacle", probo, g)
    rng = np.random.default_rng(9)
    u = GridFunction(g, rng.normal(size=g.n_nodes()))
    dtp = cfl_bounds(opp, g, u).values
    dto = cfl_bounds(opo, g, u).values
    act = opp.active
    assert np.allclose(dtp[act], dto[act])


def test_degenerate_ellipticity_probe_all_builtins():
    rng = np.random.default_rng(13)
    for trial in range(60):
        depth = int(rng.integers(2, 5))
        grid = build_quadtree(random_requests(rng, depth, 3, UNIT), depth,
                              UNIT, pads=(1, 1))
        kind = ("poisson_dirichlet", "bc_composite", "obstacle",
                "stefan")[trial % 4]
        prob = ProblemDefinition(
            chi=(lambda x, y: x < 0.6) if kind == "bc_composite" else None,
            f=lambda x, y: x - y, g=lambda x, y: 0.2 * math.sin(5 * x))
        op = instantiate_builtin(kind, prob, grid)
        if not op.active.any():
            continue
        u = op.apply_pins(rng.normal(size=grid.n_nodes()))
        r0 = op.residual(u)
        i = int(rng.choice(np.flatnonzero(op.active)))
        # raising u_i does not lower F_i
        u_up = u.copy()
        u_up[i] += 0.3
        assert op.residual(u_up)[i] >= r0[i] - 1e-12
        # raising any other value does not raise F_i
        j = int(rng.integers(0, grid.n_nodes()))
        if j != i:
            u_j = u.copy()
            u_j[j] += 0.3
            assert op.residual(u_j)[i] <= r0[i] + 1e-12


def test_comparison_principle_bc_composite():
    rng = np.random.default_rng(17)
    for _ in range(10):
        depth = int(rng.integers(2, 5))
        grid = build_quadtree(random_requests(rng, depth, 3, UNIT), depth,
                              UNIT, pads=(1, 1))
        a, b = sorted(rng.normal(size=2))
        f1 = lambda x, y: a + math.sin(3 * x) - 1.0
        f2 = lambda x, y: b + math.sin(3 * x)
        g1 = lambda x, y: 0.1 * x - 0.2
        g2 = lambda x, y: 0.1 * x
        chi = lambda x, y: (x - 0.5) ** 2 + (y - 0.5) ** 2 < 0.1
        u1 = linear_solve(instantiate_builtin(
            "bc_composite", ProblemDefinition(chi=chi, f=f1, g=g1), grid), grid)
        u2 = linear_solve(instantiate_builtin(
            "bc_composite", ProblemDefinition(chi=chi, f=f2, g=g2), grid), grid)
        assert np.all(u1 <= u2 + 1e-10)


def test_first_order_region_rows():
    g = uniform_grid(3)
    region = lambda x, y: 0.3 < x < 0.7 and 0.3 < y < 0.7
    hop = UpwindDirectional(region,
                            direction=lambda x, y: (1.0, 0.0),
                            rhs=lambda x, y: 1.0)
    prob = ProblemDefinition(chi=lambda x, y: not region(x, y),
                             f=lambda x, y: 0.0, g=lambda x, y: 0.0,
                             first_order=hop)
    op = instantiate_builtin("bc_composite", prob, g)
    # du/dx - 1 with u = x evaluates to zero on the region
    u = field(g, lambda x, y: x)
    r = op.residual(u)
    for idx, n in enumerate(g.nodes):
        if n.klass != BOUNDARY and region(n.x, n.y):
            assert r[idx] == pytest.approx(0.0, abs=1e-12)


def test_generation_mismatch_detected():
    g = uniform_grid(2)
    prob = ProblemDefinition(f=lambda x, y: 0.0, g=lambda x, y: 0.0)
    op = instantiate_builtin("poisson_dirichlet", prob, g)
    u = GridFunction(g, np.zeros(g.n_nodes()), generation=g.generation + 1)
    from adaptfd.grid import GenerationMismatchError
    with pytest.raises(GenerationMismatchError):
        assemble_residual(op, g, u)


def test_weighted_composite_form():
    g = uniform_grid(3)
    cfun = lambda x, y: x + 0.5
    dfun = lambda x, y: 2.0 * y
    gfun_ = lambda x, y: 0.3 * x
    prob = ProblemDefinition(c=cfun, d=dfun, f=lambda x, y: 1.0, g=gfun_)
    op = instantiate_builtin("bc_composite", prob, g)
    rng = np.random.default_rng(7)
    u = op.apply_pins(rng.normal(size=g.n_nodes()))
    r = op.residual(u)
    for idx, n in enumerate(g.nodes):
        if n.klass == BOUNDARY:
            continue
        pde = laplacian_row(g, n).evaluate(u) - 1.0
        want = cfun(n.x, n.y) * pde + dfun(n.x, n.y) * (u[idx] - gfun_(n.x, n.y))
        assert r[idx] == pytest.approx(want, rel=1e-12, abs=1e-12)
    # jacobian is the matching linear combination
    J = op.jacobian(u)
    v = rng.normal(size=g.n_nodes())
    eps = 1e-7
    fd = (op.residual(u + eps * v) - op.residual(u - eps * v)) / (2 * eps)
    assert np.allclose((J @ v)[op.active], fd[op.active], rtol=1e-6, atol=1e-6)


def test_weighted_composite_rejects_negative_weights():
    g = uniform_grid(2)
    prob = ProblemDefinition(c=lambda x, y: -1.0, g=lambda x, y: 0.0)
    with pytest.raises(OperatorError):
        instantiate_builtin("bc_composite", prob, g)


def test_assemble_jacobian_row_count_is_active_count():
    g = uniform_grid(3)
    prob = ProblemDefinition(g=lambda x, y: -0.5,
                             robin=(lambda *a: 0.0, lambda *a: 1.0,
                                    lambda *a: 0.0))
    op = instantiate_builtin("obstacle", prob, g)
    u = GridFunction(g, op.apply_pins(np.zeros(g.n_nodes())))
    J = assemble_jacobian(op, g, u)
    assert J.shape == (int(op.active.sum()), g.n_nodes())
