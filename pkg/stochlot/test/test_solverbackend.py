import itertools
import math
import sys

import numpy as np
import pytest
from scipy.optimize import linprog

from stochlot import solverbackend
from stochlot.milpmodel import (EQ, GE, LE, MilpModel, VariableRef,
                                buildImplicit)
from stochlot.solverbackend import (BACKEND_ENV, ERROR, EXTERNAL_CMD_ENV,
                                    FEASIBLE_LIMIT, INFEASIBLE, OPTIMAL,
                                    UNBOUNDED, BranchAndBound,
                                    ExternalBackend, SimplexSolver,
                                    SolverConfig, SolverError, exportLpFile,
                                    solve, solveLp, solveLpFile)


def randomMilp(seed):
    """Binaries y, continuous x in [0, 10], four <= rows and one >= row."""

    rng = np.random.default_rng(seed)
    n_bin, n_cont = int(rng.integers(3, 7)), 3
    model = MilpModel('random-{}'.format(seed))
    ys = [VariableRef('y', k, 0) for k in range(n_bin)]
    xs = [VariableRef('x', k, 0) for k in range(n_cont)]
    for ref in ys:
        model.addVariable(ref, 0.0, 1.0, integer=True)
    for ref in xs:
        model.addVariable(ref, 0.0, 10.0)
    for ref in ys + xs:
        model.addObjective(ref, float(rng.integers(-10, 11)))
    model.objective_constant = 7.0
    for _ in range(4):
        coefs = rng.integers(-5, 6, size=n_bin + n_cont).astype(float)
        model.addConstraint(list(zip(ys + xs, coefs)), LE,
                            float(rng.integers(0, 10)))
    model.addConstraint([(ref, 1.0) for ref in ys + xs], GE,
                        float(rng.integers(1, 6)))
    return model, n_bin


def enumerationOracle(model, n_bin):
    """Best objective over all binary vectors, inf when infeasible."""

    c, a, senses, b, lower, upper, _ = model.toArrays()
    a_ub = np.where(np.array(senses)[:, None] == GE, -a, a)
    b_ub = np.where(np.array(senses) == GE, -b, b)
    best = math.inf
    for ys in itertools.product((0.0, 1.0), repeat=n_bin):
        ys = np.array(ys)
        result = linprog(c[n_bin:], A_ub=a_ub[:, n_bin:],
                         b_ub=b_ub - a_ub[:, :n_bin] @ ys,
                         bounds=list(zip(lower[n_bin:], upper[n_bin:])),
                         method='highs')
        if result.status == 0:
            best = min(best, result.fun + c[:n_bin] @ ys)
    return best + model.objective_constant


@pytest.mark.parametrize('seed', range(50))
def test_branch_and_bound_matches_enumeration(seed, exactConfig):
    model, n_bin = randomMilp(seed)
    expected = enumerationOracle(model, n_bin)
    result = BranchAndBound(exactConfig).solve(model)
    if math.isinf(expected):
        assert result.status == INFEASIBLE
        return
    assert result.status == OPTIMAL
    assert result.objective == pytest.approx(expected, abs=1e-6)
    assert model.maxViolation(result.x) <= 1e-6
    assert result.gap <= exactConfig.mip_gap


@pytest.mark.parametrize('seed', range(10))
def test_bound_trace_is_monotone(seed, exactConfig):
    model, _ = randomMilp(seed)
    result = BranchAndBound(exactConfig).solve(model)
    if not result.hasSolution:
        return
    bounds = [bound for _, bound, _ in result.trace]
    assert all(later >= earlier - 1e-9
               for earlier, later in zip(bounds, bounds[1:]))
    assert result.bound <= result.objective + 1e-6
    assert result.node_count == result.trace[-1][0]


@pytest.mark.parametrize('seed', range(10))
def test_simplex_matches_linprog(seed):
    rng = np.random.default_rng(100 + seed)
    n, m = 6, 4
    lower = rng.integers(-5, 1, size=n).astype(float)
    upper = lower + rng.integers(1, 8, size=n)
    lower[4], upper[4] = -math.inf, 5.0
    lower[5], upper[5] = -math.inf, math.inf
    x0 = np.clip(rng.uniform(-3, 3, size=n), lower, upper)
    a = rng.integers(-4, 5, size=(m, n)).astype(float)
    senses = [EQ, LE, GE, LE]
    b = a @ x0 + np.array([0.0, 1.0, -1.0, 0.5])
    c = rng.integers(-5, 6, size=n).astype(float)
    c[4], c[5] = -1.0, 0.0
    ours = SimplexSolver().solve(c, a, senses, b, lower, upper)
    a_ub = np.vstack([a[1], -a[2], a[3]])
    b_ub = np.array([b[1], -b[2], b[3]])
    theirs = linprog(c, A_ub=a_ub, b_ub=b_ub, A_eq=a[:1], b_eq=b[:1],
                     bounds=[(lo if np.isfinite(lo) else None,
                              hi if np.isfinite(hi) else None)
                             for lo, hi in zip(lower, upper)],
                     method='highs')
    assert theirs.status == 0
    assert ours.status == OPTIMAL
    assert ours.objective == pytest.approx(theirs.fun, abs=1e-6)


def degenerateLps():
    """A redundant equality system and Beale's cycling example."""

    inf = math.inf
    redundant = ([-1.0, -1.0, 0.0],
                 [[1.0, 1.0, 1.0], [2.0, 2.0, 2.0], [1.0, -1.0, 0.0],
                  [1.0, 1.0, 0.0]],
                 [EQ, EQ, LE, LE], [1.0, 2.0, 0.0, 1.0],
                 [0.0] * 3, [1.0] * 3, -1.0)
    beale = ([-0.75, 20.0, -0.5, 6.0],
             [[0.25, -8.0, -1.0, 9.0], [0.5, -12.0, -0.5, 3.0],
              [0.0, 0.0, 1.0, 0.0]],
             [LE, LE, LE], [0.0, 0.0, 1.0],
             [0.0] * 4, [inf] * 4, -1.25)
    return [redundant, beale]


@pytest.mark.parametrize('bland_after', [solverbackend.DEGENERATE_PIVOTS, 0])
@pytest.mark.parametrize('case', range(2))
def test_degenerate_lps_terminate(case, bland_after, monkeypatch):
    monkeypatch.setattr(solverbackend, 'DEGENERATE_PIVOTS', bland_after)
    c, a, senses, b, lower, upper, expected = degenerateLps()[case]
    result = SimplexSolver().solve(c, a, senses, b, lower, upper)
    assert result.status == OPTIMAL
    assert result.objective == pytest.approx(expected, abs=1e-9)


def test_infeasible_and_unbounded():
    model = MilpModel()
    x = VariableRef('x')
    model.addVariable(x, 0.0, 1.0, integer=True)
    model.addConstraint([(x, 1.0)], GE, 2.0)
    assert solve(model).status == INFEASIBLE

    model = MilpModel()
    model.addVariable(x, 0.0, math.inf)
    model.addObjective(x, -1.0)
    assert solveLp(model).status == UNBOUNDED
    assert solve(model).status == UNBOUNDED


def test_integer_columns_need_finite_bounds():
    model = MilpModel()
    model.addVariable(VariableRef('n'), 0.0, math.inf, integer=True)
    with pytest.raises(SolverError):
        solve(model)


def fractionalRoot():
    model = MilpModel()
    refs = [VariableRef('y', k, 0) for k in range(2)]
    for ref in refs:
        model.addVariable(ref, 0.0, 1.0, integer=True)
        model.addObjective(ref, -1.0)
    model.addConstraint([(ref, 2.0) for ref in refs], LE, 3.0)
    return model


def test_limits_without_incumbent_are_errors():
    result = solve(fractionalRoot(), SolverConfig(max_nodes=1))
    assert result.status == ERROR
    assert 'node limit' in result.message
    assert solve(fractionalRoot()).objective == pytest.approx(-1.0)


def test_node_limit_with_incumbent(exactConfig):
    model, _ = randomMilp(3)
    full = BranchAndBound(exactConfig).solve(model)
    for max_nodes in range(1, full.node_count):
        limited = solve(model, SolverConfig(max_nodes=max_nodes,
                                            mip_gap=1e-9))
        assert limited.status in (FEASIBLE_LIMIT, ERROR)
        if limited.status == FEASIBLE_LIMIT:
            assert limited.bound <= full.objective + 1e-6
            assert limited.objective >= full.objective - 1e-6


def test_relaxation_bounds_the_mip(tiny, tinyTree):
    model = buildImplicit(tiny, tinyTree)
    relaxed = solveLp(model)
    exact = solve(model)
    assert relaxed.status == OPTIMAL
    assert relaxed.objective <= exact.objective + 1e-6


def test_config_validation_and_files(tmp_path):
    with pytest.raises(SolverError):
        SolverConfig(time_limit=0)
    with pytest.raises(SolverError):
        SolverConfig(node_selection='depth-first')
    config = SolverConfig(time_limit=5.0, max_nodes=100)
    config.saveConfig(tmp_path / 'solver.json')
    assert SolverConfig.getConfig(tmp_path / 'solver.json') == config
    (tmp_path / 'bad.json').write_text('{"speed": 1}')
    with pytest.raises(SolverError):
        SolverConfig.getConfig(tmp_path / 'bad.json')


def test_lp_file_solve_matches_model(tiny, tinyTree, tmp_path):
    model = buildImplicit(tiny, tinyTree)
    exportLpFile(model, tmp_path / 'implicit.lp')
    loaded, result = solveLpFile(tmp_path / 'implicit.lp')
    assert loaded.numVariables == model.numVariables
    assert result.objective == pytest.approx(solve(model).objective,
                                             abs=1e-6)


def test_unknown_backend(monkeypatch):
    with pytest.raises(SolverError):
        solve(fractionalRoot(), backend='cloud')
    monkeypatch.setenv(BACKEND_ENV, 'cloud')
    with pytest.raises(SolverError):
        solve(fractionalRoot())


def test_external_backend_needs_command(monkeypatch):
    monkeypatch.delenv(EXTERNAL_CMD_ENV, raising=False)
    with pytest.raises(SolverError):
        ExternalBackend()


def test_external_backend_round_trip(tmp_path, monkeypatch):
    script = tmp_path / 'fake_solver.py'
    script.write_text(
        'import sys\n'
        'lp, sol = sys.argv[1], sys.argv[2]\n'
        'assert open(lp).read().startswith("\\\\")\n'
        'open(sol, "w").write("y_0_0 1\\ny_1_0 0\\n")\n')
    monkeypatch.setenv(EXTERNAL_CMD_ENV, '{} {} {{lp}} {{sol}}'.format(
        sys.executable, script))
    result = solve(fractionalRoot(), backend='external')
    assert result.status == OPTIMAL
    assert result.objective == pytest.approx(-1.0)
    assert result.values[VariableRef('y', 0, 0)] == 1.0


def test_external_backend_failure(tmp_path):
    script = tmp_path / 'broken_solver.py'
    script.write_text('import sys\nsys.exit(3)\n')
    backend = ExternalBackend('{} {} {{lp}} {{sol}}'.format(sys.executable,
                                                            script))
    result = backend.solve(fractionalRoot())
    assert result.status == ERROR
    assert '3' in result.message
