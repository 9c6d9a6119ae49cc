"""
Solver backends
Built-in exact MILP solver (bounded-variable primal simplex inside a
branch-and-bound search over integer columns) and an adapter that hands
LP files to an external solver command
"""

import heapq
import json
import logging
import math
import os
import shlex
import subprocess
import tempfile
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from stochlot.lpformat import readLpFile, readSolution, writeLpFile
from stochlot.milpmodel import EQ, GE, LE

logger = logging.getLogger(__name__)

OPTIMAL = 'optimal'
FEASIBLE_LIMIT = 'feasible_limit'
INFEASIBLE = 'infeasible'
UNBOUNDED = 'unbounded'
ERROR = 'error'
STATUSES = (OPTIMAL, FEASIBLE_LIMIT, INFEASIBLE, UNBOUNDED, ERROR)

BUILTIN = 'builtin'
EXTERNAL = 'external'
BACKEND_ENV = 'STOCHLOT_BACKEND'
EXTERNAL_CMD_ENV = 'STOCHLOT_EXTERNAL_CMD'

# Dantzig pricing gives way to Bland's rule after this many degenerate pivots
DEGENERATE_PIVOTS = 50
PIVOT_TOL = 1e-9


class SolverError(Exception):
    """Raised for unusable models, unknown backends and failed commands."""


class QuadraticUnsupportedError(SolverError):
    """The built-in backend only solves linear objectives."""


@dataclass
class SolverConfig():
    """Solver limits and tolerances.

    type: time_limit: float. Seconds per solve call
    type: mip_gap: float. Relative gap (inc - bound) / max(|inc|, 1)
    type: max_nodes: int. None explores without a node limit
    """

    time_limit: float = 10800.0
    mip_gap: float = 1e-6
    int_tol: float = 1e-6
    feas_tol: float = 1e-9
    opt_tol: float = 1e-9
    node_selection: str = 'best-bound'
    branching: str = 'most-fractional'
    seed: int = 0
    max_nodes: int = None

    def __post_init__(self):
        if self.time_limit <= 0:
            raise SolverError('time_limit must be > 0, got {}'.format(
                self.time_limit))
        for name in ('mip_gap', 'int_tol', 'feas_tol', 'opt_tol'):
            if getattr(self, name) <= 0:
                raise SolverError('{} must be > 0'.format(name))
        if self.node_selection != 'best-bound':
            raise SolverError('unsupported node selection {!r}'.format(
                self.node_selection))
        if self.branching != 'most-fractional':
            raise SolverError('unsupported branching rule {!r}'.format(
                self.branching))
        if self.max_nodes is not None and self.max_nodes < 1:
            raise SolverError('max_nodes must be >= 1')

    @classmethod
    def getConfig(cls, path):
        """Loads a config JSON file, missing keys keep their defaults."""

        try:
            with open(str(path), 'r') as config_file:
                return cls(**json.load(config_file))
        except (OSError, TypeError, json.JSONDecodeError) as ex:
            raise SolverError('cannot read solver config {}: {}'.format(
                path, ex))

    def saveConfig(self, path):
        with open(str(path), 'w') as config_file:
            json.dump(asdict(self), config_file, indent=2)


@dataclass
class SolveResult():
    """Outcome of one solve call.

    type: values: dict. VariableRef -> value, empty without a solution
    type: trace: list. (nodes, best bound, incumbent) after every node
    """

    status: str
    objective: float = math.nan
    bound: float = math.nan
    gap: float = math.nan
    values: dict = field(default_factory=dict)
    wall_time: float = 0.0
    node_count: int = 0
    message: str = ''
    x: np.ndarray = None
    trace: list = field(default_factory=list)

    @property
    def hasSolution(self):
        return self.status in (OPTIMAL, FEASIBLE_LIMIT)


@dataclass
class LpResult():
    status: str
    objective: float = math.nan
    x: np.ndarray = None
    iterations: int = 0
    message: str = ''


class SimplexSolver():
    """Dense-tableau primal simplex for

        min c x  s.t.  A x (<=, >=, =) b,  lower <= x <= upper

    Variables are shifted onto [0, u] (free ones split in two), rows get
    slacks and, where no slack fits the starting basis, artificials. Phase I
    minimizes the artificials; nonbasic columns sit at either bound.
    """

    def __init__(self, feas_tol=1e-9, opt_tol=1e-9, max_iterations=None):
        self.feas_tol = feas_tol
        self.opt_tol = opt_tol
        self.max_iterations = max_iterations

    def solve(self, c, a, senses, b, lower, upper, deadline=None):
        c = np.asarray(c, dtype=float)
        a = np.atleast_2d(np.asarray(a, dtype=float))
        b = np.asarray(b, dtype=float)
        lower = np.asarray(lower, dtype=float)
        upper = np.asarray(upper, dtype=float)
        n = c.size
        if np.any(lower > upper + self.feas_tol):
            return LpResult(INFEASIBLE, message='crossed bounds')
        m = b.size
        a = a.reshape(m, n)

        # (owner, sign, cap): x = shift + sum of sign * x' over owned columns
        columns = []
        shift = np.zeros(n)
        for j in range(n):
            if np.isfinite(lower[j]):
                shift[j] = lower[j]
                columns.append((j, 1.0, upper[j] - lower[j]))
            elif np.isfinite(upper[j]):
                shift[j] = upper[j]
                columns.append((j, -1.0, math.inf))
            else:
                columns.extend([(j, 1.0, math.inf), (j, -1.0, math.inf)])
        owners = np.array([j for j, _, _ in columns], dtype=np.int64)
        signs = np.array([sign for _, sign, _ in columns])
        caps = [cap for _, _, cap in columns]
        n_struct = len(columns)
        struct = a[:, owners] * signs
        rhs = b - a @ shift
        cost = c[owners] * signs
        constant = float(c @ shift)

        n_slack = sum(1 for sense in senses if sense != EQ)
        tableau = np.zeros((m, n_struct + n_slack))
        tableau[:, :n_struct] = struct
        slack_of = {}
        k = n_struct
        for r, sense in enumerate(senses):
            if sense == LE:
                tableau[r, k] = 1.0
            elif sense == GE:
                tableau[r, k] = -1.0
            if sense != EQ:
                slack_of[r] = k
                k += 1
        caps = np.array(caps + [math.inf] * n_slack)
        cost = np.concatenate([cost, np.zeros(n_slack)])
        negative = rhs < 0
        tableau[negative] *= -1.0
        rhs = np.where(negative, -rhs, rhs)

        basis = []
        artificials = []
        for r in range(m):
            slack = slack_of.get(r)
            if slack is not None and tableau[r, slack] > 0:
                basis.append(slack)
            else:
                basis.append(tableau.shape[1] + len(artificials))
                artificials.append(r)
        n_real = tableau.shape[1]
        if artificials:
            extra = np.zeros((m, len(artificials)))
            extra[artificials, np.arange(len(artificials))] = 1.0
            tableau = np.hstack([tableau, extra])
            caps = np.concatenate([caps, np.full(len(artificials), math.inf)])
        problem = _Tableau(tableau, rhs.copy(), basis, caps, self)
        iterations = 0

        if artificials:
            phase_one = np.zeros(tableau.shape[1])
            phase_one[n_real:] = 1.0
            status, count = problem.optimize(phase_one, deadline)
            iterations += count
            if status != OPTIMAL:
                return LpResult(status, iterations=iterations,
                                message='phase I: ' + problem.message)
            infeasibility = problem.objective(phase_one)
            if infeasibility > 1e-7 * max(1.0, float(np.max(rhs, initial=0))):
                return LpResult(INFEASIBLE, iterations=iterations,
                                message='phase I residual {:.3g}'.format(
                                    infeasibility))
            problem.dropArtificials(n_real)

        status, count = problem.optimize(cost, deadline)
        iterations += count
        if status != OPTIMAL:
            return LpResult(status, iterations=iterations,
                            message=problem.message)
        problem.refine(n_real)
        values = problem.values()[:n_struct]
        x = shift.copy()
        np.add.at(x, owners, signs * values)
        return LpResult(OPTIMAL, float(c @ x), x, iterations)


class _Tableau():
    """Working state of one simplex run, rows of B^-1 [A | artificials]."""

    def __init__(self, tableau, rhs, basis, caps, solver):
        self.t = tableau
        self.x_b = rhs
        self.basis = list(basis)
        self.caps = caps
        self.at_upper = np.zeros(tableau.shape[1], dtype=bool)
        self.solver = solver
        self.message = ''
        # original system for the final refine
        self.a0 = tableau.copy()
        self.b0 = rhs.copy()
        self.rows = np.arange(tableau.shape[0])

    def values(self):
        x = np.where(self.at_upper, self.caps, 0.0)
        x[~np.isfinite(x)] = 0.0
        for r, j in enumerate(self.basis):
            x[j] = self.x_b[r]
        return x

    def objective(self, cost):
        return float(cost @ self.values())

    def optimize(self, cost, deadline):
        m, n = self.t.shape
        limit = self.solver.max_iterations or 50 * (m + n) + 1000
        opt_tol = self.solver.opt_tol
        bland = False
        degenerate = 0
        for iteration in range(limit):
            if deadline is not None and time.monotonic() > deadline:
                self.message = 'time limit'
                return ERROR, iteration
            basic = np.zeros(n, dtype=bool)
            basic[self.basis] = True
            reduced = cost - cost[self.basis] @ self.t
            movable = ~basic & (self.caps > 0)
            up = movable & ~self.at_upper & (reduced < -opt_tol)
            down = movable & self.at_upper & (reduced > opt_tol)
            candidates = np.flatnonzero(up | down)
            if candidates.size == 0:
                return OPTIMAL, iteration
            if bland:
                q = int(candidates[0])
            else:
                q = int(candidates[np.argmax(np.abs(reduced[candidates]))])
            direction = 1.0 if up[q] else -1.0
            column = self.t[:, q] * direction

            step, row = self.caps[q], -1
            ratios = np.full(m, math.inf)
            falling = column > PIVOT_TOL
            ratios[falling] = np.maximum(self.x_b[falling], 0.0) / \
                column[falling]
            rising = column < -PIVOT_TOL
            if np.any(rising):
                basic_caps = self.caps[np.array(self.basis)[rising]]
                ratios[rising] = np.maximum(basic_caps - self.x_b[rising],
                                            0.0) / -column[rising]
            if np.isfinite(ratios).any():
                best = ratios.min()
                if best < step:
                    ties = np.flatnonzero(ratios <= best + PIVOT_TOL)
                    if bland:
                        row = int(min(ties, key=lambda r: self.basis[r]))
                    else:
                        row = int(ties[np.argmax(np.abs(column[ties]))])
                    step = ratios[row]
            if not np.isfinite(step):
                self.message = 'unbounded ray on column {}'.format(q)
                return UNBOUNDED, iteration

            if step <= PIVOT_TOL:
                degenerate += 1
                if degenerate >= DEGENERATE_PIVOTS and not bland:
                    logger.debug('switching to Bland pricing after %d '
                                 'degenerate pivots', degenerate)
                    bland = True
            else:
                degenerate = 0
            self.x_b -= step * column
            if row < 0:
                self.at_upper[q] = not self.at_upper[q]
                continue
            entering = step if direction > 0 else self.caps[q] - step
            leaving = self.basis[row]
            self.at_upper[leaving] = column[row] < 0
            self.pivot(row, q)
            self.x_b[row] = entering
            self.at_upper[q] = False
        self.message = 'iteration limit'
        return ERROR, limit

    def pivot(self, row, q):
        pivot_row = self.t[row] / self.t[row, q]
        factors = self.t[:, q].copy()
        factors[row] = 0.0
        self.t -= np.outer(factors, pivot_row)
        self.t[row] = pivot_row
        self.basis[row] = q

    def dropArtificials(self, n_real):
        """Pivots zero-level artificials out, deletes redundant rows."""

        keep = []
        for row in range(self.t.shape[0]):
            if self.basis[row] < n_real:
                keep.append(row)
                continue
            row_values = self.t[row, :n_real].copy()
            row_values[self.basis_mask(n_real)] = 0.0
            candidates = np.flatnonzero(np.abs(row_values) > PIVOT_TOL)
            if candidates.size == 0:
                continue
            q = int(candidates[np.argmax(np.abs(row_values[candidates]))])
            value = self.caps[q] if self.at_upper[q] else 0.0
            self.pivot(row, q)
            self.x_b[row] = value
            self.at_upper[q] = False
            keep.append(row)
        if len(keep) < self.t.shape[0]:
            logger.debug('dropped %d redundant rows', self.t.shape[0] -
                         len(keep))
        self.t = self.t[keep, :n_real]
        self.x_b = self.x_b[keep]
        self.basis = [self.basis[r] for r in keep]
        self.caps = self.caps[:n_real]
        self.at_upper = self.at_upper[:n_real]
        self.rows = self.rows[keep]

    def basis_mask(self, n_real):
        mask = np.zeros(n_real, dtype=bool)
        mask[[j for j in self.basis if j < n_real]] = True
        return mask

    def refine(self, n_real):
        """Recomputes basic values from the original rows."""

        if not self.basis:
            return
        a = self.a0[self.rows][:, :n_real]
        x = self.values()[:n_real]
        nonbasic = np.ones(n_real, dtype=bool)
        nonbasic[self.basis] = False
        rhs = self.b0[self.rows] - a[:, nonbasic] @ x[nonbasic]
        try:
            self.x_b = np.linalg.solve(a[:, self.basis], rhs)
        except np.linalg.LinAlgError:
            logger.debug('singular basis, keeping tableau values')


class BranchAndBound():
    """Best-bound branch-and-bound on the LP relaxation.

    Dives depth first until the first incumbent, then always expands the
    open node with the smallest bound. Branches on the most fractional
    integer column.
    """

    def __init__(self, config=None):
        self.config = config or SolverConfig()
        self.lp = SimplexSolver(self.config.feas_tol, self.config.opt_tol)

    def solve(self, model):
        start = time.monotonic()
        deadline = start + self.config.time_limit
        if model.quadratic:
            raise QuadraticUnsupportedError(
                'quadratic unsupported: model {} has {} squared terms, use '
                'the linearized penalty mode'.format(model.name,
                                                     len(model.quadratic)))
        c, a, senses, b, lower, upper, integer = model.toArrays()
        if np.any(integer & ~(np.isfinite(lower) & np.isfinite(upper))):
            raise SolverError('integer variables need finite bounds')
        lower = np.where(integer, np.ceil(lower - self.config.int_tol), lower)
        upper = np.where(integer, np.floor(upper + self.config.int_tol), upper)

        shift = model.objective_constant
        incumbent, best_x = math.inf, None
        running, pruned = -math.inf, math.inf
        trace = []
        nodes = 0
        counter = 0
        stack = [(-math.inf, 0, lower, upper)]
        heap = []
        status, message = OPTIMAL, ''

        while stack or heap:
            if time.monotonic() > deadline:
                status, message = 'limit', 'time limit'
                break
            if (self.config.max_nodes is not None and
                    nodes >= self.config.max_nodes):
                status, message = 'limit', 'node limit'
                break
            tolerance = self.config.mip_gap * max(abs(incumbent + shift), 1.0) \
                if math.isfinite(incumbent) else 0.0
            if stack:
                parent_bound, _, node_lower, node_upper = stack.pop()
            else:
                parent_bound, _, node_lower, node_upper = heapq.heappop(heap)
            if parent_bound >= incumbent - tolerance:
                pruned = min(pruned, parent_bound)
                continue
            nodes += 1
            result = self.lp.solve(c, a, senses, b, node_lower, node_upper,
                                   deadline)
            if result.status == UNBOUNDED:
                if nodes == 1:
                    return SolveResult(UNBOUNDED, wall_time=time.monotonic() -
                                       start, node_count=nodes,
                                       message=result.message)
                status, message = ERROR, 'unbounded node relaxation'
                break
            if result.status == ERROR:
                status, message = 'limit', result.message
                break
            if result.status == OPTIMAL:
                bound = max(parent_bound, result.objective)
                x = result.x
                fraction = np.abs(x - np.round(x))
                fraction[~integer] = 0.0
                if bound >= incumbent - tolerance:
                    pruned = min(pruned, bound)
                elif fraction.max(initial=0.0) <= self.config.int_tol:
                    x = np.where(integer, np.round(x), x)
                    incumbent, best_x = float(c @ x), x
                    logger.debug('node %d: incumbent %.6g', nodes,
                                 incumbent + shift)
                    if stack:
                        for entry in stack:
                            heapq.heappush(heap, entry)
                        stack = []
                else:
                    j = int(np.argmax(fraction))
                    down_upper = node_upper.copy()
                    down_upper[j] = math.floor(x[j])
                    up_lower = node_lower.copy()
                    up_lower[j] = math.ceil(x[j])
                    down = (bound, counter + 1, node_lower, down_upper)
                    up = (bound, counter + 2, up_lower, node_upper)
                    counter += 2
                    if best_x is None:
                        # dive toward the nearer integer first
                        first, second = (down, up) if x[j] - math.floor(
                            x[j]) < 0.5 else (up, down)
                        stack.extend([second, first])
                    else:
                        heapq.heappush(heap, down)
                        heapq.heappush(heap, up)
            open_bounds = [entry[0] for entry in stack] + \
                [entry[0] for entry in heap]
            if open_bounds:
                running = max(running, min(open_bounds))
            trace.append((nodes, min(running, incumbent), incumbent))
            if nodes == 1:
                logger.debug('root relaxation %.6g', result.objective
                             if result.status == OPTIMAL else math.nan)
            if result.status == INFEASIBLE and nodes == 1:
                return SolveResult(INFEASIBLE, wall_time=time.monotonic() -
                                   start, node_count=nodes, trace=trace,
                                   message=result.message)

        wall_time = time.monotonic() - start
        trace = [(k, lb + shift, inc + shift) for k, lb, inc in trace]
        if status == ERROR or (best_x is None and status != OPTIMAL):
            if status != ERROR:
                message += ' without incumbent'
            return SolveResult(ERROR, bound=running + shift,
                               wall_time=wall_time, node_count=nodes,
                               trace=trace, message=message)
        if best_x is None:
            return SolveResult(INFEASIBLE, wall_time=wall_time,
                               node_count=nodes, trace=trace,
                               message='no integer feasible point')
        if status == OPTIMAL:
            bound = min(incumbent, max(running, pruned))
        else:
            bound = min(incumbent, running)
            status = FEASIBLE_LIMIT
        objective = model.evaluateObjective(best_x)
        gap = (incumbent - bound) / max(abs(incumbent + shift), 1.0)
        logger.debug('%s after %d nodes, objective %.6g', status, nodes,
                     objective)
        return SolveResult(status, objective, bound + shift, max(gap, 0.0),
                           model.valuesToDict(best_x), wall_time, nodes,
                           message, best_x, trace)


def solveLp(model, config=None):
    """Solves the relaxation with integrality dropped."""

    config = config or SolverConfig()
    if model.quadratic:
        raise QuadraticUnsupportedError('quadratic unsupported')
    start = time.monotonic()
    c, a, senses, b, lower, upper, _ = model.toArrays()
    result = SimplexSolver(config.feas_tol, config.opt_tol).solve(
        c, a, senses, b, lower, upper, start + config.time_limit)
    wall_time = time.monotonic() - start
    if result.status != OPTIMAL:
        return SolveResult(result.status, wall_time=wall_time, node_count=1,
                           message=result.message)
    objective = model.evaluateObjective(result.x)
    return SolveResult(OPTIMAL, objective, objective, 0.0,
                       model.valuesToDict(result.x), wall_time, 1,
                       x=result.x)


def exportLpFile(model, path):
    writeLpFile(model, path)


def importSolution(model, path):
    """Wraps an external solution file into a SolveResult."""

    values = readSolution(model, path)
    x = np.zeros(model.numVariables)
    for ref, value in values.items():
        x[model.column(ref)] = value
    objective = model.evaluateObjective(x)
    return SolveResult(OPTIMAL, objective, objective, 0.0,
                       model.valuesToDict(x), x=x,
                       message='imported from {}'.format(path))


class ExternalBackend():
    """Runs an external solver command on an exported LP file.

    The command template carries {lp} and {sol} placeholders, e.g.
    "mysolver --time {time_limit} {lp} --write {sol}". The solver must
    write "name value" lines; absent variables read as 0.
    """

    def __init__(self, command=None):
        self.command = command or os.environ.get(EXTERNAL_CMD_ENV)
        if not self.command:
            raise SolverError('external backend needs a command, set {}'
                              .format(EXTERNAL_CMD_ENV))

    def solve(self, model, config=None):
        config = config or SolverConfig()
        start = time.monotonic()
        with tempfile.TemporaryDirectory() as tmp:
            lp_path = Path(tmp) / 'model.lp'
            sol_path = Path(tmp) / 'model.sol'
            exportLpFile(model, lp_path)
            command = self.command.format(lp=lp_path, sol=sol_path,
                                          time_limit=config.time_limit)
            logger.debug('running %s', command)
            try:
                done = subprocess.run(shlex.split(command),
                                      capture_output=True, text=True,
                                      timeout=config.time_limit)
            except subprocess.TimeoutExpired:
                return SolveResult(ERROR, wall_time=time.monotonic() - start,
                                   message='external solver hit the time '
                                   'limit')
            except OSError as ex:
                raise SolverError('cannot run {!r}: {}'.format(command, ex))
            if done.returncode != 0 or not sol_path.exists():
                return SolveResult(ERROR, wall_time=time.monotonic() - start,
                                   message='external solver failed ({}): {}'
                                   .format(done.returncode,
                                           done.stderr.strip()[-500:]))
            result = importSolution(model, sol_path)
        result.wall_time = time.monotonic() - start
        return result


def defaultBackend():
    return os.environ.get(BACKEND_ENV, BUILTIN)


def solve(model, config=None, backend=None):
    """Solves model with the built-in or the external backend.

    type: backend: str. 'builtin' or 'external', defaults to $STOCHLOT_BACKEND
    """

    backend = backend or defaultBackend()
    if backend == BUILTIN:
        return BranchAndBound(config).solve(model)
    if backend == EXTERNAL:
        return ExternalBackend().solve(model, config)
    raise SolverError('unknown backend {!r} (expected {} or {})'.format(
        backend, BUILTIN, EXTERNAL))


def solveLpFile(path, config=None, backend=None):
    """Reads an LP file and solves it."""
    model = readLpFile(path)
    return model, solve(model, config, backend)
