"""
Progressive hedging code
Scenario decomposition of the stochastic lot-sizing problem: per-path
subproblems coordinated through node-wise consensus, Lagrange multipliers,
cost-proportional penalty weights, setup-cost and penalty adjustments and
cycle escalation
"""

import hashlib
import json
import logging
import math
import multiprocessing
import time
from dataclasses import asdict, dataclass, field

import matplotlib.pyplot as plt
import numpy as np

from stochlot.milpmodel import (BINARY_KINDS, KINDS, LINEARIZED,
                                PENALTY_MODES, PhInputs, SetupPlan,
                                VariableRef, buildSubproblem)
from stochlot.scenariotree import ScenarioPath
from stochlot.solverbackend import SolverConfig, solve

logger = logging.getLogger(__name__)

AVERAGE = 'average'
MAJORITY = 'majority'
CONSENSUS_MODES = (AVERAGE, MAJORITY)

Y, Z, Q, I, B = range(len(KINDS))


class PhError(Exception):
    """Raised for invalid PH settings and failed subproblem solves."""


@dataclass
class PhConfig():
    """Progressive hedging settings.

    type: rho_lambda: float. Multiple of the objective coefficient used as rho
    type: epsilon: float. Convergence tolerance on the setup variables
    type: rho_floor: float. rho basis for zero-cost variables other than Z,
                     Z falls back to the item's setup cost
    type: workers: int. Processes solving the subproblems of one iteration
    """

    rho_lambda: float = 1.0
    consensus_mode: str = AVERAGE
    epsilon: float = 1e-4
    max_iterations: int = 500
    time_limit: float = 10800.0
    adjustments_enabled: bool = True
    theta_low: float = 0.4
    theta_high: float = 0.6
    gamma_f: float = 0.8
    lambda_global: float = 1.1
    lambda_local: float = 1.5
    cycle_window: int = 10
    cycle_factor: float = 10.0
    penalty_mode: str = LINEARIZED
    rho_floor: float = 1.0
    workers: int = 1

    def __post_init__(self):
        problems = []
        if self.rho_lambda <= 0:
            problems.append('rho_lambda must be > 0')
        if self.consensus_mode not in CONSENSUS_MODES:
            problems.append('consensus_mode must be one of {}'.format(
                CONSENSUS_MODES))
        if self.epsilon <= 0:
            problems.append('epsilon must be > 0')
        if self.max_iterations < 1:
            problems.append('max_iterations must be >= 1')
        if self.time_limit <= 0:
            problems.append('time_limit must be > 0')
        if not 0 < self.theta_low < 0.5 < self.theta_high < 1:
            problems.append('thresholds must satisfy 0 < theta_low < 0.5 < '
                            'theta_high < 1')
        if not 0.5 < self.gamma_f < 1:
            problems.append('gamma_f must lie in (0.5, 1)')
        if self.lambda_global <= 1 or self.lambda_local <= 1:
            problems.append('lambda_global and lambda_local must be > 1')
        if self.cycle_window < 1 or self.cycle_factor <= 1:
            problems.append('cycle_window must be >= 1 and cycle_factor > 1')
        if self.penalty_mode not in PENALTY_MODES:
            problems.append('penalty_mode must be one of {}'.format(
                PENALTY_MODES))
        if self.rho_floor <= 0:
            problems.append('rho_floor must be > 0')
        if self.workers < 1:
            problems.append('workers must be >= 1')
        if problems:
            raise PhError('; '.join(problems))

    @classmethod
    def getConfig(cls, path):
        try:
            with open(str(path), 'r') as config_file:
                return cls(**json.load(config_file))
        except (OSError, TypeError, json.JSONDecodeError) as ex:
            raise PhError('cannot read PH config {}: {}'.format(path, ex))

    def saveConfig(self, path):
        with open(str(path), 'w') as config_file:
            json.dump(asdict(self), config_file, indent=2)


@dataclass
class PhState():
    """Coordinator state, per-path arrays indexed [path, kind, item, t - 1]."""

    iteration: int
    solutions: np.ndarray
    consensus: np.ndarray
    multipliers: np.ndarray
    rho: np.ndarray
    setup_costs: np.ndarray
    objectives: np.ndarray
    fingerprints: list = field(default_factory=list)
    cycle: set = field(default_factory=set)
    forced: bool = False
    escalations: int = 0

    @property
    def consensusSetups(self):
        """Global consensus y~ as items x periods."""
        return self.consensus[0, Y]


@dataclass
class PhReport():
    converged: bool
    forced: bool
    iterations: int
    escalations: int
    plan: SetupPlan
    wait_and_see: float
    trace: list
    config: dict
    wall_time: float = 0.0
    iteration_times: list = field(default_factory=list)

    def toDict(self):
        return {
            'converged': self.converged,
            'forced': self.forced,
            'iterations': self.iterations,
            'escalations': self.escalations,
            'plan': self.plan.toDict(),
            'wait_and_see': self.wait_and_see,
            'trace': self.trace,
            'config': self.config,
            'timing': {'wall_time': self.wall_time,
                       'iteration_times': self.iteration_times},
        }

    def plotTrace(self, save=None):
        """Plots the setup deviation and the weighted subproblem objective
           per iteration.

        type: save: str. Writes the figure to this pdf file instead of
                    showing it
        """

        iterations = [record['iteration'] for record in self.trace]
        plt.subplot(121)
        plt.semilogy(iterations, [max(record['max_deviation_y'], 1e-12)
                                  for record in self.trace], '-o')
        plt.title('Setup Deviation')
        plt.xlabel('Iteration')
        plt.ylabel('max |y - y~|')

        plt.subplot(122)
        plt.plot(iterations, [record['objective'] for record in self.trace],
                 '-o')
        plt.title('Subproblem Objective')
        plt.xlabel('Iteration')
        plt.ylabel('Weighted objective')
        plt.tight_layout()
        if save:
            plt.savefig(fname=str(save), format='pdf')
        else:
            plt.show()
        plt.close()


def saveReport(report, path):
    with open(str(path), 'w') as report_file:
        json.dump(report.toDict(), report_file, indent=2)


def initRhoCostProportional(instance, rho_lambda, rho_floor=1.0):
    """rho = lambda * objective coefficient, indexed [kind, item, t - 1].

    Zero coefficients take lambda * s_i for Z and lambda * rho_floor
    otherwise.
    """

    if rho_lambda <= 0:
        raise PhError('rho_lambda must be > 0, got {}'.format(rho_lambda))
    horizon = instance.horizon
    rho = np.zeros((len(KINDS), instance.n_items, horizon))
    for item in instance.items:
        backlog = np.full(horizon, item.backlog_cost)
        backlog[-1] = item.lost_sale_cost
        coefficients = {
            Y: np.full(horizon, item.setup_cost),
            Z: np.zeros(horizon),
            Q: np.full(horizon, item.production_cost),
            I: np.full(horizon, item.holding_cost),
            B: backlog,
        }
        for kind, coefficient in coefficients.items():
            floor = item.setup_cost if kind == Z and item.setup_cost > 0 \
                else rho_floor
            rho[kind, item.id] = rho_lambda * np.where(coefficient > 0,
                                                       coefficient, floor)
    return rho


def nodeGroups(view):
    """Consensus group of every path, [kind, t - 1, path] labels 0..G-1.

    Y shares one global group, Z and Q of period t group by the depth t-1
    node, I and B by the depth t node.
    """

    paths = [int(p) for p in view.pathIds()]
    groups = np.zeros((len(KINDS), view.horizon, len(paths)), dtype=np.int64)
    for kind in range(len(KINDS)):
        for t in range(1, view.horizon + 1):
            if kind == Y:
                continue
            depth = t - 1 if kind in (Z, Q) else t
            nodes = [view.nodeAt(p, depth) for p in paths]
            groups[kind, t - 1] = np.unique(nodes, return_inverse=True)[1]
    return groups


def _stackSolutions(solutions, view):
    if isinstance(solutions, dict):
        missing = [int(p) for p in view.pathIds() if int(p) not in solutions]
        if missing:
            raise PhError('missing solutions for paths {}'.format(missing))
        return np.stack([np.asarray(solutions[int(p)], dtype=float)
                         for p in view.pathIds()])
    solutions = np.asarray(solutions, dtype=float)
    if solutions.shape[0] != len(view.pathIds()):
        raise PhError('expected {} path solutions, got {}'.format(
            len(view.pathIds()), solutions.shape[0]))
    return solutions


def computeConsensus(solutions, view, mode=AVERAGE, groups=None):
    """Probability weighted mean over the paths of each consensus group.

    Majority mode rounds the binary kinds, (0.5, 1] to 1 and [0, 0.5] to 0.
    type: solutions: np.ndarray or dict. [path, kind, item, t - 1] or
                     {path id: [kind, item, t - 1]}
    """

    if mode not in CONSENSUS_MODES:
        raise PhError('unknown consensus mode {!r}'.format(mode))
    x = _stackSolutions(solutions, view)
    sigma = np.asarray(view.probabilities(), dtype=float)
    if groups is None:
        groups = nodeGroups(view)
    consensus = np.empty_like(x)
    for kind in range(x.shape[1]):
        for t in range(x.shape[3]):
            labels = groups[kind, t]
            weight = np.bincount(labels, weights=sigma)
            for i in range(x.shape[2]):
                total = np.bincount(labels, weights=sigma * x[:, kind, i, t])
                consensus[:, kind, i, t] = (total / weight)[labels]
    if mode == MAJORITY:
        binary = [KINDS.index(kind) for kind in BINARY_KINDS]
        consensus[:, binary] = (consensus[:, binary] > 0.5).astype(float)
    return consensus


def updateMultipliers(multipliers, rho, solutions, consensus):
    """Lambda^k = Lambda^(k-1) + rho (x^k - x~)"""
    return multipliers + rho * (solutions - consensus)


def applyGlobalAdjustment(setup_costs, y_bar, theta_low=0.4, theta_high=0.6,
                          lambda_global=1.1, tol=1e-9):
    """Raises s_it by lambda_G where a fractional y~ lies below theta_L,
       lowers it where y~ lies above theta_H.
    """

    y_bar = np.asarray(y_bar, dtype=float)
    fractional = (y_bar > tol) & (y_bar < 1.0 - tol)
    adjusted = np.array(setup_costs, dtype=float)
    raise_cost = fractional & (y_bar < theta_low)
    lower_cost = fractional & (y_bar > theta_high)
    adjusted[raise_cost] *= lambda_global
    adjusted[lower_cost] /= lambda_global
    return adjusted


def applyLocalAdjustment(rho_y, y, y_bar, gamma_f=0.8, lambda_local=1.5):
    """rho of a path's setup is multiplied by lambda_L where
       |y - y~| >= gamma_F.
    """

    rho_y = np.asarray(rho_y, dtype=float)
    far = np.abs(np.asarray(y) - np.asarray(y_bar)) >= gamma_f
    return np.where(far, lambda_local * rho_y, rho_y)


def checkConvergence(y, y_bar, epsilon):
    """True iff every path's setups lie within epsilon of the consensus."""
    return maxDeviation(y, y_bar) <= epsilon


def maxDeviation(x, x_bar):
    return float(np.max(np.abs(np.asarray(x) - np.asarray(x_bar)),
                        initial=0.0))


def fingerprint(y_bar):
    rounded = np.round(np.asarray(y_bar, dtype=float), 3) + 0.0
    return hashlib.sha1(rounded.tobytes()).hexdigest()


def detectCycleAndEscalate(state, window=10, factor=10.0, converged=False):
    """Multiplies every rho by factor when the consensus setups return to
       one of the last window fingerprints after moving away from it.

    A consensus that stays put is not a cycle, consecutive equal
    fingerprints are stored once. A cycle whose fingerprints all belong to
    the last escalated cycle does not fire again.

    Returns True when the escalation fired.
    """

    current = fingerprint(state.consensusSetups)
    history = state.fingerprints
    if history and history[-1] == current:
        return False
    recent = history[-window:]
    fired = False
    if not converged and current in recent:
        start = len(recent) - 1 - recent[::-1].index(current)
        cycle = set(recent[start:])
        if not cycle <= state.cycle:
            state.rho = state.rho * factor
            state.forced = True
            state.escalations += 1
            state.cycle = cycle
            history = []
            fired = True
            logger.info('iteration %d: consensus cycle of length %d, '
                        'rho x %g', state.iteration, len(cycle), factor)
    history.append(current)
    state.fingerprints = history[-window:]
    return fired


def _solveSubproblem(task):
    """Pool worker, returns (objective, [kind, item, t - 1] solution)."""

    instance, path, ph_inputs, penalty_mode, solver_config, backend = task
    model = buildSubproblem(instance, path, ph_inputs, penalty_mode)
    result = solve(model, solver_config, backend)
    if not result.hasSolution:
        raise PhError('subproblem of path {} ended {}: {}'.format(
            path.id, result.status, result.message))
    values = np.zeros((len(KINDS), instance.n_items, instance.horizon))
    for k, kind in enumerate(KINDS):
        for i in range(instance.n_items):
            for t in range(1, instance.horizon + 1):
                values[k, i, t - 1] = result.values[
                    VariableRef(kind, i, t, ('path', path.id))]
    return result.objective, values


class ProgressiveHedging():
    """Coordinates the subproblems of every path of a tree or partial tree.

    start() solves the unpenalized subproblems, each step() adjusts costs
    and penalties, updates the multipliers and re-solves.
    """

    def __init__(self, instance, view, config=None, solver_config=None,
                 backend=None):
        """
        type: view: ScenarioTree or PartialTree
        type: backend: str. Solver backend name, None uses the default
        """

        self.instance = instance
        self.view = view
        self.config = config or PhConfig()
        self.solver_config = solver_config or SolverConfig()
        self.backend = backend
        self.sigma = np.asarray(view.probabilities(), dtype=float)
        self.paths = [ScenarioPath(int(p), view.tree.branches(int(p)),
                                   float(sigma), view.pathDemand(int(p)))
                      for p, sigma in zip(view.pathIds(), self.sigma)]
        self.groups = nodeGroups(view)
        self.state = None
        self.trace = []
        self.iteration_times = []
        self.wait_and_see = math.nan
        self.converged = False
        self._pool = None
        self._start_time = None

    def _solveAll(self, inputs):
        tasks = [(self.instance, path, ph_inputs, self.config.penalty_mode,
                  self.solver_config, self.backend)
                 for path, ph_inputs in zip(self.paths, inputs)]
        if self._pool is not None:
            results = self._pool.map(_solveSubproblem, tasks)
        else:
            results = [_solveSubproblem(task) for task in tasks]
        objectives = np.array([objective for objective, _ in results])
        return objectives, np.stack([values for _, values in results])

    def _record(self, escalated, iteration_start):
        state = self.state
        self.converged = checkConvergence(state.solutions[:, Y],
                                          state.consensus[:, Y],
                                          self.config.epsilon)
        deviation_y = maxDeviation(state.solutions[:, Y],
                                   state.consensus[:, Y])
        self.trace.append({
            'iteration': state.iteration,
            'max_deviation_y': deviation_y,
            'max_deviation': maxDeviation(state.solutions, state.consensus),
            'objective': float(self.sigma @ state.objectives),
            'escalated': escalated,
        })
        self.iteration_times.append(time.monotonic() - iteration_start)
        logger.info('iteration %d: max setup deviation %.3g%s',
                    state.iteration, deviation_y,
                    ' (rho escalated)' if escalated else '')

    def start(self):
        """Iteration 1, the plain scenario subproblems."""

        self._start_time = time.monotonic()
        iteration_start = self._start_time
        n_paths = len(self.paths)
        shape = (n_paths, len(KINDS), self.instance.n_items,
                 self.instance.horizon)
        objectives, solutions = self._solveAll([None] * n_paths)
        self.wait_and_see = float(self.sigma @ objectives)
        rho = initRhoCostProportional(self.instance, self.config.rho_lambda,
                                      self.config.rho_floor)
        setup_costs = np.repeat(
            self.instance.itemArray('setup_cost')[:, None],
            self.instance.horizon, axis=1)
        self.state = PhState(
            iteration=1, solutions=solutions,
            consensus=computeConsensus(solutions, self.view,
                                       self.config.consensus_mode,
                                       self.groups),
            multipliers=np.zeros(shape), rho=np.broadcast_to(rho, shape).copy(),
            setup_costs=setup_costs, objectives=objectives)
        self._record(False, iteration_start)
        return self.state

    def step(self):
        """One penalized iteration."""

        if self.state is None:
            raise PhError('start() must run before step()')
        iteration_start = time.monotonic()
        config = self.config
        state = self.state
        if config.adjustments_enabled:
            # both rules look at the averaged setups, also in majority mode
            y_bar = computeConsensus(state.solutions, self.view, AVERAGE,
                                     self.groups)[:, Y]
            state.setup_costs = applyGlobalAdjustment(
                state.setup_costs, y_bar[0], config.theta_low,
                config.theta_high, config.lambda_global)
            state.rho[:, Y] = applyLocalAdjustment(
                state.rho[:, Y], state.solutions[:, Y], y_bar,
                config.gamma_f, config.lambda_local)
        escalated = detectCycleAndEscalate(state, config.cycle_window,
                                           config.cycle_factor, self.converged)
        state.multipliers = updateMultipliers(state.multipliers, state.rho,
                                              state.solutions, state.consensus)
        inputs = [PhInputs(state.consensus[p], state.multipliers[p],
                           state.rho[p], state.setup_costs)
                  for p in range(len(self.paths))]
        state.objectives, state.solutions = self._solveAll(inputs)
        state.iteration += 1
        state.consensus = computeConsensus(state.solutions, self.view,
                                           config.consensus_mode, self.groups)
        self._record(escalated, iteration_start)
        return state

    def plan(self):
        """Consensus setups rounded at 0.5."""
        return SetupPlan((self.state.consensusSetups > 0.5).astype(np.int64))

    def report(self):
        state = self.state
        return PhReport(self.converged, state.forced, state.iteration,
                        state.escalations, self.plan(), self.wait_and_see,
                        list(self.trace), asdict(self.config),
                        time.monotonic() - self._start_time,
                        list(self.iteration_times))

    def run(self):
        """Iterates until convergence, max_iterations or time_limit."""

        if self.config.workers > 1:
            self._pool = multiprocessing.Pool(self.config.workers)
        try:
            self.start()
            deadline = self._start_time + self.config.time_limit
            while (not self.converged and
                   self.state.iteration < self.config.max_iterations and
                   time.monotonic() < deadline):
                self.step()
        finally:
            if self._pool is not None:
                self._pool.close()
                self._pool.join()
                self._pool = None
        report = self.report()
        if not report.converged:
            logger.warning('progressive hedging stopped after %d iterations '
                           'without convergence', report.iterations)
        return report


def runPh(instance, view, config=None, solver_config=None, backend=None):
    """Runs progressive hedging, returns (PhReport, SetupPlan)."""

    report = ProgressiveHedging(instance, view, config, solver_config,
                                backend).run()
    return report, report.plan
