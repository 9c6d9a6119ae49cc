"""
Lot-sizing MILP models
Compact, implicit, partial implicit and progressive hedging subproblem
formulations of the stochastic lot-sizing problem with setup carry-over,
built on a small solver-agnostic model container
"""

import json
import logging
import math
from collections import namedtuple
from dataclasses import dataclass

import numpy as np

from stochlot.instance import requirementBounds
from stochlot.scenariotree import ScenarioPath

logger = logging.getLogger(__name__)

KINDS = ('Y', 'Z', 'Q', 'I', 'B')
BINARY_KINDS = ('Y', 'Z')
LE, GE, EQ = '<=', '>=', '='
SENSES = (LE, GE, EQ)

COMPACT = 'compact'
IMPLICIT = 'implicit'
SUBPROBLEM = 'subproblem'

QUADRATIC = 'quadratic'
LINEARIZED = 'linearized'
PENALTY_MODES = (QUADRATIC, LINEARIZED)


class ModelBuildError(Exception):
    """Raised for inconsistent model data or model inputs."""


class VariableRef(namedtuple('VariableRef', ['kind', 'item', 'period', 'scope'],
                             defaults=(None, None, None))):
    """Symbolic variable address.

    scope is None for global variables, ('node', n) for variables keyed by a
    scenario tree node and ('path', p) for per-path copies.
    """

    __slots__ = ()

    @property
    def name(self):
        if self.item is None:
            return self.kind
        name = '{}_{}_{}'.format(self.kind, self.item, self.period)
        if self.scope is not None:
            name += '_{}{}'.format(self.scope[0][0], self.scope[1])
        return name

    @classmethod
    def fromName(cls, name):
        parts = name.split('_')
        try:
            if len(parts) in (3, 4):
                item, period = int(parts[1]), int(parts[2])
                scope = None
                if len(parts) == 4:
                    label = {'n': 'node', 'p': 'path'}[parts[3][0]]
                    scope = (label, int(parts[3][1:]))
                return cls(parts[0], item, period, scope)
        except (KeyError, ValueError, IndexError):
            pass
        return cls(name)


class MilpModel():
    """Variables, linear rows and a linear objective with optional convex
       diagonal quadratic terms.
    """

    def __init__(self, name='model'):
        self.name = name
        self.variables = []
        self.lower = []
        self.upper = []
        self.integer = []
        self.index = {}
        self.objective = {}
        self.quadratic = {}
        self.objective_constant = 0.0
        self.rows = []
        self.row_names = []
        self._row_index = {}
        self.metadata = {}

    @property
    def numVariables(self):
        return len(self.variables)

    @property
    def numConstraints(self):
        return len(self.rows)

    @property
    def isMip(self):
        return any(self.integer)

    def addVariable(self, ref, lower=0.0, upper=math.inf, integer=False):
        if ref in self.index:
            raise ModelBuildError('variable {} declared twice'.format(ref.name))
        if lower > upper:
            raise ModelBuildError('variable {} has lower bound above upper '
                                  'bound'.format(ref.name))
        self.index[ref] = len(self.variables)
        self.variables.append(ref)
        self.lower.append(float(lower))
        self.upper.append(float(upper))
        self.integer.append(bool(integer))
        return self.index[ref]

    def hasVariable(self, ref):
        return ref in self.index

    def column(self, ref):
        try:
            return self.index[ref]
        except KeyError:
            raise ModelBuildError('undeclared variable {}'.format(
                getattr(ref, 'name', ref)))

    def addObjective(self, ref, coef):
        col = self.column(ref)
        self.objective[col] = self.objective.get(col, 0.0) + coef

    def addQuadratic(self, ref, coef):
        """Adds coef * x^2 to the objective, coef >= 0."""
        if coef < 0:
            raise ModelBuildError('quadratic terms must be convex')
        col = self.column(ref)
        self.quadratic[col] = self.quadratic.get(col, 0.0) + coef

    def hasConstraint(self, name):
        return name in self._row_index

    def addConstraint(self, terms, sense, rhs, name=None):
        """type: terms: iterable of (VariableRef, coefficient)"""

        if sense not in SENSES:
            raise ModelBuildError('unknown sense {!r}'.format(sense))
        if name is None:
            name = 'c{}'.format(len(self.rows))
        if name in self._row_index:
            raise ModelBuildError('constraint {} declared twice'.format(name))
        merged = {}
        for ref, coef in terms:
            col = self.column(ref)
            merged[col] = merged.get(col, 0.0) + coef
        cols = tuple(col for col in merged if merged[col] != 0.0)
        self._row_index[name] = len(self.rows)
        self.rows.append((cols, tuple(merged[col] for col in cols), sense,
                          float(rhs)))
        self.row_names.append(name)
        return self._row_index[name]

    def fixVariable(self, ref, value):
        col = self.column(ref)
        self.lower[col] = self.upper[col] = float(value)

    def toArrays(self):
        """Returns c, A, senses, b, lower, upper, integer as numpy arrays."""

        n = self.numVariables
        c = np.zeros(n)
        for col, coef in self.objective.items():
            c[col] = coef
        a = np.zeros((self.numConstraints, n))
        b = np.zeros(self.numConstraints)
        senses = []
        for r, (cols, coefs, sense, rhs) in enumerate(self.rows):
            a[r, list(cols)] = coefs
            b[r] = rhs
            senses.append(sense)
        return (c, a, senses, b, np.array(self.lower), np.array(self.upper),
                np.array(self.integer, dtype=bool))

    def quadraticArray(self):
        q = np.zeros(self.numVariables)
        for col, coef in self.quadratic.items():
            q[col] = coef
        return q

    def evaluateObjective(self, x):
        x = np.asarray(x, dtype=float)
        value = self.objective_constant
        for col, coef in self.objective.items():
            value += coef * x[col]
        for col, coef in self.quadratic.items():
            value += coef * x[col] ** 2
        return value

    def maxViolation(self, x):
        """Largest bound or row violation of point x."""

        x = np.asarray(x, dtype=float)
        worst = max(0.0, float(np.max(np.array(self.lower) - x, initial=0.0)),
                    float(np.max(x - np.array(self.upper), initial=0.0)))
        for cols, coefs, sense, rhs in self.rows:
            lhs = sum(coef * x[col] for col, coef in zip(cols, coefs))
            if sense == LE:
                worst = max(worst, lhs - rhs)
            elif sense == GE:
                worst = max(worst, rhs - lhs)
            else:
                worst = max(worst, abs(lhs - rhs))
        return worst

    def valuesToDict(self, x):
        return {ref: float(x[col]) for ref, col in self.index.items()}

    def copy(self):
        other = MilpModel(self.name)
        other.variables = list(self.variables)
        other.lower = list(self.lower)
        other.upper = list(self.upper)
        other.integer = list(self.integer)
        other.index = dict(self.index)
        other.objective = dict(self.objective)
        other.quadratic = dict(self.quadratic)
        other.objective_constant = self.objective_constant
        other.rows = list(self.rows)
        other.row_names = list(self.row_names)
        other._row_index = dict(self._row_index)
        other.metadata = dict(self.metadata)
        return other


class SetupPlan():
    """Binary setup decisions Y_it, items x periods."""

    def __init__(self, values):
        values = np.asarray(values)
        if values.ndim != 2 or not np.all(np.isin(values, (0, 1))):
            raise ModelBuildError('setup plan must be a binary items x '
                                  'periods table')
        self.values = values.astype(np.int64)

    @classmethod
    def zeros(cls, n_items, horizon):
        return cls(np.zeros((n_items, horizon), dtype=np.int64))

    @classmethod
    def fromValues(cls, values, n_items, horizon):
        """Reads global Y from a {VariableRef: value} map."""
        table = np.zeros((n_items, horizon), dtype=np.int64)
        for i in range(n_items):
            for t in range(1, horizon + 1):
                table[i, t - 1] = int(round(values[VariableRef('Y', i, t)]))
        return cls(table)

    @property
    def shape(self):
        return self.values.shape

    def __eq__(self, other):
        return isinstance(other, SetupPlan) and np.array_equal(
            self.values, other.values)

    def toDict(self):
        return {'n_items': self.values.shape[0],
                'horizon': self.values.shape[1],
                'Y': self.values.tolist()}


def savePlan(plan, path):
    with open(str(path), 'w') as plan_file:
        json.dump(plan.toDict(), plan_file, indent=2)


def loadPlan(path):
    try:
        with open(str(path), 'r') as plan_file:
            return SetupPlan(json.load(plan_file)['Y'])
    except (OSError, KeyError, json.JSONDecodeError) as ex:
        raise ModelBuildError('cannot read setup plan {}: {}'.format(path, ex))


@dataclass
class PhInputs():
    """Penalty data of one path, arrays indexed [kind, item, period - 1]
       in KINDS order; setup_costs indexed [item, period - 1].
    """

    consensus: np.ndarray
    multipliers: np.ndarray
    rho: np.ndarray
    setup_costs: np.ndarray


class _SinglePathView():
    """Tree view over one path."""

    def __init__(self, path):
        self.path = path
        self.horizon = path.demand.shape[1]
        self.n_items = path.demand.shape[0]

    def pathIds(self):
        return np.array([self.path.id])

    def probabilities(self):
        return np.array([1.0])

    def nodeAt(self, path, depth):
        return depth

    def pathDemand(self, path):
        return self.path.demand

    def maxDemand(self):
        return self.path.demand


class LotSizingModelBuilder():
    """Materializes the lot-sizing formulation for the paths of a view.

    Mode COMPACT keeps per-path copies of Z, Q, I, B tied together by
    non-anticipativity rows, IMPLICIT keys them by tree node (Z, Q of
    period t by the depth t-1 node, I, B of period t by the depth t node),
    SUBPROBLEM gives every variable, Y included, a path scope.
    """

    def __init__(self, instance, view, mode, setup_costs=None, name=None):
        if view.n_items != instance.n_items or view.horizon != instance.horizon:
            raise ModelBuildError(
                'dimension mismatch: instance has {} items x {} periods, tree '
                'has {} x {}'.format(instance.n_items, instance.horizon,
                                     view.n_items, view.horizon))
        self.instance = instance
        self.view = view
        self.mode = mode
        self.paths = [int(p) for p in view.pathIds()]
        self.weights = [float(w) for w in view.probabilities()]
        self.demand = {p: view.pathDemand(p) for p in self.paths}
        if setup_costs is None:
            setup_costs = np.repeat(instance.itemArray('setup_cost')[:, None],
                                    instance.horizon, axis=1)
        self.setup_costs = np.asarray(setup_costs, dtype=float)
        self.model = MilpModel(name or mode)

        demand_cap = view.maxDemand()
        self.requirement = requirementBounds(instance, demand_cap)
        self.big_m = np.zeros((instance.n_items, instance.horizon))
        for item in instance.items:
            for t in range(1, instance.horizon + 1):
                bound = self.requirement[item.id]
                if item.production_time > 0:
                    bound = min(bound, instance.capacity(item.resource, t) /
                                item.production_time)
                self.big_m[item.id, t - 1] = max(bound, 0.0)

    def build(self):
        self.setupVariables()
        self.setupObjective()
        self.setupBalance()
        self.setupComponentBacklog()
        self.setupProductionLinks()
        self.setupCarryOver()
        self.setupCapacity()
        if self.mode == COMPACT:
            self.setupNonAnticipativity()
        self.model.metadata.update({
            'build': self.mode,
            'n_items': self.instance.n_items,
            'horizon': self.instance.horizon,
            'paths': list(self.paths),
            'probabilities': list(self.weights),
        })
        logger.debug('%s model: %d variables, %d constraints', self.mode,
                     self.model.numVariables, self.model.numConstraints)
        return self.model

    def ref(self, kind, item, period, path):
        if kind == 'Y':
            scope = ('path', path) if self.mode == SUBPROBLEM else None
            return VariableRef('Y', item, period, scope)
        if self.mode == IMPLICIT:
            depth = period - 1 if kind in ('Z', 'Q') else period
            return VariableRef(kind, item, period,
                               ('node', int(self.view.nodeAt(path, depth))))
        return VariableRef(kind, item, period, ('path', path))

    def rowName(self, label, path, depth):
        if self.mode == IMPLICIT:
            return '{}_n{}'.format(label, int(self.view.nodeAt(path, depth)))
        return '{}_p{}'.format(label, path)

    def setupVariables(self):
        model = self.model
        for path in self.paths:
            for item in self.instance.items:
                i = item.id
                upper = {'Y': 1.0, 'Z': 1.0,
                         'I': item.initial_inventory + self.requirement[i],
                         'B': self.requirement[i]}
                for t in range(1, self.instance.horizon + 1):
                    upper['Q'] = self.big_m[i, t - 1]
                    for kind in KINDS:
                        ref = self.ref(kind, i, t, path)
                        if not model.hasVariable(ref):
                            model.addVariable(ref, 0.0, upper[kind],
                                              integer=kind in BINARY_KINDS)

    def setupObjective(self):
        """Setup costs once, recourse costs weighted by path probability."""

        model = self.model
        horizon = self.instance.horizon
        for item in self.instance.items:
            for t in range(1, horizon + 1):
                if self.mode != SUBPROBLEM:
                    model.addObjective(self.ref('Y', item.id, t, None),
                                       self.setup_costs[item.id, t - 1])
        for path, weight in zip(self.paths, self.weights):
            for item in self.instance.items:
                i = item.id
                for t in range(1, horizon + 1):
                    if self.mode == SUBPROBLEM:
                        model.addObjective(self.ref('Y', i, t, path),
                                           self.setup_costs[i, t - 1])
                    backlog = (item.lost_sale_cost if t == horizon
                               else item.backlog_cost)
                    model.addObjective(self.ref('Q', i, t, path),
                                       weight * item.production_cost)
                    model.addObjective(self.ref('I', i, t, path),
                                       weight * item.holding_cost)
                    model.addObjective(self.ref('B', i, t, path),
                                       weight * backlog)

    def setupBalance(self):
        """Inventory and backlog balance, consumption without lead time."""

        model = self.model
        for path in self.paths:
            cumulative = np.cumsum(self.demand[path], axis=1)
            for item in self.instance.items:
                i = item.id
                parents = self.instance.bom.parents(i)
                for t in range(1, self.instance.horizon + 1):
                    name = self.rowName('bal_{}_{}'.format(i, t), path, t)
                    if model.hasConstraint(name):
                        continue
                    terms = [(self.ref('Q', i, tau, path), 1.0)
                             for tau in range(1, t - item.lead_time + 1)]
                    for j, r in parents:
                        terms.extend((self.ref('Q', j, tau, path), -r)
                                     for tau in range(1, t + 1))
                    terms.append((self.ref('I', i, t, path), -1.0))
                    terms.append((self.ref('B', i, t, path), 1.0))
                    rhs = cumulative[i, t - 1] - item.initial_inventory
                    model.addConstraint(terms, EQ, rhs, name)

    def setupComponentBacklog(self):
        """Component backlog never exceeds cumulative external demand."""

        model = self.model
        for path in self.paths:
            cumulative = np.cumsum(self.demand[path], axis=1)
            for i in self.instance.components:
                for t in range(1, self.instance.horizon + 1):
                    name = self.rowName('cbk_{}_{}'.format(i, t), path, t)
                    if not model.hasConstraint(name):
                        model.addConstraint([(self.ref('B', i, t, path), 1.0)],
                                            LE, cumulative[i, t - 1], name)

    def setupProductionLinks(self):
        """Production needs a setup or a carried-over setup state, and some
           setup of the item no later than the production period.
        """

        model = self.model
        for path in self.paths:
            for i in range(self.instance.n_items):
                for t in range(1, self.instance.horizon + 1):
                    big_m = self.big_m[i, t - 1]
                    q = self.ref('Q', i, t, path)
                    name = self.rowName('lnk_{}_{}'.format(i, t), path, t - 1)
                    if model.hasConstraint(name):
                        continue
                    model.addConstraint(
                        [(q, 1.0), (self.ref('Y', i, t, path), -big_m),
                         (self.ref('Z', i, t, path), -big_m)], LE, 0.0, name)
                    terms = [(q, 1.0)]
                    terms.extend((self.ref('Y', i, tau, path), -big_m)
                                 for tau in range(1, t + 1))
                    model.addConstraint(
                        terms, LE, 0.0,
                        self.rowName('org_{}_{}'.format(i, t), path, t - 1))

    def setupCarryOver(self):
        """One setup state per resource and period, carried from a setup or
           an earlier carry-over, broken by a setup of another item.
        """

        model = self.model
        for path in self.paths:
            for k, members in self.instance.item_sets.items():
                if not members:
                    continue
                name = self.rowName('ini_{}'.format(k), path, 0)
                if not model.hasConstraint(name):
                    model.addConstraint(
                        [(self.ref('Z', i, 1, path), 1.0) for i in members],
                        LE, 1.0, name)
                for t in range(2, self.instance.horizon + 1):
                    name = self.rowName('one_{}_{}'.format(k, t), path, t - 1)
                    if model.hasConstraint(name):
                        continue
                    model.addConstraint(
                        [(self.ref('Z', i, t, path), 1.0) for i in members],
                        EQ, 1.0, name)
                    for i in members:
                        z = self.ref('Z', i, t, path)
                        z_prev = self.ref('Z', i, t - 1, path)
                        y_prev = self.ref('Y', i, t - 1, path)
                        model.addConstraint(
                            [(z, 1.0), (y_prev, -1.0), (z_prev, -1.0)], LE,
                            0.0, self.rowName('cy_{}_{}'.format(i, t), path,
                                              t - 1))
                        for j in members:
                            if j == i:
                                continue
                            model.addConstraint(
                                [(z, 1.0), (z_prev, 1.0), (y_prev, -1.0),
                                 (self.ref('Y', j, t - 1, path), 1.0)], LE,
                                2.0, self.rowName('cz_{}_{}_{}'.format(i, j, t),
                                                  path, t - 1))

    def setupCapacity(self):
        model = self.model
        for path in self.paths:
            for k, members in self.instance.item_sets.items():
                if not members:
                    continue
                for t in range(1, self.instance.horizon + 1):
                    name = self.rowName('cap_{}_{}'.format(k, t), path, t - 1)
                    if model.hasConstraint(name):
                        continue
                    terms = []
                    for i in members:
                        item = self.instance.items[i]
                        terms.append((self.ref('Y', i, t, path),
                                      item.setup_time))
                        terms.append((self.ref('Q', i, t, path),
                                      item.production_time))
                    model.addConstraint(terms, LE,
                                        self.instance.capacity(k, t), name)

    def setupNonAnticipativity(self):
        """Equates the copies of paths sharing a node with the first one."""

        model = self.model
        n = self.instance.n_items
        horizon = self.instance.horizon
        for depth in range(horizon):
            groups = {}
            for path in self.paths:
                groups.setdefault(self.view.nodeAt(path, depth), []).append(path)
            for members in groups.values():
                first = members[0]
                for path in members[1:]:
                    for i in range(n):
                        kinds = [('Z', depth + 1), ('Q', depth + 1)]
                        if depth >= 1:
                            kinds += [('I', depth), ('B', depth)]
                        for kind, t in kinds:
                            model.addConstraint(
                                [(self.ref(kind, i, t, path), 1.0),
                                 (self.ref(kind, i, t, first), -1.0)], EQ, 0.0,
                                'na_{}_{}_{}_p{}'.format(kind, i, t, path))


def buildCompact(instance, tree):
    """Compact model with explicit non-anticipativity rows."""
    return LotSizingModelBuilder(instance, tree, COMPACT).build()


def buildImplicit(instance, tree):
    """Node-indexed model, non-anticipativity by construction."""
    return LotSizingModelBuilder(instance, tree, IMPLICIT).build()


def buildPartialImplicit(instance, tree, partial):
    if partial.tree is not tree.tree:
        raise ModelBuildError('partial tree was sampled from another tree')
    return LotSizingModelBuilder(instance, partial, IMPLICIT,
                                 name='partial').build()


def buildDeterministic(instance, demand):
    """Single scenario model for a demand matrix (items x periods)."""
    path = ScenarioPath(0, (), 1.0, np.asarray(demand))
    return LotSizingModelBuilder(instance, _SinglePathView(path), COMPACT,
                                 name='deterministic').build()


def _buildSinglePath(instance, path, setup_costs, name):
    builder = LotSizingModelBuilder(instance, _SinglePathView(path), SUBPROBLEM,
                                    setup_costs=setup_costs, name=name)
    return builder, builder.build()


def buildSubproblem(instance, path, ph_inputs=None, penalty_mode=LINEARIZED):
    """Deterministic model of one path plus the progressive hedging terms
       Lambda (x - x~) + rho/2 (x - x~)^2 for every Y, Z, Q, I, B.

    type: path: ScenarioPath
    type: ph_inputs: PhInputs. None builds the plain scenario problem
    """

    if penalty_mode not in PENALTY_MODES:
        raise ModelBuildError('unknown penalty mode {!r}'.format(penalty_mode))
    setup_costs = None if ph_inputs is None else ph_inputs.setup_costs
    builder, model = _buildSinglePath(instance, path, setup_costs, 'subproblem')
    model.metadata['path'] = int(path.id)
    model.metadata['penalty_mode'] = penalty_mode
    if ph_inputs is None:
        return model
    for k, kind in enumerate(KINDS):
        for i in range(instance.n_items):
            for t in range(1, instance.horizon + 1):
                ref = builder.ref(kind, i, t, path.id)
                target = float(ph_inputs.consensus[k, i, t - 1])
                multiplier = float(ph_inputs.multipliers[k, i, t - 1])
                rho = float(ph_inputs.rho[k, i, t - 1])
                model.addObjective(ref, multiplier)
                model.objective_constant -= multiplier * target
                if rho == 0.0:
                    continue
                if penalty_mode == QUADRATIC:
                    model.addQuadratic(ref, 0.5 * rho)
                    model.addObjective(ref, -rho * target)
                    model.objective_constant += 0.5 * rho * target ** 2
                elif kind in BINARY_KINDS:
                    # x^2 == x on binaries
                    model.addObjective(ref, 0.5 * rho * (1.0 - 2.0 * target))
                    model.objective_constant += 0.5 * rho * target ** 2
                else:
                    _addDeviation(model, ref, target, 0.5 * rho)
    return model


def _addDeviation(model, ref, target, weight):
    """weight * |x - target| through P >= x - target, P >= target - x."""

    dev = VariableRef('P' + ref.kind, ref.item, ref.period, ref.scope)
    model.addVariable(dev, 0.0, math.inf)
    model.addObjective(dev, weight)
    model.addConstraint([(ref, 1.0), (dev, -1.0)], LE, target,
                        'dvu_' + dev.name)
    model.addConstraint([(ref, 1.0), (dev, 1.0)], GE, target,
                        'dvl_' + dev.name)


def fixSetupPlan(model, plan):
    """Copy of model with every Y fixed to the plan, recourse left free."""

    fixed = model.copy()
    n_items, horizon = plan.shape
    found = 0
    for ref in fixed.variables:
        if ref.kind != 'Y':
            continue
        if not (0 <= ref.item < n_items and 1 <= ref.period <= horizon):
            raise ModelBuildError('setup plan is {} x {}, model has {}'.format(
                n_items, horizon, ref.name))
        fixed.fixVariable(ref, plan.values[ref.item, ref.period - 1])
        found += 1
    if found == 0:
        raise ModelBuildError('model has no setup variables to fix')
    fixed.metadata['fixed_plan'] = True
    return fixed
