"""
Evaluation code
Scores fixed setup plans on the full scenario tree, computes cost deltas and
folds per-instance study records into grouped result tables
"""

import logging
from dataclasses import dataclass, replace
from pathlib import Path

import matplotlib.pyplot as plt
import pandas as pd

from stochlot.milpmodel import (SetupPlan, buildImplicit, buildPartialImplicit,
                                fixSetupPlan)
from stochlot.progressivehedging import PhConfig, runPh
from stochlot.solverbackend import OPTIMAL, SolverConfig, solve

logger = logging.getLogger(__name__)

DEFAULT_GROUPS = ('utilization', 'demand_type')
OPTIMAL_REFERENCE = 'optimal'
PARTIAL_REFERENCE = 'partial'


class EvaluationError(Exception):
    """Raised when a plan cannot be scored."""


@dataclass
class PlanCost():
    """type: optimal: bool. False when the solve stopped at a limit"""

    cost: float
    optimal: bool
    status: str
    bound: float


def evaluatePlan(instance, tree, plan, config=None, backend=None, model=None):
    """Expected cost of plan on the full tree, recourse re-optimized.

    type: model: MilpModel. Implicit model of the tree, built when None
    """

    if plan.shape != (instance.n_items, instance.horizon):
        raise EvaluationError('setup plan is {} x {}, instance has {} items '
                              'x {} periods'.format(plan.shape[0],
                                                    plan.shape[1],
                                                    instance.n_items,
                                                    instance.horizon))
    if model is None:
        model = buildImplicit(instance, tree)
    result = solve(fixSetupPlan(model, plan), config, backend)
    if not result.hasSolution:
        raise EvaluationError('plan evaluation ended {}: {}'.format(
            result.status, result.message))
    if result.status != OPTIMAL:
        logger.warning('plan evaluation hit a limit, cost %.6g is an '
                       'incumbent', result.objective)
    return PlanCost(result.objective, result.status == OPTIMAL,
                    result.status, result.bound)


def costDelta(candidate, reference):
    """100 (candidate - reference) / reference, positive when the candidate
       is costlier.
    """

    if reference == 0:
        raise ValueError('reference cost is 0, delta undefined')
    return 100.0 * (candidate - reference) / reference


def referenceCost(instance, tree, kind=OPTIMAL_REFERENCE, partial=None,
                  config=None, backend=None, model=None):
    """Optimal implicit cost of the full tree, or the full-tree cost of the
       partial implicit model's plan.
    """

    if model is None:
        model = buildImplicit(instance, tree)
    if kind == OPTIMAL_REFERENCE:
        result = solve(model, config, backend)
        if not result.hasSolution:
            raise EvaluationError('reference solve ended {}: {}'.format(
                result.status, result.message))
        return result.objective
    if kind == PARTIAL_REFERENCE:
        if partial is None:
            raise EvaluationError('partial reference needs a path subset')
        result = solve(buildPartialImplicit(instance, tree, partial), config,
                       backend)
        if not result.hasSolution:
            raise EvaluationError('partial solve ended {}: {}'.format(
                result.status, result.message))
        plan = SetupPlan.fromValues(result.values, instance.n_items,
                                    instance.horizon)
        return evaluatePlan(instance, tree, plan, config, backend,
                            model).cost
    raise EvaluationError('unknown reference {!r}'.format(kind))


def studyRecord(instance, ph_config, report, cost, reference_cost):
    """Flat record of one PH run; grid coordinates come from the instance
       metadata.
    """

    record = {'name': instance.name}
    record.update(instance.metadata)
    record.update({
        'lambda': ph_config.rho_lambda,
        'consensus': ph_config.consensus_mode,
        'adjustments': ph_config.adjustments_enabled,
        'runtime': report.wall_time,
        'iterations': report.iterations,
        'converged': report.converged,
        'forced': report.forced,
        'cost': cost,
        'reference_cost': reference_cost,
        'delta': costDelta(cost, reference_cost),
    })
    return record


def recordFromReport(document):
    """Study record from a PH report JSON document with an evaluation
       block.
    """

    try:
        evaluation = document['evaluation']
        config = document['config']
        record = {'name': document['instance']['name']}
        record.update(document['instance']['metadata'])
        record.update({
            'lambda': config['rho_lambda'],
            'consensus': config['consensus_mode'],
            'adjustments': config['adjustments_enabled'],
            'runtime': document['timing']['wall_time'],
            'iterations': document['iterations'],
            'converged': document['converged'],
            'forced': document['forced'],
            'cost': evaluation['cost'],
            'reference_cost': evaluation['reference_cost'],
            'delta': evaluation['delta'],
        })
    except (KeyError, TypeError) as ex:
        raise EvaluationError('report lacks field {}'.format(ex))
    return record


def runStudy(cases, lambdas=(1.0,), consensus_modes=('average',),
             adjustments=(True,), ph_config=None, solver_config=None,
             backend=None, reference=OPTIMAL_REFERENCE):
    """Runs PH over a lambda x consensus x adjustments grid per case.

    The reference cost is computed once per case; PH runs on the case's
    partial tree when one is given and is always scored on the full tree.
    type: cases: list of dict. {'instance', 'tree'[, 'partial']}
    """

    base = ph_config or PhConfig()
    solver_config = solver_config or SolverConfig()
    records = []
    for case in cases:
        instance, tree = case['instance'], case['tree']
        partial = case.get('partial')
        model = buildImplicit(instance, tree)
        reference_cost = referenceCost(instance, tree, reference, partial,
                                       solver_config, backend, model)
        for rho_lambda in lambdas:
            for consensus in consensus_modes:
                for adjust in adjustments:
                    config = replace(base, rho_lambda=rho_lambda,
                                     consensus_mode=consensus,
                                     adjustments_enabled=adjust)
                    report, plan = runPh(instance, partial or tree, config,
                                         solver_config, backend)
                    cost = evaluatePlan(instance, tree, plan, solver_config,
                                        backend, model).cost
                    records.append(studyRecord(instance, config, report, cost,
                                               reference_cost))
                    logger.info('%s lambda=%g %s adjustments=%s: delta %.3f%%',
                                instance.name, rho_lambda, consensus, adjust,
                                records[-1]['delta'])
    return records


def aggregateReport(records, by=None):
    """Group means of runtime, delta and iterations plus the converged
       percentage.

    type: by: list. Grouping keys, defaults to utilization x demand type
    """

    by = list(by or DEFAULT_GROUPS)
    frame = pd.DataFrame(list(records))
    missing = [key for key in by + ['runtime', 'delta', 'converged']
               if key not in frame.columns]
    if missing:
        raise EvaluationError('records lack columns {}'.format(missing))
    frame['converged'] = frame['converged'].astype(float) * 100.0
    if 'iterations' not in frame.columns:
        frame['iterations'] = float('nan')
    table = frame.groupby(by, sort=True).agg(
        runtime=('runtime', 'mean'),
        delta=('delta', 'mean'),
        iterations=('iterations', 'mean'),
        converged_pct=('converged', 'mean'),
        instances=('delta', 'size'),
    ).reset_index()
    return table


def writeReport(table, path):
    """Writes a table as CSV or JSON, chosen by the file suffix."""

    path = Path(path)
    if path.suffix == '.json':
        table.to_json(str(path), orient='records', indent=2)
    else:
        table.to_csv(str(path), index=False)


def plotReport(table, value='delta', by=None, save=None):
    """Bar plot of one aggregated column over the groups."""

    by = list(by or [c for c in table.columns if c not in (
        'runtime', 'delta', 'iterations', 'converged_pct', 'instances')])
    labels = [' / '.join(str(row[key]) for key in by)
              for _, row in table.iterrows()]
    plt.bar(range(len(labels)), table[value])
    plt.xticks(range(len(labels)), labels, rotation=60)
    plt.title('{} by {}'.format(value, ', '.join(by)))
    plt.xlabel(' / '.join(by))
    plt.ylabel(value)
    plt.tight_layout()
    if save:
        plt.savefig(fname=str(save), format='pdf')
    else:
        plt.show()
    plt.close()


def evaluatePlans(instance, tree, plans, config=None, backend=None):
    """Scores named plans against one implicit model build.

    type: plans: list of (name, SetupPlan)
    """

    model = buildImplicit(instance, tree)
    rows = []
    for name, plan in plans:
        cost = evaluatePlan(instance, tree, plan, config, backend, model)
        rows.append({'plan': name, 'cost': cost.cost, 'optimal': cost.optimal,
                     'status': cost.status, 'bound': cost.bound})
    return pd.DataFrame(rows, columns=['plan', 'cost', 'optimal', 'status',
                                       'bound'])
