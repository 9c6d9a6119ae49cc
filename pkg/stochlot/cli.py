"""
Command line front end
Wires the pipeline generate -> build tree -> solve (compact, implicit,
partial, progressive hedging) -> evaluate -> report. Every command writes
<out>.manifest.json with its argv and flags; failures print a JSON error
record on stderr and exit with 1
"""

import argparse
import json
import logging
import sys
import time
from pathlib import Path

from stochlot.evaluation import (EvaluationError, OPTIMAL_REFERENCE,
                                 PARTIAL_REFERENCE, aggregateReport,
                                 costDelta, evaluatePlan, evaluatePlans,
                                 plotReport, recordFromReport, referenceCost,
                                 writeReport)
from stochlot.instance import InstanceError, loadInstance
from stochlot.instancegen import GenConfig, generateSuite, writeSuite
from stochlot.lpformat import LpFormatError
from stochlot.milpmodel import (COMPACT, IMPLICIT, LINEARIZED, PENALTY_MODES,
                                ModelBuildError, SetupPlan, buildCompact,
                                buildImplicit, buildPartialImplicit, loadPlan,
                                savePlan)
from stochlot.progressivehedging import (CONSENSUS_MODES, PhConfig, PhError,
                                         ProgressiveHedging)
from stochlot.scenariotree import (ScenarioTreeError, buildTree,
                                   constantSampler, loadTree,
                                   samplePathSubset, saveTree, sampleLumpy)
from stochlot.solverbackend import (BUILTIN, ERROR, EXTERNAL, SolverConfig,
                                    SolverError, exportLpFile, solve,
                                    solveLpFile)

logger = logging.getLogger(__name__)

PARTIAL = 'partial'
SAMPLERS = {'lumpy': sampleLumpy, 'constant': constantSampler}

HINTS = [
    (LpFormatError, 'check the LP file against the supported grammar '
                    '(Minimize, Subject To, Bounds, Binary, Generals, End)'),
    (InstanceError, 'fix the instance file, `stochlot gen suite` writes '
                    'valid examples'),
    (ScenarioTreeError, 'rebuild the tree with `stochlot tree build` for the '
                        'same instance'),
    (ModelBuildError, 'instance and tree dimensions must match, rebuild '
                      'the tree for this instance'),
    (SolverError, 'select a backend with --backend or $STOCHLOT_BACKEND, '
                  'the built-in one needs the linearized penalty mode'),
    (PhError, 'check the PH flags against `stochlot ph run --help`'),
    (EvaluationError, 'plans must match the instance dimensions'),
    (json.JSONDecodeError, 'result and config files must be the JSON '
                           'documents written by stochlot'),
    (OSError, 'check that the input files exist and the output directory '
              'is writable'),
]


def errorRecord(ex):
    hint = next((text for kind, text in HINTS if isinstance(ex, kind)), '')
    return {'error': type(ex).__name__, 'message': str(ex), 'hint': hint}


def writeManifest(args, argv, out):
    """Writes <out>.manifest.json with argv and every parsed flag."""

    flags = {key: value for key, value in vars(args).items()
             if key != 'func'}
    path = Path(str(out).rstrip('/') + '.manifest.json')
    with open(str(path), 'w') as manifest_file:
        json.dump({'argv': list(argv), 'flags': flags}, manifest_file,
                  indent=2, default=str)
    return path


def _writeJson(document, path):
    with open(str(path), 'w') as out_file:
        json.dump(document, out_file, indent=2)


def _solverConfig(args):
    return SolverConfig(time_limit=args.time_limit, mip_gap=args.mip_gap,
                        max_nodes=args.max_nodes)


def _view(args, tree):
    if args.paths is None:
        return tree
    return samplePathSubset(tree, args.paths, args.seed)


def cmdGen(args, argv):
    config = GenConfig.getConfig(args.config) if args.config else GenConfig()
    instances = generateSuite(config, args.seed)
    writeSuite(instances, args.out, config, args.seed)
    writeManifest(args, argv, args.out)
    print('wrote {} instances to {}'.format(len(instances), args.out))
    return 0


def cmdTree(args, argv):
    instance = loadInstance(args.instance)
    if args.periods is not None and args.periods != instance.horizon:
        raise ScenarioTreeError('--periods {} differs from the instance '
                                'horizon {}'.format(args.periods,
                                                    instance.horizon))
    tree = buildTree(instance, args.branching, SAMPLERS[args.sampler],
                     args.seed)
    saveTree(tree, args.out)
    writeManifest(args, argv, args.out)
    print('wrote tree with {} paths to {}'.format(tree.numPaths, args.out))
    return 0


def _buildModel(args):
    instance = loadInstance(args.instance)
    tree = loadTree(args.tree)
    if args.mode == COMPACT:
        return instance, buildCompact(instance, tree)
    if args.mode == IMPLICIT:
        return instance, buildImplicit(instance, tree)
    if args.paths is None:
        raise ModelBuildError('--mode partial needs --paths')
    return instance, buildPartialImplicit(instance, tree, _view(args, tree))


def cmdSolve(args, argv):
    config = _solverConfig(args)
    if args.model:
        model, result = solveLpFile(args.model, config, args.backend)
        instance = None
    else:
        if not (args.instance and args.tree):
            raise SolverError('solve needs --model or --instance and --tree')
        instance, model = _buildModel(args)
        result = solve(model, config, args.backend)
    document = {
        'model': model.name,
        'status': result.status,
        'objective': result.objective,
        'bound': result.bound,
        'gap': result.gap,
        'node_count': result.node_count,
        'message': result.message,
        'values': {ref.name: value for ref, value in result.values.items()},
        'timing': {'wall_time': result.wall_time},
    }
    if instance is not None and result.hasSolution:
        plan = SetupPlan.fromValues(result.values, instance.n_items,
                                    instance.horizon)
        document['plan'] = plan.toDict()
        if args.plan_out:
            savePlan(plan, args.plan_out)
    if args.out:
        _writeJson(document, args.out)
        writeManifest(args, argv, args.out)
    print('{} objective {!r}'.format(result.status, result.objective))
    return 1 if result.status == ERROR else 0


def cmdPh(args, argv):
    instance = loadInstance(args.instance)
    tree = loadTree(args.tree)
    view = _view(args, tree)
    config = PhConfig.getConfig(args.config) if args.config else PhConfig()
    config = PhConfig(**dict(vars(config), **{
        key: value for key, value in (
            ('rho_lambda', args.rho_lambda),
            ('consensus_mode', args.consensus),
            ('adjustments_enabled', None if args.adjustments is None
             else args.adjustments == 'on'),
            ('penalty_mode', args.penalty),
            ('epsilon', args.epsilon),
            ('max_iterations', args.max_iterations),
            ('workers', args.workers)) if value is not None}))
    solver_config = _solverConfig(args)
    report = ProgressiveHedging(instance, view, config, solver_config,
                                args.backend).run()
    document = report.toDict()
    document['instance'] = {'name': instance.name,
                            'metadata': dict(instance.metadata)}
    document['paths'] = [int(p) for p in view.pathIds()]
    if args.evaluate != 'none':
        model = buildImplicit(instance, tree)
        reference = referenceCost(instance, tree, args.evaluate,
                                  view if args.paths else None,
                                  solver_config, args.backend, model)
        cost = evaluatePlan(instance, tree, report.plan, solver_config,
                            args.backend, model).cost
        document['evaluation'] = {'reference': args.evaluate,
                                  'cost': cost, 'reference_cost': reference,
                                  'delta': costDelta(cost, reference)}
    _writeJson(document, args.out)
    if args.plan_out:
        savePlan(report.plan, args.plan_out)
    if args.plot:
        report.plotTrace(save=args.plot)
    writeManifest(args, argv, args.out)
    print('{} after {} iterations'.format(
        'converged' if report.converged else 'not converged',
        report.iterations))
    return 0


def cmdEvaluate(args, argv):
    instance = loadInstance(args.instance)
    tree = loadTree(args.tree)
    plans = [(Path(path).name, loadPlan(path)) for path in args.plan]
    table = evaluatePlans(instance, tree, plans, _solverConfig(args),
                          args.backend)
    if args.reference_cost is not None:
        table['reference_cost'] = args.reference_cost
        table['delta'] = [costDelta(cost, args.reference_cost)
                          for cost in table['cost']]
    writeReport(table, args.out)
    writeManifest(args, argv, args.out)
    print(table.to_string(index=False))
    return 0


def cmdReport(args, argv):
    records = []
    for path in args.results:
        with open(str(path), 'r') as result_file:
            records.append(recordFromReport(json.load(result_file)))
    table = aggregateReport(records, args.by)
    writeReport(table, args.out)
    if args.plot:
        plotReport(table, args.value, args.by, save=args.plot)
    writeManifest(args, argv, args.out)
    print(table.to_string(index=False))
    return 0


def cmdExport(args, argv):
    _, model = _buildModel(args)
    exportLpFile(model, args.out)
    writeManifest(args, argv, args.out)
    print('wrote {} ({} variables, {} constraints)'.format(
        args.out, model.numVariables, model.numConstraints))
    return 0


def _addSolverFlags(parser):
    parser.add_argument('--backend', choices=(BUILTIN, EXTERNAL),
                        default=None,
                        help='solver backend, defaults to $STOCHLOT_BACKEND '
                             'or builtin')
    parser.add_argument('--time-limit', type=float, default=10800.0,
                        help='seconds per solve call')
    parser.add_argument('--mip-gap', type=float, default=1e-6)
    parser.add_argument('--max-nodes', type=int, default=None)


def _addModelFlags(parser, required=True):
    parser.add_argument('--instance', required=required)
    parser.add_argument('--tree', required=required,
                        help='HDF5 tree written by `tree build`')
    parser.add_argument('--mode', choices=(COMPACT, IMPLICIT, PARTIAL),
                        default=IMPLICIT)
    parser.add_argument('--paths', type=int, default=None,
                        help='sample this many paths for a partial tree')
    parser.add_argument('--seed', type=int, default=0)


def buildParser():
    parser = argparse.ArgumentParser(
        prog='stochlot',
        description='Stochastic multi-level lot sizing with setup '
                    'carry-over')
    parser.add_argument('--log-level', default='WARNING',
                        choices=('DEBUG', 'INFO', 'WARNING', 'ERROR'))
    commands = parser.add_subparsers(dest='command', required=True)

    gen = commands.add_parser('gen', help='instance generation')
    gen_commands = gen.add_subparsers(dest='action', required=True)
    suite = gen_commands.add_parser('suite', help='write the benchmark grid')
    suite.add_argument('--seed', type=int, default=0)
    suite.add_argument('--out', required=True, help='output directory')
    suite.add_argument('--config', help='GenConfig JSON overriding the grid')
    suite.set_defaults(func=cmdGen)

    tree = commands.add_parser('tree', help='scenario trees')
    tree_commands = tree.add_subparsers(dest='action', required=True)
    build = tree_commands.add_parser('build', help='sample a full tree')
    build.add_argument('--instance', required=True)
    build.add_argument('--branching', type=int, required=True)
    build.add_argument('--periods', type=int, default=None,
                       help='must equal the instance horizon when given')
    build.add_argument('--sampler', choices=sorted(SAMPLERS), default='lumpy')
    build.add_argument('--seed', type=int, default=0)
    build.add_argument('--out', required=True)
    build.set_defaults(func=cmdTree)

    solve_parser = commands.add_parser('solve', help='solve one model')
    _addModelFlags(solve_parser, required=False)
    solve_parser.add_argument('--model', help='LP file, replaces '
                                              '--instance/--tree')
    solve_parser.add_argument('--plan-out', help='write the setup plan')
    solve_parser.add_argument('--out', help='result JSON')
    _addSolverFlags(solve_parser)
    solve_parser.set_defaults(func=cmdSolve)

    ph = commands.add_parser('ph', help='progressive hedging')
    ph_commands = ph.add_subparsers(dest='action', required=True)
    run = ph_commands.add_parser('run', help='run progressive hedging')
    run.add_argument('--instance', required=True)
    run.add_argument('--tree', required=True)
    run.add_argument('--paths', type=int, default=None)
    run.add_argument('--seed', type=int, default=0)
    run.add_argument('--config', help='PhConfig JSON, flags override it')
    run.add_argument('--lambda', dest='rho_lambda', type=float, default=None)
    run.add_argument('--consensus', choices=CONSENSUS_MODES, default=None)
    run.add_argument('--adjustments', choices=('on', 'off'), default=None)
    run.add_argument('--penalty', choices=PENALTY_MODES, default=None,
                     help='default {}'.format(LINEARIZED))
    run.add_argument('--epsilon', type=float, default=None)
    run.add_argument('--max-iterations', type=int, default=None)
    run.add_argument('--workers', type=int, default=None)
    run.add_argument('--evaluate',
                     choices=(OPTIMAL_REFERENCE, PARTIAL_REFERENCE, 'none'),
                     default='none',
                     help='score the plan on the full tree against a '
                          'reference')
    run.add_argument('--plan-out')
    run.add_argument('--plot', help='pdf file for the iteration trace')
    run.add_argument('--out', required=True, help='report JSON')
    _addSolverFlags(run)
    run.set_defaults(func=cmdPh)

    evaluate = commands.add_parser('evaluate', help='score setup plans')
    evaluate.add_argument('--instance', required=True)
    evaluate.add_argument('--tree', required=True)
    evaluate.add_argument('--plan', required=True, nargs='+')
    evaluate.add_argument('--reference-cost', type=float, default=None)
    evaluate.add_argument('--out', required=True, help='CSV or JSON table')
    _addSolverFlags(evaluate)
    evaluate.set_defaults(func=cmdEvaluate)

    report = commands.add_parser('report', help='group PH reports')
    report.add_argument('--results', required=True, nargs='+',
                        help='report JSON files of `ph run --evaluate`')
    report.add_argument('--by', nargs='+',
                        default=['utilization', 'demand_type'])
    report.add_argument('--value', default='delta',
                        help='column plotted with --plot')
    report.add_argument('--plot')
    report.add_argument('--out', required=True, help='CSV or JSON table')
    report.set_defaults(func=cmdReport)

    export = commands.add_parser('export', help='write a model as LP file')
    _addModelFlags(export)
    export.add_argument('--out', required=True)
    export.set_defaults(func=cmdExport)
    return parser


def main(argv=None):
    argv = sys.argv[1:] if argv is None else list(argv)
    args = buildParser().parse_args(argv)
    logging.basicConfig(level=getattr(logging, args.log_level),
                        format='%(asctime)s %(name)s %(levelname)s '
                               '%(message)s')
    start = time.monotonic()
    try:
        code = args.func(args, argv)
    except (InstanceError, ScenarioTreeError, ModelBuildError, SolverError,
            LpFormatError, PhError, EvaluationError, json.JSONDecodeError,
            OSError) as ex:
        logger.debug('command failed', exc_info=True)
        sys.stderr.write(json.dumps(errorRecord(ex)) + '\n')
        return 1
    logger.info('%s finished in %.2f s', args.command,
                time.monotonic() - start)
    return code


if __name__ == '__main__':
    sys.exit(main())
