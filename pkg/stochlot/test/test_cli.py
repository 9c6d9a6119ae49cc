import json

import pandas as pd
import pytest

from stochlot.cli import main
from stochlot.instance import DATA_PATH
from stochlot.instancegen import MANIFEST, GenConfig

TINY = str(DATA_PATH / 'tiny2item.json')


def _load(path):
    with open(str(path)) as json_file:
        return json.load(json_file)


@pytest.fixture
def treeFile(tmp_path):
    path = tmp_path / 'tree.h5'
    assert main(['tree', 'build', '--instance', TINY, '--branching', '2',
                 '--seed', '3', '--out', str(path)]) == 0
    return path


def test_tree_build_writes_manifest(treeFile):
    manifest = _load(str(treeFile) + '.manifest.json')
    assert manifest['argv'][:2] == ['tree', 'build']
    assert manifest['flags']['seed'] == 3
    assert manifest['flags']['branching'] == 2


def test_solve_and_export(treeFile, tmp_path):
    out = tmp_path / 'implicit.json'
    plan = tmp_path / 'plan.json'
    assert main(['solve', '--instance', TINY, '--tree', str(treeFile),
                 '--mode', 'implicit', '--out', str(out),
                 '--plan-out', str(plan)]) == 0
    document = _load(out)
    assert document['status'] == 'optimal'
    assert 'wall_time' in document['timing']
    assert _load(plan)['Y'] == document['plan']['Y']

    lp = tmp_path / 'compact.lp'
    assert main(['export', '--instance', TINY, '--tree', str(treeFile),
                 '--mode', 'compact', '--out', str(lp)]) == 0
    assert lp.read_text().startswith('\\ compact')
    from_file = tmp_path / 'compact.json'
    assert main(['solve', '--model', str(lp), '--out', str(from_file)]) == 0
    assert _load(from_file)['objective'] == \
        pytest.approx(document['objective'], rel=1e-5)


def test_ph_evaluate_and_report(treeFile, tmp_path):
    report = tmp_path / 'ph.json'
    ph_plan = tmp_path / 'ph_plan.json'
    assert main(['ph', 'run', '--instance', TINY, '--tree', str(treeFile),
                 '--lambda', '1', '--consensus', 'average',
                 '--adjustments', 'on', '--max-iterations', '3',
                 '--evaluate', 'optimal', '--out', str(report),
                 '--plan-out', str(ph_plan),
                 '--plot', str(tmp_path / 'trace.pdf')]) == 0
    document = _load(report)
    assert document['instance']['name'] == 'tiny2item'
    assert document['config']['max_iterations'] == 3
    assert document['evaluation']['reference'] == 'optimal'
    assert document['evaluation']['delta'] >= -1e-3
    assert (tmp_path / 'trace.pdf').exists()

    table = tmp_path / 'table.csv'
    assert main(['report', '--results', str(report), '--by', 'demand_type',
                 '--out', str(table)]) == 0
    frame = pd.read_csv(str(table))
    assert frame['instances'].tolist() == [1]

    costs = tmp_path / 'costs.csv'
    assert main(['evaluate', '--instance', TINY, '--tree', str(treeFile),
                 '--plan', str(ph_plan), '--reference-cost',
                 str(document['evaluation']['reference_cost']),
                 '--out', str(costs)]) == 0
    frame = pd.read_csv(str(costs))
    assert frame['plan'].tolist() == ['ph_plan.json']
    assert frame['cost'].iloc[0] == \
        pytest.approx(document['evaluation']['cost'], rel=1e-5)


def test_partial_ph_run(treeFile, tmp_path):
    report = tmp_path / 'partial.json'
    assert main(['ph', 'run', '--instance', TINY, '--tree', str(treeFile),
                 '--paths', '3', '--seed', '1', '--consensus', 'majority',
                 '--max-iterations', '2', '--out', str(report)]) == 0
    document = _load(report)
    assert len(document['paths']) == 3
    assert 'evaluation' not in document


def test_gen_suite(tmp_path):
    config = GenConfig(horizon=3, boms=['general'],
                       demand_types=['component'], utilizations=[0.9],
                       setup_profiles=['long'], backlog_ratios=[4.0],
                       holding_schemes=['high-late'])
    config.saveConfig(tmp_path / 'gen.json')
    out = tmp_path / 'suite'
    assert main(['gen', 'suite', '--seed', '1', '--out', str(out),
                 '--config', str(tmp_path / 'gen.json')]) == 0
    manifest = _load(out / MANIFEST)
    assert [entry['bom'] for entry in manifest['instances']] == ['general']
    assert (tmp_path / 'suite.manifest.json').exists()


def test_errors_become_json_records(tmp_path, capsys):
    code = main(['tree', 'build', '--instance', str(tmp_path / 'no.json'),
                 '--branching', '2', '--out', str(tmp_path / 'tree.h5')])
    assert code == 1
    record = json.loads(capsys.readouterr().err.strip().splitlines()[-1])
    assert record['error'] == 'InstanceError'
    assert record['hint']


def test_periods_must_match_instance(tmp_path, capsys):
    assert main(['tree', 'build', '--instance', TINY, '--branching', '2',
                 '--periods', '5', '--out', str(tmp_path / 'tree.h5')]) == 1
    record = json.loads(capsys.readouterr().err.strip().splitlines()[-1])
    assert record['error'] == 'ScenarioTreeError'


def test_solve_argument_errors(treeFile, capsys):
    assert main(['solve', '--instance', TINY, '--tree', str(treeFile),
                 '--mode', 'partial']) == 1
    assert json.loads(capsys.readouterr().err.strip().splitlines()[-1])[
        'error'] == 'ModelBuildError'
    assert main(['solve']) == 1
    with pytest.raises(SystemExit) as info:
        main(['solve', '--mode', 'bogus'])
    assert info.value.code == 2


def test_report_has_one_row_per_lambda(treeFile, tmp_path):
    results = []
    for rho_lambda in ('1', '10'):
        out = tmp_path / 'ph-{}.json'.format(rho_lambda)
        assert main(['ph', 'run', '--instance', TINY, '--tree', str(treeFile),
                     '--lambda', rho_lambda, '--max-iterations', '2',
                     '--evaluate', 'optimal', '--out', str(out)]) == 0
        results.append(str(out))
    table = tmp_path / 'lambda.csv'
    assert main(['report', '--results'] + results +
                ['--by', 'demand_type', 'lambda', '--out', str(table)]) == 0
    frame = pd.read_csv(str(table))
    assert frame['lambda'].tolist() == [1.0, 10.0]
    assert frame['instances'].tolist() == [1, 1]


def test_malformed_result_file(tmp_path, capsys):
    broken = tmp_path / 'broken.json'
    broken.write_text('{"converged": tru')
    assert main(['report', '--results', str(broken), '--by', 'demand_type',
                 '--out', str(tmp_path / 'table.csv')]) == 1
    record = json.loads(capsys.readouterr().err.strip().splitlines()[-1])
    assert record['error'] == 'JSONDecodeError'
    assert record['hint']
