import json

import numpy as np
import pytest

from stochlot.instance import (InstanceError, instanceToDict, loadInstance,
                               requirementBounds, validate)
from stochlot.instancegen import (ASSEMBLY, COMPONENT_DEMAND, GENERAL,
                                  MANIFEST, GenConfig, builtinBoms,
                                  calibrateCapacity, generateInstance,
                                  generateSuite, writeSuite)


@pytest.fixture(scope='module')
def suite():
    return generateSuite(seed=0)


def _find(suite, **coordinates):
    return [instance for instance in suite
            if all(instance.metadata[key] == value
                   for key, value in coordinates.items())]


def test_suite_shape(suite):
    assert len(suite) == 96
    assert all(instance.n_items == 10 for instance in suite)
    assert all(instance.horizon == 7 for instance in suite)
    assert all(validate(instance) == [] for instance in suite)
    assert len({instance.name for instance in suite}) == 96
    assert suite[0].name == '00-assembly-end-item-u50-none-r2-constant'


def test_suite_is_deterministic_per_seed(suite):
    again = generateSuite(seed=0)
    assert [instanceToDict(i) for i in again] == \
        [instanceToDict(i) for i in suite]
    other = generateSuite(GenConfig(boms=[ASSEMBLY]), seed=1)
    assert other[0].mean_demand != suite[0].mean_demand


def test_bom_structures():
    boms = builtinBoms()
    assert boms[ASSEMBLY].endItems() == (8, 9)
    assert boms[GENERAL].endItems() == (7, 8, 9)
    assert len(boms[ASSEMBLY].bom.entries) == 8
    # every general component but 1, 3 and 6 feeds two parents
    parents = {i: len(boms[GENERAL].bom.parents(i)) for i in range(7)}
    assert parents == {0: 2, 1: 1, 2: 2, 3: 1, 4: 2, 5: 2, 6: 1}


def test_twins_share_demand_and_setup_costs(suite):
    coordinates = dict(bom=GENERAL, demand_type=COMPONENT_DEMAND,
                       setup_times='short', backlog_ratio=4.0,
                       holding='high-late')
    twins = _find(suite, **coordinates)
    assert sorted(t.metadata['utilization'] for t in twins) == [0.5, 0.9]
    low, high = twins
    assert low.mean_demand == high.mean_demand
    assert low.itemArray('setup_cost').tolist() == \
        high.itemArray('setup_cost').tolist()


def test_demand_patterns(suite):
    end_only = _find(suite, bom=ASSEMBLY, demand_type='end-item')[0]
    mean = end_only.meanDemandArray()
    assert np.all(mean[:8] == 0)
    assert np.all((mean[8:] >= 40) & (mean[8:] <= 60))
    components = _find(suite, bom=ASSEMBLY, demand_type=COMPONENT_DEMAND)[0]
    assert np.all(components.meanDemandArray()[:8] > 0)


def test_cost_levels(suite):
    instance = _find(suite, bom=ASSEMBLY, holding='high-late',
                     backlog_ratio=4.0, setup_times='long')[0]
    holding = instance.itemArray('holding_cost')
    # raw materials 0..3, sub-assemblies 4..7, end items 8, 9
    assert holding.tolist() == [1.0] * 4 + [2.0] * 4 + [4.0] * 2
    assert instance.itemArray('backlog_cost').tolist() == \
        (4.0 * holding).tolist()
    assert instance.itemArray('lost_sale_cost').tolist() == \
        (20.0 * holding).tolist()
    assert set(instance.itemArray('setup_time')) == {30.0}
    flat = _find(suite, holding='constant', setup_times='none')[0]
    assert set(flat.itemArray('holding_cost')) == {1.0}
    assert set(flat.itemArray('setup_time')) == {0.0}


@pytest.mark.parametrize('utilization', [0.5, 0.9])
def test_capacity_hits_target_utilization(suite, utilization):
    instance = _find(suite, utilization=utilization, setup_times='short')[0]
    per_period = instance.meanDemandArray().mean(axis=1)
    load = requirementBounds(instance, per_period) / instance.horizon
    for k, members in instance.item_sets.items():
        work = sum(load[i] * instance.items[i].production_time +
                   instance.items[i].setup_time for i in members)
        assert work / instance.capacity(k, 1) == pytest.approx(utilization)
        assert len(set(instance.resources[k].capacity)) == 1


def test_calibration_rejects_bad_utilization(suite):
    with pytest.raises(InstanceError):
        calibrateCapacity(suite[0], suite[0].meanDemandArray(), 0.0)


def test_single_grid_point_with_own_rng():
    structure = builtinBoms()[GENERAL]
    config = GenConfig(horizon=4)
    first = generateInstance(structure, 'end-item', 0.9, 'short', 2.0,
                             'constant', np.random.default_rng(5), config,
                             'single')
    second = generateInstance(structure, 'end-item', 0.9, 'short', 2.0,
                              'constant', np.random.default_rng(5), config,
                              'single')
    assert first == second
    assert first.horizon == 4
    assert first.metadata['setup_times'] == 'short'


def test_config_narrowing_and_checks(tmp_path):
    config = GenConfig(horizon=3, boms=[ASSEMBLY], utilizations=[0.9],
                       setup_profiles=['none'])
    assert config.gridSize == 1 * 2 * 1 * 1 * 2 * 2
    assert len(list(config.grid())) == config.gridSize
    config.saveConfig(tmp_path / 'gen.json')
    assert GenConfig.getConfig(tmp_path / 'gen.json') == config
    with pytest.raises(InstanceError):
        GenConfig(utilizations=[1.5])
    with pytest.raises(InstanceError):
        GenConfig(boms=['tree'])
    with pytest.raises(InstanceError):
        GenConfig.getConfig(tmp_path / 'missing.json')


def test_write_suite(tmp_path):
    config = GenConfig(horizon=3, boms=[ASSEMBLY], demand_types=['end-item'],
                       utilizations=[0.5], setup_profiles=['short'],
                       backlog_ratios=[2.0], holding_schemes=['constant'])
    instances = generateSuite(config, seed=3)
    manifest = writeSuite(instances, tmp_path / 'suite', config, seed=3)
    with open(str(manifest)) as manifest_file:
        document = json.load(manifest_file)
    assert manifest.name == MANIFEST
    assert document['seed'] == 3
    entry = document['instances'][0]
    assert entry['utilization'] == 0.5
    loaded = loadInstance(tmp_path / 'suite' / entry['file'])
    assert instanceToDict(loaded) == instanceToDict(instances[0])
