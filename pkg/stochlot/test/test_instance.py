import json
from dataclasses import replace

import numpy as np
import pytest

from stochlot.instance import (COMPONENT, END_ITEM, BigMError, BomMatrix,
                               FormatVersionError, Instance, InstanceError,
                               InstanceParseError, InstanceValidationError,
                               ResourceProfile, bigM, demandBound,
                               echelonLevels, instanceFromDict,
                               instanceToDict, loadInstance,
                               requirementBounds, saveInstance, validate)
from stochlot.test.conftest import makeItem


def test_shipped_instance_is_valid(tiny):
    assert validate(tiny) == []
    assert tiny.horizon == 3
    assert tiny.end_items == (1,)
    assert tiny.components == (0,)
    assert tiny.item_sets == {0: (0, 1)}
    assert tiny.meanDemandArray().shape == (2, 3)


def test_save_load_keeps_every_field(tiny, tmp_path):
    path = tmp_path / 'tiny.json'
    saveInstance(tiny, path)
    loaded = loadInstance(path)
    assert loaded == tiny
    assert instanceToDict(loaded) == instanceToDict(tiny)


def test_missing_field_names_the_field(tiny):
    document = instanceToDict(tiny)
    del document['items'][1]['lead_time']
    with pytest.raises(InstanceParseError, match=r"items\[1\].*lead_time"):
        instanceFromDict(document)


def test_unknown_format_version(tiny):
    document = instanceToDict(tiny)
    document['format_version'] = 99
    with pytest.raises(FormatVersionError):
        instanceFromDict(document)


def test_malformed_json_reports_line(tmp_path):
    path = tmp_path / 'broken.json'
    path.write_text('{\n  "horizon": 3,\n  oops\n}')
    with pytest.raises(InstanceParseError, match='line 3'):
        loadInstance(path)


def test_missing_file():
    with pytest.raises(InstanceError):
        loadInstance('/nonexistent/instance.json')


def test_bom_cycle_is_reported(tiny):
    cyclic = replace(tiny, items=(replace(tiny.items[0]),
                                  replace(tiny.items[1], kind=COMPONENT)),
                     bom=BomMatrix(((0, 1, 1.0), (1, 0, 1.0))))
    violations = validate(cyclic)
    assert any('BOM acyclic violated' in v for v in violations)


def test_validation_rules(tiny):
    items = list(tiny.items)
    items[1] = replace(items[1], lost_sale_cost=1.0, lead_time=2,
                       holding_cost=-1.0)
    broken = replace(tiny, items=tuple(items),
                     resources=(ResourceProfile(0, (60.0, 60.0)),))
    violations = validate(broken)
    assert any(v.startswith('items[1].lost_sale_cost') for v in violations)
    assert any(v.startswith('items[1].lead_time') for v in violations)
    assert any(v.startswith('items[1].holding_cost') for v in violations)
    assert any(v.startswith('resources[0].capacity') for v in violations)


def test_end_item_with_positive_bom_entry_is_rejected(tiny):
    broken = replace(tiny, bom=BomMatrix(((1, 0, 1.0),)))
    assert any('only when i is a component' in v for v in validate(broken))


def test_strict_load_raises_with_violations(tiny, tmp_path):
    document = instanceToDict(tiny)
    document['items'][0]['lost_sale_cost'] = 0.5
    path = tmp_path / 'bad.json'
    path.write_text(json.dumps(document))
    with pytest.raises(InstanceValidationError) as info:
        loadInstance(path)
    assert info.value.violations
    assert loadInstance(path, strict=False).items[0].lost_sale_cost == 0.5


def test_echelon_levels_three_levels():
    items = [makeItem(0, COMPONENT), makeItem(1, COMPONENT), makeItem(2)]
    instance = Instance(2, items, BomMatrix(((0, 1, 1.0), (1, 2, 2.0))),
                        [ResourceProfile(0, (10.0, 10.0))])
    assert list(echelonLevels(instance)) == [2, 1, 0]


def test_requirement_bounds_propagate_through_bom():
    items = [makeItem(0, COMPONENT), makeItem(1, COMPONENT), makeItem(2)]
    instance = Instance(2, items, BomMatrix(((0, 1, 1.0), (1, 2, 2.0))),
                        [ResourceProfile(0, (10.0, 10.0))])
    cap = np.array([[0, 0], [0, 0], [3, 4]])
    # item 2 needs 7, item 1 needs 2 * 7, item 0 needs 14
    assert list(requirementBounds(instance, cap)) == [14.0, 14.0, 7.0]
    assert demandBound(instance, 1, cap) == 14.0


def test_big_m_is_min_of_capacity_and_demand(tiny):
    assert bigM(tiny, 1, 1) == 60.0
    assert bigM(tiny, 1, 2, demand_cap=5.0) == 15.0
    # component 0 also feeds item 1
    assert bigM(tiny, 0, 2, demand_cap=5.0) == 30.0
    with pytest.raises(InstanceError):
        bigM(tiny, 0, 4)


def test_big_m_without_production_time_needs_demand(tiny):
    items = (replace(tiny.items[0], production_time=0.0), tiny.items[1])
    free = replace(tiny, items=items)
    with pytest.raises(BigMError):
        bigM(free, 0, 1)
    assert bigM(free, 0, 1, demand_cap=2.0) == 12.0


def test_item_kinds(tiny):
    assert tiny.items[0].isComponent
    assert tiny.items[1].kind == END_ITEM
    assert list(tiny.itemArray('setup_cost')) == [40.0, 60.0]
