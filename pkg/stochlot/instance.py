"""
Lot-sizing instance classes
For handling the deterministic data of a multi-item multi-echelon
capacitated lot-sizing problem with setup carry-over: items, bill of
materials, resources and their capacities
"""

import json
import logging
import math
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path

import networkx as nx
import numpy as np

logger = logging.getLogger(__name__)

FORMAT_VERSION = 1
END_ITEM = 'end-item'
COMPONENT = 'component'
ITEM_KINDS = (END_ITEM, COMPONENT)
NONNEGATIVE_FIELDS = ('setup_cost', 'setup_time', 'production_time',
                      'production_cost', 'holding_cost', 'backlog_cost',
                      'lost_sale_cost', 'initial_inventory')
DATA_PATH = Path(os.path.dirname(__file__)) / 'data/instances'


class InstanceError(Exception):
    """Base class for instance related errors."""


class InstanceParseError(InstanceError):
    """Instance file could not be read. Message names the field or line."""


class FormatVersionError(InstanceError):
    """Instance or tree file written with an unsupported format_version."""


class InstanceValidationError(InstanceError):
    """Instance violates one or more invariants."""

    def __init__(self, violations):
        self.violations = list(violations)
        super().__init__('; '.join(self.violations))


class BigMError(InstanceError):
    """Production quantity cannot be bounded."""


@dataclass(frozen=True)
class Item():
    """One item of the product structure.

    type: kind: String. END_ITEM or COMPONENT
    type: resource: int. Index of the only resource the item uses
    """

    id: int
    kind: str
    setup_cost: float
    setup_time: float
    production_time: float
    production_cost: float
    holding_cost: float
    backlog_cost: float
    lost_sale_cost: float
    lead_time: int = 0
    initial_inventory: float = 0.0
    resource: int = 0

    @property
    def isComponent(self):
        return self.kind == COMPONENT


@dataclass(frozen=True)
class BomMatrix():
    """Sparse bill of materials. entries: (component i, parent j, R_ij)."""

    entries: tuple = ()

    def __post_init__(self):
        entries = tuple(sorted((int(i), int(j), float(r))
                               for i, j, r in self.entries))
        object.__setattr__(self, 'entries', entries)

    @classmethod
    def fromDict(cls, quantities):
        """type: quantities: dict. {(component, parent): units}"""
        return cls(tuple((i, j, r) for (i, j), r in quantities.items()))

    def quantity(self, component, parent):
        for i, j, r in self.entries:
            if i == component and j == parent:
                return r
        return 0.0

    def components(self, parent):
        """Returns [(component, R_ij)] consumed by parent."""
        return [(i, r) for i, j, r in self.entries if j == parent and r > 0]

    def parents(self, component):
        """Returns [(parent, R_ij)] consuming component."""
        return [(j, r) for i, j, r in self.entries if i == component and r > 0]

    def toArray(self, n_items):
        matrix = np.zeros((n_items, n_items))
        for i, j, r in self.entries:
            matrix[i, j] = r
        return matrix

    def graph(self, n_items):
        """Directed graph with an arc component -> parent per positive entry."""
        g = nx.DiGraph()
        g.add_nodes_from(range(n_items))
        g.add_edges_from((i, j) for i, j, r in self.entries if r > 0)
        return g


@dataclass(frozen=True)
class ResourceProfile():
    """type: capacity: tuple. C_kt for t = 1..T"""

    id: int
    capacity: tuple

    def __post_init__(self):
        object.__setattr__(self, 'capacity',
                           tuple(float(c) for c in self.capacity))


@dataclass(frozen=True)
class Instance():
    """Deterministic data of one lot-sizing problem.

    Periods are numbered 1..horizon, items and resources 0..n-1.
    mean_demand holds the base mean demand F_it used to sample scenario
    trees (rows items, columns periods).
    """

    horizon: int
    items: tuple
    bom: BomMatrix
    resources: tuple
    mean_demand: tuple = ()
    name: str = ''
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        object.__setattr__(self, 'items', tuple(self.items))
        object.__setattr__(self, 'resources', tuple(self.resources))
        if not self.mean_demand:
            mean_demand = tuple((0.0,) * self.horizon for _ in self.items)
        else:
            mean_demand = tuple(tuple(float(f) for f in row)
                                for row in self.mean_demand)
        object.__setattr__(self, 'mean_demand', mean_demand)

    @property
    def n_items(self):
        return len(self.items)

    @property
    def item_sets(self):
        """I_k: items per resource id."""
        sets = {resource.id: [] for resource in self.resources}
        for item in self.items:
            sets.setdefault(item.resource, []).append(item.id)
        return {k: tuple(v) for k, v in sets.items()}

    @property
    def end_items(self):
        return tuple(item.id for item in self.items if not item.isComponent)

    @property
    def components(self):
        return tuple(item.id for item in self.items if item.isComponent)

    def itemArray(self, attribute):
        """Returns one item attribute for all items as a numpy array."""
        return np.array([getattr(item, attribute) for item in self.items],
                        dtype=float)

    def capacity(self, resource, period):
        return self.resources[resource].capacity[period - 1]

    def meanDemandArray(self):
        return np.array(self.mean_demand, dtype=float).reshape(
            self.n_items, self.horizon)


def validate(instance):
    """Returns a list of violations, empty iff the instance is well formed.

    Each violation reads '<field>: <rule>'.
    """

    violations = []
    if instance.horizon < 1:
        violations.append('horizon: T >= 1 required')
    resource_ids = [resource.id for resource in instance.resources]
    if resource_ids != list(range(len(resource_ids))):
        violations.append('resources: ids must be 0..K-1 in order')

    for idx, item in enumerate(instance.items):
        where = 'items[{}]'.format(idx)
        if item.id != idx:
            violations.append('{}.id: item ids must be 0..n-1 in order'
                              .format(where))
        if item.kind not in ITEM_KINDS:
            violations.append('{}.kind: must be one of {}'
                              .format(where, ', '.join(ITEM_KINDS)))
        for attribute in NONNEGATIVE_FIELDS:
            value = getattr(item, attribute)
            if not math.isfinite(value) or value < 0:
                violations.append('{}.{}: all costs and times must be '
                                  'finite and >= 0'.format(where, attribute))
        if item.lead_time not in (0, 1):
            violations.append('{}.lead_time: lead time must satisfy '
                              '0 <= L_i <= 1'.format(where))
        if item.lost_sale_cost < item.backlog_cost:
            violations.append('{}.lost_sale_cost: e_i >= b_i required'
                              .format(where))
        if item.resource not in resource_ids:
            violations.append('{}.resource: each item must be assigned to '
                              'exactly one existing resource'.format(where))

    for resource in instance.resources:
        where = 'resources[{}]'.format(resource.id)
        if len(resource.capacity) != instance.horizon:
            violations.append('{}.capacity: one capacity per period '
                              'required'.format(where))
        if any(not math.isfinite(c) or c < 0 for c in resource.capacity):
            violations.append('{}.capacity: C_kt >= 0 required'.format(where))

    violations.extend(_validateBom(instance))

    if len(instance.mean_demand) != instance.n_items or any(
            len(row) != instance.horizon for row in instance.mean_demand):
        violations.append('mean_demand: shape must be items x periods')
    elif any(f < 0 for row in instance.mean_demand for f in row):
        violations.append('mean_demand: F_it >= 0 required')
    return violations


def _validateBom(instance):
    violations = []
    n = instance.n_items
    for i, j, r in instance.bom.entries:
        where = 'bom[{}][{}]'.format(i, j)
        if not (0 <= i < n and 0 <= j < n):
            violations.append('{}: item index out of range'.format(where))
            continue
        if r < 0:
            violations.append('{}: R_ij >= 0 required'.format(where))
        elif r > 0 and not instance.items[i].isComponent:
            violations.append('{}: R_ij > 0 only when i is a component'
                              .format(where))
    edges = [(i, j) for i, j, r in instance.bom.entries
             if r > 0 and 0 <= i < n and 0 <= j < n]
    g = nx.DiGraph(edges)
    if not nx.is_directed_acyclic_graph(g):
        cycle = nx.find_cycle(g)
        path = '->'.join(str(u) for u, _ in cycle) + '->' + str(cycle[0][0])
        violations.append('bom: BOM acyclic violated (cycle {})'.format(path))
    return violations


def echelonLevels(instance):
    """Longest BOM distance from each item to an item without parents."""

    g = instance.bom.graph(instance.n_items)
    levels = np.zeros(instance.n_items, dtype=int)
    for i in reversed(list(nx.topological_sort(g))):
        parents = list(g.successors(i))
        if parents:
            levels[i] = 1 + max(levels[j] for j in parents)
    return levels


def requirementBounds(instance, demand_cap):
    """Upper bound on total system requirement per item over the horizon.

    type: demand_cap: float or array. Largest external demand per item and
                      period (scalar, per item, or items x periods)
    """

    n, horizon = instance.n_items, instance.horizon
    cap = np.asarray(demand_cap, dtype=float)
    if cap.ndim == 1:
        cap = cap[:, None]
    cap = np.broadcast_to(cap, (n, horizon)).copy()
    g = instance.bom.graph(n)
    # parents before their components
    for j in reversed(list(nx.topological_sort(g))):
        for i, r in instance.bom.components(j):
            cap[i] += r * cap[j]
    return cap.sum(axis=1)


def demandBound(instance, item, demand_cap):
    return float(requirementBounds(instance, demand_cap)[item])


def bigM(instance, item, period, demand_cap=None):
    """Upper bound M_it on Q_it, min of C_kt/p_i and the BOM-propagated
       requirement of the whole horizon.

    type: demand_cap: see requirementBounds. None before a tree exists
    """

    if not 1 <= period <= instance.horizon:
        raise InstanceError('period {} outside 1..{}'.format(
            period, instance.horizon))
    it = instance.items[item]
    bound = math.inf
    if it.production_time > 0:
        bound = instance.capacity(it.resource, period) / it.production_time
    if demand_cap is not None:
        bound = min(bound, demandBound(instance, item, demand_cap))
    if math.isinf(bound):
        raise BigMError('items[{}]: production_time is 0 and no demand cap '
                        'is available, M unbounded'.format(item))
    return max(bound, 0.0)


def instanceToDict(instance):
    return {
        'format_version': FORMAT_VERSION,
        'name': instance.name,
        'horizon': instance.horizon,
        'items': [asdict(item) for item in instance.items],
        'bom': [{'component': i, 'parent': j, 'quantity': r}
                for i, j, r in instance.bom.entries],
        'resources': [{'id': resource.id, 'capacity': list(resource.capacity)}
                      for resource in instance.resources],
        'mean_demand': [list(row) for row in instance.mean_demand],
        'metadata': dict(instance.metadata),
    }


_MISSING = object()


def _field(record, name, where, cast, default=_MISSING):
    if name not in record:
        if default is _MISSING:
            raise InstanceParseError("{}: missing field '{}'".format(
                where, name))
        return default
    try:
        return cast(record[name])
    except (TypeError, ValueError):
        raise InstanceParseError("{}.{}: cannot read value {!r}".format(
            where, name, record[name]))


def instanceFromDict(config):
    """Builds an Instance from its JSON document. Raises InstanceParseError."""

    if not isinstance(config, dict):
        raise InstanceParseError('instance document must be an object')
    version = _field(config, 'format_version', 'instance', int)
    if version != FORMAT_VERSION:
        raise FormatVersionError(
            'instance format_version {} unsupported (expected {})'.format(
                version, FORMAT_VERSION))
    horizon = _field(config, 'horizon', 'instance', int)
    items = []
    for idx, record in enumerate(_field(config, 'items', 'instance', list)):
        where = 'items[{}]'.format(idx)
        items.append(Item(
            id=_field(record, 'id', where, int),
            kind=_field(record, 'kind', where, str),
            setup_cost=_field(record, 'setup_cost', where, float),
            setup_time=_field(record, 'setup_time', where, float),
            production_time=_field(record, 'production_time', where, float),
            production_cost=_field(record, 'production_cost', where, float),
            holding_cost=_field(record, 'holding_cost', where, float),
            backlog_cost=_field(record, 'backlog_cost', where, float),
            lost_sale_cost=_field(record, 'lost_sale_cost', where, float),
            lead_time=_field(record, 'lead_time', where, int),
            initial_inventory=_field(record, 'initial_inventory', where,
                                     float, 0.0),
            resource=_field(record, 'resource', where, int)))
    entries = []
    for idx, record in enumerate(_field(config, 'bom', 'instance', list, [])):
        where = 'bom[{}]'.format(idx)
        entries.append((_field(record, 'component', where, int),
                        _field(record, 'parent', where, int),
                        _field(record, 'quantity', where, float)))
    resources = []
    for idx, record in enumerate(_field(config, 'resources', 'instance',
                                        list)):
        where = 'resources[{}]'.format(idx)
        resources.append(ResourceProfile(
            id=_field(record, 'id', where, int),
            capacity=_field(record, 'capacity', where, list)))
    return Instance(horizon=horizon, items=items, bom=BomMatrix(entries),
                    resources=resources,
                    mean_demand=_field(config, 'mean_demand', 'instance',
                                       list, ()),
                    name=_field(config, 'name', 'instance', str, ''),
                    metadata=_field(config, 'metadata', 'instance', dict, {}))


def saveInstance(instance, path):
    """Writes the instance as an indented JSON document."""

    with open(str(path), 'w') as config_file:
        json.dump(instanceToDict(instance), config_file, indent=2)


def loadInstance(path, strict=True):
    """Imports a JSON instance file.

    type: strict: bool. Raise InstanceValidationError on invariant violations
    """

    try:
        with open(str(path), 'r') as data_file:
            config = json.load(data_file)
    except json.JSONDecodeError as ex:
        raise InstanceParseError('{}: line {} column {}: {}'.format(
            path, ex.lineno, ex.colno, ex.msg))
    except OSError as ex:
        raise InstanceError('cannot open instance file {}: {}'.format(
            path, ex.strerror))
    instance = instanceFromDict(config)
    violations = validate(instance)
    if violations:
        if strict:
            raise InstanceValidationError(violations)
        logger.warning('instance %s has %d violations', path, len(violations))
    return instance


def exampleInstance(name='tiny2item'):
    """Loads one of the instances shipped in data/instances."""
    return loadInstance(DATA_PATH / (name + '.json'))
