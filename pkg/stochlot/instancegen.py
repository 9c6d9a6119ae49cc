"""
Benchmark instance generator
Builds the 10-item test grid over BOM structure, demand pattern, resource
utilization, setup time profile, backlog/holding cost ratio and holding cost
scheme; base demands, setup costs and setup time profiles are seeded
stand-ins for the original benchmark tables
"""

import itertools
import json
import logging
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from stochlot.instance import (COMPONENT, END_ITEM, BomMatrix, Instance,
                               InstanceError, Item, ResourceProfile,
                               echelonLevels, requirementBounds, saveInstance,
                               validate)

logger = logging.getLogger(__name__)

ASSEMBLY = 'assembly'
GENERAL = 'general'
END_ITEM_DEMAND = 'end-item'
COMPONENT_DEMAND = 'component'
SETUP_PROFILES = ('none', 'short', 'long')
HOLDING_SCHEMES = ('constant', 'high-late')
MANIFEST = 'manifest.json'


@dataclass(frozen=True)
class BomStructure():
    """type: resource_of: tuple. Resource index of every item"""

    name: str
    bom: BomMatrix
    resource_of: tuple

    @property
    def n_items(self):
        return len(self.resource_of)

    def endItems(self):
        components = {i for i, _, _ in self.bom.entries}
        return tuple(i for i in range(self.n_items) if i not in components)


def builtinBoms():
    """The assembly and the general 10-item structures.

    Assembly: end items 8 and 9, every component feeds exactly one parent.
        0,1 -> 4 -> 8 <- 5 <- 2 ; 3 -> 6 -> 9 <- 7
    General: end items 7, 8, 9, components 0, 2, 4, 5 feed two parents.
        0 -> 3, 4 ; 1 -> 5 ; 2 -> 5, 6 ; 3 -> 7 ; 4 -> 7, 8 ; 5 -> 8, 9 ;
        6 -> 9
    """

    assembly = BomStructure(
        ASSEMBLY,
        BomMatrix(((4, 8, 1.0), (5, 8, 1.0), (6, 9, 1.0), (7, 9, 1.0),
                   (0, 4, 1.0), (1, 4, 1.0), (2, 5, 1.0), (3, 6, 1.0))),
        (0, 0, 0, 0, 1, 1, 1, 1, 2, 2))
    general = BomStructure(
        GENERAL,
        BomMatrix(((3, 7, 1.0), (4, 7, 1.0), (4, 8, 1.0), (5, 8, 1.0),
                   (5, 9, 1.0), (6, 9, 1.0), (0, 3, 1.0), (0, 4, 1.0),
                   (1, 5, 1.0), (2, 5, 1.0), (2, 6, 1.0))),
        (0, 0, 0, 1, 1, 1, 1, 2, 2, 2))
    return {ASSEMBLY: assembly, GENERAL: general}


@dataclass
class GenConfig():
    """Generator settings, the grid levels may be narrowed for smoke
       suites.
    """

    horizon: int = 7
    demand_low: int = 40
    demand_high: int = 60
    component_demand_share: float = 0.25
    setup_cost_low: int = 100
    setup_cost_high: int = 300
    holding_base: float = 1.0
    production_time: float = 1.0
    production_cost: float = 0.0
    setup_time_base: float = None
    lost_sale_factor: float = 5.0
    boms: tuple = (ASSEMBLY, GENERAL)
    demand_types: tuple = (END_ITEM_DEMAND, COMPONENT_DEMAND)
    utilizations: tuple = (0.5, 0.9)
    setup_profiles: tuple = SETUP_PROFILES
    backlog_ratios: tuple = (2.0, 4.0)
    holding_schemes: tuple = HOLDING_SCHEMES

    def __post_init__(self):
        for name in ('boms', 'demand_types', 'utilizations', 'setup_profiles',
                     'backlog_ratios', 'holding_schemes'):
            setattr(self, name, tuple(getattr(self, name)))
        problems = []
        if self.horizon < 1:
            problems.append('horizon must be >= 1')
        if not 0 <= self.demand_low <= self.demand_high:
            problems.append('demand range must satisfy 0 <= low <= high')
        if not 0 <= self.setup_cost_low <= self.setup_cost_high:
            problems.append('setup cost range must satisfy 0 <= low <= high')
        if any(not 0 < u <= 1 for u in self.utilizations):
            problems.append('utilizations must lie in (0, 1]')
        if self.production_time <= 0:
            problems.append('production_time must be > 0')
        if self.lost_sale_factor < 1:
            problems.append('lost_sale_factor must be >= 1')
        unknown = (set(self.boms) - {ASSEMBLY, GENERAL}) | \
            (set(self.demand_types) - {END_ITEM_DEMAND, COMPONENT_DEMAND}) | \
            (set(self.setup_profiles) - set(SETUP_PROFILES)) | \
            (set(self.holding_schemes) - set(HOLDING_SCHEMES))
        if unknown:
            problems.append('unknown grid levels {}'.format(sorted(unknown)))
        if problems:
            raise InstanceError('generator config: ' + '; '.join(problems))

    @property
    def gridSize(self):
        return (len(self.boms) * len(self.demand_types) *
                len(self.utilizations) * len(self.setup_profiles) *
                len(self.backlog_ratios) * len(self.holding_schemes))

    def grid(self):
        """Grid points in generation order."""
        return itertools.product(self.boms, self.demand_types,
                                 self.utilizations, self.setup_profiles,
                                 self.backlog_ratios, self.holding_schemes)

    @classmethod
    def getConfig(cls, path):
        try:
            with open(str(path), 'r') as config_file:
                return cls(**json.load(config_file))
        except (OSError, TypeError, json.JSONDecodeError) as ex:
            raise InstanceError('cannot read generator config {}: {}'.format(
                path, ex))

    def saveConfig(self, path):
        with open(str(path), 'w') as config_file:
            json.dump(asdict(self), config_file, indent=2)


def calibrateCapacity(instance, mean_demand, target_util):
    """Constant capacity per resource hitting target_util on average.

    Load per period: production time of the mean demand propagated through
    the BOM, plus one setup time per item as a lot-for-lot proxy.
    Returns C_kt as resources x periods.
    """

    if not 0 < target_util <= 1:
        raise InstanceError('target utilization must lie in (0, 1], got {}'
                            .format(target_util))
    per_period = np.asarray(mean_demand, dtype=float).mean(axis=1)
    load = requirementBounds(instance, per_period) / instance.horizon
    capacity = np.zeros((len(instance.resources), instance.horizon))
    for k, members in instance.item_sets.items():
        work = sum(instance.items[i].production_time * load[i] +
                   instance.items[i].setup_time for i in members)
        capacity[k] = work / target_util
    return capacity


def _setupTime(profile, base):
    return {'none': 0.0, 'short': base, 'long': 3.0 * base}[profile]


def generateInstance(structure, demand_type, utilization, setup_profile,
                     backlog_ratio, holding_scheme, rng, config=None,
                     name=''):
    """One grid point. rng draws base demands and setup costs."""

    config = config or GenConfig()
    n, horizon = structure.n_items, config.horizon
    end_items = set(structure.endItems())
    mean_demand = np.zeros((n, horizon))
    for i in range(n):
        draws = rng.integers(config.demand_low, config.demand_high + 1,
                             size=horizon)
        if i in end_items:
            mean_demand[i] = draws
        elif demand_type == COMPONENT_DEMAND:
            mean_demand[i] = np.round(config.component_demand_share * draws)
    setup_costs = rng.integers(config.setup_cost_low,
                               config.setup_cost_high + 1, size=n)

    skeleton = Instance(horizon, [Item(i, END_ITEM if i in end_items
                                       else COMPONENT, 0.0, 0.0, 0.0, 0.0,
                                       0.0, 0.0, 0.0) for i in range(n)],
                        structure.bom, [])
    levels = echelonLevels(skeleton)
    base = config.setup_time_base
    if base is None:
        base = 10.0 * config.production_time
    items = []
    for i in range(n):
        holding = config.holding_base
        if holding_scheme == 'high-late':
            holding *= 2.0 ** (levels.max() - levels[i])
        backlog = backlog_ratio * holding
        items.append(Item(
            id=i, kind=END_ITEM if i in end_items else COMPONENT,
            setup_cost=float(setup_costs[i]),
            setup_time=_setupTime(setup_profile, base),
            production_time=config.production_time,
            production_cost=config.production_cost,
            holding_cost=float(holding), backlog_cost=float(backlog),
            lost_sale_cost=float(config.lost_sale_factor * backlog),
            resource=structure.resource_of[i]))
    n_resources = max(structure.resource_of) + 1
    draft = Instance(horizon, items, structure.bom,
                     [ResourceProfile(k, (0.0,) * horizon)
                      for k in range(n_resources)])
    capacity = calibrateCapacity(draft, mean_demand, utilization)
    metadata = {'bom': structure.name, 'demand_type': demand_type,
                'utilization': utilization, 'setup_times': setup_profile,
                'backlog_ratio': backlog_ratio, 'holding': holding_scheme}
    return Instance(horizon, items, structure.bom,
                    [ResourceProfile(k, tuple(capacity[k]))
                     for k in range(n_resources)],
                    mean_demand=tuple(map(tuple, mean_demand)), name=name,
                    metadata=metadata)


def generateSuite(config=None, seed=0):
    """All grid points, deterministic per seed.

    Twins differing only in utilization, setup profile or cost levels share
    their base demands and setup costs.
    """

    config = config or GenConfig()
    boms = builtinBoms()
    instances = []
    for idx, point in enumerate(config.grid()):
        bom, demand_type, utilization, profile, ratio, holding = point
        rng = np.random.default_rng(
            [seed, config.boms.index(bom),
             config.demand_types.index(demand_type)])
        name = '{:02d}-{}-{}-u{:d}-{}-r{:g}-{}'.format(
            idx, bom, demand_type, int(round(100 * utilization)), profile,
            ratio, holding)
        instance = generateInstance(boms[bom], demand_type, utilization,
                                    profile, ratio, holding, rng, config,
                                    name)
        violations = validate(instance)
        if violations:
            raise InstanceError('generated instance {} is invalid: {}'.format(
                name, violations))
        instances.append(instance)
    logger.info('generated %d instances with seed %d', len(instances), seed)
    return instances


def writeSuite(instances, out_dir, config=None, seed=None):
    """One JSON file per instance plus manifest.json with the grid
       coordinates of every file.
    """

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    entries = []
    for instance in instances:
        filename = instance.name + '.json'
        saveInstance(instance, out_dir / filename)
        entry = {'file': filename, 'name': instance.name}
        entry.update(instance.metadata)
        entries.append(entry)
    manifest = {'seed': seed,
                'config': asdict(config) if config is not None else None,
                'instances': entries}
    with open(str(out_dir / MANIFEST), 'w') as manifest_file:
        json.dump(manifest, manifest_file, indent=2)
    return out_dir / MANIFEST
