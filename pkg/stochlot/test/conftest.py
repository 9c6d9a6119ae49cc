import matplotlib
matplotlib.use('Agg')

import numpy as np
import pytest

from stochlot.instance import (COMPONENT, END_ITEM, BomMatrix, Instance, Item,
                               ResourceProfile, exampleInstance)
from stochlot.scenariotree import ScenarioTree, buildTree
from stochlot.solverbackend import SolverConfig


def makeItem(i, kind=END_ITEM, setup_cost=50.0, setup_time=0.0, holding=1.0,
             backlog=4.0, lost_sale=20.0, resource=0, lead_time=0):
    return Item(id=i, kind=kind, setup_cost=setup_cost, setup_time=setup_time,
                production_time=1.0, production_cost=0.0,
                holding_cost=holding, backlog_cost=backlog,
                lost_sale_cost=lost_sale, lead_time=lead_time,
                resource=resource)


def randomInstance(seed, n_items=2, horizon=3, capacity=None):
    """Small random instance, item 0 a component of item n-1 when n >= 2."""

    rng = np.random.default_rng(seed)
    items = []
    for i in range(n_items):
        kind = COMPONENT if (n_items >= 2 and i == 0) else END_ITEM
        holding = float(rng.integers(1, 3))
        backlog = holding * float(rng.integers(2, 5))
        items.append(makeItem(i, kind, setup_cost=float(rng.integers(20, 80)),
                              setup_time=float(rng.integers(0, 4)),
                              holding=holding, backlog=backlog,
                              lost_sale=5.0 * backlog))
    bom = BomMatrix(((0, n_items - 1, 1.0),)) if n_items >= 2 else \
        BomMatrix(())
    mean = np.zeros((n_items, horizon))
    mean[n_items - 1] = rng.integers(5, 15, size=horizon)
    if capacity is None:
        capacity = float(3 * mean.sum() / horizon + 10)
    return Instance(horizon, items, bom,
                    [ResourceProfile(0, (capacity,) * horizon)],
                    mean_demand=tuple(map(tuple, mean)),
                    name='random-{}'.format(seed))


def identicalTree(instance, branching, demand):
    """Tree whose nodes of depth t all carry demand[:, t - 1]."""

    demand = np.asarray(demand)
    rows = [np.zeros(instance.n_items, dtype=np.int64)]
    for depth in range(1, instance.horizon + 1):
        rows.extend([demand[:, depth - 1]] * branching ** depth)
    return ScenarioTree(branching, instance.horizon, np.array(rows))


@pytest.fixture
def tiny():
    return exampleInstance('tiny2item')


@pytest.fixture
def tinyTree(tiny):
    return buildTree(tiny, 2, seed=3)


@pytest.fixture
def exactConfig():
    return SolverConfig(time_limit=120.0, mip_gap=1e-9)
