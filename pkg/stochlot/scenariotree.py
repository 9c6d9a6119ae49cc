"""
Scenario tree code
Full |Omega|-ary demand trees over the planning horizon, scenario paths,
indistinguishable path sets and sampled partial trees
"""

import logging
from bisect import bisect_right
from dataclasses import dataclass

import h5py
import numpy as np

from stochlot.instance import FormatVersionError

logger = logging.getLogger(__name__)

FORMAT_VERSION = 1


class ScenarioTreeError(Exception):
    """Raised for malformed trees, out-of-range queries and tree files."""


def sampleLumpy(mean, rng, size=None):
    """Lumpy demand: regular Poisson(2F/3) with probability 1/2, zero with
       probability 1/3, extreme Poisson(4F) with probability 1/6.

    type: mean: float. F >= 0
    type: rng: numpy.random.Generator
    type: size: int. None draws one value
    """

    if mean < 0:
        raise ValueError('mean demand must be >= 0, got {}'.format(mean))
    if size is None:
        u = rng.random()
        if u < 0.5:
            return int(rng.poisson(2.0 * mean / 3.0))
        if u < 5.0 / 6.0:
            return 0
        return int(rng.poisson(4.0 * mean))
    u = rng.random(size)
    regular = rng.poisson(2.0 * mean / 3.0, size)
    extreme = rng.poisson(4.0 * mean, size)
    return np.where(u < 0.5, regular,
                    np.where(u < 5.0 / 6.0, 0, extreme)).astype(np.int64)


def constantSampler(mean, rng):
    """Deterministic sampler, every branch realizes round(F)."""
    return int(round(mean))


@dataclass(eq=False)
class ScenarioPath():
    """type: demand: np.ndarray. D_it for items x periods"""

    id: int
    branches: tuple
    probability: float
    demand: np.ndarray


class ScenarioTree():
    """Full |Omega|-ary tree, nodes stored in level order.

    Node k of depth t has index offset(t) + k, its children are the nodes
    k*|Omega| .. k*|Omega| + |Omega| - 1 of depth t + 1. Path ids enumerate
    the leaves left to right, so path p passes the depth-t node
    p // |Omega|^(T-t).
    """

    def __init__(self, branching, horizon, demand, cond_prob=None, seed=None):
        """
        type: demand: np.ndarray. (nodes, items) demand realized at each
                      node, root row unused
        type: cond_prob: np.ndarray. Conditional branch probability per node
        """

        if branching < 1 or horizon < 1:
            raise ScenarioTreeError('branching and horizon must be >= 1')
        self.branching = int(branching)
        self.horizon = int(horizon)
        self.seed = seed
        self._offsets = [0]
        for depth in range(self.horizon + 1):
            self._offsets.append(self._offsets[-1] + self.branching ** depth)
        self.demand = np.asarray(demand, dtype=np.int64)
        if self.demand.ndim != 2 or self.demand.shape[0] != self.numNodes:
            raise ScenarioTreeError(
                'demand must have one row per node ({}), got shape {}'.format(
                    self.numNodes, self.demand.shape))
        if cond_prob is None:
            cond_prob = np.full(self.numNodes, 1.0 / self.branching)
            cond_prob[0] = 1.0
        self.cond_prob = np.asarray(cond_prob, dtype=float)
        self.node_prob = self.cond_prob.copy()
        parents = self.parentArray()
        for node in range(1, self.numNodes):
            self.node_prob[node] *= self.node_prob[parents[node]]

    @property
    def n_items(self):
        return self.demand.shape[1]

    @property
    def numNodes(self):
        return self._offsets[self.horizon + 1]

    @property
    def numPaths(self):
        return self.branching ** self.horizon

    @property
    def tree(self):
        return self

    def nodeAt(self, path, depth):
        """Node of depth 0..T on path."""
        k = path // self.branching ** (self.horizon - depth)
        return self._offsets[depth] + k

    def depthOf(self, node):
        return bisect_right(self._offsets, node) - 1

    def nodesAtDepth(self, depth):
        return range(self._offsets[depth], self._offsets[depth + 1])

    def parentArray(self):
        parents = np.full(self.numNodes, -1, dtype=np.int64)
        for depth in range(1, self.horizon + 1):
            nodes = np.arange(self._offsets[depth], self._offsets[depth + 1])
            parents[nodes] = (self._offsets[depth - 1] +
                              (nodes - self._offsets[depth]) // self.branching)
        return parents

    def depthArray(self):
        depths = np.zeros(self.numNodes, dtype=np.int64)
        for depth in range(self.horizon + 1):
            depths[self._offsets[depth]:self._offsets[depth + 1]] = depth
        return depths

    def pathIds(self):
        return np.arange(self.numPaths)

    def nodeProbability(self, node):
        if not 0 <= node < self.numNodes:
            raise ScenarioTreeError('node {} outside 0..{}'.format(
                node, self.numNodes - 1))
        return float(self.node_prob[node])

    def pathProbability(self, path):
        return float(self.node_prob[self.nodeAt(path, self.horizon)])

    def probabilities(self):
        """sigma_phi aligned with pathIds()."""
        return self.node_prob[self._offsets[self.horizon]:]

    def branches(self, path):
        digits = []
        for depth in range(1, self.horizon + 1):
            node = self.nodeAt(path, depth)
            digits.append((node - self._offsets[depth]) % self.branching)
        return tuple(digits)

    def pathDemand(self, path):
        """D_it of one path as items x periods."""
        nodes = [self.nodeAt(path, depth)
                 for depth in range(1, self.horizon + 1)]
        return self.demand[nodes].T.copy()

    def paths(self):
        return [ScenarioPath(int(p), self.branches(p),
                             self.pathProbability(p), self.pathDemand(p))
                for p in self.pathIds()]

    def maxDemand(self):
        """Largest node demand per item and period, items x periods."""
        return np.stack([self.demand[self._offsets[depth]:
                                     self._offsets[depth + 1]].max(axis=0)
                         for depth in range(1, self.horizon + 1)], axis=1)

    def inducedNodes(self):
        return set(range(self.numNodes))


class PartialTree():
    """Subset of the paths of a full tree with renormalized probabilities."""

    def __init__(self, tree, path_ids):
        ids = np.unique(np.asarray(path_ids, dtype=np.int64))
        if ids.size == 0 or ids[0] < 0 or ids[-1] >= tree.numPaths:
            raise ScenarioTreeError('path ids must be a nonempty subset of '
                                    '0..{}'.format(tree.numPaths - 1))
        self.tree = tree
        self.path_ids = ids
        weights = tree.probabilities()[ids]
        self.sigma = weights / weights.sum()

    @property
    def branching(self):
        return self.tree.branching

    @property
    def horizon(self):
        return self.tree.horizon

    @property
    def n_items(self):
        return self.tree.n_items

    @property
    def numPaths(self):
        return len(self.path_ids)

    def pathIds(self):
        return self.path_ids

    def probabilities(self):
        return self.sigma

    def nodeAt(self, path, depth):
        return self.tree.nodeAt(path, depth)

    def pathDemand(self, path):
        return self.tree.pathDemand(path)

    def maxDemand(self):
        return self.tree.maxDemand()

    def inducedNodes(self):
        return {self.tree.nodeAt(p, depth) for p in self.path_ids
                for depth in range(self.horizon + 1)}


def buildTree(instance, branching, sampler=None, seed=0):
    """Samples a full tree over the instance horizon.

    Each node draws its demand vector item by item from
    sampler(F_it, rng); nodes are visited in level order so a seed fixes
    the tree bit for bit.
    type: sampler: callable(mean, rng) -> int. Defaults to sampleLumpy
    """

    if branching < 1:
        raise ScenarioTreeError('branching must be >= 1, got {}'.format(
            branching))
    sampler = sampler or sampleLumpy
    rng = np.random.default_rng(seed)
    mean_demand = instance.meanDemandArray()
    horizon, n_items = instance.horizon, instance.n_items
    n_nodes = sum(branching ** depth for depth in range(horizon + 1))
    demand = np.zeros((n_nodes, n_items), dtype=np.int64)
    node = 1
    for depth in range(1, horizon + 1):
        for _ in range(branching ** depth):
            for i in range(n_items):
                demand[node, i] = sampler(mean_demand[i, depth - 1], rng)
            node += 1
    logger.debug('built tree with %d nodes, %d paths', n_nodes,
                 branching ** horizon)
    return ScenarioTree(branching, horizon, demand, seed=seed)


def indistinguishableSet(tree, path, period):
    """Paths sharing the depth-period node of path, N(D^{phi[t]})."""

    if not 1 <= period <= tree.horizon:
        raise ScenarioTreeError('period {} outside 1..{}'.format(
            period, tree.horizon))
    width = tree.branching ** (tree.horizon - period)
    first = (path // width) * width
    members = set(range(first, first + width))
    if isinstance(tree, PartialTree):
        members &= set(int(p) for p in tree.path_ids)
    if path not in members:
        raise ScenarioTreeError('path {} is not part of the tree'.format(path))
    return members


def samplePathSubset(tree, n, seed):
    """Draws n distinct paths uniformly without replacement."""

    if not 1 <= n <= tree.numPaths:
        raise ScenarioTreeError('subset size {} outside 1..{}'.format(
            n, tree.numPaths))
    rng = np.random.default_rng(seed)
    ids = rng.choice(tree.numPaths, size=n, replace=False)
    return PartialTree(tree, ids)


def saveTree(tree, path):
    """Encodes the node list into HDF5 binary data format."""

    with h5py.File(str(path), 'w') as file:
        file.create_dataset(name='parent', data=tree.parentArray())
        file.create_dataset(name='depth', data=tree.depthArray())
        file.create_dataset(name='demand', data=tree.demand)
        file.create_dataset(name='cond_prob', data=tree.cond_prob)
        file.attrs['format_version'] = FORMAT_VERSION
        file.attrs['branching'] = tree.branching
        file.attrs['horizon'] = tree.horizon
        file.attrs['n_items'] = tree.n_items
        file.attrs['seed'] = -1 if tree.seed is None else int(tree.seed)


def loadTree(path):
    """Decodes an HDF5 tree file."""

    try:
        with h5py.File(str(path), 'r') as file:
            version = int(file.attrs.get('format_version', -1))
            if version != FORMAT_VERSION:
                raise FormatVersionError(
                    'tree format_version {} unsupported (expected {})'.format(
                        version, FORMAT_VERSION))
            branching = int(file.attrs['branching'])
            horizon = int(file.attrs['horizon'])
            seed = int(file.attrs['seed'])
            parent = file['parent'][:]
            demand = file['demand'][:]
            cond_prob = file['cond_prob'][:]
    except (OSError, KeyError) as ex:
        raise ScenarioTreeError('cannot read tree file {}: {}'.format(
            path, ex))
    tree = ScenarioTree(branching, horizon, demand, cond_prob,
                        seed=None if seed < 0 else seed)
    if not np.array_equal(parent, tree.parentArray()):
        raise ScenarioTreeError('tree file {} is not a full {}-ary tree'
                                .format(path, branching))
    return tree
