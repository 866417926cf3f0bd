"""Builders translating application inputs into solvable problem specs.

Two families are covered: dynamic network flows over a directed graph with
per-edge convex costs (endpoint or origin-destination constrained), and
multi-species density steering on a spatial grid where a hub mode carries
the species index.
"""

import math
import warnings
from dataclasses import dataclass, field

import numpy as np

from .errors import InvalidInput
from .functions import (Blockwise, Box, CompositeFunction, Congestion, Equality,
                        Zero, stack_rows)
from .model import EdgeKernel, GraphTopology, ProblemSpec, build_kernel


@dataclass(frozen=True)
class FlowEdge:
    tail: object
    head: object
    length: float = 1.0
    capacity: float = math.inf


@dataclass
class FlowNetwork:
    """Directed transport network with sources and sinks.

    Plan states are laid out as all edges first, then sources, then sinks,
    giving ``N = |E| + |sources| + |sinks|`` states per time point.
    """

    nodes: list
    edges: list
    sources: list
    sinks: list
    horizon: int

    def __post_init__(self):
        self.edges = [e if isinstance(e, FlowEdge) else FlowEdge(*e) for e in self.edges]
        node_set = set(self.nodes)
        for i, e in enumerate(self.edges):
            if e.tail not in node_set or e.head not in node_set:
                raise InvalidInput("edge %d references unknown nodes (%r, %r)"
                                   % (i, e.tail, e.head))
            if not (e.capacity > 0):
                raise InvalidInput("edge %d needs a positive capacity" % i)
        for s in self.sources:
            if s not in node_set:
                raise InvalidInput("unknown source node %r" % (s,))
        for s in self.sinks:
            if s not in node_set:
                raise InvalidInput("unknown sink node %r" % (s,))
        if self.horizon < 2:
            raise InvalidInput("the horizon needs at least two time points")
        incident = set()
        for e in self.edges:
            incident.add(e.tail)
            incident.add(e.head)
        for s in self.sources:
            if s not in incident:
                warnings.warn("source %r has no incident edge; its mass cannot leave" % (s,))
        for s in self.sinks:
            if s not in incident:
                warnings.warn("sink %r has no incident edge; it cannot receive mass" % (s,))

    @property
    def n_states(self):
        return len(self.edges) + len(self.sources) + len(self.sinks)

    @property
    def edge_count(self):
        return len(self.edges)

    def state_labels(self):
        labels = ["edge:%r->%r" % (e.tail, e.head) for e in self.edges]
        labels += ["source:%r" % (s,) for s in self.sources]
        labels += ["sink:%r" % (s,) for s in self.sinks]
        return labels

    def capacities(self):
        return np.array([e.capacity for e in self.edges], dtype=float)


def build_flow_cost_matrix(net):
    """Zero/infinity transition costs encoding the network topology.

    A transition costs zero exactly when it is realizable in one time step:
    edge to edge through a shared node, source onto an outgoing edge, edge
    into a sink, and waiting in place at a source or a sink.  Everything
    else is forbidden.
    """
    n_e = net.edge_count
    n_src = len(net.sources)
    n = net.n_states
    c = np.full((n, n), math.inf)
    src_index = {s: n_e + i for i, s in enumerate(net.sources)}
    sink_index = {s: n_e + n_src + i for i, s in enumerate(net.sinks)}
    for i, ei in enumerate(net.edges):
        for k, ek in enumerate(net.edges):
            if ei.head == ek.tail:
                c[i, k] = 0.0
        if ei.head in sink_index:
            c[i, sink_index[ei.head]] = 0.0
    for s, row in src_index.items():
        c[row, row] = 0.0
        for k, ek in enumerate(net.edges):
            if ek.tail == s:
                c[row, k] = 0.0
    for s, col in sink_index.items():
        c[col, col] = 0.0
    return c


def build_congestion(capacities, n_states=None, edge_offset=0):
    """Congestion cost on edge flows, padded with free states if asked.

    With only capacities given this is the plain congestion cost.  Passing
    the full state count returns a blockwise cost applying congestion to the
    edge block and no cost to source and sink states.
    """
    capacities = np.asarray(capacities, dtype=float)
    if np.any(capacities <= 0):
        raise InvalidInput("capacities must be positive")
    core = Congestion(capacities)
    if n_states is None:
        return core
    idx = edge_offset + np.arange(capacities.size)
    rest = np.setdiff1d(np.arange(n_states), idx)
    blocks = [(idx, core)]
    if rest.size:
        blocks.append((rest, Zero()))
    return Blockwise(n_states, blocks)


def embed_od_matrix(net, od):
    """Lift a sources-by-sinks demand table to the full state space."""
    od = np.asarray(od, dtype=float)
    n_src, n_snk = len(net.sources), len(net.sinks)
    if od.shape != (n_src, n_snk):
        raise InvalidInput("od matrix must be %d x %d (sources x sinks)" % (n_src, n_snk))
    if np.any(od < 0) or not np.all(np.isfinite(od)):
        raise InvalidInput("od entries must be finite and nonnegative")
    full = np.zeros((net.n_states, net.n_states))
    r0 = net.edge_count
    c0 = net.edge_count + n_src
    full[r0:r0 + n_src, c0:c0 + n_snk] = od
    return full


def build_flow_problem(net, od=None, terminals=None, edge_cost=None, epsilon=0.05):
    """Problem spec for a dynamic flow, OD-coupled or endpoint-constrained.

    ``od`` gives a sources-by-sinks demand matrix enforced on the joint
    first/last marginal.  ``terminals`` gives the pair of full state
    distributions pinned at the first and last time.  ``edge_cost`` replaces
    the default congestion cost on the edge-flow block (pass ``Zero()`` for
    uncapacitated transport).
    """
    if (od is None) == (terminals is None):
        raise InvalidInput("give exactly one of an od matrix or terminal marginals")
    T = net.horizon
    n = net.n_states
    cost = build_flow_cost_matrix(net)
    kernel = build_kernel(cost, epsilon)

    if edge_cost is None:
        interior = build_congestion(net.capacities(), n_states=n)
    elif edge_cost.is_zero:
        interior = Zero()
    else:
        idx = np.arange(net.edge_count)
        rest = np.setdiff1d(np.arange(n), idx)
        blocks = [(idx, edge_cost)]
        if rest.size:
            blocks.append((rest, Zero()))
        interior = Blockwise(n, blocks)

    node_functions = {j: interior for j in range(1, T - 1)}
    if od is not None:
        topo = GraphTopology.od_cycle(T)
        kernels = {(j, j + 1): kernel for j in range(T - 1)}
        kernels[topo.chord] = EdgeKernel.ones((n, n))
        edge_functions = {topo.chord: Equality(embed_od_matrix(net, od))}
        return ProblemSpec(topo, kernels, node_functions, edge_functions, epsilon)

    mu_first, mu_last = terminals
    mu_first = np.asarray(mu_first, dtype=float)
    mu_last = np.asarray(mu_last, dtype=float)
    if mu_first.shape != (n,) or mu_last.shape != (n,):
        raise InvalidInput("terminal marginals must have one entry per state (%d)" % n)
    topo = GraphTopology.chain(T)
    kernels = {(j, j + 1): kernel for j in range(T - 1)}
    node_functions = dict(node_functions)
    node_functions[0] = Equality(mu_first)
    node_functions[T - 1] = Equality(mu_last)
    return ProblemSpec(topo, kernels, node_functions, {}, epsilon)


def edge_utilization(net, marginal):
    """Per-edge load fractions from one time marginal."""
    flows = np.asarray(marginal, dtype=float)[: net.edge_count]
    return flows / net.capacities()


def grid_points(shape, extent):
    """Cell-centered grid coordinates over a rectangle, row-major order."""
    shape = tuple(int(s) for s in shape)
    if len(shape) != len(extent) // 2 or len(extent) % 2 != 0:
        raise InvalidInput("extent needs (lo, hi) per grid dimension")
    axes = []
    for d, n in enumerate(shape):
        lo, hi = float(extent[2 * d]), float(extent[2 * d + 1])
        step = (hi - lo) / n
        axes.append(lo + step * (0.5 + np.arange(n)))
    mesh = np.meshgrid(*axes, indexing="ij")
    return np.stack([m.ravel() for m in mesh], axis=1)


def build_mfg_cost_matrix(grid=None, matrix=None, scale=1.0):
    """Squared-distance displacement costs, or a validated user matrix."""
    if (grid is None) == (matrix is None):
        raise InvalidInput("give exactly one of grid coordinates or a cost matrix")
    if matrix is not None:
        matrix = np.asarray(matrix, dtype=float)
        if matrix.ndim != 2 or matrix.shape[0] != matrix.shape[1]:
            raise InvalidInput("cost matrix must be square")
        if np.any(np.isnan(matrix)) or np.any(matrix == -math.inf):
            raise InvalidInput("cost entries must be > -inf and not NaN")
        return float(scale) * matrix
    grid = np.asarray(grid, dtype=float)
    if grid.ndim == 1:
        grid = grid[:, None]
    diff = grid[:, None, :] - grid[None, :, :]
    return float(scale) * np.sum(diff * diff, axis=2)


@dataclass
class MFGSetup:
    """Inputs of a multi-species density steering problem.

    ``n_steps`` is the number of transitions, so there are ``n_steps + 1``
    time points.  Running costs are keyed by interior time index and are
    scaled by ``dt`` when the problem is assembled; terminal costs are not.
    Species costs may be None (no cost) per species and time.
    """

    grid: np.ndarray
    n_steps: int
    initial_densities: list
    dt: float = None
    epsilon: float = 0.05
    cost_scale: float = 1.0
    cost_matrix: np.ndarray = None
    total_running: dict = field(default_factory=dict)
    total_terminal: object = None
    species_running: dict = field(default_factory=dict)
    species_terminal: list = None

    def __post_init__(self):
        self.grid = np.asarray(self.grid, dtype=float)
        if self.grid.ndim == 1:
            self.grid = self.grid[:, None]
        if self.dt is None:
            self.dt = 1.0 / self.n_steps
        self.initial_densities = [np.asarray(m, dtype=float) for m in self.initial_densities]
        n = self.grid.shape[0]
        for idx, mu in enumerate(self.initial_densities):
            if mu.shape != (n,):
                raise InvalidInput("initial density %d must have %d entries" % (idx, n))
            if np.any(mu < 0) or float(mu.sum()) <= 0:
                raise InvalidInput("initial density %d must be nonnegative with positive mass"
                                   % idx)
        if self.n_steps < 1:
            raise InvalidInput("need at least one time step")

    @property
    def n_species(self):
        return len(self.initial_densities)

    @property
    def n_points(self):
        return self.grid.shape[0]


def _species_edge_function(setup, j, terminal):
    table = setup.species_terminal if terminal else setup.species_running.get(j)
    if table is None:
        return None
    fns = []
    nontrivial = False
    for fn in table:
        if fn is None or fn.is_zero:
            fns.append(Zero())
            continue
        fns.append(fn if terminal else fn.scaled(setup.dt))
        nontrivial = True
    if not nontrivial:
        return None
    if len(fns) != setup.n_species:
        raise InvalidInput("species cost tables need one entry per species")
    return stack_rows(fns, setup.n_points)


def build_mfg_problem(setup):
    """Hub-structured spec for the multi-species steering problem.

    The hub bimarginal at time zero is pinned to the stacked initial
    densities; later hub edges carry the per-species costs and the time
    nodes carry the shared costs on total densities.
    """
    L = setup.n_species
    tc = setup.n_steps + 1
    cost = build_mfg_cost_matrix(grid=None if setup.cost_matrix is not None else setup.grid,
                                 matrix=setup.cost_matrix, scale=setup.cost_scale)
    kernel = build_kernel(cost, setup.epsilon)
    topo = GraphTopology.species_hub(tc, L)
    kernels = {(j, j + 1): kernel for j in range(tc - 1)}

    start = np.stack([mu for mu in setup.initial_densities], axis=0)
    edge_functions = {(topo.hub, 0): Equality(start)}
    for j in range(1, tc):
        fn = _species_edge_function(setup, j, terminal=(j == tc - 1))
        if fn is not None:
            edge_functions[(topo.hub, j)] = fn

    node_functions = {}
    for j in range(1, tc - 1):
        fn = setup.total_running.get(j)
        if fn is None:
            continue
        parts = fn.parts if isinstance(fn, CompositeFunction) else [fn]
        scaled = [p if _is_indicator(p) else p.scaled(setup.dt) for p in parts]
        node_functions[j] = scaled[0] if len(scaled) == 1 else CompositeFunction(scaled)
    if setup.total_terminal is not None:
        node_functions[tc - 1] = setup.total_terminal
    return ProblemSpec(topo, kernels, node_functions, edge_functions, setup.epsilon)


def _is_indicator(fn):
    return isinstance(fn, (Equality, Box)) or fn.is_zero


def build_mfg_chain_problem(setup):
    """Single-population variant on a plain path, with total costs only."""
    tc = setup.n_steps + 1
    cost = build_mfg_cost_matrix(grid=None if setup.cost_matrix is not None else setup.grid,
                                 matrix=setup.cost_matrix, scale=setup.cost_scale)
    kernel = build_kernel(cost, setup.epsilon)
    topo = GraphTopology.chain(tc)
    kernels = {(j, j + 1): kernel for j in range(tc - 1)}
    total0 = np.sum(np.stack(setup.initial_densities, axis=0), axis=0)
    node_functions = {0: Equality(total0)}
    for j in range(1, tc - 1):
        fn = setup.total_running.get(j)
        if fn is None:
            continue
        parts = fn.parts if isinstance(fn, CompositeFunction) else [fn]
        scaled = [p if _is_indicator(p) else p.scaled(setup.dt) for p in parts]
        node_functions[j] = scaled[0] if len(scaled) == 1 else CompositeFunction(scaled)
    if setup.total_terminal is not None:
        node_functions[tc - 1] = setup.total_terminal
    return ProblemSpec(topo, kernels, node_functions, {}, setup.epsilon)
