"""Network graph, component catalogs and the design-variable layout.

A district heating network is a directed graph.  Street routes appear twice
(feed and return layer) as candidate pipe edges; each consumer substation is
a single edge from its feed node to its return node, each producer a single
edge from its return node to its feed node.  Exactly one producer return
node carries the reference pressure.

Consumer equipment is sized from nominal design conditions: the substation
heat exchanger UA from the peak demand and the log-mean temperature
difference of the nominal primary/secondary temperatures, and the control
valve constant from the nominal primary flow at a nominal pressure drop.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Optional, Sequence

import numpy as np

from .hydronics import lmtd

NODE_KINDS = ("junction", "producer-feed", "producer-return",
              "consumer-feed", "consumer-return")
EDGE_KINDS = ("pipe", "producer", "consumer")

FEED_KINDS = ("producer-feed", "consumer-feed")
RETURN_KINDS = ("producer-return", "consumer-return")


class NetworkError(ValueError):
    """Raised for structurally invalid network definitions."""


@dataclass(frozen=True)
class Node:
    id: str
    kind: str
    x: float = 0.0
    y: float = 0.0


@dataclass(frozen=True)
class Edge:
    id: str
    kind: str
    tail: str
    head: str
    length: float = 0.0  # m, pipes only


@dataclass(frozen=True)
class PipeCatalog:
    """Commercial pipe data and the continuous box used by the optimizer."""
    d_min: float = 0.02    # smallest commercial inner diameter, m
    d_lb: float = 0.005    # optimizer lower bound, > 0 to avoid the d^-5 singularity
    d_ub: float = 0.5      # optimizer upper bound, m
    insulation_ratio: float = 1.87   # outer jacket / inner diameter
    diameters: tuple = (0.02, 0.025, 0.032, 0.04, 0.05, 0.065, 0.08,
                        0.1, 0.125, 0.15, 0.2, 0.25, 0.3, 0.4, 0.5)

    def __post_init__(self):
        if not (0.0 < self.d_lb <= self.d_min <= self.d_ub):
            raise NetworkError("pipe catalog bounds must satisfy 0 < d_lb <= d_min <= d_ub")
        if self.insulation_ratio <= 1.0:
            raise NetworkError("insulation ratio must exceed 1")
        if any(b <= a for a, b in zip(self.diameters, self.diameters[1:])):
            raise NetworkError("discrete diameter list must be strictly increasing")

    def snap_up(self, d: float) -> float:
        """Smallest catalog diameter >= d (largest entry if none)."""
        for dc in self.diameters:
            if dc >= d - 1e-12:
                return dc
        return self.diameters[-1]


@dataclass(frozen=True)
class ConsumerSpec:
    """Substation and building heating-system data for one consumer.

    Temperatures are absolute degC; the period models convert them to the
    ambient-relative scale.  `ua` and `zeta` are derived from the nominal
    design point; use :meth:`sized` to fill them.
    """
    peak_demand: float            # W
    t1_hot_nom: float = 60.0      # nominal primary supply, degC
    t1_cold_nom: float = 42.0     # nominal primary return, degC
    t2_hot_nom: float = 55.0      # nominal secondary supply, degC
    t2_cold_nom: float = 40.0     # nominal secondary return, degC
    t_house: float = 20.0         # indoor temperature, degC
    n_radiator: float = 1.3       # radiator characteristic exponent
    ua: Optional[float] = None    # W/K
    zeta: Optional[float] = None  # m^3/(s Pa^0.5)

    def __post_init__(self):
        if not (self.t1_hot_nom > self.t2_hot_nom > self.t2_cold_nom > 0.0):
            raise NetworkError("nominal temperatures must satisfy t1h > t2h > t2c > 0")
        if self.peak_demand <= 0.0:
            raise NetworkError("peak demand must be positive")

    def sized(self, rho: float, cp: float, nominal_dp: float = 5.0e4) -> "ConsumerSpec":
        """Return a copy with heat-exchanger UA and valve constant derived
        from the nominal design point."""
        ua = compute_hx_ua(self)
        zeta = compute_valve_constant(self, nominal_dp, rho, cp)
        return replace(self, ua=ua, zeta=zeta)

    @property
    def lmtd_radiator_nom(self) -> float:
        """Nominal radiator LMTD over the indoor temperature."""
        return lmtd(self.t2_hot_nom - self.t_house, self.t2_cold_nom - self.t_house)

    def secondary_flow(self, demand: float, rho: float, cp: float) -> float:
        """Heating-system flow for a given demand, m^3/s."""
        return demand / (rho * cp * (self.t2_hot_nom - self.t2_cold_nom))


@dataclass(frozen=True)
class ProducerSpec:
    """Heat producer data: supply boundary condition, capacity and prices."""
    supply_temp: float              # degC
    p_max: float                    # W
    eta_pr: float = 1.0
    cost_capacity: float = 0.0      # euro/kW of installed capacity
    cost_fixed: float = 0.0         # euro
    cost_annual: float = 0.0        # euro/yr at full capacity fraction
    heat_price: float = 0.0         # euro/kWh delivered
    eta_pump: float = 0.81
    return_temp_ref: float = 20.0   # degC, reference return for max flow
    waste_heat: bool = False
    availability: Optional[Sequence[bool]] = None  # per period, optional

    def __post_init__(self):
        if self.p_max <= 0.0:
            raise NetworkError("producer capacity must be positive")
        if not (0.0 < self.eta_pr <= 1.0 and 0.0 < self.eta_pump <= 1.0):
            raise NetworkError("efficiencies must lie in (0, 1]")

    def max_flow(self, rho: float, cp: float) -> float:
        """Volumetric flow delivering p_max at the reference temperature lift."""
        dt = self.supply_temp - self.return_temp_ref
        if dt <= 0.0:
            raise NetworkError("supply temperature must exceed the reference return")
        return self.p_max / (rho * cp * dt)


def compute_hx_ua(spec: ConsumerSpec) -> float:
    """Heat-exchanger UA sized to meet the peak demand at nominal temperatures."""
    dt_hot = spec.t1_hot_nom - spec.t2_hot_nom
    dt_cold = spec.t1_cold_nom - spec.t2_cold_nom
    if dt_hot <= 0.0 or dt_cold <= 0.0:
        raise NetworkError("invalid nominal design: non-positive approach temperatures")
    return spec.peak_demand / lmtd(dt_hot, dt_cold)


def compute_valve_constant(spec: ConsumerSpec, nominal_dp: float,
                           rho: float = 983.0, cp: float = 4185.0) -> float:
    """Valve constant from the nominal primary flow and pressure drop."""
    if nominal_dp <= 0.0:
        raise NetworkError("nominal valve pressure drop must be positive")
    q_nom = spec.peak_demand / (rho * cp * (spec.t1_hot_nom - spec.t1_cold_nom))
    return q_nom / np.sqrt(nominal_dp)


class NetworkGraph:
    """Validated directed graph with cached incidence structure.

    Immutable after construction; safe to share across threads.
    """

    def __init__(self, nodes: Sequence[Node], edges: Sequence[Edge], reference_node: str):
        self.nodes = tuple(nodes)
        self.edges = tuple(edges)
        self.reference_node = reference_node
        self.node_index = {n.id: i for i, n in enumerate(self.nodes)}
        self.edge_index = {e.id: i for i, e in enumerate(self.edges)}
        self._validate()
        self._build_incidence()

    # -- sizes ---------------------------------------------------------
    @property
    def n_nodes(self) -> int:
        return len(self.nodes)

    @property
    def n_edges(self) -> int:
        return len(self.edges)

    @property
    def n_pipe(self) -> int:
        return len(self.pipe_edges)

    @property
    def n_con(self) -> int:
        return len(self.consumer_edges)

    @property
    def n_pr(self) -> int:
        return len(self.producer_edges)

    # -- construction helpers ------------------------------------------
    def _validate(self):
        if len(self.node_index) != len(self.nodes):
            raise NetworkError("duplicate node id")
        if len(self.edge_index) != len(self.edges):
            raise NetworkError("duplicate edge id")
        for n in self.nodes:
            if n.kind not in NODE_KINDS:
                raise NetworkError(f"unknown node kind '{n.kind}' on node '{n.id}'")
        for e in self.edges:
            if e.kind not in EDGE_KINDS:
                raise NetworkError(f"unknown edge kind '{e.kind}' on edge '{e.id}'")
            if e.tail not in self.node_index or e.head not in self.node_index:
                raise NetworkError(f"dangling edge '{e.id}': unknown endpoint")
            if e.kind == "pipe" and e.length <= 0.0:
                raise NetworkError(f"pipe '{e.id}' has non-positive length")
        if self.reference_node not in self.node_index:
            raise NetworkError(f"reference node '{self.reference_node}' does not exist")
        ref = self.nodes[self.node_index[self.reference_node]]
        if ref.kind != "producer-return":
            raise NetworkError("reference pressure node must be a producer return node")

        # weak connectivity over all candidate edges
        parent = list(range(len(self.nodes)))

        def find(i):
            while parent[i] != i:
                parent[i] = parent[parent[i]]
                i = parent[i]
            return i

        for e in self.edges:
            a, b = find(self.node_index[e.tail]), find(self.node_index[e.head])
            if a != b:
                parent[a] = b
        root = find(self.node_index[self.reference_node])
        for e in self.edges:
            if e.kind == "consumer" and find(self.node_index[e.tail]) != root:
                raise NetworkError(f"consumer edge '{e.id}' is disconnected from the network")
        for i, n in enumerate(self.nodes):
            if find(i) != root:
                raise NetworkError(f"node '{n.id}' is disconnected from the network")

    def _build_incidence(self):
        nn, ne = self.n_nodes, self.n_edges
        self.edge_tail = np.array([self.node_index[e.tail] for e in self.edges])
        self.edge_head = np.array([self.node_index[e.head] for e in self.edges])
        self.pipe_edges = np.array([i for i, e in enumerate(self.edges) if e.kind == "pipe"], dtype=int)
        self.consumer_edges = np.array([i for i, e in enumerate(self.edges) if e.kind == "consumer"], dtype=int)
        self.producer_edges = np.array([i for i, e in enumerate(self.edges) if e.kind == "producer"], dtype=int)
        self.pipe_length = np.array([self.edges[i].length for i in self.pipe_edges])

        self.in_edges = [[] for _ in range(nn)]
        self.out_edges = [[] for _ in range(nn)]
        for j in range(ne):
            self.out_edges[self.edge_tail[j]].append(j)
            self.in_edges[self.edge_head[j]].append(j)
        self.in_edges = [np.array(v, dtype=int) for v in self.in_edges]
        self.out_edges = [np.array(v, dtype=int) for v in self.out_edges]
        self.ref_node = self.node_index[self.reference_node]

        # feed/return side labels, propagated along pipe edges from the
        # typed nodes; used only to build solver starting points.
        side = np.zeros(nn, dtype=int)
        parent = list(range(nn))

        def find(i):
            while parent[i] != i:
                parent[i] = parent[parent[i]]
                i = parent[i]
            return i

        for j in self.pipe_edges:
            a, b = find(self.edge_tail[j]), find(self.edge_head[j])
            if a != b:
                parent[a] = b
        comp_side = {}
        for i, n in enumerate(self.nodes):
            if n.kind in FEED_KINDS:
                lab = 1
            elif n.kind in RETURN_KINDS:
                lab = -1
            else:
                continue
            r = find(i)
            if comp_side.get(r, lab) != lab:
                comp_side[r] = 0  # mixed component: leave unlabeled
            else:
                comp_side[r] = lab
        for i in range(nn):
            side[i] = comp_side.get(find(i), 0)
        self.node_side = side

    # -- convenience -----------------------------------------------------
    def subgraph_without_pipes(self, removed_pipe_ids: Sequence[str]) -> "NetworkGraph":
        """Copy of the network with the given pipe edges removed."""
        removed = set(removed_pipe_ids)
        edges = [e for e in self.edges if e.id not in removed]
        used = {e.tail for e in edges} | {e.head for e in edges}
        nodes = [n for n in self.nodes if n.id in used]
        return NetworkGraph(nodes, edges, self.reference_node)


def build_network(nodes: Sequence[Node], edges: Sequence[Edge], reference_node: str) -> NetworkGraph:
    """Validate raw node/edge records and cache the incidence structure."""
    return NetworkGraph(nodes, edges, reference_node)


class IndexMap:
    """Bijection between (variable kind, entity position, period) and the
    flat design-vector position.

    Layout: pipe diameters d, capacity fractions phi, then per period a
    block of consumer valve openings alpha and producer flows gamma.
    """

    def __init__(self, n_pipe: int, n_pr: int, n_con: int, n_period: int):
        if n_period < 1:
            raise NetworkError("need at least one period")
        self.n_pipe, self.n_pr, self.n_con, self.n_period = n_pipe, n_pr, n_con, n_period
        self.period_block = n_con + n_pr
        self.n_total = n_pipe + n_pr + n_period * self.period_block

    def d_slice(self) -> slice:
        return slice(0, self.n_pipe)

    def phi_slice(self) -> slice:
        return slice(self.n_pipe, self.n_pipe + self.n_pr)

    def alpha_slice(self, t: int) -> slice:
        base = self.n_pipe + self.n_pr + t * self.period_block
        return slice(base, base + self.n_con)

    def gamma_slice(self, t: int) -> slice:
        base = self.n_pipe + self.n_pr + t * self.period_block + self.n_con
        return slice(base, base + self.n_pr)

    def index(self, kind: str, entity: int, period: Optional[int] = None) -> int:
        if kind == "d":
            if not 0 <= entity < self.n_pipe:
                raise IndexError("pipe entity out of range")
            return entity
        if kind == "phi":
            if not 0 <= entity < self.n_pr:
                raise IndexError("producer entity out of range")
            return self.n_pipe + entity
        if period is None or not 0 <= period < self.n_period:
            raise IndexError("per-period variable needs a valid period")
        if kind == "alpha":
            if not 0 <= entity < self.n_con:
                raise IndexError("consumer entity out of range")
            return self.alpha_slice(period).start + entity
        if kind == "gamma":
            if not 0 <= entity < self.n_pr:
                raise IndexError("producer entity out of range")
            return self.gamma_slice(period).start + entity
        raise KeyError(f"unknown design variable kind '{kind}'")

    def key(self, i: int):
        """Inverse of :meth:`index`."""
        if not 0 <= i < self.n_total:
            raise IndexError("flat index out of range")
        if i < self.n_pipe:
            return ("d", i, None)
        if i < self.n_pipe + self.n_pr:
            return ("phi", i - self.n_pipe, None)
        r = i - self.n_pipe - self.n_pr
        t, o = divmod(r, self.period_block)
        if o < self.n_con:
            return ("alpha", o, t)
        return ("gamma", o - self.n_con, t)


def design_index_map(graph: NetworkGraph, n_period: int) -> IndexMap:
    """Design-variable layout for a validated graph and period count."""
    return IndexMap(graph.n_pipe, graph.n_pr, graph.n_con, n_period)


@dataclass
class DesignVector:
    """Flat design vector with named block access."""
    layout: IndexMap
    values: np.ndarray = field(default=None)

    def __post_init__(self):
        if self.values is None:
            self.values = np.zeros(self.layout.n_total)
        self.values = np.asarray(self.values, dtype=float)
        if self.values.shape != (self.layout.n_total,):
            raise NetworkError("design vector length does not match its layout")

    @property
    def d(self) -> np.ndarray:
        return self.values[self.layout.d_slice()]

    @property
    def phi(self) -> np.ndarray:
        return self.values[self.layout.phi_slice()]

    def alpha(self, t: int) -> np.ndarray:
        return self.values[self.layout.alpha_slice(t)]

    def gamma(self, t: int) -> np.ndarray:
        return self.values[self.layout.gamma_slice(t)]

    def copy(self) -> "DesignVector":
        return DesignVector(self.layout, self.values.copy())


def design_bounds(graph: NetworkGraph, catalog: PipeCatalog,
                  producers: Sequence[ProducerSpec], rho: float, cp: float,
                  n_period: int):
    """Box bounds (lb, ub) for the flat design vector."""
    m = design_index_map(graph, n_period)
    lb = np.zeros(m.n_total)
    ub = np.ones(m.n_total)
    lb[m.d_slice()] = catalog.d_lb
    ub[m.d_slice()] = catalog.d_ub
    gmax = np.array([p.max_flow(rho, cp) for p in producers])
    for t in range(n_period):
        ub[m.gamma_slice(t)] = gmax
    return lb, ub
