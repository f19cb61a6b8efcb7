"""Dendritic stream networks, site placement and hydrologic distances.

A stream network is a rooted tree of directed edges oriented toward a
single outlet node. Sites live on edges at an offset measured upstream
from the edge's downstream node. All distances are in kilometers.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum

import numpy as np


class Connectivity(Enum):
    FLOW_CONNECTED = "flow-connected"
    FLOW_UNCONNECTED = "flow-unconnected"


@dataclass(frozen=True)
class Edge:
    edge_id: str
    upstream_node: str
    downstream_node: str
    length: float
    additive_value: float = 1.0


@dataclass(frozen=True)
class SitePlacement:
    """A survey site pinned to an edge, `offset` km above the edge's
    downstream node."""

    site_id: str
    edge_id: str
    offset: float


@dataclass(frozen=True)
class PairDistance:
    site_i: str
    site_j: str
    connectivity: Connectivity
    h: float  # total stream distance
    a: float  # shorter distance to the common downstream junction
    b: float  # longer distance


@dataclass
class ValidationReport:
    violations: list = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.violations


class NetworkError(ValueError):
    pass


@dataclass
class StreamNetwork:
    edges: list
    outlet_node: str

    def __post_init__(self):
        self._by_id = {e.edge_id: e for e in self.edges}
        self._index = None

    def edge(self, edge_id: str) -> Edge:
        try:
            return self._by_id[edge_id]
        except KeyError:
            raise NetworkError(f"unknown edge_id {edge_id!r}")

    @property
    def index(self) -> "_NetworkIndex":
        if self._index is None:
            report = validate_network(self)
            if not report.ok:
                raise NetworkError(f"invalid network: {report.violations}")
            self._index = _NetworkIndex(self)
        return self._index


class _NetworkIndex:
    """Per-edge parent pointers, depths and cumulative distances to the
    outlet, precomputed once per network."""

    def __init__(self, net: StreamNetwork):
        # downstream (parent) edge of each edge: the unique edge leaving
        # the edge's downstream node
        out_edge = {}
        for e in net.edges:
            out_edge[e.upstream_node] = e
        self.parent = {}
        self.depth = {}
        self.node_dist = {net.outlet_node: 0.0}  # node -> distance to outlet
        for e in net.edges:
            self.parent[e.edge_id] = out_edge.get(e.downstream_node)

        # depths and node distances by walking down to the outlet
        order = _edges_sorted_downstream_first(net)
        for e in order:
            par = self.parent[e.edge_id]
            self.depth[e.edge_id] = 0 if par is None else self.depth[par.edge_id] + 1
            self.node_dist[e.upstream_node] = self.node_dist[e.downstream_node] + e.length

    def lca_edge(self, net: StreamNetwork, ei: Edge, ej: Edge) -> Edge:
        """Deepest edge shared by both root paths."""
        while ei.edge_id != ej.edge_id:
            if self.depth[ei.edge_id] >= self.depth[ej.edge_id]:
                ei = self.parent[ei.edge_id]
            else:
                ej = self.parent[ej.edge_id]
        return ei

    def dist_between(self, start: Edge, stop: Edge) -> float:
        """Sum of lengths of edges on the root path strictly between
        `start` and its proper ancestor `stop`."""
        total = 0.0
        e = self.parent[start.edge_id]
        while e.edge_id != stop.edge_id:
            total += e.length
            e = self.parent[e.edge_id]
        return total


def _edges_sorted_downstream_first(net: StreamNetwork) -> list:
    out_edge = {e.upstream_node: e for e in net.edges}
    seen = set()
    order = []

    for e in net.edges:
        chain = []
        cur = e
        while cur is not None and cur.edge_id not in seen:
            chain.append(cur)
            seen.add(cur.edge_id)
            cur = out_edge.get(cur.downstream_node)
        order.extend(reversed(chain))
    return order


def validate_network(net: StreamNetwork) -> ValidationReport:
    """Check the rooted-tree invariants; violations are data, not errors."""
    report = ValidationReport()
    seen_ids = set()
    for e in net.edges:
        if e.edge_id in seen_ids:
            report.violations.append(f"duplicate edge_id {e.edge_id!r}")
        seen_ids.add(e.edge_id)
        if e.length <= 0:
            report.violations.append(f"nonpositive edge length on {e.edge_id!r}")
        if e.additive_value < 0:
            report.violations.append(f"negative additive_value on {e.edge_id!r}")
        if e.upstream_node == e.downstream_node:
            report.violations.append(f"self-loop on {e.edge_id!r}")

    out_edges = {}
    for e in net.edges:
        out_edges.setdefault(e.upstream_node, []).append(e)
    for node, outs in out_edges.items():
        if len(outs) > 1:
            report.violations.append(f"multiple downstream edges from node {node!r}")
    if net.outlet_node in out_edges:
        report.violations.append("outlet node has a downstream edge")

    if report.violations:
        return report

    # every edge must reach the outlet by following downstream edges,
    # without revisiting an edge (cycle)
    reaches = {}  # edge_id -> bool
    for e in net.edges:
        path = []
        cur = e
        while True:
            if cur.edge_id in reaches:
                ok = reaches[cur.edge_id]
                break
            if cur.edge_id in {p.edge_id for p in path}:
                report.violations.append(f"cycle detected through {cur.edge_id!r}")
                ok = False
                break
            path.append(cur)
            if cur.downstream_node == net.outlet_node:
                ok = True
                break
            nxt = out_edges.get(cur.downstream_node)
            if nxt is None:
                report.violations.append(
                    f"dangling node {cur.downstream_node!r}: no path to outlet"
                )
                ok = False
                break
            cur = nxt[0]
        for p in path:
            reaches[p.edge_id] = ok
    return report


def _check_placement(net: StreamNetwork, site: SitePlacement) -> Edge:
    e = net.edge(site.edge_id)
    if not (0.0 <= site.offset <= e.length):
        raise NetworkError(
            f"site {site.site_id!r}: offset {site.offset} outside edge "
            f"{e.edge_id!r} of length {e.length}"
        )
    return e


def classify_pair(net: StreamNetwork, si: SitePlacement, sj: SitePlacement) -> PairDistance:
    """Connectivity and the (h, a, b) stream-distance geometry of a pair.

    Flow-connected iff one site lies on the other's downstream path to
    the outlet; then a = 0 and b = h. Otherwise a and b are the sorted
    distances to the lowest common junction and h = a + b exactly.
    """
    ei = _check_placement(net, si)
    ej = _check_placement(net, sj)
    idx = net.index

    if ei.edge_id == ej.edge_id:
        d = abs(si.offset - sj.offset)
        return PairDistance(si.site_id, sj.site_id, Connectivity.FLOW_CONNECTED, d, 0.0, d)

    anc = idx.lca_edge(net, ei, ej)
    # entry coordinate on the common edge, measured up from its downstream node
    ci = si.offset if ei.edge_id == anc.edge_id else anc.length
    cj = sj.offset if ej.edge_id == anc.edge_id else anc.length
    jc = min(ci, cj)

    def dist_to_junction(site, edge, c):
        if edge.edge_id == anc.edge_id:
            return site.offset - jc
        return site.offset + idx.dist_between(edge, anc) + (c - jc)

    di = dist_to_junction(si, ei, ci)
    dj = dist_to_junction(sj, ej, cj)
    a, b = (di, dj) if di <= dj else (dj, di)
    if a == 0.0:
        return PairDistance(si.site_id, sj.site_id, Connectivity.FLOW_CONNECTED, b, 0.0, b)
    return PairDistance(si.site_id, sj.site_id, Connectivity.FLOW_UNCONNECTED, a + b, a, b)


@dataclass
class PairDistanceTable:
    site_ids: list
    h: np.ndarray
    a: np.ndarray
    b: np.ndarray
    connected: np.ndarray  # boolean, True on the diagonal

    @property
    def n_sites(self) -> int:
        return len(self.site_ids)


def distance_tables(net: StreamNetwork, sites: list) -> PairDistanceTable:
    """Symmetric h/a/b/connectivity tables over all site pairs."""
    ids = [s.site_id for s in sites]
    if len(set(ids)) != len(ids):
        raise NetworkError("duplicate site_id in site list")
    net.index  # force validation + precomputation
    n = len(sites)
    h = np.zeros((n, n))
    a = np.zeros((n, n))
    b = np.zeros((n, n))
    conn = np.eye(n, dtype=bool)
    for i in range(n):
        for j in range(i + 1, n):
            pd = classify_pair(net, sites[i], sites[j])
            h[i, j] = h[j, i] = pd.h
            a[i, j] = a[j, i] = pd.a
            b[i, j] = b[j, i] = pd.b
            conn[i, j] = conn[j, i] = pd.connectivity is Connectivity.FLOW_CONNECTED
    return PairDistanceTable(ids, h, a, b, conn)
