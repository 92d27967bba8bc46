"""
Network layer: typed hybrid ac/dc graph, Kron reduction, subnetwork decomposition
and the incidence / Laplacian / selector matrices used by the state-space assembly.
"""

from dataclasses import dataclass, field, replace

import networkx as nx
import numpy as np
import scipy.linalg

from errors import (ClassificationMismatch, DanglingEdge, Disconnected, DuplicateId,
                    InvalidEdge, KindMismatch, SingularInteriorBlock)
from settings import TOLERANCES, log

MACHINE = 'machine'
CONVERTER = 'converter'
DC_NODE = 'dc'
NODE_KINDS = (MACHINE, CONVERTER, DC_NODE)

AC_KINDS = (MACHINE, CONVERTER)
DC_KINDS = (CONVERTER, DC_NODE)


def node_key(node_id):
    """Natural sort key: all-digit ids sort numerically and before named ids"""
    text = str(node_id)
    if text.isdigit():
        return (0, int(text), text)
    return (1, 0, text)


def sort_ids(ids):
    return sorted(ids, key=node_key)


@dataclass(frozen=True)
class Node:
    id: str
    kind: str


@dataclass(frozen=True)
class Edge:
    """Undirected weighted edge, stored with the smaller id first"""
    i: str
    j: str
    weight: float

    @property
    def name(self):
        return f"{self.i}-{self.j}"


@dataclass(frozen=True)
class SystemGraph:
    nodes: tuple
    ac_edges: tuple
    dc_edges: tuple

    def kind_of(self, node_id):
        for node in self.nodes:
            if node.id == node_id:
                return node.kind
        raise KeyError(node_id)

    def _ids(self, kind):
        return tuple(node.id for node in self.nodes if node.kind == kind)

    @property
    def machines(self):
        return self._ids(MACHINE)

    @property
    def converters(self):
        return self._ids(CONVERTER)

    @property
    def dc_nodes(self):
        return self._ids(DC_NODE)

    @property
    def ac_nodes(self):
        """Phase-angle ordering: machines, then converters"""
        return self.machines + self.converters

    @property
    def dc_side_nodes(self):
        """Voltage ordering: converters, then dc nodes"""
        return self.converters + self.dc_nodes

    @property
    def node_ids(self):
        return tuple(node.id for node in self.nodes)


@dataclass(frozen=True)
class Subnet:
    nodes: tuple
    edges: tuple

    def contains(self, node_id):
        return node_id in self.nodes


@dataclass(frozen=True)
class SubnetworkDecomposition:
    ac_subnets: tuple
    dc_subnets: tuple

    def ac_index(self, node_id):
        return _subnet_index(self.ac_subnets, node_id)

    def dc_index(self, node_id):
        return _subnet_index(self.dc_subnets, node_id)


def _subnet_index(subnets, node_id):
    for index, subnet in enumerate(subnets):
        if subnet.contains(node_id):
            return index
    raise KeyError(node_id)


@dataclass(frozen=True)
class KronResult:
    """Reduced Laplacian over the retained nodes and the map from full to reduced injections"""
    reduced: np.ndarray
    disturbance_map: np.ndarray
    retained: tuple
    eliminated: tuple


@dataclass(frozen=True)
class NetworkMatrices:
    B_ac: np.ndarray
    W_ac: np.ndarray
    B_dc: np.ndarray
    W_dc: np.ndarray
    L_dc: np.ndarray
    selectors: dict = field(default_factory=dict)
    orientation: tuple = ()

    def __getitem__(self, name):
        return self.selectors[name]


def build_graph(description):
    """
    Build a validated SystemGraph from a network description.

    The description is a dict with 'nodes' (id, kind), 'ac_edges' (from, to, b)
    and 'dc_edges' (from, to, g). Parallel edges are merged by summing weights.
    """
    nodes = {}
    for record in description.get('nodes', []):
        node_id = str(record['id'])
        kind = record['kind']
        if node_id in nodes:
            raise DuplicateId(f"Node id '{node_id}' appears more than once", node=node_id)
        if kind not in NODE_KINDS:
            raise KindMismatch(f"Node '{node_id}' has unknown kind '{kind}'", node=node_id, kind=kind)
        nodes[node_id] = kind

    ac_edges = _collect_edges(description.get('ac_edges', []), nodes, AC_KINDS, 'b', 'ac')
    dc_edges = _collect_edges(description.get('dc_edges', []), nodes, DC_KINDS, 'g', 'dc')

    ordered = tuple(Node(node_id, nodes[node_id]) for node_id in sort_ids(nodes))
    graph = SystemGraph(nodes=ordered, ac_edges=ac_edges, dc_edges=dc_edges)

    union = nx.Graph()
    union.add_nodes_from(nodes)
    union.add_edges_from((edge.i, edge.j) for edge in ac_edges + dc_edges)
    if len(nodes) == 0 or not nx.is_connected(union):
        components = [sort_ids(component) for component in nx.connected_components(union)]
        raise Disconnected(f"Network graph has {len(components)} connected components",
                           components=[','.join(component) for component in components])

    log(f"✅ Built graph with {len(ordered)} nodes, {len(ac_edges)} ac edges, {len(dc_edges)} dc edges")
    return graph


def _collect_edges(records, nodes, allowed_kinds, weight_key, network):
    merged = {}
    for record in records:
        a, b = str(record['from']), str(record['to'])
        for endpoint in (a, b):
            if endpoint not in nodes:
                raise DanglingEdge(f"{network} edge {a}-{b} references unknown node '{endpoint}'",
                                   edge=f"{a}-{b}", node=endpoint)
            if nodes[endpoint] not in allowed_kinds:
                raise KindMismatch(f"{network} edge {a}-{b} touches {nodes[endpoint]} node '{endpoint}'",
                                   edge=f"{a}-{b}", node=endpoint, kind=nodes[endpoint])
        if a == b:
            raise InvalidEdge(f"Self-loop on node '{a}' in the {network} network", node=a)
        weight = float(record[weight_key])
        if not weight > 0:
            raise InvalidEdge(f"{network} edge {a}-{b} needs {weight_key} > 0, got {weight}",
                              edge=f"{a}-{b}", weight=weight)
        pair = tuple(sort_ids((a, b)))
        merged[pair] = merged.get(pair, 0.0) + weight

    ordered = sorted(merged, key=lambda pair: (node_key(pair[0]), node_key(pair[1])))
    return tuple(Edge(pair[0], pair[1], merged[pair]) for pair in ordered)


def scale_dc_conductances(graph, factor):
    """Copy of the graph with every dc conductance multiplied by factor"""
    edges = tuple(Edge(edge.i, edge.j, edge.weight * factor) for edge in graph.dc_edges)
    return replace(graph, dc_edges=edges)


def scale_ac_susceptances(graph, factor):
    edges = tuple(Edge(edge.i, edge.j, edge.weight * factor) for edge in graph.ac_edges)
    return replace(graph, ac_edges=edges)


def laplacian(node_ids, edges):
    """Weighted Laplacian of the edges over the given node ordering"""
    index = {node_id: k for k, node_id in enumerate(node_ids)}
    L = np.zeros((len(node_ids), len(node_ids)))
    for edge in edges:
        a, b = index[edge.i], index[edge.j]
        L[a, a] += edge.weight
        L[b, b] += edge.weight
        L[a, b] -= edge.weight
        L[b, a] -= edge.weight
    return L


def incidence(node_ids, edges):
    """Oriented incidence matrix, +1 at the smaller id of each edge"""
    index = {node_id: k for k, node_id in enumerate(node_ids)}
    B = np.zeros((len(node_ids), len(edges)))
    for column, edge in enumerate(edges):
        B[index[edge.i], column] = 1.0
        B[index[edge.j], column] = -1.0
    return B


def kron_reduce(L, retained):
    """
    Eliminate every node not in `retained` by a dense Schur complement.

    Returns the reduced Laplacian L_rr - L_ri L_ii^-1 L_ir and the disturbance map
    [I | -L_ri L_ii^-1] (columns in the original node order) so that reduced
    injections equal disturbance_map @ full_injections.
    """
    L = np.asarray(L, dtype=float)
    n = L.shape[0]
    kept = sorted(set(int(k) for k in retained))
    interior = [k for k in range(n) if k not in kept]

    disturbance_map = np.zeros((len(kept), n))
    disturbance_map[np.arange(len(kept)), kept] = 1.0
    if not interior:
        return KronResult(L.copy(), disturbance_map, tuple(kept), ())

    L_rr = L[np.ix_(kept, kept)]
    L_ri = L[np.ix_(kept, interior)]
    L_ii = L[np.ix_(interior, interior)]
    if len(kept) == 0 or not np.linalg.cond(L_ii) <= TOLERANCES['kron_condition']:
        raise SingularInteriorBlock("Interior block of the Laplacian is singular",
                                    eliminated=[int(k) for k in interior])

    mapping = -scipy.linalg.solve(L_ii.T, L_ri.T, assume_a='sym').T
    reduced = L_rr + mapping @ L[np.ix_(interior, kept)]
    reduced = 0.5 * (reduced + reduced.T)
    disturbance_map[:, interior] = mapping
    return KronResult(reduced, disturbance_map, tuple(kept), tuple(interior))


def edges_from_laplacian(L, node_ids, tolerance=1e-12):
    """Read weighted edges back off a (reduced) Laplacian"""
    edges = []
    scale = max(1.0, float(np.max(np.abs(L)))) if L.size else 1.0
    for a in range(len(node_ids)):
        for b in range(a + 1, len(node_ids)):
            weight = -L[a, b]
            if weight > tolerance * scale:
                i, j = sort_ids((node_ids[a], node_ids[b]))
                edges.append(Edge(i, j, float(weight)))
    return sorted(edges, key=lambda edge: (node_key(edge.i), node_key(edge.j)))


def decompose_subnetworks(graph):
    """Maximal connected ac and dc subnetworks; converters sit in one of each"""
    ac_subnets = _components(graph.ac_nodes, graph.ac_edges)
    dc_subnets = _components(graph.dc_side_nodes, graph.dc_edges)
    log(f"🔍 Decomposed into {len(ac_subnets)} ac and {len(dc_subnets)} dc subnetworks")
    return SubnetworkDecomposition(ac_subnets=ac_subnets, dc_subnets=dc_subnets)


def _components(node_ids, edges):
    g = nx.Graph()
    g.add_nodes_from(node_ids)
    g.add_edges_from((edge.i, edge.j) for edge in edges)
    subnets = []
    for component in nx.connected_components(g):
        members = tuple(sort_ids(component))
        inside = tuple(edge for edge in edges if edge.i in component)
        subnets.append(Subnet(nodes=members, edges=inside))
    subnets.sort(key=lambda subnet: node_key(subnet.nodes[0]))
    return tuple(subnets)


def selector(row_ids, column_ids):
    """0/1 matrix with a 1 where the row id equals the column id"""
    index = {node_id: k for k, node_id in enumerate(column_ids)}
    S = np.zeros((len(row_ids), len(column_ids)))
    for row, node_id in enumerate(row_ids):
        if node_id in index:
            S[row, index[node_id]] = 1.0
    return S


def network_matrices(graph, classification):
    """
    Incidence, weight and Laplacian matrices plus the interconnection selectors.

    classification supplies the ordered node sets r, zs, pv and w. Sources of
    the r and zs sets may sit on machines or dc nodes; their ac and dc
    selectors are complementary (exactly one 1 per row when stacked).
    """
    machines, converters, dc_nodes = graph.machines, graph.converters, graph.dc_nodes
    ac_nodes, dc_side = graph.ac_nodes, graph.dc_side_nodes
    known = set(graph.node_ids)

    checks = (('r', machines + dc_nodes), ('zs', machines + dc_nodes),
              ('pv', dc_nodes), ('w', machines))
    for set_name, allowed in checks:
        for node_id in getattr(classification, set_name):
            if node_id not in known or node_id not in allowed:
                raise ClassificationMismatch(
                    f"Node '{node_id}' classified in set '{set_name}' is not a valid member of the graph",
                    node=node_id, set=set_name)

    B_ac = incidence(ac_nodes, graph.ac_edges)
    B_dc = incidence(dc_side, graph.dc_edges)
    W_ac = np.diag([edge.weight for edge in graph.ac_edges])
    W_dc = np.diag([edge.weight for edge in graph.dc_edges])
    L_dc = B_dc @ W_dc @ B_dc.T

    selectors = {
        'ac': selector(machines, ac_nodes),
        'cac': selector(converters, ac_nodes),
        'cdc': selector(converters, dc_side),
        'dc': selector(dc_nodes, dc_side),
        'r_ac': selector(classification.r, machines),
        'r_dc': selector(classification.r, dc_nodes),
        'zs_ac': selector(classification.zs, machines),
        'zs_dc': selector(classification.zs, dc_nodes),
        'w': selector(classification.w, machines),
        'pv': selector(classification.pv, dc_nodes),
    }
    orientation = tuple(edge.name for edge in graph.ac_edges)
    return NetworkMatrices(B_ac=B_ac, W_ac=W_ac, B_dc=B_dc, W_dc=W_dc, L_dc=L_dc,
                           selectors=selectors, orientation=orientation)
