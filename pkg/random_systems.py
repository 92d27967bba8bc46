"""
Seeded generators of small hybrid ac/dc systems for property tests and demos.

random_system draws unconstrained desk-scale systems; conditioned_system draws
systems that satisfy the five stability conditions (strict v-f droop
consistency, stabilizing derivative gains, a stabilizing source, and ac areas
of the topology-free kinds).
"""

import numpy as np

from control import ControlGains
from devices import build_device_set
from network import AC_KINDS, CONVERTER, DC_KINDS, DC_NODE, MACHINE, build_graph, decompose_subnetworks


def _draw_kinds(rng, n, require_machine=False):
    kinds = [str(kind) for kind in rng.choice([MACHINE, CONVERTER, DC_NODE], size=n)]
    if require_machine and MACHINE not in kinds:
        kinds[0] = MACHINE
    if DC_NODE in kinds and CONVERTER not in kinds:
        kinds[kinds.index(DC_NODE)] = CONVERTER
    # converters first so every later node has a compatible neighbour
    order = {CONVERTER: 0, MACHINE: 1, DC_NODE: 2}
    return sorted(kinds, key=lambda kind: order[kind])


def _compatible(kind_a, kind_b):
    """Edge types that may join two node kinds"""
    types = []
    if kind_a in AC_KINDS and kind_b in AC_KINDS:
        types.append('ac')
    if kind_a in DC_KINDS and kind_b in DC_KINDS:
        types.append('dc')
    return types


def _draw_topology(rng, kinds, extra_edge_probability=0.3, b_range=(1.0, 10.0), g_range=(2.0, 20.0)):
    ids = [str(k + 1) for k in range(len(kinds))]
    edges = {}
    for k in range(1, len(ids)):
        candidates = [j for j in range(k) if _compatible(kinds[j], kinds[k])]
        j = candidates[int(rng.integers(len(candidates)))]
        types = _compatible(kinds[j], kinds[k])
        edges[(ids[j], ids[k])] = types[int(rng.integers(len(types)))]
    for a in range(len(ids)):
        for b in range(a + 1, len(ids)):
            if (ids[a], ids[b]) in edges or rng.random() > extra_edge_probability:
                continue
            types = _compatible(kinds[a], kinds[b])
            if types:
                edges[(ids[a], ids[b])] = types[int(rng.integers(len(types)))]

    description = {'nodes': [{'id': node, 'kind': kind} for node, kind in zip(ids, kinds)],
                   'ac_edges': [], 'dc_edges': []}
    for (a, b), kind in edges.items():
        if kind == 'ac':
            description['ac_edges'].append({'from': a, 'to': b, 'b': float(rng.uniform(*b_range))})
        else:
            description['dc_edges'].append({'from': a, 'to': b, 'g': float(rng.uniform(*g_range))})
    return description


def _machine_record(rng, responsive):
    record = {'J': float(rng.uniform(2.0, 10.0))}
    choice = rng.random()
    if responsive or choice < 0.5:
        record['governor'] = {'T_g': float(rng.uniform(0.3, 2.0)), 'k_g': float(rng.uniform(5.0, 25.0))}
    elif choice < 0.75:
        record['wind_turbine'] = _wind_record(rng)
    elif choice < 0.85:
        record['governor'] = {'T_g': float(rng.uniform(0.3, 2.0)), 'k_g': 0.0}
    return record


def _wind_record(rng):
    return {'k_w': float(rng.uniform(0.1, 1.0)), 'k_beta': float(rng.uniform(0.0, 0.5)),
            'k_bp': float(rng.uniform(0.5, 3.0)), 'T_g': float(rng.uniform(0.2, 1.0))}


def _dc_record(rng):
    record = {'C': float(rng.uniform(0.5, 2.0))}
    choice = rng.random()
    if choice < 0.35:
        k_g = float(rng.uniform(1.0, 5.0)) if rng.random() < 0.8 else 0.0
        record['dc_source'] = {'T_g': float(rng.uniform(0.1, 1.0)), 'k_g': k_g}
    elif choice < 0.7:
        record['pv'] = {'k_pv': float(rng.uniform(0.0, 3.0))}
    return record


def _incident_conductance(description):
    total = {}
    for edge in description['dc_edges']:
        for node in (edge['from'], edge['to']):
            total[node] = total.get(node, 0.0) + edge['g']
    return total


def random_system(rng, size=None):
    """
    (graph, devices, gains) of a random connected 2-4 node system.

    Gains respect the derivative-gain bound but v-f gains differ freely between
    converters, and condensers may sit anywhere.
    """
    n = int(rng.integers(2, 5)) if size is None else size
    kinds = _draw_kinds(rng, n)
    description = _draw_topology(rng, kinds)
    graph = build_graph(description)

    records = {}
    for node in graph.machines:
        choice = rng.random()
        if choice < 0.6:
            records[node] = _machine_record(rng, responsive=False)
        elif choice < 0.8:
            records[node] = {'J': float(rng.uniform(2.0, 10.0)), 'wind_turbine': _wind_record(rng)}
        else:
            records[node] = {'J': float(rng.uniform(2.0, 10.0))}
    for node in graph.converters:
        records[node] = {'C': float(rng.uniform(0.5, 2.0))}
    for node in graph.dc_nodes:
        records[node] = _dc_record(rng)
    devices = build_device_set(graph, records)

    incident = _incident_conductance(description)
    gains = {}
    for node in graph.converters:
        k_omega = float(rng.uniform(0.05, 1.0))
        bound = 2 * k_omega * devices.converters[node].c / incident[node] if node in incident else 0.05
        gains[node] = ControlGains(k_p=float(rng.uniform(0.1, 0.9)) * bound, k_omega=k_omega)
    return graph, devices, gains


def conditioned_system(rng, size=None):
    """
    (graph, devices, gains) of a random system meeting every stability condition.

    Each converter gets a dc neighbour so its derivative gain has a finite bound;
    v-f gains are uniform per dc subnet; machines are governed generators or
    turbines, except a lone machine next to converters, which may be a condenser.
    """
    n = int(rng.integers(2, 5)) if size is None else size
    kinds = _draw_kinds(rng, n, require_machine=True)
    description = _draw_topology(rng, kinds)

    dc_touched = {node for edge in description['dc_edges'] for node in (edge['from'], edge['to'])}
    next_id = len(kinds) + 1
    for record in list(description['nodes']):
        if record['kind'] == CONVERTER and record['id'] not in dc_touched:
            partner = str(next_id)
            next_id += 1
            description['nodes'].append({'id': partner, 'kind': DC_NODE})
            description['dc_edges'].append({'from': record['id'], 'to': partner,
                                            'g': float(rng.uniform(2.0, 20.0))})
    graph = build_graph(description)
    decomposition = decompose_subnetworks(graph)

    records = {}
    for node in graph.machines:
        if rng.random() < 0.3:
            records[node] = {'J': float(rng.uniform(2.0, 10.0)), 'wind_turbine': _wind_record(rng)}
        else:
            records[node] = _machine_record(rng, responsive=True)
    for subnet in decomposition.ac_subnets:
        machines = [node for node in subnet.nodes if node in graph.machines]
        has_converter = any(node in graph.converters for node in subnet.nodes)
        if has_converter and len(machines) == 1 and rng.random() < 0.3:
            records[machines[0]] = {'J': float(rng.uniform(2.0, 10.0))}
    for node in graph.converters:
        records[node] = {'C': float(rng.uniform(0.5, 2.0))}
    for node in graph.dc_nodes:
        records[node] = _dc_record(rng)

    if not any('governor' in records[node] or 'wind_turbine' in records[node] for node in graph.machines):
        records[graph.machines[0]] = _machine_record(rng, responsive=True)
    devices = build_device_set(graph, records)

    incident = _incident_conductance(description)
    gains = {}
    for subnet in decomposition.dc_subnets:
        k_omega = float(rng.uniform(0.05, 1.0))
        for node in subnet.nodes:
            if node in graph.converters:
                bound = 2 * k_omega * devices.converters[node].c / incident[node]
                gains[node] = ControlGains(k_p=float(rng.uniform(0.05, 0.95)) * bound, k_omega=k_omega)
    return graph, devices, gains


def random_laplacian(rng, n, edge_probability=0.4):
    """Weighted Laplacian of a random connected graph on n nodes (spanning tree plus extra edges)"""
    L = np.zeros((n, n))

    def add(a, b, weight):
        L[a, a] += weight
        L[b, b] += weight
        L[a, b] -= weight
        L[b, a] -= weight

    for k in range(1, n):
        add(k, int(rng.integers(k)), float(rng.uniform(0.5, 5.0)))
    for a in range(n):
        for b in range(a + 1, n):
            if L[a, b] == 0 and rng.random() < edge_probability:
                add(a, b, float(rng.uniform(0.5, 5.0)))
    return L
