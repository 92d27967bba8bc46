"""
Scenario files: one JSON document per system with its network, devices, gains,
disturbances and analysis/simulation options.

Loading validates cross references, applies defaults and eliminates passive
buses (kinds 'ac_bus' / 'dc_bus') by Kron reduction before the graph is built.
"""

import copy
import json
from dataclasses import dataclass
from functools import cached_property
from pathlib import Path

import numpy as np

from control import ControlGains
from devices import build_device_set
from errors import HybridGridError, ParseError, ValidationError
from network import (AC_KINDS, DC_KINDS, Edge, build_graph, edges_from_laplacian, kron_reduce, laplacian,
                     node_key, scale_dc_conductances, sort_ids)
from settings import GDC_SCALES, SIM_DEFAULTS, log
from simulation import DisturbanceSchedule

SCENARIO_DIR = Path(__file__).parent / 'scenarios'

TOP_LEVEL_KEYS = ('name', 'description', 'base', 'nodes', 'ac_edges', 'dc_edges', 'devices', 'gains',
                  'disturbances', 'base_loads', 'analysis', 'simulation')
SCENARIO_KINDS = ('machine', 'converter', 'dc', 'ac_bus', 'dc_bus')
BUS_KINDS = {'ac_bus': 'ac', 'dc_bus': 'dc'}

DEFAULT_BASE = {'S_b': 100.0, 'f_b': 50.0}
DEFAULT_ANALYSIS = {
    'n_minus_one': False,
    'relax_cond1': False,
    'gdc_scales': list(GDC_SCALES),
    'reference_node': None,
    'k_omega_max': None,
}
DEFAULT_SIMULATION = {
    'step': SIM_DEFAULTS['step'],
    't_end': SIM_DEFAULTS['t_end'],
    'monitored': None,
}


@dataclass
class Scenario:
    """Normalized scenario document plus the system built from it"""
    data: dict
    source: str = None

    @property
    def name(self):
        return self.data['name']

    @property
    def analysis(self):
        return self.data['analysis']

    @property
    def simulation(self):
        return self.data['simulation']

    @cached_property
    def reduced(self):
        return reduce_passive_buses(self.data)

    @cached_property
    def graph(self):
        return build_graph(self.reduced['network'])

    @cached_property
    def devices(self):
        return build_device_set(self.graph, self.data['devices'])

    @cached_property
    def gains(self):
        return {node: ControlGains(**record) for node, record in self.data['gains'].items()}

    @property
    def schedule(self):
        return DisturbanceSchedule.from_records(self.reduced['disturbances'])

    @property
    def loads(self):
        """Final (node, terminal, delta_P) list after every event has occurred"""
        return self.schedule.final_loads()

    @property
    def base_loads(self):
        return self.reduced['base_loads']

    def scaled_graph(self, factor):
        return self.graph if factor == 1 else scale_dc_conductances(self.graph, factor)

    def dump(self):
        return dump_scenario(self.data)


def fixture_path(name):
    return SCENARIO_DIR / f"{name}.json"


def available_fixtures():
    return sorted(path.stem for path in SCENARIO_DIR.glob('*.json'))


def load_scenario(path):
    """Read, validate and normalize a scenario file (a path or a bundled fixture name)"""
    path = Path(path)
    if not path.exists() and fixture_path(str(path)).exists():
        path = fixture_path(str(path))
    try:
        text = path.read_text()
    except OSError as exc:
        raise ParseError(f"Cannot read scenario file {path}: {exc}", path=str(path))
    scenario = parse_scenario(text, source=str(path))
    log(f"✅ Loaded scenario '{scenario.name}' from {path}")
    return scenario


def parse_scenario(text, source=None):
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ParseError(f"Invalid JSON: {exc.msg}", line=exc.lineno, column=exc.colno, source=source)
    if not isinstance(raw, dict):
        raise ParseError("Scenario document must be an object", source=source)
    return Scenario(data=normalize(raw), source=source)


def dump_scenario(data):
    return json.dumps(data, indent=2, sort_keys=True) + '\n'


# ---------------------------------------------------------------------------
# Validation and normalization
# ---------------------------------------------------------------------------

def _fail(message, **details):
    raise ValidationError(message, **details)


def normalize(raw):
    """Validated copy of a raw scenario with every default filled in"""
    raw = copy.deepcopy(raw)
    unknown = sorted(set(raw) - set(TOP_LEVEL_KEYS))
    if unknown:
        _fail(f"Unknown top-level field '{unknown[0]}'", field=unknown[0])
    if not raw.get('nodes'):
        _fail("Scenario has no nodes", field='nodes')

    nodes = []
    kinds = {}
    for index, record in enumerate(raw['nodes']):
        if not isinstance(record, dict) or 'id' not in record or 'kind' not in record:
            _fail(f"nodes[{index}] needs 'id' and 'kind'", field=f"nodes[{index}]")
        node_id, kind = str(record['id']), record['kind']
        if kind not in SCENARIO_KINDS:
            _fail(f"Node '{node_id}' has unknown kind '{kind}'", node=node_id, kind=kind)
        if node_id in kinds:
            _fail(f"Node id '{node_id}' appears more than once", node=node_id)
        kinds[node_id] = kind
        nodes.append({'id': node_id, 'kind': kind})
    nodes.sort(key=lambda record: node_key(record['id']))

    ac_edges = _normalize_edges(raw.get('ac_edges', []), 'ac_edges', 'b', kinds)
    dc_edges = _normalize_edges(raw.get('dc_edges', []), 'dc_edges', 'g', kinds)

    devices = raw.get('devices', {})
    normalized_devices = {}
    for node_id in sort_ids(kinds):
        kind = kinds[node_id]
        if kind in BUS_KINDS:
            if node_id in devices:
                _fail(f"Passive bus '{node_id}' cannot carry a device", node=node_id)
            continue
        if node_id not in devices:
            _fail(f"Node '{node_id}' has no device record", node=node_id)
        normalized_devices[node_id] = _normalize_device(node_id, kind, devices[node_id])
    extra = sorted(set(map(str, devices)) - set(kinds), key=node_key)
    if extra:
        _fail(f"Device record for unknown node '{extra[0]}'", node=extra[0])

    gains = {}
    raw_gains = {str(k): v for k, v in raw.get('gains', {}).items()}
    for node_id in sort_ids(kinds):
        if kinds[node_id] != 'converter':
            if node_id in raw_gains:
                _fail(f"Gains given for non-converter node '{node_id}'", node=node_id)
            continue
        record = raw_gains.get(node_id)
        if record is None:
            _fail(f"Converter '{node_id}' has no control gains", node=node_id)
        for key in ('k_p', 'k_omega'):
            if key not in record:
                _fail(f"Converter '{node_id}' is missing gain {key}", node=node_id, gain=key)
        entry = {'k_p': float(record['k_p']), 'k_omega': float(record['k_omega'])}
        if record.get('m_p') is not None:
            entry['m_p'] = float(record['m_p'])
        for key, value in entry.items():
            if not value > 0:
                _fail(f"Converter '{node_id}' gain {key} must be positive", node=node_id, gain=key)
        gains[node_id] = entry

    disturbances = []
    last_time = 0.0
    for index, record in enumerate(raw.get('disturbances', [])):
        event = _normalize_load(record, kinds, f"disturbances[{index}]", timed=True)
        if event['time'] < last_time:
            _fail(f"disturbances[{index}] is out of time order", index=index)
        last_time = event['time']
        disturbances.append(event)

    base_loads = {}
    for node_id, terminals in sorted(raw.get('base_loads', {}).items(), key=lambda item: node_key(item[0])):
        node_id = str(node_id)
        for terminal, value in terminals.items():
            _normalize_load({'node': node_id, 'terminal': terminal, 'delta_P': value}, kinds,
                            f"base_loads.{node_id}", timed=False)
        base_loads[node_id] = {terminal: float(value) for terminal, value in sorted(terminals.items())}

    analysis = {**DEFAULT_ANALYSIS, **raw.get('analysis', {})}
    unknown = sorted(set(analysis) - set(DEFAULT_ANALYSIS))
    if unknown:
        _fail(f"Unknown analysis option '{unknown[0]}'", field=unknown[0])
    analysis['gdc_scales'] = [float(s) for s in analysis['gdc_scales']]
    if analysis['reference_node'] is not None:
        analysis['reference_node'] = str(analysis['reference_node'])
        if kinds.get(analysis['reference_node']) not in AC_KINDS:
            _fail("analysis.reference_node must be a machine or converter", node=analysis['reference_node'])
    limits = analysis['k_omega_max']
    if limits is not None and not {'delta_omega_max', 'delta_v_max'} <= set(limits):
        _fail("analysis.k_omega_max needs delta_omega_max and delta_v_max", field='k_omega_max')

    simulation = {**DEFAULT_SIMULATION, **raw.get('simulation', {})}
    unknown = sorted(set(simulation) - set(DEFAULT_SIMULATION))
    if unknown:
        _fail(f"Unknown simulation option '{unknown[0]}'", field=unknown[0])
    if not float(simulation['step']) > 0 or not float(simulation['t_end']) > 0:
        _fail("simulation.step and simulation.t_end must be positive", field='simulation')
    simulation['step'], simulation['t_end'] = float(simulation['step']), float(simulation['t_end'])
    if simulation['monitored'] is not None:
        simulation['monitored'] = [str(node) for node in simulation['monitored']]
        for node in simulation['monitored']:
            if kinds.get(node) not in AC_KINDS:
                _fail(f"Monitored node '{node}' is not a machine or converter", node=node)

    return {
        'name': str(raw.get('name', 'scenario')),
        'description': str(raw.get('description', '')),
        'base': {key: float(value) for key, value in {**DEFAULT_BASE, **raw.get('base', {})}.items()},
        'nodes': nodes,
        'ac_edges': ac_edges,
        'dc_edges': dc_edges,
        'devices': normalized_devices,
        'gains': gains,
        'disturbances': disturbances,
        'base_loads': base_loads,
        'analysis': analysis,
        'simulation': simulation,
    }


def _normalize_edges(records, section, weight_key, kinds):
    edges = []
    allowed = AC_KINDS + ('ac_bus',) if section == 'ac_edges' else DC_KINDS + ('dc_bus',)
    for index, record in enumerate(records):
        label = f"{section}[{index}]"
        if not isinstance(record, dict) or not {'from', 'to', weight_key} <= set(record):
            _fail(f"{label} needs 'from', 'to' and '{weight_key}'", field=label)
        a, b = str(record['from']), str(record['to'])
        for endpoint in (a, b):
            if endpoint not in kinds:
                _fail(f"{label} references unknown node '{endpoint}'", field=label, node=endpoint)
            if kinds[endpoint] not in allowed:
                _fail(f"{label} touches {kinds[endpoint]} node '{endpoint}'", field=label, node=endpoint)
        a, b = sort_ids((a, b))
        edges.append({'from': a, 'to': b, weight_key: float(record[weight_key])})
    edges.sort(key=lambda edge: (node_key(edge['from']), node_key(edge['to'])))
    return edges


def _normalize_device(node_id, kind, record):
    if not isinstance(record, dict):
        _fail(f"Device record of '{node_id}' must be an object", node=node_id)
    record = copy.deepcopy(record)
    if kind == 'machine':
        if 'J' not in record:
            _fail(f"Machine '{node_id}' is missing J", node=node_id)
        if 'wind_turbine' not in record:
            record.setdefault('omega_star', 1.0)
    else:
        if 'C' not in record:
            _fail(f"Node '{node_id}' is missing capacitance C", node=node_id)
        record.setdefault('v_star', 1.0)
    allowed = {'machine': {'J', 'omega_star', 'governor', 'wind_turbine'},
               'converter': {'C', 'v_star', 'role'},
               'dc': {'C', 'v_star', 'dc_source', 'pv'}}[kind]
    unknown = sorted(set(record) - allowed)
    if unknown:
        _fail(f"Device record of '{node_id}' has unknown field '{unknown[0]}'", node=node_id, field=unknown[0])
    return record


def _normalize_load(record, kinds, label, timed):
    if not isinstance(record, dict) or not {'node', 'terminal', 'delta_P'} <= set(record):
        _fail(f"{label} needs 'node', 'terminal' and 'delta_P'", field=label)
    node, terminal = str(record['node']), record['terminal']
    if node not in kinds:
        _fail(f"{label} references unknown node '{node}'", field=label, node=node)
    if terminal not in ('ac', 'dc'):
        _fail(f"{label} has unknown terminal '{terminal}'", field=label)
    valid = AC_KINDS + ('ac_bus',) if terminal == 'ac' else DC_KINDS + ('dc_bus',)
    if kinds[node] not in valid:
        _fail(f"{label}: node '{node}' has no {terminal} terminal", field=label, node=node)
    event = {'node': node, 'terminal': terminal, 'delta_P': float(record['delta_P'])}
    if timed:
        event['time'] = float(record.get('time', 0.0))
        if event['time'] < 0:
            _fail(f"{label} has a negative time", field=label)
    return event


# ---------------------------------------------------------------------------
# Passive bus elimination
# ---------------------------------------------------------------------------

def reduce_passive_buses(data):
    """
    Kron-reduce passive ac and dc buses out of the network.

    Loads on eliminated buses are redistributed to the retained nodes of the
    same network through the reduction's disturbance map.
    """
    kinds = {record['id']: record['kind'] for record in data['nodes']}
    network = {'nodes': [{'id': node, 'kind': kind} for node, kind in kinds.items() if kind not in BUS_KINDS]}
    mappings = {}

    for terminal, section, weight_key, bus_kind in (('ac', 'ac_edges', 'b', 'ac_bus'),
                                                    ('dc', 'dc_edges', 'g', 'dc_bus')):
        edges = data[section]
        buses = [node for node, kind in kinds.items() if kind == bus_kind]
        if not buses:
            network[section] = [{'from': e['from'], 'to': e['to'], weight_key: e[weight_key]} for e in edges]
            continue
        members = sort_ids({e['from'] for e in edges} | {e['to'] for e in edges} | set(buses))
        L = laplacian(members, [Edge(e['from'], e['to'], e[weight_key]) for e in edges])
        retained = [k for k, node in enumerate(members) if kinds[node] != bus_kind]
        result = kron_reduce(L, retained)
        kept_ids = [members[k] for k in result.retained]
        reduced_edges = edges_from_laplacian(result.reduced, kept_ids)
        network[section] = [{'from': e.i, 'to': e.j, weight_key: e.weight} for e in reduced_edges]
        mappings[terminal] = (members, kept_ids, result.disturbance_map)
        log(f"🔍 Eliminated {len(buses)} passive {terminal} bus(es)")

    def redistribute(node, terminal, value):
        if kinds[node] not in BUS_KINDS:
            return [(node, value)]
        members, kept_ids, dmap = mappings[terminal]
        column = dmap[:, members.index(node)]
        return [(kept_ids[k], float(value * column[k])) for k in np.flatnonzero(np.abs(column) > 0)]

    disturbances = []
    for event in data['disturbances']:
        for node, value in redistribute(event['node'], event['terminal'], event['delta_P']):
            disturbances.append({**event, 'node': node, 'delta_P': value})

    base_loads = {}
    for node, terminals in data['base_loads'].items():
        for terminal, value in terminals.items():
            for target, share in redistribute(node, terminal, value):
                entry = base_loads.setdefault(target, {})
                entry[terminal] = entry.get(terminal, 0.0) + share

    return {'network': network, 'disturbances': disturbances, 'base_loads': base_loads,
            'eliminated': sort_ids(node for node, kind in kinds.items() if kind in BUS_KINDS)}


def try_load(path):
    """(scenario, None) or (None, error record)"""
    try:
        return load_scenario(path), None
    except HybridGridError as exc:
        return None, exc.to_record()
