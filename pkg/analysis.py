"""
Stability analysis of the assembled hybrid ac/dc model.

Topological and gain conditions with witnesses, the LaSalle certificate,
spectra, steady states, effective droops and the quasi-synchronous
frequency, gathered into a StabilityReport.
"""

from collections import deque
from dataclasses import dataclass, field

import networkx as nx
import numpy as np
import pandas as pd
import scipy.linalg

from assembly import (assemble_system, converter_frequencies, cycle_free_basis, disturbance_vector,
                      dynamics_matrix, projected_system, without_zs)
from control import tuning_advisory
from devices import ControllableDc, Governor, PvSource, WindTurbine, classify_nodes, source_gain
from errors import (CertificateUndefined, CertificateViolated, EigenFailure, HybridGridError,
                    InconsistentDroop, IsolatedDcNode, SingularA, ZeroD)
from network import Edge, decompose_subnetworks, node_key, scale_dc_conductances, sort_ids
from settings import GDC_SCALES, SOLVER_LIMITS, TOLERANCES, log

RELAXED_ROLES = ('pmsg_wt', 'lfac')


@dataclass(frozen=True)
class Verdict:
    name: str
    passed: bool
    witness: tuple = ()
    label: str = None
    details: dict = field(default_factory=dict)

    @property
    def status(self):
        return 'PASS' if self.passed else 'FAIL'

    def to_dict(self):
        return {'name': self.name, 'status': self.status, 'witness': list(self.witness),
                'label': self.label, 'details': to_plain(self.details)}


def to_plain(value):
    """JSON-ready copy: numpy scalars and arrays to Python, non-finite floats to strings"""
    if isinstance(value, np.ndarray):
        return to_plain(value.tolist())
    if isinstance(value, dict):
        return {str(k): to_plain(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [to_plain(v) for v in value]
    if isinstance(value, (np.floating, float)):
        number = float(value)
        return number if np.isfinite(number) else str(number)
    if isinstance(value, np.integer):
        return int(value)
    if isinstance(value, (np.bool_,)):
        return bool(value)
    return value


def _equal(a, b, tolerance):
    return abs(a - b) <= tolerance * max(abs(a), abs(b))


# ---------------------------------------------------------------------------
# Consistent v-f droop
# ---------------------------------------------------------------------------

def subnet_scaling(decomposition, gains, reference=0):
    """
    Steady-state frequency and voltage ratios relative to a reference ac subnet.

    Returns (sigma per ac subnet, tau per dc subnet, conflict) where in a
    quasi-synchronous steady state omega = sigma * omega_ref on ac subnets and
    v = tau * omega_ref on dc subnets. conflict names the first dc subnet whose
    gains admit no consistent scaling (None when consistent).
    """
    ac, dc = decomposition.ac_subnets, decomposition.dc_subnets
    converters_in_dc = [[node for node in subnet.nodes if node in gains] for subnet in dc]
    converters_in_ac = [[node for node in subnet.nodes if node in gains] for subnet in ac]

    sigma = [None] * len(ac)
    tau = [None] * len(dc)
    conflict = None
    queue = deque()
    if ac:
        sigma[reference] = 1.0
        queue.append(('ac', reference))
    elif dc:
        tau[0] = 1.0
        queue.append(('dc', 0))

    tolerance = TOLERANCES['gain_equality'] * 1e3
    while queue:
        kind, index = queue.popleft()
        if kind == 'ac':
            for converter in converters_in_ac[index]:
                j = decomposition.dc_index(converter)
                value = sigma[index] / gains[converter].k_omega
                if tau[j] is None:
                    tau[j] = value
                    queue.append(('dc', j))
                elif not _equal(tau[j], value, tolerance) and conflict is None:
                    conflict = j
        else:
            for converter in converters_in_dc[index]:
                i = decomposition.ac_index(converter)
                value = tau[index] * gains[converter].k_omega
                if sigma[i] is None:
                    sigma[i] = value
                    queue.append(('ac', i))
                elif not _equal(sigma[i], value, tolerance) and conflict is None:
                    conflict = decomposition.dc_index(converter)
    return sigma, tau, conflict


def check_cond1(decomposition, gains, relax=False):
    """Equal k_omega within every dc subnet; optionally relaxed to a consistent subnet scaling"""
    offending, labels, per_subnet = [], {}, {}
    for index, subnet in enumerate(decomposition.dc_subnets):
        converters = [node for node in subnet.nodes if node in gains]
        values = [gains[c].k_omega for c in converters]
        per_subnet[index] = dict(zip(converters, values))
        if values and not all(_equal(values[0], value, TOLERANCES['gain_equality']) for value in values):
            offending.append(index)
            areas = {decomposition.ac_index(c) for c in converters}
            labels[index] = 'point_to_point' if len(converters) == 2 and len(areas) == 2 else 'single_dc_coupling'

    details = {'k_omega': per_subnet}
    if not offending:
        return Verdict('cond1', True, label='strict', details=details)

    witness = []
    for index in offending:
        pair = sorted(per_subnet[index].items(), key=lambda item: node_key(item[0]))
        witness.append(f"dc{index + 1}: " + ', '.join(f"{c}={k:g}" for c, k in pair))

    if relax:
        _, _, conflict = subnet_scaling(decomposition, gains)
        details['strict_failures'] = witness
        if conflict is None:
            label = ','.join(sorted(set(labels.values())))
            return Verdict('cond1', True, label=f"relaxed:{label}", details=details)
        return Verdict('cond1', False, witness=(f"dc{conflict + 1}: no consistent frequency scaling",),
                       label='relaxed', details=details)
    return Verdict('cond1', False, witness=tuple(witness), label='strict', details=details)


# ---------------------------------------------------------------------------
# Stabilizing derivative gains
# ---------------------------------------------------------------------------

def converter_kp_bounds(graph, devices, gains):
    """Largest admissible k_p per converter and the rule that produced it"""
    incident = {c: 0.0 for c in graph.converters}
    neighbours = {c: [] for c in graph.converters}
    for edge in graph.dc_edges:
        for a, b in ((edge.i, edge.j), (edge.j, edge.i)):
            if a in incident:
                incident[a] += edge.weight
                neighbours[a].append(b)

    bounds, rules = {}, {}
    for converter in graph.converters:
        record = devices.converters[converter]
        role = record.role
        if role in RELAXED_ROLES:
            bounds[converter], rules[converter] = float('inf'), role
        elif role == 'direct_feed':
            k = 0.0
            for node in neighbours[converter]:
                source = devices.source_of(node)
                if isinstance(source, ControllableDc):
                    k += source.k_g
                elif isinstance(source, PvSource):
                    k += source.k_pv
            bounds[converter] = 4.0 * record.c / k if k > 0 else float('inf')
            rules[converter] = role
        else:
            if incident[converter] == 0:
                raise IsolatedDcNode(f"Converter '{converter}' has no dc edges", converter=converter)
            r_eq = 1.0 / incident[converter]
            bounds[converter] = 2.0 * gains[converter].k_omega * record.c * r_eq
            rules[converter] = role or 'general'
    return bounds, rules


def check_cond2(graph, devices, gains):
    """Strict k_p < 2 k_omega c r_eq per converter, with role-specific relaxations"""
    bounds, rules = converter_kp_bounds(graph, devices, gains)
    margins, witness = {}, []
    for converter in graph.converters:
        margin = bounds[converter] - gains[converter].k_p
        margins[converter] = margin
        if not margin > TOLERANCES['strict_margin']:
            witness.append(converter)
    details = {'margins': margins, 'bounds': bounds, 'rules': rules}
    return Verdict('cond2', not witness, witness=tuple(witness), details=details)


# ---------------------------------------------------------------------------
# At least one stabilizing source
# ---------------------------------------------------------------------------

def check_cond3(classification):
    responsive = tuple(classification.r) + tuple(classification.pv) + tuple(classification.w)
    if responsive:
        return Verdict('cond3', True, details={'responsive': sort_ids(set(responsive))})
    return Verdict('cond3', False, witness=('no source with k_g, k_pv or k_w > 0',))


# ---------------------------------------------------------------------------
# Synchronizing ac connections
# ---------------------------------------------------------------------------

def check_syncac(edges, n1, n2, n3):
    """
    Every k in n3 needs a neighbour l in n1 whose degree within the n1-n2 edges is one.

    edges are (i, j) pairs or Edge records of one ac subnet.
    """
    n1, n2 = set(n1), set(n2)
    cross = []
    for edge in edges:
        i, j = (edge.i, edge.j) if isinstance(edge, Edge) else edge
        if (i in n1 and j in n2) or (j in n1 and i in n2):
            cross.append((i, j))

    g = nx.Graph()
    g.add_edges_from(cross)
    for k in sort_ids(n3):
        neighbours = g.neighbors(k) if k in g else []
        if not any(l in n1 and g.degree(l) == 1 for l in neighbours):
            return Verdict('syncac', False, witness=(k,))
    return Verdict('syncac', True)


def _is_ac_responsive(devices, machine):
    source = devices.machines[machine].source
    if isinstance(source, Governor):
        return source.k_g > 0
    if isinstance(source, WindTurbine):
        return source.k_g > 0 or source.k_w > 0
    return False


def _dc_controlled_subnets(decomposition, devices):
    controlled = set()
    for index, subnet in enumerate(decomposition.dc_subnets):
        for node in subnet.nodes:
            source = devices.dc_nodes[node].source if node in devices.dc_nodes else None
            if isinstance(source, ControllableDc) and source.k_g > 0:
                controlled.add(index)
            if isinstance(source, PvSource) and source.k_pv > 0:
                controlled.add(index)
    return controlled


def node_groups(nodes, devices, decomposition):
    """ac^r, ac^o, cac^r and cac^o members among the given ac-side nodes"""
    controlled = _dc_controlled_subnets(decomposition, devices)
    groups = {'ac_r': [], 'ac_o': [], 'cac_r': [], 'cac_o': []}
    for node in sort_ids(nodes):
        if node in devices.machines:
            groups['ac_r' if _is_ac_responsive(devices, node) else 'ac_o'].append(node)
        else:
            in_controlled = decomposition.dc_index(node) in controlled
            groups['cac_r' if in_controlled else 'cac_o'].append(node)
    return groups


def corollary_case(groups):
    """Topology-free shortcut case for one ac subnet, or None"""
    machines = groups['ac_r'] + groups['ac_o']
    converters = groups['cac_r'] + groups['cac_o']
    if machines and not converters and not groups['ac_o']:
        return 'cor2_i'
    if converters and not machines:
        return 'cor2_ii'
    if converters and groups['ac_r'] and not groups['ac_o']:
        return 'cor2_iii'
    if converters and len(machines) == 1:
        return 'cor2_v' if groups['ac_o'] else 'cor2_iv'
    return None


def _check_ac_component(nodes, edges, devices, decomposition):
    groups = node_groups(nodes, devices, decomposition)
    case = corollary_case(groups)
    if case:
        return True, case, ()

    case_i = check_syncac(edges, groups['ac_r'] + groups['cac_r'], groups['ac_o'] + groups['cac_o'],
                          groups['ac_o'])
    if case_i.passed:
        return True, 'cond5_i', ()
    machines = groups['ac_r'] + groups['ac_o']
    case_ii = check_syncac(edges, groups['cac_r'] + groups['cac_o'], machines, machines)
    if case_ii.passed:
        return True, 'cond5_ii', ()
    return False, None, case_i.witness


def _components_after_deletion(nodes, edges, removed_node=None, removed_edge=None):
    g = nx.Graph()
    g.add_nodes_from(n for n in nodes if n != removed_node)
    for edge in edges:
        if removed_edge is not None and (edge.i, edge.j) == removed_edge:
            continue
        if removed_node in (edge.i, edge.j):
            continue
        g.add_edge(edge.i, edge.j)
    for component in sorted(nx.connected_components(g), key=lambda c: min(node_key(n) for n in c)):
        yield component, [edge for edge in edges if edge.i in component and edge.j in component
                          and (removed_edge is None or (edge.i, edge.j) != removed_edge)]


def check_cond5(graph, decomposition, devices, n_minus_one=False):
    """ac topology rule per ac subnet (shortcut cases first); optional N-1 re-check after each deletion"""
    subnets, witness = [], []
    for index, subnet in enumerate(decomposition.ac_subnets):
        passed, case, bad = _check_ac_component(subnet.nodes, subnet.edges, devices, decomposition)
        entry = {'subnet': f"ac{index + 1}", 'nodes': list(subnet.nodes), 'passed': passed, 'case': case}
        if not passed:
            witness.append(f"ac{index + 1}:{bad[0]}")

        if n_minus_one and passed:
            failures = []
            deletions = [('node', node) for node in subnet.nodes] + [('edge', (e.i, e.j)) for e in subnet.edges]
            for what, target in deletions:
                kwargs = {'removed_node': target} if what == 'node' else {'removed_edge': target}
                for component, edges in _components_after_deletion(subnet.nodes, subnet.edges, **kwargs):
                    ok, _, bad_after = _check_ac_component(component, edges, devices, decomposition)
                    if not ok:
                        label = target if what == 'node' else f"{target[0]}-{target[1]}"
                        failures.append(f"without {what} {label}: {bad_after[0]}")
                        break
            entry['n_minus_one_failures'] = failures
            if failures:
                entry['passed'] = False
                witness.append(f"ac{index + 1}:{failures[0]}")
        subnets.append(entry)

    label = 'n-1' if n_minus_one else None
    return Verdict('cond5', not witness, witness=tuple(witness), label=label, details={'subnets': subnets})


# ---------------------------------------------------------------------------
# LaSalle certificate and dc coupling bounds
# ---------------------------------------------------------------------------

@dataclass
class Certificate:
    M: np.ndarray
    min_eig_M: float
    max_eig_S: float
    max_sampled_derivative: float
    samples: int
    state_names: list

    def value(self, x):
        return float(x @ self.M @ x)

    def to_dict(self):
        return {'min_eig_M': self.min_eig_M, 'max_eig_S': self.max_eig_S,
                'max_sampled_derivative': self.max_sampled_derivative, 'samples': self.samples}


def lasalle_certificate(ss, samples=None, seed=0, raise_on_violation=True):
    """
    Energy-like function V = x' M x on the system without zero-sensitivity source states.

    Defined only when k_omega is uniform inside every dc subnet. Checks M > 0,
    the symmetrized derivative S = M A~ + A~' M <= 0 and dV/dt on random states.
    """
    samples = SOLVER_LIMITS['certificate_samples'] if samples is None else samples
    graph, devices, gains = ss.graph, ss.devices, ss.gains
    decomposition = decompose_subnetworks(graph)
    if not check_cond1(decomposition, gains).passed:
        raise CertificateUndefined("Certificate needs equal k_omega within each dc subnet")

    k_subnet = []
    for subnet in decomposition.dc_subnets:
        values = [gains[node].k_omega for node in subnet.nodes if node in gains]
        k_subnet.append(values[0] if values else 1.0)
    k_tilde_v = np.array([k_subnet[decomposition.dc_index(node)] for node in graph.dc_side_nodes])

    k_tilde_r = []
    for node in ss.classification.r:
        k_g = source_gain(devices.source_of(node))
        if node in devices.machines:
            k_tilde_r.append(1.0 / k_g)
        else:
            k_tilde_r.append(k_subnet[decomposition.dc_index(node)] / k_g)

    T, A, _, keep = without_zs(ss)
    t_diag = np.diag(T)
    blocks = ss.blocks
    W = ss.matrices.W_ac
    J = t_diag[blocks['omega']]
    C = t_diag[blocks['v']]
    T_r = t_diag[blocks['P_r']]
    M = 0.5 * scipy.linalg.block_diag(W, np.diag(J), np.diag(k_tilde_v * C), np.diag(np.array(k_tilde_r) * T_r))

    A_tilde = A / t_diag[:, None]
    S = M @ A_tilde + A_tilde.T @ M
    S = 0.5 * (S + S.T)
    min_eig_M = float(np.min(np.linalg.eigvalsh(M))) if M.size else 0.0
    max_eig_S = float(np.max(np.linalg.eigvalsh(S))) if S.size else 0.0

    rng = np.random.default_rng(seed)
    worst = -np.inf
    for _ in range(samples):
        x = rng.standard_normal(len(keep))
        worst = max(worst, float(x @ S @ x))

    certificate = Certificate(M=M, min_eig_M=min_eig_M, max_eig_S=max_eig_S,
                              max_sampled_derivative=worst if samples else 0.0,
                              samples=samples, state_names=[ss.state_names[k] for k in keep])
    threshold = TOLERANCES['certificate']
    if raise_on_violation:
        if not min_eig_M > 0:
            raise CertificateViolated("M is not positive definite", min_eig_M=min_eig_M)
        if max_eig_S > threshold or certificate.max_sampled_derivative > threshold:
            raise CertificateViolated("Lyapunov derivative is positive for some state",
                                      max_eig_S=max_eig_S,
                                      max_sampled_derivative=certificate.max_sampled_derivative)
    log(f"🔍 Certificate: min eig M={min_eig_M:.3e}, max eig S={max_eig_S:.3e}")
    return certificate


def dc_coupling_bounds(graph, devices, gains, decomposition=None):
    """
    Per dc subnet: lambda_max(E^1/2 L_cc E^1/2) against 4 k_omega, and the
    Gershgorin row sums sum g e_l + sum g sqrt(e_l e_k) over converter rows.
    """
    decomposition = decomposition or decompose_subnetworks(graph)
    results = []
    for index, subnet in enumerate(decomposition.dc_subnets):
        converters = [node for node in subnet.nodes if node in gains]
        if not converters:
            continue
        k = min(gains[c].k_omega for c in converters)
        e = {c: gains[c].k_p / devices.converters[c].c for c in converters}
        position = {c: n for n, c in enumerate(converters)}
        L_cc = np.zeros((len(converters), len(converters)))
        rows = {c: 0.0 for c in converters}
        for edge in subnet.edges:
            for a, b in ((edge.i, edge.j), (edge.j, edge.i)):
                if a in position:
                    L_cc[position[a], position[a]] += edge.weight
                    rows[a] += edge.weight * e[a]
                    if b in position:
                        L_cc[position[a], position[b]] -= edge.weight
                        rows[a] += edge.weight * np.sqrt(e[a] * e[b])
        root_e = np.sqrt(np.array([e[c] for c in converters]))
        lam = float(np.max(np.linalg.eigvalsh(root_e[:, None] * L_cc * root_e[None, :])))
        results.append({
            'subnet': f"dc{index + 1}",
            'k_omega': k,
            'lambda_max': lam,
            'bound': 4.0 * k,
            'holds': lam < 4.0 * k - TOLERANCES['strict_margin'],
            'row_sums': rows,
            'gershgorin_holds': all(value < 4.0 * k for value in rows.values()),
        })
    return results


# ---------------------------------------------------------------------------
# Spectrum and steady state
# ---------------------------------------------------------------------------

@dataclass
class Spectrum:
    eigenvalues: np.ndarray
    restricted: np.ndarray
    max_real: float
    stable: bool

    def to_dict(self):
        return {'max_real': self.max_real, 'stable': self.stable,
                'eigenvalues': [[float(z.real), float(z.imag)] for z in self.eigenvalues]}


def _sorted_eigs(values):
    return np.array(sorted(values, key=lambda z: (-z.real, z.imag)))


def spectrum(ss):
    """Eigenvalues of T^-1 A; stability judged on the cycle-free system without zs sources"""
    try:
        full = scipy.linalg.eigvals(dynamics_matrix(ss)) if ss.n else np.zeros(0, dtype=complex)
        T_p, A_p, _, _ = projected_system(ss, drop_zs=True)
        restricted = scipy.linalg.eigvals(np.linalg.solve(T_p, A_p)) if A_p.size else np.zeros(0, dtype=complex)
    except (np.linalg.LinAlgError, ValueError) as exc:
        raise EigenFailure(f"Eigenvalue computation failed: {exc}")
    if not (np.all(np.isfinite(full)) and np.all(np.isfinite(restricted))):
        raise EigenFailure("Eigenvalue computation produced non-finite values")
    max_real = float(np.max(restricted.real)) if restricted.size else -np.inf
    stable = max_real < -TOLERANCES['stability']
    log(f"{'✅' if stable else '❌'} Max real part {max_real:.3e}")
    return Spectrum(eigenvalues=_sorted_eigs(full), restricted=_sorted_eigs(restricted),
                    max_real=max_real, stable=stable)


def steady_state(ss, P_d):
    """x_ss with A x + B P_d = 0, eta taken in the range of B_ac^T"""
    P_d = np.asarray(P_d, dtype=float)
    if not np.any(P_d):
        return np.zeros(ss.n)
    P = cycle_free_basis(ss)
    A_p = P.T @ ss.A @ P
    if not np.linalg.cond(A_p) <= TOLERANCES['steady_condition']:
        raise SingularA("System matrix is singular on the cycle-free subspace",
                        condition=float(np.linalg.cond(A_p)))
    xi = np.linalg.solve(A_p, -P.T @ ss.B @ P_d)
    x = P @ xi
    residual = float(np.linalg.norm(ss.A @ x + ss.B @ P_d))
    scale = max(1.0, float(np.linalg.norm(ss.B @ P_d)))
    if residual > TOLERANCES['steady_residual'] * scale * max(1.0, float(np.linalg.norm(ss.A, 1))):
        raise SingularA("Steady-state residual too large", residual=residual)
    return x


def steady_frequencies(ss, x, P_d):
    """Frequency deviation of every machine and converter at state x"""
    omega = dict(zip(ss.graph.machines, x[ss.blocks['omega']]))
    omega.update(zip(ss.graph.converters, converter_frequencies(ss, x, P_d)))
    return omega


# ---------------------------------------------------------------------------
# Effective droops and quasi-synchronous steady state
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SourceDroop:
    node: str
    kind: str
    coefficient: float
    kappa: float
    scale: float


def effective_droops(graph, devices, gains, decomposition=None, reference_node=None):
    """
    Steady-state power response per unit of reference-subnet frequency for every responsive source.

    A source on ac subnet i responds with k sigma_i, a source on dc subnet j with k tau_j,
    so its effective droop is 1 / (k * scale).
    """
    decomposition = decomposition or decompose_subnetworks(graph)
    reference = 0
    if reference_node is not None and decomposition.ac_subnets:
        reference = decomposition.ac_index(reference_node)
    sigma, tau, conflict = subnet_scaling(decomposition, gains, reference)
    if conflict is not None:
        raise InconsistentDroop(f"No consistent frequency scaling through dc subnet dc{conflict + 1}",
                                subnet=f"dc{conflict + 1}")

    droops = []
    for node in graph.machines:
        source = devices.machines[node].source
        scale = sigma[decomposition.ac_index(node)]
        if isinstance(source, Governor) and source.k_g > 0:
            droops.append(_droop(node, 'governor', source.k_g, scale))
        elif isinstance(source, WindTurbine) and source.k_g + source.k_w > 0:
            droops.append(_droop(node, 'wind_turbine', source.k_g + source.k_w, scale))
    for node in graph.dc_nodes:
        source = devices.dc_nodes[node].source
        scale = tau[decomposition.dc_index(node)]
        if isinstance(source, ControllableDc) and source.k_g > 0:
            droops.append(_droop(node, 'dc_source', source.k_g, scale))
        elif isinstance(source, PvSource) and source.k_pv > 0:
            droops.append(_droop(node, 'pv', source.k_pv, scale))
    return droops


def _droop(node, kind, k, scale):
    coefficient = k * scale
    return SourceDroop(node=node, kind=kind, coefficient=coefficient, kappa=1.0 / coefficient, scale=scale)


def quasi_sync_frequency(kappas, P_d):
    """-sum(P_d) / D with D the sum of inverse effective droops"""
    kappas = [k.kappa if isinstance(k, SourceDroop) else float(k) for k in kappas]
    D = float(sum(1.0 / k for k in kappas if k > 0))
    if not D > 0:
        raise ZeroD("No source provides sustained frequency response")
    return -float(np.sum(P_d)) / D


def node_frequency_scales(graph, decomposition, gains, reference_node=None):
    """sigma of the ac subnet of every machine and converter"""
    reference = 0
    if reference_node is not None and decomposition.ac_subnets:
        reference = decomposition.ac_index(reference_node)
    sigma, _, conflict = subnet_scaling(decomposition, gains, reference)
    if conflict is not None:
        raise InconsistentDroop("No consistent frequency scaling", subnet=f"dc{conflict + 1}")
    return {node: sigma[decomposition.ac_index(node)] for node in graph.ac_nodes}


def quasi_sync_convergence(graph, devices, gains, loads, scales=GDC_SCALES, reference_node=None):
    """
    Full-model steady frequencies with dc conductances scaled, against the quasi-synchronous value.

    Returns rows (scale, omega at the reference subnet, max node error).
    """
    decomposition = decompose_subnetworks(graph)
    droops = effective_droops(graph, devices, gains, decomposition, reference_node)
    node_scales = node_frequency_scales(graph, decomposition, gains, reference_node)
    rows = []
    for factor in scales:
        scaled = scale_dc_conductances(graph, factor)
        ss = assemble_system(scaled, devices, gains)
        P_d = disturbance_vector(ss, loads)
        omega_qs = quasi_sync_frequency(droops, P_d)
        freqs = steady_frequencies(ss, steady_state(ss, P_d), P_d)
        error = max(abs(freqs[node] - node_scales[node] * omega_qs) for node in freqs)
        ref = reference_node or (graph.machines + graph.converters)[0]
        rows.append({'scale': factor, 'omega_ref': freqs[ref] / node_scales[ref],
                     'omega_quasi_sync': omega_qs, 'max_error': error})
    return rows


def source_power_increments(ss, x):
    """Sustained power change of every responsive source at state x"""
    devices = ss.devices
    omega = dict(zip(ss.graph.machines, x[ss.blocks['omega']]))
    v = dict(zip(ss.graph.dc_side_nodes, x[ss.blocks['v']]))
    p_r = dict(zip(ss.classification.r, x[ss.blocks['P_r']]))
    increments = {}
    for node in ss.graph.machines:
        source = devices.machines[node].source
        if isinstance(source, WindTurbine):
            increments[node] = -source.k_w * omega[node] + p_r.get(node, 0.0)
        elif isinstance(source, Governor):
            increments[node] = p_r.get(node, 0.0)
    for node in ss.graph.dc_nodes:
        source = devices.dc_nodes[node].source
        if isinstance(source, PvSource):
            increments[node] = -source.k_pv * v[node]
        elif isinstance(source, ControllableDc):
            increments[node] = p_r.get(node, 0.0)
    return increments


def droop_sharing(ss, x, droops):
    """Per-source share of the total sustained response against the share predicted by 1/kappa"""
    increments = source_power_increments(ss, x)
    total = sum(increments[d.node] for d in droops)
    D = sum(d.coefficient for d in droops)
    rows = []
    for d in droops:
        actual = increments[d.node] / total if total else 0.0
        expected = d.coefficient / D
        rows.append({'node': d.node, 'kind': d.kind, 'delta_P': increments[d.node], 'kappa': d.kappa,
                     'share': actual, 'expected_share': expected,
                     'deviation': abs(actual - expected) / expected if expected else 0.0})
    return rows


# ---------------------------------------------------------------------------
# Full report
# ---------------------------------------------------------------------------

@dataclass
class StabilityReport:
    name: str
    cond1: Verdict
    cond1_relaxed: Verdict
    cond2: Verdict
    cond3: Verdict
    cond5: Verdict
    spectrum: Spectrum = None
    certificate: object = None
    certificate_note: str = None
    dc_coupling: list = field(default_factory=list)
    droops: list = field(default_factory=list)
    tuning: list = field(default_factory=list)
    steady: dict = None
    errors: list = field(default_factory=list)
    relax_cond1: bool = False

    @property
    def verdicts(self):
        cond1 = self.cond1_relaxed if self.relax_cond1 else self.cond1
        return [cond1, self.cond2, self.cond3, self.cond5]

    @property
    def passed(self):
        certificate_ok = not (self.certificate_note or '').startswith('violated')
        return all(v.passed for v in self.verdicts) and certificate_ok and not self.errors

    def condition_table(self):
        rows = [{'condition': v.name, 'status': v.status, 'label': v.label or '',
                 'witness': '; '.join(str(w) for w in v.witness)}
                for v in [self.cond1, self.cond1_relaxed, self.cond2, self.cond3, self.cond5]]
        rows[1]['condition'] = 'cond1 (relaxed)'
        return pd.DataFrame(rows)

    def to_dict(self):
        return to_plain({
            'name': self.name,
            'passed': self.passed,
            'conditions': [v.to_dict() for v in (self.cond1, self.cond1_relaxed, self.cond2,
                                                 self.cond3, self.cond5)],
            'certificate': self.certificate.to_dict() if self.certificate else None,
            'certificate_note': self.certificate_note,
            'spectrum': self.spectrum.to_dict() if self.spectrum else None,
            'dc_coupling': self.dc_coupling,
            'droops': [{'node': d.node, 'kind': d.kind, 'kappa': d.kappa, 'coefficient': d.coefficient}
                       for d in self.droops],
            'tuning': [vars(a) for a in self.tuning],
            'steady': self.steady,
            'errors': self.errors,
        })

    def to_text(self):
        lines = [f"Stability report: {self.name}", '=' * 40, self.condition_table().to_string(index=False), '']
        if self.certificate is not None:
            lines.append(f"LaSalle certificate: min eig M = {self.certificate.min_eig_M:.3e}, "
                         f"max eig S = {self.certificate.max_eig_S:.3e}")
        if self.certificate_note:
            lines.append(f"LaSalle certificate: {self.certificate_note}")
        if self.spectrum is not None:
            lines.append(f"Spectrum: max real part {self.spectrum.max_real:.6e} "
                         f"({'stable' if self.spectrum.stable else 'not certified stable'})")
        if self.dc_coupling:
            lines += ['', pd.DataFrame([{k: v for k, v in row.items() if k != 'row_sums'}
                                        for row in self.dc_coupling]).to_string(index=False)]
        if self.droops:
            lines += ['', pd.DataFrame([{'node': d.node, 'kind': d.kind, 'kappa': d.kappa}
                                        for d in self.droops]).to_string(index=False)]
        if self.steady:
            lines += ['', f"Quasi-synchronous frequency: {self.steady.get('omega_quasi_sync')}"]
        for error in self.errors:
            lines.append(f"ERROR {error['error']}: {error['message']}")
        lines.append('')
        lines.append(f"Overall: {'PASS' if self.passed else 'FAIL'}")
        return '\n'.join(lines)


def analyze(graph, devices, gains, name='system', relax_cond1=False, n_minus_one=False,
            loads=(), delta_omega_max=None, delta_v_max=None, reference_node=None, certificate_samples=None):
    """Run every check on one system and gather a StabilityReport"""
    classification = classify_nodes(devices)
    decomposition = decompose_subnetworks(graph)
    log(f"🔍 Analyzing {name}")

    errors = []
    cond1 = check_cond1(decomposition, gains)
    cond1_relaxed = check_cond1(decomposition, gains, relax=True)
    try:
        cond2 = check_cond2(graph, devices, gains)
    except IsolatedDcNode as exc:
        cond2 = Verdict('cond2', False, witness=(exc.details.get('converter'),), label='isolated')
    cond3 = check_cond3(classification)
    cond5 = check_cond5(graph, decomposition, devices, n_minus_one=n_minus_one)
    report = StabilityReport(name=name, cond1=cond1, cond1_relaxed=cond1_relaxed, cond2=cond2, cond3=cond3,
                             cond5=cond5, relax_cond1=relax_cond1)

    ss = assemble_system(graph, devices, gains, classification)
    try:
        report.spectrum = spectrum(ss)
    except EigenFailure as exc:
        errors.append(exc.to_record())

    if cond1.passed:
        try:
            report.certificate = lasalle_certificate(ss, samples=certificate_samples)
            report.certificate_note = 'holds'
        except CertificateViolated as exc:
            report.certificate_note = f"violated ({exc.message})"
    else:
        report.certificate_note = 'not evaluated (k_omega differs inside a dc subnet)'

    report.dc_coupling = dc_coupling_bounds(graph, devices, gains, decomposition)
    if cond2.label != 'isolated':
        report.tuning = tuning_advisory(gains, cond2.details['bounds'], delta_omega_max, delta_v_max)

    try:
        report.droops = effective_droops(graph, devices, gains, decomposition, reference_node)
    except InconsistentDroop as exc:
        errors.append(exc.to_record())

    if loads:
        try:
            P_d = disturbance_vector(ss, loads)
            x = steady_state(ss, P_d)
            frequencies = steady_frequencies(ss, x, P_d)
            report.steady = {'frequencies': frequencies,
                             'state': dict(zip(ss.state_names, x))}
            if report.droops:
                report.steady['omega_quasi_sync'] = quasi_sync_frequency(report.droops, P_d)
                report.steady['sharing'] = droop_sharing(ss, x, report.droops)
        except HybridGridError as exc:
            errors.append(exc.to_record())

    report.errors = errors
    log(f"{'✅' if report.passed else '❌'} {name}: {'PASS' if report.passed else 'FAIL'}")
    return report
