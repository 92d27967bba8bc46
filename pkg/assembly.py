"""
Closed-loop linear model T dx/dt = A x + B P_d of a hybrid ac/dc system under
dual-port grid-forming control.

State ordering: eta (ac edge angle differences), omega (machine speeds),
v (converter and dc node voltages), P_r (responsive source powers),
P_zs (zero-sensitivity source powers).
"""

import io
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg

from devices import classify_nodes
from errors import DimensionMismatch, MissingGains, NoSuchTerminal
from network import network_matrices
from settings import log

BLOCK_ORDER = ('eta', 'omega', 'v', 'P_r', 'P_zs')


@dataclass(eq=False)
class StateSpace:
    T: np.ndarray
    A: np.ndarray
    B: np.ndarray
    blocks: dict
    state_names: list
    disturbance_names: list
    freq_state_map: np.ndarray
    freq_input_map: np.ndarray
    graph: object
    devices: object
    gains: dict
    classification: object
    matrices: object
    extras: dict = field(default_factory=dict)

    @property
    def n(self):
        return self.A.shape[0]

    @property
    def n_d(self):
        return self.B.shape[1]

    def block(self, name):
        return self.blocks[name]

    def index_of(self, state_name):
        return self.state_names.index(state_name)


def _slices(sizes):
    blocks, start = {}, 0
    for name in BLOCK_ORDER:
        blocks[name] = slice(start, start + sizes[name])
        start += sizes[name]
    return blocks, start


def _place(target, rows, cols, value, name):
    expected = (rows.stop - rows.start, cols.stop - cols.start)
    value = np.asarray(value, dtype=float)
    if value.shape != expected:
        raise DimensionMismatch(f"Block {name} has shape {value.shape}, expected {expected}",
                                block=name, shape=list(value.shape), expected=list(expected))
    target[rows, cols] = value


def assemble_system(graph, devices, gains, classification=None):
    """
    Build (T, A, B) from the graph, device set and per-converter gains.

    Converter frequencies are not states; freq_state_map and freq_input_map give
    omega_c = freq_state_map @ x + freq_input_map @ P_d.
    """
    missing = [c for c in graph.converters if c not in gains]
    if missing:
        raise MissingGains(f"No control gains for converter(s) {', '.join(missing)}", converters=missing)

    classification = classification or classify_nodes(devices)
    nm = network_matrices(graph, classification)
    S = nm.selectors

    machines, converters, dc_nodes = graph.machines, graph.converters, graph.dc_nodes
    dc_side = graph.dc_side_nodes
    sizes = {'eta': len(graph.ac_edges), 'omega': len(machines), 'v': len(dc_side),
             'P_r': len(classification.r), 'P_zs': len(classification.zs)}
    blocks, n = _slices(sizes)
    n_ac, n_dc_side = len(graph.ac_nodes), len(dc_side)
    n_d = n_ac + n_dc_side

    K_p = np.diag([gains[c].k_p for c in converters])
    K_omega = np.diag([gains[c].k_omega for c in converters])

    dc_records = [devices.converters[node] for node in converters] + [devices.dc_nodes[node] for node in dc_nodes]
    c_all = np.array([record.c for record in dc_records])
    c_conv = c_all[:len(converters)]
    J = np.array([devices.machines[m].inertia for m in machines])

    k_w = np.array([devices.machines[m].source.k_w for m in classification.w])
    k_pv = np.array([devices.dc_nodes[d].source.k_pv for d in classification.pv])
    k_g_r = np.array([devices.source_of(node).k_g for node in classification.r])
    T_r = np.array([devices.source_of(node).T_g for node in classification.r])
    T_zs = np.array([devices.source_of(node).T_g for node in classification.zs])

    BW = nm.B_ac @ nm.W_ac
    B_cac = S['cac'] @ nm.B_ac
    B_mac = S['ac'] @ nm.B_ac
    C_conv_inv = np.diag(1.0 / c_conv) if len(c_conv) else np.zeros((0, 0))
    B_eta = -B_cac.T @ K_p @ C_conv_inv @ S['cdc']

    A = np.zeros((n, n))
    e, w, v, r, z = (blocks[name] for name in BLOCK_ORDER)

    _place(A, e, e, -B_cac.T @ K_p @ C_conv_inv @ S['cac'] @ BW, 'A_eta_eta')
    _place(A, e, w, B_mac.T, 'A_eta_omega')
    _place(A, e, v, B_cac.T @ K_omega @ S['cdc'] + B_eta @ nm.L_dc, 'A_eta_v')

    _place(A, w, e, -S['ac'] @ BW, 'A_omega_eta')
    _place(A, w, w, -S['w'].T @ np.diag(k_w) @ S['w'], 'A_omega_omega')
    _place(A, w, r, S['r_ac'].T, 'A_omega_Pr')
    _place(A, w, z, S['zs_ac'].T, 'A_omega_Pzs')

    pv_block = S['dc'].T @ S['pv'].T @ np.diag(k_pv) @ S['pv'] @ S['dc']
    _place(A, v, e, -S['cdc'].T @ S['cac'] @ BW, 'A_v_eta')
    _place(A, v, v, -nm.L_dc - pv_block, 'A_v_v')
    _place(A, v, r, S['dc'].T @ S['r_dc'].T, 'A_v_Pr')
    _place(A, v, z, S['dc'].T @ S['zs_dc'].T, 'A_v_Pzs')

    _place(A, r, w, -np.diag(k_g_r) @ S['r_ac'], 'A_Pr_omega')
    _place(A, r, v, -np.diag(k_g_r) @ S['r_dc'] @ S['dc'], 'A_Pr_v')
    _place(A, r, r, -np.eye(sizes['P_r']), 'A_Pr_Pr')
    _place(A, z, z, -np.eye(sizes['P_zs']), 'A_Pzs_Pzs')

    ac_cols, dc_cols = slice(0, n_ac), slice(n_ac, n_d)
    B = np.zeros((n, n_d))
    _place(B, e, ac_cols, B_eta @ S['cdc'].T @ S['cac'], 'B_eta_ac')
    _place(B, e, dc_cols, B_eta, 'B_eta_dc')
    _place(B, w, ac_cols, -S['ac'], 'B_omega_ac')
    _place(B, v, ac_cols, -S['cdc'].T @ S['cac'], 'B_v_ac')
    _place(B, v, dc_cols, -np.eye(n_dc_side), 'B_v_dc')

    T = scipy.linalg.block_diag(np.eye(sizes['eta']), np.diag(J), np.diag(c_all),
                                np.diag(T_r), np.diag(T_zs))
    if T.shape != (n, n):
        raise DimensionMismatch("T does not match the state dimension", shape=list(T.shape), expected=[n, n])

    # omega_c = K_p dv_c/dt + K_omega v_c, with dv/dt read off the v rows
    v_rows_x = (A[v, :].T / c_all).T if n_dc_side else np.zeros((0, n))
    v_rows_d = (B[v, :].T / c_all).T if n_dc_side else np.zeros((0, n_d))
    freq_state_map = K_p @ S['cdc'] @ v_rows_x
    freq_state_map[:, v] += K_omega @ S['cdc']
    freq_input_map = K_p @ S['cdc'] @ v_rows_d

    state_names = ([f"eta[{edge.name}]" for edge in graph.ac_edges]
                   + [f"omega[{m}]" for m in machines]
                   + [f"v[{node}]" for node in dc_side]
                   + [f"P_r[{node}]" for node in classification.r]
                   + [f"P_zs[{node}]" for node in classification.zs])
    disturbance_names = ([f"Pd_ac[{node}]" for node in graph.ac_nodes]
                         + [f"Pd_dc[{node}]" for node in dc_side])

    log(f"📊 Assembled state space: n={n}, n_d={n_d}, blocks={sizes}")
    return StateSpace(T=T, A=A, B=B, blocks=blocks, state_names=state_names,
                      disturbance_names=disturbance_names, freq_state_map=freq_state_map,
                      freq_input_map=freq_input_map, graph=graph, devices=devices, gains=dict(gains),
                      classification=classification, matrices=nm)


def disturbance_vector(ss, loads):
    """
    Constant disturbance vector P_d from (node, terminal, delta_P) items.

    terminal is 'ac' (machines and converters) or 'dc' (converters and dc nodes).
    Repeated entries for the same terminal add up.
    """
    graph = ss.graph
    ac_index = {node: k for k, node in enumerate(graph.ac_nodes)}
    dc_index = {node: len(graph.ac_nodes) + k for k, node in enumerate(graph.dc_side_nodes)}
    P_d = np.zeros(ss.n_d)
    for item in loads:
        node, terminal, delta = _load_fields(item)
        index = ac_index if terminal == 'ac' else dc_index if terminal == 'dc' else None
        if index is None or node not in index:
            raise NoSuchTerminal(f"Node '{node}' has no {terminal} terminal", node=node, terminal=terminal)
        P_d[index[node]] += delta
    return P_d


def _load_fields(item):
    if isinstance(item, dict):
        return str(item['node']), item['terminal'], float(item['delta_P'])
    node, terminal, delta = item
    return str(node), terminal, float(delta)


def state_derivative(ss, x, P_d):
    """dx/dt = T^-1 (A x + B P_d); T is diagonal"""
    return (ss.A @ x + ss.B @ P_d) / np.diag(ss.T)


def converter_frequencies(ss, x, P_d):
    """Converter frequency deviations from the PD law applied to the state derivative"""
    return ss.freq_state_map @ x + ss.freq_input_map @ P_d


def dynamics_matrix(ss):
    """T^-1 A"""
    return ss.A / np.diag(ss.T)[:, None]


def without_zs(ss):
    """(T, A, B, kept indices) with the decoupled zero-sensitivity source states removed"""
    z = ss.blocks['P_zs']
    keep = [k for k in range(ss.n) if not z.start <= k < z.stop]
    return (ss.T[np.ix_(keep, keep)], ss.A[np.ix_(keep, keep)], ss.B[keep, :], keep)


def cycle_free_basis(ss, drop_zs=False):
    """
    Orthonormal basis P of the invariant subspace where eta lies in the range of B_ac^T.

    Angle differences around a meshed ac cycle are not observable and only add
    zero eigenvalues; analysis works on x = P xi.
    """
    e = ss.blocks['eta']
    n_eta = e.stop - e.start
    if n_eta:
        phi = scipy.linalg.orth(ss.matrices.B_ac.T)
    else:
        phi = np.zeros((0, 0))
    rest = ss.n - n_eta
    if drop_zs:
        rest -= ss.blocks['P_zs'].stop - ss.blocks['P_zs'].start
    return scipy.linalg.block_diag(phi, np.eye(rest)) if n_eta else np.eye(rest)


def projected_system(ss, drop_zs=False):
    """(T_p, A_p, B_p, P) of the dynamics restricted to the cycle-free subspace"""
    if drop_zs:
        T, A, B, _ = without_zs(ss)
    else:
        T, A, B = ss.T, ss.A, ss.B
    P = cycle_free_basis(ss, drop_zs=drop_zs)
    return P.T @ T @ P, P.T @ A @ P, P.T @ B, P


def dump_matrices(ss, stream=None):
    """Write T, A and B as plain text with a header naming the state ordering"""
    own = stream is None
    stream = io.StringIO() if own else stream
    stream.write(f"# states ({ss.n}): {' '.join(ss.state_names)}\n")
    stream.write(f"# disturbances ({ss.n_d}): {' '.join(ss.disturbance_names)}\n")
    for name, matrix in (('T', ss.T), ('A', ss.A), ('B', ss.B)):
        stream.write(f"# {name} {matrix.shape[0]} x {matrix.shape[1]}\n")
        if matrix.size:
            np.savetxt(stream, matrix, fmt='%.17g')
    return stream.getvalue() if own else None
