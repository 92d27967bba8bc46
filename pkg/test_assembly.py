import unittest
import numpy as np
import sys
import os

# Add the current directory to the path to import our modules
sys.path.append(os.path.dirname(os.path.abspath(__file__)))

from assembly import (BLOCK_ORDER, assemble_system, converter_frequencies, cycle_free_basis, disturbance_vector,
                      dump_matrices, dynamics_matrix, projected_system, state_derivative, without_zs)
from control import ControlGains
from devices import PvSource, WindTurbine, build_device_set, classify_nodes
from errors import MissingGains, NoSuchTerminal
from network import build_graph
from random_systems import random_system
from scenario import load_scenario
from simulation import simulate_linear


class ScalarOracle:
    """
    Node-by-node device equations, integrated in absolute angles.

    Machines carry (theta, omega), converters an integrator gamma with
    theta_c = k_p v_c + k_omega gamma_c, every dc-side node a voltage and every
    lag source its power. Flows are the linearized ac and dc power flows.
    """

    def __init__(self, graph, devices, gains):
        self.graph, self.devices, self.gains = graph, devices, gains
        classification = classify_nodes(devices)
        self.r, self.zs = list(classification.r), list(classification.zs)
        self.machines = list(graph.machines)
        self.converters = list(graph.converters)
        self.dc_side = list(graph.dc_side_nodes)
        sizes = [('theta', len(self.machines)), ('omega', len(self.machines)), ('gamma', len(self.converters)),
                 ('v', len(self.dc_side)), ('P_r', len(self.r)), ('P_zs', len(self.zs))]
        self.slices, start = {}, 0
        for name, size in sizes:
            self.slices[name] = slice(start, start + size)
            start += size
        self.n = start

    def unpack(self, z):
        s = {name: dict(zip(ids, z[self.slices[name]])) for name, ids in (
            ('theta', self.machines), ('omega', self.machines), ('gamma', self.converters),
            ('v', self.dc_side), ('P_r', self.r), ('P_zs', self.zs))}
        angles = dict(s['theta'])
        for c in self.converters:
            angles[c] = self.gains[c].k_p * s['v'][c] + self.gains[c].k_omega * s['gamma'][c]
        return s, angles

    def to_model(self, z):
        """Model state [eta, omega, v, P_r, P_zs] of an oracle state"""
        s, angles = self.unpack(z)
        eta = [angles[e.i] - angles[e.j] for e in self.graph.ac_edges]
        return np.array(eta + [s['omega'][m] for m in self.machines] + [s['v'][n] for n in self.dc_side]
                        + [s['P_r'][n] for n in self.r] + [s['P_zs'][n] for n in self.zs])

    def _flows(self, s, angles):
        ac = {node: 0.0 for node in self.machines + self.converters}
        for e in self.graph.ac_edges:
            flow = e.weight * (angles[e.i] - angles[e.j])
            ac[e.i] += flow
            ac[e.j] -= flow
        dc = {node: 0.0 for node in self.dc_side}
        for e in self.graph.dc_edges:
            flow = e.weight * (s['v'][e.i] - s['v'][e.j])
            dc[e.i] += flow
            dc[e.j] -= flow
        return ac, dc

    def _source_power(self, node, s):
        power = s['P_r'].get(node, 0.0) + s['P_zs'].get(node, 0.0)
        source = self.devices.source_of(node)
        if isinstance(source, WindTurbine):
            power -= source.k_w * s['omega'][node]
        if isinstance(source, PvSource):
            power -= source.k_pv * s['v'][node]
        return power

    def derivative(self, z, load_ac, load_dc):
        s, angles = self.unpack(z)
        ac, dc = self._flows(s, angles)
        d = {name: {} for name in self.slices}
        for m in self.machines:
            d['theta'][m] = s['omega'][m]
            inertia = self.devices.machines[m].inertia
            d['omega'][m] = (self._source_power(m, s) - ac[m] - load_ac.get(m, 0.0)) / inertia
        for c in self.converters:
            d['gamma'][c] = s['v'][c]
            d['v'][c] = (-ac[c] - dc[c] - load_ac.get(c, 0.0) - load_dc.get(c, 0.0)) / self.devices.converters[c].c
        for node in self.graph.dc_nodes:
            d['v'][node] = (self._source_power(node, s) - dc[node] - load_dc.get(node, 0.0)) / self.devices.dc_nodes[node].c
        for node in self.r:
            source = self.devices.source_of(node)
            signal = s['omega'][node] if node in self.devices.machines else s['v'][node]
            d['P_r'][node] = (-source.k_g * signal - s['P_r'][node]) / source.T_g
        for node in self.zs:
            d['P_zs'][node] = -s['P_zs'][node] / self.devices.source_of(node).T_g
        return np.array([d[name][node] for name, ids in (
            ('theta', self.machines), ('omega', self.machines), ('gamma', self.converters),
            ('v', self.dc_side), ('P_r', self.r), ('P_zs', self.zs)) for node in ids])

    def converter_frequency(self, z, load_ac, load_dc):
        s, _ = self.unpack(z)
        d = self.derivative(z, load_ac, load_dc)[self.slices['v']]
        rates = dict(zip(self.dc_side, d))
        return np.array([self.gains[c].k_p * rates[c] + self.gains[c].k_omega * s['v'][c] for c in self.converters])

    def integrate(self, z0, load_ac, load_dc, h, steps):
        z = np.array(z0, dtype=float)
        states = [z]
        for _ in range(steps):
            k1 = self.derivative(z, load_ac, load_dc)
            k2 = self.derivative(z + 0.5 * h * k1, load_ac, load_dc)
            k3 = self.derivative(z + 0.5 * h * k2, load_ac, load_dc)
            k4 = self.derivative(z + h * k3, load_ac, load_dc)
            z = z + (h / 6) * (k1 + 2 * k2 + 2 * k3 + k4)
            states.append(z)
        return states


class TestScalarEquivalence(unittest.TestCase):
    """Assembled (T, A, B) against direct integration of the node equations"""

    def test_random_systems_match_node_equations(self):
        rng = np.random.default_rng(7)
        h, t_end = 1e-2, 10.0
        steps = int(round(t_end / h))
        for trial in range(100):
            graph, devices, gains = random_system(rng)
            ss = assemble_system(graph, devices, gains)
            oracle = ScalarOracle(graph, devices, gains)

            load_ac = {node: float(rng.uniform(-0.1, 0.1)) for node in graph.ac_nodes}
            load_dc = {node: float(rng.uniform(-0.1, 0.1)) for node in graph.dc_side_nodes}
            loads = ([(node, 'ac', value) for node, value in load_ac.items()]
                     + [(node, 'dc', value) for node, value in load_dc.items()])
            z0 = 0.01 * rng.standard_normal(oracle.n)

            states = oracle.integrate(z0, load_ac, load_dc, h, steps)
            expected = np.array([oracle.to_model(z) for z in states])
            trajectory = simulate_linear(ss, x0=oracle.to_model(z0), h=h, t_end=t_end,
                                         P_d=disturbance_vector(ss, loads))
            actual = trajectory.values[:, :ss.n]

            with self.subTest(trial=trial, nodes=graph.node_ids):
                scale = max(1.0, float(np.max(np.abs(expected))))
                self.assertLessEqual(float(np.max(np.abs(actual - expected))), 1e-8 * scale)
                for step in (0, steps // 2, steps):
                    freqs = oracle.converter_frequency(states[step], load_ac, load_dc)
                    np.testing.assert_allclose(trajectory.values[step, ss.n:], freqs, rtol=0, atol=1e-8 * scale)


class TestAssembly(unittest.TestCase):
    """Shapes, ordering and helpers of the closed-loop model"""

    def setUp(self):
        self.scenario = load_scenario('fig8')
        self.ss = assemble_system(self.scenario.graph, self.scenario.devices, self.scenario.gains)

    def test_case_study_dimensions(self):
        ss = self.ss
        # 3 ac edges, 2 machines, 4 dc-side voltages, governor and pitch lags
        sizes = {name: ss.blocks[name].stop - ss.blocks[name].start for name in BLOCK_ORDER}
        self.assertEqual(sizes, {'eta': 3, 'omega': 2, 'v': 4, 'P_r': 2, 'P_zs': 0})
        self.assertEqual(ss.T.shape, (11, 11))
        self.assertEqual(ss.B.shape, (11, 9))
        self.assertEqual(ss.state_names[:3], ['eta[1-2]', 'eta[1-3]', 'eta[4-5]'])
        self.assertEqual(ss.disturbance_names[0], 'Pd_ac[1]')
        self.assertEqual(ss.disturbance_names[-1], 'Pd_dc[6]')
        self.assertEqual(ss.index_of('v[6]'), 8)
        np.testing.assert_array_equal(np.diag(ss.T)[:3], np.ones(3))

    def test_block_sparsity(self):
        ss, b = self.ss, self.ss.blocks
        # machines see dc voltages only through the converters' ac ports
        np.testing.assert_array_equal(ss.A[b['omega'], b['v']], 0.0)
        np.testing.assert_array_equal(ss.A[b['P_r'], b['eta']], 0.0)
        np.testing.assert_array_equal(ss.A[b['P_r'], b['P_r']], -np.eye(2))

    def test_disturbance_vector(self):
        P_d = disturbance_vector(self.ss, [('1', 'ac', 0.075), ('1', 'ac', 0.025), ('6', 'dc', -0.1)])
        self.assertAlmostEqual(P_d[self.ss.disturbance_names.index('Pd_ac[1]')], 0.1)
        self.assertAlmostEqual(P_d[self.ss.disturbance_names.index('Pd_dc[6]')], -0.1)
        self.assertAlmostEqual(float(np.sum(np.abs(P_d))), 0.2)
        P_d = disturbance_vector(self.ss, [{'node': '2', 'terminal': 'dc', 'delta_P': 0.05}])
        self.assertAlmostEqual(P_d[self.ss.disturbance_names.index('Pd_dc[2]')], 0.05)

    def test_no_such_terminal(self):
        for load in (('6', 'ac', 0.1), ('1', 'dc', 0.1), ('99', 'ac', 0.1), ('1', 'dq', 0.1)):
            with self.subTest(load=load):
                with self.assertRaises(NoSuchTerminal):
                    disturbance_vector(self.ss, [load])

    def test_missing_gains(self):
        gains = dict(self.scenario.gains)
        gains.pop('3')
        with self.assertRaises(MissingGains) as context:
            assemble_system(self.scenario.graph, self.scenario.devices, gains)
        self.assertEqual(context.exception.details['converters'], ['3'])

    def test_derivative_and_dynamics_agree(self):
        rng = np.random.default_rng(1)
        x = rng.standard_normal(self.ss.n)
        P_d = rng.standard_normal(self.ss.n_d)
        np.testing.assert_allclose(state_derivative(self.ss, x, P_d),
                                   dynamics_matrix(self.ss) @ x + np.linalg.solve(self.ss.T, self.ss.B @ P_d))

    def test_converter_frequency_at_rest(self):
        x = np.zeros(self.ss.n)
        x[self.ss.index_of('v[2]')] = 0.01
        freqs = converter_frequencies(self.ss, x, np.zeros(self.ss.n_d))
        # v[2] drives node 2 through k_omega and the dc flow towards node 6
        gain = self.scenario.gains['2']
        self.assertAlmostEqual(freqs[0], gain.k_omega * 0.01 + gain.k_p * (-50.0 * 0.01) / 1.0)

    def test_cycle_free_basis(self):
        graph = build_graph({'nodes': [{'id': str(k), 'kind': 'machine'} for k in (1, 2, 3)],
                             'ac_edges': [{'from': '1', 'to': '2', 'b': 1.0}, {'from': '2', 'to': '3', 'b': 1.0},
                                          {'from': '1', 'to': '3', 'b': 1.0}]})
        devices = build_device_set(graph, {str(k): {'J': 2.0, 'governor': {'T_g': 1.0, 'k_g': 10.0}}
                                           for k in (1, 2, 3)})
        ss = assemble_system(graph, devices, {})
        P = cycle_free_basis(ss)
        # one cycle in the triangle removes one angle direction
        self.assertEqual(P.shape, (ss.n, ss.n - 1))
        np.testing.assert_allclose(P.T @ P, np.eye(ss.n - 1), atol=1e-12)
        T_p, A_p, B_p, _ = projected_system(ss)
        self.assertEqual(A_p.shape, (ss.n - 1, ss.n - 1))
        self.assertEqual(B_p.shape, (ss.n - 1, ss.n_d))

    def test_zero_sensitivity_states_are_dropped(self):
        graph = build_graph({'nodes': [{'id': '1', 'kind': 'machine'}, {'id': '2', 'kind': 'machine'}],
                             'ac_edges': [{'from': '1', 'to': '2', 'b': 5.0}]})
        devices = build_device_set(graph, {'1': {'J': 10.0, 'governor': {'T_g': 1.0, 'k_g': 20.0}},
                                           '2': {'J': 5.0, 'governor': {'T_g': 0.5, 'k_g': 0.0}}})
        ss = assemble_system(graph, devices, {})
        self.assertEqual(ss.state_names[-1], 'P_zs[2]')
        T, A, B, keep = without_zs(ss)
        self.assertEqual(len(keep), ss.n - 1)
        eigenvalues = np.linalg.eigvals(dynamics_matrix(ss))
        self.assertTrue(np.any(np.isclose(eigenvalues, -2.0)))

    def test_dump_matrices(self):
        text = dump_matrices(self.ss)
        self.assertTrue(text.startswith('# states (11): eta[1-2]'))
        self.assertIn('# A 11 x 11', text)
        self.assertIn('# B 11 x 9', text)
        self.assertEqual(len(text.splitlines()), 2 + 3 + 11 + 11 + 11)

    def test_model_is_deterministic(self):
        again = assemble_system(self.scenario.graph, self.scenario.devices, self.scenario.gains)
        self.assertEqual(dump_matrices(again), dump_matrices(self.ss))


if __name__ == '__main__':
    # Run with verbose output to see test progress
    unittest.main(verbosity=2, buffer=True)
