import unittest
import numpy as np
import sys
import os

# Add the current directory to the path to import our modules
sys.path.append(os.path.dirname(os.path.abspath(__file__)))

from devices import Classification
from errors import (ClassificationMismatch, DanglingEdge, Disconnected, DuplicateId, InvalidEdge,
                    KindMismatch, SingularInteriorBlock)
from network import (Edge, build_graph, decompose_subnetworks, edges_from_laplacian, incidence, kron_reduce,
                     laplacian, network_matrices, node_key, scale_dc_conductances, selector, sort_ids)
from random_systems import random_laplacian
from scenario import load_scenario


def _grounded_solve(L, injections, ground):
    """Node voltages of L v = p with v[ground] = 0"""
    keep = [k for k in range(L.shape[0]) if k != ground]
    v = np.zeros(L.shape[0])
    v[keep] = np.linalg.solve(L[np.ix_(keep, keep)], injections[keep])
    return v


class TestGraphConstruction(unittest.TestCase):
    """Validation and ordering of the typed hybrid graph"""

    def setUp(self):
        self.description = {
            'nodes': [{'id': '10', 'kind': 'dc'}, {'id': '2', 'kind': 'converter'},
                      {'id': 'sg', 'kind': 'machine'}, {'id': '1', 'kind': 'machine'}],
            'ac_edges': [{'from': '2', 'to': '1', 'b': 1.0}, {'from': '1', 'to': '2', 'b': 2.0},
                         {'from': 'sg', 'to': '2', 'b': 4.0}],
            'dc_edges': [{'from': '10', 'to': '2', 'g': 5.0}],
        }

    def test_natural_ordering(self):
        """Numeric ids sort numerically and ahead of named ids"""
        self.assertEqual(sort_ids(['10', 'b', '2', 'a', '1']), ['1', '2', '10', 'a', 'b'])
        self.assertLess(node_key('9'), node_key('10'))
        self.assertLess(node_key('99'), node_key('a'))

    def test_node_sets_follow_ordering(self):
        graph = build_graph(self.description)
        self.assertEqual(graph.node_ids, ('1', '2', '10', 'sg'))
        self.assertEqual(graph.machines, ('1', 'sg'))
        self.assertEqual(graph.converters, ('2',))
        self.assertEqual(graph.dc_nodes, ('10',))
        self.assertEqual(graph.ac_nodes, ('1', 'sg', '2'))
        self.assertEqual(graph.dc_side_nodes, ('2', '10'))

    def test_parallel_edges_are_merged(self):
        graph = build_graph(self.description)
        self.assertEqual(graph.ac_edges[0], Edge('1', '2', 3.0))
        self.assertEqual(graph.ac_edges[1], Edge('2', 'sg', 4.0))
        self.assertEqual(graph.dc_edges, (Edge('2', '10', 5.0),))

    def test_invalid_descriptions(self):
        cases = [
            ('duplicate id', DuplicateId,
             {'nodes': [{'id': '1', 'kind': 'machine'}, {'id': '1', 'kind': 'dc'}]}),
            ('unknown kind', KindMismatch,
             {'nodes': [{'id': '1', 'kind': 'battery'}]}),
            ('ac edge on a dc node', KindMismatch,
             {'nodes': [{'id': '1', 'kind': 'machine'}, {'id': '2', 'kind': 'dc'}],
              'ac_edges': [{'from': '1', 'to': '2', 'b': 1.0}]}),
            ('dc edge on a machine', KindMismatch,
             {'nodes': [{'id': '1', 'kind': 'machine'}, {'id': '2', 'kind': 'converter'}],
              'dc_edges': [{'from': '1', 'to': '2', 'g': 1.0}]}),
            ('dangling edge', DanglingEdge,
             {'nodes': [{'id': '1', 'kind': 'machine'}],
              'ac_edges': [{'from': '1', 'to': '7', 'b': 1.0}]}),
            ('self loop', InvalidEdge,
             {'nodes': [{'id': '1', 'kind': 'machine'}],
              'ac_edges': [{'from': '1', 'to': '1', 'b': 1.0}]}),
            ('zero susceptance', InvalidEdge,
             {'nodes': [{'id': '1', 'kind': 'machine'}, {'id': '2', 'kind': 'machine'}],
              'ac_edges': [{'from': '1', 'to': '2', 'b': 0.0}]}),
            ('two islands', Disconnected,
             {'nodes': [{'id': '1', 'kind': 'machine'}, {'id': '2', 'kind': 'machine'}]}),
            ('empty', Disconnected, {'nodes': []}),
        ]
        for label, error, description in cases:
            with self.subTest(case=label):
                with self.assertRaises(error):
                    build_graph(description)

    def test_disconnected_reports_components(self):
        with self.assertRaises(Disconnected) as context:
            build_graph({'nodes': [{'id': '1', 'kind': 'machine'}, {'id': '2', 'kind': 'machine'},
                                   {'id': '3', 'kind': 'machine'}],
                         'ac_edges': [{'from': '1', 'to': '2', 'b': 1.0}]})
        record = context.exception.to_record()
        self.assertEqual(record['error'], 'Disconnected')
        self.assertEqual(sorted(record['details']['components']), ['1,2', '3'])

    def test_dc_scaling_leaves_ac_untouched(self):
        graph = build_graph(self.description)
        scaled = scale_dc_conductances(graph, 1000.0)
        self.assertEqual(scaled.ac_edges, graph.ac_edges)
        self.assertAlmostEqual(scaled.dc_edges[0].weight, 5000.0)
        self.assertAlmostEqual(graph.dc_edges[0].weight, 5.0)


class TestMatrices(unittest.TestCase):
    """Incidence, Laplacian and selector matrices"""

    def test_incidence_orientation(self):
        edges = [Edge('1', '3', 2.0), Edge('2', '3', 1.0)]
        B = incidence(['1', '2', '3'], edges)
        np.testing.assert_array_equal(B, [[1, 0], [0, 1], [-1, -1]])
        W = np.diag([2.0, 1.0])
        np.testing.assert_allclose(B @ W @ B.T, laplacian(['1', '2', '3'], edges))

    def test_edges_from_laplacian(self):
        edges = [Edge('1', '2', 1.5), Edge('1', '10', 0.25), Edge('2', '10', 3.0)]
        ids = ['1', '2', '10']
        recovered = edges_from_laplacian(laplacian(ids, edges), ids)
        self.assertEqual([(e.i, e.j) for e in recovered], [('1', '2'), ('1', '10'), ('2', '10')])
        np.testing.assert_allclose([e.weight for e in recovered], [1.5, 0.25, 3.0])

    def test_selector(self):
        S = selector(['b', 'c'], ['a', 'b', 'c'])
        np.testing.assert_array_equal(S, [[0, 1, 0], [0, 0, 1]])

    def test_dc_laplacian_psd_with_subnet_nullspace(self):
        graph = load_scenario('fig8').graph
        nm = network_matrices(graph, Classification())
        L = nm.L_dc
        np.testing.assert_allclose(L, L.T)
        self.assertGreaterEqual(np.min(np.linalg.eigvalsh(L)), -1e-10)
        for subnet in decompose_subnetworks(graph).dc_subnets:
            with self.subTest(subnet=subnet.nodes):
                indicator = np.array([1.0 if node in subnet.nodes else 0.0 for node in graph.dc_side_nodes])
                np.testing.assert_allclose(L @ indicator, 0.0, atol=1e-12)
        self.assertEqual(nm.B_ac.shape, (len(graph.ac_nodes), len(graph.ac_edges)))
        self.assertEqual(nm.orientation, ('1-2', '1-3', '4-5'))

    def test_source_selectors_are_complementary(self):
        graph = build_graph({'nodes': [{'id': '1', 'kind': 'machine'}, {'id': '2', 'kind': 'converter'},
                                       {'id': '3', 'kind': 'dc'}],
                             'ac_edges': [{'from': '1', 'to': '2', 'b': 1.0}],
                             'dc_edges': [{'from': '2', 'to': '3', 'g': 1.0}]})
        nm = network_matrices(graph, Classification(r=('1', '3')))
        stacked = np.hstack([nm['r_ac'], nm['r_dc']])
        np.testing.assert_array_equal(stacked.sum(axis=1), [1.0, 1.0])

    def test_classification_must_match_graph(self):
        graph = build_graph({'nodes': [{'id': '1', 'kind': 'machine'}, {'id': '2', 'kind': 'converter'}],
                             'ac_edges': [{'from': '1', 'to': '2', 'b': 1.0}]})
        for classification in (Classification(r=('9',)), Classification(pv=('1',)), Classification(w=('2',))):
            with self.subTest(classification=classification):
                with self.assertRaises(ClassificationMismatch):
                    network_matrices(graph, classification)


class TestKronReduction(unittest.TestCase):
    """Schur-complement elimination of interior nodes"""

    def test_star_reduces_to_triangle(self):
        w = 3.0
        ids = ['c', 'x', 'y', 'z']
        L = laplacian(ids, [Edge('c', leaf, w) for leaf in ('x', 'y', 'z')])
        result = kron_reduce(L, [1, 2, 3])
        self.assertEqual(result.eliminated, (0,))
        for edge in edges_from_laplacian(result.reduced, ['x', 'y', 'z']):
            self.assertAlmostEqual(edge.weight, w / 3)
        np.testing.assert_allclose(result.disturbance_map[:, 0], [1 / 3] * 3)
        np.testing.assert_allclose(result.disturbance_map[:, 1:], np.eye(3))

    def test_nothing_to_eliminate(self):
        L = random_laplacian(np.random.default_rng(3), 4)
        result = kron_reduce(L, range(4))
        np.testing.assert_array_equal(result.reduced, L)
        self.assertEqual(result.eliminated, ())

    def test_retained_solution_matches_full_solve(self):
        """Reduced network reproduces retained-node voltages of the full network"""
        rng = np.random.default_rng(2024)
        for trial in range(50):
            n = int(rng.integers(3, 11))
            L = random_laplacian(rng, n)
            size = int(rng.integers(2, n))
            retained = sorted(int(k) for k in rng.choice(n, size=size, replace=False))
            result = kron_reduce(L, retained)

            injections = np.zeros(n)
            injections[retained] = rng.standard_normal(size)
            injections[retained[0]] -= injections.sum()
            full = _grounded_solve(L, injections, retained[0])
            reduced = _grounded_solve(result.reduced, injections[retained], 0)

            with self.subTest(trial=trial, n=n, retained=retained):
                scale = max(1.0, float(np.max(np.abs(full))))
                self.assertLessEqual(float(np.max(np.abs(full[retained] - reduced))), 1e-10 * scale)

    def test_disturbance_map_moves_interior_injections(self):
        rng = np.random.default_rng(11)
        for trial in range(20):
            n = int(rng.integers(4, 9))
            L = random_laplacian(rng, n)
            retained = sorted(int(k) for k in rng.choice(n, size=2, replace=False))
            result = kron_reduce(L, retained)
            injections = rng.standard_normal(n)
            injections -= injections.mean()
            full = _grounded_solve(L, injections, retained[0])
            mapped = result.disturbance_map @ injections
            reduced = _grounded_solve(result.reduced, mapped, 0)
            with self.subTest(trial=trial):
                self.assertAlmostEqual(mapped.sum(), 0.0, places=10)
                np.testing.assert_allclose(reduced, full[retained], rtol=0, atol=1e-10 * max(1.0, np.max(np.abs(full))))

    def test_singular_interior_block(self):
        # node 2 has no edges, so eliminating it divides by zero
        L = laplacian(['0', '1', '2'], [Edge('0', '1', 1.0)])
        with self.assertRaises(SingularInteriorBlock):
            kron_reduce(L, [0, 1])
        with self.assertRaises(SingularInteriorBlock):
            kron_reduce(random_laplacian(np.random.default_rng(0), 3), [])


class TestDecomposition(unittest.TestCase):
    """ac and dc subnetworks of the three-bus case study"""

    def test_case_study_subnets(self):
        graph = load_scenario('fig8').graph
        decomposition = decompose_subnetworks(graph)
        self.assertEqual([s.nodes for s in decomposition.ac_subnets], [('1', '2', '3'), ('4', '5')])
        self.assertEqual([s.nodes for s in decomposition.dc_subnets], [('2', '6'), ('3', '4')])
        self.assertEqual(decomposition.ac_index('5'), 1)
        self.assertEqual(decomposition.dc_index('4'), 1)
        for converter in graph.converters:
            with self.subTest(converter=converter):
                self.assertEqual(sum(s.contains(converter) for s in decomposition.ac_subnets), 1)
                self.assertEqual(sum(s.contains(converter) for s in decomposition.dc_subnets), 1)


if __name__ == '__main__':
    # Run with verbose output to see test progress
    unittest.main(verbosity=2, buffer=True)
