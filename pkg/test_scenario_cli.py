import unittest
import io
import json
import sys
import os
import tempfile

# Add the current directory to the path to import our modules
sys.path.append(os.path.dirname(os.path.abspath(__file__)))

from analysis import analyze
from cli import main, run
from devices import PvSource
from errors import ParseError, ValidationError
from scenario import available_fixtures, load_scenario, parse_scenario, try_load

FIXTURES = ('cond2-violation', 'fig2', 'fig7-left', 'fig7-right', 'fig8', 'fig8-pv-mpp', 'fig8-wt-mpp',
            'hvdc-p2p', 'sc-chain')

STAR = {
    'name': 'star',
    'nodes': [{'id': '1', 'kind': 'machine'}, {'id': '2', 'kind': 'machine'}, {'id': '3', 'kind': 'machine'},
              {'id': 'hub', 'kind': 'ac_bus'}],
    'ac_edges': [{'from': '1', 'to': 'hub', 'b': 3.0}, {'from': '2', 'to': 'hub', 'b': 3.0},
                 {'from': '3', 'to': 'hub', 'b': 3.0}],
    'devices': {node: {'J': 5.0, 'governor': {'T_g': 1.0, 'k_g': 20.0}} for node in ('1', '2', '3')},
    'disturbances': [{'time': 1.0, 'node': 'hub', 'terminal': 'ac', 'delta_P': 0.3}],
    'base_loads': {'hub': {'ac': 0.6}},
}


def _with(**changes):
    document = json.loads(json.dumps(STAR))
    document.update(changes)
    return json.dumps(document)


def _main(*argv):
    stdout = io.StringIO()
    code = main(list(argv), stdout=stdout)
    return code, stdout.getvalue()


class TestScenarioFiles(unittest.TestCase):
    """Loading, validation and normalization of scenario documents"""

    def test_bundled_fixtures(self):
        self.assertEqual(tuple(available_fixtures()), FIXTURES)
        for name in FIXTURES:
            with self.subTest(fixture=name):
                scenario = load_scenario(name)
                self.assertEqual(scenario.name, name)
                self.assertGreater(len(scenario.graph.node_ids), 0)
                again = parse_scenario(scenario.dump())
                self.assertEqual(again.data, scenario.data)

    def test_defaults(self):
        scenario = parse_scenario(_with())
        self.assertEqual(scenario.analysis['relax_cond1'], False)
        self.assertEqual(scenario.analysis['gdc_scales'], [10.0, 100.0, 1000.0])
        self.assertEqual(scenario.simulation['step'], 1e-3)
        self.assertEqual(scenario.data['devices']['1']['omega_star'], 1.0)
        self.assertEqual(scenario.data['base'], {'S_b': 100.0, 'f_b': 50.0})

    def test_parse_error_reports_line(self):
        with self.assertRaises(ParseError) as ctx:
            parse_scenario('{\n  "name": "broken",\n  nodes\n}')
        self.assertEqual(ctx.exception.details['line'], 3)

    def test_validation_errors(self):
        converter = {'nodes': [{'id': '1', 'kind': 'machine'}, {'id': '2', 'kind': 'converter'},
                               {'id': '3', 'kind': 'dc'}],
                     'ac_edges': [{'from': '1', 'to': '2', 'b': 5.0}],
                     'dc_edges': [{'from': '2', 'to': '3', 'g': 5.0}],
                     'devices': {'1': {'J': 5.0}, '2': {'C': 1.0}, '3': {'C': 1.0}}}
        cases = [
            ({**converter, 'gains': {'2': {'k_p': 0.001}}}, {'node': '2', 'gain': 'k_omega'}),
            ({**converter, 'gains': {}}, {'node': '2'}),
            ({**converter, 'gains': {'2': {'k_p': 0.001, 'k_omega': -0.1}}}, {'node': '2', 'gain': 'k_omega'}),
            ({**STAR, 'extra': 1}, {'field': 'extra'}),
            ({**STAR, 'devices': {'1': {'J': 5.0}, '2': {'J': 5.0}}}, {'node': '3'}),
            ({**STAR, 'ac_edges': [{'from': '1', 'to': '9', 'b': 1.0}]}, {'node': '9'}),
            ({**STAR, 'disturbances': [{'node': '1', 'terminal': 'dc', 'delta_P': 0.1}]}, {'node': '1'}),
        ]
        for document, expected in cases:
            with self.subTest(expected=expected):
                with self.assertRaises(ValidationError) as ctx:
                    parse_scenario(json.dumps(document))
                for key, value in expected.items():
                    self.assertEqual(ctx.exception.details[key], value)

    def test_passive_bus_elimination(self):
        scenario = parse_scenario(_with())
        self.assertEqual(scenario.reduced['eliminated'], ['hub'])
        self.assertEqual(scenario.graph.node_ids, ('1', '2', '3'))
        weights = sorted(edge.weight for edge in scenario.graph.ac_edges)
        for weight in weights:
            self.assertAlmostEqual(weight, 1.0)
        self.assertEqual(len(weights), 3)
        for node, terminal, delta in scenario.loads:
            self.assertEqual(terminal, 'ac')
            self.assertAlmostEqual(delta, 0.1)
        for node in ('1', '2', '3'):
            self.assertAlmostEqual(scenario.base_loads[node]['ac'], 0.2)

    def test_case_study_network(self):
        scenario = load_scenario('fig2')
        graph, devices = scenario.graph, scenario.devices
        self.assertEqual(scenario.reduced['eliminated'], ['b16', 'b37'])
        self.assertNotIn('b16', graph.node_ids)
        hvdc = [e for e in graph.dc_edges if devices.converters.get(e.i) and devices.converters[e.i].role == 'hvdc']
        self.assertEqual(len(hvdc), 3)
        pv = [node for node in graph.dc_nodes if isinstance(devices.source_of(node), PvSource)]
        self.assertEqual(len(pv), 5)
        self.assertAlmostEqual(sum(delta for _, _, delta in scenario.loads), 0.375)

    def test_try_load(self):
        scenario, record = try_load('no-such-scenario.json')
        self.assertIsNone(scenario)
        self.assertEqual(record['error'], 'ParseError')
        scenario, record = try_load('fig8')
        self.assertIsNone(record)
        self.assertIs(scenario.scaled_graph(1), scenario.graph)


class TestCommandLine(unittest.TestCase):
    """Exit status, output formats and written files"""

    def test_passing_check(self):
        code, output = _main('--scenario', 'fig8', '--command', 'check')
        self.assertEqual(code, 0)
        self.assertIn('Overall: PASS', output)

    def test_failing_check(self):
        code, output = _main('--scenario', 'cond2-violation', '--command', 'check', '--format', 'machine')
        self.assertEqual(code, 1)
        document = json.loads(output)
        self.assertFalse(document['passed'])
        cond2 = [c for c in document['report']['conditions'] if c['name'] == 'cond2'][0]
        self.assertEqual(cond2['witness'], ['2'])

    def test_missing_file(self):
        code, output = _main('--scenario', 'no-such-scenario.json', '--format', 'machine')
        self.assertEqual(code, 2)
        self.assertEqual(json.loads(output)['error'], 'ParseError')

    def test_invalid_scenario(self):
        with tempfile.TemporaryDirectory() as tmp:
            path = os.path.join(tmp, 'bad.json')
            with open(path, 'w') as handle:
                handle.write(_with(gains={'1': {'k_p': 0.1, 'k_omega': 0.1}}))
            code, output = _main('--scenario', path)
        self.assertEqual(code, 2)
        self.assertTrue(output.startswith('ERROR ValidationError'))

    def test_deterministic_output(self):
        first = _main('--scenario', 'sc-chain', '--command', 'check', '--format', 'machine')
        second = _main('--scenario', 'sc-chain', '--command', 'check', '--format', 'machine')
        self.assertEqual(first, second)
        self.assertEqual(first[0], 1)

    def test_output_directory(self):
        with tempfile.TemporaryDirectory() as tmp:
            code, _ = _main('--scenario', 'sc-chain', '--command', 'simulate', '--step', '0.01',
                            '--t-end', '1', '--out', tmp)
            self.assertEqual(code, 0)
            self.assertEqual(sorted(os.listdir(tmp)),
                             ['matrices.txt', 'report.txt', 'scenario.json', 'trajectory.csv'])
            with open(os.path.join(tmp, 'trajectory.csv')) as handle:
                self.assertEqual(len(handle.read().strip().split('\n')), 102)
            self.assertEqual(load_scenario(os.path.join(tmp, 'scenario.json')).data, load_scenario('sc-chain').data)

    def test_steady_command(self):
        result = run('steady', load_scenario('fig8'))
        rows = result.document['steady']['convergence']
        self.assertEqual([row['scale'] for row in rows], [10.0, 100.0, 1000.0])
        self.assertLess(result.document['steady']['omega_quasi_sync'], 0.0)

    def test_case_study_smoke(self):
        scenario = load_scenario('fig2')
        check = run('check', scenario)
        self.assertIn(check.exit_code, (0, 1))
        simulation = run('simulate', scenario, step=0.01, t_end=6.0)
        self.assertIn('SG1', simulation.document['simulation']['metrics']['rocof'])

        report = analyze(scenario.scaled_graph(1000.0), scenario.devices, scenario.gains, relax_cond1=True,
                         loads=scenario.loads, reference_node='SG1')
        for row in report.steady['sharing']:
            with self.subTest(node=row['node']):
                self.assertLess(row['deviation'], 0.01)


if __name__ == '__main__':
    # Run with verbose output to see test progress
    unittest.main(verbosity=2, buffer=True)
