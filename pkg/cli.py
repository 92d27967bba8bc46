#!/usr/bin/env python3
"""
Command-line entry point.

    python cli.py --scenario scenarios/fig8.json --command report --out results/

Exit status: 0 when every requested check passes, 1 when a check fails,
2 when a toolkit error stops the run (its record is printed).
"""

import argparse
import json
import sys
from dataclasses import dataclass, field
from pathlib import Path

from analysis import (analyze, effective_droops, node_frequency_scales, quasi_sync_convergence,
                      quasi_sync_frequency, spectrum, steady_frequencies, steady_state, to_plain)
from assembly import assemble_system, disturbance_vector, dump_matrices
from errors import HybridGridError, InconsistentDroop, ZeroD
from network import decompose_subnetworks
from scenario import load_scenario
from settings import log, set_verbose
from simulation import CONTROL_LAWS, metrics, simulate_linear, simulate_nonlinear
from visualization import (convergence_frame, droop_frame, metrics_frame, sharing_frame, spectrum_frame,
                           steady_frame, tuning_frame)

COMMANDS = ('check', 'eig', 'steady', 'simulate', 'report')
FORMATS = ('text', 'machine')


@dataclass
class RunResult:
    command: str
    passed: bool
    document: dict
    sections: list = field(default_factory=list)
    artifacts: dict = field(default_factory=dict)

    @property
    def exit_code(self):
        return 0 if self.passed else 1

    def to_text(self):
        return '\n\n'.join(self.sections) + '\n'

    def to_machine(self):
        return json.dumps(to_plain(self.document), indent=2, sort_keys=True) + '\n'

    def render(self, fmt):
        return self.to_machine() if fmt == 'machine' else self.to_text()


def run(command, scenario, n_minus_one=None, gdc_scale=1.0, step=None, t_end=None, nonlinear=False,
        control_law='dual_port'):
    """Execute one command on a loaded scenario; flags override the scenario's own options"""
    options = dict(scenario.analysis)
    if n_minus_one is not None:
        options['n_minus_one'] = n_minus_one
    sim_options = dict(scenario.simulation)
    if step is not None:
        sim_options['step'] = step
    if t_end is not None:
        sim_options['t_end'] = t_end

    graph = scenario.scaled_graph(gdc_scale)
    ss = assemble_system(graph, scenario.devices, scenario.gains)
    result = RunResult(command=command, passed=True,
                       document={'scenario': scenario.name, 'command': command, 'gdc_scale': gdc_scale})
    result.artifacts['matrices.txt'] = dump_matrices(ss)

    if command in ('check', 'report'):
        _check(result, scenario, graph, options)
    if command in ('eig', 'report'):
        _eig(result, ss, verdict=command == 'eig')
    if command in ('steady', 'report'):
        _steady(result, scenario, graph, ss, options)
    if command in ('simulate', 'report'):
        _simulate(result, scenario, graph, ss, options, sim_options, nonlinear, control_law)

    result.document['passed'] = result.passed
    result.sections.append(f"Overall: {'PASS' if result.passed else 'FAIL'}")
    return result


def _check(result, scenario, graph, options):
    limits = options.get('k_omega_max') or {}
    report = analyze(graph, scenario.devices, scenario.gains, name=scenario.name,
                     relax_cond1=options['relax_cond1'], n_minus_one=options['n_minus_one'],
                     loads=scenario.loads, delta_omega_max=limits.get('delta_omega_max'),
                     delta_v_max=limits.get('delta_v_max'), reference_node=options['reference_node'])
    result.passed = result.passed and report.passed
    result.document['report'] = report.to_dict()
    text = report.to_text()
    if report.tuning:
        text += '\n\nTuning advisory\n' + tuning_frame(report.tuning).to_string(index=False)
    if report.steady and report.steady.get('sharing'):
        text += '\n\nDroop sharing\n' + sharing_frame(report.steady['sharing']).to_string(index=False)
    result.sections.append(text)


def _eig(result, ss, verdict):
    spec = spectrum(ss)
    if verdict:
        result.passed = result.passed and spec.stable
    result.document['spectrum'] = {**spec.to_dict(), 'states': ss.state_names,
                                   'restricted': [[float(z.real), float(z.imag)] for z in spec.restricted]}
    lines = [f"Spectrum of T^-1 A ({ss.n} states)",
             spectrum_frame(spec).to_string(index=False),
             f"Max real part on the cycle-free subspace: {spec.max_real:.6e} "
             f"({'stable' if spec.stable else 'not certified stable'})"]
    result.sections.append('\n'.join(lines))


def _droops_or_none(scenario, graph, options):
    try:
        return effective_droops(graph, scenario.devices, scenario.gains,
                                reference_node=options['reference_node'])
    except InconsistentDroop:
        return None


def _quasi_sync_or_none(droops, P_d):
    if not droops:
        return None
    try:
        return quasi_sync_frequency(droops, P_d)
    except ZeroD:
        return None


def _steady(result, scenario, graph, ss, options):
    P_d = disturbance_vector(ss, scenario.loads)
    x = steady_state(ss, P_d)
    frequencies = steady_frequencies(ss, x, P_d)
    droops = _droops_or_none(scenario, graph, options)
    omega_qs = _quasi_sync_or_none(droops, P_d)

    document = {'state': dict(zip(ss.state_names, x)), 'frequencies': frequencies,
                'omega_quasi_sync': omega_qs}
    lines = ["Steady state after all scheduled disturbances"]
    scales = None
    if droops is not None:
        scales = node_frequency_scales(graph, decompose_subnetworks(graph), scenario.gains,
                                       options['reference_node'])
    lines.append(steady_frame(frequencies, scales).to_string(index=False))
    if omega_qs is not None:
        lines.append(f"Quasi-synchronous frequency: {omega_qs:.9e}")
        lines.append('Effective droops\n' + droop_frame(droops).to_string(index=False))
        rows = quasi_sync_convergence(graph, scenario.devices, scenario.gains, scenario.loads,
                                      scales=options['gdc_scales'], reference_node=options['reference_node'])
        document['convergence'] = rows
        lines.append('dc conductance sweep\n' + convergence_frame(rows).to_string(index=False))
    result.document['steady'] = document
    result.sections.append('\n'.join(lines))


def _simulate(result, scenario, graph, ss, options, sim_options, nonlinear, control_law):
    h, t_end = sim_options['step'], sim_options['t_end']
    if nonlinear:
        trajectory = simulate_nonlinear(graph, scenario.devices, scenario.gains, scenario.schedule, h=h,
                                        t_end=t_end, base_loads=scenario.base_loads, control_law=control_law)
    else:
        trajectory = simulate_linear(ss, scenario.schedule, h=h, t_end=t_end)
    monitored = sim_options['monitored'] or trajectory.frequency_nodes()
    freq_metrics = metrics(trajectory, monitored)
    omega_qs = _quasi_sync_or_none(_droops_or_none(scenario, graph, options),
                                   disturbance_vector(ss, scenario.loads))

    result.artifacts['trajectory.csv'] = trajectory.to_csv()
    result.document['simulation'] = {
        'model': trajectory.metadata.get('model'),
        'control_law': trajectory.metadata.get('control_law'),
        'step': h, 't_end': t_end,
        'metrics': {'window': freq_metrics.window, 'rocof': freq_metrics.rocof,
                    'nadir': freq_metrics.nadir, 'settling': freq_metrics.settling},
        'omega_quasi_sync': omega_qs,
    }
    lines = [f"Simulation ({trajectory.metadata.get('model')}, h={h:g} s, t_end={t_end:g} s)",
             metrics_frame(freq_metrics).to_string(index=False)]
    if omega_qs is not None:
        lines.append(f"Quasi-synchronous frequency: {omega_qs:.9e}")
    result.sections.append('\n'.join(lines))


def write_outputs(out_dir, scenario, result, fmt):
    """Normalized scenario, report document and any trajectory / matrix files"""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / 'scenario.json').write_text(scenario.dump())
    (out / ('report.json' if fmt == 'machine' else 'report.txt')).write_text(result.render(fmt))
    for name, content in result.artifacts.items():
        (out / name).write_text(content)
    log(f"✅ Wrote {2 + len(result.artifacts)} files to {out}")


def build_parser():
    parser = argparse.ArgumentParser(description="Stability analysis and simulation of hybrid ac/dc systems "
                                                 "under dual-port grid-forming control")
    parser.add_argument('--scenario', required=True, help="scenario JSON file or bundled fixture name")
    parser.add_argument('--command', choices=COMMANDS, default='report')
    parser.add_argument('--out', help="directory for the normalized scenario, report and trajectory files")
    parser.add_argument('--n-minus-one', action='store_true', default=None,
                        help="re-check the ac topology rule after every single node or line deletion")
    parser.add_argument('--gdc-scale', type=float, default=1.0, help="multiply every dc conductance")
    parser.add_argument('--step', type=float, help="integration step in seconds")
    parser.add_argument('--t-end', type=float, help="simulated time in seconds")
    parser.add_argument('--nonlinear', action='store_true', help="simulate the nonlinear plant")
    parser.add_argument('--control-law', choices=CONTROL_LAWS, default='dual_port')
    parser.add_argument('--format', choices=FORMATS, default='text')
    parser.add_argument('--verbose', action='store_true', help="print diagnostics to stderr")
    return parser


def main(argv=None, stdout=None):
    args = build_parser().parse_args(argv)
    stdout = stdout or sys.stdout
    if args.verbose:
        set_verbose(True)
    try:
        scenario = load_scenario(args.scenario)
        result = run(args.command, scenario, n_minus_one=args.n_minus_one, gdc_scale=args.gdc_scale,
                     step=args.step, t_end=args.t_end, nonlinear=args.nonlinear, control_law=args.control_law)
        if args.out:
            write_outputs(args.out, scenario, result, args.format)
    except HybridGridError as exc:
        record = exc.to_record()
        if args.format == 'machine':
            stdout.write(json.dumps(record, indent=2, sort_keys=True) + '\n')
        else:
            stdout.write(f"ERROR {record['error']}: {record['message']}\n")
            for key, value in record['details'].items():
                stdout.write(f"  {key}: {value}\n")
        return 2
    stdout.write(result.render(args.format))
    return result.exit_code


if __name__ == '__main__':
    sys.exit(main())
