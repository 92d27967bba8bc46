import unittest
import numpy as np
import sys
import os
import tempfile

# Add the current directory to the path to import our modules
sys.path.append(os.path.dirname(os.path.abspath(__file__)))

from analysis import lasalle_certificate, spectrum, steady_state
from assembly import assemble_system, disturbance_vector, without_zs
from control import ControlGains
from errors import MissingDroop, ValidationError, WindowTooLong
from scenario import load_scenario
from simulation import (DisturbanceSchedule, NonlinearPlant, Trajectory, max_deviation, metrics, replay_phase,
                        simulate_linear, simulate_nonlinear)

DEVIATION_PREFIXES = ('omega[', 'omega_c[', 'v[')


def _ramp(slope, h=1e-3, t_end=2.0, offset=0.0):
    times = np.arange(int(round(t_end / h)) + 1) * h
    values = (offset - slope * times)[:, None]
    return Trajectory(times=times, values=values, names=['omega[1]'], step=h)


def _linear(name):
    scenario = load_scenario(name)
    return scenario, assemble_system(scenario.graph, scenario.devices, scenario.gains)


class TestMetrics(unittest.TestCase):
    """RoCoF, nadir and settling value on synthetic trajectories"""

    def test_ramp_rocof(self):
        result = metrics(_ramp(0.4), nodes=['1'])
        self.assertAlmostEqual(result.rocof['1'], 0.4, delta=1e-9)
        self.assertAlmostEqual(result.window, 0.3, delta=1e-12)
        self.assertAlmostEqual(result.nadir['1'], -0.8, delta=1e-12)

    def test_constant_signal(self):
        result = metrics(_ramp(0.0, offset=0.02))
        self.assertEqual(result.rocof['1'], 0.0)
        self.assertAlmostEqual(result.settling['1'], 0.02)
        self.assertEqual(list(result.to_frame()['node']), ['1'])

    def test_nadir_is_minimum(self):
        h = 1e-3
        times = np.arange(3001) * h
        omega = -0.01 * np.exp(-times) * np.sin(4.0 * times)
        traj = Trajectory(times=times, values=omega[:, None], names=['omega_c[2]'], step=h)
        result = metrics(traj)
        self.assertEqual(result.nadir['2'], float(np.min(omega)))
        self.assertAlmostEqual(result.settling['2'], float(np.mean(omega[-151:])))

    def test_window_checks(self):
        traj = _ramp(0.1, t_end=1.0)
        for window in (5.0, 0.0, -0.3):
            with self.subTest(window=window):
                with self.assertRaises(WindowTooLong):
                    metrics(traj, window=window)


class TestSchedule(unittest.TestCase):
    """Event alignment on the integration grid"""

    def test_step_alignment(self):
        schedule = DisturbanceSchedule.from_records([(1.0, '4', 'ac', 0.1), {'time': 0.5, 'node': 2,
                                                                            'terminal': 'dc', 'delta_P': -0.05}])
        self.assertEqual([e.time for e in schedule.events], [0.5, 1.0])
        self.assertEqual(schedule.breakpoints(1e-3), [500, 1000])
        self.assertEqual(schedule.active(999, 1e-3), [('2', 'dc', -0.05)])
        self.assertEqual(len(schedule.active(1000, 1e-3)), 2)
        self.assertEqual(DisturbanceSchedule.step_index(0.0005, 1e-3), 1)

    def test_negative_time(self):
        with self.assertRaises(ValidationError):
            DisturbanceSchedule.from_records([(-1.0, '1', 'ac', 0.1)])


class TestLinearSimulation(unittest.TestCase):
    """RK4 integration of the assembled model"""

    def test_zero_disturbance(self):
        _, ss = _linear('fig8')
        traj = simulate_linear(ss, h=1e-2, t_end=1.0)
        self.assertEqual(float(np.max(np.abs(traj.values))), 0.0)
        self.assertEqual(traj.names[-3:], ['omega_c[2]', 'omega_c[3]', 'omega_c[4]'])

    def test_schedule_applies_at_event(self):
        scenario, ss = _linear('hvdc-p2p')
        traj = simulate_linear(ss, scenario.schedule, h=1e-2, t_end=2.0)
        before = traj.values[traj.times < 1.0 - 1e-9]
        self.assertEqual(float(np.max(np.abs(before))), 0.0)
        self.assertLess(traj.channel('omega[4]')[-1], 0.0)

    def test_converges_to_steady_state(self):
        scenario, ss = _linear('hvdc-p2p')
        P_d = disturbance_vector(ss, scenario.loads)
        x_ss = steady_state(ss, P_d)
        t_end = min(400.0, 30.0 / abs(spectrum(ss).max_real))
        traj = simulate_linear(ss, P_d=P_d, h=1e-2, t_end=t_end)
        final = traj.values[-1, :ss.n]
        self.assertLess(float(np.max(np.abs(final - x_ss))), 1e-6 * max(1.0, float(np.max(np.abs(x_ss)))))

    def test_fourth_order_accuracy(self):
        scenario, ss = _linear('hvdc-p2p')
        P_d = disturbance_vector(ss, scenario.loads)
        reference = simulate_linear(ss, P_d=P_d, h=1.25e-3, t_end=1.0).values[-1]
        coarse = simulate_linear(ss, P_d=P_d, h=2e-2, t_end=1.0).values[-1]
        fine = simulate_linear(ss, P_d=P_d, h=1e-2, t_end=1.0).values[-1]
        ratio = np.max(np.abs(coarse - reference)) / np.max(np.abs(fine - reference))
        self.assertGreater(ratio, 12.0)
        self.assertLess(ratio, 20.0)

    def test_sampled_phase_matches_converter_frequency(self):
        """The derivative-free controller's phase advances at the PD-law frequency"""
        scenario, ss = _linear('hvdc-p2p')
        h = 1e-3
        traj = simulate_linear(ss, scenario.schedule, h=h, t_end=2.0)
        window = slice(int(round(1.1 / h)), len(traj.times) - 1)
        for converter, theta in replay_phase(traj, scenario.gains).items():
            with self.subTest(converter=converter):
                slope = (theta[2:] - theta[:-2]) / (2 * h)
                omega = traj.channel(f"omega_c[{converter}]")[1:-1]
                scale = float(np.max(np.abs(omega[window])))
                self.assertGreater(scale, 0.0)
                self.assertLess(float(np.max(np.abs(slope[window] - omega[window]))), 1e-2 * scale)

    def test_energy_function_never_increases(self):
        """Unforced trajectories from random states descend the certificate's quadratic form"""
        _, ss = _linear('sc-chain')
        certificate = lasalle_certificate(ss)
        keep = without_zs(ss)[3]
        rng = np.random.default_rng(7)
        for trial in range(3):
            x0 = rng.standard_normal(ss.n)
            traj = simulate_linear(ss, x0=x0, P_d=np.zeros(ss.n_d), h=1e-3, t_end=3.0)
            states = traj.values[:, :ss.n][:, keep]
            V = np.einsum('ti,ij,tj->t', states, certificate.M, states)
            with self.subTest(trial=trial):
                self.assertGreater(V[0], 0.0)
                self.assertLessEqual(float(np.max(np.diff(V))), 1e-10 * V[0])
                self.assertLess(V[-1], V[0])

    def test_csv_export(self):
        _, ss = _linear('sc-chain')
        traj = simulate_linear(ss, P_d=np.zeros(ss.n_d), h=0.5, t_end=1.0)
        text = traj.to_csv()
        lines = text.strip().split('\n')
        self.assertEqual(lines[0].split(',')[0], 'time')
        self.assertEqual(len(lines), 4)
        with tempfile.TemporaryDirectory() as tmp:
            path = os.path.join(tmp, 'trajectory.csv')
            traj.to_csv(path)
            with open(path) as handle:
                self.assertEqual(handle.read(), text)


class TestNonlinearSimulation(unittest.TestCase):
    """Validation plant with the derivative-free converter control"""

    def setUp(self):
        self.scenario = load_scenario('fig8')

    def _run(self, schedule=None, h=1e-2, t_end=1.0, **kwargs):
        s = self.scenario
        return simulate_nonlinear(s.graph, s.devices, s.gains, schedule, h=h, t_end=t_end,
                                  base_loads=s.base_loads, **kwargs)

    def test_operating_point_is_equilibrium(self):
        traj = self._run()
        for name in traj.names:
            if name.startswith(DEVIATION_PREFIXES):
                with self.subTest(channel=name):
                    self.assertLess(float(np.max(np.abs(traj.channel(name)))), 1e-8)
        self.assertIn('gamma[2]', traj.names)

    def test_matches_linear_model_to_second_order(self):
        """Linear and nonlinear responses differ by a quantity quadratic in the step size"""
        ss = assemble_system(self.scenario.graph, self.scenario.devices, self.scenario.gains)
        deviations = []
        for epsilon in (1e-3, 1e-2):
            schedule = DisturbanceSchedule.from_records([(0.0, '1', 'ac', epsilon)])
            linear = simulate_linear(ss, schedule, h=2e-3, t_end=2.0)
            nonlinear = self._run(schedule, h=2e-3, t_end=2.0)
            deviations.append(max_deviation(linear, nonlinear, DEVIATION_PREFIXES))
        ratio = deviations[1] / deviations[0]
        self.assertGreaterEqual(ratio, 50.0)
        self.assertLessEqual(ratio, 200.0)

    def test_phase_offset_leaves_response_unchanged(self):
        """A constant converter phase offset only rotates the operating point"""
        schedule = DisturbanceSchedule.from_records([(0.2, '1', 'ac', 0.05)])
        baseline = self._run(schedule, h=1e-2, t_end=2.0)
        shifted = self._run(schedule, h=1e-2, t_end=2.0, delta_theta={'2': 0.3})
        self.assertLess(max_deviation(baseline, shifted, ('omega[', 'v[')), 1e-8)
        self.assertGreater(float(np.max(np.abs(baseline.channel('omega[1]')))), 1e-6)

    def test_renewables_raise_output_after_load_step(self):
        s = self.scenario
        schedule = DisturbanceSchedule.from_records([(0.0, '1', 'ac', 0.075)])
        final = self._run(schedule, h=5e-3, t_end=20.0).final()
        turbine = s.devices.machines['5'].source
        pv = s.devices.dc_nodes['6'].source
        v_star = s.devices.dc_nodes['6'].v_star
        wt_increment = turbine.power(turbine.omega_star + final['omega[5]'], final['beta[5]']) - turbine.P_star
        pv_increment = pv.power(v_star + final['v[6]'], v_star) - pv.P_star
        self.assertLess(final['omega[5]'], 0.0)
        self.assertLess(final['v[6]'], 0.0)
        self.assertGreater(wt_increment, 0.0)
        self.assertGreater(pv_increment, 0.0)

    def test_power_balancing_needs_droop(self):
        with self.assertRaises(MissingDroop):
            self._run(control_law='power_balancing')

    def test_power_balancing_equilibrium(self):
        s = self.scenario
        gains = {c: ControlGains(k_p=g.k_p, k_omega=g.k_omega, m_p=0.05) for c, g in s.gains.items()}
        traj = simulate_nonlinear(s.graph, s.devices, gains, h=1e-2, t_end=0.5, base_loads=s.base_loads,
                                  control_law='power_balancing')
        self.assertIn('theta_c[2]', traj.names)
        self.assertLess(float(np.max(np.abs(traj.channel('omega_c[2]')))), 1e-8)

    def test_unknown_control_law(self):
        s = self.scenario
        with self.assertRaises(ValidationError):
            NonlinearPlant(s.graph, s.devices, s.gains, control_law='droop')


if __name__ == '__main__':
    # Run with verbose output to see test progress
    unittest.main(verbosity=2, buffer=True)
