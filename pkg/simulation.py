"""
Time-domain simulation: fixed-step RK4 integration of the linear model, a nonlinear
validation plant with the derivative-free converter control, and frequency metrics.
"""

from dataclasses import dataclass, field

import numpy as np
import pandas as pd

from assembly import converter_frequencies, disturbance_vector
from control import pi_phase, pd_frequency, power_balancing_frequency
from devices import ControllableDc, Governor, PvSource, WindTurbine
from errors import InitializationFailed, MissingDroop, NonFiniteState, ValidationError, WindowTooLong
from network import decompose_subnetworks, incidence
from settings import SIM_DEFAULTS, SOLVER_LIMITS, TOLERANCES, log

CONTROL_LAWS = ('dual_port', 'power_balancing')


def RK4(x, u, f, h):
    """One classical Runge-Kutta step of dx/dt = f(x, u) with u held constant"""
    k1 = f(x, u)
    k2 = f(x + 0.5 * h * k1, u)
    k3 = f(x + 0.5 * h * k2, u)
    k4 = f(x + h * k3, u)
    return x + (h / 6) * (k1 + 2 * k2 + 2 * k3 + k4)


# ---------------------------------------------------------------------------
# Disturbance schedules and trajectories
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Event:
    time: float
    node: str
    terminal: str
    delta_P: float


@dataclass(frozen=True)
class DisturbanceSchedule:
    """Piecewise-constant load steps; each event adds delta_P from its time onward"""
    events: tuple = ()

    @classmethod
    def from_records(cls, records):
        events = []
        for record in records:
            if isinstance(record, Event):
                events.append(record)
            elif isinstance(record, dict):
                events.append(Event(float(record.get('time', 0.0)), str(record['node']),
                                    record['terminal'], float(record['delta_P'])))
            else:
                time, node, terminal, delta = record
                events.append(Event(float(time), str(node), terminal, float(delta)))
        if any(event.time < 0 for event in events):
            raise ValidationError("Disturbance times must be non-negative")
        return cls(tuple(sorted(events, key=lambda event: event.time)))

    @staticmethod
    def step_index(time, h):
        """First integration step at or after the event time"""
        return int(np.ceil(time / h - 1e-9))

    def active(self, step, h):
        """Loads (node, terminal, delta_P) in effect during the given step"""
        return [(e.node, e.terminal, e.delta_P) for e in self.events if self.step_index(e.time, h) <= step]

    def breakpoints(self, h):
        return sorted({self.step_index(e.time, h) for e in self.events})

    def final_loads(self):
        return [(e.node, e.terminal, e.delta_P) for e in self.events]


@dataclass
class Trajectory:
    times: np.ndarray
    values: np.ndarray
    names: list
    step: float
    metadata: dict = field(default_factory=dict)

    def channel(self, name):
        try:
            return self.values[:, self.names.index(name)]
        except ValueError:
            raise KeyError(name)

    def frequency(self, node):
        """Machine speed or converter frequency deviation of a node"""
        if f"omega[{node}]" in self.names:
            return self.channel(f"omega[{node}]")
        return self.channel(f"omega_c[{node}]")

    def frequency_nodes(self):
        return [name[name.index('[') + 1:-1] for name in self.names
                if name.startswith('omega[') or name.startswith('omega_c[')]

    def final(self):
        return dict(zip(self.names, self.values[-1]))

    def to_frame(self):
        frame = pd.DataFrame(self.values, columns=self.names)
        frame.insert(0, 'time', self.times)
        return frame

    def to_csv(self, path=None):
        return self.to_frame().to_csv(path, index=False, float_format='%.12g', lineterminator='\n')


def _check_finite(x, step, time):
    if not np.all(np.isfinite(x)):
        raise NonFiniteState(f"State became non-finite at step {step} (t={time:g} s)", step=step, time=time)


def _time_grid(h, t_end):
    if not h > 0:
        raise ValidationError("Step size must be positive")
    steps = int(round(t_end / h))
    return steps, np.arange(steps + 1) * h


# ---------------------------------------------------------------------------
# Linear model
# ---------------------------------------------------------------------------

def simulate_linear(ss, schedule=None, x0=None, h=None, t_end=None, P_d=None):
    """
    Fixed-step RK4 of T dx/dt = A x + B P_d(t).

    Either a DisturbanceSchedule or a constant P_d vector may be given.
    Channels are the states followed by converter frequencies omega_c[...].
    """
    h = SIM_DEFAULTS['step'] if h is None else h
    t_end = SIM_DEFAULTS['t_end'] if t_end is None else t_end
    steps, times = _time_grid(h, t_end)
    t_diag = np.diag(ss.T)
    A_tilde = ss.A / t_diag[:, None]
    B_tilde = ss.B / t_diag[:, None]

    def f(x, u):
        return A_tilde @ x + u

    schedule = schedule or DisturbanceSchedule()
    constant = np.zeros(ss.n_d) if P_d is None else np.asarray(P_d, dtype=float)
    breakpoints = set(schedule.breakpoints(h))

    def disturbance_at(step):
        return constant + disturbance_vector(ss, schedule.active(step, h))

    x = np.zeros(ss.n) if x0 is None else np.array(x0, dtype=float)
    n_c = len(ss.graph.converters)
    values = np.empty((steps + 1, ss.n + n_c))
    current = disturbance_at(0)
    u = B_tilde @ current
    for step in range(steps + 1):
        if step in breakpoints:
            current = disturbance_at(step)
            u = B_tilde @ current
        values[step, :ss.n] = x
        values[step, ss.n:] = converter_frequencies(ss, x, current)
        if step == steps:
            break
        x = RK4(x, u, f, h)
        _check_finite(x, step + 1, times[step + 1])

    names = list(ss.state_names) + [f"omega_c[{c}]" for c in ss.graph.converters]
    log(f"📊 Linear simulation: {steps} steps of {h:g} s")
    return Trajectory(times=times, values=values, names=names, step=h, metadata={'model': 'linear'})


# ---------------------------------------------------------------------------
# Nonlinear plant
# ---------------------------------------------------------------------------

class NonlinearPlant:
    """
    Nonlinear closed loop around the flat operating point.

    ac flows b sin(theta_i - theta_j), dc flows g V_i (V_i - V_j) with absolute
    voltages V = v* + v, stored-energy dc dynamics C V dv/dt, device curves for
    PV and wind, and converter phases from the derivative-free controller
    (or from the power-balancing law for comparison runs).
    """

    def __init__(self, graph, devices, gains, base_loads=None, control_law='dual_port', delta_theta=None):
        if control_law not in CONTROL_LAWS:
            raise ValidationError(f"Unknown control law '{control_law}'")
        if control_law == 'power_balancing':
            missing = [c for c in graph.converters if gains[c].m_p is None]
            if missing:
                raise MissingDroop(f"Converter(s) {', '.join(missing)} have no power droop m_p",
                                   converters=missing)
        self.graph, self.devices, self.gains = graph, devices, gains
        self.control_law = control_law
        self.delta_theta = {c: 0.0 for c in graph.converters}
        self.delta_theta.update(delta_theta or {})

        self.machines = list(graph.machines)
        self.converters = list(graph.converters)
        self.dc_side = list(graph.dc_side_nodes)
        self.ac_nodes = list(graph.ac_nodes)
        self.decomposition = decompose_subnetworks(graph)

        self.B_ac = incidence(self.ac_nodes, graph.ac_edges)
        self.b = np.array([edge.weight for edge in graph.ac_edges])
        dc_index = {node: k for k, node in enumerate(self.dc_side)}
        self.dc_i = np.array([dc_index[edge.i] for edge in graph.dc_edges], dtype=int)
        self.dc_j = np.array([dc_index[edge.j] for edge in graph.dc_edges], dtype=int)
        self.g = np.array([edge.weight for edge in graph.dc_edges])

        records = [devices.converters[c] for c in self.converters] + [devices.dc_nodes[d] for d in graph.dc_nodes]
        self.C = np.array([record.C for record in records])
        self.v_star = np.array([record.v_star for record in records])
        self.inertia = np.array([devices.machines[m].inertia for m in self.machines])
        self.k_p = np.array([gains[c].k_p for c in self.converters])
        self.k_omega = np.array([gains[c].k_omega for c in self.converters])

        self.lag_nodes = [node for node in self.machines + list(graph.dc_nodes)
                          if isinstance(devices.source_of(node), (Governor, ControllableDc))]
        self.pitch_nodes = [m for m in self.machines if isinstance(devices.source_of(m), WindTurbine)]

        self.layout = {}
        start = 0
        for name, size in (('theta', len(self.machines)), ('omega', len(self.machines)),
                           ('v', len(self.dc_side)), ('phase', len(self.converters)),
                           ('P', len(self.lag_nodes)), ('beta', len(self.pitch_nodes))):
            self.layout[name] = slice(start, start + size)
            start += size
        self.n = start

        # Each node's source setpoint is balanced by a local base load
        self.base_ac = np.zeros(len(self.ac_nodes))
        self.base_dc = np.zeros(len(self.dc_side))
        for k, m in enumerate(self.machines):
            source = devices.source_of(m)
            if source is not None:
                self.base_ac[k] = source.P_star
        for k, node in enumerate(self.dc_side):
            source = devices.source_of(node) if node in devices.dc_nodes else None
            if source is not None:
                self.base_dc[k] = source.P_star
        for node, terminals in (base_loads or {}).items():
            for terminal, value in terminals.items():
                if terminal == 'ac':
                    self.base_ac[self.ac_nodes.index(node)] += value
                else:
                    self.base_dc[self.dc_side.index(node)] += value

        self.theta_offset = np.zeros(len(self.converters))
        self.P_ac_star = np.zeros(len(self.converters))

    @property
    def state_names(self):
        phase = 'gamma' if self.control_law == 'dual_port' else 'theta_c'
        return ([f"theta[{m}]" for m in self.machines] + [f"omega[{m}]" for m in self.machines]
                + [f"v[{node}]" for node in self.dc_side] + [f"{phase}[{c}]" for c in self.converters]
                + [f"P[{node}]" for node in self.lag_nodes] + [f"beta[{m}]" for m in self.pitch_nodes])

    # power flows ---------------------------------------------------------

    def ac_injections(self, theta_all):
        return self.B_ac @ (self.b * np.sin(self.B_ac.T @ theta_all))

    def dc_injections(self, v):
        V = self.v_star + v
        P = np.zeros(len(self.dc_side))
        if len(self.g):
            np.add.at(P, self.dc_i, self.g * V[self.dc_i] * (V[self.dc_i] - V[self.dc_j]))
            np.add.at(P, self.dc_j, self.g * V[self.dc_j] * (V[self.dc_j] - V[self.dc_i]))
        return P

    def converter_angles(self, v, phase):
        if self.control_law == 'power_balancing':
            return phase.copy()
        angles = np.empty(len(self.converters))
        for k, c in enumerate(self.converters):
            angles[k], _ = pi_phase(v[k], phase[k], self.delta_theta[c], self.gains[c],
                                    theta_star=self.theta_offset[k])
        return angles

    # sources ----------------------------------------------------------------

    def machine_sources(self, omega, P_lag, beta):
        P = np.zeros(len(self.machines))
        lag = dict(zip(self.lag_nodes, P_lag))
        pitch = dict(zip(self.pitch_nodes, beta))
        for k, m in enumerate(self.machines):
            source = self.devices.source_of(m)
            if isinstance(source, Governor):
                P[k] = lag[m]
            elif isinstance(source, WindTurbine):
                P[k] = source.power(source.omega_star + omega[k], pitch[m])
        return P

    def dc_sources(self, v, P_lag):
        P = np.zeros(len(self.dc_side))
        lag = dict(zip(self.lag_nodes, P_lag))
        n_c = len(self.converters)
        for k, node in enumerate(self.dc_side[n_c:], start=n_c):
            source = self.devices.dc_nodes[node].source
            if isinstance(source, ControllableDc):
                P[k] = lag[node]
            elif isinstance(source, PvSource):
                P[k] = source.power(self.v_star[k] + v[k], self.v_star[k])
        return P

    # dynamics ----------------------------------------------------------------

    def split(self, x):
        return {name: x[s] for name, s in self.layout.items()}

    def rhs(self, x, loads):
        """dx/dt for load deviations loads = (ac vector, dc vector)"""
        s = self.split(x)
        load_ac, load_dc = self.base_ac + loads[0], self.base_dc + loads[1]
        n_m, n_c = len(self.machines), len(self.converters)

        theta_c = self.converter_angles(s['v'][:n_c], s['phase'])
        P_ac = self.ac_injections(np.concatenate([s['theta'], theta_c]))
        P_dc = self.dc_injections(s['v'])
        V = self.v_star + s['v']

        d = np.zeros(self.n)
        d[self.layout['theta']] = s['omega']
        d[self.layout['omega']] = (self.machine_sources(s['omega'], s['P'], s['beta'])
                                   - P_ac[:n_m] - load_ac[:n_m]) / self.inertia

        net = self.dc_sources(s['v'], s['P']) - P_dc - load_dc
        net[:n_c] -= P_ac[n_m:] + load_ac[n_m:]
        v_dot = net / (self.C * V)
        d[self.layout['v']] = v_dot

        if self.control_law == 'dual_port':
            d[self.layout['phase']] = s['v'][:n_c]
        else:
            d[self.layout['phase']] = [power_balancing_frequency(P_ac[n_m + k] - self.P_ac_star[k], s['v'][k],
                                                                 self.gains[c])
                                       for k, c in enumerate(self.converters)]

        lag_dot = np.zeros(len(self.lag_nodes))
        for k, node in enumerate(self.lag_nodes):
            source = self.devices.source_of(node)
            if node in self.devices.machines:
                signal = s['omega'][self.machines.index(node)]
            else:
                signal = s['v'][self.dc_side.index(node)]
            lag_dot[k] = (-(s['P'][k] - source.P_star) - source.k_g * signal) / source.T_g
        d[self.layout['P']] = lag_dot

        beta_dot = np.zeros(len(self.pitch_nodes))
        for k, m in enumerate(self.pitch_nodes):
            source = self.devices.source_of(m)
            omega = s['omega'][self.machines.index(m)]
            beta_dot[k] = (-(s['beta'][k] - source.beta_star) + source.k_bp * omega) / source.T_g
        d[self.layout['beta']] = beta_dot
        return d

    def converter_frequencies(self, x, loads):
        s = self.split(x)
        d = self.split(self.rhs(x, loads))
        if self.control_law == 'power_balancing':
            return d['phase']
        return np.array([pd_frequency(d['v'][k], s['v'][k], self.gains[c]) for k, c in enumerate(self.converters)])

    # initialization -----------------------------------------------------------

    def _steady_residual(self, unknowns, anchors):
        """Operating-point equations in (free angles, subnet frequencies, dc voltages)"""
        theta, Omega, v = self._unpack(unknowns, anchors)
        n_m, n_c = len(self.machines), len(self.converters)
        omega_nodes = np.array([Omega[self.decomposition.ac_index(node)] for node in self.ac_nodes])

        P_ac = self.ac_injections(theta)
        P_dc = self.dc_injections(v)
        P_lag, beta = self._steady_sources(omega_nodes[:n_m], v)

        machine = self.machine_sources(omega_nodes[:n_m], P_lag, beta) - P_ac[:n_m] - self.base_ac[:n_m]
        dc = self.dc_sources(v, P_lag) - P_dc - self.base_dc
        dc[:n_c] -= P_ac[n_m:] + self.base_ac[n_m:]
        coupling = self.k_omega * v[:n_c] - omega_nodes[n_m:]
        return np.concatenate([machine, dc, coupling])

    def _steady_sources(self, omega_m, v):
        P_lag = np.zeros(len(self.lag_nodes))
        for k, node in enumerate(self.lag_nodes):
            source = self.devices.source_of(node)
            if node in self.devices.machines:
                signal = omega_m[self.machines.index(node)]
            else:
                signal = v[self.dc_side.index(node)]
            P_lag[k] = source.P_star - source.k_g * signal
        beta = np.array([self.devices.source_of(m).beta_star + self.devices.source_of(m).k_bp
                         * omega_m[self.machines.index(m)] for m in self.pitch_nodes])
        return P_lag, beta

    def _anchors(self):
        """First node of every ac subnet keeps angle zero"""
        return {subnet.nodes[0] for subnet in self.decomposition.ac_subnets}

    def _unpack(self, unknowns, anchors):
        free = [node for node in self.ac_nodes if node not in anchors]
        theta = np.zeros(len(self.ac_nodes))
        for k, node in enumerate(free):
            theta[self.ac_nodes.index(node)] = unknowns[k]
        n_sub = len(self.decomposition.ac_subnets)
        Omega = unknowns[len(free):len(free) + n_sub]
        v = unknowns[len(free) + n_sub:]
        return theta, Omega, v

    def solve_operating_point(self):
        """Damped Newton on the steady equations; returns (theta over ac nodes, Omega per subnet, v)"""
        anchors = self._anchors()
        size = len(self.ac_nodes) - len(anchors) + len(self.decomposition.ac_subnets) + len(self.dc_side)
        u = np.zeros(size)
        F = self._steady_residual(u, anchors)
        tolerance = TOLERANCES['newton_residual']
        for iteration in range(SOLVER_LIMITS['newton_max_iter']):
            norm = float(np.max(np.abs(F))) if F.size else 0.0
            if norm <= tolerance:
                log(f"✅ Operating point found after {iteration} Newton iterations")
                return self._unpack(u, anchors)
            J = np.empty((F.size, size))
            for k in range(size):
                step = 1e-7 * max(1.0, abs(u[k]))
                e = np.zeros(size)
                e[k] = step
                J[:, k] = (self._steady_residual(u + e, anchors) - self._steady_residual(u - e, anchors)) / (2 * step)
            try:
                delta = np.linalg.solve(J, -F)
            except np.linalg.LinAlgError:
                raise InitializationFailed("Singular Jacobian while solving for the operating point")
            damping = 1.0
            while damping >= SOLVER_LIMITS['newton_min_damping']:
                trial = u + damping * delta
                F_trial = self._steady_residual(trial, anchors)
                if np.all(np.isfinite(F_trial)) and np.max(np.abs(F_trial)) < (1 - 1e-4 * damping) * norm:
                    u, F = trial, F_trial
                    break
                damping *= 0.5
            else:
                raise InitializationFailed("Line search failed while solving for the operating point",
                                           residual=norm)
        raise InitializationFailed("Newton iteration limit reached", residual=float(np.max(np.abs(F))))

    def initial_state(self):
        theta, Omega, v = self.solve_operating_point()
        n_m, n_c = len(self.machines), len(self.converters)
        omega_m = np.array([Omega[self.decomposition.ac_index(m)] for m in self.machines])
        P_lag, beta = self._steady_sources(omega_m, v)

        x = np.zeros(self.n)
        x[self.layout['theta']] = theta[:n_m]
        x[self.layout['omega']] = omega_m
        x[self.layout['v']] = v
        x[self.layout['P']] = P_lag
        x[self.layout['beta']] = beta
        if self.control_law == 'dual_port':
            # the phase offset is carried by the integrator state from the start
            x[self.layout['phase']] = [(theta[n_m + k] - self.delta_theta[c] - self.gains[c].k_p * v[k])
                                       / self.gains[c].k_omega for k, c in enumerate(self.converters)]
        else:
            x[self.layout['phase']] = theta[n_m:]
            self.P_ac_star = self.ac_injections(theta)[n_m:]
        return x


def simulate_nonlinear(graph, devices, gains, schedule=None, h=None, t_end=None, base_loads=None,
                       control_law='dual_port', delta_theta=None):
    """
    Fixed-step RK4 of the nonlinear closed loop, started from its operating point.

    Channels use the linear model's names for omega[...] and v[...] (deviations),
    followed by the remaining plant states and omega_c[...].
    """
    h = SIM_DEFAULTS['step'] if h is None else h
    t_end = SIM_DEFAULTS['t_end'] if t_end is None else t_end
    steps, times = _time_grid(h, t_end)
    plant = NonlinearPlant(graph, devices, gains, base_loads, control_law, delta_theta)
    x = plant.initial_state()
    schedule = schedule or DisturbanceSchedule()
    breakpoints = set(schedule.breakpoints(h))

    def loads_at(step):
        ac = np.zeros(len(plant.ac_nodes))
        dc = np.zeros(len(plant.dc_side))
        for node, terminal, delta in schedule.active(step, h):
            if terminal == 'ac':
                ac[plant.ac_nodes.index(node)] += delta
            else:
                dc[plant.dc_side.index(node)] += delta
        return ac, dc

    def f(state, loads):
        return plant.rhs(state, loads)

    n_c = len(plant.converters)
    values = np.empty((steps + 1, plant.n + n_c))
    loads = loads_at(0)
    for step in range(steps + 1):
        if step in breakpoints:
            loads = loads_at(step)
        values[step, :plant.n] = x
        values[step, plant.n:] = plant.converter_frequencies(x, loads)
        if step == steps:
            break
        x = RK4(x, loads, f, h)
        _check_finite(x, step + 1, times[step + 1])

    names = plant.state_names + [f"omega_c[{c}]" for c in plant.converters]
    log(f"📊 Nonlinear simulation ({control_law}): {steps} steps of {h:g} s")
    return Trajectory(times=times, values=values, names=names, step=h,
                      metadata={'model': 'nonlinear', 'control_law': control_law})


def replay_phase(traj, gains, delta_theta=None):
    """
    Phase references a sampled dual-port controller would issue along a trajectory.

    Runs pi_phase on the recorded v[...] samples of every converter with the trajectory's step,
    starting from gamma = 0. Returns {converter: theta array}.
    """
    delta_theta = delta_theta or {}
    phases = {}
    for converter, converter_gains in gains.items():
        v = traj.channel(f"v[{converter}]")
        theta = np.empty(len(v))
        gamma = 0.0
        for k in range(len(v)):
            theta[k], gamma = pi_phase(v[k], gamma, delta_theta.get(converter, 0.0), converter_gains,
                                       h=traj.step if k else 0.0, v_previous=v[k - 1] if k else None)
        phases[converter] = theta
    return phases


# ---------------------------------------------------------------------------
# Metrics
# ---------------------------------------------------------------------------

@dataclass
class FreqMetrics:
    rocof: dict
    nadir: dict
    settling: dict
    window: float

    def to_frame(self):
        return pd.DataFrame({'node': list(self.rocof), 'rocof': list(self.rocof.values()),
                             'nadir': [self.nadir[n] for n in self.rocof],
                             'settling': [self.settling[n] for n in self.rocof]})


def metrics(traj, nodes=None, window=None):
    """RoCoF over a sliding window, nadir and settling value per monitored node"""
    window = SIM_DEFAULTS['rocof_window'] if window is None else window
    span = traj.times[-1] - traj.times[0]
    if window > span + 1e-12 or not window > 0:
        raise WindowTooLong(f"Window {window} s exceeds the trajectory span {span} s", window=window, span=span)
    lag = max(1, int(round(window / traj.step)))
    effective = lag * traj.step
    nodes = traj.frequency_nodes() if nodes is None else [str(node) for node in nodes]
    tail = max(1, int(np.ceil(SIM_DEFAULTS['settling_fraction'] * len(traj.times))))

    rocof, nadir, settling = {}, {}, {}
    for node in nodes:
        omega = traj.frequency(node)
        rocof[node] = float(np.max(np.abs(omega[lag:] - omega[:-lag])) / effective)
        nadir[node] = float(np.min(omega))
        settling[node] = float(np.mean(omega[-tail:]))
    return FreqMetrics(rocof=rocof, nadir=nadir, settling=settling, window=effective)


def max_deviation(first, second, prefixes=('omega[', 'omega_c[', 'v[')):
    """Largest absolute difference over the shared channels with the given prefixes"""
    shared = [name for name in first.names if name.startswith(prefixes) and name in second.names]
    return max(float(np.max(np.abs(first.channel(name) - second.channel(name)))) for name in shared)
