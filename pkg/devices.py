"""
Device models: synchronous machines, dc buses, governors, controllable dc sources,
single-diode PV plants and variable-speed wind turbines.

Nonlinear curves, maximum power points, linearized sensitivities and the
node classification used by the state-space assembly all live here.
"""

import math
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.optimize import brentq, minimize_scalar

from errors import DomainError, NoConvergence, UnstableRegion
from network import sort_ids
from settings import (CP_COEFFS, FD_RELATIVE_STEP, PV_DEFAULTS, SOLVER_LIMITS, TOLERANCES,
                      WT_DEFAULTS, WT_LAMBDA_RANGE, log)

CONVERTER_ROLES = ('pmsg_wt', 'lfac', 'direct_feed', 'hvdc')

# Operating points within this relative distance of the MPP count as "at" the MPP
MPP_RELATIVE_SLACK = 1e-9


# ---------------------------------------------------------------------------
# Parameter records
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class PvParams:
    i_L: float = PV_DEFAULTS['i_L']
    i_0: float = PV_DEFAULTS['i_0']
    v_t: float = PV_DEFAULTS['v_t']
    alpha: float = PV_DEFAULTS['alpha']
    R_s: float = PV_DEFAULTS['R_s']
    R_p: float = PV_DEFAULTS['R_p']
    n_series: int = PV_DEFAULTS['n_series']
    n_parallel: int = PV_DEFAULTS['n_parallel']
    power_base: float = PV_DEFAULTS['power_base']

    def __post_init__(self):
        for name in ('i_0', 'v_t', 'alpha', 'R_s', 'R_p', 'power_base'):
            if not getattr(self, name) > 0:
                raise DomainError(f"PV parameter {name} must be positive", parameter=name,
                                  value=getattr(self, name))
        if self.i_L < 0:
            raise DomainError("PV photocurrent must be non-negative", parameter='i_L', value=self.i_L)
        if self.n_series < 1 or self.n_parallel < 1:
            raise DomainError("PV aggregation counts must be at least 1",
                              n_series=self.n_series, n_parallel=self.n_parallel)


@dataclass(frozen=True)
class WtParams:
    rho: float = WT_DEFAULTS['rho']
    radius: float = WT_DEFAULTS['radius']
    wind_speed: float = WT_DEFAULTS['wind_speed']
    omega_base: float = WT_DEFAULTS['omega_base']
    cp_coeffs: tuple = CP_COEFFS
    power_base: float = 1.0

    def __post_init__(self):
        for name in ('rho', 'radius', 'wind_speed', 'omega_base', 'power_base'):
            if not getattr(self, name) > 0:
                raise DomainError(f"Wind turbine parameter {name} must be positive", parameter=name,
                                  value=getattr(self, name))
        if len(self.cp_coeffs) != 6:
            raise DomainError("Power coefficient surrogate needs six coefficients",
                              count=len(self.cp_coeffs))


@dataclass(frozen=True)
class Governor:
    """First-order turbine-governor lag T_g dP/dt = -(P - P*) - k_g w"""
    T_g: float
    k_g: float
    P_star: float = 0.0

    def __post_init__(self):
        _check_lag(self.T_g, self.k_g)


@dataclass(frozen=True)
class ControllableDc:
    """Controllable dc source (storage, curtailable dc generation) with the governor structure"""
    T_g: float
    k_g: float
    P_star: float = 0.0

    def __post_init__(self):
        _check_lag(self.T_g, self.k_g)


def _check_lag(T_g, k_g):
    if not T_g > 0:
        raise DomainError("Source time constant must be positive", T_g=T_g)
    if k_g < 0:
        raise DomainError("Source gain must be non-negative", k_g=k_g)


@dataclass(frozen=True)
class PvSource:
    """
    PV plant attached to a dc node.

    k_pv is the node-level sensitivity -dP/dv in p.u. of the node voltage.
    `params` is None for a linearized record, in which case the power curve
    is the affine P* - k_pv (v - v*).
    """
    k_pv: float
    P_star: float
    v_op: float = 1.0
    params: PvParams = None
    v_mpp: float = None
    P_mpp: float = None

    @property
    def headroom(self):
        return None if self.P_mpp is None else self.P_mpp - self.P_star

    def power(self, v_node, v_star):
        if self.params is None:
            return self.P_star - self.k_pv * (v_node - v_star)
        return pv_power(self.v_op * v_node / v_star, self.params)


@dataclass(frozen=True)
class WindTurbine:
    """
    Variable-speed wind turbine on a machine node with proportional pitch droop.

    The pitch lag is T_g d(beta)/dt = -(beta - beta*) + k_bp w; its effect on power
    appears through k_beta, giving the governor-like gain k_g = k_beta k_bp.
    """
    k_w: float
    k_beta: float
    k_bp: float
    T_g: float
    P_star: float
    omega_star: float = 1.0
    beta_star: float = 0.0
    params: WtParams = None
    omega_mpp: float = None
    P_mpp: float = None

    def __post_init__(self):
        _check_lag(self.T_g, self.k_bp)
        if self.k_beta < 0 and self.k_bp > 0:
            raise DomainError("Pitching out must not raise power at the setpoint", k_beta=self.k_beta)

    @property
    def k_g(self):
        return self.k_beta * self.k_bp

    @property
    def headroom(self):
        return None if self.P_mpp is None else self.P_mpp - self.P_star

    def power(self, omega, beta):
        if self.params is None:
            return (self.P_star - self.k_w * (omega - self.omega_star)
                    - self.k_beta * (beta - self.beta_star))
        return _wt_power_unchecked(omega, beta, self.params)


@dataclass(frozen=True)
class MachineParams:
    J: float
    omega_star: float = 1.0
    source: object = None

    def __post_init__(self):
        if not self.J > 0:
            raise DomainError("Machine inertia J must be positive", J=self.J)
        if not self.omega_star > 0:
            raise DomainError("Machine nominal speed must be positive", omega_star=self.omega_star)

    @property
    def inertia(self):
        """Effective swing coefficient J * omega*"""
        return self.J * self.omega_star


@dataclass(frozen=True)
class DcBusParams:
    C: float
    v_star: float = 1.0
    source: object = None

    def __post_init__(self):
        if not self.C > 0:
            raise DomainError("Capacitance C must be positive", C=self.C)
        if not self.v_star > 0:
            raise DomainError("Nominal dc voltage must be positive", v_star=self.v_star)

    @property
    def c(self):
        """Scaled capacitance C * v*"""
        return self.C * self.v_star


@dataclass(frozen=True)
class ConverterParams(DcBusParams):
    role: str = None

    def __post_init__(self):
        super().__post_init__()
        if self.role is not None and self.role not in CONVERTER_ROLES:
            raise DomainError(f"Unknown converter role '{self.role}'", role=self.role)


@dataclass(frozen=True)
class OperatingPoint:
    node: str
    device: str
    P_star: float
    setpoint: float
    sensitivities: dict = field(default_factory=dict)
    P_mpp: float = None
    headroom: float = None


@dataclass(frozen=True)
class Classification:
    r: tuple = ()
    zs: tuple = ()
    pv: tuple = ()
    w: tuple = ()
    other: tuple = ()


@dataclass(frozen=True)
class DeviceSet:
    machines: dict
    converters: dict
    dc_nodes: dict

    def source_of(self, node_id):
        record = self.machines.get(node_id) or self.dc_nodes.get(node_id)
        return None if record is None else record.source

    def lag_sources(self):
        """Sources with a first-order power state, keyed by node id"""
        lags = {}
        for node_id, record in list(self.machines.items()) + list(self.dc_nodes.items()):
            if isinstance(record.source, (Governor, ControllableDc, WindTurbine)):
                lags[node_id] = record.source
        return lags


# ---------------------------------------------------------------------------
# Photovoltaic single-diode model
# ---------------------------------------------------------------------------

def _module_current(v_module, p):
    """Safeguarded Newton on the implicit single-diode equation for one module"""
    a = p.v_t * p.alpha

    def residual(i):
        vd = v_module + p.R_s * i
        with np.errstate(over='ignore'):
            return p.i_L - p.i_0 * np.expm1(vd / a) - vd / p.R_p - i

    def slope(i):
        vd = v_module + p.R_s * i
        with np.errstate(over='ignore'):
            return -p.i_0 * p.R_s / a * np.exp(vd / a) - p.R_s / p.R_p - 1.0

    lo, hi = -p.i_L, p.i_L + v_module / p.R_p + 1.0
    expansions = 0
    while residual(lo) < 0:
        lo -= max(1.0, abs(lo))
        expansions += 1
        if expansions > 60:
            raise NoConvergence("Could not bracket the PV current", v=v_module)

    i = hi
    for _ in range(SOLVER_LIMITS['pv_max_iter']):
        f = residual(i)
        if abs(f) <= TOLERANCES['pv_polish']:
            return float(i)
        if f > 0:
            lo = i
        else:
            hi = i
        d = slope(i)
        step_ok = np.isfinite(f) and np.isfinite(d) and d != 0
        candidate = i - f / d if step_ok else None
        if candidate is None or not lo < candidate < hi:
            candidate = 0.5 * (lo + hi)
        if abs(candidate - i) <= 4 * np.finfo(float).eps * max(1.0, abs(i)):
            i = candidate
            break
        i = candidate

    if abs(residual(i)) > TOLERANCES['pv_residual']:
        raise NoConvergence("PV current iteration did not converge", v=v_module,
                            residual=float(residual(i)))
    return float(i)


def pv_current(v, p):
    """Plant current at plant voltage v (series strings split v, parallel strings add current)"""
    if v < 0:
        raise DomainError("PV voltage must be non-negative", v=v)
    return p.n_parallel * _module_current(v / p.n_series, p)


def pv_power(v, p):
    """Plant power in p.u. of power_base"""
    return v * pv_current(v, p) / p.power_base


def pv_open_circuit_voltage(p):
    if p.i_L == 0:
        return 0.0
    upper = p.n_series * p.v_t * p.alpha * math.log1p(p.i_L / p.i_0) * (1.0 + 1e-9)
    while pv_current(upper, p) > 0:
        upper *= 2.0
    return brentq(lambda v: pv_current(v, p), 0.0, upper, xtol=1e-14, rtol=4 * np.finfo(float).eps)


def _argmax_on_interval(func, lo, hi, what):
    """Coarse scan then golden-section refinement; polished on the derivative sign change"""
    grid = np.linspace(lo, hi, SOLVER_LIMITS['mpp_scan_points'])
    values = np.array([func(x) for x in grid])
    k = int(np.argmax(values))
    if k == 0 or k == len(grid) - 1:
        raise NoConvergence(f"{what} maximum is not interior to the scan range", lo=lo, hi=hi)

    a, b, c = grid[k - 1], grid[k], grid[k + 1]
    result = minimize_scalar(lambda x: -func(x), bracket=(a, b, c), method='golden')
    x = float(result.x)

    h = FD_RELATIVE_STEP * (hi - lo)

    def derivative(y):
        return (func(y + h) - func(y - h)) / (2 * h)

    if derivative(a) > 0 > derivative(c):
        x = brentq(derivative, a, c, xtol=1e-15 * max(1.0, abs(x)))
    return x, float(func(x))


def pv_mpp(p):
    """Maximum power point (v_mpp, P_mpp) of the plant"""
    v_oc = pv_open_circuit_voltage(p)
    if v_oc == 0:
        raise NoConvergence("PV plant produces no power", i_L=p.i_L)
    v_mpp, P_mpp = _argmax_on_interval(lambda v: pv_power(v, p), 0.0, v_oc, 'PV')
    log(f"🔍 PV MPP at v={v_mpp:.6g}, P={P_mpp:.6g}")
    return v_mpp, P_mpp


def pv_sensitivity(v_op, p, v_mpp=None):
    """k_pv = -dP/dv at the plant voltage v_op (stable branch only)"""
    if v_mpp is None:
        v_mpp, _ = pv_mpp(p)
    if v_op < v_mpp * (1 - MPP_RELATIVE_SLACK):
        raise UnstableRegion("PV operating voltage is below the MPP voltage", v_op=v_op, v_mpp=v_mpp)
    h = FD_RELATIVE_STEP * pv_open_circuit_voltage(p)
    k_pv = -(pv_power(v_op + h, p) - pv_power(v_op - h, p)) / (2 * h)
    return max(k_pv, 0.0)


# ---------------------------------------------------------------------------
# Wind turbine
# ---------------------------------------------------------------------------

def power_coefficient(lam, beta, coeffs=CP_COEFFS):
    """Exponential C_p(lambda, beta) surrogate, clamped at zero"""
    c1, c2, c3, c4, c5, c6 = coeffs
    inv_lam_i = 1.0 / (lam + 0.08 * beta) - 0.035 / (beta ** 3 + 1.0)
    cp = c1 * (c2 * inv_lam_i - c3 * beta - c4) * math.exp(-c5 * inv_lam_i) + c6 * lam
    return max(cp, 0.0)


def tip_speed_ratio(omega, p):
    return p.radius * omega * p.omega_base / p.wind_speed


def _wt_power_unchecked(omega, beta, p):
    lam = tip_speed_ratio(omega, p)
    cp = power_coefficient(lam, beta, p.cp_coeffs)
    return 0.5 * p.rho * math.pi * p.radius ** 2 * cp * p.wind_speed ** 3 / p.power_base


def wt_power(omega, beta, p):
    """Mechanical power in p.u. at rotor speed omega (p.u.) and pitch beta (deg)"""
    if not omega > 0:
        raise DomainError("Rotor speed must be positive", omega=omega)
    if beta < 0:
        raise DomainError("Pitch angle must be non-negative", beta=beta)
    return _wt_power_unchecked(omega, beta, p)


def wt_speed_range(p):
    lam_lo, lam_hi = WT_LAMBDA_RANGE
    scale = p.wind_speed / (p.radius * p.omega_base)
    return lam_lo * scale, lam_hi * scale


def wt_mpp(p):
    """Maximum power point (omega_mpp, P_mpp) at zero pitch"""
    lo, hi = wt_speed_range(p)
    return _argmax_on_interval(lambda omega: _wt_power_unchecked(omega, 0.0, p), lo, hi, 'Wind turbine')


def wt_sensitivities(omega_star, beta_star, p, omega_mpp=None):
    """(k_w, k_beta) = (-dP/domega, -dP/dbeta) by central differences"""
    if omega_mpp is None:
        omega_mpp, _ = wt_mpp(p)
    if omega_star < omega_mpp * (1 - MPP_RELATIVE_SLACK):
        raise UnstableRegion("Rotor speed setpoint is below the MPP speed",
                             omega_star=omega_star, omega_mpp=omega_mpp)
    h_w = FD_RELATIVE_STEP * omega_star
    h_b = FD_RELATIVE_STEP * max(1.0, abs(beta_star))
    k_w = -(_wt_power_unchecked(omega_star + h_w, beta_star, p)
            - _wt_power_unchecked(omega_star - h_w, beta_star, p)) / (2 * h_w)
    k_beta = -(_wt_power_unchecked(omega_star, beta_star + h_b, p)
               - _wt_power_unchecked(omega_star, beta_star - h_b, p)) / (2 * h_b)
    return (k_w if k_w > TOLERANCES['mpp_sensitivity'] else 0.0), k_beta


def calibrate_wt_power_base(p, target=None, wind_speed=None):
    """Choose power_base so that the MPP power at the calibration wind speed equals target"""
    target = WT_DEFAULTS['calibration_target'] if target is None else target
    wind_speed = WT_DEFAULTS['calibration_wind_speed'] if wind_speed is None else wind_speed
    calibration = replace(p, wind_speed=wind_speed, power_base=1.0)
    _, watts = wt_mpp(calibration)
    return replace(p, power_base=watts / target)


def default_wt_params(**overrides):
    """Default turbine calibrated to the standard MPP target"""
    return calibrate_wt_power_base(WtParams(**overrides))


# ---------------------------------------------------------------------------
# Records -> devices
# ---------------------------------------------------------------------------

def governor_from_record(record):
    return Governor(T_g=float(record['T_g']), k_g=float(record['k_g']),
                    P_star=float(record.get('P_star', 0.0)))


def dc_source_from_record(record):
    return ControllableDc(T_g=float(record['T_g']), k_g=float(record['k_g']),
                          P_star=float(record.get('P_star', 0.0)))


def pv_from_record(record, v_star=1.0):
    """PV source from either physical parameters or a linearized record"""
    if 'k_pv' in record:
        k_pv = float(record['k_pv'])
        if k_pv < 0:
            raise UnstableRegion("Linearized PV sensitivity must be non-negative", k_pv=k_pv)
        return PvSource(k_pv=k_pv, P_star=float(record.get('P_star', 0.0)))

    params = PvParams(**{**PV_DEFAULTS, **record.get('params', {})})
    v_mpp, P_mpp = pv_mpp(params)
    if 'v_op' in record:
        v_op = float(record['v_op'])
    else:
        v_op = float(record.get('v_op_ratio', 1.0)) * v_mpp
    k_pv = pv_sensitivity(v_op, params, v_mpp=v_mpp) * v_op / v_star
    if k_pv <= TOLERANCES['mpp_sensitivity']:
        k_pv = 0.0
    return PvSource(k_pv=k_pv, P_star=pv_power(v_op, params), v_op=v_op,
                    params=params, v_mpp=v_mpp, P_mpp=P_mpp)


def wind_turbine_from_record(record):
    """Wind turbine from either aerodynamic parameters or a linearized record"""
    T_g = float(record.get('T_g', WT_DEFAULTS['pitch_T_g']))
    k_bp = float(record.get('k_bp', WT_DEFAULTS['k_bp']))
    if 'k_w' in record:
        k_w = float(record['k_w'])
        if k_w < 0:
            raise UnstableRegion("Linearized wind sensitivity must be non-negative", k_w=k_w)
        return WindTurbine(k_w=k_w, k_beta=float(record.get('k_beta', 0.0)), k_bp=k_bp, T_g=T_g,
                           P_star=float(record.get('P_star', 0.0)),
                           omega_star=float(record.get('omega_star', 1.0)),
                           beta_star=float(record.get('beta_star', 0.0)))

    raw = dict(record.get('params', {}))
    if 'cp_coeffs' in raw:
        raw['cp_coeffs'] = tuple(raw['cp_coeffs'])
    params = WtParams(**{key: value for key, value in raw.items() if key != 'power_base'})
    if 'power_base' in raw:
        params = replace(params, power_base=float(raw['power_base']))
    else:
        params = calibrate_wt_power_base(params)

    omega_mpp, P_mpp = wt_mpp(params)
    if 'omega_star' in record:
        omega_star = float(record['omega_star'])
    else:
        omega_star = float(record.get('omega_ratio', 1.0)) * omega_mpp
    beta_star = float(record.get('beta_star', 0.0))
    if beta_star < 0:
        raise DomainError("Pitch setpoint must be non-negative", beta_star=beta_star)
    k_w, k_beta = wt_sensitivities(omega_star, beta_star, params, omega_mpp=omega_mpp)
    return WindTurbine(k_w=k_w, k_beta=k_beta, k_bp=k_bp, T_g=T_g,
                       P_star=_wt_power_unchecked(omega_star, beta_star, params),
                       omega_star=omega_star, beta_star=beta_star, params=params,
                       omega_mpp=omega_mpp, P_mpp=P_mpp)


def build_device_set(graph, records):
    """
    Turn per-node device records into a DeviceSet matching the graph.

    Machine records: J, omega_star, optional 'governor' or 'wind_turbine'.
    Converter records: C, v_star, optional role.
    dc node records: C, v_star, optional 'dc_source' or 'pv'.
    """
    machines, converters, dc_nodes = {}, {}, {}
    for node_id in graph.machines:
        record = _record_for(records, node_id)
        source = None
        omega_star = float(record.get('omega_star', 1.0))
        if 'governor' in record and 'wind_turbine' in record:
            raise DomainError(f"Machine '{node_id}' has both a governor and a wind turbine", node=node_id)
        if 'governor' in record:
            source = governor_from_record(record['governor'])
        elif 'wind_turbine' in record:
            source = wind_turbine_from_record(record['wind_turbine'])
            omega_star = source.omega_star
        machines[node_id] = MachineParams(J=float(record['J']), omega_star=omega_star, source=source)

    for node_id in graph.converters:
        record = _record_for(records, node_id)
        converters[node_id] = ConverterParams(C=float(record['C']), v_star=float(record.get('v_star', 1.0)),
                                              role=record.get('role'))

    for node_id in graph.dc_nodes:
        record = _record_for(records, node_id)
        v_star = float(record.get('v_star', 1.0))
        source = None
        if 'dc_source' in record and 'pv' in record:
            raise DomainError(f"dc node '{node_id}' has both a dc source and a PV plant", node=node_id)
        if 'dc_source' in record:
            source = dc_source_from_record(record['dc_source'])
        elif 'pv' in record:
            source = pv_from_record(record['pv'], v_star=v_star)
        dc_nodes[node_id] = DcBusParams(C=float(record['C']), v_star=v_star, source=source)

    log(f"✅ Devices ready: {len(machines)} machines, {len(converters)} converters, {len(dc_nodes)} dc nodes")
    return DeviceSet(machines=machines, converters=converters, dc_nodes=dc_nodes)


def _record_for(records, node_id):
    if node_id not in records:
        raise DomainError(f"No device record for node '{node_id}'", node=node_id)
    return records[node_id]


def source_gain(source):
    """k_g of a lag source (governor, controllable dc source or pitch-controlled turbine)"""
    if isinstance(source, (Governor, ControllableDc, WindTurbine)):
        return source.k_g
    return None


def classify_nodes(devices):
    """Split nodes into responsive (r), zero-sensitivity (zs), curtailed PV, curtailed WT and the rest"""
    machine_ids = sort_ids(devices.machines)
    dc_ids = sort_ids(devices.dc_nodes)

    r, zs, pv, w = [], [], [], []
    for node_id in machine_ids + dc_ids:
        source = devices.source_of(node_id)
        gain = source_gain(source)
        if gain is not None:
            (r if gain > 0 else zs).append(node_id)
        if isinstance(source, PvSource) and source.k_pv > 0:
            pv.append(node_id)
        if isinstance(source, WindTurbine) and source.k_w > 0:
            w.append(node_id)

    grouped = set(r) | set(zs) | set(pv) | set(w)
    other = ([node_id for node_id in machine_ids if node_id not in grouped]
             + sort_ids(devices.converters)
             + [node_id for node_id in dc_ids if node_id not in grouped])
    return Classification(r=tuple(r), zs=tuple(zs), pv=tuple(pv), w=tuple(w), other=tuple(other))


def operating_points(devices):
    """Operating point summary of every source"""
    points = []
    for node_id in sort_ids(devices.machines) + sort_ids(devices.dc_nodes):
        source = devices.source_of(node_id)
        if isinstance(source, Governor):
            points.append(OperatingPoint(node_id, 'governor', source.P_star, 1.0, {'k_g': source.k_g}))
        elif isinstance(source, ControllableDc):
            points.append(OperatingPoint(node_id, 'dc_source', source.P_star, 1.0, {'k_g': source.k_g}))
        elif isinstance(source, PvSource):
            points.append(OperatingPoint(node_id, 'pv', source.P_star, source.v_op, {'k_pv': source.k_pv},
                                         P_mpp=source.P_mpp, headroom=source.headroom))
        elif isinstance(source, WindTurbine):
            sensitivities = {'k_w': source.k_w, 'k_beta': source.k_beta, 'k_g': source.k_g}
            points.append(OperatingPoint(node_id, 'wind_turbine', source.P_star, source.omega_star,
                                         sensitivities, P_mpp=source.P_mpp, headroom=source.headroom))
    return points
