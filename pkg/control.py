"""
Dual-port grid-forming control: the PD v-f droop law, its derivative-free PI form,
the power-balancing comparison law and gain tuning helpers.
"""

from dataclasses import dataclass

from errors import InvalidGain, MissingDroop, ZeroSensitivity


@dataclass(frozen=True)
class ControlGains:
    k_p: float
    k_omega: float
    m_p: float = None

    def __post_init__(self):
        if not self.k_p > 0:
            raise InvalidGain("Derivative gain k_p must be positive", k_p=self.k_p)
        if not self.k_omega > 0:
            raise InvalidGain("Proportional gain k_omega must be positive", k_omega=self.k_omega)
        if self.m_p is not None and not self.m_p > 0:
            raise InvalidGain("Power droop m_p must be positive", m_p=self.m_p)


@dataclass(frozen=True)
class TuningAdvice:
    converter: str
    k_omega: float
    k_omega_max: float
    k_omega_ok: bool
    k_p: float
    k_p_max: float
    k_p_margin: float


def pd_frequency(dv_dt, v_delta, gains):
    """Converter frequency deviation k_p dv/dt + k_omega v_delta"""
    return gains.k_p * dv_dt + gains.k_omega * v_delta


def pi_phase(v_delta, gamma, delta_theta, gains, h=0.0, v_previous=None, theta_star=0.0):
    """
    Derivative-free phase reference theta* + dtheta + k_p v + k_omega gamma.

    gamma integrates the dc voltage deviation. A sampled controller passes its step h
    and the previous sample v_previous, and gamma takes one trapezoidal step before the
    phase is formed. With h = 0 gamma is used as given (the nonlinear plant carries it
    as an RK4 state). Returns (theta, gamma_next).
    """
    if v_previous is None:
        v_previous = v_delta
    gamma_next = gamma + 0.5 * h * (v_previous + v_delta)
    theta = theta_star + delta_theta + gains.k_p * v_delta + gains.k_omega * gamma_next
    return theta, gamma_next


def power_balancing_frequency(P_ac_delta, v_delta, gains):
    """Comparison law -m_p P_ac + k_omega v_delta"""
    if gains.m_p is None:
        raise MissingDroop("Power-balancing control needs a power droop m_p")
    return -gains.m_p * P_ac_delta + gains.k_omega * v_delta


def effective_droop(kind, k_g=0.0, k_pv=0.0, k_w=0.0, k_omega=None, k_omega_machine=None):
    """
    Steady-state frequency deviation per unit of sustained power response.

    kind is one of 'governor', 'pv', 'dc_source' or 'pmsg_wt'. The PMSG formula
    takes the grid-side gain as k_omega and the machine-side gain as k_omega_machine.
    """
    if kind == 'governor':
        if not k_g > 0:
            raise ZeroSensitivity("Governor without droop gives no sustained response", k_g=k_g)
        return 1.0 / k_g
    if kind == 'pv':
        if not k_pv > 0:
            raise ZeroSensitivity("PV at its MPP gives no sustained response", k_pv=k_pv)
        return _require(k_omega, 'k_omega') / k_pv
    if kind == 'dc_source':
        if not k_g > 0:
            raise ZeroSensitivity("dc source without droop gives no sustained response", k_g=k_g)
        return _require(k_omega, 'k_omega') / k_g
    if kind == 'pmsg_wt':
        if not k_g + k_w > 0:
            raise ZeroSensitivity("Wind turbine at its MPP without pitch droop", k_g=k_g, k_w=k_w)
        return _require(k_omega, 'k_omega') / (_require(k_omega_machine, 'k_omega_machine') * (k_g + k_w))
    raise InvalidGain(f"Unknown source kind '{kind}'", kind=kind)


def _require(value, name):
    if value is None or not value > 0:
        raise InvalidGain(f"{name} must be supplied and positive", parameter=name, value=value)
    return value


def k_omega_max(delta_omega_max, delta_v_max):
    """Largest v-f gain that keeps the dc voltage within delta_v_max at delta_omega_max"""
    if not delta_omega_max > 0 or not delta_v_max > 0:
        raise InvalidGain("Deviation limits must be positive",
                          delta_omega_max=delta_omega_max, delta_v_max=delta_v_max)
    return delta_omega_max / delta_v_max


def tuning_advisory(gains, k_p_bounds, delta_omega_max=None, delta_v_max=None):
    """
    Per-converter advice: k_omega against k_omega_max and k_p against its stability bound.

    k_p_bounds maps converter id to the largest admissible k_p (inf when only k_p > 0 is required).
    """
    limit = None
    if delta_omega_max is not None and delta_v_max is not None:
        limit = k_omega_max(delta_omega_max, delta_v_max)

    advice = []
    for converter, gain in gains.items():
        bound = k_p_bounds.get(converter, float('inf'))
        advice.append(TuningAdvice(
            converter=converter,
            k_omega=gain.k_omega,
            k_omega_max=limit,
            k_omega_ok=limit is None or gain.k_omega <= limit,
            k_p=gain.k_p,
            k_p_max=bound,
            k_p_margin=bound - gain.k_p,
        ))
    return advice
