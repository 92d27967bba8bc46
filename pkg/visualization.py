import numpy as np
import pandas as pd

STATUS_COLORS = {
    'PASS': '#2E8B57',  # Dark green
    'FAIL': '#FF0000',  # Red
    'ERROR': '#8B0000',  # Dark red
}


def get_status_color(status):
    """Color for a verdict status in tables and charts"""
    return STATUS_COLORS.get(status, '#808080')


def get_margin_color(margin, bound):
    """Green when the gain has at least half its range left, amber when tight, red when violated"""
    if not margin > 0:
        return '#FF0000'
    if not np.isfinite(bound) or margin >= 0.5 * bound:
        return '#2E8B57'
    return '#FFA500'


def condition_frame(report):
    return report.condition_table()


def spectrum_frame(spectrum, restricted=False, limit=None):
    """Eigenvalues sorted by decreasing real part, with damping ratio and oscillation frequency"""
    values = spectrum.restricted if restricted else spectrum.eigenvalues
    if limit is not None:
        values = values[:limit]
    magnitude = np.abs(values)
    with np.errstate(divide='ignore', invalid='ignore'):
        damping = np.where(magnitude > 0, -values.real / magnitude, 1.0)
    return pd.DataFrame({
        'real': values.real,
        'imag': values.imag,
        'damping_ratio': damping,
        'frequency_hz': np.abs(values.imag) / (2 * np.pi),
    })


def droop_frame(droops):
    return pd.DataFrame([{'node': d.node, 'kind': d.kind, 'coefficient': d.coefficient,
                          'kappa': d.kappa, 'kappa_percent': 100 * d.kappa, 'scale': d.scale}
                         for d in droops], columns=['node', 'kind', 'coefficient', 'kappa', 'kappa_percent', 'scale'])


def sharing_frame(rows):
    return pd.DataFrame(rows, columns=['node', 'kind', 'delta_P', 'kappa', 'share', 'expected_share', 'deviation'])


def convergence_frame(rows):
    """Quasi-synchronous sweep with the error ratio between consecutive scales"""
    frame = pd.DataFrame(rows, columns=['scale', 'omega_ref', 'omega_quasi_sync', 'max_error'])
    frame['error_ratio'] = frame['max_error'].shift(1) / frame['max_error']
    return frame


def tuning_frame(advice):
    return pd.DataFrame([vars(a) for a in advice],
                        columns=['converter', 'k_omega', 'k_omega_max', 'k_omega_ok', 'k_p', 'k_p_max', 'k_p_margin'])


def dc_coupling_frame(rows):
    return pd.DataFrame([{key: value for key, value in row.items() if key != 'row_sums'} for row in rows],
                        columns=['subnet', 'k_omega', 'lambda_max', 'bound', 'holds', 'gershgorin_holds'])


def steady_frame(frequencies, scales=None):
    """Steady frequency deviation per node, and its value referred to the reference subnet"""
    frame = pd.DataFrame({'node': list(frequencies), 'omega': list(frequencies.values())})
    if scales is not None:
        frame['omega_ref'] = [value / scales[node] for node, value in frequencies.items()]
    return frame


def frequency_frame(trajectory, nodes=None):
    """Time-indexed frequency deviations, one column per node"""
    nodes = trajectory.frequency_nodes() if nodes is None else [str(node) for node in nodes]
    return pd.DataFrame({node: trajectory.frequency(node) for node in nodes},
                        index=pd.Index(trajectory.times, name='time'))


def voltage_frame(trajectory):
    names = [name for name in trajectory.names if name.startswith('v[')]
    return pd.DataFrame({name[2:-1]: trajectory.channel(name) for name in names},
                        index=pd.Index(trajectory.times, name='time'))


def metrics_frame(freq_metrics):
    return freq_metrics.to_frame()
