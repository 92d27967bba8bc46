"""
Shared configuration for the hybrid ac/dc stability toolkit.
Numerical tolerances, solver limits, simulation defaults and device defaults live here
so that every module reads the same values.
"""

import os
import sys

# Strict inequalities are checked with this margin; eigenvalue threshold for stability.
# Sensitivities below mpp_sensitivity are finite-difference residue at a maximum power point
TOLERANCES = {
    'strict_margin': 1e-12,
    'stability': 1e-9,
    'certificate': 1e-9,
    'pv_residual': 1e-10,
    'pv_polish': 1e-14,
    'gain_equality': 1e-12,
    'newton_residual': 1e-11,
    'steady_residual': 1e-10,
    'kron_condition': 1e12,
    'steady_condition': 1e13,
    'mpp_sensitivity': 1e-6,
}

SOLVER_LIMITS = {
    'pv_max_iter': 200,
    'newton_max_iter': 60,
    'newton_min_damping': 1e-6,
    'mpp_scan_points': 1000,
    'certificate_samples': 1000,
}

SIM_DEFAULTS = {
    'step': 1e-3,
    't_end': 30.0,
    'rocof_window': 0.3,
    'settling_fraction': 0.05,
}

# Central finite differences use this step relative to the device scale
FD_RELATIVE_STEP = 1e-6

GDC_SCALES = (10.0, 100.0, 1000.0)

# c1..c6 of the exponential power-coefficient surrogate
CP_COEFFS = (0.5176, 116.0, 0.4, 5.0, 21.0, 0.0068)

# Tip-speed ratios bounding the turbine search range (Cp stays positive inside)
WT_LAMBDA_RANGE = (2.0, 13.0)

WT_DEFAULTS = {
    'rho': 1.225,
    'radius': 63.0,
    'wind_speed': 12.0,
    'omega_base': 1.543,
    'pitch_T_g': 0.5,
    'k_bp': 2.0,
    'calibration_wind_speed': 12.0,
    'calibration_target': 0.75,
}

# Representative 60-cell module at 25 degC (module-level thermal voltage)
PV_DEFAULTS = {
    'i_L': 8.6,
    'i_0': 1.0e-9,
    'v_t': 1.5416,
    'alpha': 1.1,
    'R_s': 0.25,
    'R_p': 250.0,
    'n_series': 1,
    'n_parallel': 1,
    'power_base': 1.0,
}

VERBOSE = os.environ.get('HYBRIDGRID_VERBOSE', '0') == '1'


def set_verbose(enabled):
    """Switch console diagnostics on or off for the current process"""
    global VERBOSE
    VERBOSE = bool(enabled)


def log(message):
    """Print a diagnostic line to stderr when verbose mode is on"""
    if VERBOSE:
        print(message, file=sys.stderr)
