import streamlit as st
import pandas as pd
import numpy as np
import hashlib

from analysis import analyze, quasi_sync_convergence
from errors import HybridGridError
from scenario import available_fixtures, fixture_path, parse_scenario
from simulation import CONTROL_LAWS, metrics, simulate_linear, simulate_nonlinear
from assembly import assemble_system
from visualization import (convergence_frame, dc_coupling_frame, droop_frame, frequency_frame, get_margin_color,
                           get_status_color, metrics_frame, sharing_frame, spectrum_frame, steady_frame,
                           tuning_frame, voltage_frame)

# Set page config
st.set_page_config(page_title="Hybrid AC/DC Grid-Forming Analyzer", layout="wide")

st.title("⚡ Hybrid AC/DC Stability Analyzer")
st.markdown("**Check dual-port grid-forming control** - Stability conditions, spectrum, steady state and time response")


@st.cache_data
def load_document(text, file_hash):
    """Normalized scenario document (cached by file hash)"""
    return parse_scenario(text).data


@st.cache_data
def run_analysis(text, file_hash, relax_cond1, n_minus_one, gdc_scale):
    scenario = parse_scenario(text)
    options = scenario.analysis
    limits = options.get('k_omega_max') or {}
    return analyze(scenario.scaled_graph(gdc_scale), scenario.devices, scenario.gains, name=scenario.name,
                   relax_cond1=relax_cond1, n_minus_one=n_minus_one, loads=scenario.loads,
                   delta_omega_max=limits.get('delta_omega_max'), delta_v_max=limits.get('delta_v_max'),
                   reference_node=options['reference_node'])


@st.cache_data
def run_simulation(text, file_hash, gdc_scale, step, t_end, nonlinear, control_law):
    scenario = parse_scenario(text)
    graph = scenario.scaled_graph(gdc_scale)
    if nonlinear:
        return simulate_nonlinear(graph, scenario.devices, scenario.gains, scenario.schedule, h=step, t_end=t_end,
                                  base_loads=scenario.base_loads, control_law=control_law)
    ss = assemble_system(graph, scenario.devices, scenario.gains)
    return simulate_linear(ss, scenario.schedule, h=step, t_end=t_end)


@st.cache_data
def run_convergence(text, file_hash):
    scenario = parse_scenario(text)
    return quasi_sync_convergence(scenario.graph, scenario.devices, scenario.gains, scenario.loads,
                                  scales=scenario.analysis['gdc_scales'],
                                  reference_node=scenario.analysis['reference_node'])


def show_error(record):
    st.error(f"**{record['error']}**: {record['message']}")
    if record.get('details'):
        st.json(record['details'])


def style_status(value):
    return f"color: {get_status_color(value)}; font-weight: bold"


# Sidebar for scenario selection
st.sidebar.header("📁 Scenario")
source = st.sidebar.radio("Scenario source", ["📦 Bundled fixture", "📤 Upload JSON"])
scenario_text = None
if source == "📦 Bundled fixture":
    fixture = st.sidebar.selectbox("Fixture", available_fixtures(),
                                   index=available_fixtures().index('fig8') if 'fig8' in available_fixtures() else 0)
    scenario_text = fixture_path(fixture).read_text()
else:
    upload = st.sidebar.file_uploader("Upload scenario file", type=['json'])
    if upload is not None:
        scenario_text = upload.read().decode('utf-8')

if scenario_text is None:
    st.info("👆 Please choose a bundled fixture or upload a scenario JSON file")
    st.markdown("### Scenario sections:")
    st.markdown("- `nodes`, `ac_edges`, `dc_edges`, `devices`, `gains`")
    st.markdown("- optional `disturbances`, `base_loads`, `analysis`, `simulation`")
    st.stop()

file_hash = hashlib.md5(scenario_text.encode()).hexdigest()
try:
    data = load_document(scenario_text, file_hash)
except HybridGridError as exc:
    show_error(exc.to_record())
    st.stop()

analysis_options, simulation_options = data['analysis'], data['simulation']

st.sidebar.write(f"**Name:** {data['name']}")
if data['description']:
    st.sidebar.caption(data['description'])
kinds = pd.Series([node['kind'] for node in data['nodes']]).value_counts()
st.sidebar.write(" | ".join(f"{kind}: {count}" for kind, count in kinds.items()))

st.sidebar.header("🔍 Analysis Options")
relax_cond1 = st.sidebar.checkbox("Relax v-f droop consistency", value=analysis_options['relax_cond1'],
                                  help="Accept differing k_omega inside a dc subnet when the subnets admit "
                                       "a consistent frequency scaling")
n_minus_one = st.sidebar.checkbox("N-1 topology check", value=analysis_options['n_minus_one'])
gdc_scale = st.sidebar.select_slider("dc conductance scale", options=[1.0, 10.0, 100.0, 1000.0], value=1.0)

st.sidebar.header("📊 Simulation")
nonlinear = st.sidebar.checkbox("Nonlinear plant", value=False)
control_law = st.sidebar.selectbox("Converter control", CONTROL_LAWS, disabled=not nonlinear)
step = st.sidebar.number_input("Step (s)", min_value=1e-4, max_value=0.1, value=float(simulation_options['step']),
                               format="%.4f")
t_end = st.sidebar.number_input("Duration (s)", min_value=0.5, max_value=600.0,
                                value=float(simulation_options['t_end']))

with st.spinner("Checking stability conditions..."):
    try:
        report = run_analysis(scenario_text, file_hash, relax_cond1, n_minus_one, gdc_scale)
    except HybridGridError as exc:
        show_error(exc.to_record())
        st.stop()

# Headline
col1, col2, col3, col4 = st.columns(4)
with col1:
    st.metric("🧭 Verdict", "PASS" if report.passed else "FAIL")
with col2:
    max_real = report.spectrum.max_real if report.spectrum else float('nan')
    st.metric("📉 Max real part", f"{max_real:.3e}")
with col3:
    st.metric("🔒 LaSalle certificate", (report.certificate_note or '').split(' (')[0])
with col4:
    omega_qs = (report.steady or {}).get('omega_quasi_sync')
    st.metric("🎯 Quasi-sync frequency", "n/a" if omega_qs is None else f"{omega_qs:.3e}")

for record in report.errors:
    show_error(record)

tab_conditions, tab_spectrum, tab_steady, tab_simulation = st.tabs(
    ["✅ Conditions", "🔢 Spectrum", "⚖️ Steady state", "📈 Simulation"])

with tab_conditions:
    st.subheader("Stability Conditions")
    st.dataframe(report.condition_table().style.map(style_status, subset=['status']), use_container_width=True)

    bounds = report.cond2.details.get('bounds', {})
    if report.tuning:
        st.subheader("🎛️ Gain Tuning")
        tuning = tuning_frame(report.tuning)
        colors = [get_margin_color(a.k_p_margin, bounds.get(a.converter, np.inf)) for a in report.tuning]
        st.dataframe(tuning.style.apply(lambda column: [f"background-color: {c}33" for c in colors],
                                        subset=['k_p_margin']), use_container_width=True)

    if report.dc_coupling:
        st.subheader("🔌 dc Coupling Bounds")
        st.dataframe(dc_coupling_frame(report.dc_coupling), use_container_width=True)

    subnets = report.cond5.details.get('subnets', [])
    if subnets:
        with st.expander("ac subnet topology cases"):
            st.dataframe(pd.DataFrame([{k: v for k, v in s.items() if k != 'n_minus_one_failures'}
                                       for s in subnets]), use_container_width=True)

with tab_spectrum:
    if report.spectrum is not None:
        st.subheader("Eigenvalues of the cycle-free system")
        restricted = spectrum_frame(report.spectrum, restricted=True)
        st.scatter_chart(restricted, x='real', y='imag')
        st.dataframe(restricted, use_container_width=True)
        with st.expander("Full spectrum"):
            st.dataframe(spectrum_frame(report.spectrum), use_container_width=True)
    if report.certificate is not None:
        st.write(f"min eig M = {report.certificate.min_eig_M:.3e}, max eig S = {report.certificate.max_eig_S:.3e}")

with tab_steady:
    if report.steady:
        st.subheader("Steady frequency after all disturbances")
        st.dataframe(steady_frame(report.steady['frequencies']), use_container_width=True)
        if report.droops:
            st.subheader("Effective droops")
            st.dataframe(droop_frame(report.droops), use_container_width=True)
        if report.steady.get('sharing'):
            st.subheader("Droop sharing")
            st.dataframe(sharing_frame(report.steady['sharing']), use_container_width=True)
        if report.droops and st.button("Run dc conductance sweep"):
            with st.spinner("Solving steady states..."):
                try:
                    st.dataframe(convergence_frame(run_convergence(scenario_text, file_hash)),
                                 use_container_width=True)
                except HybridGridError as exc:
                    show_error(exc.to_record())
    else:
        st.info("Scenario has no disturbances, so there is no steady-state shift to show")

with tab_simulation:
    if st.button("▶️ Simulate"):
        with st.spinner("Integrating..."):
            try:
                trajectory = run_simulation(scenario_text, file_hash, gdc_scale, step, t_end, nonlinear,
                                            control_law)
            except HybridGridError as exc:
                show_error(exc.to_record())
                st.stop()
        monitored = simulation_options['monitored'] or trajectory.frequency_nodes()
        st.subheader("Frequency deviation")
        st.line_chart(frequency_frame(trajectory, monitored))
        st.subheader("dc voltage deviation")
        st.line_chart(voltage_frame(trajectory))
        try:
            st.dataframe(metrics_frame(metrics(trajectory, monitored)), use_container_width=True)
        except HybridGridError as exc:
            show_error(exc.to_record())
        st.download_button("Download trajectory.csv", trajectory.to_csv(), file_name='trajectory.csv')

# Clean sidebar footer
st.sidebar.markdown("---")
st.sidebar.markdown("⚡ **Hybrid AC/DC Stability Analyzer**")
