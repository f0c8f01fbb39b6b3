//! End-to-end execution of a scenario.

use std::path::{Path, PathBuf};

use num_complex::Complex64 as C64;
use serde::Serialize;

use crate::cfmetrics::{
    coi_frequency, decompose, omega_pu, per_bus_identities, rocof_at, DecompositionSeries, IdentityReport, MetricMode,
};
use crate::devices::Device;
use crate::dynsim::{self, assemble, initialize_devices, DaeSystem, Trajectory};
use crate::error::Error;
use crate::netmodel::Network;
use crate::powerflow::{solve_power_flow, PowerFlowSolution};

use super::case::{CaseScenario, DeviceSpec};
use super::export;

/// Stage at which a run failed.
#[derive(Debug)]
pub struct StageError {
    pub stage: &'static str,
    pub error: Error,
    pub partial: Option<Box<Trajectory>>,
}

impl std::fmt::Display for StageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}: {}", self.stage, self.error)
    }
}

impl std::error::Error for StageError {}

fn at(stage: &'static str) -> impl Fn(Error) -> StageError {
    move |error| StageError {
        stage,
        error,
        partial: None,
    }
}

/// Power flow, initialization and assembly of a scenario.
pub fn prepare(case: &CaseScenario) -> Result<(Network, PowerFlowSolution, DaeSystem), StageError> {
    let violations = case.validate();
    if !violations.is_empty() {
        return Err(at("validate")(Error::Validation(violations)));
    }
    let network = case.effective_network().map_err(at("network"))?;
    let pf = solve_power_flow(
        &network,
        &case.power_flow_spec(),
        case.power_flow.tol,
        case.power_flow.max_iter,
    )
    .map_err(at("power flow"))?;
    let mut devices: Vec<Device> = case.devices.iter().map(DeviceSpec::build).collect();
    let mut loads = case.loads.clone();
    let x0 = initialize_devices(&network, &mut devices, &mut loads, &pf).map_err(at("initialize"))?;
    let system = assemble(&network, devices, loads, case.events.clone(), &pf, x0).map_err(at("assemble"))?;
    Ok((network, pf, system))
}

/// Simulates a scenario and returns the recorded trajectory.
pub fn simulate(case: &CaseScenario) -> Result<(PowerFlowSolution, Trajectory), StageError> {
    let (_, pf, mut system) = prepare(case)?;
    dynsim::run(&mut system, &case.integrator)
        .map(|t| (pf, t))
        .map_err(|f| StageError {
            stage: "simulate",
            error: f.error,
            partial: Some(Box::new(f.partial)),
        })
}

/// Everything produced by one evaluated scenario.
#[derive(Debug, Clone)]
pub struct RunBundle {
    pub case: CaseScenario,
    pub power_flow: PowerFlowSolution,
    pub devices: Vec<Device>,
    pub trajectory: Trajectory,
    pub decomposition: DecompositionSeries,
    pub identities: IdentityReport,
    /// CoI speed in per unit.
    pub coi: Vec<f64>,
    pub summary: RunSummary,
}

/// Scalar results of a run. Frequencies in per unit, RoCoF in pu/s.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunSummary {
    pub label: String,
    pub rx_ratio: Option<f64>,
    pub mode: MetricMode,
    pub steps: usize,
    pub power_flow_iterations: usize,
    pub power_flow_mismatch: f64,
    pub eq16_max_residual: f64,
    pub eq9_max_residual: f64,
    pub eq13_max_residual: f64,
    pub undefined_points: usize,
    pub excluded_buses: Vec<usize>,
    pub rocof_coi: Option<f64>,
    pub rocof_v_sys: Option<f64>,
    pub rocof_i_sys: Option<f64>,
    pub steady_loss_magnitude: f64,
    pub peak_omega_v_sys: f64,
    pub peak_omega_i_sys: f64,
    /// Largest `|η|` of the loss, voltage and current components (1/s).
    pub max_metric_magnitude: f64,
    /// First time after the last event from which the system stays settled.
    pub settling_time: Option<f64>,
    pub guard_flags: usize,
}

fn peak_deviation(series: &[Option<C64>], omega_base: f64) -> f64 {
    series
        .iter()
        .flatten()
        .fold(0.0, |m, z| m.max((omega_pu(*z, omega_base) - 1.0).abs()))
}

fn settling_time(traj: &Trajectory, tol: f64) -> Option<f64> {
    let start = traj.events.last().map_or(0, |e| e.step);
    let mut first = None;
    for row in (start..traj.n_rows()).rev() {
        match traj.settling_residual(row) {
            Some(r) if r < tol => first = Some(row),
            _ => break,
        }
    }
    first.map(|r| traj.times[r])
}

fn summarize(
    case: &CaseScenario,
    pf: &PowerFlowSolution,
    traj: &Trajectory,
    dec: &DecompositionSeries,
    ids: &IdentityReport,
    coi: &[f64],
) -> RunSummary {
    let m = &case.metrics;
    let wb = traj.omega_base;
    let pu = |s: &[Option<C64>]| -> Option<Vec<f64>> { s.iter().map(|z| z.map(|z| omega_pu(z, wb))).collect() };
    let rocof = |s: Option<Vec<f64>>| -> Option<f64> {
        let t_event = traj.events.first()?.time;
        rocof_at(&traj.times, &s?, t_event, m.rocof_offset, m.rocof_window).ok()
    };
    let max_metric = [&dec.eta_sl, &dec.eta_v_sys, &dec.eta_i_sys]
        .iter()
        .flat_map(|s| s.iter().flatten())
        .fold(0.0f64, |a, z| a.max(z.norm()));
    RunSummary {
        label: case.label.clone(),
        rx_ratio: case.rx_ratio,
        mode: dec.mode,
        steps: traj.n_rows().saturating_sub(1),
        power_flow_iterations: pf.iterations,
        power_flow_mismatch: pf.mismatch_norm,
        eq16_max_residual: dec.max_residual(),
        eq9_max_residual: ids.max_power().value,
        eq13_max_residual: ids.max_current().value,
        undefined_points: dec.undefined_points(),
        excluded_buses: ids.excluded.clone(),
        rocof_coi: rocof((!coi.is_empty()).then(|| coi.to_vec())),
        rocof_v_sys: rocof(pu(&dec.eta_v_sys)),
        rocof_i_sys: rocof(pu(&dec.eta_i_sys)),
        steady_loss_magnitude: dec.s_l.last().map_or(f64::NAN, |s| s.norm()),
        peak_omega_v_sys: peak_deviation(&dec.eta_v_sys, wb),
        peak_omega_i_sys: peak_deviation(&dec.eta_i_sys, wb),
        max_metric_magnitude: max_metric,
        settling_time: settling_time(traj, m.settle_tol),
        guard_flags: traj.guard_flags.len(),
    }
}

/// Power flow, simulation and metric evaluation without any file output.
pub fn evaluate(case: &CaseScenario) -> Result<RunBundle, StageError> {
    let (_, pf, mut system) = prepare(case)?;
    let devices = system.devices.clone();
    let trajectory = dynsim::run(&mut system, &case.integrator).map_err(|f| StageError {
        stage: "simulate",
        error: f.error,
        partial: Some(Box::new(f.partial)),
    })?;
    let floors = case.metrics.floors();
    let mode = case.metrics.mode;
    let decomposition = decompose(&trajectory, mode, floors).map_err(at("decompose"))?;
    let identities = per_bus_identities(&trajectory, mode, floors).map_err(at("identities"))?;
    let coi = match coi_frequency(&trajectory, &devices) {
        Ok(c) => c,
        Err(Error::Undefined(_)) => Vec::new(),
        Err(e) => return Err(at("coi")(e)),
    };
    let summary = summarize(case, &pf, &trajectory, &decomposition, &identities, &coi);
    Ok(RunBundle {
        case: case.clone(),
        power_flow: pf,
        devices,
        trajectory,
        decomposition,
        identities,
        coi,
        summary,
    })
}

/// Directory name of an R/X value; `native` when the case is unmodified.
pub fn rx_dir_name(rx: Option<f64>) -> String {
    rx.map_or_else(|| "native".to_string(), |r| format!("{r}"))
}

/// Default output directory `<root>/<label>/<rx>`.
pub fn default_run_dir(root: &Path, case: &CaseScenario) -> PathBuf {
    root.join(&case.label).join(rx_dir_name(case.rx_ratio))
}

/// Evaluates a scenario and writes all exports into `out_dir`.
pub fn run_scenario(case: &CaseScenario, out_dir: &Path) -> Result<RunBundle, StageError> {
    let bundle = evaluate(case)?;
    export::write_bundle(&bundle, out_dir).map_err(at("export"))?;
    Ok(bundle)
}

/// A set of runs of one base case over R/X values.
#[derive(Debug, Clone)]
pub struct SweepSpec {
    pub base: CaseScenario,
    pub rx_values: Vec<f64>,
    /// Root under which `<label>/<rx>` directories are created.
    pub out_root: PathBuf,
}

/// One row of the sweep comparison table.
#[derive(Debug)]
pub struct SweepRow {
    pub rx: f64,
    pub dir: PathBuf,
    pub outcome: Result<RunSummary, StageError>,
}

/// Per-value directories; repeated values get a numeric suffix.
fn sweep_dirs(spec: &SweepSpec) -> Vec<PathBuf> {
    let base = spec.out_root.join(&spec.base.label);
    let mut seen: Vec<String> = Vec::new();
    spec.rx_values
        .iter()
        .map(|&r| {
            let name = rx_dir_name(Some(r));
            let n = seen.iter().filter(|s| **s == name).count();
            seen.push(name.clone());
            if n == 0 {
                base.join(name)
            } else {
                base.join(format!("{name}-{}", n + 1))
            }
        })
        .collect()
}

/// Runs every value concurrently and writes `sweep.csv` once all have
/// finished. Failed values are reported in their rows.
pub fn run_sweep(spec: &SweepSpec) -> Result<Vec<SweepRow>, Error> {
    if spec.rx_values.is_empty() {
        return Err(Error::Validation(vec!["sweep: no R/X values given".into()]));
    }
    let violations = spec.base.validate();
    if !violations.is_empty() {
        return Err(Error::Validation(violations));
    }
    let dirs = sweep_dirs(spec);
    let rows: Vec<SweepRow> = std::thread::scope(|s| {
        let handles: Vec<_> = spec
            .rx_values
            .iter()
            .zip(&dirs)
            .map(|(&rx, dir)| {
                let mut case = spec.base.clone();
                case.rx_ratio = Some(rx);
                s.spawn(move || SweepRow {
                    rx,
                    dir: dir.clone(),
                    outcome: run_scenario(&case, dir).map(|b| b.summary),
                })
            })
            .collect();
        handles.into_iter().map(|h| h.join().expect("sweep worker panicked")).collect()
    });
    let table = spec.out_root.join(&spec.base.label).join("sweep.csv");
    export::write_sweep_table(&rows, &table)?;
    Ok(rows)
}
