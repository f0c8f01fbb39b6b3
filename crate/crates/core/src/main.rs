use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use cfsim::cfmetrics::{coi_frequency, decompose, MetricMode};
use cfsim::devices::Device;
use cfsim::harness::export::{self, MetricsTable};
use cfsim::harness::run::{default_run_dir, evaluate, run_scenario, run_sweep, RunSummary, SweepSpec};
use cfsim::harness::{build_ieee39_ibr, load_case, CaseScenario, DeviceSpec, OmegaUnits};
use cfsim::Error;

#[derive(Parser)]
#[command(name = "cfsim", version, about = "Phasor network simulator with complex-frequency metrics")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    Analytic,
    Diff,
}

impl From<Mode> for MetricMode {
    fn from(m: Mode) -> Self {
        match m {
            Mode::Analytic => MetricMode::Analytic,
            Mode::Diff => MetricMode::Diff,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Run one scenario and write all exports.
    Simulate {
        #[arg(long)]
        case: PathBuf,
        #[arg(long)]
        rx: Option<f64>,
        /// Output root; files go to <out>/<label>/<rx>/.
        #[arg(long, default_value = "out")]
        out: PathBuf,
        #[arg(long, value_enum)]
        mode: Option<Mode>,
        /// Exit with status 3 if an identity residual exceeds the tolerance.
        #[arg(long)]
        verify: bool,
        #[arg(long)]
        tol: Option<f64>,
    },
    /// Run a scenario over several R/X ratios concurrently.
    Sweep {
        #[arg(long)]
        case: PathBuf,
        #[arg(long, value_delimiter = ',', required = true)]
        rx: Vec<f64>,
        #[arg(long, default_value = "out")]
        out: PathBuf,
    },
    /// Run the identity checks without writing exports.
    Verify {
        #[arg(long)]
        case: PathBuf,
        #[arg(long)]
        tol: Option<f64>,
        #[arg(long)]
        rx: Option<f64>,
        #[arg(long, value_enum)]
        mode: Option<Mode>,
    },
    /// Write the built-in converter-based 39-bus case.
    Case39 {
        #[arg(long)]
        out: PathBuf,
    },
    /// Difference-mode metrics of an exported trajectory.
    Metrics {
        #[arg(long)]
        traj: PathBuf,
        /// Event list; defaults to events.csv next to the trajectory.
        #[arg(long)]
        events: Option<PathBuf>,
        /// Case providing the base frequency and device inertias for the CoI.
        #[arg(long)]
        case: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, default_value_t = 60.0)]
        base_frequency: f64,
    },
}

enum Failure {
    Error(Error),
    Identity(String),
    Sweep(u8),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Error(e)
    }
}

fn exit_code(e: &Error) -> u8 {
    if e.is_numerical() {
        2
    } else {
        1
    }
}

fn print_summary(s: &RunSummary) {
    let opt = |x: Option<f64>| x.map_or("n/a".to_string(), |v| format!("{v:.6e}"));
    println!("case {} rx {} mode {:?}", s.label, opt(s.rx_ratio), s.mode);
    println!(
        "  steps {}  power flow {} iterations, mismatch {:.3e}",
        s.steps, s.power_flow_iterations, s.power_flow_mismatch
    );
    println!(
        "  residuals: eq16 {:.3e}  eq9 {:.3e}  eq13 {:.3e}",
        s.eq16_max_residual, s.eq9_max_residual, s.eq13_max_residual
    );
    println!(
        "  rocof (pu/s): coi {}  v_sys {}  i_sys {}",
        opt(s.rocof_coi),
        opt(s.rocof_v_sys),
        opt(s.rocof_i_sys)
    );
    println!(
        "  steady |s_l| {:.6e}  peak |w_v_sys-1| {:.3e}  peak |w_i_sys-1| {:.3e}  settled at {}",
        s.steady_loss_magnitude,
        s.peak_omega_v_sys,
        s.peak_omega_i_sys,
        opt(s.settling_time)
    );
}

fn check_identities(s: &RunSummary, tol: f64) -> Result<(), Failure> {
    let breaches: Vec<String> = [
        ("eq16", s.eq16_max_residual),
        ("eq9", s.eq9_max_residual),
        ("eq13", s.eq13_max_residual),
    ]
    .iter()
    .filter(|(_, v)| !(*v <= tol))
    .map(|(n, v)| format!("{n} residual {v:.3e} exceeds {tol:.1e}"))
    .collect();
    if breaches.is_empty() {
        println!("identities within {tol:.1e}");
        Ok(())
    } else {
        Err(Failure::Identity(breaches.join("; ")))
    }
}

fn configured(case: &Path, rx: Option<f64>, mode: Option<Mode>) -> Result<CaseScenario, Failure> {
    let mut c = load_case(case)?;
    if rx.is_some() {
        c.rx_ratio = rx;
    }
    if let Some(m) = mode {
        c.metrics.mode = m.into();
    }
    let violations = c.validate();
    if !violations.is_empty() {
        return Err(Error::Validation(violations).into());
    }
    Ok(c)
}

fn stage(e: cfsim::harness::StageError) -> Failure {
    eprintln!("failed during {}", e.stage);
    Failure::Error(e.error)
}

fn execute(cmd: Command) -> Result<(), Failure> {
    match cmd {
        Command::Simulate {
            case,
            rx,
            out,
            mode,
            verify,
            tol,
        } => {
            let c = configured(&case, rx, mode)?;
            let dir = default_run_dir(&out, &c);
            let bundle = run_scenario(&c, &dir).map_err(stage)?;
            print_summary(&bundle.summary);
            println!("  exports in {}", dir.display());
            if verify {
                check_identities(&bundle.summary, tol.unwrap_or(c.metrics.identity_tol))?;
            }
        }
        Command::Sweep { case, rx, out } => {
            let base = configured(&case, None, None)?;
            let rows = run_sweep(&SweepSpec {
                base,
                rx_values: rx,
                out_root: out,
            })?;
            let mut failed = None;
            for row in &rows {
                match &row.outcome {
                    Ok(s) => print_summary(s),
                    Err(e) => {
                        eprintln!("rx {}: {e}", row.rx);
                        failed.get_or_insert(exit_code(&e.error));
                    }
                }
            }
            if let Some(code) = failed {
                return Err(Failure::Sweep(code));
            }
        }
        Command::Verify { case, tol, rx, mode } => {
            let c = configured(&case, rx, mode)?;
            let bundle = evaluate(&c).map_err(stage)?;
            print_summary(&bundle.summary);
            check_identities(&bundle.summary, tol.unwrap_or(c.metrics.identity_tol))?;
        }
        Command::Case39 { out } => {
            if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
                std::fs::create_dir_all(parent).map_err(Error::from)?;
            }
            std::fs::write(&out, build_ieee39_ibr().to_canonical_json()).map_err(Error::from)?;
            println!("wrote {}", out.display());
        }
        Command::Metrics {
            traj,
            events,
            case,
            out,
            base_frequency,
        } => {
            let (omega_base, devices, units, floors) = match &case {
                Some(p) => {
                    let c = load_case(p)?;
                    let devices: Vec<Device> = c.devices.iter().map(DeviceSpec::build).collect();
                    (
                        2.0 * std::f64::consts::PI * c.network.base_frequency,
                        devices,
                        c.metrics.omega_units,
                        c.metrics.floors(),
                    )
                }
                None => (
                    2.0 * std::f64::consts::PI * base_frequency,
                    Vec::new(),
                    OmegaUnits::Pu,
                    Default::default(),
                ),
            };
            let dir = traj.parent().unwrap_or(Path::new(".")).to_path_buf();
            let mut t = export::read_trajectory(&traj, omega_base)?;
            let events = events.unwrap_or_else(|| dir.join(export::EVENTS_FILE));
            if events.exists() {
                t.events = export::read_events(&events)?;
            }
            let dec = decompose(&t, MetricMode::Diff, floors)?;
            let coi = if devices.is_empty() {
                Vec::new()
            } else {
                coi_frequency(&t, &devices)?
            };
            let out = out.unwrap_or_else(|| dir.join("postprocessed"));
            std::fs::create_dir_all(&out).map_err(Error::from)?;
            let table = MetricsTable::new(&dec, &coi, omega_base, units);
            table.write_metrics(&t.times, &out.join(export::METRICS_FILE))?;
            table.write_panels(&t.times, &out)?;
            println!(
                "{} rows, eq16 residual {:.3e}, {} undefined points; wrote {}",
                t.n_rows(),
                dec.max_residual(),
                dec.undefined_points(),
                out.display()
            );
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    // Usage errors count as validation failures; 2 is reserved for numerics.
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match execute(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Error(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
        Err(Failure::Identity(msg)) => {
            eprintln!("identity check failed: {msg}");
            ExitCode::from(3)
        }
        Err(Failure::Sweep(code)) => {
            eprintln!("sweep: one or more values failed");
            ExitCode::from(code)
        }
    }
}
