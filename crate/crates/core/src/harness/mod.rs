//! Scenario files, the built-in 39-bus case, runs, sweeps and exports.

pub mod case;
pub mod export;
pub mod ieee39;
pub mod run;

pub use case::{load_case, CaseScenario, DeviceSpec, Dispatch, MetricsConfig, OmegaUnits};
pub use ieee39::build_ieee39_ibr;
pub use run::{evaluate, run_scenario, run_sweep, RunBundle, RunSummary, StageError, SweepRow, SweepSpec};
