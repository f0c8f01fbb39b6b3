use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("branch {branch} ({from}-{to}) has zero series impedance")]
    ZeroImpedance { branch: usize, from: usize, to: usize },

    #[error("{context}: unknown bus {bus}")]
    UnknownBus { context: String, bus: usize },

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("validation failed:\n  {}", .0.join("\n  "))]
    Validation(Vec<String>),

    #[error("power flow did not converge after {iterations} iterations (mismatch {mismatch:.3e})")]
    PowerFlowDiverged { iterations: usize, mismatch: f64 },

    #[error("singular matrix in {context}")]
    Singular { context: String },

    #[error("device {device} is not at equilibrium: max derivative {residual:.3e}")]
    NotAtEquilibrium { device: String, residual: f64 },

    #[error("no voltage sources: the network has no devices to energize it")]
    NoSources,

    #[error("Newton iteration failed at t = {time:.6} s after {iterations} iterations (residual {residual:.3e})")]
    NewtonFailed {
        time: f64,
        iterations: usize,
        residual: f64,
    },

    #[error("RoCoF window [{start:.4}, {end:.4}] s lies outside the series [{first:.4}, {last:.4}] s")]
    WindowOutOfBounds {
        start: f64,
        end: f64,
        first: f64,
        last: f64,
    },

    #[error("{0}")]
    Undefined(String),

    #[error("case file {path}: {source}")]
    Parse {
        path: String,
        #[source]
        source: serde_json::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Whether the failure comes from the numerics rather than the inputs.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            Error::PowerFlowDiverged { .. }
                | Error::Singular { .. }
                | Error::NotAtEquilibrium { .. }
                | Error::NewtonFailed { .. }
                | Error::Undefined(_)
        )
    }
}
