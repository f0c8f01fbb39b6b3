//! Case files: strict JSON scenarios with a canonical serialized form.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::cfmetrics::{Floors, MetricMode};
use crate::devices::{Device, Event, GflConverter, GflParams, GfmParams, GfmVsm, LoadModel};
use crate::dynsim::IntegratorConfig;
use crate::error::Error;
use crate::netmodel::{self, Network, RxScope};
use crate::powerflow::{BusKind, PowerFlowSpec};

pub const SCHEMA_VERSION: u32 = 1;

/// Generator dispatch at a source bus (per-unit on the system base).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Dispatch {
    pub bus: usize,
    pub p_gen: f64,
    pub v_set: f64,
    #[serde(default)]
    pub slack: bool,
}

/// Converter entry. Parameters are on the system base.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DeviceSpec {
    GfmVsm {
        name: String,
        bus: usize,
        #[serde(default)]
        params: GfmParams,
    },
    Gfl {
        name: String,
        bus: usize,
        #[serde(default)]
        params: GflParams,
    },
}

impl DeviceSpec {
    pub fn name(&self) -> &str {
        match self {
            DeviceSpec::GfmVsm { name, .. } | DeviceSpec::Gfl { name, .. } => name,
        }
    }

    pub fn bus(&self) -> usize {
        match self {
            DeviceSpec::GfmVsm { bus, .. } | DeviceSpec::Gfl { bus, .. } => *bus,
        }
    }

    pub fn build(&self) -> Device {
        match self {
            DeviceSpec::GfmVsm { name, bus, params } => Device::Gfm(GfmVsm::new(name.clone(), *bus, params.clone())),
            DeviceSpec::Gfl { name, bus, params } => Device::Gfl(GflConverter::new(name.clone(), *bus, params.clone())),
        }
    }

    fn check(&self) -> Vec<String> {
        let mut out = Vec::new();
        let who = format!("device {}", self.name());
        let mut need = |ok: bool, what: &str| {
            if !ok {
                out.push(format!("{who}: {what}"));
            }
        };
        match self {
            DeviceSpec::GfmVsm { params: p, .. } => {
                need(p.inertia_h > 0.0, "inertia_h must be > 0");
                need(p.damping_d >= 0.0, "damping_d must be >= 0");
                need(p.freq_droop_gain >= 0.0, "freq_droop_gain must be >= 0");
                need(p.volt_droop_gain >= 0.0, "volt_droop_gain must be >= 0");
                need(p.coupling_r.hypot(p.coupling_x) > 0.0, "coupling impedance must be nonzero");
                need(p.avr_time_const > 0.0, "avr_time_const must be > 0");
            }
            DeviceSpec::Gfl { params: p, .. } => {
                need(p.freq_droop_gain >= 0.0, "freq_droop_gain must be >= 0");
                need(p.volt_droop_gain >= 0.0, "volt_droop_gain must be >= 0");
                need(p.pll_kp >= 0.0 && p.pll_ki >= 0.0, "PLL gains must be >= 0");
                need(p.current_lag_t > 0.0, "current_lag_t must be > 0");
            }
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum OmegaUnits {
    #[default]
    Pu,
    RadPerS,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MetricsConfig {
    pub mode: MetricMode,
    pub injection_floor: f64,
    pub magnitude_floor: f64,
    pub rocof_offset: f64,
    pub rocof_window: f64,
    pub omega_units: OmegaUnits,
    /// Steady-state threshold on state rates used to detect settling.
    pub settle_tol: f64,
    /// Relative tolerance for the identity checks in `--verify`.
    pub identity_tol: f64,
}

impl MetricsConfig {
    pub fn floors(&self) -> Floors {
        Floors {
            injection: self.injection_floor,
            magnitude: self.magnitude_floor,
        }
    }
}

impl Default for MetricsConfig {
    fn default() -> Self {
        Self {
            mode: MetricMode::Analytic,
            injection_floor: 1e-9,
            magnitude_floor: 1e-6,
            rocof_offset: 0.5,
            rocof_window: 0.1,
            omega_units: OmegaUnits::Pu,
            settle_tol: 1e-6,
            identity_tol: 1e-3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PowerFlowConfig {
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for PowerFlowConfig {
    fn default() -> Self {
        // Far tighter than the usual 1e-8: GFL current commands amplify
        // operating-point angle errors by ~1e4 into state rates.
        Self { tol: 1e-12, max_iter: 30 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CaseScenario {
    pub schema_version: u32,
    pub label: String,
    #[serde(default)]
    pub labels: BTreeMap<String, String>,
    pub network: Network,
    pub dispatch: Vec<Dispatch>,
    #[serde(default)]
    pub loads: Vec<LoadModel>,
    pub devices: Vec<DeviceSpec>,
    #[serde(default)]
    pub events: Vec<Event>,
    #[serde(default)]
    pub integrator: IntegratorConfig,
    #[serde(default)]
    pub power_flow: PowerFlowConfig,
    #[serde(default)]
    pub metrics: MetricsConfig,
    /// Uniform R/X override; branch impedance magnitudes are preserved.
    #[serde(default)]
    pub rx_ratio: Option<f64>,
    #[serde(default)]
    pub rx_scope: RxScope,
}

impl CaseScenario {
    /// All semantic violations, empty when the case is usable.
    pub fn validate(&self) -> Vec<String> {
        let mut out: Vec<String> = netmodel::validate(&self.network)
            .iter()
            .map(|v| v.to_string())
            .collect();
        if self.schema_version != SCHEMA_VERSION {
            out.push(format!(
                "schema_version {} unsupported (expected {SCHEMA_VERSION})",
                self.schema_version
            ));
        }
        let has_bus = |b: usize| self.network.bus_index(b).is_some();

        let mut seen = BTreeSet::new();
        for d in &self.dispatch {
            if !has_bus(d.bus) {
                out.push(format!("dispatch at bus {}: unknown bus", d.bus));
            }
            if !seen.insert(d.bus) {
                out.push(format!("dispatch at bus {}: duplicate entry", d.bus));
            }
            if !(d.v_set > 0.0) {
                out.push(format!("dispatch at bus {}: v_set must be > 0", d.bus));
            }
        }
        match self.dispatch.iter().filter(|d| d.slack).count() {
            1 => {}
            n => out.push(format!("dispatch: expected exactly one slack bus, found {n}")),
        }
        for l in &self.loads {
            if !has_bus(l.bus) {
                out.push(format!("load at bus {}: unknown bus", l.bus));
            }
        }
        if self.devices.is_empty() {
            out.push("devices: at least one source is required".into());
        }
        let mut names = BTreeSet::new();
        for d in &self.devices {
            if !names.insert(d.name()) {
                out.push(format!("device {}: duplicate name", d.name()));
            }
            if !has_bus(d.bus()) {
                out.push(format!("device {}: unknown bus {}", d.name(), d.bus()));
            } else if !seen.contains(&d.bus()) {
                out.push(format!("device {}: bus {} has no dispatch entry", d.name(), d.bus()));
            }
            out.extend(d.check());
        }
        for &b in &seen {
            if !self.devices.iter().any(|d| d.bus() == b) {
                out.push(format!("dispatch at bus {b}: no device connected"));
            }
        }
        let devices: Vec<Device> = self.devices.iter().map(DeviceSpec::build).collect();
        for e in &self.events {
            if let Err(msg) = e.validate(&self.loads, &devices) {
                out.push(msg);
            }
        }
        if let Err(msg) = self.integrator.validate() {
            out.push(msg);
        }
        let m = &self.metrics;
        if !(m.injection_floor > 0.0 && m.magnitude_floor > 0.0) {
            out.push("metrics: floors must be > 0".into());
        }
        if !(m.rocof_window > 0.0 && m.rocof_offset >= 0.0) {
            out.push("metrics: rocof_window must be > 0 and rocof_offset >= 0".into());
        }
        if !(m.settle_tol > 0.0 && m.identity_tol > 0.0) {
            out.push("metrics: settle_tol and identity_tol must be > 0".into());
        }
        if !(self.power_flow.tol > 0.0 && self.power_flow.max_iter > 0) {
            out.push("power_flow: tol and max_iter must be positive".into());
        }
        if let Some(r) = self.rx_ratio {
            if !(r > 0.0 && r.is_finite()) {
                out.push("rx_ratio must be finite and > 0".into());
            }
        }
        out
    }

    /// Network with the R/X override applied.
    pub fn effective_network(&self) -> Result<Network, Error> {
        match self.rx_ratio {
            Some(r) => netmodel::set_rx_ratio(&self.network, r, self.rx_scope),
            None => Ok(self.network.clone()),
        }
    }

    /// Power-flow bus specification: dispatch buses are PV (one slack),
    /// every other bus is PQ with its connected loads as negative injections.
    pub fn power_flow_spec(&self) -> PowerFlowSpec {
        let n = self.network.n_buses();
        let mut spec = PowerFlowSpec::new(n);
        for l in self.loads.iter().filter(|l| l.connected) {
            let b = self.network.bus_index(l.bus).expect("validated");
            spec.buses[b].p -= l.p0;
            spec.buses[b].q -= l.q0;
        }
        for d in &self.dispatch {
            let b = self.network.bus_index(d.bus).expect("validated");
            let s = &mut spec.buses[b];
            s.kind = if d.slack { BusKind::Slack } else { BusKind::Pv };
            s.p += d.p_gen;
            s.v = d.v_set;
        }
        spec
    }

    /// Serialized form with sorted keys and shortest round-trip floats.
    pub fn to_canonical_json(&self) -> String {
        let value = serde_json::to_value(self).expect("scenario serializes");
        let mut s = serde_json::to_string_pretty(&value).expect("value serializes");
        s.push('\n');
        s
    }

    pub fn from_json(text: &str, origin: &str) -> Result<Self, Error> {
        let case: CaseScenario = serde_json::from_str(text).map_err(|source| Error::Parse {
            path: origin.to_string(),
            source,
        })?;
        let violations = case.validate();
        if violations.is_empty() {
            Ok(case)
        } else {
            Err(Error::Validation(violations))
        }
    }
}

/// Reads, parses and validates a case file.
pub fn load_case(path: &Path) -> Result<CaseScenario, Error> {
    let text = std::fs::read_to_string(path)?;
    CaseScenario::from_json(&text, &path.display().to_string())
}
