//! Converter and load models and the disturbance events that act on them.
//!
//! All quantities are per-unit on the system base. Device state vectors use
//! a fixed layout:
//!
//! | device | states |
//! |--------|--------|
//! | GFM-VSM | `delta`, `omega`, `emf` |
//! | GFL | `theta_pll`, `x_pll`, `i_d`, `i_q` |
//!
//! Each device injects `I = I_src(x) − y_dev · v` into its bus, where
//! `y_dev` is a constant admittance (the GFM coupling branch, zero for the
//! GFL current source). Constant-impedance loads are folded into the nodal
//! matrix and carry no state.

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::Error;

/// Below this terminal voltage the GFL current commands are frozen.
pub const LOW_VOLTAGE_GUARD: f64 = 0.01;

fn wrap_angle(a: f64) -> f64 {
    let two_pi = 2.0 * std::f64::consts::PI;
    let w = a.rem_euclid(two_pi);
    if w > std::f64::consts::PI {
        w - two_pi
    } else {
        w
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GfmParams {
    pub inertia_h: f64,
    pub damping_d: f64,
    pub freq_droop_gain: f64,
    pub volt_droop_gain: f64,
    pub coupling_r: f64,
    pub coupling_x: f64,
    pub avr_time_const: f64,
}

impl Default for GfmParams {
    fn default() -> Self {
        Self {
            inertia_h: 3.0,
            damping_d: 1.0,
            freq_droop_gain: 20.0,
            volt_droop_gain: 10.0,
            coupling_r: 0.0,
            coupling_x: 0.15,
            avr_time_const: 0.05,
        }
    }
}

impl GfmParams {
    /// Converts parameters given on a device rating to the system base.
    pub fn on_system_base(&self, rating_mva: f64, base_mva: f64) -> Self {
        let k = rating_mva / base_mva;
        Self {
            inertia_h: self.inertia_h * k,
            damping_d: self.damping_d * k,
            freq_droop_gain: self.freq_droop_gain * k,
            volt_droop_gain: self.volt_droop_gain / k,
            coupling_r: self.coupling_r / k,
            coupling_x: self.coupling_x / k,
            avr_time_const: self.avr_time_const,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GflParams {
    pub freq_droop_gain: f64,
    pub volt_droop_gain: f64,
    pub pll_kp: f64,
    pub pll_ki: f64,
    pub current_lag_t: f64,
}

impl Default for GflParams {
    fn default() -> Self {
        Self {
            freq_droop_gain: 20.0,
            volt_droop_gain: 10.0,
            pll_kp: 10.0,
            pll_ki: 50.0,
            current_lag_t: 0.02,
        }
    }
}

impl GflParams {
    pub fn on_system_base(&self, rating_mva: f64, base_mva: f64) -> Self {
        let k = rating_mva / base_mva;
        Self {
            freq_droop_gain: self.freq_droop_gain * k,
            volt_droop_gain: self.volt_droop_gain * k,
            ..self.clone()
        }
    }
}

/// Grid-forming virtual synchronous machine: swing equation with frequency
/// droop and a first-order voltage controller with reactive droop, driving
/// an internal EMF behind a coupling impedance.
#[derive(Debug, Clone, PartialEq)]
pub struct GfmVsm {
    pub name: String,
    pub bus: usize,
    pub params: GfmParams,
    pub p_ref: f64,
    pub q_ref: f64,
    pub v_ref: f64,
}

impl GfmVsm {
    pub const STATES: [&'static str; 3] = ["delta", "omega", "emf"];

    pub fn new(name: impl Into<String>, bus: usize, params: GfmParams) -> Self {
        Self {
            name: name.into(),
            bus,
            params,
            p_ref: 0.0,
            q_ref: 0.0,
            v_ref: 1.0,
        }
    }

    pub fn coupling_impedance(&self) -> Complex64 {
        Complex64::new(self.params.coupling_r, self.params.coupling_x)
    }

    pub fn internal_emf(&self, x: &[f64]) -> Complex64 {
        Complex64::from_polar(x[2], x[0])
    }

    /// Power delivered at the terminal, `v · conj((ē − v) / z_c)`.
    pub fn terminal_power(&self, x: &[f64], v: Complex64) -> Complex64 {
        v * ((self.internal_emf(x) - v) / self.coupling_impedance()).conj()
    }

    /// Sets references and returns the equilibrium state that delivers `s`
    /// at terminal voltage `v`.
    pub fn initialize(&mut self, v: Complex64, s: Complex64) -> Vec<f64> {
        let current = (s / v).conj();
        let emf = v + self.coupling_impedance() * current;
        self.p_ref = s.re;
        self.q_ref = s.im;
        self.v_ref = v.norm();
        vec![emf.arg(), 1.0, emf.norm()]
    }

    pub fn derivatives(&self, x: &[f64], v: Complex64, omega_base: f64, out: &mut [f64]) {
        let p = &self.params;
        let s = self.terminal_power(x, v);
        let dw = x[1] - 1.0;
        out[0] = omega_base * dw;
        out[1] = (self.p_ref - p.freq_droop_gain * dw - s.re - p.damping_d * dw) / (2.0 * p.inertia_h);
        out[2] = (self.v_ref - v.norm() - p.volt_droop_gain * (s.im - self.q_ref)) / p.avr_time_const;
    }

    /// `∂f/∂x` (3×3, row-major) and `∂f/∂(v_re, v_im)` (3×2, row-major).
    pub fn jacobian(&self, x: &[f64], v: Complex64, omega_base: f64, fx: &mut [f64], fv: &mut [f64]) {
        let p = &self.params;
        let yc_conj = self.coupling_impedance().inv().conj();
        let emf_conj = self.internal_emf(x).conj();
        // S = conj(y_c) (v conj(ē) − |v|²)
        let w = v * emf_conj;
        let j = Complex64::i();
        let ds_ddelta = yc_conj * (-j * w);
        let ds_demf = yc_conj * (w / x[2]);
        let ds_dvr = yc_conj * (emf_conj - 2.0 * v.re);
        let ds_dvi = yc_conj * (j * emf_conj - 2.0 * v.im);
        let vm = v.norm();
        let two_h = 2.0 * p.inertia_h;
        let t = p.avr_time_const;
        let kv = p.volt_droop_gain;

        fx.fill(0.0);
        fx[1] = omega_base;
        fx[3] = -ds_ddelta.re / two_h;
        fx[4] = -(p.freq_droop_gain + p.damping_d) / two_h;
        fx[5] = -ds_demf.re / two_h;
        fx[6] = -kv * ds_ddelta.im / t;
        fx[8] = -kv * ds_demf.im / t;

        fv.fill(0.0);
        fv[2] = -ds_dvr.re / two_h;
        fv[3] = -ds_dvi.re / two_h;
        fv[4] = (-v.re / vm - kv * ds_dvr.im) / t;
        fv[5] = (-v.im / vm - kv * ds_dvi.im) / t;
    }

    pub fn source_current(&self, x: &[f64]) -> Complex64 {
        self.internal_emf(x) / self.coupling_impedance()
    }

    /// `∂I_src/∂x` for each state.
    pub fn source_sensitivity(&self, x: &[f64], out: &mut [Complex64]) {
        let i = self.source_current(x);
        out[0] = Complex64::i() * i;
        out[1] = Complex64::new(0.0, 0.0);
        out[2] = i / x[2];
    }
}

/// Grid-following converter: PI phase-locked loop and first-order tracking
/// of droop-adjusted current commands in the PLL frame.
#[derive(Debug, Clone, PartialEq)]
pub struct GflConverter {
    pub name: String,
    pub bus: usize,
    pub params: GflParams,
    pub p_ref: f64,
    pub q_ref: f64,
    pub v_ref: f64,
}

/// Result of a GFL derivative evaluation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GflRates {
    pub omega_pll: f64,
    pub guard_active: bool,
}

impl GflConverter {
    pub const STATES: [&'static str; 4] = ["theta_pll", "x_pll", "i_d", "i_q"];

    pub fn new(name: impl Into<String>, bus: usize, params: GflParams) -> Self {
        Self {
            name: name.into(),
            bus,
            params,
            p_ref: 0.0,
            q_ref: 0.0,
            v_ref: 1.0,
        }
    }

    pub fn initialize(&mut self, v: Complex64, s: Complex64) -> Vec<f64> {
        let theta = v.arg();
        let dq = (s / v).conj() * Complex64::from_polar(1.0, -theta);
        self.p_ref = s.re;
        self.q_ref = s.im;
        self.v_ref = v.norm();
        vec![theta, 0.0, dq.re, dq.im]
    }

    /// PLL angle error `∠v − θ_pll`, wrapped to (−π, π].
    pub fn angle_error(&self, x: &[f64], v: Complex64) -> f64 {
        wrap_angle(v.arg() - x[0])
    }

    pub fn derivatives(&self, x: &[f64], v: Complex64, omega_base: f64, out: &mut [f64]) -> GflRates {
        let p = &self.params;
        let err = self.angle_error(x, v);
        let dw = p.pll_kp * err + x[1];
        out[0] = omega_base * dw;
        out[1] = p.pll_ki * err;
        let vm = v.norm();
        let guard_active = vm < LOW_VOLTAGE_GUARD;
        if guard_active {
            out[2] = 0.0;
            out[3] = 0.0;
        } else {
            let id_cmd = (self.p_ref - p.freq_droop_gain * dw) / vm;
            let iq_cmd = -(self.q_ref + p.volt_droop_gain * (self.v_ref - vm)) / vm;
            out[2] = (id_cmd - x[2]) / p.current_lag_t;
            out[3] = (iq_cmd - x[3]) / p.current_lag_t;
        }
        GflRates {
            omega_pll: 1.0 + dw,
            guard_active,
        }
    }

    /// `∂f/∂x` (4×4, row-major) and `∂f/∂(v_re, v_im)` (4×2, row-major).
    pub fn jacobian(&self, x: &[f64], v: Complex64, omega_base: f64, fx: &mut [f64], fv: &mut [f64]) {
        let p = &self.params;
        let vm2 = v.norm_sqr();
        let vm = vm2.sqrt();
        // ∂ε/∂v_re, ∂ε/∂v_im and ∂|v|/∂v_re, ∂|v|/∂v_im
        let de = [-v.im / vm2, v.re / vm2];
        let dvm = [v.re / vm, v.im / vm];
        let err = self.angle_error(x, v);
        let dw = p.pll_kp * err + x[1];

        fx.fill(0.0);
        fv.fill(0.0);
        fx[0] = -omega_base * p.pll_kp;
        fx[1] = omega_base;
        fx[4] = -p.pll_ki;
        for c in 0..2 {
            fv[c] = omega_base * p.pll_kp * de[c];
            fv[2 + c] = p.pll_ki * de[c];
        }
        if vm < LOW_VOLTAGE_GUARD {
            return;
        }
        let tc = p.current_lag_t;
        let kf = p.freq_droop_gain;
        // i_d row
        fx[8] = kf * p.pll_kp / (vm * tc);
        fx[9] = -kf / (vm * tc);
        fx[10] = -1.0 / tc;
        let id_num = self.p_ref - kf * dw;
        for c in 0..2 {
            fv[4 + c] = (-kf * p.pll_kp * de[c] / vm - id_num * dvm[c] / vm2) / tc;
        }
        // i_q row: (−(q_ref + kv v_ref)/|v| + kv − i_q) / T
        fx[15] = -1.0 / tc;
        let iq_num = self.q_ref + p.volt_droop_gain * self.v_ref;
        for c in 0..2 {
            fv[6 + c] = iq_num * dvm[c] / (vm2 * tc);
        }
    }

    pub fn source_current(&self, x: &[f64]) -> Complex64 {
        Complex64::new(x[2], x[3]) * Complex64::from_polar(1.0, x[0])
    }

    pub fn source_sensitivity(&self, x: &[f64], out: &mut [Complex64]) {
        let rot = Complex64::from_polar(1.0, x[0]);
        out[0] = Complex64::i() * self.source_current(x);
        out[1] = Complex64::new(0.0, 0.0);
        out[2] = rot;
        out[3] = Complex64::i() * rot;
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Device {
    Gfm(GfmVsm),
    Gfl(GflConverter),
}

impl Device {
    pub fn name(&self) -> &str {
        match self {
            Device::Gfm(d) => &d.name,
            Device::Gfl(d) => &d.name,
        }
    }

    pub fn bus(&self) -> usize {
        match self {
            Device::Gfm(d) => d.bus,
            Device::Gfl(d) => d.bus,
        }
    }

    pub fn state_names(&self) -> &'static [&'static str] {
        match self {
            Device::Gfm(_) => &GfmVsm::STATES,
            Device::Gfl(_) => &GflConverter::STATES,
        }
    }

    pub fn n_states(&self) -> usize {
        self.state_names().len()
    }

    /// Virtual inertia constant, if the device has one.
    pub fn inertia(&self) -> Option<f64> {
        match self {
            Device::Gfm(d) => Some(d.params.inertia_h),
            Device::Gfl(_) => None,
        }
    }

    /// Index of the per-unit speed state for inertial devices.
    pub fn speed_state(&self) -> Option<usize> {
        match self {
            Device::Gfm(_) => Some(1),
            Device::Gfl(_) => None,
        }
    }

    /// Indices of states that are absolute angles in the synchronous frame.
    pub fn angle_states(&self) -> &'static [usize] {
        match self {
            Device::Gfm(_) => &[0],
            Device::Gfl(_) => &[0],
        }
    }

    pub fn initialize(&mut self, v: Complex64, s: Complex64) -> Vec<f64> {
        match self {
            Device::Gfm(d) => d.initialize(v, s),
            Device::Gfl(d) => d.initialize(v, s),
        }
    }

    /// Writes `dx/dt` into `out`; returns `true` when a low-voltage guard
    /// froze part of the dynamics.
    pub fn derivatives(&self, x: &[f64], v: Complex64, omega_base: f64, out: &mut [f64]) -> bool {
        match self {
            Device::Gfm(d) => {
                d.derivatives(x, v, omega_base, out);
                false
            }
            Device::Gfl(d) => d.derivatives(x, v, omega_base, out).guard_active,
        }
    }

    pub fn jacobian(&self, x: &[f64], v: Complex64, omega_base: f64, fx: &mut [f64], fv: &mut [f64]) {
        match self {
            Device::Gfm(d) => d.jacobian(x, v, omega_base, fx, fv),
            Device::Gfl(d) => d.jacobian(x, v, omega_base, fx, fv),
        }
    }

    pub fn source_current(&self, x: &[f64]) -> Complex64 {
        match self {
            Device::Gfm(d) => d.source_current(x),
            Device::Gfl(d) => d.source_current(x),
        }
    }

    pub fn source_sensitivity(&self, x: &[f64], out: &mut [Complex64]) {
        match self {
            Device::Gfm(d) => d.source_sensitivity(x, out),
            Device::Gfl(d) => d.source_sensitivity(x, out),
        }
    }

    /// Constant admittance `y_dev` in `I = I_src(x) − y_dev · v`.
    pub fn shunt_admittance(&self) -> Complex64 {
        match self {
            Device::Gfm(d) => d.coupling_impedance().inv(),
            Device::Gfl(_) => Complex64::new(0.0, 0.0),
        }
    }

    /// Current injected into the bus at terminal voltage `v`.
    pub fn injected_current(&self, x: &[f64], v: Complex64) -> Complex64 {
        self.source_current(x) - self.shunt_admittance() * v
    }
}

fn one() -> f64 {
    1.0
}

fn yes() -> bool {
    true
}

/// Constant-impedance load. The admittance is derived so that the load
/// draws `(p0, q0)` at the voltage magnitude it was initialized at.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LoadModel {
    pub bus: usize,
    pub p0: f64,
    pub q0: f64,
    #[serde(default = "yes")]
    pub connected: bool,
    #[serde(skip, default = "one")]
    pub init_voltage: f64,
}

impl LoadModel {
    pub fn new(bus: usize, p0: f64, q0: f64) -> Self {
        Self {
            bus,
            p0,
            q0,
            connected: true,
            init_voltage: 1.0,
        }
    }

    pub fn admittance(&self) -> Complex64 {
        if !self.connected {
            return Complex64::new(0.0, 0.0);
        }
        Complex64::new(self.p0, -self.q0) / (self.init_voltage * self.init_voltage)
    }

    /// Complex power drawn at terminal voltage `v`.
    pub fn demand(&self, v: Complex64) -> Complex64 {
        self.admittance().conj() * v.norm_sqr()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Setpoint {
    PRef,
    QRef,
    VRef,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum EventAction {
    /// Disconnects every load at `bus`.
    LoadOutage { bus: usize },
    /// Adds `(dp, dq)` to the load at `bus`.
    LoadStep { bus: usize, dp: f64, dq: f64 },
    /// Adds `delta` to a named device reference.
    SetpointStep {
        device: String,
        setpoint: Setpoint,
        delta: f64,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Event {
    pub time: f64,
    pub action: EventAction,
}

impl Event {
    pub fn load_outage(time: f64, bus: usize) -> Self {
        Self {
            time,
            action: EventAction::LoadOutage { bus },
        }
    }

    pub fn describe(&self) -> String {
        match &self.action {
            EventAction::LoadOutage { bus } => format!("load_outage bus {bus}"),
            EventAction::LoadStep { bus, dp, dq } => format!("load_step bus {bus} dp={dp} dq={dq}"),
            EventAction::SetpointStep {
                device,
                setpoint,
                delta,
            } => format!("setpoint_step {device} {setpoint:?} {delta}"),
        }
    }

    /// Checks that the event time and target are valid for the given
    /// loads and devices.
    pub fn validate(&self, loads: &[LoadModel], devices: &[Device]) -> Result<(), String> {
        if !(self.time >= 0.0 && self.time.is_finite()) {
            return Err(format!("event '{}': time must be >= 0", self.describe()));
        }
        let has_load = |bus: usize| loads.iter().any(|l| l.bus == bus);
        match &self.action {
            EventAction::LoadOutage { bus } | EventAction::LoadStep { bus, .. } if !has_load(*bus) => {
                Err(format!("event '{}': no load at bus {bus}", self.describe()))
            }
            EventAction::SetpointStep { device, .. } if !devices.iter().any(|d| d.name() == device) => {
                Err(format!("event '{}': unknown device {device}", self.describe()))
            }
            _ => Ok(()),
        }
    }
}

/// What the simulator must redo after an event.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EventEffect {
    pub rebuild_network: bool,
}

/// Applies an event instantaneously to loads and devices.
pub fn apply_event(event: &Event, loads: &mut [LoadModel], devices: &mut [Device]) -> Result<EventEffect, Error> {
    event.validate(loads, devices).map_err(Error::InvalidParameter)?;
    match &event.action {
        EventAction::LoadOutage { bus } => {
            for load in loads.iter_mut().filter(|l| l.bus == *bus) {
                load.connected = false;
            }
            Ok(EventEffect { rebuild_network: true })
        }
        EventAction::LoadStep { bus, dp, dq } => {
            if let Some(load) = loads.iter_mut().find(|l| l.bus == *bus) {
                load.p0 += dp;
                load.q0 += dq;
            }
            Ok(EventEffect { rebuild_network: true })
        }
        EventAction::SetpointStep {
            device,
            setpoint,
            delta,
        } => {
            let dev = devices
                .iter_mut()
                .find(|d| d.name() == device)
                .expect("validated above");
            let (p, q, v) = match dev {
                Device::Gfm(d) => (&mut d.p_ref, &mut d.q_ref, &mut d.v_ref),
                Device::Gfl(d) => (&mut d.p_ref, &mut d.q_ref, &mut d.v_ref),
            };
            match setpoint {
                Setpoint::PRef => *p += delta,
                Setpoint::QRef => *q += delta,
                Setpoint::VRef => *v += delta,
            }
            Ok(EventEffect { rebuild_network: false })
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const WB: f64 = 2.0 * std::f64::consts::PI * 60.0;

    fn c(re: f64, im: f64) -> Complex64 {
        Complex64::new(re, im)
    }

    fn gfm_at_equilibrium() -> (GfmVsm, Vec<f64>, Complex64) {
        let mut d = GfmVsm::new("g", 1, GfmParams::default());
        let v = Complex64::from_polar(1.02, 0.15);
        let x = d.initialize(v, c(0.8, 0.25));
        (d, x, v)
    }

    fn gfl_at_equilibrium() -> (GflConverter, Vec<f64>, Complex64) {
        let mut d = GflConverter::new("l", 1, GflParams::default());
        let v = Complex64::from_polar(0.99, -0.3);
        let x = d.initialize(v, c(0.6, -0.1));
        (d, x, v)
    }

    #[test]
    fn gfm_equilibrium_is_stationary() {
        let (d, x, v) = gfm_at_equilibrium();
        let mut f = [0.0; 3];
        d.derivatives(&x, v, WB, &mut f);
        assert!(f.iter().all(|r| r.abs() < 1e-9), "{f:?}");
        assert!((d.terminal_power(&x, v) - c(0.8, 0.25)).norm() < 1e-12);
    }

    #[test]
    fn gfm_overspeed_is_restored() {
        let (d, mut x, v) = gfm_at_equilibrium();
        x[1] = 1.01;
        let mut f = [0.0; 3];
        d.derivatives(&x, v, WB, &mut f);
        assert!(f[1] < 0.0);
    }

    #[test]
    fn gfm_swing_with_pure_imbalance() {
        let params = GfmParams {
            inertia_h: 3.0,
            damping_d: 0.0,
            freq_droop_gain: 0.0,
            ..GfmParams::default()
        };
        let mut d = GfmVsm::new("g", 1, params);
        let v = c(1.0, 0.0);
        let x = d.initialize(v, c(0.5, 0.0));
        d.p_ref += 0.1;
        let mut f = [0.0; 3];
        d.derivatives(&x, v, WB, &mut f);
        // 2H ω̇ = Δp  =>  ω̇ = 0.1 / 6
        assert!((f[1] - 0.1 / 6.0).abs() < 1e-12);
        assert!((f[1] - 0.016667).abs() < 1e-6);
    }

    #[test]
    fn gfl_equilibrium_is_stationary() {
        let (d, x, v) = gfl_at_equilibrium();
        let mut f = [0.0; 4];
        let r = d.derivatives(&x, v, WB, &mut f);
        assert!(f.iter().all(|r| r.abs() < 1e-9), "{f:?}");
        assert!(!r.guard_active);
        assert_eq!(d.angle_error(&x, v), 0.0);
        let s = v * d.source_current(&x).conj();
        assert!((s - c(0.6, -0.1)).norm() < 1e-12);
    }

    #[test]
    fn gfl_pll_proportional_path() {
        let params = GflParams {
            pll_kp: 10.0,
            ..GflParams::default()
        };
        let d = GflConverter::new("l", 1, params);
        let v = Complex64::from_polar(1.0, 0.01);
        let x = [0.0, 0.0, 0.0, 0.0];
        let mut f = [0.0; 4];
        let r = d.derivatives(&x, v, WB, &mut f);
        // ω_pll = 1 + kp ε + x_pll = 1 + 10 * 0.01
        assert!((r.omega_pll - 1.1).abs() < 1e-12);
        assert!((f[0] - WB * 0.1).abs() < 1e-9);
        assert!((f[1] - 50.0 * 0.01).abs() < 1e-12);
    }

    #[test]
    fn gfl_low_voltage_guard_freezes_commands() {
        let (d, x, _) = gfl_at_equilibrium();
        let mut f = [1.0; 4];
        let r = d.derivatives(&x, Complex64::from_polar(0.005, -0.3), WB, &mut f);
        assert!(r.guard_active);
        assert_eq!(f[2], 0.0);
        assert_eq!(f[3], 0.0);
    }

    #[test]
    fn gfl_angle_error_wraps() {
        let d = GflConverter::new("l", 1, GflParams::default());
        let x = [3.0 * std::f64::consts::PI + 0.1, 0.0, 0.0, 0.0];
        let e = d.angle_error(&x, Complex64::from_polar(1.0, 0.0));
        assert!((e - (std::f64::consts::PI - 0.1)).abs() < 1e-12);
    }

    #[test]
    fn gfm_current_zero_when_emf_equals_voltage() {
        let d = GfmVsm::new("g", 1, GfmParams::default());
        let v = Complex64::from_polar(1.03, 0.2);
        let x = [0.2, 1.0, 1.03];
        assert!(Device::Gfm(d).injected_current(&x, v).norm() < 1e-12);
    }

    #[test]
    fn gfl_current_in_pll_frame() {
        let d = Device::Gfl(GflConverter::new("l", 1, GflParams::default()));
        let i = d.injected_current(&[0.0, 0.0, 0.5, 0.0], c(0.9, 0.1));
        assert_eq!(i, c(0.5, 0.0));
    }

    #[test]
    fn gfm_current_hand_division() {
        let params = GfmParams {
            coupling_r: 0.0,
            coupling_x: 0.15,
            ..GfmParams::default()
        };
        let d = Device::Gfm(GfmVsm::new("g", 1, params));
        let x = [0.1, 1.0, 1.05];
        let i = d.injected_current(&x, c(1.0, 0.0));
        // (1.05 cos 0.1 − 1 + j 1.05 sin 0.1) / (j 0.15)
        //   = (1.05 sin 0.1) / 0.15 − j (1.05 cos 0.1 − 1) / 0.15
        let re = 1.05 * 0.1f64.sin() / 0.15;
        let im = -(1.05 * 0.1f64.cos() - 1.0) / 0.15;
        assert!((i - c(re, im)).norm() < 1e-12);
    }

    fn check_jacobian(dev: &Device, x: &[f64], v: Complex64) {
        let n = dev.n_states();
        let mut fx = vec![0.0; n * n];
        let mut fv = vec![0.0; n * 2];
        dev.jacobian(x, v, WB, &mut fx, &mut fv);
        let h = 1e-7;
        let eval = |x: &[f64], v: Complex64| {
            let mut f = vec![0.0; n];
            dev.derivatives(x, v, WB, &mut f);
            f
        };
        for c in 0..n {
            let mut xp = x.to_vec();
            let mut xm = x.to_vec();
            xp[c] += h;
            xm[c] -= h;
            let (fp, fm) = (eval(&xp, v), eval(&xm, v));
            for r in 0..n {
                let fd = (fp[r] - fm[r]) / (2.0 * h);
                let an = fx[r * n + c];
                assert!((fd - an).abs() <= 1e-5 * an.abs().max(1.0), "fx[{r},{c}] {an} vs {fd}");
            }
        }
        for (c, dv) in [Complex64::new(h, 0.0), Complex64::new(0.0, h)].into_iter().enumerate() {
            let (fp, fm) = (eval(x, v + dv), eval(x, v - dv));
            for r in 0..n {
                let fd = (fp[r] - fm[r]) / (2.0 * h);
                let an = fv[r * 2 + c];
                assert!((fd - an).abs() <= 1e-5 * an.abs().max(1.0), "fv[{r},{c}] {an} vs {fd}");
            }
        }
        let mut sens = vec![Complex64::new(0.0, 0.0); n];
        dev.source_sensitivity(x, &mut sens);
        for c in 0..n {
            let mut xp = x.to_vec();
            let mut xm = x.to_vec();
            xp[c] += h;
            xm[c] -= h;
            let fd = (dev.source_current(&xp) - dev.source_current(&xm)) / (2.0 * h);
            assert!((fd - sens[c]).norm() <= 1e-6 * sens[c].norm().max(1.0));
        }
    }

    #[test]
    fn gfm_jacobian_matches_finite_differences() {
        let (d, mut x, v) = gfm_at_equilibrium();
        x[0] += 0.05;
        x[1] = 1.003;
        x[2] *= 0.98;
        let mut d = d;
        d.params.coupling_r = 0.02;
        check_jacobian(&Device::Gfm(d), &x, v * 0.97);
    }

    #[test]
    fn gfl_jacobian_matches_finite_differences() {
        let (d, mut x, v) = gfl_at_equilibrium();
        x[0] += 0.03;
        x[1] = 0.002;
        x[2] += 0.05;
        x[3] -= 0.02;
        check_jacobian(&Device::Gfl(d), &x, v * 1.02);
    }

    #[test]
    fn load_reproduces_demand_at_init_voltage() {
        let mut l = LoadModel::new(8, 5.22, 1.766);
        l.init_voltage = 0.9978;
        let v = Complex64::from_polar(0.9978, -0.23);
        assert!((l.demand(v) - c(5.22, 1.766)).norm() < 1e-12);
    }

    #[test]
    fn load_outage_disconnects_and_flags_rebuild() {
        let mut loads = vec![LoadModel::new(8, 5.22, 1.766), LoadModel::new(3, 3.22, 0.024)];
        let mut devices = vec![];
        let eff = apply_event(&Event::load_outage(1.0, 8), &mut loads, &mut devices).unwrap();
        assert!(eff.rebuild_network);
        assert!(!loads[0].connected);
        assert!(loads[1].connected);
        assert_eq!(loads[0].admittance(), c(0.0, 0.0));
    }

    #[test]
    fn removing_load_changes_demand_by_its_rating() {
        // Oracle: total demand with frozen voltages before and after.
        let v = Complex64::from_polar(1.0, -0.2);
        let mut loads = vec![LoadModel::new(8, 5.22, 1.766), LoadModel::new(3, 3.22, 0.024)];
        let before: Complex64 = loads.iter().map(|l| l.demand(v)).sum();
        apply_event(&Event::load_outage(1.0, 8), &mut loads, &mut []).unwrap();
        let after: Complex64 = loads.iter().map(|l| l.demand(v)).sum();
        assert!((before - after - c(5.22, 1.766)).norm() < 1e-12);
    }

    #[test]
    fn setpoint_step_mutates_reference() {
        let (d, _, _) = gfm_at_equilibrium();
        let p0 = d.p_ref;
        let mut devices = vec![Device::Gfm(d)];
        let ev = Event {
            time: 0.5,
            action: EventAction::SetpointStep {
                device: "g".into(),
                setpoint: Setpoint::PRef,
                delta: 0.1,
            },
        };
        let eff = apply_event(&ev, &mut [], &mut devices).unwrap();
        assert!(!eff.rebuild_network);
        match &devices[0] {
            Device::Gfm(d) => assert!((d.p_ref - p0 - 0.1).abs() < 1e-15),
            _ => unreachable!(),
        }
    }

    #[test]
    fn unknown_targets_rejected() {
        let loads = vec![LoadModel::new(8, 1.0, 0.0)];
        assert!(Event::load_outage(1.0, 99).validate(&loads, &[]).is_err());
        assert!(Event::load_outage(-1.0, 8).validate(&loads, &[]).is_err());
        let ev = Event {
            time: 0.0,
            action: EventAction::SetpointStep {
                device: "nope".into(),
                setpoint: Setpoint::VRef,
                delta: 0.0,
            },
        };
        assert!(ev.validate(&loads, &[]).is_err());
    }

    #[test]
    fn event_json_shape() {
        let ev: Event = serde_json::from_str(r#"{"time": 1.0, "action": {"kind": "load_outage", "bus": 8}}"#).unwrap();
        assert_eq!(ev, Event::load_outage(1.0, 8));
        let bad = serde_json::from_str::<Event>(r#"{"time": 1.0, "action": {"kind": "load_outage", "bus": 8, "x": 1}}"#);
        assert!(bad.is_err());
    }

    #[test]
    fn base_conversion_round_numbers() {
        let p = GfmParams::default().on_system_base(1000.0, 100.0);
        assert!((p.inertia_h - 30.0).abs() < 1e-12);
        assert!((p.coupling_x - 0.015).abs() < 1e-15);
        assert!((p.volt_droop_gain - 1.0).abs() < 1e-15);
    }
}
