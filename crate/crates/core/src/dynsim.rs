//! Fixed-step implicit trapezoidal integration of semi-explicit DAEs
//! `ẋ = f(x, y)`, `0 = g(x, y)`, and the power-system model built on it.
//!
//! The trapezoidal update solves
//!
//! ```text
//! x₊ − x − (h/2)(f(x, y) + f(x₊, y₊)) = 0
//! g(x₊, y₊) = 0
//! ```
//!
//! simultaneously for `(x₊, y₊)` with a chord Newton iteration: the
//! factorized Jacobian is reused across iterations and steps and refreshed
//! when contraction degrades.

use nalgebra::{DMatrix, DVector, Dyn, LU};
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::devices::{apply_event, Device, Event, LoadModel};
use crate::error::Error;
use crate::netmodel::{build_admittance, AdmittanceMatrix, Network};
use crate::powerflow::PowerFlowSolution;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct IntegratorConfig {
    pub dt: f64,
    pub t_end: f64,
    pub newton_tol: f64,
    pub newton_max_iter: usize,
}

impl Default for IntegratorConfig {
    fn default() -> Self {
        Self {
            dt: 1e-3,
            t_end: 40.0,
            newton_tol: 1e-9,
            newton_max_iter: 20,
        }
    }
}

impl IntegratorConfig {
    pub fn validate(&self) -> Result<(), String> {
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            return Err("integrator.dt must be positive".into());
        }
        if !(self.t_end >= 0.0 && self.t_end.is_finite()) {
            return Err("integrator.t_end must be >= 0".into());
        }
        if !(self.newton_tol > 0.0) {
            return Err("integrator.newton_tol must be positive".into());
        }
        if self.newton_max_iter == 0 {
            return Err("integrator.newton_max_iter must be positive".into());
        }
        Ok(())
    }

    pub fn n_steps(&self) -> usize {
        (self.t_end / self.dt - 1e-9).ceil().max(0.0) as usize
    }

    /// Grid index of the first step boundary at or after `t`.
    pub fn grid_index(&self, t: f64) -> usize {
        let k = (t / self.dt).ceil();
        // Guard against t = k·dt landing a hair above the grid point.
        if (k - 1.0) * self.dt >= t - 1e-12 * t.abs().max(1.0) && k >= 1.0 {
            (k - 1.0) as usize
        } else {
            k as usize
        }
    }
}

/// A semi-explicit DAE with differential states `x` and algebraic states `y`.
pub trait DaeModel {
    fn n_diff(&self) -> usize;
    fn n_alg(&self) -> usize;

    /// Evaluates `f(x, y)` and `g(x, y)`.
    fn residuals(&self, x: &[f64], y: &[f64], f: &mut [f64], g: &mut [f64]);

    /// Fills the four Jacobian blocks `∂f/∂x`, `∂f/∂y`, `∂g/∂x`, `∂g/∂y`.
    fn jacobian(
        &self,
        x: &[f64],
        y: &[f64],
        fx: &mut DMatrix<f64>,
        fy: &mut DMatrix<f64>,
        gx: &mut DMatrix<f64>,
        gy: &mut DMatrix<f64>,
    );

    /// Solves `g(x, y) = 0` for `y` directly when that is possible.
    fn solve_algebraic(&self, _x: &[f64], _y: &mut [f64]) -> bool {
        false
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct IntegratorStats {
    pub steps: usize,
    pub iterations: usize,
    pub factorizations: usize,
}

/// Accepted state after one step.
#[derive(Debug, Clone, PartialEq)]
pub struct StepResult {
    pub x: Vec<f64>,
    pub y: Vec<f64>,
    pub f: Vec<f64>,
    pub iterations: usize,
}

fn inf_norm(v: &[f64]) -> f64 {
    v.iter().fold(0.0, |m, x| m.max(x.abs()))
}

/// Trapezoidal stepper with a cached Jacobian factorization.
#[derive(Default)]
pub struct Trapezoidal {
    lu: Option<LU<f64, Dyn, Dyn>>,
    lu_dt: f64,
    pub stats: IntegratorStats,
}

impl Trapezoidal {
    pub fn new() -> Self {
        Self::default()
    }

    /// Drops the cached factorization; the next step refactors.
    pub fn invalidate(&mut self) {
        self.lu = None;
    }

    fn factor<M: DaeModel>(&mut self, model: &M, x: &[f64], y: &[f64], dt: f64) {
        let (nx, ny) = (model.n_diff(), model.n_alg());
        let mut fx = DMatrix::zeros(nx, nx);
        let mut fy = DMatrix::zeros(nx, ny);
        let mut gx = DMatrix::zeros(ny, nx);
        let mut gy = DMatrix::zeros(ny, ny);
        model.jacobian(x, y, &mut fx, &mut fy, &mut gx, &mut gy);
        let mut jac = DMatrix::zeros(nx + ny, nx + ny);
        let half = 0.5 * dt;
        for r in 0..nx {
            for c in 0..nx {
                jac[(r, c)] = -half * fx[(r, c)];
            }
            jac[(r, r)] += 1.0;
            for c in 0..ny {
                jac[(r, nx + c)] = -half * fy[(r, c)];
            }
        }
        for r in 0..ny {
            for c in 0..nx {
                jac[(nx + r, c)] = gx[(r, c)];
            }
            for c in 0..ny {
                jac[(nx + r, nx + c)] = gy[(r, c)];
            }
        }
        self.lu = Some(jac.lu());
        self.lu_dt = dt;
        self.stats.factorizations += 1;
    }

    /// Advances one step of size `dt` from `(x_n, y_n)` with `f_n = f(x_n, y_n)`,
    /// starting Newton from `guess` (or from the current point).
    #[allow(clippy::too_many_arguments)]
    pub fn step<M: DaeModel>(
        &mut self,
        model: &M,
        x_n: &[f64],
        y_n: &[f64],
        f_n: &[f64],
        guess: Option<(&[f64], &[f64])>,
        dt: f64,
        tol: f64,
        max_iter: usize,
        t_next: f64,
    ) -> Result<StepResult, Error> {
        let (nx, ny) = (model.n_diff(), model.n_alg());
        let mut z: Vec<f64> = match guess {
            Some((x, y)) => x.iter().chain(y).copied().collect(),
            None => x_n.iter().chain(y_n).copied().collect(),
        };
        if self.lu.is_some() && self.lu_dt != dt {
            self.lu = None;
        }
        let mut f = vec![0.0; nx];
        let mut g = vec![0.0; ny];
        let mut res = vec![0.0; nx + ny];
        let mut prev = f64::INFINITY;
        let half = 0.5 * dt;

        for it in 0..=max_iter {
            let (x, y) = z.split_at(nx);
            model.residuals(x, y, &mut f, &mut g);
            for i in 0..nx {
                res[i] = x[i] - x_n[i] - half * (f_n[i] + f[i]);
            }
            res[nx..].copy_from_slice(&g);
            // Differential residuals are measured as rates: an error δ in
            // x_{n+1} shifts the recorded rate f_{n+1} by about δ/(dt/2).
            let norm = (inf_norm(&res[..nx]) / half).max(inf_norm(&g));
            if !norm.is_finite() || it == max_iter && (norm >= tol || it == 0) {
                return Err(Error::NewtonFailed {
                    time: t_next,
                    iterations: it,
                    residual: norm,
                });
            }
            // At least one correction per step.
            if norm < tol && it > 0 {
                self.stats.steps += 1;
                self.stats.iterations += it;
                let mut x = z[..nx].to_vec();
                let mut y = z[nx..].to_vec();
                if model.solve_algebraic(&x, &mut y) {
                    model.residuals(&x, &y, &mut f, &mut g);
                }
                x.shrink_to_fit();
                return Ok(StepResult { x, y, f, iterations: it });
            }
            if self.lu.is_none() || (it > 0 && norm > 0.25 * prev) {
                let (x, y) = z.split_at(nx);
                let (x, y) = (x.to_vec(), y.to_vec());
                self.factor(model, &x, &y, dt);
            }
            let rhs = DVector::from_iterator(nx + ny, res.iter().map(|r| -r));
            let dz = self
                .lu
                .as_ref()
                .expect("factorized above")
                .solve(&rhs)
                .ok_or_else(|| Error::Singular {
                    context: format!("trapezoidal Jacobian at t = {t_next:.6} s"),
                })?;
            for (zi, d) in z.iter_mut().zip(dz.iter()) {
                *zi += d;
            }
            prev = norm;
        }
        unreachable!("loop returns on the last iteration")
    }
}

/// Event marker on the simulation grid.
#[derive(Debug, Clone, PartialEq)]
pub struct EventMarker {
    pub step: usize,
    pub time: f64,
    pub description: String,
}

/// Low-voltage guard activation of a device at a recorded step.
#[derive(Debug, Clone, PartialEq)]
pub struct GuardFlag {
    pub step: usize,
    pub device: String,
}

/// Power network with dynamic devices, ready to integrate.
///
/// Algebraic states are bus voltages in rectangular coordinates
/// `[v_re; v_im]`. The nodal balance is `A v − I_src(x) = 0` where `A` holds
/// the network matrix, connected load admittances and device shunt
/// admittances; it is linear in `v` for fixed `x`.
#[derive(Debug, Clone)]
pub struct DaeSystem {
    pub network: Network,
    pub network_matrix: AdmittanceMatrix,
    pub loads: Vec<LoadModel>,
    pub devices: Vec<Device>,
    pub events: Vec<Event>,
    omega_base: f64,
    device_bus: Vec<usize>,
    offsets: Vec<usize>,
    n_x: usize,
    system_matrix: DMatrix<Complex64>,
    system_lu: NetworkLu,
    /// Initial differential states.
    pub x0: Vec<f64>,
    /// Initial bus voltages.
    pub v0: Vec<Complex64>,
}

/// Initializes every device (and load admittance) at a solved power flow.
///
/// Devices sharing a bus split its net generation evenly. Returns the
/// stacked initial state vector.
pub fn initialize_devices(
    network: &Network,
    devices: &mut [Device],
    loads: &mut [LoadModel],
    pf: &PowerFlowSolution,
) -> Result<Vec<f64>, Error> {
    let v = pf.phasors();
    let pos = |id: usize, what: &str| {
        network.bus_index(id).ok_or(Error::UnknownBus {
            context: what.to_string(),
            bus: id,
        })
    };
    let mut generation: Vec<Complex64> = pf.injections.iter().map(|s| s.complex()).collect();
    for load in loads.iter_mut() {
        let b = pos(load.bus, "load")?;
        load.init_voltage = v[b].norm();
        generation[b] += load.demand(v[b]);
    }
    let mut count = vec![0usize; network.n_buses()];
    for d in devices.iter() {
        count[pos(d.bus(), d.name())?] += 1;
    }
    let mut x0 = Vec::new();
    for d in devices.iter_mut() {
        let b = pos(d.bus(), d.name())?;
        x0.extend(d.initialize(v[b], generation[b] / count[b] as f64));
    }
    Ok(x0)
}

/// Tolerance on initial residuals accepted by [`assemble`].
pub const INIT_TOL: f64 = 1e-9;

/// Assembles the DAE for initialized devices and checks that the initial
/// point is an equilibrium of every device and of the nodal balance.
pub fn assemble(
    network: &Network,
    devices: Vec<Device>,
    loads: Vec<LoadModel>,
    events: Vec<Event>,
    pf: &PowerFlowSolution,
    x0: Vec<f64>,
) -> Result<DaeSystem, Error> {
    if devices.is_empty() {
        return Err(Error::NoSources);
    }
    let network_matrix = build_admittance(network)?;
    let mut device_bus = Vec::with_capacity(devices.len());
    let mut offsets = Vec::with_capacity(devices.len());
    let mut n_x = 0;
    for d in &devices {
        device_bus.push(network.bus_index(d.bus()).ok_or(Error::UnknownBus {
            context: format!("device {}", d.name()),
            bus: d.bus(),
        })?);
        offsets.push(n_x);
        n_x += d.n_states();
    }
    if x0.len() != n_x {
        return Err(Error::InvalidParameter(format!(
            "initial state has {} entries, devices need {n_x}",
            x0.len()
        )));
    }
    for load in &loads {
        if network.bus_index(load.bus).is_none() {
            return Err(Error::UnknownBus {
                context: "load".into(),
                bus: load.bus,
            });
        }
    }
    let v0 = pf.phasors();
    let (system_matrix, system_lu) = system_matrix(network, &network_matrix, &loads, &devices, &device_bus)?;
    let sys = DaeSystem {
        network: network.clone(),
        network_matrix,
        loads,
        devices,
        events,
        omega_base: network.omega_base(),
        device_bus,
        offsets,
        n_x,
        system_matrix,
        system_lu,
        x0,
        v0,
    };

    let mut f = vec![0.0; n_x];
    sys.state_derivatives(&sys.x0, &sys.v0, &mut f);
    for (d, dev) in sys.devices.iter().enumerate() {
        let r = inf_norm(&f[sys.offsets[d]..sys.offsets[d] + dev.n_states()]);
        if !(r < INIT_TOL) {
            return Err(Error::NotAtEquilibrium {
                device: dev.name().to_string(),
                residual: r,
            });
        }
    }
    let balance = sys.nodal_residual(&sys.x0, &sys.v0);
    let worst = balance.iter().map(|r| r.norm()).fold(0.0, f64::max);
    if !(worst < INIT_TOL) {
        return Err(Error::NotAtEquilibrium {
            device: "nodal balance".into(),
            residual: worst,
        });
    }
    Ok(sys)
}

type NetworkLu = LU<Complex64, Dyn, Dyn>;

fn system_matrix(
    network: &Network,
    y_net: &AdmittanceMatrix,
    loads: &[LoadModel],
    devices: &[Device],
    device_bus: &[usize],
) -> Result<(DMatrix<Complex64>, NetworkLu), Error> {
    let mut a = y_net.to_dense();
    for load in loads {
        let b = network.bus_index(load.bus).expect("checked in assemble");
        a[(b, b)] += load.admittance();
    }
    for (d, &b) in devices.iter().zip(device_bus) {
        a[(b, b)] += d.shunt_admittance();
    }
    let lu = a.clone().lu();
    if !lu.is_invertible() {
        return Err(Error::Singular {
            context: "nodal system matrix".into(),
        });
    }
    Ok((a, lu))
}

impl DaeSystem {
    pub fn n_states(&self) -> usize {
        self.n_x
    }

    pub fn n_buses(&self) -> usize {
        self.network.n_buses()
    }

    pub fn omega_base(&self) -> f64 {
        self.omega_base
    }

    /// Fully qualified `<device>.<state>` names in state-vector order.
    pub fn state_names(&self) -> Vec<String> {
        self.devices
            .iter()
            .flat_map(|d| d.state_names().iter().map(move |s| format!("{}.{}", d.name(), s)))
            .collect()
    }

    /// Global indices of absolute-angle states.
    pub fn angle_states(&self) -> Vec<usize> {
        self.devices
            .iter()
            .zip(&self.offsets)
            .flat_map(|(d, &o)| d.angle_states().iter().map(move |&i| o + i))
            .collect()
    }

    pub fn device_states<'a>(&self, d: usize, x: &'a [f64]) -> &'a [f64] {
        &x[self.offsets[d]..self.offsets[d] + self.devices[d].n_states()]
    }

    /// Writes `f(x, v)`; returns the names of devices whose guard is active.
    pub fn state_derivatives(&self, x: &[f64], v: &[Complex64], out: &mut [f64]) -> Vec<String> {
        let mut guarded = Vec::new();
        for (d, dev) in self.devices.iter().enumerate() {
            let o = self.offsets[d];
            let n = dev.n_states();
            if dev.derivatives(&x[o..o + n], v[self.device_bus[d]], self.omega_base, &mut out[o..o + n]) {
                guarded.push(dev.name().to_string());
            }
        }
        guarded
    }

    fn source_currents(&self, x: &[f64]) -> Vec<Complex64> {
        let mut i = vec![Complex64::new(0.0, 0.0); self.n_buses()];
        for (d, dev) in self.devices.iter().enumerate() {
            i[self.device_bus[d]] += dev.source_current(self.device_states(d, x));
        }
        i
    }

    /// Nodal current balance `A v − I_src(x)` per bus.
    pub fn nodal_residual(&self, x: &[f64], v: &[Complex64]) -> Vec<Complex64> {
        let av = &self.system_matrix * DVector::from_column_slice(v);
        let src = self.source_currents(x);
        av.iter().zip(src).map(|(a, s)| a - s).collect()
    }

    /// Bus voltages solving the nodal balance exactly for fixed `x`.
    pub fn solve_voltages(&self, x: &[f64]) -> Vec<Complex64> {
        let rhs = DVector::from_vec(self.source_currents(x));
        self.system_lu
            .solve(&rhs)
            .expect("system matrix invertible")
            .iter()
            .copied()
            .collect()
    }

    /// Net current `Σ_k Y_hk v_k` leaving each bus into the network branches
    /// and shunts (loads excluded).
    pub fn network_currents(&self, v: &[Complex64]) -> Vec<Complex64> {
        self.network_matrix.mul_vec(v)
    }

    /// Bus voltage rates from the algebraic sensitivity
    /// `(∂g/∂v) v̇ = −(∂g/∂x) ẋ`.
    pub fn voltage_derivatives(&self, x: &[f64], xdot: &[f64]) -> Result<Vec<Complex64>, Error> {
        let mut rhs = DVector::from_element(self.n_buses(), Complex64::new(0.0, 0.0));
        let mut sens = [Complex64::new(0.0, 0.0); 8];
        for (d, dev) in self.devices.iter().enumerate() {
            let n = dev.n_states();
            let o = self.offsets[d];
            dev.source_sensitivity(&x[o..o + n], &mut sens[..n]);
            let di: Complex64 = (0..n).map(|s| sens[s] * xdot[o + s]).sum();
            rhs[self.device_bus[d]] += di;
        }
        self.system_lu
            .solve(&rhs)
            .map(|v| v.iter().copied().collect())
            .ok_or_else(|| Error::Singular {
                context: "voltage sensitivity".into(),
            })
    }

    /// Applies an event and rebuilds the nodal matrix when needed.
    pub fn apply(&mut self, event: &Event) -> Result<(), Error> {
        let effect = apply_event(event, &mut self.loads, &mut self.devices)?;
        if effect.rebuild_network {
            let (a, lu) = system_matrix(
                &self.network,
                &self.network_matrix,
                &self.loads,
                &self.devices,
                &self.device_bus,
            )?;
            self.system_matrix = a;
            self.system_lu = lu;
        }
        Ok(())
    }

    fn split_voltages(v: &[Complex64]) -> Vec<f64> {
        v.iter().map(|c| c.re).chain(v.iter().map(|c| c.im)).collect()
    }

    fn join_voltages(y: &[f64]) -> Vec<Complex64> {
        let n = y.len() / 2;
        (0..n).map(|b| Complex64::new(y[b], y[n + b])).collect()
    }
}

impl DaeModel for DaeSystem {
    fn n_diff(&self) -> usize {
        self.n_x
    }

    fn n_alg(&self) -> usize {
        2 * self.n_buses()
    }

    fn residuals(&self, x: &[f64], y: &[f64], f: &mut [f64], g: &mut [f64]) {
        let v = Self::join_voltages(y);
        self.state_derivatives(x, &v, f);
        let n = self.n_buses();
        for (b, r) in self.nodal_residual(x, &v).into_iter().enumerate() {
            g[b] = r.re;
            g[n + b] = r.im;
        }
    }

    fn jacobian(
        &self,
        x: &[f64],
        y: &[f64],
        fx: &mut DMatrix<f64>,
        fy: &mut DMatrix<f64>,
        gx: &mut DMatrix<f64>,
        gy: &mut DMatrix<f64>,
    ) {
        let n = self.n_buses();
        let v = Self::join_voltages(y);
        let mut dfx = [0.0; 16];
        let mut dfv = [0.0; 8];
        let mut sens = [Complex64::new(0.0, 0.0); 4];
        for (d, dev) in self.devices.iter().enumerate() {
            let ns = dev.n_states();
            let o = self.offsets[d];
            let b = self.device_bus[d];
            let xd = &x[o..o + ns];
            dev.jacobian(xd, v[b], self.omega_base, &mut dfx[..ns * ns], &mut dfv[..ns * 2]);
            dev.source_sensitivity(xd, &mut sens[..ns]);
            for r in 0..ns {
                for c in 0..ns {
                    fx[(o + r, o + c)] = dfx[r * ns + c];
                }
                fy[(o + r, b)] = dfv[r * 2];
                fy[(o + r, n + b)] = dfv[r * 2 + 1];
            }
            for s in 0..ns {
                gx[(b, o + s)] -= sens[s].re;
                gx[(n + b, o + s)] -= sens[s].im;
            }
        }
        for r in 0..n {
            for c in 0..n {
                let a = self.system_matrix[(r, c)];
                gy[(r, c)] = a.re;
                gy[(r, n + c)] = -a.im;
                gy[(n + r, c)] = a.im;
                gy[(n + r, n + c)] = a.re;
            }
        }
    }

    fn solve_algebraic(&self, x: &[f64], y: &mut [f64]) -> bool {
        y.copy_from_slice(&Self::split_voltages(&self.solve_voltages(x)));
        true
    }
}

/// Time-indexed record of a simulation on a uniform grid.
///
/// Per-bus signals are stored row-major (one row per grid point). Rates are
/// the analytic derivatives evaluated at each recorded point; they are
/// absent for trajectories read back from CSV.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub dt: f64,
    pub omega_base: f64,
    pub bus_ids: Vec<usize>,
    pub state_names: Vec<String>,
    pub angle_states: Vec<usize>,
    pub times: Vec<f64>,
    pub events: Vec<EventMarker>,
    pub guard_flags: Vec<GuardFlag>,
    /// Network admittance matrix (branches and bus shunts, no loads).
    pub network_matrix: Option<AdmittanceMatrix>,
    voltages: Vec<Complex64>,
    currents: Vec<Complex64>,
    states: Vec<f64>,
    voltage_rates: Option<Vec<Complex64>>,
    current_rates: Option<Vec<Complex64>>,
    state_rates: Option<Vec<f64>>,
}

impl Trajectory {
    pub fn new(
        dt: f64,
        omega_base: f64,
        bus_ids: Vec<usize>,
        state_names: Vec<String>,
        with_rates: bool,
    ) -> Self {
        Self {
            dt,
            omega_base,
            bus_ids,
            state_names,
            angle_states: Vec::new(),
            times: Vec::new(),
            events: Vec::new(),
            guard_flags: Vec::new(),
            network_matrix: None,
            voltages: Vec::new(),
            currents: Vec::new(),
            states: Vec::new(),
            voltage_rates: with_rates.then(Vec::new),
            current_rates: with_rates.then(Vec::new),
            state_rates: with_rates.then(Vec::new),
        }
    }

    pub fn n_rows(&self) -> usize {
        self.times.len()
    }

    pub fn n_buses(&self) -> usize {
        self.bus_ids.len()
    }

    pub fn n_states(&self) -> usize {
        self.state_names.len()
    }

    pub fn has_rates(&self) -> bool {
        self.voltage_rates.is_some()
    }

    /// Appends one grid point. Rates must be given iff the trajectory was
    /// created with rates.
    pub fn push(
        &mut self,
        t: f64,
        v: &[Complex64],
        i: &[Complex64],
        x: &[f64],
        rates: Option<(&[Complex64], &[Complex64], &[f64])>,
    ) {
        assert_eq!(v.len(), self.n_buses());
        assert_eq!(i.len(), self.n_buses());
        assert_eq!(x.len(), self.n_states());
        self.times.push(t);
        self.voltages.extend_from_slice(v);
        self.currents.extend_from_slice(i);
        self.states.extend_from_slice(x);
        match (rates, &mut self.voltage_rates, &mut self.current_rates, &mut self.state_rates) {
            (Some((vd, id, xd)), Some(vr), Some(ir), Some(xr)) => {
                vr.extend_from_slice(vd);
                ir.extend_from_slice(id);
                xr.extend_from_slice(xd);
            }
            (None, None, None, None) => {}
            _ => panic!("rates must match trajectory layout"),
        }
    }

    pub fn voltages(&self, row: usize) -> &[Complex64] {
        let n = self.n_buses();
        &self.voltages[row * n..(row + 1) * n]
    }

    pub fn currents(&self, row: usize) -> &[Complex64] {
        let n = self.n_buses();
        &self.currents[row * n..(row + 1) * n]
    }

    pub fn states(&self, row: usize) -> &[f64] {
        let n = self.n_states();
        &self.states[row * n..(row + 1) * n]
    }

    pub fn voltage_rates(&self, row: usize) -> Option<&[Complex64]> {
        let n = self.n_buses();
        self.voltage_rates.as_ref().map(|r| &r[row * n..(row + 1) * n])
    }

    pub fn current_rates(&self, row: usize) -> Option<&[Complex64]> {
        let n = self.n_buses();
        self.current_rates.as_ref().map(|r| &r[row * n..(row + 1) * n])
    }

    pub fn state_rates(&self, row: usize) -> Option<&[f64]> {
        let n = self.n_states();
        self.state_rates.as_ref().map(|r| &r[row * n..(row + 1) * n])
    }

    /// Complex power `v_h conj(ī_h)` injected at every bus.
    pub fn injections(&self, row: usize) -> Vec<Complex64> {
        self.voltages(row)
            .iter()
            .zip(self.currents(row))
            .map(|(v, i)| v * i.conj())
            .collect()
    }

    /// Time series of one bus voltage.
    pub fn voltage_series(&self, bus: usize) -> Vec<Complex64> {
        (0..self.n_rows()).map(|r| self.voltages(r)[bus]).collect()
    }

    pub fn current_series(&self, bus: usize) -> Vec<Complex64> {
        (0..self.n_rows()).map(|r| self.currents(r)[bus]).collect()
    }

    pub fn state_series(&self, state: usize) -> Vec<f64> {
        (0..self.n_rows()).map(|r| self.states(r)[state]).collect()
    }

    pub fn state_index(&self, name: &str) -> Option<usize> {
        self.state_names.iter().position(|s| s == name)
    }

    /// Rows at which the recorded signals may jump (event instants).
    pub fn breaks(&self) -> Vec<usize> {
        let mut b: Vec<usize> = self.events.iter().map(|e| e.step).filter(|&s| s > 0).collect();
        b.dedup();
        b
    }

    /// Largest deviation from a synchronized steady state at `row`: the
    /// largest non-angle state rate, or the spread of angle-state rates
    /// (a common rotation of all angles is a steady state under droop).
    pub fn settling_residual(&self, row: usize) -> Option<f64> {
        let rates = self.state_rates(row)?;
        let mut worst: f64 = 0.0;
        let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
        for (i, r) in rates.iter().enumerate() {
            if self.angle_states.contains(&i) {
                lo = lo.min(*r);
                hi = hi.max(*r);
            } else {
                worst = worst.max(r.abs());
            }
        }
        if hi >= lo {
            worst = worst.max(hi - lo);
        }
        Some(worst)
    }
}

/// A failed run with everything recorded up to the failure.
#[derive(Debug)]
pub struct RunFailure {
    pub error: Error,
    pub partial: Trajectory,
}

/// Integrates the system from `t = 0` to `t_end`, applying events at the
/// first grid point at or after their time and recording every step.
///
/// At an event the differential states are frozen, the event mutates the
/// network or devices, and only the algebraic subsystem is re-solved; the
/// recorded row at that instant is the post-event point.
pub fn run(system: &mut DaeSystem, cfg: &IntegratorConfig) -> Result<Trajectory, Box<RunFailure>> {
    let mut traj = Trajectory::new(
        cfg.dt,
        system.omega_base,
        system.network.bus_ids(),
        system.state_names(),
        true,
    );
    traj.angle_states = system.angle_states();
    traj.network_matrix = Some(system.network_matrix.clone());

    let mut events: Vec<(usize, Event)> = system
        .events
        .iter()
        .map(|e| (cfg.grid_index(e.time), e.clone()))
        .collect();
    events.sort_by_key(|(k, _)| *k);

    let n_steps = cfg.n_steps();
    let mut x = system.x0.clone();
    let mut v = system.v0.clone();
    let mut integrator = Trapezoidal::new();
    let mut prev: Option<(Vec<f64>, Vec<f64>)> = None;

    let fail = |error: Error, traj: Trajectory| Box::new(RunFailure { error, partial: traj });

    for k in 0..=n_steps {
        let t = k as f64 * cfg.dt;
        if k > 0 {
            let mut f_n = vec![0.0; system.n_states()];
            system.state_derivatives(&x, &v, &mut f_n);
            let y_n = DaeSystem::split_voltages(&v);
            let guess = prev.as_ref().map(|(xp, yp)| {
                let xg: Vec<f64> = x.iter().zip(xp).map(|(a, b)| 2.0 * a - b).collect();
                let yg: Vec<f64> = y_n.iter().zip(yp).map(|(a, b)| 2.0 * a - b).collect();
                (xg, yg)
            });
            let step = integrator.step(
                &*system,
                &x,
                &y_n,
                &f_n,
                guess.as_ref().map(|(a, b)| (a.as_slice(), b.as_slice())),
                cfg.dt,
                cfg.newton_tol,
                cfg.newton_max_iter,
                t,
            );
            match step {
                Ok(s) => {
                    prev = Some((x, y_n));
                    x = s.x;
                    v = DaeSystem::join_voltages(&s.y);
                }
                Err(e) => return Err(fail(e, traj)),
            }
        }

        let mut applied = false;
        for (_, ev) in events.iter().filter(|(ke, _)| *ke == k) {
            if let Err(e) = system.apply(ev) {
                return Err(fail(e, traj));
            }
            traj.events.push(EventMarker {
                step: k,
                time: t,
                description: ev.describe(),
            });
            applied = true;
        }
        if applied {
            v = system.solve_voltages(&x);
            integrator.invalidate();
            prev = None;
        }

        let mut xdot = vec![0.0; system.n_states()];
        for device in system.state_derivatives(&x, &v, &mut xdot) {
            traj.guard_flags.push(GuardFlag { step: k, device });
        }
        let vdot = match system.voltage_derivatives(&x, &xdot) {
            Ok(vd) => vd,
            Err(e) => return Err(fail(e, traj)),
        };
        let i = system.network_currents(&v);
        let idot = system.network_currents(&vdot);
        traj.push(t, &v, &i, &x, Some((&vdot, &idot, &xdot)));
    }
    Ok(traj)
}

#[cfg(test)]
mod tests {
    use super::*;

    /// ẋ = −y, 0 = y − x.
    struct Decay;

    impl DaeModel for Decay {
        fn n_diff(&self) -> usize {
            1
        }
        fn n_alg(&self) -> usize {
            1
        }
        fn residuals(&self, x: &[f64], y: &[f64], f: &mut [f64], g: &mut [f64]) {
            f[0] = -y[0];
            g[0] = y[0] - x[0];
        }
        fn jacobian(
            &self,
            _x: &[f64],
            _y: &[f64],
            fx: &mut DMatrix<f64>,
            fy: &mut DMatrix<f64>,
            gx: &mut DMatrix<f64>,
            gy: &mut DMatrix<f64>,
        ) {
            fx[(0, 0)] = 0.0;
            fy[(0, 0)] = -1.0;
            gx[(0, 0)] = -1.0;
            gy[(0, 0)] = 1.0;
        }
    }

    /// ẋ = −x + sin(2x), purely differential and nonlinear.
    struct Smooth;

    impl DaeModel for Smooth {
        fn n_diff(&self) -> usize {
            1
        }
        fn n_alg(&self) -> usize {
            0
        }
        fn residuals(&self, x: &[f64], _y: &[f64], f: &mut [f64], _g: &mut [f64]) {
            f[0] = -x[0] + (2.0 * x[0]).sin();
        }
        fn jacobian(
            &self,
            x: &[f64],
            _y: &[f64],
            fx: &mut DMatrix<f64>,
            _fy: &mut DMatrix<f64>,
            _gx: &mut DMatrix<f64>,
            _gy: &mut DMatrix<f64>,
        ) {
            fx[(0, 0)] = -1.0 + 2.0 * (2.0 * x[0]).cos();
        }
    }

    fn integrate<M: DaeModel>(model: &M, x0: f64, y0: &[f64], dt: f64, t_end: f64) -> f64 {
        let mut integ = Trapezoidal::new();
        let mut x = vec![x0];
        let mut y = y0.to_vec();
        let n = (t_end / dt).round() as usize;
        for k in 1..=n {
            let mut f = vec![0.0];
            let mut g = vec![0.0; y.len()];
            model.residuals(&x, &y, &mut f, &mut g);
            let s = integ.step(model, &x, &y, &f, None, dt, 1e-9, 50, k as f64 * dt).unwrap();
            x = s.x;
            y = s.y;
        }
        x[0]
    }

    #[test]
    fn one_step_matches_closed_form() {
        let dt = 1e-3;
        let x1 = integrate(&Decay, 1.0, &[1.0], dt, dt);
        let expected = (1.0 - dt / 2.0) / (1.0 + dt / 2.0);
        assert!((x1 - expected).abs() < 1e-14);
        assert!((x1 - 0.9990005).abs() < 1e-7);
    }

    #[test]
    fn second_order_convergence() {
        // Reference from a much finer run of the same scheme.
        let reference = integrate(&Smooth, 0.3, &[], 1e-5, 1.0);
        let e1 = (integrate(&Smooth, 0.3, &[], 0.02, 1.0) - reference).abs();
        let e2 = (integrate(&Smooth, 0.3, &[], 0.01, 1.0) - reference).abs();
        let ratio = e1 / e2;
        assert!((3.5..=4.5).contains(&ratio), "ratio {ratio}");
    }

    #[test]
    fn grid_index_snaps_up() {
        let cfg = IntegratorConfig::default();
        assert_eq!(cfg.grid_index(1.0), 1000);
        assert_eq!(cfg.grid_index(0.0), 0);
        assert_eq!(cfg.grid_index(1.0004), 1001);
        assert_eq!(cfg.grid_index(0.0005), 1);
        assert_eq!(cfg.n_steps(), 40_000);
    }

    #[test]
    fn config_validation() {
        let mut cfg = IntegratorConfig::default();
        assert!(cfg.validate().is_ok());
        cfg.dt = 0.0;
        assert!(cfg.validate().is_err());
    }
}
