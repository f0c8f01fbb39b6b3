//! Complex-frequency metrics of recorded trajectories.
//!
//! The complex frequency of a phasor `x(t)` is `η = ẋ/x = ϱ + jω`: the
//! normalized magnitude rate plus the phase rate. The complex frequency of
//! the network losses `s_l = Σ_h v_h conj(ī_h)` splits exactly into an
//! injection-weighted mean of bus-voltage frequencies and the conjugate of an
//! injection-weighted mean of net-current frequencies:
//!
//! ```text
//! η_sl = η_v_sys + conj(η_i_sys)
//! η_v_sys = Σ_h s_h η_v_h / s_l
//! conj(η_i_sys) = Σ_h s_h conj(η_i_h) / s_l
//! ```
//!
//! Rates come either from the model equations recorded with the trajectory
//! (`Analytic`) or from central differences of the recorded signals
//! (`Diff`), split at event instants.

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::devices::Device;
use crate::dynsim::Trajectory;
use crate::error::Error;
use crate::netmodel::AdmittanceMatrix;
use crate::powerflow::{branch_power_terms, BusVoltage};

type C64 = Complex64;

/// Normalization floor of relative identity residuals.
pub const RESIDUAL_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum MetricMode {
    /// Rates from the model equations at each recorded point.
    #[default]
    Analytic,
    /// Rates by central differences of the recorded signals.
    Diff,
}

/// Thresholds below which quantities are treated as absent.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Floors {
    /// Bus injections smaller than this carry zero weight.
    pub injection: f64,
    /// Signals smaller than this have no complex frequency.
    pub magnitude: f64,
}

impl Default for Floors {
    fn default() -> Self {
        Self {
            injection: 1e-9,
            magnitude: 1e-6,
        }
    }
}

/// `η = ϱ + jω` in 1/s and rad/s.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ComplexFrequency {
    pub rho: f64,
    pub omega: f64,
}

impl ComplexFrequency {
    pub fn as_complex(self) -> C64 {
        C64::new(self.rho, self.omega)
    }
}

impl From<C64> for ComplexFrequency {
    fn from(z: C64) -> Self {
        Self { rho: z.re, omega: z.im }
    }
}

/// `ẋ/x`, undefined when `|x|` is below `floor`.
pub fn complex_frequency(x: C64, xdot: C64, floor: f64) -> Option<C64> {
    (x.norm() >= floor).then(|| xdot / x)
}

/// Half-open index ranges between break rows.
fn segments(n: usize, breaks: &[usize]) -> Vec<(usize, usize)> {
    let mut cuts: Vec<usize> = breaks.iter().copied().filter(|&b| b > 0 && b < n).collect();
    cuts.sort_unstable();
    cuts.dedup();
    let mut out = Vec::with_capacity(cuts.len() + 1);
    let mut start = 0;
    for c in cuts {
        out.push((start, c));
        start = c;
    }
    if start < n {
        out.push((start, n));
    }
    out
}

/// Derivative of a uniformly sampled series by second-order differences:
/// central inside each segment, one-sided at segment ends. Segments are
/// delimited by `breaks` (the first row of each new segment); a one-point
/// segment has no derivative.
pub fn differentiate<T>(series: &[T], dt: f64, breaks: &[usize]) -> Vec<Option<T>>
where
    T: Copy + std::ops::Sub<Output = T> + std::ops::Add<Output = T> + std::ops::Mul<f64, Output = T>,
{
    let mut out = vec![None; series.len()];
    for (a, b) in segments(series.len(), breaks) {
        let s = &series[a..b];
        let m = s.len();
        let inv = 1.0 / dt;
        match m {
            0 | 1 => {}
            2 => {
                let d = (s[1] - s[0]) * inv;
                out[a] = Some(d);
                out[a + 1] = Some(d);
            }
            _ => {
                out[a] = Some((s[1] * 4.0 - s[0] * 3.0 - s[2]) * (0.5 * inv));
                for i in 1..m - 1 {
                    out[a + i] = Some((s[i + 1] - s[i - 1]) * (0.5 * inv));
                }
                out[a + m - 1] = Some((s[m - 1] * 3.0 - s[m - 2] * 4.0 + s[m - 3]) * (0.5 * inv));
            }
        }
    }
    out
}

/// Continuous logarithm `ln|x| + jθ` with the phase unwrapped across jumps
/// larger than π; `None` where `|x|` is below `floor`.
pub fn unwrapped_log(series: &[C64], floor: f64) -> Vec<Option<C64>> {
    let mut out = Vec::with_capacity(series.len());
    let mut last: Option<f64> = None;
    for x in series {
        if x.norm() < floor {
            out.push(None);
            last = None;
            continue;
        }
        let arg = x.arg();
        let theta = match last {
            Some(prev) => {
                let two_pi = 2.0 * std::f64::consts::PI;
                prev + (arg - prev + std::f64::consts::PI).rem_euclid(two_pi) - std::f64::consts::PI
            }
            None => arg,
        };
        last = Some(theta);
        out.push(Some(C64::new(x.norm().ln(), theta)));
    }
    out
}

/// Complex frequency of a sampled signal.
///
/// With `rates` the analytic `ẋ/x` is returned pointwise. Otherwise the
/// continuous logarithm is differentiated, which is exact for `e^{λt}`
/// up to rounding. Points below the magnitude floor are undefined and also
/// split the difference stencils.
pub fn complex_frequency_of_signal(
    series: &[C64],
    rates: Option<&[C64]>,
    dt: f64,
    breaks: &[usize],
    floor: f64,
) -> Vec<Option<C64>> {
    if let Some(rates) = rates {
        return series
            .iter()
            .zip(rates)
            .map(|(&x, &xd)| complex_frequency(x, xd, floor))
            .collect();
    }
    let logs = unwrapped_log(series, floor);
    let mut out = vec![None; series.len()];
    // Each run of defined points is differentiated on its own.
    let mut k = 0;
    while k < logs.len() {
        if logs[k].is_none() {
            k += 1;
            continue;
        }
        let start = k;
        while k < logs.len() && logs[k].is_some() {
            k += 1;
        }
        let run: Vec<C64> = logs[start..k].iter().map(|l| l.expect("defined run")).collect();
        let local: Vec<usize> = breaks
            .iter()
            .filter(|&&b| b > start && b < k)
            .map(|&b| b - start)
            .collect();
        for (i, d) in differentiate(&run, dt, &local).into_iter().enumerate() {
            out[start + i] = d;
        }
    }
    out
}

/// Bus voltage and net-current complex frequencies, row-major
/// (`row * n_buses + bus`).
#[derive(Debug, Clone, PartialEq)]
pub struct BusFrequencies {
    pub n_buses: usize,
    pub voltage: Vec<Option<C64>>,
    pub current: Vec<Option<C64>>,
}

impl BusFrequencies {
    pub fn voltage_at(&self, row: usize, bus: usize) -> Option<C64> {
        self.voltage[row * self.n_buses + bus]
    }

    pub fn current_at(&self, row: usize, bus: usize) -> Option<C64> {
        self.current[row * self.n_buses + bus]
    }
}

fn require_rates(traj: &Trajectory) -> Result<(), Error> {
    if traj.has_rates() {
        Ok(())
    } else {
        Err(Error::Undefined(
            "analytic mode needs recorded rates; use the difference mode".into(),
        ))
    }
}

fn interleave(per_bus: Vec<Vec<Option<C64>>>, rows: usize) -> Vec<Option<C64>> {
    let n = per_bus.len();
    let mut out = vec![None; rows * n];
    for (b, series) in per_bus.into_iter().enumerate() {
        for (r, v) in series.into_iter().enumerate() {
            out[r * n + b] = v;
        }
    }
    out
}

/// Complex frequencies of every bus voltage and net current.
pub fn bus_frequencies(traj: &Trajectory, mode: MetricMode, floors: Floors) -> Result<BusFrequencies, Error> {
    let rows = traj.n_rows();
    let n = traj.n_buses();
    let breaks = traj.breaks();
    let (mut volt, mut curr) = (Vec::with_capacity(n), Vec::with_capacity(n));
    if mode == MetricMode::Analytic {
        require_rates(traj)?;
    }
    for b in 0..n {
        let v = traj.voltage_series(b);
        let i = traj.current_series(b);
        let (vr, ir): (Option<Vec<C64>>, Option<Vec<C64>>) = match mode {
            MetricMode::Analytic => (
                Some((0..rows).map(|r| traj.voltage_rates(r).expect("checked")[b]).collect()),
                Some((0..rows).map(|r| traj.current_rates(r).expect("checked")[b]).collect()),
            ),
            MetricMode::Diff => (None, None),
        };
        volt.push(complex_frequency_of_signal(&v, vr.as_deref(), traj.dt, &breaks, floors.magnitude));
        curr.push(complex_frequency_of_signal(&i, ir.as_deref(), traj.dt, &breaks, floors.magnitude));
    }
    Ok(BusFrequencies {
        n_buses: n,
        voltage: interleave(volt, rows),
        current: interleave(curr, rows),
    })
}

/// Network losses `s_l = Σ_h v_h conj(ī_h)` at every row.
pub fn loss_series(traj: &Trajectory) -> Vec<C64> {
    (0..traj.n_rows()).map(|r| traj.injections(r).into_iter().sum()).collect()
}

/// Complex frequency of the losses.
pub fn loss_cf(traj: &Trajectory, mode: MetricMode, floors: Floors) -> Result<Vec<Option<C64>>, Error> {
    let s_l = loss_series(traj);
    match mode {
        MetricMode::Analytic => {
            require_rates(traj)?;
            Ok((0..traj.n_rows())
                .map(|r| {
                    let v = traj.voltages(r);
                    let i = traj.currents(r);
                    let vd = traj.voltage_rates(r).expect("checked");
                    let id = traj.current_rates(r).expect("checked");
                    let rate: C64 = (0..v.len()).map(|h| vd[h] * i[h].conj() + v[h] * id[h].conj()).sum();
                    (s_l[r].norm() >= floors.injection).then(|| rate / s_l[r])
                })
                .collect())
        }
        MetricMode::Diff => Ok(complex_frequency_of_signal(
            &s_l,
            None,
            traj.dt,
            &traj.breaks(),
            floors.injection,
        )),
    }
}

/// `Σ_h s_h z_h / s_l` over buses with `|s_h|` at or above the injection
/// floor; undefined if the losses are below the floor or any weighted
/// term is undefined.
fn weighted(
    traj: &Trajectory,
    floors: Floors,
    term: impl Fn(usize, usize) -> Option<C64>,
) -> Vec<Option<C64>> {
    (0..traj.n_rows())
        .map(|r| {
            let s = traj.injections(r);
            let s_l: C64 = s.iter().sum();
            if s_l.norm() < floors.injection {
                return None;
            }
            let mut acc = C64::new(0.0, 0.0);
            for (h, sh) in s.iter().enumerate() {
                if sh.norm() >= floors.injection {
                    acc += sh * term(r, h)?;
                }
            }
            Some(acc / s_l)
        })
        .collect()
}

/// `η_v_sys`, the injection-weighted mean of bus-voltage frequencies.
pub fn weighted_voltage_component(traj: &Trajectory, freqs: &BusFrequencies, floors: Floors) -> Vec<Option<C64>> {
    weighted(traj, floors, |r, h| freqs.voltage_at(r, h))
}

/// `η_i_sys`, defined through `conj(η_i_sys) = Σ_h s_h conj(η_i_h) / s_l`
/// so that a uniform rotation of all currents at `Δω` gives `ω_i_sys = Δω`.
pub fn weighted_current_component(traj: &Trajectory, freqs: &BusFrequencies, floors: Floors) -> Vec<Option<C64>> {
    weighted(traj, floors, |r, h| freqs.current_at(r, h).map(|e| e.conj()))
        .into_iter()
        .map(|z| z.map(|z| z.conj()))
        .collect()
}

fn relative(lhs: C64, rhs: C64) -> f64 {
    (lhs - rhs).norm() / lhs.norm().max(RESIDUAL_FLOOR)
}

/// All loss-frequency series of one trajectory.
#[derive(Debug, Clone, PartialEq)]
pub struct DecompositionSeries {
    pub mode: MetricMode,
    pub times: Vec<f64>,
    pub s_l: Vec<C64>,
    pub eta_sl: Vec<Option<C64>>,
    pub eta_v_sys: Vec<Option<C64>>,
    pub eta_i_sys: Vec<Option<C64>>,
    /// `|η_sl − η_v_sys − conj(η_i_sys)| / max(|η_sl|, 1e-6)`.
    pub residual: Vec<Option<f64>>,
}

impl DecompositionSeries {
    pub fn max_residual(&self) -> f64 {
        self.residual.iter().flatten().fold(0.0, |m, r| m.max(*r))
    }

    pub fn undefined_points(&self) -> usize {
        self.residual.iter().filter(|r| r.is_none()).count()
    }
}

pub fn decompose(traj: &Trajectory, mode: MetricMode, floors: Floors) -> Result<DecompositionSeries, Error> {
    let freqs = bus_frequencies(traj, mode, floors)?;
    let eta_sl = loss_cf(traj, mode, floors)?;
    let eta_v_sys = weighted_voltage_component(traj, &freqs, floors);
    let eta_i_sys = weighted_current_component(traj, &freqs, floors);
    let residual = (0..traj.n_rows())
        .map(|r| match (eta_sl[r], eta_v_sys[r], eta_i_sys[r]) {
            (Some(l), Some(v), Some(i)) => Some(relative(l, v + i.conj())),
            _ => None,
        })
        .collect();
    Ok(DecompositionSeries {
        mode,
        times: traj.times.clone(),
        s_l: loss_series(traj),
        eta_sl,
        eta_v_sys,
        eta_i_sys,
        residual,
    })
}

/// Largest pointwise deviation between two series relative to the largest
/// magnitude of the first; points undefined in either are skipped.
pub fn series_relative_difference(reference: &[Option<C64>], other: &[Option<C64>]) -> f64 {
    let scale = reference.iter().flatten().fold(0.0f64, |m, z| m.max(z.norm()));
    let diff = reference
        .iter()
        .zip(other)
        .filter_map(|(a, b)| Some((a.as_ref()? - b.as_ref()?).norm()))
        .fold(0.0f64, f64::max);
    diff / scale.max(RESIDUAL_FLOOR)
}

/// Worst identity residual and where it occurred.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ResidualMax {
    pub value: f64,
    pub row: usize,
    pub bus: usize,
}

/// Per-bus, per-row residuals of the power-rate identity
/// `ṡ_h = s_h η_v_h + Σ_k s_hk conj(η_v_k)` and of the current identity
/// `s_h conj(η_i_h) = Σ_k s_hk conj(η_v_k)`, with `s_hk = v_h conj(Y_hk v_k)`.
#[derive(Debug, Clone, PartialEq)]
pub struct IdentityReport {
    pub mode: MetricMode,
    pub n_buses: usize,
    pub times: Vec<f64>,
    /// Buses whose injection never reaches the floor.
    pub excluded: Vec<usize>,
    /// Row-major relative residuals; `None` where excluded or undefined.
    pub power: Vec<Option<f64>>,
    pub current: Vec<Option<f64>>,
    /// Complex residuals (LHS − RHS) behind `power` and `current`.
    pub power_raw: Vec<Option<C64>>,
    pub current_raw: Vec<Option<C64>>,
}

impl IdentityReport {
    fn worst(&self, v: &[Option<f64>]) -> ResidualMax {
        let mut best = ResidualMax {
            value: 0.0,
            row: 0,
            bus: 0,
        };
        for (k, r) in v.iter().enumerate() {
            if let Some(r) = r {
                if *r > best.value {
                    best = ResidualMax {
                        value: *r,
                        row: k / self.n_buses,
                        bus: k % self.n_buses,
                    };
                }
            }
        }
        best
    }

    pub fn max_power(&self) -> ResidualMax {
        self.worst(&self.power)
    }

    pub fn max_current(&self) -> ResidualMax {
        self.worst(&self.current)
    }
}

fn network_matrix(traj: &Trajectory) -> Result<&AdmittanceMatrix, Error> {
    traj.network_matrix
        .as_ref()
        .ok_or_else(|| Error::Undefined("per-bus identities need the network admittance matrix".into()))
}

/// In analytic mode `ṡ_h = v̇_h conj(ī_h) + v_h conj(ī̇_h)` from the recorded
/// rates; in difference mode it is differenced from the recorded injections.
pub fn per_bus_identities(traj: &Trajectory, mode: MetricMode, floors: Floors) -> Result<IdentityReport, Error> {
    let y = network_matrix(traj)?;
    let freqs = bus_frequencies(traj, mode, floors)?;
    let rows = traj.n_rows();
    let n = traj.n_buses();
    let breaks = traj.breaks();

    let mut s_rate = vec![None; rows * n];
    match mode {
        MetricMode::Analytic => {
            for r in 0..rows {
                let (Some(vd), Some(id)) = (traj.voltage_rates(r), traj.current_rates(r)) else {
                    return Err(Error::Undefined("analytic identities need recorded rates".into()));
                };
                let (v, i) = (traj.voltages(r), traj.currents(r));
                for h in 0..n {
                    s_rate[r * n + h] = Some(vd[h] * i[h].conj() + v[h] * id[h].conj());
                }
            }
        }
        MetricMode::Diff => {
            for h in 0..n {
                let s: Vec<C64> = (0..rows).map(|r| traj.voltages(r)[h] * traj.currents(r)[h].conj()).collect();
                for (r, d) in differentiate(&s, traj.dt, &breaks).into_iter().enumerate() {
                    s_rate[r * n + h] = d;
                }
            }
        }
    }

    let mut power = vec![None; rows * n];
    let mut current = vec![None; rows * n];
    let mut power_raw = vec![None; rows * n];
    let mut current_raw = vec![None; rows * n];
    let mut reached = vec![false; n];
    for r in 0..rows {
        let v = traj.voltages(r);
        let i = traj.currents(r);
        for h in 0..n {
            let s_h = v[h] * i[h].conj();
            if s_h.norm() < floors.injection {
                continue;
            }
            reached[h] = true;
            let Some(eta_v) = freqs.voltage_at(r, h) else { continue };
            let mut network_sum = C64::new(0.0, 0.0);
            let mut defined = true;
            for (k, y_hk) in y.row(h) {
                match freqs.voltage_at(r, k) {
                    Some(e) => network_sum += v[h] * (y_hk * v[k]).conj() * e.conj(),
                    None => {
                        defined = false;
                        break;
                    }
                }
            }
            if !defined {
                continue;
            }
            if let Some(lhs) = s_rate[r * n + h] {
                let rhs = s_h * eta_v + network_sum;
                power[r * n + h] = Some(relative(lhs, rhs));
                power_raw[r * n + h] = Some(lhs - rhs);
            }
            if let Some(eta_i) = freqs.current_at(r, h) {
                let lhs = s_h * eta_i.conj();
                current[r * n + h] = Some(relative(lhs, network_sum));
                current_raw[r * n + h] = Some(lhs - network_sum);
            }
        }
    }
    Ok(IdentityReport {
        mode,
        n_buses: n,
        times: traj.times.clone(),
        excluded: (0..n).filter(|&h| !reached[h]).map(|h| traj.bus_ids[h]).collect(),
        power,
        current,
        power_raw,
        current_raw,
    })
}

/// Rates `(ṗ_h, q̇_h)` of every bus injection in polar form:
///
/// ```text
/// ṗ_h = ϱ_h p_h − θ̇_h q_h + Σ_k (ϱ_k p_hk + θ̇_k q_hk)
/// q̇_h = ϱ_h q_h + θ̇_h p_h + Σ_k (ϱ_k q_hk − θ̇_k p_hk)
/// ```
///
/// where `ϱ = v̇/v` and `θ̇` are the magnitude and angle rates of each bus
/// voltage.
pub fn injection_rates_polar(
    y: &AdmittanceMatrix,
    voltages: &[BusVoltage],
    rho: &[f64],
    theta_dot: &[f64],
) -> Vec<(f64, f64)> {
    let phasors: Vec<C64> = voltages.iter().map(BusVoltage::phasor).collect();
    (0..voltages.len())
        .map(|h| {
            let s_h = phasors[h] * y.row(h).map(|(k, y_hk)| y_hk * phasors[k]).sum::<C64>().conj();
            let (p, q) = (s_h.re, s_h.im);
            let mut pd = rho[h] * p - theta_dot[h] * q;
            let mut qd = rho[h] * q + theta_dot[h] * p;
            for (k, t) in branch_power_terms(y, voltages, h) {
                pd += rho[k] * t.p_hk + theta_dot[k] * t.q_hk;
                qd += rho[k] * t.q_hk - theta_dot[k] * t.p_hk;
            }
            (pd, qd)
        })
        .collect()
}

/// Inertia-weighted mean of the internal speeds of inertial devices.
pub fn coi_frequency(traj: &Trajectory, devices: &[Device]) -> Result<Vec<f64>, Error> {
    let mut members = Vec::new();
    for d in devices {
        if let (Some(h), Some(s)) = (d.inertia(), d.speed_state()) {
            let name = format!("{}.{}", d.name(), d.state_names()[s]);
            let idx = traj
                .state_index(&name)
                .ok_or_else(|| Error::Undefined(format!("trajectory has no state {name}")))?;
            members.push((idx, h));
        }
    }
    let total: f64 = members.iter().map(|m| m.1).sum();
    if members.is_empty() || total <= 0.0 {
        return Err(Error::Undefined("no devices with inertia: CoI frequency undefined".into()));
    }
    Ok((0..traj.n_rows())
        .map(|r| {
            let x = traj.states(r);
            members.iter().map(|&(i, h)| h * x[i]).sum::<f64>() / total
        })
        .collect())
}

/// Least-squares slope of `series` over the window of width `window`
/// centred at `t_event + offset`.
pub fn rocof_at(times: &[f64], series: &[f64], t_event: f64, offset: f64, window: f64) -> Result<f64, Error> {
    let centre = t_event + offset;
    let (start, end) = (centre - 0.5 * window, centre + 0.5 * window);
    let (first, last) = match (times.first(), times.last()) {
        (Some(&a), Some(&b)) => (a, b),
        _ => (f64::NAN, f64::NAN),
    };
    let eps = 1e-9 * window.max(1.0);
    if !(start >= first - eps && end <= last + eps) {
        return Err(Error::WindowOutOfBounds { start, end, first, last });
    }
    let pts: Vec<(f64, f64)> = times
        .iter()
        .zip(series)
        .filter(|(t, _)| **t >= start - eps && **t <= end + eps)
        .map(|(t, s)| (*t - centre, *s))
        .collect();
    if pts.len() < 2 {
        return Err(Error::WindowOutOfBounds { start, end, first, last });
    }
    let m = pts.len() as f64;
    let tm = pts.iter().map(|p| p.0).sum::<f64>() / m;
    let sm = pts.iter().map(|p| p.1).sum::<f64>() / m;
    let num: f64 = pts.iter().map(|p| (p.0 - tm) * (p.1 - sm)).sum();
    let den: f64 = pts.iter().map(|p| (p.0 - tm).powi(2)).sum();
    Ok(num / den)
}

/// Angular frequency in per unit of the base: `1 + ω/Ω_b`.
pub fn omega_pu(eta: C64, omega_base: f64) -> f64 {
    1.0 + eta.im / omega_base
}
