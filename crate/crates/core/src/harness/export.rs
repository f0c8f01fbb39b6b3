//! CSV and JSON exports of runs and sweeps.
//!
//! Floats are written with 17 significant digits; undefined values as `NaN`.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::Path;

use num_complex::Complex64 as C64;

use crate::cfmetrics::{DecompositionSeries, IdentityReport};
use crate::dynsim::{EventMarker, Trajectory};
use crate::error::Error;

use super::case::OmegaUnits;
use super::run::{RunBundle, SweepRow};

pub const TRAJECTORY_FILE: &str = "trajectory.csv";
pub const EVENTS_FILE: &str = "events.csv";
pub const METRICS_FILE: &str = "metrics.csv";
pub const IDENTITIES_FILE: &str = "identities.csv";
pub const CONFIG_FILE: &str = "effective_config.json";
pub const SUMMARY_FILE: &str = "summary.json";

/// Plot panels: file name and columns after `t`.
pub const PANELS: [(&str, [&str; 2]); 4] = [
    ("panel_a_losses_coi.csv", ["s_l_mag", "omega_coi"]),
    ("panel_b_vsys.csv", ["rho_vsys", "omega_vsys"]),
    ("panel_c_isys.csv", ["rho_isys", "omega_isys"]),
    ("panel_d_sl.csv", ["rho_sl", "omega_sl"]),
];

pub fn fmt(x: f64) -> String {
    if x.is_nan() {
        "NaN".into()
    } else {
        format!("{x:.16e}")
    }
}

fn create(path: &Path) -> Result<BufWriter<File>, Error> {
    Ok(BufWriter::new(File::create(path)?))
}

fn write_line<W: Write>(w: &mut W, fields: impl IntoIterator<Item = String>) -> Result<(), Error> {
    let line: Vec<String> = fields.into_iter().collect();
    writeln!(w, "{}", line.join(","))?;
    Ok(())
}

pub fn write_trajectory(traj: &Trajectory, path: &Path) -> Result<(), Error> {
    let mut w = create(path)?;
    let mut header = vec!["t".to_string()];
    for prefix in ["v", "theta", "p", "q", "ir", "ii"] {
        header.extend(traj.bus_ids.iter().map(|b| format!("{prefix}_{b}")));
    }
    header.extend(traj.state_names.iter().cloned());
    write_line(&mut w, header)?;
    for row in 0..traj.n_rows() {
        let v = traj.voltages(row);
        let i = traj.currents(row);
        let s = traj.injections(row);
        let mut f = Vec::with_capacity(1 + 6 * v.len() + traj.n_states());
        f.push(fmt(traj.times[row]));
        f.extend(v.iter().map(|z| fmt(z.norm())));
        f.extend(v.iter().map(|z| fmt(z.arg())));
        f.extend(s.iter().map(|z| fmt(z.re)));
        f.extend(s.iter().map(|z| fmt(z.im)));
        f.extend(i.iter().map(|z| fmt(z.re)));
        f.extend(i.iter().map(|z| fmt(z.im)));
        f.extend(traj.states(row).iter().map(|x| fmt(*x)));
        write_line(&mut w, f)?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_events(traj: &Trajectory, path: &Path) -> Result<(), Error> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["step", "t", "description"])?;
    for e in &traj.events {
        w.write_record([e.step.to_string(), fmt(e.time), e.description.clone()])?;
    }
    for g in &traj.guard_flags {
        w.write_record([g.step.to_string(), fmt(traj.times[g.step]), format!("guard {}", g.device)])?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_events(path: &Path) -> Result<Vec<EventMarker>, Error> {
    let mut r = csv::Reader::from_path(path)?;
    let mut out = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        let description = rec.get(2).unwrap_or_default().to_string();
        if description.starts_with("guard ") {
            continue;
        }
        out.push(EventMarker {
            step: parse(rec.get(0), path)? as usize,
            time: parse(rec.get(1), path)?,
            description,
        });
    }
    Ok(out)
}

fn parse(field: Option<&str>, path: &Path) -> Result<f64, Error> {
    field
        .and_then(|s| s.trim().parse::<f64>().ok())
        .ok_or_else(|| Error::InvalidParameter(format!("{}: malformed number {:?}", path.display(), field)))
}

/// Reads a trajectory export back. Rates are not stored, so the result
/// only supports difference-mode metrics.
pub fn read_trajectory(path: &Path, omega_base: f64) -> Result<Trajectory, Error> {
    let mut r = csv::Reader::from_path(path)?;
    let header: Vec<String> = r.headers()?.iter().map(str::to_string).collect();
    let bad = |msg: &str| Error::InvalidParameter(format!("{}: {msg}", path.display()));
    if header.first().map(String::as_str) != Some("t") {
        return Err(bad("first column must be t"));
    }
    let bus_ids: Vec<usize> = header
        .iter()
        .skip(1)
        .map_while(|h| h.strip_prefix("v_").and_then(|b| b.parse().ok()))
        .collect();
    let n = bus_ids.len();
    if n == 0 || header.len() < 1 + 6 * n {
        return Err(bad("missing per-bus columns"));
    }
    let state_names = header[1 + 6 * n..].to_vec();
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        let row = rec.iter().map(|s| parse(Some(s), path)).collect::<Result<Vec<_>, _>>()?;
        if row.len() != header.len() {
            return Err(bad("ragged row"));
        }
        rows.push(row);
    }
    if rows.len() < 2 {
        return Err(bad("at least two rows are required"));
    }
    let dt = rows[1][0] - rows[0][0];
    let mut traj = Trajectory::new(dt, omega_base, bus_ids, state_names, false);
    for row in &rows {
        let col = |k: usize, b: usize| row[1 + k * n + b];
        let v: Vec<C64> = (0..n).map(|b| C64::from_polar(col(0, b), col(1, b))).collect();
        let i: Vec<C64> = (0..n).map(|b| C64::new(col(4, b), col(5, b))).collect();
        traj.push(row[0], &v, &i, &row[1 + 6 * n..], None);
    }
    Ok(traj)
}

/// Metrics columns in export units, one vector per column after `t`.
pub struct MetricsTable {
    pub columns: Vec<(&'static str, Vec<f64>)>,
}

impl MetricsTable {
    pub fn new(dec: &DecompositionSeries, coi: &[f64], omega_base: f64, units: OmegaUnits) -> Self {
        let scale = match units {
            OmegaUnits::Pu => 1.0 / omega_base,
            OmegaUnits::RadPerS => 1.0,
        };
        // Absolute frequencies carry the base; the loss frequency is a difference.
        let nominal = omega_base * scale;
        let part = |s: &[Option<C64>], re: bool, offset: f64| -> Vec<f64> {
            s.iter()
                .map(|z| match z {
                    Some(z) if re => z.re,
                    Some(z) => offset + z.im * scale,
                    None => f64::NAN,
                })
                .collect()
        };
        let coi_col: Vec<f64> = if coi.is_empty() {
            vec![f64::NAN; dec.times.len()]
        } else {
            coi.iter().map(|w| w * omega_base * scale).collect()
        };
        let columns = vec![
            ("s_l_mag", dec.s_l.iter().map(|s| s.norm()).collect()),
            ("rho_sl", part(&dec.eta_sl, true, 0.0)),
            ("omega_sl", part(&dec.eta_sl, false, 0.0)),
            ("rho_vsys", part(&dec.eta_v_sys, true, 0.0)),
            ("omega_vsys", part(&dec.eta_v_sys, false, nominal)),
            ("rho_isys", part(&dec.eta_i_sys, true, 0.0)),
            ("omega_isys", part(&dec.eta_i_sys, false, nominal)),
            ("omega_coi", coi_col),
            ("eq16_residual", dec.residual.iter().map(|r| r.unwrap_or(f64::NAN)).collect()),
        ];
        Self { columns }
    }

    pub fn column(&self, name: &str) -> Option<&[f64]> {
        self.columns.iter().find(|c| c.0 == name).map(|c| c.1.as_slice())
    }

    fn write(&self, times: &[f64], names: &[&str], path: &Path) -> Result<(), Error> {
        let cols: Vec<&[f64]> = names
            .iter()
            .map(|n| self.column(n).expect("known column"))
            .collect();
        let mut w = create(path)?;
        write_line(&mut w, std::iter::once("t".to_string()).chain(names.iter().map(|n| n.to_string())))?;
        for (r, t) in times.iter().enumerate() {
            write_line(&mut w, std::iter::once(fmt(*t)).chain(cols.iter().map(|c| fmt(c[r]))))?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn write_metrics(&self, times: &[f64], path: &Path) -> Result<(), Error> {
        let names: Vec<&str> = self.columns.iter().map(|c| c.0).collect();
        self.write(times, &names, path)
    }

    pub fn write_panels(&self, times: &[f64], dir: &Path) -> Result<(), Error> {
        for (file, cols) in PANELS {
            self.write(times, &cols, &dir.join(file))?;
        }
        Ok(())
    }
}

pub fn write_identities(ids: &IdentityReport, bus_ids: &[usize], path: &Path) -> Result<(), Error> {
    let mut w = create(path)?;
    writeln!(w, "t,bus,eq9_residual,eq13_residual")?;
    let n = ids.n_buses;
    for (r, t) in ids.times.iter().enumerate() {
        for (b, id) in bus_ids.iter().enumerate() {
            if ids.excluded.contains(id) {
                continue;
            }
            let p = ids.power[r * n + b].unwrap_or(f64::NAN);
            let c = ids.current[r * n + b].unwrap_or(f64::NAN);
            writeln!(w, "{},{id},{},{}", fmt(*t), fmt(p), fmt(c))?;
        }
    }
    for (name, m) in [("eq9", ids.max_power()), ("eq13", ids.max_current())] {
        let (t, bus) = if m.value > 0.0 {
            (fmt(ids.times[m.row]), bus_ids[m.bus].to_string())
        } else {
            ("NaN".into(), "-".into())
        };
        writeln!(w, "# max_{name}_residual,{},t,{t},bus,{bus}", fmt(m.value))?;
    }
    let excluded: Vec<String> = ids.excluded.iter().map(usize::to_string).collect();
    writeln!(w, "# excluded_buses,{}", excluded.join(" "))?;
    w.flush()?;
    Ok(())
}

/// Writes every export of a run into `dir`, creating it if needed.
pub fn write_bundle(bundle: &RunBundle, dir: &Path) -> Result<(), Error> {
    fs::create_dir_all(dir)?;
    let traj = &bundle.trajectory;
    write_trajectory(traj, &dir.join(TRAJECTORY_FILE))?;
    write_events(traj, &dir.join(EVENTS_FILE))?;
    let table = MetricsTable::new(
        &bundle.decomposition,
        &bundle.coi,
        traj.omega_base,
        bundle.case.metrics.omega_units,
    );
    table.write_metrics(&traj.times, &dir.join(METRICS_FILE))?;
    table.write_panels(&traj.times, dir)?;
    write_identities(&bundle.identities, &traj.bus_ids, &dir.join(IDENTITIES_FILE))?;
    fs::write(dir.join(CONFIG_FILE), bundle.case.to_canonical_json())?;
    let mut summary = serde_json::to_string_pretty(&bundle.summary)?;
    summary.push('\n');
    fs::write(dir.join(SUMMARY_FILE), summary)?;
    Ok(())
}

pub fn write_sweep_table(rows: &[SweepRow], path: &Path) -> Result<(), Error> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    let mut w = csv::Writer::from_path(path)?;
    w.write_record([
        "rx",
        "status",
        "rocof_coi",
        "rocof_vsys",
        "rocof_isys",
        "steady_s_l_mag",
        "peak_omega_vsys",
        "peak_omega_isys",
    ])?;
    let opt = |x: Option<f64>| fmt(x.unwrap_or(f64::NAN));
    for row in rows {
        let mut rec = vec![format!("{}", row.rx)];
        match &row.outcome {
            Ok(s) => rec.extend([
                "ok".to_string(),
                opt(s.rocof_coi),
                opt(s.rocof_v_sys),
                opt(s.rocof_i_sys),
                fmt(s.steady_loss_magnitude),
                fmt(s.peak_omega_v_sys),
                fmt(s.peak_omega_i_sys),
            ]),
            Err(e) => {
                rec.push(format!("failed: {e}"));
                rec.extend(std::iter::repeat_n("NaN".to_string(), 6));
            }
        }
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}
