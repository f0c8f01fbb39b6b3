//! Per-unit network description and nodal admittance matrix.
//!
//! Branches use the standard π-model: series impedance `r + jx`, total line
//! charging `b` split evenly between both ends, and an off-nominal tap ratio
//! on the from side.

use std::collections::{BTreeMap, BTreeSet, VecDeque};

use nalgebra::DMatrix;
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::Error;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Bus {
    pub id: usize,
    #[serde(default)]
    pub name: String,
    pub base_kv: f64,
    #[serde(default)]
    pub shunt_g: f64,
    #[serde(default)]
    pub shunt_b: f64,
}

impl Bus {
    pub fn new(id: usize, base_kv: f64) -> Self {
        Self {
            id,
            name: format!("bus{id}"),
            base_kv,
            shunt_g: 0.0,
            shunt_b: 0.0,
        }
    }
}

fn default_tap() -> f64 {
    1.0
}

fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Branch {
    pub from_bus: usize,
    pub to_bus: usize,
    pub resistance_r: f64,
    pub reactance_x: f64,
    #[serde(default)]
    pub charging_b: f64,
    #[serde(default = "default_tap")]
    pub tap_ratio: f64,
    #[serde(default = "default_true")]
    pub in_service: bool,
    /// Marks a transformer even at nominal tap.
    #[serde(default)]
    pub transformer: bool,
}

impl Branch {
    pub fn line(from_bus: usize, to_bus: usize, r: f64, x: f64, b: f64) -> Self {
        Self {
            from_bus,
            to_bus,
            resistance_r: r,
            reactance_x: x,
            charging_b: b,
            tap_ratio: 1.0,
            in_service: true,
            transformer: false,
        }
    }

    pub fn impedance(&self) -> Complex64 {
        Complex64::new(self.resistance_r, self.reactance_x)
    }

    /// Flagged transformers and every branch with an off-nominal tap.
    pub fn is_transformer(&self) -> bool {
        self.transformer || self.tap_ratio != 1.0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Network {
    pub base_mva: f64,
    pub base_frequency: f64,
    pub buses: Vec<Bus>,
    pub branches: Vec<Branch>,
}

impl Network {
    pub fn n_buses(&self) -> usize {
        self.buses.len()
    }

    /// Base angular frequency in rad/s.
    pub fn omega_base(&self) -> f64 {
        2.0 * std::f64::consts::PI * self.base_frequency
    }

    /// Position of a bus id in `buses`.
    pub fn bus_index(&self, id: usize) -> Option<usize> {
        self.buses.iter().position(|b| b.id == id)
    }

    pub fn bus_ids(&self) -> Vec<usize> {
        self.buses.iter().map(|b| b.id).collect()
    }

    fn index_map(&self) -> BTreeMap<usize, usize> {
        self.buses
            .iter()
            .enumerate()
            .map(|(i, b)| (b.id, i))
            .collect()
    }
}

/// Complex nodal admittance matrix in compressed-row form.
///
/// Rows and columns are bus positions (not ids). Entries are kept in
/// ascending `(row, column)` order and every structurally present entry is
/// retained, even when its value cancels to zero.
#[derive(Debug, Clone, PartialEq)]
pub struct AdmittanceMatrix {
    n: usize,
    row_ptr: Vec<usize>,
    col_idx: Vec<usize>,
    values: Vec<Complex64>,
}

impl AdmittanceMatrix {
    pub fn zeros(n: usize) -> Self {
        Self {
            n,
            row_ptr: vec![0; n + 1],
            col_idx: Vec::new(),
            values: Vec::new(),
        }
    }

    fn from_entries(n: usize, entries: BTreeMap<(usize, usize), Complex64>) -> Self {
        let mut row_ptr = vec![0; n + 1];
        let mut col_idx = Vec::with_capacity(entries.len());
        let mut values = Vec::with_capacity(entries.len());
        for (&(r, c), &v) in &entries {
            row_ptr[r + 1] += 1;
            col_idx.push(c);
            values.push(v);
        }
        for r in 0..n {
            row_ptr[r + 1] += row_ptr[r];
        }
        Self {
            n,
            row_ptr,
            col_idx,
            values,
        }
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    pub fn get(&self, row: usize, col: usize) -> Complex64 {
        let range = self.row_ptr[row]..self.row_ptr[row + 1];
        match self.col_idx[range.clone()].binary_search(&col) {
            Ok(pos) => self.values[range.start + pos],
            Err(_) => Complex64::new(0.0, 0.0),
        }
    }

    /// Structural entries of one row as `(column, value)`.
    pub fn row(&self, row: usize) -> impl Iterator<Item = (usize, Complex64)> + '_ {
        let range = self.row_ptr[row]..self.row_ptr[row + 1];
        self.col_idx[range.clone()]
            .iter()
            .copied()
            .zip(self.values[range].iter().copied())
    }

    /// Sorted list of structural `(row, column)` positions.
    pub fn pattern(&self) -> Vec<(usize, usize)> {
        (0..self.n)
            .flat_map(|r| self.row(r).map(move |(c, _)| (r, c)))
            .collect()
    }

    pub fn mul_vec(&self, v: &[Complex64]) -> Vec<Complex64> {
        assert_eq!(v.len(), self.n, "dimension mismatch");
        (0..self.n)
            .map(|r| self.row(r).map(|(c, y)| y * v[c]).sum())
            .collect()
    }

    pub fn to_dense(&self) -> DMatrix<Complex64> {
        let mut m = DMatrix::zeros(self.n, self.n);
        for r in 0..self.n {
            for (c, v) in self.row(r) {
                m[(r, c)] = v;
            }
        }
        m
    }

    pub fn row_sum(&self, row: usize) -> Complex64 {
        self.row(row).map(|(_, v)| v).sum()
    }
}

/// Builds the nodal admittance matrix. Out-of-service branches are skipped.
pub fn build_admittance(network: &Network) -> Result<AdmittanceMatrix, Error> {
    let index = network.index_map();
    let n = network.n_buses();
    let mut entries: BTreeMap<(usize, usize), Complex64> = BTreeMap::new();
    let j = Complex64::i();

    for (pos, bus) in network.buses.iter().enumerate() {
        if bus.shunt_g != 0.0 || bus.shunt_b != 0.0 {
            *entries.entry((pos, pos)).or_default() += Complex64::new(bus.shunt_g, bus.shunt_b);
        }
    }

    for (k, br) in network.branches.iter().enumerate() {
        if !br.in_service {
            continue;
        }
        let z = br.impedance();
        if z.norm() == 0.0 {
            return Err(Error::ZeroImpedance {
                branch: k,
                from: br.from_bus,
                to: br.to_bus,
            });
        }
        let (f, t) = match (index.get(&br.from_bus), index.get(&br.to_bus)) {
            (Some(&f), Some(&t)) => (f, t),
            _ => {
                return Err(Error::UnknownBus {
                    context: format!("branch {k}"),
                    bus: if index.contains_key(&br.from_bus) {
                        br.to_bus
                    } else {
                        br.from_bus
                    },
                })
            }
        };
        let ys = z.inv();
        let half_charging = j * (br.charging_b / 2.0);
        let tap = br.tap_ratio;
        *entries.entry((f, f)).or_default() += (ys + half_charging) / (tap * tap);
        *entries.entry((t, t)).or_default() += ys + half_charging;
        *entries.entry((f, t)).or_default() += -ys / tap;
        *entries.entry((t, f)).or_default() += -ys / tap;
    }

    Ok(AdmittanceMatrix::from_entries(n, entries))
}

/// Which branches an R/X transform touches.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum RxScope {
    /// Lines and transformers alike.
    AllBranches,
    /// Branches with a nominal tap only.
    #[default]
    LinesOnly,
}

/// Returns a copy of `network` where every branch in scope has its series
/// impedance rotated to the requested R/X ratio at unchanged magnitude.
pub fn set_rx_ratio(network: &Network, ratio: f64, scope: RxScope) -> Result<Network, Error> {
    if !(ratio > 0.0 && ratio.is_finite()) {
        return Err(Error::InvalidParameter(format!(
            "R/X ratio must be positive and finite, got {ratio}"
        )));
    }
    let scale = (1.0 + ratio * ratio).sqrt();
    let mut out = network.clone();
    for br in &mut out.branches {
        if scope == RxScope::LinesOnly && br.is_transformer() {
            continue;
        }
        let mag = br.resistance_r.hypot(br.reactance_x);
        br.resistance_r = mag * ratio / scale;
        br.reactance_x = mag / scale;
    }
    Ok(out)
}

/// A broken invariant of a network, named by entity and rule.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Violation {
    pub entity: String,
    pub rule: String,
}

impl std::fmt::Display for Violation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}: {}", self.entity, self.rule)
    }
}

fn violation(entity: impl Into<String>, rule: impl Into<String>) -> Violation {
    Violation {
        entity: entity.into(),
        rule: rule.into(),
    }
}

/// Checks every bus, branch and network invariant. An empty list means the
/// network is well formed.
pub fn validate(network: &Network) -> Vec<Violation> {
    let mut out = Vec::new();
    if !(network.base_mva > 0.0 && network.base_mva.is_finite()) {
        out.push(violation("network", "base_mva must be positive"));
    }
    if !(network.base_frequency > 0.0 && network.base_frequency.is_finite()) {
        out.push(violation("network", "base_frequency must be positive"));
    }
    if network.buses.is_empty() {
        out.push(violation("network", "at least one bus is required"));
    }

    let mut seen = BTreeSet::new();
    for bus in &network.buses {
        let entity = format!("bus {}", bus.id);
        if !seen.insert(bus.id) {
            out.push(violation(&entity, "duplicate bus id"));
        }
        if !(bus.base_kv > 0.0 && bus.base_kv.is_finite()) {
            out.push(violation(&entity, "base_kv must be positive"));
        }
        if !bus.shunt_g.is_finite() || !bus.shunt_b.is_finite() {
            out.push(violation(&entity, "shunt admittance must be finite"));
        }
    }

    for (k, br) in network.branches.iter().enumerate() {
        let entity = format!("branch {k} ({}-{})", br.from_bus, br.to_bus);
        if br.from_bus == br.to_bus {
            out.push(violation(&entity, "from_bus equals to_bus"));
        }
        for end in [br.from_bus, br.to_bus] {
            if !seen.contains(&end) {
                out.push(violation(&entity, format!("references unknown bus {end}")));
            }
        }
        let finite = [br.resistance_r, br.reactance_x, br.charging_b, br.tap_ratio]
            .iter()
            .all(|v| v.is_finite());
        if !finite {
            out.push(violation(&entity, "parameters must be finite"));
        }
        if br.resistance_r == 0.0 && br.reactance_x == 0.0 {
            out.push(violation(&entity, "series impedance is zero"));
        }
        if br.tap_ratio <= 0.0 {
            out.push(violation(&entity, "tap_ratio must be positive"));
        }
    }

    let unreachable = unreachable_buses(network);
    if !unreachable.is_empty() && !network.buses.is_empty() {
        let ids: Vec<String> = unreachable.iter().map(|id| id.to_string()).collect();
        out.push(violation(
            "network",
            format!("disconnected; unreachable buses: {}", ids.join(", ")),
        ));
    }
    out
}

/// Bus ids not reachable from the first bus over in-service branches.
pub fn unreachable_buses(network: &Network) -> Vec<usize> {
    let index = network.index_map();
    let n = network.n_buses();
    if n == 0 {
        return Vec::new();
    }
    let mut adjacency = vec![Vec::new(); n];
    for br in network.branches.iter().filter(|b| b.in_service) {
        if let (Some(&f), Some(&t)) = (index.get(&br.from_bus), index.get(&br.to_bus)) {
            adjacency[f].push(t);
            adjacency[t].push(f);
        }
    }
    let mut visited = vec![false; n];
    let mut queue = VecDeque::from([0]);
    visited[0] = true;
    while let Some(u) = queue.pop_front() {
        for &w in &adjacency[u] {
            if !visited[w] {
                visited[w] = true;
                queue.push_back(w);
            }
        }
    }
    network
        .buses
        .iter()
        .zip(visited)
        .filter(|(_, v)| !v)
        .map(|(b, _)| b.id)
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: Complex64, b: Complex64, tol: f64) -> bool {
        (a - b).norm() <= tol
    }

    fn c(re: f64, im: f64) -> Complex64 {
        Complex64::new(re, im)
    }

    fn net(buses: usize, branches: Vec<Branch>) -> Network {
        Network {
            base_mva: 100.0,
            base_frequency: 60.0,
            buses: (1..=buses).map(|i| Bus::new(i, 345.0)).collect(),
            branches,
        }
    }

    #[test]
    fn single_reactive_branch_stamp() {
        let y = build_admittance(&net(2, vec![Branch::line(1, 2, 0.0, 0.1, 0.0)])).unwrap();
        assert!(close(y.get(0, 0), c(0.0, -10.0), 1e-12));
        assert!(close(y.get(0, 1), c(0.0, 10.0), 1e-12));
        assert!(close(y.get(1, 0), c(0.0, 10.0), 1e-12));
        assert!(close(y.get(1, 1), c(0.0, -10.0), 1e-12));
    }

    #[test]
    fn no_branches_gives_zero_matrix() {
        let y = build_admittance(&net(4, vec![])).unwrap();
        assert_eq!(y.dim(), 4);
        assert_eq!(y.nnz(), 0);
        assert_eq!(y.get(2, 3), c(0.0, 0.0));
    }

    #[test]
    fn three_bus_ring_matches_hand_stamp() {
        let (r, x, b) = (0.01, 0.1, 0.02);
        let n = net(
            3,
            vec![
                Branch::line(1, 2, r, x, b),
                Branch::line(2, 3, r, x, b),
                Branch::line(3, 1, r, x, b),
            ],
        );
        let y = build_admittance(&n).unwrap();
        // Hand stamp: ys = 1/(r+jx) = (r - jx)/(r^2+x^2).
        let d = r * r + x * x;
        let ys = c(r / d, -x / d);
        let diag = ys * 2.0 + c(0.0, b);
        let off = -ys;
        for h in 0..3 {
            assert!(close(y.get(h, h), diag, 1e-12));
            for k in 0..3 {
                if h != k {
                    assert!(close(y.get(h, k), off, 1e-12));
                }
            }
        }
        // Row sums equal the half-charging of the two incident branches.
        for h in 0..3 {
            assert!(close(y.row_sum(h), c(0.0, b), 1e-12));
        }
    }

    #[test]
    fn out_of_service_branch_ignored() {
        let mut br = Branch::line(1, 2, 0.0, 0.1, 0.0);
        br.in_service = false;
        let y = build_admittance(&net(2, vec![br, Branch::line(1, 2, 0.0, 0.2, 0.0)])).unwrap();
        assert!(close(y.get(0, 1), c(0.0, 5.0), 1e-12));
    }

    #[test]
    fn zero_impedance_rejected_with_branch_identity() {
        let err = build_admittance(&net(2, vec![Branch::line(1, 2, 0.0, 0.0, 0.0)])).unwrap_err();
        match err {
            Error::ZeroImpedance { branch, from, to } => {
                assert_eq!((branch, from, to), (0, 1, 2));
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn tap_stamp_on_from_side() {
        let mut br = Branch::line(1, 2, 0.0, 0.1, 0.0);
        br.tap_ratio = 1.05;
        let y = build_admittance(&net(2, vec![br])).unwrap();
        let ys = c(0.0, -10.0);
        assert!(close(y.get(0, 0), ys / (1.05 * 1.05), 1e-12));
        assert!(close(y.get(1, 1), ys, 1e-12));
        assert!(close(y.get(0, 1), -ys / 1.05, 1e-12));
        assert!(close(y.get(1, 0), -ys / 1.05, 1e-12));
    }

    #[test]
    fn rx_ratio_one_splits_evenly() {
        let n = net(2, vec![Branch::line(1, 2, 0.0, 0.1, 0.0)]);
        let m = set_rx_ratio(&n, 1.0, RxScope::AllBranches).unwrap();
        let br = &m.branches[0];
        let expected = 0.1 / 2f64.sqrt();
        assert!((br.resistance_r - expected).abs() < 1e-15);
        assert!((br.reactance_x - expected).abs() < 1e-15);
        // input untouched
        assert_eq!(n.branches[0].resistance_r, 0.0);
    }

    #[test]
    fn rx_ratio_identity_case() {
        let n = net(2, vec![Branch::line(1, 2, 0.01, 0.1, 0.0)]);
        let m = set_rx_ratio(&n, 0.01 / 0.1, RxScope::AllBranches).unwrap();
        assert!((m.branches[0].resistance_r - 0.01).abs() < 1e-15);
        assert!((m.branches[0].reactance_x - 0.1).abs() < 1e-15);
    }

    #[test]
    fn rx_ratio_half_satisfies_both_constraints() {
        // |z| = 0.2 starting from a purely reactive branch.
        let n = net(2, vec![Branch::line(1, 2, 0.0, 0.2, 0.0)]);
        let m = set_rx_ratio(&n, 0.5, RxScope::AllBranches).unwrap();
        let br = &m.branches[0];
        // Oracle: r = 0.5 x and r^2 + x^2 = 0.04  =>  x^2 (1.25) = 0.04.
        let x = (0.04f64 / 1.25).sqrt();
        assert!((br.reactance_x - x).abs() < 1e-15);
        assert!((br.resistance_r - 0.5 * x).abs() < 1e-15);
        assert!((br.reactance_x - 0.178885).abs() < 1e-6);
        assert!((br.resistance_r - 0.089443).abs() < 1e-6);
        assert!((br.resistance_r.powi(2) + br.reactance_x.powi(2) - 0.04).abs() < 1e-15);
    }

    #[test]
    fn rx_ratio_scope_skips_transformers() {
        let mut tr = Branch::line(1, 2, 0.0, 0.1, 0.0);
        tr.tap_ratio = 1.025;
        let n = net(2, vec![tr]);
        let m = set_rx_ratio(&n, 1.0, RxScope::LinesOnly).unwrap();
        assert_eq!(m.branches[0], n.branches[0]);
        let m = set_rx_ratio(&n, 1.0, RxScope::AllBranches).unwrap();
        assert!(m.branches[0].resistance_r > 0.0);
    }

    #[test]
    fn rx_ratio_rejects_nonpositive() {
        let n = net(2, vec![Branch::line(1, 2, 0.0, 0.1, 0.0)]);
        assert!(set_rx_ratio(&n, 0.0, RxScope::AllBranches).is_err());
        assert!(set_rx_ratio(&n, -1.0, RxScope::AllBranches).is_err());
    }

    #[test]
    fn validate_self_loop_named() {
        let n = net(2, vec![Branch::line(1, 2, 0.0, 0.1, 0.0), Branch::line(2, 2, 0.0, 0.1, 0.0)]);
        let v = validate(&n);
        assert_eq!(v.len(), 1, "{v:?}");
        assert!(v[0].entity.contains("branch 1"));
        assert!(v[0].rule.contains("from_bus equals to_bus"));
    }

    #[test]
    fn validate_reports_island() {
        // 1-2 connected, 3-4 connected, no link between the pairs.
        let n = net(4, vec![Branch::line(1, 2, 0.0, 0.1, 0.0), Branch::line(3, 4, 0.0, 0.1, 0.0)]);
        let v = validate(&n);
        assert_eq!(v.len(), 1);
        assert!(v[0].rule.contains("unreachable buses: 3, 4"), "{}", v[0]);
    }

    #[test]
    fn validate_clean_network() {
        let n = net(3, vec![Branch::line(1, 2, 0.01, 0.1, 0.0), Branch::line(2, 3, 0.01, 0.1, 0.0)]);
        assert!(validate(&n).is_empty());
    }

    #[test]
    fn validate_catches_duplicates_and_bad_values() {
        let mut n = net(2, vec![Branch::line(1, 2, 0.0, 0.0, 0.0)]);
        n.buses.push(Bus::new(2, -1.0));
        n.branches[0].tap_ratio = 0.0;
        let rules: Vec<String> = validate(&n).into_iter().map(|v| v.rule).collect();
        assert!(rules.iter().any(|r| r == "duplicate bus id"));
        assert!(rules.iter().any(|r| r == "base_kv must be positive"));
        assert!(rules.iter().any(|r| r == "series impedance is zero"));
        assert!(rules.iter().any(|r| r == "tap_ratio must be positive"));
    }
}
