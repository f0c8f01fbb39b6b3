//! Bus injections from the polar power-flow equations, branch power terms,
//! and a Newton-Raphson power-flow solver used to initialize dynamics.

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::Error;
use crate::netmodel::{build_admittance, AdmittanceMatrix, Network};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BusVoltage {
    pub magnitude: f64,
    pub angle: f64,
}

impl BusVoltage {
    pub fn new(magnitude: f64, angle: f64) -> Self {
        Self { magnitude, angle }
    }

    pub fn flat() -> Self {
        Self::new(1.0, 0.0)
    }

    pub fn from_phasor(v: Complex64) -> Self {
        Self::new(v.norm(), v.arg())
    }

    pub fn phasor(&self) -> Complex64 {
        Complex64::from_polar(self.magnitude, self.angle)
    }
}

/// Net complex power injected into the network at a bus. Loads are
/// negative injections.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct BusInjection {
    pub p: f64,
    pub q: f64,
}

impl BusInjection {
    pub fn complex(&self) -> Complex64 {
        Complex64::new(self.p, self.q)
    }
}

/// Contribution `p_hk + j q_hk` of bus `k` to the injection at bus `h`.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct BranchPowerTerm {
    pub p_hk: f64,
    pub q_hk: f64,
}

impl BranchPowerTerm {
    pub fn complex(&self) -> Complex64 {
        Complex64::new(self.p_hk, self.q_hk)
    }
}

/// Injections evaluated term by term from the polar power-flow equations
/// `p_h = v_h Σ v_k (G cos θ_hk + B sin θ_hk)`,
/// `q_h = v_h Σ v_k (G sin θ_hk − B cos θ_hk)`.
pub fn compute_injections(y: &AdmittanceMatrix, voltages: &[BusVoltage]) -> Vec<BusInjection> {
    assert_eq!(y.dim(), voltages.len(), "dimension mismatch");
    (0..y.dim())
        .map(|h| {
            let vh = voltages[h];
            let (mut p, mut q) = (0.0, 0.0);
            for (k, yhk) in y.row(h) {
                let vk = voltages[k];
                let (s, c) = (vh.angle - vk.angle).sin_cos();
                p += vk.magnitude * (yhk.re * c + yhk.im * s);
                q += vk.magnitude * (yhk.re * s - yhk.im * c);
            }
            BusInjection {
                p: vh.magnitude * p,
                q: vh.magnitude * q,
            }
        })
        .collect()
}

/// Branch power terms `s_hk` for every structural neighbour `k` of bus
/// position `h` (including `k = h`). Their sum is the injection at `h`.
pub fn branch_power_terms(
    y: &AdmittanceMatrix,
    voltages: &[BusVoltage],
    h: usize,
) -> Vec<(usize, BranchPowerTerm)> {
    let vh = voltages[h];
    y.row(h)
        .map(|(k, yhk)| {
            let vk = voltages[k];
            let (s, c) = (vh.angle - vk.angle).sin_cos();
            let vv = vh.magnitude * vk.magnitude;
            (
                k,
                BranchPowerTerm {
                    p_hk: vv * (yhk.re * c + yhk.im * s),
                    q_hk: vv * (yhk.re * s - yhk.im * c),
                },
            )
        })
        .collect()
}

/// Rectangular form `v ⊙ conj(Y v)`.
pub fn injections_rectangular(y: &AdmittanceMatrix, v: &[Complex64]) -> Vec<Complex64> {
    y.mul_vec(v)
        .into_iter()
        .zip(v)
        .map(|(i, v)| v * i.conj())
        .collect()
}

/// Total complex power absorbed by branch series impedances, line charging
/// and bus shunts, summed element by element without the admittance matrix.
pub fn element_losses(network: &Network, v: &[Complex64]) -> Complex64 {
    let mut total = Complex64::new(0.0, 0.0);
    for (pos, bus) in network.buses.iter().enumerate() {
        let y_sh = Complex64::new(bus.shunt_g, bus.shunt_b);
        total += y_sh.conj() * v[pos].norm_sqr();
    }
    for br in network.branches.iter().filter(|b| b.in_service) {
        let f = network.bus_index(br.from_bus).expect("validated network");
        let t = network.bus_index(br.to_bus).expect("validated network");
        let vf = v[f] / br.tap_ratio;
        let vt = v[t];
        let z = br.impedance();
        let i_series = (vf - vt) / z;
        total += z * i_series.norm_sqr();
        let half = Complex64::new(0.0, br.charging_b / 2.0);
        total += half.conj() * (vf.norm_sqr() + vt.norm_sqr());
    }
    total
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BusKind {
    Slack,
    Pv,
    Pq,
}

/// Power-flow specification of one bus: net injection setpoints and, for
/// slack and PV buses, the voltage magnitude setpoint.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BusSpec {
    pub kind: BusKind,
    pub p: f64,
    pub q: f64,
    pub v: f64,
}

/// Slack/PV/PQ assignment indexed by bus position.
#[derive(Debug, Clone, PartialEq)]
pub struct PowerFlowSpec {
    pub buses: Vec<BusSpec>,
}

impl PowerFlowSpec {
    /// All buses PQ with zero injection.
    pub fn new(n: usize) -> Self {
        Self {
            buses: vec![
                BusSpec {
                    kind: BusKind::Pq,
                    p: 0.0,
                    q: 0.0,
                    v: 1.0,
                };
                n
            ],
        }
    }

    pub fn slack(&self) -> Result<usize, Error> {
        let slacks: Vec<usize> = (0..self.buses.len())
            .filter(|&i| self.buses[i].kind == BusKind::Slack)
            .collect();
        match slacks.as_slice() {
            [s] => Ok(*s),
            _ => Err(Error::InvalidParameter(format!(
                "power flow needs exactly one slack bus, found {}",
                slacks.len()
            ))),
        }
    }

    fn unknown_layout(&self) -> (Vec<usize>, Vec<usize>) {
        let angle_buses = (0..self.buses.len())
            .filter(|&i| self.buses[i].kind != BusKind::Slack)
            .collect();
        let mag_buses = (0..self.buses.len())
            .filter(|&i| self.buses[i].kind == BusKind::Pq)
            .collect();
        (angle_buses, mag_buses)
    }

    fn flat_start(&self) -> Vec<BusVoltage> {
        self.buses
            .iter()
            .map(|b| match b.kind {
                BusKind::Pq => BusVoltage::flat(),
                _ => BusVoltage::new(b.v, 0.0),
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PowerFlowSolution {
    pub voltages: Vec<BusVoltage>,
    pub injections: Vec<BusInjection>,
    pub mismatch_norm: f64,
    pub iterations: usize,
}

impl PowerFlowSolution {
    pub fn phasors(&self) -> Vec<Complex64> {
        self.voltages.iter().map(BusVoltage::phasor).collect()
    }

    pub fn total_losses(&self) -> Complex64 {
        self.injections.iter().map(BusInjection::complex).sum()
    }
}

/// Active mismatch at every non-slack bus followed by reactive mismatch at
/// every PQ bus.
pub fn mismatch(y: &AdmittanceMatrix, spec: &PowerFlowSpec, voltages: &[BusVoltage]) -> Vec<f64> {
    let v: Vec<Complex64> = voltages.iter().map(BusVoltage::phasor).collect();
    let s = injections_rectangular(y, &v);
    let (angle_buses, mag_buses) = spec.unknown_layout();
    angle_buses
        .iter()
        .map(|&i| s[i].re - spec.buses[i].p)
        .chain(mag_buses.iter().map(|&i| s[i].im - spec.buses[i].q))
        .collect()
}

/// Analytic Jacobian of [`mismatch`] with respect to the non-slack angles
/// followed by the PQ magnitudes.
pub fn jacobian(y: &AdmittanceMatrix, spec: &PowerFlowSpec, voltages: &[BusVoltage]) -> DMatrix<f64> {
    let n = y.dim();
    let v: Vec<Complex64> = voltages.iter().map(BusVoltage::phasor).collect();
    let current = y.mul_vec(&v);
    let j = Complex64::i();

    // Dense complex sensitivities dS/dθ and dS/dv.
    let mut ds_dth = DMatrix::<Complex64>::zeros(n, n);
    let mut ds_dvm = DMatrix::<Complex64>::zeros(n, n);
    for h in 0..n {
        for (k, yhk) in y.row(h) {
            let unit_k = v[k] / voltages[k].magnitude;
            ds_dth[(h, k)] += j * v[h] * (-(yhk * v[k])).conj();
            ds_dvm[(h, k)] += v[h] * (yhk * unit_k).conj();
        }
        ds_dth[(h, h)] += j * v[h] * current[h].conj();
        ds_dvm[(h, h)] += current[h].conj() * v[h] / voltages[h].magnitude;
    }

    let (angle_buses, mag_buses) = spec.unknown_layout();
    let (na, nm) = (angle_buses.len(), mag_buses.len());
    let mut jac = DMatrix::zeros(na + nm, na + nm);
    for (r, &h) in angle_buses.iter().enumerate() {
        for (c, &k) in angle_buses.iter().enumerate() {
            jac[(r, c)] = ds_dth[(h, k)].re;
        }
        for (c, &k) in mag_buses.iter().enumerate() {
            jac[(r, na + c)] = ds_dvm[(h, k)].re;
        }
    }
    for (r, &h) in mag_buses.iter().enumerate() {
        for (c, &k) in angle_buses.iter().enumerate() {
            jac[(na + r, c)] = ds_dth[(h, k)].im;
        }
        for (c, &k) in mag_buses.iter().enumerate() {
            jac[(na + r, na + c)] = ds_dvm[(h, k)].im;
        }
    }
    jac
}

fn inf_norm(v: &[f64]) -> f64 {
    v.iter().fold(0.0, |m, x| m.max(x.abs()))
}

/// Newton-Raphson power flow in polar coordinates from a flat start.
///
/// `iterations` in the result is the 1-based pass at which the mismatch
/// first fell below `tol`.
pub fn solve_power_flow(
    network: &Network,
    spec: &PowerFlowSpec,
    tol: f64,
    max_iter: usize,
) -> Result<PowerFlowSolution, Error> {
    let y = build_admittance(network)?;
    if spec.buses.len() != y.dim() {
        return Err(Error::InvalidParameter(format!(
            "power-flow spec covers {} buses, network has {}",
            spec.buses.len(),
            y.dim()
        )));
    }
    spec.slack()?;
    let (angle_buses, mag_buses) = spec.unknown_layout();
    let mut voltages = spec.flat_start();
    let mut last = f64::INFINITY;

    for it in 1..=max_iter {
        let f = mismatch(&y, spec, &voltages);
        last = inf_norm(&f);
        if !last.is_finite() {
            break;
        }
        if last < tol {
            let injections = compute_injections(&y, &voltages);
            return Ok(PowerFlowSolution {
                voltages,
                injections,
                mismatch_norm: last,
                iterations: it,
            });
        }
        let jac = jacobian(&y, spec, &voltages);
        let rhs = -DVector::from_vec(f);
        let dx = jac.lu().solve(&rhs).ok_or_else(|| Error::Singular {
            context: format!("power-flow Jacobian at iteration {it}"),
        })?;
        for (r, &h) in angle_buses.iter().enumerate() {
            voltages[h].angle += dx[r];
        }
        for (r, &h) in mag_buses.iter().enumerate() {
            voltages[h].magnitude += dx[angle_buses.len() + r];
        }
    }
    Err(Error::PowerFlowDiverged {
        iterations: max_iter,
        mismatch: last,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::netmodel::{Branch, Bus};
    use proptest::prelude::*;

    fn net(n: usize, branches: Vec<Branch>) -> Network {
        Network {
            base_mva: 100.0,
            base_frequency: 60.0,
            buses: (1..=n).map(|i| Bus::new(i, 230.0)).collect(),
            branches,
        }
    }

    fn two_bus() -> Network {
        net(2, vec![Branch::line(1, 2, 0.0, 0.1, 0.0)])
    }

    #[test]
    fn flat_voltages_zero_row_sum_give_zero_injections() {
        let n = net(3, vec![Branch::line(1, 2, 0.01, 0.1, 0.0), Branch::line(2, 3, 0.02, 0.2, 0.0)]);
        let y = build_admittance(&n).unwrap();
        let s = compute_injections(&y, &[BusVoltage::flat(); 3]);
        for inj in s {
            assert!(inj.p.abs() < 1e-12 && inj.q.abs() < 1e-12);
        }
    }

    #[test]
    fn equal_voltages_no_transfer() {
        let y = build_admittance(&net(2, vec![Branch::line(1, 2, 0.03, 0.2, 0.0)])).unwrap();
        let v = BusVoltage::new(1.03, -0.4);
        let s = compute_injections(&y, &[v, v]);
        assert!(s[0].p.abs() < 1e-12 && s[1].q.abs() < 1e-12);
    }

    #[test]
    fn two_bus_hand_evaluation() {
        let y = build_admittance(&two_bus()).unwrap();
        let v = [BusVoltage::new(1.0, 0.0), BusVoltage::new(0.98, -0.02)];
        let s = compute_injections(&y, &v);
        // Hand: G = 0, B_11 = -10, B_12 = +10.
        // p1 = v1 [v1 (B11 sin 0) + v2 (B12 sin(0.02))] = 0.98 * 10 * sin(0.02)
        let p1 = 0.98 * 10.0 * 0.02f64.sin();
        // q1 = v1 [-v1 B11 - v2 B12 cos(0.02)] = 10 - 9.8 cos(0.02)
        let q1 = 10.0 - 9.8 * 0.02f64.cos();
        assert!((s[0].p - p1).abs() < 1e-14);
        assert!((s[0].p - 0.195987).abs() < 1e-6);
        assert!((s[0].q - q1).abs() < 1e-14);

        let terms = branch_power_terms(&y, &v, 0);
        let t11 = terms.iter().find(|(k, _)| *k == 0).unwrap().1;
        let t12 = terms.iter().find(|(k, _)| *k == 1).unwrap().1;
        assert!(t11.p_hk.abs() < 1e-14);
        assert!((t11.q_hk - 10.0).abs() < 1e-14);
        assert!((t12.p_hk - p1).abs() < 1e-14);
        assert!((t12.q_hk - (-9.8 * 0.02f64.cos())).abs() < 1e-14);
    }

    #[test]
    fn branch_term_aligned_lossless() {
        let y = build_admittance(&two_bus()).unwrap();
        let v = [BusVoltage::new(1.02, 0.3), BusVoltage::new(0.97, 0.3)];
        let t = branch_power_terms(&y, &v, 0);
        let t12 = t.iter().find(|(k, _)| *k == 1).unwrap().1;
        assert!(t12.p_hk.abs() < 1e-14);
        assert!((t12.q_hk - (-1.02 * 0.97 * 10.0)).abs() < 1e-12);
    }

    fn random_network(seed: u64) -> (Network, Vec<BusVoltage>) {
        // Small deterministic LCG; the network only needs to be irregular.
        let mut state = seed.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
        let mut next = || {
            state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            ((state >> 11) as f64) / ((1u64 << 53) as f64)
        };
        let mut branches = Vec::new();
        for k in 2..=5 {
            let from = 1 + ((next() * (k - 1) as f64) as usize).min(k - 2);
            let mut br = Branch::line(from, k, 0.005 + 0.05 * next(), 0.05 + 0.2 * next(), 0.1 * next());
            if next() < 0.3 {
                br.tap_ratio = 0.95 + 0.1 * next();
            }
            branches.push(br);
        }
        branches.push(Branch::line(1, 5, 0.02, 0.15, 0.05));
        let mut n = net(5, branches);
        n.buses[2].shunt_b = 0.1 * next();
        n.buses[3].shunt_g = 0.05 * next();
        let v = (0..5)
            .map(|_| BusVoltage::new(0.9 + 0.2 * next(), -0.5 + next()))
            .collect();
        (n, v)
    }

    #[test]
    fn branch_terms_resum_to_injection() {
        for seed in 0..20 {
            let (n, v) = random_network(seed);
            let y = build_admittance(&n).unwrap();
            let s = compute_injections(&y, &v);
            for (h, sh) in s.iter().enumerate().take(5) {
                let sum: Complex64 = branch_power_terms(&y, &v, h).iter().map(|(_, t)| t.complex()).sum();
                assert!((sum - sh.complex()).norm() < 1e-12);
            }
        }
    }

    proptest! {
        #[test]
        fn polar_and_rectangular_injections_agree(seed in 0u64..10_000) {
            let (n, v) = random_network(seed);
            let y = build_admittance(&n).unwrap();
            let polar = compute_injections(&y, &v);
            let phasors: Vec<Complex64> = v.iter().map(BusVoltage::phasor).collect();
            let rect = injections_rectangular(&y, &phasors);
            for (a, b) in polar.iter().zip(&rect) {
                prop_assert!((a.complex() - b).norm() < 1e-12);
            }
        }

        #[test]
        fn injections_sum_to_element_losses(seed in 0u64..10_000) {
            let (n, v) = random_network(seed);
            let y = build_admittance(&n).unwrap();
            let phasors: Vec<Complex64> = v.iter().map(BusVoltage::phasor).collect();
            let total: Complex64 = injections_rectangular(&y, &phasors).into_iter().sum();
            let oracle = element_losses(&n, &phasors);
            prop_assert!((total - oracle).norm() < 1e-10 * (1.0 + oracle.norm()));
        }
    }

    #[test]
    fn jacobian_matches_finite_differences() {
        let (n, v) = random_network(7);
        let y = build_admittance(&n).unwrap();
        let mut spec = PowerFlowSpec::new(5);
        spec.buses[0].kind = BusKind::Slack;
        spec.buses[2].kind = BusKind::Pv;
        let jac = jacobian(&y, &spec, &v);
        let (angle_buses, mag_buses) = spec.unknown_layout();
        let step = 1e-7;
        let base_cols = angle_buses.len() + mag_buses.len();
        for c in 0..base_cols {
            let perturb = |sign: f64| {
                let mut w = v.clone();
                if c < angle_buses.len() {
                    w[angle_buses[c]].angle += sign * step;
                } else {
                    w[mag_buses[c - angle_buses.len()]].magnitude += sign * step;
                }
                mismatch(&y, &spec, &w)
            };
            let (fp, fm) = (perturb(1.0), perturb(-1.0));
            for r in 0..base_cols {
                let fd = (fp[r] - fm[r]) / (2.0 * step);
                let an = jac[(r, c)];
                assert!(
                    (fd - an).abs() <= 1e-6 * an.abs().max(1.0),
                    "J[{r},{c}]: analytic {an}, fd {fd}"
                );
            }
        }
    }

    #[test]
    fn zero_load_network_is_flat() {
        let n = net(3, vec![Branch::line(1, 2, 0.01, 0.1, 0.0), Branch::line(2, 3, 0.01, 0.1, 0.0)]);
        let mut spec = PowerFlowSpec::new(3);
        spec.buses[0].kind = BusKind::Slack;
        let sol = solve_power_flow(&n, &spec, 1e-8, 20).unwrap();
        assert_eq!(sol.iterations, 1);
        for v in &sol.voltages {
            assert_eq!(*v, BusVoltage::flat());
        }
        assert_eq!(sol.injections[0].complex().norm(), 0.0);
    }

    /// Residual of the 2-bus case as a function of the PQ bus voltage.
    fn two_bus_residual(v2: f64, th2: f64) -> f64 {
        // s2 = v2 conj(Y21 v1 + Y22 v2), Y21 = j10, Y22 = -j10, v1 = 1.
        let v = Complex64::from_polar(v2, th2);
        let i2 = Complex64::new(0.0, 10.0) + Complex64::new(0.0, -10.0) * v;
        let s2 = v * i2.conj();
        (s2.re + 0.2).powi(2) + s2.im.powi(2)
    }

    #[test]
    fn two_bus_matches_brute_force_search() {
        // Oracle: successive grid refinement on the residual surface.
        let (mut vc, mut tc, mut span_v, mut span_t) = (0.95, -0.1, 0.1, 0.2);
        for _ in 0..12 {
            let mut best = (f64::INFINITY, vc, tc);
            for i in 0..=40 {
                for k in 0..=40 {
                    let v2 = vc - span_v + 2.0 * span_v * i as f64 / 40.0;
                    let t2 = tc - span_t + 2.0 * span_t * k as f64 / 40.0;
                    let r = two_bus_residual(v2, t2);
                    if r < best.0 {
                        best = (r, v2, t2);
                    }
                }
            }
            vc = best.1;
            tc = best.2;
            span_v /= 5.0;
            span_t /= 5.0;
        }

        let mut spec = PowerFlowSpec::new(2);
        spec.buses[0].kind = BusKind::Slack;
        spec.buses[1].p = -0.2;
        let sol = solve_power_flow(&two_bus(), &spec, 1e-10, 20).unwrap();
        assert!((sol.voltages[1].magnitude - vc).abs() < 1e-6, "{} vs {vc}", sol.voltages[1].magnitude);
        assert!((sol.voltages[1].angle - tc).abs() < 1e-6, "{} vs {tc}", sol.voltages[1].angle);
        assert!((sol.injections[1].p + 0.2).abs() < 1e-9);
    }

    #[test]
    fn requires_exactly_one_slack() {
        let spec = PowerFlowSpec::new(2);
        assert!(solve_power_flow(&two_bus(), &spec, 1e-8, 10).is_err());
    }

    #[test]
    fn infeasible_case_reports_divergence() {
        let mut spec = PowerFlowSpec::new(2);
        spec.buses[0].kind = BusKind::Slack;
        spec.buses[1].p = -50.0;
        match solve_power_flow(&two_bus(), &spec, 1e-8, 15) {
            Err(Error::PowerFlowDiverged { iterations, .. }) => assert_eq!(iterations, 15),
            Err(Error::Singular { .. }) => {}
            other => panic!("expected failure, got {other:?}"),
        }
    }
}
