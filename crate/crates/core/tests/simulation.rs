mod common;

use num_complex::Complex64;

use cfsim::cfmetrics::{coi_frequency, differentiate, MetricMode};
use cfsim::devices::{Event, EventAction};
use cfsim::dynsim;
use cfsim::harness::run::{evaluate, prepare, simulate};
use cfsim::harness::DeviceSpec;
use cfsim::powerflow::{element_losses, solve_power_flow};

#[test]
fn power_flow_converges_from_flat_start() {
    for rx in [None, Some(0.1), Some(1.0)] {
        let case = common::ieee39(rx, 1.0);
        let net = case.effective_network().unwrap();
        let pf = solve_power_flow(&net, &case.power_flow_spec(), 1e-8, 30).unwrap();
        assert!(pf.mismatch_norm < 1e-8);
        assert!(pf.iterations > 1, "flat start should need Newton steps");
        let loss = pf.total_losses();
        assert!((loss - element_losses(&net, &pf.phasors())).norm() < 1e-9);
    }
}

#[test]
fn equilibrium_is_preserved_without_events() {
    let mut case = common::ieee39(Some(0.1), 2.0);
    case.events.clear();
    let b = evaluate(&case).unwrap();
    let t = &b.trajectory;
    let x0 = t.states(0);
    let drift = (0..t.n_rows())
        .flat_map(|r| t.states(r).iter().zip(x0).map(|(a, b)| (a - b).abs()))
        .fold(0.0f64, f64::max);
    assert!(drift < 1e-9, "state drift {drift:e}");
    assert!(b.summary.max_metric_magnitude < 1e-6, "{}", b.summary.max_metric_magnitude);
    let vdot = (0..t.n_rows())
        .flat_map(|r| t.voltage_rates(r).unwrap().iter().map(|z| z.norm()))
        .fold(0.0f64, f64::max);
    assert!(vdot < 1e-10, "{vdot:e}");
}

#[test]
fn zero_gains_give_a_static_network() {
    let mut case = common::ieee39(Some(0.1), 1.0);
    case.events.clear();
    for d in &mut case.devices {
        match d {
            DeviceSpec::GfmVsm { params, .. } => {
                params.freq_droop_gain = 0.0;
                params.volt_droop_gain = 0.0;
                params.damping_d = 0.0;
            }
            DeviceSpec::Gfl { params, .. } => {
                params.freq_droop_gain = 0.0;
                params.volt_droop_gain = 0.0;
                params.pll_kp = 0.0;
                params.pll_ki = 0.0;
            }
        }
    }
    let (_, t) = simulate(&case).unwrap();
    let last = t.n_rows() - 1;
    let dv = t.voltages(0).iter().zip(t.voltages(last)).fold(0.0f64, |m, (a, b)| m.max((a - b).norm()));
    let dx = t.states(0).iter().zip(t.states(last)).fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
    assert!(dv < 1e-10 && dx < 1e-10, "{dv:e} {dx:e}");
}

#[test]
fn losses_match_element_resummation_along_transient() {
    let case = common::ieee39(Some(1.0), 2.0);
    let (net, _, mut system) = prepare(&case).unwrap();
    let t = dynsim::run(&mut system, &case.integrator).unwrap();
    let mut worst = 0.0f64;
    for r in 0..t.n_rows() {
        let s_l: Complex64 = t.injections(r).iter().sum();
        worst = worst.max((s_l - element_losses(&net, t.voltages(r))).norm());
    }
    assert!(worst < 1e-8, "{worst:e}");
}

#[test]
fn nodal_balance_holds_at_every_step() {
    let case = common::ieee39(Some(0.1), 1.5);
    let (_, _, mut system) = prepare(&case).unwrap();
    let mut replay = system.clone();
    let t = dynsim::run(&mut system, &case.integrator).unwrap();
    let event_row = t.events[0].step;
    let mut worst = 0.0f64;
    for r in 0..t.n_rows() {
        if r == event_row {
            replay.apply(&case.events[0]).unwrap();
        }
        let g = replay.nodal_residual(t.states(r), t.voltages(r));
        worst = g.iter().fold(worst, |m, z| m.max(z.re.abs()).max(z.im.abs()));
    }
    assert!(worst < case.integrator.newton_tol, "{worst:e}");
}

#[test]
fn zero_load_step_matches_the_undisturbed_run() {
    let mut quiet = common::ieee39(Some(0.1), 1.5);
    quiet.events.clear();
    let mut step = quiet.clone();
    step.events = vec![Event {
        time: 0.5,
        action: EventAction::LoadStep { bus: 8, dp: 0.0, dq: 0.0 },
    }];
    let (_, a) = simulate(&quiet).unwrap();
    let (_, b) = simulate(&step).unwrap();
    assert_eq!(a.n_rows(), b.n_rows());
    for r in 0..a.n_rows() {
        for (x, y) in a.states(r).iter().zip(b.states(r)) {
            assert!((x - y).abs() < 1e-12);
        }
    }
}

#[test]
fn single_converter_settles_on_its_droop_line() {
    let dp = 0.1;
    let case = common::gfm_and_load(
        0.5,
        0.1,
        vec![Event {
            time: 0.5,
            action: EventAction::LoadStep { bus: 2, dp, dq: 0.0 },
        }],
        20.0,
    );
    let (_, t) = simulate(&case).unwrap();
    let omega = t.state_index("gfm1.omega").unwrap();
    let last = t.n_rows() - 1;
    let dw = t.states(last)[omega] - 1.0;
    let p0 = t.injections(0)[0].re;
    let p1 = t.injections(last)[0].re;
    let DeviceSpec::GfmVsm { params, .. } = &case.devices[0] else { unreachable!() };
    let lhs = (params.freq_droop_gain + params.damping_d) * dw;
    assert!(dw < 0.0);
    assert!((lhs + (p1 - p0)).abs() < 1e-6 * (p1 - p0).abs(), "{lhs} vs {}", p1 - p0);
}

#[test]
fn voltage_rates_follow_a_prescribed_rotation() {
    // With one source and linear loads every bus voltage is a fixed multiple
    // of the internal EMF, so v̇ = (j δ̇ + ė/e) v.
    let case = common::gfm_and_load(0.5, 0.1, vec![], 1.0);
    let (_, _, system) = prepare(&case).unwrap();
    let x = system.x0.clone();
    let (ramp, growth) = (0.37, 0.02);
    let xdot = vec![ramp, 0.0, growth * x[2]];
    let vdot = system.voltage_derivatives(&x, &xdot).unwrap();
    let factor = Complex64::new(growth, ramp);
    for (vd, v) in vdot.iter().zip(&system.v0) {
        assert!((vd - factor * v).norm() < 1e-12 * (factor * v).norm(), "{vd} vs {}", factor * v);
    }
}

#[test]
fn voltage_rates_match_differences_on_a_small_case() {
    let case = common::gfm_and_load(
        0.5,
        0.1,
        vec![Event {
            time: 0.2,
            action: EventAction::LoadStep { bus: 2, dp: 0.05, dq: 0.0 },
        }],
        2.0,
    );
    let (_, t) = simulate(&case).unwrap();
    for bus in 0..t.n_buses() {
        let fd = differentiate(&t.voltage_series(bus), t.dt, &t.breaks());
        let an: Vec<Complex64> = (0..t.n_rows()).map(|r| t.voltage_rates(r).unwrap()[bus]).collect();
        let scale = an.iter().fold(0.0f64, |m, z| m.max(z.norm()));
        let err = an.iter().zip(&fd).fold(0.0f64, |m, (a, f)| m.max((a - f.unwrap()).norm()));
        assert!(err < 1e-3 * scale, "bus {bus}: {err:e} vs {scale:e}");
    }
}

#[test]
fn load_outage_raises_frequency_and_gfm_units_agree_with_coi() {
    let case = common::ieee39(Some(0.1), 40.0);
    let b = evaluate(&case).unwrap();
    let t = &b.trajectory;
    let coi = coi_frequency(t, &b.devices).unwrap();
    let ev = t.events[0].step;
    assert!(coi[ev + 500] > 1.0);
    let last = t.n_rows() - 1;
    for name in t.state_names.iter().filter(|n| n.ends_with(".omega")) {
        let w = t.states(last)[t.state_index(name).unwrap()];
        assert!((w - coi[last]).abs() < 1e-8, "{name}: {w} vs {}", coi[last]);
    }
    assert!(b.summary.settling_time.is_some());
    assert_eq!(b.summary.mode, MetricMode::Analytic);
}

#[test]
fn runs_are_deterministic() {
    let case = common::ieee39(Some(0.5), 1.3);
    let (_, a) = simulate(&case).unwrap();
    let (_, b) = simulate(&case).unwrap();
    assert_eq!(a, b);
}
