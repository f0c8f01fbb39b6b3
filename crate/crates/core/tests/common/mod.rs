#![allow(dead_code)]

use std::collections::BTreeMap;

use cfsim::devices::{Event, GfmParams, LoadModel};
use cfsim::dynsim::IntegratorConfig;
use cfsim::harness::case::{PowerFlowConfig, SCHEMA_VERSION};
use cfsim::harness::{build_ieee39_ibr, CaseScenario, DeviceSpec, Dispatch, MetricsConfig};
use cfsim::netmodel::{Branch, Bus, Network, RxScope};

pub fn ieee39(rx: Option<f64>, t_end: f64) -> CaseScenario {
    let mut case = build_ieee39_ibr();
    case.rx_ratio = rx;
    case.integrator.t_end = t_end;
    case
}

/// One grid-forming converter feeding a constant-impedance load over a line.
pub fn gfm_and_load(p_load: f64, q_load: f64, events: Vec<Event>, t_end: f64) -> CaseScenario {
    CaseScenario {
        schema_version: SCHEMA_VERSION,
        label: "gfm_load".into(),
        labels: BTreeMap::new(),
        network: Network {
            base_mva: 100.0,
            base_frequency: 60.0,
            buses: vec![Bus::new(1, 20.0), Bus::new(2, 20.0)],
            branches: vec![Branch::line(1, 2, 0.01, 0.1, 0.02)],
        },
        dispatch: vec![Dispatch {
            bus: 1,
            p_gen: p_load,
            v_set: 1.02,
            slack: true,
        }],
        loads: vec![LoadModel::new(2, p_load, q_load)],
        devices: vec![DeviceSpec::GfmVsm {
            name: "gfm1".into(),
            bus: 1,
            params: GfmParams::default(),
        }],
        events,
        integrator: IntegratorConfig {
            t_end,
            ..IntegratorConfig::default()
        },
        power_flow: PowerFlowConfig::default(),
        metrics: MetricsConfig::default(),
        rx_ratio: None,
        rx_scope: RxScope::default(),
    }
}
