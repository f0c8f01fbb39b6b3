//! New England 39-bus system with its ten machines replaced by converters.

use std::collections::BTreeMap;

use super::case::{CaseScenario, DeviceSpec, Dispatch, MetricsConfig, PowerFlowConfig, SCHEMA_VERSION};
use crate::devices::{Event, GflParams, GfmParams, LoadModel};
use crate::dynsim::IntegratorConfig;
use crate::netmodel::{Branch, Bus, Network, RxScope};

pub const BASE_MVA: f64 = 100.0;
pub const BASE_KV: f64 = 345.0;
/// Converter rating used to scale the default per-unit parameters.
pub const CONVERTER_MVA: f64 = 1000.0;

// (bus, MW, MVAr)
const LOADS: [(usize, f64, f64); 21] = [
    (1, 97.6, 44.2),
    (3, 322.0, 2.4),
    (4, 500.0, 184.0),
    (7, 233.8, 84.0),
    (8, 522.0, 176.6),
    (9, 6.5, -66.6),
    (12, 8.53, 88.0),
    (15, 320.0, 153.0),
    (16, 329.0, 32.3),
    (18, 158.0, 30.0),
    (20, 680.0, 103.0),
    (21, 274.0, 115.0),
    (23, 247.5, 84.6),
    (24, 308.6, -92.2),
    (25, 224.0, 47.2),
    (26, 139.0, 17.0),
    (27, 281.0, 75.5),
    (28, 206.0, 27.6),
    (29, 283.5, 26.9),
    (31, 9.2, 4.6),
    (39, 1104.0, 250.0),
];

// (bus, MW, |V|); bus 31 is the slack.
const GENERATORS: [(usize, f64, f64); 10] = [
    (30, 250.0, 1.0499),
    (31, 677.871, 0.982),
    (32, 650.0, 0.9841),
    (33, 632.0, 0.9972),
    (34, 508.0, 1.0123),
    (35, 650.0, 1.0494),
    (36, 560.0, 1.0636),
    (37, 540.0, 1.0275),
    (38, 830.0, 1.0265),
    (39, 1000.0, 1.03),
];
const SLACK_BUS: usize = 31;

// (from, to, r, x, b, tap); tap 0 marks a line.
const BRANCHES: [(usize, usize, f64, f64, f64, f64); 46] = [
    (1, 2, 0.0035, 0.0411, 0.6987, 0.0),
    (1, 39, 0.001, 0.025, 0.75, 0.0),
    (2, 3, 0.0013, 0.0151, 0.2572, 0.0),
    (2, 25, 0.007, 0.0086, 0.146, 0.0),
    (2, 30, 0.0, 0.0181, 0.0, 1.025),
    (3, 4, 0.0013, 0.0213, 0.2214, 0.0),
    (3, 18, 0.0011, 0.0133, 0.2138, 0.0),
    (4, 5, 0.0008, 0.0128, 0.1342, 0.0),
    (4, 14, 0.0008, 0.0129, 0.1382, 0.0),
    (5, 6, 0.0002, 0.0026, 0.0434, 0.0),
    (5, 8, 0.0008, 0.0112, 0.1476, 0.0),
    (6, 7, 0.0006, 0.0092, 0.113, 0.0),
    (6, 11, 0.0007, 0.0082, 0.1389, 0.0),
    (6, 31, 0.0, 0.025, 0.0, 1.07),
    (7, 8, 0.0004, 0.0046, 0.078, 0.0),
    (8, 9, 0.0023, 0.0363, 0.3804, 0.0),
    (9, 39, 0.001, 0.025, 1.2, 0.0),
    (10, 11, 0.0004, 0.0043, 0.0729, 0.0),
    (10, 13, 0.0004, 0.0043, 0.0729, 0.0),
    (10, 32, 0.0, 0.02, 0.0, 1.07),
    (12, 11, 0.0016, 0.0435, 0.0, 1.006),
    (12, 13, 0.0016, 0.0435, 0.0, 1.006),
    (13, 14, 0.0009, 0.0101, 0.1723, 0.0),
    (14, 15, 0.0018, 0.0217, 0.366, 0.0),
    (15, 16, 0.0009, 0.0094, 0.171, 0.0),
    (16, 17, 0.0007, 0.0089, 0.1342, 0.0),
    (16, 19, 0.0016, 0.0195, 0.304, 0.0),
    (16, 21, 0.0008, 0.0135, 0.2548, 0.0),
    (16, 24, 0.0003, 0.0059, 0.068, 0.0),
    (17, 18, 0.0007, 0.0082, 0.1319, 0.0),
    (17, 27, 0.0013, 0.0173, 0.3216, 0.0),
    (19, 20, 0.0007, 0.0138, 0.0, 1.06),
    (19, 33, 0.0007, 0.0142, 0.0, 1.07),
    (20, 34, 0.0009, 0.018, 0.0, 1.009),
    (21, 22, 0.0008, 0.014, 0.2565, 0.0),
    (22, 23, 0.0006, 0.0096, 0.1846, 0.0),
    (22, 35, 0.0, 0.0143, 0.0, 1.025),
    (23, 24, 0.0022, 0.035, 0.361, 0.0),
    (23, 36, 0.0005, 0.0272, 0.0, 1.0),
    (25, 26, 0.0032, 0.0323, 0.531, 0.0),
    (25, 37, 0.0006, 0.0232, 0.0, 1.025),
    (26, 27, 0.0014, 0.0147, 0.2396, 0.0),
    (26, 28, 0.0043, 0.0474, 0.7802, 0.0),
    (26, 29, 0.0057, 0.0625, 1.029, 0.0),
    (28, 29, 0.0014, 0.0151, 0.249, 0.0),
    (29, 38, 0.0008, 0.0156, 0.0, 1.025),
];

pub fn network() -> Network {
    Network {
        base_mva: BASE_MVA,
        base_frequency: 60.0,
        buses: (1..=39).map(|id| Bus::new(id, BASE_KV)).collect(),
        branches: BRANCHES
            .iter()
            .map(|&(f, t, r, x, b, tap)| Branch {
                tap_ratio: if tap == 0.0 { 1.0 } else { tap },
                transformer: tap != 0.0,
                ..Branch::line(f, t, r, x, b)
            })
            .collect(),
    }
}

/// Converters at the ten machine buses, alternating by ascending bus
/// number with the lowest bus grid-forming.
pub fn converters() -> Vec<DeviceSpec> {
    let gfm = GfmParams::default().on_system_base(CONVERTER_MVA, BASE_MVA);
    let gfl = GflParams::default().on_system_base(CONVERTER_MVA, BASE_MVA);
    let mut buses: Vec<usize> = GENERATORS.iter().map(|g| g.0).collect();
    buses.sort_unstable();
    buses
        .into_iter()
        .enumerate()
        .map(|(i, bus)| {
            if i % 2 == 0 {
                DeviceSpec::GfmVsm {
                    name: format!("gfm{bus}"),
                    bus,
                    params: gfm.clone(),
                }
            } else {
                DeviceSpec::Gfl {
                    name: format!("gfl{bus}"),
                    bus,
                    params: gfl.clone(),
                }
            }
        })
        .collect()
}

/// The converter-based 39-bus case with a load outage at bus 8 at 1 s.
pub fn build_ieee39_ibr() -> CaseScenario {
    let labels = BTreeMap::from([
        (
            "dispatch".to_string(),
            "standard 39-bus machine dispatch reused for the converters".to_string(),
        ),
        (
            "converters".to_string(),
            "5 GFM + 5 GFL alternating by ascending bus number, lowest GFM; 1000 MVA ratings, parameters on system base"
                .to_string(),
        ),
    ]);
    CaseScenario {
        schema_version: SCHEMA_VERSION,
        label: "ieee39_ibr".into(),
        labels,
        network: network(),
        dispatch: GENERATORS
            .iter()
            .map(|&(bus, mw, v)| Dispatch {
                bus,
                p_gen: mw / BASE_MVA,
                v_set: v,
                slack: bus == SLACK_BUS,
            })
            .collect(),
        loads: LOADS
            .iter()
            .map(|&(bus, mw, mvar)| LoadModel::new(bus, mw / BASE_MVA, mvar / BASE_MVA))
            .collect(),
        devices: converters(),
        events: vec![Event::load_outage(1.0, 8)],
        integrator: IntegratorConfig::default(),
        power_flow: PowerFlowConfig::default(),
        metrics: MetricsConfig::default(),
        rx_ratio: None,
        rx_scope: RxScope::default(),
    }
}
