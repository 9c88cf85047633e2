use std::path::PathBuf;

use dnut_core::feeder::{load_feeder_dir, FeederOptions};
use dnut_core::network::BaseCase;
use dnut_core::power_flow::{energy_to_power, solve};
use dnut_core::scenario;

fn feeder_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../data/ieee_european_lv")
}

#[test]
fn feeder_has_55_prosumers_and_is_a_tree() {
    let net = load_feeder_dir(feeder_dir(), &FeederOptions::default()).unwrap();
    assert_eq!(net.np(), 55);
    assert_eq!(net.nb() + 1, net.nn());
    assert_eq!(net.nn(), 906);
    assert_eq!(net.slack_bus(), "1");
    let earthed = net.buses().iter().filter(|b| b.earthing_resistance == Some(30.0)).count();
    assert!(earthed > 0 && earthed <= 55);
}

#[test]
fn feeder_snapshot_solves_with_power_balance() {
    let net = load_feeder_dir(feeder_dir(), &FeederOptions::default()).unwrap();
    let bc = BaseCase::from_network(&net);
    let st = solve(&net, bc.injections()).unwrap();
    let inj: f64 = bc.injections().iter().map(|&e| energy_to_power(e)).sum();
    let balance = st.slack_power + inj - st.loss_power;
    assert!(balance.abs() < 1e-6 * st.loss_power, "{balance} vs {}", st.loss_power);
    let m = st.magnitudes();
    let vmin = m.voltages.iter().cloned().fold(f64::INFINITY, f64::min);
    assert!(vmin > 0.9 * 231.0);
}

#[test]
fn scenario_round_trip_is_lossless() {
    let net = load_feeder_dir(feeder_dir(), &FeederOptions::default()).unwrap();
    let bc = BaseCase::from_network(&net);
    let json = scenario::to_json(&net, Some(&bc)).unwrap();
    let (again, bc2) = scenario::parse_scenario(&json).unwrap();
    assert!(again == net);
    assert_eq!(bc2, bc);
}
