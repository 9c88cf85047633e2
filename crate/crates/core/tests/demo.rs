use dnut_core::scenario::load_scenario;
use dnut_core::sensitivity::{build, transaction_delta, InjectionDelta};
use dnut_core::tariff::{build_matrix, pair_dnut, Component, DnutEvaluator, TariffConstants};
use dnut_core::{BaseCase, Network};

fn demo() -> (Network, BaseCase) {
    let path = concat!(env!("CARGO_MANIFEST_DIR"), "/../../data/scenarios/fig1.json");
    load_scenario(path).unwrap()
}

#[test]
fn trade_is_sum_of_grid_legs() {
    let (net, bc) = demo();
    let m = build(&net, &bc).unwrap();
    let e = 250e-6;
    let trade = m.linear(&transaction_delta(&net, 0, 2, e).unwrap()).unwrap();
    let mut sell = InjectionDelta::zeros(&net);
    sell.add_prosumer(&net, 0, e);
    let mut buy = InjectionDelta::zeros(&net);
    buy.add_prosumer(&net, 2, -e);
    let a = m.linear(&sell).unwrap();
    let b = m.linear(&buy).unwrap();
    let base = m.base_linear();
    for k in 0..trade.voltages.len() {
        let sum = a.voltages[k] + b.voltages[k] - base.voltages[k];
        assert!((trade.voltages[k] - sum).abs() < 1e-9);
    }
    for k in 0..trade.currents.len() {
        let sum = a.currents[k] + b.currents[k] - base.currents[k];
        assert!((trade.currents[k] - sum).abs() < 1e-9);
    }
}

#[test]
fn upstream_supplier_charges_all_positive() {
    let (net, bc) = demo();
    let m = build(&net, &bc).unwrap();
    let c = TariffConstants::default();
    let (total, b) = pair_dnut(&net, &m, 0, 2, 250e-6, &c).unwrap();
    println!("N1->N3 {total} {b:?}");
    for comp in Component::ALL {
        assert!(b.component(comp) > 0.0, "{comp:?} {b:?}");
    }
}

#[test]
fn neighbour_supplier_gives_negative_total() {
    let (net, bc) = demo();
    let m = build(&net, &bc).unwrap();
    let c = TariffConstants::default();
    let (total, b) = pair_dnut(&net, &m, 3, 2, 250e-6, &c).unwrap();
    println!("N4->N3 {total} {b:?}");
    assert!(total < 0.0);
}

#[test]
fn matrix_has_zero_diagonal() {
    let (net, bc) = demo();
    let m = build(&net, &bc).unwrap();
    let d = build_matrix(&net, &m, 250e-6, &TariffConstants::default()).unwrap();
    for i in 0..4 {
        assert_eq!(d.values[i][i], 0.0);
        for j in 0..4 {
            let (v, _) = pair_dnut(&net, &m, i, j, 250e-6, &TariffConstants::default()).unwrap();
            assert_eq!(d.values[i][j], v);
        }
    }
}

#[test]
fn streaming_charges_match_materialised_state() {
    let (net, bc) = demo();
    let m = build(&net, &bc).unwrap();
    let ev = DnutEvaluator::at_base(&net, &m, TariffConstants::default());
    for s in 0..4 {
        for d in 0..4 {
            let (fast, fb) = ev.pair(s, d, 4e-4).unwrap();
            let full = ev.evaluate(s, d, 4e-4).unwrap();
            assert!((fast - full.dnut).abs() <= 1e-9 * (1.0 + fast.abs()), "{s}->{d}");
            for c in Component::ALL {
                let (a, b) = (fb.component(c), full.breakdown.component(c));
                assert!((a - b).abs() <= 1e-9 * (1.0 + a.abs()));
            }
        }
    }
}

#[test]
fn linear_parts_are_antisymmetric_at_one_wh() {
    let (net, bc) = demo();
    let m = build(&net, &bc).unwrap();
    let ev = DnutEvaluator::at_base(&net, &m, TariffConstants::default());
    for s in 0..4 {
        for d in 0..4 {
            if s == d {
                continue;
            }
            let (_, a) = ev.pair(s, d, 1e-6).unwrap();
            let (_, b) = ev.pair(d, s, 1e-6).unwrap();
            assert_eq!(a.ic_limit + a.uc_limit + b.ic_limit + b.uc_limit, 0.0);
            assert!((a.ic_linear + b.ic_linear).abs() <= 1e-12 * a.ic_linear.abs().max(1e-30));
            assert!((a.uc_linear + b.uc_linear).abs() <= 1e-12 * a.uc_linear.abs().max(1e-30));
            // losses keep a second-order term of relative size ~ delta I / I
            assert!((a.pc + b.pc).abs() <= 1e-2 * a.pc.abs(), "{s}->{d}: {a:?} {b:?}");
        }
    }
}

#[test]
fn doubling_a_constant_doubles_only_its_component() {
    let (net, bc) = demo();
    let m = build(&net, &bc).unwrap();
    let c = TariffConstants::default();
    let (_, base) = pair_dnut(&net, &m, 0, 2, 250e-6, &c).unwrap();
    let doubled = TariffConstants { c_u_linear: 2.0 * c.c_u_linear, ..c };
    let (_, twice) = pair_dnut(&net, &m, 0, 2, 250e-6, &doubled).unwrap();
    assert!((twice.uc_linear - 2.0 * base.uc_linear).abs() < 1e-15);
    assert_eq!(twice.ic_linear, base.ic_linear);
    assert_eq!(twice.pc, base.pc);
}
