mod common;

use common::*;
use gridcc::devices::DeviceFleet;
use gridcc::error::Error;
use gridcc::mpc::SimulationScenario;
use gridcc::opf::{inner_feasibility_loop, DispatchPlan, FcProduct, ProductKind};
use gridcc::solver::ClarabelSolver;
use gridcc::uncertainty::UncertaintyMargins;

fn plan_of(s: &SimulationScenario) -> gridcc::Result<(DispatchPlan, usize)> {
    let input = s.horizon_input(s.start, &s.initial_state())?;
    let out = inner_feasibility_loop(&input, &UncertaintyMargins::for_input(&input), &ClarabelSolver::precise(), None)?;
    Ok((out.plan, out.iterations))
}

#[test]
fn empty_fleet_costs_nothing() {
    let s = scenario(two_bus(c(0.01, 0.01)), DeviceFleet::default(), flat_prices(4, 40.0, 30.0), 1, 4);
    let (plan, iterations) = plan_of(&s).unwrap();
    assert_eq!(iterations, 1);
    assert!(plan.costs.total.abs() < 1e-9);
    assert!(plan.p_buy.iter().chain(&plan.p_sell).all(|p| p.abs() < 1e-9));
}

#[test]
fn one_megawatt_hour_at_forty() {
    // Lossless line, 1 MW demand for one hour at 40 €/MWh.
    let fleet = DeviceFleet {
        load: vec![load(2, vec![1000.0])],
        ..Default::default()
    };
    let s = scenario(two_bus(c(0.0, 0.0)), fleet, flat_prices(1, 40.0, 30.0), 1, 1);
    let (plan, _) = plan_of(&s).unwrap();
    assert!((plan.costs.exchange - 40.0).abs() < 1e-9, "{}", plan.costs.exchange);
    assert!((plan.kw(plan.p_buy[0]) - 1000.0).abs() < 1e-6);
}

#[test]
fn ampacity_forces_priced_curtailment() {
    let mut g = two_bus(c(0.01, 0.005));
    // 50 kW export limit at unit voltage.
    g = gridcc::grid::GridTopology::new(
        buses(2),
        vec![(1, 1, 2, g.branches()[0].impedance, 0.125)],
        *g.oltc(),
        BASE,
    )
    .unwrap();
    let fleet = DeviceFleet {
        pv: vec![pv(2, 120.0, vec![100.0])],
        ..Default::default()
    };
    let mut prices = flat_prices(1, 50.0, 30.0);
    prices.c_curt_g = vec![70.0];
    let s = scenario(g, fleet, prices, 1, 1);
    let (plan, _) = plan_of(&s).unwrap();
    let curtailed_kw = plan.kw(plan.pv[0].curtailed[0]);
    assert!(curtailed_kw > 45.0 && curtailed_kw < 55.0, "{curtailed_kw}");
    assert!((plan.costs.curt_g - 70.0 * curtailed_kw / 1000.0).abs() < 1e-6);
    let sold = plan.kw(plan.p_sell[0]);
    assert!((plan.costs.exchange + 30.0 * sold / 1000.0).abs() < 1e-6);
}

#[test]
fn full_pfc_bid_reserves_a_quarter_hour_each_way() {
    let fleet = DeviceFleet {
        bess: vec![bess(2, 484.0, 484.0, 0.95, 242.0)],
        ..Default::default()
    };
    let mut prices = flat_prices(4, 40.0, 30.0);
    prices.c_bid = vec![1000.0; 4];
    let mut s = scenario(two_bus(c(0.001, 0.001)), fleet, prices, 1, 4);
    s.product = FcProduct {
        kind: ProductKind::Pfc,
        bid_cap_kw: 484.0,
        ..FcProduct::default()
    };
    let (plan, _) = plan_of(&s).unwrap();
    assert!((plan.kw(plan.bid[0]) - 484.0).abs() < 1e-6);
    for e in &plan.bess[0].e[1..] {
        let kwh = plan.kw(*e);
        assert!(kwh >= 121.0 - 1e-6 && kwh <= 363.0 + 1e-6, "{kwh}");
    }
}

#[test]
fn arbitrage_toy_matches_hand_solution() {
    let s = arbitrage_toy();
    let (plan, _) = plan_of(&s).unwrap();
    assert!((plan.costs.total - ARBITRAGE_OPTIMUM).abs() < 1e-9, "{}", plan.costs.total);
}

#[test]
fn oversized_margin_is_rejected() {
    let fleet = DeviceFleet {
        load: vec![load(2, vec![10.0; 2])],
        ..Default::default()
    };
    let s = scenario(two_bus(c(0.01, 0.01)), fleet, flat_prices(2, 40.0, 30.0), 1, 2);
    let input = s.horizon_input(0, &s.initial_state()).unwrap();
    let mut m = UncertaintyMargins::for_input(&input);
    m.v_upper[1][1] = 0.15;
    let r = inner_feasibility_loop(&input, &m, &ClarabelSolver::default(), None);
    assert!(matches!(r, Err(Error::Infeasible(ref msg)) if msg.contains("half the band")), "{r:?}");
}

#[test]
fn islanded_copies_keep_critical_energy() {
    // 20 kW demand, 10 % critical: every islanded copy needs 2 kW for 24 h.
    let g = gridcc::grid::GridTopology::new(
        buses(3),
        vec![(1, 1, 2, c(0.0, 0.0), 100.0), (2, 2, 3, c(0.0, 0.0), 100.0)],
        gridcc::grid::OltcSpec::fixed(c(1.0, 0.0)),
        BASE,
    )
    .unwrap();
    let fleet = DeviceFleet {
        bess: vec![bess(2, 100.0, 50.0, 0.95, 100.0)],
        load: vec![load(3, vec![20.0; 48])],
        ..Default::default()
    };
    let mut s = scenario(g, fleet, flat_prices(48, 40.0, 30.0), 1, 3);
    s.settings.islanding = true;
    s.set_forming_bus(Some(2)).unwrap();
    let (plan, _) = plan_of(&s).unwrap();
    let need = 24.0 * 2.0 / 0.95;
    for (k, e) in plan.bess[0].e.iter().enumerate().take(3) {
        assert!(plan.kw(*e) >= need - 1e-5, "step {k}: {} kWh", plan.kw(*e));
    }
    assert_eq!(plan.islands.len(), 3);
    assert!(plan.islands.iter().all(|i| i.min_alpha() >= 0.1 - 1e-9));
}
