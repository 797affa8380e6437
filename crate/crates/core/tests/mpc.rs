mod common;

use common::*;
use gridcc::devices::DeviceFleet;
use gridcc::exec::Execution;
use gridcc::grid::{GridTopology, OltcSpec};
use gridcc::mpc::{islanding_sweep, min_bess_scan, min_bess_search, run_mpc, transformer_rating_study};
use gridcc::solver::ClarabelSolver;
use proptest::prelude::*;

fn three_bus() -> GridTopology {
    GridTopology::new(
        buses(3),
        vec![(1, 1, 2, c(0.002, 0.001), 10.0), (2, 2, 3, c(0.004, 0.002), 10.0)],
        OltcSpec::fixed(c(1.0, 0.0)),
        BASE,
    )
    .unwrap()
}

/// Day-shaped PV and demand around a storage unit.
fn day_fleet(e_cap: f64, pv_peak: f64, demand: f64, hours: usize) -> DeviceFleet {
    let sun = |h: usize| {
        let x = (h % 24) as f64;
        if (6.0..18.0).contains(&x) {
            (std::f64::consts::PI * (x - 6.0) / 12.0).sin()
        } else {
            0.0
        }
    };
    DeviceFleet {
        pv: vec![pv(3, pv_peak * 1.2 + 1.0, (0..hours).map(|h| pv_peak * sun(h)).collect())],
        bess: vec![bess(2, e_cap, e_cap / 2.0, 0.95, e_cap / 2.0)],
        load: vec![load(3, (0..hours).map(|h| demand * (1.0 + 0.3 * ((h % 24) as f64 / 4.0).sin())).collect())],
        ..Default::default()
    }
}

fn varying_prices(len: usize) -> gridcc::opf::PriceSet {
    let mut p = flat_prices(len, 40.0, 30.0);
    for (t, (b, s)) in p.c_buy.iter_mut().zip(p.c_sell.iter_mut()).enumerate() {
        let d = 15.0 * ((t % 24) as f64 * std::f64::consts::PI / 12.0).cos();
        *b += d;
        *s += d;
    }
    p
}

#[test]
fn state_carries_over_and_storage_bookkeeping_holds() {
    let s = scenario(three_bus(), day_fleet(100.0, 60.0, 30.0, 72), varying_prices(72), 24, 12);
    let r = run_mpc(&s, &ClarabelSolver::default()).unwrap();
    assert_eq!(r.steps.len(), 24);
    assert_eq!(r.n_fallbacks(), 0);
    for w in r.steps.windows(2) {
        assert!((w[0].e_end_kwh[0] - w[1].e_start_kwh[0]).abs() < 1e-9);
    }
    for st in &r.steps {
        let e = st.e_start_kwh[0] + 0.95 * st.ch_kw[0] - st.dis_kw[0] / 0.95;
        assert!((e - st.e_end_kwh[0]).abs() < 1e-6, "step {}", st.t);
        assert!(st.p_buy_kw * st.p_sell_kw == 0.0);
        assert!(st.ch_kw[0] * st.dis_kw[0] / (400.0 * 400.0) <= 1e-6);
    }
}

#[test]
fn identical_runs_give_identical_records() {
    let s = scenario(three_bus(), day_fleet(80.0, 50.0, 25.0, 40), varying_prices(40), 4, 12);
    let a = run_mpc(&s, &ClarabelSolver::default()).unwrap();
    let b = run_mpc(&s, &ClarabelSolver::default()).unwrap();
    for (x, y) in a.steps.iter().zip(&b.steps) {
        let mut x = x.clone();
        x.solve_time_s = y.solve_time_s;
        assert_eq!(&x, y);
    }
}

#[test]
fn unsolvable_step_falls_back_and_run_continues() {
    // Demand above the feeder ampacity in hour 1 only.
    let g = GridTopology::new(buses(2), vec![(1, 1, 2, c(0.01, 0.01), 0.2)], OltcSpec::fixed(c(1.0, 0.0)), BASE).unwrap();
    let fleet = DeviceFleet {
        load: vec![load(2, vec![40.0, 200.0, 40.0, 40.0, 40.0, 40.0])],
        ..Default::default()
    };
    let s = scenario(g, fleet, flat_prices(6, 40.0, 30.0), 3, 1);
    let r = run_mpc(&s, &ClarabelSolver::default()).unwrap();
    assert_eq!(r.steps.len(), 3);
    assert!(r.steps[0].feasible && !r.steps[1].feasible && r.steps[2].feasible);
    assert!(r.steps[1].message.as_deref().unwrap_or("").contains("infeasible"));
}

#[test]
fn sweep_reports_served_fraction() {
    let mut s = scenario(three_bus(), day_fleet(200.0, 60.0, 20.0, 72), varying_prices(72), 1, 6);
    s.settings.islanding = true;
    s.set_forming_bus(Some(2)).unwrap();
    let out = islanding_sweep(&s, &[0, 3], &ClarabelSolver::default()).unwrap();
    assert_eq!(out.len(), 2);
    for e in &out {
        assert!(e.feasible, "{:?}", e.message);
        assert_eq!(e.served.len(), 24);
        assert!(e.served.iter().all(|a| *a >= 0.1 - 1e-6 && *a <= 1.0 + 1e-6), "{:?}", e.served);
    }
}

#[test]
fn storage_shaves_the_substation_peak() {
    // Demand alternating 50/150 kW on a near-lossless line: without storage
    // the rating is the 150 kW peak; a lossless battery flattens it to the
    // 100 kW mean.
    let g = GridTopology::new(buses(2), vec![(1, 1, 2, c(1e-5, 0.0), 10.0)], OltcSpec::fixed(c(1.0, 0.0)), BASE).unwrap();
    let demand: Vec<f64> = (0..12).map(|t| if t % 2 == 0 { 50.0 } else { 150.0 }).collect();
    let mut b = bess(2, 200.0, 100.0, 1.0, 0.0);
    b.tan_phi_max = 0.0;
    let fleet = DeviceFleet {
        bess: vec![b],
        load: vec![load(2, demand)],
        ..Default::default()
    };
    let s = scenario(g, fleet, flat_prices(12, 40.0, 30.0), 6, 6);
    let study = transformer_rating_study(&s, &[0.0, 200.0], 0.5, &ClarabelSolver::default()).unwrap();
    assert!((study.uncontrolled_peak_kva - 150.0).abs() < 0.1);
    assert!((study.points[0].rating_kva - 150.0).abs() < 1.0, "{:?}", study.points[0]);
    assert!((study.points[1].rating_kva - 100.0).abs() < 1.0, "{:?}", study.points[1]);
}

#[test]
fn sizing_search_agrees_with_full_scan() {
    let mut s = scenario(three_bus(), day_fleet(100.0, 30.0, 10.0, 60), varying_prices(60), 2, 4);
    s.settings.islanding = true;
    s.set_forming_bus(Some(2)).unwrap();
    let grid: Vec<f64> = (1..=10).map(|i| 5.0 * i as f64).collect();
    let found = min_bess_search(&s, &grid, &ClarabelSolver::default()).unwrap();
    let scan = min_bess_scan(&s, &grid, &ClarabelSolver::default(), Execution::Sequential).unwrap();
    let first = scan.iter().find(|x| x.1).unwrap().0;
    assert_eq!(found.capacity_kwh, first);
    let flags: Vec<bool> = scan.iter().map(|x| x.1).collect();
    assert!(flags.windows(2).all(|w| w[0] <= w[1]), "{flags:?}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(8))]

    #[test]
    fn storage_stays_in_band_and_never_charges_and_discharges(
        e_cap in 20.0f64..200.0,
        pv_peak in 0.0f64..120.0,
        demand in 5.0f64..60.0,
    ) {
        let s = scenario(three_bus(), day_fleet(e_cap, pv_peak, demand, 40), varying_prices(40), 6, 8);
        let r = run_mpc(&s, &ClarabelSolver::default()).unwrap();
        for st in &r.steps {
            prop_assert!(st.feasible);
            prop_assert!(st.e_end_kwh[0] >= -1e-6 && st.e_end_kwh[0] <= e_cap + 1e-6);
            prop_assert!(st.p_buy_kw * st.p_sell_kw == 0.0);
            prop_assert!(st.ch_kw[0] * st.dis_kw[0] / (400.0 * 400.0) <= 1e-6);
        }
    }
}
