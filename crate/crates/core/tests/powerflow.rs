mod common;

use common::*;
use gridcc::powerflow::{accumulate_branch_currents, linearized_network_coefficients, solve_bfs, PfSettings};
use gridcc::reference::cigre_feeder;
use nalgebra::DVector;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[test]
fn cigre_sweep_matches_nodal_oracle() {
    let g = cigre_feeder();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..10 {
        let inj = random_injections(g.n_buses(), 0.15, &mut rng);
        let bfs = solve_bfs(&g, &inj, 0.0, &PfSettings::default()).unwrap();
        let oracle = zbus_oracle(&g, &inj, 0.0);
        for (a, b) in bfs.voltages.v.iter().zip(&oracle) {
            assert!((a.norm() - b.norm()).abs() < 1e-6, "{a} vs {b}");
        }
    }
}

#[test]
fn tap_shifts_root_voltage() {
    let g = cigre_feeder();
    let inj = gridcc::powerflow::InjectionProfile::zeros(g.n_buses());
    for tap in [-4.0, 0.0, 3.0] {
        let f = solve_bfs(&g, &inj, tap, &PfSettings::default()).unwrap();
        let oracle = zbus_oracle(&g, &inj, tap);
        assert!((f.voltages.v[0] - oracle[0]).norm() < 1e-15);
        assert!((f.voltages.v[18].norm() - oracle[18].norm()).abs() < 1e-12);
    }
}

#[test]
fn linear_model_reproduces_converged_flow() {
    // At the AC solution the linearization is exact: frozen voltages give
    // back the same currents and voltages.
    let g = cigre_feeder();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let inj = random_injections(g.n_buses(), 0.1, &mut rng);
    let f = solve_bfs(&g, &inj, 1.0, &PfSettings { tolerance: 1e-13, max_iterations: 200 }).unwrap();
    let lin = linearized_network_coefficients(&g, &f.voltages).unwrap();
    let (v, ibr) = lin.evaluate(&g, &inj, 1.0);
    assert!(v.max_abs_diff(&f.voltages) < 1e-10);
    for (a, b) in ibr.iter().zip(&f.i_br) {
        assert!((a - b).norm() < 1e-10);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn bcbv_times_branch_currents_is_path_sum(n in 2usize..=30, seed in any::<u64>(), cur_seed in any::<u64>()) {
        let (g, _) = random_tree(n, seed);
        let mut rng = ChaCha8Rng::seed_from_u64(cur_seed);
        let i_br: Vec<_> = (0..g.n_branches())
            .map(|_| c(rand::Rng::random_range(&mut rng, -1.0..1.0), rand::Rng::random_range(&mut rng, -1.0..1.0)))
            .collect();
        let dv = g.bcbv() * DVector::from_vec(i_br.clone());
        let oracle = path_walk(&g, &i_br);
        for j in 1..n {
            prop_assert!((dv[j - 1] - oracle[j]).norm() <= 1e-12);
        }
    }

    #[test]
    fn bibc_accumulation_matches_matrix(n in 2usize..=30, seed in any::<u64>()) {
        let (g, _) = random_tree(n, seed);
        let i: Vec<_> = (0..n).map(|k| c(k as f64 * 0.1, -(k as f64) * 0.05)).collect();
        let acc = accumulate_branch_currents(&g, &i);
        let mat = g.bibc().map(|x| c(x, 0.0)) * DVector::from_vec(i[1..].to_vec());
        for k in 0..g.n_branches() {
            prop_assert!((acc[k] - mat[k]).norm() <= 1e-12);
        }
    }

    #[test]
    fn sweep_matches_nodal_oracle_on_random_trees(n in 2usize..=20, seed in any::<u64>(), load_seed in any::<u64>()) {
        let (g, _) = random_tree(n, seed);
        let mut rng = ChaCha8Rng::seed_from_u64(load_seed);
        let inj = random_injections(n, 0.05, &mut rng);
        let f = solve_bfs(&g, &inj, 0.0, &PfSettings::default());
        prop_assume!(f.is_ok());
        let oracle = zbus_oracle(&g, &inj, 0.0);
        for (a, b) in f.unwrap().voltages.v.iter().zip(&oracle) {
            prop_assert!((a.norm() - b.norm()).abs() < 1e-6);
        }
    }

    #[test]
    fn converged_flow_balances_power(seed in any::<u64>()) {
        let g = cigre_feeder();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let inj = random_injections(g.n_buses(), 0.1, &mut rng);
        let f = solve_bfs(&g, &inj, 0.0, &PfSettings { tolerance: 1e-12, max_iterations: 200 }).unwrap();
        // Slack power = demand − generation + losses.
        let losses: f64 = g.branches().iter().zip(&f.i_br).map(|(b, i)| b.impedance.re * i.norm_sqr()).sum();
        let net: f64 = inj.p.iter().skip(1).sum();
        prop_assert!((f.slack_power().re - (-net + losses)).abs() < 1e-9);
    }
}
