//! Shared fixtures and independent oracles for the integration tests.
#![allow(dead_code)]

use gridcc::devices::{BessUnit, DeviceFleet, LoadPoint, PvUnit};
use gridcc::grid::{Bus, BusKind, GridTopology, OltcSpec, PerUnitBase};
use gridcc::mpc::SimulationScenario;
use gridcc::opf::PriceSet;
use gridcc::powerflow::InjectionProfile;
use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const BASE: PerUnitBase = PerUnitBase {
    s_base_kva: 400.0,
    v_base_kv: 0.4,
};

pub fn c(re: f64, im: f64) -> Complex64 {
    Complex64::new(re, im)
}

/// Buses 1..=n with bus 1 as slack.
pub fn buses(n: usize) -> Vec<Bus> {
    (1..=n)
        .map(|id| Bus {
            id,
            kind: if id == 1 { BusKind::Slack } else { BusKind::Load },
            base_kv: 0.4,
        })
        .collect()
}

/// Radial tree on `n` buses: bus `j` hangs off a random earlier bus.
/// Returns the topology and the `(parent id, child id)` pairs.
pub fn random_tree(n: usize, seed: u64) -> (GridTopology, Vec<(usize, usize)>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut edges = Vec::new();
    let mut pairs = Vec::new();
    for j in 2..=n {
        let parent = rng.random_range(1..j);
        let z = c(rng.random_range(0.001..0.05), rng.random_range(0.0005..0.03));
        edges.push((j - 1, parent, j, z, 5.0));
        pairs.push((parent, j));
    }
    let g = GridTopology::new(buses(n), edges, OltcSpec::fixed(c(1.0, 0.0)), BASE).expect("random tree is radial");
    (g, pairs)
}

/// Two buses joined by impedance `z`.
pub fn two_bus(z: Complex64) -> GridTopology {
    GridTopology::new(buses(2), vec![(1, 1, 2, z, 100.0)], OltcSpec::fixed(c(1.0, 0.0)), BASE).unwrap()
}

/// AC power flow by Z-bus Gauss iteration on the nodal admittance matrix:
/// `V_L = Y_LL⁻¹ (conj(S/V) − Y_L0·V_0)`. Independent of the sweep code and
/// of the sensitivity matrices.
pub fn zbus_oracle(g: &GridTopology, inj: &InjectionProfile, tap: f64) -> Vec<Complex64> {
    let n = g.n_buses();
    let mut y = DMatrix::<Complex64>::zeros(n, n);
    for br in g.branches() {
        let yb = c(1.0, 0.0) / br.impedance;
        y[(br.from, br.from)] += yb;
        y[(br.to, br.to)] += yb;
        y[(br.from, br.to)] -= yb;
        y[(br.to, br.from)] -= yb;
    }
    let y_ll = y.view((1, 1), (n - 1, n - 1)).into_owned();
    let z_ll = y_ll.try_inverse().expect("connected network");
    let v0 = g.oltc().root_voltage(tap);
    let y_l0: DVector<Complex64> = y.view((1, 0), (n - 1, 1)).column(0).into_owned();
    let mut v = DVector::from_element(n - 1, v0);
    for _ in 0..500 {
        let i = DVector::from_iterator(
            n - 1,
            (1..n).map(|k| (c(inj.p[k], inj.q[k]) / v[k - 1]).conj()),
        );
        let v_new = &z_ll * (i - &y_l0 * v0);
        let d = (&v_new - &v).iter().map(|x| x.norm()).fold(0.0, f64::max);
        v = v_new;
        if d < 1e-14 {
            break;
        }
    }
    std::iter::once(v0).chain(v.iter().copied()).collect()
}

/// `ΔV` of every bus from branch currents, by walking parent links built
/// from the branch list alone.
pub fn path_walk(g: &GridTopology, i_br: &[Complex64]) -> Vec<Complex64> {
    let n = g.n_buses();
    let mut parent: Vec<Option<usize>> = vec![None; n];
    for (k, br) in g.branches().iter().enumerate() {
        parent[br.to] = Some(k);
    }
    (0..n)
        .map(|j| {
            let mut acc = c(0.0, 0.0);
            let mut cur = j;
            while let Some(k) = parent[cur] {
                acc += g.branches()[k].impedance * i_br[k];
                cur = g.branches()[k].from;
            }
            acc
        })
        .collect()
}

/// Random loading: each non-root bus draws demand in `[0, p_max]` at a
/// lagging power factor, and a few buses get generation instead.
pub fn random_injections(n: usize, p_max: f64, rng: &mut impl Rng) -> InjectionProfile {
    let mut inj = InjectionProfile::zeros(n);
    for k in 1..n {
        let p = rng.random_range(0.0..p_max);
        let gen = rng.random_bool(0.25);
        inj.p[k] = if gen { p } else { -p };
        inj.q[k] = if gen { 0.0 } else { -0.3 * p };
    }
    inj
}

pub fn flat_prices(len: usize, buy: f64, sell: f64) -> PriceSet {
    PriceSet {
        c_buy: vec![buy; len],
        c_sell: vec![sell; len],
        c_bid: vec![0.0; len],
        c_curt_g: vec![buy; len],
        c_curt_l_isl: vec![250.0; len],
        f_isl: 0.1,
    }
}

pub fn bess(bus: usize, e_cap: f64, p_max: f64, eta: f64, e0: f64) -> BessUnit {
    BessUnit {
        id: format!("bess{bus}"),
        bus,
        e_cap_kwh: e_cap,
        p_max_kw: p_max,
        soc_min: 0.0,
        soc_max: 1.0,
        eta,
        tan_phi_max: 0.0,
        e_initial_kwh: e0,
    }
}

pub fn load(bus: usize, profile: Vec<f64>) -> LoadPoint {
    LoadPoint {
        id: format!("load{bus}"),
        bus,
        p_profile: profile,
        power_factor: 1.0,
    }
}

pub fn pv(bus: usize, rating: f64, profile: Vec<f64>) -> PvUnit {
    PvUnit {
        id: format!("pv{bus}"),
        bus,
        s_rating_kva: rating,
        p_max_profile: profile,
        min_power_factor: 1.0,
    }
}

/// Deterministic, grid-connected-only scenario over `[0, steps)` with a
/// `horizon`-step program.
pub fn scenario(grid: GridTopology, fleet: DeviceFleet, prices: PriceSet, steps: usize, horizon: usize) -> SimulationScenario {
    let mut s = SimulationScenario::new(grid, fleet, prices, 0, steps).unwrap();
    s.horizon = horizon;
    s.settings.islanding = false;
    s.options.check_islanding = false;
    s.uncertainty = false;
    s
}

/// Two hours, one lossless storage unit: 100 kWh, 50 kW, η = 0.9, half
/// full; buy 20/80, sell 10/60 €/MWh. Hand solution: charge just enough in
/// hour 0 (5/0.81 kW) that hour 1 can sell a full 50 kW.
pub fn arbitrage_toy() -> SimulationScenario {
    let fleet = DeviceFleet {
        bess: vec![bess(2, 100.0, 50.0, 0.9, 50.0)],
        ..Default::default()
    };
    let prices = PriceSet {
        c_buy: vec![20.0, 80.0],
        c_sell: vec![10.0, 60.0],
        ..flat_prices(2, 1.0, 0.0)
    };
    scenario(two_bus(c(0.0, 0.0)), fleet, prices, 1, 2)
}

pub const ARBITRAGE_OPTIMUM: f64 = 20.0 * (5.0 / 0.81) / 1000.0 - 60.0 * 50.0 / 1000.0;
