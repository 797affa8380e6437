//! The reference case: CIGRE European LV residential feeder with PV, flexible
//! loads and one large battery, plus seeded synthetic stand-ins for market,
//! irradiance and demand data.

use std::f64::consts::PI;
use std::sync::OnceLock;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::devices::{BessUnit, DeviceFleet, FlexLoad, LoadPoint, PvUnit};
use crate::error::Result;
use crate::grid::{BranchDoc, BusDoc, BusKind, GridTopology, OltcDoc, PerUnitBase, TopologyDocument};
use crate::mpc::SimulationScenario;
use crate::opf::{FcProduct, PriceSet, ProductKind};
use crate::signal::{analyze_sfc_signal, synthetic_activation, FrequencySignal, SfcWorstCase};
use crate::uncertainty::ForecastErrorModel;

pub const S_BASE_KVA: f64 = 400.0;
pub const V_BASE_KV: f64 = 0.4;
pub const LOAD_PF: f64 = 0.95;
/// `(bus, kVA)` of the residential loads.
pub const LOADS: [(usize, f64); 5] = [(12, 15.0), (16, 52.0), (17, 55.0), (18, 35.0), (19, 47.0)];
/// `(bus, share of total peak load)` of the PV units.
pub const PV: [(usize, f64); 4] = [(12, 0.35), (16, 0.25), (18, 0.30), (19, 0.45)];
pub const FLEX_BUSES: [usize; 3] = [17, 18, 19];
pub const FLEX_KW: f64 = 5.0;
pub const BESS_BUS: usize = 2;
pub const BESS_KWH: f64 = 484.0;
pub const BESS_KW: f64 = 484.0;
pub const BESS_ETA: f64 = 0.95;
pub const F_ISL: f64 = 0.1;
pub const C_CURT_L_ISL: f64 = 250.0;
/// First step of the summer reference week (1 July, a week boundary).
pub const SUMMER_WEEK: usize = 182 * 24;
pub const DAYS: usize = 366;

/// The 19-bus feeder: bus 1 is the MV side, branch 1–2 the transformer.
pub fn cigre_document() -> TopologyDocument {
    let ug1 = (0.162, 0.0832);
    let ug3 = (0.822, 0.0847);
    // (from, to, length m, cable); bus n is CIGRE node R(n−1).
    let lines: [(usize, usize, f64, (f64, f64)); 17] = [
        (2, 3, 35.0, ug1),
        (3, 4, 35.0, ug1),
        (4, 5, 35.0, ug1),
        (5, 6, 35.0, ug1),
        (6, 7, 35.0, ug1),
        (7, 8, 35.0, ug1),
        (8, 9, 35.0, ug1),
        (9, 10, 35.0, ug1),
        (10, 11, 35.0, ug1),
        (4, 12, 30.0, ug3),
        (5, 13, 35.0, ug3),
        (13, 14, 35.0, ug3),
        (14, 15, 35.0, ug3),
        (15, 16, 30.0, ug3),
        (7, 17, 30.0, ug3),
        (10, 18, 30.0, ug3),
        (11, 19, 30.0, ug3),
    ];
    let mut branches = vec![BranchDoc {
        id: Some(1),
        from: 1,
        to: 2,
        r_pu: Some(0.008),
        x_pu: Some(0.030984),
        r_ohm: None,
        x_ohm: None,
        i_max_pu: Some(1.25),
        i_max_a: None,
    }];
    for (k, (from, to, len, (r, x))) in lines.into_iter().enumerate() {
        branches.push(BranchDoc {
            id: Some(k + 2),
            from,
            to,
            r_pu: None,
            x_pu: None,
            r_ohm: Some(r * len / 1000.0),
            x_ohm: Some(x * len / 1000.0),
            i_max_pu: Some(1.0),
            i_max_a: None,
        });
    }
    let load_buses: Vec<usize> = LOADS.iter().map(|l| l.0).collect();
    TopologyDocument {
        base: PerUnitBase {
            s_base_kva: S_BASE_KVA,
            v_base_kv: V_BASE_KV,
        },
        buses: (1..=19)
            .map(|id| BusDoc {
                id,
                kind: if id == 1 {
                    BusKind::Slack
                } else if load_buses.contains(&id) {
                    BusKind::Load
                } else {
                    BusKind::Junction
                },
                base_kv: None,
            })
            .collect(),
        branches,
        oltc: OltcDoc {
            step_pu: 0.00625,
            min: -4,
            max: 4,
            v_slack_pu: Some(1.0),
            v_slack_angle_deg: Some(0.0),
        },
    }
}

pub fn cigre_feeder() -> GridTopology {
    cigre_document().into_topology().expect("reference feeder is valid")
}

/// Total peak active load of the feeder, kW.
pub fn peak_load_kw() -> f64 {
    LOADS.iter().map(|l| l.1 * LOAD_PF).sum()
}

/// Reserve prices, €/MW per hour, standing in for the previous year's
/// volume-weighted accepted bids.
pub fn reserve_price(kind: ProductKind) -> f64 {
    match kind {
        ProductKind::None => 0.0,
        ProductKind::Pfc => 20.0,
        ProductKind::Sfc => 15.0,
        ProductKind::TfcUp => 6.0,
        ProductKind::TfcDown => 4.0,
    }
}

/// Standard deviation of the relative PV forecast error at each lead time.
pub fn error_sigmas() -> Vec<f64> {
    (1..=24).map(|h| 0.03 + 0.007 * h as f64).collect()
}

pub fn error_model() -> ForecastErrorModel {
    ForecastErrorModel::gaussian(&error_sigmas())
}

/// Synthetic year of hourly data (plus one day of lookahead), kW and €/MWh.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ReferenceData {
    pub fleet: DeviceFleet,
    pub prices: PriceSet,
}

fn season(day: usize) -> f64 {
    // +1 at midsummer, −1 at midwinter.
    (2.0 * PI * (day as f64 - 172.0) / 365.0).cos()
}

/// Relative clear-sky PV output in hour `h` of day `day`.
pub fn pv_shape(day: usize, h: usize) -> f64 {
    let len = 12.0 + 4.0 * season(day);
    let rise = 13.0 - len / 2.0;
    let x = (h as f64 + 0.5 - rise) / len;
    if (0.0..=1.0).contains(&x) {
        (PI * x).sin().powf(1.3) * (0.6 + 0.4 * season(day))
    } else {
        0.0
    }
}

const LOAD_SHAPE: [f64; 24] = [
    0.42, 0.38, 0.36, 0.35, 0.36, 0.42, 0.58, 0.72, 0.68, 0.60, 0.56, 0.55, 0.57, 0.55, 0.52, 0.53, 0.60, 0.75, 0.90,
    1.00, 0.95, 0.82, 0.66, 0.52,
];

/// Generate `days` days of hourly series starting on 1 January.
pub fn generate(days: usize, seed: u64) -> ReferenceData {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = days * 24;
    let peak = peak_load_kw();

    let cloud: Vec<f64> = (0..days).map(|_| 0.35 + 0.65 * rng.random::<f64>().powf(0.6)).collect();
    let pv = PV
        .iter()
        .map(|&(bus, share)| {
            let rating = share * peak;
            let profile = (0..n)
                .map(|t| {
                    let (d, h) = (t / 24, t % 24);
                    let noise = 1.0 + 0.1 * (rng.random::<f64>() - 0.5);
                    (rating * pv_shape(d, h) * cloud[d] * noise).clamp(0.0, rating)
                })
                .collect();
            PvUnit {
                id: format!("pv{bus}"),
                bus,
                s_rating_kva: rating,
                p_max_profile: profile,
                min_power_factor: 0.9,
            }
        })
        .collect();

    let load = LOADS
        .iter()
        .map(|&(bus, kva)| {
            let scale = kva * LOAD_PF / 1.3;
            let profile = (0..n)
                .map(|t| {
                    let (d, h) = (t / 24, t % 24);
                    let weekend = if d % 7 >= 5 { 1.05 } else { 1.0 };
                    let noise = 1.0 + 0.1 * (rng.random::<f64>() - 0.5);
                    scale * LOAD_SHAPE[h] * (1.0 - 0.2 * season(d)) * weekend * noise
                })
                .collect();
            LoadPoint {
                id: format!("load{bus}"),
                bus,
                p_profile: profile,
                power_factor: LOAD_PF,
            }
        })
        .collect();

    let flexload = FLEX_BUSES
        .iter()
        .map(|&bus| FlexLoad {
            id: format!("flex{bus}"),
            bus,
            p_shift_profile: vec![FLEX_KW; n],
            f_history: Vec::new(),
            power_factor: LOAD_PF,
        })
        .collect();

    let bess = vec![BessUnit {
        id: format!("bess{BESS_BUS}"),
        bus: BESS_BUS,
        e_cap_kwh: BESS_KWH,
        p_max_kw: BESS_KW,
        soc_min: 0.0,
        soc_max: 1.0,
        eta: BESS_ETA,
        tan_phi_max: 0.9f64.acos().tan(),
        e_initial_kwh: 0.5 * BESS_KWH,
    }];

    let spot: Vec<f64> = (0..n)
        .map(|t| {
            let (d, h) = (t / 24, t % 24);
            let daily = 0.5 * (LOAD_SHAPE[h] - 0.6) * 40.0;
            let solar_dip = -8.0 * pv_shape(d, h);
            let weekend = if d % 7 >= 5 { -5.0 } else { 0.0 };
            let winter = -4.0 * season(d);
            (34.0 + daily + solar_dip + weekend + winter + 4.0 * (rng.random::<f64>() - 0.5)).max(1.0)
        })
        .collect();
    let prices = PriceSet {
        c_buy: spot.iter().map(|s| s + 10.0).collect(),
        c_sell: spot.iter().map(|s| s - 2.0).collect(),
        c_bid: vec![reserve_price(ProductKind::Pfc); n],
        c_curt_g: spot.clone(),
        c_curt_l_isl: vec![C_CURT_L_ISL; n],
        f_isl: F_ISL,
    };
    ReferenceData {
        fleet: DeviceFleet {
            pv,
            bess,
            flexload,
            load,
        },
        prices,
    }
}

/// The reference data set shipped in `data/reference/`.
pub fn reference_data() -> ReferenceData {
    generate(DAYS + 2, 2016)
}

/// Reserve product with the reference bid cap (the storage power rating).
pub fn product(kind: ProductKind) -> FcProduct {
    let mut p = FcProduct {
        kind,
        bid_cap_kw: if kind == ProductKind::None { 0.0 } else { BESS_KW },
        ..FcProduct::default()
    };
    if kind == ProductKind::Sfc {
        let w = sfc_worst_case();
        p.sfc_worst_up = w.up.clone();
        p.sfc_worst_down = w.down.clone();
    }
    p
}

/// Synthetic month of secondary-control activation: mean-reverting with a
/// 15 min correlation time, tuned so the 24 h worst case is about 5.5 h of
/// full bid power.
pub fn sfc_signal() -> FrequencySignal {
    synthetic_activation(30 * 24 * 3600, 900.0, 0.35, SFC_SIGNAL_SEED)
}

pub const SFC_SIGNAL_SEED: u64 = 11;

/// Worst-case table of [`sfc_signal`], computed once.
pub fn sfc_worst_case() -> &'static SfcWorstCase {
    static CELL: OnceLock<SfcWorstCase> = OnceLock::new();
    CELL.get_or_init(|| analyze_sfc_signal(&sfc_signal(), 4).expect("a month covers four hours"))
}

/// Reference scenario over `[start, end)` with the given product; reserve
/// prices follow the product.
pub fn scenario(data: &ReferenceData, kind: ProductKind, start: usize, end: usize) -> Result<SimulationScenario> {
    let mut prices = data.prices.clone();
    prices.c_bid.iter_mut().for_each(|c| *c = reserve_price(kind));
    let mut s = SimulationScenario::new(cigre_feeder(), data.fleet.clone(), prices, start, end)?;
    s.product = product(kind);
    s.error_model = error_model();
    s.forecast_seed = 7;
    Ok(s)
}

/// Write the reference inputs to `dir` (`topology.json`, `fleet.json`,
/// `series.csv`, `prices.csv`, `error_model.csv`) plus a run config
/// `ref.json` for `product` over `[start, end)`. Returns the config path.
pub fn write_files(
    dir: &std::path::Path,
    data: &ReferenceData,
    kind: ProductKind,
    start: usize,
    end: usize,
) -> Result<std::path::PathBuf> {
    use crate::io;
    std::fs::create_dir_all(dir)?;
    std::fs::write(dir.join("topology.json"), serde_json::to_string_pretty(&cigre_document())?)?;
    std::fs::write(
        dir.join("fleet.json"),
        serde_json::to_string_pretty(&io::fleet_static(&data.fleet))?,
    )?;
    io::write_timeseries(&dir.join("series.csv"), &io::fleet_series(&data.fleet))?;
    let mut prices = data.prices.clone();
    prices.c_bid.iter_mut().for_each(|c| *c = reserve_price(kind));
    io::write_prices(&dir.join("prices.csv"), &prices)?;
    error_model().write_csv(&dir.join("error_model.csv"))?;
    let s = scenario(data, kind, start, end)?;
    let cfg = io::RunConfig {
        topology: "topology.json".into(),
        fleet: "fleet.json".into(),
        series: "series.csv".into(),
        prices: "prices.csv".into(),
        error_model: Some("error_model.csv".into()),
        signal: None,
        product: Some(s.product.clone()),
        horizon: io::HorizonBlock {
            start,
            end,
            horizon: s.horizon,
            dt_h: s.dt,
        },
        settings: s.settings,
        mc: crate::uncertainty::McSettings {
            n_samples: 500,
            ..s.mc
        },
        thresholds: s.thresholds,
        uncertainty: true,
        forecast_seed: s.forecast_seed,
        f_isl: F_ISL,
        forming_bus: Some(BESS_BUS),
        substation_cap_kva: None,
        options: s.options,
        study: io::StudyBlock {
            capacity_grid: (1..=20).map(|i| 50.0 * i as f64).collect(),
            ..io::StudyBlock::default()
        },
        output_dir: "results".into(),
        base_dir: dir.to_path_buf(),
    };
    let path = dir.join("ref.json");
    std::fs::write(&path, serde_json::to_string_pretty(&cfg)?)?;
    Ok(path)
}
