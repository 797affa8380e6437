//! Per-unit snapshot of everything one horizon program needs.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec::Execution;
use crate::grid::GridTopology;
use crate::powerflow::VoltageProfile;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HorizonConfig {
    /// Absolute step index of the first period.
    pub t_mpc: usize,
    pub horizon: usize,
    /// Hours per step.
    pub dt: f64,
}

impl Default for HorizonConfig {
    fn default() -> Self {
        HorizonConfig {
            t_mpc: 0,
            horizon: 24,
            dt: 1.0,
        }
    }
}

impl HorizonConfig {
    pub fn validate(&self) -> Result<()> {
        if self.horizon == 0 {
            return Err(Error::Input("horizon must be at least one step".into()));
        }
        if !(self.dt > 0.0) {
            return Err(Error::Input("step length must be positive".into()));
        }
        Ok(())
    }

    /// Steps in the 24-hour islanded window.
    pub fn island_steps(&self) -> usize {
        (24.0 / self.dt).round().max(1.0) as usize
    }
}

/// Price time series, aligned with the horizon (index 0 = `t_mpc`). Energy
/// prices in €/MWh, reserve price in €/MW per hour.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct PriceSet {
    pub c_buy: Vec<f64>,
    pub c_sell: Vec<f64>,
    pub c_bid: Vec<f64>,
    pub c_curt_g: Vec<f64>,
    pub c_curt_l_isl: Vec<f64>,
    pub f_isl: f64,
}

impl PriceSet {
    pub fn validate(&self, len: usize) -> Result<()> {
        for (name, s) in [
            ("c_buy", &self.c_buy),
            ("c_sell", &self.c_sell),
            ("c_bid", &self.c_bid),
            ("c_curt_g", &self.c_curt_g),
            ("c_curt_l_isl", &self.c_curt_l_isl),
        ] {
            if s.len() < len {
                return Err(Error::Input(format!(
                    "price series {name} covers {} steps, need {len}",
                    s.len()
                )));
            }
        }
        if let Some(t) = (0..len).find(|&t| !(self.c_sell[t] < self.c_buy[t])) {
            return Err(Error::Input(format!(
                "selling price must stay below buying price (step {t}: sell {} >= buy {})",
                self.c_sell[t], self.c_buy[t]
            )));
        }
        Ok(())
    }

    pub fn window(&self, start: usize, len: usize) -> Result<PriceSet> {
        let cut = |s: &Vec<f64>, name: &str| -> Result<Vec<f64>> {
            s.get(start..start + len)
                .map(|x| x.to_vec())
                .ok_or_else(|| Error::Input(format!("price series {name} too short for steps {start}..{}", start + len)))
        };
        Ok(PriceSet {
            c_buy: cut(&self.c_buy, "c_buy")?,
            c_sell: cut(&self.c_sell, "c_sell")?,
            c_bid: cut(&self.c_bid, "c_bid")?,
            c_curt_g: cut(&self.c_curt_g, "c_curt_g")?,
            c_curt_l_isl: cut(&self.c_curt_l_isl, "c_curt_l_isl")?,
            f_isl: self.f_isl,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ProductKind {
    #[default]
    None,
    Pfc,
    Sfc,
    TfcUp,
    TfcDown,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum BlockKind {
    #[default]
    Weekly,
    FourHour,
}

/// The single frequency-control product offered.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FcProduct {
    pub kind: ProductKind,
    #[serde(default)]
    pub block: BlockKind,
    /// Maximum bid, kW.
    pub bid_cap_kw: f64,
    /// Worst-case full-power hours per call hour, up direction (SFC).
    #[serde(default)]
    pub sfc_worst_up: Vec<f64>,
    /// Same for down regulation.
    #[serde(default)]
    pub sfc_worst_down: Vec<f64>,
    /// PFC full-power duration, hours.
    #[serde(default = "quarter_hour")]
    pub dt1: f64,
    /// Four-hour blocks of the day offered in `four_hour` mode (0..6).
    #[serde(default = "all_blocks")]
    pub four_hour_blocks: Vec<usize>,
}

fn quarter_hour() -> f64 {
    0.25
}

fn all_blocks() -> Vec<usize> {
    (0..6).collect()
}

impl Default for FcProduct {
    fn default() -> Self {
        FcProduct {
            kind: ProductKind::None,
            block: BlockKind::Weekly,
            bid_cap_kw: 0.0,
            sfc_worst_up: Vec::new(),
            sfc_worst_down: Vec::new(),
            dt1: 0.25,
            four_hour_blocks: all_blocks(),
        }
    }
}

impl FcProduct {
    pub fn none() -> Self {
        Self::default()
    }

    pub fn validate(&self, dt: f64) -> Result<()> {
        if self.bid_cap_kw < 0.0 {
            return Err(Error::Input("bid cap must be nonnegative".into()));
        }
        if self.kind == ProductKind::Sfc {
            if self.sfc_worst_up.len() != 4 || self.sfc_worst_down.len() != 4 {
                return Err(Error::Input("SFC product needs 4-hour worst-case profiles in both directions".into()));
            }
            if self
                .sfc_worst_up
                .iter()
                .chain(&self.sfc_worst_down)
                .any(|&d| !(0.0..=dt + 1e-12).contains(&d))
            {
                return Err(Error::Input("SFC worst-case delivery times must lie in [0, dt]".into()));
            }
        }
        if self.kind != ProductKind::None && (dt - 1.0).abs() > 1e-9 {
            return Err(Error::Input("reserve products require hourly steps".into()));
        }
        if self.block == BlockKind::FourHour && !matches!(self.kind, ProductKind::TfcUp | ProductKind::TfcDown) {
            return Err(Error::Input("four-hour blocks exist for tertiary control only".into()));
        }
        if self.four_hour_blocks.iter().any(|&b| b >= 6) {
            return Err(Error::Input("four-hour block index must be below 6".into()));
        }
        Ok(())
    }

    /// Commitment block containing absolute step `t` (hourly steps), or
    /// `None` when no bid applies at `t`. Keys are block start steps.
    pub fn block_key(&self, t: usize) -> Option<usize> {
        match (self.kind, self.block) {
            (ProductKind::None, _) => None,
            (_, BlockKind::Weekly) => Some(t / 168 * 168),
            (_, BlockKind::FourHour) => {
                let b = (t % 24) / 4;
                self.four_hour_blocks.contains(&b).then_some(t / 4 * 4)
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ComplementarityMode {
    /// Rely on losses making simultaneous charge/discharge unattractive;
    /// branch only when a solution still shows it.
    #[default]
    Relaxed,
    /// Always branch to enforce complementarity.
    Exact,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OpfSettings {
    pub v_min: f64,
    pub v_max: f64,
    pub alpha_min: f64,
    /// Build islanded copies for every `island_every`-th start step.
    pub island_every: usize,
    pub islanding: bool,
    pub complementarity: ComplementarityMode,
    /// Tolerance on p_ch·p_dis, per-unit squared.
    pub complementarity_tol: f64,
    pub max_branch_nodes: usize,
    pub inner_tolerance: f64,
    pub max_inner: usize,
    pub round_taps: bool,
    pub exec: Execution,
}

impl Default for OpfSettings {
    fn default() -> Self {
        OpfSettings {
            v_min: 0.9,
            v_max: 1.1,
            alpha_min: 0.1,
            island_every: 1,
            islanding: true,
            complementarity: ComplementarityMode::Relaxed,
            complementarity_tol: 1e-7,
            max_branch_nodes: 64,
            inner_tolerance: 1e-6,
            max_inner: 20,
            round_taps: true,
            exec: Execution::default(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct PvInput {
    pub id: String,
    pub bus: usize,
    pub bus_isl: Option<usize>,
    pub s_rating: f64,
    pub tan_phi: f64,
    /// Available power, pu, from `t_mpc` over horizon + islanded window.
    pub avail: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct LoadInput {
    pub id: String,
    pub bus: usize,
    pub bus_isl: Option<usize>,
    pub tan_phi: f64,
    pub p: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct FlexInput {
    pub id: String,
    pub bus: usize,
    pub tan_phi: f64,
    pub shift: Vec<f64>,
    pub history_sum: f64,
}

#[derive(Debug, Clone)]
pub struct BessInput {
    pub id: String,
    pub bus: usize,
    pub bus_isl: Option<usize>,
    pub e_cap: f64,
    pub p_max: f64,
    pub e_min: f64,
    pub e_max: f64,
    pub eta: f64,
    pub tan_phi: f64,
    pub e0: f64,
}

/// Everything a single horizon program needs, in per-unit (energies in
/// pu·h). Device time series start at `cfg.t_mpc` and cover the horizon plus
/// the islanded window.
#[derive(Debug, Clone)]
pub struct HorizonInput {
    pub cfg: HorizonConfig,
    pub grid: Arc<GridTopology>,
    pub island_grid: Option<Arc<GridTopology>>,
    pub pv: Vec<PvInput>,
    pub loads: Vec<LoadInput>,
    pub flex: Vec<FlexInput>,
    pub bess: Vec<BessInput>,
    pub prices: PriceSet,
    pub product: FcProduct,
    /// Already committed bids (kW) by block key.
    pub committed_bids: Vec<(usize, f64)>,
    pub settings: OpfSettings,
    /// Apparent-power cap at the substation, pu.
    pub substation_cap: Option<f64>,
    /// MW per pu, for costs.
    pub mw_per_pu: f64,
    /// Tap positions per period when taps are not decision variables.
    pub tap_fixed: Option<Vec<f64>>,
}

impl HorizonInput {
    pub fn horizon(&self) -> usize {
        self.cfg.horizon
    }

    pub fn island_steps(&self) -> usize {
        self.cfg.island_steps()
    }

    /// Islanding start offsets within the horizon.
    pub fn island_starts(&self) -> Vec<usize> {
        if !self.settings.islanding || self.island_grid.is_none() {
            return Vec::new();
        }
        (0..self.horizon()).step_by(self.settings.island_every.max(1)).collect()
    }

    /// Number of steps of data the program reads.
    pub fn data_len(&self) -> usize {
        if self.island_starts().is_empty() {
            self.horizon()
        } else {
            self.horizon() + self.island_steps() - 1
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.cfg.validate()?;
        self.product.validate(self.cfg.dt)?;
        let need = self.data_len();
        self.prices.validate(need)?;
        for p in &self.pv {
            if p.avail.len() < need {
                return Err(Error::Input(format!(
                    "islanded horizon exceeds available forecast data for pv {} ({} < {need} steps)",
                    p.id,
                    p.avail.len()
                )));
            }
        }
        for l in &self.loads {
            if l.p.len() < need {
                return Err(Error::Input(format!(
                    "islanded horizon exceeds available forecast data for load {} ({} < {need} steps)",
                    l.id,
                    l.p.len()
                )));
            }
        }
        for f in &self.flex {
            if f.shift.len() < self.horizon() {
                return Err(Error::Input(format!("flexload {} profile too short", f.id)));
            }
        }
        if self.settings.v_min >= self.settings.v_max {
            return Err(Error::Input("v_min must be below v_max".into()));
        }
        if let Some(taps) = &self.tap_fixed {
            if taps.len() < self.horizon() {
                return Err(Error::Input("fixed tap schedule shorter than the horizon".into()));
            }
            for &t in taps {
                self.grid.oltc().check_tap(t)?;
            }
        }
        let on_slack = self.pv.iter().map(|d| d.bus)
            .chain(self.loads.iter().map(|d| d.bus))
            .chain(self.flex.iter().map(|d| d.bus))
            .chain(self.bess.iter().map(|d| d.bus))
            .any(|b| b == 0);
        if on_slack {
            return Err(Error::Input("devices cannot connect to the slack bus".into()));
        }
        if !(0.0..=1.0).contains(&self.settings.alpha_min) {
            return Err(Error::Input("alpha_min must lie in [0, 1]".into()));
        }
        Ok(())
    }

    /// Flat profiles for every grid-connected period and islanded period.
    pub fn flat_vbar(&self) -> VBar {
        let n = self.grid.n_buses();
        let mut flat = VoltageProfile::flat(n);
        flat.v[0] = self.grid.oltc().slack_voltage;
        let grid = vec![flat; self.horizon()];
        let islands = match &self.island_grid {
            Some(g) => self
                .island_starts()
                .iter()
                .map(|_| vec![VoltageProfile::flat(g.n_buses()); self.island_steps()])
                .collect(),
            None => Vec::new(),
        };
        let island_full = islands.iter().map(|c: &Vec<VoltageProfile>| vec![false; c.len()]).collect();
        VBar {
            grid,
            islands,
            island_full,
        }
    }
}

/// Frozen voltage estimates used to linearize current injections.
#[derive(Debug, Clone)]
pub struct VBar {
    pub grid: Vec<VoltageProfile>,
    /// Indexed like `HorizonInput::island_starts()`, then by islanded step.
    pub islands: Vec<Vec<VoltageProfile>>,
    /// Islanded steps whose network limits are enforced explicitly, same
    /// indexing as `islands`. The others are checked on the AC solution.
    pub island_full: Vec<Vec<bool>>,
}

impl VBar {
    pub fn max_abs_diff(&self, other: &VBar) -> f64 {
        let g = self
            .grid
            .iter()
            .zip(&other.grid)
            .map(|(a, b)| a.max_abs_diff(b))
            .fold(0.0, f64::max);
        let i = self
            .islands
            .iter()
            .zip(&other.islands)
            .flat_map(|(a, b)| a.iter().zip(b).map(|(x, y)| x.max_abs_diff(y)))
            .fold(0.0, f64::max);
        g.max(i)
    }

    /// Where the largest change sits: `(|dV|, island copy or None, step, bus)`.
    pub fn worst_diff(&self, other: &VBar) -> (f64, Option<usize>, usize, usize) {
        let mut best = (0.0, None, 0, 0);
        let mut visit = |c: Option<usize>, k: usize, a: &VoltageProfile, b: &VoltageProfile| {
            for (bus, (x, y)) in a.v.iter().zip(&b.v).enumerate() {
                let d = (x - y).norm();
                if d > best.0 {
                    best = (d, c, k, bus);
                }
            }
        };
        for (k, (a, b)) in self.grid.iter().zip(&other.grid).enumerate() {
            visit(None, k, a, b);
        }
        for (c, (a, b)) in self.islands.iter().zip(&other.islands).enumerate() {
            for (h, (x, y)) in a.iter().zip(b).enumerate() {
                visit(Some(c), h, x, y);
            }
        }
        best
    }
}
