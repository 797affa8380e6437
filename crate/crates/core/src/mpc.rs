//! Rolling-horizon simulation and the studies built on top of it: minimum
//! storage sizing, islanding sweeps, secondary-control replay and the
//! transformer rating curve.

use std::collections::BTreeMap;
use std::sync::Arc;

use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::devices::{bess_energy_step, DeviceFleet};
use crate::error::{Error, Result};
use crate::exec::Execution;
use crate::grid::GridTopology;
use crate::opf::{
    inner_feasibility_loop, solve_islanding, BessInput, CostBreakdown, DispatchPlan, FcProduct, FlexInput,
    HorizonConfig, HorizonInput, LoadInput, OpfSettings, PriceSet, ProductKind, PvInput,
};
use crate::powerflow::{solve_bfs, InjectionProfile, PfSettings};
use crate::signal::{sfc_call_replay, FrequencySignal, ReplayPlan, ReplayReport};
use crate::solver::ConicSolver;
use crate::uncertainty::{
    cc_opf, pv_forecast, sample_scenarios, validate_violation_rate, ConvergenceThresholds, ForecastErrorModel, McSettings,
    UncertaintyMargins, ViolationReport,
};

/// Knobs of a simulation run that are not part of the optimization itself.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunOptions {
    /// Solve the islanded subproblem alone at every step with the realized
    /// storage energy.
    pub check_islanding: bool,
    /// Stop at the first step that needs the fallback.
    pub stop_on_failure: bool,
    /// Keep every step's full dispatch plan in the result.
    pub record_plans: bool,
}

impl Default for RunOptions {
    fn default() -> Self {
        RunOptions {
            check_islanding: true,
            stop_on_failure: false,
            record_plans: false,
        }
    }
}

/// Network, devices, market data and settings of one simulation. Device
/// profiles hold the *realized* values in kW; forecasts are derived from
/// them with the error model.
#[derive(Debug, Clone)]
pub struct SimulationScenario {
    pub grid: Arc<GridTopology>,
    pub island_grid: Option<Arc<GridTopology>>,
    pub fleet: DeviceFleet,
    /// Absolute-time price series starting at step 0.
    pub prices: PriceSet,
    pub product: FcProduct,
    pub error_model: ForecastErrorModel,
    pub forecast_seed: u64,
    pub start: usize,
    pub end: usize,
    pub horizon: usize,
    pub dt: f64,
    pub settings: OpfSettings,
    pub mc: McSettings,
    pub thresholds: ConvergenceThresholds,
    /// Chance-constrained loop on; off means a deterministic OPF.
    pub uncertainty: bool,
    pub substation_cap_kva: Option<f64>,
    pub options: RunOptions,
}

impl SimulationScenario {
    /// Scenario over `[start, end)` with default settings, hourly steps, a
    /// 24-step horizon, no product and a zero forecast error. The islanded
    /// network is formed at the first storage unit's bus.
    pub fn new(grid: GridTopology, fleet: DeviceFleet, prices: PriceSet, start: usize, end: usize) -> Result<Self> {
        let forming = fleet.bess.first().map(|b| b.bus);
        let mut s = SimulationScenario {
            grid: Arc::new(grid),
            island_grid: None,
            fleet,
            prices,
            product: FcProduct::none(),
            error_model: ForecastErrorModel::zero(24),
            forecast_seed: 0,
            start,
            end,
            horizon: 24,
            dt: 1.0,
            settings: OpfSettings::default(),
            mc: McSettings::default(),
            thresholds: ConvergenceThresholds::default(),
            uncertainty: false,
            substation_cap_kva: None,
            options: RunOptions::default(),
        };
        s.set_forming_bus(forming)?;
        Ok(s)
    }

    /// Choose the bus (by id) that forms the islanded network.
    pub fn set_forming_bus(&mut self, bus_id: Option<usize>) -> Result<()> {
        self.island_grid = match bus_id {
            Some(id) => Some(Arc::new(self.grid.islanded(id)?)),
            None => None,
        };
        Ok(())
    }

    fn island_steps(&self) -> usize {
        HorizonConfig {
            t_mpc: 0,
            horizon: self.horizon,
            dt: self.dt,
        }
        .island_steps()
    }

    fn islanding_active(&self) -> bool {
        self.settings.islanding && self.island_grid.is_some()
    }

    /// Steps of data one horizon program reads.
    pub fn lookahead(&self) -> usize {
        if self.islanding_active() {
            self.horizon + self.island_steps() - 1
        } else {
            self.horizon
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.fleet.validate()?;
        self.product.validate(self.dt)?;
        self.error_model.validate()?;
        if self.start >= self.end {
            return Err(Error::Input("simulation needs at least one step".into()));
        }
        if self.settings.islanding && self.island_grid.is_none() {
            return Err(Error::Input("islanding requested but no grid-forming bus is available".into()));
        }
        let buses = self
            .fleet
            .pv
            .iter()
            .map(|d| (&d.id, d.bus))
            .chain(self.fleet.bess.iter().map(|d| (&d.id, d.bus)))
            .chain(self.fleet.flexload.iter().map(|d| (&d.id, d.bus)))
            .chain(self.fleet.load.iter().map(|d| (&d.id, d.bus)));
        for (id, bus) in buses {
            let idx = self
                .grid
                .index(bus)
                .map_err(|_| Error::Input(format!("device {id} sits on unknown bus {bus}")))?;
            if idx == 0 {
                return Err(Error::Input(format!("device {id} sits on the slack bus")));
            }
        }
        let need = self.end - 1 + self.lookahead();
        let span = self.fleet.span();
        if span < need {
            return Err(Error::Input(format!(
                "islanded horizon exceeds available forecast data: profiles cover {span} steps, the run needs {need}"
            )));
        }
        self.prices.validate(need)?;
        if self.uncertainty {
            self.mc.validate()?;
        }
        Ok(())
    }

    /// Uniform draw driving the forecast error of target step `j`. The same
    /// draw is reused at every lead time, so forecasts for one instant
    /// tighten as it approaches instead of jumping around.
    fn forecast_draw(&self, j: usize) -> f64 {
        let mut rng = ChaCha8Rng::seed_from_u64(self.forecast_seed);
        rng.set_stream(j as u64);
        rng.random::<f64>()
    }

    /// PV availability forecast issued at `t_mpc` for `len` steps, kW:
    /// realized value times `1 + error(lead)`, clamped to the rating.
    pub fn pv_forecast_kw(&self, t_mpc: usize, len: usize) -> Result<Vec<Vec<f64>>> {
        let max_lead = self.error_model.max_lead();
        let errors = (0..len)
            .map(|i| self.error_model.draw((i + 1).min(max_lead), self.forecast_draw(t_mpc + i)))
            .collect::<Result<Vec<_>>>()?;
        Ok(self
            .fleet
            .pv
            .iter()
            .map(|u| {
                (0..len)
                    .map(|i| (u.p_max_profile[t_mpc + i] * (1.0 + errors[i])).clamp(0.0, u.s_rating_kva))
                    .collect()
            })
            .collect())
    }

    /// Per-unit program data for the MPC step at `t_mpc`.
    pub fn horizon_input(&self, t_mpc: usize, state: &MpcState) -> Result<HorizonInput> {
        let len = self.lookahead();
        let base = *self.grid.base();
        let pu = |kw: f64| base.kw_to_pu(kw);
        if t_mpc + len > self.fleet.span() {
            return Err(Error::Input(format!(
                "islanded horizon exceeds available forecast data at step {t_mpc}"
            )));
        }
        let isl = |bus: usize| self.island_grid.as_ref().and_then(|g| g.index(bus).ok());
        let forecast = self.pv_forecast_kw(t_mpc, len)?;
        let pv = self
            .fleet
            .pv
            .iter()
            .zip(forecast)
            .map(|(u, f)| {
                Ok(PvInput {
                    id: u.id.clone(),
                    bus: self.grid.index(u.bus)?,
                    bus_isl: isl(u.bus),
                    s_rating: pu(u.s_rating_kva),
                    tan_phi: u.min_power_factor.acos().tan(),
                    avail: f.into_iter().map(pu).collect(),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let loads = self
            .fleet
            .load
            .iter()
            .map(|l| {
                Ok(LoadInput {
                    id: l.id.clone(),
                    bus: self.grid.index(l.bus)?,
                    bus_isl: isl(l.bus),
                    tan_phi: l.tan_phi(),
                    p: l.p_profile[t_mpc..t_mpc + len].iter().map(|&p| pu(p)).collect(),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let flex = self
            .fleet
            .flexload
            .iter()
            .zip(&state.flex_history)
            .map(|(f, hist)| {
                Ok(FlexInput {
                    id: f.id.clone(),
                    bus: self.grid.index(f.bus)?,
                    tan_phi: f.power_factor.acos().tan(),
                    shift: f.p_shift_profile[t_mpc..t_mpc + self.horizon].iter().map(|&p| pu(p)).collect(),
                    history_sum: f.f_history.iter().chain(hist).sum(),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let bess = self
            .fleet
            .bess
            .iter()
            .zip(&state.e_kwh)
            .map(|(b, &e)| {
                Ok(BessInput {
                    id: b.id.clone(),
                    bus: self.grid.index(b.bus)?,
                    bus_isl: isl(b.bus),
                    e_cap: pu(b.e_cap_kwh),
                    p_max: pu(b.p_max_kw),
                    e_min: pu(b.e_min()),
                    e_max: pu(b.e_max()),
                    eta: b.eta,
                    tan_phi: b.tan_phi_max,
                    e0: pu(e.clamp(b.e_min(), b.e_max())),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(HorizonInput {
            cfg: HorizonConfig {
                t_mpc,
                horizon: self.horizon,
                dt: self.dt,
            },
            grid: self.grid.clone(),
            island_grid: self.island_grid.clone(),
            pv,
            loads,
            flex,
            bess,
            prices: self.prices.window(t_mpc, len)?,
            product: self.product.clone(),
            committed_bids: state.committed.iter().map(|(&k, &v)| (k, v)).collect(),
            settings: self.settings,
            substation_cap: self.substation_cap_kva.map(pu),
            mw_per_pu: base.s_base_kva / 1000.0,
            tap_fixed: None,
        })
    }

    pub fn initial_state(&self) -> MpcState {
        MpcState {
            t: self.start,
            e_kwh: self.fleet.bess.iter().map(|b| b.e_initial_kwh).collect(),
            flex_history: vec![Vec::new(); self.fleet.flexload.len()],
            committed: BTreeMap::new(),
            last: None,
        }
    }

    /// Copy with every storage unit resized so the fleet totals `e_cap_kwh`,
    /// split in proportion to the current capacities.
    pub fn with_bess_capacity(&self, e_cap_kwh: f64) -> SimulationScenario {
        let mut s = self.clone();
        let total: f64 = self.fleet.bess.iter().map(|b| b.e_cap_kwh).sum();
        let n = self.fleet.bess.len().max(1) as f64;
        for b in &mut s.fleet.bess {
            let share = if total > 0.0 { b.e_cap_kwh / total } else { 1.0 / n };
            *b = b.with_capacity(e_cap_kwh * share);
        }
        s
    }
}

/// State carried from one MPC step to the next.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MpcState {
    pub t: usize,
    pub e_kwh: Vec<f64>,
    /// Factors applied during this run, per flexible load.
    pub flex_history: Vec<Vec<f64>>,
    /// Committed bids, kW, by block key.
    pub committed: BTreeMap<usize, f64>,
    pub last: Option<Applied>,
}

/// Setpoints actually applied in one step, physical units.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Applied {
    pub tap: f64,
    pub pv_curtailed_kw: Vec<f64>,
    pub pv_q_kvar: Vec<f64>,
    pub ch_kw: Vec<f64>,
    pub dis_kw: Vec<f64>,
    pub bq_kvar: Vec<f64>,
    pub flex: Vec<f64>,
}

impl Applied {
    fn idle(s: &SimulationScenario) -> Self {
        Applied {
            tap: 0.0,
            pv_curtailed_kw: vec![0.0; s.fleet.pv.len()],
            pv_q_kvar: vec![0.0; s.fleet.pv.len()],
            ch_kw: vec![0.0; s.fleet.bess.len()],
            dis_kw: vec![0.0; s.fleet.bess.len()],
            bq_kvar: vec![0.0; s.fleet.bess.len()],
            flex: vec![0.0; s.fleet.flexload.len()],
        }
    }

    fn from_plan(plan: &DispatchPlan) -> Self {
        let sp = plan.first_step();
        let kw = |v: &[f64]| v.iter().map(|x| plan.kw(*x)).collect();
        Applied {
            tap: sp.tap,
            pv_curtailed_kw: kw(&sp.pv_curtailed),
            pv_q_kvar: kw(&sp.pv_q),
            ch_kw: kw(&sp.ch),
            dis_kw: kw(&sp.dis),
            bq_kvar: kw(&sp.bq),
            flex: sp.flex,
        }
    }
}

/// What happened at one simulated step. Powers in kW/kvar, energies in kWh.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub t: usize,
    /// The program was solved; false means the fallback was applied.
    pub feasible: bool,
    pub message: Option<String>,
    pub tap: f64,
    pub pv_avail_kw: Vec<f64>,
    pub pv_p_kw: Vec<f64>,
    pub pv_q_kvar: Vec<f64>,
    pub ch_kw: Vec<f64>,
    pub dis_kw: Vec<f64>,
    pub bq_kvar: Vec<f64>,
    pub flex: Vec<f64>,
    pub e_start_kwh: Vec<f64>,
    pub e_end_kwh: Vec<f64>,
    pub bid_kw: f64,
    /// Realized exchange with the upstream grid.
    pub p_buy_kw: f64,
    pub p_sell_kw: f64,
    pub q_slack_kvar: f64,
    pub s_slack_kva: f64,
    pub losses_kw: f64,
    pub v_min: f64,
    pub v_max: f64,
    /// Largest branch current over ampacity.
    pub max_loading: f64,
    /// Realized cost of the step, €.
    pub cost: f64,
    pub planned: Option<CostBreakdown>,
    pub island_feasible: Option<bool>,
    pub island_min_alpha: Option<f64>,
    pub island_message: Option<String>,
    /// PFC energy band implied by the committed bid, `(low, high)`.
    pub reserve_band_kwh: Option<(f64, f64)>,
    pub plan_max_buy_sell: f64,
    pub plan_max_ch_dis: f64,
    pub outer_iterations: usize,
    pub inner_iterations: usize,
    pub cc_converged: Option<bool>,
    pub max_margin_v: f64,
    pub max_margin_i: f64,
    pub solve_time_s: f64,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct SimulationResult {
    pub steps: Vec<StepRecord>,
    /// Committed bids, kW, by block key.
    pub bids: BTreeMap<usize, f64>,
    pub final_state: Option<MpcState>,
    #[serde(skip)]
    pub plans: Vec<DispatchPlan>,
}

impl SimulationResult {
    pub fn n_fallbacks(&self) -> usize {
        self.steps.iter().filter(|s| !s.feasible).count()
    }

    pub fn all_islanding_feasible(&self) -> bool {
        self.steps.iter().all(|s| s.island_feasible != Some(false))
    }

    pub fn total_cost(&self) -> f64 {
        self.steps.iter().map(|s| s.cost).sum()
    }
}

struct StepSolve {
    plan: DispatchPlan,
    outer: usize,
    inner: usize,
    converged: Option<bool>,
    margins: Option<UncertaintyMargins>,
}

fn solve_step(s: &SimulationScenario, input: &HorizonInput, solver: &dyn ConicSolver) -> Result<StepSolve> {
    if s.uncertainty {
        let cc = cc_opf(input, &s.error_model, &s.thresholds, &s.mc, solver)?;
        Ok(StepSolve {
            outer: cc.outer_iterations,
            inner: cc.inner_iterations,
            converged: Some(cc.converged),
            margins: Some(cc.margins),
            plan: cc.plan,
        })
    } else {
        let out = inner_feasibility_loop(input, &UncertaintyMargins::for_input(input), solver, None)?;
        Ok(StepSolve {
            outer: 1,
            inner: out.iterations,
            converged: None,
            margins: None,
            plan: out.plan,
        })
    }
}

fn max_of(rows: &[Vec<f64>]) -> f64 {
    rows.iter().flatten().copied().fold(0.0, f64::max)
}

/// Run the receding-horizon loop over `[start, end)`. Only the first step of
/// each plan is applied against realized data. When a step cannot be solved
/// the previous setpoints are held (clipped to the storage limits) and the
/// step is flagged; input errors abort the run.
pub fn run_mpc(s: &SimulationScenario, solver: &dyn ConicSolver) -> Result<SimulationResult> {
    s.validate()?;
    let mut state = s.initial_state();
    let mut result = SimulationResult::default();
    for t in s.start..s.end {
        let rec = mpc_step(s, &mut state, solver, &mut result)?;
        let failed = !rec.feasible || rec.island_feasible == Some(false);
        result.steps.push(rec);
        if failed && s.options.stop_on_failure {
            break;
        }
        log::info!("step {t} done");
    }
    result.bids = state.committed.clone();
    result.final_state = Some(state);
    Ok(result)
}

/// Advance `state` by one step.
pub fn mpc_step(
    s: &SimulationScenario,
    state: &mut MpcState,
    solver: &dyn ConicSolver,
    result: &mut SimulationResult,
) -> Result<StepRecord> {
    let t = state.t;
    let base = *s.grid.base();
    let input = s.horizon_input(t, state)?;
    let started = std::time::Instant::now();

    let island = if s.options.check_islanding && s.islanding_active() {
        Some(solve_islanding(&input, solver))
    } else {
        None
    };
    let (island_feasible, island_min_alpha, island_message) = match island {
        None => (None, None, None),
        Some(Ok(o)) => (Some(o.min_alpha >= s.settings.alpha_min - 1e-6), Some(o.min_alpha), None),
        Some(Err(e)) if e.is_input_error() => return Err(e),
        Some(Err(e)) => (Some(false), None, Some(e.to_string())),
    };

    let solved = match solve_step(s, &input, solver) {
        Ok(x) => Ok(x),
        Err(e) if e.is_input_error() => return Err(e),
        Err(e) => Err(e),
    };
    let solve_time_s = started.elapsed().as_secs_f64();

    let (mut applied, feasible, message, plan_info) = match solved {
        Ok(st) => {
            let a = Applied::from_plan(&st.plan);
            (a, true, None, Some(st))
        }
        Err(e) => {
            log::warn!("step {t}: {e}; holding previous setpoints");
            let a = state.last.clone().unwrap_or_else(|| Applied::idle(s));
            (a, false, Some(e.to_string()), None)
        }
    };

    // Storage limits bind the held setpoints too.
    let e_start = state.e_kwh.clone();
    let mut e_end = Vec::with_capacity(s.fleet.bess.len());
    for (u, b) in s.fleet.bess.iter().enumerate() {
        let (mut ch, mut dis) = (applied.ch_kw[u].clamp(0.0, b.p_max_kw), applied.dis_kw[u].clamp(0.0, b.p_max_kw));
        if !feasible {
            let room = (b.e_max() - e_start[u]).max(0.0);
            let avail = (e_start[u] - b.e_min()).max(0.0);
            ch = ch.min(room / (b.eta * s.dt));
            dis = dis.min(avail * b.eta / s.dt);
            applied.flex.iter_mut().for_each(|f| *f = 0.0);
        }
        applied.ch_kw[u] = ch;
        applied.dis_kw[u] = dis;
        let q_cap = ch.max(dis) * b.tan_phi_max;
        applied.bq_kvar[u] = applied.bq_kvar[u].clamp(-q_cap, q_cap);
        e_end.push(bess_energy_step(e_start[u], ch, dis, s.dt, b.eta));
    }

    // Realized PV: the planned curtailment amount is kept, the forecast
    // error passes through to the substation.
    let pv_avail: Vec<f64> = s.fleet.pv.iter().map(|u| u.p_max_profile[t]).collect();
    let pv_p: Vec<f64> = pv_avail
        .iter()
        .zip(&applied.pv_curtailed_kw)
        .map(|(a, c)| (a - c).max(0.0))
        .collect();
    let pv_q: Vec<f64> = s
        .fleet
        .pv
        .iter()
        .zip(&applied.pv_q_kvar)
        .zip(&pv_avail)
        .map(|((u, q), a)| {
            let cap = u.min_power_factor.acos().tan() * a;
            q.clamp(-cap, cap)
        })
        .collect();

    let mut inj = InjectionProfile::zeros(s.grid.n_buses());
    let idx = |bus: usize| s.grid.index(bus).expect("validated bus");
    for (u, unit) in s.fleet.pv.iter().enumerate() {
        inj.p[idx(unit.bus)] += base.kw_to_pu(pv_p[u]);
        inj.q[idx(unit.bus)] += base.kw_to_pu(pv_q[u]);
    }
    for l in &s.fleet.load {
        let p = base.kw_to_pu(l.p_profile[t]);
        inj.p[idx(l.bus)] -= p;
        inj.q[idx(l.bus)] -= p * l.tan_phi();
    }
    for (u, f) in s.fleet.flexload.iter().enumerate() {
        let p = base.kw_to_pu(applied.flex[u] * f.p_shift_profile[t]);
        inj.p[idx(f.bus)] -= p;
        inj.q[idx(f.bus)] -= p * f.power_factor.acos().tan();
    }
    for (u, b) in s.fleet.bess.iter().enumerate() {
        inj.p[idx(b.bus)] += base.kw_to_pu(applied.dis_kw[u] - applied.ch_kw[u]);
        inj.q[idx(b.bus)] += base.kw_to_pu(applied.bq_kvar[u]);
    }
    let flow = solve_bfs(&s.grid, &inj, applied.tap, &PfSettings::default())?;
    let s_slack: Complex64 = flow.slack_power();
    let p_slack = base.pu_to_kw(s_slack.re);
    let injected: f64 = inj.p.iter().skip(1).map(|p| base.pu_to_kw(*p)).sum();
    let mags = flow.voltages.magnitudes();
    let v_min = mags.iter().skip(1).copied().fold(f64::INFINITY, f64::min);
    let v_max = mags.iter().skip(1).copied().fold(f64::NEG_INFINITY, f64::max);
    let max_loading = s
        .grid
        .branches()
        .iter()
        .zip(&flow.i_br)
        .map(|(b, i)| i.norm() / b.ampacity)
        .fold(0.0, f64::max);

    // Commit the bid of the block this step opens.
    let key = s.product.block_key(t);
    let mut bid_kw = 0.0;
    if let Some(key) = key {
        // Interior-point values can sit a hair outside the bid bounds; a
        // committed bid above the cap would make every later step infeasible.
        let planned = plan_info
            .as_ref()
            .map_or(0.0, |p| p.plan.kw(p.plan.bid[0]))
            .clamp(0.0, s.product.bid_cap_kw);
        bid_kw = *state.committed.entry(key).or_insert(planned);
    }
    let reserve_band_kwh = (s.product.kind == ProductKind::Pfc && key.is_some()).then(|| {
        let lo: f64 = s.fleet.bess.iter().map(|b| b.e_min()).sum();
        let hi: f64 = s.fleet.bess.iter().map(|b| b.e_max()).sum();
        (lo + bid_kw * s.product.dt1, hi - bid_kw * s.product.dt1)
    });

    let pr = &s.prices;
    let mwh = s.dt / 1000.0;
    let curtailed: f64 = pv_avail.iter().zip(&pv_p).map(|(a, p)| a - p).sum();
    let cost = (pr.c_buy[t] * p_slack.max(0.0) - pr.c_sell[t] * (-p_slack).max(0.0)) * mwh
        + pr.c_curt_g[t] * curtailed * mwh
        - key.map_or(0.0, |_| pr.c_bid[t] * bid_kw * mwh);

    let (max_margin_v, max_margin_i) = plan_info
        .as_ref()
        .and_then(|p| p.margins.as_ref())
        .map_or((0.0, 0.0), |m| (max_of(&m.v_upper).max(max_of(&m.v_lower)), max_of(&m.i_branch)));

    let rec = StepRecord {
        t,
        feasible,
        message,
        tap: applied.tap,
        pv_avail_kw: pv_avail,
        pv_p_kw: pv_p,
        pv_q_kvar: pv_q,
        ch_kw: applied.ch_kw.clone(),
        dis_kw: applied.dis_kw.clone(),
        bq_kvar: applied.bq_kvar.clone(),
        flex: applied.flex.clone(),
        e_start_kwh: e_start,
        e_end_kwh: e_end.clone(),
        bid_kw,
        p_buy_kw: p_slack.max(0.0),
        p_sell_kw: (-p_slack).max(0.0),
        q_slack_kvar: base.pu_to_kw(s_slack.im),
        s_slack_kva: base.pu_to_kw(s_slack.norm()),
        losses_kw: p_slack + injected,
        v_min,
        v_max,
        max_loading,
        cost,
        planned: plan_info.as_ref().map(|p| p.plan.costs),
        island_feasible,
        island_min_alpha,
        island_message,
        reserve_band_kwh,
        plan_max_buy_sell: plan_info.as_ref().map_or(0.0, |p| p.plan.max_buy_sell_product()),
        plan_max_ch_dis: plan_info.as_ref().map_or(0.0, |p| p.plan.max_ch_dis_product()),
        outer_iterations: plan_info.as_ref().map_or(0, |p| p.outer),
        inner_iterations: plan_info.as_ref().map_or(0, |p| p.inner),
        cc_converged: plan_info.as_ref().and_then(|p| p.converged),
        max_margin_v,
        max_margin_i,
        solve_time_s,
    };

    state.e_kwh = e_end;
    for (h, f) in state.flex_history.iter_mut().zip(&applied.flex) {
        h.push(*f);
    }
    state.last = Some(applied);
    state.t += 1;
    if s.options.record_plans {
        if let Some(p) = plan_info {
            result.plans.push(p.plan);
        }
    }
    Ok(rec)
}

// ---------------------------------------------------------------------------
// Minimum storage size

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SizingResult {
    /// Smallest feasible capacity on the grid, kWh.
    pub capacity_kwh: f64,
    /// Every capacity evaluated, with its verdict.
    pub evaluated: Vec<(f64, bool)>,
}

/// Whether a run at total storage `e_cap_kwh` keeps every step solvable and
/// islanding-feasible. Uncertainty is switched off.
pub fn islanding_feasible_at(s: &SimulationScenario, e_cap_kwh: f64, solver: &dyn ConicSolver) -> Result<bool> {
    let mut sc = s.with_bess_capacity(e_cap_kwh);
    sc.uncertainty = false;
    sc.options.check_islanding = true;
    sc.options.stop_on_failure = true;
    let r = run_mpc(&sc, solver)?;
    Ok(r.steps.len() == sc.end - sc.start && r.n_fallbacks() == 0 && r.all_islanding_feasible())
}

/// Smallest capacity on the ascending `grid` with an islanding-feasible
/// run, found by bisection (feasibility is monotone in capacity).
pub fn min_bess_search(s: &SimulationScenario, grid: &[f64], solver: &dyn ConicSolver) -> Result<SizingResult> {
    check_grid(grid)?;
    let mut evaluated = Vec::new();
    let mut probe = |i: usize| -> Result<bool> {
        let ok = islanding_feasible_at(s, grid[i], solver)?;
        evaluated.push((grid[i], ok));
        Ok(ok)
    };
    let n = grid.len();
    if !probe(n - 1)? {
        return Err(Error::Infeasible(format!(
            "islanding infeasible even with the largest capacity {} kWh",
            grid[n - 1]
        )));
    }
    if probe(0)? {
        return Ok(SizingResult {
            capacity_kwh: grid[0],
            evaluated,
        });
    }
    let (mut lo, mut hi) = (0, n - 1);
    while hi - lo > 1 {
        let mid = (lo + hi) / 2;
        if probe(mid)? {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    Ok(SizingResult {
        capacity_kwh: grid[hi],
        evaluated,
    })
}

/// Feasibility at every grid point, evaluated concurrently.
pub fn min_bess_scan(
    s: &SimulationScenario,
    grid: &[f64],
    solver: &(dyn ConicSolver + Sync),
    exec: Execution,
) -> Result<Vec<(f64, bool)>> {
    check_grid(grid)?;
    exec.map(grid, |&c| islanding_feasible_at(s, c, solver).map(|ok| (c, ok)))
        .into_iter()
        .collect()
}

fn check_grid(grid: &[f64]) -> Result<()> {
    if grid.is_empty() {
        return Err(Error::Input("capacity grid is empty".into()));
    }
    if grid.windows(2).any(|w| !(w[0] < w[1])) || grid[0] < 0.0 {
        return Err(Error::Input("capacity grid must be nonnegative and strictly ascending".into()));
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Islanding sweep

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IslandSweepEntry {
    /// Absolute step at which the feeder disconnects.
    pub t: usize,
    pub feasible: bool,
    pub message: Option<String>,
    /// Storage energy at the start of each islanded step and after the last, kWh.
    pub soc_kwh: Vec<Vec<f64>>,
    pub served: Vec<f64>,
    pub pv_curtailed_kw: Vec<f64>,
    pub min_alpha: f64,
    pub curtailment_cost: f64,
    pub shedding_cost: f64,
}

/// Plan the grid-connected horizon at the scenario start, then disconnect at
/// each of the given horizon offsets with the planned storage energy and
/// solve the islanded problem on its own.
pub fn islanding_sweep(
    s: &SimulationScenario,
    offsets: &[usize],
    solver: &(dyn ConicSolver + Sync),
) -> Result<Vec<IslandSweepEntry>> {
    s.validate()?;
    if offsets.iter().any(|&h| h >= s.horizon) {
        return Err(Error::Input("islanding offsets must lie inside the horizon".into()));
    }
    let state = s.initial_state();
    let input = s.horizon_input(s.start, &state)?;
    let plan = solve_step(s, &input, solver)?.plan;
    let base = *s.grid.base();
    let entries = s.settings.exec.map(offsets, |&h| {
        let mut st = state.clone();
        st.e_kwh = plan.bess.iter().map(|b| base.pu_to_kw(b.e[h])).collect();
        for (hist, f) in st.flex_history.iter_mut().zip(&plan.flex) {
            hist.extend_from_slice(&f.f[..h]);
        }
        let t = s.start + h;
        let res = s.horizon_input(t, &st).and_then(|inp| solve_islanding(&inp, solver).map(|o| (inp, o)));
        match res {
            Ok((inp, o)) => {
                let sched = &o.schedule;
                let h_len = inp.island_steps();
                let curt = (0..h_len)
                    .map(|k| {
                        inp.pv
                            .iter()
                            .enumerate()
                            .map(|(u, p)| base.pu_to_kw(p.avail[k] - sched.pv_p[u][k]).max(0.0))
                            .sum()
                    })
                    .collect();
                Ok(IslandSweepEntry {
                    t,
                    feasible: true,
                    message: None,
                    soc_kwh: sched.e.iter().map(|e| e.iter().map(|x| base.pu_to_kw(*x)).collect()).collect(),
                    served: o.served.clone(),
                    pv_curtailed_kw: curt,
                    min_alpha: o.min_alpha,
                    curtailment_cost: o.costs.curt_g_isl,
                    shedding_cost: o.costs.curt_l_isl,
                })
            }
            Err(e) if e.is_input_error() => Err(e),
            Err(e) => Ok(IslandSweepEntry {
                t,
                feasible: false,
                message: Some(e.to_string()),
                soc_kwh: Vec::new(),
                served: Vec::new(),
                pv_curtailed_kw: Vec::new(),
                min_alpha: f64::NAN,
                curtailment_cost: f64::NAN,
                shedding_cost: f64::NAN,
            }),
        }
    });
    entries.into_iter().collect()
}

// ---------------------------------------------------------------------------
// Transformer rating

/// Calendar quarter (0..4) of an absolute step.
pub fn quarter_of(t: usize, dt: f64) -> usize {
    let day = (t as f64 * dt / 24.0).floor() as usize % 365;
    (day * 4 / 365).min(3)
}

/// Substation apparent power without any control: PV uncurtailed, storage
/// idle, flexible loads at their base, tap 0. kVA per step over `[from, to)`.
pub fn uncontrolled_substation_kva(s: &SimulationScenario, from: usize, to: usize) -> Result<Vec<f64>> {
    let base = *s.grid.base();
    let pf = PfSettings::default();
    let flows = s.settings.exec.map_range(to - from, |i| {
        let t = from + i;
        let mut inj = InjectionProfile::zeros(s.grid.n_buses());
        for u in &s.fleet.pv {
            let b = s.grid.index(u.bus)?;
            inj.p[b] += base.kw_to_pu(u.p_max_profile[t]);
        }
        for l in &s.fleet.load {
            let b = s.grid.index(l.bus)?;
            let p = base.kw_to_pu(l.p_profile[t]);
            inj.p[b] -= p;
            inj.q[b] -= p * l.tan_phi();
        }
        let f = solve_bfs(&s.grid, &inj, 0.0, &pf)?;
        Ok(base.pu_to_kw(f.slack_power().norm()))
    });
    flows.into_iter().collect()
}

/// Quarter with the highest uncontrolled substation peak inside the data,
/// with its step range.
pub fn critical_quarter(s: &SimulationScenario) -> Result<(usize, usize, usize)> {
    let span = s.fleet.span().saturating_sub(s.lookahead());
    let kva = uncontrolled_substation_kva(s, 0, span)?;
    let mut best = (0, f64::NEG_INFINITY);
    for (t, &v) in kva.iter().enumerate() {
        if v > best.1 {
            best = (t, v);
        }
    }
    let q = quarter_of(best.0, s.dt);
    let steps: Vec<usize> = (0..span).filter(|&t| quarter_of(t, s.dt) == q).collect();
    let from = *steps.first().ok_or_else(|| Error::Input("no data for the transformer study".into()))?;
    let to = steps.last().copied().unwrap_or(from) + 1;
    Ok((q, from, to))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RatingPoint {
    pub capacity_kwh: f64,
    /// Smallest substation cap with a fully solvable run, kVA.
    pub rating_kva: f64,
    /// Largest realized substation apparent power at that cap, kVA.
    pub realized_peak_kva: f64,
    pub probes: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RatingStudy {
    pub start: usize,
    pub end: usize,
    pub uncontrolled_peak_kva: f64,
    pub points: Vec<RatingPoint>,
}

fn run_with_cap(s: &SimulationScenario, cap: Option<f64>, solver: &dyn ConicSolver) -> Result<Option<f64>> {
    let mut sc = s.clone();
    sc.substation_cap_kva = cap;
    sc.options.stop_on_failure = true;
    sc.options.check_islanding = false;
    let r = run_mpc(&sc, solver)?;
    let ok = r.steps.len() == sc.end - sc.start && r.n_fallbacks() == 0;
    Ok(ok.then(|| r.steps.iter().map(|x| x.s_slack_kva).fold(0.0, f64::max)))
}

/// Minimum substation rating per storage capacity over the scenario span:
/// bisection on an apparent-power cap at the feeder head. No reserve
/// product is offered.
pub fn transformer_rating_study(
    s: &SimulationScenario,
    capacities: &[f64],
    tol_kva: f64,
    solver: &(dyn ConicSolver + Sync),
) -> Result<RatingStudy> {
    s.validate()?;
    if s.product.kind != ProductKind::None {
        return Err(Error::Input("the rating study runs without a reserve product".into()));
    }
    if !(tol_kva > 0.0) {
        return Err(Error::Input("rating tolerance must be positive".into()));
    }
    let peak = uncontrolled_substation_kva(s, s.start, s.end)?
        .into_iter()
        .fold(0.0, f64::max);
    let points = s.settings.exec.map(capacities, |&c| -> Result<RatingPoint> {
        let sc = s.with_bess_capacity(c);
        let Some(free_peak) = run_with_cap(&sc, None, solver)? else {
            return Err(Error::Infeasible(format!("run infeasible even without a cap at {c} kWh")));
        };
        let mut probes = 1;
        let mut hi = free_peak.max(tol_kva);
        let mut hi_peak = free_peak;
        match run_with_cap(&sc, Some(hi), solver)? {
            Some(p) => hi_peak = p,
            None => {
                hi *= 1.0 + 1e-3;
            }
        }
        probes += 1;
        let mut lo = 0.0;
        while hi - lo > tol_kva {
            let mid = 0.5 * (lo + hi);
            probes += 1;
            match run_with_cap(&sc, Some(mid), solver)? {
                Some(p) => {
                    hi = mid;
                    hi_peak = p;
                }
                None => lo = mid,
            }
        }
        Ok(RatingPoint {
            capacity_kwh: c,
            rating_kva: hi,
            realized_peak_kva: hi_peak,
            probes,
        })
    });
    Ok(RatingStudy {
        start: s.start,
        end: s.end,
        uncontrolled_peak_kva: peak,
        points: points.into_iter().collect::<Result<Vec<_>>>()?,
    })
}

/// Hourly schedule of a finished run, aggregated over storage units, for
/// replaying a secondary-control signal against it.
pub fn replay_plan(s: &SimulationScenario, r: &SimulationResult) -> Result<ReplayPlan> {
    if (s.dt - 1.0).abs() > 1e-12 {
        return Err(Error::Input("signal replay needs hourly steps".into()));
    }
    let first = r.steps.first().ok_or_else(|| Error::Input("empty simulation result".into()))?;
    let bess = &s.fleet.bess;
    if bess.is_empty() {
        return Err(Error::Input("signal replay needs storage".into()));
    }
    let sum = |v: &[f64]| v.iter().sum::<f64>();
    Ok(ReplayPlan {
        e0_kwh: sum(&first.e_start_kwh),
        e_min_kwh: bess.iter().map(|b| b.soc_min * b.e_cap_kwh).sum(),
        e_max_kwh: bess.iter().map(|b| b.soc_max * b.e_cap_kwh).sum(),
        p_max_kw: bess.iter().map(|b| b.p_max_kw).sum(),
        eta: bess.iter().map(|b| b.eta).fold(1.0, f64::min),
        bid_kw: r.steps.iter().map(|st| st.bid_kw).fold(0.0, f64::max),
        ch_kw: r.steps.iter().map(|st| sum(&st.ch_kw)).collect(),
        dis_kw: r.steps.iter().map(|st| sum(&st.dis_kw)).collect(),
        pv_headroom_kw: r
            .steps
            .iter()
            .map(|st| (sum(&st.pv_avail_kw) - sum(&st.pv_p_kw)).max(0.0))
            .collect(),
        pv_output_kw: r.steps.iter().map(|st| sum(&st.pv_p_kw)).collect(),
        worst_up: s.product.sfc_worst_up.clone(),
        worst_down: s.product.sfc_worst_down.clone(),
    })
}

/// Replay `signal` against the schedule of `r`, trading at the scenario's
/// spot prices with `lead_time_h` hours of lead.
pub fn sfc_replay(
    s: &SimulationScenario,
    r: &SimulationResult,
    signal: &FrequencySignal,
    lead_time_h: usize,
) -> Result<ReplayReport> {
    let plan = replay_plan(s, r)?;
    let from = s.start;
    let buy = s.prices.c_buy.get(from..).unwrap_or(&[]);
    let sell = s.prices.c_sell.get(from..).unwrap_or(&[]);
    sfc_call_replay(&plan, signal, buy, sell, lead_time_h)
}

// ---------------------------------------------------------------------------
// Chance-constraint validation

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CcValidation {
    pub t: usize,
    pub epsilon: f64,
    pub converged: bool,
    pub outer_iterations: usize,
    pub max_margin_v: f64,
    pub max_margin_i: f64,
    pub report: ViolationReport,
}

/// Solve the chance-constrained program at step `t` from the initial state,
/// then count raw-limit violations of its plan under `n_samples` fresh
/// forecast scenarios drawn with `seed`.
pub fn validate_cc_at(
    s: &SimulationScenario,
    t: usize,
    n_samples: usize,
    seed: u64,
    solver: &dyn ConicSolver,
) -> Result<CcValidation> {
    s.validate()?;
    let mut state = s.initial_state();
    state.t = t;
    let input = s.horizon_input(t, &state)?;
    let cc = cc_opf(&input, &s.error_model, &s.thresholds, &s.mc, solver)?;
    let fresh = McSettings {
        n_samples,
        seed,
        ..s.mc
    };
    let (forecast, ratings) = pv_forecast(&input);
    let scenarios = sample_scenarios(&s.error_model, &forecast, &ratings, input.horizon(), &fresh)?;
    let report = validate_violation_rate(&input, &cc.plan, &scenarios, &fresh);
    Ok(CcValidation {
        t,
        epsilon: s.mc.epsilon,
        converged: cc.converged,
        outer_iterations: cc.outer_iterations,
        max_margin_v: max_of(&cc.margins.v_upper).max(max_of(&cc.margins.v_lower)),
        max_margin_i: max_of(&cc.margins.i_branch),
        report,
    })
}
