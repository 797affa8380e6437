//! Multi-period OPF for one MPC step: program assembly, solve, plan
//! extraction and the inner loop that projects the linearized solution onto
//! the AC power-flow manifold.

pub mod builder;
pub mod input;

use serde::{Deserialize, Serialize};

pub use builder::{
    add_der_constraints, add_proximal_terms, build_island_program, add_islanding_constraints, add_network_constraints, add_pfc_constraints,
    add_power_balance, add_sfc_constraints, add_tfc_constraints, build_objective, build_program, Direction,
    HorizonProgram,
};
pub use input::{
    BessInput, BlockKind, ComplementarityMode, FcProduct, FlexInput, HorizonConfig, HorizonInput, LoadInput,
    OpfSettings, PriceSet, ProductKind, PvInput, VBar,
};

use crate::error::{Error, Result};
use crate::powerflow::{solve_bfs, FlowState, InjectionProfile, PfSettings, VoltageProfile};
use crate::solver::{solve_with_complementarity, ConicSolver, Family, LinExpr, Solution, SolveStatus};
use crate::uncertainty::UncertaintyMargins;

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct CostBreakdown {
    pub curt_g: f64,
    pub curt_g_isl: f64,
    pub curt_l_isl: f64,
    pub exchange: f64,
    /// Reserve revenue, subtracted in `total`.
    pub revenue: f64,
    pub total: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PvSchedule {
    pub id: String,
    pub p: Vec<f64>,
    pub q: Vec<f64>,
    pub curtailed: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BessSchedule {
    pub id: String,
    pub ch: Vec<f64>,
    pub dis: Vec<f64>,
    pub q: Vec<f64>,
    /// Energy at the start of each period plus the final state (`T + 1`).
    pub e: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlexSchedule {
    pub id: String,
    pub f: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BidBlock {
    pub key: usize,
    pub kw: f64,
}

/// Islanded operation planned for a disconnection at horizon offset `tau`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IslandSchedule {
    pub tau: usize,
    /// `[bess][0..=H]`
    pub e: Vec<Vec<f64>>,
    /// `[load][h]`, NaN for loads outside the island.
    pub alpha: Vec<Vec<f64>>,
    /// `[pv][h]`
    pub pv_p: Vec<Vec<f64>>,
    pub pv_q: Vec<Vec<f64>>,
    /// `[bess][h]`
    pub ch: Vec<Vec<f64>>,
    pub dis: Vec<Vec<f64>>,
    pub bq: Vec<Vec<f64>>,
}

impl IslandSchedule {
    /// Load-weighted served fraction per islanded step.
    pub fn served_fraction(&self, input: &HorizonInput) -> Vec<f64> {
        (0..input.island_steps())
            .map(|h| {
                let mut served = 0.0;
                let mut total = 0.0;
                for (l, a) in input.loads.iter().zip(&self.alpha) {
                    if a[h].is_nan() {
                        continue;
                    }
                    served += a[h] * l.p[self.tau + h];
                    total += l.p[self.tau + h];
                }
                if total > 0.0 {
                    served / total
                } else {
                    1.0
                }
            })
            .collect()
    }

    pub fn min_alpha(&self) -> f64 {
        self.alpha
            .iter()
            .flatten()
            .copied()
            .filter(|a| !a.is_nan())
            .fold(f64::INFINITY, f64::min)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolveStats {
    pub status: SolveStatus,
    pub raw_status: String,
    pub iterations: u32,
    pub nodes: usize,
    pub solve_time: f64,
    pub inner_iterations: usize,
    /// Proximal weight active in the accepted iteration (0 if none).
    pub proximal_weight: f64,
    pub n_vars: usize,
    pub n_rows: usize,
}

/// Optimal setpoints and trajectories of one horizon, all in per-unit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DispatchPlan {
    pub t_mpc: usize,
    pub dt: f64,
    pub s_base_kva: f64,
    pub tap: Vec<f64>,
    pub p_buy: Vec<f64>,
    pub p_sell: Vec<f64>,
    pub q_slack: Vec<f64>,
    pub pv: Vec<PvSchedule>,
    pub bess: Vec<BessSchedule>,
    pub flex: Vec<FlexSchedule>,
    pub bids: Vec<BidBlock>,
    /// Bid active in each period, pu (0 where no product applies).
    pub bid: Vec<f64>,
    pub islands: Vec<IslandSchedule>,
    /// Voltages of the linearized network model.
    #[serde(skip)]
    pub voltages: Vec<VoltageProfile>,
    pub costs: CostBreakdown,
    pub objective: f64,
    pub stats: SolveStats,
}

/// First-period setpoints, the part an MPC step applies.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Setpoints {
    pub tap: f64,
    pub pv_p: Vec<f64>,
    pub pv_q: Vec<f64>,
    pub pv_curtailed: Vec<f64>,
    pub ch: Vec<f64>,
    pub dis: Vec<f64>,
    pub bq: Vec<f64>,
    pub flex: Vec<f64>,
    pub bid: f64,
}

impl DispatchPlan {
    pub fn horizon(&self) -> usize {
        self.tap.len()
    }

    pub fn first_step(&self) -> Setpoints {
        Setpoints {
            tap: self.tap[0],
            pv_p: self.pv.iter().map(|p| p.p[0]).collect(),
            pv_q: self.pv.iter().map(|p| p.q[0]).collect(),
            pv_curtailed: self.pv.iter().map(|p| p.curtailed[0]).collect(),
            ch: self.bess.iter().map(|b| b.ch[0]).collect(),
            dis: self.bess.iter().map(|b| b.dis[0]).collect(),
            bq: self.bess.iter().map(|b| b.q[0]).collect(),
            flex: self.flex.iter().map(|f| f.f[0]).collect(),
            bid: self.bid[0],
        }
    }

    pub fn kw(&self, pu: f64) -> f64 {
        pu * self.s_base_kva
    }

    /// Largest `p_buy·p_sell` over the horizon, pu².
    pub fn max_buy_sell_product(&self) -> f64 {
        self.p_buy
            .iter()
            .zip(&self.p_sell)
            .map(|(b, s)| b.max(0.0) * s.max(0.0))
            .fold(0.0, f64::max)
    }

    /// Largest `p_ch·p_dis` over storage units and periods, pu².
    pub fn max_ch_dis_product(&self) -> f64 {
        self.bess
            .iter()
            .flat_map(|b| b.ch.iter().zip(&b.dis).map(|(c, d)| c.max(0.0) * d.max(0.0)))
            .fold(0.0, f64::max)
    }
}

/// Solve an assembled program. Infeasible programs are re-solved with
/// elastic slacks per constraint family to name the most likely culprit.
pub fn solve_horizon(prog: &HorizonProgram, input: &HorizonInput, solver: &dyn ConicSolver) -> Result<DispatchPlan> {
    let tol = match input.settings.complementarity {
        ComplementarityMode::Relaxed => input.settings.complementarity_tol,
        ComplementarityMode::Exact => 1e-12,
    };
    let t0 = std::time::Instant::now();
    let out = solve_with_complementarity(solver, &prog.model, &prog.pairs, tol, input.settings.max_branch_nodes)?;
    log::trace!(
        "solved {} variables in {:.2}s over {} node(s)",
        prog.model.n_vars(),
        t0.elapsed().as_secs_f64(),
        out.nodes
    );
    let sol = out.solution;
    match sol.status {
        SolveStatus::Optimal => {}
        SolveStatus::Infeasible => {
            let diag = diagnose_infeasibility(prog, solver)?;
            let text = match diag.first() {
                Some((f, s)) => format!(
                    "program infeasible ({}); smallest relaxation in family '{}' (total slack {:.3e})",
                    sol.raw_status,
                    f.name(),
                    s
                ),
                None => format!("program infeasible ({}); no single family explains it", sol.raw_status),
            };
            return Err(Error::Infeasible(text));
        }
        SolveStatus::IterationLimit => {
            return Err(Error::NonConvergence(format!("solver stopped: {}", sol.raw_status)));
        }
        SolveStatus::Unbounded | SolveStatus::NumericalError => {
            return Err(Error::Solver(format!("solver returned {}", sol.raw_status)));
        }
    }
    Ok(extract_plan(prog, input, &sol, out.nodes))
}

/// Elastic re-solves, one family at a time; feasible relaxations sorted by
/// total slack.
pub fn diagnose_infeasibility(prog: &HorizonProgram, solver: &dyn ConicSolver) -> Result<Vec<(Family, f64)>> {
    let present = prog.model.families();
    let mut out = Vec::new();
    for fam in [
        Family::Voltage,
        Family::Current,
        Family::Islanding,
        Family::Reserve,
        Family::Substation,
    ] {
        if !present.contains(&fam) {
            continue;
        }
        let (m, slacks) = prog.model.elastic(fam);
        let s = solver.solve(&m)?;
        if s.status == SolveStatus::Optimal {
            let total: f64 = slacks.iter().map(|&v| s.value(v).max(0.0)).sum();
            out.push((fam, total));
        }
    }
    out.sort_by(|a, b| a.1.total_cmp(&b.1));
    Ok(out)
}

fn extract_plan(prog: &HorizonProgram, input: &HorizonInput, sol: &Solution, nodes: usize) -> DispatchPlan {
    let val = |v| sol.value(v);
    let ev = |e: &LinExpr| sol.eval(e);
    let periods = &prog.periods;
    let pv = input
        .pv
        .iter()
        .enumerate()
        .map(|(u, unit)| {
            let p: Vec<f64> = periods.iter().map(|pv| val(pv.pv_p[u])).collect();
            PvSchedule {
                id: unit.id.clone(),
                curtailed: p.iter().enumerate().map(|(k, x)| (unit.avail[k] - x).max(0.0)).collect(),
                q: periods.iter().map(|pv| val(pv.pv_q[u])).collect(),
                p,
            }
        })
        .collect();
    let bess = input
        .bess
        .iter()
        .enumerate()
        .map(|(u, b)| BessSchedule {
            id: b.id.clone(),
            ch: periods.iter().map(|pv| val(pv.ch[u])).collect(),
            dis: periods.iter().map(|pv| val(pv.dis[u])).collect(),
            q: periods.iter().map(|pv| val(pv.bq[u])).collect(),
            e: prog.energy[u].iter().map(ev).collect(),
        })
        .collect();
    let flex = input
        .flex
        .iter()
        .enumerate()
        .map(|(u, f)| FlexSchedule {
            id: f.id.clone(),
            f: periods.iter().map(|pv| val(pv.flex[u])).collect(),
        })
        .collect();
    let base = input.grid.base();
    let bids = prog
        .bids
        .iter()
        .map(|b| BidBlock {
            key: b.key,
            kw: base.pu_to_kw(val(b.var)),
        })
        .collect();
    let bid = prog.period_bid.iter().map(|b| b.map_or(0.0, |i| val(prog.bids[i].var))).collect();
    let opt = |o: Option<crate::solver::Var>| o.map_or(f64::NAN, val);
    let islands = prog
        .islands
        .iter()
        .map(|isl| {
            let per = &isl.periods;
            IslandSchedule {
                tau: isl.tau,
                e: isl.energy.iter().map(|e| e.iter().map(ev).collect()).collect(),
                alpha: (0..input.loads.len())
                    .map(|u| per.iter().map(|p| opt(p.alpha[u])).collect())
                    .collect(),
                pv_p: (0..input.pv.len()).map(|u| per.iter().map(|p| opt(p.pv_p[u])).collect()).collect(),
                pv_q: (0..input.pv.len()).map(|u| per.iter().map(|p| opt(p.pv_q[u])).collect()).collect(),
                ch: (0..input.bess.len()).map(|u| per.iter().map(|p| opt(p.ch[u])).collect()).collect(),
                dis: (0..input.bess.len()).map(|u| per.iter().map(|p| opt(p.dis[u])).collect()).collect(),
                bq: (0..input.bess.len()).map(|u| per.iter().map(|p| opt(p.bq[u])).collect()).collect(),
            }
        })
        .collect();
    let voltages = periods
        .iter()
        .map(|pv| VoltageProfile {
            v: pv
                .net
                .v
                .iter()
                .map(|(re, im)| num_complex::Complex64::new(ev(re), ev(im)))
                .collect(),
        })
        .collect();
    let c = &prog.costs;
    let costs = CostBreakdown {
        curt_g: ev(&c.curt_g),
        curt_g_isl: ev(&c.curt_g_isl),
        curt_l_isl: ev(&c.curt_l_isl),
        exchange: ev(&c.exchange),
        revenue: ev(&c.revenue),
        total: ev(&c.total()),
    };
    DispatchPlan {
        t_mpc: input.cfg.t_mpc,
        dt: input.cfg.dt,
        s_base_kva: base.s_base_kva,
        tap: periods.iter().map(|pv| val(pv.tap)).collect(),
        p_buy: periods.iter().map(|pv| val(pv.buy)).collect(),
        p_sell: periods.iter().map(|pv| val(pv.sell)).collect(),
        q_slack: periods.iter().map(|pv| ev(&pv.q_slack)).collect(),
        pv,
        bess,
        flex,
        bids,
        bid,
        islands,
        voltages,
        objective: costs.total,
        costs,
        stats: SolveStats {
            status: sol.status,
            raw_status: sol.raw_status.clone(),
            iterations: sol.iterations,
            nodes,
            solve_time: sol.solve_time,
            inner_iterations: 0,
            proximal_weight: 0.0,
            n_vars: prog.model.n_vars(),
            n_rows: prog.model.n_constraints(),
        },
    }
}

/// Grid-connected nodal injections of period `k`. `pv_p` overrides the
/// planned PV output (per unit, in fleet order).
pub fn grid_injections(input: &HorizonInput, plan: &DispatchPlan, k: usize, pv_p: Option<&[f64]>) -> InjectionProfile {
    let mut inj = InjectionProfile::zeros(input.grid.n_buses());
    for (u, unit) in input.pv.iter().enumerate() {
        inj.p[unit.bus] += pv_p.map_or(plan.pv[u].p[k], |p| p[u]);
        inj.q[unit.bus] += plan.pv[u].q[k];
    }
    for l in &input.loads {
        inj.p[l.bus] -= l.p[k];
        inj.q[l.bus] -= l.p[k] * l.tan_phi;
    }
    for (u, f) in input.flex.iter().enumerate() {
        let d = plan.flex[u].f[k] * f.shift[k];
        inj.p[f.bus] -= d;
        inj.q[f.bus] -= d * f.tan_phi;
    }
    for (u, b) in input.bess.iter().enumerate() {
        inj.p[b.bus] += plan.bess[u].dis[k] - plan.bess[u].ch[k];
        inj.q[b.bus] += plan.bess[u].q[k];
    }
    inj
}

/// Islanded injections of copy `c` at islanded step `h` (island bus indexing).
pub fn island_injections(input: &HorizonInput, plan: &DispatchPlan, c: usize, h: usize) -> InjectionProfile {
    let grid = input.island_grid.as_ref().expect("islanded network");
    let isl = &plan.islands[c];
    let d = isl.tau + h;
    let mut inj = InjectionProfile::zeros(grid.n_buses());
    for (u, unit) in input.pv.iter().enumerate() {
        if let Some(b) = unit.bus_isl {
            inj.p[b] += isl.pv_p[u][h];
            inj.q[b] += isl.pv_q[u][h];
        }
    }
    for (u, l) in input.loads.iter().enumerate() {
        if let Some(b) = l.bus_isl {
            let p = isl.alpha[u][h] * l.p[d];
            inj.p[b] -= p;
            inj.q[b] -= p * l.tan_phi;
        }
    }
    for (u, b) in input.bess.iter().enumerate() {
        if let Some(bus) = b.bus_isl {
            inj.p[bus] += isl.dis[u][h] - isl.ch[u][h];
            inj.q[bus] += isl.bq[u][h];
        }
    }
    inj
}

/// Full AC power flow at every grid-connected and islanded period of `plan`.
pub fn ac_profiles(input: &HorizonInput, plan: &DispatchPlan) -> Result<VBar> {
    let pf = PfSettings::default();
    let exec = input.settings.exec;
    let grid = exec.map_range(plan.horizon(), |k| {
        solve_bfs(&input.grid, &grid_injections(input, plan, k, None), plan.tap[k], &pf).map(|s| s.voltages)
    });
    let grid = grid.into_iter().collect::<Result<Vec<_>>>()?;
    let h_len = input.island_steps();
    let s = &input.settings;
    let (islands, island_full) = match &input.island_grid {
        Some(ig) if !plan.islands.is_empty() => {
            let flat = exec.map_range(plan.islands.len() * h_len, |i| {
                let (c, h) = (i / h_len, i % h_len);
                solve_bfs(ig, &island_injections(input, plan, c, h), 0.0, &pf)
                    .map(|f| (violates_limits(ig, &f, s.v_min, s.v_max), f.voltages))
            });
            let flat = flat.into_iter().collect::<Result<Vec<_>>>()?;
            (
                flat.chunks(h_len).map(|c| c.iter().map(|x| x.1.clone()).collect()).collect(),
                flat.chunks(h_len).map(|c| c.iter().map(|x| x.0).collect()).collect(),
            )
        }
        _ => (Vec::new(), Vec::new()),
    };
    Ok(VBar {
        grid,
        islands,
        island_full,
    })
}

/// Whether an AC solution breaks a raw voltage or current limit.
fn violates_limits(grid: &crate::grid::GridTopology, f: &FlowState, v_min: f64, v_max: f64) -> bool {
    const TOL: f64 = 1e-6;
    f.voltages.v.iter().any(|v| v.norm() > v_max + TOL || v.norm() < v_min - TOL)
        || grid.branches().iter().zip(&f.i_br).any(|(b, i)| i.norm() > b.ampacity + TOL)
}

/// Carry explicit-limit flags forward and add the steps that violated a
/// limit in `next`. Returns the number of newly promoted steps.
fn merge_island_flags(prev: &VBar, next: &mut VBar) -> usize {
    let mut promoted = 0;
    for (c, row) in next.island_full.iter_mut().enumerate() {
        for (h, flag) in row.iter_mut().enumerate() {
            let before = prev.island_full.get(c).and_then(|r| r.get(h)).copied().unwrap_or(false);
            if *flag && !before {
                promoted += 1;
            }
            *flag |= before;
        }
    }
    promoted
}

#[derive(Debug, Clone)]
pub struct InnerOutcome {
    pub plan: DispatchPlan,
    /// AC voltages at the final plan; also the next linearization point.
    pub vbar: VBar,
    pub iterations: usize,
    /// Max voltage change between successive linearization points.
    pub deltas: Vec<f64>,
}

/// Where a repeated inner loop picks up: the previous linearization point
/// and the plan the proximal pull starts from.
#[derive(Debug, Clone)]
pub struct WarmStart {
    pub vbar: VBar,
    pub plan: DispatchPlan,
}

impl From<&InnerOutcome> for WarmStart {
    fn from(o: &InnerOutcome) -> Self {
        WarmStart {
            vbar: o.vbar.clone(),
            plan: o.plan.clone(),
        }
    }
}

/// Alternate OPF solves and full power flows until the linearization point
/// stops moving. Taps are then rounded and the loop re-run with taps fixed.
pub fn inner_feasibility_loop(
    input: &HorizonInput,
    margins: &UncertaintyMargins,
    solver: &dyn ConicSolver,
    start: Option<WarmStart>,
) -> Result<InnerOutcome> {
    let mut out = inner_loop(input, margins, solver, start)?;
    let oltc = input.grid.oltc();
    if input.settings.round_taps && input.tap_fixed.is_none() && oltc.tap_min < oltc.tap_max {
        let rounded: Vec<f64> = out.plan.tap.iter().map(|t| t.round()).collect();
        let mut fixed = input.clone();
        fixed.tap_fixed = Some(rounded);
        let again = inner_loop(&fixed, margins, solver, Some(WarmStart::from(&out)))?;
        let mut deltas = out.deltas;
        deltas.extend(again.deltas);
        out = InnerOutcome {
            iterations: out.iterations + again.iterations,
            plan: again.plan,
            vbar: again.vbar,
            deltas,
        };
        out.plan.stats.inner_iterations = out.iterations;
    }
    Ok(out)
}

/// Inner iterations before the proximal pull switches on.
const PLAIN_ITERATIONS: usize = 2;
/// Initial proximal weight, € per per-unit and hour; doubles every iteration.
const PROXIMAL_START: f64 = 0.05;

fn proximal_weight(it: usize) -> f64 {
    if it > PLAIN_ITERATIONS {
        PROXIMAL_START * 2f64.powi((it - PLAIN_ITERATIONS - 1) as i32)
    } else {
        0.0
    }
}

fn inner_loop(
    input: &HorizonInput,
    margins: &UncertaintyMargins,
    solver: &dyn ConicSolver,
    start: Option<WarmStart>,
) -> Result<InnerOutcome> {
    // A warm start already sits near a fixed point, so the pull is on from
    // the first iteration.
    let (mut vbar, mut previous, skip) = match start {
        Some(w) => (w.vbar, Some(w.plan), PLAIN_ITERATIONS),
        None => (input.flat_vbar(), None, 0),
    };
    let mut deltas = Vec::new();
    for it in 1..=input.settings.max_inner.max(1) {
        let mut prog = build_program(input, &vbar, margins)?;
        let w = proximal_weight(it + skip);
        if let (Some(prev), true) = (&previous, w > 0.0) {
            add_proximal_terms(&mut prog, prev, w);
        }
        let mut plan = solve_horizon(&prog, input, solver)?;
        let mut ac = ac_profiles(input, &plan)?;
        let promoted = merge_island_flags(&vbar, &mut ac);
        let d = ac.max_abs_diff(&vbar);
        deltas.push(d);
        if log::log_enabled!(log::Level::Debug) {
            let (_, c, k, bus) = ac.worst_diff(&vbar);
            log::debug!(
                "inner iteration {it}: max |dV| = {d:.3e} (copy {c:?}, step {k}, bus {bus}), islanded steps promoted {promoted}"
            );
        }
        vbar = ac;
        if d < input.settings.inner_tolerance && promoted == 0 {
            plan.stats.inner_iterations = it;
            plan.stats.proximal_weight = w;
            return Ok(InnerOutcome {
                plan,
                vbar,
                iterations: it,
                deltas,
            });
        }
        previous = Some(plan);
    }
    let n = deltas.len();
    let last: Vec<String> = deltas[n.saturating_sub(2)..].iter().map(|d| format!("{d:.3e}")).collect();
    Err(Error::NonConvergence(format!(
        "inner OPF/power-flow loop did not settle in {n} iterations (last voltage changes {})",
        last.join(", ")
    )))
}

/// Result of the islanded subproblem solved on its own.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IslandOutcome {
    pub schedule: IslandSchedule,
    /// Load-weighted served fraction per islanded step.
    pub served: Vec<f64>,
    pub min_alpha: f64,
    pub costs: CostBreakdown,
    pub iterations: usize,
}

/// Disconnect at `t_mpc` with the storage energy of `input` and serve as
/// much load as possible for the islanded window. Iterates linearization
/// and power flow like the grid-connected inner loop.
pub fn solve_islanding(input: &HorizonInput, solver: &dyn ConicSolver) -> Result<IslandOutcome> {
    let grid = input
        .island_grid
        .as_ref()
        .ok_or_else(|| Error::Input("islanded network missing".into()))?;
    let mut single = input.clone();
    single.cfg.horizon = 1;
    single.settings.islanding = true;
    let h_len = single.island_steps();
    let pf = PfSettings::default();
    let mut vbar = vec![VoltageProfile::flat(grid.n_buses()); h_len];
    let mut full = vec![false; h_len];
    let (v_min, v_max) = (single.settings.v_min, single.settings.v_max);
    let mut previous: Option<DispatchPlan> = None;
    for it in 1..=single.settings.max_inner.max(1) {
        let mut prog = build_island_program(&single, &vbar, &full)?;
        if let (Some(prev), true) = (&previous, it > PLAIN_ITERATIONS) {
            add_proximal_terms(&mut prog, prev, proximal_weight(it));
        }
        let plan = solve_horizon(&prog, &single, solver)?;
        let ac = single.settings.exec.map_range(h_len, |h| {
            solve_bfs(grid, &island_injections(&single, &plan, 0, h), 0.0, &pf)
                .map(|f| (violates_limits(grid, &f, v_min, v_max), f.voltages))
        });
        let ac = ac.into_iter().collect::<Result<Vec<_>>>()?;
        let mut promoted = 0;
        for (flag, (bad, _)) in full.iter_mut().zip(&ac) {
            if *bad && !*flag {
                *flag = true;
                promoted += 1;
            }
        }
        let ac: Vec<VoltageProfile> = ac.into_iter().map(|x| x.1).collect();
        let d = ac
            .iter()
            .zip(&vbar)
            .map(|(a, b)| a.max_abs_diff(b))
            .fold(0.0, f64::max);
        vbar = ac;
        if d < single.settings.inner_tolerance && promoted == 0 {
            let schedule = plan.islands.into_iter().next().expect("one islanded copy");
            return Ok(IslandOutcome {
                served: schedule.served_fraction(&single),
                min_alpha: schedule.min_alpha(),
                schedule,
                costs: plan.costs,
                iterations: it,
            });
        }
        previous = Some(plan);
    }
    Err(Error::NonConvergence("islanded OPF/power-flow loop did not settle".into()))
}
