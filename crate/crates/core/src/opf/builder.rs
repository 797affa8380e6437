//! Assembly of the convex program for one horizon.
//!
//! Everything is per-unit: powers in pu, energies in pu·h. Branch currents
//! and non-root voltages are explicit variables tied together by KCL/KVL
//! rows, which is the sparse form of `I_br = BIBC·I` and `V = V_root +
//! BCBV·I_br`.

use num_complex::Complex64;

use super::input::{HorizonInput, ProductKind, VBar};
use crate::error::{Error, Result};
use crate::grid::GridTopology;
use crate::powerflow::{linearized_network_coefficients, VoltageProfile};
use crate::solver::{Family, LinExpr, Model, Var};
use crate::uncertainty::UncertaintyMargins;

/// Network variables of one period (grid-connected or islanded).
#[derive(Debug, Clone)]
pub struct NetworkVars {
    /// Per-branch (re, im) current.
    pub ibr: Vec<(Var, Var)>,
    /// Per-bus (re, im) voltage; the root entry is an expression.
    pub v: Vec<(LinExpr, LinExpr)>,
    pub p_inj: Vec<LinExpr>,
    pub q_inj: Vec<LinExpr>,
}

#[derive(Debug, Clone)]
pub struct PeriodVars {
    pub pv_p: Vec<Var>,
    pub pv_q: Vec<Var>,
    pub ch: Vec<Var>,
    pub dis: Vec<Var>,
    pub bq: Vec<Var>,
    pub flex: Vec<Var>,
    pub buy: Var,
    pub sell: Var,
    pub tap: Var,
    /// Reactive power drawn from the upstream grid.
    pub q_slack: LinExpr,
    pub net: NetworkVars,
}

#[derive(Debug, Clone)]
pub struct IslandPeriodVars {
    pub pv_p: Vec<Option<Var>>,
    pub pv_q: Vec<Option<Var>>,
    pub ch: Vec<Option<Var>>,
    pub dis: Vec<Option<Var>>,
    pub bq: Vec<Option<Var>>,
    /// Served fraction per load (`None` if the load is outside the island).
    pub alpha: Vec<Option<Var>>,
    /// Branch and voltage variables exist only where the islanded limits are
    /// enforced explicitly; elsewhere `ibr` and `v` are empty.
    pub net: NetworkVars,
}

#[derive(Debug, Clone)]
pub struct IslandVars {
    /// Offset of the islanding instant within the horizon.
    pub tau: usize,
    pub periods: Vec<IslandPeriodVars>,
    /// `[bess][0..=H]`, entry 0 is the grid-connected energy at `tau`.
    pub energy: Vec<Vec<LinExpr>>,
}

#[derive(Debug, Clone, Copy)]
pub struct BidVar {
    pub key: usize,
    pub var: Var,
}

/// Cost terms in €, each an affine expression of the decision variables.
#[derive(Debug, Clone, Default)]
pub struct CostExprs {
    pub curt_g: LinExpr,
    pub curt_g_isl: LinExpr,
    pub curt_l_isl: LinExpr,
    pub exchange: LinExpr,
    pub revenue: LinExpr,
}

impl CostExprs {
    pub fn total(&self) -> LinExpr {
        self.curt_g.clone() + self.curt_g_isl.clone() + self.curt_l_isl.clone() + self.exchange.clone()
            - self.revenue.clone()
    }
}

#[derive(Debug, Clone)]
pub struct HorizonProgram {
    pub model: Model,
    pub periods: Vec<PeriodVars>,
    /// `[bess][0..=T]`, entry 0 is the fixed initial energy.
    pub energy: Vec<Vec<LinExpr>>,
    pub bids: Vec<BidVar>,
    /// Index into `bids` for every period with an active product.
    pub period_bid: Vec<Option<usize>>,
    pub islands: Vec<IslandVars>,
    /// Charge/discharge pairs subject to complementarity.
    pub pairs: Vec<(Var, Var)>,
    pub costs: CostExprs,
}

impl HorizonProgram {
    pub fn bid_expr(&self, k: usize) -> Option<LinExpr> {
        self.period_bid[k].map(|i| LinExpr::from(self.bids[i].var))
    }
}

/// Assemble the full program for `input` linearized around `vbar`.
pub fn build_program(input: &HorizonInput, vbar: &VBar, margins: &UncertaintyMargins) -> Result<HorizonProgram> {
    input.validate()?;
    let t_len = input.horizon();
    if vbar.grid.len() != t_len {
        return Err(Error::Input("voltage estimate does not match the horizon".into()));
    }
    margins.check_shape(t_len, input.grid.n_buses(), input.grid.n_branches())?;

    let mut model = Model::new();
    let mut periods = Vec::with_capacity(t_len);
    for k in 0..t_len {
        periods.push(grid_period_vars(&mut model, input, k));
    }
    let energy = input
        .bess
        .iter()
        .map(|b| {
            let mut e = vec![LinExpr::constant(b.e0)];
            for _ in 0..t_len {
                e.push(model.add_var(b.e_min, b.e_max).into());
            }
            e
        })
        .collect();

    let mut bids: Vec<BidVar> = Vec::new();
    let mut period_bid = vec![None; t_len];
    let cap = input.grid.base().kw_to_pu(input.product.bid_cap_kw);
    for (k, slot) in period_bid.iter_mut().enumerate() {
        let Some(key) = input.product.block_key(input.cfg.t_mpc + k) else {
            continue;
        };
        let idx = match bids.iter().position(|b| b.key == key) {
            Some(i) => i,
            None => {
                let var = match input.committed_bids.iter().find(|(k2, _)| *k2 == key) {
                    Some(&(_, kw)) => {
                        let v = model.add_var(0.0, cap.max(0.0));
                        model.fix(v, input.grid.base().kw_to_pu(kw));
                        v
                    }
                    None => model.add_var(0.0, cap),
                };
                bids.push(BidVar { key, var });
                bids.len() - 1
            }
        };
        *slot = Some(idx);
    }

    let mut prog = HorizonProgram {
        model,
        periods,
        energy,
        bids,
        period_bid,
        islands: Vec::new(),
        pairs: Vec::new(),
        costs: CostExprs::default(),
    };

    for k in 0..t_len {
        add_power_balance(&mut prog, input, k);
        add_network_constraints(&mut prog, input, k, &vbar.grid[k], margins)?;
    }
    add_der_constraints(&mut prog, input);
    match input.product.kind {
        ProductKind::None => {}
        ProductKind::Pfc => add_pfc_constraints(&mut prog, input),
        ProductKind::Sfc => add_sfc_constraints(&mut prog, input)?,
        ProductKind::TfcUp => add_tfc_constraints(&mut prog, input, Direction::Up),
        ProductKind::TfcDown => add_tfc_constraints(&mut prog, input, Direction::Down),
    }
    if let Some(cap) = input.substation_cap {
        for k in 0..t_len {
            let pv = &prog.periods[k];
            let p = LinExpr::from(pv.buy) - LinExpr::from(pv.sell);
            let q = pv.q_slack.clone();
            prog.model.norm_le(Family::Substation, vec![p, q], LinExpr::constant(cap));
        }
    }
    let starts = input.island_starts();
    if !starts.is_empty() {
        if vbar.islands.len() != starts.len() {
            return Err(Error::Input("islanded voltage estimates do not match the islanding instants".into()));
        }
        for (c, &tau) in starts.iter().enumerate() {
            let full = vbar.island_full.get(c).map_or(&[][..], |f| &f[..]);
            add_islanding_constraints(&mut prog, input, tau, &vbar.islands[c], full)?;
        }
    }
    build_objective(&mut prog, input);
    Ok(prog)
}

/// The islanded subproblem alone: one copy starting at `t_mpc` from the
/// initial storage energy, with no grid-connected periods.
pub fn build_island_program(input: &HorizonInput, v_bar: &[VoltageProfile], full: &[bool]) -> Result<HorizonProgram> {
    input.validate()?;
    let mut prog = HorizonProgram {
        model: Model::new(),
        periods: Vec::new(),
        energy: input.bess.iter().map(|b| vec![LinExpr::constant(b.e0)]).collect(),
        bids: Vec::new(),
        period_bid: Vec::new(),
        islands: Vec::new(),
        pairs: Vec::new(),
        costs: CostExprs::default(),
    };
    add_islanding_constraints(&mut prog, input, 0, v_bar, full)?;
    build_objective(&mut prog, input);
    Ok(prog)
}

fn grid_period_vars(m: &mut Model, input: &HorizonInput, k: usize) -> PeriodVars {
    let grid = &input.grid;
    let (tap_lo, tap_hi) = match &input.tap_fixed {
        Some(t) => (t[k], t[k]),
        None => (grid.oltc().tap_min as f64, grid.oltc().tap_max as f64),
    };
    let pv_p = input.pv.iter().map(|p| m.add_var(0.0, p.avail[k])).collect();
    let pv_q = input
        .pv
        .iter()
        .map(|p| m.add_var(-p.tan_phi * p.avail[k], p.tan_phi * p.avail[k]))
        .collect();
    let ch = input.bess.iter().map(|b| m.add_var(0.0, b.p_max)).collect();
    let dis = input.bess.iter().map(|b| m.add_var(0.0, b.p_max)).collect();
    let bq = input.bess.iter().map(|b| m.add_var(-b.p_max * b.tan_phi, b.p_max * b.tan_phi)).collect();
    let flex = input.flex.iter().map(|_| m.add_var(-1.0, 1.0)).collect();
    let buy = m.add_nonneg();
    let sell = m.add_nonneg();
    let tap = m.add_var(tap_lo, tap_hi);
    let net = network_vars(m, grid, Some(tap));
    PeriodVars {
        pv_p,
        pv_q,
        ch,
        dis,
        bq,
        flex,
        buy,
        sell,
        tap,
        q_slack: LinExpr::new(),
        net,
    }
}

/// Branch-current and voltage variables. With `tap` the root voltage is
/// `V_slack − ΔV_tap·ρ`; without, it is the fixed slack voltage.
fn network_vars(m: &mut Model, grid: &GridTopology, tap: Option<Var>) -> NetworkVars {
    let n = grid.n_buses();
    let ibr = (0..grid.n_branches()).map(|_| (m.add_free(), m.add_free())).collect();
    let vs = grid.oltc().slack_voltage;
    let mut v = Vec::with_capacity(n);
    let mut root_re = LinExpr::constant(vs.re);
    if let Some(t) = tap {
        root_re.add_term(t, -grid.oltc().tap_step);
    }
    v.push((root_re, LinExpr::constant(vs.im)));
    for _ in 1..n {
        v.push((m.add_free().into(), m.add_free().into()));
    }
    NetworkVars {
        ibr,
        v,
        p_inj: vec![LinExpr::new(); n],
        q_inj: vec![LinExpr::new(); n],
    }
}

/// Nodal injections of period `k`: generation minus demand minus net
/// charging; the substation injects `p_buy − p_sell`.
pub fn add_power_balance(prog: &mut HorizonProgram, input: &HorizonInput, k: usize) {
    let pv = &mut prog.periods[k];
    let n = input.grid.n_buses();
    let mut p = vec![LinExpr::new(); n];
    let mut q = vec![LinExpr::new(); n];
    for (u, unit) in input.pv.iter().enumerate() {
        p[unit.bus].add_term(pv.pv_p[u], 1.0);
        q[unit.bus].add_term(pv.pv_q[u], 1.0);
    }
    for l in &input.loads {
        p[l.bus].constant -= l.p[k];
        q[l.bus].constant -= l.p[k] * l.tan_phi;
    }
    for (u, f) in input.flex.iter().enumerate() {
        p[f.bus].add_term(pv.flex[u], -f.shift[k]);
        q[f.bus].add_term(pv.flex[u], -f.shift[k] * f.tan_phi);
    }
    for (u, b) in input.bess.iter().enumerate() {
        p[b.bus].add_term(pv.ch[u], -1.0).add_term(pv.dis[u], 1.0);
        q[b.bus].add_term(pv.bq[u], 1.0);
    }
    p[0] = LinExpr::from(pv.buy) - LinExpr::from(pv.sell);
    pv.net.p_inj = p;
    pv.net.q_inj = q;
}

fn children(grid: &GridTopology) -> Vec<Vec<usize>> {
    let mut ch = vec![Vec::new(); grid.n_buses()];
    for (i, b) in grid.branches().iter().enumerate() {
        ch[b.from].push(i);
    }
    ch
}

/// KCL and KVL rows for one period with injection currents linearized
/// around `v_bar`. Returns `Σ I` leaving the root along its branches.
fn add_flow_equations(
    m: &mut Model,
    grid: &GridTopology,
    net: &NetworkVars,
    v_bar: &VoltageProfile,
) -> Result<(LinExpr, LinExpr)> {
    let lin = linearized_network_coefficients(grid, v_bar)?;
    let kids = children(grid);
    for (i, br) in grid.branches().iter().enumerate() {
        let c = br.to;
        let (a, b) = (lin.coef_p[c], lin.coef_q[c]);
        // I_c = a·P_c + b·Q_c, complex coefficients.
        let mut re = LinExpr::new();
        re.add_scaled(&net.p_inj[c], a.re).add_scaled(&net.q_inj[c], b.re);
        let mut im = LinExpr::new();
        im.add_scaled(&net.p_inj[c], a.im).add_scaled(&net.q_inj[c], b.im);
        for &d in &kids[c] {
            re.add_term(net.ibr[d].0, 1.0);
            im.add_term(net.ibr[d].1, 1.0);
        }
        m.eq(Family::Network, net.ibr[i].0.into(), re);
        m.eq(Family::Network, net.ibr[i].1.into(), im);

        // V_c = V_parent + z·I_br
        let z: Complex64 = br.impedance;
        let (ir, ii) = net.ibr[i];
        let mut vre = net.v[br.from].0.clone();
        vre.add_term(ir, z.re).add_term(ii, -z.im);
        let mut vim = net.v[br.from].1.clone();
        vim.add_term(ir, z.im).add_term(ii, z.re);
        m.eq(Family::Network, net.v[c].0.clone(), vre);
        m.eq(Family::Network, net.v[c].1.clone(), vim);
    }
    let mut sre = LinExpr::new();
    let mut sim = LinExpr::new();
    for &d in &kids[0] {
        sre.add_term(net.ibr[d].0, 1.0);
        sim.add_term(net.ibr[d].1, 1.0);
    }
    Ok((sre, sim))
}

/// `Σ I_k` over non-root buses with linearized injection currents.
fn injection_current_sum(
    grid: &GridTopology,
    net: &NetworkVars,
    v_bar: &VoltageProfile,
) -> Result<(LinExpr, LinExpr)> {
    let lin = linearized_network_coefficients(grid, v_bar)?;
    let mut re = LinExpr::new();
    let mut im = LinExpr::new();
    for c in 1..grid.n_buses() {
        let (a, b) = (lin.coef_p[c], lin.coef_q[c]);
        re.add_scaled(&net.p_inj[c], a.re).add_scaled(&net.q_inj[c], b.re);
        im.add_scaled(&net.p_inj[c], a.im).add_scaled(&net.q_inj[c], b.im);
    }
    Ok((re, im))
}

fn limit_rows(
    m: &mut Model,
    grid: &GridTopology,
    net: &NetworkVars,
    v_min: f64,
    v_max: f64,
    margin: Option<(&[f64], &[f64], &[f64])>,
    fam: Option<Family>,
) {
    for j in 0..grid.n_buses() {
        let (up, lo) = margin.map_or((0.0, 0.0), |(u, l, _)| (u[j], l[j]));
        let (re, im) = &net.v[j];
        m.norm_le(
            fam.unwrap_or(Family::Voltage),
            vec![re.clone(), im.clone()],
            LinExpr::constant(v_max - up),
        );
        m.ge(fam.unwrap_or(Family::Voltage), re.clone(), LinExpr::constant(v_min + lo));
    }
    for (i, br) in grid.branches().iter().enumerate() {
        let om = margin.map_or(0.0, |(_, _, c)| c[i]);
        let (ir, ii) = net.ibr[i];
        m.norm_le(
            fam.unwrap_or(Family::Current),
            vec![ir.into(), ii.into()],
            LinExpr::constant(br.ampacity - om),
        );
    }
}

/// Linearized flow, slack exchange and tightened voltage/current limits for
/// period `k`.
pub fn add_network_constraints(
    prog: &mut HorizonProgram,
    input: &HorizonInput,
    k: usize,
    v_bar: &VoltageProfile,
    margins: &UncertaintyMargins,
) -> Result<()> {
    let grid = &input.grid;
    let s = &input.settings;
    margins.check_band(k, s.v_min, s.v_max, grid)?;
    let pv = &mut prog.periods[k];
    let (sre, sim) = add_flow_equations(&mut prog.model, grid, &pv.net, v_bar)?;
    // S_root = V̄_root·conj(−ΣI), with the root voltage estimate frozen.
    let (a, b) = (v_bar.v[0].re, v_bar.v[0].im);
    let mut p_slack = LinExpr::new();
    p_slack.add_scaled(&sre, -a).add_scaled(&sim, -b);
    let mut q_slack = LinExpr::new();
    q_slack.add_scaled(&sre, -b).add_scaled(&sim, a);
    prog.model.eq(Family::Balance, pv.net.p_inj[0].clone(), p_slack);
    pv.q_slack = q_slack;
    limit_rows(
        &mut prog.model,
        grid,
        &pv.net,
        s.v_min,
        s.v_max,
        Some((&margins.v_upper[k], &margins.v_lower[k], &margins.i_branch[k])),
        None,
    );
    Ok(())
}

/// PV, flexible-load and storage constraints over the whole horizon.
pub fn add_der_constraints(prog: &mut HorizonProgram, input: &HorizonInput) {
    let t_len = input.horizon();
    let dt = input.cfg.dt;
    for (u, f) in input.flex.iter().enumerate() {
        let mut sum = LinExpr::constant(f.history_sum);
        for k in 0..t_len {
            sum.add_term(prog.periods[k].flex[u], 1.0);
        }
        prog.model.eq(Family::Device, sum, LinExpr::new());
    }
    for (u, b) in input.bess.iter().enumerate() {
        for k in 0..t_len {
            let pv = &prog.periods[k];
            let mut next = prog.energy[u][k].clone();
            next.add_term(pv.ch[u], b.eta * dt).add_term(pv.dis[u], -dt / b.eta);
            prog.model.eq(Family::Device, prog.energy[u][k + 1].clone(), next);
            // |q| ≤ (p_ch + p_dis)·tanφ, exact whenever only one is nonzero.
            let mut cap = LinExpr::new();
            cap.add_term(pv.ch[u], b.tan_phi).add_term(pv.dis[u], b.tan_phi);
            prog.model.le(Family::Device, pv.bq[u].into(), cap.clone());
            prog.model.ge(Family::Device, pv.bq[u].into(), -cap);
            prog.pairs.push((pv.ch[u], pv.dis[u]));
        }
    }
}

/// Aggregated storage quantities for the reserve constraints.
struct Aggregate {
    eta: f64,
    e_min: f64,
    e_max: f64,
    p_max: f64,
}

fn aggregate(input: &HorizonInput) -> Aggregate {
    Aggregate {
        eta: input.bess.iter().map(|b| b.eta).fold(1.0, f64::min),
        e_min: input.bess.iter().map(|b| b.e_min).sum(),
        e_max: input.bess.iter().map(|b| b.e_max).sum(),
        p_max: input.bess.iter().map(|b| b.p_max).sum(),
    }
}

fn total_energy(prog: &HorizonProgram, s: usize) -> LinExpr {
    let mut e = LinExpr::new();
    for traj in &prog.energy {
        e += traj[s].clone();
    }
    e
}

/// `Σ(p_max − p_dis + p_ch)` (up) or `Σ(p_max − p_ch + p_dis)` (down).
fn bess_power_headroom(prog: &HorizonProgram, k: usize, agg: &Aggregate, up: bool) -> LinExpr {
    let pv = &prog.periods[k];
    let mut e = LinExpr::constant(agg.p_max);
    let s = if up { 1.0 } else { -1.0 };
    for u in 0..pv.ch.len() {
        e.add_term(pv.ch[u], s).add_term(pv.dis[u], -s);
    }
    e
}

fn pv_up_headroom(prog: &HorizonProgram, input: &HorizonInput, k: usize) -> LinExpr {
    let mut e = LinExpr::new();
    for (u, p) in input.pv.iter().enumerate() {
        e.constant += p.avail[k];
        e.add_term(prog.periods[k].pv_p[u], -1.0);
    }
    e
}

fn pv_output(prog: &HorizonProgram, k: usize) -> LinExpr {
    let mut e = LinExpr::new();
    for &v in &prog.periods[k].pv_p {
        e.add_term(v, 1.0);
    }
    e
}

/// `Σ(f ± 1)·P_shift`: `+1` for up (load can drop to `f = −1`), `−1` for down.
fn flex_headroom(prog: &HorizonProgram, input: &HorizonInput, k: usize, up: bool) -> LinExpr {
    let mut e = LinExpr::new();
    for (u, f) in input.flex.iter().enumerate() {
        let s = if up { 1.0 } else { -1.0 };
        e.add_term(prog.periods[k].flex[u], s * f.shift[k]);
        e.constant += f.shift[k];
    }
    e
}

/// Primary control: symmetric storage power headroom and 15-minute energy
/// headroom in both directions.
pub fn add_pfc_constraints(prog: &mut HorizonProgram, input: &HorizonInput) {
    let agg = aggregate(input);
    let dt1 = input.product.dt1;
    for k in 0..input.horizon() {
        let Some(bid) = prog.bid_expr(k) else { continue };
        for up in [true, false] {
            let h = bess_power_headroom(prog, k, &agg, up);
            prog.model.ge(Family::Reserve, h, bid.clone());
        }
        // Both ends of the period; the start state of the horizon is data.
        let states: &[usize] = if k == 0 { &[1] } else { &[k, k + 1] };
        for &s in states {
            let e = total_energy(prog, s);
            prog.model.ge(Family::Reserve, e.clone() - LinExpr::constant(agg.e_min), bid.clone() * dt1);
            prog.model.ge(Family::Reserve, LinExpr::constant(agg.e_max) - e, bid.clone() * dt1);
        }
    }
}

/// Auxiliary `m` with `0 ≤ m ≤ a` and `m ≤ b`: the convex stand-in for
/// `min{a, b}` where larger `m` only helps feasibility.
fn min_aux(m: &mut Model, a: LinExpr, b: LinExpr) -> Var {
    let v = m.add_nonneg();
    m.le(Family::Reserve, v.into(), a);
    m.le(Family::Reserve, v.into(), b);
    v
}

/// Secondary control: symmetric power headroom from storage and PV, and
/// worst-case 4-hour shadow energy trajectories for calls starting at every
/// period with an active bid.
pub fn add_sfc_constraints(prog: &mut HorizonProgram, input: &HorizonInput) -> Result<()> {
    let prod = &input.product;
    if prod.sfc_worst_up.len() != 4 || prod.sfc_worst_down.len() != 4 {
        return Err(Error::Input("SFC product needs worst-case profiles for 4 hours".into()));
    }
    let agg = aggregate(input);
    let eta = agg.eta;
    let t_len = input.horizon();
    for k in 0..t_len {
        let Some(bid) = prog.bid_expr(k) else { continue };
        let up = bess_power_headroom(prog, k, &agg, true) + pv_up_headroom(prog, input, k);
        prog.model.ge(Family::Reserve, up, bid.clone());
        let down = bess_power_headroom(prog, k, &agg, false) + pv_output(prog, k);
        prog.model.ge(Family::Reserve, down, bid.clone());
    }
    for s in 0..t_len {
        let Some(bid) = prog.bid_expr(s) else { continue };
        let mut drain_up = LinExpr::new();
        let mut fill_down = LinExpr::new();
        for th in 1..=4usize {
            if s + th > t_len {
                break;
            }
            let p = s + th - 1;
            let d_up = prod.sfc_worst_up[th - 1];
            let d_dn = prod.sfc_worst_down[th - 1];
            let head = pv_up_headroom(prog, input, p);
            let out = pv_output(prog, p);
            let m_up = min_aux(&mut prog.model, bid.clone() * (0.5 / eta), head);
            let m_dn = min_aux(&mut prog.model, bid.clone() * (0.5 * eta), out);
            drain_up.add_scaled(&bid, d_up / eta).add_term(m_up, -d_up);
            fill_down.add_scaled(&bid, d_dn * eta).add_term(m_dn, -d_dn);
            let e = total_energy(prog, s + th);
            let e_up = e.clone() - drain_up.clone();
            let e_dn = e + fill_down.clone();
            shadow_bounds(&mut prog.model, e_up, &agg);
            shadow_bounds(&mut prog.model, e_dn, &agg);
        }
    }
    Ok(())
}

fn shadow_bounds(m: &mut Model, e: LinExpr, agg: &Aggregate) {
    m.ge(Family::Reserve, e.clone(), LinExpr::constant(agg.e_min));
    m.le(Family::Reserve, e, LinExpr::constant(agg.e_max));
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    Up,
    Down,
}

/// Tertiary control in one direction: power headroom including flexible
/// loads, and shadow energy over up to four one-hour call steps with at most
/// 80% of each step covered by PV and flexible loads. Calls start at every
/// period with an active bid and stay within the bid's block.
pub fn add_tfc_constraints(prog: &mut HorizonProgram, input: &HorizonInput, dir: Direction) {
    let agg = aggregate(input);
    let eta = agg.eta;
    let up = dir == Direction::Up;
    let t_len = input.horizon();
    let dt3 = 1.0;
    let other = |prog: &HorizonProgram, k: usize| {
        if up {
            pv_up_headroom(prog, input, k) + flex_headroom(prog, input, k, true)
        } else {
            pv_output(prog, k) + flex_headroom(prog, input, k, false)
        }
    };
    for k in 0..t_len {
        let Some(bid) = prog.bid_expr(k) else { continue };
        let h = bess_power_headroom(prog, k, &agg, up) + other(prog, k);
        prog.model.ge(Family::Reserve, h, bid);
    }
    for s in 0..t_len {
        let Some(bid_idx) = prog.period_bid[s] else { continue };
        let bid: LinExpr = prog.bids[bid_idx].var.into();
        let mut shift = LinExpr::new();
        for th in 1..=4usize {
            let p = s + th - 1;
            if p >= t_len || prog.period_bid[p] != Some(bid_idx) {
                break;
            }
            if input.product.block == super::input::BlockKind::FourHour
                && input.product.block_key(input.cfg.t_mpc + p) != input.product.block_key(input.cfg.t_mpc + s)
            {
                break;
            }
            let (scale_bid, cap) = if up { (1.0 / eta, 0.8 / eta) } else { (eta, 0.8 * eta) };
            let o = other(prog, p);
            let m = min_aux(&mut prog.model, bid.clone() * cap, o);
            shift.add_scaled(&bid, scale_bid * dt3).add_term(m, -dt3);
            let e = total_energy(prog, s + th);
            let shadow = if up { e - shift.clone() } else { e + shift.clone() };
            shadow_bounds(&mut prog.model, shadow, &agg);
        }
    }
}

/// One islanded copy starting at horizon offset `tau`: duplicated balance,
/// network and device constraints for 24 hours, served fractions for the
/// critical load, full inverter circles, no exchange and no tap. The storage
/// energy at `tau` is the only link to grid-connected operation.
///
/// Under the linearization the forming-bus balance only needs the summed
/// injection currents, so steps not listed in `full` carry no branch or
/// voltage variables; the caller checks their limits on the AC solution and
/// promotes violated steps to `full`.
pub fn add_islanding_constraints(
    prog: &mut HorizonProgram,
    input: &HorizonInput,
    tau: usize,
    v_bar: &[VoltageProfile],
    full: &[bool],
) -> Result<()> {
    let grid = input
        .island_grid
        .as_ref()
        .ok_or_else(|| Error::Input("islanded network missing".into()))?
        .clone();
    let h_len = input.island_steps();
    if v_bar.len() != h_len {
        return Err(Error::Input("islanded voltage estimate has wrong length".into()));
    }
    let need = tau + h_len;
    if input.pv.iter().any(|p| p.avail.len() < need) || input.loads.iter().any(|l| l.p.len() < need) {
        return Err(Error::Input(format!(
            "islanded horizon exceeds available forecast data (needs {need} steps)"
        )));
    }
    let dt = input.cfg.dt;
    let s = input.settings;
    let m = &mut prog.model;
    let mut energy: Vec<Vec<LinExpr>> = prog.energy.iter().map(|e| vec![e[tau].clone()]).collect();
    let mut periods = Vec::with_capacity(h_len);
    for h in 0..h_len {
        let d = tau + h;
        let n = grid.n_buses();
        let explicit = full.get(h).copied().unwrap_or(false);
        let mut p_inj = vec![LinExpr::new(); n];
        let mut q_inj = vec![LinExpr::new(); n];
        let mut pv_p = Vec::new();
        let mut pv_q = Vec::new();
        for unit in &input.pv {
            match unit.bus_isl {
                Some(b) => {
                    let p = m.add_var(0.0, unit.avail[d].min(unit.s_rating));
                    let q = m.add_var(-unit.s_rating, unit.s_rating);
                    if explicit {
                        m.norm_le(Family::Islanding, vec![p.into(), q.into()], LinExpr::constant(unit.s_rating));
                    } else {
                        // Without voltage rows reactive support has no
                        // purpose beyond the forming unit, and a free q
                        // would only chase the linearization's error.
                        m.fix(q, 0.0);
                    }
                    p_inj[b].add_term(p, 1.0);
                    q_inj[b].add_term(q, 1.0);
                    pv_p.push(Some(p));
                    pv_q.push(Some(q));
                }
                None => {
                    pv_p.push(None);
                    pv_q.push(None);
                }
            }
        }
        let mut alpha = Vec::new();
        for l in &input.loads {
            match l.bus_isl {
                Some(b) => {
                    let a = m.add_var(s.alpha_min, 1.0);
                    p_inj[b].add_term(a, -l.p[d]);
                    q_inj[b].add_term(a, -l.p[d] * l.tan_phi);
                    alpha.push(Some(a));
                }
                None => alpha.push(None),
            }
        }
        let (mut ch, mut dis, mut bq) = (Vec::new(), Vec::new(), Vec::new());
        for (u, b) in input.bess.iter().enumerate() {
            match b.bus_isl {
                Some(bus) => {
                    let c = m.add_var(0.0, b.p_max);
                    let di = m.add_var(0.0, b.p_max);
                    let q = m.add_var(-b.p_max, b.p_max);
                    let mut p = LinExpr::new();
                    p.add_term(di, 1.0).add_term(c, -1.0);
                    if explicit || bus == 0 {
                        m.norm_le(Family::Islanding, vec![p.clone(), q.into()], LinExpr::constant(b.p_max));
                    } else {
                        m.fix(q, 0.0);
                    }
                    p_inj[bus] += p;
                    q_inj[bus].add_term(q, 1.0);
                    let mut next = energy[u][h].clone();
                    next.add_term(c, b.eta * dt).add_term(di, -dt / b.eta);
                    let e: LinExpr = m.add_free().into();
                    m.eq(Family::Device, e.clone(), next);
                    m.ge(Family::Islanding, e.clone(), LinExpr::constant(b.e_min));
                    m.le(Family::Islanding, e.clone(), LinExpr::constant(b.e_max));
                    energy[u].push(e);
                    ch.push(Some(c));
                    dis.push(Some(di));
                    bq.push(Some(q));
                }
                None => {
                    // Storage outside the island keeps its energy.
                    let last = energy[u][h].clone();
                    energy[u].push(last);
                    ch.push(None);
                    dis.push(None);
                    bq.push(None);
                }
            }
        }
        let mut net = if explicit {
            network_vars(m, &grid, None)
        } else {
            NetworkVars {
                ibr: Vec::new(),
                v: Vec::new(),
                p_inj: Vec::new(),
                q_inj: Vec::new(),
            }
        };
        net.p_inj = p_inj;
        net.q_inj = q_inj;
        let (sre, sim) = if explicit {
            add_flow_equations(m, &grid, &net, &v_bar[h])?
        } else {
            injection_current_sum(&grid, &net, &v_bar[h])?
        };
        // The forming bus (root, held at 1∠0) balances the island:
        // P_root = −ΣRe I, Q_root = ΣIm I.
        m.eq(Family::Balance, net.p_inj[0].clone(), -sre);
        m.eq(Family::Balance, net.q_inj[0].clone(), sim);
        if explicit {
            limit_rows(m, &grid, &net, s.v_min, s.v_max, None, Some(Family::Islanding));
        }
        periods.push(IslandPeriodVars {
            pv_p,
            pv_q,
            ch,
            dis,
            bq,
            alpha,
            net,
        });
    }
    prog.islands.push(IslandVars { tau, periods, energy });
    Ok(())
}

/// Objective in €: curtailment (grid-connected and `f_isl`-weighted
/// islanded), islanded load shedding, energy exchange, minus reserve revenue.
pub fn build_objective(prog: &mut HorizonProgram, input: &HorizonInput) {
    let pr = &input.prices;
    let dt = input.cfg.dt;
    let scale = input.mw_per_pu * dt;
    let mut c = CostExprs::default();
    for (k, pv) in prog.periods.iter().enumerate() {
        for (u, unit) in input.pv.iter().enumerate() {
            let w = pr.c_curt_g[k] * scale;
            c.curt_g.constant += w * unit.avail[k];
            c.curt_g.add_term(pv.pv_p[u], -w);
        }
        c.exchange.add_term(pv.buy, pr.c_buy[k] * scale);
        c.exchange.add_term(pv.sell, -pr.c_sell[k] * scale);
        if let Some(b) = prog.period_bid[k] {
            c.revenue.add_term(prog.bids[b].var, pr.c_bid[k] * scale);
        }
    }
    for isl in &prog.islands {
        for (h, per) in isl.periods.iter().enumerate() {
            let d = isl.tau + h;
            for (u, unit) in input.pv.iter().enumerate() {
                if let Some(p) = per.pv_p[u] {
                    let w = pr.c_curt_g[d] * pr.f_isl * scale;
                    c.curt_g_isl.constant += w * unit.avail[d];
                    c.curt_g_isl.add_term(p, -w);
                }
            }
            for (u, l) in input.loads.iter().enumerate() {
                if let Some(a) = per.alpha[u] {
                    let w = pr.c_curt_l_isl[d] * l.p[d] * scale;
                    c.curt_l_isl.constant += w;
                    c.curt_l_isl.add_term(a, -w);
                }
            }
        }
    }
    let reg = regularization(prog, input);
    prog.model.set_objective(c.total() + reg);
    prog.costs = c;
}

/// Tie-breaking weights, € per per-unit and hour.
const REG_TAP: f64 = 1e-4;
const REG_FLEX: f64 = 5e-3;
/// Reactive power. Under the single-sweep linearization `Q_k` reaches the
/// slack active power through `sin θ̄_k / |V̄_k|`, a first-order artifact of
/// what is physically a second-order loss effect. Left free, the optimizer
/// swings inverters between their reactive limits to harvest it, which flips
/// the angles and keeps the inner loop from settling. The weight is above
/// that artificial gain at realistic angles and prices.
const REG_Q: f64 = 0.5;

/// Penalty on |tap|, |q| and |f|: these variables are often free to move
/// within a face of optimal solutions, and the voltages they produce keep
/// the linearization point from settling. Not part of the reported costs.
fn regularization(prog: &mut HorizonProgram, input: &HorizonInput) -> LinExpr {
    let mut reg = LinExpr::new();
    let dt = input.cfg.dt;
    let m = &mut prog.model;
    let mut abs = |m: &mut Model, v: Var, w: f64| {
        let (lb, ub) = m.bounds(v);
        if lb == ub {
            reg.constant += w * lb.abs();
            return;
        }
        let t = m.add_nonneg();
        m.ge(Family::Other, t.into(), v.into());
        m.ge(Family::Other, t.into(), -LinExpr::from(v));
        reg.add_term(t, w);
    };
    for pv in &prog.periods {
        abs(m, pv.tap, REG_TAP * dt);
        for &q in pv.pv_q.iter().chain(&pv.bq) {
            abs(m, q, REG_Q * dt);
        }
        for &f in &pv.flex {
            abs(m, f, REG_FLEX * dt);
        }
    }
    for isl in &prog.islands {
        for per in &isl.periods {
            for q in per.pv_q.iter().chain(&per.bq).flatten() {
                abs(m, *q, REG_Q * dt);
            }
        }
    }
    reg
}

/// L1 pull of the setpoints (grid-connected and islanded) toward `anchor`, `weight` € per
/// per-unit and hour. Used by the inner loop once plain iterations start to
/// cycle between near-equivalent vertices.
pub fn add_proximal_terms(prog: &mut HorizonProgram, anchor: &crate::opf::DispatchPlan, weight: f64) {
    let mut obj = prog.model.objective().clone();
    let m = &mut prog.model;
    let mut pull = |m: &mut Model, v: Var, target: f64| {
        let (lb, ub) = m.bounds(v);
        if lb == ub {
            return;
        }
        let t = m.add_nonneg();
        m.ge(Family::Other, LinExpr::from(t), LinExpr::from(v) - LinExpr::constant(target));
        m.ge(Family::Other, LinExpr::from(t), LinExpr::constant(target) - LinExpr::from(v));
        obj.add_term(t, weight);
    };
    for (k, pv) in prog.periods.iter().enumerate() {
        pull(m, pv.tap, anchor.tap[k]);
        for (u, &v) in pv.pv_p.iter().enumerate() {
            pull(m, v, anchor.pv[u].p[k]);
        }
        for (u, &v) in pv.pv_q.iter().enumerate() {
            pull(m, v, anchor.pv[u].q[k]);
        }
        for (u, b) in anchor.bess.iter().enumerate() {
            pull(m, pv.ch[u], b.ch[k]);
            pull(m, pv.dis[u], b.dis[k]);
            pull(m, pv.bq[u], b.q[k]);
        }
        for (u, &v) in pv.flex.iter().enumerate() {
            pull(m, v, anchor.flex[u].f[k]);
        }
    }
    for (isl, sched) in prog.islands.iter().zip(&anchor.islands) {
        for (h, ip) in isl.periods.iter().enumerate() {
            let groups: [(&Vec<Option<Var>>, &Vec<Vec<f64>>); 6] = [
                (&ip.pv_p, &sched.pv_p),
                (&ip.pv_q, &sched.pv_q),
                (&ip.ch, &sched.ch),
                (&ip.dis, &sched.dis),
                (&ip.bq, &sched.bq),
                (&ip.alpha, &sched.alpha),
            ];
            for (vars, vals) in groups {
                for (v, row) in vars.iter().zip(vals) {
                    if let (Some(v), Some(&x)) = (v, row.get(h)) {
                        if x.is_finite() {
                            pull(m, *v, x);
                        }
                    }
                }
            }
        }
    }
    m.set_objective(obj);
}
