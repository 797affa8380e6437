//! Small conic modeling layer and solver backends.
//!
//! A [`Model`] holds affine expressions grouped into cone blocks:
//! `expr = 0`, `expr ≥ 0`, or `(t, x₁, …, xₖ)` with `t ≥ ‖x‖₂`. The
//! objective is linear. Models are handed to a [`ConicSolver`]; the default
//! backend is Clarabel. Complementarity pairs (`a·b = 0`) are enforced by a
//! depth-first branch and bound over variable fixings, which is the same
//! disjunction as one binary per pair with big-M equal to the variable bound.

use std::collections::HashMap;
use std::ops::{Add, AddAssign, Mul, Neg, Sub};
use std::time::Instant;

use clarabel::algebra::CscMatrix;
use clarabel::solver::{DefaultSettingsBuilder, DefaultSolver, IPSolver, SolverStatus, SupportedConeT};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(pub usize);

#[derive(Debug, Clone, Default, PartialEq)]
pub struct LinExpr {
    pub terms: Vec<(usize, f64)>,
    pub constant: f64,
}

impl LinExpr {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn constant(c: f64) -> Self {
        LinExpr {
            terms: Vec::new(),
            constant: c,
        }
    }

    pub fn term(v: Var, c: f64) -> Self {
        LinExpr {
            terms: vec![(v.0, c)],
            constant: 0.0,
        }
    }

    pub fn add_term(&mut self, v: Var, c: f64) -> &mut Self {
        if c != 0.0 {
            self.terms.push((v.0, c));
        }
        self
    }

    pub fn add_scaled(&mut self, other: &LinExpr, s: f64) -> &mut Self {
        if s != 0.0 {
            self.terms.extend(other.terms.iter().map(|&(v, c)| (v, c * s)));
            self.constant += other.constant * s;
        }
        self
    }

    pub fn value(&self, x: &[f64]) -> f64 {
        self.terms.iter().map(|&(v, c)| c * x[v]).sum::<f64>() + self.constant
    }

    pub fn is_constant(&self) -> bool {
        self.terms.iter().all(|&(_, c)| c == 0.0)
    }
}

impl From<Var> for LinExpr {
    fn from(v: Var) -> Self {
        LinExpr::term(v, 1.0)
    }
}

impl From<f64> for LinExpr {
    fn from(c: f64) -> Self {
        LinExpr::constant(c)
    }
}

impl Add for LinExpr {
    type Output = LinExpr;
    fn add(mut self, rhs: LinExpr) -> LinExpr {
        self.add_scaled(&rhs, 1.0);
        self
    }
}

impl Sub for LinExpr {
    type Output = LinExpr;
    fn sub(mut self, rhs: LinExpr) -> LinExpr {
        self.add_scaled(&rhs, -1.0);
        self
    }
}

impl Mul<f64> for LinExpr {
    type Output = LinExpr;
    fn mul(mut self, s: f64) -> LinExpr {
        for t in &mut self.terms {
            t.1 *= s;
        }
        self.constant *= s;
        self
    }
}

impl Neg for LinExpr {
    type Output = LinExpr;
    fn neg(self) -> LinExpr {
        self * -1.0
    }
}

impl AddAssign for LinExpr {
    fn add_assign(&mut self, rhs: LinExpr) {
        self.add_scaled(&rhs, 1.0);
    }
}

/// Constraint families, used for reporting and elastic infeasibility diagnosis.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Family {
    Balance,
    Network,
    Voltage,
    Current,
    Device,
    Reserve,
    Islanding,
    Substation,
    Other,
}

impl Family {
    pub fn name(&self) -> &'static str {
        match self {
            Family::Balance => "balance",
            Family::Network => "network",
            Family::Voltage => "voltage",
            Family::Current => "current",
            Family::Device => "device",
            Family::Reserve => "reserve",
            Family::Islanding => "islanding",
            Family::Substation => "substation",
            Family::Other => "other",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ConeKind {
    Zero,
    NonNeg,
    Soc,
}

#[derive(Debug, Clone)]
struct Block {
    kind: ConeKind,
    family: Family,
    rows: Vec<LinExpr>,
}

#[derive(Debug, Clone, Default)]
pub struct Model {
    lb: Vec<f64>,
    ub: Vec<f64>,
    blocks: Vec<Block>,
    objective: LinExpr,
}

impl Model {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add_var(&mut self, lb: f64, ub: f64) -> Var {
        debug_assert!(lb <= ub || (lb - ub).abs() < 1e-12, "bounds {lb} > {ub}");
        self.lb.push(lb);
        self.ub.push(ub.max(lb));
        Var(self.lb.len() - 1)
    }

    pub fn add_free(&mut self) -> Var {
        self.add_var(f64::NEG_INFINITY, f64::INFINITY)
    }

    pub fn add_nonneg(&mut self) -> Var {
        self.add_var(0.0, f64::INFINITY)
    }

    pub fn n_vars(&self) -> usize {
        self.lb.len()
    }

    pub fn bounds(&self, v: Var) -> (f64, f64) {
        (self.lb[v.0], self.ub[v.0])
    }

    pub fn set_bounds(&mut self, v: Var, lb: f64, ub: f64) {
        self.lb[v.0] = lb;
        self.ub[v.0] = ub.max(lb);
    }

    pub fn fix(&mut self, v: Var, value: f64) {
        self.set_bounds(v, value, value);
    }

    /// `lhs = rhs`
    pub fn eq(&mut self, family: Family, lhs: LinExpr, rhs: LinExpr) {
        self.push(ConeKind::Zero, family, vec![lhs - rhs]);
    }

    /// `lhs ≤ rhs`
    pub fn le(&mut self, family: Family, lhs: LinExpr, rhs: LinExpr) {
        self.push(ConeKind::NonNeg, family, vec![rhs - lhs]);
    }

    /// `lhs ≥ rhs`
    pub fn ge(&mut self, family: Family, lhs: LinExpr, rhs: LinExpr) {
        self.push(ConeKind::NonNeg, family, vec![lhs - rhs]);
    }

    /// `‖entries‖₂ ≤ bound`
    pub fn norm_le(&mut self, family: Family, entries: Vec<LinExpr>, bound: LinExpr) {
        let mut rows = Vec::with_capacity(entries.len() + 1);
        rows.push(bound);
        rows.extend(entries);
        self.push(ConeKind::Soc, family, rows);
    }

    fn push(&mut self, kind: ConeKind, family: Family, rows: Vec<LinExpr>) {
        self.blocks.push(Block { kind, family, rows });
    }

    pub fn set_objective(&mut self, obj: LinExpr) {
        self.objective = obj;
    }

    pub fn objective(&self) -> &LinExpr {
        &self.objective
    }

    pub fn n_constraints(&self) -> usize {
        self.blocks.iter().map(|b| b.rows.len()).sum()
    }

    pub fn families(&self) -> Vec<Family> {
        let mut f: Vec<Family> = self.blocks.iter().map(|b| b.family).collect();
        f.sort();
        f.dedup();
        f
    }

    /// Copy in which every constraint of `family` gets its own nonnegative
    /// slack, and the objective becomes the total slack.
    pub fn elastic(&self, family: Family) -> (Model, Vec<Var>) {
        let mut m = self.clone();
        let mut slacks = Vec::new();
        let mut blocks = std::mem::take(&mut m.blocks);
        for b in blocks.iter_mut().filter(|b| b.family == family) {
            match b.kind {
                ConeKind::Zero => {}
                ConeKind::NonNeg => {
                    for r in &mut b.rows {
                        let s = m.add_nonneg();
                        r.add_term(s, 1.0);
                        slacks.push(s);
                    }
                }
                ConeKind::Soc => {
                    let s = m.add_nonneg();
                    b.rows[0].add_term(s, 1.0);
                    slacks.push(s);
                }
            }
        }
        m.blocks = blocks;
        let mut obj = LinExpr::new();
        for &s in &slacks {
            obj.add_term(s, 1.0);
        }
        m.objective = obj;
        (m, slacks)
    }

    /// Largest violation of any constraint at `x` (bounds included).
    pub fn max_violation(&self, x: &[f64]) -> f64 {
        let mut worst: f64 = 0.0;
        for (i, &xi) in x.iter().enumerate() {
            worst = worst.max(self.lb[i] - xi).max(xi - self.ub[i]);
        }
        for b in &self.blocks {
            match b.kind {
                ConeKind::Zero => {
                    for r in &b.rows {
                        worst = worst.max(r.value(x).abs());
                    }
                }
                ConeKind::NonNeg => {
                    for r in &b.rows {
                        worst = worst.max(-r.value(x));
                    }
                }
                ConeKind::Soc => {
                    let t = b.rows[0].value(x);
                    let n = b.rows[1..].iter().map(|r| r.value(x).powi(2)).sum::<f64>().sqrt();
                    worst = worst.max(n - t);
                }
            }
        }
        worst
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SolveStatus {
    Optimal,
    Infeasible,
    Unbounded,
    IterationLimit,
    NumericalError,
}

#[derive(Debug, Clone)]
pub struct Solution {
    pub status: SolveStatus,
    /// Verbatim status string from the backend.
    pub raw_status: String,
    pub x: Vec<f64>,
    pub objective: f64,
    pub iterations: u32,
    pub solve_time: f64,
}

impl Solution {
    pub fn value(&self, v: Var) -> f64 {
        self.x[v.0]
    }

    pub fn eval(&self, e: &LinExpr) -> f64 {
        e.value(&self.x)
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Capabilities {
    pub linear: bool,
    pub second_order_cone: bool,
    pub binary: bool,
}

pub trait ConicSolver: Send + Sync {
    fn name(&self) -> &'static str;
    fn capabilities(&self) -> Capabilities;
    fn solve(&self, model: &Model) -> Result<Solution>;
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClarabelSolver {
    pub max_iter: u32,
    pub tol_gap_abs: f64,
    pub tol_gap_rel: f64,
    pub tol_feas: f64,
}

impl Default for ClarabelSolver {
    fn default() -> Self {
        ClarabelSolver {
            max_iter: 200,
            tol_gap_abs: 1e-8,
            tol_gap_rel: 1e-8,
            tol_feas: 1e-8,
        }
    }
}

impl ClarabelSolver {
    /// Tight tolerances for small programs checked against exact values.
    pub fn precise() -> Self {
        ClarabelSolver {
            max_iter: 400,
            tol_gap_abs: 1e-12,
            tol_gap_rel: 1e-12,
            tol_feas: 1e-12,
        }
    }
}

/// One affine row `live·x + constant` over solver columns.
#[derive(Debug, Clone)]
struct Row {
    live: Vec<(usize, f64)>,
    constant: f64,
}

impl Row {
    fn scale(&self) -> f64 {
        self.live.iter().fold(0.0, |m, t| m.max(t.1.abs()))
    }

    /// Coefficients of `sign·row`, normalized and quantized (columns are sorted).
    fn key(&self, sign: f64) -> Option<Vec<(usize, i64)>> {
        let s = self.scale();
        if s == 0.0 {
            return None;
        }
        Some(self.live.iter().map(|&(j, c)| (j, (sign * c / s * 1e12).round() as i64)).collect())
    }
}

struct Assembled {
    a: CscMatrix<f64>,
    b: Vec<f64>,
    cones: Vec<SupportedConeT<f64>>,
    q: Vec<f64>,
    /// Solver column of each model variable; `None` for fixed variables,
    /// which are substituted out.
    cols: Vec<Option<usize>>,
}

fn assemble(model: &Model) -> Result<Assembled> {
    let mut cols = Vec::with_capacity(model.n_vars());
    let mut n = 0usize;
    for i in 0..model.n_vars() {
        if model.lb[i] == model.ub[i] {
            cols.push(None);
        } else {
            cols.push(Some(n));
            n += 1;
        }
    }
    // Substitute fixed variables. Rows that end up constant are dropped
    // when satisfied; a violated one is kept so the solver reports
    // infeasibility.
    let fold = |e: &LinExpr| -> Row {
        let mut constant = e.constant;
        let mut live = Vec::new();
        for &(v, c) in &e.terms {
            match cols[v] {
                Some(j) if c != 0.0 => live.push((j, c)),
                Some(_) => {}
                None => constant += c * model.lb[v],
            }
        }
        live.sort_unstable_by_key(|t| t.0);
        live.dedup_by(|a, b| {
            if a.0 == b.0 {
                b.1 += a.1;
                true
            } else {
                false
            }
        });
        live.retain(|t| t.1 != 0.0);
        Row { live, constant }
    };
    let mut zero: Vec<Row> = Vec::new();
    for blk in model.blocks.iter().filter(|b| b.kind == ConeKind::Zero) {
        zero.extend(blk.rows.iter().map(fold).filter(|r| !r.live.is_empty() || r.constant.abs() > 1e-9));
    }
    let mut nonneg: Vec<Row> = Vec::new();
    for blk in model.blocks.iter().filter(|b| b.kind == ConeKind::NonNeg) {
        nonneg.extend(blk.rows.iter().map(fold).filter(|r| !r.live.is_empty() || r.constant < -1e-9));
    }
    for i in 0..model.n_vars() {
        if cols[i].is_none() {
            continue;
        }
        if model.lb[i].is_finite() {
            nonneg.push(fold(&(LinExpr::term(Var(i), 1.0) - LinExpr::constant(model.lb[i]))));
        }
        if model.ub[i].is_finite() {
            nonneg.push(fold(&(LinExpr::constant(model.ub[i]) - LinExpr::term(Var(i), 1.0))));
        }
    }
    // `a·x + c ≥ 0` together with `−a·x − c ≥ 0` leaves no interior; interior
    // point methods can then misreport infeasibility. Such pairs (typically
    // a headroom row pair once a bid is fixed) become one equality row.
    let mut seen: HashMap<Vec<(usize, i64)>, usize> = HashMap::new();
    let mut merged = vec![false; nonneg.len()];
    for (i, r) in nonneg.iter().enumerate() {
        let Some(key) = r.key(1.0) else { continue };
        if let Some(&j) = r.key(-1.0).and_then(|k| seen.get(&k)) {
            let (ci, cj) = (r.constant / r.scale(), nonneg[j].constant / nonneg[j].scale());
            if !merged[j] && (ci + cj).abs() <= 1e-12 * (1.0 + ci.abs()) {
                merged[i] = true;
                merged[j] = true;
                zero.push(nonneg[j].clone());
                continue;
            }
        }
        seen.entry(key).or_insert(i);
    }

    let mut trip: Vec<(usize, usize, f64)> = Vec::new();
    let mut b: Vec<f64> = Vec::new();
    let mut cones = Vec::new();
    let mut row = 0usize;
    let mut emit = |r: &Row, trip: &mut Vec<(usize, usize, f64)>, b: &mut Vec<f64>| {
        for &(j, c) in &r.live {
            trip.push((j, row, -c));
        }
        b.push(r.constant);
        row += 1;
    };
    for r in &zero {
        emit(r, &mut trip, &mut b);
    }
    if !zero.is_empty() {
        cones.push(SupportedConeT::ZeroConeT(zero.len()));
    }
    let kept: Vec<&Row> = nonneg.iter().zip(&merged).filter(|(_, m)| !**m).map(|(r, _)| r).collect();
    for r in &kept {
        emit(r, &mut trip, &mut b);
    }
    if !kept.is_empty() {
        cones.push(SupportedConeT::NonnegativeConeT(kept.len()));
    }
    for blk in model.blocks.iter().filter(|b| b.kind == ConeKind::Soc) {
        for r in &blk.rows {
            emit(&fold(r), &mut trip, &mut b);
        }
        cones.push(SupportedConeT::SecondOrderConeT(blk.rows.len()));
    }
    let row = b.len();

    if b.iter().any(|x| !x.is_finite()) || trip.iter().any(|t| !t.2.is_finite()) {
        return Err(Error::Solver("non-finite coefficient in model".into()));
    }

    trip.sort_unstable_by(|a, b| (a.0, a.1).cmp(&(b.0, b.1)));
    let mut colptr = vec![0usize; n + 1];
    let mut rowval = Vec::with_capacity(trip.len());
    let mut nzval: Vec<f64> = Vec::with_capacity(trip.len());
    let mut last: Option<(usize, usize)> = None;
    for &(c, r, v) in &trip {
        if last == Some((c, r)) {
            *nzval.last_mut().unwrap() += v;
            continue;
        }
        rowval.push(r);
        nzval.push(v);
        colptr[c + 1] += 1;
        last = Some((c, r));
    }
    for i in 0..n {
        colptr[i + 1] += colptr[i];
    }
    let a = CscMatrix::new(row, n, colptr, rowval, nzval);

    let mut q = vec![0.0; n];
    for &(v, c) in &model.objective.terms {
        if let Some(j) = cols[v] {
            q[j] += c;
        }
    }
    Ok(Assembled { a, b, cones, q, cols })
}

impl ConicSolver for ClarabelSolver {
    fn name(&self) -> &'static str {
        "clarabel"
    }

    fn capabilities(&self) -> Capabilities {
        Capabilities {
            linear: true,
            second_order_cone: true,
            binary: false,
        }
    }

    fn solve(&self, model: &Model) -> Result<Solution> {
        let n = model.n_vars();
        let started = Instant::now();
        if n == 0 {
            return Ok(Solution {
                status: SolveStatus::Optimal,
                raw_status: "Empty".into(),
                x: vec![],
                objective: model.objective.constant,
                iterations: 0,
                solve_time: 0.0,
            });
        }
        let asm = assemble(model)?;
        let expand = |y: &[f64]| -> Vec<f64> {
            asm.cols
                .iter()
                .enumerate()
                .map(|(i, c)| c.map_or(model.lb[i], |j| y[j]))
                .collect()
        };
        let n = asm.q.len();
        if n == 0 {
            let x = expand(&[]);
            let feasible = model.max_violation(&x) <= 1e-9;
            return Ok(Solution {
                status: if feasible { SolveStatus::Optimal } else { SolveStatus::Infeasible },
                raw_status: if feasible { "AllFixed" } else { "AllFixedInfeasible" }.into(),
                objective: model.objective.value(&x),
                x,
                iterations: 0,
                solve_time: started.elapsed().as_secs_f64(),
            });
        }
        let p = CscMatrix::<f64>::zeros((n, n));
        let settings = DefaultSettingsBuilder::default()
            .verbose(false)
            .max_iter(self.max_iter)
            .tol_gap_abs(self.tol_gap_abs)
            .tol_gap_rel(self.tol_gap_rel)
            .tol_feas(self.tol_feas)
            .build()
            .map_err(|e| Error::Solver(format!("settings: {e:?}")))?;
        let mut solver = DefaultSolver::new(&p, &asm.q, &asm.a, &asm.b, &asm.cones, settings)
            .map_err(|e| Error::Solver(format!("setup: {e:?}")))?;
        solver.solve();
        let status = match solver.solution.status {
            SolverStatus::Solved | SolverStatus::AlmostSolved => SolveStatus::Optimal,
            SolverStatus::PrimalInfeasible | SolverStatus::AlmostPrimalInfeasible => SolveStatus::Infeasible,
            SolverStatus::DualInfeasible | SolverStatus::AlmostDualInfeasible => SolveStatus::Unbounded,
            SolverStatus::MaxIterations | SolverStatus::MaxTime => SolveStatus::IterationLimit,
            _ => SolveStatus::NumericalError,
        };
        let x = expand(&solver.solution.x);
        let objective = model.objective.value(&x);
        Ok(Solution {
            status,
            raw_status: format!("{:?}", solver.solution.status),
            x,
            objective,
            iterations: solver.solution.iterations,
            solve_time: started.elapsed().as_secs_f64(),
        })
    }
}

/// Outcome of a complementarity-constrained solve.
#[derive(Debug, Clone)]
pub struct BranchOutcome {
    pub solution: Solution,
    /// Nodes explored; 1 means the relaxation already satisfied every pair.
    pub nodes: usize,
}

/// Solve `model` subject to `a·b = 0` for each pair (both variables must be
/// nonnegative). Pairs whose relaxed product is at most `tol` are accepted.
pub fn solve_with_complementarity(
    solver: &dyn ConicSolver,
    model: &Model,
    pairs: &[(Var, Var)],
    tol: f64,
    max_nodes: usize,
) -> Result<BranchOutcome> {
    let root = solver.solve(model)?;
    if root.status != SolveStatus::Optimal || worst_pair(&root, pairs, tol).is_none() {
        return Ok(BranchOutcome {
            solution: root,
            nodes: 1,
        });
    }

    let mut best: Option<Solution> = None;
    let mut nodes = 1usize;
    // Each node is a list of (variable, fixed to zero).
    let mut stack: Vec<(Vec<Var>, Solution)> = vec![(Vec::new(), root)];
    while let Some((fixed, sol)) = stack.pop() {
        if let Some(b) = &best {
            if sol.objective >= b.objective - 1e-9 * (1.0 + b.objective.abs()) {
                continue;
            }
        }
        let Some(k) = worst_pair(&sol, pairs, tol) else {
            best = Some(sol);
            continue;
        };
        if nodes >= max_nodes {
            break;
        }
        let (a, b) = pairs[k];
        // Explore zeroing the smaller side last so it is popped first.
        let order = if sol.value(a) <= sol.value(b) { [b, a] } else { [a, b] };
        for v in order {
            let mut child = model.clone();
            let mut fx = fixed.clone();
            fx.push(v);
            for &f in &fx {
                let (lb, _) = child.bounds(f);
                child.set_bounds(f, lb.min(0.0), 0.0);
            }
            nodes += 1;
            let s = solver.solve(&child)?;
            if s.status == SolveStatus::Optimal {
                stack.push((fx, s));
            }
        }
    }
    match best {
        Some(solution) => Ok(BranchOutcome { solution, nodes }),
        None => Err(Error::Infeasible(format!(
            "no complementary solution found after {nodes} nodes"
        ))),
    }
}

fn worst_pair(sol: &Solution, pairs: &[(Var, Var)], tol: f64) -> Option<usize> {
    let mut worst = None;
    let mut worst_val = tol;
    for (k, &(a, b)) in pairs.iter().enumerate() {
        let prod = sol.value(a).max(0.0) * sol.value(b).max(0.0);
        if prod > worst_val {
            worst_val = prod;
            worst = Some(k);
        }
    }
    worst
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn small_lp() {
        // max x + y s.t. x + 2y <= 4, 3x + y <= 6, x,y >= 0 → (1.6, 1.2), obj 2.8
        let mut m = Model::new();
        let x = m.add_nonneg();
        let y = m.add_nonneg();
        m.le(Family::Other, LinExpr::term(x, 1.0) + LinExpr::term(y, 2.0), 4.0.into());
        m.le(Family::Other, LinExpr::term(x, 3.0) + LinExpr::term(y, 1.0), 6.0.into());
        m.set_objective(-(LinExpr::from(x) + LinExpr::from(y)));
        let s = ClarabelSolver::precise().solve(&m).unwrap();
        assert_eq!(s.status, SolveStatus::Optimal);
        assert!((s.value(x) - 1.6).abs() < 1e-8);
        assert!((s.value(y) - 1.2).abs() < 1e-8);
        assert!((s.objective + 2.8).abs() < 1e-9);
    }

    #[test]
    fn opposite_rows_become_an_equality() {
        // 2x − 2y + 2b ≥ 0 and y − x − b ≥ 0 with b fixed at 1 pin x = y − 1.
        let mut m = Model::new();
        let x = m.add_var(0.0, 10.0);
        let y = m.add_var(0.0, 10.0);
        let b = m.add_var(1.0, 1.0);
        m.ge(Family::Other, LinExpr::term(x, 2.0) + LinExpr::term(b, 2.0), LinExpr::term(y, 2.0));
        m.ge(Family::Other, LinExpr::term(y, 1.0), LinExpr::term(x, 1.0) + LinExpr::term(b, 1.0));
        m.set_objective(-(LinExpr::from(x) + LinExpr::from(y)));
        let asm = assemble(&m).unwrap();
        assert!(matches!(asm.cones[0], SupportedConeT::ZeroConeT(1)));
        let s = ClarabelSolver::precise().solve(&m).unwrap();
        assert_eq!(s.status, SolveStatus::Optimal);
        assert!((s.value(x) - 9.0).abs() < 1e-7 && (s.value(y) - 10.0).abs() < 1e-7);
    }

    #[test]
    fn socp_projection() {
        // min t s.t. ‖(x − 3, y − 4)‖ ≤ t → t = 5 at x = y = 0 when x, y <= 0
        let mut m = Model::new();
        let x = m.add_var(f64::NEG_INFINITY, 0.0);
        let y = m.add_var(f64::NEG_INFINITY, 0.0);
        let t = m.add_free();
        m.norm_le(
            Family::Other,
            vec![LinExpr::from(x) - 3.0.into(), LinExpr::from(y) - 4.0.into()],
            t.into(),
        );
        m.set_objective(t.into());
        let s = ClarabelSolver::default().solve(&m).unwrap();
        assert!((s.objective - 5.0).abs() < 1e-6);
    }

    #[test]
    fn infeasible_detected_and_elastic_finds_family() {
        let mut m = Model::new();
        let x = m.add_var(0.0, 1.0);
        m.ge(Family::Voltage, x.into(), 2.0.into());
        m.set_objective(x.into());
        let s = ClarabelSolver::default().solve(&m).unwrap();
        assert_eq!(s.status, SolveStatus::Infeasible);
        let (e, slacks) = m.elastic(Family::Voltage);
        let s = ClarabelSolver::default().solve(&e).unwrap();
        assert_eq!(s.status, SolveStatus::Optimal);
        assert_eq!(slacks.len(), 1);
        assert!((s.objective - 1.0).abs() < 1e-6);
    }

    #[test]
    fn complementarity_branching() {
        // Burning energy: a - b = -1 with cost 0 on both; relaxation may pick
        // any a ≥ 0, b = a + 1. Add incentive for a, b both positive:
        // min -0.1 a + 0.05 b  s.t. b - a = 1 — objective decreases with a
        // (−0.05 a), bounded by a ≤ 3. Complementarity forces a = 0.
        let mut m = Model::new();
        let a = m.add_var(0.0, 3.0);
        let b = m.add_var(0.0, 10.0);
        m.eq(Family::Other, LinExpr::from(b) - LinExpr::from(a), 1.0.into());
        m.set_objective(LinExpr::term(a, -0.1) + LinExpr::term(b, 0.05));
        let relaxed = ClarabelSolver::default().solve(&m).unwrap();
        assert!(relaxed.value(a) > 2.9);
        let out = solve_with_complementarity(&ClarabelSolver::default(), &m, &[(a, b)], 1e-9, 50).unwrap();
        assert!(out.solution.value(a) * out.solution.value(b) < 1e-9);
        assert!(out.nodes > 1);
        assert!((out.solution.objective - 0.05).abs() < 1e-6);
    }

    #[test]
    fn fixed_variables() {
        let mut m = Model::new();
        let x = m.add_var(0.0, 10.0);
        m.fix(x, 2.5);
        m.set_objective(x.into());
        let s = ClarabelSolver::default().solve(&m).unwrap();
        assert!((s.value(x) - 2.5).abs() < 1e-8);
        assert!(m.max_violation(&s.x) < 1e-7);
    }
}
