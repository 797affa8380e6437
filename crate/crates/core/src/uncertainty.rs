//! Chance constraints as tightened limits: Monte-Carlo sampling of PV
//! forecast errors, empirical margins from full AC power flows, and the
//! outer loop alternating OPF solves with margin updates.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::{Error, Result};
use crate::exec::Execution;
use crate::grid::GridTopology;
use crate::opf::{grid_injections, inner_feasibility_loop, DispatchPlan, HorizonInput};
use crate::powerflow::{solve_bfs, PfSettings};
use crate::solver::ConicSolver;

/// Quantile levels of the tabulated error model: 0%, 5%, …, 100%.
pub fn quantile_levels() -> Vec<f64> {
    (0..=20).map(|i| i as f64 * 0.05).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ErrorTableKind {
    /// 21 quantiles per lead time, sampled by inverse transform with linear
    /// interpolation between levels.
    Quantiles,
    /// Raw error samples per lead time, drawn uniformly.
    Samples,
}

/// Relative PV forecast error per lead time (1-based hours ahead),
/// expressed as a fraction of the forecast.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForecastErrorModel {
    pub kind: ErrorTableKind,
    /// `rows[h − 1]`
    pub rows: Vec<Vec<f64>>,
}

impl ForecastErrorModel {
    pub fn zero(max_lead: usize) -> Self {
        ForecastErrorModel {
            kind: ErrorTableKind::Samples,
            rows: vec![vec![0.0]; max_lead],
        }
    }

    /// Two equally likely outcomes `±delta` at every lead time.
    pub fn two_point(delta: f64, max_lead: usize) -> Self {
        ForecastErrorModel {
            kind: ErrorTableKind::Samples,
            rows: vec![vec![-delta, delta]; max_lead],
        }
    }

    /// Normal errors with the given standard deviation per lead time. The
    /// 0% and 100% entries are the 0.1% and 99.9% quantiles.
    pub fn gaussian(sigma: &[f64]) -> Self {
        let rows = sigma
            .iter()
            .map(|&s| {
                quantile_levels()
                    .iter()
                    .map(|&p| {
                        if s <= 0.0 {
                            return 0.0;
                        }
                        let n = Normal::new(0.0, s).expect("positive sigma");
                        n.inverse_cdf(p.clamp(0.001, 0.999))
                    })
                    .collect()
            })
            .collect();
        ForecastErrorModel {
            kind: ErrorTableKind::Quantiles,
            rows,
        }
    }

    pub fn max_lead(&self) -> usize {
        self.rows.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.rows.is_empty() {
            return Err(Error::Input("error model has no lead times".into()));
        }
        for (i, r) in self.rows.iter().enumerate() {
            if r.is_empty() || r.iter().any(|x| !x.is_finite()) {
                return Err(Error::Input(format!("error model row {} is empty or non-finite", i + 1)));
            }
            if self.kind == ErrorTableKind::Quantiles {
                if r.len() != 21 {
                    return Err(Error::Input(format!(
                        "error model row {} has {} quantiles, expected 21",
                        i + 1,
                        r.len()
                    )));
                }
                if r.windows(2).any(|w| w[1] < w[0]) {
                    return Err(Error::Input(format!("error model row {} is not non-decreasing", i + 1)));
                }
            }
        }
        Ok(())
    }

    /// Error at lead time `h` for a uniform draw `u ∈ [0, 1)`.
    pub fn draw(&self, h: usize, u: f64) -> Result<f64> {
        let row = h
            .checked_sub(1)
            .and_then(|i| self.rows.get(i))
            .ok_or_else(|| Error::Input(format!("lead time {h} h outside error model coverage 1..={}", self.max_lead())))?;
        Ok(match self.kind {
            ErrorTableKind::Samples => row[((u * row.len() as f64) as usize).min(row.len() - 1)],
            ErrorTableKind::Quantiles => {
                let x = u.clamp(0.0, 1.0) * 20.0;
                let i = (x.floor() as usize).min(19);
                let w = x - i as f64;
                row[i] * (1.0 - w) + row[i + 1] * w
            }
        })
    }

    /// CSV: header `lead_h,<levels…>`, one row per lead time.
    pub fn load_csv(path: &Path) -> Result<Self> {
        let mut rdr = csv::Reader::from_path(path)?;
        let headers = rdr.headers()?.clone();
        let kind = if headers.len() == 22 {
            ErrorTableKind::Quantiles
        } else {
            ErrorTableKind::Samples
        };
        let mut rows = Vec::new();
        for (i, rec) in rdr.records().enumerate() {
            let rec = rec?;
            let line = i + 2;
            let lead: usize = rec.get(0).unwrap_or("").trim().parse().map_err(|_| Error::Schema {
                file: path.display().to_string(),
                line,
                msg: "lead time must be an integer".into(),
            })?;
            if lead != rows.len() + 1 {
                return Err(Error::Schema {
                    file: path.display().to_string(),
                    line,
                    msg: format!("expected lead time {}, found {lead}", rows.len() + 1),
                });
            }
            let vals = rec
                .iter()
                .skip(1)
                .map(|s| s.trim().parse::<f64>())
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(|e| Error::Schema {
                    file: path.display().to_string(),
                    line,
                    msg: format!("bad number: {e}"),
                })?;
            rows.push(vals);
        }
        let m = ForecastErrorModel { kind, rows };
        m.validate()?;
        Ok(m)
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        let width = self.rows.first().map_or(0, |r| r.len());
        let mut head = vec!["lead_h".to_string()];
        if self.kind == ErrorTableKind::Quantiles {
            head.extend(quantile_levels().iter().map(|p| format!("q{:.0}", p * 100.0)));
        } else {
            head.extend((0..width).map(|i| format!("s{i}")));
        }
        w.write_record(&head)?;
        for (i, r) in self.rows.iter().enumerate() {
            let mut rec = vec![(i + 1).to_string()];
            rec.extend(r.iter().map(|x| format!("{x}")));
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct McSettings {
    pub n_samples: usize,
    pub epsilon: f64,
    pub seed: u64,
    pub exec: Execution,
}

impl Default for McSettings {
    fn default() -> Self {
        McSettings {
            n_samples: 1000,
            epsilon: 0.05,
            seed: 1,
            exec: Execution::default(),
        }
    }
}

impl McSettings {
    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon > 0.0 && self.epsilon < 0.5) {
            return Err(Error::Input(format!("epsilon {} outside (0, 0.5)", self.epsilon)));
        }
        if self.n_samples < 100 {
            return Err(Error::Input(format!("{} samples, need at least 100", self.n_samples)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ConvergenceThresholds {
    pub eta_v: f64,
    pub eta_i: f64,
    pub max_outer: usize,
}

impl Default for ConvergenceThresholds {
    fn default() -> Self {
        ConvergenceThresholds {
            eta_v: 1e-4,
            eta_i: 1e-4,
            max_outer: 10,
        }
    }
}

/// Tightenings of the voltage and current limits, per period.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UncertaintyMargins {
    /// `[k][bus]`
    pub v_upper: Vec<Vec<f64>>,
    pub v_lower: Vec<Vec<f64>>,
    /// `[k][branch]`
    pub i_branch: Vec<Vec<f64>>,
}

impl UncertaintyMargins {
    pub fn zeros(periods: usize, n_buses: usize, n_branches: usize) -> Self {
        UncertaintyMargins {
            v_upper: vec![vec![0.0; n_buses]; periods],
            v_lower: vec![vec![0.0; n_buses]; periods],
            i_branch: vec![vec![0.0; n_branches]; periods],
        }
    }

    pub fn for_input(input: &HorizonInput) -> Self {
        Self::zeros(input.horizon(), input.grid.n_buses(), input.grid.n_branches())
    }

    pub fn check_shape(&self, periods: usize, n_buses: usize, n_branches: usize) -> Result<()> {
        let ok = self.v_upper.len() == periods
            && self.v_lower.len() == periods
            && self.i_branch.len() == periods
            && self.v_upper.iter().chain(&self.v_lower).all(|r| r.len() == n_buses)
            && self.i_branch.iter().all(|r| r.len() == n_branches);
        if ok {
            Ok(())
        } else {
            Err(Error::Input("uncertainty margins do not match the horizon or network".into()))
        }
    }

    /// Reject tightenings larger than half of the limit band.
    pub fn check_band(&self, k: usize, v_min: f64, v_max: f64, grid: &GridTopology) -> Result<()> {
        let half = 0.5 * (v_max - v_min);
        for (j, (&u, &l)) in self.v_upper[k].iter().zip(&self.v_lower[k]).enumerate() {
            if u > half || l > half {
                return Err(Error::Infeasible(format!(
                    "voltage tightening at bus {} step {k} ({:.4}/{:.4} pu) exceeds half the band ({half:.4} pu)",
                    grid.buses()[j].id,
                    u,
                    l
                )));
            }
        }
        for (i, (&om, br)) in self.i_branch[k].iter().zip(grid.branches()).enumerate() {
            if om > 0.5 * br.ampacity {
                return Err(Error::Infeasible(format!(
                    "current tightening on branch {} step {k} ({om:.4} pu) exceeds half the ampacity",
                    grid.branches()[i].id
                )));
            }
        }
        Ok(())
    }

    /// `(max |ΔΩ_V|, max |ΔΩ_I|)`
    pub fn max_abs_diff(&self, other: &UncertaintyMargins) -> (f64, f64) {
        let d = |a: &Vec<Vec<f64>>, b: &Vec<Vec<f64>>| {
            a.iter()
                .zip(b)
                .flat_map(|(x, y)| x.iter().zip(y).map(|(p, q)| (p - q).abs()))
                .fold(0.0, f64::max)
        };
        (
            d(&self.v_upper, &other.v_upper).max(d(&self.v_lower, &other.v_lower)),
            d(&self.i_branch, &other.i_branch),
        )
    }

    pub fn min_value(&self) -> f64 {
        self.v_upper
            .iter()
            .chain(&self.v_lower)
            .chain(&self.i_branch)
            .flatten()
            .copied()
            .fold(f64::INFINITY, f64::min)
    }
}

/// One Monte-Carlo draw of available PV power: `[unit][k]`, pu.
pub type PvScenario = Vec<Vec<f64>>;

/// Perturb the forecast with errors drawn at lead time `k + 1` for period
/// `k`. All units share one error per period (one irradiance field over the
/// feeder); samples are clamped to `[0, rating]`.
pub fn sample_scenarios(
    model: &ForecastErrorModel,
    forecast: &[Vec<f64>],
    ratings: &[f64],
    periods: usize,
    settings: &McSettings,
) -> Result<Vec<PvScenario>> {
    if periods > model.max_lead() {
        return Err(Error::Input(format!(
            "horizon of {periods} steps exceeds error model coverage of {} lead times",
            model.max_lead()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(settings.seed);
    let mut out = Vec::with_capacity(settings.n_samples);
    for _ in 0..settings.n_samples {
        let errs: Vec<f64> = (0..periods)
            .map(|k| model.draw(k + 1, rng.random::<f64>()))
            .collect::<Result<_>>()?;
        out.push(
            forecast
                .iter()
                .zip(ratings)
                .map(|(f, &r)| (0..periods).map(|k| (f[k] * (1.0 + errs[k])).clamp(0.0, r)).collect())
                .collect(),
        );
    }
    Ok(out)
}

/// Forecast availability and ratings of `input`'s PV units, horizon only.
pub fn pv_forecast(input: &HorizonInput) -> (Vec<Vec<f64>>, Vec<f64>) {
    (
        input.pv.iter().map(|p| p.avail[..input.horizon()].to_vec()).collect(),
        input.pv.iter().map(|p| p.s_rating).collect(),
    )
}

/// PV output under scenario availability with the planned curtailment
/// amount held fixed: `p = max(0, avail − curtailed)`.
pub fn realized_pv_output(plan: &DispatchPlan, k: usize, avail: &[f64]) -> Vec<f64> {
    plan.pv
        .iter()
        .zip(avail)
        .map(|(s, &a)| (a - s.curtailed[k]).max(0.0))
        .collect()
}

/// |V| per bus and |I| per branch for every period, or `None` if the power
/// flow of some period diverged.
type Magnitudes = Option<Vec<(Vec<f64>, Vec<f64>)>>;

fn scenario_magnitudes(input: &HorizonInput, plan: &DispatchPlan, avail: Option<&PvScenario>) -> Magnitudes {
    let pf = PfSettings::default();
    let mut out = Vec::with_capacity(plan.horizon());
    for k in 0..plan.horizon() {
        let pv = avail.map(|a| {
            let col: Vec<f64> = a.iter().map(|u| u[k]).collect();
            realized_pv_output(plan, k, &col)
        });
        let inj = grid_injections(input, plan, k, pv.as_deref());
        let st = solve_bfs(&input.grid, &inj, plan.tap[k], &pf).ok()?;
        out.push((st.voltages.magnitudes(), st.i_br.iter().map(|c| c.norm()).collect()));
    }
    Some(out)
}

/// Nearest-rank empirical quantile of sorted data, `p ∈ (0, 1]`.
pub fn nearest_rank(sorted: &[f64], p: f64) -> f64 {
    let n = sorted.len();
    let r = ((p * n as f64).ceil() as usize).clamp(1, n);
    sorted[r - 1]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MarginReport {
    pub margins: UncertaintyMargins,
    pub diverged: usize,
}

/// Empirical tightenings around `plan`: `Ω_up = |V|^{1−ε} − |V|^0`,
/// `Ω_low = |V|^0 − |V|^ε`, `Ω_I = |I|^{1−ε} − |I|^0`, clamped at zero.
pub fn evaluate_margins(
    input: &HorizonInput,
    plan: &DispatchPlan,
    scenarios: &[PvScenario],
    settings: &McSettings,
) -> Result<MarginReport> {
    let nominal = scenario_magnitudes(input, plan, None)
        .ok_or_else(|| Error::Infeasible("power flow diverges at the planned operating point".into()))?;
    let runs = settings
        .exec
        .map(scenarios, |s| scenario_magnitudes(input, plan, Some(s)));
    let ok: Vec<_> = runs.into_iter().flatten().collect();
    let diverged = scenarios.len() - ok.len();
    if diverged as f64 > settings.epsilon * scenarios.len() as f64 {
        return Err(Error::Infeasible(format!(
            "scenario-infeasible: power flow diverged in {diverged} of {} scenarios",
            scenarios.len()
        )));
    }
    let eps = settings.epsilon;
    let t_len = plan.horizon();
    let n = input.grid.n_buses();
    let nb = input.grid.n_branches();
    let mut m = UncertaintyMargins::zeros(t_len, n, nb);
    if ok.is_empty() {
        return Ok(MarginReport { margins: m, diverged });
    }
    let mut buf = Vec::with_capacity(ok.len());
    for k in 0..t_len {
        for j in 0..n {
            buf.clear();
            buf.extend(ok.iter().map(|r| r[k].0[j]));
            buf.sort_by(f64::total_cmp);
            let v0 = nominal[k].0[j];
            m.v_upper[k][j] = (nearest_rank(&buf, 1.0 - eps) - v0).max(0.0);
            m.v_lower[k][j] = (v0 - nearest_rank(&buf, eps)).max(0.0);
        }
        for i in 0..nb {
            buf.clear();
            buf.extend(ok.iter().map(|r| r[k].1[i]));
            buf.sort_by(f64::total_cmp);
            m.i_branch[k][i] = (nearest_rank(&buf, 1.0 - eps) - nominal[k].1[i]).max(0.0);
        }
    }
    Ok(MarginReport { margins: m, diverged })
}

#[derive(Debug, Clone)]
pub struct CcOutcome {
    pub plan: DispatchPlan,
    /// Margins the returned plan was solved with.
    pub margins: UncertaintyMargins,
    /// Margins evaluated around the returned plan.
    pub evaluated: UncertaintyMargins,
    pub outer_iterations: usize,
    pub inner_iterations: usize,
    pub converged: bool,
    /// `(max |ΔΩ_V|, max |ΔΩ_I|)` per outer iteration.
    pub history: Vec<(f64, f64)>,
}

/// Outer loop: solve with the current margins, re-evaluate them around the
/// new plan, stop when they no longer move.
pub fn cc_opf(
    input: &HorizonInput,
    model: &ForecastErrorModel,
    thresholds: &ConvergenceThresholds,
    settings: &McSettings,
    solver: &dyn ConicSolver,
) -> Result<CcOutcome> {
    settings.validate()?;
    let (forecast, ratings) = pv_forecast(input);
    let scenarios = sample_scenarios(model, &forecast, &ratings, input.horizon(), settings)?;
    let mut margins = UncertaintyMargins::for_input(input);
    let mut vbar = None;
    let mut history = Vec::new();
    let mut inner_total = 0;
    let mut last = None;
    for m in 1..=thresholds.max_outer.max(1) {
        let inner = inner_feasibility_loop(input, &margins, solver, vbar.take())?;
        inner_total += inner.iterations;
        let report = evaluate_margins(input, &inner.plan, &scenarios, settings)?;
        let (dv, di) = report.margins.max_abs_diff(&margins);
        history.push((dv, di));
        log::debug!("outer iteration {m}: dOmega_V {dv:.3e}, dOmega_I {di:.3e}");
        if dv < thresholds.eta_v && di < thresholds.eta_i {
            return Ok(CcOutcome {
                plan: inner.plan,
                margins,
                evaluated: report.margins,
                outer_iterations: m,
                inner_iterations: inner_total,
                converged: true,
                history,
            });
        }
        let used = std::mem::replace(&mut margins, report.margins.clone());
        vbar = Some(crate::opf::WarmStart::from(&inner));
        last = Some((inner.plan, used, report.margins));
    }
    let (plan, used, evaluated) = last.expect("at least one outer iteration");
    log::warn!("chance-constrained loop stopped at the iteration cap");
    Ok(CcOutcome {
        plan,
        margins: used,
        evaluated,
        outer_iterations: thresholds.max_outer.max(1),
        inner_iterations: inner_total,
        converged: false,
        history,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ViolationReport {
    /// `[k][bus]` fraction of scenarios with `|V| > V_max`.
    pub v_upper: Vec<Vec<f64>>,
    pub v_lower: Vec<Vec<f64>>,
    /// `[k][branch]` fraction with `|I| > I_max`.
    pub current: Vec<Vec<f64>>,
    pub max_rate: f64,
    pub n_samples: usize,
    pub seed: u64,
    pub diverged: usize,
}

/// Empirical violation rates of the raw limits under fresh scenarios. A
/// diverged power flow counts as violating every limit.
pub fn validate_violation_rate(
    input: &HorizonInput,
    plan: &DispatchPlan,
    scenarios: &[PvScenario],
    settings: &McSettings,
) -> ViolationReport {
    let s = &input.settings;
    let runs = settings
        .exec
        .map(scenarios, |sc| scenario_magnitudes(input, plan, Some(sc)));
    let t_len = plan.horizon();
    let n = input.grid.n_buses();
    let nb = input.grid.n_branches();
    let mut up = vec![vec![0.0; n]; t_len];
    let mut lo = vec![vec![0.0; n]; t_len];
    let mut cur = vec![vec![0.0; nb]; t_len];
    let tol = 1e-9;
    let mut diverged = 0;
    for r in &runs {
        for k in 0..t_len {
            for j in 0..n {
                match r {
                    Some(r) => {
                        if r[k].0[j] > s.v_max + tol {
                            up[k][j] += 1.0;
                        }
                        if r[k].0[j] < s.v_min - tol {
                            lo[k][j] += 1.0;
                        }
                    }
                    None => {
                        up[k][j] += 1.0;
                        lo[k][j] += 1.0;
                    }
                }
            }
            for (i, br) in input.grid.branches().iter().enumerate() {
                match r {
                    Some(r) if r[k].1[i] <= br.ampacity + tol => {}
                    _ => cur[k][i] += 1.0,
                }
            }
        }
        if r.is_none() {
            diverged += 1;
        }
    }
    let total = scenarios.len().max(1) as f64;
    let mut max_rate: f64 = 0.0;
    for row in up.iter_mut().chain(lo.iter_mut()).chain(cur.iter_mut()) {
        for x in row.iter_mut() {
            *x /= total;
            max_rate = max_rate.max(*x);
        }
    }
    ViolationReport {
        v_upper: up,
        v_lower: lo,
        current: cur,
        max_rate,
        n_samples: scenarios.len(),
        seed: settings.seed,
        diverged,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn settings(n: usize, seed: u64) -> McSettings {
        McSettings {
            n_samples: n,
            epsilon: 0.05,
            seed,
            exec: Execution::Sequential,
        }
    }

    #[test]
    fn zero_variance_reproduces_forecast() {
        let m = ForecastErrorModel::zero(24);
        let f = vec![vec![0.3; 24], vec![0.1; 24]];
        let s = sample_scenarios(&m, &f, &[1.0, 1.0], 24, &settings(100, 3)).unwrap();
        assert!(s.iter().all(|sc| sc == &f));
    }

    #[test]
    fn two_point_splits_evenly() {
        let m = ForecastErrorModel::two_point(0.1, 1);
        let mut ups = 0usize;
        let mut total = 0usize;
        for seed in 0..20 {
            let s = sample_scenarios(&m, &[vec![1.0]], &[2.0], 1, &settings(500, seed)).unwrap();
            for sc in &s {
                let v = sc[0][0];
                assert!((v - 1.1).abs() < 1e-12 || (v - 0.9).abs() < 1e-12);
                ups += usize::from(v > 1.0);
                total += 1;
            }
        }
        let frac = ups as f64 / total as f64;
        assert!((frac - 0.5).abs() < 0.02, "{frac}");
    }

    #[test]
    fn large_negative_error_clamps_at_zero() {
        let m = ForecastErrorModel::two_point(1.5, 2);
        let s = sample_scenarios(&m, &[vec![0.4, 0.4]], &[0.5], 2, &settings(200, 9)).unwrap();
        for sc in s {
            for &v in &sc[0] {
                assert!(v == 0.0 || v == 0.5, "{v}");
            }
        }
    }

    #[test]
    fn lead_time_coverage_is_checked() {
        let m = ForecastErrorModel::zero(12);
        assert!(sample_scenarios(&m, &[vec![0.0; 24]], &[1.0], 24, &settings(100, 1)).is_err());
    }

    #[test]
    fn nearest_rank_definition() {
        let x: Vec<f64> = (1..=100).map(|i| i as f64).collect();
        assert_eq!(nearest_rank(&x, 0.05), 5.0);
        assert_eq!(nearest_rank(&x, 0.95), 95.0);
        assert_eq!(nearest_rank(&x, 1.0), 100.0);
        assert_eq!(nearest_rank(&[3.0], 0.01), 3.0);
    }

    #[test]
    fn gaussian_table_is_symmetric_and_monotone() {
        let m = ForecastErrorModel::gaussian(&[0.1, 0.2]);
        m.validate().unwrap();
        assert!(m.rows[0][10].abs() < 1e-12);
        assert!((m.rows[1][0] + m.rows[1][20]).abs() < 1e-12);
        assert!((m.draw(1, 0.5).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn csv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("err.csv");
        let m = ForecastErrorModel::gaussian(&[0.05, 0.1, 0.15]);
        m.write_csv(&p).unwrap();
        let back = ForecastErrorModel::load_csv(&p).unwrap();
        assert_eq!(back.kind, ErrorTableKind::Quantiles);
        for (a, b) in m.rows.iter().flatten().zip(back.rows.iter().flatten()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn settings_validation() {
        assert!(settings(100, 0).validate().is_ok());
        assert!(settings(99, 0).validate().is_err());
        let mut s = settings(100, 0);
        s.epsilon = 0.5;
        assert!(s.validate().is_err());
    }
}
