//! One-second reserve activation signals: ex-post worst-case analysis of a
//! secondary-control signal, second-by-second replay of a plan against a
//! signal, and the primary-control droop.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SignalKind {
    /// Grid frequency deviation from nominal, Hz.
    FrequencyDeviation,
    /// Requested fraction of the bid, in [−1, 1]; positive is up-regulation.
    Activation,
}

/// Uniformly sampled 1 s series; missing samples are NaN.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrequencySignal {
    pub kind: SignalKind,
    /// Unix second of sample 0.
    pub start: i64,
    pub values: Vec<f64>,
}

impl FrequencySignal {
    pub fn new(kind: SignalKind, start: i64, values: Vec<f64>) -> Self {
        FrequencySignal { kind, start, values }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn hours(&self) -> f64 {
        self.values.len() as f64 / 3600.0
    }

    /// Half-open index ranges of missing samples.
    pub fn gaps(&self) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        let mut open = None;
        for (i, v) in self.values.iter().enumerate() {
            match (v.is_nan(), open) {
                (true, None) => open = Some(i),
                (false, Some(s)) => {
                    out.push((s, i));
                    open = None;
                }
                _ => {}
            }
        }
        if let Some(s) = open {
            out.push((s, self.values.len()));
        }
        out
    }

    /// Value at sample `i`, 0 inside gaps.
    fn at(&self, i: usize) -> f64 {
        let v = self.values[i];
        if v.is_nan() {
            0.0
        } else {
            v
        }
    }
}

/// Square wave: `amplitude` for `on_s` seconds, then 0 for the rest of each
/// `period_s`.
pub fn square_wave(seconds: usize, period_s: usize, on_s: usize, amplitude: f64) -> FrequencySignal {
    let values = (0..seconds)
        .map(|i| if i % period_s < on_s { amplitude } else { 0.0 })
        .collect();
    FrequencySignal::new(SignalKind::Activation, 0, values)
}

/// Mean-reverting activation signal: an Ornstein–Uhlenbeck process with
/// correlation time `tau_s` and stationary deviation `sigma`, clipped to
/// [−1, 1].
pub fn synthetic_activation(seconds: usize, tau_s: f64, sigma: f64, seed: u64) -> FrequencySignal {
    let values = ou_path(seconds, tau_s, sigma, seed)
        .into_iter()
        .map(|x| x.clamp(-1.0, 1.0))
        .collect();
    FrequencySignal::new(SignalKind::Activation, 0, values)
}

/// Synthetic frequency deviation, Hz (OU, 60 s correlation, 20 mHz spread).
pub fn synthetic_frequency(seconds: usize, seed: u64) -> FrequencySignal {
    FrequencySignal::new(SignalKind::FrequencyDeviation, 0, ou_path(seconds, 60.0, 0.02, seed))
}

fn ou_path(n: usize, tau_s: f64, sigma: f64, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let a = (-1.0 / tau_s).exp();
    let s = sigma * (1.0 - a * a).sqrt();
    let mut x = 0.0;
    (0..n)
        .map(|_| {
            let z: f64 = StandardNormal.sample(&mut rng);
            x = a * x + s * z;
            x
        })
        .collect()
}

/// Worst-case reserve energy per call hour, in hours of full bid power.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SfcWorstCase {
    /// `up[ϑ−1]`: worst-case up-regulation in call hour ϑ.
    pub up: Vec<f64>,
    pub down: Vec<f64>,
    /// Worst-case cumulative requirement over 24 h, if the signal is long
    /// enough.
    pub cumulative_24h_up: Option<f64>,
    pub cumulative_24h_down: Option<f64>,
    /// Whether both tables are non-increasing in ϑ (diagnostic only).
    pub non_increasing: bool,
    /// Samples missing from the signal; windows touching them are skipped.
    pub missing_samples: usize,
}

const MONTH_S: usize = 30 * 24 * 3600;

/// Ex-post worst case of a one-second activation signal. `E(ϑ)` is the
/// largest up (down) activation energy in any window of ϑ hours; the entry
/// for hour ϑ is `E(ϑ) − E(ϑ−1)`, the extra energy the ϑ-th hour of the
/// worst call can demand.
pub fn analyze_sfc_signal(signal: &FrequencySignal, window_hours: usize) -> Result<SfcWorstCase> {
    if window_hours == 0 {
        return Err(Error::Input("analysis window must be at least one hour".into()));
    }
    if signal.len() < window_hours * 3600 {
        return Err(Error::Input(format!(
            "signal of {:.2} h is shorter than the {window_hours} h window",
            signal.hours()
        )));
    }
    if signal.len() < MONTH_S {
        log::warn!("signal covers {:.1} days; worst-case tables want at least a month", signal.hours() / 24.0);
    }
    let n = signal.len();
    let mut up = vec![0.0; n + 1];
    let mut down = vec![0.0; n + 1];
    let mut miss = vec![0usize; n + 1];
    for i in 0..n {
        let v = signal.at(i);
        up[i + 1] = up[i] + v.max(0.0);
        down[i + 1] = down[i] + (-v).max(0.0);
        miss[i + 1] = miss[i] + usize::from(signal.values[i].is_nan());
    }
    let worst = |prefix: &[f64], len: usize| -> Option<f64> {
        (0..=n.checked_sub(len)?)
            .filter(|&s| miss[s + len] == miss[s])
            .map(|s| prefix[s + len] - prefix[s])
            .fold(None, |m: Option<f64>, x| Some(m.map_or(x, |m| m.max(x))))
            .map(|e| e / 3600.0)
    };
    let table = |prefix: &[f64]| -> Result<Vec<f64>> {
        let mut out = Vec::with_capacity(window_hours);
        let mut prev = 0.0;
        for h in 1..=window_hours {
            let e = worst(prefix, h * 3600)
                .ok_or_else(|| Error::Input(format!("no gap-free {h} h window in the signal")))?;
            out.push((e - prev).clamp(0.0, 1.0));
            prev = e;
        }
        Ok(out)
    };
    let up_t = table(&up)?;
    let down_t = table(&down)?;
    let mono = |t: &[f64]| t.windows(2).all(|w| w[1] <= w[0] + 1e-12);
    let non_increasing = mono(&up_t) && mono(&down_t);
    if !non_increasing {
        log::info!("worst-case table is not non-increasing in the call hour");
    }
    Ok(SfcWorstCase {
        cumulative_24h_up: worst(&up, 24 * 3600),
        cumulative_24h_down: worst(&down, 24 * 3600),
        up: up_t,
        down: down_t,
        non_increasing,
        missing_samples: miss[n],
    })
}

/// Full activation deviation of the primary-control droop, Hz.
pub const PFC_FULL_ACTIVATION_HZ: f64 = 0.2;

/// Primary-control power, kW (positive = injection), for a frequency
/// deviation signal. Missing samples give 0.
pub fn pfc_droop_response(freq: &FrequencySignal, p_bid_kw: f64) -> Vec<f64> {
    (0..freq.len())
        .map(|i| (-p_bid_kw * freq.at(i) / PFC_FULL_ACTIVATION_HZ).clamp(-p_bid_kw, p_bid_kw))
        .collect()
}

/// Hourly schedule a secondary-control replay runs against. Storage values
/// are aggregated over all units.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplayPlan {
    pub e0_kwh: f64,
    pub e_min_kwh: f64,
    pub e_max_kwh: f64,
    pub p_max_kw: f64,
    pub eta: f64,
    pub bid_kw: f64,
    /// Scheduled charging and discharging per hour, kW.
    pub ch_kw: Vec<f64>,
    pub dis_kw: Vec<f64>,
    /// PV headroom (available minus dispatched) per hour, kW.
    pub pv_headroom_kw: Vec<f64>,
    /// Dispatched PV per hour, kW.
    pub pv_output_kw: Vec<f64>,
    /// Worst-case tables used when the plan was made.
    pub worst_up: Vec<f64>,
    pub worst_down: Vec<f64>,
}

impl ReplayPlan {
    pub fn hours(&self) -> usize {
        self.ch_kw.len()
    }

    fn validate(&self) -> Result<()> {
        let n = self.hours();
        if [self.dis_kw.len(), self.pv_headroom_kw.len(), self.pv_output_kw.len()]
            .iter()
            .any(|&l| l != n)
        {
            return Err(Error::Input("replay plan series differ in length".into()));
        }
        if !(self.eta > 0.0 && self.eta <= 1.0) || self.e_min_kwh > self.e_max_kwh || self.bid_kw < 0.0 {
            return Err(Error::Input("replay plan storage parameters are inconsistent".into()));
        }
        if self.worst_up.is_empty() || self.worst_down.is_empty() {
            return Err(Error::Input("replay plan needs worst-case tables".into()));
        }
        Ok(())
    }

    /// Storage energy rate, kW, of an up-regulation call of `c` kW in hour
    /// `k`: the storage covers the call less the PV share, which is capped
    /// at half the call.
    fn up_rate(&self, c: f64, k: usize) -> f64 {
        let h = self.pv_headroom_kw.get(k).copied().unwrap_or(0.0).max(0.0);
        c / self.eta - (0.5 * c / self.eta).min(h)
    }

    fn down_rate(&self, c: f64, k: usize) -> f64 {
        let g = self.pv_output_kw.get(k).copied().unwrap_or(0.0).max(0.0);
        self.eta * c - (0.5 * self.eta * c).min(g)
    }

    fn scheduled_rate(&self, k: usize) -> f64 {
        match (self.ch_kw.get(k), self.dis_kw.get(k)) {
            (Some(c), Some(d)) => self.eta * c - d / self.eta,
            _ => 0.0,
        }
    }

    /// Reserved worst-case storage energy for up (down) calls starting at
    /// hour `d`, kWh, per call hour.
    pub fn envelope(&self, d: usize) -> (Vec<f64>, Vec<f64>) {
        let up = self
            .worst_up
            .iter()
            .enumerate()
            .map(|(i, w)| self.up_rate(self.bid_kw, d + i) * w)
            .collect();
        let down = self
            .worst_down
            .iter()
            .enumerate()
            .map(|(i, w)| self.down_rate(self.bid_kw, d + i) * w)
            .collect();
        (up, down)
    }
}

/// One spot-market transaction; positive energy is a purchase.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpotTrade {
    pub decided_hour: usize,
    pub delivery_hour: usize,
    /// Grid-side energy, kWh.
    pub energy_kwh: f64,
    pub price_eur_mwh: f64,
    pub cost_eur: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeliveryFailure {
    pub second: usize,
    /// Storage energy the call asked for but the band could not give, kWh.
    pub shortfall_kwh: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplayReport {
    /// Storage energy at the end of every minute, kWh.
    pub e_minute_kwh: Vec<f64>,
    /// Storage energy at every hour boundary, kWh (length hours + 1).
    pub e_hour_kwh: Vec<f64>,
    /// Same schedule without any calls or trades.
    pub e_hour_planned_kwh: Vec<f64>,
    pub trades: Vec<SpotTrade>,
    pub failures: Vec<DeliveryFailure>,
    /// Storage energy moved by up (down) calls per hour, kWh (both ≥ 0).
    pub delivered_up_kwh: Vec<f64>,
    pub delivered_down_kwh: Vec<f64>,
    /// Largest ratio of delivered call energy over any run of whole hours
    /// between trade opportunities to the reserved envelope for that many
    /// hours (≤ 1 means the envelope held).
    pub envelope_ratio: f64,
    /// `e_final − (e0 + schedule + calls + trades)`, kWh.
    pub conservation_residual_kwh: f64,
}

impl ReplayReport {
    pub fn n_purchases(&self) -> usize {
        self.trades.iter().filter(|t| t.energy_kwh > 0.0).count()
    }
}

/// Follow `signal` (activation fraction of the bid) second by second on top
/// of the hourly `plan`. PV covers up to half of each call where headroom
/// exists, the storage the rest. At every hour boundary the energy
/// projected for the hour `lead_time_h` ahead is checked against the
/// reserve envelope and a spot trade delivered in that hour restores it.
/// `buy` and `sell` are hourly prices, €/MWh.
pub fn sfc_call_replay(
    plan: &ReplayPlan,
    signal: &FrequencySignal,
    buy: &[f64],
    sell: &[f64],
    lead_time_h: usize,
) -> Result<ReplayReport> {
    plan.validate()?;
    if signal.kind != SignalKind::Activation {
        return Err(Error::Input("secondary-control replay needs an activation signal".into()));
    }
    let hours = signal.len().div_ceil(3600);
    if plan.hours() < hours {
        return Err(Error::Input(format!(
            "plan covers {} h but the signal runs {hours} h",
            plan.hours()
        )));
    }
    if buy.len() < hours + lead_time_h || sell.len() < hours + lead_time_h {
        return Err(Error::Input("spot prices do not cover the replay and its lead time".into()));
    }
    let dt = 1.0 / 3600.0;
    let mut e = plan.e0_kwh;
    let mut planned = vec![plan.e0_kwh];
    for k in 0..hours {
        let last = *planned.last().unwrap();
        planned.push(last + plan.scheduled_rate(k));
    }
    // Trade energy entering storage per hour, kWh (after efficiency).
    let mut traded = vec![0.0; hours + lead_time_h + 1];
    let mut trades = Vec::new();
    let mut failures = Vec::new();
    let mut up_h = vec![0.0; hours];
    let mut down_h = vec![0.0; hours];
    let mut e_minute = Vec::with_capacity(signal.len() / 60 + 1);
    let mut e_hour = vec![e];
    let (mut sum_sched, mut sum_calls, mut sum_trades) = (0.0, 0.0, 0.0);

    for k in 0..hours {
        // Trade decision for delivery hour k + lead.
        let d = k + lead_time_h;
        if d < plan.hours() && traded[d] == 0.0 {
            let mut proj = e;
            for j in k..d {
                proj += plan.scheduled_rate(j) + traded[j];
            }
            let (env_up, env_down) = plan.envelope(d);
            let mut low = 0.0f64;
            let mut high = 0.0f64;
            let (mut shadow_up, mut shadow_down) = (proj, proj);
            for (i, (u, w)) in env_up.iter().zip(&env_down).enumerate() {
                let s = plan.scheduled_rate(d + i);
                shadow_up += s - u;
                shadow_down += s + w;
                low = low.max(plan.e_min_kwh - shadow_up);
                high = high.max(shadow_down - plan.e_max_kwh);
            }
            let room = plan.p_max_kw;
            let into = if low > 1e-9 {
                low.min(room * plan.eta)
            } else if high > 1e-9 {
                -high.min(room / plan.eta)
            } else {
                0.0
            };
            if into != 0.0 {
                let grid = if into > 0.0 { into / plan.eta } else { into * plan.eta };
                let price = if grid > 0.0 { buy[d] } else { sell[d] };
                traded[d] = into;
                trades.push(SpotTrade {
                    decided_hour: k,
                    delivery_hour: d,
                    energy_kwh: grid,
                    price_eur_mwh: price,
                    cost_eur: grid * price / 1000.0,
                });
            }
        }

        let base = plan.scheduled_rate(k) + traded[k];
        let end = ((k + 1) * 3600).min(signal.len());
        for i in k * 3600..end {
            let step = base * dt;
            e += step;
            if k < traded.len() {
                sum_trades += traded[k] * dt;
            }
            sum_sched += plan.scheduled_rate(k) * dt;
            let a = signal.at(i).clamp(-1.0, 1.0);
            let c = a.abs() * plan.bid_kw;
            let want = if a > 0.0 {
                -plan.up_rate(c, k) * dt
            } else {
                plan.down_rate(c, k) * dt
            };
            let target = e + want;
            let got = target.clamp(plan.e_min_kwh, plan.e_max_kwh) - e;
            if (got - want).abs() > 1e-12 {
                failures.push(DeliveryFailure {
                    second: i,
                    shortfall_kwh: (want - got).abs(),
                });
            }
            e += got;
            sum_calls += got;
            if got < 0.0 {
                up_h[k] -= got;
            } else {
                down_h[k] += got;
            }
            if (i + 1) % 60 == 0 || i + 1 == signal.len() {
                e_minute.push(e);
            }
        }
        e_hour.push(e);
    }

    let envelope_ratio = envelope_ratio(plan, &up_h, &down_h, hours);
    let residual = e - (plan.e0_kwh + sum_sched + sum_calls + sum_trades);
    Ok(ReplayReport {
        e_minute_kwh: e_minute,
        e_hour_kwh: e_hour,
        e_hour_planned_kwh: planned,
        trades,
        failures,
        delivered_up_kwh: up_h,
        delivered_down_kwh: down_h,
        envelope_ratio,
        conservation_residual_kwh: residual,
    })
}

/// Trades can be placed every hour, so the relevant runs are whole-hour
/// windows up to the table length; each run's delivered energy is compared
/// with the envelope of a call starting where the run starts.
fn envelope_ratio(plan: &ReplayPlan, up: &[f64], down: &[f64], hours: usize) -> f64 {
    let mut worst: f64 = 0.0;
    for s in 0..hours {
        let (env_up, env_down) = plan.envelope(s);
        let (mut du, mut dd, mut eu, mut ed) = (0.0, 0.0, 0.0, 0.0);
        for len in 0..env_up.len().min(hours - s) {
            du += up[s + len];
            dd += down[s + len];
            eu += env_up[len];
            ed += env_down[len];
            for (x, cap) in [(du, eu), (dd, ed)] {
                if x > 1e-9 {
                    worst = worst.max(if cap > 0.0 { x / cap } else { f64::INFINITY });
                }
            }
        }
    }
    worst
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn flat_plan(hours: usize, bid: f64) -> ReplayPlan {
        ReplayPlan {
            e0_kwh: 242.0,
            e_min_kwh: 0.0,
            e_max_kwh: 484.0,
            p_max_kw: 484.0,
            eta: 0.95,
            bid_kw: bid,
            ch_kw: vec![0.0; hours],
            dis_kw: vec![0.0; hours],
            pv_headroom_kw: vec![0.0; hours],
            pv_output_kw: vec![0.0; hours],
            worst_up: vec![1.0; 4],
            worst_down: vec![1.0; 4],
        }
    }

    #[test]
    fn constant_full_call_saturates() {
        let s = FrequencySignal::new(SignalKind::Activation, 0, vec![1.0; 30 * 3600]);
        let w = analyze_sfc_signal(&s, 4).unwrap();
        assert_eq!(w.up, vec![1.0; 4]);
        assert_eq!(w.down, vec![0.0; 4]);
        assert_eq!(w.cumulative_24h_up, Some(24.0));
    }

    #[test]
    fn zero_signal_gives_zero_table() {
        let s = FrequencySignal::new(SignalKind::Activation, 0, vec![0.0; 5 * 3600]);
        let w = analyze_sfc_signal(&s, 4).unwrap();
        assert_eq!(w.up, vec![0.0; 4]);
        assert_eq!(w.cumulative_24h_up, None);
    }

    #[test]
    fn square_wave_is_half() {
        let s = square_wave(48 * 3600, 3600, 1800, 1.0);
        let w = analyze_sfc_signal(&s, 4).unwrap();
        for v in &w.up {
            assert_abs_diff_eq!(*v, 0.5, epsilon = 1e-12);
        }
    }

    #[test]
    fn short_signal_is_rejected() {
        let s = FrequencySignal::new(SignalKind::Activation, 0, vec![0.0; 3599]);
        assert!(analyze_sfc_signal(&s, 1).is_err());
    }

    #[test]
    fn gaps_are_flagged_and_skipped() {
        let mut v = vec![1.0; 3 * 3600];
        v[10] = f64::NAN;
        v[11] = f64::NAN;
        let s = FrequencySignal::new(SignalKind::Activation, 0, v);
        assert_eq!(s.gaps(), vec![(10, 12)]);
        let w = analyze_sfc_signal(&s, 1).unwrap();
        assert_eq!(w.missing_samples, 2);
        assert_abs_diff_eq!(w.up[0], 1.0, epsilon = 1e-12);
    }

    #[test]
    fn droop_points() {
        let f = FrequencySignal::new(SignalKind::FrequencyDeviation, 0, vec![0.0, -0.2, -0.1, 0.3, f64::NAN]);
        let p = pfc_droop_response(&f, 100.0);
        assert_eq!(p[0], 0.0);
        assert_abs_diff_eq!(p[1], 100.0, epsilon = 1e-12);
        assert_abs_diff_eq!(p[2], 50.0, epsilon = 1e-12);
        assert_abs_diff_eq!(p[3], -100.0, epsilon = 1e-12);
        assert_eq!(p[4], 0.0);
    }

    #[test]
    fn zero_signal_follows_the_schedule() {
        let mut plan = flat_plan(3, 20.0);
        plan.ch_kw = vec![10.0, 0.0, 0.0];
        plan.dis_kw = vec![0.0, 5.0, 0.0];
        let s = FrequencySignal::new(SignalKind::Activation, 0, vec![0.0; 3 * 3600]);
        let r = sfc_call_replay(&plan, &s, &[40.0; 8], &[30.0; 8], 1).unwrap();
        assert!(r.trades.is_empty());
        for (a, b) in r.e_hour_kwh.iter().zip(&r.e_hour_planned_kwh) {
            assert_abs_diff_eq!(*a, *b, epsilon = 1e-9);
        }
    }

    #[test]
    fn quarter_hour_full_call_drains_bid_over_eta() {
        let plan = flat_plan(1, 100.0);
        let mut v = vec![0.0; 3600];
        v[..900].iter_mut().for_each(|x| *x = 1.0);
        let s = FrequencySignal::new(SignalKind::Activation, 0, v);
        let r = sfc_call_replay(&plan, &s, &[40.0; 4], &[30.0; 4], 1).unwrap();
        assert_abs_diff_eq!(242.0 - r.e_hour_kwh[1], 100.0 * 0.25 / 0.95, epsilon = 1e-9);
        assert!(r.conservation_residual_kwh.abs() < 1e-9);
    }

    #[test]
    fn low_energy_triggers_a_purchase() {
        let mut plan = flat_plan(12, 100.0);
        plan.e0_kwh = 200.0;
        let s = FrequencySignal::new(SignalKind::Activation, 0, vec![1.0; 8 * 3600]);
        let r = sfc_call_replay(&plan, &s, &[40.0; 16], &[30.0; 16], 1).unwrap();
        assert!(r.n_purchases() > 0);
        assert!(r.conservation_residual_kwh.abs() < 1e-6);
    }
}
