//! Backward/forward sweep AC power flow on a radial [`GridTopology`].
//!
//! Injections are positive into the network (generation), loads negative.
//! The root bus injection is free and follows from the flows.

use std::io::Write;

use nalgebra::DMatrix;
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::GridTopology;

/// Per-bus active and reactive injections for one time step, per-unit.
/// The entry at the root is ignored.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct InjectionProfile {
    pub p: Vec<f64>,
    pub q: Vec<f64>,
}

impl InjectionProfile {
    pub fn zeros(n: usize) -> Self {
        InjectionProfile {
            p: vec![0.0; n],
            q: vec![0.0; n],
        }
    }

    pub fn len(&self) -> usize {
        self.p.len()
    }

    pub fn is_empty(&self) -> bool {
        self.p.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct VoltageProfile {
    pub v: Vec<Complex64>,
}

impl VoltageProfile {
    pub fn flat(n: usize) -> Self {
        VoltageProfile {
            v: vec![Complex64::new(1.0, 0.0); n],
        }
    }

    pub fn magnitudes(&self) -> Vec<f64> {
        self.v.iter().map(|v| v.norm()).collect()
    }

    pub fn max_abs_diff(&self, other: &VoltageProfile) -> f64 {
        self.v
            .iter()
            .zip(&other.v)
            .map(|(a, b)| (a - b).norm())
            .fold(0.0, f64::max)
    }
}

#[derive(Debug, Clone)]
pub struct FlowState {
    pub i_inj: Vec<Complex64>,
    pub i_br: Vec<Complex64>,
    pub voltages: VoltageProfile,
    pub iterations: usize,
    /// max |ΔV| per iteration.
    pub trace: Vec<f64>,
}

impl FlowState {
    /// Complex power the root injects into the feeder.
    pub fn slack_power(&self) -> Complex64 {
        let total: Complex64 = self.i_inj.iter().skip(1).sum();
        self.voltages.v[0] * (-total).conj()
    }

    /// Whether the per-iteration |ΔV| is non-increasing after the first two
    /// iterations. Diagnostic only.
    pub fn monotone_after_two(&self) -> bool {
        self.trace
            .windows(2)
            .skip(1)
            .all(|w| w[1] <= w[0] * (1.0 + 1e-9) + 1e-15)
    }

    pub fn write_trace_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "iteration,max_dv")?;
        for (k, d) in self.trace.iter().enumerate() {
            writeln!(w, "{},{:e}", k + 1, d)?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PfSettings {
    pub tolerance: f64,
    pub max_iterations: usize,
}

impl Default for PfSettings {
    fn default() -> Self {
        PfSettings {
            tolerance: 1e-8,
            max_iterations: 100,
        }
    }
}

/// Bus current injections and branch currents for fixed voltages.
pub fn backward_sweep(
    topology: &GridTopology,
    injections: &InjectionProfile,
    voltages: &VoltageProfile,
) -> Result<(Vec<Complex64>, Vec<Complex64>)> {
    let n = topology.n_buses();
    let mut i_inj = vec![Complex64::new(0.0, 0.0); n];
    for j in 1..n {
        let v = voltages.v[j];
        if !(v.norm() > 1e-12) {
            return Err(Error::ZeroVoltage(topology.buses()[j].id));
        }
        let s = Complex64::new(injections.p[j], injections.q[j]);
        i_inj[j] = (s / v).conj();
    }
    let i_br = accumulate_branch_currents(topology, &i_inj);
    Ok((i_inj, i_br))
}

/// `I_br = BIBC · I_inj`, evaluated by accumulating subtree sums leaf-first.
pub fn accumulate_branch_currents(topology: &GridTopology, i_inj: &[Complex64]) -> Vec<Complex64> {
    let mut subtree: Vec<Complex64> = i_inj.to_vec();
    subtree[0] = Complex64::new(0.0, 0.0);
    let mut i_br = vec![Complex64::new(0.0, 0.0); topology.n_branches()];
    for &bus in topology.bfs_order().iter().rev() {
        if let Some(k) = topology.parent_branch(bus) {
            i_br[k] = subtree[bus];
            let parent = topology.branches()[k].from;
            let add = subtree[bus];
            subtree[parent] += add;
        }
    }
    i_br
}

/// Bus voltages from branch currents and the OLTC position.
pub fn forward_sweep(topology: &GridTopology, i_br: &[Complex64], tap: f64) -> Result<VoltageProfile> {
    topology.oltc().check_tap(tap)?;
    let mut v = vec![Complex64::new(0.0, 0.0); topology.n_buses()];
    v[0] = topology.oltc().root_voltage(tap);
    for &bus in topology.bfs_order().iter().skip(1) {
        let k = topology.parent_branch(bus).expect("non-root bus has a parent");
        let br = &topology.branches()[k];
        v[bus] = v[br.from] + br.impedance * i_br[k];
    }
    Ok(VoltageProfile { v })
}

/// Iterate sweeps from a flat start until the largest voltage update drops
/// below the tolerance.
pub fn solve_bfs(
    topology: &GridTopology,
    injections: &InjectionProfile,
    tap: f64,
    settings: &PfSettings,
) -> Result<FlowState> {
    topology.oltc().check_tap(tap)?;
    let n = topology.n_buses();
    let mut v = VoltageProfile::flat(n);
    v.v[0] = topology.oltc().root_voltage(tap);
    let mut trace = Vec::new();
    for it in 1..=settings.max_iterations {
        let (i_inj, i_br) = match backward_sweep(topology, injections, &v) {
            Ok(x) => x,
            Err(Error::ZeroVoltage(_)) => {
                return Err(Error::PowerFlowDivergence {
                    iterations: it,
                    last_delta: f64::INFINITY,
                })
            }
            Err(e) => return Err(e),
        };
        let v_new = forward_sweep(topology, &i_br, tap)?;
        let delta = v_new.max_abs_diff(&v);
        trace.push(delta);
        if !delta.is_finite() {
            break;
        }
        v = v_new;
        if delta < settings.tolerance {
            // Currents consistent with the final voltages.
            let (i_inj, i_br) = backward_sweep(topology, injections, &v).unwrap_or((i_inj, i_br));
            return Ok(FlowState {
                i_inj,
                i_br,
                voltages: v,
                iterations: it,
                trace,
            });
        }
    }
    Err(Error::PowerFlowDivergence {
        iterations: trace.len(),
        last_delta: trace.last().copied().unwrap_or(f64::NAN),
    })
}

/// Affine single-sweep network model around a frozen voltage estimate.
///
/// For each non-root bus `k`, `I_k = a_k·P_k + b_k·Q_k` with
/// `a_k = 1/conj(V̄_k)` and `b_k = −j/conj(V̄_k)`. Voltages follow as
/// `V = V_root(ρ) + BCBV·BIBC·I` and branch currents as `I_br = BIBC·I`.
#[derive(Debug, Clone)]
pub struct LinearNetwork {
    pub v_bar: VoltageProfile,
    pub coef_p: Vec<Complex64>,
    pub coef_q: Vec<Complex64>,
    /// `(N−1) × (N−1)` product BCBV·BIBC.
    pub path_impedance: DMatrix<Complex64>,
}

impl LinearNetwork {
    /// Evaluate voltages (all buses) and branch currents.
    pub fn evaluate(
        &self,
        topology: &GridTopology,
        injections: &InjectionProfile,
        tap: f64,
    ) -> (VoltageProfile, Vec<Complex64>) {
        let n = topology.n_buses();
        let i: Vec<Complex64> = (1..n)
            .map(|k| self.coef_p[k] * injections.p[k] + self.coef_q[k] * injections.q[k])
            .collect();
        let iv = nalgebra::DVector::from_vec(i.clone());
        let dv = &self.path_impedance * &iv;
        let ibr = topology.bibc().map(|x| Complex64::new(x, 0.0)) * &iv;
        let root = topology.oltc().root_voltage(tap);
        let mut v = vec![root; n];
        for k in 1..n {
            v[k] = root + dv[k - 1];
        }
        (VoltageProfile { v }, ibr.iter().copied().collect())
    }
}

pub fn linearized_network_coefficients(topology: &GridTopology, v_bar: &VoltageProfile) -> Result<LinearNetwork> {
    let n = topology.n_buses();
    let mut coef_p = vec![Complex64::new(0.0, 0.0); n];
    let mut coef_q = vec![Complex64::new(0.0, 0.0); n];
    for k in 1..n {
        let vb = v_bar.v[k];
        if !(vb.norm() > 1e-12) {
            return Err(Error::ZeroVoltage(topology.buses()[k].id));
        }
        let inv = Complex64::new(1.0, 0.0) / vb.conj();
        coef_p[k] = inv;
        coef_q[k] = Complex64::new(0.0, -1.0) * inv;
    }
    let bibc_c = topology.bibc().map(|x| Complex64::new(x, 0.0));
    let path_impedance = topology.bcbv() * bibc_c;
    Ok(LinearNetwork {
        v_bar: v_bar.clone(),
        coef_p,
        coef_q,
        path_impedance,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::{Bus, BusKind, OltcSpec, PerUnitBase};

    fn chain(n: usize) -> GridTopology {
        let buses = (1..=n)
            .map(|id| Bus {
                id,
                kind: if id == 1 { BusKind::Slack } else { BusKind::Load },
                base_kv: 0.4,
            })
            .collect();
        let branches = (1..n)
            .map(|k| (k, k, k + 1, Complex64::new(0.01 * k as f64, 0.004), 1.0))
            .collect();
        GridTopology::new(
            buses,
            branches,
            OltcSpec {
                tap_step: 0.00625,
                tap_min: -4,
                tap_max: 4,
                slack_voltage: Complex64::new(1.0, 0.0),
            },
            PerUnitBase {
                s_base_kva: 400.0,
                v_base_kv: 0.4,
            },
        )
        .unwrap()
    }

    #[test]
    fn zero_injection_zero_current() {
        let t = chain(3);
        let (i, ibr) = backward_sweep(&t, &InjectionProfile::zeros(3), &VoltageProfile::flat(3)).unwrap();
        assert!(i.iter().chain(&ibr).all(|c| c.norm() == 0.0));
    }

    #[test]
    fn single_load_current() {
        let t = chain(2);
        let mut inj = InjectionProfile::zeros(2);
        inj.p[1] = 0.1;
        let (i, _) = backward_sweep(&t, &inj, &VoltageProfile::flat(2)).unwrap();
        assert!((i[1] - Complex64::new(0.1, 0.0)).norm() < 1e-15);
    }

    #[test]
    fn zero_voltage_is_error() {
        let t = chain(2);
        let mut v = VoltageProfile::flat(2);
        v.v[1] = Complex64::new(0.0, 0.0);
        assert!(matches!(
            backward_sweep(&t, &InjectionProfile::zeros(2), &v),
            Err(Error::ZeroVoltage(2))
        ));
    }

    #[test]
    fn branch_current_is_downstream_sum() {
        let t = chain(3);
        let inj = InjectionProfile {
            p: vec![0.0, -0.1, 0.05],
            q: vec![0.0, 0.02, -0.03],
        };
        let v = VoltageProfile {
            v: vec![
                Complex64::new(1.0, 0.0),
                Complex64::new(0.98, -0.01),
                Complex64::new(0.97, -0.02),
            ],
        };
        let (i, ibr) = backward_sweep(&t, &inj, &v).unwrap();
        assert!((ibr[1] - i[2]).norm() < 1e-15);
        assert!((ibr[0] - (i[1] + i[2])).norm() < 1e-15);
        // Same as the BIBC product.
        let prod = t.bibc().map(|x| Complex64::new(x, 0.0)) * nalgebra::DVector::from_vec(vec![i[1], i[2]]);
        assert!((prod[0] - ibr[0]).norm() < 1e-15 && (prod[1] - ibr[1]).norm() < 1e-15);
    }

    #[test]
    fn forward_sweep_tap_shift() {
        let t = chain(4);
        let v = forward_sweep(&t, &[Complex64::new(0.0, 0.0); 3], 0.0).unwrap();
        assert!(v.v.iter().all(|x| *x == Complex64::new(1.0, 0.0)));
        let v = forward_sweep(&t, &[Complex64::new(0.0, 0.0); 3], 1.0).unwrap();
        for x in &v.v {
            assert!((x - Complex64::new(0.99375, 0.0)).norm() < 1e-15);
        }
        assert!(matches!(
            forward_sweep(&t, &[Complex64::new(0.0, 0.0); 3], 5.0),
            Err(Error::TapOutOfRange { .. })
        ));
    }

    #[test]
    fn no_load_converges_in_one_iteration() {
        let t = chain(5);
        let s = solve_bfs(&t, &InjectionProfile::zeros(5), 0.0, &PfSettings::default()).unwrap();
        assert_eq!(s.iterations, 1);
        assert!(s.voltages.v.iter().all(|x| *x == Complex64::new(1.0, 0.0)));
    }

    #[test]
    fn absurd_load_diverges() {
        let t = chain(5);
        let mut inj = InjectionProfile::zeros(5);
        inj.p[4] = -100.0;
        assert!(matches!(
            solve_bfs(&t, &inj, 0.0, &PfSettings::default()),
            Err(Error::PowerFlowDivergence { .. })
        ));
    }

    #[test]
    fn power_balance_at_convergence() {
        let t = chain(6);
        let inj = InjectionProfile {
            p: vec![0.0, -0.1, -0.05, 0.08, -0.2, 0.03],
            q: vec![0.0, -0.03, 0.0, 0.01, -0.05, 0.0],
        };
        let s = solve_bfs(&t, &inj, 0.0, &PfSettings { tolerance: 1e-12, max_iterations: 200 }).unwrap();
        let losses: Complex64 = t
            .branches()
            .iter()
            .zip(&s.i_br)
            .map(|(b, i)| b.impedance * i.norm_sqr())
            .sum();
        let injected: f64 = inj.p.iter().skip(1).sum();
        let injected_q: f64 = inj.q.iter().skip(1).sum();
        let residual = s.slack_power() + Complex64::new(injected, injected_q) - losses;
        assert!(residual.norm() < 1e-8, "residual {residual}");
    }

    #[test]
    fn linear_model_matches_first_sweep_from_flat() {
        let t = chain(5);
        let inj = InjectionProfile {
            p: vec![0.0, -0.1, 0.05, -0.02, 0.07],
            q: vec![0.0, -0.02, 0.01, 0.0, -0.01],
        };
        let flat = VoltageProfile::flat(5);
        let lin = linearized_network_coefficients(&t, &flat).unwrap();
        let (v_lin, ibr_lin) = lin.evaluate(&t, &inj, 1.0);
        let (_, ibr) = backward_sweep(&t, &inj, &flat).unwrap();
        let v_sweep = forward_sweep(&t, &ibr, 1.0).unwrap();
        assert!(v_lin.max_abs_diff(&v_sweep) < 1e-14);
        for (a, b) in ibr_lin.iter().zip(&ibr) {
            assert!((a - b).norm() < 1e-14);
        }
        let (v0, _) = lin.evaluate(&t, &InjectionProfile::zeros(5), 0.0);
        assert!(v0.v.iter().all(|x| *x == Complex64::new(1.0, 0.0)));
    }

    #[test]
    fn linear_model_at_converged_point_is_fixed_point() {
        let t = chain(5);
        let inj = InjectionProfile {
            p: vec![0.0, -0.1, 0.05, -0.02, 0.07],
            q: vec![0.0, -0.02, 0.01, 0.0, -0.01],
        };
        let s = solve_bfs(&t, &inj, 0.0, &PfSettings::default()).unwrap();
        let lin = linearized_network_coefficients(&t, &s.voltages).unwrap();
        let (v_lin, _) = lin.evaluate(&t, &inj, 0.0);
        assert!(v_lin.max_abs_diff(&s.voltages) < 1e-7);
    }

    #[test]
    fn trace_csv() {
        let t = chain(3);
        let mut inj = InjectionProfile::zeros(3);
        inj.p[2] = -0.2;
        let s = solve_bfs(&t, &inj, 0.0, &PfSettings::default()).unwrap();
        let mut buf = Vec::new();
        s.write_trace_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("iteration,max_dv\n1,"));
        assert_eq!(text.lines().count(), s.iterations + 1);
    }
}
