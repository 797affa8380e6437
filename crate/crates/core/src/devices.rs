//! DER parameterization: PV units, battery storage, flexible and fixed loads.
//!
//! Device data is kept in physical units (kW, kWh, h). Conversion to
//! per-unit happens when a horizon program is assembled.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PvUnit {
    pub id: String,
    pub bus: usize,
    /// Inverter apparent-power rating, kVA.
    pub s_rating_kva: f64,
    /// Available active power per step, kW.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub p_max_profile: Vec<f64>,
    /// Minimum power factor in grid-connected operation.
    #[serde(default = "default_pv_pf")]
    pub min_power_factor: f64,
}

fn default_pv_pf() -> f64 {
    0.9
}

impl PvUnit {
    pub fn validate(&self) -> Result<()> {
        if self.p_max_profile.iter().any(|p| !(*p >= 0.0)) {
            return Err(Error::Input(format!("pv {}: negative or NaN availability", self.id)));
        }
        let peak = self.p_max_profile.iter().copied().fold(0.0, f64::max);
        if self.s_rating_kva + 1e-9 < peak {
            return Err(Error::Input(format!(
                "pv {}: rating {} kVA below peak availability {} kW",
                self.id, self.s_rating_kva, peak
            )));
        }
        if !(self.min_power_factor > 0.0 && self.min_power_factor <= 1.0) {
            return Err(Error::Input(format!("pv {}: power factor outside (0, 1]", self.id)));
        }
        Ok(())
    }

    /// Grid-connected reactive band `[q_min, q_max]` for an availability `p_max`.
    pub fn q_bounds(&self, p_max: f64) -> (f64, f64) {
        let tan_phi = self.min_power_factor.acos().tan();
        (-tan_phi * p_max, tan_phi * p_max)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BessUnit {
    pub id: String,
    pub bus: usize,
    pub e_cap_kwh: f64,
    pub p_max_kw: f64,
    #[serde(default)]
    pub soc_min: f64,
    #[serde(default = "one")]
    pub soc_max: f64,
    pub eta: f64,
    #[serde(default = "default_tan_phi")]
    pub tan_phi_max: f64,
    pub e_initial_kwh: f64,
}

fn one() -> f64 {
    1.0
}

fn default_tan_phi() -> f64 {
    // cos φ = 0.9
    0.9f64.acos().tan()
}

impl BessUnit {
    pub fn validate(&self) -> Result<()> {
        if !(0.0 <= self.soc_min && self.soc_min < self.soc_max && self.soc_max <= 1.0) {
            return Err(Error::Input(format!("bess {}: need 0 <= soc_min < soc_max <= 1", self.id)));
        }
        if !(self.eta > 0.0 && self.eta <= 1.0) {
            return Err(Error::Input(format!("bess {}: efficiency outside (0, 1]", self.id)));
        }
        if self.e_cap_kwh < 0.0 || self.p_max_kw < 0.0 || self.tan_phi_max < 0.0 {
            return Err(Error::Input(format!("bess {}: negative rating", self.id)));
        }
        let tol = 1e-9 * self.e_cap_kwh.max(1.0);
        if self.e_initial_kwh < self.e_min() - tol || self.e_initial_kwh > self.e_max() + tol {
            return Err(Error::Input(format!("bess {}: initial energy outside SoC band", self.id)));
        }
        Ok(())
    }

    pub fn e_min(&self) -> f64 {
        self.soc_min * self.e_cap_kwh
    }

    pub fn e_max(&self) -> f64 {
        self.soc_max * self.e_cap_kwh
    }

    /// Same unit with a different installed capacity; the initial energy
    /// keeps its state of charge.
    pub fn with_capacity(&self, e_cap_kwh: f64) -> BessUnit {
        let soc = if self.e_cap_kwh > 0.0 {
            self.e_initial_kwh / self.e_cap_kwh
        } else {
            self.soc_max
        };
        BessUnit {
            e_cap_kwh,
            e_initial_kwh: soc * e_cap_kwh,
            ..self.clone()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlexLoad {
    pub id: String,
    pub bus: usize,
    /// Shiftable demand per step, kW.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub p_shift_profile: Vec<f64>,
    /// Factors already applied, oldest first. Append-only.
    #[serde(default)]
    pub f_history: Vec<f64>,
    #[serde(default = "default_load_pf")]
    pub power_factor: f64,
}

impl FlexLoad {
    pub fn validate(&self) -> Result<()> {
        if self.f_history.iter().any(|f| !(-1.0..=1.0).contains(f)) {
            return Err(Error::Input(format!("flexload {}: factor outside [-1, 1]", self.id)));
        }
        if self.p_shift_profile.iter().any(|p| !(*p >= 0.0)) {
            return Err(Error::Input(format!("flexload {}: negative shiftable power", self.id)));
        }
        Ok(())
    }

    pub fn record(&mut self, factor: f64) {
        self.f_history.push(factor.clamp(-1.0, 1.0));
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LoadPoint {
    pub id: String,
    pub bus: usize,
    /// Non-shiftable demand per step, kW.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub p_profile: Vec<f64>,
    #[serde(default = "default_load_pf")]
    pub power_factor: f64,
}

fn default_load_pf() -> f64 {
    0.95
}

impl LoadPoint {
    pub fn validate(&self) -> Result<()> {
        if !(self.power_factor > 0.0 && self.power_factor <= 1.0) {
            return Err(Error::Input(format!("load {}: power factor outside (0, 1]", self.id)));
        }
        if self.p_profile.iter().any(|p| !p.is_finite()) {
            return Err(Error::Input(format!("load {}: non-finite demand", self.id)));
        }
        Ok(())
    }

    pub fn tan_phi(&self) -> f64 {
        self.power_factor.acos().tan()
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct DeviceFleet {
    #[serde(default)]
    pub pv: Vec<PvUnit>,
    #[serde(default)]
    pub bess: Vec<BessUnit>,
    #[serde(default)]
    pub flexload: Vec<FlexLoad>,
    #[serde(default)]
    pub load: Vec<LoadPoint>,
}

impl DeviceFleet {
    pub fn validate(&self) -> Result<()> {
        self.pv.iter().try_for_each(PvUnit::validate)?;
        self.bess.iter().try_for_each(BessUnit::validate)?;
        self.flexload.iter().try_for_each(FlexLoad::validate)?;
        self.load.iter().try_for_each(LoadPoint::validate)?;
        let mut ids = std::collections::HashSet::new();
        let all = self
            .pv
            .iter()
            .map(|d| &d.id)
            .chain(self.bess.iter().map(|d| &d.id))
            .chain(self.flexload.iter().map(|d| &d.id))
            .chain(self.load.iter().map(|d| &d.id));
        for id in all {
            if !ids.insert(id) {
                return Err(Error::Input(format!("duplicate device id {id}")));
            }
        }
        Ok(())
    }

    /// Steps covered by every profile.
    pub fn span(&self) -> usize {
        self.pv
            .iter()
            .map(|p| p.p_max_profile.len())
            .chain(self.flexload.iter().map(|f| f.p_shift_profile.len()))
            .chain(self.load.iter().map(|l| l.p_profile.len()))
            .min()
            .unwrap_or(usize::MAX)
    }

    /// Total fixed demand at step `t`, kW.
    pub fn total_load(&self, t: usize) -> f64 {
        self.load.iter().map(|l| l.p_profile[t]).sum()
    }
}

/// Energy after one step of charging `p_ch` and discharging `p_dis` for `dt`
/// hours, with `eta` applied in each direction.
pub fn bess_energy_step(e_prev: f64, p_ch: f64, p_dis: f64, dt: f64, eta: f64) -> f64 {
    e_prev + (eta * p_ch - p_dis / eta) * dt
}

/// Reactive power magnitude cap of a battery inverter in grid-connected mode.
pub fn bess_q_bound(p_ch: f64, p_dis: f64, tan_phi_max: f64) -> f64 {
    p_ch.max(p_dis) * tan_phi_max
}

/// Sum of past and planned shift factors; zero when the shifted energy is
/// returned within the simulation.
pub fn flexload_conservation_residual(flex: &FlexLoad, planned: &[f64]) -> f64 {
    flex.f_history.iter().sum::<f64>() + planned.iter().sum::<f64>()
}

/// Reactive capability left on the apparent-power circle at active output `p_g`.
pub fn pv_islanded_q_cap(p_g: f64, s_rating: f64) -> Result<f64> {
    if p_g > s_rating * (1.0 + 1e-12) || p_g < 0.0 {
        return Err(Error::Input(format!(
            "active output {p_g} outside [0, {s_rating}]"
        )));
    }
    Ok((s_rating * s_rating - p_g * p_g).max(0.0).sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    #[test]
    fn energy_step_examples() {
        assert_eq!(bess_energy_step(100.0, 0.0, 0.0, 1.0, 0.95), 100.0);
        assert_relative_eq!(bess_energy_step(100.0, 10.0, 0.0, 1.0, 0.95), 109.5, epsilon = 1e-12);
        assert_relative_eq!(bess_energy_step(100.0, 0.0, 10.0, 1.0, 0.95), 89.47368421052632, epsilon = 1e-12);
        assert_relative_eq!(bess_energy_step(100.0, 0.0, 10.0, 1.0, 0.95), 100.0 - 10.0 / 0.95, epsilon = 1e-12);
    }

    #[test]
    fn q_bound_examples() {
        assert_eq!(bess_q_bound(0.0, 0.0, 0.48), 0.0);
        assert_relative_eq!(bess_q_bound(10.0, 0.0, 0.48), 4.8, epsilon = 1e-12);
        assert_eq!(bess_q_bound(0.0, 7.0, 1.0), 7.0);
    }

    #[test]
    fn conservation_examples() {
        let mut f = FlexLoad {
            id: "f".into(),
            bus: 2,
            p_shift_profile: vec![5.0; 4],
            f_history: vec![],
            power_factor: 0.95,
        };
        assert_eq!(flexload_conservation_residual(&f, &[0.0, 0.0]), 0.0);
        f.f_history = vec![0.3, 0.1];
        assert_relative_eq!(flexload_conservation_residual(&f, &[-0.2, -0.2]), 0.0, epsilon = 1e-12);
        assert_relative_eq!(flexload_conservation_residual(&f, &[0.0, 0.0]), 0.4, epsilon = 1e-12);
    }

    #[test]
    fn pv_q_cap_examples() {
        assert_eq!(pv_islanded_q_cap(0.0, 1.0).unwrap(), 1.0);
        assert_eq!(pv_islanded_q_cap(1.0, 1.0).unwrap(), 0.0);
        assert_relative_eq!(pv_islanded_q_cap(0.6, 1.0).unwrap(), 0.8, epsilon = 1e-12);
        assert!(pv_islanded_q_cap(1.2, 1.0).is_err());
    }

    #[test]
    fn bess_validation() {
        let b = BessUnit {
            id: "b".into(),
            bus: 2,
            e_cap_kwh: 100.0,
            p_max_kw: 50.0,
            soc_min: 0.2,
            soc_max: 0.9,
            eta: 0.95,
            tan_phi_max: 0.48,
            e_initial_kwh: 50.0,
        };
        assert!(b.validate().is_ok());
        assert!(BessUnit { e_initial_kwh: 95.0, ..b.clone() }.validate().is_err());
        assert!(BessUnit { eta: 1.2, ..b.clone() }.validate().is_err());
        assert!(BessUnit { soc_min: 0.95, ..b.clone() }.validate().is_err());
        let big = b.with_capacity(200.0);
        assert_relative_eq!(big.e_initial_kwh, 100.0);
    }

    #[test]
    fn pv_q_band_default() {
        let pv = PvUnit {
            id: "pv".into(),
            bus: 3,
            s_rating_kva: 10.0,
            p_max_profile: vec![10.0],
            min_power_factor: 0.9,
        };
        let (lo, hi) = pv.q_bounds(10.0);
        assert_relative_eq!(hi, 10.0 * 25.841932763_f64.to_radians().tan(), epsilon = 1e-6);
        assert_relative_eq!(lo, -hi);
    }

    proptest! {
        #[test]
        fn round_trip_loss(e in 0.0..500.0f64, p in 0.0..100.0f64, eta in 0.5..1.0f64) {
            // charge p for one hour, then discharge p·eta² — back to start
            let up = bess_energy_step(e, p, 0.0, 1.0, eta);
            let back = bess_energy_step(up, 0.0, p * eta * eta, 1.0, eta);
            prop_assert!((back - e).abs() < 1e-9);
            // discharging the full charged amount loses energy when eta < 1
            let lossy = bess_energy_step(up, 0.0, p, 1.0, eta);
            prop_assert!(lossy <= e + 1e-12);
        }

        #[test]
        fn energy_step_is_affine(e in 0.0..100.0f64, a in 0.0..10.0f64, b in 0.0..10.0f64, c in 0.0..10.0f64, d in 0.0..10.0f64) {
            let lhs = bess_energy_step(e, a + c, b + d, 1.0, 0.9) - e;
            let rhs = (bess_energy_step(e, a, b, 1.0, 0.9) - e) + (bess_energy_step(e, c, d, 1.0, 0.9) - e);
            prop_assert!((lhs - rhs).abs() < 1e-9);
        }
    }
}
