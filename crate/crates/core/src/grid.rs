//! Radial network model.
//!
//! A [`GridTopology`] is a validated spanning tree rooted at the slack bus,
//! together with the bus-injection-to-branch-current (BIBC) and
//! branch-current-to-bus-voltage (BCBV) matrices. Branches are always stored
//! oriented parent → child, and bus index 0 is the root.
//!
//! Sign convention: a branch current is positive when it flows from the
//! child towards the root, i.e. positive bus injections produce positive
//! branch currents and *raise* downstream voltages:
//! `V = V_root − ΔV_tap·ρ + BCBV · I_br`.

use std::collections::{HashMap, VecDeque};
use std::path::Path;

use nalgebra::DMatrix;
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BusKind {
    Slack,
    Load,
    Junction,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Bus {
    pub id: usize,
    pub kind: BusKind,
    /// Nominal line-to-line voltage, kV.
    pub base_kv: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Branch {
    pub id: usize,
    /// Parent-side bus index (towards the root).
    pub from: usize,
    /// Child-side bus index.
    pub to: usize,
    pub impedance: Complex64,
    /// Thermal limit, per-unit current magnitude.
    pub ampacity: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OltcSpec {
    pub tap_step: f64,
    pub tap_min: i32,
    pub tap_max: i32,
    pub slack_voltage: Complex64,
}

impl OltcSpec {
    /// A transformer without tap changer, root held at `slack_voltage`.
    pub fn fixed(slack_voltage: Complex64) -> Self {
        OltcSpec {
            tap_step: 0.0,
            tap_min: 0,
            tap_max: 0,
            slack_voltage,
        }
    }

    pub fn check_tap(&self, tap: f64) -> Result<()> {
        if tap < self.tap_min as f64 - 1e-9 || tap > self.tap_max as f64 + 1e-9 {
            return Err(Error::TapOutOfRange {
                tap,
                min: self.tap_min,
                max: self.tap_max,
            });
        }
        Ok(())
    }

    /// Root voltage for a (possibly fractional) tap position.
    pub fn root_voltage(&self, tap: f64) -> Complex64 {
        self.slack_voltage - Complex64::new(self.tap_step * tap, 0.0)
    }
}

/// System bases used for per-unit conversion.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PerUnitBase {
    pub s_base_kva: f64,
    pub v_base_kv: f64,
}

impl PerUnitBase {
    pub fn z_base_ohm(&self, v_kv: f64) -> f64 {
        v_kv * v_kv * 1000.0 / self.s_base_kva
    }

    pub fn i_base_a(&self, v_kv: f64) -> f64 {
        self.s_base_kva / (3f64.sqrt() * v_kv)
    }

    pub fn kw_to_pu(&self, kw: f64) -> f64 {
        kw / self.s_base_kva
    }

    pub fn pu_to_kw(&self, pu: f64) -> f64 {
        pu * self.s_base_kva
    }

    pub fn ohm_to_pu(&self, z: Complex64, v_kv: f64) -> Complex64 {
        z / self.z_base_ohm(v_kv)
    }

    pub fn pu_to_ohm(&self, z: Complex64, v_kv: f64) -> Complex64 {
        z * self.z_base_ohm(v_kv)
    }

    pub fn amp_to_pu(&self, a: f64, v_kv: f64) -> f64 {
        a / self.i_base_a(v_kv)
    }

    pub fn pu_to_amp(&self, pu: f64, v_kv: f64) -> f64 {
        pu * self.i_base_a(v_kv)
    }
}

#[derive(Debug, Clone)]
pub struct GridTopology {
    buses: Vec<Bus>,
    branches: Vec<Branch>,
    oltc: OltcSpec,
    base: PerUnitBase,
    /// Branch feeding each bus (None for the root).
    parent_branch: Vec<Option<usize>>,
    /// Bus indices in breadth-first order from the root.
    order: Vec<usize>,
    index_of: HashMap<usize, usize>,
    bibc: DMatrix<f64>,
    bcbv: DMatrix<Complex64>,
}

impl GridTopology {
    /// Build a topology from a root bus and unoriented edges `(a, b, z, i_max)`
    /// given as bus indices. Edges are re-oriented away from `root`.
    fn from_tree(
        buses: Vec<Bus>,
        edges: Vec<(usize, usize, usize, Complex64, f64)>,
        root: usize,
        oltc: OltcSpec,
        base: PerUnitBase,
    ) -> Result<Self> {
        let n = buses.len();
        if n == 0 {
            return Err(Error::Topology("no buses".into()));
        }
        if edges.len() + 1 != n {
            return Err(Error::Topology(format!(
                "non-radial: {} buses need {} branches, found {}",
                n,
                n - 1,
                edges.len()
            )));
        }
        let mut adj: Vec<Vec<(usize, usize)>> = vec![Vec::new(); n];
        for (k, &(_, a, b, _, _)) in edges.iter().enumerate() {
            if a == b {
                return Err(Error::Topology(format!("non-radial: self-loop at bus {}", buses[a].id)));
            }
            adj[a].push((b, k));
            adj[b].push((a, k));
        }

        // Reorder so that the root becomes index 0; other buses keep their
        // relative order.
        let mut perm: Vec<usize> = Vec::with_capacity(n);
        perm.push(root);
        perm.extend((0..n).filter(|&i| i != root));
        let mut new_index = vec![0usize; n];
        for (new, &old) in perm.iter().enumerate() {
            new_index[old] = new;
        }

        let mut parent_edge: Vec<Option<usize>> = vec![None; n];
        let mut parent: Vec<Option<usize>> = vec![None; n];
        let mut seen = vec![false; n];
        let mut queue = VecDeque::from([root]);
        seen[root] = true;
        while let Some(u) = queue.pop_front() {
            for &(v, k) in &adj[u] {
                if Some(k) == parent_edge[u] {
                    continue;
                }
                if seen[v] {
                    return Err(Error::Topology(format!(
                        "non-radial: cycle through bus {}",
                        buses[v].id
                    )));
                }
                seen[v] = true;
                parent_edge[v] = Some(k);
                parent[v] = Some(u);
                queue.push_back(v);
            }
        }
        if let Some(i) = seen.iter().position(|s| !s) {
            return Err(Error::Topology(format!("disconnected bus {}", buses[i].id)));
        }

        let new_buses: Vec<Bus> = perm.iter().map(|&i| buses[i].clone()).collect();
        let mut new_branches = Vec::with_capacity(edges.len());
        let mut parent_branch = vec![None; n];
        for (k, &(id, a, b, z, imax)) in edges.iter().enumerate() {
            let (from, to) = if parent_edge[b] == Some(k) { (a, b) } else { (b, a) };
            parent_branch[new_index[to]] = Some(k);
            new_branches.push(Branch {
                id,
                from: new_index[from],
                to: new_index[to],
                impedance: z,
                ampacity: imax,
            });
        }

        let mut order = Vec::with_capacity(n);
        let mut queue = VecDeque::from([0usize]);
        let mut children: Vec<Vec<usize>> = vec![Vec::new(); n];
        for br in &new_branches {
            children[br.from].push(br.to);
        }
        while let Some(u) = queue.pop_front() {
            order.push(u);
            queue.extend(children[u].iter().copied());
        }

        let index_of = new_buses.iter().enumerate().map(|(i, b)| (b.id, i)).collect();
        let (bibc, bcbv) = build_sensitivity_matrices(n, &new_branches, &parent_branch);
        Ok(GridTopology {
            buses: new_buses,
            branches: new_branches,
            oltc,
            base,
            parent_branch,
            order,
            index_of,
            bibc,
            bcbv,
        })
    }

    /// Validate a bus/branch description whose bus ids are contiguous from
    /// 1 (slack) to N.
    pub fn new(
        buses: Vec<Bus>,
        branches: Vec<(usize, usize, usize, Complex64, f64)>,
        oltc: OltcSpec,
        base: PerUnitBase,
    ) -> Result<Self> {
        let mut index_of = HashMap::new();
        for (i, b) in buses.iter().enumerate() {
            if index_of.insert(b.id, i).is_some() {
                return Err(Error::Topology(format!("duplicate bus id {}", b.id)));
            }
        }
        let slacks: Vec<&Bus> = buses.iter().filter(|b| b.kind == BusKind::Slack).collect();
        match slacks.len() {
            0 => return Err(Error::Topology("missing slack bus".into())),
            1 => {}
            _ => return Err(Error::Topology("more than one slack bus".into())),
        }
        if slacks[0].id != 1 {
            return Err(Error::Topology("slack bus must have id 1".into()));
        }
        let mut ids: Vec<usize> = buses.iter().map(|b| b.id).collect();
        ids.sort_unstable();
        if ids.iter().enumerate().any(|(k, &id)| id != k + 1) {
            return Err(Error::Topology("bus ids must be contiguous from 1 to N".into()));
        }
        if oltc.tap_min > 0 || oltc.tap_max < 0 {
            return Err(Error::Topology("OLTC range must contain tap 0".into()));
        }
        if oltc.tap_step <= 0.0 && (oltc.tap_min != 0 || oltc.tap_max != 0) {
            return Err(Error::Topology("OLTC tap step must be positive".into()));
        }
        let mut branch_ids = std::collections::HashSet::new();
        let mut edges = Vec::with_capacity(branches.len());
        for (id, from, to, z, imax) in branches {
            if !branch_ids.insert(id) {
                return Err(Error::Topology(format!("duplicate branch id {id}")));
            }
            let a = *index_of
                .get(&from)
                .ok_or_else(|| Error::Topology(format!("branch {id} references unknown bus {from}")))?;
            let b = *index_of
                .get(&to)
                .ok_or_else(|| Error::Topology(format!("branch {id} references unknown bus {to}")))?;
            if z.re < 0.0 {
                return Err(Error::Topology(format!("branch {id} has negative resistance")));
            }
            if imax <= 0.0 {
                return Err(Error::Topology(format!("branch {id} has non-positive ampacity")));
            }
            edges.push((id, a, b, z, imax));
        }
        let root = index_of[&1];
        Self::from_tree(buses, edges, root, oltc, base)
    }

    /// Network seen when disconnected from the upstream grid: the root bus is
    /// dropped and `forming_bus` (an id) becomes the new root, held at 1∠0.
    pub fn islanded(&self, forming_bus: usize) -> Result<GridTopology> {
        let form = self.index(forming_bus)?;
        if form == 0 {
            return Err(Error::Topology("forming bus cannot be the slack bus".into()));
        }
        let root_degree = self.branches.iter().filter(|b| b.from == 0).count();
        if root_degree != 1 {
            return Err(Error::Topology(
                "islanding requires the slack bus to connect through a single branch".into(),
            ));
        }
        let keep: Vec<usize> = (1..self.buses.len()).collect();
        let buses: Vec<Bus> = keep
            .iter()
            .map(|&i| {
                let mut b = self.buses[i].clone();
                if i == form {
                    b.kind = BusKind::Slack;
                }
                b
            })
            .collect();
        let edges = self
            .branches
            .iter()
            .filter(|b| b.from != 0)
            .map(|b| (b.id, b.from - 1, b.to - 1, b.impedance, b.ampacity))
            .collect();
        Self::from_tree(
            buses,
            edges,
            form - 1,
            OltcSpec::fixed(Complex64::new(1.0, 0.0)),
            self.base,
        )
    }

    pub fn load_json(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_json_str(&text).map_err(|e| match e {
            Error::Json(j) => Error::Schema {
                file: path.display().to_string(),
                line: j.line(),
                msg: j.to_string(),
            },
            other => other,
        })
    }

    pub fn from_json_str(text: &str) -> Result<Self> {
        let doc: TopologyDocument = serde_json::from_str(text)?;
        doc.into_topology()
    }

    pub fn to_document(&self) -> TopologyDocument {
        let mut buses: Vec<BusDoc> = self
            .buses
            .iter()
            .map(|b| BusDoc {
                id: b.id,
                kind: b.kind,
                base_kv: Some(b.base_kv),
            })
            .collect();
        buses.sort_by_key(|b| b.id);
        TopologyDocument {
            base: self.base,
            buses,
            branches: self
                .branches
                .iter()
                .map(|br| BranchDoc {
                    id: Some(br.id),
                    from: self.buses[br.from].id,
                    to: self.buses[br.to].id,
                    r_pu: Some(br.impedance.re),
                    x_pu: Some(br.impedance.im),
                    r_ohm: None,
                    x_ohm: None,
                    i_max_pu: Some(br.ampacity),
                    i_max_a: None,
                })
                .collect(),
            oltc: OltcDoc {
                step_pu: self.oltc.tap_step,
                min: self.oltc.tap_min,
                max: self.oltc.tap_max,
                v_slack_pu: Some(self.oltc.slack_voltage.norm()),
                v_slack_angle_deg: Some(self.oltc.slack_voltage.arg().to_degrees()),
            },
        }
    }

    pub fn buses(&self) -> &[Bus] {
        &self.buses
    }

    pub fn branches(&self) -> &[Branch] {
        &self.branches
    }

    pub fn oltc(&self) -> &OltcSpec {
        &self.oltc
    }

    pub fn base(&self) -> &PerUnitBase {
        &self.base
    }

    pub fn n_buses(&self) -> usize {
        self.buses.len()
    }

    pub fn n_branches(&self) -> usize {
        self.branches.len()
    }

    /// Index of a bus id.
    pub fn index(&self, bus_id: usize) -> Result<usize> {
        self.index_of
            .get(&bus_id)
            .copied()
            .ok_or_else(|| Error::Input(format!("unknown bus id {bus_id}")))
    }

    pub fn contains(&self, bus_id: usize) -> bool {
        self.index_of.contains_key(&bus_id)
    }

    pub fn parent_branch(&self, bus: usize) -> Option<usize> {
        self.parent_branch[bus]
    }

    /// Bus indices, root first, every parent before its children.
    pub fn bfs_order(&self) -> &[usize] {
        &self.order
    }

    /// `|T| × (N−1)` incidence of branches on root→bus paths.
    pub fn bibc(&self) -> &DMatrix<f64> {
        &self.bibc
    }

    /// `(N−1) × |T|` path impedance matrix.
    pub fn bcbv(&self) -> &DMatrix<Complex64> {
        &self.bcbv
    }

    /// Branch indices on the path root → `bus`, root side first.
    pub fn path(&self, bus: usize) -> Vec<usize> {
        let mut out = Vec::new();
        let mut cur = bus;
        while let Some(k) = self.parent_branch[cur] {
            out.push(k);
            cur = self.branches[k].from;
        }
        out.reverse();
        out
    }

    pub fn depth(&self, bus: usize) -> usize {
        self.path(bus).len()
    }
}

/// Derive BIBC and BCBV for an oriented tree whose root is bus index 0.
///
/// BIBC columns and BCBV rows are indexed by non-root buses `1..N` (column
/// `j − 1` for bus `j`).
pub fn build_sensitivity_matrices(
    n_buses: usize,
    branches: &[Branch],
    parent_branch: &[Option<usize>],
) -> (DMatrix<f64>, DMatrix<Complex64>) {
    let nb = branches.len();
    let mut bibc = DMatrix::<f64>::zeros(nb, n_buses.saturating_sub(1));
    for j in 1..n_buses {
        let mut cur = j;
        while let Some(k) = parent_branch[cur] {
            bibc[(k, j - 1)] = 1.0;
            cur = branches[k].from;
        }
    }
    let mut bcbv = DMatrix::<Complex64>::zeros(n_buses.saturating_sub(1), nb);
    for j in 0..n_buses.saturating_sub(1) {
        for (k, br) in branches.iter().enumerate() {
            if bibc[(k, j)] != 0.0 {
                bcbv[(j, k)] = br.impedance;
            }
        }
    }
    (bibc, bcbv)
}

/// Voltage rise at every bus (index-aligned, root = 0) produced by the given
/// branch currents, computed by walking each root→bus path.
pub fn path_voltage_drop_oracle(topology: &GridTopology, branch_currents: &[Complex64]) -> Vec<Complex64> {
    let mut out = vec![Complex64::new(0.0, 0.0); topology.n_buses()];
    for (j, slot) in out.iter_mut().enumerate() {
        let mut cur = j;
        let mut acc = Complex64::new(0.0, 0.0);
        while let Some(k) = topology.parent_branch(cur) {
            let br = &topology.branches()[k];
            acc += br.impedance * branch_currents[k];
            cur = br.from;
        }
        *slot = acc;
    }
    out
}

// ---------------------------------------------------------------------------
// Document schema

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TopologyDocument {
    pub base: PerUnitBase,
    pub buses: Vec<BusDoc>,
    pub branches: Vec<BranchDoc>,
    pub oltc: OltcDoc,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BusDoc {
    pub id: usize,
    pub kind: BusKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub base_kv: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BranchDoc {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub id: Option<usize>,
    pub from: usize,
    pub to: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub r_pu: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub x_pu: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub r_ohm: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub x_ohm: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub i_max_pu: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub i_max_a: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct OltcDoc {
    pub step_pu: f64,
    pub min: i32,
    pub max: i32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub v_slack_pu: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub v_slack_angle_deg: Option<f64>,
}

impl TopologyDocument {
    pub fn into_topology(self) -> Result<GridTopology> {
        let base = self.base;
        if base.s_base_kva <= 0.0 || base.v_base_kv <= 0.0 {
            return Err(Error::Topology("bases must be positive".into()));
        }
        let buses: Vec<Bus> = self
            .buses
            .iter()
            .map(|b| Bus {
                id: b.id,
                kind: b.kind,
                base_kv: b.base_kv.unwrap_or(base.v_base_kv),
            })
            .collect();
        let kv_of: HashMap<usize, f64> = buses.iter().map(|b| (b.id, b.base_kv)).collect();
        let mut branches = Vec::with_capacity(self.branches.len());
        for (k, br) in self.branches.iter().enumerate() {
            let id = br.id.unwrap_or(k + 1);
            let kv = kv_of.get(&br.to).copied().unwrap_or(base.v_base_kv);
            let z = match (br.r_pu, br.x_pu, br.r_ohm, br.x_ohm) {
                (Some(r), Some(x), None, None) => Complex64::new(r, x),
                (None, None, Some(r), Some(x)) => base.ohm_to_pu(Complex64::new(r, x), kv),
                _ => {
                    return Err(Error::Topology(format!(
                        "branch {id}: give either r_pu/x_pu or r_ohm/x_ohm"
                    )))
                }
            };
            let imax = match (br.i_max_pu, br.i_max_a) {
                (Some(i), None) => i,
                (None, Some(a)) => base.amp_to_pu(a, kv),
                (None, None) => 1.0,
                _ => return Err(Error::Topology(format!("branch {id}: ampacity given twice"))),
            };
            branches.push((id, br.from, br.to, z, imax));
        }
        let mag = self.oltc.v_slack_pu.unwrap_or(1.0);
        let ang = self.oltc.v_slack_angle_deg.unwrap_or(0.0).to_radians();
        let oltc = OltcSpec {
            tap_step: self.oltc.step_pu,
            tap_min: self.oltc.min,
            tap_max: self.oltc.max,
            slack_voltage: Complex64::from_polar(mag, ang),
        };
        GridTopology::new(buses, branches, oltc, base)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn base() -> PerUnitBase {
        PerUnitBase {
            s_base_kva: 400.0,
            v_base_kv: 0.4,
        }
    }

    fn bus(id: usize, kind: BusKind) -> Bus {
        Bus { id, kind, base_kv: 0.4 }
    }

    fn chain() -> GridTopology {
        GridTopology::new(
            vec![bus(1, BusKind::Slack), bus(2, BusKind::Load), bus(3, BusKind::Load)],
            vec![
                (1, 1, 2, Complex64::new(0.01, 0.005), 1.0),
                (2, 2, 3, Complex64::new(0.02, 0.01), 1.0),
            ],
            OltcSpec::fixed(Complex64::new(1.0, 0.0)),
            base(),
        )
        .unwrap()
    }

    #[test]
    fn two_bus_bibc_is_one() {
        let doc = r#"{
            "base": {"s_base_kva": 400, "v_base_kv": 0.4},
            "buses": [{"id": 1, "kind": "slack"}, {"id": 2, "kind": "load"}],
            "branches": [{"from": 1, "to": 2, "r_pu": 0.01, "x_pu": 0.005, "i_max_pu": 1.0}],
            "oltc": {"step_pu": 0.00625, "min": -4, "max": 4}
        }"#;
        let t = GridTopology::from_json_str(doc).unwrap();
        assert_eq!(t.bibc().shape(), (1, 1));
        assert_eq!(t.bibc()[(0, 0)], 1.0);
        assert_eq!(t.bcbv()[(0, 0)], Complex64::new(0.01, 0.005));
    }

    #[test]
    fn chain_bibc() {
        let t = chain();
        let b = t.bibc();
        assert_eq!(b[(0, 0)], 1.0);
        assert_eq!(b[(0, 1)], 1.0);
        assert_eq!(b[(1, 0)], 0.0);
        assert_eq!(b[(1, 1)], 1.0);
    }

    #[test]
    fn star_paths_are_disjoint() {
        let t = GridTopology::new(
            vec![bus(1, BusKind::Slack), bus(2, BusKind::Load), bus(3, BusKind::Load)],
            vec![
                (1, 1, 2, Complex64::new(0.01, 0.0), 1.0),
                (2, 1, 3, Complex64::new(0.02, 0.0), 1.0),
            ],
            OltcSpec::fixed(Complex64::new(1.0, 0.0)),
            base(),
        )
        .unwrap();
        assert_eq!(t.bibc()[(0, 1)], 0.0);
        assert_eq!(t.bibc()[(1, 0)], 0.0);
        assert_eq!(t.bcbv()[(0, 1)], Complex64::new(0.0, 0.0));
        assert_eq!(t.bcbv()[(1, 0)], Complex64::new(0.0, 0.0));
    }

    #[test]
    fn cycle_is_non_radial() {
        let doc = r#"{
            "base": {"s_base_kva": 400, "v_base_kv": 0.4},
            "buses": [{"id": 1, "kind": "slack"}, {"id": 2, "kind": "load"}, {"id": 3, "kind": "load"}],
            "branches": [
                {"from": 1, "to": 2, "r_pu": 0.01, "x_pu": 0.0},
                {"from": 2, "to": 3, "r_pu": 0.01, "x_pu": 0.0},
                {"from": 3, "to": 1, "r_pu": 0.01, "x_pu": 0.0}
            ],
            "oltc": {"step_pu": 0.00625, "min": -4, "max": 4}
        }"#;
        let err = GridTopology::from_json_str(doc).unwrap_err();
        assert!(err.to_string().contains("non-radial"), "{err}");
    }

    #[test]
    fn disconnected_and_duplicate_and_missing_slack() {
        // 4 buses, 3 branches but one forms a cycle among 1-2-3 leaving 4 alone.
        let e = GridTopology::new(
            vec![
                bus(1, BusKind::Slack),
                bus(2, BusKind::Load),
                bus(3, BusKind::Load),
                bus(4, BusKind::Load),
            ],
            vec![
                (1, 1, 2, Complex64::new(0.01, 0.0), 1.0),
                (2, 2, 3, Complex64::new(0.01, 0.0), 1.0),
                (3, 3, 1, Complex64::new(0.01, 0.0), 1.0),
            ],
            OltcSpec::fixed(Complex64::new(1.0, 0.0)),
            base(),
        )
        .unwrap_err();
        assert!(e.to_string().contains("non-radial") || e.to_string().contains("disconnected"));

        let e = GridTopology::new(
            vec![bus(1, BusKind::Slack), bus(1, BusKind::Load)],
            vec![(1, 1, 2, Complex64::new(0.01, 0.0), 1.0)],
            OltcSpec::fixed(Complex64::new(1.0, 0.0)),
            base(),
        )
        .unwrap_err();
        assert!(e.to_string().contains("duplicate"));

        let e = GridTopology::new(
            vec![bus(1, BusKind::Load), bus(2, BusKind::Load)],
            vec![(1, 1, 2, Complex64::new(0.01, 0.0), 1.0)],
            OltcSpec::fixed(Complex64::new(1.0, 0.0)),
            base(),
        )
        .unwrap_err();
        assert!(e.to_string().contains("missing slack"));
    }

    #[test]
    fn oracle_single_branch() {
        let t = GridTopology::new(
            vec![bus(1, BusKind::Slack), bus(2, BusKind::Load)],
            vec![(1, 1, 2, Complex64::new(0.01, 0.005), 1.0)],
            OltcSpec::fixed(Complex64::new(1.0, 0.0)),
            base(),
        )
        .unwrap();
        let drop = path_voltage_drop_oracle(&t, &[Complex64::new(1.0, 0.0)]);
        assert_eq!(drop[1], Complex64::new(0.01, 0.005));
        let zero = path_voltage_drop_oracle(&t, &[Complex64::new(0.0, 0.0)]);
        assert!(zero.iter().all(|z| z.norm() == 0.0));
    }

    #[test]
    fn islanded_reroots_at_forming_bus() {
        let t = chain();
        let isl = t.islanded(2).unwrap();
        assert_eq!(isl.n_buses(), 2);
        assert_eq!(isl.buses()[0].id, 2);
        assert_eq!(isl.buses()[0].kind, BusKind::Slack);
        assert_eq!(isl.bcbv()[(0, 0)], Complex64::new(0.02, 0.01));
        let isl3 = t.islanded(3).unwrap();
        assert_eq!(isl3.buses()[0].id, 3);
        assert_eq!(isl3.branches()[0].from, 0);
    }

    #[test]
    fn ohm_inputs_are_converted() {
        let doc = r#"{
            "base": {"s_base_kva": 400, "v_base_kv": 0.4},
            "buses": [{"id": 1, "kind": "slack"}, {"id": 2, "kind": "load"}],
            "branches": [{"from": 1, "to": 2, "r_ohm": 0.04, "x_ohm": 0.02, "i_max_a": 288.675134594813}],
            "oltc": {"step_pu": 0.00625, "min": -4, "max": 4}
        }"#;
        let t = GridTopology::from_json_str(doc).unwrap();
        // z_base = 0.4 ohm, i_base = 577.35 A
        assert!((t.branches()[0].impedance - Complex64::new(0.1, 0.05)).norm() < 1e-12);
        assert!((t.branches()[0].ampacity - 0.5).abs() < 1e-12);
    }
}
