//! File formats: run configuration, time-series and signal CSVs, and the
//! result bundle with its manifest.
//!
//! Time series are CSV with a time column first (hours from the start as a
//! number, or RFC 3339 timestamps) and one column per series. A header may
//! carry a unit in brackets, e.g. `pv12[kW]`; power columns are stored in
//! kW. Signals are CSV rows of `unix_second,value`.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::devices::DeviceFleet;
use crate::error::{Error, Result};
use crate::grid::{GridTopology, TopologyDocument};
use crate::mpc::{RunOptions, SimulationScenario};
use crate::opf::{FcProduct, OpfSettings, PriceSet};
use crate::signal::{FrequencySignal, SignalKind};
use crate::uncertainty::{ConvergenceThresholds, ForecastErrorModel, McSettings};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Unit {
    W,
    Kw,
    Mw,
    /// Per unit on the system power base.
    Pu,
    EurPerMwh,
    /// No unit given.
    Plain,
}

impl Unit {
    fn parse(s: &str) -> Option<Unit> {
        Some(match s.trim().to_ascii_lowercase().as_str() {
            "w" => Unit::W,
            "kw" | "kvar" | "kva" => Unit::Kw,
            "mw" | "mvar" | "mva" => Unit::Mw,
            "pu" | "p.u." => Unit::Pu,
            "eur/mwh" | "€/mwh" => Unit::EurPerMwh,
            "" => Unit::Plain,
            _ => return None,
        })
    }

    /// Factor to kW, `None` for non-power units.
    fn to_kw(self, s_base_kva: f64) -> Option<f64> {
        match self {
            Unit::W => Some(1e-3),
            Unit::Kw | Unit::Plain => Some(1.0),
            Unit::Mw => Some(1e3),
            Unit::Pu => Some(s_base_kva),
            Unit::EurPerMwh => None,
        }
    }
}

/// What to do with empty or NaN cells.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum NanPolicy {
    #[default]
    Reject,
    Zero,
    /// Linear between the neighbouring valid samples.
    Interpolate,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Column {
    pub name: String,
    pub unit: Unit,
    pub values: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimeSeries {
    /// Sampling interval, hours.
    pub dt_h: f64,
    /// First timestamp as written in the file.
    pub start: String,
    pub columns: Vec<Column>,
}

impl TimeSeries {
    pub fn len(&self) -> usize {
        self.columns.first().map_or(0, |c| c.values.len())
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn column(&self, name: &str) -> Option<&Column> {
        self.columns.iter().find(|c| c.name == name)
    }

    /// Column converted to kW; `s_base_kva` resolves per-unit columns.
    pub fn kw(&self, name: &str, s_base_kva: f64) -> Result<Vec<f64>> {
        let c = self
            .column(name)
            .ok_or_else(|| Error::Input(format!("series has no column '{name}'")))?;
        let f = c
            .unit
            .to_kw(s_base_kva)
            .ok_or_else(|| Error::Input(format!("column '{name}' is not a power series")))?;
        Ok(c.values.iter().map(|v| v * f).collect())
    }

    /// Column in per unit of `s_base_kva`.
    pub fn per_unit(&self, name: &str, s_base_kva: f64) -> Result<Vec<f64>> {
        Ok(self.kw(name, s_base_kva)?.into_iter().map(|v| v / s_base_kva).collect())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IngestOptions {
    /// Required sampling interval, hours; inferred from the first two rows
    /// when `None`.
    pub expected_dt_h: Option<f64>,
    /// Minimum number of rows.
    pub min_rows: usize,
    pub nan_policy: NanPolicy,
}

impl Default for IngestOptions {
    fn default() -> Self {
        IngestOptions {
            expected_dt_h: Some(1.0),
            min_rows: 1,
            nan_policy: NanPolicy::Reject,
        }
    }
}

fn schema(file: &Path, line: usize, msg: impl Into<String>) -> Error {
    Error::Schema {
        file: file.display().to_string(),
        line,
        msg: msg.into(),
    }
}

/// Time in hours: a plain number, or an RFC 3339 timestamp relative to the
/// Unix epoch.
fn parse_time(s: &str) -> Option<f64> {
    let s = s.trim();
    if let Ok(h) = s.parse::<f64>() {
        return h.is_finite().then_some(h);
    }
    chrono::DateTime::parse_from_rfc3339(s)
        .ok()
        .map(|t| t.timestamp() as f64 / 3600.0)
}

fn parse_header(h: &str) -> Option<(String, Unit)> {
    let h = h.trim();
    match h.find('[') {
        Some(i) if h.ends_with(']') => Some((h[..i].trim().to_string(), Unit::parse(&h[i + 1..h.len() - 1])?)),
        Some(_) => None,
        None => Some((h.to_string(), Unit::Plain)),
    }
}

/// Read and validate a time-series CSV: uniform sampling, no missing rows,
/// known units and the NaN policy.
pub fn ingest_timeseries(path: &Path, opts: &IngestOptions) -> Result<TimeSeries> {
    let text = fs::read_to_string(path)?;
    ingest_timeseries_str(&text, path, opts)
}

/// [`ingest_timeseries`] on text already in memory; `path` labels errors.
pub fn ingest_timeseries_str(text: &str, path: &Path, opts: &IngestOptions) -> Result<TimeSeries> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(text.as_bytes());
    let headers = rdr.headers()?.clone();
    if headers.len() < 2 {
        return Err(schema(path, 1, "need a time column and at least one value column"));
    }
    let mut columns = Vec::new();
    for h in headers.iter().skip(1) {
        let (name, unit) = parse_header(h).ok_or_else(|| schema(path, 1, format!("unknown unit in header '{h}'")))?;
        if name.is_empty() || columns.iter().any(|c: &Column| c.name == name) {
            return Err(schema(path, 1, format!("empty or repeated column name '{h}'")));
        }
        columns.push(Column {
            name,
            unit,
            values: Vec::new(),
        });
    }
    let mut times: Vec<(f64, String)> = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let line = i + 2;
        let rec = rec.map_err(|e| schema(path, line, e.to_string()))?;
        if rec.len() != headers.len() {
            return Err(schema(path, line, format!("{} fields, header has {}", rec.len(), headers.len())));
        }
        let raw_t = rec.get(0).unwrap_or("");
        let t = parse_time(raw_t).ok_or_else(|| schema(path, line, format!("bad timestamp '{raw_t}'")))?;
        for (c, cell) in columns.iter_mut().zip(rec.iter().skip(1)) {
            let v = if cell.is_empty() || cell.eq_ignore_ascii_case("nan") {
                f64::NAN
            } else {
                cell.parse::<f64>()
                    .map_err(|_| schema(path, line, format!("bad number '{cell}' in column '{}'", c.name)))?
            };
            if v.is_infinite() {
                return Err(schema(path, line, format!("infinite value in column '{}'", c.name)));
            }
            c.values.push(v);
        }
        times.push((t, raw_t.to_string()));
    }
    if times.len() < opts.min_rows.max(1) {
        return Err(schema(
            path,
            times.len() + 1,
            format!("{} rows, need at least {}", times.len(), opts.min_rows.max(1)),
        ));
    }
    let dt = match (opts.expected_dt_h, times.get(1)) {
        (Some(dt), _) => dt,
        (None, Some(t1)) => t1.0 - times[0].0,
        (None, None) => 1.0,
    };
    if !(dt > 0.0) {
        return Err(schema(path, 3, "timestamps must increase"));
    }
    for (i, w) in times.windows(2).enumerate() {
        let line = i + 3;
        let step = w[1].0 - w[0].0;
        let k = step / dt;
        if step <= 0.0 {
            return Err(schema(path, line, format!("timestamp {} does not increase", w[1].1)));
        }
        if (k - 1.0).abs() <= 1e-6 {
            continue;
        }
        if (k - k.round()).abs() <= 1e-6 {
            return Err(schema(
                path,
                line,
                format!("gap: {} missing row(s) after {}", k.round() as usize - 1, w[0].1),
            ));
        }
        return Err(schema(
            path,
            line,
            format!("nonuniform sampling at {}: step {step} h, expected {dt} h", w[1].1),
        ));
    }
    for c in &mut columns {
        apply_nan_policy(c, opts.nan_policy, path)?;
    }
    Ok(TimeSeries {
        dt_h: dt,
        start: times[0].1.clone(),
        columns,
    })
}

fn apply_nan_policy(c: &mut Column, policy: NanPolicy, path: &Path) -> Result<()> {
    let first_nan = c.values.iter().position(|v| v.is_nan());
    let Some(first) = first_nan else {
        return Ok(());
    };
    match policy {
        NanPolicy::Reject => Err(schema(path, first + 2, format!("missing value in column '{}'", c.name))),
        NanPolicy::Zero => {
            c.values.iter_mut().filter(|v| v.is_nan()).for_each(|v| *v = 0.0);
            Ok(())
        }
        NanPolicy::Interpolate => {
            let n = c.values.len();
            let mut i = 0;
            while i < n {
                if !c.values[i].is_nan() {
                    i += 1;
                    continue;
                }
                let j = (i..n).find(|&j| !c.values[j].is_nan());
                match (i.checked_sub(1), j) {
                    (Some(a), Some(b)) => {
                        let (va, vb) = (c.values[a], c.values[b]);
                        for k in i..b {
                            let w = (k - a) as f64 / (b - a) as f64;
                            c.values[k] = va + w * (vb - va);
                        }
                        i = b;
                    }
                    _ => {
                        return Err(schema(
                            path,
                            i + 2,
                            format!("cannot interpolate column '{}' at the series edge", c.name),
                        ))
                    }
                }
            }
            Ok(())
        }
    }
}

/// Four decimals: 0.1 W on kW columns, 1e-4 €/MWh on prices.
fn round4(v: f64) -> f64 {
    (v * 1e4).round() / 1e4
}

/// Write columns as a time-series CSV with hour offsets in the time column.
/// Values are rounded to four decimals.
pub fn write_timeseries(path: &Path, ts: &TimeSeries) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let mut head = vec!["t_h".to_string()];
    for c in &ts.columns {
        head.push(match c.unit {
            Unit::Plain => c.name.clone(),
            u => format!("{}[{}]", c.name, unit_label(u)),
        });
    }
    w.write_record(&head)?;
    for i in 0..ts.len() {
        let mut row = vec![format!("{}", i as f64 * ts.dt_h)];
        row.extend(ts.columns.iter().map(|c| format!("{}", round4(c.values[i]))));
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

fn unit_label(u: Unit) -> &'static str {
    match u {
        Unit::W => "W",
        Unit::Kw => "kW",
        Unit::Mw => "MW",
        Unit::Pu => "pu",
        Unit::EurPerMwh => "EUR/MWh",
        Unit::Plain => "",
    }
}

/// Signal CSV: `unix_second,value` rows in increasing order. Missing
/// seconds become NaN samples (see [`FrequencySignal::gaps`]).
pub fn load_signal(path: &Path, kind: SignalKind) -> Result<FrequencySignal> {
    let mut rdr = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .has_headers(true)
        .from_path(path)?;
    let mut start: Option<i64> = None;
    let mut values: Vec<f64> = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let line = i + 2;
        let rec = rec.map_err(|e| schema(path, line, e.to_string()))?;
        if rec.len() != 2 {
            return Err(schema(path, line, "expected unix_second,value"));
        }
        let sec: i64 = rec[0]
            .parse()
            .map_err(|_| schema(path, line, format!("'{}' is not an integer second", &rec[0])))?;
        let v: f64 = if rec[1].is_empty() || rec[1].eq_ignore_ascii_case("nan") {
            f64::NAN
        } else {
            rec[1]
                .parse()
                .map_err(|_| schema(path, line, format!("bad value '{}'", &rec[1])))?
        };
        let s0 = *start.get_or_insert(sec);
        let idx = sec - s0;
        if idx < values.len() as i64 {
            return Err(schema(path, line, format!("second {sec} repeated or out of order")));
        }
        values.resize(idx as usize, f64::NAN);
        values.push(v);
    }
    let start = start.ok_or_else(|| schema(path, 2, "signal file has no samples"))?;
    let sig = FrequencySignal::new(kind, start, values);
    let gaps = sig.gaps();
    if !gaps.is_empty() {
        let missing: usize = gaps.iter().map(|g| g.1 - g.0).sum();
        log::warn!("{}: {} gap(s), {missing} missing second(s)", path.display(), gaps.len());
    }
    Ok(sig)
}

pub fn write_signal(path: &Path, sig: &FrequencySignal) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["unix_second", "value"])?;
    for (i, v) in sig.values.iter().enumerate() {
        if !v.is_nan() {
            w.write_record([(sig.start + i as i64).to_string(), format!("{v}")])?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Price CSV columns, €/MWh per step.
pub const PRICE_COLUMNS: [&str; 5] = ["c_buy", "c_sell", "c_bid", "c_curt_g", "c_curt_l_isl"];

pub fn load_prices(path: &Path, f_isl: f64) -> Result<PriceSet> {
    let ts = ingest_timeseries(path, &IngestOptions::default())?;
    let col = |name: &str| -> Result<Vec<f64>> {
        let c = ts
            .column(name)
            .ok_or_else(|| schema(path, 1, format!("missing price column '{name}'")))?;
        if !matches!(c.unit, Unit::EurPerMwh | Unit::Plain) {
            return Err(schema(path, 1, format!("price column '{name}' must be in EUR/MWh")));
        }
        Ok(c.values.clone())
    };
    Ok(PriceSet {
        c_buy: col("c_buy")?,
        c_sell: col("c_sell")?,
        c_bid: col("c_bid")?,
        c_curt_g: col("c_curt_g")?,
        c_curt_l_isl: col("c_curt_l_isl")?,
        f_isl,
    })
}

pub fn write_prices(path: &Path, p: &PriceSet) -> Result<()> {
    let cols = [&p.c_buy, &p.c_sell, &p.c_bid, &p.c_curt_g, &p.c_curt_l_isl];
    let ts = TimeSeries {
        dt_h: 1.0,
        start: "0".into(),
        columns: PRICE_COLUMNS
            .iter()
            .zip(cols)
            .map(|(n, v)| Column {
                name: n.to_string(),
                unit: Unit::EurPerMwh,
                values: v.clone(),
            })
            .collect(),
    };
    write_timeseries(path, &ts)
}

/// Fill the device profiles of `fleet` from series columns named by device
/// id. Every device needs a column; unused columns are an error.
pub fn attach_profiles(fleet: &mut DeviceFleet, ts: &TimeSeries, s_base_kva: f64) -> Result<()> {
    let mut used = Vec::new();
    for pv in &mut fleet.pv {
        pv.p_max_profile = ts.kw(&pv.id, s_base_kva)?;
        used.push(pv.id.clone());
    }
    for l in &mut fleet.load {
        l.p_profile = ts.kw(&l.id, s_base_kva)?;
        used.push(l.id.clone());
    }
    for f in &mut fleet.flexload {
        f.p_shift_profile = ts.kw(&f.id, s_base_kva)?;
        used.push(f.id.clone());
    }
    if let Some(c) = ts.columns.iter().find(|c| !used.contains(&c.name)) {
        return Err(Error::Input(format!("series column '{}' matches no device", c.name)));
    }
    Ok(())
}

/// Fleet profiles as a series table, kW.
pub fn fleet_series(fleet: &DeviceFleet) -> TimeSeries {
    let mut columns = Vec::new();
    let mut push = |id: &str, v: &[f64]| {
        columns.push(Column {
            name: id.to_string(),
            unit: Unit::Kw,
            values: v.to_vec(),
        })
    };
    for pv in &fleet.pv {
        push(&pv.id, &pv.p_max_profile);
    }
    for l in &fleet.load {
        push(&l.id, &l.p_profile);
    }
    for f in &fleet.flexload {
        push(&f.id, &f.p_shift_profile);
    }
    TimeSeries {
        dt_h: 1.0,
        start: "0".into(),
        columns,
    }
}

/// Fleet without its profiles, as written to `fleet.json`.
pub fn fleet_static(fleet: &DeviceFleet) -> DeviceFleet {
    let mut f = fleet.clone();
    f.pv.iter_mut().for_each(|p| p.p_max_profile.clear());
    f.load.iter_mut().for_each(|l| l.p_profile.clear());
    f.flexload.iter_mut().for_each(|l| l.p_shift_profile.clear());
    f
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HorizonBlock {
    /// First and one-past-last simulated step.
    pub start: usize,
    pub end: usize,
    #[serde(default = "default_horizon")]
    pub horizon: usize,
    #[serde(default = "default_dt")]
    pub dt_h: f64,
}

fn default_horizon() -> usize {
    24
}

fn default_dt() -> f64 {
    1.0
}

fn default_true() -> bool {
    true
}

fn default_lead() -> usize {
    1
}

fn default_f_isl() -> f64 {
    0.1
}

/// Parameters of the case studies.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StudyBlock {
    /// Storage capacities, kWh, ascending.
    pub capacity_grid: Vec<f64>,
    /// Islanding instants, steps after `start`.
    pub island_offsets: Vec<usize>,
    /// Spot-market lead time in signal replays, hours.
    pub lead_time_h: usize,
    /// Bisection tolerance of the transformer study, kVA.
    pub rating_tol_kva: f64,
    /// Fresh scenarios for chance-constraint validation.
    pub validation_samples: usize,
    pub validation_seed: u64,
}

impl Default for StudyBlock {
    fn default() -> Self {
        StudyBlock {
            capacity_grid: Vec::new(),
            island_offsets: vec![0, 6, 12, 18],
            lead_time_h: default_lead(),
            rating_tol_kva: 1.0,
            validation_samples: 1000,
            validation_seed: 99,
        }
    }
}

/// One run: input files (relative to the config file), the product, the
/// horizon and solver settings, and where results go.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub topology: PathBuf,
    pub fleet: PathBuf,
    pub series: PathBuf,
    pub prices: PathBuf,
    #[serde(default)]
    pub error_model: Option<PathBuf>,
    /// Secondary-control activation signal for replays.
    #[serde(default)]
    pub signal: Option<PathBuf>,
    #[serde(default)]
    pub product: Option<FcProduct>,
    pub horizon: HorizonBlock,
    #[serde(default)]
    pub settings: OpfSettings,
    #[serde(default)]
    pub mc: McSettings,
    #[serde(default)]
    pub thresholds: ConvergenceThresholds,
    #[serde(default = "default_true")]
    pub uncertainty: bool,
    #[serde(default)]
    pub forecast_seed: u64,
    #[serde(default = "default_f_isl")]
    pub f_isl: f64,
    /// Grid-forming bus in islanded mode; defaults to the first storage bus.
    #[serde(default)]
    pub forming_bus: Option<usize>,
    #[serde(default)]
    pub substation_cap_kva: Option<f64>,
    #[serde(default)]
    pub options: RunOptions,
    #[serde(default)]
    pub study: StudyBlock,
    pub output_dir: PathBuf,
    /// Directory of the config file; relative paths resolve against it.
    #[serde(skip)]
    pub base_dir: PathBuf,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<RunConfig> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::Input(format!("cannot read config {}: {e}", path.display())))?;
        let mut cfg: RunConfig = serde_json::from_str(&text).map_err(|e| schema(path, e.line(), e.to_string()))?;
        cfg.base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok(cfg)
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    /// Every referenced input file, labelled.
    pub fn inputs(&self) -> Vec<(&'static str, PathBuf)> {
        let mut v = vec![
            ("topology", self.resolve(&self.topology)),
            ("fleet", self.resolve(&self.fleet)),
            ("series", self.resolve(&self.series)),
            ("prices", self.resolve(&self.prices)),
        ];
        if let Some(p) = &self.error_model {
            v.push(("error_model", self.resolve(p)));
        }
        if let Some(p) = &self.signal {
            v.push(("signal", self.resolve(p)));
        }
        v
    }

    pub fn check_files_exist(&self) -> Result<()> {
        for (label, p) in self.inputs() {
            if !p.is_file() {
                return Err(Error::Input(format!("{label} file {} not found", p.display())));
            }
        }
        Ok(())
    }

    /// SHA-256 over the config text and every input file, in order.
    pub fn hash(&self) -> Result<String> {
        let mut h = Sha256::new();
        h.update(serde_json::to_vec(self)?);
        for (label, p) in self.inputs() {
            h.update(label.as_bytes());
            h.update(fs::read(&p)?);
        }
        Ok(format!("{:x}", h.finalize()))
    }

    /// Read and validate every input and assemble the scenario.
    pub fn load_scenario(&self) -> Result<LoadedInputs> {
        self.check_files_exist()?;
        let topo_path = self.resolve(&self.topology);
        let doc: TopologyDocument = serde_json::from_str(&fs::read_to_string(&topo_path)?)
            .map_err(|e| schema(&topo_path, e.line(), e.to_string()))?;
        let grid = doc.into_topology()?;
        let base = grid.base().s_base_kva;
        let fleet_path = self.resolve(&self.fleet);
        let mut fleet: DeviceFleet = serde_json::from_str(&fs::read_to_string(&fleet_path)?)
            .map_err(|e| schema(&fleet_path, e.line(), e.to_string()))?;
        let opts = IngestOptions {
            expected_dt_h: Some(self.horizon.dt_h),
            min_rows: 1,
            nan_policy: NanPolicy::Reject,
        };
        let series = ingest_timeseries(&self.resolve(&self.series), &opts)?;
        attach_profiles(&mut fleet, &series, base)?;
        let prices = load_prices(&self.resolve(&self.prices), self.f_isl)?;
        let error_model = match &self.error_model {
            Some(p) => Some(ForecastErrorModel::load_csv(&self.resolve(p))?),
            None => None,
        };
        let mut s = SimulationScenario::new(grid, fleet, prices, self.horizon.start, self.horizon.end)?;
        s.horizon = self.horizon.horizon;
        s.dt = self.horizon.dt_h;
        if let Some(p) = &self.product {
            s.product = p.clone();
        }
        if let Some(m) = error_model {
            s.error_model = m;
        }
        s.settings = self.settings;
        s.mc = self.mc;
        s.thresholds = self.thresholds;
        s.uncertainty = self.uncertainty;
        s.forecast_seed = self.forecast_seed;
        s.substation_cap_kva = self.substation_cap_kva;
        s.options = self.options;
        if self.forming_bus.is_some() {
            s.set_forming_bus(self.forming_bus)?;
        }
        s.validate()?;
        Ok(LoadedInputs {
            scenario: s,
            series,
        })
    }

    pub fn load_signal(&self) -> Result<Option<FrequencySignal>> {
        match &self.signal {
            Some(p) => Ok(Some(load_signal(&self.resolve(p), SignalKind::Activation)?)),
            None => Ok(None),
        }
    }
}

pub struct LoadedInputs {
    pub scenario: SimulationScenario,
    pub series: TimeSeries,
}

impl LoadedInputs {
    pub fn grid(&self) -> &Arc<GridTopology> {
        &self.scenario.grid
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub tool: String,
    pub version: String,
    pub command: String,
    pub config_hash: Option<String>,
    pub seeds: BTreeMap<String, u64>,
    pub solver: String,
    pub started_unix: f64,
    pub finished_unix: Option<f64>,
    pub wall_clock_s: Option<f64>,
    /// `running`, `ok`, `infeasible` or `error`.
    pub status: String,
    /// Artifacts written, relative to the bundle directory.
    pub files: Vec<String>,
    /// Solver and iteration statistics of the run.
    pub stats: serde_json::Value,
}

fn now_unix() -> f64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map_or(0.0, |d| d.as_secs_f64())
}

/// Output directory with a manifest written at creation and finalized at
/// the end. Numeric artifacts hold no timings, so identical inputs give
/// identical files.
pub struct ResultBundle {
    pub dir: PathBuf,
    pub manifest: Manifest,
}

impl ResultBundle {
    pub fn create(dir: &Path, command: &str, config_hash: Option<String>, seeds: BTreeMap<String, u64>, solver: &str) -> Result<Self> {
        fs::create_dir_all(dir)?;
        let b = ResultBundle {
            dir: dir.to_path_buf(),
            manifest: Manifest {
                tool: env!("CARGO_PKG_NAME").into(),
                version: env!("CARGO_PKG_VERSION").into(),
                command: command.into(),
                config_hash,
                seeds,
                solver: solver.into(),
                started_unix: now_unix(),
                finished_unix: None,
                wall_clock_s: None,
                status: "running".into(),
                files: Vec::new(),
                stats: serde_json::Value::Null,
            },
        };
        b.write_manifest()?;
        Ok(b)
    }

    fn write_manifest(&self) -> Result<()> {
        fs::write(self.dir.join("manifest.json"), serde_json::to_string_pretty(&self.manifest)?)?;
        Ok(())
    }

    fn record(&mut self, name: &str) {
        if !self.manifest.files.iter().any(|f| f == name) {
            self.manifest.files.push(name.to_string());
        }
    }

    pub fn write_json<T: Serialize>(&mut self, name: &str, value: &T) -> Result<()> {
        fs::write(self.dir.join(name), serde_json::to_string_pretty(value)?)?;
        self.record(name);
        Ok(())
    }

    pub fn write_csv<T: Serialize>(&mut self, name: &str, rows: &[T]) -> Result<()> {
        let mut w = csv::Writer::from_path(self.dir.join(name))?;
        for r in rows {
            w.serialize(r)?;
        }
        w.flush()?;
        self.record(name);
        Ok(())
    }

    pub fn finalize(mut self, status: &str, stats: serde_json::Value) -> Result<Manifest> {
        let end = now_unix();
        self.manifest.finished_unix = Some(end);
        self.manifest.wall_clock_s = Some(end - self.manifest.started_unix);
        self.manifest.status = status.into();
        self.manifest.stats = stats;
        self.write_manifest()?;
        Ok(self.manifest)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ingest(text: &str, opts: IngestOptions) -> Result<TimeSeries> {
        ingest_timeseries_str(text, Path::new("mem.csv"), &opts)
    }

    fn hourly(rows: usize) -> String {
        let mut s = String::from("t,load[kW]\n");
        for i in 0..rows {
            s.push_str(&format!("{i},{}\n", 10 + i));
        }
        s
    }

    #[test]
    fn hourly_day_with_lookahead_is_accepted() {
        let ts = ingest(&hourly(25), IngestOptions { min_rows: 25, ..Default::default() }).unwrap();
        assert_eq!(ts.len(), 25);
        assert_eq!(ts.dt_h, 1.0);
    }

    #[test]
    fn missing_row_reports_gap_with_timestamp() {
        let text = "t,load[kW]\n0,1\n1,1\n3,1\n";
        match ingest(text, IngestOptions::default()) {
            Err(Error::Schema { line, msg, .. }) => {
                assert_eq!(line, 4);
                assert!(msg.contains("gap") && msg.contains("after 1"), "{msg}");
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn nonuniform_sampling_rejected() {
        let text = "t,load[kW]\n0,1\n1,1\n1.5,1\n";
        let e = ingest(text, IngestOptions::default()).unwrap_err();
        assert!(e.to_string().contains("nonuniform"), "{e}");
    }

    #[test]
    fn per_unit_conversion() {
        let ts = ingest("t,pv[kW],x[MW]\n0,100,0.2\n1,40,0.4\n", IngestOptions::default()).unwrap();
        assert_eq!(ts.per_unit("pv", 400.0).unwrap(), vec![0.25, 0.1]);
        assert_eq!(ts.kw("x", 400.0).unwrap(), vec![200.0, 400.0]);
    }

    #[test]
    fn unknown_unit_rejected() {
        assert!(ingest("t,pv[furlong]\n0,1\n", IngestOptions::default()).is_err());
    }

    #[test]
    fn nan_policies() {
        let text = "t,a\n0,1\n1,\n2,3\n";
        assert!(ingest(text, IngestOptions::default()).is_err());
        let z = ingest(text, IngestOptions { nan_policy: NanPolicy::Zero, ..Default::default() }).unwrap();
        assert_eq!(z.columns[0].values, vec![1.0, 0.0, 3.0]);
        let i = ingest(text, IngestOptions { nan_policy: NanPolicy::Interpolate, ..Default::default() }).unwrap();
        assert_eq!(i.columns[0].values, vec![1.0, 2.0, 3.0]);
    }

    #[test]
    fn rfc3339_timestamps() {
        let text = "time,a\n2016-07-01T00:00:00Z,1\n2016-07-01T01:00:00Z,2\n2016-07-01T03:00:00Z,3\n";
        let e = ingest(text, IngestOptions::default()).unwrap_err();
        assert!(e.to_string().contains("2016-07-01T01:00:00Z"), "{e}");
    }

    #[test]
    fn signal_round_trip_with_gap() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("sig.csv");
        fs::write(&p, "unix_second,value\n100,0.5\n101,0.25\n104,-1\n").unwrap();
        let s = load_signal(&p, SignalKind::Activation).unwrap();
        assert_eq!(s.start, 100);
        assert_eq!(s.len(), 5);
        assert_eq!(s.gaps(), vec![(2, 4)]);
        let q = dir.path().join("out.csv");
        write_signal(&q, &s).unwrap();
        let back = load_signal(&q, SignalKind::Activation).unwrap();
        assert_eq!(back.values[4], -1.0);
        assert_eq!(back.gaps(), s.gaps());
    }

    #[test]
    fn out_of_order_signal_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("sig.csv");
        fs::write(&p, "unix_second,value\n5,0\n4,0\n").unwrap();
        assert!(matches!(load_signal(&p, SignalKind::Activation), Err(Error::Schema { line: 3, .. })));
    }
}
