//! Readers and writers for the on-disk formats.
//!
//! Traces, sweeps and frequency-shift curves are long-format CSV with a
//! header row; columns are matched by name so their order is free. Rows that
//! fail to parse are reported with their line number and left out; they are
//! never dropped silently.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use csv::{ReaderBuilder, StringRecord};
use ordered_float::OrderedFloat;
use serde::{Deserialize, Serialize};

use super::format::fmt_float;
use super::PipelineError;
use crate::decomposition::{DeviceGeometry, SurfaceLossTable};
use crate::freqshift::{FreqShiftDataset, FreqShiftPoint};
use crate::lineshape::{ResonatorTrace, TraceMetadata};
use crate::lossmodel::{SweepDataset, SweepPoint};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IssueCode {
    /// A row or document that does not parse.
    Malformed,
    /// A trace key already present in the registry.
    DuplicateKey,
    /// Rows that parse but do not form a usable trace.
    InvalidTrace,
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ParseIssue {
    pub source: String,
    /// One-based line in the source, when the issue has a location.
    pub line: Option<u64>,
    pub code: IssueCode,
    pub message: String,
}

impl std::fmt::Display for ParseIssue {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self.line {
            Some(l) => write!(f, "{}:{}: {}", self.source, l, self.message),
            None => write!(f, "{}: {}", self.source, self.message),
        }
    }
}

/// Parsed items plus the issues met on the way.
#[derive(Debug, Clone, PartialEq)]
pub struct Parsed<T> {
    pub items: Vec<T>,
    pub issues: Vec<ParseIssue>,
}

struct Table {
    header: Vec<String>,
    rows: Vec<(u64, StringRecord)>,
}

impl Table {
    fn read(text: &str, source: &str, issues: &mut Vec<ParseIssue>) -> Option<Table> {
        let mut rdr = ReaderBuilder::new()
            .flexible(true)
            .trim(csv::Trim::All)
            .comment(Some(b'#'))
            .from_reader(text.as_bytes());
        let header = match rdr.headers() {
            Ok(h) => h.iter().map(|s| s.to_ascii_lowercase()).collect::<Vec<_>>(),
            Err(e) => {
                issues.push(issue(source, Some(1), IssueCode::Malformed, format!("unreadable header: {e}")));
                return None;
            }
        };
        let mut rows = Vec::new();
        for rec in rdr.records() {
            match rec {
                Ok(r) => {
                    let line = r.position().map_or(0, |p| p.line());
                    rows.push((line, r));
                }
                Err(e) => {
                    let line = e.position().map(|p| p.line());
                    issues.push(issue(source, line, IssueCode::Malformed, e.to_string()));
                }
            }
        }
        Some(Table { header, rows })
    }

    fn column(&self, name: &str) -> Option<usize> {
        self.header.iter().position(|h| h == name)
    }

    fn require(&self, names: &[&str], source: &str, issues: &mut Vec<ParseIssue>) -> Option<Vec<usize>> {
        let mut out = Vec::new();
        for n in names {
            match self.column(n) {
                Some(i) => out.push(i),
                None => {
                    issues.push(issue(source, Some(1), IssueCode::Malformed, format!("missing column {n:?}")));
                    return None;
                }
            }
        }
        Some(out)
    }
}

fn issue(source: &str, line: Option<u64>, code: IssueCode, message: String) -> ParseIssue {
    ParseIssue {
        source: source.to_string(),
        line,
        code,
        message,
    }
}

fn field<'r>(rec: &'r StringRecord, i: usize, name: &str) -> Result<&'r str, String> {
    match rec.get(i) {
        Some(s) if !s.is_empty() => Ok(s),
        _ => Err(format!("missing {name}")),
    }
}

fn number(rec: &StringRecord, i: usize, name: &str) -> Result<f64, String> {
    let s = field(rec, i, name)?;
    let v: f64 = s.parse().map_err(|_| format!("{name} {s:?} is not a number"))?;
    if v.is_finite() {
        Ok(v)
    } else {
        Err(format!("{name} is not finite"))
    }
}

fn optional_number(rec: &StringRecord, i: Option<usize>, name: &str) -> Result<Option<f64>, String> {
    match i {
        Some(i) if rec.get(i).is_some_and(|s| !s.is_empty()) => number(rec, i, name).map(Some),
        _ => Ok(None),
    }
}

pub const TRACE_COLUMNS: [&str; 6] = [
    "device_id",
    "resonator_id",
    "power_dbm",
    "temperature_k",
    "frequency_hz",
    "s21_mag",
];

/// Identity of one trace in a dataset.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct TraceKey {
    pub device_id: String,
    pub resonator_id: String,
    pub power_dbm: OrderedFloat<f64>,
    pub temperature_k: OrderedFloat<f64>,
}

impl TraceKey {
    pub fn of(meta: &TraceMetadata) -> Self {
        Self {
            device_id: meta.device_id.clone(),
            resonator_id: meta.resonator_id.clone(),
            power_dbm: OrderedFloat(meta.power_dbm),
            temperature_k: OrderedFloat(meta.temperature_k),
        }
    }
}

/// Parse long-format trace CSV: one row per frequency point, traces told
/// apart by `(device_id, resonator_id, power_dbm, temperature_k)`. An
/// optional `s21_sigma` column gives per-point uncertainties.
pub fn parse_traces_csv(text: &str, source: &str) -> Parsed<ResonatorTrace> {
    let mut issues = Vec::new();
    let Some(table) = Table::read(text, source, &mut issues) else {
        return Parsed { items: Vec::new(), issues };
    };
    let Some(cols) = table.require(&TRACE_COLUMNS, source, &mut issues) else {
        return Parsed { items: Vec::new(), issues };
    };
    let sigma_col = table.column("s21_sigma");

    struct Acc {
        first_line: u64,
        meta: TraceMetadata,
        freq: Vec<f64>,
        mag: Vec<f64>,
        sigma: Vec<Option<f64>>,
    }
    let mut order: Vec<TraceKey> = Vec::new();
    let mut groups: BTreeMap<TraceKey, Acc> = BTreeMap::new();
    for (line, rec) in &table.rows {
        let row = || -> Result<(TraceMetadata, f64, f64, Option<f64>), String> {
            let meta = TraceMetadata::new(
                field(rec, cols[0], "device_id")?,
                field(rec, cols[1], "resonator_id")?,
                number(rec, cols[2], "power_dbm")?,
                number(rec, cols[3], "temperature_k")?,
            );
            let f = number(rec, cols[4], "frequency_hz")?;
            let m = number(rec, cols[5], "s21_mag")?;
            let s = optional_number(rec, sigma_col, "s21_sigma")?;
            Ok((meta, f, m, s))
        };
        match row() {
            Ok((meta, f, m, s)) => {
                let key = TraceKey::of(&meta);
                let acc = groups.entry(key.clone()).or_insert_with(|| {
                    order.push(key);
                    Acc {
                        first_line: *line,
                        meta,
                        freq: Vec::new(),
                        mag: Vec::new(),
                        sigma: Vec::new(),
                    }
                });
                acc.freq.push(f);
                acc.mag.push(m);
                acc.sigma.push(s);
            }
            Err(msg) => issues.push(issue(source, Some(*line), IssueCode::Malformed, msg)),
        }
    }

    let mut items = Vec::new();
    for key in order {
        let acc = groups.remove(&key).expect("grouped key");
        let sigma = if acc.sigma.iter().all(Option::is_some) && !acc.sigma.is_empty() {
            Some(acc.sigma.iter().map(|s| s.unwrap()).collect())
        } else {
            None
        };
        let label = acc.meta.label();
        match ResonatorTrace::new(acc.meta, acc.freq, acc.mag, sigma) {
            Ok(t) => items.push(t),
            Err(e) => issues.push(issue(
                source,
                Some(acc.first_line),
                IssueCode::InvalidTrace,
                format!("{label}: {e}"),
            )),
        }
    }
    Parsed { items, issues }
}

/// Write traces in the format [`parse_traces_csv`] reads.
pub fn write_traces_csv(traces: &[ResonatorTrace]) -> String {
    let with_sigma = !traces.is_empty() && traces.iter().all(|t| t.s21_sigma.is_some());
    let mut out = TRACE_COLUMNS.join(",");
    if with_sigma {
        out.push_str(",s21_sigma");
    }
    out.push('\n');
    for t in traces {
        let m = &t.meta;
        for i in 0..t.frequency_hz.len() {
            out.push_str(&format!(
                "{},{},{},{},{},{}",
                m.device_id,
                m.resonator_id,
                fmt_float(m.power_dbm),
                fmt_float(m.temperature_k),
                fmt_float(t.frequency_hz[i]),
                fmt_float(t.s21_mag[i]),
            ));
            if let (true, Some(s)) = (with_sigma, &t.s21_sigma) {
                out.push(',');
                out.push_str(&fmt_float(s[i]));
            }
            out.push('\n');
        }
    }
    out
}

/// Parse sweep CSV with columns `device_id, f0_hz, photon_number,
/// temperature_k, q_int` and optional `q_int_sigma`; one dataset per device.
pub fn parse_sweep_csv(text: &str, source: &str) -> Parsed<SweepDataset> {
    let mut issues = Vec::new();
    let Some(table) = Table::read(text, source, &mut issues) else {
        return Parsed { items: Vec::new(), issues };
    };
    let names = ["device_id", "f0_hz", "photon_number", "temperature_k", "q_int"];
    let Some(cols) = table.require(&names, source, &mut issues) else {
        return Parsed { items: Vec::new(), issues };
    };
    let sigma_col = table.column("q_int_sigma");
    let mut order: Vec<String> = Vec::new();
    let mut sets: BTreeMap<String, (u64, SweepDataset)> = BTreeMap::new();
    for (line, rec) in &table.rows {
        let row = || -> Result<(String, f64, SweepPoint), String> {
            let id = field(rec, cols[0], "device_id")?.to_string();
            let f0 = number(rec, cols[1], "f0_hz")?;
            let point = SweepPoint {
                photon_number: number(rec, cols[2], "photon_number")?,
                temperature_k: number(rec, cols[3], "temperature_k")?,
                q_int: number(rec, cols[4], "q_int")?,
                q_int_sigma: optional_number(rec, sigma_col, "q_int_sigma")?,
            };
            Ok((id, f0, point))
        };
        match row() {
            Ok((id, f0, point)) => {
                let omega = 2.0 * std::f64::consts::PI * f0;
                let entry = sets.entry(id.clone()).or_insert_with(|| {
                    order.push(id.clone());
                    (
                        *line,
                        SweepDataset {
                            device_id: id.clone(),
                            omega_rad_s: omega,
                            points: Vec::new(),
                        },
                    )
                });
                if entry.1.omega_rad_s != omega {
                    issues.push(issue(
                        source,
                        Some(*line),
                        IssueCode::Malformed,
                        format!("{id}: f0_hz differs from the device's first row"),
                    ));
                    continue;
                }
                entry.1.points.push(point);
            }
            Err(msg) => issues.push(issue(source, Some(*line), IssueCode::Malformed, msg)),
        }
    }
    let mut items = Vec::new();
    for id in order {
        let (line, set) = sets.remove(&id).expect("grouped id");
        match set.validate() {
            Ok(()) => items.push(set),
            Err(e) => issues.push(issue(source, Some(line), IssueCode::InvalidTrace, format!("{id}: {e}"))),
        }
    }
    Parsed { items, issues }
}

pub fn write_sweep_csv(sets: &[SweepDataset]) -> String {
    let mut out = String::from("device_id,f0_hz,photon_number,temperature_k,q_int,q_int_sigma\n");
    for s in sets {
        let f0 = s.omega_rad_s / (2.0 * std::f64::consts::PI);
        for p in &s.points {
            out.push_str(&format!(
                "{},{},{},{},{},{}\n",
                s.device_id,
                fmt_float(f0),
                fmt_float(p.photon_number),
                fmt_float(p.temperature_k),
                fmt_float(p.q_int),
                p.q_int_sigma.map(fmt_float).unwrap_or_default(),
            ));
        }
    }
    out
}

/// Parse frequency-shift CSV with columns `f0_hz, temperature_k, df_over_f`
/// and optional `sigma`. All rows describe one resonator.
pub fn parse_freq_shift_csv(text: &str, source: &str) -> Result<(FreqShiftDataset, Vec<ParseIssue>), PipelineError> {
    let mut issues = Vec::new();
    let fatal = |issues: Vec<ParseIssue>| PipelineError::Parse(issues);
    let Some(table) = Table::read(text, source, &mut issues) else {
        return Err(fatal(issues));
    };
    let Some(cols) = table.require(&["f0_hz", "temperature_k", "df_over_f"], source, &mut issues) else {
        return Err(fatal(issues));
    };
    let sigma_col = table.column("sigma");
    let mut f0: Option<f64> = None;
    let mut points = Vec::new();
    for (line, rec) in &table.rows {
        let row = || -> Result<(f64, FreqShiftPoint), String> {
            Ok((
                number(rec, cols[0], "f0_hz")?,
                FreqShiftPoint {
                    temperature_k: number(rec, cols[1], "temperature_k")?,
                    df_over_f: number(rec, cols[2], "df_over_f")?,
                    sigma: optional_number(rec, sigma_col, "sigma")?,
                },
            ))
        };
        match row() {
            Ok((f, p)) if f0.is_none_or(|g| g == f) => {
                f0 = Some(f);
                points.push(p);
            }
            Ok(_) => issues.push(issue(source, Some(*line), IssueCode::Malformed, "f0_hz differs from the first row".into())),
            Err(msg) => issues.push(issue(source, Some(*line), IssueCode::Malformed, msg)),
        }
    }
    match f0 {
        Some(f0_hz) => Ok((FreqShiftDataset { f0_hz, points }, issues)),
        None => {
            issues.push(issue(source, None, IssueCode::Malformed, "no usable rows".into()));
            Err(fatal(issues))
        }
    }
}

pub fn write_freq_shift_csv(data: &FreqShiftDataset) -> String {
    let mut out = String::from("f0_hz,temperature_k,df_over_f,sigma\n");
    for p in &data.points {
        out.push_str(&format!(
            "{},{},{},{}\n",
            fmt_float(data.f0_hz),
            fmt_float(p.temperature_k),
            fmt_float(p.df_over_f),
            p.sigma.map(fmt_float).unwrap_or_default()
        ));
    }
    out
}

/// Geometry of one device plus its input-line attenuation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeviceRecord {
    #[serde(flatten)]
    pub geometry: DeviceGeometry,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub attenuation_db: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct DeviceRegistry {
    pub devices: Vec<DeviceRecord>,
}

impl DeviceRegistry {
    pub fn get(&self, device_id: &str) -> Option<&DeviceRecord> {
        self.devices.iter().find(|d| d.geometry.device_id == device_id)
    }
}

/// Parse and validate a device registry document.
pub fn parse_registry_json(text: &str, source: &str) -> Result<DeviceRegistry, PipelineError> {
    let reg: DeviceRegistry = serde_json::from_str(text).map_err(|e| {
        PipelineError::Parse(vec![issue(source, Some(e.line() as u64), IssueCode::Malformed, e.to_string())])
    })?;
    let mut problems = Vec::new();
    for (i, d) in reg.devices.iter().enumerate() {
        if let Err(e) = d.geometry.validate() {
            problems.push(issue(source, None, IssueCode::Malformed, e.to_string()));
        }
        if reg.devices[..i].iter().any(|o| o.geometry.device_id == d.geometry.device_id) {
            problems.push(issue(
                source,
                None,
                IssueCode::DuplicateKey,
                format!("device {} listed twice", d.geometry.device_id),
            ));
        }
        if d.attenuation_db.is_some_and(|a| !a.is_finite()) {
            problems.push(issue(source, None, IssueCode::Malformed, "attenuation must be finite".into()));
        }
    }
    if problems.is_empty() {
        Ok(reg)
    } else {
        Err(PipelineError::Parse(problems))
    }
}

pub fn parse_surface_table_json(text: &str, source: &str) -> Result<SurfaceLossTable, PipelineError> {
    let table: SurfaceLossTable = serde_json::from_str(text).map_err(|e| {
        PipelineError::Parse(vec![issue(source, Some(e.line() as u64), IssueCode::Malformed, e.to_string())])
    })?;
    table
        .validate()
        .map_err(|e| PipelineError::Parse(vec![issue(source, None, IssueCode::Malformed, e.to_string())]))?;
    Ok(table)
}

/// Every trace read from a set of files, keyed by trace identity.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct DatasetRegistry {
    pub traces: BTreeMap<TraceKey, ResonatorTrace>,
    pub issues: Vec<ParseIssue>,
}

impl DatasetRegistry {
    pub fn len(&self) -> usize {
        self.traces.len()
    }

    pub fn is_empty(&self) -> bool {
        self.traces.is_empty()
    }

    /// Add parsed traces; a key already present is reported and the new
    /// trace is left out.
    pub fn extend(&mut self, parsed: Parsed<ResonatorTrace>, source: &str) {
        self.issues.extend(parsed.issues);
        for t in parsed.items {
            let key = TraceKey::of(&t.meta);
            if self.traces.contains_key(&key) {
                self.issues.push(issue(
                    source,
                    None,
                    IssueCode::DuplicateKey,
                    format!("trace {} already read", t.meta.label()),
                ));
            } else {
                self.traces.insert(key, t);
            }
        }
    }
}

/// Files named by `paths`: directories contribute their `*.csv` entries,
/// sorted by name. A missing path is an error.
pub fn expand_inputs(paths: &[PathBuf]) -> Result<Vec<PathBuf>, PipelineError> {
    let mut files = Vec::new();
    for p in paths {
        if p.is_dir() {
            let mut inside: Vec<PathBuf> = fs::read_dir(p)
                .map_err(|e| PipelineError::io(p, e))?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|f| f.is_file() && f.extension().is_some_and(|x| x.eq_ignore_ascii_case("csv")))
                .collect();
            inside.sort();
            files.extend(inside);
        } else if p.is_file() {
            files.push(p.clone());
        } else {
            return Err(PipelineError::MissingInput(p.clone()));
        }
    }
    Ok(files)
}

/// Read every trace file under `paths` into one registry.
pub fn ingest(paths: &[PathBuf]) -> Result<DatasetRegistry, PipelineError> {
    let mut reg = DatasetRegistry::default();
    for file in expand_inputs(paths)? {
        let text = fs::read_to_string(&file).map_err(|e| PipelineError::io(&file, e))?;
        let source = display_path(&file);
        reg.extend(parse_traces_csv(&text, &source), &source);
    }
    Ok(reg)
}

pub(crate) fn display_path(p: &Path) -> String {
    p.display().to_string()
}
