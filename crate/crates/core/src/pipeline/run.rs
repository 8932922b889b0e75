//! Batch orchestration: trace fits, sweep fits per resonator, then the
//! participation-ratio regression and interface decomposition over devices.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::config::RunConfig;
use super::format::{fmt_float, to_canonical_json};
use super::io::{
    display_path, ingest, parse_registry_json, parse_surface_table_json, DatasetRegistry, DeviceRegistry,
    IssueCode, ParseIssue,
};
use super::PipelineError;
use crate::decomposition::{
    aggregate_triplets, fit_spr_scaling, q_tls_at_photon, solve_placement, DecompositionResult, Estimate,
    HydrocarbonPlacement, PlacementSolution, SprFit, SprPoint, SurfaceEntry, SurfaceLossTable, Treatment,
};
use crate::lineshape::{detect_nonlinearity, fit_trace, qc_constancy, QcConstancyReport, ResonatorTrace, TraceFitOptions};
use crate::lossmodel::{fit_sweep, photon_number, LossFitResult, SweepDataset, SweepPoint};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReasonCode {
    ParseError,
    DuplicateKey,
    InvalidTrace,
    Nonlinear,
    TraceFitFailed,
    MissingAttenuation,
    SweepFitFailed,
}

impl From<IssueCode> for ReasonCode {
    fn from(c: IssueCode) -> Self {
        match c {
            IssueCode::Malformed => ReasonCode::ParseError,
            IssueCode::DuplicateKey => ReasonCode::DuplicateKey,
            IssueCode::InvalidTrace => ReasonCode::InvalidTrace,
        }
    }
}

/// One entry of the exclusion ledger.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Exclusion {
    pub reason: ReasonCode,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub device_id: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub resonator_id: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub power_dbm: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub temperature_k: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub source: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub line: Option<u64>,
    pub detail: String,
}

impl Exclusion {
    fn for_trace(t: &ResonatorTrace, reason: ReasonCode, detail: String) -> Self {
        Self {
            reason,
            device_id: Some(t.meta.device_id.clone()),
            resonator_id: Some(t.meta.resonator_id.clone()),
            power_dbm: Some(t.meta.power_dbm),
            temperature_k: Some(t.meta.temperature_k),
            source: None,
            line: None,
            detail,
        }
    }

    fn from_issue(i: &ParseIssue) -> Self {
        Self {
            reason: i.code.into(),
            device_id: None,
            resonator_id: None,
            power_dbm: None,
            temperature_k: None,
            source: Some(i.source.clone()),
            line: i.line,
            detail: i.message.clone(),
        }
    }
}

/// One accepted trace fit, placed on the sweep grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepEntry {
    pub power_dbm: f64,
    pub temperature_k: f64,
    pub photon_number: f64,
    pub q_int: f64,
    #[serde(deserialize_with = "crate::nullable::f64")]
    pub q_int_sigma: f64,
    pub q_c: f64,
    pub f0_hz: f64,
    pub asymmetry: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DeviceStatus {
    Ok,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeviceReport {
    pub device_id: String,
    pub resonator_id: String,
    pub status: DeviceStatus,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub failure: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub attenuation_db: Option<f64>,
    pub n_traces: usize,
    pub entries: Vec<SweepEntry>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub qc_constancy: Option<QcConstancyReport>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sweep_fit: Option<LossFitResult>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub base_temperature_k: Option<f64>,
    /// `Q_TLS` at the configured photon number and the base temperature.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub q_tls_at_photon: Option<Estimate>,
}

impl DeviceReport {
    pub fn file_stem(&self) -> String {
        let clean = |s: &str| {
            s.chars()
                .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' })
                .collect::<String>()
        };
        format!("{}__{}", clean(&self.device_id), clean(&self.resonator_id))
    }
}

/// One resonator's input to the participation-ratio regression.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SprRow {
    pub device_id: String,
    pub resonator_id: String,
    pub treatment: Treatment,
    pub p_ms: f64,
    pub q_tls0: Estimate,
    pub q_tls_at_photon: Estimate,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CampaignReport {
    pub rows: Vec<SprRow>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub spr: Option<SprFit>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub spr_at_photon: Option<SprFit>,
    pub photon_number: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub surface_table: Option<SurfaceLossTable>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub decomposition: Option<DecompositionResult>,
    /// The alternative hydrocarbon placement, solved as a diagnostic.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub alternative_placement: Option<PlacementSolution>,
    pub notices: Vec<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunStatus {
    Success,
    /// Some devices failed; the rest were reported.
    Partial,
    /// Every device failed, or there were none.
    Failed,
}

impl RunStatus {
    pub fn exit_code(self) -> i32 {
        match self {
            RunStatus::Success => 0,
            RunStatus::Partial | RunStatus::Failed => 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub status: RunStatus,
    pub devices: usize,
    pub devices_ok: usize,
    pub traces: usize,
    pub traces_used: usize,
    pub exclusions: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunOutput {
    pub summary: RunSummary,
    pub devices: Vec<DeviceReport>,
    pub campaign: CampaignReport,
    pub exclusions: Vec<Exclusion>,
}

/// Load every input named by `config` and analyse it.
pub fn run_pipeline(config: &RunConfig) -> Result<RunOutput, PipelineError> {
    config.validate()?;
    let data = ingest(&config.trace_paths()?)?;
    let registry = match &config.registry {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| PipelineError::io(p, e))?;
            Some(parse_registry_json(&text, &display_path(p))?)
        }
        None => None,
    };
    let table = match &config.surface_table {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| PipelineError::io(p, e))?;
            Some(parse_surface_table_json(&text, &display_path(p))?)
        }
        None => None,
    };
    analyze(&data, registry.as_ref(), table, config)
}

/// Analyse an already loaded dataset. Results do not depend on `jobs`.
pub fn analyze(
    data: &DatasetRegistry,
    registry: Option<&DeviceRegistry>,
    surface_table: Option<SurfaceLossTable>,
    config: &RunConfig,
) -> Result<RunOutput, PipelineError> {
    let mut groups: BTreeMap<(String, String), Vec<&ResonatorTrace>> = BTreeMap::new();
    for (key, t) in &data.traces {
        groups
            .entry((key.device_id.clone(), key.resonator_id.clone()))
            .or_default()
            .push(t);
    }
    let groups: Vec<_> = groups.into_iter().collect();

    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(config.jobs)
        .build()
        .map_err(|e| PipelineError::Config(format!("thread pool: {e}")))?;
    let results: Vec<(DeviceReport, Vec<Exclusion>)> = pool.install(|| {
        groups
            .par_iter()
            .map(|((dev, res), traces)| process_device(dev, res, traces, registry, config))
            .collect()
    });

    let mut exclusions: Vec<Exclusion> = data.issues.iter().map(Exclusion::from_issue).collect();
    let mut devices = Vec::with_capacity(results.len());
    for (d, ex) in results {
        devices.push(d);
        exclusions.extend(ex);
    }

    let campaign = campaign_stage(&devices, registry, surface_table, config);
    let devices_ok = devices.iter().filter(|d| d.status == DeviceStatus::Ok).count();
    let status = if devices_ok == devices.len() && !devices.is_empty() {
        RunStatus::Success
    } else if devices_ok > 0 {
        RunStatus::Partial
    } else {
        RunStatus::Failed
    };
    let summary = RunSummary {
        status,
        devices: devices.len(),
        devices_ok,
        traces: data.len(),
        traces_used: devices.iter().map(|d| d.entries.len()).sum(),
        exclusions: exclusions.len(),
    };
    Ok(RunOutput {
        summary,
        devices,
        campaign,
        exclusions,
    })
}

fn process_device(
    device_id: &str,
    resonator_id: &str,
    traces: &[&ResonatorTrace],
    registry: Option<&DeviceRegistry>,
    config: &RunConfig,
) -> (DeviceReport, Vec<Exclusion>) {
    let mut report = DeviceReport {
        device_id: device_id.to_string(),
        resonator_id: resonator_id.to_string(),
        status: DeviceStatus::Failed,
        failure: None,
        attenuation_db: None,
        n_traces: traces.len(),
        entries: Vec::new(),
        qc_constancy: None,
        sweep_fit: None,
        base_temperature_k: None,
        q_tls_at_photon: None,
    };
    let mut exclusions = Vec::new();
    let attenuation = registry
        .and_then(|r| r.get(device_id))
        .and_then(|d| d.attenuation_db)
        .or_else(|| config.attenuation_for(device_id));
    let Some(att) = attenuation else {
        for t in traces {
            exclusions.push(Exclusion::for_trace(
                t,
                ReasonCode::MissingAttenuation,
                "no input-line attenuation for this device".into(),
            ));
        }
        report.failure = Some("no input-line attenuation".into());
        return (report, exclusions);
    };
    report.attenuation_db = Some(att);

    let fit_options = TraceFitOptions::default();
    let thresholds = config.thresholds.nonlinearity();
    for t in traces {
        let fit = match fit_trace(t, &fit_options) {
            Ok(f) => f,
            Err(e) => {
                exclusions.push(Exclusion::for_trace(t, ReasonCode::TraceFitFailed, e.to_string()));
                continue;
            }
        };
        let nl = detect_nonlinearity(t, &fit.params, &thresholds);
        if nl.flagged {
            let reasons: Vec<String> = nl.reasons.iter().map(|r| format!("{r:?}")).collect();
            exclusions.push(Exclusion::for_trace(
                t,
                ReasonCode::Nonlinear,
                format!(
                    "{}; residual ratio {:.3}, skew {:.3}",
                    reasons.join(", "),
                    nl.residual_ratio,
                    nl.skew
                ),
            ));
            continue;
        }
        let n = match photon_number(t.meta.power_dbm, Some(att), &fit.params) {
            Ok(n) => n,
            Err(e) => {
                exclusions.push(Exclusion::for_trace(t, ReasonCode::TraceFitFailed, e.to_string()));
                continue;
            }
        };
        report.entries.push(SweepEntry {
            power_dbm: t.meta.power_dbm,
            temperature_k: t.meta.temperature_k,
            photon_number: n,
            q_int: fit.q_int,
            q_int_sigma: fit.q_int_sigma,
            q_c: fit.params.q_c,
            f0_hz: fit.params.f0_hz,
            asymmetry: fit.params.asymmetry,
        });
    }

    if report.entries.len() >= 3 {
        let qc: Vec<f64> = report.entries.iter().map(|e| e.q_c).collect();
        report.qc_constancy = qc_constancy(&qc, config.thresholds.qc_cv).ok();
    }

    let f0 = report.entries.iter().map(|e| e.f0_hz).sum::<f64>() / report.entries.len().max(1) as f64;
    let sweep = SweepDataset {
        device_id: device_id.to_string(),
        omega_rad_s: 2.0 * std::f64::consts::PI * f0,
        points: report
            .entries
            .iter()
            .map(|e| SweepPoint {
                photon_number: e.photon_number,
                temperature_k: e.temperature_k,
                q_int: e.q_int,
                q_int_sigma: Some(e.q_int_sigma).filter(|s| *s > 0.0 && s.is_finite()),
            })
            .collect(),
    };
    match fit_sweep(&sweep, &config.loss_fit_options()) {
        Ok(fit) => {
            let base = sweep.points.iter().map(|p| p.temperature_k).fold(f64::INFINITY, f64::min);
            report.base_temperature_k = Some(base);
            report.q_tls_at_photon = Some(q_tls_at_photon(&fit, config.decomposition.photon_number, base));
            report.sweep_fit = Some(fit);
            report.status = DeviceStatus::Ok;
        }
        Err(e) => {
            exclusions.push(Exclusion {
                reason: ReasonCode::SweepFitFailed,
                device_id: Some(device_id.to_string()),
                resonator_id: Some(resonator_id.to_string()),
                power_dbm: None,
                temperature_k: None,
                source: None,
                line: None,
                detail: e.to_string(),
            });
            report.failure = Some(format!("sweep fit: {e}"));
        }
    }
    (report, exclusions)
}

/// Surface table built from the regression's treatment tangents, with
/// default or configured oxide thicknesses.
pub fn table_from_spr(fit: &SprFit, config: &RunConfig) -> SurfaceLossTable {
    let entries = fit
        .treatments
        .iter()
        .map(|t| {
            let mut e = SurfaceEntry::with_defaults(t.treatment, t.tan_delta.value, t.tan_delta.sigma);
            if let Some([v, s]) = config.decomposition.thickness_nm.get(&t.treatment) {
                e.thickness_nm = *v;
                e.thickness_sigma_nm = *s;
            }
            e
        })
        .collect();
    SurfaceLossTable {
        t0_nm: config.decomposition.t0_nm,
        entries,
        tan_delta_bulk: Some(fit.tan_delta_bulk),
    }
}

fn campaign_stage(
    devices: &[DeviceReport],
    registry: Option<&DeviceRegistry>,
    surface_table: Option<SurfaceLossTable>,
    config: &RunConfig,
) -> CampaignReport {
    let mut c = CampaignReport {
        photon_number: config.decomposition.photon_number,
        ..CampaignReport::default()
    };
    let mut table = surface_table;
    if let Some(reg) = registry {
        let mut at_zero = Vec::new();
        let mut at_photon = Vec::new();
        for d in devices {
            let (Some(fit), Some(q_n)) = (&d.sweep_fit, d.q_tls_at_photon) else {
                continue;
            };
            let Some(rec) = reg.get(&d.device_id) else {
                c.notices.push(format!("{} has no registry entry; left out of the regression", d.device_id));
                continue;
            };
            let mut p = SprPoint::from_fit(&rec.geometry, fit);
            c.rows.push(SprRow {
                device_id: d.device_id.clone(),
                resonator_id: d.resonator_id.clone(),
                treatment: p.treatment,
                p_ms: p.p_ms,
                q_tls0: Estimate::new(p.q, p.q_sigma),
                q_tls_at_photon: q_n,
            });
            at_zero.push(p.clone());
            p.q = q_n.value;
            p.q_sigma = q_n.sigma;
            at_photon.push(p);
        }
        let options = config.spr_options();
        match fit_spr_scaling(&at_zero, &options) {
            Ok(f) => c.spr = Some(f),
            Err(e) => c.notices.push(format!("participation regression skipped: {e}")),
        }
        match fit_spr_scaling(&at_photon, &options) {
            Ok(f) => c.spr_at_photon = Some(f),
            Err(e) => c.notices.push(format!("regression at n = {} skipped: {e}", c.photon_number)),
        }
        if table.is_none() {
            table = c.spr.as_ref().map(|f| table_from_spr(f, config));
        }
    } else {
        c.notices.push("no device registry; decomposition skipped".into());
    }

    if let Some(t) = &table {
        let has_native = t.entries.iter().any(|e| e.treatment == Treatment::Native);
        match aggregate_triplets(t) {
            Ok(r) if has_native => c.decomposition = Some(r),
            Ok(_) => c.notices.push("no untreated surface in the table; interface split skipped".into()),
            Err(e) => c.notices.push(format!("interface split skipped: {e}")),
        }
        if t.entries.len() >= 4 {
            match solve_placement(t, HydrocarbonPlacement::MetalAirAndSubstrateAir) {
                Ok(s) => c.alternative_placement = Some(s),
                Err(e) => c.notices.push(format!("alternative placement skipped: {e}")),
            }
        }
    }
    c.surface_table = table;
    c
}

pub const SUMMARY_FILE: &str = "summary.json";
pub const CAMPAIGN_FILE: &str = "campaign.json";
pub const EXCLUSIONS_FILE: &str = "exclusions.json";
pub const DEVICES_DIR: &str = "devices";
pub const REPORT_FILE: &str = "report.txt";

fn write(path: PathBuf, contents: String, written: &mut Vec<PathBuf>) -> Result<(), PipelineError> {
    fs::write(&path, contents).map_err(|e| PipelineError::io(&path, e))?;
    written.push(path);
    Ok(())
}

fn json<T: Serialize + ?Sized>(v: &T) -> Result<String, PipelineError> {
    to_canonical_json(v).map_err(|e| PipelineError::Config(format!("serialization: {e}")))
}

/// Write every output file under `dir` and return their paths.
pub fn write_outputs(out: &RunOutput, dir: &Path) -> Result<Vec<PathBuf>, PipelineError> {
    let devices_dir = dir.join(DEVICES_DIR);
    fs::create_dir_all(&devices_dir).map_err(|e| PipelineError::io(&devices_dir, e))?;
    let mut written = Vec::new();
    write(dir.join(SUMMARY_FILE), json(&out.summary)?, &mut written)?;
    write(dir.join(CAMPAIGN_FILE), json(&out.campaign)?, &mut written)?;
    write(dir.join(EXCLUSIONS_FILE), json(&out.exclusions)?, &mut written)?;
    for d in &out.devices {
        write(devices_dir.join(format!("{}.json", d.file_stem())), json(d)?, &mut written)?;
    }
    write(dir.join("q_int_vs_n.csv"), q_int_csv(&out.devices), &mut written)?;
    write(dir.join("spr.csv"), spr_csv(&out.campaign), &mut written)?;
    write(dir.join("decomposition.csv"), decomposition_csv(&out.campaign), &mut written)?;
    write(dir.join("interfaces.csv"), interfaces_csv(&out.campaign), &mut written)?;
    write(dir.join(REPORT_FILE), render_report(out), &mut written)?;
    Ok(written)
}

/// Read back the outputs written by [`write_outputs`].
pub fn load_outputs(dir: &Path) -> Result<RunOutput, PipelineError> {
    fn read<T: serde::de::DeserializeOwned>(p: &Path) -> Result<T, PipelineError> {
        let text = fs::read_to_string(p).map_err(|e| PipelineError::io(p, e))?;
        serde_json::from_str(&text).map_err(|e| {
            PipelineError::Parse(vec![ParseIssue {
                source: display_path(p),
                line: Some(e.line() as u64),
                code: IssueCode::Malformed,
                message: e.to_string(),
            }])
        })
    }
    let devices_dir = dir.join(DEVICES_DIR);
    let mut files: Vec<PathBuf> = match fs::read_dir(&devices_dir) {
        Ok(rd) => rd
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == "json"))
            .collect(),
        Err(_) => Vec::new(),
    };
    files.sort();
    Ok(RunOutput {
        summary: read(&dir.join(SUMMARY_FILE))?,
        campaign: read(&dir.join(CAMPAIGN_FILE))?,
        exclusions: read(&dir.join(EXCLUSIONS_FILE))?,
        devices: files.iter().map(|p| read(p)).collect::<Result<_, _>>()?,
    })
}

fn q_int_csv(devices: &[DeviceReport]) -> String {
    let mut out = String::from("device_id,resonator_id,temperature_k,power_dbm,photon_number,q_int,q_int_sigma\n");
    for d in devices {
        let mut rows: Vec<&SweepEntry> = d.entries.iter().collect();
        rows.sort_by(|a, b| {
            a.temperature_k
                .total_cmp(&b.temperature_k)
                .then(a.photon_number.total_cmp(&b.photon_number))
        });
        for e in rows {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{}",
                d.device_id,
                d.resonator_id,
                fmt_float(e.temperature_k),
                fmt_float(e.power_dbm),
                fmt_float(e.photon_number),
                fmt_float(e.q_int),
                fmt_float(e.q_int_sigma)
            );
        }
    }
    out
}

fn spr_csv(c: &CampaignReport) -> String {
    let mut out = String::from("device_id,resonator_id,treatment,p_ms,q_tls0,q_tls0_sigma,q_tls_at_photon,q_tls_at_photon_sigma\n");
    for r in &c.rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{}",
            r.device_id,
            r.resonator_id,
            r.treatment,
            fmt_float(r.p_ms),
            fmt_float(r.q_tls0.value),
            fmt_float(r.q_tls0.sigma),
            fmt_float(r.q_tls_at_photon.value),
            fmt_float(r.q_tls_at_photon.sigma)
        );
    }
    out
}

fn decomposition_csv(c: &CampaignReport) -> String {
    let mut out = String::from("component,treatment,tan_delta,sigma\n");
    if let Some(f) = &c.spr {
        for t in &f.treatments {
            let _ = writeln!(
                out,
                "surface,{},{},{}",
                t.treatment,
                fmt_float(t.tan_delta.value),
                fmt_float(t.tan_delta.sigma)
            );
        }
        let _ = writeln!(
            out,
            "bulk,,{},{}",
            fmt_float(f.tan_delta_bulk.value),
            fmt_float(f.tan_delta_bulk.sigma)
        );
    }
    out
}

fn interfaces_csv(c: &CampaignReport) -> String {
    let mut out = String::from("term,value,sigma,sigma_correlated,chi_square,dof\n");
    if let Some(r) = &c.decomposition {
        let mut rows = vec![("oxide", r.ma0), ("substrate", r.sa_ms)];
        if let Some(h) = r.hydrocarbon {
            rows.push(("hydrocarbon", h));
        }
        for (name, a) in rows {
            let _ = writeln!(
                out,
                "{name},{},{},{},{},{}",
                fmt_float(a.value),
                fmt_float(a.sigma),
                fmt_float(a.sigma_correlated),
                fmt_float(a.chi_square),
                a.dof
            );
        }
    }
    out
}

fn sci(e: Estimate) -> String {
    format!("{:.3e} ± {:.2e}", e.value, e.sigma)
}

/// Plain-text summary of a run.
pub fn render_report(out: &RunOutput) -> String {
    let s = &out.summary;
    let mut r = String::new();
    let _ = writeln!(r, "status: {:?}", s.status);
    let _ = writeln!(
        r,
        "devices: {} of {} fitted; traces: {} of {} used; exclusions: {}",
        s.devices_ok, s.devices, s.traces_used, s.traces, s.exclusions
    );
    let _ = writeln!(r);
    let _ = writeln!(r, "{:<16} {:<8} {:>22} {:>10} {:>8}", "device", "res", "Q_TLS0", "Tc [K]", "Q_other");
    for d in &out.devices {
        match &d.sweep_fit {
            Some(f) => {
                let _ = writeln!(
                    r,
                    "{:<16} {:<8} {:>22} {:>10.3} {:>8}",
                    d.device_id,
                    d.resonator_id,
                    sci(Estimate::new(f.params.q_tls0, f.sigma[0])),
                    f.params.tc,
                    match f.params.q_other {
                        Some(q) => format!("{q:.2e}"),
                        None => "-".into(),
                    }
                );
            }
            None => {
                let _ = writeln!(
                    r,
                    "{:<16} {:<8} failed: {}",
                    d.device_id,
                    d.resonator_id,
                    d.failure.as_deref().unwrap_or("unknown")
                );
            }
        }
    }
    let c = &out.campaign;
    for (label, fit) in [("n = 0", &c.spr), ("n = photon", &c.spr_at_photon)] {
        if let Some(f) = fit {
            let _ = writeln!(r);
            let label = if label == "n = photon" {
                format!("n = {}", c.photon_number)
            } else {
                label.to_string()
            };
            let _ = writeln!(r, "surface loss tangents ({label}):");
            for t in &f.treatments {
                let _ = writeln!(r, "  {:<8} {}  ({} devices)", t.treatment.name(), sci(t.tan_delta), t.n_devices);
            }
            let _ = writeln!(r, "  bulk     {}", sci(f.tan_delta_bulk));
        }
    }
    if let Some(d) = &c.decomposition {
        let _ = writeln!(r);
        let _ = writeln!(r, "interface terms (p_MS referenced):");
        let _ = writeln!(r, "  oxide       {}", sci(d.ma0.estimate()));
        let _ = writeln!(r, "  substrate   {}", sci(d.sa_ms.estimate()));
        if let Some(h) = d.hydrocarbon {
            let _ = writeln!(r, "  hydrocarbon {}", sci(h.estimate()));
        }
    }
    if let Some(p) = &c.alternative_placement {
        if p.unphysical {
            let names: Vec<&str> = p.terms.iter().filter(|t| t.unphysical).map(|t| t.name.as_str()).collect();
            let _ = writeln!(r, "  alternative hydrocarbon placement gives negative terms: {}", names.join(", "));
        }
    }
    if !c.notices.is_empty() {
        let _ = writeln!(r);
        for n in &c.notices {
            let _ = writeln!(r, "note: {n}");
        }
    }
    let mut counts: BTreeMap<ReasonCode, usize> = BTreeMap::new();
    for e in &out.exclusions {
        *counts.entry(e.reason).or_default() += 1;
    }
    if !counts.is_empty() {
        let _ = writeln!(r);
        for (k, n) in counts {
            let _ = writeln!(r, "excluded ({k:?}): {n}");
        }
    }
    r
}
