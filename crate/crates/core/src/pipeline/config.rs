//! Run configuration: a TOML file, then `TLSLOSS_*` environment variables,
//! then command-line flags, each overriding the one before.
//!
//! Relative paths in a file are taken relative to the file's directory.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::PipelineError;
use crate::decomposition::{SprFitOptions, Treatment};
use crate::freqshift::GammaRegime;
use crate::lineshape::{NonlinearityThresholds, DEFAULT_QC_CV_THRESHOLD};
use crate::lossmodel::LossFitOptions;

pub const ENV_PREFIX: &str = "TLSLOSS_";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Trace files, directories of `*.csv` files, or glob patterns.
    pub traces: Vec<String>,
    /// Device registry JSON; without it the decomposition stage is skipped.
    pub registry: Option<PathBuf>,
    /// Surface-loss table JSON used instead of the fitted tangents.
    pub surface_table: Option<PathBuf>,
    pub output_dir: PathBuf,
    /// Worker threads; 0 uses every core.
    pub jobs: usize,
    pub seed: u64,
    pub gamma: GammaRegime,
    pub attenuation: AttenuationConfig,
    pub fit: FitConfig,
    pub thresholds: ThresholdConfig,
    pub decomposition: DecompositionConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            traces: Vec::new(),
            registry: None,
            surface_table: None,
            output_dir: PathBuf::from("out"),
            jobs: 0,
            seed: 0,
            gamma: GammaRegime::default(),
            attenuation: AttenuationConfig::default(),
            fit: FitConfig::default(),
            thresholds: ThresholdConfig::default(),
            decomposition: DecompositionConfig::default(),
        }
    }
}

/// Input-line attenuation in dB. Registry entries take precedence over
/// `per_device`, which takes precedence over `default_db`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AttenuationConfig {
    pub default_db: Option<f64>,
    pub per_device: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FitConfig {
    pub starts: usize,
    pub max_iterations: usize,
    pub q_other_min_delta_chi_square: f64,
    pub correlation_threshold: f64,
    pub unidentified_relative_sigma: f64,
}

impl Default for FitConfig {
    fn default() -> Self {
        let d = LossFitOptions::default();
        Self {
            starts: d.starts,
            max_iterations: d.solver.max_iterations,
            q_other_min_delta_chi_square: d.q_other_min_delta_chi_square,
            correlation_threshold: d.correlation_threshold,
            unidentified_relative_sigma: d.unidentified_relative_sigma,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ThresholdConfig {
    pub nonlinearity_residual_ratio: f64,
    pub nonlinearity_skew: f64,
    pub qc_cv: f64,
}

impl Default for ThresholdConfig {
    fn default() -> Self {
        let n = NonlinearityThresholds::default();
        Self {
            nonlinearity_residual_ratio: n.residual_ratio,
            nonlinearity_skew: n.skew,
            qc_cv: DEFAULT_QC_CV_THRESHOLD,
        }
    }
}

impl ThresholdConfig {
    pub fn nonlinearity(&self) -> NonlinearityThresholds {
        NonlinearityThresholds {
            residual_ratio: self.nonlinearity_residual_ratio,
            skew: self.nonlinearity_skew,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DecompositionConfig {
    pub p_bulk: f64,
    pub min_devices_per_treatment: usize,
    /// Photon number of the saturated-loss regression.
    pub photon_number: f64,
    pub t0_nm: f64,
    /// Oxide thickness overrides in nm, as `[value, sigma]`.
    pub thickness_nm: BTreeMap<Treatment, [f64; 2]>,
}

impl Default for DecompositionConfig {
    fn default() -> Self {
        let s = SprFitOptions::default();
        Self {
            p_bulk: s.p_bulk,
            min_devices_per_treatment: s.min_devices_per_treatment,
            photon_number: 1.0,
            t0_nm: 3.0,
            thickness_nm: BTreeMap::new(),
        }
    }
}

impl RunConfig {
    /// Read a TOML file, resolving its relative paths against its directory.
    pub fn from_file(path: &Path) -> Result<Self, PipelineError> {
        let text = std::fs::read_to_string(path).map_err(|e| PipelineError::io(path, e))?;
        let mut cfg: RunConfig =
            toml::from_str(&text).map_err(|e| PipelineError::Config(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        cfg.resolve_relative(base);
        Ok(cfg)
    }

    fn resolve_relative(&mut self, base: &Path) {
        let fix = |p: &Path| if p.is_relative() { base.join(p) } else { p.to_path_buf() };
        self.traces = self
            .traces
            .iter()
            .map(|t| fix(Path::new(t)).to_string_lossy().into_owned())
            .collect();
        self.registry = self.registry.as_deref().map(fix);
        self.surface_table = self.surface_table.as_deref().map(fix);
        self.output_dir = fix(&self.output_dir);
    }

    /// Apply `TLSLOSS_*` overrides from `vars`, usually `std::env::vars()`.
    pub fn apply_env(&mut self, vars: impl IntoIterator<Item = (String, String)>) -> Result<(), PipelineError> {
        for (k, v) in vars {
            let Some(name) = k.strip_prefix(ENV_PREFIX) else {
                continue;
            };
            let bad = |what: &str| PipelineError::Config(format!("{k}={v:?}: {what}"));
            match name {
                "TRACES" => self.traces = v.split(',').map(|s| s.trim().to_string()).filter(|s| !s.is_empty()).collect(),
                "REGISTRY" => self.registry = Some(PathBuf::from(&v)),
                "SURFACE_TABLE" => self.surface_table = Some(PathBuf::from(&v)),
                "OUTPUT_DIR" => self.output_dir = PathBuf::from(&v),
                "JOBS" => self.jobs = v.parse().map_err(|_| bad("expected a count"))?,
                "SEED" => self.seed = v.parse().map_err(|_| bad("expected an integer"))?,
                "GAMMA" => self.gamma = v.parse().map_err(|e: String| bad(&e))?,
                "ATTENUATION_DB" => {
                    self.attenuation.default_db = Some(v.parse().map_err(|_| bad("expected dB"))?)
                }
                "STARTS" => self.fit.starts = v.parse().map_err(|_| bad("expected a count"))?,
                _ => {}
            }
        }
        Ok(())
    }

    /// Expand `traces` to concrete paths. Patterns with `*`, `?` or `[` are
    /// globbed and must match something; other entries must exist.
    pub fn trace_paths(&self) -> Result<Vec<PathBuf>, PipelineError> {
        let mut out = Vec::new();
        for t in &self.traces {
            if t.contains(['*', '?', '[']) {
                let paths = glob::glob(t).map_err(|e| PipelineError::Config(format!("bad pattern {t:?}: {e}")))?;
                let mut matched: Vec<PathBuf> = paths.filter_map(Result::ok).collect();
                if matched.is_empty() {
                    return Err(PipelineError::MissingInput(PathBuf::from(t)));
                }
                matched.sort();
                out.extend(matched);
            } else {
                let p = PathBuf::from(t);
                if !p.exists() {
                    return Err(PipelineError::MissingInput(p));
                }
                out.push(p);
            }
        }
        Ok(out)
    }

    pub fn validate(&self) -> Result<(), PipelineError> {
        let bad = |m: String| Err(PipelineError::Config(m));
        let t = &self.thresholds;
        for (name, v) in [
            ("thresholds.nonlinearity_residual_ratio", t.nonlinearity_residual_ratio),
            ("thresholds.nonlinearity_skew", t.nonlinearity_skew),
            ("thresholds.qc_cv", t.qc_cv),
            ("decomposition.p_bulk", self.decomposition.p_bulk),
            ("decomposition.photon_number", self.decomposition.photon_number),
            ("decomposition.t0_nm", self.decomposition.t0_nm),
            ("fit.correlation_threshold", self.fit.correlation_threshold),
            ("fit.unidentified_relative_sigma", self.fit.unidentified_relative_sigma),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return bad(format!("{name} must be positive, got {v}"));
            }
        }
        if self.fit.starts == 0 || self.fit.max_iterations == 0 {
            return bad("fit.starts and fit.max_iterations must be at least 1".into());
        }
        for (tr, [v, s]) in &self.decomposition.thickness_nm {
            if !(*v > 0.0 && *s >= 0.0) {
                return bad(format!("thickness override for {tr} must be positive"));
            }
        }
        self.trace_paths()?;
        for p in [&self.registry, &self.surface_table].into_iter().flatten() {
            if !p.is_file() {
                return Err(PipelineError::MissingInput(p.clone()));
            }
        }
        Ok(())
    }

    pub fn loss_fit_options(&self) -> LossFitOptions {
        let mut o = LossFitOptions {
            starts: self.fit.starts,
            seed: self.seed,
            q_other_min_delta_chi_square: self.fit.q_other_min_delta_chi_square,
            correlation_threshold: self.fit.correlation_threshold,
            unidentified_relative_sigma: self.fit.unidentified_relative_sigma,
            ..LossFitOptions::default()
        };
        o.solver.max_iterations = self.fit.max_iterations;
        o
    }

    pub fn spr_options(&self) -> SprFitOptions {
        SprFitOptions {
            p_bulk: self.decomposition.p_bulk,
            min_devices_per_treatment: self.decomposition.min_devices_per_treatment,
            ..SprFitOptions::default()
        }
    }

    /// Attenuation for a device when the registry gives none.
    pub fn attenuation_for(&self, device_id: &str) -> Option<f64> {
        self.attenuation
            .per_device
            .get(device_id)
            .copied()
            .or(self.attenuation.default_db)
    }
}
