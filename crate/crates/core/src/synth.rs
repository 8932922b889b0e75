//! Forward-model generators for traces, sweeps, frequency-shift curves and
//! multi-device campaigns. Noise is Gaussian on the measured magnitude and
//! fully determined by the seed.

use std::fs;
use std::path::{Path, PathBuf};

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::constants::{half_photon_energy_ratio, HBAR};
use crate::decomposition::{DeviceGeometry, DeviceType, Treatment};
use crate::freqshift::{freq_shift_model, FreqShiftDataset, FreqShiftParams, FreqShiftPoint};
use crate::lineshape::{s21_model, LineshapeParams, ResonatorTrace, TraceMetadata, MIN_TRACE_POINTS};
use crate::lossmodel::{photon_number, q_int_model, LossParams, SweepDataset, SweepPoint};
use crate::pipeline::format::to_canonical_json;
use crate::pipeline::io::{write_traces_csv, DeviceRecord, DeviceRegistry};
use crate::pipeline::PipelineError;

/// Sampling and noise of one generated trace.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TraceSpec {
    /// Full span in units of the linewidth `f0/Q_tot`.
    pub span_linewidths: f64,
    pub points: usize,
    /// Signal-to-noise ratio of the off-resonance level; `None` is noiseless.
    pub snr_db: Option<f64>,
}

impl Default for TraceSpec {
    fn default() -> Self {
        Self {
            span_linewidths: 5.0,
            points: 201,
            snr_db: Some(40.0),
        }
    }
}

/// Per-point standard deviation for a given SNR: the off-resonance level
/// `1 + baseline` over `10^(SNR/20)`.
pub fn trace_noise_sigma(snr_db: f64, baseline: f64) -> f64 {
    10f64.powf(-snr_db / 20.0) * (1.0 + baseline).abs()
}

fn sample_grid(params: &LineshapeParams, spec: &TraceSpec) -> Vec<f64> {
    let half = 0.5 * spec.span_linewidths * params.linewidth_hz();
    let n = spec.points.max(2);
    (0..n)
        .map(|i| params.f0_hz - half + 2.0 * half * i as f64 / (n - 1) as f64)
        .collect()
}

fn add_noise(values: &mut [f64], sigma: f64, seed: u64) {
    if sigma <= 0.0 {
        return;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, sigma).expect("finite sigma");
    for v in values.iter_mut() {
        // magnitudes are non-negative
        *v = (*v + normal.sample(&mut rng)).max(0.0);
    }
}

/// Sample the lineshape over a symmetric span around `f0` and add noise.
pub fn generate_trace(
    params: &LineshapeParams,
    meta: TraceMetadata,
    spec: &TraceSpec,
    seed: u64,
) -> ResonatorTrace {
    let freq = sample_grid(params, spec);
    let mut mag: Vec<f64> = freq.iter().map(|f| s21_model(params, *f)).collect();
    if let Some(snr) = spec.snr_db {
        add_noise(&mut mag, trace_noise_sigma(snr, params.baseline), seed);
    }
    ResonatorTrace {
        meta,
        frequency_hz: freq,
        s21_mag: mag,
        s21_sigma: None,
    }
}

/// A frequency-pulled ("shark fin") trace: above `f0` the resonance is
/// dragged along with the drive for `pull_linewidths`, holding the minimum,
/// then snaps back to the undriven curve.
pub fn generate_shark_fin_trace(
    params: &LineshapeParams,
    meta: TraceMetadata,
    spec: &TraceSpec,
    pull_linewidths: f64,
    seed: u64,
) -> ResonatorTrace {
    let freq = sample_grid(params, spec);
    let pull = pull_linewidths * params.linewidth_hz();
    let mut mag: Vec<f64> = freq
        .iter()
        .map(|&f| {
            let dragged = f > params.f0_hz && f <= params.f0_hz + pull;
            s21_model(params, if dragged { params.f0_hz } else { f })
        })
        .collect();
    if let Some(snr) = spec.snr_db {
        add_noise(&mut mag, trace_noise_sigma(snr, params.baseline), seed);
    }
    ResonatorTrace {
        meta,
        frequency_hz: freq,
        s21_mag: mag,
        s21_sigma: None,
    }
}

/// `Q_int` on a photon-number by temperature grid with relative Gaussian
/// noise; the stated sigma is the relative noise times the true value.
pub fn generate_sweep_grid(
    params: &LossParams,
    omega: f64,
    device_id: &str,
    photons: &[f64],
    temperatures: &[f64],
    relative_noise: f64,
    seed: u64,
) -> SweepDataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let mut points = Vec::with_capacity(photons.len() * temperatures.len());
    for &n in photons {
        for &t in temperatures {
            let q = q_int_model(params, n, t, omega);
            let (q_int, q_int_sigma) = if relative_noise > 0.0 {
                let s = relative_noise * q;
                ((q + s * normal.sample(&mut rng)).max(1e-3 * q), Some(s))
            } else {
                (q, None)
            };
            points.push(SweepPoint {
                photon_number: n,
                temperature_k: t,
                q_int,
                q_int_sigma,
            });
        }
    }
    SweepDataset {
        device_id: device_id.to_string(),
        omega_rad_s: omega,
        points,
    }
}

/// Resonator-level parameters needed to turn a drive power into traces.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResonatorSpec {
    pub device_id: String,
    pub resonator_id: String,
    pub f0_hz: f64,
    pub q_c: f64,
    #[serde(default)]
    pub asymmetry: f64,
    #[serde(default)]
    pub baseline: f64,
    pub attenuation_db: f64,
    pub loss: LossParams,
}

impl ResonatorSpec {
    pub fn omega(&self) -> f64 {
        2.0 * std::f64::consts::PI * self.f0_hz
    }

    /// Self-consistent `(n̄, Q_int)` at a drive power: the photon number sets
    /// `Q_int`, which in turn sets the photon number.
    pub fn operating_point(&self, power_dbm: f64, temperature: f64) -> (f64, f64) {
        let omega = self.omega();
        let photons_for = |q_int: f64| {
            let lp = LineshapeParams::from_q_int(self.f0_hz, q_int, self.q_c, 0.0, 0.0);
            photon_number(power_dbm, Some(self.attenuation_db), &lp).expect("attenuation given")
        };
        let mut ln_n = photons_for(q_int_model(&self.loss, 1.0, temperature, omega)).ln();
        for _ in 0..200 {
            let q = q_int_model(&self.loss, ln_n.exp(), temperature, omega);
            let next = photons_for(q).ln();
            let step = next - ln_n;
            ln_n += 0.5 * step;
            if step.abs() < 1e-13 {
                break;
            }
        }
        let n = ln_n.exp();
        (n, q_int_model(&self.loss, n, temperature, omega))
    }

    pub fn lineshape_at(&self, q_int: f64) -> LineshapeParams {
        LineshapeParams::from_q_int(self.f0_hz, q_int, self.q_c, self.asymmetry, self.baseline)
    }
}

/// One trace per (power, temperature), each with its own child seed drawn
/// in grid order from `seed`.
pub fn generate_sweep_traces(
    resonator: &ResonatorSpec,
    powers_dbm: &[f64],
    temperatures: &[f64],
    spec: &TraceSpec,
    seed: u64,
) -> Vec<ResonatorTrace> {
    let mut master = ChaCha8Rng::seed_from_u64(seed);
    let mut traces = Vec::with_capacity(powers_dbm.len() * temperatures.len());
    for &p in powers_dbm {
        for &t in temperatures {
            let child = master.next_u64();
            let (_, q_int) = resonator.operating_point(p, t);
            let meta = TraceMetadata::new(&resonator.device_id, &resonator.resonator_id, p, t);
            traces.push(generate_trace(&resonator.lineshape_at(q_int), meta, spec, child));
        }
    }
    traces
}

/// Fractional frequency shift curve relative to the lowest temperature,
/// with absolute Gaussian noise `sigma`.
pub fn generate_freq_shift(
    params: &FreqShiftParams,
    f0_hz: f64,
    temperatures: &[f64],
    sigma: f64,
    seed: u64,
) -> FreqShiftDataset {
    let omega = 2.0 * std::f64::consts::PI * f0_hz;
    let t_ref = temperatures.iter().copied().fold(f64::INFINITY, f64::min);
    let reference = freq_shift_model(params, t_ref, omega);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let points = temperatures
        .iter()
        .map(|&t| {
            let clean = freq_shift_model(params, t, omega) - reference;
            let noisy = if sigma > 0.0 {
                clean + sigma * normal.sample(&mut rng)
            } else {
                clean
            };
            FreqShiftPoint {
                temperature_k: t,
                df_over_f: noisy,
                sigma: (sigma > 0.0).then_some(sigma),
            }
        })
        .collect();
    FreqShiftDataset { f0_hz, points }
}

/// True surface loss tangents of one treatment, in the unsaturated limit and
/// at one photon.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SurfaceTruth {
    pub treatment: Treatment,
    pub tan_delta: f64,
    pub tan_delta_n1: f64,
}

/// A device population whose TLS loss follows
/// `1/Q = p_MS·tan δ_surface + p_bulk·tan δ_bulk` at every photon number
/// the truth specifies.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PopulationSpec {
    pub surfaces: Vec<SurfaceTruth>,
    pub tan_delta_bulk: f64,
    pub p_bulk: f64,
    /// `p_MS` values are log-spaced over this range within each treatment.
    pub p_ms_range: [f64; 2],
    pub devices_per_treatment: usize,
    /// Resonance frequencies are spread linearly over this range.
    pub f0_range_hz: [f64; 2],
    /// `Q_c` as a multiple of `Q_int` at one photon and base temperature.
    pub q_c_ratio: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub q_qp0: f64,
    pub tc: f64,
    pub base_temperature_k: f64,
    pub device_type: DeviceType,
}

impl Default for PopulationSpec {
    fn default() -> Self {
        let s = |treatment, tan_delta, tan_delta_n1| SurfaceTruth {
            treatment,
            tan_delta,
            tan_delta_n1,
        };
        Self {
            surfaces: vec![
                s(Treatment::Native, 13.6e-4, 11.7e-4),
                s(Treatment::Boe, 7.2e-4, 6.6e-4),
                s(Treatment::LongBoe, 7.0e-4, 7.0e-4),
                s(Treatment::Triacid, 14.0e-4, 11.0e-4),
            ],
            tan_delta_bulk: 1.5e-7,
            p_bulk: 1.0,
            p_ms_range: [1e-4, 3e-3],
            devices_per_treatment: 3,
            f0_range_hz: [4.5e9, 7.0e9],
            q_c_ratio: 1.0,
            beta1: 1.0,
            beta2: 0.5,
            q_qp0: 2e3,
            tc: 3.0,
            base_temperature_k: 0.017,
            device_type: DeviceType::Cpw,
        }
    }
}

/// One synthetic device: registry geometry plus the resonator that makes
/// its traces.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeviceTruth {
    pub geometry: DeviceGeometry,
    pub resonator: ResonatorSpec,
}

/// `D` such that `Q_TLS(n̄ = 1, T)` equals `q1` when `Q_TLS,0 = q0`. When the
/// one-photon loss is not below the unsaturated loss, returns a `D` large
/// enough that saturation at one photon is negligible.
pub fn saturation_for_one_photon(q0: f64, q1: f64, beta1: f64, temperature: f64, omega: f64) -> f64 {
    let th = half_photon_energy_ratio(omega, temperature).tanh();
    let r = th * q1 / q0;
    if r <= 1.0 + 1e-9 {
        return 1e12;
    }
    th / (temperature.powf(beta1) * (r * r - 1.0))
}

/// Devices in treatment order, `p_MS` rising within each treatment.
pub fn device_population(spec: &PopulationSpec) -> Vec<DeviceTruth> {
    let m = spec.devices_per_treatment.max(1);
    let total = spec.surfaces.len() * m;
    let [p_lo, p_hi] = spec.p_ms_range;
    let [f_lo, f_hi] = spec.f0_range_hz;
    let mut out = Vec::with_capacity(total);
    for (ti, surface) in spec.surfaces.iter().enumerate() {
        for k in 0..m {
            let idx = ti * m + k;
            let frac = if m > 1 { k as f64 / (m - 1) as f64 } else { 0.5 };
            let p_ms = p_lo * (p_hi / p_lo).powf(frac);
            let f0 = if total > 1 {
                f_lo + (f_hi - f_lo) * idx as f64 / (total - 1) as f64
            } else {
                f_lo
            };
            let omega = 2.0 * std::f64::consts::PI * f0;
            let bulk = spec.p_bulk * spec.tan_delta_bulk;
            let q0 = 1.0 / (p_ms * surface.tan_delta + bulk);
            let q1 = 1.0 / (p_ms * surface.tan_delta_n1 + bulk);
            let loss = LossParams {
                q_tls0: q0,
                d: saturation_for_one_photon(q0, q1, spec.beta1, spec.base_temperature_k, omega),
                beta1: spec.beta1,
                beta2: spec.beta2,
                q_qp0: spec.q_qp0,
                tc: spec.tc,
                q_other: None,
            };
            let device_id = format!("{}-{:02}", surface.treatment.name(), k + 1);
            let q_int1 = q_int_model(&loss, 1.0, spec.base_temperature_k, omega);
            out.push(DeviceTruth {
                geometry: DeviceGeometry {
                    device_id: device_id.clone(),
                    p_ms,
                    p_ma: None,
                    p_sa: None,
                    treatment: surface.treatment,
                    device_type: spec.device_type,
                    tags: Default::default(),
                },
                resonator: ResonatorSpec {
                    device_id,
                    resonator_id: "r1".into(),
                    f0_hz: f0,
                    q_c: spec.q_c_ratio * q_int1,
                    asymmetry: 0.0,
                    baseline: 0.0,
                    attenuation_db: 0.0,
                    loss,
                },
            });
        }
    }
    out
}

/// Input-line attenuation that puts `photons` in the resonator at
/// `power_dbm` and `temperature`.
pub fn attenuation_for_photons(r: &ResonatorSpec, power_dbm: f64, temperature: f64, photons: f64) -> f64 {
    let omega = r.omega();
    let q_int = q_int_model(&r.loss, photons, temperature, omega);
    let lp = r.lineshape_at(q_int);
    let watts = photons * lp.q_c * HBAR * omega * omega / (2.0 * lp.q_tot * lp.q_tot);
    power_dbm - 30.0 - 10.0 * watts.log10()
}

/// A full measurement campaign: every device swept over the same power and
/// temperature grids.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CampaignSpec {
    pub population: PopulationSpec,
    pub powers_dbm: Vec<f64>,
    pub temperatures_k: Vec<f64>,
    /// Photon number at the lowest power and base temperature; sets each
    /// device's attenuation.
    pub photons_at_lowest_power: f64,
    pub trace: TraceSpec,
    pub seed: u64,
}

impl Default for CampaignSpec {
    fn default() -> Self {
        let (lo, hi, n) = (0.017f64, 1.0f64, 12);
        Self {
            population: PopulationSpec::default(),
            powers_dbm: (0..6).map(|i| -70.0 + 10.0 * i as f64).collect(),
            temperatures_k: (0..n)
                .map(|i| lo * (hi / lo).powf(i as f64 / (n - 1) as f64))
                .collect(),
            photons_at_lowest_power: 1.0,
            trace: TraceSpec::default(),
            seed: 0,
        }
    }
}

impl CampaignSpec {
    pub fn validate(&self) -> Result<(), String> {
        if self.powers_dbm.is_empty() || self.temperatures_k.is_empty() {
            return Err("power and temperature grids must be non-empty".into());
        }
        if self.population.surfaces.is_empty() || self.population.devices_per_treatment == 0 {
            return Err("population has no devices".into());
        }
        if self.temperatures_k.iter().any(|t| !(*t > 0.0 && t.is_finite())) {
            return Err("temperatures must be positive".into());
        }
        if self.trace.points < MIN_TRACE_POINTS {
            return Err(format!("traces need at least {MIN_TRACE_POINTS} points"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Campaign {
    pub devices: Vec<DeviceTruth>,
    pub traces: Vec<ResonatorTrace>,
}

/// Generate every device's traces; each device draws a child seed from
/// `spec.seed` in population order.
pub fn generate_campaign(spec: &CampaignSpec) -> Result<Campaign, String> {
    spec.validate()?;
    let p_min = spec.powers_dbm.iter().copied().fold(f64::INFINITY, f64::min);
    let mut master = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut devices = device_population(&spec.population);
    let mut traces = Vec::new();
    for d in &mut devices {
        d.resonator.attenuation_db = attenuation_for_photons(
            &d.resonator,
            p_min,
            spec.population.base_temperature_k,
            spec.photons_at_lowest_power,
        );
        let child = master.next_u64();
        traces.extend(generate_sweep_traces(
            &d.resonator,
            &spec.powers_dbm,
            &spec.temperatures_k,
            &spec.trace,
            child,
        ));
    }
    Ok(Campaign { devices, traces })
}

pub const CAMPAIGN_CONFIG_FILE: &str = "tlsloss.toml";

/// Write a campaign as pipeline input: `traces/<device>.csv`,
/// `devices.json`, `truth.json` and a run configuration pointing at them.
pub fn write_campaign(campaign: &Campaign, dir: &Path, seed: u64) -> Result<Vec<PathBuf>, PipelineError> {
    let traces_dir = dir.join("traces");
    fs::create_dir_all(&traces_dir).map_err(|e| PipelineError::io(&traces_dir, e))?;
    let mut written = Vec::new();
    let mut put = |path: PathBuf, text: String| -> Result<(), PipelineError> {
        fs::write(&path, text).map_err(|e| PipelineError::io(&path, e))?;
        written.push(path);
        Ok(())
    };
    for d in &campaign.devices {
        let own: Vec<ResonatorTrace> = campaign
            .traces
            .iter()
            .filter(|t| t.meta.device_id == d.geometry.device_id)
            .cloned()
            .collect();
        put(traces_dir.join(format!("{}.csv", d.geometry.device_id)), write_traces_csv(&own))?;
    }
    let registry = DeviceRegistry {
        devices: campaign
            .devices
            .iter()
            .map(|d| DeviceRecord {
                geometry: d.geometry.clone(),
                attenuation_db: Some(d.resonator.attenuation_db),
            })
            .collect(),
    };
    put(dir.join("devices.json"), json(&registry)?)?;
    put(dir.join("truth.json"), json(&campaign.devices)?)?;
    put(
        dir.join(CAMPAIGN_CONFIG_FILE),
        format!(
            "traces = [\"traces\"]\nregistry = \"devices.json\"\noutput_dir = \"out\"\nseed = {seed}\n"
        ),
    )?;
    Ok(written)
}

fn json<T: Serialize + ?Sized>(v: &T) -> Result<String, PipelineError> {
    to_canonical_json(v).map_err(|e| PipelineError::Config(format!("serialization: {e}")))
}
