//! Single-trace `|S21|` lineshape: model, fit, nonlinearity screening and
//! coupling-Q constancy.
//!
//! The model is the magnitude of a notch-type resonator response with a
//! flat additive background,
//!
//! ```text
//! |S21(f)| = | 1 - (Qt/Qc)(1 - 2i a) / (1 + 2i Qt (f - f0)/f0) | + b
//! ```
//!
//! where `a` is the dimensionless asymmetry expressed in units of the
//! coupling rate `ω0/Qc`, and `1/Qt = 1/Qi + 1/Qc`.
//!
//! Magnitudes are linear and normalised so that the off-resonance
//! transmission is close to one.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::numerics::{
    mean_std, nlls_fit, CovarianceScale, FitOptions, FitProblem, NumericsError, ResidualModel,
};

pub const MIN_TRACE_POINTS: usize = 8;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LineshapeError {
    #[error("invalid trace: {0}")]
    InvalidTrace(String),
    #[error("no resonance dip found in trace {0}")]
    NoDipFound(String),
    #[error("fit of trace {label} diverged: {reason}")]
    FitDiverged { label: String, reason: String },
    #[error("Qc constancy needs at least 3 fitted traces, got {0}")]
    TooFewFits(usize),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
}

/// Where a trace came from and the conditions it was taken under.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceMetadata {
    #[serde(default)]
    pub device_id: String,
    pub resonator_id: String,
    pub power_dbm: f64,
    pub temperature_k: f64,
}

impl TraceMetadata {
    pub fn new(device_id: &str, resonator_id: &str, power_dbm: f64, temperature_k: f64) -> Self {
        Self {
            device_id: device_id.to_string(),
            resonator_id: resonator_id.to_string(),
            power_dbm,
            temperature_k,
        }
    }

    pub fn label(&self) -> String {
        format!(
            "{}/{}@{}dBm,{}K",
            self.device_id, self.resonator_id, self.power_dbm, self.temperature_k
        )
    }
}

/// A frequency-swept `|S21|` measurement of one resonator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResonatorTrace {
    pub meta: TraceMetadata,
    pub frequency_hz: Vec<f64>,
    pub s21_mag: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub s21_sigma: Option<Vec<f64>>,
}

impl ResonatorTrace {
    pub fn new(
        meta: TraceMetadata,
        frequency_hz: Vec<f64>,
        s21_mag: Vec<f64>,
        s21_sigma: Option<Vec<f64>>,
    ) -> Result<Self, LineshapeError> {
        let trace = Self {
            meta,
            frequency_hz,
            s21_mag,
            s21_sigma,
        };
        trace.validate()?;
        Ok(trace)
    }

    pub fn validate(&self) -> Result<(), LineshapeError> {
        let bad = |m: String| Err(LineshapeError::InvalidTrace(m));
        let n = self.frequency_hz.len();
        if n < MIN_TRACE_POINTS {
            return bad(format!("{n} samples, need at least {MIN_TRACE_POINTS}"));
        }
        if self.s21_mag.len() != n {
            return bad(format!("{n} frequencies but {} magnitudes", self.s21_mag.len()));
        }
        if self.frequency_hz.iter().any(|f| !f.is_finite() || *f <= 0.0) {
            return bad("frequencies must be positive and finite".into());
        }
        if self.frequency_hz.windows(2).any(|w| w[1] <= w[0]) {
            return bad("frequencies must be strictly increasing".into());
        }
        if self.s21_mag.iter().any(|m| !m.is_finite() || *m < 0.0) {
            return bad("magnitudes must be finite and non-negative".into());
        }
        if let Some(s) = &self.s21_sigma {
            if s.len() != n {
                return bad(format!("{n} frequencies but {} sigmas", s.len()));
            }
            if s.iter().any(|v| !v.is_finite() || *v <= 0.0) {
                return bad("sigma must be finite and strictly positive".into());
            }
        }
        if !(self.meta.temperature_k.is_finite() && self.meta.temperature_k > 0.0) {
            return bad("temperature must be positive".into());
        }
        if !self.meta.power_dbm.is_finite() {
            return bad("power must be finite".into());
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.frequency_hz.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frequency_hz.is_empty()
    }
}

/// Parameters of the `|S21|` lineshape.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LineshapeParams {
    pub f0_hz: f64,
    pub q_tot: f64,
    pub q_c: f64,
    /// Asymmetry in units of the coupling rate `ω0/Qc`.
    pub asymmetry: f64,
    pub baseline: f64,
}

impl LineshapeParams {
    pub fn from_q_int(f0_hz: f64, q_int: f64, q_c: f64, asymmetry: f64, baseline: f64) -> Self {
        Self {
            f0_hz,
            q_tot: 1.0 / (1.0 / q_int + 1.0 / q_c),
            q_c,
            asymmetry,
            baseline,
        }
    }

    /// `Q_int = (1/Q_tot - 1/Q_c)^-1`.
    pub fn q_int(&self) -> f64 {
        1.0 / (1.0 / self.q_tot - 1.0 / self.q_c)
    }

    pub fn linewidth_hz(&self) -> f64 {
        self.f0_hz / self.q_tot
    }

    pub fn is_valid(&self) -> bool {
        self.f0_hz > 0.0
            && self.q_tot > 0.0
            && self.q_c > 0.0
            && self.q_tot <= self.q_c
            && self.asymmetry.is_finite()
            && self.baseline.is_finite()
    }
}

/// Modelled `|S21|` at probe frequency `f_hz`.
pub fn s21_model(params: &LineshapeParams, f_hz: f64) -> f64 {
    let ratio = params.q_tot / params.q_c;
    let x = params.q_tot * (f_hz - params.f0_hz) / params.f0_hz;
    // S = [(1 - r) + 2i(x + r a)] / (1 + 2ix)
    let num_re = 1.0 - ratio;
    let num_im = 2.0 * (x + ratio * params.asymmetry);
    let num2 = num_re * num_re + num_im * num_im;
    let den2 = 1.0 + 4.0 * x * x;
    (num2 / den2).sqrt() + params.baseline
}

/// Result of fitting one trace.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceFit {
    pub meta: TraceMetadata,
    pub params: LineshapeParams,
    pub q_int: f64,
    pub q_int_sigma: f64,
    pub q_c_sigma: f64,
    pub f0_sigma_hz: f64,
    /// Covariance of `(f0 [Hz], ln Q_int, ln Q_c, asymmetry, baseline)`.
    pub covariance: Vec<Vec<f64>>,
    /// Per-point noise used for the covariance (given or estimated).
    pub noise_sigma: f64,
    pub chi_square: f64,
    pub reduced_chi_square: f64,
    pub converged: bool,
}

#[derive(Debug, Clone)]
pub struct TraceFitOptions {
    pub solver: FitOptions,
    /// Asymmetry values used as starting points.
    pub asymmetry_starts: Vec<f64>,
}

impl Default for TraceFitOptions {
    fn default() -> Self {
        Self {
            solver: FitOptions::default(),
            asymmetry_starts: vec![0.0, 0.15, -0.15],
        }
    }
}

/// Fit-space parameters: `[f0 offset in reference linewidths, ln Qi, ln Qc, a, b]`.
struct TraceModel<'t> {
    freq: &'t [f64],
    mag: &'t [f64],
    f_ref: f64,
    w_ref: f64,
}

const LN_Q_MIN: f64 = 2.302_585_092_994_046; // ln 10
const LN_Q_MAX: f64 = 27.631_021_115_928_547; // ln 1e12

impl TraceModel<'_> {
    fn params(&self, p: &[f64]) -> LineshapeParams {
        LineshapeParams::from_q_int(
            self.f_ref + p[0] * self.w_ref,
            p[1].exp(),
            p[2].exp(),
            p[3],
            p[4],
        )
    }

    fn internal(&self, lp: &LineshapeParams) -> Vec<f64> {
        vec![
            (lp.f0_hz - self.f_ref) / self.w_ref,
            lp.q_int().ln(),
            lp.q_c.ln(),
            lp.asymmetry,
            lp.baseline,
        ]
    }
}

impl ResidualModel for TraceModel<'_> {
    fn n_residuals(&self) -> usize {
        self.freq.len()
    }

    fn residuals(&self, p: &[f64], out: &mut [f64]) {
        let lp = self.params(p);
        for (i, o) in out.iter_mut().enumerate() {
            *o = s21_model(&lp, self.freq[i]) - self.mag[i];
        }
    }

    fn jacobian(&self, p: &[f64]) -> Option<DMatrix<f64>> {
        let lp = self.params(p);
        let r = lp.q_tot / lp.q_c;
        let a = lp.asymmetry;
        let f0 = lp.f0_hz;
        let mut jac = DMatrix::zeros(self.freq.len(), 5);
        for (i, &f) in self.freq.iter().enumerate() {
            let x = lp.q_tot * (f - f0) / f0;
            let u = x + r * a;
            let n2 = (1.0 - r).powi(2) + 4.0 * u * u;
            let d2 = 1.0 + 4.0 * x * x;
            let m = (n2 / d2).sqrt();
            // d|S|/dθ = m/2 (dN²/N² - dD²/D²)
            let dn_dr = -2.0 * (1.0 - r) + 8.0 * u * a;
            let dn_dx = 8.0 * u;
            let dn_da = 8.0 * u * r;
            let dd_dx = 8.0 * x;
            let dm_dr = 0.5 * m * dn_dr / n2;
            let dm_dx = 0.5 * m * (dn_dx / n2 - dd_dx / d2);
            let dm_da = 0.5 * m * dn_da / n2;
            // chain to fit coordinates
            let dx_dshift = -lp.q_tot * f * self.w_ref / (f0 * f0);
            let dr_dlnqi = r * (1.0 - r);
            let dx_dlnqi = x * (1.0 - r);
            let dr_dlnqc = -r * (1.0 - r);
            let dx_dlnqc = x * r;
            jac[(i, 0)] = dm_dx * dx_dshift;
            jac[(i, 1)] = dm_dr * dr_dlnqi + dm_dx * dx_dlnqi;
            jac[(i, 2)] = dm_dr * dr_dlnqc + dm_dx * dx_dlnqc;
            jac[(i, 3)] = dm_da;
            jac[(i, 4)] = 1.0;
        }
        Some(jac)
    }
}

fn median(values: &mut [f64]) -> f64 {
    values.sort_by(|a, b| a.total_cmp(b));
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

/// Off-resonance level from the median of the outer tenth on each side.
fn edge_level(mag: &[f64]) -> f64 {
    let n = mag.len();
    let k = (n / 10).max(3).min(n / 2);
    let mut edges: Vec<f64> = mag[..k].iter().chain(&mag[n - k..]).copied().collect();
    median(&mut edges)
}

/// White-noise estimate from second differences (insensitive to smooth signal).
pub fn second_difference_noise(values: &[f64]) -> f64 {
    if values.len() < 3 {
        return 0.0;
    }
    let mut d: Vec<f64> = values
        .windows(3)
        .map(|w| (w[0] - 2.0 * w[1] + w[2]).abs())
        .collect();
    // median |N(0, 6σ²)| = 0.6745 sqrt(6) σ
    median(&mut d) / (0.674_489_750_196_081_7 * 6f64.sqrt())
}

/// Points where the curve crosses `level` on each side of `imin`, by linear
/// interpolation. Falls back to the span edge when no crossing exists.
fn half_crossings(freq: &[f64], curve: &[f64], imin: usize, level: f64) -> (f64, f64) {
    let mut left = freq[0];
    for i in (1..=imin).rev() {
        if curve[i - 1] >= level && curve[i] < level {
            let t = (level - curve[i]) / (curve[i - 1] - curve[i]);
            left = freq[i] - t * (freq[i] - freq[i - 1]);
            break;
        }
    }
    let mut right = freq[freq.len() - 1];
    for i in imin..freq.len() - 1 {
        if curve[i] < level && curve[i + 1] >= level {
            let t = (level - curve[i]) / (curve[i + 1] - curve[i]);
            right = freq[i] + t * (freq[i + 1] - freq[i]);
            break;
        }
    }
    (left, right)
}

fn argmin(values: &[f64]) -> usize {
    values
        .iter()
        .enumerate()
        .min_by(|a, b| a.1.total_cmp(b.1))
        .map(|(i, _)| i)
        .unwrap_or(0)
}

fn smooth3(values: &[f64]) -> Vec<f64> {
    let n = values.len();
    (0..n)
        .map(|i| {
            let lo = i.saturating_sub(1);
            let hi = (i + 1).min(n - 1);
            values[lo..=hi].iter().sum::<f64>() / (hi - lo + 1) as f64
        })
        .collect()
}

/// Initial lineshape guess: f0 at the minimum, Q_tot from the half-power
/// width, baseline from the edge median.
pub fn initial_guess(trace: &ResonatorTrace) -> Result<LineshapeParams, LineshapeError> {
    let freq = &trace.frequency_hz;
    let mag = &trace.s21_mag;
    let edge = edge_level(mag);
    let smooth = smooth3(mag);
    let imin = argmin(&smooth);
    let dip = smooth[imin];
    let noise = second_difference_noise(mag);
    if !(edge > 0.0) || edge - dip <= (3.0 * noise).max(1e-9 * edge) {
        return Err(LineshapeError::NoDipFound(trace.meta.label()));
    }
    let depth_ratio = (dip / edge).clamp(0.0, 1.0);
    let half_power = (0.5 * (1.0 + depth_ratio * depth_ratio)).sqrt() * edge;
    let (left, right) = half_crossings(freq, &smooth, imin, half_power);
    let span = freq[freq.len() - 1] - freq[0];
    let mut fwhm = right - left;
    if !(fwhm > 0.0) || fwhm >= span {
        fwhm = span / 5.0;
    }
    let f0 = freq[imin];
    let q_tot = f0 / fwhm;
    let ratio = (1.0 - depth_ratio).clamp(0.02, 0.98);
    let q_c = q_tot / ratio;
    let q_int = q_tot / (1.0 - ratio);
    Ok(LineshapeParams::from_q_int(f0, q_int, q_c, 0.0, edge - 1.0))
}

/// Fit one `|S21|` trace.
pub fn fit_trace(trace: &ResonatorTrace, options: &TraceFitOptions) -> Result<TraceFit, LineshapeError> {
    trace.validate()?;
    let guess = initial_guess(trace)?;
    let freq = &trace.frequency_hz;
    let model = TraceModel {
        freq,
        mag: &trace.s21_mag,
        f_ref: guess.f0_hz,
        w_ref: guess.linewidth_hz(),
    };
    let lo_shift = (freq[0] - model.f_ref) / model.w_ref;
    let hi_shift = (freq[freq.len() - 1] - model.f_ref) / model.w_ref;
    let lower = vec![lo_shift, LN_Q_MIN, LN_Q_MIN, -2.0, f64::NEG_INFINITY];
    let upper = vec![hi_shift, LN_Q_MAX, LN_Q_MAX, 2.0, f64::INFINITY];
    let weights = match &trace.s21_sigma {
        Some(s) => s.iter().map(|v| 1.0 / v).collect(),
        None => vec![1.0; freq.len()],
    };

    let mut best: Option<crate::numerics::FitOutcome> = None;
    for &a0 in &options.asymmetry_starts {
        let mut start = model.internal(&guess);
        start[3] = a0;
        for (k, v) in start.iter_mut().enumerate() {
            *v = v.clamp(lower[k], upper[k]);
        }
        let problem = FitProblem::new(&model, start)
            .with_bounds(lower.clone(), upper.clone())
            .with_weights(weights.clone());
        let solver = FitOptions {
            covariance_scale: CovarianceScale::Absolute,
            ..options.solver.clone()
        };
        let outcome = match nlls_fit(&problem, &solver) {
            Ok(o) => o,
            Err(NumericsError::NonFinite(_)) => continue,
            Err(e) => return Err(e.into()),
        };
        let better = best
            .as_ref()
            .map_or(true, |b| outcome.chi_square < b.chi_square);
        if outcome.chi_square.is_finite() && better {
            best = Some(outcome);
        }
    }
    let outcome = best.ok_or_else(|| LineshapeError::FitDiverged {
        label: trace.meta.label(),
        reason: "no start produced a finite fit".into(),
    })?;
    let params = model.params(&outcome.params);
    if !params.is_valid() || !params.q_int().is_finite() {
        return Err(LineshapeError::FitDiverged {
            label: trace.meta.label(),
            reason: "fitted parameters invalid".into(),
        });
    }

    // Covariance scale: absolute with given sigma, otherwise from the
    // residual scatter far from resonance.
    let noise_sigma = match &trace.s21_sigma {
        Some(s) => {
            let mut s = s.clone();
            median(&mut s)
        }
        None => high_detuning_scatter(trace, &params),
    };
    let cov_scale = if trace.s21_sigma.is_some() {
        1.0
    } else {
        noise_sigma * noise_sigma
    };
    let mut cov = vec![vec![0.0; 5]; 5];
    for i in 0..5 {
        for j in 0..5 {
            let si = if i == 0 { model.w_ref } else { 1.0 };
            let sj = if j == 0 { model.w_ref } else { 1.0 };
            cov[i][j] = outcome.covariance[(i, j)] * si * sj * cov_scale;
        }
    }
    let q_int = params.q_int();
    let chi_square = outcome.chi_square
        * if trace.s21_sigma.is_some() {
            1.0
        } else {
            1.0 / (noise_sigma * noise_sigma).max(f64::MIN_POSITIVE)
        };
    let dof = (freq.len() - 5) as f64;
    Ok(TraceFit {
        meta: trace.meta.clone(),
        params,
        q_int,
        q_int_sigma: q_int * cov[1][1].sqrt(),
        q_c_sigma: params.q_c * cov[2][2].sqrt(),
        f0_sigma_hz: cov[0][0].sqrt(),
        covariance: cov,
        noise_sigma,
        chi_square,
        reduced_chi_square: chi_square / dof,
        converged: outcome.converged,
    })
}

/// Residual RMS over points more than one linewidth from resonance.
fn high_detuning_scatter(trace: &ResonatorTrace, params: &LineshapeParams) -> f64 {
    let mut far = Vec::new();
    let mut all = Vec::new();
    for (f, m) in trace.frequency_hz.iter().zip(&trace.s21_mag) {
        let r = s21_model(params, *f) - m;
        all.push(r);
        let x = params.q_tot * (f - params.f0_hz) / params.f0_hz;
        if x.abs() > 1.0 {
            far.push(r);
        }
    }
    let pick = if far.len() >= 5 { &far } else { &all };
    let n = pick.len() as f64;
    let dof_correction = (trace.len() as f64 / (trace.len() as f64 - 5.0)).sqrt();
    (pick.iter().map(|r| r * r).sum::<f64>() / n).sqrt() * dof_correction
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NonlinearityThresholds {
    /// Core residual RMS over noise above which a trace is flagged.
    pub residual_ratio: f64,
    /// Excess half-width asymmetry above which a trace is flagged.
    pub skew: f64,
}

impl Default for NonlinearityThresholds {
    fn default() -> Self {
        Self {
            residual_ratio: 5.0,
            skew: 0.3,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NonlinearityReason {
    ResidualExcess,
    DipSkew,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NonlinearityReport {
    pub flagged: bool,
    /// RMS of residuals inside the resonance FWHM, in units of the noise.
    pub residual_ratio: f64,
    /// |observed - modelled| normalised half-width asymmetry of the dip.
    pub skew: f64,
    pub reasons: Vec<NonlinearityReason>,
}

/// Screen a fitted trace for nonlinear (driven, bifurcating) distortion.
pub fn detect_nonlinearity(
    trace: &ResonatorTrace,
    fit: &LineshapeParams,
    thresholds: &NonlinearityThresholds,
) -> NonlinearityReport {
    let freq = &trace.frequency_hz;
    let model: Vec<f64> = freq.iter().map(|f| s21_model(fit, *f)).collect();
    let detuning: Vec<f64> = freq
        .iter()
        .map(|f| fit.q_tot * (f - fit.f0_hz) / fit.f0_hz)
        .collect();

    let far: Vec<f64> = trace
        .s21_mag
        .iter()
        .zip(&detuning)
        .filter(|(_, x)| x.abs() > 1.0)
        .map(|(m, _)| *m)
        .collect();
    let measured_noise = match &trace.s21_sigma {
        Some(s) => {
            let mut s = s.clone();
            median(&mut s)
        }
        None if far.len() >= 8 => second_difference_noise(&far),
        None => second_difference_noise(&trace.s21_mag),
    };
    let off_level = 1.0 + fit.baseline;
    let model_min = model.iter().cloned().fold(f64::INFINITY, f64::min);
    let depth = (off_level - model_min).abs().max(f64::MIN_POSITIVE);
    let noise = measured_noise.max(1e-3 * depth);

    let core: Vec<f64> = trace
        .s21_mag
        .iter()
        .zip(&model)
        .zip(&detuning)
        .filter(|(_, x)| x.abs() <= 0.5)
        .map(|((m, y), _)| m - y)
        .collect();
    let residual_ratio = if core.is_empty() {
        0.0
    } else {
        (core.iter().map(|r| r * r).sum::<f64>() / core.len() as f64).sqrt() / noise
    };

    let skew = (half_width_asymmetry(freq, &smooth3(&trace.s21_mag), off_level)
        - half_width_asymmetry(freq, &model, off_level))
    .abs();

    let mut reasons = Vec::new();
    if residual_ratio > thresholds.residual_ratio {
        reasons.push(NonlinearityReason::ResidualExcess);
    }
    if skew > thresholds.skew {
        reasons.push(NonlinearityReason::DipSkew);
    }
    NonlinearityReport {
        flagged: !reasons.is_empty(),
        residual_ratio,
        skew,
        reasons,
    }
}

/// `(w+ - w-)/(w+ + w-)` of the dip's half-depth half-widths.
fn half_width_asymmetry(freq: &[f64], curve: &[f64], off_level: f64) -> f64 {
    let imin = argmin(curve);
    let level = 0.5 * (off_level + curve[imin]);
    let (left, right) = half_crossings(freq, curve, imin, level);
    let fmin = freq[imin];
    let wl = fmin - left;
    let wr = right - fmin;
    if wl + wr <= 0.0 {
        0.0
    } else {
        (wr - wl) / (wr + wl)
    }
}

/// Summary of fitted coupling quality factors across one device's sweep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QcConstancyReport {
    pub n: usize,
    pub mean_q_c: f64,
    /// Population standard deviation over the mean.
    pub coefficient_of_variation: f64,
    pub threshold: f64,
    pub pass: bool,
}

pub const DEFAULT_QC_CV_THRESHOLD: f64 = 0.2;

pub fn qc_constancy(q_c: &[f64], cv_threshold: f64) -> Result<QcConstancyReport, LineshapeError> {
    if q_c.len() < 3 {
        return Err(LineshapeError::TooFewFits(q_c.len()));
    }
    let (mean, std) = mean_std(q_c);
    let cv = std / mean;
    Ok(QcConstancyReport {
        n: q_c.len(),
        mean_q_c: mean,
        coefficient_of_variation: cv,
        threshold: cv_threshold,
        pass: cv <= cv_threshold,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::finite_difference_jacobian;

    fn params() -> LineshapeParams {
        LineshapeParams::from_q_int(4.484_501e9, 3e5, 1e5, 0.0, 0.0)
    }

    #[test]
    fn on_resonance_depth() {
        let p = params();
        let v = s21_model(&p, p.f0_hz);
        assert!((v - (1.0 - p.q_tot / p.q_c)).abs() < 1e-15);
    }

    #[test]
    fn critical_coupling_is_half() {
        let p = LineshapeParams::from_q_int(5e9, 2e5, 2e5, 0.0, 0.0);
        assert!((s21_model(&p, 5e9) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn far_off_resonance_is_unity() {
        let p = params();
        let f = p.f0_hz + 100.0 * p.linewidth_hz();
        assert!((s21_model(&p, f) - 1.0).abs() < 1e-3);
    }

    #[test]
    fn symmetric_without_asymmetry() {
        let p = params();
        for k in 1..50 {
            let d = k as f64 * 0.1 * p.linewidth_hz();
            let hi = s21_model(&p, p.f0_hz + d);
            let lo = s21_model(&p, p.f0_hz - d);
            assert!((hi - lo).abs() <= 1e-12, "delta={d}");
        }
    }

    #[test]
    fn baseline_is_additive() {
        let mut p = params();
        p.asymmetry = 0.13;
        let f = p.f0_hz + 0.3 * p.linewidth_hz();
        let base = s21_model(&p, f);
        p.baseline = 0.042;
        assert!((s21_model(&p, f) - base - 0.042).abs() < 1e-15);
    }

    #[test]
    fn analytic_jacobian_matches_finite_differences() {
        let p = LineshapeParams::from_q_int(5e9, 2e5, 8e4, 0.1, 0.01);
        let freq: Vec<f64> = (0..41)
            .map(|i| p.f0_hz + (i as f64 - 20.0) * 0.1 * p.linewidth_hz())
            .collect();
        let mag: Vec<f64> = freq.iter().map(|f| s21_model(&p, *f)).collect();
        let model = TraceModel {
            freq: &freq,
            mag: &mag,
            f_ref: p.f0_hz * (1.0 + 1e-7),
            w_ref: p.linewidth_hz(),
        };
        let x = model.internal(&p);
        let analytic = model.jacobian(&x).unwrap();
        let fd = finite_difference_jacobian(
            |q| {
                let mut out = vec![0.0; freq.len()];
                model.residuals(q, &mut out);
                out
            },
            &x,
            1e-4,
        );
        for i in 0..freq.len() {
            for j in 0..5 {
                let (a, b) = (analytic[(i, j)], fd[(i, j)]);
                assert!((a - b).abs() <= 1e-5 * a.abs().max(b.abs()).max(1e-3), "({i},{j}) {a} vs {b}");
            }
        }
    }

    #[test]
    fn trace_validation() {
        let meta = TraceMetadata::new("d", "r", -100.0, 0.02);
        assert!(ResonatorTrace::new(meta.clone(), vec![1.0; 4], vec![1.0; 4], None).is_err());
        let f: Vec<f64> = (0..10).map(|i| 1e9 + i as f64).collect();
        let mut rev = f.clone();
        rev.swap(3, 4);
        assert!(ResonatorTrace::new(meta.clone(), rev, vec![1.0; 10], None).is_err());
        let mut m = vec![1.0; 10];
        m[2] = -0.1;
        assert!(ResonatorTrace::new(meta.clone(), f.clone(), m, None).is_err());
        assert!(ResonatorTrace::new(meta, f, vec![1.0; 10], None).is_ok());
    }

    #[test]
    fn flat_trace_has_no_dip() {
        let meta = TraceMetadata::new("d", "r", -100.0, 0.02);
        let f: Vec<f64> = (0..50).map(|i| 5e9 + 1e3 * i as f64).collect();
        let trace = ResonatorTrace::new(meta, f, vec![1.0; 50], None).unwrap();
        assert!(matches!(
            fit_trace(&trace, &TraceFitOptions::default()),
            Err(LineshapeError::NoDipFound(_))
        ));
    }

    #[test]
    fn qc_constancy_statistics() {
        let same = qc_constancy(&[2e5, 2e5, 2e5, 2e5], DEFAULT_QC_CV_THRESHOLD).unwrap();
        assert_eq!(same.coefficient_of_variation, 0.0);
        assert!(same.pass);
        let spread = qc_constancy(&[1e5, 1e5, 3e5], DEFAULT_QC_CV_THRESHOLD).unwrap();
        // population std sqrt(8/9)e5 over mean 5/3 e5
        let expected = (8.0f64 / 9.0).sqrt() / (5.0 / 3.0);
        assert!((spread.coefficient_of_variation - expected).abs() < 1e-12);
        assert!((spread.coefficient_of_variation - 0.566).abs() < 1e-3);
        assert!(!spread.pass);
        assert!(qc_constancy(&[1e5, 1e5], 0.2).is_err());
    }
}
