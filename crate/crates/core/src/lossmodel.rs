//! Internal quality factor versus photon number and temperature: saturable
//! TLS loss, thermal quasiparticle loss and a constant residual channel, plus
//! the joint sweep fit and its diagnostics.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::constants::{gap_energy, half_photon_energy_ratio, BOLTZMANN, HBAR};
use crate::lineshape::LineshapeParams;
use crate::numerics::{
    ln_sinh_k0, nlls_fit, pearson, CovarianceScale, FitOptions, FitOutcome, FitProblem,
    NumericsError, ResidualModel,
};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LossModelError {
    #[error("insufficient sweep grid: {0}")]
    InsufficientGrid(String),
    #[error("invalid sweep data: {0}")]
    InvalidData(String),
    #[error("sweep fit diverged: {0}")]
    FitDiverged(String),
    #[error("input-line attenuation is not configured")]
    MissingAttenuation,
    #[error("correlation report needs at least 5 fits, got {0}")]
    TooFewFits(usize),
    #[error("parameter {0} cannot be profiled in this fit")]
    NotProfilable(usize),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
}

/// Names of the seven model parameters, in fit order.
pub const PARAM_NAMES: [&str; 7] = ["q_tls0", "d", "beta1", "beta2", "q_qp0", "tc", "q_other"];
pub const IDX_Q_TLS0: usize = 0;
pub const IDX_D: usize = 1;
pub const IDX_BETA1: usize = 2;
pub const IDX_BETA2: usize = 3;
pub const IDX_Q_QP0: usize = 4;
pub const IDX_TC: usize = 5;
pub const IDX_Q_OTHER: usize = 6;

/// Whether a parameter is fitted as its logarithm.
const LOG_COORD: [bool; 7] = [true, true, false, false, true, false, true];

/// Parameters of the `Q_int(n̄, T)` model. `D` absorbs its units by always
/// taking `n̄` in photons and `T` in kelvin.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossParams {
    pub q_tls0: f64,
    pub d: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub q_qp0: f64,
    pub tc: f64,
    /// `None` is a lossless residual channel.
    pub q_other: Option<f64>,
}

impl LossParams {
    /// Gap energy in joules, always derived from `tc`.
    pub fn gap(&self) -> f64 {
        gap_energy(self.tc)
    }

    pub fn is_valid(&self) -> bool {
        self.q_tls0 > 0.0
            && self.d > 0.0
            && self.beta1 >= 0.0
            && self.beta2 > 0.0
            && self.beta2 <= 2.0
            && self.q_qp0 > 0.0
            && self.tc > 0.0
            && self.q_other.map_or(true, |q| q > 0.0)
            && self.q_tls0.is_finite()
            && self.d.is_finite()
            && self.beta1.is_finite()
            && self.q_qp0.is_finite()
            && self.tc.is_finite()
    }

    fn coords(&self) -> Vec<f64> {
        vec![
            self.q_tls0.ln(),
            self.d.ln(),
            self.beta1,
            self.beta2,
            self.q_qp0.ln(),
            self.tc,
            self.q_other.unwrap_or(1e12).ln(),
        ]
    }

    fn from_coords(c: &[f64], with_other: bool) -> Self {
        Self {
            q_tls0: c[0].exp(),
            d: c[1].exp(),
            beta1: c[2],
            beta2: c[3],
            q_qp0: c[4].exp(),
            tc: c[5],
            q_other: with_other.then(|| c[6].exp()),
        }
    }
}

/// `ln Q_TLS`.
pub fn ln_q_tls(p: &LossParams, photons: f64, temperature: f64, omega: f64) -> f64 {
    let t = half_photon_energy_ratio(omega, temperature).tanh();
    let saturation = if photons > 0.0 {
        (p.beta2 * photons.ln() - p.d.ln() - p.beta1 * temperature.ln()).exp()
    } else {
        0.0
    };
    p.q_tls0.ln() + 0.5 * (saturation * t).ln_1p() - t.ln()
}

/// TLS-limited quality factor.
pub fn q_tls(p: &LossParams, photons: f64, temperature: f64, omega: f64) -> f64 {
    ln_q_tls(p, photons, temperature, omega).exp()
}

/// `ln Q_QP`, composed from scaled exponentials so it stays finite at
/// millikelvin temperatures where `Q_QP` itself overflows.
pub fn ln_q_qp(p: &LossParams, temperature: f64, omega: f64) -> f64 {
    let xi = half_photon_energy_ratio(omega, temperature);
    let ln_sk = ln_sinh_k0(xi).unwrap_or(f64::NAN);
    p.q_qp0.ln() + p.gap() / (BOLTZMANN * temperature) - ln_sk
}

/// Quasiparticle-limited quality factor, saturating at `f64::MAX`.
pub fn q_qp(p: &LossParams, temperature: f64, omega: f64) -> f64 {
    ln_q_qp(p, temperature, omega).exp().min(f64::MAX)
}

/// Quasiparticle loss `1/Q_QP`, underflowing gracefully to zero.
pub fn qp_loss(p: &LossParams, temperature: f64, omega: f64) -> f64 {
    (-ln_q_qp(p, temperature, omega)).exp()
}

/// Total loss `1/Q_int`.
pub fn loss_model(p: &LossParams, photons: f64, temperature: f64, omega: f64) -> f64 {
    (-ln_q_tls(p, photons, temperature, omega)).exp()
        + qp_loss(p, temperature, omega)
        + p.q_other.map_or(0.0, |q| 1.0 / q)
}

/// `Q_int = (1/Q_TLS + 1/Q_QP + 1/Q_other)^-1`.
pub fn q_int_model(p: &LossParams, photons: f64, temperature: f64, omega: f64) -> f64 {
    1.0 / loss_model(p, photons, temperature, omega)
}

/// Intracavity photon number `n̄ = 2 Q_tot² P / (Q_c ħ ω0²)` for a drive of
/// `power_dbm` at the top of an input line with `attenuation_db` of loss.
pub fn photon_number(
    power_dbm: f64,
    attenuation_db: Option<f64>,
    lineshape: &LineshapeParams,
) -> Result<f64, LossModelError> {
    let attenuation = attenuation_db.ok_or(LossModelError::MissingAttenuation)?;
    let watts = 10f64.powf((power_dbm - attenuation - 30.0) / 10.0);
    let omega = 2.0 * std::f64::consts::PI * lineshape.f0_hz;
    Ok(2.0 * lineshape.q_tot * lineshape.q_tot * watts / (lineshape.q_c * HBAR * omega * omega))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub photon_number: f64,
    pub temperature_k: f64,
    pub q_int: f64,
    pub q_int_sigma: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepDataset {
    pub device_id: String,
    pub omega_rad_s: f64,
    pub points: Vec<SweepPoint>,
}

fn distinct(mut v: Vec<f64>) -> usize {
    v.sort_by(|a, b| a.total_cmp(b));
    v.dedup_by(|a, b| (*a - *b).abs() <= 1e-9 * b.abs());
    v.len()
}

impl SweepDataset {
    pub fn validate(&self) -> Result<(), LossModelError> {
        let bad = |m: String| Err(LossModelError::InvalidData(m));
        if !(self.omega_rad_s.is_finite() && self.omega_rad_s > 0.0) {
            return bad(format!("angular frequency {} must be positive", self.omega_rad_s));
        }
        for (i, p) in self.points.iter().enumerate() {
            if !(p.q_int.is_finite() && p.q_int > 0.0) {
                return bad(format!("point {i}: Q_int must be positive"));
            }
            if !(p.temperature_k.is_finite() && p.temperature_k > 0.0) {
                return bad(format!("point {i}: temperature must be positive"));
            }
            if !(p.photon_number.is_finite() && p.photon_number > 0.0) {
                return bad(format!("point {i}: photon number must be positive"));
            }
            if let Some(s) = p.q_int_sigma {
                if !(s.is_finite() && s > 0.0) {
                    return bad(format!("point {i}: sigma must be positive"));
                }
            }
        }
        let powers = distinct(self.points.iter().map(|p| p.photon_number).collect());
        let temps = distinct(self.points.iter().map(|p| p.temperature_k).collect());
        if powers < 2 || temps < 3 || self.points.len() <= 7 {
            return Err(LossModelError::InsufficientGrid(format!(
                "{} points over {powers} photon numbers and {temps} temperatures; \
                 need ≥ 2 photon numbers, ≥ 3 temperatures and more than 7 points",
                self.points.len()
            )));
        }
        Ok(())
    }

    pub fn max_temperature(&self) -> f64 {
        self.points.iter().map(|p| p.temperature_k).fold(0.0, f64::max)
    }
}

/// Parameter bounds in natural units.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBounds {
    pub q: (f64, f64),
    pub d: (f64, f64),
    pub beta1: (f64, f64),
    pub beta2: (f64, f64),
    pub tc: (f64, f64),
}

impl Default for LossBounds {
    fn default() -> Self {
        Self {
            q: (1e3, 1e12),
            d: (1e-6, 1e12),
            beta1: (0.0, 4.0),
            beta2: (0.05, 2.0),
            tc: (0.05, 6.0),
        }
    }
}

impl LossBounds {
    fn coords(&self) -> (Vec<f64>, Vec<f64>) {
        let lower = vec![
            self.q.0.ln(),
            self.d.0.ln(),
            self.beta1.0,
            self.beta2.0,
            self.q.0.ln(),
            self.tc.0,
            self.q.0.ln(),
        ];
        let upper = vec![
            self.q.1.ln(),
            self.d.1.ln(),
            self.beta1.1,
            self.beta2.1,
            self.q.1.ln(),
            self.tc.1,
            self.q.1.ln(),
        ];
        (lower, upper)
    }
}

#[derive(Debug, Clone)]
pub struct LossFitOptions {
    pub solver: FitOptions,
    pub bounds: LossBounds,
    pub starts: usize,
    pub seed: u64,
    /// Chi-square gain below which `Q_other` is reported unidentified.
    pub q_other_min_delta_chi_square: f64,
    /// Correlation magnitude above which a parameter pair is flagged.
    pub correlation_threshold: f64,
    /// Relative uncertainty above which a parameter is flagged unidentified.
    pub unidentified_relative_sigma: f64,
    /// Starting point; derived from the data when absent.
    pub initial: Option<LossParams>,
}

impl Default for LossFitOptions {
    fn default() -> Self {
        Self {
            solver: FitOptions::default(),
            bounds: LossBounds::default(),
            starts: 5,
            seed: 0,
            q_other_min_delta_chi_square: 1.0,
            correlation_threshold: 0.8,
            unidentified_relative_sigma: 0.5,
            initial: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QOtherStatus {
    Identified,
    /// No high-power plateau: the fit is reported without a residual channel.
    Unidentifiable,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrelatedPair {
    pub a: String,
    pub b: String,
    pub correlation: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossFitResult {
    pub device_id: String,
    pub omega_rad_s: f64,
    pub params: LossParams,
    /// One-sigma uncertainties in natural units, in `PARAM_NAMES` order.
    #[serde(deserialize_with = "crate::nullable::vec")]
    pub sigma: Vec<f64>,
    /// Covariance of `(ln Q_TLS0, ln D, β1, β2, ln Q_QP0, Tc, ln Q_other)`.
    #[serde(deserialize_with = "crate::nullable::matrix")]
    pub covariance: Vec<Vec<f64>>,
    #[serde(deserialize_with = "crate::nullable::f64")]
    pub chi_square: f64,
    #[serde(deserialize_with = "crate::nullable::f64")]
    pub reduced_chi_square: f64,
    pub n_points: usize,
    pub converged: bool,
    pub q_other_status: QOtherStatus,
    /// Chi-square of the fit without `Q_other` minus that with it, in units
    /// of the measurement variance.
    #[serde(deserialize_with = "crate::nullable::f64")]
    pub q_other_delta_chi_square: f64,
    pub correlated: Vec<CorrelatedPair>,
    pub unidentified: Vec<String>,
}

impl LossFitResult {
    /// QP loss `1/Q_QP` at `temperature`, the combination of `Tc` and
    /// `Q_QP0` the data constrain best.
    pub fn qp_loss_at(&self, temperature: f64) -> f64 {
        qp_loss(&self.params, temperature, self.omega_rad_s)
    }
}

struct SweepModel<'d> {
    data: &'d SweepDataset,
    with_other: bool,
    /// With absolute sigmas the residual is `Q_model/Q_obs - 1`, which the
    /// `Q_obs/σ` weight turns into `(Q_model - Q_obs)/σ`. A log residual under
    /// the same weight favours upward fluctuations and biases `Q` high.
    absolute: bool,
}

impl ResidualModel for SweepModel<'_> {
    fn n_residuals(&self) -> usize {
        self.data.points.len()
    }

    fn residuals(&self, c: &[f64], out: &mut [f64]) {
        let p = LossParams::from_coords(c, self.with_other);
        for (o, pt) in out.iter_mut().zip(&self.data.points) {
            let loss = loss_model(&p, pt.photon_number, pt.temperature_k, self.data.omega_rad_s);
            let r = -loss.ln() - pt.q_int.ln();
            *o = if self.absolute { r.exp_m1() } else { r };
        }
    }
}

fn weights(data: &SweepDataset) -> (Vec<f64>, CovarianceScale) {
    if data.points.iter().all(|p| p.q_int_sigma.is_some()) {
        let w = data
            .points
            .iter()
            .map(|p| p.q_int / p.q_int_sigma.unwrap_or(p.q_int))
            .collect();
        (w, CovarianceScale::Absolute)
    } else {
        (vec![1.0; data.points.len()], CovarianceScale::ReducedChiSquare)
    }
}

struct Fitter<'d> {
    data: &'d SweepDataset,
    options: &'d LossFitOptions,
    lower: Vec<f64>,
    upper: Vec<f64>,
    solver: FitOptions,
}

impl<'d> Fitter<'d> {
    fn new(data: &'d SweepDataset, options: &'d LossFitOptions) -> Self {
        let (mut lower, upper) = options.bounds.coords();
        // The film must be superconducting at every measured temperature.
        lower[IDX_TC] = lower[IDX_TC].max(1.05 * data.max_temperature()).min(upper[IDX_TC]);
        let (_, scale) = weights(data);
        let solver = FitOptions {
            covariance_scale: scale,
            ..options.solver.clone()
        };
        Self {
            data,
            options,
            lower,
            upper,
            solver,
        }
    }

    fn clamp(&self, c: &mut [f64]) {
        for (k, v) in c.iter_mut().enumerate() {
            *v = v.clamp(self.lower[k], self.upper[k]);
        }
    }

    fn run(
        &self,
        data: &SweepDataset,
        start: &[f64],
        fixed: &[bool],
        with_other: bool,
    ) -> Option<FitOutcome> {
        let model = SweepModel {
            data,
            with_other,
            absolute: data.points.iter().all(|p| p.q_int_sigma.is_some()),
        };
        let mut start = start.to_vec();
        self.clamp(&mut start);
        let mut fixed = fixed.to_vec();
        if !with_other {
            fixed[IDX_Q_OTHER] = true;
        }
        let problem = FitProblem::new(&model, start)
            .with_bounds(self.lower.clone(), self.upper.clone())
            .with_weights(weights(data).0)
            .with_fixed(fixed);
        nlls_fit(&problem, &self.solver)
            .ok()
            .filter(|o| o.chi_square.is_finite())
    }

    /// Best of several starts: the given point plus log-uniform jitter.
    fn multistart(&self, start: &[f64], with_other: bool, rng: &mut ChaCha8Rng) -> Option<FitOutcome> {
        let free = [false; 7];
        let mut best = self.run(self.data, start, &free, with_other);
        for _ in 1..self.options.starts.max(1) {
            let mut s = start.to_vec();
            for (k, v) in s.iter_mut().enumerate() {
                let jitter = rng.random_range(-1.0..1.0) * 3f64.ln();
                if LOG_COORD[k] {
                    *v += jitter;
                } else {
                    *v *= jitter.exp();
                }
            }
            if let Some(o) = self.run(self.data, &s, &free, with_other) {
                if best.as_ref().map_or(true, |b| o.chi_square < b.chi_square) {
                    best = Some(o);
                }
            }
        }
        best
    }
}

/// Data-driven starting point: TLS and residual terms from the colder half
/// of the data, then a scan over `Tc` for the quasiparticle term.
fn initial_coords(fitter: &Fitter<'_>) -> Vec<f64> {
    let data = fitter.data;
    let omega = data.omega_rad_s;
    let t_min = data.points.iter().map(|p| p.temperature_k).fold(f64::INFINITY, f64::min);
    let cold: Vec<&SweepPoint> = data
        .points
        .iter()
        .filter(|p| p.temperature_k <= t_min * 1.0001)
        .collect();
    let low = cold
        .iter()
        .min_by(|a, b| a.photon_number.total_cmp(&b.photon_number))
        .expect("non-empty");
    let high = cold
        .iter()
        .max_by(|a, b| a.photon_number.total_cmp(&b.photon_number))
        .expect("non-empty");
    let q_max = data.points.iter().map(|p| p.q_int).fold(0.0, f64::max);
    let tanh_min = half_photon_energy_ratio(omega, t_min).tanh();
    let beta1 = 1.0;
    let beta2 = 0.5;
    // Saturation onset halfway (geometrically) between the extreme photon numbers.
    let n_mid = (low.photon_number * high.photon_number).sqrt();
    let d = n_mid.powf(beta2) * tanh_min / t_min.powf(beta1);
    let mut start = LossParams {
        q_tls0: low.q_int * tanh_min,
        d,
        beta1,
        beta2,
        q_qp0: fitter.options.bounds.q.1,
        tc: fitter.options.bounds.tc.1,
        q_other: Some(3.0 * q_max),
    }
    .coords();
    fitter.clamp(&mut start);

    let t_max = data.max_temperature();
    let cold_half = SweepDataset {
        device_id: data.device_id.clone(),
        omega_rad_s: omega,
        points: data
            .points
            .iter()
            .filter(|p| p.temperature_k <= 0.5 * t_max)
            .copied()
            .collect(),
    };
    let mut qp_fixed = [false; 7];
    qp_fixed[IDX_Q_QP0] = true;
    qp_fixed[IDX_TC] = true;
    if cold_half.points.len() > 6 {
        if let Some(o) = fitter.run(&cold_half, &start, &qp_fixed, true) {
            start = o.params;
        }
    }

    // Scan Tc, fitting only Q_QP0 at each value.
    let mut only_qp = [true; 7];
    only_qp[IDX_Q_QP0] = false;
    let (tc_lo, tc_hi) = (fitter.lower[IDX_TC], fitter.upper[IDX_TC]);
    let mut best: Option<(f64, Vec<f64>)> = None;
    let steps = 16;
    for k in 0..steps {
        let tc = tc_lo * (tc_hi / tc_lo).powf((k as f64 + 0.5) / steps as f64);
        let mut s = start.clone();
        s[IDX_TC] = tc;
        // Start Q_QP0 so the QP term matches the hottest data point.
        let hot = data
            .points
            .iter()
            .max_by(|a, b| a.temperature_k.total_cmp(&b.temperature_k))
            .expect("non-empty");
        let probe = LossParams::from_coords(&s, true);
        let unit = LossParams { q_qp0: 1.0, ..probe };
        s[IDX_Q_QP0] = hot.q_int.ln() - ln_q_qp(&unit, hot.temperature_k, omega);
        if let Some(o) = fitter.run(data, &s, &only_qp, true) {
            if best.as_ref().map_or(true, |b| o.chi_square < b.0) {
                best = Some((o.chi_square, o.params));
            }
        }
    }
    best.map(|b| b.1).unwrap_or(start)
}

/// Chi-square per unit of measurement variance. With stated sigmas this is
/// 1; with unit weights it is the residual variance of the free fit, floored
/// at a 1e-8 relative precision so noiseless data do not divide by zero.
fn residual_variance(data: &SweepDataset, fitter: &Fitter<'_>, chi_square: f64) -> f64 {
    match fitter.solver.covariance_scale {
        CovarianceScale::Absolute => 1.0,
        CovarianceScale::ReducedChiSquare => {
            let dof = data.points.len().saturating_sub(7).max(1) as f64;
            (chi_square / dof).max(1e-16)
        }
    }
}

/// Joint weighted fit of the sweep in `ln Q_int`.
pub fn fit_sweep(data: &SweepDataset, options: &LossFitOptions) -> Result<LossFitResult, LossModelError> {
    data.validate()?;
    let fitter = Fitter::new(data, options);
    let mut rng = ChaCha8Rng::seed_from_u64(options.seed);
    let start = match &options.initial {
        Some(p) => {
            let mut c = p.coords();
            if p.q_other.is_none() {
                c[IDX_Q_OTHER] = (10.0 * data.points.iter().map(|p| p.q_int).fold(0.0, f64::max)).ln();
            }
            c
        }
        None => initial_coords(&fitter),
    };

    let with = fitter
        .multistart(&start, true, &mut rng)
        .ok_or_else(|| LossModelError::FitDiverged("no start with Q_other converged".into()))?;
    let mut without = fitter.multistart(&with.params, false, &mut rng);
    if let Some(o) = fitter.run(data, &start, &[false; 7], false) {
        if without.as_ref().map_or(true, |b| o.chi_square < b.chi_square) {
            without = Some(o);
        }
    }
    let without =
        without.ok_or_else(|| LossModelError::FitDiverged("no start without Q_other converged".into()))?;
    // A free Q_other can only lower chi-square; compare against the better of both.
    let chi_with = with.chi_square.min(without.chi_square);
    let delta = (without.chi_square - chi_with) / residual_variance(data, &fitter, chi_with);
    // A plateau must both improve the fit and pin Q_other down.
    let q_other_constrained = with.covariance[(IDX_Q_OTHER, IDX_Q_OTHER)].sqrt()
        <= options.unidentified_relative_sigma;
    let (outcome, with_other, status) = if delta < options.q_other_min_delta_chi_square
        || !q_other_constrained
    {
        (without, false, QOtherStatus::Unidentifiable)
    } else {
        (with, true, QOtherStatus::Identified)
    };
    Ok(summarise(data, options, outcome, with_other, status, delta))
}

fn summarise(
    data: &SweepDataset,
    options: &LossFitOptions,
    outcome: FitOutcome,
    with_other: bool,
    status: QOtherStatus,
    delta: f64,
) -> LossFitResult {
    let params = LossParams::from_coords(&outcome.params, with_other);
    let n_par = if with_other { 7 } else { 6 };
    let mut covariance = vec![vec![f64::NAN; 7]; 7];
    for (i, row) in covariance.iter_mut().enumerate().take(n_par) {
        for (j, v) in row.iter_mut().enumerate().take(n_par) {
            *v = outcome.covariance[(i, j)];
        }
    }
    let mut sigma = vec![f64::NAN; 7];
    let mut unidentified = Vec::new();
    for i in 0..n_par {
        let s = covariance[i][i].sqrt();
        let value = outcome.params[i];
        let (natural, relative) = if LOG_COORD[i] {
            (value.exp() * s, s)
        } else {
            (s, s / value.abs())
        };
        sigma[i] = natural;
        if !(relative <= options.unidentified_relative_sigma) {
            unidentified.push(PARAM_NAMES[i].to_string());
        }
    }
    let mut correlated = Vec::new();
    for i in 0..n_par {
        for j in i + 1..n_par {
            let r = covariance[i][j] / (covariance[i][i] * covariance[j][j]).sqrt();
            if r.is_finite() && r.abs() > options.correlation_threshold {
                correlated.push(CorrelatedPair {
                    a: PARAM_NAMES[i].to_string(),
                    b: PARAM_NAMES[j].to_string(),
                    correlation: r,
                });
            }
        }
    }
    LossFitResult {
        device_id: data.device_id.clone(),
        omega_rad_s: data.omega_rad_s,
        params,
        sigma,
        covariance,
        chi_square: outcome.chi_square,
        reduced_chi_square: outcome.reduced_chi_square,
        n_points: data.points.len(),
        converged: outcome.converged,
        q_other_status: status,
        q_other_delta_chi_square: delta,
        correlated,
        unidentified,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProfilePoint {
    pub value: f64,
    pub chi_square: f64,
    pub params: LossParams,
}

/// Profile chi-square: hold parameter `index` at each of `values` (natural
/// units) and refit the others. Each point keeps the best of a warm start
/// from the previous point, the global optimum and a start with the QP
/// channel switched off.
pub fn profile_likelihood(
    data: &SweepDataset,
    fit: &LossFitResult,
    index: usize,
    values: &[f64],
    options: &LossFitOptions,
) -> Result<Vec<ProfilePoint>, LossModelError> {
    let with_other = fit.params.q_other.is_some();
    if index >= 7 || (index == IDX_Q_OTHER && !with_other) {
        return Err(LossModelError::NotProfilable(index));
    }
    data.validate()?;
    let fitter = Fitter::new(data, options);
    let mut fixed = [false; 7];
    fixed[index] = true;
    let optimum = fit.params.coords();
    // The QP pair can hide the channel entirely, which a warm start walking
    // along the scan does not always find.
    let mut qp_off = optimum.clone();
    qp_off[IDX_Q_QP0] = fitter.upper[IDX_Q_QP0];
    qp_off[IDX_TC] = fitter.upper[IDX_TC];
    let mut current = optimum.clone();
    let mut out = Vec::with_capacity(values.len());
    for &v in values {
        let coord = if LOG_COORD[index] { v.ln() } else { v };
        let mut best: Option<FitOutcome> = None;
        for start in [&current, &optimum, &qp_off] {
            let mut s = start.clone();
            s[index] = coord;
            if let Some(o) = fitter.run(data, &s, &fixed, with_other) {
                if best.as_ref().map_or(true, |b| o.chi_square < b.chi_square) {
                    best = Some(o);
                }
            }
        }
        let outcome = best.ok_or_else(|| LossModelError::FitDiverged(format!("profile point {v}")))?;
        current = outcome.params.clone();
        out.push(ProfilePoint {
            value: v,
            chi_square: outcome.chi_square,
            params: LossParams::from_coords(&outcome.params, with_other),
        });
    }
    Ok(out)
}

/// Pairwise correlations of fitted parameters across an ensemble.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrelationReport {
    /// Column names; Q's and `D` enter as logarithms, and the last column is
    /// `ln D^{1/β2}`.
    pub columns: Vec<String>,
    pub matrix: Vec<Vec<f64>>,
    pub flagged: Vec<CorrelatedPair>,
    /// Pairs whose correlation is undefined (a column without variance).
    pub undefined: Vec<(String, String)>,
}

pub fn correlation_report(fits: &[LossFitResult], threshold: f64) -> Result<CorrelationReport, LossModelError> {
    if fits.len() < 5 {
        return Err(LossModelError::TooFewFits(fits.len()));
    }
    let mut columns: Vec<(String, Vec<f64>)> = vec![
        ("ln_q_tls0".into(), fits.iter().map(|f| f.params.q_tls0.ln()).collect()),
        ("ln_d".into(), fits.iter().map(|f| f.params.d.ln()).collect()),
        ("beta1".into(), fits.iter().map(|f| f.params.beta1).collect()),
        ("beta2".into(), fits.iter().map(|f| f.params.beta2).collect()),
        ("ln_q_qp0".into(), fits.iter().map(|f| f.params.q_qp0.ln()).collect()),
        ("tc".into(), fits.iter().map(|f| f.params.tc).collect()),
    ];
    if fits.iter().all(|f| f.params.q_other.is_some()) {
        columns.push((
            "ln_q_other".into(),
            fits.iter().map(|f| f.params.q_other.unwrap_or(f64::NAN).ln()).collect(),
        ));
    }
    columns.push((
        "ln_d_root_beta2".into(),
        fits.iter().map(|f| f.params.d.ln() / f.params.beta2).collect(),
    ));
    let k = columns.len();
    let mut matrix = vec![vec![f64::NAN; k]; k];
    let mut flagged = Vec::new();
    let mut undefined = Vec::new();
    for i in 0..k {
        for j in 0..k {
            matrix[i][j] = pearson(&columns[i].1, &columns[j].1);
        }
    }
    let last = k - 1;
    for i in 0..k {
        for j in i + 1..k {
            // D^{1/β2} is a reparameterisation of D: skip the pair with its source columns.
            if j == last && (i == 1 || i == 3) {
                continue;
            }
            let r = matrix[i][j];
            if r.is_nan() {
                undefined.push((columns[i].0.clone(), columns[j].0.clone()));
            } else if r.abs() > threshold {
                flagged.push(CorrelatedPair {
                    a: columns[i].0.clone(),
                    b: columns[j].0.clone(),
                    correlation: r,
                });
            }
        }
    }
    Ok(CorrelationReport {
        columns: columns.into_iter().map(|c| c.0).collect(),
        matrix,
        flagged,
        undefined,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::PI;

    fn device() -> LossParams {
        LossParams {
            q_tls0: 6.97e5,
            d: 200.0,
            beta1: 1.0,
            beta2: 0.5,
            q_qp0: 1e3,
            tc: 4.0,
            q_other: None,
        }
    }

    const OMEGA: f64 = 2.0 * PI * 5e9;

    #[test]
    fn tls_unsaturated_low_temperature() {
        let p = device();
        // ħω/2kT = 10
        let t = HBAR * OMEGA / (2.0 * BOLTZMANN * 10.0);
        let q = q_tls(&p, 0.0, t, OMEGA);
        assert!((q / p.q_tls0 - 1.0 / 10f64.tanh()).abs() < 1e-8);
    }

    #[test]
    fn tls_saturation_factor_of_two() {
        let mut p = device();
        let t: f64 = 0.01;
        let n: f64 = 1e4;
        p.d = n.powf(p.beta2) / (3.0 * t.powf(p.beta1));
        let tanh = half_photon_energy_ratio(OMEGA, t).tanh();
        assert!((tanh - 1.0).abs() < 1e-9);
        let q = q_tls(&p, n, t, OMEGA);
        assert!((q / p.q_tls0 - 2.0).abs() < 1e-8);
    }

    #[test]
    fn equal_parallel_channels() {
        let p = LossParams {
            q_other: Some(3e6),
            ..device()
        };
        let (n, t) = (10.0, 0.1);
        // Solve for Q_TLS0 and Q_QP0 that put both channels at 3e6.
        let q_tls0 = 3e6 * p.q_tls0 / q_tls(&p, n, t, OMEGA);
        let q_qp0 = 3e6 * p.q_qp0 / q_qp(&p, t, OMEGA);
        let p = LossParams { q_tls0, q_qp0, ..p };
        assert!((q_int_model(&p, n, t, OMEGA) / 1e6 - 1.0).abs() < 1e-12);
    }

    #[test]
    fn qp_finite_at_millikelvin() {
        let p = LossParams { tc: 5.0, ..device() };
        for &f in &[4e9, 8e9] {
            let w = 2.0 * PI * f;
            let q = q_qp(&p, 0.01, w);
            assert!(q.is_finite() && q > 0.0);
            assert!(ln_q_qp(&p, 0.01, w).is_finite());
            assert_eq!(qp_loss(&p, 0.01, w), 0.0);
        }
    }

    #[test]
    fn photon_number_is_linear_in_power() {
        let lp = LineshapeParams {
            f0_hz: 5e9,
            q_tot: 5e5,
            q_c: 1e6,
            asymmetry: 0.0,
            baseline: 0.0,
        };
        let a = photon_number(-130.0, Some(0.0), &lp).unwrap();
        let b = photon_number(-130.0 + 10.0 * 2f64.log10(), Some(0.0), &lp).unwrap();
        assert!((b / a - 2.0).abs() < 1e-12);
        assert!(matches!(
            photon_number(-130.0, None, &lp),
            Err(LossModelError::MissingAttenuation)
        ));
    }

    #[test]
    fn dataset_grid_requirements() {
        let pts = |ns: &[f64], ts: &[f64]| {
            let mut v = Vec::new();
            for &n in ns {
                for &t in ts {
                    v.push(SweepPoint {
                        photon_number: n,
                        temperature_k: t,
                        q_int: 1e6,
                        q_int_sigma: Some(1e4),
                    });
                }
            }
            v
        };
        let ds = |points| SweepDataset {
            device_id: "d".into(),
            omega_rad_s: OMEGA,
            points,
        };
        assert!(matches!(
            ds(pts(&[1.0], &[0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8])).validate(),
            Err(LossModelError::InsufficientGrid(_))
        ));
        assert!(matches!(
            ds(pts(&[1.0, 10.0, 100.0, 1e3, 1e4], &[0.1, 0.2])).validate(),
            Err(LossModelError::InsufficientGrid(_))
        ));
        assert!(ds(pts(&[1.0, 10.0, 100.0], &[0.1, 0.2, 0.3])).validate().is_ok());
    }

    #[test]
    fn correlation_report_zero_variance() {
        let fit = LossFitResult {
            device_id: "d".into(),
            omega_rad_s: OMEGA,
            params: device(),
            sigma: vec![0.0; 7],
            covariance: vec![vec![0.0; 7]; 7],
            chi_square: 0.0,
            reduced_chi_square: 0.0,
            n_points: 72,
            converged: true,
            q_other_status: QOtherStatus::Unidentifiable,
            q_other_delta_chi_square: 0.0,
            correlated: vec![],
            unidentified: vec![],
        };
        let fits = vec![fit; 6];
        let report = correlation_report(&fits, 0.8).unwrap();
        assert!(report.matrix[0][1].is_nan());
        assert!(!report.undefined.is_empty());
        assert!(report.flagged.is_empty());
        assert!(correlation_report(&fits[..4], 0.8).is_err());
    }
}
