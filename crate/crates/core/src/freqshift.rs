//! Fractional resonance-frequency shift versus temperature: a TLS term from
//! the digamma function and a thermal quasiparticle term from the complex
//! conductivity through a surface impedance `Z_s ∝ σ^γ`.

use std::f64::consts::{FRAC_PI_2, PI};
use std::fmt;
use std::str::FromStr;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::constants::{gap_energy, half_photon_energy_ratio, BOLTZMANN, HBAR};
use crate::numerics::{
    bessel_i0_scaled, digamma_real_half_minus_ln, ln_sinh_k0, nlls_fit, weighted_linear_fit,
    CovarianceScale, FitOptions, FitProblem, NumericsError, ResidualModel,
};

pub const MIN_FREQ_SHIFT_POINTS: usize = 6;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FreqShiftError {
    #[error("temperature {temperature} K is outside (0, Tc = {tc} K)")]
    Domain { temperature: f64, tc: f64 },
    #[error("thermal conductivity approximation breaks down at {0} K (σ2 ≤ 0)")]
    ApproximationInvalid(f64),
    #[error("frequency-shift fit needs at least {MIN_FREQ_SHIFT_POINTS} temperatures, got {0}")]
    InsufficientData(usize),
    #[error("invalid frequency-shift data: {0}")]
    InvalidData(String),
    #[error("frequency-shift fit diverged: {0}")]
    FitDiverged(String),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
}

/// Exponent of the surface impedance `Z_s ∝ σ^γ`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
pub enum GammaRegime {
    /// `γ = -1/3`: thick film, extreme anomalous limit.
    #[serde(rename = "-1/3")]
    ExtremeAnomalous,
    /// `γ = -1/2`: thick film, dirty limit.
    #[serde(rename = "-1/2")]
    DirtyThick,
    /// `γ = -1`: thin film, dirty (local) limit.
    #[default]
    #[serde(rename = "-1")]
    ThinFilm,
}

impl GammaRegime {
    pub const ALL: [GammaRegime; 3] = [
        GammaRegime::ThinFilm,
        GammaRegime::DirtyThick,
        GammaRegime::ExtremeAnomalous,
    ];

    pub fn value(self) -> f64 {
        match self {
            GammaRegime::ExtremeAnomalous => -1.0 / 3.0,
            GammaRegime::DirtyThick => -0.5,
            GammaRegime::ThinFilm => -1.0,
        }
    }
}

impl fmt::Display for GammaRegime {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            GammaRegime::ExtremeAnomalous => "-1/3",
            GammaRegime::DirtyThick => "-1/2",
            GammaRegime::ThinFilm => "-1",
        })
    }
}

impl FromStr for GammaRegime {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim() {
            "-1" => Ok(GammaRegime::ThinFilm),
            "-1/2" | "-0.5" => Ok(GammaRegime::DirtyThick),
            "-1/3" => Ok(GammaRegime::ExtremeAnomalous),
            other => Err(format!("unknown gamma regime {other:?}; expected -1, -1/2 or -1/3")),
        }
    }
}

/// Complex conductivity normalised to the normal-state value.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConductivityState {
    pub sigma1: f64,
    pub sigma2: f64,
    /// `arctan(σ2/σ1)`.
    pub phi: f64,
    pub magnitude: f64,
}

/// Sum with Neumaier compensation.
fn compensated_sum(terms: &[f64]) -> f64 {
    let mut sum = 0.0;
    let mut c = 0.0;
    for &t in terms {
        let s = sum + t;
        if sum.abs() >= t.abs() {
            c += (sum - s) + t;
        } else {
            c += (t - s) + sum;
        }
        sum = s;
    }
    sum + c
}

/// Thermal-quasiparticle conductivity `σ1/σn`, `σ2/σn` at `T < Tc`.
pub fn sigma_thermal(temperature: f64, omega: f64, tc: f64) -> Result<ConductivityState, FreqShiftError> {
    if !(temperature > 0.0 && temperature < tc) {
        return Err(FreqShiftError::Domain { temperature, tc });
    }
    let gap = gap_energy(tc);
    let hw = HBAR * omega;
    let xi = half_photon_energy_ratio(omega, temperature);
    let gap_ratio = gap / (BOLTZMANN * temperature);
    let sigma1 = 4.0 * gap / hw * (ln_sinh_k0(xi)? - gap_ratio).exp();
    let boltz = (-gap_ratio).exp();
    let bracket = compensated_sum(&[
        1.0,
        -(2.0 * PI / gap_ratio).sqrt() * boltz,
        -2.0 * boltz * bessel_i0_scaled(xi)?,
    ]);
    let sigma2 = PI * gap / hw * bracket;
    if !(sigma2 > 0.0) {
        return Err(FreqShiftError::ApproximationInvalid(temperature));
    }
    Ok(ConductivityState {
        sigma1,
        sigma2,
        phi: sigma2.atan2(sigma1),
        magnitude: sigma1.hypot(sigma2),
    })
}

/// Zero-temperature limit: `σ1 = 0`, `σ2/σn = πΔ0/ħω`.
pub fn sigma_zero(omega: f64, tc: f64) -> ConductivityState {
    let sigma2 = PI * gap_energy(tc) / (HBAR * omega);
    ConductivityState {
        sigma1: 0.0,
        sigma2,
        phi: FRAC_PI_2,
        magnitude: sigma2,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FreqShiftParams {
    pub q_tls0: f64,
    pub tc: f64,
    /// Kinetic inductance fraction.
    pub alpha_kin: f64,
    #[serde(default)]
    pub gamma: GammaRegime,
}

/// Quasiparticle shift `-(α/2)(1 - [sin γφ / sin(γπ/2)] (|σ(T)|/|σ(0)|)^{-γ})`.
/// At `γ = -1` this is `-(α/2)(1 - sin φ · |σ(T)|/|σ(0)|)`.
pub fn qp_freq_shift(params: &FreqShiftParams, temperature: f64, omega: f64) -> Result<f64, FreqShiftError> {
    let s = sigma_thermal(temperature, omega, params.tc)?;
    let s0 = sigma_zero(omega, params.tc);
    let g = params.gamma.value();
    let factor = (g * s.phi).sin() / (g * FRAC_PI_2).sin() * (s.magnitude / s0.magnitude).powf(-g);
    Ok(-0.5 * params.alpha_kin * (1.0 - factor))
}

/// TLS shift `[Re Ψ(1/2 + iy) - ln y] / (π Q_TLS0)` with `y = ħω/(2π k_B T)`.
pub fn tls_freq_shift(q_tls0: f64, temperature: f64, omega: f64) -> f64 {
    let y = HBAR * omega / (2.0 * PI * BOLTZMANN * temperature);
    digamma_real_half_minus_ln(y).unwrap_or(f64::NAN) / (PI * q_tls0)
}

/// TLS plus quasiparticle shift, unreferenced.
pub fn freq_shift_model(params: &FreqShiftParams, temperature: f64, omega: f64) -> f64 {
    let qp = qp_freq_shift(params, temperature, omega).unwrap_or(f64::NAN);
    tls_freq_shift(params.q_tls0, temperature, omega) + qp
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FreqShiftPoint {
    pub temperature_k: f64,
    /// `(f(T) - f(T_base)) / f(T_base)`.
    pub df_over_f: f64,
    pub sigma: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FreqShiftDataset {
    /// Resonance frequency at the base temperature.
    pub f0_hz: f64,
    pub points: Vec<FreqShiftPoint>,
}

impl FreqShiftDataset {
    pub fn omega(&self) -> f64 {
        2.0 * PI * self.f0_hz
    }

    pub fn base_temperature(&self) -> f64 {
        self.points
            .iter()
            .map(|p| p.temperature_k)
            .fold(f64::INFINITY, f64::min)
    }

    pub fn max_temperature(&self) -> f64 {
        self.points.iter().map(|p| p.temperature_k).fold(0.0, f64::max)
    }

    /// Points ordered by temperature.
    pub fn sorted(&self) -> Self {
        let mut points = self.points.clone();
        points.sort_by(|a, b| a.temperature_k.total_cmp(&b.temperature_k));
        Self {
            f0_hz: self.f0_hz,
            points,
        }
    }

    pub fn validate(&self) -> Result<(), FreqShiftError> {
        if !(self.f0_hz.is_finite() && self.f0_hz > 0.0) {
            return Err(FreqShiftError::InvalidData(format!("f0 {} must be positive", self.f0_hz)));
        }
        for (i, p) in self.points.iter().enumerate() {
            if !(p.temperature_k.is_finite() && p.temperature_k > 0.0) {
                return Err(FreqShiftError::InvalidData(format!("point {i}: temperature must be positive")));
            }
            if !p.df_over_f.is_finite() {
                return Err(FreqShiftError::InvalidData(format!("point {i}: shift must be finite")));
            }
            if let Some(s) = p.sigma {
                if !(s.is_finite() && s > 0.0) {
                    return Err(FreqShiftError::InvalidData(format!("point {i}: sigma must be positive")));
                }
            }
        }
        if self.points.len() < MIN_FREQ_SHIFT_POINTS {
            return Err(FreqShiftError::InsufficientData(self.points.len()));
        }
        Ok(())
    }
}

/// Model referenced to the dataset's base temperature, so it is exactly
/// zero there.
pub fn referenced_shift(params: &FreqShiftParams, temperature: f64, base: f64, omega: f64) -> f64 {
    freq_shift_model(params, temperature, omega) - freq_shift_model(params, base, omega)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FreqShiftFit {
    pub params: FreqShiftParams,
    pub q_tls0_sigma: f64,
    pub tc_sigma: f64,
    pub alpha_kin_sigma: f64,
    /// Covariance of `(ln Q_TLS0, Tc, α_kin)`.
    pub covariance: Vec<Vec<f64>>,
    pub chi_square: f64,
    pub reduced_chi_square: f64,
    pub converged: bool,
}

#[derive(Debug, Clone)]
pub struct FreqShiftFitOptions {
    pub solver: FitOptions,
    pub q_bounds: (f64, f64),
    pub tc_bounds: (f64, f64),
    /// Number of `Tc` values scanned for the starting point.
    pub tc_scan: usize,
}

impl Default for FreqShiftFitOptions {
    fn default() -> Self {
        Self {
            solver: FitOptions::default(),
            q_bounds: (1e3, 1e12),
            tc_bounds: (0.05, 6.0),
            tc_scan: 40,
        }
    }
}

struct ShiftModel<'d> {
    data: &'d FreqShiftDataset,
    base: f64,
    omega: f64,
    gamma: GammaRegime,
}

impl ShiftModel<'_> {
    fn params(&self, c: &[f64]) -> FreqShiftParams {
        FreqShiftParams {
            q_tls0: c[0].exp(),
            tc: c[1],
            alpha_kin: c[2],
            gamma: self.gamma,
        }
    }
}

impl ResidualModel for ShiftModel<'_> {
    fn n_residuals(&self) -> usize {
        self.data.points.len()
    }

    fn residuals(&self, c: &[f64], out: &mut [f64]) {
        let p = self.params(c);
        for (o, pt) in out.iter_mut().zip(&self.data.points) {
            *o = referenced_shift(&p, pt.temperature_k, self.base, self.omega) - pt.df_over_f;
        }
    }

    fn jacobian(&self, c: &[f64]) -> Option<DMatrix<f64>> {
        // Linear in 1/Q_TLS0 and α_kin; only Tc needs a difference quotient.
        let p = self.params(c);
        let h = 1e-6 * p.tc;
        let up = FreqShiftParams { tc: p.tc + h, ..p };
        let down = FreqShiftParams { tc: p.tc - h, ..p };
        let unit_qp = FreqShiftParams {
            alpha_kin: 1.0,
            ..p
        };
        let mut jac = DMatrix::zeros(self.data.points.len(), 3);
        let tls_base = tls_freq_shift(p.q_tls0, self.base, self.omega);
        let qp_base = qp_freq_shift(&unit_qp, self.base, self.omega).unwrap_or(f64::NAN);
        for (i, pt) in self.data.points.iter().enumerate() {
            let t = pt.temperature_k;
            let tls = tls_freq_shift(p.q_tls0, t, self.omega) - tls_base;
            jac[(i, 0)] = -tls;
            jac[(i, 1)] = (referenced_shift(&up, t, self.base, self.omega)
                - referenced_shift(&down, t, self.base, self.omega))
                / (2.0 * h);
            jac[(i, 2)] = qp_freq_shift(&unit_qp, t, self.omega).unwrap_or(f64::NAN) - qp_base;
        }
        Some(jac)
    }
}

/// Weighted fit of `Q_TLS0`, `Tc` and `α_kin` for one surface-impedance regime.
pub fn fit_freq_shift(
    data: &FreqShiftDataset,
    gamma: GammaRegime,
    options: &FreqShiftFitOptions,
) -> Result<FreqShiftFit, FreqShiftError> {
    data.validate()?;
    let omega = data.omega();
    let base = data.base_temperature();
    let t_max = data.max_temperature();
    let model = ShiftModel {
        data,
        base,
        omega,
        gamma,
    };
    let with_sigma = data.points.iter().all(|p| p.sigma.is_some());
    // Without stated errors use one common scale, the RMS shift, so the
    // solver's tolerances see residuals of order one; the covariance is
    // rescaled by the reduced chi-square either way.
    let rms = (data.points.iter().map(|p| p.df_over_f * p.df_over_f).sum::<f64>() / data.points.len() as f64).sqrt();
    let common = if rms > 0.0 { rms } else { 1.0 };
    let sigma: Vec<f64> = data
        .points
        .iter()
        .map(|p| if with_sigma { p.sigma.unwrap_or(common) } else { common })
        .collect();

    let tc_lo = options.tc_bounds.0.max(1.05 * t_max);
    let tc_hi = options.tc_bounds.1;
    if tc_lo >= tc_hi {
        return Err(FreqShiftError::InvalidData(format!(
            "data reach {t_max} K, above the largest admissible Tc {tc_hi} K"
        )));
    }
    let (q_lo, q_hi) = options.q_bounds;
    let lower = vec![q_lo.ln(), tc_lo, 0.0];
    let upper = vec![q_hi.ln(), tc_hi, 1.0];

    // For fixed Tc the model is linear in (1/Q_TLS0, α_kin): scan Tc.
    let mut start: Option<(f64, Vec<f64>)> = None;
    let steps = options.tc_scan.max(2);
    for k in 0..steps {
        let tc = tc_lo * (tc_hi / tc_lo).powf(k as f64 / (steps - 1) as f64);
        let unit = FreqShiftParams {
            q_tls0: 1.0,
            tc,
            alpha_kin: 1.0,
            gamma,
        };
        let Ok(qp_base) = qp_freq_shift(&unit, base, omega) else {
            continue;
        };
        let tls_base = tls_freq_shift(1.0, base, omega);
        let mut design = DMatrix::zeros(data.points.len(), 2);
        let mut ok = true;
        for (i, pt) in data.points.iter().enumerate() {
            design[(i, 0)] = tls_freq_shift(1.0, pt.temperature_k, omega) - tls_base;
            match qp_freq_shift(&unit, pt.temperature_k, omega) {
                Ok(v) => design[(i, 1)] = v - qp_base,
                Err(_) => ok = false,
            }
        }
        if !ok {
            continue;
        }
        let y: Vec<f64> = data.points.iter().map(|p| p.df_over_f).collect();
        let Ok(lin) = weighted_linear_fit(&design, &y, &sigma) else {
            continue;
        };
        let inv_q = lin.coefficients[0].clamp(1.0 / q_hi, 1.0 / q_lo);
        let alpha = lin.coefficients[1].clamp(0.0, 1.0);
        let c = vec![(1.0 / inv_q).ln(), tc, alpha];
        let mut r = vec![0.0; data.points.len()];
        model.residuals(&c, &mut r);
        let chi2: f64 = r.iter().zip(&sigma).map(|(r, s)| (r / s).powi(2)).sum();
        if chi2.is_finite() && start.as_ref().map_or(true, |s| chi2 < s.0) {
            start = Some((chi2, c));
        }
    }
    let (_, start) = start.ok_or_else(|| FreqShiftError::FitDiverged("no admissible Tc in the scan".into()))?;

    let solver = FitOptions {
        covariance_scale: if with_sigma {
            CovarianceScale::Absolute
        } else {
            CovarianceScale::ReducedChiSquare
        },
        ..options.solver.clone()
    };
    let weights: Vec<f64> = sigma.iter().map(|s| 1.0 / s).collect();
    let problem = FitProblem::new(&model, start)
        .with_bounds(lower, upper)
        .with_weights(weights);
    let outcome = nlls_fit(&problem, &solver).map_err(|e| FreqShiftError::FitDiverged(e.to_string()))?;
    let params = model.params(&outcome.params);
    let cov: Vec<Vec<f64>> = (0..3)
        .map(|i| (0..3).map(|j| outcome.covariance[(i, j)]).collect())
        .collect();
    Ok(FreqShiftFit {
        params,
        q_tls0_sigma: params.q_tls0 * cov[0][0].sqrt(),
        tc_sigma: cov[1][1].sqrt(),
        alpha_kin_sigma: cov[2][2].sqrt(),
        covariance: cov,
        chi_square: outcome.chi_square,
        reduced_chi_square: outcome.reduced_chi_square,
        converged: outcome.converged,
    })
}
