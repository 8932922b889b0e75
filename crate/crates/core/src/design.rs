//! Resonator design arithmetic: quarter-wave CPW frequency, feedline
//! coupling capacitance, and lumped-element values from two simulated
//! resonance frequencies.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const SPEED_OF_LIGHT: f64 = 299_792_458.0;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DesignError {
    #[error("{what} must be positive and finite, got {value}")]
    NotPositive { what: &'static str, value: f64 },
    #[error("effective dielectric constant {0} is below 1")]
    Permittivity(f64),
    #[error("meander frequency {meander} Hz must exceed the resonator frequency {resonator} Hz")]
    Ordering { meander: f64, resonator: f64 },
}

fn positive(what: &'static str, value: f64) -> Result<f64, DesignError> {
    if value > 0.0 && value.is_finite() {
        Ok(value)
    } else {
        Err(DesignError::NotPositive { what, value })
    }
}

fn default_speed() -> f64 {
    SPEED_OF_LIGHT
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CpwDesign {
    pub length_m: f64,
    pub eps_eff: f64,
    #[serde(default = "default_speed")]
    pub speed_m_s: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub z0_ohm: Option<f64>,
}

impl CpwDesign {
    pub fn new(length_m: f64, eps_eff: f64) -> Self {
        Self {
            length_m,
            eps_eff,
            speed_m_s: SPEED_OF_LIGHT,
            z0_ohm: None,
        }
    }

    fn validate(&self) -> Result<(), DesignError> {
        positive("length", self.length_m)?;
        positive("propagation speed", self.speed_m_s)?;
        if !(self.eps_eff >= 1.0 && self.eps_eff.is_finite()) {
            return Err(DesignError::Permittivity(self.eps_eff));
        }
        Ok(())
    }
}

/// Quarter-wave resonance `v / (4 l √ε_eff)` in Hz.
pub fn cpw_f0(design: &CpwDesign) -> Result<f64, DesignError> {
    design.validate()?;
    Ok(design.speed_m_s / (4.0 * design.length_m * design.eps_eff.sqrt()))
}

/// Length of a quarter-wave CPW resonating at `f0`.
pub fn cpw_length(f0_hz: f64, eps_eff: f64, speed_m_s: f64) -> Result<f64, DesignError> {
    positive("frequency", f0_hz)?;
    positive("propagation speed", speed_m_s)?;
    if !(eps_eff >= 1.0 && eps_eff.is_finite()) {
        return Err(DesignError::Permittivity(eps_eff));
    }
    Ok(speed_m_s / (4.0 * f0_hz * eps_eff.sqrt()))
}

/// Centre-pin to feedline capacitance `√(π/(4 Q_c)) / (2π f0 Z0)` in farads.
pub fn coupling_capacitance(q_c: f64, f0_hz: f64, z0_ohm: f64) -> Result<f64, DesignError> {
    positive("Q_c", q_c)?;
    positive("frequency", f0_hz)?;
    positive("impedance", z0_ohm)?;
    Ok((PI / (4.0 * q_c)).sqrt() / (2.0 * PI * f0_hz * z0_ohm))
}

/// How a resonance frequency relates to `1/√(LC)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FrequencyConvention {
    /// `2π f = 1/√(LC)`.
    #[default]
    Angular,
    /// `f = 1/√(LC)` taken literally, with no factor of 2π.
    Literal,
}

impl FrequencyConvention {
    fn to_angular(self, f: f64) -> f64 {
        match self {
            FrequencyConvention::Angular => 2.0 * PI * f,
            FrequencyConvention::Literal => f,
        }
    }

    fn from_angular(self, w: f64) -> f64 {
        match self {
            FrequencyConvention::Angular => w / (2.0 * PI),
            FrequencyConvention::Literal => w,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LumpedExtraction {
    pub c_l_f: f64,
    pub f_meander_hz: f64,
    pub f_resonator_hz: f64,
    pub convention: FrequencyConvention,
    pub inductance_h: f64,
    /// Stray capacitance of the bare meander.
    pub c_s_f: f64,
    pub z0_ohm: f64,
    /// Resonance of `L` with `C_L + C_S`, reconstructed from the solution.
    pub f0_hz: f64,
}

impl LumpedExtraction {
    /// Resonance of the bare meander, `L` with `C_S` alone.
    pub fn meander_frequency(&self) -> f64 {
        self.convention
            .from_angular(1.0 / (self.inductance_h * self.c_s_f).sqrt())
    }
}

/// Inductance and stray capacitance of a meander from its bare resonance
/// and its resonance with pad capacitance `c_l` attached.
pub fn extract_lumped(
    c_l_f: f64,
    f_meander_hz: f64,
    f_resonator_hz: f64,
    convention: FrequencyConvention,
) -> Result<LumpedExtraction, DesignError> {
    positive("pad capacitance", c_l_f)?;
    positive("resonator frequency", f_resonator_hz)?;
    if !(f_meander_hz > f_resonator_hz) || f_meander_hz.is_nan() {
        return Err(DesignError::Ordering {
            meander: f_meander_hz,
            resonator: f_resonator_hz,
        });
    }
    let c_s = if f_meander_hz.is_infinite() {
        0.0
    } else {
        c_l_f / ((f_meander_hz / f_resonator_hz).powi(2) - 1.0)
    };
    let c_total = c_l_f + c_s;
    let w_r = convention.to_angular(f_resonator_hz);
    let inductance = 1.0 / (w_r * w_r * c_total);
    Ok(LumpedExtraction {
        c_l_f,
        f_meander_hz,
        f_resonator_hz,
        convention,
        inductance_h: inductance,
        c_s_f: c_s,
        z0_ohm: (inductance / c_total).sqrt(),
        f0_hz: convention.from_angular(1.0 / (inductance * c_total).sqrt()),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_bad_inputs() {
        assert!(cpw_f0(&CpwDesign::new(1e-3, 0.5)).is_err());
        assert!(cpw_f0(&CpwDesign::new(0.0, 5.0)).is_err());
        assert!(coupling_capacitance(-1.0, 5e9, 50.0).is_err());
        assert!(extract_lumped(1e-13, 5e9, 6e9, FrequencyConvention::Angular).is_err());
        assert!(extract_lumped(1e-13, 6e9, 6e9, FrequencyConvention::Angular).is_err());
    }

    #[test]
    fn infinite_meander_has_no_stray_capacitance() {
        let e = extract_lumped(1e-13, f64::INFINITY, 6e9, FrequencyConvention::Angular).unwrap();
        assert_eq!(e.c_s_f, 0.0);
    }
}
