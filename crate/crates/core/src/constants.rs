//! Physical constants (SI, exact 2019 definitions).

use std::f64::consts::PI;

/// Planck constant, J·s.
pub const PLANCK: f64 = 6.626_070_15e-34;
/// Reduced Planck constant, J·s.
pub const HBAR: f64 = PLANCK / (2.0 * PI);
/// Boltzmann constant, J/K.
pub const BOLTZMANN: f64 = 1.380_649e-23;
/// Speed of light in vacuum, m/s.
pub const SPEED_OF_LIGHT: f64 = 299_792_458.0;
/// Weak-coupling BCS ratio `Δ0 / (k_B Tc)`.
pub const BCS_GAP_RATIO: f64 = 1.764;

/// `ħω / (2 k_B T)`.
pub fn half_photon_energy_ratio(omega: f64, temperature: f64) -> f64 {
    HBAR * omega / (2.0 * BOLTZMANN * temperature)
}

/// Superconducting gap `Δ0 = 1.764 k_B Tc` in joules.
pub fn gap_energy(tc: f64) -> f64 {
    BCS_GAP_RATIO * BOLTZMANN * tc
}
