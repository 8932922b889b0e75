//! Loss-channel extraction for superconducting microwave resonators.
//!
//! The crate turns `|S21|` transmission traces into internal quality factors,
//! fits the power and temperature dependence of those quality factors to
//! two-level-system, quasiparticle and residual loss channels, fits
//! temperature-dependent frequency shifts, and decomposes surface loss
//! across interfaces and surface treatments.
//!
//! Module map:
//!
//! * [`numerics`]: special functions and the bounded least-squares solver.
//! * [`lineshape`]: single-trace `|S21|` model, fit and screening.
//! * [`lossmodel`]: `Q_int(n, T)` model and the seven-parameter sweep fit.
//! * [`freqshift`]: thermal conductivity and frequency-shift model and fit.
//! * [`decomposition`]: participation-ratio regression and interface solves.
//! * [`design`]: resonator design calculators.
//! * [`synth`]: seeded synthetic data for every fitting stage.
//! * [`pipeline`]: file formats, configuration and batch orchestration.

pub mod constants;
pub mod decomposition;
pub mod design;
pub mod freqshift;
pub mod lineshape;
pub mod lossmodel;
mod nullable;
pub mod numerics;
pub mod pipeline;
pub mod synth;
