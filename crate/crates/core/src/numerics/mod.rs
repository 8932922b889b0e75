//! Numerical building blocks shared by every fitting module.

pub mod linear;
pub mod nlls;
pub mod special;

pub use linear::{fit_line, mean_std, pearson, weighted_linear_fit, weighted_mean, LineFit, LinearFit};
pub use nlls::{
    covariance_from_jacobian, nlls_fit, CovarianceScale, FitOptions, FitOutcome, FitProblem,
    ResidualModel,
};
pub use special::{
    bessel_i0, bessel_i0_scaled, bessel_k0, bessel_k0_scaled, digamma_real_half,
    digamma_real_half_minus_ln, ln_sinh_k0,
};

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NumericsError {
    #[error("domain error: {what} (got {value})")]
    Domain { what: &'static str, value: f64 },
    #[error("{function}({x}) overflows")]
    Overflow { function: &'static str, x: f64 },
    #[error("invalid fit problem: {0}")]
    InvalidProblem(String),
    #[error("non-finite values in {0}")]
    NonFinite(&'static str),
    #[error("singular system: {0}")]
    Singular(&'static str),
}

/// Central finite-difference Jacobian of a vector function, relative step `rel_step`.
pub fn finite_difference_jacobian(
    f: impl Fn(&[f64]) -> Vec<f64>,
    x: &[f64],
    rel_step: f64,
) -> nalgebra::DMatrix<f64> {
    let f0 = f(x);
    let mut jac = nalgebra::DMatrix::zeros(f0.len(), x.len());
    let mut xx = x.to_vec();
    for j in 0..x.len() {
        let h = rel_step * x[j].abs().max(1.0);
        xx[j] = x[j] + h;
        let plus = f(&xx);
        xx[j] = x[j] - h;
        let minus = f(&xx);
        xx[j] = x[j];
        for i in 0..f0.len() {
            jac[(i, j)] = (plus[i] - minus[i]) / (2.0 * h);
        }
    }
    jac
}
