//! Independent reference evaluations used as oracles by the integration
//! tests. None of these share code with the library.
#![allow(dead_code)]

use std::f64::consts::PI;

pub const EULER_GAMMA: f64 = 0.577_215_664_901_532_9;

/// `e^x K0(x)` from `∫₀^∞ e^{-x (cosh t - 1)} dt` by the trapezoid rule,
/// which converges geometrically for this analytic, decaying integrand.
pub fn k0_scaled_quadrature(x: f64) -> f64 {
    let t_max = (1.0 + 750.0 / x).acosh() + 1.0;
    let n = 40_000;
    let h = t_max / n as f64;
    let mut sum = 0.5;
    for i in 1..=n {
        let t = i as f64 * h;
        sum += (-x * (t.cosh() - 1.0)).exp();
    }
    sum * h
}

pub fn k0_quadrature(x: f64) -> f64 {
    k0_scaled_quadrature(x) * (-x).exp()
}

/// `e^{-|x|} I0(x)` from `(1/π) ∫₀^π e^{|x| (cos t - 1)} dt`; the periodic
/// trapezoid rule is spectrally accurate.
pub fn i0_scaled_quadrature(x: f64) -> f64 {
    let ax = x.abs();
    let n = 4_000;
    let h = PI / n as f64;
    let mut sum = 0.5 * (1.0 + (-2.0 * ax).exp());
    for i in 1..n {
        sum += (ax * ((i as f64 * h).cos() - 1.0)).exp();
    }
    sum * h / PI
}

/// `Σ (x²/4)^k / (k!)²` summed until the terms stop contributing.
pub fn i0_series(x: f64) -> f64 {
    let q = 0.25 * x * x;
    let mut term = 1.0;
    let mut sum = 1.0;
    for k in 1..500 {
        term *= q / (k as f64 * k as f64);
        sum += term;
        if term < 1e-18 * sum {
            break;
        }
    }
    sum
}

/// `Re Ψ(1/2 + iy)` from the series
/// `Ψ(1/2) + Σ_{n≥0} y² / ((n+½)((n+½)² + y²))`, summed smallest-first with
/// the remainder beyond `n = N` replaced by its integral `½ ln(1 + y²/N²)`.
pub fn digamma_half_series(y: f64) -> f64 {
    let n_terms = 2_000_000usize;
    let y2 = y * y;
    let big_n = n_terms as f64;
    let mut sum = 0.5 * (y2 / (big_n * big_n)).ln_1p();
    for n in (0..n_terms).rev() {
        let u = n as f64 + 0.5;
        sum += y2 / (u * (u * u + y2));
    }
    -EULER_GAMMA - 2.0 * 2f64.ln() + sum
}

pub fn rel(a: f64, b: f64) -> f64 {
    ((a - b) / b).abs()
}
