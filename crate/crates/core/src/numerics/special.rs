//! Special functions: zeroth-order modified Bessel functions and the real part
//! of the digamma function on the line `Re z = 1/2`.
//!
//! Each function has an exponentially scaled companion so that callers can
//! compose `e^{±x}` factors analytically instead of overflowing.

use std::f64::consts::{FRAC_PI_2, PI};

use num_complex::Complex64;

use super::NumericsError;

/// Euler–Mascheroni constant.
pub const EULER_GAMMA: f64 = 0.577_215_664_901_532_9;

/// Largest argument for which the unscaled `I0` is representable.
pub const I0_OVERFLOW_THRESHOLD: f64 = 713.0;

const SERIES_EPS: f64 = 1e-17;
const K0_SERIES_LIMIT: f64 = 2.0;
const I0_SERIES_LIMIT: f64 = 20.0;
const DIGAMMA_ASYMPTOTIC_RADIUS: f64 = 12.0;

/// `K0(x)` for `x > 0`.
pub fn bessel_k0(x: f64) -> Result<f64, NumericsError> {
    check_positive(x)?;
    if x <= K0_SERIES_LIMIT {
        Ok(k0_series(x))
    } else {
        Ok(k0_scaled_steed(x) * (-x).exp())
    }
}

/// `e^x K0(x)` for `x > 0`. Finite for all positive finite `x`.
pub fn bessel_k0_scaled(x: f64) -> Result<f64, NumericsError> {
    check_positive(x)?;
    if x <= K0_SERIES_LIMIT {
        Ok(k0_series(x) * x.exp())
    } else {
        Ok(k0_scaled_steed(x))
    }
}

/// `I0(x)`; errors once the result would overflow.
pub fn bessel_i0(x: f64) -> Result<f64, NumericsError> {
    check_finite(x)?;
    let ax = x.abs();
    if ax <= I0_SERIES_LIMIT {
        return Ok(i0_series(ax));
    }
    if ax > I0_OVERFLOW_THRESHOLD {
        return Err(NumericsError::Overflow { function: "bessel_i0", x });
    }
    Ok(i0_scaled_asymptotic(ax) * ax.exp())
}

/// `e^{-|x|} I0(x)`, finite for every finite `x`.
pub fn bessel_i0_scaled(x: f64) -> Result<f64, NumericsError> {
    check_finite(x)?;
    let ax = x.abs();
    if ax <= I0_SERIES_LIMIT {
        Ok(i0_series(ax) * (-ax).exp())
    } else {
        Ok(i0_scaled_asymptotic(ax))
    }
}

/// `Re Ψ(1/2 + i y)`. Even in `y`.
pub fn digamma_real_half(y: f64) -> Result<f64, NumericsError> {
    check_finite(y)?;
    let y = y.abs();
    let (shift, w) = digamma_shift(y);
    Ok(digamma_asymptotic(w).re - shift)
}

/// `Re Ψ(1/2 + i y) - ln y` for `y > 0`, evaluated without cancellation for
/// large `y` where both terms approach `ln y`.
pub fn digamma_real_half_minus_ln(y: f64) -> Result<f64, NumericsError> {
    check_positive(y)?;
    if y < DIGAMMA_ASYMPTOTIC_RADIUS {
        return Ok(digamma_real_half(y)? - y.ln());
    }
    let w = Complex64::new(0.5, y);
    // Re ln(w) - ln y = ln|w/y|
    let log_part = 0.5 * (0.25 / (y * y)).ln_1p();
    Ok(log_part + digamma_asymptotic_tail(w).re)
}

/// `ln(sinh x · K0 x)` for `x > 0`, finite where both factors overflow.
pub fn ln_sinh_k0(x: f64) -> Result<f64, NumericsError> {
    // sinh(x) K0(x) = (1 - e^{-2x})/2 · e^x K0(x)
    Ok((-(-2.0 * x).exp_m1() / 2.0).ln() + bessel_k0_scaled(x)?.ln())
}

fn check_positive(x: f64) -> Result<(), NumericsError> {
    if x.is_finite() && x > 0.0 {
        Ok(())
    } else {
        Err(NumericsError::Domain {
            what: "argument must be positive and finite",
            value: x,
        })
    }
}

fn check_finite(x: f64) -> Result<(), NumericsError> {
    if x.is_finite() {
        Ok(())
    } else {
        Err(NumericsError::Domain {
            what: "argument must be finite",
            value: x,
        })
    }
}

fn i0_series(ax: f64) -> f64 {
    let q = 0.25 * ax * ax;
    let mut term = 1.0;
    let mut sum = 1.0;
    let mut k = 1.0;
    loop {
        term *= q / (k * k);
        sum += term;
        if term < SERIES_EPS * sum {
            return sum;
        }
        k += 1.0;
    }
}

fn i0_scaled_asymptotic(ax: f64) -> f64 {
    // e^{-x} I0(x) ~ (2 pi x)^{-1/2} sum_k ((2k-1)!!)^2 / (k! 8^k x^k)
    let mut term = 1.0;
    let mut sum = 1.0;
    let mut k = 0.0;
    loop {
        let ratio = (2.0 * k + 1.0) * (2.0 * k + 1.0) / (8.0 * (k + 1.0) * ax);
        let next = term * ratio;
        if next >= term || next < SERIES_EPS * sum {
            break;
        }
        term = next;
        sum += term;
        k += 1.0;
    }
    sum / (2.0 * PI * ax).sqrt()
}

fn k0_series(x: f64) -> f64 {
    let q = 0.25 * x * x;
    let i0 = i0_series(x);
    let mut term = 1.0;
    let mut harmonic = 0.0;
    let mut sum = 0.0;
    let mut k = 1.0;
    loop {
        term *= q / (k * k);
        harmonic += 1.0 / k;
        let contrib = term * harmonic;
        sum += contrib;
        if contrib < SERIES_EPS * sum.abs().max(f64::MIN_POSITIVE) {
            break;
        }
        k += 1.0;
    }
    -((0.5 * x).ln() + EULER_GAMMA) * i0 + sum
}

/// Steed's continued fraction (Temme's CF2) for `e^x K0(x)`, valid for `x >= 2`.
fn k0_scaled_steed(x: f64) -> f64 {
    const MAX_ITER: usize = 10_000;
    let a1 = 0.25;
    let mut b = 2.0 * (1.0 + x);
    let mut d = 1.0 / b;
    let mut delh = d;
    let mut q1 = 0.0;
    let mut q2 = 1.0;
    let mut q = a1;
    let mut c = a1;
    let mut a = -a1;
    let mut s = 1.0 + q * delh;
    for i in 2..=MAX_ITER {
        let fi = i as f64;
        a -= 2.0 * (fi - 1.0);
        c = -a * c / fi;
        let qnew = (q1 - b * q2) / a;
        q1 = q2;
        q2 = qnew;
        q += c * qnew;
        b += 2.0;
        d = 1.0 / (b + a * d);
        delh = (b * d - 1.0) * delh;
        let dels = q * delh;
        s += dels;
        if (dels / s).abs() < 1e-17 {
            break;
        }
    }
    (FRAC_PI_2 / x).sqrt() / s
}

/// Shift `1/2 + iy` upward until the asymptotic series is accurate.
/// Returns `(sum Re 1/(z+k), shifted z)`.
fn digamma_shift(y: f64) -> (f64, Complex64) {
    let mut w = Complex64::new(0.5, y);
    let mut shift = 0.0;
    while w.norm() < DIGAMMA_ASYMPTOTIC_RADIUS {
        shift += w.inv().re;
        w += 1.0;
    }
    (shift, w)
}

fn digamma_asymptotic(w: Complex64) -> Complex64 {
    w.ln() + digamma_asymptotic_tail(w)
}

/// `Ψ(w) - ln w` for large `|w|`.
fn digamma_asymptotic_tail(w: Complex64) -> Complex64 {
    // B_{2k} / (2k)
    const COEFFS: [f64; 7] = [
        1.0 / 12.0,
        -1.0 / 120.0,
        1.0 / 252.0,
        -1.0 / 240.0,
        1.0 / 132.0,
        -691.0 / 32760.0,
        1.0 / 12.0,
    ];
    let inv = w.inv();
    let inv2 = inv * inv;
    let mut series = Complex64::new(0.0, 0.0);
    for c in COEFFS.iter().rev() {
        series = (series + *c) * inv2;
    }
    -0.5 * inv - series
}
