//! Weighted linear least squares and small descriptive statistics.

use nalgebra::{DMatrix, DVector};

use super::NumericsError;

#[derive(Debug, Clone)]
pub struct LinearFit {
    pub coefficients: Vec<f64>,
    pub covariance: DMatrix<f64>,
    pub chi_square: f64,
    pub dof: usize,
}

impl LinearFit {
    pub fn sigma(&self, i: usize) -> f64 {
        self.covariance[(i, i)].sqrt()
    }
}

/// Solve `design · c ≈ y` with per-row standard deviations `sigma`.
/// The covariance is `(AᵀWA)⁻¹` with `W = diag(1/sigma²)`.
pub fn weighted_linear_fit(
    design: &DMatrix<f64>,
    y: &[f64],
    sigma: &[f64],
) -> Result<LinearFit, NumericsError> {
    let (m, n) = design.shape();
    if y.len() != m || sigma.len() != m {
        return Err(NumericsError::InvalidProblem(
            "design, data and sigma lengths differ".into(),
        ));
    }
    if m < n {
        return Err(NumericsError::InvalidProblem(format!(
            "{m} rows cannot determine {n} coefficients"
        )));
    }
    if let Some(s) = sigma.iter().find(|s| !(s.is_finite() && **s > 0.0)) {
        return Err(NumericsError::InvalidProblem(format!(
            "sigma must be strictly positive, got {s}"
        )));
    }
    let mut a = design.clone();
    let mut b = DVector::from_column_slice(y);
    for i in 0..m {
        let w = 1.0 / sigma[i];
        a.row_mut(i).scale_mut(w);
        b[i] *= w;
    }
    let ata = a.tr_mul(&a);
    let inv = ata
        .clone()
        .cholesky()
        .map(|c| c.inverse())
        .ok_or(NumericsError::Singular("normal equations"))?;
    let coef = &inv * a.tr_mul(&b);
    let resid = &a * &coef - &b;
    Ok(LinearFit {
        coefficients: coef.iter().copied().collect(),
        covariance: inv,
        chi_square: resid.norm_squared(),
        dof: m - n,
    })
}

/// Ordinary least-squares straight line with prediction uncertainty.
#[derive(Debug, Clone)]
pub struct LineFit {
    pub slope: f64,
    pub intercept: f64,
    /// Covariance of `(slope, intercept)`.
    pub covariance: [[f64; 2]; 2],
    pub residual_variance: f64,
    pub n: usize,
}

impl LineFit {
    pub fn predict(&self, x: f64) -> (f64, f64) {
        let y = self.slope * x + self.intercept;
        let c = &self.covariance;
        let var = x * x * c[0][0] + 2.0 * x * c[0][1] + c[1][1];
        (y, var.max(0.0).sqrt())
    }
}

/// Straight-line fit. With `sigma_y` the covariance uses those absolute errors;
/// otherwise it is scaled by the residual variance (`NaN` with two points).
pub fn fit_line(x: &[f64], y: &[f64], sigma_y: Option<&[f64]>) -> Result<LineFit, NumericsError> {
    let n = x.len();
    if n < 2 || y.len() != n {
        return Err(NumericsError::InvalidProblem(
            "a line needs at least two (x, y) pairs".into(),
        ));
    }
    let x0 = x[0];
    if x.iter().all(|v| *v == x0) {
        return Err(NumericsError::Singular("all x values identical"));
    }
    let design = DMatrix::from_fn(n, 2, |i, j| if j == 0 { x[i] } else { 1.0 });
    let fit = match sigma_y {
        Some(s) => weighted_linear_fit(&design, y, s)?,
        None => weighted_linear_fit(&design, y, &vec![1.0; n])?,
    };
    let residual_variance = if fit.dof > 0 {
        fit.chi_square / fit.dof as f64
    } else {
        f64::NAN
    };
    let scale = if sigma_y.is_some() { 1.0 } else { residual_variance };
    let c = &fit.covariance;
    Ok(LineFit {
        slope: fit.coefficients[0],
        intercept: fit.coefficients[1],
        covariance: [
            [c[(0, 0)] * scale, c[(0, 1)] * scale],
            [c[(1, 0)] * scale, c[(1, 1)] * scale],
        ],
        residual_variance,
        n,
    })
}

/// Inverse-variance weighted mean and its standard error.
pub fn weighted_mean(values: &[f64], sigma: &[f64]) -> Option<(f64, f64)> {
    let mut sw = 0.0;
    let mut swx = 0.0;
    for (v, s) in values.iter().zip(sigma) {
        if s.is_finite() && *s > 0.0 {
            let w = 1.0 / (s * s);
            sw += w;
            swx += w * v;
        }
    }
    (sw > 0.0).then(|| (swx / sw, 1.0 / sw.sqrt()))
}

/// Mean and population standard deviation.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Pearson correlation; `NaN` when either column has zero variance.
pub fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let (ma, _) = mean_std(a);
    let (mb, _) = mean_std(b);
    let mut sab = 0.0;
    let mut saa = 0.0;
    let mut sbb = 0.0;
    for (x, y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma).powi(2);
        sbb += (y - mb).powi(2);
    }
    if saa == 0.0 || sbb == 0.0 {
        return f64::NAN;
    }
    sab / (saa * sbb).sqrt()
}
