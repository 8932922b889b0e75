//! Bounded, weighted nonlinear least squares.
//!
//! Levenberg–Marquardt with Marquardt diagonal scaling. Box constraints are
//! handled by mapping each bounded parameter onto an unconstrained internal
//! coordinate (sine map for two-sided bounds, square-root map for one-sided
//! bounds), so the inner solver never leaves the feasible box.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use super::NumericsError;

/// A residual model `params -> model - data`, unweighted.
pub trait ResidualModel {
    fn n_residuals(&self) -> usize;

    fn residuals(&self, params: &[f64], out: &mut [f64]);

    /// Analytic Jacobian of the unweighted residuals (rows: residuals,
    /// columns: parameters). `None` selects central finite differences.
    fn jacobian(&self, _params: &[f64]) -> Option<DMatrix<f64>> {
        None
    }
}

impl<F> ResidualModel for (usize, F)
where
    F: Fn(&[f64], &mut [f64]),
{
    fn n_residuals(&self) -> usize {
        self.0
    }

    fn residuals(&self, params: &[f64], out: &mut [f64]) {
        (self.1)(params, out)
    }
}

/// How the parameter covariance is normalised.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum CovarianceScale {
    /// Weights are `1/sigma` of known measurement errors.
    #[default]
    Absolute,
    /// Multiply by the reduced chi-square (weights only relative).
    ReducedChiSquare,
}

#[derive(Debug, Clone)]
pub struct FitOptions {
    pub max_iterations: usize,
    /// Stop once an accepted step lowers chi-square by less than this fraction.
    pub cost_tolerance: f64,
    /// Stop once the infinity norm of the internal gradient falls below this.
    pub gradient_tolerance: f64,
    /// Relative step for central finite differences.
    pub fd_relative_step: f64,
    pub covariance_scale: CovarianceScale,
}

impl Default for FitOptions {
    fn default() -> Self {
        Self {
            max_iterations: 200,
            cost_tolerance: 1e-10,
            gradient_tolerance: 1e-12,
            fd_relative_step: 1e-6,
            covariance_scale: CovarianceScale::Absolute,
        }
    }
}

/// A weighted, box-constrained least-squares problem.
pub struct FitProblem<'a> {
    pub model: &'a dyn ResidualModel,
    pub initial: Vec<f64>,
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
    /// `1/sigma` per residual.
    pub weights: Vec<f64>,
    /// Parameters held at their initial value.
    pub fixed: Vec<bool>,
}

impl<'a> FitProblem<'a> {
    /// Unbounded, unit-weight problem.
    pub fn new(model: &'a dyn ResidualModel, initial: Vec<f64>) -> Self {
        let n = initial.len();
        let m = model.n_residuals();
        Self {
            model,
            initial,
            lower: vec![f64::NEG_INFINITY; n],
            upper: vec![f64::INFINITY; n],
            weights: vec![1.0; m],
            fixed: vec![false; n],
        }
    }

    pub fn with_bounds(mut self, lower: Vec<f64>, upper: Vec<f64>) -> Self {
        self.lower = lower;
        self.upper = upper;
        self
    }

    pub fn with_weights(mut self, weights: Vec<f64>) -> Self {
        self.weights = weights;
        self
    }

    pub fn with_fixed(mut self, fixed: Vec<bool>) -> Self {
        self.fixed = fixed;
        self
    }

    fn validate(&self) -> Result<(), NumericsError> {
        let n = self.initial.len();
        let m = self.model.n_residuals();
        let bad = |msg: String| Err(NumericsError::InvalidProblem(msg));
        if n == 0 {
            return bad("no parameters".into());
        }
        if self.lower.len() != n || self.upper.len() != n || self.fixed.len() != n {
            return bad("bounds/fixed mask length differs from parameter count".into());
        }
        if self.weights.len() != m {
            return bad(format!("{} weights for {} residuals", self.weights.len(), m));
        }
        let n_free = self.fixed.iter().filter(|f| !**f).count();
        if m < n_free {
            return bad(format!("{m} residuals cannot determine {n_free} parameters"));
        }
        for (i, w) in self.weights.iter().enumerate() {
            if !(w.is_finite() && *w > 0.0) {
                return bad(format!("weight {i} is not strictly positive: {w}"));
            }
        }
        for i in 0..n {
            let (lo, hi, p) = (self.lower[i], self.upper[i], self.initial[i]);
            if lo.is_nan() || hi.is_nan() || lo > hi {
                return bad(format!("bounds of parameter {i} are not ordered"));
            }
            if !p.is_finite() || p < lo || p > hi {
                return bad(format!("initial value of parameter {i} ({p}) outside [{lo}, {hi}]"));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct FitOutcome {
    pub params: Vec<f64>,
    /// Covariance in the external parameters. Directions the data cannot
    /// constrain carry infinite variance.
    pub covariance: DMatrix<f64>,
    /// Weighted sum of squared residuals.
    pub chi_square: f64,
    pub reduced_chi_square: f64,
    pub converged: bool,
    pub rank_deficient: bool,
    pub iterations: usize,
    /// Infinity norm of the gradient in internal (unconstrained) coordinates.
    pub gradient_norm: f64,
    pub n_residuals: usize,
    pub n_free: usize,
}

impl FitOutcome {
    pub fn sigma(&self, i: usize) -> f64 {
        self.covariance[(i, i)].sqrt()
    }

    pub fn correlation(&self, i: usize, j: usize) -> f64 {
        self.covariance[(i, j)] / (self.sigma(i) * self.sigma(j))
    }
}

/// Smallest internal distance from a bound for a starting point. The maps
/// have zero slope at their bounds, so a start sitting exactly on one would
/// never move.
const START_OFFSET: f64 = 1e-3;

#[derive(Debug, Clone, Copy)]
enum ParamMap {
    Free,
    Lower(f64),
    Upper(f64),
    Both(f64, f64),
}

impl ParamMap {
    fn new(lo: f64, hi: f64) -> Self {
        match (lo.is_finite(), hi.is_finite()) {
            (false, false) => ParamMap::Free,
            (true, false) => ParamMap::Lower(lo),
            (false, true) => ParamMap::Upper(hi),
            (true, true) => ParamMap::Both(lo, hi),
        }
    }

    fn external(self, u: f64) -> f64 {
        match self {
            ParamMap::Free => u,
            ParamMap::Lower(lo) => lo - 1.0 + (u * u + 1.0).sqrt(),
            ParamMap::Upper(hi) => hi + 1.0 - (u * u + 1.0).sqrt(),
            ParamMap::Both(lo, hi) => {
                let p = lo + 0.5 * (hi - lo) * (u.sin() + 1.0);
                p.clamp(lo, hi)
            }
        }
    }

    fn internal(self, p: f64) -> f64 {
        match self {
            ParamMap::Free => p,
            ParamMap::Lower(lo) => ((p - lo + 1.0).powi(2) - 1.0).max(0.0).sqrt(),
            ParamMap::Upper(hi) => ((hi - p + 1.0).powi(2) - 1.0).max(0.0).sqrt(),
            ParamMap::Both(lo, hi) => {
                if hi == lo {
                    0.0
                } else {
                    (2.0 * (p - lo) / (hi - lo) - 1.0).clamp(-1.0, 1.0).asin()
                }
            }
        }
    }

    fn start(self, p: f64) -> f64 {
        let u = self.internal(p);
        match self {
            ParamMap::Free => u,
            ParamMap::Lower(_) | ParamMap::Upper(_) => u.max(START_OFFSET),
            ParamMap::Both(lo, hi) if hi == lo => u,
            ParamMap::Both(..) => {
                let edge = std::f64::consts::FRAC_PI_2 - START_OFFSET;
                u.clamp(-edge, edge)
            }
        }
    }
}

struct Mapped<'p, 'a> {
    problem: &'p FitProblem<'a>,
    maps: Vec<ParamMap>,
    free: Vec<usize>,
    step: f64,
}

impl Mapped<'_, '_> {
    fn external(&self, u: &[f64]) -> Vec<f64> {
        let mut p = self.problem.initial.clone();
        for (k, &i) in self.free.iter().enumerate() {
            p[i] = self.maps[i].external(u[k]);
        }
        p
    }

    fn weighted_residuals(&self, p: &[f64], out: &mut [f64]) {
        self.problem.model.residuals(p, out);
        for (r, w) in out.iter_mut().zip(&self.problem.weights) {
            *r *= w;
        }
    }

    fn eval(&self, u: &[f64]) -> (DVector<f64>, f64) {
        let p = self.external(u);
        let mut r = vec![0.0; self.problem.model.n_residuals()];
        self.weighted_residuals(&p, &mut r);
        let r = DVector::from_vec(r);
        let chi2 = r.norm_squared();
        (r, chi2)
    }

    /// Weighted Jacobian with respect to the internal coordinates.
    fn internal_jacobian(&self, u: &[f64]) -> DMatrix<f64> {
        let m = self.problem.model.n_residuals();
        let p = self.external(u);
        if let Some(jac) = self.problem.model.jacobian(&p) {
            let mut out = DMatrix::zeros(m, self.free.len());
            for (k, &i) in self.free.iter().enumerate() {
                let h = self.step * u[k].abs().max(1.0);
                let dpdu = (self.maps[i].external(u[k] + h) - self.maps[i].external(u[k] - h))
                    / (2.0 * h);
                for row in 0..m {
                    out[(row, k)] = jac[(row, i)] * dpdu * self.problem.weights[row];
                }
            }
            return out;
        }
        let mut out = DMatrix::zeros(m, self.free.len());
        let mut uu = u.to_vec();
        let mut plus = vec![0.0; m];
        let mut minus = vec![0.0; m];
        for k in 0..self.free.len() {
            let h = self.step * u[k].abs().max(1.0);
            uu[k] = u[k] + h;
            self.weighted_residuals(&self.external(&uu), &mut plus);
            uu[k] = u[k] - h;
            self.weighted_residuals(&self.external(&uu), &mut minus);
            uu[k] = u[k];
            for row in 0..m {
                out[(row, k)] = (plus[row] - minus[row]) / (2.0 * h);
            }
        }
        out
    }

    /// Weighted Jacobian with respect to the free external parameters.
    fn external_jacobian(&self, p: &[f64]) -> DMatrix<f64> {
        let m = self.problem.model.n_residuals();
        let analytic = self.problem.model.jacobian(p);
        let mut out = DMatrix::zeros(m, self.free.len());
        let mut pp = p.to_vec();
        let mut plus = vec![0.0; m];
        let mut minus = vec![0.0; m];
        for (k, &i) in self.free.iter().enumerate() {
            if let Some(jac) = &analytic {
                for row in 0..m {
                    out[(row, k)] = jac[(row, i)] * self.problem.weights[row];
                }
                continue;
            }
            let h = self.step * p[i].abs().max(1.0);
            pp[i] = p[i] + h;
            self.weighted_residuals(&pp, &mut plus);
            pp[i] = p[i] - h;
            self.weighted_residuals(&pp, &mut minus);
            pp[i] = p[i];
            for row in 0..m {
                out[(row, k)] = (plus[row] - minus[row]) / (2.0 * h);
            }
        }
        out
    }
}

/// Solve a weighted, bounded nonlinear least-squares problem.
///
/// Failure to converge is reported through [`FitOutcome::converged`], not as
/// an error; errors are reserved for malformed problems.
pub fn nlls_fit(problem: &FitProblem<'_>, options: &FitOptions) -> Result<FitOutcome, NumericsError> {
    problem.validate()?;
    let n = problem.initial.len();
    let m = problem.model.n_residuals();
    let maps: Vec<ParamMap> = (0..n)
        .map(|i| ParamMap::new(problem.lower[i], problem.upper[i]))
        .collect();
    let free: Vec<usize> = (0..n).filter(|&i| !problem.fixed[i]).collect();
    let mapped = Mapped {
        problem,
        maps,
        free,
        step: options.fd_relative_step,
    };
    let nf = mapped.free.len();

    let mut u: Vec<f64> = mapped
        .free
        .iter()
        .map(|&i| mapped.maps[i].start(problem.initial[i]))
        .collect();
    let (mut r, mut chi2) = mapped.eval(&u);
    if !chi2.is_finite() {
        return Err(NumericsError::NonFinite("residuals at the initial point"));
    }

    let mut converged = nf == 0 || chi2 == 0.0;
    let mut iterations = 0;
    let mut lambda = -1.0;
    let mut nu = 2.0;
    let mut gradient_norm = 0.0;

    while !converged && iterations < options.max_iterations {
        iterations += 1;
        let jac = mapped.internal_jacobian(&u);
        let grad = jac.tr_mul(&r);
        gradient_norm = grad.amax();
        if gradient_norm <= options.gradient_tolerance * chi2.max(1.0) {
            converged = true;
            break;
        }
        let jtj = jac.tr_mul(&jac);
        let diag: Vec<f64> = (0..nf).map(|k| jtj[(k, k)].max(1e-30)).collect();
        if lambda < 0.0 {
            lambda = 1e-3;
        }

        let mut accepted = false;
        while !accepted {
            let mut a = jtj.clone();
            for k in 0..nf {
                a[(k, k)] += lambda * diag[k];
            }
            let Some(chol) = a.cholesky() else {
                lambda *= nu;
                nu *= 2.0;
                if lambda > 1e20 {
                    break;
                }
                continue;
            };
            let delta = chol.solve(&(-&grad));
            let trial: Vec<f64> = u.iter().zip(delta.iter()).map(|(a, b)| a + b).collect();
            let (r_new, chi2_new) = mapped.eval(&trial);
            if chi2_new.is_finite() && chi2_new < chi2 {
                // gain ratio against the linearised model
                let predicted: f64 = delta
                    .iter()
                    .enumerate()
                    .map(|(k, d)| d * (lambda * diag[k] * d - grad[k]))
                    .sum();
                let rho = (chi2 - chi2_new) / predicted.max(f64::MIN_POSITIVE);
                let decrease = (chi2 - chi2_new) / chi2;
                let step_small = delta.amax()
                    <= 1e-14 * (u.iter().fold(0.0_f64, |acc, x| acc.max(x.abs())) + 1e-14);
                u = trial;
                r = r_new;
                chi2 = chi2_new;
                lambda *= (1.0 - (2.0 * rho - 1.0).powi(3)).max(1.0 / 3.0);
                nu = 2.0;
                accepted = true;
                if decrease <= options.cost_tolerance || step_small || chi2 == 0.0 {
                    converged = true;
                }
            } else {
                lambda *= nu;
                nu *= 2.0;
                if lambda > 1e20 {
                    break;
                }
            }
        }
        if !accepted {
            // No downhill step exists at any damping: a (numerically) stationary point.
            converged = true;
        }
    }

    let params = mapped.external(&u);
    let ext_jac = mapped.external_jacobian(&params);
    let (free_cov, rank_deficient) = covariance_from_jacobian(&ext_jac);
    let dof = m as f64 - nf as f64;
    let reduced = if dof > 0.0 { chi2 / dof } else { f64::NAN };
    let scale = match options.covariance_scale {
        CovarianceScale::Absolute => 1.0,
        CovarianceScale::ReducedChiSquare => {
            if reduced.is_finite() {
                reduced
            } else {
                1.0
            }
        }
    };
    let mut covariance = DMatrix::zeros(n, n);
    for (a, &i) in mapped.free.iter().enumerate() {
        for (b, &j) in mapped.free.iter().enumerate() {
            covariance[(i, j)] = free_cov[(a, b)] * scale;
        }
    }
    if gradient_norm == 0.0 && nf > 0 {
        let jac = mapped.internal_jacobian(&u);
        gradient_norm = jac.tr_mul(&r).amax();
    }

    Ok(FitOutcome {
        params,
        covariance,
        chi_square: chi2,
        reduced_chi_square: reduced,
        converged,
        rank_deficient,
        iterations,
        gradient_norm,
        n_residuals: m,
        n_free: nf,
    })
}

/// `(JᵀJ)⁻¹` via a column-equilibrated eigen-decomposition. Returns the
/// covariance and whether any direction was numerically unconstrained.
pub fn covariance_from_jacobian(jac: &DMatrix<f64>) -> (DMatrix<f64>, bool) {
    let n = jac.ncols();
    if n == 0 {
        return (DMatrix::zeros(0, 0), false);
    }
    let jtj = jac.tr_mul(jac);
    let scale: Vec<f64> = (0..n)
        .map(|k| {
            let d = jtj[(k, k)];
            if d > 0.0 && d.is_finite() {
                1.0 / d.sqrt()
            } else {
                0.0
            }
        })
        .collect();
    let mut scaled = jtj.clone();
    for i in 0..n {
        for j in 0..n {
            scaled[(i, j)] *= scale[i] * scale[j];
        }
    }
    let eig = SymmetricEigen::new(scaled);
    let max_ev = eig.eigenvalues.iter().cloned().fold(0.0_f64, f64::max);
    let cutoff = max_ev * 1e-13;
    let mut cov = DMatrix::zeros(n, n);
    let mut unconstrained: Vec<bool> = scale.iter().map(|s| *s == 0.0).collect();
    let mut rank_deficient = scale.iter().any(|s| *s == 0.0);
    for (idx, &ev) in eig.eigenvalues.iter().enumerate() {
        let v = eig.eigenvectors.column(idx);
        if ev > cutoff {
            for i in 0..n {
                for j in 0..n {
                    cov[(i, j)] += v[i] * v[j] / ev;
                }
            }
        } else {
            rank_deficient = true;
            for i in 0..n {
                if v[i].abs() > 1e-3 {
                    unconstrained[i] = true;
                }
            }
        }
    }
    for i in 0..n {
        for j in 0..n {
            cov[(i, j)] *= scale[i] * scale[j];
        }
    }
    for i in 0..n {
        if unconstrained[i] {
            cov[(i, i)] = f64::INFINITY;
        }
    }
    (cov, rank_deficient)
}

#[cfg(test)]
mod tests {
    use super::*;

    struct Line {
        x: Vec<f64>,
        y: Vec<f64>,
    }

    impl ResidualModel for Line {
        fn n_residuals(&self) -> usize {
            self.x.len()
        }
        fn residuals(&self, p: &[f64], out: &mut [f64]) {
            for i in 0..self.x.len() {
                out[i] = p[0] * self.x[i] + p[1] - self.y[i];
            }
        }
    }

    #[test]
    fn exact_line_recovered() {
        let x: Vec<f64> = (0..10).map(|i| i as f64).collect();
        let y: Vec<f64> = x.iter().map(|x| 2.5 * x - 1.0).collect();
        let model = Line { x, y };
        let out = nlls_fit(&FitProblem::new(&model, vec![0.0, 0.0]), &FitOptions::default()).unwrap();
        assert!(out.converged);
        assert!((out.params[0] - 2.5).abs() < 1e-10);
        assert!((out.params[1] + 1.0).abs() < 1e-10);
        assert!(out.chi_square < 1e-18);
    }

    #[test]
    fn quadratic_bowl_minimum() {
        let model = (3usize, |p: &[f64], out: &mut [f64]| {
            out[0] = p[0] - 1.5;
            out[1] = 2.0 * (p[1] + 0.25);
            out[2] = 0.1;
        });
        let out = nlls_fit(&FitProblem::new(&model, vec![10.0, -7.0]), &FitOptions::default()).unwrap();
        assert!((out.params[0] - 1.5).abs() < 1e-8);
        assert!((out.params[1] + 0.25).abs() < 1e-8);
        assert!((out.chi_square - 0.01).abs() < 1e-12);
    }

    #[test]
    fn bounded_minimum_sits_on_bound() {
        let model = (1usize, |p: &[f64], out: &mut [f64]| out[0] = p[0] - 5.0);
        let problem = FitProblem::new(&model, vec![1.0]).with_bounds(vec![0.0], vec![2.0]);
        let out = nlls_fit(&problem, &FitOptions::default()).unwrap();
        assert!((out.params[0] - 2.0).abs() < 1e-6);
    }

    #[test]
    fn fixed_parameter_is_held() {
        let x: Vec<f64> = (0..6).map(|i| i as f64).collect();
        let y: Vec<f64> = x.iter().map(|x| 3.0 * x + 2.0).collect();
        let model = Line { x, y };
        let problem = FitProblem::new(&model, vec![0.0, 1.0]).with_fixed(vec![false, true]);
        let out = nlls_fit(&problem, &FitOptions::default()).unwrap();
        assert_eq!(out.params[1], 1.0);
        assert_eq!(out.covariance[(1, 1)], 0.0);
    }

    #[test]
    fn rejects_malformed_problems() {
        let model = (1usize, |p: &[f64], out: &mut [f64]| out[0] = p[0] + p[1]);
        let problem = FitProblem::new(&model, vec![0.0, 0.0]);
        assert!(nlls_fit(&problem, &FitOptions::default()).is_err());

        let model = (2usize, |p: &[f64], out: &mut [f64]| {
            out[0] = p[0];
            out[1] = p[0];
        });
        let problem = FitProblem::new(&model, vec![3.0]).with_bounds(vec![0.0], vec![1.0]);
        assert!(nlls_fit(&problem, &FitOptions::default()).is_err());
        let problem = FitProblem::new(&model, vec![0.5]).with_weights(vec![1.0, 0.0]);
        assert!(nlls_fit(&problem, &FitOptions::default()).is_err());
    }

    #[test]
    fn unconstrained_direction_flagged() {
        let model = (3usize, |p: &[f64], out: &mut [f64]| {
            for (i, o) in out.iter_mut().enumerate() {
                *o = (p[0] + p[1]) - i as f64;
            }
        });
        let out = nlls_fit(&FitProblem::new(&model, vec![0.0, 0.0]), &FitOptions::default()).unwrap();
        assert!(out.rank_deficient);
        assert!(out.covariance[(0, 0)].is_infinite());
    }

    #[test]
    fn covariance_matches_linear_theory() {
        // y = a x + b with unit sigma: Var(a) = n / (n Sxx' ) closed form
        let x: Vec<f64> = vec![0.0, 1.0, 2.0, 3.0];
        let y = vec![0.1, 0.9, 2.2, 2.8];
        let model = Line { x: x.clone(), y };
        let out = nlls_fit(&FitProblem::new(&model, vec![1.0, 0.0]), &FitOptions::default()).unwrap();
        let n = x.len() as f64;
        let sx: f64 = x.iter().sum();
        let sxx: f64 = x.iter().map(|v| v * v).sum();
        let det = n * sxx - sx * sx;
        assert!((out.covariance[(0, 0)] - n / det).abs() < 1e-9);
        assert!((out.covariance[(1, 1)] - sxx / det).abs() < 1e-9);
        assert!((out.covariance[(0, 1)] + sx / det).abs() < 1e-9);
    }
}
