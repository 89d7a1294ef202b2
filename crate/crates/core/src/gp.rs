//! Gaussian-process primitives built on the Matérn-3/2 kernel, from
//! covariance assembly through marginal-likelihood hyperparameter fitting.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::distortion::SensorSummary;
use crate::error::{Error, Result};

/// A point in the planar domain.
pub type Location = [f64; 2];

const SQRT3: f64 = 1.732_050_807_568_877_2;

pub fn euclidean(x: &Location, y: &Location) -> f64 {
    (x[0] - y[0]).hypot(x[1] - y[1])
}

/// Matérn covariance with smoothness 3/2.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KernelSpec {
    pub variance: f64,
    pub lengthscale: f64,
}

impl KernelSpec {
    pub fn new(variance: f64, lengthscale: f64) -> Result<Self> {
        let spec = KernelSpec {
            variance,
            lengthscale,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.variance.is_finite() && self.variance > 0.0) {
            return Err(Error::invalid(format!(
                "kernel variance must be positive, got {}",
                self.variance
            )));
        }
        if !(self.lengthscale.is_finite() && self.lengthscale > 0.0) {
            return Err(Error::invalid(format!(
                "kernel lengthscale must be positive, got {}",
                self.lengthscale
            )));
        }
        Ok(())
    }

    /// Kernel value at distance `d`.
    #[inline]
    pub fn at_distance(&self, d: f64) -> f64 {
        let r = SQRT3 * d / self.lengthscale;
        self.variance * (1.0 + r) * (-r).exp()
    }

    /// Derivative of the kernel value at distance `d` with respect to
    /// `ln(lengthscale)`.
    #[inline]
    fn dlog_lengthscale(&self, d: f64) -> f64 {
        let r = SQRT3 * d / self.lengthscale;
        self.variance * r * r * (-r).exp()
    }

    #[inline]
    pub fn eval(&self, x: &Location, y: &Location) -> f64 {
        self.at_distance(euclidean(x, y))
    }
}

/// Matérn-3/2 covariance between two locations.
pub fn matern32(x: &Location, y: &Location, spec: &KernelSpec) -> Result<f64> {
    if x.iter().chain(y.iter()).any(|c| !c.is_finite()) {
        return Err(Error::invalid("non-finite coordinate"));
    }
    Ok(spec.eval(x, y))
}

/// Field prior: constant mean, Matérn-3/2 covariance and i.i.d. observation
/// noise variance.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GpModel {
    pub mean: f64,
    pub kernel: KernelSpec,
    pub noise_var: f64,
}

impl GpModel {
    pub fn new(mean: f64, kernel: KernelSpec, noise_var: f64) -> Result<Self> {
        let model = GpModel {
            mean,
            kernel,
            noise_var,
        };
        model.validate()?;
        Ok(model)
    }

    pub fn validate(&self) -> Result<()> {
        self.kernel.validate()?;
        if !self.mean.is_finite() {
            return Err(Error::invalid("mean must be finite"));
        }
        if !(self.noise_var.is_finite() && self.noise_var >= 0.0) {
            return Err(Error::invalid(format!(
                "noise variance must be non-negative, got {}",
                self.noise_var
            )));
        }
        Ok(())
    }

    #[inline]
    pub fn mean_at(&self, _x: &Location) -> f64 {
        self.mean
    }

    pub fn mean_vector(&self, locations: &[Location]) -> DVector<f64> {
        DVector::from_iterator(locations.len(), locations.iter().map(|x| self.mean_at(x)))
    }
}

pub fn build_covariance(locations: &[Location], spec: &KernelSpec) -> DMatrix<f64> {
    let n = locations.len();
    let mut c = DMatrix::zeros(n, n);
    for i in 0..n {
        c[(i, i)] = spec.variance;
        for j in 0..i {
            let v = spec.eval(&locations[i], &locations[j]);
            c[(i, j)] = v;
            c[(j, i)] = v;
        }
    }
    c
}

/// Column of covariances between `locations` and a single target.
pub fn cross_covariance(locations: &[Location], target: &Location, spec: &KernelSpec) -> DVector<f64> {
    DVector::from_iterator(
        locations.len(),
        locations.iter().map(|x| spec.eval(x, target)),
    )
}

/// Cholesky factor of a symmetric matrix, possibly after adding diagonal
/// jitter.
#[derive(Debug, Clone)]
pub struct JitteredCholesky {
    pub factor: Cholesky<f64, Dyn>,
    /// Diagonal jitter that was added (0 when the plain matrix factorized).
    pub jitter: f64,
}

impl JitteredCholesky {
    /// Factorizes `matrix`. If the plain factorization fails, adds
    /// `1e-10 * scale` to the diagonal and escalates by 10x up to
    /// `1e-4 * scale` before giving up.
    pub fn new(matrix: &DMatrix<f64>, scale: f64) -> Result<Self> {
        if matrix.iter().any(|v| !v.is_finite()) {
            return Err(Error::numerical("matrix has non-finite entries"));
        }
        if let Some(factor) = Cholesky::new(matrix.clone()) {
            return Ok(JitteredCholesky { factor, jitter: 0.0 });
        }
        let scale = scale.abs().max(f64::MIN_POSITIVE);
        let mut rel = 1e-10;
        while rel <= 1e-4 * (1.0 + 1e-9) {
            let jitter = rel * scale;
            let mut m = matrix.clone();
            for i in 0..m.nrows() {
                m[(i, i)] += jitter;
            }
            if let Some(factor) = Cholesky::new(m) {
                return Ok(JitteredCholesky { factor, jitter });
            }
            rel *= 10.0;
        }
        Err(Error::numerical(
            "Cholesky factorization failed after maximum jitter",
        ))
    }

    pub fn dim(&self) -> usize {
        self.factor.l_dirty().nrows()
    }

    pub fn solve(&self, b: &DVector<f64>) -> DVector<f64> {
        self.factor.solve(b)
    }

    pub fn solve_matrix(&self, b: &DMatrix<f64>) -> DMatrix<f64> {
        self.factor.solve(b)
    }

    pub fn log_det(&self) -> f64 {
        let l = self.factor.l_dirty();
        2.0 * (0..l.nrows()).map(|i| l[(i, i)].ln()).sum::<f64>()
    }

    pub fn inverse(&self) -> DMatrix<f64> {
        self.factor.inverse()
    }

    /// Quadratic form `vᵀ A⁻¹ v`.
    pub fn quad_form(&self, v: &DVector<f64>) -> f64 {
        let mut w = v.clone();
        self.factor.l_dirty().solve_lower_triangular_mut(&mut w);
        // l_dirty keeps garbage above the diagonal; the lower solve ignores it
        w.norm_squared()
    }

    /// Lower-triangular factor with the upper part zeroed.
    pub fn lower(&self) -> DMatrix<f64> {
        self.factor.l()
    }
}

/// Draws the field at `locations` from N(μ, C). Observation noise is not
/// added.
pub fn gp_sample<R: Rng + ?Sized>(
    locations: &[Location],
    model: &GpModel,
    rng: &mut R,
) -> Result<DVector<f64>> {
    model.validate()?;
    let c = build_covariance(locations, &model.kernel);
    let chol = JitteredCholesky::new(&c, model.kernel.variance)?;
    let z = DVector::from_iterator(
        locations.len(),
        (0..locations.len()).map(|_| rng.sample::<f64, _>(StandardNormal)),
    );
    Ok(model.mean_vector(locations) + chol.lower() * z)
}

// ---------------------------------------------------------------------------
// Hyperparameter fitting

/// Box bounds on the positive hyperparameters.
pub const HYPER_LOWER: f64 = 1e-6;
pub const HYPER_UPPER: f64 = 1e6;

/// Per-location averaged observations used for marginal-likelihood fitting.
#[derive(Debug, Clone)]
pub struct AveragedData {
    pub locations: Vec<Location>,
    pub means: Vec<f64>,
    pub counts: Vec<usize>,
}

impl AveragedData {
    pub fn from_summaries(summaries: &[SensorSummary]) -> Self {
        AveragedData {
            locations: summaries.iter().map(|s| s.location).collect(),
            means: summaries.iter().map(|s| s.mean()).collect(),
            counts: summaries.iter().map(|s| s.count).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.locations.len()
    }

    pub fn is_empty(&self) -> bool {
        self.locations.is_empty()
    }
}

/// Optimizer coordinates: `[mean, ln variance, ln lengthscale, ln noise_var]`.
pub type HyperVector = [f64; 4];

pub fn to_hyper_vector(model: &GpModel) -> HyperVector {
    [
        model.mean,
        model.kernel.variance.ln(),
        model.kernel.lengthscale.ln(),
        model.noise_var.max(HYPER_LOWER).ln(),
    ]
}

pub fn from_hyper_vector(x: &HyperVector) -> GpModel {
    GpModel {
        mean: x[0],
        kernel: KernelSpec {
            variance: x[1].exp(),
            lengthscale: x[2].exp(),
        },
        noise_var: x[3].exp(),
    }
}

/// Log marginal likelihood of the averaged data and its gradient with
/// respect to the optimizer coordinates.
pub fn log_marginal_likelihood(data: &AveragedData, x: &HyperVector) -> Result<(f64, HyperVector)> {
    let model = from_hyper_vector(x);
    let n = data.len();
    let r_mat = build_covariance(&data.locations, &model.kernel);
    let mut k = r_mat.clone();
    let noise: Vec<f64> = data
        .counts
        .iter()
        .map(|&m| model.noise_var / m as f64)
        .collect();
    for i in 0..n {
        k[(i, i)] += noise[i];
    }
    let chol = Cholesky::new(k).ok_or_else(|| Error::numerical("marginal covariance not positive definite"))?;
    let resid = DVector::from_iterator(n, data.means.iter().map(|y| y - model.mean));
    let alpha = chol.solve(&resid);
    let l = chol.l_dirty();
    let log_det = 2.0 * (0..n).map(|i| l[(i, i)].ln()).sum::<f64>();
    let value = -0.5 * resid.dot(&alpha) - 0.5 * log_det - 0.5 * n as f64 * (2.0 * std::f64::consts::PI).ln();

    // dL/dθ = ½ tr((ααᵀ − K⁻¹) dK/dθ)
    let kinv = chol.inverse();
    let mut g_var = 0.0;
    let mut g_len = 0.0;
    let mut g_noise = 0.0;
    for i in 0..n {
        for j in 0..n {
            let w = alpha[i] * alpha[j] - kinv[(i, j)];
            g_var += w * r_mat[(i, j)];
            if i != j {
                let d = euclidean(&data.locations[i], &data.locations[j]);
                g_len += w * model.kernel.dlog_lengthscale(d);
            }
        }
        g_noise += (alpha[i] * alpha[i] - kinv[(i, i)]) * noise[i];
    }
    let g_mean = alpha.sum();
    let grad = [g_mean, 0.5 * g_var, 0.5 * g_len, 0.5 * g_noise];
    if !value.is_finite() || grad.iter().any(|g| !g.is_finite()) {
        return Err(Error::numerical("non-finite marginal likelihood"));
    }
    Ok((value, grad))
}

#[derive(Debug, Clone)]
pub struct FitOptions {
    pub max_iterations: usize,
    /// Stop once the projected gradient norm falls below this value.
    pub gradient_tolerance: f64,
}

impl Default for FitOptions {
    fn default() -> Self {
        FitOptions {
            max_iterations: 200,
            gradient_tolerance: 1e-6,
        }
    }
}

#[derive(Debug, Clone)]
pub struct HyperFit {
    pub model: GpModel,
    pub log_likelihood: f64,
    pub iterations: usize,
    pub converged: bool,
    /// Objective after each accepted step (first entry is the initial point).
    pub trace: Vec<f64>,
}

fn clamp_box(x: &mut HyperVector) {
    let (lo, hi) = (HYPER_LOWER.ln(), HYPER_UPPER.ln());
    for v in x.iter_mut().skip(1) {
        *v = v.clamp(lo, hi);
    }
}

/// Zeroes gradient components that point out of the box at an active bound.
fn project_gradient(x: &HyperVector, g: &HyperVector) -> HyperVector {
    let (lo, hi) = (HYPER_LOWER.ln(), HYPER_UPPER.ln());
    let mut p = *g;
    for i in 1..4 {
        let at_lo = x[i] <= lo + 1e-12 && g[i] < 0.0;
        let at_hi = x[i] >= hi - 1e-12 && g[i] > 0.0;
        if at_lo || at_hi {
            p[i] = 0.0;
        }
    }
    p
}

fn dot4(a: &HyperVector, b: &HyperVector) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Fits mean, signal variance, lengthscale and noise variance by maximizing
/// the log marginal likelihood of per-location averages.
///
/// Runs projected BFGS in log-parameter space with box bounds
/// `[HYPER_LOWER, HYPER_UPPER]` on the three positive parameters.
pub fn fit_hyperparameters(
    data: &AveragedData,
    init: &GpModel,
    options: &FitOptions,
) -> Result<HyperFit> {
    if data.len() < 3 {
        return Err(Error::invalid("hyperparameter fit needs at least 3 locations"));
    }
    if data.means.len() != data.len() || data.counts.len() != data.len() {
        return Err(Error::invalid("mismatched averaged-data lengths"));
    }
    if data.counts.iter().any(|&m| m == 0) {
        return Err(Error::invalid("every location needs at least one observation"));
    }
    init.validate()?;

    let mut x = to_hyper_vector(init);
    clamp_box(&mut x);
    let (mut f, mut g) = log_marginal_likelihood(data, &x).map_err(|e| Error::FitFailure {
        message: format!("initial point: {e}"),
        best: Box::new(from_hyper_vector(&x)),
        log_likelihood: f64::NEG_INFINITY,
    })?;
    let mut trace = vec![f];
    // inverse-Hessian approximation of the negated objective
    let mut h = [[0.0f64; 4]; 4];
    let reset = |h: &mut [[f64; 4]; 4]| {
        for (i, row) in h.iter_mut().enumerate() {
            for (j, v) in row.iter_mut().enumerate() {
                *v = if i == j { 1.0 } else { 0.0 };
            }
        }
    };
    reset(&mut h);
    let mut fresh = true;
    let mut converged = false;
    let mut iterations = 0;

    while iterations < options.max_iterations {
        let pg = project_gradient(&x, &g);
        if dot4(&pg, &pg).sqrt() < options.gradient_tolerance {
            converged = true;
            break;
        }
        iterations += 1;
        let mut d = [0.0; 4];
        for i in 0..4 {
            d[i] = (0..4).map(|j| h[i][j] * pg[j]).sum();
        }
        let d = project_gradient(&x, &d);
        let slope = dot4(&pg, &d);
        let d = if slope <= 0.0 {
            reset(&mut h);
            fresh = true;
            pg
        } else {
            d
        };

        let mut step = 1.0;
        // cap the first trial so that no coordinate moves by more than 5
        let max_move = d.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        if max_move > 5.0 {
            step = 5.0 / max_move;
        }
        let mut accepted = None;
        for _ in 0..60 {
            let mut xn = x;
            for i in 0..4 {
                xn[i] += step * d[i];
            }
            clamp_box(&mut xn);
            let dx: HyperVector = std::array::from_fn(|i| xn[i] - x[i]);
            if dot4(&dx, &dx) == 0.0 {
                break;
            }
            match log_marginal_likelihood(data, &xn) {
                Ok((fnew, gnew)) if fnew >= f + 1e-4 * dot4(&g, &dx) && fnew >= f => {
                    accepted = Some((xn, fnew, gnew));
                    break;
                }
                _ => step *= 0.5,
            }
        }
        let Some((xn, fnew, gnew)) = accepted else {
            if fresh {
                // no ascent possible along the projected gradient
                converged = true;
                break;
            }
            reset(&mut h);
            fresh = true;
            continue;
        };
        fresh = false;

        let s: HyperVector = std::array::from_fn(|i| xn[i] - x[i]);
        // gradient difference of the minimized function −L
        let y: HyperVector = std::array::from_fn(|i| g[i] - gnew[i]);
        let sy = dot4(&s, &y);
        if sy > 1e-12 {
            let hy: HyperVector = std::array::from_fn(|i| (0..4).map(|j| h[i][j] * y[j]).sum());
            let yhy = dot4(&y, &hy);
            let rho = 1.0 / sy;
            for i in 0..4 {
                for j in 0..4 {
                    h[i][j] += rho * rho * (sy + yhy) * s[i] * s[j] - rho * (hy[i] * s[j] + s[i] * hy[j]);
                }
            }
        }
        let improvement = fnew - f;
        x = xn;
        f = fnew;
        g = gnew;
        trace.push(f);
        if improvement.abs() < 1e-12 * (1.0 + f.abs()) {
            converged = true;
            break;
        }
    }

    if !f.is_finite() {
        return Err(Error::FitFailure {
            message: "objective diverged".into(),
            best: Box::new(from_hyper_vector(&x)),
            log_likelihood: f,
        });
    }
    Ok(HyperFit {
        model: from_hyper_vector(&x),
        log_likelihood: f,
        iterations,
        converged,
        trace,
    })
}
