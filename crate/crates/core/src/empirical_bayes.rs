//! Two-stage empirical Bayes: find the MAP distortion vector, then plug it
//! into the conditional predictive.
//!
//! Two MAP searches are provided. The cross-entropy method samples whole
//! distortion vectors from a per-sensor atom-plus-Gaussian mixture and refits
//! the mixture to the elite samples by EM. Iterated conditional modes sweeps
//! over sensors, maximizing each sensor's conditional posterior with the
//! other sensors held fixed.

use nalgebra::DVector;
use rand::Rng;

use crate::distortion::{
    gaussian2_log_density, log_sum_exp, ComponentLaw, Distortion, DistortionParams, MixturePrior,
    PosteriorContext, PredictiveGaussian, SensorSummary, MIN_GAIN,
};
use crate::error::{Error, Result};
use crate::gp::{GpModel, Location};
use crate::par;
use crate::rng;

const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// One row of an optimizer's progress log.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TraceRow {
    pub iteration: usize,
    pub best_objective: f64,
    /// Elite threshold (CEM only).
    pub threshold: Option<f64>,
}

/// Result of a MAP search.
#[derive(Debug, Clone)]
pub struct MapEstimate {
    pub psi: DistortionParams,
    pub objective: f64,
    pub iterations: usize,
    pub restarts: usize,
    pub trace: Vec<TraceRow>,
}

impl MapEstimate {
    /// `true` for sensors estimated to be distorting.
    pub fn distorting_flags(&self) -> Vec<bool> {
        self.psi.distorting_flags()
    }
}

// ---------------------------------------------------------------------------
// Sampling distributions and EM

/// Per-sensor sampling law: weight `r₀` on the atom and `r₁..r_K` on
/// bivariate normals over `(ln a, b)`.
#[derive(Debug, Clone, PartialEq)]
pub struct SensorSampler {
    pub weights: Vec<f64>,
    pub components: Vec<ComponentLaw>,
}

impl SensorSampler {
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Distortion {
        let u: f64 = rng.gen();
        let mut acc = 0.0;
        let last = self.weights.iter().rposition(|&w| w > 0.0).unwrap_or(0);
        for (k, &w) in self.weights.iter().enumerate() {
            acc += w;
            if u < acc || k == last {
                return if k == 0 {
                    Distortion::DEFAULT
                } else {
                    self.components[k - 1].sample(rng)
                };
            }
        }
        Distortion::DEFAULT
    }

    fn component_terms(&self, x: [f64; 2]) -> Vec<f64> {
        self.components
            .iter()
            .zip(&self.weights[1..])
            .map(|(c, &w)| w.ln() + c.log_density(x))
            .collect()
    }

    /// Log-likelihood of samples under the atom-mass / density convention:
    /// `ln r₀` for atom samples, `ln Σₖ rₖ N((ln a, b); ν̃ₖ, Ξ̃ₖ)` otherwise.
    pub fn log_likelihood(&self, samples: &[Distortion]) -> f64 {
        samples
            .iter()
            .map(|d| {
                if d.is_default() {
                    self.weights[0].ln()
                } else {
                    log_sum_exp(&self.component_terms(d.log_coords()))
                }
            })
            .sum()
    }
}

/// Product of per-sensor sampling laws.
#[derive(Debug, Clone, PartialEq)]
pub struct SamplerParams {
    pub sensors: Vec<SensorSampler>,
}

impl SamplerParams {
    /// Sampler that coincides with the prior.
    pub fn from_prior(prior: &MixturePrior) -> Self {
        SamplerParams {
            sensors: prior
                .weights
                .iter()
                .map(|w| SensorSampler {
                    weights: w.clone(),
                    components: prior.components.clone(),
                })
                .collect(),
        }
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> DistortionParams {
        DistortionParams::new(self.sensors.iter().map(|s| s.sample(rng)).collect())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmOptions {
    pub max_iterations: usize,
    /// Stop when the log-likelihood gains less than this (relative).
    pub tolerance: f64,
}

impl Default for EmOptions {
    fn default() -> Self {
        EmOptions {
            max_iterations: 100,
            tolerance: 1e-10,
        }
    }
}

#[derive(Debug, Clone)]
pub struct EmFit {
    pub sampler: SensorSampler,
    /// Sample log-likelihood before the first and after every iteration.
    pub trace: Vec<f64>,
    pub iterations: usize,
}

/// Components whose total responsibility falls below this keep their
/// previous parameters.
const MIN_RESPONSIBILITY: f64 = 1e-8;
const COV_FLOOR: f64 = 1e-8;

/// Clamps the eigenvalues of a symmetric 2×2 matrix at `floor`.
fn floor_cov(c: [[f64; 2]; 2], floor: f64) -> [[f64; 2]; 2] {
    let (a, b, d) = (c[0][0], c[0][1], c[1][1]);
    let tr = 0.5 * (a + d);
    let disc = (0.25 * (a - d) * (a - d) + b * b).sqrt();
    let (l1, l2) = (tr + disc, tr - disc);
    if l2 >= floor {
        return c;
    }
    // eigenvector of l1
    let (vx, vy) = if b.abs() > 1e-300 {
        let (x, y) = (l1 - d, b);
        let n = x.hypot(y);
        (x / n, y / n)
    } else if a >= d {
        (1.0, 0.0)
    } else {
        (0.0, 1.0)
    };
    let (m1, m2) = (l1.max(floor), l2.max(floor));
    // V diag(m1, m2) Vᵀ with second eigenvector (−vy, vx)
    let c00 = m1 * vx * vx + m2 * vy * vy;
    let c01 = (m1 - m2) * vx * vy;
    let c11 = m1 * vy * vy + m2 * vx * vx;
    [[c00, c01], [c01, c11]]
}

/// Fits a per-sensor sampling law to samples by EM, starting from `init`.
///
/// Atom membership is read from each sample's default flag, never from
/// float equality: atom samples have responsibility 1 for category 0, all
/// others responsibility 0.
pub fn em_fit_mixture(samples: &[Distortion], init: &SensorSampler, options: &EmOptions) -> Result<EmFit> {
    if samples.is_empty() {
        return Err(Error::invalid("EM needs at least one sample"));
    }
    if init.weights.len() != init.components.len() + 1 {
        return Err(Error::invalid("sampler weight/component count mismatch"));
    }
    let k = init.components.len();
    let total = samples.len() as f64;
    let atoms = samples.iter().filter(|d| d.is_default()).count() as f64;
    let points: Vec<[f64; 2]> = samples
        .iter()
        .filter(|d| !d.is_default())
        .map(|d| d.log_coords())
        .collect();

    let mut sampler = init.clone();
    let mut trace = vec![sampler.log_likelihood(samples)];
    let mut iterations = 0;
    let mut resp = vec![0.0; points.len() * k];
    while iterations < options.max_iterations {
        iterations += 1;
        // E-step
        for (i, x) in points.iter().enumerate() {
            let terms = sampler.component_terms(*x);
            let lse = log_sum_exp(&terms);
            for j in 0..k {
                resp[i * k + j] = if lse == f64::NEG_INFINITY {
                    1.0 / k as f64
                } else {
                    (terms[j] - lse).exp()
                };
            }
        }
        // M-step
        let mut weights = vec![0.0; k + 1];
        weights[0] = atoms / total;
        let mut components = sampler.components.clone();
        for j in 0..k {
            let nk: f64 = (0..points.len()).map(|i| resp[i * k + j]).sum();
            weights[j + 1] = nk / total;
            if nk < MIN_RESPONSIBILITY {
                continue;
            }
            let mut m = [0.0; 2];
            for (i, x) in points.iter().enumerate() {
                let r = resp[i * k + j];
                m[0] += r * x[0];
                m[1] += r * x[1];
            }
            m[0] /= nk;
            m[1] /= nk;
            let mut c = [[0.0; 2]; 2];
            for (i, x) in points.iter().enumerate() {
                let r = resp[i * k + j];
                let d = [x[0] - m[0], x[1] - m[1]];
                c[0][0] += r * d[0] * d[0];
                c[0][1] += r * d[0] * d[1];
                c[1][1] += r * d[1] * d[1];
            }
            c[0][0] /= nk;
            c[0][1] /= nk;
            c[1][1] /= nk;
            c[1][0] = c[0][1];
            components[j] = ComponentLaw {
                mean: m,
                cov: floor_cov(c, COV_FLOOR),
            };
        }
        sampler = SensorSampler {
            weights,
            components,
        };
        let ll = sampler.log_likelihood(samples);
        let prev = *trace.last().unwrap();
        trace.push(ll);
        if prev.is_finite() && (ll - prev).abs() <= options.tolerance * (1.0 + ll.abs()) {
            break;
        }
        if points.is_empty() {
            break;
        }
    }
    Ok(EmFit {
        sampler,
        trace,
        iterations,
    })
}

// ---------------------------------------------------------------------------
// Cross-entropy method

#[derive(Debug, Clone, PartialEq)]
pub struct CemConfig {
    /// Candidates drawn per iteration.
    pub samples: usize,
    /// Fraction of candidates kept as elites.
    pub elite_fraction: f64,
    pub max_iterations: usize,
    /// Stop after this many iterations without improving the best objective
    /// by more than `stall_tolerance`.
    pub stall_iterations: usize,
    pub stall_tolerance: f64,
    /// Sampler weights of categories with positive prior weight are floored
    /// here after each refit.
    pub weight_floor: f64,
    pub em: EmOptions,
    pub seed: u64,
}

impl Default for CemConfig {
    fn default() -> Self {
        CemConfig {
            samples: 2000,
            elite_fraction: 0.01,
            max_iterations: 50,
            stall_iterations: 5,
            stall_tolerance: 1e-6,
            weight_floor: 1e-6,
            em: EmOptions::default(),
            seed: 0,
        }
    }
}

impl CemConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.elite_fraction > 0.0 && self.elite_fraction < 1.0) {
            return Err(Error::invalid("elite fraction must lie in (0, 1)"));
        }
        if (self.samples as f64) * self.elite_fraction < 1.0 - 1e-12 {
            return Err(Error::invalid("sample count too small for a non-empty elite set"));
        }
        if self.max_iterations == 0 {
            return Err(Error::invalid("max iterations must be positive"));
        }
        Ok(())
    }
}

/// 1-based rank of the elite threshold: the `⌈(1−ρ)S⌉`-th smallest score.
pub fn elite_rank(samples: usize, elite_fraction: f64) -> usize {
    let r = ((1.0 - elite_fraction) * samples as f64 - 1e-9).ceil() as usize;
    r.clamp(1, samples)
}

/// The `(1−ρ)` sample quantile of `scores` under the `⌈(1−ρ)S⌉`-th order
/// statistic convention. NaN scores sort as `−∞`.
pub fn elite_threshold(scores: &[f64], elite_fraction: f64) -> f64 {
    let mut sorted: Vec<f64> = scores
        .iter()
        .map(|&s| if s.is_nan() { f64::NEG_INFINITY } else { s })
        .collect();
    sorted.sort_by(f64::total_cmp);
    sorted[elite_rank(sorted.len(), elite_fraction) - 1]
}

/// Maximizes `objective` over distortion vectors with the cross-entropy
/// method. The first sampler coincides with the prior; the returned
/// estimate is the best candidate ever scored.
pub fn cem_optimize<F>(objective: F, prior: &MixturePrior, config: &CemConfig) -> Result<MapEstimate>
where
    F: Fn(&DistortionParams) -> f64 + Sync + Send,
{
    config.validate()?;
    prior.validate()?;
    let n = prior.num_sensors();
    let mut sampler = SamplerParams::from_prior(prior);
    let mut best: Option<(DistortionParams, f64)> = None;
    let mut trace = Vec::new();
    let mut stall = 0;
    let mut iterations = 0;

    for t in 0..config.max_iterations {
        iterations = t + 1;
        let iter_seed = rng::derive_seed(config.seed, t as u64);
        let scored: Vec<(DistortionParams, f64)> = par::map_range(config.samples, |s| {
            let mut r = rng::stream(iter_seed, s as u64);
            let psi = sampler.sample(&mut r);
            let j = objective(&psi);
            (psi, if j.is_nan() { f64::NEG_INFINITY } else { j })
        });
        let scores: Vec<f64> = scored.iter().map(|(_, j)| *j).collect();
        let gamma = elite_threshold(&scores, config.elite_fraction);

        let (arg, &top) = scores
            .iter()
            .enumerate()
            .fold((0, &f64::NEG_INFINITY), |acc, (i, s)| if *s > *acc.1 { (i, s) } else { acc });
        let previous = best.as_ref().map_or(f64::NEG_INFINITY, |b| b.1);
        if top > previous {
            best = Some((scored[arg].0.clone(), top));
        }
        let current = best.as_ref().map_or(f64::NEG_INFINITY, |b| b.1);
        if current == f64::NEG_INFINITY {
            return Err(Error::Optimization(
                "every CEM candidate has zero posterior density".into(),
            ));
        }
        trace.push(TraceRow {
            iteration: t + 1,
            best_objective: current,
            threshold: Some(gamma),
        });
        if current > previous + config.stall_tolerance || previous == f64::NEG_INFINITY {
            stall = 0;
        } else {
            stall += 1;
            if stall >= config.stall_iterations {
                break;
            }
        }

        let elites: Vec<&DistortionParams> = scored
            .iter()
            .filter(|(_, j)| *j >= gamma && j.is_finite())
            .map(|(p, _)| p)
            .collect();
        if elites.is_empty() {
            continue;
        }
        let refit: Vec<Result<SensorSampler>> = par::map_range(n, |i| {
            let column: Vec<Distortion> = elites.iter().map(|p| p.sensors[i]).collect();
            let fit = em_fit_mixture(&column, &sampler.sensors[i], &config.em)?;
            let mut s = fit.sampler;
            let mut total = 0.0;
            for (w, &q) in s.weights.iter_mut().zip(&prior.weights[i]) {
                if q > 0.0 {
                    *w = w.max(config.weight_floor);
                } else {
                    *w = 0.0;
                }
                total += *w;
            }
            s.weights.iter_mut().for_each(|w| *w /= total);
            Ok(s)
        });
        sampler = SamplerParams {
            sensors: refit.into_iter().collect::<Result<_>>()?,
        };
    }

    let (psi, objective) = best.expect("best is set after the first iteration");
    Ok(MapEstimate {
        psi,
        objective,
        iterations,
        restarts: 1,
        trace,
    })
}

// ---------------------------------------------------------------------------
// Iterated conditional modes

/// Leave-one-out regression of each sensor on the others, computed once from
/// `Υ⁻¹`. Neither quantity depends on the distortions.
#[derive(Debug, Clone)]
pub struct ConditionalStats {
    /// Row `n` holds `Υ₍₋ₙ₎⁻¹ Υ₍₋ₙ,ₙ₎` scattered into an `N`-vector (entry `n` is 0).
    regression: Vec<DVector<f64>>,
    /// Variance of `f(xₙ)` given the other sensors' data.
    zeta: Vec<f64>,
}

impl ConditionalStats {
    pub fn new(ctx: &PosteriorContext) -> Self {
        let n = ctx.len();
        if n == 1 {
            return ConditionalStats {
                regression: vec![DVector::zeros(1)],
                zeta: vec![ctx.cov[(0, 0)]],
            };
        }
        // block inversion: Υ₍₋ₙ₎⁻¹Υ₍₋ₙ,ₙ₎ = −P₍₋ₙ,ₙ₎ / Pₙₙ and
        // Υₙₙ − Υ₍₋ₙ,ₙ₎ᵀΥ₍₋ₙ₎⁻¹Υ₍₋ₙ,ₙ₎ = 1 / Pₙₙ with P = Υ⁻¹
        let p = ctx.upsilon.inverse();
        let mut regression = Vec::with_capacity(n);
        let mut zeta = Vec::with_capacity(n);
        for i in 0..n {
            let pnn = p[(i, i)];
            let mut h = DVector::from_iterator(n, (0..n).map(|j| -p[(j, i)] / pnn));
            h[i] = 0.0;
            regression.push(h);
            let own_noise = ctx.gp.noise_var / ctx.summaries[i].count as f64 + ctx.upsilon.jitter;
            zeta.push((1.0 / pnn - own_noise).max(f64::MIN_POSITIVE));
        }
        ConditionalStats { regression, zeta }
    }

    /// `(νₙ, ζₙ)`: mean and variance of `f(xₙ)` given the other sensors'
    /// data and distortions. Only `ψ₍₋ₙ₎` is read.
    pub fn get(&self, ctx: &PosteriorContext, n: usize, psi: &DistortionParams) -> (f64, f64) {
        let h = &self.regression[n];
        let mut nu = ctx.mu[n];
        for (i, (s, d)) in ctx.summaries.iter().zip(&psi.sensors).enumerate() {
            if i != n {
                let gt = (s.mean() - d.offset()) / d.gain();
                nu += h[i] * (gt - ctx.mu[i]);
            }
        }
        (nu, self.zeta[n])
    }
}

/// `(νₙ, ζₙ)` for sensor `n` without a cached context.
pub fn icm_conditional_stats(
    n: usize,
    summaries: &[SensorSummary],
    gp: &GpModel,
    psi: &DistortionParams,
) -> Result<(f64, f64)> {
    if n >= summaries.len() || psi.len() != summaries.len() {
        return Err(Error::invalid("sensor index or distortion count out of range"));
    }
    let ctx = PosteriorContext::new(summaries, gp)?;
    Ok(ConditionalStats::new(&ctx).get(&ctx, n, psi))
}

/// `ln p(yₙ | y₍₋ₙ₎, ψ)` at `(ln aₙ, bₙ) = x`, and its gradient.
pub fn conditional_loglik_log(
    x: [f64; 2],
    nu: f64,
    zeta: f64,
    summary: &SensorSummary,
    noise_var: f64,
) -> (f64, [f64; 2]) {
    let a = x[0].exp();
    if !(a >= MIN_GAIN) || !a.is_finite() {
        return (f64::NEG_INFINITY, [0.0, 0.0]);
    }
    let m = summary.count as f64;
    let a2 = a * a;
    let w = summary.within_ss();
    let gt = (summary.mean() - x[1]) / a;
    let v = zeta + noise_var / m;
    let r = gt - nu;
    let value = -0.5
        * (m * LN_2PI
            + (m - 1.0) * (noise_var * a2).ln()
            + (a2 * (m * zeta + noise_var)).ln()
            + w / (noise_var * a2)
            + r * r / v);
    let du = -m + w / (noise_var * a2) + r * gt / v;
    let db = r / (a * v);
    (value, [du, db])
}

/// `ln p(yₙ | y₍₋ₙ₎, ψ)` for a given sensor distortion; `−∞` off the support.
pub fn icm_conditional_loglik(
    d: &Distortion,
    nu: f64,
    zeta: f64,
    summary: &SensorSummary,
    noise_var: f64,
) -> f64 {
    if !(d.gain() > 0.0) {
        return f64::NEG_INFINITY;
    }
    conditional_loglik_log(d.log_coords(), nu, zeta, summary, noise_var).0
}

#[derive(Debug, Clone, PartialEq)]
pub struct IcmConfig {
    pub restarts: usize,
    pub max_sweeps: usize,
    pub cg_max_iterations: usize,
    pub seed: u64,
}

impl Default for IcmConfig {
    fn default() -> Self {
        IcmConfig {
            restarts: 5,
            max_sweeps: 100,
            cg_max_iterations: 100,
            seed: 0,
        }
    }
}

/// Polak-Ribière conjugate-gradient ascent in two dimensions with a
/// backtracking/expanding line search.
fn cg_maximize<F>(f: &F, start: [f64; 2], max_iterations: usize) -> ([f64; 2], f64)
where
    F: Fn([f64; 2]) -> (f64, [f64; 2]),
{
    let (mut fx, mut g) = f(start);
    let mut x = start;
    if !fx.is_finite() {
        return (x, fx);
    }
    let mut d = g;
    let mut step = 1.0 / (1.0 + norm2(d));
    for _ in 0..max_iterations {
        let gnorm = norm2(g);
        if gnorm < 1e-10 * (1.0 + fx.abs()) {
            break;
        }
        let mut slope = dot2(g, d);
        if slope <= 0.0 {
            d = g;
            slope = gnorm * gnorm;
        }
        // backtrack until Armijo holds
        let mut t = step;
        let mut accepted = None;
        for _ in 0..80 {
            let xn = [x[0] + t * d[0], x[1] + t * d[1]];
            let (fnew, gnew) = f(xn);
            if fnew.is_finite() && fnew >= fx + 1e-4 * t * slope {
                accepted = Some((xn, fnew, gnew, t));
                break;
            }
            t *= 0.5;
        }
        let Some((mut xn, mut fnew, mut gnew, mut t)) = accepted else {
            break;
        };
        // expand while it keeps improving
        for _ in 0..40 {
            let t2 = 2.0 * t;
            let x2 = [x[0] + t2 * d[0], x[1] + t2 * d[1]];
            let (f2, g2) = f(x2);
            if f2.is_finite() && f2 > fnew {
                xn = x2;
                fnew = f2;
                gnew = g2;
                t = t2;
            } else {
                break;
            }
        }
        let improvement = fnew - fx;
        let beta = (dot2(gnew, [gnew[0] - g[0], gnew[1] - g[1]]) / dot2(g, g)).max(0.0);
        x = xn;
        fx = fnew;
        d = [gnew[0] + beta * d[0], gnew[1] + beta * d[1]];
        g = gnew;
        step = t;
        if improvement <= 1e-14 * (1.0 + fx.abs()) {
            break;
        }
    }
    (x, fx)
}

fn dot2(a: [f64; 2], b: [f64; 2]) -> f64 {
    a[0] * b[0] + a[1] * b[1]
}

fn norm2(a: [f64; 2]) -> f64 {
    dot2(a, a).sqrt()
}

/// Local search for one sensor inside an ICM sweep.
struct SensorUpdate<'a> {
    ctx: &'a PosteriorContext,
    prior: &'a MixturePrior,
    stats: &'a ConditionalStats,
    cg_max_iterations: usize,
}

impl SensorUpdate<'_> {
    /// Conditional log posterior (continuous part) at `(ln a, b)`.
    fn continuous(&self, n: usize, nu: f64, zeta: f64) -> impl Fn([f64; 2]) -> (f64, [f64; 2]) + '_ {
        let summary = self.ctx.summaries[n];
        let noise = self.ctx.gp.noise_var;
        move |x| {
            let (l, gl) = conditional_loglik_log(x, nu, zeta, &summary, noise);
            let p = self.prior.continuous_log_density(n, x);
            if !(l.is_finite() && p.is_finite()) {
                return (f64::NEG_INFINITY, [0.0, 0.0]);
            }
            let gp = self.prior.continuous_log_density_gradient(n, x);
            (l + p, [gl[0] + gp[0], gl[1] + gp[1]])
        }
    }

    /// Best continuous value over several starts, and the atom's value.
    fn search(&self, n: usize, psi: &DistortionParams) -> (Option<([f64; 2], f64)>, f64) {
        let (nu, zeta) = self.stats.get(self.ctx, n, psi);
        let summary = &self.ctx.summaries[n];
        let noise = self.ctx.gp.noise_var;
        let atom = conditional_loglik_log([0.0, 0.0], nu, zeta, summary, noise).0 + self.prior.weights[n][0].ln();

        let has_continuous = self.prior.weights[n][1..].iter().any(|&q| q > 0.0);
        if !has_continuous {
            return (None, atom);
        }
        let f = self.continuous(n, nu, zeta);
        let mut starts: Vec<[f64; 2]> = self
            .prior
            .components
            .iter()
            .zip(&self.prior.weights[n][1..])
            .filter(|(_, &q)| q > 0.0)
            .map(|(c, _)| c.mean)
            .collect();
        let current = psi.sensors[n];
        if !current.is_default() {
            starts.push(current.log_coords());
        }
        if summary.count > 1 {
            // moment match: within-sensor spread fixes the gain, the mean the offset
            let a2 = summary.within_ss() / ((summary.count as f64 - 1.0) * noise);
            if a2 > MIN_GAIN * MIN_GAIN {
                let a = a2.sqrt();
                starts.push([a.ln(), summary.mean() - a * nu]);
            }
        }
        let best = starts
            .into_iter()
            .map(|s| cg_maximize(&f, s, self.cg_max_iterations))
            .filter(|(_, v)| v.is_finite())
            .fold(None::<([f64; 2], f64)>, |acc, (x, v)| match acc {
                Some((_, bv)) if bv >= v => acc,
                _ => Some((x, v)),
            });
        (best, atom)
    }
}

/// One ICM run from a given starting point. Returns the final estimate,
/// its objective and the per-sweep objective trace.
fn icm_run(
    ctx: &PosteriorContext,
    prior: &MixturePrior,
    stats: &ConditionalStats,
    init: DistortionParams,
    config: &IcmConfig,
) -> (DistortionParams, f64, Vec<TraceRow>, usize) {
    let update = SensorUpdate {
        ctx,
        prior,
        stats,
        cg_max_iterations: config.cg_max_iterations,
    };
    let mut psi = init;
    let mut objective = ctx.log_posterior_unnorm(&psi, prior);
    let mut trace = vec![TraceRow {
        iteration: 0,
        best_objective: objective,
        threshold: None,
    }];
    let mut sweeps = 0;
    while sweeps < config.max_sweeps {
        sweeps += 1;
        let mut changed = false;
        for n in 0..ctx.len() {
            let old = psi.sensors[n];
            let (cont, atom) = update.search(n, &psi);
            let new = match cont {
                Some((x, v)) if atom < v => Distortion::from_log(x[0], x[1]),
                _ => Distortion::DEFAULT,
            };
            // keep the current point unless the new one is strictly better
            let keep = if old.is_default() == new.is_default() && !new.is_default() {
                let (nu, zeta) = stats.get(ctx, n, &psi);
                let f = update.continuous(n, nu, zeta);
                f(old.log_coords()).0 >= f(new.log_coords()).0
            } else {
                old == new
            };
            if !keep {
                let moved = old.is_default() != new.is_default()
                    || (old.log_gain() - new.log_gain()).abs() > 1e-9
                    || (old.offset() - new.offset()).abs() > 1e-9;
                changed |= moved;
                psi.sensors[n] = new;
            }
        }
        objective = ctx.log_posterior_unnorm(&psi, prior);
        trace.push(TraceRow {
            iteration: sweeps,
            best_objective: objective,
            threshold: None,
        });
        if !changed {
            break;
        }
    }
    (psi, objective, trace, sweeps)
}

/// MAP search by iterated conditional modes with random restarts drawn from
/// the prior. Sensors are swept in ascending index order.
pub fn icm_optimize(ctx: &PosteriorContext, prior: &MixturePrior, config: &IcmConfig) -> Result<MapEstimate> {
    if config.restarts == 0 {
        return Err(Error::invalid("ICM needs at least one restart"));
    }
    if prior.num_sensors() != ctx.len() {
        return Err(Error::invalid("prior/sensor count mismatch"));
    }
    prior.validate()?;
    let stats = ConditionalStats::new(ctx);
    let runs = par::map_range(config.restarts, |r| {
        let mut rg = rng::stream(config.seed, r as u64);
        let init = crate::distortion::sample_prior(prior, &mut rg);
        icm_run(ctx, prior, &stats, init, config)
    });
    let (best_idx, _) = runs
        .iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |acc, (i, r)| if r.1 > acc.1 { (i, r.1) } else { acc });
    let (psi, objective, trace, sweeps) = runs.into_iter().nth(best_idx).unwrap();
    if objective == f64::NEG_INFINITY {
        return Err(Error::Optimization("ICM found no point with positive posterior density".into()));
    }
    Ok(MapEstimate {
        psi,
        objective,
        iterations: sweeps,
        restarts: config.restarts,
        trace,
    })
}

/// For each sensor, how much the best single-sensor move (atom or local
/// continuous optimum) would improve the objective. All entries are at most
/// a small tolerance at an ICM fixed point.
pub fn icm_improvements(ctx: &PosteriorContext, prior: &MixturePrior, psi: &DistortionParams) -> Vec<f64> {
    let stats = ConditionalStats::new(ctx);
    let update = SensorUpdate {
        ctx,
        prior,
        stats: &stats,
        cg_max_iterations: 200,
    };
    (0..ctx.len())
        .map(|n| {
            let (nu, zeta) = stats.get(ctx, n, psi);
            let f = update.continuous(n, nu, zeta);
            let current = if psi.sensors[n].is_default() {
                conditional_loglik_log([0.0, 0.0], nu, zeta, &ctx.summaries[n], ctx.gp.noise_var).0
                    + prior.weights[n][0].ln()
            } else {
                f(psi.sensors[n].log_coords()).0
            };
            let (cont, atom) = update.search(n, psi);
            let best = cont.map_or(atom, |(_, v)| v.max(atom));
            best - current
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Plug-in prediction

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Loss {
    Quadratic,
    Absolute,
    ZeroOne,
}

/// Empirical Bayes point estimate and predictive variance at `target`. The
/// plug-in predictive is Gaussian and symmetric, so every supported loss
/// gives the predictive mean as its point estimate.
pub fn eb_predict(target: &Location, ctx: &PosteriorContext, psi_hat: &DistortionParams, loss: Loss) -> (f64, f64) {
    let PredictiveGaussian { mean, variance } = ctx.predictive(target, psi_hat);
    let point = match loss {
        Loss::Quadratic | Loss::Absolute | Loss::ZeroOne => mean,
    };
    (point, variance)
}

/// MAP search strategy.
#[derive(Debug, Clone)]
pub enum MapMethod {
    Cem(CemConfig),
    Icm(IcmConfig),
}

/// Runs the chosen MAP search on the collapsed posterior.
pub fn estimate_map(ctx: &PosteriorContext, prior: &MixturePrior, method: &MapMethod) -> Result<MapEstimate> {
    match method {
        MapMethod::Cem(cfg) => cem_optimize(|psi| ctx.log_posterior_unnorm(psi, prior), prior, cfg),
        MapMethod::Icm(cfg) => icm_optimize(ctx, prior, cfg),
    }
}

/// Log-density of the sampler for a full distortion vector; used by tests
/// that compare the initial sampler with the prior.
pub fn sampler_log_density(sampler: &SamplerParams, psi: &DistortionParams) -> f64 {
    sampler
        .sensors
        .iter()
        .zip(&psi.sensors)
        .map(|(s, d)| {
            if d.is_default() {
                s.weights[0].ln()
            } else {
                let x = d.log_coords();
                log_sum_exp(
                    &s.components
                        .iter()
                        .zip(&s.weights[1..])
                        .map(|(c, &w)| w.ln() + gaussian2_log_density(x, c.mean, &c.cov))
                        .collect::<Vec<_>>(),
                )
            }
        })
        .sum()
}
