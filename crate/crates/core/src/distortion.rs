//! Gain-offset observation model.
//!
//! Each sensor reports `y = a (f(x) + ε) + b`. Its parameters `(a, b)` are
//! either exactly the undistorted atom `(1, 0)` or drawn from one of `K`
//! continuous components, each a bivariate normal law on `(ln a, b)`.
//!
//! [`PosteriorContext`] holds the factorization of `Υ = C + ς² M⁻¹`, which
//! does not depend on the readings, and evaluates the collapsed
//! likelihood and the conditional predictive for any distortion vector.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::gp::{build_covariance, cross_covariance, GpModel, JitteredCholesky, Location};

/// Gains below this are treated as outside the support.
pub const MIN_GAIN: f64 = 1e-8;

const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// Distortion of a single sensor.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Distortion {
    gain: f64,
    offset: f64,
    is_default: bool,
}

impl Distortion {
    /// The undistorted atom `(1, 0)`.
    pub const DEFAULT: Distortion = Distortion {
        gain: 1.0,
        offset: 0.0,
        is_default: true,
    };

    /// A distortion with the given gain and offset. `(1, 0)` maps to the atom.
    pub fn new(gain: f64, offset: f64) -> Result<Self> {
        if !(gain.is_finite() && gain > 0.0) || !offset.is_finite() {
            return Err(Error::invalid(format!(
                "distortion needs a positive finite gain and finite offset, got ({gain}, {offset})"
            )));
        }
        Ok(Self::from_log(gain.ln(), offset).with_gain(gain))
    }

    /// Builds a distortion from `(ln a, b)` coordinates.
    pub fn from_log(log_gain: f64, offset: f64) -> Self {
        let gain = log_gain.exp();
        Distortion {
            gain,
            offset,
            is_default: gain == 1.0 && offset == 0.0,
        }
    }

    fn with_gain(mut self, gain: f64) -> Self {
        self.gain = gain;
        self.is_default = gain == 1.0 && self.offset == 0.0;
        self
    }

    pub fn is_default(&self) -> bool {
        self.is_default
    }

    pub fn gain(&self) -> f64 {
        self.gain
    }

    pub fn offset(&self) -> f64 {
        self.offset
    }

    pub fn log_gain(&self) -> f64 {
        self.gain.ln()
    }

    /// `(ln a, b)`.
    pub fn log_coords(&self) -> [f64; 2] {
        [self.gain.ln(), self.offset]
    }

    /// Applies the distortion to a noisy reading.
    #[inline]
    pub fn apply(&self, u: f64) -> f64 {
        if self.is_default {
            u
        } else {
            self.gain * u + self.offset
        }
    }
}

/// Distortions of all sensors.
#[derive(Debug, Clone, PartialEq)]
pub struct DistortionParams {
    pub sensors: Vec<Distortion>,
}

impl DistortionParams {
    pub fn new(sensors: Vec<Distortion>) -> Self {
        DistortionParams { sensors }
    }

    pub fn all_default(n: usize) -> Self {
        DistortionParams {
            sensors: vec![Distortion::DEFAULT; n],
        }
    }

    pub fn len(&self) -> usize {
        self.sensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sensors.is_empty()
    }

    /// `true` for sensors that are off the atom.
    pub fn distorting_flags(&self) -> Vec<bool> {
        self.sensors.iter().map(|d| !d.is_default()).collect()
    }
}

/// Bivariate normal law on `(ln a, b)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ComponentLaw {
    pub mean: [f64; 2],
    pub cov: [[f64; 2]; 2],
}

impl ComponentLaw {
    pub fn new(mean: [f64; 2], cov: [[f64; 2]; 2]) -> Result<Self> {
        let law = ComponentLaw { mean, cov };
        law.validate()?;
        Ok(law)
    }

    /// Independent log-normal gain `ln a ~ N(m_a, s_a²)` and normal offset
    /// `b ~ N(m_b, s_b²)`.
    pub fn independent(log_gain_mean: f64, log_gain_sd: f64, offset_mean: f64, offset_sd: f64) -> Result<Self> {
        Self::new(
            [log_gain_mean, offset_mean],
            [[log_gain_sd * log_gain_sd, 0.0], [0.0, offset_sd * offset_sd]],
        )
    }

    pub fn validate(&self) -> Result<()> {
        let c = &self.cov;
        let ok = self.mean.iter().all(|v| v.is_finite())
            && c.iter().flatten().all(|v| v.is_finite())
            && c[0][1] == c[1][0]
            && c[0][0] > 0.0
            && det2(c) > 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::invalid(format!(
                "component covariance must be symmetric positive definite: {:?}",
                self.cov
            )))
        }
    }

    /// Log-density at `(ln a, b)`.
    pub fn log_density(&self, x: [f64; 2]) -> f64 {
        gaussian2_log_density(x, self.mean, &self.cov)
    }

    /// Gradient of the log-density with respect to `(ln a, b)`.
    pub fn log_density_gradient(&self, x: [f64; 2]) -> [f64; 2] {
        let inv = inv2(&self.cov);
        let d = [x[0] - self.mean[0], x[1] - self.mean[1]];
        [
            -(inv[0][0] * d[0] + inv[0][1] * d[1]),
            -(inv[1][0] * d[0] + inv[1][1] * d[1]),
        ]
    }

    /// Draws `(ln a, b)`.
    pub fn sample_log<R: Rng + ?Sized>(&self, rng: &mut R) -> [f64; 2] {
        let z0: f64 = rng.sample(StandardNormal);
        let z1: f64 = rng.sample(StandardNormal);
        let l00 = self.cov[0][0].sqrt();
        let l10 = self.cov[1][0] / l00;
        let l11 = (self.cov[1][1] - l10 * l10).max(0.0).sqrt();
        [self.mean[0] + l00 * z0, self.mean[1] + l10 * z0 + l11 * z1]
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Distortion {
        let [u, b] = self.sample_log(rng);
        Distortion::from_log(u, b)
    }

    /// `E[a]` for `ln a ~ N(ν₀, Ξ₀₀)`.
    pub fn mean_gain(&self) -> f64 {
        (self.mean[0] + 0.5 * self.cov[0][0]).exp()
    }

    pub fn mean_gain_sq(&self) -> f64 {
        (2.0 * self.mean[0] + 2.0 * self.cov[0][0]).exp()
    }

    pub fn mean_offset(&self) -> f64 {
        self.mean[1]
    }

    pub fn mean_offset_sq(&self) -> f64 {
        self.cov[1][1] + self.mean[1] * self.mean[1]
    }

    /// `E[a b] = E[a] (ν₁ + Ξ₀₁)`.
    pub fn mean_gain_offset(&self) -> f64 {
        self.mean_gain() * (self.mean[1] + self.cov[0][1])
    }
}

pub(crate) fn det2(c: &[[f64; 2]; 2]) -> f64 {
    c[0][0] * c[1][1] - c[0][1] * c[1][0]
}

pub(crate) fn inv2(c: &[[f64; 2]; 2]) -> [[f64; 2]; 2] {
    let det = det2(c);
    [[c[1][1] / det, -c[0][1] / det], [-c[1][0] / det, c[0][0] / det]]
}

pub(crate) fn gaussian2_log_density(x: [f64; 2], mean: [f64; 2], cov: &[[f64; 2]; 2]) -> f64 {
    let det = det2(cov);
    let inv = inv2(cov);
    let d = [x[0] - mean[0], x[1] - mean[1]];
    let q = d[0] * (inv[0][0] * d[0] + inv[0][1] * d[1]) + d[1] * (inv[1][0] * d[0] + inv[1][1] * d[1]);
    -LN_2PI - 0.5 * det.ln() - 0.5 * q
}

/// Numerically stable `ln Σ exp(xᵢ)`.
pub(crate) fn log_sum_exp(xs: &[f64]) -> f64 {
    let m = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + xs.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// Prior on distortions: per-sensor category weights `q⁽ⁿ⁾₀..q⁽ⁿ⁾_K`
/// (index 0 is the atom) and shared continuous components.
#[derive(Debug, Clone, PartialEq)]
pub struct MixturePrior {
    pub weights: Vec<Vec<f64>>,
    pub components: Vec<ComponentLaw>,
}

impl MixturePrior {
    pub fn new(weights: Vec<Vec<f64>>, components: Vec<ComponentLaw>) -> Result<Self> {
        let prior = MixturePrior {
            weights,
            components,
        };
        prior.validate()?;
        Ok(prior)
    }

    /// Same category weights for all `n` sensors.
    pub fn homogeneous(n: usize, weights: Vec<f64>, components: Vec<ComponentLaw>) -> Result<Self> {
        Self::new(vec![weights; n], components)
    }

    pub fn validate(&self) -> Result<()> {
        let k = self.components.len();
        for c in &self.components {
            c.validate()?;
        }
        for (n, w) in self.weights.iter().enumerate() {
            if w.len() != k + 1 {
                return Err(Error::invalid(format!(
                    "sensor {n}: expected {} weights, got {}",
                    k + 1,
                    w.len()
                )));
            }
            if w.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
                return Err(Error::invalid(format!("sensor {n}: negative weight")));
            }
            let total: f64 = w.iter().sum();
            if (total - 1.0).abs() > 1e-9 {
                return Err(Error::invalid(format!(
                    "sensor {n}: weights sum to {total}, not 1"
                )));
            }
        }
        Ok(())
    }

    pub fn num_sensors(&self) -> usize {
        self.weights.len()
    }

    pub fn num_components(&self) -> usize {
        self.components.len()
    }

    /// Restricts the prior to the given sensors (in that order).
    pub fn subset(&self, indices: &[usize]) -> MixturePrior {
        MixturePrior {
            weights: indices.iter().map(|&i| self.weights[i].clone()).collect(),
            components: self.components.clone(),
        }
    }

    /// Log prior mass (atom) or log density on `(a, b)`-space (continuous
    /// part) for sensor `n`.
    ///
    /// The atom contributes `ln q₀`; an off-atom value contributes
    /// `ln Σₖ qₖ N((ln a, b); νₖ, Ξₖ) − ln a`, the last term being the
    /// Jacobian of `a ↦ ln a`. Mixing a mass with a density is dimensionally
    /// heterogeneous; the MAP search compares the two exactly this way.
    pub fn log_prior_sensor(&self, n: usize, d: &Distortion) -> f64 {
        let w = &self.weights[n];
        if d.is_default() {
            return w[0].ln();
        }
        if !(d.gain >= MIN_GAIN) {
            return f64::NEG_INFINITY;
        }
        self.continuous_log_density(n, d.log_coords())
    }

    /// Continuous part at `(ln a, b)`, including the `−ln a` Jacobian.
    pub fn continuous_log_density(&self, n: usize, x: [f64; 2]) -> f64 {
        let w = &self.weights[n];
        let terms: Vec<f64> = self
            .components
            .iter()
            .zip(&w[1..])
            .map(|(c, &q)| q.ln() + c.log_density(x))
            .collect();
        log_sum_exp(&terms) - x[0]
    }

    /// Gradient of [`Self::continuous_log_density`] with respect to `(ln a, b)`.
    pub fn continuous_log_density_gradient(&self, n: usize, x: [f64; 2]) -> [f64; 2] {
        let w = &self.weights[n];
        let terms: Vec<f64> = self
            .components
            .iter()
            .zip(&w[1..])
            .map(|(c, &q)| q.ln() + c.log_density(x))
            .collect();
        let lse = log_sum_exp(&terms);
        let mut g = [-1.0, 0.0];
        if lse == f64::NEG_INFINITY {
            return g;
        }
        for (c, t) in self.components.iter().zip(&terms) {
            let r = (t - lse).exp();
            if r > 0.0 {
                let gc = c.log_density_gradient(x);
                g[0] += r * gc[0];
                g[1] += r * gc[1];
            }
        }
        g
    }

    /// Draws a distortion for sensor `n`: category first, then the component.
    pub fn sample_sensor<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Distortion {
        let w = &self.weights[n];
        let u: f64 = rng.gen();
        let mut acc = 0.0;
        for (k, &q) in w.iter().enumerate() {
            acc += q;
            if u < acc {
                return if k == 0 {
                    Distortion::DEFAULT
                } else {
                    self.components[k - 1].sample(rng)
                };
            }
        }
        // rounding left u beyond the cumulative sum; take the last positive category
        match w.iter().rposition(|&q| q > 0.0) {
            Some(0) | None => Distortion::DEFAULT,
            Some(k) => self.components[k - 1].sample(rng),
        }
    }
}

/// Log prior of a full distortion vector (sum over sensors).
pub fn log_prior(psi: &DistortionParams, prior: &MixturePrior) -> Result<f64> {
    if psi.len() != prior.num_sensors() {
        return Err(Error::invalid("distortion/prior sensor count mismatch"));
    }
    if let Some(d) = psi.sensors.iter().find(|d| !(d.gain > 0.0)) {
        return Err(Error::invalid(format!("non-positive gain {}", d.gain)));
    }
    Ok(psi
        .sensors
        .iter()
        .enumerate()
        .map(|(n, d)| prior.log_prior_sensor(n, d))
        .sum())
}

/// Draws a full distortion vector from the prior.
pub fn sample_prior<R: Rng + ?Sized>(prior: &MixturePrior, rng: &mut R) -> DistortionParams {
    DistortionParams::new(
        (0..prior.num_sensors())
            .map(|n| prior.sample_sensor(n, rng))
            .collect(),
    )
}

/// Sufficient statistics of one sensor's observations.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SensorSummary {
    pub location: Location,
    /// Number of observations `M`.
    pub count: usize,
    /// `g = Σ y`.
    pub sum: f64,
    /// `s = Σ y²`.
    pub sum_sq: f64,
}

impl SensorSummary {
    /// Summarizes a sensor's readings. Readings are summed in sorted order so
    /// the statistics do not depend on the order they arrived in.
    pub fn from_observations(location: Location, observations: &[f64]) -> Result<Self> {
        let (count, sum, sum_sq) = summarize(observations)?;
        Ok(SensorSummary {
            location,
            count,
            sum,
            sum_sq,
        })
    }

    pub fn mean(&self) -> f64 {
        self.sum / self.count as f64
    }

    /// Within-sensor sum of squares `s − g²/M`.
    pub fn within_ss(&self) -> f64 {
        self.sum_sq - self.sum * self.sum / self.count as f64
    }
}

/// `(M, Σ y, Σ y²)` of a list of readings.
pub fn summarize(observations: &[f64]) -> Result<(usize, f64, f64)> {
    if observations.is_empty() {
        return Err(Error::invalid("sensor has no observations"));
    }
    if observations.iter().any(|v| !v.is_finite()) {
        return Err(Error::invalid("non-finite observation"));
    }
    let mut sorted = observations.to_vec();
    sorted.sort_by(f64::total_cmp);
    let sum = sorted.iter().sum();
    let sum_sq = sorted.iter().map(|v| v * v).sum();
    Ok((sorted.len(), sum, sum_sq))
}

/// Gaussian predictive `N(mean, variance)` of the field at a target.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PredictiveGaussian {
    pub mean: f64,
    pub variance: f64,
}

/// Cached quantities for evaluating the collapsed posterior of the
/// distortions and the conditional predictive.
#[derive(Debug, Clone)]
pub struct PosteriorContext {
    pub gp: GpModel,
    pub summaries: Vec<SensorSummary>,
    pub locations: Vec<Location>,
    /// Prior mean at the sensors.
    pub mu: DVector<f64>,
    /// Field covariance at the sensors.
    pub cov: DMatrix<f64>,
    /// Factor of `Υ = C + ς² M⁻¹`.
    pub upsilon: JitteredCholesky,
    log_det_upsilon: f64,
    /// Data-independent constant `½(ΣM ln 2π − Σ ln(ς²/M))` folded together
    /// with `½ Σ M ln ς²`.
    constant: f64,
}

impl PosteriorContext {
    pub fn new(summaries: &[SensorSummary], gp: &GpModel) -> Result<Self> {
        gp.validate()?;
        if summaries.is_empty() {
            return Err(Error::invalid("no sensors"));
        }
        if !(gp.noise_var > 0.0) {
            return Err(Error::invalid("observation noise variance must be positive"));
        }
        if summaries.iter().any(|s| s.count == 0) {
            return Err(Error::invalid("sensor with zero observations"));
        }
        let locations: Vec<Location> = summaries.iter().map(|s| s.location).collect();
        let cov = build_covariance(&locations, &gp.kernel);
        let mut ups = cov.clone();
        for (i, s) in summaries.iter().enumerate() {
            ups[(i, i)] += gp.noise_var / s.count as f64;
        }
        let upsilon = JitteredCholesky::new(&ups, gp.kernel.variance)?;
        let log_det_upsilon = upsilon.log_det();
        let total_m: f64 = summaries.iter().map(|s| s.count as f64).sum();
        let ln_s2 = gp.noise_var.ln();
        let constant = total_m * LN_2PI + total_m * ln_s2
            - summaries
                .iter()
                .map(|s| ln_s2 - (s.count as f64).ln())
                .sum::<f64>();
        Ok(PosteriorContext {
            gp: *gp,
            summaries: summaries.to_vec(),
            mu: gp.mean_vector(&locations),
            locations,
            cov,
            upsilon,
            log_det_upsilon,
            constant,
        })
    }

    pub fn len(&self) -> usize {
        self.summaries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.summaries.is_empty()
    }

    /// `Υ` itself (including any jitter that was needed).
    pub fn upsilon_matrix(&self) -> DMatrix<f64> {
        let mut u = self.cov.clone();
        for (i, s) in self.summaries.iter().enumerate() {
            u[(i, i)] += self.gp.noise_var / s.count as f64 + self.upsilon.jitter;
        }
        u
    }

    /// `g̃ₙ = (gₙ/Mₙ − bₙ)/aₙ`.
    pub fn g_tilde(&self, psi: &DistortionParams) -> DVector<f64> {
        DVector::from_iterator(
            self.len(),
            self.summaries
                .iter()
                .zip(&psi.sensors)
                .map(|(s, d)| (s.mean() - d.offset) / d.gain),
        )
    }

    fn check(&self, psi: &DistortionParams) -> bool {
        psi.len() == self.len() && psi.sensors.iter().all(|d| d.gain >= MIN_GAIN && d.gain.is_finite())
    }

    /// Collapsed log-likelihood `ln p(y | ψ)` (field integrated out).
    /// Returns `−∞` for gains below [`MIN_GAIN`].
    pub fn log_likelihood(&self, psi: &DistortionParams) -> f64 {
        if !self.check(psi) {
            return f64::NEG_INFINITY;
        }
        let s2 = self.gp.noise_var;
        let mut per_sensor = 0.0;
        for (s, d) in self.summaries.iter().zip(&psi.sensors) {
            let a2 = d.gain * d.gain;
            per_sensor += s.count as f64 * a2.ln() + s.within_ss() / (s2 * a2);
        }
        let r = self.g_tilde(psi) - &self.mu;
        let quad = self.upsilon.quad_form(&r);
        -0.5 * (self.constant + per_sensor + self.log_det_upsilon + quad)
    }

    /// `ln p(y | ψ) + ln π(ψ)`, the log posterior up to `−ln p(y)`.
    pub fn log_posterior_unnorm(&self, psi: &DistortionParams, prior: &MixturePrior) -> f64 {
        if !self.check(psi) || prior.num_sensors() != self.len() {
            return f64::NEG_INFINITY;
        }
        let lp: f64 = psi
            .sensors
            .iter()
            .enumerate()
            .map(|(n, d)| prior.log_prior_sensor(n, d))
            .sum();
        if lp == f64::NEG_INFINITY {
            return lp;
        }
        self.log_likelihood(psi) + lp
    }

    /// Gradient of [`Self::log_likelihood`] with respect to `(ln aₙ, bₙ)`
    /// for every sensor.
    pub fn log_likelihood_gradient(&self, psi: &DistortionParams) -> Vec<[f64; 2]> {
        let s2 = self.gp.noise_var;
        let gt = self.g_tilde(psi);
        let alpha = self.upsilon.solve(&(&gt - &self.mu));
        self.summaries
            .iter()
            .zip(&psi.sensors)
            .enumerate()
            .map(|(n, (s, d))| {
                let a2 = d.gain * d.gain;
                let du = -(s.count as f64) + s.within_ss() / (s2 * a2) + alpha[n] * gt[n];
                let db = alpha[n] / d.gain;
                [du, db]
            })
            .collect()
    }

    /// Gradient of the log posterior with respect to `(ln aₙ, bₙ)`, using the
    /// continuous prior density for every sensor (atoms included, evaluated
    /// at `(0, 0)`).
    pub fn log_posterior_gradient(&self, psi: &DistortionParams, prior: &MixturePrior) -> Vec<[f64; 2]> {
        let mut g = self.log_likelihood_gradient(psi);
        for (n, d) in psi.sensors.iter().enumerate() {
            let gp = prior.continuous_log_density_gradient(n, d.log_coords());
            g[n][0] += gp[0];
            g[n][1] += gp[1];
        }
        g
    }

    /// `Υ⁻¹ (g̃ − μ)`, the weights of the conditional predictive mean.
    pub fn predictive_weights(&self, psi: &DistortionParams) -> DVector<f64> {
        self.upsilon.solve(&(self.g_tilde(psi) - &self.mu))
    }

    /// Predictive mean at `target` given precomputed [`Self::predictive_weights`].
    pub fn predictive_mean_with(&self, target: &Location, weights: &DVector<f64>) -> f64 {
        let k = &self.gp.kernel;
        self.gp.mean_at(target)
            + self
                .locations
                .iter()
                .zip(weights.iter())
                .map(|(x, w)| k.eval(x, target) * w)
                .sum::<f64>()
    }

    /// Predictive variance at `target`; independent of the data and of ψ.
    pub fn predictive_variance(&self, target: &Location) -> f64 {
        let ks = cross_covariance(&self.locations, target, &self.gp.kernel);
        (self.gp.kernel.variance - self.upsilon.quad_form(&ks)).max(0.0)
    }

    /// Conditional predictive `p(f★ | y, ψ)`.
    pub fn predictive(&self, target: &Location, psi: &DistortionParams) -> PredictiveGaussian {
        let w = self.predictive_weights(psi);
        PredictiveGaussian {
            mean: self.predictive_mean_with(target, &w),
            variance: self.predictive_variance(target),
        }
    }

    /// Predictive means on many targets (parallel when enabled).
    pub fn predict_means(&self, targets: &[Location], psi: &DistortionParams) -> Vec<f64> {
        let w = self.predictive_weights(psi);
        crate::par::map_slice(targets, |t| self.predictive_mean_with(t, &w))
    }

    /// Predictive means and variances on many targets.
    pub fn predict_all(&self, targets: &[Location], psi: &DistortionParams) -> Vec<PredictiveGaussian> {
        let w = self.predictive_weights(psi);
        crate::par::map_slice(targets, |t| PredictiveGaussian {
            mean: self.predictive_mean_with(t, &w),
            variance: self.predictive_variance(t),
        })
    }
}

/// `ln p(y | ψ) + ln π(ψ)` without a cached context.
pub fn log_posterior_unnorm(
    psi: &DistortionParams,
    summaries: &[SensorSummary],
    gp: &GpModel,
    prior: &MixturePrior,
) -> Result<f64> {
    Ok(PosteriorContext::new(summaries, gp)?.log_posterior_unnorm(psi, prior))
}

/// Conditional predictive at `target` without a cached context.
pub fn posterior_predictive(
    target: &Location,
    summaries: &[SensorSummary],
    psi: &DistortionParams,
    gp: &GpModel,
) -> Result<PredictiveGaussian> {
    if psi.len() != summaries.len() {
        return Err(Error::invalid("distortion/summary count mismatch"));
    }
    Ok(PosteriorContext::new(summaries, gp)?.predictive(target, psi))
}
