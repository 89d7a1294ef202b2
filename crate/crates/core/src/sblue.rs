//! Spatial best linear unbiased estimator.
//!
//! The estimator is affine in the per-sensor means `ḡ` and depends on the
//! data only through them. Everything except the final dot product is
//! computed offline from the prior: [`SblueBase`] holds the quantities shared
//! by all targets (prior moments, `E[ḡ]` and the factorization of `Cov[ḡ]`),
//! and [`SblueModel`] the weights for one target.

use nalgebra::{DMatrix, DVector};

use crate::distortion::{MixturePrior, SensorSummary};
use crate::error::{Error, Result};
use crate::gp::{build_covariance, cross_covariance, GpModel, JitteredCholesky, Location};

/// First and second prior moments of gains and offsets.
#[derive(Debug, Clone, PartialEq)]
pub struct PriorMoments {
    pub ea: DVector<f64>,
    pub eb: DVector<f64>,
    pub eaa: DMatrix<f64>,
    pub ebb: DMatrix<f64>,
    /// `E[a bᵀ]`, entry `(i, j) = E[aᵢ bⱼ]`.
    pub eab: DMatrix<f64>,
}

impl PriorMoments {
    /// Closed-form moments. Sensors are independent a priori, so
    /// off-diagonal entries are products of first moments.
    pub fn from_prior(prior: &MixturePrior) -> Self {
        let n = prior.num_sensors();
        let mut ea = DVector::zeros(n);
        let mut eb = DVector::zeros(n);
        let mut ea2 = vec![0.0; n];
        let mut eb2 = vec![0.0; n];
        let mut eab_diag = vec![0.0; n];
        for (i, w) in prior.weights.iter().enumerate() {
            // the atom contributes a = 1, b = 0
            ea[i] = w[0];
            ea2[i] = w[0];
            for (c, &q) in prior.components.iter().zip(&w[1..]) {
                ea[i] += q * c.mean_gain();
                ea2[i] += q * c.mean_gain_sq();
                eb[i] += q * c.mean_offset();
                eb2[i] += q * c.mean_offset_sq();
                eab_diag[i] += q * c.mean_gain_offset();
            }
        }
        let mut eaa = &ea * ea.transpose();
        let mut ebb = &eb * eb.transpose();
        let mut eab = &ea * eb.transpose();
        for i in 0..n {
            eaa[(i, i)] = ea2[i];
            ebb[(i, i)] = eb2[i];
            eab[(i, i)] = eab_diag[i];
        }
        PriorMoments {
            ea,
            eb,
            eaa,
            ebb,
            eab,
        }
    }
}

/// Target-independent part of the estimator.
#[derive(Debug, Clone)]
pub struct SblueBase {
    pub gp: GpModel,
    pub locations: Vec<Location>,
    pub counts: Vec<usize>,
    pub moments: PriorMoments,
    /// `E[ḡ]`.
    pub expected_gbar: DVector<f64>,
    /// `Cov[ḡ]`.
    pub cov_gbar: DMatrix<f64>,
    factor: JitteredCholesky,
}

impl SblueBase {
    pub fn new(locations: &[Location], gp: &GpModel, prior: &MixturePrior, counts: &[usize]) -> Result<Self> {
        gp.validate()?;
        prior.validate()?;
        let n = locations.len();
        if n == 0 {
            return Err(Error::invalid("no sensors"));
        }
        if prior.num_sensors() != n || counts.len() != n {
            return Err(Error::invalid("sensor count mismatch between locations, prior and counts"));
        }
        if counts.iter().any(|&m| m == 0) {
            return Err(Error::invalid("sensor with zero observations"));
        }
        let moments = PriorMoments::from_prior(prior);
        let mu = gp.mean_vector(locations);
        let c = build_covariance(locations, &gp.kernel);
        let expected_gbar = moments.ea.component_mul(&mu) + &moments.eb;

        let mut inner = &c + &mu * mu.transpose();
        for (i, &m) in counts.iter().enumerate() {
            inner[(i, i)] += gp.noise_var / m as f64;
        }
        let mut cov = moments.eaa.component_mul(&inner);
        // E[(aᵢμᵢ + bᵢ)(aⱼμⱼ + bⱼ)] cross terms: μᵢE[aᵢbⱼ] + E[bᵢaⱼ]μⱼ
        for i in 0..n {
            for j in 0..n {
                cov[(i, j)] += mu[i] * moments.eab[(i, j)] + moments.eab[(j, i)] * mu[j];
            }
        }
        cov += &moments.ebb;
        cov -= &expected_gbar * expected_gbar.transpose();
        let cov = (&cov + cov.transpose()) * 0.5;
        let scale = (0..n).map(|i| cov[(i, i)]).fold(0.0f64, f64::max);
        let factor = JitteredCholesky::new(&cov, scale)?;
        Ok(SblueBase {
            gp: *gp,
            locations: locations.to_vec(),
            counts: counts.to_vec(),
            moments,
            expected_gbar,
            cov_gbar: cov,
            factor,
        })
    }

    pub fn len(&self) -> usize {
        self.locations.len()
    }

    pub fn is_empty(&self) -> bool {
        self.locations.is_empty()
    }

    /// `Cov[ḡ, f★] = E[a] ⊙ k★`.
    pub fn cov_gbar_target(&self, target: &Location) -> DVector<f64> {
        cross_covariance(&self.locations, target, &self.gp.kernel).component_mul(&self.moments.ea)
    }

    /// Offline phase for one target.
    pub fn fit_target(&self, target: &Location) -> SblueModel {
        let c = self.cov_gbar_target(target);
        let weights = self.factor.solve(&c);
        let mu_star = self.gp.mean_at(target);
        let intercept = mu_star - weights.dot(&self.expected_gbar);
        let prior_var = self.gp.kernel.variance;
        let risk = (prior_var - c.dot(&weights)).clamp(0.0, prior_var);
        SblueModel {
            weights,
            intercept,
            risk,
            expected_gbar: self.expected_gbar.clone(),
            target: *target,
        }
    }

    /// Bayes risk `E[(wᵀḡ + b − f★)²]` of an arbitrary affine estimator.
    pub fn risk_of(&self, target: &Location, weights: &DVector<f64>, intercept: f64) -> f64 {
        let c = self.cov_gbar_target(target);
        let bias = weights.dot(&self.expected_gbar) + intercept - self.gp.mean_at(target);
        (weights.transpose() * &self.cov_gbar * weights)[(0, 0)] - 2.0 * weights.dot(&c)
            + self.gp.kernel.variance
            + bias * bias
    }

    /// Predictions at many targets from one set of sensor means.
    pub fn predict_many(&self, targets: &[Location], gbar: &[f64]) -> Result<Vec<f64>> {
        if gbar.len() != self.len() {
            return Err(Error::invalid("sensor mean count mismatch"));
        }
        let g = DVector::from_column_slice(gbar);
        Ok(crate::par::map_slice(targets, |t| {
            let m = self.fit_target(t);
            m.weights.dot(&g) + m.intercept
        }))
    }

    /// `(prediction, Bayes risk)` at many targets from one set of sensor means.
    pub fn predict_with_risk(&self, targets: &[Location], gbar: &[f64]) -> Result<Vec<(f64, f64)>> {
        if gbar.len() != self.len() {
            return Err(Error::invalid("sensor mean count mismatch"));
        }
        let g = DVector::from_column_slice(gbar);
        Ok(crate::par::map_slice(targets, |t| {
            let m = self.fit_target(t);
            (m.weights.dot(&g) + m.intercept, m.risk)
        }))
    }

    /// Bayes risks at many targets.
    pub fn risks(&self, targets: &[Location]) -> Vec<f64> {
        crate::par::map_slice(targets, |t| self.fit_target(t).risk)
    }
}

/// Fitted estimator for one target: prediction `wᵀḡ + b`.
#[derive(Debug, Clone, PartialEq)]
pub struct SblueModel {
    pub weights: DVector<f64>,
    pub intercept: f64,
    /// Bayes risk under quadratic loss.
    pub risk: f64,
    pub expected_gbar: DVector<f64>,
    pub target: Location,
}

impl SblueModel {
    /// Online phase: evaluates the estimator on per-sensor means.
    pub fn predict_means(&self, gbar: &[f64]) -> Result<f64> {
        if gbar.len() != self.weights.len() {
            return Err(Error::invalid("sensor mean count mismatch"));
        }
        Ok(self.weights.iter().zip(gbar).map(|(w, g)| w * g).sum::<f64>() + self.intercept)
    }

    pub fn predict(&self, summaries: &[SensorSummary]) -> Result<f64> {
        let gbar: Vec<f64> = summaries.iter().map(|s| s.mean()).collect();
        self.predict_means(&gbar)
    }
}

/// Offline phase for a single target.
pub fn sblue_fit(
    target: &Location,
    locations: &[Location],
    gp: &GpModel,
    prior: &MixturePrior,
    counts: &[usize],
) -> Result<SblueModel> {
    Ok(SblueBase::new(locations, gp, prior, counts)?.fit_target(target))
}

pub fn sblue_predict(model: &SblueModel, summaries: &[SensorSummary]) -> Result<f64> {
    model.predict(summaries)
}
