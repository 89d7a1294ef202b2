//! Independent reference implementations used as test oracles. Nothing here
//! calls into the library's likelihood or predictive code: every quantity is
//! rebuilt from the raw observations with dense linear algebra.
#![allow(dead_code)]

use fieldrecon::distortion::{Distortion, DistortionParams, SensorSummary};
use fieldrecon::gp::{GpModel, KernelSpec, Location};
use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;

pub const LN_2PI: f64 = 1.837_877_066_409_345_5;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Matérn-3/2 written out from its closed form.
pub fn matern(x: &Location, y: &Location, variance: f64, lengthscale: f64) -> f64 {
    let d = ((x[0] - y[0]).powi(2) + (x[1] - y[1]).powi(2)).sqrt();
    let r = 3f64.sqrt() * d / lengthscale;
    variance * (1.0 + r) * (-r).exp()
}

pub fn gaussian_log_density(x: &DVector<f64>, mean: &DVector<f64>, cov: &DMatrix<f64>) -> f64 {
    let chol = cov.clone().cholesky().expect("oracle covariance must be SPD");
    let r = x - mean;
    let alpha = chol.solve(&r);
    let log_det = 2.0 * chol.l().diagonal().iter().map(|v| v.ln()).sum::<f64>();
    -0.5 * (x.len() as f64 * LN_2PI + log_det + r.dot(&alpha))
}

/// Random small problem: raw observations plus everything needed to build
/// the joint Gaussian.
#[derive(Debug, Clone)]
pub struct Instance {
    pub gp: GpModel,
    pub locations: Vec<Location>,
    pub observations: Vec<Vec<f64>>,
    pub psi: DistortionParams,
}

impl Instance {
    pub fn random(r: &mut ChaCha8Rng, max_sensors: usize, max_obs: usize) -> Self {
        let n = r.gen_range(1..=max_sensors);
        let gp = GpModel::new(
            r.gen_range(-5.0..5.0),
            KernelSpec::new(r.gen_range(0.5..5.0), r.gen_range(0.1..1.0)).unwrap(),
            r.gen_range(0.1..2.0),
        )
        .unwrap();
        let locations: Vec<Location> = (0..n).map(|_| [r.gen(), r.gen()]).collect();
        let psi = DistortionParams::new(
            (0..n)
                .map(|_| {
                    if r.gen_bool(0.3) {
                        Distortion::DEFAULT
                    } else {
                        Distortion::new(r.gen_range(0.5..2.0), r.gen_range(-3.0..3.0)).unwrap()
                    }
                })
                .collect(),
        );
        let observations = (0..n)
            .map(|_| {
                let m = r.gen_range(1..=max_obs);
                (0..m).map(|_| gp.mean + r.gen_range(-4.0..4.0)).collect()
            })
            .collect();
        Instance {
            gp,
            locations,
            observations,
            psi,
        }
    }

    pub fn summaries(&self) -> Vec<SensorSummary> {
        self.locations
            .iter()
            .zip(&self.observations)
            .map(|(l, y)| SensorSummary::from_observations(*l, y).unwrap())
            .collect()
    }

    fn flat(&self) -> (Vec<usize>, DVector<f64>) {
        let owner: Vec<usize> = self
            .observations
            .iter()
            .enumerate()
            .flat_map(|(n, y)| std::iter::repeat(n).take(y.len()))
            .collect();
        let y = DVector::from_iterator(owner.len(), self.observations.iter().flatten().copied());
        (owner, y)
    }

    /// Mean and covariance of the stacked observation vector:
    /// `y_{n,m} = aₙ(f(xₙ) + ε) + bₙ`.
    pub fn joint_moments(&self) -> (DVector<f64>, DMatrix<f64>) {
        let (owner, _) = self.flat();
        let t = owner.len();
        let k = &self.gp.kernel;
        let mut mean = DVector::zeros(t);
        let mut cov = DMatrix::zeros(t, t);
        for i in 0..t {
            let di = self.psi.sensors[owner[i]];
            mean[i] = di.gain() * self.gp.mean + di.offset();
            for j in 0..t {
                let dj = self.psi.sensors[owner[j]];
                let c = matern(&self.locations[owner[i]], &self.locations[owner[j]], k.variance, k.lengthscale);
                cov[(i, j)] = di.gain() * dj.gain() * c;
            }
            cov[(i, i)] += di.gain().powi(2) * self.gp.noise_var;
        }
        (mean, cov)
    }

    /// `log p(y | ψ)` as a `ΣMₙ`-dimensional Gaussian density.
    pub fn joint_log_likelihood(&self) -> f64 {
        let (_, y) = self.flat();
        let (mean, cov) = self.joint_moments();
        gaussian_log_density(&y, &mean, &cov)
    }

    /// Mean and variance of `f(target)` given all raw observations.
    pub fn joint_predictive(&self, target: &Location) -> (f64, f64) {
        let (owner, y) = self.flat();
        let (mean, cov) = self.joint_moments();
        let k = &self.gp.kernel;
        let c = DVector::from_iterator(
            owner.len(),
            owner.iter().map(|&n| {
                self.psi.sensors[n].gain() * matern(&self.locations[n], target, k.variance, k.lengthscale)
            }),
        );
        let chol = cov.cholesky().unwrap();
        let w = chol.solve(&c);
        (self.gp.mean + w.dot(&(y - mean)), k.variance - c.dot(&w))
    }

    pub fn cov(&self) -> DMatrix<f64> {
        let n = self.locations.len();
        let k = &self.gp.kernel;
        DMatrix::from_fn(n, n, |i, j| matern(&self.locations[i], &self.locations[j], k.variance, k.lengthscale))
    }

    pub fn counts(&self) -> DVector<f64> {
        DVector::from_iterator(self.observations.len(), self.observations.iter().map(|y| y.len() as f64))
    }
}

pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / b.abs().max(1e-300)
}

pub fn matrix_rel_err(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    (a - b).norm() / b.norm().max(1e-300)
}

/// The three Woodbury identities relating `Z = ς⁻²M + C⁻¹` to
/// `Υ = C + ς²M⁻¹`. Returns the relative error of each.
pub fn woodbury_errors(inst: &Instance) -> [f64; 3] {
    let c = inst.cov() + DMatrix::identity(inst.locations.len(), inst.locations.len()) * 1e-9;
    let s2 = inst.gp.noise_var;
    let m = DMatrix::from_diagonal(&inst.counts());
    let m_inv = DMatrix::from_diagonal(&inst.counts().map(|v| 1.0 / v));
    let c_inv = c.clone().try_inverse().unwrap();
    let z = &m / s2 + &c_inv;
    let z_inv = z.clone().try_inverse().unwrap();
    let ups = &c + &m_inv * s2;
    let ups_inv = ups.clone().try_inverse().unwrap();

    let rhs1 = &m_inv * s2 - &m_inv * &ups_inv * &m_inv * (s2 * s2);
    let rhs2 = &c - &c * &ups_inv * &c;
    let lhs3 = z.determinant().ln();
    let rhs3 = (&m / s2).determinant().ln() - c.determinant().ln() + ups.determinant().ln();
    [
        matrix_rel_err(&rhs1, &z_inv),
        matrix_rel_err(&rhs2, &z_inv),
        (lhs3 - rhs3).abs() / lhs3.abs().max(1.0),
    ]
}

/// Central finite difference of a scalar function of a vector.
pub fn fd_gradient<F: Fn(&[f64]) -> f64>(f: F, x: &[f64]) -> Vec<f64> {
    (0..x.len())
        .map(|i| {
            let h = 1e-5 * x[i].abs().max(1.0);
            let mut xp = x.to_vec();
            let mut xm = x.to_vec();
            xp[i] += h;
            xm[i] -= h;
            (f(&xp) - f(&xm)) / (2.0 * h)
        })
        .collect()
}

/// `‖a − b‖ / ‖b‖`, falling back to the absolute error for tiny `b`.
pub fn vec_rel_err(a: &[f64], b: &[f64]) -> f64 {
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let norm: f64 = b.iter().map(|y| y * y).sum::<f64>().sqrt();
    diff / norm.max(1.0)
}

pub fn mean_se(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}
