//! Synthetic worlds and the experiment loop.

mod config;
pub mod ingest;
pub mod io;

pub use config::{snr_to_noise_var, three_category_laws, DistortionGenerator, ExperimentConfig, Method};

use rand::seq::index;
use rand::Rng;
use rand_distr::StandardNormal;

use crate::distortion::{Distortion, DistortionParams, MixturePrior, PosteriorContext, SensorSummary};
use crate::distributed::{cluster_planar, distributed_eb, distributed_sblue, ClusterPartition};
use crate::empirical_bayes::{estimate_map, MapMethod};
use crate::error::{Error, Result};
use crate::gp::{build_covariance, cross_covariance, gp_sample, GpModel, JitteredCholesky, Location};
use crate::par;
use crate::rng::{self, SimRng};
use crate::sblue::SblueBase;

const FIELD_STREAM: u64 = 0xF1E1D;
const PSI_STREAM: u64 = 0x951;
const NOISE_STREAM: u64 = 0x4015E;
const METHOD_STREAM: u64 = 0x3E7;

/// Regular `n × n` grid over the unit square, row-major in `x2` then `x1`.
pub fn grid_locations(n: usize) -> Vec<Location> {
    let step = if n > 1 { 1.0 / (n - 1) as f64 } else { 0.0 };
    let mut out = Vec::with_capacity(n * n);
    for j in 0..n {
        for i in 0..n {
            out.push([i as f64 * step, j as f64 * step]);
        }
    }
    out
}

/// Uniform sensor placement in the unit square.
pub fn sensor_locations(n: usize, seed: u64) -> Vec<Location> {
    let mut r = rng::seeded(seed);
    (0..n).map(|_| [r.gen::<f64>(), r.gen::<f64>()]).collect()
}

/// Draws the field at sensors and grid points.
///
/// Below `exact_limit` total points the draw is joint. Above it, sensor
/// values are drawn jointly and each grid value is drawn from its
/// conditional law given the sensor values, independently across grid
/// points; the per-point joint law with the sensors (and hence expected
/// MSE) is exact.
pub fn sample_field(
    gp: &GpModel,
    sensors: &[Location],
    grid: &[Location],
    exact_limit: usize,
    rng: &mut SimRng,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let n = sensors.len();
    if n + grid.len() <= exact_limit {
        let all: Vec<Location> = sensors.iter().chain(grid).copied().collect();
        let v = gp_sample(&all, gp, rng)?;
        return Ok((v.rows(0, n).iter().copied().collect(), v.rows(n, grid.len()).iter().copied().collect()));
    }
    let fs = gp_sample(sensors, gp, rng)?;
    let c = build_covariance(sensors, &gp.kernel);
    let chol = JitteredCholesky::new(&c, gp.kernel.variance)?;
    let alpha = chol.solve(&(&fs - gp.mean_vector(sensors)));
    let z: Vec<f64> = (0..grid.len()).map(|_| rng.sample(StandardNormal)).collect();
    let fg = par::map_range(grid.len(), |i| {
        let k = cross_covariance(sensors, &grid[i], &gp.kernel);
        let m = gp.mean_at(&grid[i]) + k.dot(&alpha);
        let v = (gp.kernel.variance - chol.quad_form(&k)).max(0.0);
        m + v.sqrt() * z[i]
    });
    Ok((fs.iter().copied().collect(), fg))
}

/// True distortions: `round(proportion·N)` sensors chosen at random distort.
pub fn sample_distortions(
    n: usize,
    proportion: f64,
    generator: &DistortionGenerator,
    rng: &mut SimRng,
) -> Result<DistortionParams> {
    let count = ((proportion * n as f64).round() as usize).min(n);
    let mut psi = DistortionParams::all_default(n);
    let mut chosen = index::sample(rng, n, count).into_vec();
    chosen.sort_unstable();
    for i in chosen {
        psi.sensors[i] = match generator {
            DistortionGenerator::Fixed { gain, offset } => Distortion::new(*gain, *offset)?,
            DistortionGenerator::Categories(laws) => {
                let k = rng.gen_range(0..laws.len());
                laws[k].sample(rng)
            }
        };
    }
    Ok(psi)
}

/// Readings `aₙ(f(xₙ) + ε) + bₙ` with `ε ~ N(0, ς²)`.
pub fn observe(field: &[f64], psi: &DistortionParams, m: usize, noise_var: f64, rng: &mut SimRng) -> Vec<Vec<f64>> {
    let sd = noise_var.sqrt();
    field
        .iter()
        .zip(&psi.sensors)
        .map(|(&f, d)| {
            (0..m)
                .map(|_| d.apply(f + sd * rng.sample::<f64, _>(StandardNormal)))
                .collect()
        })
        .collect()
}

/// One simulated dataset with its ground truth.
#[derive(Debug, Clone)]
pub struct World {
    pub gp: GpModel,
    pub locations: Vec<Location>,
    pub grid: Vec<Location>,
    pub field_sensors: Vec<f64>,
    pub field_grid: Vec<f64>,
    pub psi: DistortionParams,
    pub observations: Vec<Vec<f64>>,
    pub summaries: Vec<SensorSummary>,
}

/// Builds replicate `replicate` of the configured world. Field and
/// distortions are shared by all replicates unless resampling is enabled;
/// observation noise is always fresh. All streams are derived from the
/// master seed, so a replicate is reproducible on its own.
pub fn generate_world(config: &ExperimentConfig, replicate: usize) -> Result<World> {
    config.validate()?;
    let gp = config.field_gp()?;
    let locations = sensor_locations(config.sensors, config.placement_seed);
    let grid = grid_locations(config.grid);
    let pick = |resample: bool| if resample { replicate as u64 } else { u64::MAX };

    let mut field_rng = rng::stream(rng::derive_seed(config.seed, FIELD_STREAM), pick(config.resample_field));
    let (field_sensors, field_grid) = sample_field(&gp, &locations, &grid, config.exact_field_limit, &mut field_rng)?;

    let mut psi_rng = rng::stream(rng::derive_seed(config.seed, PSI_STREAM), pick(config.resample_distortions));
    let psi = sample_distortions(config.sensors, config.proportion, &config.generator, &mut psi_rng)?;

    let mut noise_rng = rng::stream(rng::derive_seed(config.seed, NOISE_STREAM), replicate as u64);
    let observations = observe(&field_sensors, &psi, config.observations, gp.noise_var, &mut noise_rng);
    let summaries = locations
        .iter()
        .zip(&observations)
        .map(|(l, y)| SensorSummary::from_observations(*l, y))
        .collect::<Result<_>>()?;
    Ok(World {
        gp,
        locations,
        grid,
        field_sensors,
        field_grid,
        psi,
        observations,
        summaries,
    })
}

/// Accuracy of one reconstruction.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Metrics {
    pub relative_mse: f64,
    /// Share of non-distorting sensors flagged as distorting.
    pub fpr: Option<f64>,
    /// Share of distorting sensors flagged as non-distorting.
    pub fnr: Option<f64>,
    /// No non-distorting sensors exist; `fpr` is reported as 0.
    pub fpr_undefined: bool,
    /// No distorting sensors exist; `fnr` is reported as 0.
    pub fnr_undefined: bool,
}

pub fn compute_metrics(
    truth: &[f64],
    estimate: &[f64],
    prior_var: f64,
    true_flags: &[bool],
    estimated_flags: Option<&[bool]>,
) -> Result<Metrics> {
    if truth.len() != estimate.len() || truth.is_empty() {
        return Err(Error::invalid("truth and estimate grids differ in size or are empty"));
    }
    if !(prior_var > 0.0) {
        return Err(Error::invalid("prior variance must be positive"));
    }
    let mse = truth.iter().zip(estimate).map(|(t, e)| (t - e) * (t - e)).sum::<f64>() / truth.len() as f64;
    let mut m = Metrics {
        relative_mse: mse / prior_var,
        fpr: None,
        fnr: None,
        fpr_undefined: false,
        fnr_undefined: false,
    };
    if let Some(est) = estimated_flags {
        if est.len() != true_flags.len() {
            return Err(Error::invalid("flag vectors differ in length"));
        }
        let negatives = true_flags.iter().filter(|f| !**f).count();
        let positives = true_flags.len() - negatives;
        let fp = true_flags.iter().zip(est).filter(|(t, e)| !**t && **e).count();
        let fneg = true_flags.iter().zip(est).filter(|(t, e)| **t && !**e).count();
        m.fpr_undefined = negatives == 0;
        m.fnr_undefined = positives == 0;
        m.fpr = Some(if negatives == 0 { 0.0 } else { fp as f64 / negatives as f64 });
        m.fnr = Some(if positives == 0 { 0.0 } else { fneg as f64 / positives as f64 });
    }
    Ok(m)
}

/// Grid reconstruction by one method.
#[derive(Debug, Clone)]
pub struct Reconstruction {
    pub estimate: Vec<f64>,
    /// Predictive variance (GP-based methods) or Bayes risk (S-BLUE family).
    pub variance: Vec<f64>,
    pub flags: Option<Vec<bool>>,
    pub psi: Option<DistortionParams>,
}

/// Inputs shared by every method for one dataset.
pub struct ReconstructionInput<'a> {
    pub summaries: &'a [SensorSummary],
    pub gp: &'a GpModel,
    pub prior: &'a MixturePrior,
    pub targets: &'a [Location],
    pub partition: &'a ClusterPartition,
    /// True distortions; only the oracle reads them.
    pub truth: Option<&'a DistortionParams>,
}

fn gp_reconstruction(ctx: &PosteriorContext, targets: &[Location], psi: DistortionParams, flags: bool) -> Reconstruction {
    let p = ctx.predict_all(targets, &psi);
    Reconstruction {
        estimate: p.iter().map(|x| x.mean).collect(),
        variance: p.iter().map(|x| x.variance).collect(),
        flags: flags.then(|| psi.distorting_flags()),
        psi: Some(psi),
    }
}

/// Runs one method on one dataset.
pub fn reconstruct(method: Method, input: &ReconstructionInput<'_>, cem: &crate::empirical_bayes::CemConfig, icm: &crate::empirical_bayes::IcmConfig) -> Result<Reconstruction> {
    let n = input.summaries.len();
    match method {
        Method::Oracle | Method::Naive | Method::Cem | Method::Icm => {
            let ctx = PosteriorContext::new(input.summaries, input.gp)?;
            let (psi, flags) = match method {
                Method::Oracle => (
                    input
                        .truth
                        .ok_or_else(|| Error::invalid("oracle needs the true distortions"))?
                        .clone(),
                    false,
                ),
                Method::Naive => (DistortionParams::all_default(n), false),
                Method::Cem => (estimate_map(&ctx, input.prior, &MapMethod::Cem(cem.clone()))?.psi, true),
                _ => (estimate_map(&ctx, input.prior, &MapMethod::Icm(icm.clone()))?.psi, true),
            };
            Ok(gp_reconstruction(&ctx, input.targets, psi, flags))
        }
        Method::Sblue => {
            let locs: Vec<Location> = input.summaries.iter().map(|s| s.location).collect();
            let counts: Vec<usize> = input.summaries.iter().map(|s| s.count).collect();
            let means: Vec<f64> = input.summaries.iter().map(|s| s.mean()).collect();
            let base = SblueBase::new(&locs, input.gp, input.prior, &counts)?;
            let p = base.predict_with_risk(input.targets, &means)?;
            Ok(Reconstruction {
                estimate: p.iter().map(|x| x.0).collect(),
                variance: p.iter().map(|x| x.1).collect(),
                flags: None,
                psi: None,
            })
        }
        Method::DsBlue => {
            let p = distributed_sblue(input.summaries, input.gp, input.prior, input.partition, input.targets)?;
            Ok(Reconstruction {
                estimate: p.iter().map(|x| x.0).collect(),
                variance: p.iter().map(|x| x.1).collect(),
                flags: None,
                psi: None,
            })
        }
        Method::DebCem | Method::DebIcm => {
            let m = if method == Method::DebCem {
                MapMethod::Cem(cem.clone())
            } else {
                MapMethod::Icm(icm.clone())
            };
            let d = distributed_eb(input.summaries, input.gp, input.prior, input.partition, input.targets, &m)?;
            Ok(Reconstruction {
                estimate: d.predictions.iter().map(|x| x.0).collect(),
                variance: d.predictions.iter().map(|x| x.1).collect(),
                flags: Some(d.psi.distorting_flags()),
                psi: Some(d.psi),
            })
        }
    }
}

/// One line of the metrics table.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRow {
    pub label: String,
    pub method: Method,
    pub replicate: usize,
    pub sensors: usize,
    pub observations: usize,
    pub snr_db: f64,
    pub proportion: f64,
    /// `NaN` when the replicate failed.
    pub relative_mse: f64,
    pub fpr: Option<f64>,
    pub fnr: Option<f64>,
    pub fpr_undefined: bool,
    pub fnr_undefined: bool,
    /// `ok` or the error message.
    pub status: String,
}

/// Runs every replicate and method. Replicates run in parallel with
/// independent seeded streams; a failing method produces a row with
/// `NaN` error and its message in `status`, and the run continues.
pub fn run_experiment(config: &ExperimentConfig) -> Result<Vec<MetricsRow>> {
    config.validate()?;
    let prior = config.prior()?;
    let locations = sensor_locations(config.sensors, config.placement_seed);
    let partition = cluster_planar(&locations, config.clusters)?;
    let prior_var = config.field_variance;

    let per_rep: Vec<Result<Vec<MetricsRow>>> = par::map_range(config.replicates, |r| {
        let world = generate_world(config, r)?;
        let true_flags = world.psi.distorting_flags();
        let input = ReconstructionInput {
            summaries: &world.summaries,
            gp: &world.gp,
            prior: &prior,
            targets: &world.grid,
            partition: &partition,
            truth: Some(&world.psi),
        };
        let method_seed = rng::derive_seed(rng::derive_seed(config.seed, METHOD_STREAM), r as u64);
        let cem = crate::empirical_bayes::CemConfig {
            seed: method_seed,
            ..config.cem.clone()
        };
        let icm = crate::empirical_bayes::IcmConfig {
            seed: method_seed,
            ..config.icm.clone()
        };
        Ok(config
            .methods
            .iter()
            .map(|&method| {
                let mut row = MetricsRow {
                    label: config.label.clone(),
                    method,
                    replicate: r,
                    sensors: config.sensors,
                    observations: config.observations,
                    snr_db: config.snr_db,
                    proportion: config.proportion,
                    relative_mse: f64::NAN,
                    fpr: None,
                    fnr: None,
                    fpr_undefined: false,
                    fnr_undefined: false,
                    status: "ok".into(),
                };
                let outcome = reconstruct(method, &input, &cem, &icm).and_then(|rec| {
                    compute_metrics(&world.field_grid, &rec.estimate, prior_var, &true_flags, rec.flags.as_deref())
                });
                match outcome {
                    Ok(m) => {
                        row.relative_mse = m.relative_mse;
                        row.fpr = m.fpr;
                        row.fnr = m.fnr;
                        row.fpr_undefined = m.fpr_undefined;
                        row.fnr_undefined = m.fnr_undefined;
                    }
                    Err(e) => row.status = e.to_string(),
                }
                row
            })
            .collect())
    });
    let mut rows = Vec::new();
    for (r, rep) in per_rep.into_iter().enumerate() {
        match rep {
            Ok(v) => rows.extend(v),
            Err(e) => rows.extend(config.methods.iter().map(|&method| MetricsRow {
                label: config.label.clone(),
                method,
                replicate: r,
                sensors: config.sensors,
                observations: config.observations,
                snr_db: config.snr_db,
                proportion: config.proportion,
                relative_mse: f64::NAN,
                fpr: None,
                fnr: None,
                fpr_undefined: false,
                fnr_undefined: false,
                status: e.to_string(),
            })),
        }
    }
    Ok(rows)
}

/// Mean and standard error of a method's relative MSE over successful
/// replicates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MethodSummary {
    pub method: Method,
    pub mean: f64,
    pub standard_error: f64,
    pub count: usize,
}

pub fn summarize_rows(rows: &[MetricsRow]) -> Vec<MethodSummary> {
    let mut methods: Vec<Method> = rows.iter().map(|r| r.method).collect();
    methods.sort();
    methods.dedup();
    methods
        .into_iter()
        .map(|method| {
            let v: Vec<f64> = rows
                .iter()
                .filter(|r| r.method == method && r.relative_mse.is_finite())
                .map(|r| r.relative_mse)
                .collect();
            let (mean, se) = mean_se(&v);
            MethodSummary {
                method,
                mean,
                standard_error: se,
                count: v.len(),
            }
        })
        .collect()
}

/// Sample mean and its standard error (`NaN` error below two values).
pub fn mean_se(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    if v.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let mean = v.iter().sum::<f64>() / n;
    if v.len() < 2 {
        return (mean, f64::NAN);
    }
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> ExperimentConfig {
        ExperimentConfig {
            sensors: 12,
            grid: 8,
            replicates: 2,
            observations: 5,
            ..ExperimentConfig::default()
        }
    }

    #[test]
    fn grid_covers_unit_square() {
        let g = grid_locations(3);
        assert_eq!(g.len(), 9);
        assert_eq!(g[0], [0.0, 0.0]);
        assert_eq!(g[8], [1.0, 1.0]);
    }

    #[test]
    fn proportion_zero_means_no_distortion() {
        let c = ExperimentConfig { proportion: 0.0, ..small() };
        let w = generate_world(&c, 0).unwrap();
        assert!(w.psi.sensors.iter().all(|d| d.is_default()));
    }

    #[test]
    fn distorting_count_is_exact() {
        let c = ExperimentConfig { proportion: 0.5, ..small() };
        let w = generate_world(&c, 0).unwrap();
        assert_eq!(w.psi.distorting_flags().iter().filter(|f| **f).count(), 6);
    }

    #[test]
    fn noiseless_limit() {
        let c = ExperimentConfig { snr_db: 1e6, ..small() };
        let w = generate_world(&c, 1).unwrap();
        for ((obs, f), d) in w.observations.iter().zip(&w.field_sensors).zip(&w.psi.sensors) {
            for y in obs {
                assert!((y - d.apply(*f)).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn worlds_are_reproducible() {
        let c = small();
        let a = generate_world(&c, 3).unwrap();
        let b = generate_world(&c, 3).unwrap();
        assert_eq!(a.observations, b.observations);
        assert_eq!(a.field_grid, b.field_grid);
        let other = generate_world(&c, 4).unwrap();
        assert_eq!(a.field_grid, other.field_grid);
        assert_ne!(a.observations, other.observations);
    }

    #[test]
    fn conditional_grid_draw_matches_sensor_values_at_sensor_sites() {
        let gp = GpModel::new(0.0, crate::gp::KernelSpec::new(1.0, 0.3).unwrap(), 0.1).unwrap();
        let sensors = vec![[0.2, 0.2], [0.7, 0.4]];
        let grid = vec![[0.2, 0.2], [0.5, 0.5]];
        let mut r = rng::seeded(2);
        let (fs, fg) = sample_field(&gp, &sensors, &grid, 0, &mut r).unwrap();
        assert!((fs[0] - fg[0]).abs() < 1e-3);
    }

    #[test]
    fn metric_examples() {
        let t = [1.0, 2.0, 3.0];
        let m = compute_metrics(&t, &t, 4.0, &[false, true], Some(&[true, true])).unwrap();
        assert_eq!(m.relative_mse, 0.0);
        assert_eq!(m.fpr, Some(1.0));
        assert_eq!(m.fnr, Some(0.0));
        let e = [3.0, 4.0, 5.0];
        assert_eq!(compute_metrics(&t, &e, 4.0, &[], None).unwrap().relative_mse, 1.0);
        let m = compute_metrics(&t, &t, 1.0, &[true, true], Some(&[true, false])).unwrap();
        assert!(m.fpr_undefined && m.fpr == Some(0.0) && m.fnr == Some(0.5));
        assert!(compute_metrics(&t, &e[..2], 1.0, &[], None).is_err());
    }

    #[test]
    fn naive_equals_oracle_without_distortion() {
        let c = ExperimentConfig {
            proportion: 0.0,
            methods: vec![Method::Oracle, Method::Naive],
            ..small()
        };
        let rows = run_experiment(&c).unwrap();
        for pair in rows.chunks(2) {
            assert_eq!(pair[0].relative_mse, pair[1].relative_mse);
        }
    }
}
