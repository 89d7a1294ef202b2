//! Experiment configuration and its flat `key = value` text format.

use std::fmt;
use std::str::FromStr;

use crate::distortion::{ComponentLaw, MixturePrior};
use crate::empirical_bayes::{CemConfig, IcmConfig};
use crate::error::{Error, Result};
use crate::gp::{GpModel, KernelSpec};

/// Reconstruction method run by the harness.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Method {
    /// GP regression with the true distortions.
    Oracle,
    /// GP regression assuming no sensor distorts.
    Naive,
    Sblue,
    Cem,
    Icm,
    DsBlue,
    DebCem,
    DebIcm,
}

impl Method {
    pub const ALL: [Method; 8] = [
        Method::Oracle,
        Method::Naive,
        Method::Sblue,
        Method::Cem,
        Method::Icm,
        Method::DsBlue,
        Method::DebCem,
        Method::DebIcm,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Method::Oracle => "oracle",
            Method::Naive => "naive",
            Method::Sblue => "sblue",
            Method::Cem => "cem",
            Method::Icm => "icm",
            Method::DsBlue => "ds-blue",
            Method::DebCem => "deb-cem",
            Method::DebIcm => "deb-icm",
        }
    }

    /// Whether the method produces per-sensor distortion flags.
    pub fn has_flags(self) -> bool {
        matches!(self, Method::Cem | Method::Icm | Method::DebCem | Method::DebIcm)
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.name() == s.trim())
            .ok_or_else(|| Error::invalid(format!("unknown method `{s}`")))
    }
}

/// How the true distortions of distorting sensors are drawn.
#[derive(Debug, Clone, PartialEq)]
pub enum DistortionGenerator {
    /// Every distorting sensor gets the same gain and offset.
    Fixed { gain: f64, offset: f64 },
    /// Each distorting sensor picks a category uniformly, then samples it.
    Categories(Vec<ComponentLaw>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    /// Free-form label echoed into the metrics table.
    pub label: String,
    pub field_mean: f64,
    pub field_variance: f64,
    pub lengthscale: f64,
    /// Evaluation grid is `grid × grid` over the unit square.
    pub grid: usize,
    pub sensors: usize,
    pub placement_seed: u64,
    /// Prior weight on the atom; the rest is split by `prior_components`.
    pub prior_atom: f64,
    /// `(weight, law)` per continuous category.
    pub prior_components: Vec<(f64, ComponentLaw)>,
    pub proportion: f64,
    /// Rescale the prior so the atom carries `1 − proportion`.
    pub prior_matches_proportion: bool,
    pub generator: DistortionGenerator,
    pub observations: usize,
    pub snr_db: f64,
    pub replicates: usize,
    pub methods: Vec<Method>,
    pub clusters: usize,
    pub seed: u64,
    /// Draw a new field for every replicate (otherwise one field is reused).
    pub resample_field: bool,
    /// Draw new distortions for every replicate.
    pub resample_distortions: bool,
    /// Sample field and grid jointly when sensors + grid points stay below this.
    pub exact_field_limit: usize,
    pub cem: CemConfig,
    pub icm: IcmConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            label: String::new(),
            field_mean: 10.0,
            field_variance: 100.0,
            lengthscale: 0.3,
            grid: 100,
            sensors: 100,
            placement_seed: 1,
            prior_atom: 0.5,
            prior_components: vec![(0.5, ComponentLaw::independent(0.25, 0.1, 6.0, 3.0).expect("valid"))],
            proportion: 0.5,
            generator: DistortionGenerator::Fixed { gain: 1.2, offset: 5.0 },
            observations: 50,
            snr_db: 15.0,
            replicates: 100,
            methods: vec![Method::Oracle, Method::Naive, Method::Sblue, Method::Cem, Method::Icm],
            clusters: 2,
            seed: 0,
            resample_field: false,
            resample_distortions: false,
            prior_matches_proportion: false,
            exact_field_limit: 3000,
            cem: CemConfig::default(),
            icm: IcmConfig::default(),
        }
    }
}

/// Three-category law shared by the inhomogeneous synthetic experiment and
/// the real-data study.
pub fn three_category_laws() -> Vec<ComponentLaw> {
    vec![
        ComponentLaw::independent(-0.4, 0.05, 0.0, 0.2).expect("valid"),
        ComponentLaw::independent(0.2, 0.05, 0.0, 0.2).expect("valid"),
        ComponentLaw::independent(0.0, 0.05, 10.0, 2.0).expect("valid"),
    ]
}

impl ExperimentConfig {
    /// Homogeneous-distortion experiment: one gain/offset for all
    /// distorting sensors and a weakly informative single-category prior.
    pub fn homogeneous() -> Self {
        ExperimentConfig::default()
    }

    /// Inhomogeneous experiment: lengthscale 0.5, three distortion
    /// categories, prior weight 1/6 on each.
    pub fn inhomogeneous() -> Self {
        let laws = three_category_laws();
        ExperimentConfig {
            lengthscale: 0.5,
            prior_atom: 0.5,
            prior_components: laws.iter().map(|l| (1.0 / 6.0, *l)).collect(),
            generator: DistortionGenerator::Categories(laws),
            observations: 100,
            snr_db: 20.0,
            ..ExperimentConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.proportion) {
            return Err(Error::invalid("proportion must lie in [0, 1]"));
        }
        if self.observations == 0 {
            return Err(Error::invalid("observations per sensor must be at least 1"));
        }
        if self.replicates == 0 {
            return Err(Error::invalid("replicate count must be at least 1"));
        }
        if self.sensors == 0 || self.grid == 0 {
            return Err(Error::invalid("sensor and grid counts must be positive"));
        }
        if self.methods.is_empty() {
            return Err(Error::invalid("no methods selected"));
        }
        if self.clusters == 0 || self.clusters > self.sensors {
            return Err(Error::invalid("cluster count must lie in 1..=sensors"));
        }
        if !self.snr_db.is_finite() {
            return Err(Error::invalid("SNR must be finite"));
        }
        if let DistortionGenerator::Categories(c) = &self.generator {
            if c.is_empty() {
                return Err(Error::invalid("category generator needs at least one law"));
            }
        }
        self.field_gp()?;
        self.prior()?;
        self.cem.validate()
    }

    pub fn noise_var(&self) -> f64 {
        snr_to_noise_var(self.snr_db, self.observations, self.field_variance)
    }

    /// True field model including the observation noise.
    pub fn field_gp(&self) -> Result<GpModel> {
        let kernel = KernelSpec::new(self.field_variance, self.lengthscale)?;
        if !self.field_mean.is_finite() {
            return Err(Error::invalid("field mean must be finite"));
        }
        Ok(GpModel {
            mean: self.field_mean,
            kernel,
            noise_var: self.noise_var(),
        })
    }

    /// Prior shared by all sensors.
    pub fn prior(&self) -> Result<MixturePrior> {
        let mut w = vec![self.prior_atom];
        w.extend(self.prior_components.iter().map(|(q, _)| *q));
        if self.prior_matches_proportion {
            let total: f64 = w[1..].iter().sum();
            if total <= 0.0 {
                return Err(Error::invalid("prior has no continuous category to rescale"));
            }
            w[0] = 1.0 - self.proportion;
            w[1..].iter_mut().for_each(|q| *q *= self.proportion / total);
        }
        MixturePrior::homogeneous(
            self.sensors,
            w,
            self.prior_components.iter().map(|(_, l)| *l).collect(),
        )
    }

    /// Parses the flat text format. Lines are `key = value`; `#` starts a
    /// comment. `preset` resets every field, so it should come first.
    /// `prior_component` and `category` may repeat; the first occurrence
    /// replaces the preset's list.
    pub fn parse(text: &str) -> Result<Self> {
        let mut c = ExperimentConfig::default();
        let mut prior_seen = false;
        let mut categories: Option<Vec<ComponentLaw>> = None;
        let mut generator_kind: Option<String> = None;
        let mut gain = None;
        let mut offset = None;
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::invalid(format!("line {}: expected `key = value`", lineno + 1)))?;
            let (key, value) = (key.trim(), value.trim());
            let bad = |what: &str| Error::invalid(format!("line {}: invalid {what} `{value}`", lineno + 1));
            macro_rules! num {
                ($t:ty) => {
                    value.parse::<$t>().map_err(|_| bad(key))?
                };
            }
            let floats = || -> Result<Vec<f64>> {
                value
                    .split(',')
                    .map(|v| v.trim().parse::<f64>().map_err(|_| bad(key)))
                    .collect()
            };
            match key {
                "preset" => {
                    c = match value {
                        "homogeneous" => ExperimentConfig::homogeneous(),
                        "inhomogeneous" => ExperimentConfig::inhomogeneous(),
                        _ => return Err(bad("preset")),
                    }
                }
                "label" => c.label = value.to_string(),
                "field_mean" => c.field_mean = num!(f64),
                "field_variance" => c.field_variance = num!(f64),
                "lengthscale" => c.lengthscale = num!(f64),
                "grid" => c.grid = num!(usize),
                "sensors" => c.sensors = num!(usize),
                "placement_seed" => c.placement_seed = num!(u64),
                "prior_atom" => c.prior_atom = num!(f64),
                "prior_component" => {
                    // weight, log-gain mean, log-gain sd, offset mean, offset sd
                    let v = floats()?;
                    if v.len() != 5 {
                        return Err(bad("prior_component (need 5 numbers)"));
                    }
                    if !prior_seen {
                        c.prior_components.clear();
                        prior_seen = true;
                    }
                    c.prior_components.push((v[0], ComponentLaw::independent(v[1], v[2], v[3], v[4])?));
                }
                "proportion" => c.proportion = num!(f64),
                "generator" => generator_kind = Some(value.to_string()),
                "distortion_gain" => gain = Some(num!(f64)),
                "distortion_offset" => offset = Some(num!(f64)),
                "category" => {
                    let v = floats()?;
                    if v.len() != 4 {
                        return Err(bad("category (need 4 numbers)"));
                    }
                    categories
                        .get_or_insert_with(Vec::new)
                        .push(ComponentLaw::independent(v[0], v[1], v[2], v[3])?);
                }
                "observations" => c.observations = num!(usize),
                "snr_db" => c.snr_db = num!(f64),
                "replicates" => c.replicates = num!(usize),
                "methods" => {
                    c.methods = value
                        .split(',')
                        .filter(|s| !s.trim().is_empty())
                        .map(Method::from_str)
                        .collect::<Result<_>>()?
                }
                "clusters" => c.clusters = num!(usize),
                "seed" => c.seed = num!(u64),
                "resample_field" => c.resample_field = num!(bool),
                "resample_distortions" => c.resample_distortions = num!(bool),
                "prior_matches_proportion" => c.prior_matches_proportion = num!(bool),
                "exact_field_limit" => c.exact_field_limit = num!(usize),
                "cem_samples" => c.cem.samples = num!(usize),
                "cem_elite_fraction" => c.cem.elite_fraction = num!(f64),
                "cem_max_iterations" => c.cem.max_iterations = num!(usize),
                "icm_restarts" => c.icm.restarts = num!(usize),
                "icm_max_sweeps" => c.icm.max_sweeps = num!(usize),
                _ => return Err(Error::invalid(format!("line {}: unknown key `{key}`", lineno + 1))),
            }
        }
        match generator_kind.as_deref() {
            None => {
                if let Some(cats) = categories {
                    c.generator = DistortionGenerator::Categories(cats);
                }
            }
            Some("categories") => {
                c.generator = DistortionGenerator::Categories(categories.unwrap_or_else(three_category_laws))
            }
            Some("fixed") => {}
            Some(other) => return Err(Error::invalid(format!("unknown generator `{other}`"))),
        }
        if gain.is_some() || offset.is_some() {
            let (g0, o0) = match c.generator {
                DistortionGenerator::Fixed { gain, offset } => (gain, offset),
                DistortionGenerator::Categories(_) => (1.0, 0.0),
            };
            if matches!(c.generator, DistortionGenerator::Categories(_)) && generator_kind.is_some() {
                return Err(Error::invalid("distortion_gain/offset require the fixed generator"));
            }
            c.generator = DistortionGenerator::Fixed {
                gain: gain.unwrap_or(g0),
                offset: offset.unwrap_or(o0),
            };
        }
        c.validate()?;
        Ok(c)
    }
}

/// Noise variance giving the requested SNR of the per-sensor average:
/// `ς² = M·VAR / 10^{snr/10}`.
pub fn snr_to_noise_var(snr_db: f64, observations: usize, signal_var: f64) -> f64 {
    observations as f64 * signal_var / 10f64.powf(snr_db / 10.0)
}
