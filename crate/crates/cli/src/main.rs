use std::fs::File;
use std::io::{self, BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use fieldrecon::distributed::{cluster_planar, cluster_sensors, ClusterPartition};
use fieldrecon::gp::{fit_hyperparameters, AveragedData, FitOptions, GpModel, KernelSpec, Location};
use fieldrecon::harness::ingest::{ingest_file, IngestOptions, LocalProjection};
use fieldrecon::harness::io::{
    read_flags, read_grid, read_locations, read_observations, write_distortions, write_grid, write_metrics,
    write_observations, write_partition, GridTable, SensorData,
};
use fieldrecon::harness::{
    compute_metrics, generate_world, reconstruct, run_experiment, snr_to_noise_var, summarize_rows,
    ExperimentConfig, Method, MetricsRow, ReconstructionInput,
};
use fieldrecon::{Error, Result};

#[derive(Parser)]
#[command(name = "fieldrecon", version, about = "Spatial field reconstruction from distorted sensors")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a synthetic experiment and write its metrics table.
    Synth(SynthArgs),
    /// Reconstruct a field on a grid from an observations file.
    Reconstruct(ReconstructArgs),
    /// Partition sensors into clusters by complete linkage.
    Cluster(ClusterArgs),
    /// Fit GP hyperparameters by maximum marginal likelihood.
    FitHyper(FitHyperArgs),
    /// Recompute metrics from a saved grid and distortion files.
    Metrics(MetricsArgs),
}

#[derive(Args)]
struct SynthArgs {
    /// Experiment configuration (`key = value` lines).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Extra `key=value` settings applied after the config file.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Metrics CSV destination (stdout when omitted).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Write one replicate's data and ground truth into this directory.
    #[arg(long)]
    dump: Option<PathBuf>,
    /// Replicate written by `--dump`.
    #[arg(long, default_value_t = 0)]
    replicate: usize,
    /// Print per-method mean and standard error to stderr.
    #[arg(long)]
    summary: bool,
}

#[derive(Args)]
struct ReconstructArgs {
    /// Observations CSV: `sensor_id,x1,x2,value`.
    #[arg(long)]
    observations: PathBuf,
    /// Coordinates are longitude/latitude in degrees.
    #[arg(long)]
    lonlat: bool,
    /// Hyperparameter CSV as written by `fit-hyper`.
    #[arg(long)]
    hyper: Option<PathBuf>,
    #[arg(long)]
    mean: Option<f64>,
    #[arg(long)]
    variance: Option<f64>,
    #[arg(long)]
    lengthscale: Option<f64>,
    #[arg(long)]
    noise_var: Option<f64>,
    /// Set the noise variance from an aggregated SNR in dB and the signal variance.
    #[arg(long, conflicts_with = "noise_var")]
    snr_db: Option<f64>,
    /// Prior and optimizer settings (`key = value` lines).
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value = "sblue")]
    method: Method,
    #[arg(long)]
    clusters: Option<usize>,
    /// Grid points per side.
    #[arg(long)]
    grid: Option<usize>,
    /// Grid extent `x_min,x_max,y_min,y_max`; defaults to the unit square,
    /// or the sensor bounding box with `--lonlat`.
    #[arg(long, value_delimiter = ',', num_args = 4)]
    domain: Option<Vec<f64>>,
    /// Grid CSV whose `truth` column is copied into the output.
    #[arg(long)]
    truth: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Grid CSV destination (stdout when omitted).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Estimated distortions CSV destination.
    #[arg(long)]
    distortions: Option<PathBuf>,
}

#[derive(Args)]
struct ClusterArgs {
    /// Locations CSV: `sensor_id,x1,x2`.
    #[arg(long)]
    locations: PathBuf,
    /// Coordinates are longitude/latitude; distances are great-circle.
    #[arg(long)]
    lonlat: bool,
    #[arg(long)]
    clusters: usize,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct FitHyperArgs {
    /// Observations CSV: `sensor_id,x1,x2,value`.
    #[arg(long, conflicts_with = "epa", required_unless_present = "epa")]
    observations: Option<PathBuf>,
    /// Coordinates in `--observations` are longitude/latitude.
    #[arg(long)]
    lonlat: bool,
    /// Daily records in the EPA AirData layout; one fit per day, median reported.
    #[arg(long)]
    epa: Option<PathBuf>,
    /// EPA readings are already in Celsius.
    #[arg(long)]
    celsius: bool,
    #[arg(long, default_value_t = f64::NEG_INFINITY, allow_hyphen_values = true)]
    lower: f64,
    #[arg(long, default_value_t = f64::INFINITY, allow_hyphen_values = true)]
    upper: f64,
    /// First day (inclusive, `YYYY-MM-DD`).
    #[arg(long, requires = "to")]
    from: Option<String>,
    /// Last day (inclusive).
    #[arg(long, requires = "from")]
    to: Option<String>,
    /// `lon_min,lon_max,lat_min,lat_max`.
    #[arg(long, value_delimiter = ',', num_args = 4, allow_hyphen_values = true)]
    bbox: Option<Vec<f64>>,
    #[arg(long)]
    init_lengthscale: Option<f64>,
    #[arg(long, default_value_t = 200)]
    max_iterations: usize,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct MetricsArgs {
    /// Reconstruction grid CSV.
    #[arg(long)]
    grid: PathBuf,
    /// Grid CSV providing the `truth` column when `--grid` lacks one.
    #[arg(long)]
    truth: Option<PathBuf>,
    #[arg(long)]
    prior_var: f64,
    /// True distortions CSV (`sensor_id,...,distorting`).
    #[arg(long, requires = "est_flags")]
    true_flags: Option<PathBuf>,
    /// Estimated distortions CSV.
    #[arg(long, requires = "true_flags")]
    est_flags: Option<PathBuf>,
    #[arg(long, default_value = "sblue")]
    method: Method,
    #[arg(long, default_value = "metrics")]
    label: String,
    #[arg(long)]
    out: Option<PathBuf>,
}

fn open(path: &Path) -> Result<BufReader<File>> {
    File::open(path)
        .map(BufReader::new)
        .map_err(|e| Error::InvalidInput(format!("{}: {e}", path.display())))
}

fn output(path: Option<&Path>) -> Result<Box<dyn Write>> {
    Ok(match path {
        Some(p) => Box::new(BufWriter::new(File::create(p)?)),
        None => Box::new(BufWriter::new(io::stdout())),
    })
}

fn load_config(path: Option<&Path>, overrides: &[String]) -> Result<ExperimentConfig> {
    let mut text = String::new();
    if let Some(p) = path {
        open(p)?.read_to_string(&mut text)?;
    }
    for o in overrides {
        text.push('\n');
        text.push_str(o);
    }
    ExperimentConfig::parse(&text)
}

fn synth(args: SynthArgs) -> Result<()> {
    let config = load_config(args.config.as_deref(), &args.set)?;
    if let Some(dir) = &args.dump {
        dump_world(&config, args.replicate, dir)?;
    }
    let rows = run_experiment(&config)?;
    write_metrics(output(args.out.as_deref())?, &rows)?;
    if args.summary {
        for s in summarize_rows(&rows) {
            eprintln!("{:<8} {:.6} ± {:.6} (n = {})", s.method, s.mean, s.standard_error, s.count);
        }
    }
    Ok(())
}

fn dump_world(config: &ExperimentConfig, replicate: usize, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let world = generate_world(config, replicate)?;
    let ids: Vec<String> = (1..=world.locations.len()).map(|i| format!("s{i}")).collect();
    let sensors: Vec<SensorData> = ids
        .iter()
        .zip(&world.locations)
        .zip(&world.observations)
        .map(|((id, &location), y)| SensorData { id: id.clone(), location, values: y.clone() })
        .collect();
    write_observations(File::create(dir.join("observations.csv"))?, &sensors)?;
    write_distortions(File::create(dir.join("distortions.csv"))?, &ids, &world.psi)?;
    write_hyper(File::create(dir.join("hyper.csv"))?, &world.gp, None)?;
    let prior = config.prior()?;
    let partition = ClusterPartition::single(world.locations.len());
    let oracle = reconstruct(
        Method::Oracle,
        &ReconstructionInput {
            summaries: &world.summaries,
            gp: &world.gp,
            prior: &prior,
            targets: &world.grid,
            partition: &partition,
            truth: Some(&world.psi),
        },
        &config.cem,
        &config.icm,
    )?;
    write_grid(
        File::create(dir.join("truth.csv"))?,
        &GridTable {
            locations: world.grid.clone(),
            truth: Some(world.field_grid.clone()),
            estimate: oracle.estimate,
            variance: Some(oracle.variance),
        },
    )
}

const HYPER_HEADER: [&str; 5] = ["mean", "variance", "lengthscale", "noise_var", "log_likelihood"];

fn write_hyper<W: Write>(w: W, gp: &GpModel, log_likelihood: Option<f64>) -> Result<()> {
    let mut wr = csv::Writer::from_writer(w);
    wr.write_record(HYPER_HEADER)?;
    wr.write_record([
        gp.mean.to_string(),
        gp.kernel.variance.to_string(),
        gp.kernel.lengthscale.to_string(),
        gp.noise_var.to_string(),
        log_likelihood.map_or_else(String::new, |v| v.to_string()),
    ])?;
    wr.flush()?;
    Ok(())
}

fn read_hyper<R: Read>(r: R) -> Result<[f64; 4]> {
    let mut rd = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(r);
    let headers = rd.headers()?.clone();
    let rec = rd
        .records()
        .next()
        .ok_or_else(|| Error::InvalidInput("hyperparameter file has no data row".into()))??;
    let mut out = [0.0; 4];
    for (k, name) in HYPER_HEADER[..4].iter().enumerate() {
        let col = headers
            .iter()
            .position(|h| h == *name)
            .ok_or_else(|| Error::InvalidInput(format!("hyperparameter file lacks `{name}`")))?;
        out[k] = rec
            .get(col)
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::InvalidInput(format!("invalid `{name}` value")))?;
    }
    Ok(out)
}

fn linspace(lo: f64, hi: f64, n: usize) -> impl Iterator<Item = f64> {
    (0..n).map(move |i| if n == 1 { 0.5 * (lo + hi) } else { lo + (hi - lo) * i as f64 / (n - 1) as f64 })
}

fn grid_over(domain: [f64; 4], n: usize) -> Vec<Location> {
    linspace(domain[2], domain[3], n)
        .flat_map(|y| linspace(domain[0], domain[1], n).map(move |x| [x, y]))
        .collect()
}

fn bounding_box(points: &[[f64; 2]]) -> [f64; 4] {
    points.iter().fold(
        [f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY],
        |b, p| [b[0].min(p[0]), b[1].max(p[0]), b[2].min(p[1]), b[3].max(p[1])],
    )
}

/// Planar coordinates used for kernel evaluation, and the projection that produced them.
fn planar(points: &[[f64; 2]], lonlat: bool) -> Result<(Vec<Location>, Option<LocalProjection>)> {
    if !lonlat {
        return Ok((points.to_vec(), None));
    }
    let proj = LocalProjection::centered(points)?;
    Ok((points.iter().map(|&p| proj.forward(p)).collect(), Some(proj)))
}

fn reconstruct_cmd(args: ReconstructArgs) -> Result<()> {
    let mut config = load_config(args.config.as_deref(), &[])?;
    let sensors = read_observations(open(&args.observations)?)?;
    let raw: Vec<[f64; 2]> = sensors.iter().map(|s| s.location).collect();
    let (xy, proj) = planar(&raw, args.lonlat)?;
    let summaries = sensors
        .iter()
        .zip(&xy)
        .map(|(s, &loc)| SensorData { location: loc, ..s.clone() }.summary())
        .collect::<Result<Vec<_>>>()?;

    let mut h = match &args.hyper {
        Some(p) => read_hyper(open(p)?)?,
        None => [config.field_mean, config.field_variance, config.lengthscale, config.noise_var()],
    };
    for (slot, v) in h.iter_mut().zip([args.mean, args.variance, args.lengthscale, args.noise_var]) {
        if let Some(v) = v {
            *slot = v;
        }
    }
    if let Some(snr) = args.snr_db {
        let m = summaries.iter().map(|s| s.count).sum::<usize>() as f64 / summaries.len() as f64;
        h[3] = snr_to_noise_var(snr, m.round().max(1.0) as usize, h[1]);
    }
    let gp = GpModel::new(h[0], KernelSpec::new(h[1], h[2])?, h[3])?;

    config.sensors = summaries.len();
    let prior = config.prior()?;
    let clusters = args.clusters.unwrap_or(config.clusters.min(summaries.len()));
    let partition = match args.method {
        Method::DsBlue | Method::DebCem | Method::DebIcm if args.lonlat => cluster_sensors(&raw, clusters)?,
        Method::DsBlue | Method::DebCem | Method::DebIcm => cluster_planar(&xy, clusters)?,
        _ => ClusterPartition::single(summaries.len()),
    };

    let n = args.grid.unwrap_or(config.grid);
    if n == 0 {
        return Err(Error::InvalidInput("grid size must be positive".into()));
    }
    let domain = match &args.domain {
        Some(d) => [d[0], d[1], d[2], d[3]],
        None if args.lonlat => bounding_box(&raw),
        None => [0.0, 1.0, 0.0, 1.0],
    };
    let out_grid = grid_over(domain, n);
    let targets: Vec<Location> = match &proj {
        Some(p) => out_grid.iter().map(|&g| p.forward(g)).collect(),
        None => out_grid.clone(),
    };
    let truth = match &args.truth {
        Some(p) => {
            let t = read_grid(open(p)?)?;
            let values = t
                .truth
                .ok_or_else(|| Error::InvalidInput("truth grid has no truth column".into()))?;
            if values.len() != out_grid.len() {
                return Err(Error::InvalidInput(format!(
                    "truth grid has {} points, reconstruction grid has {}",
                    values.len(),
                    out_grid.len()
                )));
            }
            Some(values)
        }
        None => None,
    };

    let seed = args.seed.unwrap_or(config.seed);
    let cem = fieldrecon::empirical_bayes::CemConfig { seed, ..config.cem.clone() };
    let icm = fieldrecon::empirical_bayes::IcmConfig { seed, ..config.icm.clone() };
    let rec = reconstruct(
        args.method,
        &ReconstructionInput {
            summaries: &summaries,
            gp: &gp,
            prior: &prior,
            targets: &targets,
            partition: &partition,
            truth: None,
        },
        &cem,
        &icm,
    )?;
    if let Some(path) = &args.distortions {
        let psi = rec
            .psi
            .as_ref()
            .ok_or_else(|| Error::InvalidInput(format!("{} does not estimate distortions", args.method)))?;
        let ids: Vec<String> = sensors.iter().map(|s| s.id.clone()).collect();
        write_distortions(File::create(path)?, &ids, psi)?;
    }
    write_grid(
        output(args.out.as_deref())?,
        &GridTable { locations: out_grid, truth, estimate: rec.estimate, variance: Some(rec.variance) },
    )
}

fn cluster(args: ClusterArgs) -> Result<()> {
    let rows = read_locations(open(&args.locations)?)?;
    let ids: Vec<String> = rows.iter().map(|r| r.0.clone()).collect();
    let pts: Vec<[f64; 2]> = rows.iter().map(|r| r.1).collect();
    let partition = if args.lonlat {
        cluster_sensors(&pts, args.clusters)?
    } else {
        cluster_planar(&pts, args.clusters)?
    };
    write_partition(output(args.out.as_deref())?, &ids, &partition)
}

fn median(v: &mut [f64]) -> f64 {
    v.sort_by(|a, b| a.total_cmp(b));
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

fn initial_model(data: &AveragedData, lengthscale: Option<f64>) -> Result<GpModel> {
    let n = data.means.len() as f64;
    let mean = data.means.iter().sum::<f64>() / n;
    let var = (data.means.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).max(1e-6);
    let b = bounding_box(&data.locations);
    let extent = (b[1] - b[0]).hypot(b[3] - b[2]).max(1e-6);
    GpModel::new(mean, KernelSpec::new(var, lengthscale.unwrap_or(0.2 * extent))?, 0.1 * var)
}

fn fit_hyper(args: FitHyperArgs) -> Result<()> {
    let options = FitOptions { max_iterations: args.max_iterations, ..FitOptions::default() };
    let (model, loglik) = if let Some(path) = &args.epa {
        let ingest = IngestOptions {
            fahrenheit: !args.celsius,
            lower: args.lower,
            upper: args.upper,
            date_range: args.from.clone().zip(args.to.clone()),
            bbox: args.bbox.as_ref().map(|b| [b[0], b[1], b[2], b[3]]),
        };
        let report = ingest_file(path, &ingest)?;
        for w in &report.warnings {
            eprintln!("warning: {w}");
        }
        eprintln!(
            "{} sites, {} days, {} outliers, {} duplicates, missing fraction {:.4}",
            report.sites.len(),
            report.dates.len(),
            report.outliers,
            report.duplicates,
            report.missing_fraction
        );
        let all: Vec<[f64; 2]> = report.sites.iter().map(|s| s.lonlat).collect();
        let proj = LocalProjection::centered(&all)?;
        let mut fits: Vec<[f64; 5]> = Vec::new();
        for date in &report.dates {
            let day = report.day(date);
            let data = AveragedData {
                locations: day.iter().map(|(s, _)| proj.forward(s.lonlat)).collect(),
                means: day.iter().map(|(_, v)| *v).collect(),
                counts: vec![1; day.len()],
            };
            if data.len() < 3 {
                eprintln!("warning: {date}: fewer than 3 sites, skipped");
                continue;
            }
            let init = initial_model(&data, args.init_lengthscale)?;
            match fit_hyperparameters(&data, &init, &options) {
                Ok(f) => fits.push([
                    f.model.mean,
                    f.model.kernel.variance,
                    f.model.kernel.lengthscale,
                    f.model.noise_var,
                    f.log_likelihood,
                ]),
                Err(e) => eprintln!("warning: {date}: {e}"),
            }
        }
        if fits.is_empty() {
            return Err(Error::Numerical("no day produced a hyperparameter fit".into()));
        }
        let col = |k: usize| median(&mut fits.iter().map(|f| f[k]).collect::<Vec<_>>());
        let h = [col(0), col(1), col(2), col(3)];
        (GpModel::new(h[0], KernelSpec::new(h[1], h[2])?, h[3])?, None)
    } else {
        let path = args.observations.as_ref().expect("clap enforces one input");
        let sensors = read_observations(open(path)?)?;
        let raw: Vec<[f64; 2]> = sensors.iter().map(|s| s.location).collect();
        let (xy, _) = planar(&raw, args.lonlat)?;
        let summaries = sensors
            .iter()
            .zip(&xy)
            .map(|(s, &loc)| SensorData { location: loc, ..s.clone() }.summary())
            .collect::<Result<Vec<_>>>()?;
        let data = AveragedData::from_summaries(&summaries);
        let init = initial_model(&data, args.init_lengthscale)?;
        let fit = fit_hyperparameters(&data, &init, &options)?;
        (fit.model, Some(fit.log_likelihood))
    };
    write_hyper(output(args.out.as_deref())?, &model, loglik)
}

fn align_flags(truth: Vec<(String, bool)>, est: Vec<(String, bool)>) -> Result<(Vec<bool>, Vec<bool>)> {
    let lookup: std::collections::HashMap<String, bool> = est.into_iter().collect();
    let mut t = Vec::with_capacity(truth.len());
    let mut e = Vec::with_capacity(truth.len());
    for (id, flag) in truth {
        let f = lookup
            .get(&id)
            .ok_or_else(|| Error::InvalidInput(format!("sensor {id} missing from estimated flags")))?;
        t.push(flag);
        e.push(*f);
    }
    if lookup.len() != t.len() {
        return Err(Error::InvalidInput("flag files list different sensors".into()));
    }
    Ok((t, e))
}

fn metrics(args: MetricsArgs) -> Result<()> {
    let grid = read_grid(open(&args.grid)?)?;
    let truth = match (&grid.truth, &args.truth) {
        (_, Some(p)) => read_grid(open(p)?)?
            .truth
            .ok_or_else(|| Error::InvalidInput("truth grid has no truth column".into()))?,
        (Some(t), None) => t.clone(),
        (None, None) => return Err(Error::InvalidInput("no truth column; pass --truth".into())),
    };
    let flags = match (&args.true_flags, &args.est_flags) {
        (Some(t), Some(e)) => Some(align_flags(read_flags(open(t)?)?, read_flags(open(e)?)?)?),
        _ => None,
    };
    let (true_flags, est_flags) = match &flags {
        Some((t, e)) => (t.as_slice(), Some(e.as_slice())),
        None => (&[][..], None),
    };
    let m = compute_metrics(&truth, &grid.estimate, args.prior_var, true_flags, est_flags)?;
    let row = MetricsRow {
        label: args.label,
        method: args.method,
        replicate: 0,
        sensors: true_flags.len(),
        observations: 0,
        snr_db: f64::NAN,
        proportion: if true_flags.is_empty() {
            f64::NAN
        } else {
            true_flags.iter().filter(|f| **f).count() as f64 / true_flags.len() as f64
        },
        relative_mse: m.relative_mse,
        fpr: m.fpr,
        fnr: m.fnr,
        fpr_undefined: m.fpr_undefined,
        fnr_undefined: m.fnr_undefined,
        status: "ok".into(),
    };
    write_metrics(output(args.out.as_deref())?, &[row])
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Synth(a) => synth(a),
        Command::Reconstruct(a) => reconstruct_cmd(a),
        Command::Cluster(a) => cluster(a),
        Command::FitHyper(a) => fit_hyper(a),
        Command::Metrics(a) => metrics(a),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
