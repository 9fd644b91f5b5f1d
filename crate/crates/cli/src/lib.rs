//! Command-line front end: simulate data, compute scatter matrices, test a
//! hypothesized signal dimension, estimate it, and emit variograms.
//!
//! Input is CSV with coordinate columns `x[,y[,z]]` and one column per
//! variable; results are JSON (with a `schema_version`) or CSV.

pub mod io;

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use sbss_core::bootstrap::{
    bootstrap_test, default_regular_block, BootstrapSpec, NoiseMode, SpatialMode,
    DEFAULT_IRREGULAR_BLOCK,
};
use sbss_core::diag::fit_with;
use sbss_core::dimtest::{asymptotic_test, check_kernels, TestOptions, TestResult};
use sbss_core::estimate::{
    divide_conquer_with, estimate_asymptotic, forward_estimate_with, threshold_on_solution,
    EstimateResult, Strategy,
};
use sbss_core::geometry::{detect_grid, GridIndex};
use sbss_core::scatter::ScatterPlan;
use sbss_core::simulate::{
    empirical_variogram, equal_bins, gen_coords, random_mixing, sample_field, CoordinatePattern,
    LatentModel,
};
use sbss_core::{KernelSet, SbssError, SpatialSample};

use crate::io::{read_dataset, write_rows, write_table, DataSet};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{}:{line}: {message}", path.display())]
    Parse {
        path: PathBuf,
        line: u64,
        message: String,
    },
    #[error("{0}")]
    Usage(String),
    #[error("{name}: {source}", name = error_name(source))]
    Core {
        #[from]
        source: SbssError,
    },
}

fn error_name(e: &SbssError) -> String {
    let debug = format!("{e:?}");
    debug
        .split(|c: char| !c.is_alphanumeric())
        .next()
        .unwrap_or("Error")
        .to_string()
}

impl CliError {
    /// 2 for invalid input or options, 1 for numerical failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Core { source } if !source.is_validation() => 1,
            _ => 2,
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "sbss", version, about = "Spatial blind source separation and signal-dimension testing")]
pub struct Cli {
    /// Worker threads for bootstrap replicates (default: available parallelism).
    #[arg(long, global = true)]
    pub workers: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Simulate a field from a Matérn latent model and write CSV plus a JSON sidecar.
    Simulate(SimulateArgs),
    /// Write the covariance and local covariance matrices as CSV.
    Scatter(ScatterArgs),
    /// Test H0r: exactly p - r latent components are white noise.
    Test(TestArgs),
    /// Estimate the signal dimension by a sequence of tests.
    Estimate(EstimateArgs),
    /// Empirical variograms of the estimated latent components (or raw columns).
    Variogram(VariogramArgs),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum ModelArg {
    Setting1,
    Setting2,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum PatternArg {
    Uniform,
    Skewed,
    Grid,
}

impl From<PatternArg> for CoordinatePattern {
    fn from(p: PatternArg) -> Self {
        match p {
            PatternArg::Uniform => CoordinatePattern::Uniform,
            PatternArg::Skewed => CoordinatePattern::BetaSkewed,
            PatternArg::Grid => CoordinatePattern::Grid,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum MethodArg {
    Asym,
    Param,
    Perm,
    SpParam,
    SpPerm,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum StrategyArg {
    DivideConquer,
    Forward,
    Threshold,
}

impl From<StrategyArg> for Strategy {
    fn from(s: StrategyArg) -> Self {
        match s {
            StrategyArg::DivideConquer => Strategy::DivideConquer,
            StrategyArg::Forward => Strategy::Forward,
            StrategyArg::Threshold => Strategy::Threshold,
        }
    }
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    /// Output CSV; metadata goes to the same path with a .json extension.
    #[arg(long, short)]
    pub output: PathBuf,
    #[arg(long, value_enum, default_value = "setting1")]
    pub model: ModelArg,
    /// Number of white-noise channels.
    #[arg(long, default_value_t = 2)]
    pub noise: usize,
    #[arg(long, value_enum, default_value = "uniform")]
    pub pattern: PatternArg,
    /// Domain edge n_e; the domain is [0, n_e]².
    #[arg(long, default_value_t = 30)]
    pub edge: usize,
    /// Mix with a random matrix of condition number at most 100 instead of the identity.
    #[arg(long)]
    pub random_mixing: bool,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args, Clone)]
pub struct CommonArgs {
    /// Input CSV with columns x[,y[,z]] and the variables.
    #[arg(long, short)]
    pub input: PathBuf,
    /// Comma-separated kernels: ring:r1:r2, ball:r, lag:ways:h.
    #[arg(long)]
    pub kernels: String,
    /// Do not subtract the sample mean.
    #[arg(long)]
    pub uncentered: bool,
    /// Scale local covariances by 1/n (weighted chi-square null).
    #[arg(long)]
    pub unnormalized: bool,
    /// Permit kernels with f(0) != 0, such as balls.
    #[arg(long)]
    pub allow_ball: bool,
}

#[derive(Debug, Args)]
pub struct ScatterArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    /// Output CSV (default: stdout).
    #[arg(long, short)]
    pub output: Option<PathBuf>,
}

#[derive(Debug, Args, Clone)]
pub struct MethodArgs {
    #[arg(long, value_enum, default_value = "asym")]
    pub method: MethodArg,
    #[arg(long, default_value_t = 0.05)]
    pub alpha: f64,
    /// Bootstrap resamples.
    #[arg(long = "B", default_value_t = 200)]
    pub b: usize,
    /// Spatial block edge: coordinate units for irregular data, lattice
    /// steps for complete grids.
    #[arg(long)]
    pub block: Option<f64>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct TestArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    #[command(flatten)]
    pub method: MethodArgs,
    /// Hypothesized signal dimension.
    #[arg(long)]
    pub r: usize,
    /// JSON output (default: stdout).
    #[arg(long, short)]
    pub output: Option<PathBuf>,
    /// Also write the estimated latent components IC.1..IC.p as CSV.
    #[arg(long)]
    pub latent: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EstimateArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    #[command(flatten)]
    pub method: MethodArgs,
    #[arg(long, value_enum, default_value = "divide-conquer")]
    pub strategy: StrategyArg,
    /// Also consider r = 0 (no signal at all).
    #[arg(long)]
    pub include_zero: bool,
    /// Constant threshold for the threshold strategy (default: chi-square quantile).
    #[arg(long = "c-n")]
    pub c_n: Option<f64>,
    #[arg(long, short)]
    pub output: Option<PathBuf>,
    #[arg(long)]
    pub latent: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct VariogramArgs {
    #[arg(long, short)]
    pub input: PathBuf,
    /// Kernels for the latent fit; required unless --raw.
    #[arg(long)]
    pub kernels: Option<String>,
    /// Variograms of the input columns instead of latent components.
    #[arg(long)]
    pub raw: bool,
    #[arg(long, default_value_t = 10)]
    pub bins: usize,
    /// Largest lag (default: half the bounding-box diagonal).
    #[arg(long)]
    pub max_distance: Option<f64>,
    #[arg(long)]
    pub uncentered: bool,
    #[arg(long)]
    pub unnormalized: bool,
    #[arg(long)]
    pub allow_ball: bool,
    #[arg(long, short)]
    pub output: Option<PathBuf>,
}

/// Fully resolved settings, echoed into JSON output.
#[derive(Debug, Serialize)]
pub struct RunConfig {
    pub subcommand: &'static str,
    pub input: Option<PathBuf>,
    pub output: Option<PathBuf>,
    pub kernels: Option<String>,
    pub method: Option<MethodArg>,
    pub r: Option<usize>,
    pub alpha: Option<f64>,
    #[serde(rename = "B")]
    pub b: Option<usize>,
    pub block: Option<f64>,
    pub spatial_regime: Option<&'static str>,
    pub seed: Option<u64>,
    pub strategy: Option<StrategyArg>,
    pub c_n: Option<f64>,
    pub uncentered: bool,
    pub unnormalized: bool,
    pub include_zero: bool,
    pub allow_ball: bool,
    pub workers: Option<usize>,
}

impl RunConfig {
    fn empty(subcommand: &'static str, workers: Option<usize>) -> Self {
        Self {
            subcommand,
            input: None,
            output: None,
            kernels: None,
            method: None,
            r: None,
            alpha: None,
            b: None,
            block: None,
            spatial_regime: None,
            seed: None,
            strategy: None,
            c_n: None,
            uncentered: false,
            unnormalized: false,
            include_zero: false,
            allow_ball: false,
            workers,
        }
    }
}

#[derive(Serialize)]
struct Envelope<'a, T: Serialize> {
    schema_version: u32,
    config: &'a RunConfig,
    n: usize,
    p: usize,
    #[serde(flatten)]
    body: T,
}

#[derive(Serialize)]
struct TestBody<'a> {
    result: &'a TestResult,
    reject: bool,
}

#[derive(Serialize)]
struct EstimateBody<'a> {
    result: &'a EstimateResult,
}

/// Parses arguments and runs; returns the process exit code.
pub fn main_with<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match run(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

pub fn run(cli: Cli) -> Result<(), CliError> {
    if cli.workers == Some(0) {
        return Err(CliError::Usage("--workers must be at least 1".into()));
    }
    let mut pool = rayon::ThreadPoolBuilder::new();
    if let Some(w) = cli.workers {
        pool = pool.num_threads(w);
    }
    let pool = pool
        .build()
        .map_err(|e| CliError::Usage(format!("cannot start worker pool: {e}")))?;
    let workers = cli.workers;
    pool.install(|| match cli.command {
        Command::Simulate(a) => simulate(a),
        Command::Scatter(a) => scatter_cmd(a),
        Command::Test(a) => test_cmd(a, workers),
        Command::Estimate(a) => estimate_cmd(a, workers),
        Command::Variogram(a) => variogram_cmd(a),
    })
}

fn write_json<T: Serialize>(path: Option<&Path>, value: &T) -> Result<(), CliError> {
    let mut out = io::output(path)?;
    let target = path.map(Path::to_path_buf).unwrap_or_else(|| PathBuf::from("<stdout>"));
    let io_err = |source| CliError::Io {
        path: target.clone(),
        source,
    };
    serde_json::to_writer_pretty(&mut out, value).map_err(|e| io_err(std::io::Error::other(e)))?;
    writeln!(out).map_err(io_err)?;
    out.flush().map_err(io_err)
}

use std::io::Write as _;

#[derive(Serialize)]
struct SimulationMetadata<'a> {
    schema_version: u32,
    model_name: ModelArg,
    model: &'a LatentModel,
    mixing_condition: f64,
    pattern: PatternArg,
    edge: usize,
    seed: u64,
    n: usize,
    p: usize,
    columns: Vec<String>,
}

fn simulate(a: SimulateArgs) -> Result<(), CliError> {
    let mut rng = ChaCha8Rng::seed_from_u64(a.seed);
    let mut model = match a.model {
        ModelArg::Setting1 => LatentModel::setting1(a.noise),
        ModelArg::Setting2 => LatentModel::setting2(a.noise),
    };
    let loc = gen_coords(a.pattern.into(), a.edge, &mut rng)?;
    if a.random_mixing {
        let omega = random_mixing(model.p(), 100.0, &mut rng);
        model = model.with_mixing(omega)?;
    }
    let sample = sample_field(&loc, &model, &mut rng)?;
    let names: Vec<String> = (1..=model.p()).map(|i| format!("v{i}")).collect();
    write_table(Some(&a.output), &sample.locations, &names, &sample.values)?;
    let meta = SimulationMetadata {
        schema_version: SCHEMA_VERSION,
        model_name: a.model,
        model: &model,
        mixing_condition: model.mixing_condition(),
        pattern: a.pattern,
        edge: a.edge,
        seed: a.seed,
        n: sample.n(),
        p: sample.p(),
        columns: io::coordinate_names(2)
            .iter()
            .map(|s| s.to_string())
            .chain(names)
            .collect(),
    };
    write_json(Some(&a.output.with_extension("json")), &meta)
}

fn load(common: &CommonArgs) -> Result<(DataSet, KernelSet), CliError> {
    let kernels = KernelSet::parse(&common.kernels)?;
    let data = read_dataset(&common.input)?;
    Ok((data, kernels))
}

fn test_options(common: &CommonArgs) -> TestOptions {
    TestOptions {
        centered: !common.uncentered,
        unnormalized: common.unnormalized,
        allow_nonconforming: common.allow_ball,
    }
}

fn scatter_cmd(a: ScatterArgs) -> Result<(), CliError> {
    let (data, kernels) = load(&a.common)?;
    let options = test_options(&a.common).scatter_options();
    let plan = ScatterPlan::new(&data.sample.locations, kernels.kernels())?;
    let (cov, locals) = plan.all(&data.sample.values, options)?;
    let header: Vec<String> = ["kernel", "normalization", "variable"]
        .iter()
        .map(|s| s.to_string())
        .chain(data.value_names.iter().cloned())
        .collect();
    let mut rows = Vec::new();
    for m in std::iter::once(&cov).chain(&locals) {
        for (i, name) in data.value_names.iter().enumerate() {
            let mut row = vec![m.kernel.to_string(), m.normalization.to_string(), name.clone()];
            row.extend(m.matrix.row(i).iter().map(|v| v.to_string()));
            rows.push(row);
        }
    }
    write_rows(a.output.as_deref(), &header, &rows)
}

/// Resolved bootstrap settings for a method tag.
fn bootstrap_spec(
    method: &MethodArgs,
    sample: &SpatialSample,
    config: &mut RunConfig,
) -> Result<Option<BootstrapSpec>, CliError> {
    let noise = match method.method {
        MethodArg::Asym => return Ok(None),
        MethodArg::Param | MethodArg::SpParam => NoiseMode::Parametric,
        MethodArg::Perm | MethodArg::SpPerm => NoiseMode::Permute,
    };
    let spatial = match method.method {
        MethodArg::Param | MethodArg::Perm => {
            if method.block.is_some() {
                return Err(CliError::Usage("--block only applies to sp-param and sp-perm".into()));
            }
            SpatialMode::None
        }
        _ => {
            let regular = detect_grid(&sample.locations).is_regular
                && GridIndex::new(&sample.locations).is_ok_and(|g| g.is_complete());
            if regular {
                let block = match method.block {
                    Some(b) if b >= 1.0 && b.fract() == 0.0 => b as usize,
                    Some(b) => {
                        return Err(CliError::Usage(format!(
                            "on a complete grid --block counts lattice steps and must be a positive integer, got {b}"
                        )))
                    }
                    None => default_regular_block(sample.n(), sample.locations.dim()),
                };
                config.spatial_regime = Some("regular");
                config.block = Some(block as f64);
                SpatialMode::Regular { block }
            } else {
                let block = method.block.unwrap_or(DEFAULT_IRREGULAR_BLOCK);
                config.spatial_regime = Some("irregular");
                config.block = Some(block);
                SpatialMode::Irregular { block }
            }
        }
    };
    config.b = Some(method.b);
    config.seed = Some(method.seed);
    Ok(Some(BootstrapSpec {
        b: method.b,
        noise,
        spatial,
        seed: method.seed,
    }))
}

fn validate_method(method: &MethodArgs) -> Result<(), CliError> {
    if !(method.alpha > 0.0 && method.alpha < 1.0) {
        return Err(CliError::Usage(format!("--alpha must lie in (0, 1), got {}", method.alpha)));
    }
    if method.b == 0 {
        return Err(CliError::Usage("--B must be at least 1".into()));
    }
    if method.method != MethodArg::Asym && method.b > 1_000_000 {
        return Err(CliError::Usage("--B above 10⁶ is not supported".into()));
    }
    Ok(())
}

fn base_config(
    subcommand: &'static str,
    common: &CommonArgs,
    kernels: &KernelSet,
    method: &MethodArgs,
    output: Option<&Path>,
    workers: Option<usize>,
) -> RunConfig {
    let mut config = RunConfig::empty(subcommand, workers);
    config.input = Some(common.input.clone());
    config.output = output.map(Path::to_path_buf);
    config.kernels = Some(kernels.to_string());
    config.method = Some(method.method);
    config.alpha = Some(method.alpha);
    config.uncentered = common.uncentered;
    config.unnormalized = common.unnormalized;
    config.allow_ball = common.allow_ball;
    config
}

fn write_latent(path: &Path, sample: &SpatialSample, kernels: &KernelSet, options: TestOptions) -> Result<(), CliError> {
    let sol = fit_with(sample, kernels, options.scatter_options())?;
    let names: Vec<String> = (1..=sol.p()).map(|i| format!("IC.{i}")).collect();
    write_table(Some(path), &sample.locations, &names, &sol.latent)
}

fn test_cmd(a: TestArgs, workers: Option<usize>) -> Result<(), CliError> {
    validate_method(&a.method)?;
    let (data, kernels) = load(&a.common)?;
    let sample = &data.sample;
    let options = test_options(&a.common);
    let mut config = base_config("test", &a.common, &kernels, &a.method, a.output.as_deref(), workers);
    config.r = Some(a.r);
    let result = match bootstrap_spec(&a.method, sample, &mut config)? {
        None => asymptotic_test(sample, &kernels, a.r, options)?,
        Some(spec) => bootstrap_test(sample, &kernels, a.r, &spec, options)?,
    };
    if let Some(path) = &a.latent {
        write_latent(path, sample, &kernels, options)?;
    }
    let envelope = Envelope {
        schema_version: SCHEMA_VERSION,
        config: &config,
        n: sample.n(),
        p: sample.p(),
        body: TestBody {
            result: &result,
            reject: result.p_value < a.method.alpha,
        },
    };
    write_json(a.output.as_deref(), &envelope)
}

fn estimate_cmd(a: EstimateArgs, workers: Option<usize>) -> Result<(), CliError> {
    validate_method(&a.method)?;
    let (data, kernels) = load(&a.common)?;
    let sample = &data.sample;
    let options = test_options(&a.common);
    let mut config = base_config("estimate", &a.common, &kernels, &a.method, a.output.as_deref(), workers);
    config.strategy = Some(a.strategy);
    config.include_zero = a.include_zero;
    config.c_n = a.c_n;
    let spec = bootstrap_spec(&a.method, sample, &mut config)?;
    if a.c_n.is_some() && a.strategy != StrategyArg::Threshold {
        return Err(CliError::Usage("--c-n only applies to the threshold strategy".into()));
    }
    let p = sample.p();
    let alpha = a.method.alpha;
    let result = match spec {
        None => {
            check_kernels(&kernels, &options)?;
            let sol = fit_with(sample, &kernels, options.scatter_options())?;
            match a.strategy {
                StrategyArg::Threshold => threshold_on_solution(&sol, a.c_n, alpha, a.include_zero)?,
                s => estimate_asymptotic(&sol, s.into(), alpha, a.include_zero)?,
            }
        }
        Some(spec) => {
            let test = |r: usize| bootstrap_test(sample, &kernels, r, &spec, options).map(|t| t.p_value);
            match a.strategy {
                StrategyArg::DivideConquer => divide_conquer_with(test, p, alpha, a.include_zero)?,
                StrategyArg::Forward => forward_estimate_with(test, p, alpha, a.include_zero)?,
                StrategyArg::Threshold => {
                    return Err(CliError::Usage(
                        "the threshold strategy uses the asymptotic statistic; use --method asym".into(),
                    ))
                }
            }
        }
    };
    if let Some(path) = &a.latent {
        write_latent(path, sample, &kernels, options)?;
    }
    let envelope = Envelope {
        schema_version: SCHEMA_VERSION,
        config: &config,
        n: sample.n(),
        p,
        body: EstimateBody { result: &result },
    };
    write_json(a.output.as_deref(), &envelope)
}

fn variogram_cmd(a: VariogramArgs) -> Result<(), CliError> {
    if a.bins == 0 {
        return Err(CliError::Usage("--bins must be at least 1".into()));
    }
    let data = read_dataset(&a.input)?;
    let sample = &data.sample;
    let (names, values): (Vec<String>, DMatrix<f64>) = if a.raw {
        (data.value_names.clone(), sample.values.clone())
    } else {
        let spec = a
            .kernels
            .as_deref()
            .ok_or_else(|| CliError::Usage("--kernels is required unless --raw is given".into()))?;
        let kernels = KernelSet::parse(spec)?;
        let options = TestOptions {
            centered: !a.uncentered,
            unnormalized: a.unnormalized,
            allow_nonconforming: a.allow_ball,
        };
        let sol = fit_with(sample, &kernels, options.scatter_options())?;
        ((1..=sol.p()).map(|i| format!("IC.{i}")).collect(), sol.latent)
    };
    let max_distance = match a.max_distance {
        Some(d) if d > 0.0 && d.is_finite() => d,
        Some(d) => return Err(CliError::Usage(format!("--max-distance must be positive, got {d}"))),
        None => {
            let (lo, hi) = sample.locations.bounding_box();
            0.5 * lo.iter().zip(&hi).map(|(l, h)| (h - l).powi(2)).sum::<f64>().sqrt()
        }
    };
    let bins = equal_bins(max_distance, a.bins);
    let header: Vec<String> = ["component", "h_lo", "h_hi", "h_mid", "gamma", "pair_count"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    let mut rows = Vec::new();
    for (c, name) in names.iter().enumerate() {
        let column: Vec<f64> = values.column(c).iter().copied().collect();
        for b in empirical_variogram(&column, &sample.locations, &bins)? {
            rows.push(vec![
                name.clone(),
                b.h_lo.to_string(),
                b.h_hi.to_string(),
                b.h_mid.to_string(),
                b.gamma.to_string(),
                b.pair_count.to_string(),
            ]);
        }
    }
    write_rows(a.output.as_deref(), &header, &rows)
}
