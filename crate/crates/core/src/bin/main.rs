use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use log::{info, warn};
use nalgebra::DMatrix;

use subspace_gmm::distributed::distributed_pipeline;
use subspace_gmm::estimator::{two_step_gmm, GmmOptions, RankRule, RankSpec, SubspaceEstimate, WeightShape};
use subspace_gmm::harness::experiment::moment_groups;
use subspace_gmm::harness::{
    bootstrap, emit, evaluate_projection_r2, run_experiment, simulate, whiten, BootMethod, BootstrapOptions, Degree,
    ExperimentConfig, ExperimentName, ModelConfig, OutputFormat,
};
use subspace_gmm::models::{load_csv, write_csv, Dataset, IndexVariant};
use subspace_gmm::moments::{materialize, MomentFunctionSet, Storage};
use subspace_gmm::{Error, Result};

#[derive(Parser)]
#[command(name = "subspace-gmm", version, about = "Subspace estimation from moment vectors with two-step GMM")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Draw a dataset from a built-in model and write it as CSV.
    Simulate(SimulateArgs),
    /// Estimate the subspace of a dataset.
    Estimate(EstimateArgs),
    /// Print the rank table and both rank estimates.
    Rank(RankArgs),
    /// Run a simulation study and write rows and summaries.
    Experiment(ExperimentArgs),
    /// Estimate from a directory of CSV shards through the two-round protocol.
    Distributed(DistributedArgs),
    /// Bootstrap the distance of resampled estimates to the full-data estimate.
    Bootstrap(BootstrapArgs),
    /// R² of y regressed on the projections onto an estimated subspace.
    R2(R2Args),
}

#[derive(Clone, Copy, ValueEnum)]
enum ModelKind {
    Factor,
    MixedLinear,
    MixedLogistic,
    Index,
}

#[derive(Args)]
struct SimulateArgs {
    #[arg(long, value_enum)]
    model: ModelKind,
    #[arg(long)]
    n: usize,
    #[arg(long, default_value_t = 10)]
    p: usize,
    /// Subspace dimension (factor) or number of components (mixtures).
    #[arg(long, default_value_t = 2)]
    r: usize,
    #[arg(long, default_value_t = 2.0)]
    mu: f64,
    #[arg(long, default_value_t = 1.0)]
    sigma: f64,
    #[arg(long, default_value_t = 4.0)]
    radius: f64,
    #[arg(long, default_value = "A", value_parser = parse_variant)]
    variant: IndexVariant,
    #[arg(long)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    /// Also write the true basis (p × r, CSV) here.
    #[arg(long)]
    truth: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Preset {
    Factor,
    Mixture,
    Index,
}

/// Input data and moment functions shared by the estimation commands.
#[derive(Args)]
struct MomentInput {
    /// CSV with a header row; every column except the response is a covariate.
    #[arg(long)]
    data: PathBuf,
    /// Response column name.
    #[arg(long)]
    response: Option<String>,
    /// Moment-set JSON document.
    #[arg(long, conflicts_with = "preset")]
    moments: Option<PathBuf>,
    /// Built-in moment groups instead of a JSON document.
    #[arg(long, value_enum, required_unless_present = "moments")]
    preset: Option<Preset>,
    /// Comma-separated preset groups to keep (default: all).
    #[arg(long, requires = "preset", value_delimiter = ',')]
    groups: Vec<String>,
    /// Noise level assumed by the factor preset.
    #[arg(long, default_value_t = 1.0)]
    noise_sigma: f64,
    /// Center covariates (and the response) before forming moments.
    #[arg(long)]
    center: bool,
}

#[derive(Args)]
struct WeightArgs {
    /// Eigenvalue threshold of the pseudoinverse.
    #[arg(long, default_value_t = 0.01)]
    delta: f64,
    #[arg(long, value_enum, default_value_t = ShapeArg::Full)]
    shape: ShapeArg,
}

#[derive(Clone, Copy, ValueEnum)]
enum ShapeArg {
    Full,
    Diagonal,
}

#[derive(Args)]
struct EstimateArgs {
    #[command(flatten)]
    input: MomentInput,
    #[command(flatten)]
    weight: WeightArgs,
    /// Subspace dimension, or `auto`.
    #[arg(long)]
    r: String,
    #[arg(long, value_enum, default_value_t = RuleArg::Tau)]
    rule: RuleArg,
    #[arg(long)]
    tau: Option<f64>,
    #[arg(long, default_value_t = 0.95)]
    eta: f64,
    /// Write the estimate as JSON here instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum RuleArg {
    Tau,
    Eta,
}

#[derive(Args)]
struct RankArgs {
    #[command(flatten)]
    input: MomentInput,
    #[command(flatten)]
    weight: WeightArgs,
    #[arg(long)]
    tau: Option<f64>,
    #[arg(long, default_value_t = 0.95)]
    eta: f64,
}

#[derive(Args)]
struct ExperimentArgs {
    #[arg(long, conflicts_with = "config", required_unless_present = "config", value_parser = parse_name)]
    name: Option<ExperimentName>,
    /// Experiment configuration JSON.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Master seed; overrides the one in a config file.
    #[arg(long)]
    seed: u64,
    #[arg(long)]
    replicates: Option<usize>,
    #[arg(long)]
    delta: Option<f64>,
    #[arg(long)]
    eta: Option<f64>,
    #[arg(long)]
    tau: Option<f64>,
    #[arg(long)]
    rank_estimates: bool,
    #[arg(long)]
    record_runtime: bool,
    #[arg(long, default_value = "csv", value_parser = parse_format)]
    format: OutputFormat,
    /// Output directory (csv) or file (json).
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct DistributedArgs {
    /// Directory of CSV shards, read in file-name order.
    #[arg(long)]
    shards: PathBuf,
    #[arg(long)]
    response: Option<String>,
    #[arg(long, conflicts_with = "preset")]
    moments: Option<PathBuf>,
    #[arg(long, value_enum, required_unless_present = "moments")]
    preset: Option<Preset>,
    #[arg(long, requires = "preset", value_delimiter = ',')]
    groups: Vec<String>,
    #[arg(long, default_value_t = 1.0)]
    noise_sigma: f64,
    #[arg(long)]
    r: usize,
    #[arg(long, default_value_t = 0.01)]
    delta: f64,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct BootstrapArgs {
    #[command(flatten)]
    input: MomentInput,
    #[arg(long)]
    r: usize,
    #[arg(long, default_value_t = 0.01)]
    delta: f64,
    #[arg(long, default_value_t = 100)]
    resamples: usize,
    #[arg(long)]
    seed: u64,
    /// Refit with W = I instead of the two-step weight.
    #[arg(long)]
    identity_weight: bool,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct R2Args {
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value = "y")]
    response: String,
    /// Subspace estimate JSON.
    #[arg(long)]
    estimate: PathBuf,
    #[arg(long, default_value = "1")]
    degree: String,
    /// Whiten the covariates before projecting.
    #[arg(long)]
    whiten: bool,
}

fn parse_variant(s: &str) -> std::result::Result<IndexVariant, String> {
    match s {
        "A" | "a" => Ok(IndexVariant::A),
        "B" | "b" => Ok(IndexVariant::B),
        "C" | "c" => Ok(IndexVariant::C),
        _ => Err(format!("variant must be A, B or C, got {s:?}")),
    }
}

fn parse_name(s: &str) -> std::result::Result<ExperimentName, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn parse_format(s: &str) -> std::result::Result<OutputFormat, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn model_config(a: &SimulateArgs) -> ModelConfig {
    match a.model {
        ModelKind::Factor => ModelConfig::Factor { p: a.p, r: a.r, mu: a.mu, sigma: a.sigma },
        ModelKind::MixedLinear => ModelConfig::MixedLinear { p: a.p, k: a.r, radius: a.radius, sigma: a.sigma },
        ModelKind::MixedLogistic => ModelConfig::MixedLogistic { p: a.p, k: a.r, radius: a.radius },
        ModelKind::Index => ModelConfig::Index { p: a.p, variant: a.variant },
    }
}

fn preset_set(preset: Preset, p: usize, noise_sigma: f64, groups: &[String]) -> Result<MomentFunctionSet> {
    // the model parameters other than p and σ do not affect the moment functions
    let model = match preset {
        Preset::Factor => ModelConfig::Factor { p, r: 1, mu: 0.0, sigma: noise_sigma },
        Preset::Mixture => ModelConfig::MixedLinear { p, k: 1, radius: 1.0, sigma: 1.0 },
        Preset::Index => ModelConfig::Index { p, variant: IndexVariant::A },
    };
    let all = moment_groups(&model)?;
    let picked: Vec<MomentFunctionSet> = if groups.is_empty() {
        all.into_iter().map(|(_, s)| s).collect()
    } else {
        groups
            .iter()
            .map(|g| {
                all.iter().find(|(tag, _)| tag == g).map(|(_, s)| s.clone()).ok_or_else(|| {
                    let tags: Vec<&str> = all.iter().map(|(t, _)| *t).collect();
                    Error::Config(format!("unknown moment group {g:?} (available: {})", tags.join(", ")))
                })
            })
            .collect::<Result<_>>()?
    };
    MomentFunctionSet::concat(&picked)
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::Io { path: path.to_path_buf(), source: e })
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::Io { path: path.to_path_buf(), source: e })
}

fn output(path: Option<&Path>, text: &str) -> Result<()> {
    match path {
        Some(p) => write_text(p, text),
        None => {
            print!("{text}");
            if !text.ends_with('\n') {
                println!();
            }
            Ok(())
        }
    }
}

fn moment_set(moments: Option<&Path>, preset: Option<Preset>, groups: &[String], noise_sigma: f64, p: usize) -> Result<MomentFunctionSet> {
    match (moments, preset) {
        (Some(path), _) => MomentFunctionSet::from_json(&read_text(path)?),
        (None, Some(preset)) => preset_set(preset, p, noise_sigma, groups),
        (None, None) => Err(Error::Config("give --moments or --preset".into())),
    }
}

fn load(input: &MomentInput) -> Result<(Dataset, MomentFunctionSet)> {
    let mut data = load_csv(&input.data, input.response.as_deref())?;
    if input.center {
        data = data.centered(data.has_response())?;
    }
    let set = moment_set(input.moments.as_deref(), input.preset, &input.groups, input.noise_sigma, data.p())?;
    Ok((data, set))
}

fn shape(s: ShapeArg) -> WeightShape {
    match s {
        ShapeArg::Full => WeightShape::Full,
        ShapeArg::Diagonal => WeightShape::Diagonal,
    }
}

fn report_warnings(est: &SubspaceEstimate) {
    for w in &est.warnings {
        warn!("{w}");
    }
}

fn matrix_csv(m: &DMatrix<f64>) -> String {
    let mut out = String::new();
    for row in m.row_iter() {
        let cells: Vec<String> = row.iter().map(|v| subspace_gmm::models::format_real(*v)).collect();
        out.push_str(&cells.join(","));
        out.push('\n');
    }
    out
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Simulate(a) => {
            let (data, truth) = simulate(&model_config(&a), a.n, a.seed)?;
            write_csv(&data, &a.out)?;
            if let Some(path) = &a.truth {
                write_text(path, &matrix_csv(&truth.basis))?;
            }
            info!("wrote {} × {} to {}", data.n(), data.p(), a.out.display());
        }
        Command::Estimate(a) => {
            let (data, set) = load(&a.input)?;
            let v = materialize(&data, &set, Storage::Auto)?;
            let rank = if a.r == "auto" {
                let rule = match a.rule {
                    RuleArg::Tau => RankRule::Tau,
                    RuleArg::Eta => RankRule::Eta,
                };
                RankSpec::Auto { rule, tau: a.tau, eta_quantile: a.eta }
            } else {
                let r = a.r.parse().map_err(|_| Error::Config(format!("--r must be a positive integer or auto, got {:?}", a.r)))?;
                RankSpec::Fixed { r }
            };
            let opts = GmmOptions { rank, ..GmmOptions::fixed(1) }.with_delta(a.weight.delta).with_shape(shape(a.weight.shape));
            let res = two_step_gmm(&v, &opts)?;
            if let Some(rank) = &res.rank {
                info!("r̂_τ = {}, r̂_η = {}", rank.r_tau, rank.r_eta);
            }
            report_warnings(&res.estimate);
            output(a.out.as_deref(), &res.estimate.to_json()?)?;
        }
        Command::Rank(a) => {
            let (data, set) = load(&a.input)?;
            let v = materialize(&data, &set, Storage::Auto)?;
            let opts = GmmOptions {
                rank: RankSpec::Auto { rule: RankRule::Tau, tau: a.tau, eta_quantile: a.eta },
                ..GmmOptions::fixed(1)
            }
            .with_delta(a.weight.delta)
            .with_shape(shape(a.weight.shape));
            let rank = two_step_gmm(&v, &opts)?.rank.expect("auto rank returns a rank estimate");
            for w in &rank.warnings {
                warn!("{w}");
            }
            print!("{}", rank.to_csv());
            eprintln!("r_tau={} r_eta={} tau={}", rank.r_tau, rank.r_eta, rank.tau);
        }
        Command::Experiment(a) => {
            let mut cfg = match (&a.name, &a.config) {
                (_, Some(path)) => ExperimentConfig::from_json(&read_text(path)?)?,
                (Some(name), None) => ExperimentConfig::preset(*name, a.seed)?,
                (None, None) => return Err(Error::Config("give --name or --config".into())),
            };
            cfg.seed = a.seed;
            if let Some(r) = a.replicates {
                cfg.replicates = r;
            }
            if let Some(d) = a.delta {
                cfg.delta = d;
            }
            if let Some(e) = a.eta {
                cfg.eta_quantile = e;
            }
            if a.tau.is_some() {
                cfg.tau = a.tau;
            }
            cfg.rank_estimates |= a.rank_estimates;
            cfg.record_runtime |= a.record_runtime;
            cfg.validate()?;
            let res = run_experiment(&cfg)?;
            emit(&res, a.format, &a.out)?;
            info!("{} rows written to {}", res.rows.len(), a.out.display());
        }
        Command::Distributed(a) => {
            let mut files: Vec<PathBuf> = fs::read_dir(&a.shards)
                .map_err(|e| Error::Io { path: a.shards.clone(), source: e })?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|p| p.extension().is_some_and(|x| x == "csv"))
                .collect();
            files.sort();
            if files.is_empty() {
                return Err(Error::Config(format!("no .csv shards in {}", a.shards.display())));
            }
            let shards = files.iter().map(|f| load_csv(f, a.response.as_deref())).collect::<Result<Vec<_>>>()?;
            let set = moment_set(a.moments.as_deref(), a.preset, &a.groups, a.noise_sigma, shards[0].p())?;
            let out = distributed_pipeline(&shards, &vec![set; shards.len()], a.r, a.delta)?;
            for t in &out.traffic {
                info!("shard {} round {}: {} bytes down, {} bytes up", t.shard_id, t.round, t.bytes_down, t.bytes_up);
            }
            report_warnings(&out.estimate);
            output(a.out.as_deref(), &out.estimate.to_json()?)?;
        }
        Command::Bootstrap(a) => {
            let (data, set) = load(&a.input)?;
            let method = if a.identity_weight {
                BootMethod::Identity { r: a.r }
            } else {
                BootMethod::Gmm { options: GmmOptions::fixed(a.r).with_delta(a.delta) }
            };
            let opts = BootstrapOptions { resamples: a.resamples, seed: a.seed, identity_resample: false };
            let res = bootstrap(&data, &set, &method, &opts, None)?;
            output(a.out.as_deref(), &res.to_csv())?;
            eprintln!("bootstrap SE of the distance to the full-data estimate: {}", res.standard_error());
        }
        Command::R2(a) => {
            let mut data = load_csv(&a.data, Some(&a.response))?;
            if a.whiten {
                data = whiten(&data)?;
            }
            let est = SubspaceEstimate::from_json(&read_text(&a.estimate)?)?;
            let degree: Degree = a.degree.parse()?;
            println!("{}", evaluate_projection_r2(&data, &est.u, degree)?);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
