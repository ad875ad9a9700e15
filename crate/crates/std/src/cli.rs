//! The `causalnl` command line.

use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Instant;

use crate::checkpoint;
use crate::experiment::{
    load_results, oracle_transition, prepare_output, run_experiment, run_result, train_method, write_aggregate,
    write_run, DatasetSpec, ExperimentConfig, NoiseSettings, TrainOverrides,
};
use crate::formats::{read_moon_csv, read_noise_csv, write_idx_dataset, write_moon_csv, write_noise_csv, Split};
use crate::logging::MetricsLog;
use crate::plot::plot_decision_boundary;
use crate::resolve_output;
use anyhow::{bail, Context};
use causalnl_core::metrics::DEFAULT_GRID_RESOLUTION;
use causalnl_core::noise::{synthesize, NoiseKind};
use causalnl_core::train::Method;
use clap::{Args, Parser, Subcommand, ValueEnum};

/// Learning with instance-dependent label noise via a dual-branch causal VAE.
///
/// Relative output paths resolve against $CAUSALNL_OUTPUT_ROOT when it is set.
#[derive(Parser)]
#[command(name = "causalnl", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate MOON CSV files or write an IDX training subset.
    GenData(GenDataArgs),
    /// Synthesize a noise realization and freeze it to CSV.
    GenNoise(GenNoiseArgs),
    /// Train one method and write metrics, summary and checkpoint.
    Train(TrainArgs),
    /// Run a full experiment described by a JSON config.
    Bench(BenchArgs),
    /// Render the decision boundary of a 2D checkpoint.
    Plot(PlotArgs),
    /// Print aggregate tables for an experiment directory.
    Report(ReportArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum DataKind {
    Moon,
    Idx,
}

#[derive(Args, Clone)]
struct DataArgs {
    /// Dataset: `moon` (generated) or `idx` (read from --data-dir).
    #[arg(long, value_enum, default_value = "moon")]
    dataset: DataKind,
    /// Directory with train-/t10k- IDX files.
    #[arg(long)]
    data_dir: Option<PathBuf>,
    /// Random training subset size for IDX data.
    #[arg(long)]
    train_subset: Option<usize>,
    /// Seed of the data generator or subset draw.
    #[arg(long, default_value_t = 0)]
    data_seed: u64,
}

impl DataArgs {
    fn spec(&self) -> anyhow::Result<DatasetSpec> {
        Ok(match self.dataset {
            DataKind::Moon => DatasetSpec::moon(self.data_seed),
            DataKind::Idx => DatasetSpec::Idx {
                dir: self.data_dir.clone().context("--data-dir is required for IDX data")?,
                name: None,
                train_subset: self.train_subset,
                seed: self.data_seed,
            },
        })
    }
}

#[derive(Args)]
struct GenDataArgs {
    #[command(flatten)]
    data: DataArgs,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct NoiseArgs {
    #[arg(long, default_value = "instance-dependent")]
    noise_kind: NoiseKind,
    #[arg(long, default_value_t = 0.45)]
    noise_rate: f64,
    /// Seed for noise and training.
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct GenNoiseArgs {
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    noise: NoiseArgs,
    /// Output CSV (`index,clean,noisy`).
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long, default_value = "causalnl")]
    method: String,
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    noise: NoiseArgs,
    /// Use a frozen noise CSV instead of synthesizing.
    #[arg(long)]
    noise_file: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    latent_dim: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    learning_rate: Option<f64>,
    /// Random crop and flip on image data.
    #[arg(long)]
    augment: bool,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    /// Replace an existing nonempty output directory.
    #[arg(long)]
    force: bool,
    #[arg(long)]
    quiet: bool,
}

#[derive(Args)]
struct BenchArgs {
    /// Experiment config JSON.
    #[arg(long)]
    config: PathBuf,
    /// Replace an existing nonempty output directory.
    #[arg(long)]
    force: bool,
    #[arg(long)]
    quiet: bool,
}

#[derive(Args)]
struct PlotArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// MOON CSV with the points to draw; the generated MOON test split otherwise.
    #[arg(long)]
    points: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    data_seed: u64,
    #[arg(long, default_value_t = DEFAULT_GRID_RESOLUTION)]
    resolution: usize,
    /// Output PNG.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ReportArgs {
    /// Experiment directory.
    #[arg(long)]
    dir: PathBuf,
    /// Also rewrite aggregate.csv and aggregate.json.
    #[arg(long)]
    write: bool,
}

fn gen_data(args: GenDataArgs) -> anyhow::Result<()> {
    let out = resolve_output(&args.out);
    let (train, test) = args.data.spec()?.load()?;
    match args.data.dataset {
        DataKind::Moon => {
            write_moon_csv(&out.join("train.csv"), &train, None)?;
            write_moon_csv(&out.join("test.csv"), &test, None)?;
        }
        DataKind::Idx => {
            write_idx_dataset(&out, Split::Train, &train)?;
            write_idx_dataset(&out, Split::Test, &test)?;
        }
    }
    eprintln!(
        "wrote {} train / {} test instances to {}",
        train.len(),
        test.len(),
        out.display()
    );
    Ok(())
}

fn gen_noise(args: GenNoiseArgs) -> anyhow::Result<()> {
    let (train, _) = args.data.spec()?.load()?;
    let spec = NoiseSettings {
        kind: args.noise.noise_kind,
        rate: args.noise.noise_rate,
        flip_std: causalnl_core::noise::DEFAULT_FLIP_STD,
    }
    .spec(args.noise.seed);
    let noisy = synthesize(&train, &spec)?;
    let out = resolve_output(&args.out);
    write_noise_csv(&out, &noisy)?;
    eprintln!(
        "realized noise rate {:.4} -> {}",
        noisy.realized_noise_rate()?,
        out.display()
    );
    Ok(())
}

fn train(args: TrainArgs) -> anyhow::Result<()> {
    let method: Method = args.method.parse()?;
    let spec = args.data.spec()?;
    let (train_set, test) = spec.load()?;
    let noise = NoiseSettings {
        kind: args.noise.noise_kind,
        rate: args.noise.noise_rate,
        flip_std: causalnl_core::noise::DEFAULT_FLIP_STD,
    }
    .spec(args.noise.seed);
    let noisy = match &args.noise_file {
        Some(path) => read_noise_csv(path, train_set)?,
        None => synthesize(&train_set, &noise)?,
    };
    let transition = match method {
        Method::Forward => Some(oracle_transition(&noisy, &noise)?),
        _ => None,
    };
    let overrides = TrainOverrides {
        epochs: args.epochs,
        latent_dim: args.latent_dim,
        batch_size: args.batch_size,
        learning_rate: args.learning_rate,
        augment: args.augment.then_some(true),
        ..TrainOverrides::default()
    };
    let cfg = overrides.apply(spec.default_train_config(noise.rate, args.noise.seed));
    let out = resolve_output(&args.out);
    prepare_output(&out, args.force)?;
    write_noise_csv(&out.join("noise.csv"), &noisy)?;
    let noisy = noisy.without_clean_labels();

    let started = Instant::now();
    let mut log = MetricsLog::new(!args.quiet);
    let trained = train_method(method, &noisy, &test, &cfg, transition.as_ref(), &mut log)?;
    let mut result = run_result(method, &spec.name(), noise, args.noise.seed, &trained.history)?;
    result.wall_time_secs = started.elapsed().as_secs_f64();
    write_run(&out, &trained, &result, &log.step_csv()?)?;
    println!(
        "{}: final accuracy {:.4}, last-10 mean {:.4} ({:.1}s)",
        method.name(),
        result.final_accuracy(),
        result.last10_accuracy,
        result.wall_time_secs
    );
    Ok(())
}

fn print_table(rows: &[causalnl_core::metrics::AggregateRow]) {
    println!(
        "{:<12} {:<16} {:<20} {:>6} {:>7} {:>9} {:>8} {:>10}",
        "method", "dataset", "noise", "rate", "repeats", "mean %", "std %", "epoch std"
    );
    for r in rows {
        println!(
            "{:<12} {:<16} {:<20} {:>6.2} {:>7} {:>9.2} {:>8.2} {:>10.2}",
            r.method,
            r.dataset,
            r.noise_kind,
            r.rate,
            r.repeats,
            100.0 * r.mean,
            100.0 * r.std,
            100.0 * r.epoch_std
        );
    }
}

fn bench(args: BenchArgs) -> anyhow::Result<bool> {
    let cfg = ExperimentConfig::from_json_file(&args.config)?;
    let report = run_experiment(&cfg, args.force, !args.quiet)?;
    print_table(&report.aggregate);
    for f in &report.failures {
        eprintln!("run {} repeat {} failed: {}", f.method, f.repeat, f.message);
    }
    println!("results in {}", report.output_dir.display());
    Ok(report.failures.is_empty())
}

fn plot(args: PlotArgs) -> anyhow::Result<()> {
    let model = checkpoint::load(&args.checkpoint)?;
    let points = match &args.points {
        Some(path) => read_moon_csv(path)?.0,
        None => DatasetSpec::moon(args.data_seed).load()?.1,
    };
    let out = resolve_output(&args.out);
    plot_decision_boundary(&model, &points, args.resolution, &out)?;
    eprintln!("wrote {}", out.display());
    Ok(())
}

fn report(args: ReportArgs) -> anyhow::Result<()> {
    let dir = resolve_output(&args.dir);
    let results = load_results(&dir)?;
    if results.is_empty() {
        bail!("no results under {}", dir.display());
    }
    let rows = if args.write {
        write_aggregate(&dir, &results)?
    } else {
        causalnl_core::metrics::aggregate(&results)?
    };
    print_table(&rows);
    Ok(())
}

fn dispatch(cli: Cli) -> anyhow::Result<bool> {
    match cli.command {
        Command::GenData(a) => gen_data(a)?,
        Command::GenNoise(a) => gen_noise(a)?,
        Command::Train(a) => train(a)?,
        Command::Bench(a) => return bench(a),
        Command::Plot(a) => plot(a)?,
        Command::Report(a) => report(a)?,
    }
    Ok(true)
}

/// Parses `args` (including the program name) and runs the command.
/// Returns `Ok(false)` when an experiment finished with failed runs.
pub fn run<I, T>(args: I) -> anyhow::Result<bool>
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    dispatch(Cli::try_parse_from(args)?)
}

/// Entry point of the `causalnl` binary.
pub fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => e.exit(),
    };
    match dispatch(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
