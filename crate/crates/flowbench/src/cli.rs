//! Command-line surface: gen-data, precompute, train, sample, eval-field,
//! grad-var, report.
//!
//! Every command resolves its configuration (file, flags, environment seed),
//! echoes the result to `<command>.config.json` in its output directory, and
//! writes its artifacts there. Exit codes: 0 success, 1 runtime or I/O
//! failure, 2 usage or configuration error. `timing.json` is the one output
//! excluded from the bitwise-reproducibility contract.

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::config::{resolve_seed, Config, DatasetKind, ProviderKind, ResolvedConfig, SEED_ENV_VAR};
use crate::data::{
    precompute_knn, read_candidates, read_dataset, read_samples, write_candidates, write_dataset,
    write_samples, Dataset, KnnTable, Source,
};
use crate::error::{Error, Result};
use crate::eval::{
    euler_sample, gradient_variance, kde, read_variance_traces, scott_bandwidth,
    write_variance_report, FieldGrid, GradVarMode,
};
use crate::model::MlpModel;
use crate::numeric::Point;
use crate::posterior::{Label, Pools};
use crate::rng::SeededRng;
use crate::svg::{heatmap, line_plot, moving_average_by_x, scatter_plot, HeatGrid, Series};
use crate::train::{
    read_metrics, train_loop, train_loop_resumed, write_metrics, MetricsLog, Objective,
    SnapshotReason, TrainHooks, TrainState,
};

#[derive(Parser)]
#[command(
    name = "flowbench",
    version,
    about = "Flow-matching workbench for low-dimensional synthetic distributions"
)]
pub struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a dataset file from the configured family
    GenData(GenDataArgs),
    /// Build the nearest-neighbor candidate table for a dataset
    Precompute(PrecomputeArgs),
    /// Train a velocity model and log per-step metrics
    Train(TrainArgs),
    /// Integrate samples out of a trained checkpoint
    Sample(SampleArgs),
    /// Score a checkpoint against the analytic field on a fixed grid
    EvalField(EvalFieldArgs),
    /// Measure per-batch gradient variance around the mean gradient
    GradVar(GradVarArgs),
    /// Render SVG figures from the artifacts in a run directory
    Report(ReportArgs),
}

#[derive(Args)]
struct CommonArgs {
    /// JSON config file; flags override its values
    #[arg(long)]
    config: Option<PathBuf>,
    /// Seed; overrides the config file and the environment
    #[arg(long)]
    seed: Option<u64>,
}

impl CommonArgs {
    fn load(&self) -> Result<(Config, u64)> {
        let config = Config::load(self.config.as_deref())?;
        let env = std::env::var(SEED_ENV_VAR).ok();
        let (seed, warning) = resolve_seed(self.seed, config.seed, env.as_deref())?;
        if let Some(w) = warning {
            eprintln!("{w}");
        }
        Ok((config, seed))
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum DatasetKindArg {
    TwoMoons,
    GaussianMixture,
}

#[derive(Clone, Copy, ValueEnum)]
enum ObjectiveArg {
    Fm,
    Pafm,
}

impl From<ObjectiveArg> for Objective {
    fn from(a: ObjectiveArg) -> Self {
        match a {
            ObjectiveArg::Fm => Objective::Fm,
            ObjectiveArg::Pafm => Objective::Pafm,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum ProviderArg {
    Full,
    Knn,
    Perturbation,
    Augmentation,
}

impl From<ProviderArg> for ProviderKind {
    fn from(a: ProviderArg) -> Self {
        match a {
            ProviderArg::Full => ProviderKind::Full,
            ProviderArg::Knn => ProviderKind::Knn,
            ProviderArg::Perturbation => ProviderKind::Perturbation,
            ProviderArg::Augmentation => ProviderKind::Augmentation,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum GradVarModeArg {
    Resampled,
    FrozenPerElement,
}

impl From<GradVarModeArg> for GradVarMode {
    fn from(a: GradVarModeArg) -> Self {
        match a {
            GradVarModeArg::Resampled => GradVarMode::Resampled,
            GradVarModeArg::FrozenPerElement => GradVarMode::FrozenPerElement,
        }
    }
}

#[derive(Args)]
struct GenDataArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Output directory
    #[arg(long)]
    out: PathBuf,
    /// Dataset family
    #[arg(long, value_enum)]
    kind: Option<DatasetKindArg>,
    /// Points per class
    #[arg(long)]
    n_per_class: Option<usize>,
    /// Jitter standard deviation
    #[arg(long)]
    noise: Option<f64>,
}

#[derive(Args)]
struct PrecomputeArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Dataset CSV from gen-data
    #[arg(long)]
    dataset: PathBuf,
    /// Output directory
    #[arg(long)]
    out: PathBuf,
    /// Candidates per pool, owner included
    #[arg(long)]
    k: Option<usize>,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Dataset CSV from gen-data
    #[arg(long)]
    dataset: PathBuf,
    /// Output directory
    #[arg(long)]
    out: PathBuf,
    /// Training objective
    #[arg(long, value_enum)]
    objective: Option<ObjectiveArg>,
    /// Candidate pool provider (pafm only)
    #[arg(long, value_enum)]
    provider: Option<ProviderArg>,
    /// Candidates CSV from precompute (knn provider)
    #[arg(long)]
    candidates: Option<PathBuf>,
    /// Total optimizer steps
    #[arg(long)]
    steps: Option<usize>,
    /// Minibatch size
    #[arg(long)]
    batch_size: Option<usize>,
    /// Initial learning rate of the cosine schedule
    #[arg(long)]
    lr0: Option<f64>,
    /// Evaluation and checkpoint cadence in steps
    #[arg(long)]
    eval_every: Option<usize>,
    /// Resume from a train_state.bin written by an earlier run
    #[arg(long)]
    resume: Option<PathBuf>,
}

#[derive(Args)]
struct SampleArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Model checkpoint from train
    #[arg(long)]
    checkpoint: PathBuf,
    /// Output directory
    #[arg(long)]
    out: PathBuf,
    /// Number of samples
    #[arg(long)]
    n: Option<usize>,
    /// Euler steps per sample
    #[arg(long)]
    steps: Option<usize>,
    /// Class slot for a conditional checkpoint
    #[arg(long)]
    label: Option<usize>,
}

#[derive(Args)]
struct EvalFieldArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Model checkpoint from train
    #[arg(long)]
    checkpoint: PathBuf,
    /// Dataset CSV the model was trained on
    #[arg(long)]
    dataset: PathBuf,
    /// Output directory
    #[arg(long)]
    out: PathBuf,
    /// Interpolant draws in the grid
    #[arg(long)]
    grid_pairs: Option<usize>,
    /// Time slices in the grid
    #[arg(long)]
    grid_times: Option<usize>,
}

#[derive(Args)]
struct GradVarArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Model checkpoint from train
    #[arg(long)]
    checkpoint: PathBuf,
    /// Dataset CSV the model was trained on
    #[arg(long)]
    dataset: PathBuf,
    /// Output directory
    #[arg(long)]
    out: PathBuf,
    /// Objective whose gradient is measured
    #[arg(long, value_enum)]
    objective: Option<ObjectiveArg>,
    /// Candidate pool provider (pafm only)
    #[arg(long, value_enum)]
    provider: Option<ProviderArg>,
    /// Candidates CSV from precompute (knn provider)
    #[arg(long)]
    candidates: Option<PathBuf>,
    /// Number of measurement batches
    #[arg(long)]
    b: Option<usize>,
    /// Size of each measurement batch
    #[arg(long)]
    batch_size: Option<usize>,
    /// How batches draw their interpolants
    #[arg(long, value_enum)]
    mode: Option<GradVarModeArg>,
}

#[derive(Args)]
struct ReportArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Run directory holding dataset.csv, samples.csv, and metrics.csv
    #[arg(long)]
    dir: PathBuf,
}

/// Parses the process arguments, runs the command, and maps errors to the
/// exit-code contract.
pub fn main_entry() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::Config(_) | Error::InvalidArgument(_) => ExitCode::from(2),
                _ => ExitCode::from(1),
            }
        }
    }
}

fn dispatch(command: Command) -> Result<()> {
    match command {
        Command::GenData(args) => cmd_gen_data(args),
        Command::Precompute(args) => cmd_precompute(args),
        Command::Train(args) => cmd_train(args),
        Command::Sample(args) => cmd_sample(args),
        Command::EvalField(args) => cmd_eval_field(args),
        Command::GradVar(args) => cmd_grad_var(args),
        Command::Report(args) => cmd_report(args),
    }
}

fn ensure_out(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    Ok(())
}

fn wrote(path: &Path) {
    println!("wrote {}", path.display());
}

/// Attaches the configured source to a dataset read from disk (the file
/// format does not carry the source).
fn attach_source(config: &Config, dataset: Dataset) -> Result<Dataset> {
    let mean = Point::checked(config.dataset.source_mean.clone())?;
    if mean.dim() != dataset.dim() {
        return Err(Error::config(format!(
            "source mean has dimension {}, dataset has {}",
            mean.dim(),
            dataset.dim()
        )));
    }
    dataset.with_source(Source::new(mean, config.dataset.source_std)?)
}

/// Loads the candidate table and builds pools when the objective needs them.
fn pools_for(
    config: &Config,
    dataset: &Dataset,
    objective: Objective,
    candidates_flag: Option<&Path>,
    seed: u64,
) -> Result<Option<Pools>> {
    if objective != Objective::Pafm {
        return Ok(None);
    }
    let table: Option<KnnTable> = if config.pools.provider == ProviderKind::Knn {
        let path = candidates_flag
            .or(config.pools.candidates_file.as_deref())
            .ok_or_else(|| {
                Error::config("the knn provider needs --candidates (or pools.candidates_file)")
            })?;
        Some(read_candidates(path, dataset.n())?)
    } else {
        None
    };
    Ok(Some(config.build_pools(dataset, table.as_ref(), seed)?))
}

fn cmd_gen_data(args: GenDataArgs) -> Result<()> {
    let (mut config, seed) = args.common.load()?;
    if let Some(kind) = args.kind {
        config.dataset.kind = match kind {
            DatasetKindArg::TwoMoons => DatasetKind::TwoMoons,
            DatasetKindArg::GaussianMixture => DatasetKind::GaussianMixture,
        };
    }
    if let Some(n) = args.n_per_class {
        config.dataset.n_per_class = n;
    }
    if let Some(noise) = args.noise {
        config.dataset.noise_std = noise;
    }
    config.validate()?;
    ensure_out(&args.out)?;
    let dataset = config.build_dataset(seed)?;
    let path = args.out.join("dataset.csv");
    write_dataset(&path, &dataset)?;
    wrote(&path);
    wrote(&ResolvedConfig::new("gen-data", seed, config).write(&args.out)?);
    Ok(())
}

fn cmd_precompute(args: PrecomputeArgs) -> Result<()> {
    let (mut config, seed) = args.common.load()?;
    if let Some(k) = args.k {
        config.pools.k = k;
    }
    config.validate()?;
    ensure_out(&args.out)?;
    let dataset = read_dataset(&args.dataset)?;
    let table = precompute_knn(&dataset, config.pools.k)?;
    let path = args.out.join("candidates.csv");
    write_candidates(&path, &table)?;
    wrote(&path);
    wrote(&ResolvedConfig::new("precompute", seed, config).write(&args.out)?);
    Ok(())
}

fn cmd_train(args: TrainArgs) -> Result<()> {
    let started = Instant::now();
    let (mut config, seed) = args.common.load()?;
    if let Some(o) = args.objective {
        config.train.objective = o.into();
    }
    if let Some(p) = args.provider {
        config.pools.provider = p.into();
    }
    if let Some(s) = args.steps {
        config.train.steps = s;
    }
    if let Some(b) = args.batch_size {
        config.train.batch_size = b;
    }
    if let Some(lr) = args.lr0 {
        config.train.lr0 = lr;
    }
    if let Some(e) = args.eval_every {
        config.train.eval_every = e;
    }
    config.validate()?;
    ensure_out(&args.out)?;

    let dataset = attach_source(&config, read_dataset(&args.dataset)?)?;
    let objective = config.train.objective;
    let pools = pools_for(&config, &dataset, objective, args.candidates.as_deref(), seed)?;
    let opts = config.train_options(seed);
    let grid = FieldGrid::build_sized(
        &dataset,
        seed,
        config.train.t_eps,
        config.model.conditioned,
        config.eval.grid_pairs,
        config.eval.grid_times,
    )?;
    let setup_seconds = started.elapsed().as_secs_f64();

    let ckpt_path = args.out.join("model.ckpt");
    let state_path = args.out.join("train_state.bin");
    let mut evaluator = |model: &MlpModel, step: usize| -> Result<f64> {
        let mse = grid.field_mse(model)?;
        eprintln!("step {step}: field mse {mse:.6e}");
        Ok(mse)
    };
    let mut snapshot =
        |model: &MlpModel, state: &TrainState, _step: usize, _reason: SnapshotReason| {
            model.save(&ckpt_path)?;
            state.save(&state_path)
        };
    let mut hooks = TrainHooks {
        evaluator: Some(&mut evaluator),
        snapshot: Some(&mut snapshot),
    };

    let train_started = Instant::now();
    let (run, resumed_from) = match &args.resume {
        None => (train_loop(&opts, &dataset, pools.as_ref(), &mut hooks)?, None),
        Some(path) => {
            let state = TrainState::load(path)?;
            let from = state.step;
            (
                train_loop_resumed(&opts, &dataset, pools.as_ref(), state, &mut hooks)?,
                Some(from),
            )
        }
    };
    let train_seconds = train_started.elapsed().as_secs_f64();
    let steps_run = opts.steps - resumed_from.unwrap_or(0);

    // a resumed run re-emits only its own rows; splice them after the rows
    // the interrupted run already logged
    let metrics_path = args.out.join("metrics.csv");
    let mut log = MetricsLog::new();
    if let Some(from) = resumed_from {
        if metrics_path.exists() {
            for row in read_metrics(&metrics_path)?.rows() {
                if row.step <= from {
                    log.push(*row);
                }
            }
        }
    }
    for row in run.log.rows() {
        log.push(*row);
    }
    write_metrics(&metrics_path, &log)?;
    wrote(&metrics_path);
    wrote(&ckpt_path);
    wrote(&state_path);

    let timing_path = args.out.join("timing.json");
    let samples_per_sec = if train_seconds > 0.0 {
        (steps_run * opts.batch_size) as f64 / train_seconds
    } else {
        0.0
    };
    let timing = serde_json::json!({
        "command": "train",
        "total_seconds": started.elapsed().as_secs_f64(),
        "phases": { "setup_seconds": setup_seconds, "train_seconds": train_seconds },
        "steps_run": steps_run,
        "samples_per_sec": samples_per_sec,
    });
    std::fs::write(&timing_path, format!("{timing:#}\n"))?;
    wrote(&timing_path);
    wrote(&ResolvedConfig::new("train", seed, config).write(&args.out)?);
    Ok(())
}

fn cmd_sample(args: SampleArgs) -> Result<()> {
    let (mut config, seed) = args.common.load()?;
    if let Some(n) = args.n {
        config.sample.n_samples = n;
    }
    if let Some(s) = args.steps {
        config.sample.n_steps = s;
    }
    config.validate()?;
    ensure_out(&args.out)?;

    let model = MlpModel::load(&args.checkpoint)?;
    let mean = Point::checked(config.dataset.source_mean.clone())?;
    if mean.dim() != model.d() {
        return Err(Error::config(format!(
            "source mean has dimension {}, checkpoint expects {}",
            mean.dim(),
            model.d()
        )));
    }
    let source = Source::new(mean, config.dataset.source_std)?;
    let y = match (model.n_classes(), args.label) {
        (0, None) => Label::Unconditional,
        (0, Some(_)) => {
            return Err(Error::config("--label given, but the checkpoint is unconditional"))
        }
        (_, Some(c)) => Label::Class(c),
        (n, None) => {
            return Err(Error::config(format!(
                "the checkpoint is conditional on {n} classes; pass --label"
            )))
        }
    };
    let mut rng = SeededRng::derived(seed, "sample", 0);
    let samples = euler_sample(
        &model,
        &source,
        config.sample.n_samples,
        config.sample.n_steps,
        &mut rng,
        y,
    )?;
    let path = args.out.join("samples.csv");
    write_samples(&path, &samples)?;
    wrote(&path);
    wrote(&ResolvedConfig::new("sample", seed, config).write(&args.out)?);
    Ok(())
}

fn cmd_eval_field(args: EvalFieldArgs) -> Result<()> {
    let (mut config, seed) = args.common.load()?;
    if let Some(p) = args.grid_pairs {
        config.eval.grid_pairs = p;
    }
    if let Some(t) = args.grid_times {
        config.eval.grid_times = t;
    }
    config.validate()?;
    ensure_out(&args.out)?;

    let model = MlpModel::load(&args.checkpoint)?;
    let dataset = attach_source(&config, read_dataset(&args.dataset)?)?;
    let grid = FieldGrid::build_sized(
        &dataset,
        seed,
        config.train.t_eps,
        model.n_classes() > 0,
        config.eval.grid_pairs,
        config.eval.grid_times,
    )?;
    let rows = grid.mse_by_time(&model)?;
    let mut out = String::from("t,mse\n");
    for (t, mse) in &rows {
        use std::fmt::Write as _;
        writeln!(out, "{t},{mse}").expect("string write");
    }
    let path = args.out.join("field_eval.csv");
    std::fs::write(&path, out)?;
    wrote(&path);
    wrote(&ResolvedConfig::new("eval-field", seed, config).write(&args.out)?);
    Ok(())
}

fn cmd_grad_var(args: GradVarArgs) -> Result<()> {
    let (mut config, seed) = args.common.load()?;
    if let Some(o) = args.objective {
        config.train.objective = o.into();
    }
    if let Some(p) = args.provider {
        config.pools.provider = p.into();
    }
    if let Some(b) = args.b {
        config.eval.gradvar_batches = b;
    }
    if let Some(bs) = args.batch_size {
        config.eval.gradvar_batch_size = bs;
    }
    if let Some(m) = args.mode {
        config.eval.gradvar_mode = m.into();
    }
    config.validate()?;
    ensure_out(&args.out)?;

    let model = MlpModel::load(&args.checkpoint)?;
    let dataset = attach_source(&config, read_dataset(&args.dataset)?)?;
    let objective = config.train.objective;
    let pools = pools_for(&config, &dataset, objective, args.candidates.as_deref(), seed)?;
    let report = gradient_variance(
        &model,
        &dataset,
        objective,
        pools.as_ref(),
        config.eval.gradvar_batches,
        config.eval.gradvar_batch_size,
        seed,
        config.train.t_eps,
        config.eval.gradvar_mode,
    )?;
    println!(
        "mean trace {:.6e} over {} batches of {}",
        report.mean_trace, report.b, report.batch_size
    );
    let path = args.out.join("variance.csv");
    write_variance_report(&path, &report)?;
    wrote(&path);
    wrote(&ResolvedConfig::new("grad-var", seed, config).write(&args.out)?);
    Ok(())
}

fn cmd_report(args: ReportArgs) -> Result<()> {
    let (config, seed) = args.common.load()?;
    let dir = &args.dir;
    let dataset_path = dir.join("dataset.csv");
    let samples_path = dir.join("samples.csv");
    let metrics_path = dir.join("metrics.csv");
    let missing: Vec<String> = [&dataset_path, &samples_path, &metrics_path]
        .iter()
        .filter(|p| !p.exists())
        .map(|p| p.file_name().unwrap().to_string_lossy().into_owned())
        .collect();
    if !missing.is_empty() {
        return Err(Error::Io(std::io::Error::new(
            std::io::ErrorKind::NotFound,
            format!(
                "report needs dataset.csv, samples.csv, and metrics.csv in {}; missing: {}",
                dir.display(),
                missing.join(", ")
            ),
        )));
    }

    let dataset = read_dataset(&dataset_path)?;
    let samples = read_samples(&samples_path)?;
    let metrics = read_metrics(&metrics_path)?;
    if dataset.dim() != 2 || samples.iter().any(|p| p.dim() != 2) {
        return Err(Error::invalid("report figures need 2-d points"));
    }

    let target_xy: Vec<(f64, f64)> =
        (0..dataset.n()).map(|i| (dataset.point_slice(i)[0], dataset.point_slice(i)[1])).collect();
    let sample_xy: Vec<(f64, f64)> = samples.iter().map(|p| (p[0], p[1])).collect();
    let scatter = scatter_plot(
        "generated vs target",
        "x",
        "y",
        &[
            Series { name: "target", points: &target_xy },
            Series { name: "generated", points: &sample_xy },
        ],
    )?;
    let scatter_path = dir.join("scatter.svg");
    std::fs::write(&scatter_path, scatter)?;
    wrote(&scatter_path);

    let mse_pts: Vec<(f64, f64)> = metrics
        .rows()
        .iter()
        .filter_map(|r| r.field_mse.map(|m| (r.step as f64, m)))
        .collect();
    if mse_pts.is_empty() {
        return Err(Error::Io(std::io::Error::other(
            "metrics.csv has no field_mse values to plot",
        )));
    }
    let smoothed = moving_average_by_x(&mse_pts, 100.0);
    let field_svg = line_plot(
        "velocity field error",
        "step",
        "field mse",
        &[
            Series { name: "logged", points: &mse_pts },
            Series { name: "100-step mean", points: &smoothed },
        ],
        true,
    )?;
    let field_path = dir.join("field_mse.svg");
    std::fs::write(&field_path, field_svg)?;
    wrote(&field_path);

    // overlay whichever variance measurements are present
    let mut variance_files: Vec<PathBuf> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.file_name()
                .and_then(|n| n.to_str())
                .is_some_and(|n| n.starts_with("variance") && n.ends_with(".csv"))
        })
        .collect();
    variance_files.sort();
    if variance_files.is_empty() {
        println!("no variance*.csv found, skipping variance.svg");
    } else {
        let mut named: Vec<(String, Vec<(f64, f64)>)> = Vec::new();
        for path in &variance_files {
            let traces = read_variance_traces(path)?;
            let stem = path.file_stem().unwrap().to_string_lossy().into_owned();
            named.push((
                stem,
                traces.iter().enumerate().map(|(b, t)| (b as f64, *t)).collect(),
            ));
        }
        let series: Vec<Series<'_>> = named
            .iter()
            .map(|(name, pts)| Series { name, points: pts })
            .collect();
        let variance_svg = line_plot(
            "gradient variance per measurement batch",
            "batch",
            "trace",
            &series,
            false,
        )?;
        let variance_path = dir.join("variance.svg");
        std::fs::write(&variance_path, variance_svg)?;
        wrote(&variance_path);
    }

    let density_path = dir.join("density.svg");
    std::fs::write(&density_path, density_figure(&dataset, &samples)?)?;
    wrote(&density_path);
    wrote(&ResolvedConfig::new("report", seed, config).write(dir)?);
    Ok(())
}

/// KDE heatmap of the generated samples over the joint bounding box of the
/// dataset and the samples.
fn density_figure(dataset: &Dataset, samples: &[Point]) -> Result<String> {
    let mut x0 = f64::INFINITY;
    let mut x1 = f64::NEG_INFINITY;
    let mut y0 = f64::INFINITY;
    let mut y1 = f64::NEG_INFINITY;
    let all = (0..dataset.n())
        .map(|i| (dataset.point_slice(i)[0], dataset.point_slice(i)[1]))
        .chain(samples.iter().map(|p| (p[0], p[1])));
    for (x, y) in all {
        x0 = x0.min(x);
        x1 = x1.max(x);
        y0 = y0.min(y);
        y1 = y1.max(y);
    }
    let pad_x = (x1 - x0).max(1e-6) * 0.1;
    let pad_y = (y1 - y0).max(1e-6) * 0.1;
    let (x0, x1, y0, y1) = (x0 - pad_x, x1 + pad_x, y0 - pad_y, y1 + pad_y);

    let bandwidth = scott_bandwidth(samples)?;
    let (cols, rows) = (96usize, 72usize);
    let mut values = Vec::with_capacity(cols * rows);
    for row in 0..rows {
        for col in 0..cols {
            let q = Point::new(vec![
                x0 + (col as f64 + 0.5) / cols as f64 * (x1 - x0),
                y0 + (row as f64 + 0.5) / rows as f64 * (y1 - y0),
            ]);
            values.push(kde(samples, &q, bandwidth)?);
        }
    }
    heatmap(
        "sample density",
        "x",
        "y",
        &HeatGrid { x0, x1, y0, y1, cols, rows, values },
    )
}
