use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use genda::assimilation::{run, ExperimentConfig, Method, RunResult};
use genda::dataset::{build_dataset, Dataset};
use genda::diffusion::{log_csv, train_with, LogRow, ScheduleConfig, TrainConfig};
use genda::harness::{
    cell_seeds, default_f_values, default_p_values, grid_csv, hovmoller_export, rmse_grid_with, CheckpointStore,
    Manifest, SweepSpec,
};
use genda::lorenz96::ModelConfig;
use genda::nn::{init_params, ArchConfig, Checkpoint};
use rand::SeedableRng;

mod config;

use config::FileConfig;

const EXIT_USAGE: u8 = 2;
const EXIT_RUNTIME: u8 = 3;

#[derive(Debug, Parser)]
#[command(
    name = "genda",
    version,
    about = "Lorenz96 twin experiments: LETKF vs diffusion pseudo ensembles"
)]
struct Cli {
    /// Master seed; every random stream of a command is derived from it.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Flat JSON file with defaults for any flag (flags take precedence).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Simulate Nature runs, observe them, and write a training dataset.
    GenerateData(DataArgs),
    /// Train a denoiser for the observation interval of a dataset.
    Train(TrainArgs),
    /// Run one assimilation experiment and write its RMSE series.
    Assimilate(RunArgs),
    /// Time-mean RMSE over a grid of forcings, intervals and methods.
    Sweep(SweepArgs),
    /// Run one experiment and export Nature, assimilated and error fields.
    Hovmoller(RunArgs),
}

#[derive(Debug, Args)]
struct DataArgs {
    #[arg(long)]
    runs: Option<usize>,
    #[arg(long)]
    run_steps: Option<usize>,
    #[arg(long)]
    forcing_f: Option<f64>,
    #[arg(long)]
    p: Option<usize>,
    #[arg(long)]
    noise_std: Option<f64>,
}

#[derive(Debug, Args)]
struct TrainArgs {
    /// Dataset directory written by `generate-data`.
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    train_steps: Option<u64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    p_drop: Option<f64>,
    #[arg(long)]
    base_channels: Option<usize>,
    #[arg(long)]
    log_every: Option<u64>,
    #[arg(long)]
    checkpoint_every: Option<u64>,
    /// Continue from the checkpoint already in the output directory.
    #[arg(long)]
    resume: bool,
}

#[derive(Debug, Args)]
struct RunArgs {
    #[arg(long)]
    method: Option<String>,
    #[arg(long)]
    f_nature: Option<f64>,
    #[arg(long)]
    f_sim: Option<f64>,
    #[arg(long)]
    p: Option<usize>,
    /// Number of DA steps.
    #[arg(long)]
    steps: Option<usize>,
    /// Checkpoint directory, or a directory of checkpoints (one per interval).
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[command(flatten)]
    common: ExperimentArgs,
}

#[derive(Debug, Args)]
struct ExperimentArgs {
    #[arg(long)]
    ensembles: Option<usize>,
    #[arg(long)]
    inflation: Option<f64>,
    /// Localization cutoff distance in grid units.
    #[arg(long)]
    cutoff: Option<f64>,
    /// Leading DA steps left out of the time-mean RMSE.
    #[arg(long)]
    discard: Option<usize>,
    /// Forecast/analysis cycles run before recording starts.
    #[arg(long)]
    spinup: Option<usize>,
    #[arg(long)]
    ddim_steps: Option<usize>,
    #[arg(long)]
    guidance_w: Option<f64>,
    #[arg(long)]
    eta: Option<f64>,
}

#[derive(Debug, Args)]
struct SweepArgs {
    /// Comma-separated subset of letkf,generative.
    #[arg(long, value_delimiter = ',')]
    methods: Option<Vec<String>>,
    #[arg(long, value_delimiter = ',')]
    f_values: Option<Vec<f64>>,
    #[arg(long, value_delimiter = ',')]
    p_values: Option<Vec<usize>>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    f_sim: Option<f64>,
    /// Directory holding one checkpoint per interval.
    #[arg(long)]
    checkpoints: Option<PathBuf>,
    #[arg(long)]
    workers: Option<usize>,
    #[command(flatten)]
    common: ExperimentArgs,
}

#[derive(Debug)]
enum Failure {
    Usage(String),
    Runtime(String),
}

impl From<genda::Error> for Failure {
    fn from(e: genda::Error) -> Self {
        match e {
            genda::Error::Config(_) => Failure::Usage(e.to_string()),
            other => Failure::Runtime(other.to_string()),
        }
    }
}

type Outcome<T = ()> = Result<T, Failure>;

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(EXIT_USAGE)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(EXIT_USAGE)
        }
        Err(Failure::Runtime(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(EXIT_RUNTIME)
        }
    }
}

/// Command-line flags merged over config-file values.
struct Ctx {
    file: FileConfig,
    seed: u64,
    out: PathBuf,
}

fn dispatch(cli: Cli) -> Outcome {
    let file = match &cli.config {
        Some(path) => FileConfig::load(path).map_err(Failure::Usage)?,
        None => FileConfig::default(),
    };
    let ctx = Ctx {
        seed: cli.seed.or(file.seed).unwrap_or(0),
        out: cli
            .out
            .clone()
            .or(file.out.clone())
            .unwrap_or_else(|| PathBuf::from("out")),
        file,
    };
    match cli.command {
        Command::GenerateData(a) => generate_data(&ctx, a),
        Command::Train(a) => train_cmd(&ctx, a),
        Command::Assimilate(a) => assimilate(&ctx, a, false),
        Command::Sweep(a) => sweep(&ctx, a),
        Command::Hovmoller(a) => assimilate(&ctx, a, true),
    }
}

fn parse_method(s: &str) -> Outcome<Method> {
    s.parse().map_err(|e: genda::Error| Failure::Usage(e.to_string()))
}

fn write_manifest(ctx: &Ctx, command: &str, resolved: &impl Serialize, hashes: &[(String, String)]) -> Outcome {
    let mut m = Manifest::new(command, ctx.seed, resolved)?;
    m.checkpoint_hashes.extend(hashes.iter().cloned());
    m.save(&ctx.out)?;
    Ok(())
}

#[derive(Serialize)]
struct DataResolved {
    runs: usize,
    run_steps: usize,
    forcing_f: f64,
    p: usize,
    noise_std: f64,
}

fn generate_data(ctx: &Ctx, a: DataArgs) -> Outcome {
    let f = &ctx.file;
    let r = DataResolved {
        runs: a.runs.or(f.runs).unwrap_or(100),
        run_steps: a.run_steps.or(f.run_steps).unwrap_or(1000),
        forcing_f: a.forcing_f.or(f.forcing_f).unwrap_or(8.0),
        p: a.p.or(f.p).unwrap_or(1),
        noise_std: a.noise_std.or(f.noise_std).unwrap_or(1.0),
    };
    let model = ModelConfig::with_forcing(r.forcing_f);
    eprintln!("simulating {} runs of {} steps", r.runs, r.run_steps);
    let ds = build_dataset(r.runs, r.run_steps, &model, r.p, r.noise_std, ctx.seed)?;
    ds.save(&ctx.out)?;
    write_manifest(ctx, "generate-data", &r, &[])?;
    eprintln!("wrote {} samples to {}", ds.len(), ctx.out.display());
    Ok(())
}

#[derive(Serialize)]
struct TrainResolved {
    data: PathBuf,
    arch: ArchConfig,
    schedule: ScheduleConfig,
    train: TrainConfig,
    resume: bool,
}

fn train_cmd(ctx: &Ctx, a: TrainArgs) -> Outcome {
    let f = &ctx.file;
    let data = a
        .data
        .or(f.data.clone())
        .ok_or_else(|| Failure::Usage("train needs --data <dataset dir>".into()))?;
    let defaults = TrainConfig::default();
    let tcfg = TrainConfig {
        n_steps: a.train_steps.or(f.train_steps).unwrap_or(defaults.n_steps),
        batch_size: a.batch_size.or(f.batch_size).unwrap_or(defaults.batch_size),
        lr: a.lr.or(f.lr).unwrap_or(defaults.lr),
        p_drop: a.p_drop.or(f.p_drop).unwrap_or(defaults.p_drop),
        seed: ctx.seed,
        log_every: a.log_every.or(f.log_every).unwrap_or(defaults.log_every),
        checkpoint_every: a
            .checkpoint_every
            .or(f.checkpoint_every)
            .unwrap_or(defaults.checkpoint_every),
        ..defaults
    };
    let resume = a.resume || f.resume.unwrap_or(false);
    let ds = Dataset::load(&data)?;
    let (start, old_log) = if resume {
        let ckpt = Checkpoint::load(&ctx.out)?;
        let log = std::fs::read_to_string(ctx.out.join("train_log.csv")).unwrap_or_default();
        (ckpt, log)
    } else {
        let arch = ArchConfig {
            base_channels: a
                .base_channels
                .or(f.base_channels)
                .unwrap_or(ArchConfig::default().base_channels),
            ..ArchConfig::default()
        };
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(ctx.seed);
        let params = init_params(&arch, ds.n(), &mut rng)?;
        let ckpt = Checkpoint {
            params,
            schedule: ScheduleConfig::default(),
            normalizer: ds.normalizer(),
            interval_p: ds.interval_p(),
            train_steps: 0,
            optimizer: None,
        };
        (ckpt, String::new())
    };
    let resolved = TrainResolved {
        data,
        arch: start.params.arch.clone(),
        schedule: start.schedule,
        train: tcfg.clone(),
        resume,
    };
    eprintln!(
        "training {} parameters for {} steps (p = {})",
        start.params.num_params(),
        tcfg.n_steps,
        ds.interval_p()
    );
    let progress = |r: &LogRow| {
        eprintln!(
            "step {:>7}  train {:.5}  held-out {:.5}  {:.0}s",
            r.step, r.train_loss, r.heldout_loss, r.wall_seconds
        )
    };
    let outcome = train_with(start, &ds, &tcfg, Some(&ctx.out), progress)?;
    if !old_log.is_empty() {
        // keep the earlier rows; the first new row repeats the resume point
        let fresh = log_csv(&outcome.log[1..]);
        let merged = format!("{}{}", old_log, fresh.split_once('\n').map_or("", |(_, rows)| rows));
        std::fs::write(ctx.out.join("train_log.csv"), merged)
            .map_err(|e| Failure::Runtime(format!("{}: {e}", ctx.out.display())))?;
    }
    let hash = outcome.checkpoint.content_hash()?;
    write_manifest(
        ctx,
        "train",
        &resolved,
        &[(format!("p{}", outcome.checkpoint.interval_p), hash)],
    )?;
    Ok(())
}

fn apply_common(cfg: &mut ExperimentConfig, common: &ExperimentArgs, f: &FileConfig) {
    if let Some(v) = common.ensembles.or(f.ensembles) {
        cfg.n_ensembles = v;
    }
    if let Some(v) = common.inflation.or(f.inflation) {
        cfg.letkf_cfg.inflation = v;
    }
    if let Some(v) = common.cutoff.or(f.cutoff) {
        cfg.letkf_cfg.cutoff_d = v;
    }
    if let Some(v) = common.discard.or(f.discard) {
        cfg.discard = v;
    }
    if let Some(v) = common.spinup.or(f.spinup) {
        cfg.spinup_steps = v;
    }
    if let Some(v) = common.ddim_steps.or(f.ddim_steps) {
        cfg.sampler.num_steps = v;
    }
    if let Some(v) = common.guidance_w.or(f.guidance_w) {
        cfg.sampler.guidance_w = v;
    }
    if let Some(v) = common.eta.or(f.eta) {
        cfg.sampler.stochasticity_eta = v;
    }
}

#[derive(Serialize)]
struct RunResolved<'a> {
    method: Method,
    checkpoint: &'a Option<PathBuf>,
    experiment: &'a ExperimentConfig,
}

fn load_checkpoint(path: &Path, p: usize) -> Outcome<Checkpoint> {
    let store = CheckpointStore::open(path)?;
    store.get(p).cloned().ok_or_else(|| {
        Failure::Usage(format!(
            "no checkpoint for p = {p} under {} (found p = {:?})",
            path.display(),
            store.intervals()
        ))
    })
}

fn assimilate(ctx: &Ctx, a: RunArgs, hovmoller: bool) -> Outcome {
    let f = &ctx.file;
    let method = parse_method(a.method.as_deref().or(f.method.as_deref()).unwrap_or("letkf"))?;
    let f_nature = a.f_nature.or(f.f_nature).unwrap_or(8.0);
    let p = a.p.or(f.p).unwrap_or(1);
    let steps = a.steps.or(f.steps).unwrap_or(1000);
    let mut cfg = ExperimentConfig::new(method, f_nature, p, steps, cell_seeds(ctx.seed, f_nature, p, method));
    cfg.f_sim = a.f_sim.or(f.f_sim).unwrap_or(cfg.f_sim);
    apply_common(&mut cfg, &a.common, f);
    cfg.validate()?;
    let ckpt_path = a.checkpoint.or(f.checkpoint.clone());
    let ckpt = match (method, &ckpt_path) {
        (Method::Generative, None) => {
            return Err(Failure::Usage("the generative method needs --checkpoint <dir>".into()))
        }
        (Method::Generative, Some(path)) => Some(load_checkpoint(path, p)?),
        (Method::Letkf, _) => None,
    };
    eprintln!(
        "{method}: F_nature = {f_nature}, F_sim = {}, p = {p}, {steps} steps",
        cfg.f_sim
    );
    let result: RunResult = run(method, &cfg, ckpt.as_ref())?;
    result.save(&ctx.out, "run")?;
    if hovmoller {
        hovmoller_export(&result, &ctx.out)?;
    }
    let hashes: Vec<(String, String)> = result
        .checkpoint_hash
        .iter()
        .map(|h| (format!("p{p}"), h.clone()))
        .collect();
    let resolved = RunResolved {
        method,
        checkpoint: &ckpt_path,
        experiment: &cfg,
    };
    write_manifest(
        ctx,
        if hovmoller { "hovmoller" } else { "assimilate" },
        &resolved,
        &hashes,
    )?;
    println!("time_mean_rmse {:.6}", result.time_mean_rmse);
    Ok(())
}

#[derive(Serialize)]
struct SweepResolved<'a> {
    checkpoints: &'a Option<PathBuf>,
    spec: &'a SweepSpec,
}

fn sweep(ctx: &Ctx, a: SweepArgs) -> Outcome {
    let f = &ctx.file;
    let methods = match a.methods.or(f.methods.clone()) {
        Some(list) => list
            .iter()
            .map(|m| parse_method(m.trim()))
            .collect::<Outcome<Vec<_>>>()?,
        None => vec![Method::Letkf, Method::Generative],
    };
    let mut spec = SweepSpec::new(a.steps.or(f.steps).unwrap_or(1000), ctx.seed);
    spec.methods = methods;
    spec.f_values = a.f_values.or(f.f_values.clone()).unwrap_or_else(default_f_values);
    spec.p_values = a.p_values.or(f.p_values.clone()).unwrap_or_else(default_p_values);
    spec.workers = a.workers.or(f.workers).unwrap_or(1);
    spec.template.f_sim = a.f_sim.or(f.f_sim).unwrap_or(spec.template.f_sim);
    apply_common(&mut spec.template, &a.common, f);
    let ckpt_dir = a.checkpoints.or(f.checkpoints.clone());
    let store = match &ckpt_dir {
        Some(dir) => CheckpointStore::open(dir)?,
        None => CheckpointStore::default(),
    };
    spec.validate(&store)?;
    let total = spec.cells().len();
    eprintln!("sweeping {total} cells with {} worker(s)", spec.workers);
    let cells = rmse_grid_with(&spec, &store, |c| match (&c.time_mean_rmse, &c.error) {
        (Some(v), _) => eprintln!("{} F={} p={}: {v:.4}", c.method, c.f_nature, c.interval_p),
        (None, Some(e)) => eprintln!("{} F={} p={}: failed: {e}", c.method, c.f_nature, c.interval_p),
        _ => {}
    })?;
    std::fs::create_dir_all(&ctx.out).map_err(|e| Failure::Runtime(format!("{}: {e}", ctx.out.display())))?;
    std::fs::write(ctx.out.join("sweep.csv"), grid_csv(&cells))
        .map_err(|e| Failure::Runtime(format!("{}: {e}", ctx.out.display())))?;
    let hashes: Vec<(String, String)> = store
        .hashes()?
        .into_iter()
        .filter(|(p, _)| spec.p_values.contains(p))
        .map(|(p, h)| (format!("p{p}"), h))
        .collect();
    write_manifest(
        ctx,
        "sweep",
        &SweepResolved {
            checkpoints: &ckpt_dir,
            spec: &spec,
        },
        &hashes,
    )?;
    let failed = cells.iter().filter(|c| !c.ok()).count();
    if failed > 0 {
        eprintln!("{failed} of {total} cells failed; see sweep.csv");
    }
    Ok(())
}
