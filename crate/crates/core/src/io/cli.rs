//! `flowguide` subcommands: train, sample, eval, cluster, plot.
//!
//! Exit codes: 0 on success, 1 for usage and configuration errors, 2 for
//! file and parse errors.

use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::datasets::{self, Dataset};
use crate::error::{Error, Result};
use crate::io::{checkpoint, config, csv, svg};
use crate::metrics::{ari, frechet_distance, nmi};
use crate::nn::{randn, Condition};
use crate::sampler::{integrate, GuidedVelocity, Method, SamplerConfig};
use crate::tensor::Tensor;
use crate::trainer::{self, metrics_csv, samples_guided, TrainConfig, TrainState};

/// Overrides the config seed of `train` when set.
pub const SEED_ENV: &str = "FLOWGUIDE_SEED";

#[derive(Debug, Parser)]
#[command(name = "flowguide", about = "Self-guided flow matching on 2-D toy data")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train a model and write metrics.csv and final.ckpt
    Train(TrainArgs),
    /// Draw samples from a checkpoint
    Sample(SampleArgs),
    /// Score a samples file against a dataset
    Eval(EvalArgs),
    /// K-means labels over a checkpoint's guidance features
    Cluster(ClusterArgs),
    /// Render a metrics CSV as line charts
    Plot(PlotArgs),
}

#[derive(Debug, Args)]
struct TrainArgs {
    /// Config file; defaults are used for missing keys
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory
    #[arg(long)]
    out: PathBuf,
    /// Override the iteration count
    #[arg(long)]
    iters: Option<u64>,
}

#[derive(Debug, Args)]
struct SampleArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long, default_value_t = 50)]
    steps: usize,
    #[arg(long, default_value_t = 0.4)]
    guidance: f64,
    /// euler or heun
    #[arg(long, default_value = "euler")]
    method: String,
    /// Condition every sample on this prototype
    #[arg(long, conflicts_with_all = ["query_file", "uncond"])]
    prototype: Option<usize>,
    /// CSV of x,y query points; each selects the prototype it is closest to
    #[arg(long, conflicts_with = "uncond")]
    query_file: Option<PathBuf>,
    /// Sample without a condition
    #[arg(long)]
    uncond: bool,
    /// Number of samples (per query with --query-file)
    #[arg(long, default_value_t = 1000)]
    n: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Samples CSV; a scatter plot is written next to it with an .svg extension
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct EvalArgs {
    #[arg(long)]
    samples: PathBuf,
    #[arg(long, default_value = "ring8")]
    dataset: String,
    #[arg(long, default_value_t = 8192)]
    n: usize,
    #[arg(long, default_value_t = 0.05)]
    data_noise: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Debug, Args)]
struct ClusterArgs {
    #[arg(long)]
    ckpt: PathBuf,
    /// Number of clusters; defaults to the checkpoint's prototype count
    #[arg(long)]
    k: Option<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Labels file, one per line
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct PlotArgs {
    #[arg(long)]
    metrics: PathBuf,
    /// Comma-separated columns
    #[arg(long, default_value = "loss_d,loss_sk,nmi,frechet")]
    columns: String,
    #[arg(long)]
    out: PathBuf,
}

/// Runs the CLI on `argv` (including the program name).
pub fn run<I, T>(argv: I, stdout: &mut dyn Write, stderr: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let text = e.render().to_string();
            let _ = if code == 0 { write!(stdout, "{text}") } else { write!(stderr, "{text}") };
            return code;
        }
    };
    let seed_env = std::env::var(SEED_ENV).ok();
    let result = match cli.command {
        Command::Train(a) => train(a, seed_env.as_deref(), stdout),
        Command::Sample(a) => sample(a, stdout),
        Command::Eval(a) => eval(a, stdout),
        Command::Cluster(a) => cluster(a, stdout),
        Command::Plot(a) => plot(a, stdout),
    };
    match result {
        Ok(()) => 0,
        Err(e) => {
            let _ = writeln!(stderr, "error: {e}");
            exit_code(&e)
        }
    }
}

pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Io { .. } | Error::Parse { .. } => 2,
        _ => 1,
    }
}

fn out_err(e: std::io::Error) -> Error {
    Error::io("<stdout>", e)
}

fn train(a: TrainArgs, seed_env: Option<&str>, stdout: &mut dyn Write) -> Result<()> {
    let mut cfg = match &a.config {
        Some(p) => config::load(p)?,
        None => TrainConfig::default(),
    };
    if let Some(iters) = a.iters {
        cfg.iters = iters;
    }
    if let Some(s) = seed_env {
        cfg.seed = s
            .trim()
            .parse()
            .map_err(|_| Error::Config(format!("{SEED_ENV} must be an unsigned integer, got `{s}`")))?;
    }
    let run = trainer::run_training(&cfg, Some(&a.out))?;
    std::fs::write(a.out.join("config.txt"), config::render(&cfg)).map_err(|e| Error::io(a.out.join("config.txt"), e))?;
    match run.log.last() {
        Some(r) => writeln!(
            stdout,
            "iter {} loss_d {:.5} loss_sk {:.5} nmi {:.4} ari {:.4} frechet {:.5}",
            r.iter, r.loss_d, r.loss_sk, r.nmi, r.ari, r.frechet
        ),
        None => writeln!(stdout, "no iterations run"),
    }
    .map_err(out_err)?;
    writeln!(stdout, "wrote {}", a.out.display()).map_err(out_err)
}

fn dataset_for(cfg: &TrainConfig) -> Result<Dataset> {
    datasets::by_name(&cfg.dataset, cfg.n, cfg.data_noise, cfg.seed)
}

/// Nearest-prototype assignment of every training point, as used for the
/// default mixture sampling.
fn training_assignments(state: &TrainState, cfg: &TrainConfig) -> Result<Vec<usize>> {
    let ds = dataset_for(cfg)?;
    let ev = trainer::evaluate(state, cfg, &ds, 3, &mut trainer::eval_rng(cfg.seed, state.iter))?;
    Ok(ev.assigned)
}

fn sample(a: SampleArgs, stdout: &mut dyn Write) -> Result<()> {
    let (cfg, state) = checkpoint::load(&a.ckpt)?;
    let sc = SamplerConfig {
        steps: a.steps,
        guidance: a.guidance,
        method: Method::from_name(&a.method)?,
    };
    sc.validate()?;
    if a.n == 0 {
        return Err(Error::Config("--n must be positive".into()));
    }
    let guided = samples_guided(&state, &cfg);
    let mut rng = ChaCha8Rng::seed_from_u64(a.seed);
    let protos: Vec<Option<usize>> = if let Some(k) = a.prototype {
        if k >= state.prototypes.len() {
            return Err(Error::Config(format!(
                "prototype {k} out of range ({} prototypes)",
                state.prototypes.len()
            )));
        }
        vec![Some(k); a.n]
    } else if let Some(qf) = &a.query_file {
        let queries = state.standardizer.apply(&csv::read_points(qf)?);
        let noise = randn(&mut rng, queries.rows(), 2);
        let picks = state.query_context(&cfg).assign(&queries, &noise)?;
        for (i, k) in picks.iter().enumerate() {
            writeln!(stdout, "query {i} -> prototype {k}").map_err(out_err)?;
        }
        picks.iter().flat_map(|&k| std::iter::repeat_n(Some(k), a.n)).collect()
    } else if a.uncond || !guided {
        vec![None; a.n]
    } else {
        let assigned = training_assignments(&state, &cfg)?;
        (0..a.n)
            .map(|_| Some(assigned[rng.random_range(0..assigned.len())]))
            .collect()
    };
    let null_cond = if guided { Condition::Null } else { Condition::Zero };
    let conds: Vec<Condition> = protos
        .iter()
        .map(|p| p.map_or(null_cond.clone(), Condition::Prototype))
        .collect();
    let x_start = randn(&mut rng, protos.len(), 2).scale(cfg.path.prior_scale());
    let model = GuidedVelocity {
        field: &state.field,
        table: cfg.table(&state),
        conds,
        guidance: sc.guidance,
    };
    let samples = state.standardizer.invert(&integrate(&model, &x_start, &sc)?.samples);
    csv::write_samples(&a.out, &samples, &protos)?;
    let points: Vec<[f64; 2]> = (0..samples.rows()).map(|r| [samples.get(r, 0), samples.get(r, 1)]).collect();
    let svg_path = a.out.with_extension("svg");
    svg::write(&svg_path, &svg::scatter_svg(&points, &protos)?)?;
    writeln!(stdout, "wrote {} samples to {}", samples.rows(), a.out.display()).map_err(out_err)
}

/// Index of the nearest row of `reference` for each row of `points`.
fn nearest_rows(points: &Tensor, reference: &Tensor) -> Vec<usize> {
    (0..points.rows())
        .map(|i| {
            let p = points.row(i);
            let mut best = (0, f64::INFINITY);
            for j in 0..reference.rows() {
                let r = reference.row(j);
                let d = (p[0] - r[0]).powi(2) + (p[1] - r[1]).powi(2);
                if d < best.1 {
                    best = (j, d);
                }
            }
            best.0
        })
        .collect()
}

fn eval(a: EvalArgs, stdout: &mut dyn Write) -> Result<()> {
    let (samples, protos) = csv::read_samples(&a.samples)?;
    let ds = datasets::by_name(&a.dataset, a.n, a.data_noise, a.seed)?;
    let frechet = frechet_distance(&samples, &ds.samples)?;
    writeln!(stdout, "frechet = {frechet}").map_err(out_err)?;
    let labeled: Vec<usize> = (0..protos.len()).filter(|&i| protos[i].is_some()).collect();
    if labeled.len() < 2 {
        writeln!(stdout, "nmi = n/a\nari = n/a").map_err(out_err)?;
        return Ok(());
    }
    let pts = samples.gather_rows(&labeled)?;
    let truth: Vec<usize> = nearest_rows(&pts, &ds.samples).into_iter().map(|j| ds.labels[j]).collect();
    let given: Vec<usize> = labeled.iter().map(|&i| protos[i].unwrap()).collect();
    writeln!(stdout, "nmi = {}", nmi(&given, &truth)?).map_err(out_err)?;
    writeln!(stdout, "ari = {}", ari(&given, &truth)?).map_err(out_err)
}

fn cluster(a: ClusterArgs, stdout: &mut dyn Write) -> Result<()> {
    let (cfg, state) = checkpoint::load(&a.ckpt)?;
    let ds = dataset_for(&cfg)?;
    let k = a.k.unwrap_or(cfg.clusters);
    let km = trainer::cluster_features(&state, &cfg, &state.standardizer.apply(&ds.samples), k, a.seed)?;
    csv::write_labels(&a.out, &km.labels)?;
    writeln!(
        stdout,
        "k = {k}\nnmi = {}\nari = {}",
        nmi(&km.labels, &ds.labels)?,
        ari(&km.labels, &ds.labels)?
    )
    .map_err(out_err)
}

fn plot(a: PlotArgs, stdout: &mut dyn Write) -> Result<()> {
    let table = csv::Table::load(&a.metrics)?;
    let columns: Vec<&str> = a.columns.split(',').map(str::trim).filter(|c| !c.is_empty()).collect();
    svg::write(&a.out, &svg::line_chart_svg(&table, &columns)?)?;
    writeln!(stdout, "wrote {}", a.out.display()).map_err(out_err)
}

/// Writes the metrics log of a run; exposed for callers driving training themselves.
pub fn write_metrics(path: &Path, log: &[trainer::LogRow]) -> Result<()> {
    std::fs::write(path, metrics_csv(log)).map_err(|e| Error::io(path, e))
}
