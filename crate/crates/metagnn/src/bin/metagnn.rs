//! Experiment driver CLI.
//!
//! `metagnn run` reproduces the few-shot node-classification protocol on a
//! citation dataset: k-fold class splits, meta-training on the retained
//! classes, repeated meta-test support selections, and plain-training
//! baselines paired against the meta models on identical tasks.

use std::collections::HashMap;
use std::path::PathBuf;
use std::process::ExitCode;
use std::str::FromStr;

use clap::{Args, Parser, Subcommand};

use metagnn::bench::{
    config::parse_config_file, emit_results, render_csv, render_markdown, run_experiment,
    ExperimentConfig, Model, OutputFormat,
};
use metagnn::error::{Error, Result};
use metagnn::meta::{LossAgg, Order, Reduction};

#[derive(Parser)]
#[command(name = "metagnn", version, about = "Few-shot node classification benchmarks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one experiment sweep and emit a results table.
    Run(Box<RunArgs>),
}

#[derive(Args)]
struct RunArgs {
    /// Flat key-value config file supplying any flag; explicit flags win.
    #[arg(long)]
    config: Option<PathBuf>,

    /// Dataset tag used in logs (defaults to the content file stem).
    #[arg(long)]
    dataset: Option<String>,
    /// Path to the `.content` file (node_key, features..., label).
    #[arg(long)]
    content: Option<PathBuf>,
    /// Path to the `.cites` file (two node keys per line).
    #[arg(long)]
    cites: Option<PathBuf>,
    /// Model: meta-sgc, meta-gcn, sgc or gcn.
    #[arg(long)]
    model: Option<String>,
    /// Support shots per class.
    #[arg(long)]
    k: Option<usize>,
    /// Number of random class splits.
    #[arg(long)]
    folds: Option<usize>,
    /// Meta-test support selections per fold.
    #[arg(long)]
    selections: Option<usize>,
    /// Meta-gradient mode: first or second.
    #[arg(long)]
    order: Option<String>,
    /// Task learning rate α₁.
    #[arg(long)]
    alpha1: Option<f64>,
    /// Meta learning rate α₂.
    #[arg(long)]
    alpha2: Option<f64>,
    /// Tasks per meta-update.
    #[arg(long)]
    batch: Option<usize>,
    /// Meta-training iterations.
    #[arg(long)]
    iters: Option<usize>,
    /// Root seed; all randomness derives from it.
    #[arg(long)]
    seed: Option<u64>,
    /// Output path (stdout when omitted).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Output format: csv or markdown.
    #[arg(long)]
    format: Option<String>,

    /// Inner gradient-descent steps (meta-training and meta-testing).
    #[arg(long = "inner-steps")]
    inner_steps: Option<usize>,
    /// Query nodes per meta-training task.
    #[arg(long)]
    p: Option<usize>,
    /// Batch loss aggregation: mean or sum.
    #[arg(long)]
    agg: Option<String>,
    /// Episode loss row reduction: mean or sum.
    #[arg(long)]
    loss: Option<String>,
    /// GCN hidden width.
    #[arg(long)]
    hidden: Option<usize>,
    /// Propagation depth.
    #[arg(long)]
    hops: Option<usize>,
    /// Held-out class count |C₂|.
    #[arg(long)]
    c2: Option<usize>,
    /// Baseline training epochs.
    #[arg(long = "baseline-epochs")]
    baseline_epochs: Option<usize>,
    /// Baseline learning rate (default 0.2 for SGC, 0.01 for GCN).
    #[arg(long = "baseline-lr")]
    baseline_lr: Option<f64>,
    /// Worker threads (results are identical regardless).
    #[arg(long)]
    threads: Option<usize>,
    /// Emit a telemetry line every N meta-iterations.
    #[arg(long = "progress-every")]
    progress_every: Option<usize>,
}

/// A flag value, falling back to the config file, parsed from text.
fn resolve<T: FromStr>(
    flag: Option<T>,
    file: &HashMap<String, String>,
    key: &str,
) -> Result<Option<T>> {
    if flag.is_some() {
        return Ok(flag);
    }
    match file.get(key) {
        Some(text) => text
            .parse::<T>()
            .map(Some)
            .map_err(|_| Error::Contract(format!("config key {key}: cannot parse {text:?}"))),
        None => Ok(None),
    }
}

fn required<T>(value: Option<T>, key: &str) -> Result<T> {
    value.ok_or_else(|| Error::Contract(format!("missing required option --{key}")))
}

fn parse_order(s: &str) -> Result<Order> {
    match s {
        "first" => Ok(Order::First),
        "second" => Ok(Order::Second),
        other => Err(Error::Contract(format!(
            "unknown order {other:?}; expected first or second"
        ))),
    }
}

fn parse_agg(s: &str) -> Result<LossAgg> {
    match s {
        "mean" => Ok(LossAgg::Mean),
        "sum" => Ok(LossAgg::Sum),
        other => Err(Error::Contract(format!(
            "unknown aggregation {other:?}; expected mean or sum"
        ))),
    }
}

fn parse_reduction(s: &str) -> Result<Reduction> {
    match s {
        "mean" => Ok(Reduction::Mean),
        "sum" => Ok(Reduction::Sum),
        other => Err(Error::Contract(format!(
            "unknown loss reduction {other:?}; expected mean or sum"
        ))),
    }
}

fn run(args: RunArgs) -> Result<bool> {
    let file = match &args.config {
        Some(path) => parse_config_file(path)?,
        None => HashMap::new(),
    };

    let content = required(resolve(args.content, &file, "content")?, "content")?;
    let cites = required(resolve(args.cites, &file, "cites")?, "cites")?;
    let model = Model::parse(&required(resolve(args.model, &file, "model")?, "model")?)?;
    let dataset = resolve(args.dataset, &file, "dataset")?.unwrap_or_else(|| {
        content
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "dataset".into())
    });

    if let Some(threads) = resolve(args.threads, &file, "threads")? {
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build_global()
            .map_err(|e| Error::Contract(format!("thread pool: {e}")))?;
    }

    let mut cfg = ExperimentConfig::new(&dataset, &content, &cites, model);
    if let Some(v) = resolve(args.k, &file, "k")? {
        cfg.k = v;
    }
    if let Some(v) = resolve(args.folds, &file, "folds")? {
        cfg.folds = v;
    }
    if let Some(v) = resolve(args.selections, &file, "selections")? {
        cfg.support_selections = v;
    }
    if let Some(v) = resolve(args.c2, &file, "c2")? {
        cfg.c2_size = v;
    }
    if let Some(v) = resolve(args.seed, &file, "seed")? {
        cfg.seed = v;
    }
    if let Some(v) = resolve(args.baseline_epochs, &file, "baseline-epochs")? {
        cfg.baseline_epochs = v;
    }
    cfg.baseline_lr = resolve(args.baseline_lr, &file, "baseline-lr")?;
    cfg.meta.alpha1 = resolve(args.alpha1, &file, "alpha1")?;
    cfg.meta.alpha2 = resolve(args.alpha2, &file, "alpha2")?;
    cfg.meta.inner_steps = resolve(args.inner_steps, &file, "inner-steps")?;
    cfg.meta.batch = resolve(args.batch, &file, "batch")?;
    cfg.meta.iters = resolve(args.iters, &file, "iters")?;
    cfg.meta.p = resolve(args.p, &file, "p")?;
    cfg.meta.hidden = resolve(args.hidden, &file, "hidden")?;
    cfg.meta.hops = resolve(args.hops, &file, "hops")?;
    if let Some(text) = resolve(args.order, &file, "order")? {
        cfg.meta.order = Some(parse_order(&text)?);
    }
    if let Some(text) = resolve(args.agg, &file, "agg")? {
        cfg.meta.agg = Some(parse_agg(&text)?);
    }
    if let Some(text) = resolve(args.loss, &file, "loss")? {
        cfg.meta.reduction = Some(parse_reduction(&text)?);
    }
    let format = match resolve(args.format, &file, "format")? {
        Some(text) => OutputFormat::parse(&text)?,
        None => OutputFormat::Csv,
    };
    let progress_every = resolve(args.progress_every, &file, "progress-every")?.unwrap_or(50);

    eprintln!(
        "running {} on {dataset}: K={}, {} fold(s) x {} selection(s), seed {}",
        model.name(),
        cfg.k,
        cfg.folds,
        cfg.support_selections,
        cfg.seed
    );
    let table = run_experiment(&cfg, &mut |fold, record| {
        if progress_every > 0 && record.iteration % progress_every == 0 {
            eprintln!(
                "fold {fold} iter {} query-loss {:.6} elapsed {:.1}s",
                record.iteration, record.mean_query_loss, record.elapsed_secs
            );
        }
    })?;

    match &args.out {
        Some(path) => emit_results(&table, path, format)?,
        None => {
            let text = match format {
                OutputFormat::Csv => render_csv(&table),
                OutputFormat::Markdown => render_markdown(&table),
            };
            print!("{text}");
        }
    }
    eprintln!(
        "{}: mean accuracy {:.4} +- {:.4} over {} run(s)",
        model.name(),
        table.mean(),
        table.std(),
        table.count()
    );

    if let Some(msg) = &table.failure {
        eprintln!("run incomplete: {msg}");
        return Ok(false);
    }
    Ok(true)
}

fn main() -> ExitCode {
    env_logger::init();
    let cli = Cli::parse();
    let Command::Run(args) = cli.command;
    match run(*args) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
