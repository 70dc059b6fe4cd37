//! `rmoe-lab`: train, evaluate, analyze and sweep router variants.

mod analyze;
mod sweep;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use rmoe_lab::training::{self, RunConfig, TrainOptions};
use rmoe_lab::{Error, Result};

#[derive(Debug, Parser)]
#[command(name = "rmoe-lab", version, about = "Layerwise recurrent routers for mixture-of-experts LMs")]
struct Cli {
    /// Worker threads; defaults to all cores.
    #[arg(long, global = true, env = "RMOE_LAB_THREADS")]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train one configuration.
    Train(TrainArgs),
    /// Evaluate a checkpoint on a corpus split.
    Eval(EvalArgs),
    /// Routing and weight diagnostics from a dump or checkpoint.
    Analyze(analyze::AnalyzeArgs),
    /// Run a grid of variants and seeds over a base configuration.
    Sweep(sweep::SweepArgs),
}

#[derive(Debug, Args)]
struct TrainArgs {
    #[arg(long)]
    config: PathBuf,
    /// Overrides `train.seed`.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides `output_dir`.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    overwrite: bool,
    #[arg(long, short)]
    quiet: bool,
}

#[derive(Debug, Args)]
struct EvalArgs {
    /// Checkpoint directory (`best/` or `last/` of a run).
    #[arg(long)]
    checkpoint: PathBuf,
    /// Corpus file; defaults to the one the model was trained on.
    #[arg(long)]
    corpus: Option<PathBuf>,
    #[arg(long, default_value = "test")]
    split: String,
    /// Limit on predicted tokens.
    #[arg(long)]
    max_tokens: Option<usize>,
    /// Write the router decisions of every evaluated token to this CSV.
    #[arg(long)]
    dump_routing: Option<PathBuf>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: cannot configure {n} threads: {e}");
            return ExitCode::from(1);
        }
    }
    let result = match cli.command {
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Analyze(a) => analyze::run(a),
        Command::Sweep(a) => sweep::run(a, cli.threads),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_config() { 2 } else { 1 })
        }
    }
}

fn cmd_train(a: TrainArgs) -> Result<ExitCode> {
    let mut cfg = RunConfig::load(&a.config)?;
    if let Some(seed) = a.seed {
        cfg.train.seed = seed;
    }
    if let Some(out) = a.out {
        cfg.output_dir = Some(out);
    }
    cfg.validate()?;
    let out = cfg
        .output_dir
        .clone()
        .ok_or_else(|| Error::config("output_dir", "not set; pass --out"))?;
    let summary = training::train(
        &cfg,
        &out,
        TrainOptions {
            overwrite: a.overwrite,
            verbose: !a.quiet,
        },
    )?;
    println!(
        "best step {}  val bpc {:.4}  test bpc {:.4}  ({:.0}s)",
        summary.best_step, summary.best_val.bpc, summary.test.bpc, summary.elapsed_secs
    );
    Ok(ExitCode::SUCCESS)
}

fn cmd_eval(a: EvalArgs) -> Result<ExitCode> {
    let (cfg, model, store) = training::load_model(&a.checkpoint)?;
    let path = a.corpus.unwrap_or_else(|| cfg.train.corpus_path.clone());
    let corpus = training::load_corpus(&path, cfg.train.splits)?;
    if corpus.vocab.len() != cfg.model.vocab_size {
        return Err(Error::config(
            "corpus",
            format!(
                "{} has {} distinct bytes but the checkpoint expects {}",
                path.display(),
                corpus.vocab.len(),
                cfg.model.vocab_size
            ),
        ));
    }
    let stream = corpus
        .split(&a.split)
        .ok_or_else(|| Error::config("split", format!("unknown split `{}`", a.split)))?;
    let batch = cfg.train.batch_size;
    let r = training::evaluate(&model, &store, stream, batch, a.max_tokens)?;
    println!(
        "split {}  tokens {}  loss {}  bpc {}  ppl {}",
        a.split, r.tokens, r.loss, r.bpc, r.ppl
    );
    if let Some(path) = a.dump_routing {
        let dump = training::collect_routing(&model, &store, stream, batch, r.tokens)?;
        dump.write(&path)?;
        println!("routing dump: {} rows -> {}", dump.rows.len(), path.display());
    }
    Ok(ExitCode::SUCCESS)
}
