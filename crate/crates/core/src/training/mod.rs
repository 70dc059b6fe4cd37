//! Character-level training and evaluation.
//!
//! A run directory holds `resolved.json` (the full configuration, feedable
//! back as a config), `metrics.csv`, the `best/` and `last/` checkpoints,
//! `routing_test.csv` (router scores on the start of the test split, from the
//! best checkpoint) and `summary.json`.

mod config;
mod corpus;
mod optim;

pub use config::{RunConfig, TrainConfig};
pub use corpus::{load_corpus, Corpus};
pub use optim::{learning_rate, Adam, StepInfo};

use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::analysis::{mean_entropy, mi_heatmap, RoutingDump, MI_BINS};
use crate::error::{Error, Result};
use crate::model::{load_checkpoint, param_count, save_checkpoint, Model, ParamCount};
use crate::params::ParamStore;
use crate::routers::GateOutput;
use crate::tensor::{Graph, Real};

/// One row of `metrics.csv`.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricRecord {
    pub step: usize,
    pub scope: String,
    pub metric: String,
    pub value: f64,
}

pub const METRICS_HEADER: &str = "step,scope,metric,value";

/// Append-only CSV sink for [`MetricRecord`]s.
pub struct MetricsWriter {
    out: BufWriter<fs::File>,
    path: PathBuf,
}

impl MetricsWriter {
    pub fn create(path: &Path) -> Result<Self> {
        let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = Self {
            out: BufWriter::new(file),
            path: path.to_path_buf(),
        };
        writeln!(w.out, "{METRICS_HEADER}").map_err(|e| Error::io(path, e))?;
        Ok(w)
    }

    pub fn record(&mut self, step: usize, scope: &str, metric: &str, value: f64) -> Result<()> {
        writeln!(self.out, "{step},{scope},{metric},{value}").map_err(|e| Error::io(&self.path, e))
    }

    pub fn flush(&mut self) -> Result<()> {
        self.out.flush().map_err(|e| Error::io(&self.path, e))
    }
}

pub fn read_metrics(path: &Path) -> Result<Vec<MetricRecord>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = text.lines();
    if lines.next() != Some(METRICS_HEADER) {
        return Err(Error::Input(format!("{} lacks the metrics header", path.display())));
    }
    lines
        .enumerate()
        .map(|(i, line)| {
            let f: Vec<&str> = line.split(',').collect();
            let bad = || Error::Input(format!("{} line {}: `{line}`", path.display(), i + 2));
            if f.len() != 4 {
                return Err(bad());
            }
            Ok(MetricRecord {
                step: f[0].parse().map_err(|_| bad())?,
                scope: f[1].to_string(),
                metric: f[2].to_string(),
                value: f[3].parse().map_err(|_| bad())?,
            })
        })
        .collect()
}

/// Loss summary of a stream.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    /// Mean next-token cross-entropy in nats.
    pub loss: f64,
    pub bpc: f64,
    pub ppl: f64,
    pub tokens: usize,
}

impl EvalResult {
    pub fn from_loss(loss: f64, tokens: usize) -> Self {
        Self {
            loss,
            bpc: loss / std::f64::consts::LN_2,
            ppl: loss.exp(),
            tokens,
        }
    }
}

/// Input windows over a stream: every position but the last is predicted
/// once. Full-length windows come first, then at most one shorter tail.
fn windows(len: usize, seq: usize) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    let mut i = 0;
    while i + 1 < len {
        let l = seq.min(len - 1 - i);
        out.push((i, l));
        i += l;
    }
    out
}

/// Groups equal-length windows into batches of at most `batch`.
fn window_batches(len: usize, seq: usize, batch: usize) -> Vec<Vec<(usize, usize)>> {
    let mut out: Vec<Vec<(usize, usize)>> = Vec::new();
    for w in windows(len, seq) {
        match out.last_mut() {
            Some(b) if b.len() < batch && b[0].1 == w.1 => b.push(w),
            _ => out.push(vec![w]),
        }
    }
    out
}

fn gather_batch(stream: &[usize], wins: &[(usize, usize)]) -> (Vec<usize>, Vec<usize>) {
    let mut x = Vec::new();
    let mut y = Vec::new();
    for &(s, l) in wins {
        x.extend_from_slice(&stream[s..s + l]);
        y.extend_from_slice(&stream[s + 1..s + l + 1]);
    }
    (x, y)
}

/// Mean next-token loss over `stream` (optionally its first `max_tokens`
/// predictions), without recording gradients.
pub fn evaluate<T: Real>(
    model: &Model,
    store: &ParamStore<T>,
    stream: &[usize],
    batch: usize,
    max_tokens: Option<usize>,
) -> Result<EvalResult> {
    let len = match max_tokens {
        Some(m) => stream.len().min(m + 1),
        None => stream.len(),
    };
    if len < 2 {
        return Err(Error::Input("evaluation stream needs at least 2 tokens".into()));
    }
    let seq = model.config().seq_len;
    let mut total = 0.0f64;
    let mut count = 0usize;
    for wins in window_batches(len, seq, batch.max(1)) {
        let (x, y) = gather_batch(stream, &wins);
        let mut g = Graph::<T>::no_grad();
        let b = store.bind(&mut g);
        let f = model.forward(&mut g, &b, &x, wins.len())?;
        let l = g.cross_entropy(f.logits, &y)?;
        total += g.scalar_value(l).to_f64().unwrap() * y.len() as f64;
        count += y.len();
    }
    Ok(EvalResult::from_loss(total / count as f64, count))
}

/// Router decisions for the first `max_tokens` input positions of `stream`.
pub fn collect_routing<T: Real>(
    model: &Model,
    store: &ParamStore<T>,
    stream: &[usize],
    batch: usize,
    max_tokens: usize,
) -> Result<RoutingDump> {
    let cfg = model.config();
    let mut dump = RoutingDump::new(cfg.n_experts, cfg.top_k);
    let len = stream.len().min(max_tokens + 1);
    for wins in window_batches(len, cfg.seq_len, batch.max(1)) {
        let (x, _) = gather_batch(stream, &wins);
        let mut g = Graph::<T>::no_grad();
        let b = store.bind(&mut g);
        let f = model.forward(&mut g, &b, &x, wins.len())?;
        let per_layer: Vec<Vec<GateOutput>> =
            f.routings.iter().map(|r| r.gate_outputs(&g)).collect();
        let mut row = 0;
        for &(start, l) in &wins {
            for pos in 0..l {
                let gates: Vec<&GateOutput> = per_layer.iter().map(|v| &v[row]).collect();
                dump.push_token(start + pos, &gates);
                row += 1;
            }
        }
    }
    Ok(dump)
}

#[derive(Debug, Clone, Copy, Default)]
pub struct TrainOptions {
    /// Replace an existing run directory.
    pub overwrite: bool,
    /// Print progress lines to stderr.
    pub verbose: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub steps: usize,
    pub best_step: usize,
    pub best_val: EvalResult,
    pub test: EvalResult,
    pub params: ParamCountSummary,
    /// Mean per-token gate entropy over the test routing dump (all layers).
    pub test_entropy_mean: f64,
    /// Mean off-diagonal cross-layer mutual information of the test dump.
    pub test_mi_offdiag: f64,
    pub elapsed_secs: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamCountSummary {
    pub total: usize,
    pub non_embedding: usize,
    pub router: usize,
}

impl From<ParamCount> for ParamCountSummary {
    fn from(p: ParamCount) -> Self {
        Self {
            total: p.total,
            non_embedding: p.non_embedding,
            router: p.router,
        }
    }
}

fn prepare_out_dir(out: &Path, overwrite: bool) -> Result<()> {
    if out.exists() {
        let empty = fs::read_dir(out)
            .map_err(|e| Error::io(out, e))?
            .next()
            .is_none();
        if !empty {
            if !overwrite {
                return Err(Error::Input(format!(
                    "{} already exists; pass --overwrite to replace it",
                    out.display()
                )));
            }
            if !out.join("resolved.json").exists() {
                return Err(Error::Input(format!(
                    "refusing to overwrite {}: not a run directory",
                    out.display()
                )));
            }
            fs::remove_dir_all(out).map_err(|e| Error::io(out, e))?;
        }
    }
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))
}

/// Loads the corpus named by `cfg` and fixes the vocabulary size.
pub fn resolve(cfg: &RunConfig) -> Result<(RunConfig, Corpus)> {
    cfg.validate()?;
    let corpus = load_corpus(&cfg.train.corpus_path, cfg.train.splits)?;
    let mut resolved = cfg.clone();
    resolved.model.vocab_size = corpus.vocab.len();
    Ok((resolved, corpus))
}

/// Builds the model of a resolved config with its freeze policy applied.
pub fn build_model(cfg: &RunConfig) -> Result<(Model, ParamStore<f32>)> {
    let (model, mut store) = Model::new::<f32>(cfg.model_config(), cfg.train.seed)?;
    for p in store.iter_mut() {
        if cfg.train.freeze_sets.contains(&p.group) {
            p.frozen = true;
            p.tensor.set_requires_grad(false);
        }
    }
    Ok((model, store))
}

/// Restores a model from a checkpoint directory written by [`train`].
pub fn load_model(dir: &Path) -> Result<(RunConfig, Model, ParamStore<f32>)> {
    let ckpt = load_checkpoint::<f32>(dir)?;
    let cfg: RunConfig = serde_json::from_value(ckpt.manifest.config.clone())?;
    let (model, mut store) = build_model(&cfg)?;
    ckpt.restore_into(&mut store)?;
    Ok((cfg, model, store))
}

/// Trains `cfg` into `out`. Deterministic given the config and corpus.
pub fn train(cfg: &RunConfig, out: &Path, opts: TrainOptions) -> Result<TrainSummary> {
    let started = Instant::now();
    let (mut cfg, corpus) = resolve(cfg)?;
    cfg.output_dir = Some(out.to_path_buf());
    let tc = cfg.train.clone();
    let seq = cfg.model.seq_len;
    let train_ids = corpus.train();
    if train_ids.len() < seq + 1 {
        return Err(Error::Input(format!(
            "training split has {} tokens, fewer than seq_len + 1 = {}",
            train_ids.len(),
            seq + 1
        )));
    }
    prepare_out_dir(out, opts.overwrite)?;
    let echo = serde_json::to_value(&cfg)?;
    let resolved_path = out.join("resolved.json");
    fs::write(&resolved_path, cfg.to_json()).map_err(|e| Error::io(&resolved_path, e))?;

    let (model, mut store) = build_model(&cfg)?;
    let counts = param_count(&store);
    let mut adam = Adam::new(&store);
    let mut metrics = MetricsWriter::create(&out.join("metrics.csv"))?;
    let n_chunks = (train_ids.len() - 1) / seq;
    let (best_dir, last_dir) = (out.join("best"), out.join("last"));
    let mut best: Option<(usize, EvalResult)> = None;

    for step in 0..=tc.steps {
        if step % tc.eval_every == 0 || step == tc.steps {
            let v = evaluate(&model, &store, corpus.val(), tc.batch_size, tc.eval_max_tokens)?;
            metrics.record(step, "val", "loss", v.loss)?;
            metrics.record(step, "val", "bpc", v.bpc)?;
            metrics.record(step, "val", "ppl", v.ppl)?;
            metrics.flush()?;
            if opts.verbose {
                eprintln!("step {step:>6}  val loss {:.4}  bpc {:.4}", v.loss, v.bpc);
            }
            if best.is_none_or(|(_, b)| v.loss < b.loss) {
                best = Some((step, v));
                save_checkpoint(&best_dir, &echo, &store)?;
            }
        }
        if step == tc.steps {
            break;
        }

        let wins: Vec<(usize, usize)> = (0..tc.batch_size)
            .map(|b| (((step * tc.batch_size + b) % n_chunks) * seq, seq))
            .collect();
        let (x, y) = gather_batch(train_ids, &wins);
        let mut g = Graph::<f32>::new();
        let bound = store.bind(&mut g);
        let fwd = model.forward(&mut g, &bound, &x, tc.batch_size)?;
        let loss = model.loss(&mut g, &fwd, &y)?;
        let total = g.scalar_value(loss.total) as f64;
        if !total.is_finite() {
            save_checkpoint(&last_dir, &echo, &store)?;
            return Err(Error::Numeric(format!(
                "non-finite loss at step {step}; last good parameters saved to {}",
                last_dir.display()
            )));
        }
        g.backward(loss.total)?;
        store.zero_grads();
        store.collect_grads(&g, &bound)?;
        let lm = g.scalar_value(loss.lm) as f64;
        let balance = g.scalar_value(loss.balance) as f64;
        drop(g);
        let lr = learning_rate(step, tc.lr, tc.warmup_steps, tc.steps, tc.min_lr_ratio);
        // gradients are validated before any parameter changes
        let info = adam.step(&mut store, lr, tc.clip()).map_err(|e| {
            match save_checkpoint(&last_dir, &echo, &store) {
                Ok(()) => Error::Numeric(format!(
                    "step {step}: {e}; last good parameters saved to {}",
                    last_dir.display()
                )),
                Err(save) => save,
            }
        })?;
        if step % tc.log_every == 0 {
            metrics.record(step, "train", "loss", total)?;
            metrics.record(step, "train", "lm_loss", lm)?;
            metrics.record(step, "train", "bpc", lm / std::f64::consts::LN_2)?;
            metrics.record(step, "train", "balance_loss", balance)?;
            metrics.record(step, "train", "lr", lr)?;
            metrics.record(step, "train", "grad_norm", info.grad_norm)?;
            if opts.verbose {
                eprintln!(
                    "step {step:>6}  loss {total:.4}  bpc {:.4}  lr {lr:.2e}  |g| {:.3}",
                    lm / std::f64::consts::LN_2,
                    info.grad_norm
                );
            }
        }
    }
    save_checkpoint(&last_dir, &echo, &store)?;

    let (best_step, best_val) = best.expect("evaluated at least once");
    let ckpt = load_checkpoint::<f32>(&best_dir)?;
    ckpt.restore_into(&mut store)?;
    let test = evaluate(&model, &store, corpus.test(), tc.batch_size, None)?;
    metrics.record(best_step, "test", "loss", test.loss)?;
    metrics.record(best_step, "test", "bpc", test.bpc)?;
    metrics.record(best_step, "test", "ppl", test.ppl)?;

    let dump = collect_routing(&model, &store, corpus.test(), tc.batch_size, tc.dump_tokens)?;
    dump.write(&out.join("routing_test.csv"))?;
    let by_layer = dump.by_layer();
    for (layer, rows) in by_layer.iter().enumerate() {
        let m = rows.iter().map(|r| crate::routers::entropy(&r.scores)).sum::<f64>()
            / rows.len().max(1) as f64;
        metrics.record(best_step, &format!("layer{layer}"), "test_entropy", m)?;
    }
    let test_entropy_mean = mean_entropy(&dump);
    let test_mi_offdiag = mi_heatmap(&dump, MI_BINS, tc.dump_tokens)?.off_diagonal_mean();
    metrics.record(best_step, "test", "entropy_mean", test_entropy_mean)?;
    metrics.record(best_step, "test", "mi_offdiag", test_mi_offdiag)?;
    metrics.flush()?;

    let summary = TrainSummary {
        steps: tc.steps,
        best_step,
        best_val,
        test,
        params: counts.into(),
        test_entropy_mean,
        test_mi_offdiag,
        elapsed_secs: started.elapsed().as_secs_f64(),
    };
    let spath = out.join("summary.json");
    fs::write(&spath, serde_json::to_string_pretty(&summary)?).map_err(|e| Error::io(&spath, e))?;
    Ok(summary)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn windows_cover_every_prediction_once() {
        let w = windows(11, 4);
        assert_eq!(w, vec![(0, 4), (4, 4), (8, 2)]);
        let b = window_batches(11, 4, 8);
        assert_eq!(b, vec![vec![(0, 4), (4, 4)], vec![(8, 2)]]);
        assert_eq!(windows(9, 4), vec![(0, 4), (4, 4)]);
    }

    #[test]
    fn bpc_ppl_identity() {
        let r = EvalResult::from_loss(2f64.ln(), 10);
        assert_eq!(r.bpc, 1.0);
        assert!((r.bpc * std::f64::consts::LN_2 - r.ppl.ln()).abs() < 1e-12);
    }
}
