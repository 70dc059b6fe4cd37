use std::fmt::Write as _;
use std::fs::{self, File};
use std::path::{Path, PathBuf};
use std::process::{Command, ExitCode, Stdio};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use clap::Args;
use rmoe_lab::training::{read_metrics, RunConfig, TrainSummary};
use rmoe_lab::{Error, Result};
use serde::Deserialize;
use serde_json::{Map, Value};

#[derive(Debug, Args)]
pub struct SweepArgs {
    /// Base run configuration.
    #[arg(long)]
    config: PathBuf,
    /// Sweep specification: variants, seeds and shared overrides.
    #[arg(long)]
    spec: PathBuf,
    /// Parent directory of the run directories.
    #[arg(long)]
    out: PathBuf,
    /// Keep finished runs whose resolved configuration matches the plan.
    #[arg(long)]
    resume: bool,
    /// Replace existing run directories.
    #[arg(long)]
    overwrite: bool,
    /// Concurrent child processes; overrides the spec.
    #[arg(long)]
    jobs: Option<usize>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSpec {
    pub variants: Vec<Variant>,
    /// Empty keeps the base seed.
    #[serde(default)]
    pub seeds: Vec<u64>,
    /// Merged into the base configuration before each variant's own overrides.
    #[serde(default)]
    pub overrides: Map<String, Value>,
    #[serde(default = "one")]
    pub jobs: usize,
}

fn one() -> usize {
    1
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Variant {
    pub name: String,
    #[serde(default)]
    pub tags: Vec<String>,
    #[serde(default)]
    pub overrides: Map<String, Value>,
}

#[derive(Debug, Clone)]
pub struct Planned {
    pub run: String,
    pub variant: String,
    pub seed: u64,
    pub dir: PathBuf,
    pub config: RunConfig,
}

/// Recursively merges `patch` into `base`; non-object values replace.
pub fn merge(base: &mut Value, patch: &Value) {
    match (base, patch) {
        (Value::Object(b), Value::Object(p)) => {
            for (k, v) in p {
                merge(b.entry(k.clone()).or_insert(Value::Null), v);
            }
        }
        (b, p) => *b = p.clone(),
    }
}

/// Expands the spec into validated run configurations. Any invalid
/// combination fails the whole plan before a run starts.
pub fn plan(base: &Value, spec: &SweepSpec, out: &Path) -> Result<Vec<Planned>> {
    if spec.variants.is_empty() {
        return Err(Error::config("variants", "sweep needs at least one variant"));
    }
    let base_seed = base.pointer("/train/seed").and_then(Value::as_u64).unwrap_or(0);
    let seeds = if spec.seeds.is_empty() { vec![base_seed] } else { spec.seeds.clone() };
    let mut runs = Vec::new();
    for v in &spec.variants {
        if v.name.is_empty() || !v.name.chars().all(|c| c.is_ascii_alphanumeric() || "-_+.".contains(c)) {
            return Err(Error::config("variants.name", format!("`{}` is not a usable directory name", v.name)));
        }
        for &seed in &seeds {
            let mut j = base.clone();
            merge(&mut j, &Value::Object(spec.overrides.clone()));
            merge(&mut j, &Value::Object(v.overrides.clone()));
            let run = format!("{}-seed{seed}", v.name);
            let dir = out.join(&run);
            let mut cfg: RunConfig = serde_json::from_value(j).map_err(|e| {
                Error::config(format!("variants.{}", v.name), e.to_string())
            })?;
            cfg.train.seed = seed;
            cfg.output_dir = Some(dir.clone());
            cfg.tags.push(v.name.clone());
            cfg.tags.extend(v.tags.iter().cloned());
            cfg.validate()?;
            runs.push(Planned {
                run,
                variant: v.name.clone(),
                seed,
                dir,
                config: cfg,
            });
        }
    }
    let mut names: Vec<&str> = runs.iter().map(|r| r.run.as_str()).collect();
    names.sort_unstable();
    if names.windows(2).any(|w| w[0] == w[1]) {
        return Err(Error::config("variants.name", "variant names must be unique"));
    }
    Ok(runs)
}

/// True when `dir` holds a finished run of exactly `cfg`.
pub fn is_complete(dir: &Path, cfg: &RunConfig) -> bool {
    let Ok(resolved) = RunConfig::load(&dir.join("resolved.json")) else {
        return false;
    };
    let mut expect = cfg.clone();
    expect.model.vocab_size = resolved.model.vocab_size;
    resolved == expect && dir.join("summary.json").is_file()
}

fn run_child(p: &Planned, cfg_path: &Path, log: &Path, threads: Option<usize>, overwrite: bool) -> Result<Option<i32>> {
    let exe = std::env::current_exe().map_err(|e| Error::io("current_exe", e))?;
    let logf = File::create(log).map_err(|e| Error::io(log, e))?;
    let errf = logf.try_clone().map_err(|e| Error::io(log, e))?;
    let mut cmd = Command::new(exe);
    if let Some(t) = threads {
        cmd.arg("--threads").arg(t.to_string());
    }
    cmd.arg("train").arg("--config").arg(cfg_path).arg("--out").arg(&p.dir);
    if overwrite {
        cmd.arg("--overwrite");
    }
    let status = cmd
        .stdin(Stdio::null())
        .stdout(logf)
        .stderr(errf)
        .status()
        .map_err(|e| Error::io("child process", e))?;
    Ok(if status.success() { None } else { Some(status.code().unwrap_or(-1)) })
}

fn summary_row(p: &Planned, status: &str) -> String {
    let mut row = format!("{},{},{},{},{status}", p.run, p.variant, p.seed, p.config.tags.join(";"));
    let s: Option<TrainSummary> = fs::read_to_string(p.dir.join("summary.json"))
        .ok()
        .and_then(|t| serde_json::from_str(&t).ok());
    let final_val = read_metrics(&p.dir.join("metrics.csv")).ok().and_then(|m| {
        m.iter()
            .rev()
            .find(|r| r.scope == "val" && r.metric == "bpc")
            .map(|r| r.value)
    });
    match (status, s, final_val) {
        ("ok", Some(s), Some(fv)) => {
            let _ = write!(
                row,
                ",{},{},{fv},{},{},{},{},{}",
                s.best_step,
                s.best_val.bpc,
                s.test.bpc,
                s.test_entropy_mean,
                s.test_mi_offdiag,
                s.params.total,
                s.params.router
            );
        }
        _ => row.push_str(",,,,,,,,"),
    }
    row
}

/// Exclusive marker file so two sweeps never share an output directory.
struct Lock(PathBuf);

impl Lock {
    fn acquire(path: &Path) -> Result<Self> {
        match fs::OpenOptions::new().write(true).create_new(true).open(path) {
            Ok(mut f) => {
                use std::io::Write as _;
                let _ = writeln!(f, "{}", std::process::id());
                Ok(Lock(path.to_path_buf()))
            }
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(Error::Input(format!(
                "another sweep holds {}; remove it if that sweep is gone",
                path.display()
            ))),
            Err(e) => Err(Error::io(path, e)),
        }
    }
}

impl Drop for Lock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.0);
    }
}

pub const SUMMARY_HEADER: &str = "run,variant,seed,tags,status,best_step,val_bpc,final_val_bpc,test_bpc,test_entropy_mean,test_mi_offdiag,params_total,params_router";

pub fn run(a: SweepArgs, threads: Option<usize>) -> Result<ExitCode> {
    let base_text = fs::read_to_string(&a.config).map_err(|e| Error::io(&a.config, e))?;
    let base: Value = serde_json::from_str(&base_text)?;
    RunConfig::from_json(&base_text)?;
    let spec_text = fs::read_to_string(&a.spec).map_err(|e| Error::io(&a.spec, e))?;
    let spec: SweepSpec = serde_json::from_str(&spec_text)?;
    let runs = plan(&base, &spec, &a.out)?;
    let jobs = a.jobs.unwrap_or(spec.jobs).max(1);

    let (cfg_dir, log_dir) = (a.out.join("configs"), a.out.join("logs"));
    for d in [&cfg_dir, &log_dir] {
        fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
    }
    let _lock = Lock::acquire(&a.out.join("sweep.lock"))?;
    let next = AtomicUsize::new(0);
    let status: Mutex<Vec<String>> = Mutex::new(vec![String::new(); runs.len()]);
    let work = || -> Result<()> {
        loop {
            let i = next.fetch_add(1, Ordering::SeqCst);
            let Some(p) = runs.get(i) else { return Ok(()) };
            let st = if a.resume && is_complete(&p.dir, &p.config) {
                eprintln!("[{}] complete, skipped", p.run);
                "ok".to_string()
            } else {
                let cfg_path = cfg_dir.join(format!("{}.json", p.run));
                fs::write(&cfg_path, p.config.to_json()).map_err(|e| Error::io(&cfg_path, e))?;
                eprintln!("[{}] started", p.run);
                let log = log_dir.join(format!("{}.log", p.run));
                match run_child(p, &cfg_path, &log, threads, a.overwrite || a.resume)? {
                    None => "ok".to_string(),
                    Some(code) => format!("failed({code})"),
                }
            };
            eprintln!("[{}] {st}", p.run);
            status.lock().unwrap()[i] = st;
        }
    };
    std::thread::scope(|s| -> Result<()> {
        let handles: Vec<_> = (0..jobs.min(runs.len())).map(|_| s.spawn(work)).collect();
        for h in handles {
            h.join().expect("sweep worker panicked")?;
        }
        Ok(())
    })?;

    let status = status.into_inner().unwrap();
    let mut csv = String::from(SUMMARY_HEADER);
    csv.push('\n');
    for (p, st) in runs.iter().zip(&status) {
        csv.push_str(&summary_row(p, st));
        csv.push('\n');
    }
    let path = a.out.join("summary.csv");
    fs::write(&path, csv).map_err(|e| Error::io(&path, e))?;
    let failed = status.iter().filter(|s| *s != "ok").count();
    println!("{} runs, {failed} failed; summary -> {}", runs.len(), path.display());
    Ok(if failed == 0 { ExitCode::SUCCESS } else { ExitCode::from(1) })
}
