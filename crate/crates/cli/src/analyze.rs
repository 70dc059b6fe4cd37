use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, ValueEnum};
use rmoe_lab::analysis::{
    self, balance_stats, entropy_histogram, layer_experts, matrix_csv, mi_heatmap,
    router_weight_stats, selection_frequency, svg, RoutingDump,
};
use rmoe_lab::model::load_checkpoint;
use rmoe_lab::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Which {
    Mi,
    Entropy,
    Balance,
    Similarity,
    Frequency,
    Weights,
}

#[derive(Debug, Args)]
pub struct AnalyzeArgs {
    /// Routing dump CSV, or a checkpoint directory for `similarity` and `weights`.
    #[arg(long)]
    input: PathBuf,
    #[arg(long, value_enum)]
    which: Which,
    /// Directory receiving the CSV (and SVG) artifacts.
    #[arg(long)]
    out: PathBuf,
    /// Discretization bins for `mi`, histogram bins for `entropy`.
    #[arg(long)]
    bins: Option<usize>,
    /// Tokens averaged by `mi`.
    #[arg(long, default_value_t = 10_000)]
    max_tokens: usize,
    /// Also render SVG plots of the CSV data.
    #[arg(long)]
    svg: bool,
}

fn is_checkpoint(p: &Path) -> bool {
    p.join("manifest.json").is_file()
}

fn load_dump(a: &AnalyzeArgs) -> Result<RoutingDump> {
    if is_checkpoint(&a.input) {
        return Err(Error::config(
            "input",
            format!("{:?} needs a routing dump, got checkpoint {}", a.which, a.input.display()),
        ));
    }
    RoutingDump::read(&a.input)
}

fn write(dir: &Path, name: &str, body: &str) -> Result<PathBuf> {
    let p = dir.join(name);
    fs::write(&p, body).map_err(|e| Error::io(&p, e))?;
    println!("wrote {}", p.display());
    Ok(p)
}

pub fn run(a: AnalyzeArgs) -> Result<ExitCode> {
    if !a.input.exists() {
        return Err(Error::Input(format!("{} does not exist", a.input.display())));
    }
    if matches!(a.which, Which::Similarity | Which::Weights) && !is_checkpoint(&a.input) {
        return Err(Error::config(
            "input",
            format!("{:?} needs a checkpoint directory, got {}", a.which, a.input.display()),
        ));
    }
    fs::create_dir_all(&a.out).map_err(|e| Error::io(&a.out, e))?;
    match a.which {
        Which::Mi => {
            let dump = load_dump(&a)?;
            let hm = mi_heatmap(&dump, a.bins.unwrap_or(analysis::MI_BINS), a.max_tokens)?;
            write(&a.out, "mi.csv", &matrix_csv(&hm.matrix, "layer", "layer"))?;
            if a.svg {
                let title = format!("cross-layer MI (nats), {} tokens", hm.tokens);
                write(&a.out, "mi.svg", &svg::heatmap(&hm.matrix, &title))?;
            }
            println!("off-diagonal mean MI {}", hm.off_diagonal_mean());
        }
        Which::Entropy => {
            let dump = load_dump(&a)?;
            let mut hist = String::from("layer,lo,hi,count\n");
            let mut summary = String::from("layer,mean,median\n");
            for layer in 0..dump.n_layers() {
                let h = entropy_histogram(&dump, layer, a.bins.unwrap_or(20))?;
                for (i, c) in h.counts.iter().enumerate() {
                    let _ = writeln!(hist, "{layer},{},{},{c}", h.edges[i], h.edges[i + 1]);
                }
                let _ = writeln!(summary, "{layer},{},{}", h.mean, h.median);
                if a.svg {
                    let title = format!("gate entropy, layer {layer}");
                    write(&a.out, &format!("entropy_layer{layer}.svg"), &svg::histogram(&h.edges, &h.counts, &title))?;
                }
                println!("layer {layer}: mean entropy {}  median {}", h.mean, h.median);
            }
            write(&a.out, "entropy_hist.csv", &hist)?;
            write(&a.out, "entropy.csv", &summary)?;
        }
        Which::Balance => {
            let dump = load_dump(&a)?;
            let b = balance_stats(&dump)?;
            write(&a.out, "balance.csv", &format!("ib_median,ob_median\n{},{}\n", b.ib_median, b.ob_median))?;
            println!("IB {}  OB {}", b.ib_median, b.ob_median);
        }
        Which::Frequency => {
            let dump = load_dump(&a)?;
            let f = selection_frequency(&dump);
            write(&a.out, "frequency.csv", &matrix_csv(&f, "layer", "expert"))?;
            if a.svg {
                write(&a.out, "frequency.svg", &svg::heatmap(&f, "expert selection frequency"))?;
            }
        }
        Which::Similarity => {
            let ckpt = load_checkpoint::<f64>(&a.input)?;
            let mut avg = String::from("layer,avg\n");
            let mut layer = 0;
            while ckpt.params.by_name(&format!("layers.{layer}.experts.0.htoh4_0")).is_some() {
                let s = analysis::expert_similarity(&layer_experts(&ckpt.params, layer)?)?;
                write(&a.out, &format!("similarity_layer{layer}.csv"), &matrix_csv(&s.matrix, "expert", "expert"))?;
                if a.svg {
                    let title = format!("expert similarity, layer {layer}");
                    write(&a.out, &format!("similarity_layer{layer}.svg"), &svg::heatmap(&s.matrix, &title))?;
                }
                let _ = writeln!(avg, "{layer},{}", s.avg);
                println!("layer {layer}: mean similarity {}", s.avg);
                layer += 1;
            }
            write(&a.out, "similarity.csv", &avg)?;
        }
        Which::Weights => {
            let ckpt = load_checkpoint::<f64>(&a.input)?;
            let mut s = String::from("name,layer,norm,std\n");
            for w in router_weight_stats(&ckpt.params) {
                let layer = w.layer.map(|l| l.to_string()).unwrap_or_default();
                let _ = writeln!(s, "{},{layer},{},{}", w.name, w.norm, w.std);
            }
            write(&a.out, "weights.csv", &s)?;
        }
    }
    Ok(ExitCode::SUCCESS)
}
