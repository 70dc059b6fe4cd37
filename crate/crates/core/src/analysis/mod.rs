//! Routing diagnostics over [`RoutingDump`]s and expert weights.

mod dump;
mod similarity;
pub mod svg;

pub use dump::{DumpRow, RoutingDump};
pub use similarity::{
    expert_similarity, layer_experts, router_weight_stats, ExpertWeights, Similarity, WeightStat,
};

use std::collections::BTreeMap;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::routers::entropy;

pub const MI_BINS: usize = 100;

/// Bin ids against the edges `linspace(0, 1, bins)`: a value maps to the
/// number of edges at or below it. The first edge is 0, so `0.0 → 1`, and
/// `1.0 → bins`.
pub fn discretize(scores: &[f64], bins: usize) -> Vec<usize> {
    let edges: Vec<f64> = linspace(0.0, 1.0, bins);
    scores
        .iter()
        .map(|&v| edges.partition_point(|&e| e <= v))
        .collect()
}

fn linspace(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    match n {
        0 => Vec::new(),
        1 => vec![lo],
        _ => {
            let step = (hi - lo) / (n - 1) as f64;
            (0..n)
                .map(|i| if i == n - 1 { hi } else { lo + step * i as f64 })
                .collect()
        }
    }
}

/// Mutual information in nats of two equally long label sequences, from
/// their joint contingency table.
pub fn mutual_information(x1: &[usize], x2: &[usize]) -> Result<f64> {
    if x1.len() != x2.len() {
        return Err(Error::Input(format!(
            "mutual information needs equal lengths, got {} and {}",
            x1.len(),
            x2.len()
        )));
    }
    let n = x1.len();
    if n == 0 {
        return Ok(0.0);
    }
    let mut joint: BTreeMap<(usize, usize), usize> = BTreeMap::new();
    let mut a: BTreeMap<usize, usize> = BTreeMap::new();
    let mut b: BTreeMap<usize, usize> = BTreeMap::new();
    for (&u, &v) in x1.iter().zip(x2) {
        *joint.entry((u, v)).or_default() += 1;
        *a.entry(u).or_default() += 1;
        *b.entry(v).or_default() += 1;
    }
    let nf = n as f64;
    let mi: f64 = joint
        .iter()
        .map(|(&(u, v), &c)| {
            let pxy = c as f64 / nf;
            let px = a[&u] as f64 / nf;
            let py = b[&v] as f64 / nf;
            pxy * (pxy / (px * py)).ln()
        })
        .sum();
    Ok(mi.max(0.0))
}

/// Entropy in nats of the empirical distribution of `labels`.
pub fn label_entropy(labels: &[usize]) -> f64 {
    let mut counts: BTreeMap<usize, usize> = BTreeMap::new();
    for &l in labels {
        *counts.entry(l).or_default() += 1;
    }
    let n = labels.len() as f64;
    let p: Vec<f64> = counts.values().map(|&c| c as f64 / n).collect();
    entropy(&p)
}

/// Cross-layer mutual information averaged over tokens.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MiHeatmap {
    /// `[layers × layers]`
    pub matrix: Vec<Vec<f64>>,
    pub bins: usize,
    pub tokens: usize,
}

impl MiHeatmap {
    /// Mean of the cells with `i != j`.
    pub fn off_diagonal_mean(&self) -> f64 {
        let l = self.matrix.len();
        if l < 2 {
            return 0.0;
        }
        let mut s = 0.0;
        for i in 0..l {
            for j in 0..l {
                if i != j {
                    s += self.matrix[i][j];
                }
            }
        }
        s / (l * (l - 1)) as f64
    }
}

/// Per token, discretize each layer's score vector, take the MI between
/// every pair of layers, and average over the first `max_tokens` tokens.
pub fn mi_heatmap(dump: &RoutingDump, bins: usize, max_tokens: usize) -> Result<MiHeatmap> {
    let layers = dump.by_layer();
    let l = layers.len();
    let tokens = layers.iter().map(|r| r.len()).min().unwrap_or(0).min(max_tokens);
    if layers.iter().any(|r| r.len() != layers[0].len()) {
        return Err(Error::Input("routing dump layers have different token counts".into()));
    }
    let disc: Vec<Vec<Vec<usize>>> = layers
        .iter()
        .map(|rows| rows[..tokens].iter().map(|r| discretize(&r.scores, bins)).collect())
        .collect();
    let mut matrix = vec![vec![0.0; l]; l];
    for i in 0..l {
        for j in i..l {
            let mut s = 0.0;
            for t in 0..tokens {
                s += mutual_information(&disc[i][t], &disc[j][t])?;
            }
            let m = if tokens > 0 { s / tokens as f64 } else { 0.0 };
            matrix[i][j] = m;
            matrix[j][i] = m;
        }
    }
    Ok(MiHeatmap {
        matrix,
        bins,
        tokens,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EntropyHistogram {
    pub layer: usize,
    /// `bins + 1` edges spanning `[0, ln N]`.
    pub edges: Vec<f64>,
    pub counts: Vec<usize>,
    pub mean: f64,
    pub median: f64,
}

/// Per-token gate entropies of `layer`, binned on `[0, ln N]`.
pub fn entropy_histogram(dump: &RoutingDump, layer: usize, bins: usize) -> Result<EntropyHistogram> {
    if bins == 0 {
        return Err(Error::config("bins", "must be >= 1"));
    }
    let values: Vec<f64> = dump.layer(layer).map(|r| entropy(&r.scores)).collect();
    if values.is_empty() {
        return Err(Error::Input(format!("routing dump has no rows for layer {layer}")));
    }
    let top = (dump.n_experts.max(1) as f64).ln();
    let edges = linspace(0.0, top, bins + 1);
    let mut counts = vec![0; bins];
    for &v in &values {
        let b = if top > 0.0 {
            ((v / top) * bins as f64).floor() as usize
        } else {
            0
        };
        counts[b.min(bins - 1)] += 1;
    }
    let mean = values.iter().sum::<f64>() / values.len() as f64;
    Ok(EntropyHistogram {
        layer,
        edges,
        counts,
        mean,
        median: median(values),
    })
}

/// Mean per-token gate entropy over all rows of a dump.
pub fn mean_entropy(dump: &RoutingDump) -> f64 {
    if dump.rows.is_empty() {
        return 0.0;
    }
    dump.rows.iter().map(|r| entropy(&r.scores)).sum::<f64>() / dump.rows.len() as f64
}

pub fn median(mut v: Vec<f64>) -> f64 {
    if v.is_empty() {
        return f64::NAN;
    }
    v.sort_by(|a, b| a.total_cmp(b));
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Inner balance (top-1 over top-2 score) and outer balance (sum of the
/// selected scores), as medians over every token and layer.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct BalanceStats {
    pub ib_median: f64,
    pub ob_median: f64,
}

pub fn balance_stats(dump: &RoutingDump) -> Result<BalanceStats> {
    if dump.k < 2 {
        return Err(Error::config("k", "inner balance needs k >= 2"));
    }
    if dump.rows.is_empty() {
        return Err(Error::Input("empty routing dump".into()));
    }
    let mut ib = Vec::with_capacity(dump.rows.len());
    let mut ob = Vec::with_capacity(dump.rows.len());
    for r in &dump.rows {
        let s = |j: usize| r.scores[r.selected[j]];
        ib.push(s(0) / s(1));
        ob.push(r.selected.iter().map(|&e| r.scores[e]).sum());
    }
    Ok(BalanceStats {
        ib_median: median(ib),
        ob_median: median(ob),
    })
}

/// Share of tokens selecting each expert, `[layers × N]`. Rows sum to `k`.
pub fn selection_frequency(dump: &RoutingDump) -> Vec<Vec<f64>> {
    dump.by_layer()
        .iter()
        .map(|rows| {
            let mut f = vec![0.0; dump.n_experts];
            for r in rows {
                for &e in &r.selected {
                    f[e] += 1.0;
                }
            }
            let t = rows.len().max(1) as f64;
            f.iter_mut().for_each(|v| *v /= t);
            f
        })
        .collect()
}

/// Writes a matrix as CSV with a `row` index column and `c{j}` headers.
pub fn matrix_csv(m: &[Vec<f64>], row_name: &str, col_prefix: &str) -> String {
    use std::fmt::Write as _;
    let cols = m.first().map_or(0, |r| r.len());
    let mut s = String::from(row_name);
    for j in 0..cols {
        let _ = write!(s, ",{col_prefix}{j}");
    }
    s.push('\n');
    for (i, row) in m.iter().enumerate() {
        let _ = write!(s, "{i}");
        for v in row {
            let _ = write!(s, ",{v}");
        }
        s.push('\n');
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn discretize_edges() {
        assert_eq!(discretize(&[0.0, 0.0], 100), vec![1, 1]);
        assert_eq!(discretize(&[1.0], 100), vec![100]);
        let d = discretize(&[0.25; 4], 100);
        assert!(d.iter().all(|&b| b == d[0]));
    }

    #[test]
    fn mi_hand_values() {
        let mi = mutual_information(&[1, 1, 2, 2], &[1, 1, 2, 2]).unwrap();
        assert!((mi - 2f64.ln()).abs() < 1e-15);
        let mi = mutual_information(&[1, 1, 2, 2], &[1, 2, 1, 2]).unwrap();
        assert!(mi.abs() < 1e-15);
        assert!(mutual_information(&[1], &[1, 2]).is_err());
    }

    #[test]
    fn uniform_balance() {
        let mut d = RoutingDump::new(8, 2);
        let g = crate::routers::GateOutput::from_logits(&[0.0; 8], 2).unwrap();
        d.push_token(0, &[&g, &g]);
        let b = balance_stats(&d).unwrap();
        assert_eq!(b.ib_median, 1.0);
        assert!((b.ob_median - 0.25).abs() < 1e-15);
        let f = selection_frequency(&d);
        assert_eq!(f[0].iter().sum::<f64>(), 2.0);
    }
}
