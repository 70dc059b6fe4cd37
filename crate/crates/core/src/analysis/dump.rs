//! Routing dumps: one CSV row per (token, layer) with the full score vector
//! and the selected experts.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::routers::GateOutput;

#[derive(Debug, Clone, PartialEq)]
pub struct DumpRow {
    pub token_idx: usize,
    pub layer: usize,
    pub scores: Vec<f64>,
    pub selected: Vec<usize>,
}

/// Router scores over an evaluation stream, grouped by token then layer.
#[derive(Debug, Clone, PartialEq)]
pub struct RoutingDump {
    pub n_experts: usize,
    pub k: usize,
    pub rows: Vec<DumpRow>,
}

impl RoutingDump {
    pub fn new(n_experts: usize, k: usize) -> Self {
        Self {
            n_experts,
            k,
            rows: Vec::new(),
        }
    }

    /// Appends the gate outputs of one token, layer by layer.
    pub fn push_token(&mut self, token_idx: usize, gates: &[&GateOutput]) {
        for (layer, g) in gates.iter().enumerate() {
            self.rows.push(DumpRow {
                token_idx,
                layer,
                scores: g.scores.clone(),
                selected: g.topk_indices.clone(),
            });
        }
    }

    pub fn n_layers(&self) -> usize {
        self.rows.iter().map(|r| r.layer + 1).max().unwrap_or(0)
    }

    /// Rows of `layer`, in token order.
    pub fn layer(&self, layer: usize) -> impl Iterator<Item = &DumpRow> {
        self.rows.iter().filter(move |r| r.layer == layer)
    }

    /// Score rows as `[layer][token]`.
    pub fn by_layer(&self) -> Vec<Vec<&DumpRow>> {
        let mut out = vec![Vec::new(); self.n_layers()];
        for r in &self.rows {
            out[r.layer].push(r);
        }
        out
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("token_idx,layer");
        for n in 0..self.n_experts {
            let _ = write!(s, ",score_{n}");
        }
        for j in 0..self.k {
            let _ = write!(s, ",sel_{j}");
        }
        s.push('\n');
        for r in &self.rows {
            let _ = write!(s, "{},{}", r.token_idx, r.layer);
            for v in &r.scores {
                let _ = write!(s, ",{v}");
            }
            for v in &r.selected {
                let _ = write!(s, ",{v}");
            }
            s.push('\n');
        }
        s
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        let header = lines
            .next()
            .ok_or_else(|| Error::Input("empty routing dump".into()))?;
        let cols: Vec<&str> = header.split(',').collect();
        if cols.len() < 3 || cols[0] != "token_idx" || cols[1] != "layer" {
            return Err(Error::Input(format!("bad routing dump header `{header}`")));
        }
        let n_experts = cols.iter().filter(|c| c.starts_with("score_")).count();
        let k = cols.iter().filter(|c| c.starts_with("sel_")).count();
        if n_experts + k + 2 != cols.len() {
            return Err(Error::Input(format!("bad routing dump header `{header}`")));
        }
        let mut dump = RoutingDump::new(n_experts, k);
        for (i, line) in lines.enumerate() {
            if line.is_empty() {
                continue;
            }
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != cols.len() {
                return Err(Error::Input(format!(
                    "routing dump line {}: expected {} fields, got {}",
                    i + 2,
                    cols.len(),
                    f.len()
                )));
            }
            let bad = |e: &dyn std::fmt::Display| {
                Error::Input(format!("routing dump line {}: {e}", i + 2))
            };
            let int = |s: &str| s.parse::<usize>().map_err(|e| bad(&e));
            let scores = f[2..2 + n_experts]
                .iter()
                .map(|s| s.parse::<f64>().map_err(|e| bad(&e)))
                .collect::<Result<Vec<_>>>()?;
            let selected = f[2 + n_experts..]
                .iter()
                .map(|s| int(s))
                .collect::<Result<Vec<_>>>()?;
            if let Some(&e) = selected.iter().find(|&&e| e >= n_experts) {
                return Err(bad(&format!("expert {e} out of range")));
            }
            dump.rows.push(DumpRow {
                token_idx: int(f[0])?,
                layer: int(f[1])?,
                scores,
                selected,
            });
        }
        Ok(dump)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_csv(&text)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn csv_round_trip() {
        let mut d = RoutingDump::new(3, 2);
        let a = GateOutput::from_logits(&[0.1, 0.7, -0.3], 2).unwrap();
        let b = GateOutput::from_logits(&[1.0, 0.0, 0.0], 2).unwrap();
        d.push_token(0, &[&a, &b]);
        d.push_token(1, &[&b, &a]);
        let csv = d.to_csv();
        assert!(csv.starts_with("token_idx,layer,score_0,score_1,score_2,sel_0,sel_1\n"));
        assert_eq!(RoutingDump::from_csv(&csv).unwrap(), d);
        assert_eq!(d.n_layers(), 2);
    }

    #[test]
    fn rejects_ragged_rows() {
        assert!(RoutingDump::from_csv("token_idx,layer,score_0,sel_0\n0,0,1.0\n").is_err());
    }
}
