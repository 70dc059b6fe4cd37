use serde::Serialize;

use crate::error::{Error, Result};
use crate::params::{ParamGroup, ParamStore};
use crate::tensor::Real;

/// One SwiGLU expert's matrices, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct ExpertWeights {
    pub h: usize,
    pub d_e: usize,
    /// `[d_e × h]`
    pub htoh4_0: Vec<f64>,
    /// `[d_e × h]`
    pub htoh4_1: Vec<f64>,
    /// `[h × d_e]`
    pub h4toh: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Similarity {
    /// `[N × N]` cosine similarities.
    pub matrix: Vec<Vec<f64>>,
    /// Mean of all `N²` entries, diagonal included.
    pub avg: f64,
}

/// Summarizes each expert by averaging its three matrices over the `d_e`
/// axis, L2-normalizes each `h`-vector, concatenates them and returns the
/// pairwise cosine similarities of the concatenations.
pub fn expert_similarity(experts: &[ExpertWeights]) -> Result<Similarity> {
    let n = experts.len();
    if n == 0 {
        return Err(Error::Input("no experts".into()));
    }
    let mut summaries = Vec::with_capacity(n);
    for (idx, e) in experts.iter().enumerate() {
        let (h, de) = (e.h, e.d_e);
        if e.htoh4_0.len() != de * h || e.htoh4_1.len() != de * h || e.h4toh.len() != h * de {
            return Err(Error::Shape {
                op: "expert_similarity",
                left: vec![de, h],
                right: vec![e.htoh4_0.len(), e.htoh4_1.len(), e.h4toh.len()],
            });
        }
        let key = |w: &[f64]| -> Vec<f64> {
            (0..h)
                .map(|j| (0..de).map(|r| w[r * h + j]).sum::<f64>() / de as f64)
                .collect()
        };
        let value: Vec<f64> = (0..h)
            .map(|i| e.h4toh[i * de..(i + 1) * de].iter().sum::<f64>() / de as f64)
            .collect();
        let mut cat = Vec::with_capacity(3 * h);
        for part in [key(&e.htoh4_0), key(&e.htoh4_1), value] {
            let norm = part.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm == 0.0 {
                return Err(Error::Numeric(format!("expert {idx} has a zero-norm summary")));
            }
            cat.extend(part.iter().map(|v| v / norm));
        }
        summaries.push(cat);
    }
    let unit: Vec<Vec<f64>> = summaries
        .into_iter()
        .map(|v| {
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            v.into_iter().map(|x| x / norm).collect()
        })
        .collect();
    let matrix: Vec<Vec<f64>> = unit
        .iter()
        .map(|a| unit.iter().map(|b| a.iter().zip(b).map(|(x, y)| x * y).sum()).collect())
        .collect();
    let avg = matrix.iter().flatten().sum::<f64>() / (n * n) as f64;
    Ok(Similarity { matrix, avg })
}

/// Reads the experts of `layer` out of a parameter store.
pub fn layer_experts<T: Real>(store: &ParamStore<T>, layer: usize) -> Result<Vec<ExpertWeights>> {
    let mut out = Vec::new();
    for n in 0.. {
        let get = |suffix: &str| store.by_name(&format!("layers.{layer}.experts.{n}.{suffix}"));
        let (Some(a), Some(b), Some(c)) = (get("htoh4_0"), get("htoh4_1"), get("h4toh")) else {
            break;
        };
        let (de, h) = a.tensor.dims2();
        out.push(ExpertWeights {
            h,
            d_e: de,
            htoh4_0: a.tensor.to_f64(),
            htoh4_1: b.tensor.to_f64(),
            h4toh: c.tensor.to_f64(),
        });
    }
    if out.is_empty() {
        return Err(Error::Input(format!("no experts found for layer {layer}")));
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct WeightStat {
    pub name: String,
    pub layer: Option<usize>,
    pub norm: f64,
    pub std: f64,
}

/// Frobenius norm and population standard deviation of every router matrix.
pub fn router_weight_stats<T: Real>(store: &ParamStore<T>) -> Vec<WeightStat> {
    store
        .iter()
        .filter(|p| p.group == ParamGroup::Router && p.tensor.shape().len() == 2)
        .map(|p| {
            let v = p.tensor.to_f64();
            let n = v.len().max(1) as f64;
            let mean = v.iter().sum::<f64>() / n;
            let var = v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
            WeightStat {
                name: p.name.clone(),
                layer: p
                    .name
                    .strip_prefix("layers.")
                    .and_then(|r| r.split('.').next())
                    .and_then(|i| i.parse().ok()),
                norm: v.iter().map(|x| x * x).sum::<f64>().sqrt(),
                std: var.sqrt(),
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn expert(seed: f64, h: usize, de: usize) -> ExpertWeights {
        let f = |k: usize| ((k as f64 + 1.0) * seed).sin();
        ExpertWeights {
            h,
            d_e: de,
            htoh4_0: (0..h * de).map(f).collect(),
            htoh4_1: (0..h * de).map(|k| f(k + 7)).collect(),
            h4toh: (0..h * de).map(|k| f(k + 13)).collect(),
        }
    }

    #[test]
    fn identical_and_opposite_experts() {
        let e = expert(0.37, 4, 3);
        let s = expert_similarity(&[e.clone(), e.clone()]).unwrap();
        assert!(s.matrix.iter().flatten().all(|v| (v - 1.0).abs() < 1e-12));
        let neg = ExpertWeights {
            htoh4_0: e.htoh4_0.iter().map(|v| -v).collect(),
            htoh4_1: e.htoh4_1.iter().map(|v| -v).collect(),
            h4toh: e.h4toh.iter().map(|v| -v).collect(),
            ..e.clone()
        };
        let s = expert_similarity(&[e, neg]).unwrap();
        assert!((s.matrix[0][1] + 1.0).abs() < 1e-12);
        assert!(s.avg.abs() < 1e-12);
    }

    #[test]
    fn zero_summary_is_numeric_error() {
        let mut e = expert(0.5, 2, 2);
        e.h4toh = vec![0.0; 4];
        assert!(matches!(expert_similarity(&[e]), Err(Error::Numeric(_))));
    }
}
