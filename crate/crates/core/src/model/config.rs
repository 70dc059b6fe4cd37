use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::routers::RouterSpec;

/// Shape of the decoder stack. JSON keys follow the usual MoE shorthand
/// (`h`, `N`, `k`, `d_e`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub n_layers: usize,
    #[serde(rename = "h")]
    pub hidden: usize,
    #[serde(rename = "N")]
    pub n_experts: usize,
    #[serde(rename = "k")]
    pub top_k: usize,
    #[serde(rename = "d_e")]
    pub expert_hidden: usize,
    pub n_heads: usize,
    pub seq_len: usize,
    /// Filled from the corpus vocabulary when training.
    pub vocab_size: usize,
    /// Set from the run configuration's top-level `router`.
    #[serde(skip)]
    pub router: RouterSpec,
    pub balance_weight: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            n_layers: 4,
            hidden: 128,
            n_experts: 8,
            top_k: 2,
            expert_hidden: 128,
            n_heads: 4,
            seq_len: 256,
            vocab_size: 256,
            router: RouterSpec::default(),
            balance_weight: 0.01,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("n_layers", self.n_layers),
            ("h", self.hidden),
            ("N", self.n_experts),
            ("d_e", self.expert_hidden),
            ("n_heads", self.n_heads),
            ("seq_len", self.seq_len),
            ("vocab_size", self.vocab_size),
        ];
        if let Some((field, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::config(*field, "must be >= 1"));
        }
        if self.top_k == 0 || self.top_k > self.n_experts {
            return Err(Error::config(
                "k",
                format!("need 1 <= k <= N = {}, got {}", self.n_experts, self.top_k),
            ));
        }
        if !self.hidden.is_multiple_of(self.n_heads) {
            return Err(Error::config(
                "n_heads",
                format!("h = {} is not divisible by {}", self.hidden, self.n_heads),
            ));
        }
        if !(self.balance_weight.is_finite() && self.balance_weight >= 0.0) {
            return Err(Error::config("balance_weight", "must be finite and >= 0"));
        }
        self.router.validate()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn heads_must_divide_hidden() {
        let cfg = ModelConfig {
            n_heads: 3,
            ..ModelConfig::default()
        };
        assert!(cfg.validate().unwrap_err().is_config());
        ModelConfig::default().validate().unwrap();
    }

    #[test]
    fn shorthand_keys() {
        let cfg: ModelConfig =
            serde_json::from_str(r#"{"h": 32, "N": 4, "k": 1, "d_e": 64, "n_heads": 2}"#).unwrap();
        assert_eq!((cfg.hidden, cfg.n_experts, cfg.top_k, cfg.expert_hidden), (32, 4, 1, 64));
    }
}
