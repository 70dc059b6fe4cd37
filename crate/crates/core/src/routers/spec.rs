use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RouterFamily {
    Linear,
    Mlp,
    Random,
    Cosine,
    Xmoe,
    Hyper,
    Recurrent,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CellKind {
    Gru,
    Rnn,
    Lstm,
}

/// Router family plus the ablation switches of the recurrent router.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RouterSpec {
    pub family: RouterFamily,
    pub cell: CellKind,
    /// Recurrent state width.
    pub p: usize,
    /// One projector for all layers instead of one per layer.
    pub shared_projector: bool,
    /// Every layer's cell reads the zero state instead of the previous layer's.
    pub np_mode: bool,
    /// Stop gradients through the incoming state.
    pub detach_h: bool,
    /// Weight of the previous layer's logits added to this layer's.
    pub residual_alpha: f64,
    pub detach_residual: bool,
    pub xmoe_dim: usize,
    pub temperature_init: f64,
    /// MLP router hidden width; `None` means `2h`.
    pub mlp_hidden: Option<usize>,
    /// Width of the hypernetwork's input projection and of the router embedding.
    pub hyper_dim: usize,
}

impl Default for RouterSpec {
    fn default() -> Self {
        Self {
            family: RouterFamily::Linear,
            cell: CellKind::Gru,
            p: 128,
            shared_projector: false,
            np_mode: false,
            detach_h: false,
            residual_alpha: 0.0,
            detach_residual: false,
            xmoe_dim: 16,
            temperature_init: 1.0,
            mlp_hidden: None,
            hyper_dim: 16,
        }
    }
}

impl RouterSpec {
    pub fn linear() -> Self {
        Self::default()
    }

    pub fn family(family: RouterFamily) -> Self {
        Self {
            family,
            ..Self::default()
        }
    }

    /// GRU router with per-layer projectors and recurrent width `p`.
    pub fn recurrent(p: usize) -> Self {
        Self {
            family: RouterFamily::Recurrent,
            p,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let recurrent = self.family == RouterFamily::Recurrent;
        let ablations = [
            ("np_mode", self.np_mode),
            ("detach_h", self.detach_h),
            ("shared_projector", self.shared_projector),
            ("residual_alpha", self.residual_alpha != 0.0),
            ("detach_residual", self.detach_residual),
        ];
        if !recurrent {
            if let Some((field, _)) = ablations.iter().find(|(_, on)| *on) {
                return Err(Error::config(
                    *field,
                    format!("only valid with family \"recurrent\", not {:?}", self.family),
                ));
            }
        }
        if !(self.residual_alpha.is_finite() && self.residual_alpha >= 0.0) {
            return Err(Error::config("residual_alpha", "must be finite and >= 0"));
        }
        if self.detach_residual && self.residual_alpha <= 0.0 {
            return Err(Error::config("detach_residual", "requires residual_alpha > 0"));
        }
        if self.p == 0 {
            return Err(Error::config("p", "must be >= 1"));
        }
        if self.xmoe_dim == 0 {
            return Err(Error::config("xmoe_dim", "must be >= 1"));
        }
        if self.hyper_dim == 0 {
            return Err(Error::config("hyper_dim", "must be >= 1"));
        }
        if self.mlp_hidden == Some(0) {
            return Err(Error::config("mlp_hidden", "must be >= 1"));
        }
        if !(self.temperature_init.is_finite() && self.temperature_init > 0.0) {
            return Err(Error::config("temperature_init", "must be finite and > 0"));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ablation_flags_need_recurrent_family() {
        let spec = RouterSpec {
            np_mode: true,
            ..RouterSpec::linear()
        };
        assert!(spec.validate().unwrap_err().is_config());
        let spec = RouterSpec {
            np_mode: true,
            residual_alpha: 0.5,
            ..RouterSpec::recurrent(8)
        };
        spec.validate().unwrap();
    }

    #[test]
    fn detach_residual_needs_alpha() {
        let spec = RouterSpec {
            detach_residual: true,
            ..RouterSpec::recurrent(8)
        };
        assert!(spec.validate().is_err());
    }

    #[test]
    fn json_round_trip_and_unknown_fields() {
        let spec = RouterSpec {
            residual_alpha: 0.5,
            cell: CellKind::Lstm,
            ..RouterSpec::recurrent(32)
        };
        let s = serde_json::to_string(&spec).unwrap();
        assert_eq!(serde_json::from_str::<RouterSpec>(&s).unwrap(), spec);
        let parsed: RouterSpec = serde_json::from_str(r#"{"family":"xmoe"}"#).unwrap();
        assert_eq!(parsed.family, RouterFamily::Xmoe);
        assert!(serde_json::from_str::<RouterSpec>(r#"{"famliy":"xmoe"}"#).is_err());
    }
}
