//! Router families and the layerwise recurrent router.
//!
//! Every router maps a `[tokens × h]` block to logits over `N` experts; the
//! shared tail ([`gate`]) turns logits into softmax scores and a top-k pick.
//! Selected weights are the raw softmax scores, never renormalized.

mod cells;
mod spec;

pub use cells::{
    cell_step, gru_step, lstm_step, rnn_step, CellState, CellVars, GruVars, LstmVars, RnnVars,
};
pub use spec::{CellKind, RouterFamily, RouterSpec};

use crate::error::{Error, Result};
use crate::params::{init_const, init_uniform, Bound, ParamGroup, ParamId, ParamStore};
use crate::tensor::{topk, Graph, Real, Unary, Var};

/// Per-token router result.
#[derive(Debug, Clone, PartialEq)]
pub struct GateOutput {
    pub logits: Vec<f64>,
    pub scores: Vec<f64>,
    pub topk_indices: Vec<usize>,
    pub topk_weights: Vec<f64>,
    /// `−Σ s ln s` in nats.
    pub entropy: f64,
}

impl GateOutput {
    /// Softmax, top-k and entropy of a single logit row, computed directly.
    pub fn from_logits(logits: &[f64], k: usize) -> Result<Self> {
        if logits.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("non-finite router logits".into()));
        }
        let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = logits.iter().map(|&v| (v - max).exp()).collect();
        let z: f64 = exps.iter().sum();
        let scores: Vec<f64> = exps.iter().map(|e| e / z).collect();
        Self::from_parts(logits.to_vec(), scores, k)
    }

    fn from_parts(logits: Vec<f64>, scores: Vec<f64>, k: usize) -> Result<Self> {
        let (topk_indices, topk_weights) = topk(&scores, k)?;
        let entropy = entropy(&scores);
        Ok(Self {
            logits,
            scores,
            topk_indices,
            topk_weights,
            entropy,
        })
    }
}

/// Shannon entropy in nats with `0·ln 0 = 0`.
pub fn entropy(p: &[f64]) -> f64 {
    -p.iter().filter(|&&v| v > 0.0).map(|&v| v * v.ln()).sum::<f64>()
}

/// Batched routing decision recorded on a graph.
#[derive(Debug, Clone)]
pub struct Routing {
    /// `[tokens × N]`
    pub logits: Var,
    /// `[tokens × N]`, softmax of `logits`.
    pub scores: Var,
    /// `k` expert ids per token, row-major.
    pub indices: Vec<usize>,
    /// `[tokens × k]`, scores at `indices`.
    pub weights: Var,
    pub k: usize,
}

impl Routing {
    pub fn tokens<T: Real>(&self, g: &Graph<T>) -> usize {
        g.dims(self.scores).0
    }

    pub fn gate_outputs<T: Real>(&self, g: &Graph<T>) -> Vec<GateOutput> {
        let (m, n) = g.dims(self.scores);
        let logits = g.value(self.logits);
        let scores = g.value(self.scores);
        let weights = g.value(self.weights);
        (0..m)
            .map(|t| {
                let s: Vec<f64> = scores[t * n..(t + 1) * n]
                    .iter()
                    .map(|v| v.to_f64().unwrap())
                    .collect();
                GateOutput {
                    logits: logits[t * n..(t + 1) * n]
                        .iter()
                        .map(|v| v.to_f64().unwrap())
                        .collect(),
                    entropy: entropy(&s),
                    scores: s,
                    topk_indices: self.indices[t * self.k..(t + 1) * self.k].to_vec(),
                    topk_weights: weights[t * self.k..(t + 1) * self.k]
                        .iter()
                        .map(|v| v.to_f64().unwrap())
                        .collect(),
                }
            })
            .collect()
    }
}

/// Softmax plus per-row top-k over `[tokens × N]` logits.
pub fn gate<T: Real>(g: &mut Graph<T>, logits: Var, k: usize) -> Result<Routing> {
    let (m, n) = g.dims(logits);
    if k == 0 || k > n {
        return Err(Error::config("k", format!("top-k needs 1 <= k <= {n}, got {k}")));
    }
    let scores = g.softmax(logits)?;
    let mut indices = Vec::with_capacity(m * k);
    {
        let sv = g.value(scores);
        for t in 0..m {
            let (idx, _) = topk(&sv[t * n..(t + 1) * n], k)?;
            indices.extend(idx);
        }
    }
    let weights = g.take_cols(scores, &indices, k)?;
    Ok(Routing {
        logits,
        scores,
        indices,
        weights,
        k,
    })
}

// ------------------------------------------------------------ logit maps

/// `x·G`
pub fn linear_logits<T: Real>(g: &mut Graph<T>, x: Var, gate: Var) -> Result<Var> {
    g.matmul(x, gate)
}

/// `gelu(x·W₁)·W₂`
pub fn mlp_logits<T: Real>(g: &mut Graph<T>, x: Var, w1: Var, w2: Var) -> Result<Var> {
    let a = g.matmul(x, w1)?;
    let a = g.gelu(a);
    g.matmul(a, w2)
}

/// `cos(x, G[:, n]) / softplus(θ)`
pub fn cosine_logits<T: Real>(g: &mut Graph<T>, x: Var, gate: Var, theta: Var) -> Result<Var> {
    let xn = g.normalize_rows(x)?;
    let cols = g.transpose(gate);
    let cols = g.normalize_rows(cols)?;
    let cos = g.matmul_nt(xn, cols)?;
    let temp = g.unary(theta, Unary::Softplus);
    let inv = g.unary(temp, Unary::Recip);
    g.mul_scalar(cos, inv)
}

/// Cosine logits in a down-projected space.
pub fn xmoe_logits<T: Real>(
    g: &mut Graph<T>,
    x: Var,
    down: Var,
    gate: Var,
    theta: Var,
) -> Result<Var> {
    let z = g.matmul(x, down)?;
    cosine_logits(g, z, gate, theta)
}

/// A frozen linear hypernetwork reads `[x·P, e]` and emits a token-specific
/// `[h × N]` gate, applied to `x`.
pub fn hyper_logits<T: Real>(
    g: &mut Graph<T>,
    x: Var,
    in_proj: Var,
    net: Var,
    embed: Var,
    n_experts: usize,
) -> Result<Var> {
    let tokens = g.dims(x).0;
    let u = g.matmul(x, in_proj)?;
    let e = g.broadcast_rows(embed, tokens)?;
    let c = g.concat_cols(u, e)?;
    let w = g.matmul(c, net)?;
    g.row_bilinear(x, w, n_experts)
}

/// θ with `softplus(θ) = t`.
pub fn softplus_inverse(t: f64) -> f64 {
    t + (-(-t).exp_m1()).ln()
}

// ------------------------------------------------------------ parameters

#[derive(Debug, Clone)]
enum LayerIds {
    Linear { gate: ParamId },
    Mlp { w1: ParamId, w2: ParamId },
    Cosine { gate: ParamId, theta: ParamId },
    Xmoe { down: ParamId, gate: ParamId, theta: ParamId },
    Hyper { in_proj: ParamId, net: ParamId, embed: ParamId },
    Recurrent { proj: ParamId, gate: ParamId },
}

#[derive(Debug, Clone)]
enum CellIds {
    Gru { w: [ParamId; 3], u: [ParamId; 3] },
    Rnn { w: ParamId, u: ParamId },
    Lstm { w: [ParamId; 4], u: [ParamId; 4] },
}

impl CellIds {
    fn bind(&self, b: &Bound) -> CellVars {
        match self {
            CellIds::Gru { w, u } => CellVars::Gru(GruVars {
                w: w.map(|i| b.var(i)),
                u: u.map(|i| b.var(i)),
            }),
            CellIds::Rnn { w, u } => CellVars::Rnn(RnnVars {
                w: b.var(*w),
                u: b.var(*u),
            }),
            CellIds::Lstm { w, u } => CellVars::Lstm(LstmVars {
                w: w.map(|i| b.var(i)),
                u: u.map(|i| b.var(i)),
            }),
        }
    }
}

/// What one layer hands to the next: the recurrent state and the logits
/// used for the residual path.
#[derive(Debug, Clone, Default)]
pub struct RouteCarry {
    pub state: Option<CellState>,
    pub prev_logits: Option<Var>,
}

/// Router parameters for every layer of a model, registered in a
/// [`ParamStore`] under `layers.{i}.router.*` and `router.*`.
#[derive(Debug, Clone)]
pub struct RouterBank {
    spec: RouterSpec,
    hidden: usize,
    n_experts: usize,
    k: usize,
    layers: Vec<LayerIds>,
    cell: Option<CellIds>,
}

impl RouterBank {
    pub fn register<T: Real>(
        store: &mut ParamStore<T>,
        spec: &RouterSpec,
        n_layers: usize,
        hidden: usize,
        n_experts: usize,
        k: usize,
        seed: u64,
    ) -> Result<Self> {
        spec.validate()?;
        if k == 0 || k > n_experts {
            return Err(Error::config("k", format!("need 1 <= k <= N = {n_experts}, got {k}")));
        }
        let grp = ParamGroup::Router;
        let add = |store: &mut ParamStore<T>, name: String, shape: &[usize], frozen: bool| {
            let t = init_uniform::<T>(seed, &name, shape);
            store.add(name, grp, frozen, t)
        };
        let p = spec.p;
        let shared_proj = if spec.family == RouterFamily::Recurrent && spec.shared_projector {
            Some(add(store, "router.proj".into(), &[hidden, p], false)?)
        } else {
            None
        };
        let cell = if spec.family == RouterFamily::Recurrent {
            let mats = |store: &mut ParamStore<T>, names: &[&str]| -> Result<Vec<ParamId>> {
                names
                    .iter()
                    .map(|n| add(store, format!("router.cell.{n}"), &[p, p], false))
                    .collect()
            };
            Some(match spec.cell {
                CellKind::Gru => {
                    let w = mats(store, &["w_s", "w_z", "w_h"])?;
                    let u = mats(store, &["u_s", "u_z", "u_h"])?;
                    CellIds::Gru {
                        w: [w[0], w[1], w[2]],
                        u: [u[0], u[1], u[2]],
                    }
                }
                CellKind::Rnn => {
                    let m = mats(store, &["w", "u"])?;
                    CellIds::Rnn { w: m[0], u: m[1] }
                }
                CellKind::Lstm => {
                    let w = mats(store, &["w_i", "w_f", "w_o", "w_g"])?;
                    let u = mats(store, &["u_i", "u_f", "u_o", "u_g"])?;
                    CellIds::Lstm {
                        w: [w[0], w[1], w[2], w[3]],
                        u: [u[0], u[1], u[2], u[3]],
                    }
                }
            })
        } else {
            None
        };

        let theta0 = softplus_inverse(spec.temperature_init);
        let mut layers = Vec::with_capacity(n_layers);
        for i in 0..n_layers {
            let pre = format!("layers.{i}.router");
            let ids = match spec.family {
                RouterFamily::Linear => LayerIds::Linear {
                    gate: add(store, format!("{pre}.gate"), &[hidden, n_experts], false)?,
                },
                RouterFamily::Random => LayerIds::Linear {
                    gate: add(store, format!("{pre}.gate"), &[hidden, n_experts], true)?,
                },
                RouterFamily::Mlp => {
                    let hid = spec.mlp_hidden.unwrap_or(2 * hidden);
                    LayerIds::Mlp {
                        w1: add(store, format!("{pre}.w1"), &[hidden, hid], false)?,
                        w2: add(store, format!("{pre}.w2"), &[hid, n_experts], false)?,
                    }
                }
                RouterFamily::Cosine => LayerIds::Cosine {
                    gate: add(store, format!("{pre}.gate"), &[hidden, n_experts], false)?,
                    theta: store.add(
                        format!("{pre}.temperature"),
                        grp,
                        false,
                        init_const(&[1], theta0),
                    )?,
                },
                RouterFamily::Xmoe => {
                    let d = spec.xmoe_dim;
                    LayerIds::Xmoe {
                        down: add(store, format!("{pre}.down"), &[hidden, d], false)?,
                        gate: add(store, format!("{pre}.gate"), &[d, n_experts], false)?,
                        theta: store.add(
                            format!("{pre}.temperature"),
                            grp,
                            false,
                            init_const(&[1], theta0),
                        )?,
                    }
                }
                RouterFamily::Hyper => {
                    let d = spec.hyper_dim;
                    let in_proj = add(store, format!("{pre}.hyper_in"), &[hidden, d], true)?;
                    let net = add(store, format!("{pre}.hypernet"), &[2 * d, hidden * n_experts], true)?;
                    let name = format!("{pre}.hyper_embed");
                    let t = crate::params::init_uniform_bound::<T>(seed, &name, &[1, d], 1.0);
                    let embed = store.add(name, grp, false, t)?;
                    LayerIds::Hyper {
                        in_proj,
                        net,
                        embed,
                    }
                }
                RouterFamily::Recurrent => LayerIds::Recurrent {
                    proj: match shared_proj {
                        Some(id) => id,
                        None => add(store, format!("{pre}.proj"), &[hidden, p], false)?,
                    },
                    gate: add(store, format!("{pre}.gate"), &[p, n_experts], false)?,
                },
            };
            layers.push(ids);
        }
        Ok(Self {
            spec: spec.clone(),
            hidden,
            n_experts,
            k,
            layers,
            cell,
        })
    }

    pub fn spec(&self) -> &RouterSpec {
        &self.spec
    }

    pub fn n_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn n_experts(&self) -> usize {
        self.n_experts
    }

    pub fn k(&self) -> usize {
        self.k
    }

    /// Routes the `[tokens × h]` block `x` at `layer`, reading and updating
    /// `carry` for the recurrent family.
    pub fn route<T: Real>(
        &self,
        g: &mut Graph<T>,
        b: &Bound,
        layer: usize,
        x: Var,
        carry: &mut RouteCarry,
    ) -> Result<Routing> {
        let (tokens, h) = g.dims(x);
        if h != self.hidden {
            return Err(Error::Shape {
                op: "route",
                left: g.shape(x).to_vec(),
                right: vec![tokens, self.hidden],
            });
        }
        let ids = self.layers.get(layer).ok_or_else(|| {
            Error::Input(format!("layer {layer} out of range for {} layers", self.layers.len()))
        })?;
        let logits = match ids {
            LayerIds::Linear { gate } => linear_logits(g, x, b.var(*gate))?,
            LayerIds::Mlp { w1, w2 } => mlp_logits(g, x, b.var(*w1), b.var(*w2))?,
            LayerIds::Cosine { gate, theta } => cosine_logits(g, x, b.var(*gate), b.var(*theta))?,
            LayerIds::Xmoe { down, gate, theta } => {
                xmoe_logits(g, x, b.var(*down), b.var(*gate), b.var(*theta))?
            }
            LayerIds::Hyper {
                in_proj,
                net,
                embed,
            } => hyper_logits(
                g,
                x,
                b.var(*in_proj),
                b.var(*net),
                b.var(*embed),
                self.n_experts,
            )?,
            LayerIds::Recurrent { proj, gate } => {
                let cell = self.cell.as_ref().expect("recurrent bank has a cell").bind(b);
                self.recurrent_logits(g, x, b.var(*proj), b.var(*gate), &cell, carry)?
            }
        };
        gate(g, logits, self.k)
    }

    fn recurrent_logits<T: Real>(
        &self,
        g: &mut Graph<T>,
        x: Var,
        proj: Var,
        gate: Var,
        cell: &CellVars,
        carry: &mut RouteCarry,
    ) -> Result<Var> {
        let s = &self.spec;
        let tokens = g.dims(x).0;
        let lstm = matches!(cell, CellVars::Lstm(_));
        let xp = g.matmul(x, proj)?;
        let mut h_in = match (&carry.state, s.np_mode) {
            (Some(st), false) => *st,
            _ => CellState::zeros(g, tokens, s.p, lstm),
        };
        if s.detach_h {
            h_in = h_in.detached(g);
        }
        let state = cell_step(g, xp, &h_in, cell)?;
        let mut logits = g.matmul(state.h, gate)?;
        if s.residual_alpha > 0.0 {
            if let Some(prev) = carry.prev_logits {
                let prev = if s.detach_residual { g.detach(prev) } else { prev };
                let scaled = g.scale(prev, T::lit(s.residual_alpha));
                logits = g.add(logits, scaled)?;
            }
        }
        carry.state = Some(state);
        carry.prev_logits = Some(logits);
        Ok(logits)
    }
}
