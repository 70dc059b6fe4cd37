//! Decoder-only transformer whose feed-forward blocks are sparse SwiGLU
//! expert layers.
//!
//! Each block is pre-norm: `x += attn(norm(x))`, then `x += moe(norm(x))`.
//! The router of every MoE block reads the normalized block input; the
//! recurrent router threads its state through the blocks token by token.

mod checkpoint;
mod config;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, Manifest, TensorEntry};
pub use config::ModelConfig;

use std::collections::BTreeMap;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::params::{
    init_const, init_normal, init_uniform, init_uniform_bound, Bound, ParamGroup, ParamId,
    ParamStore,
};
use crate::routers::{RouteCarry, RouterBank, Routing};
use crate::tensor::{Graph, Real, Var};

const NORM_EPS: f64 = 1e-6;
const EMBED_STD: f64 = 0.02;

#[derive(Debug, Clone)]
struct ExpertIds {
    htoh4_0: ParamId,
    htoh4_1: ParamId,
    h4toh: ParamId,
}

#[derive(Debug, Clone)]
struct BlockIds {
    attn_norm: ParamId,
    wq: ParamId,
    wk: ParamId,
    wv: ParamId,
    wo: ParamId,
    moe_norm: ParamId,
    experts: Vec<ExpertIds>,
}

/// Graph handles of one SwiGLU expert.
#[derive(Debug, Clone, Copy)]
pub struct ExpertVars {
    /// `[d_e × h]` gate projection.
    pub htoh4_0: Var,
    /// `[d_e × h]` up projection.
    pub htoh4_1: Var,
    /// `[h × d_e]` down projection.
    pub h4toh: Var,
}

/// Layout of a model's parameters inside its [`ParamStore`].
#[derive(Debug, Clone)]
pub struct Model {
    config: ModelConfig,
    tok_emb: ParamId,
    pos_emb: ParamId,
    blocks: Vec<BlockIds>,
    final_norm: ParamId,
    head: ParamId,
    routers: RouterBank,
}

/// Result of [`Model::forward`].
#[derive(Debug, Clone)]
pub struct Forward {
    /// `[tokens × vocab]`
    pub logits: Var,
    /// One routing decision per MoE block.
    pub routings: Vec<Routing>,
}

/// Graph handles of the training objective.
#[derive(Debug, Clone, Copy)]
pub struct Loss {
    pub total: Var,
    pub lm: Var,
    /// Mean over blocks of the per-block balance loss.
    pub balance: Var,
}

impl Model {
    /// Builds the layout and a freshly initialized parameter store.
    ///
    /// Matrices are `uniform(±1/√fan_in)`, embeddings `N(0, 0.02²)`, norm
    /// gains one. Streams are keyed by parameter name, so two models that
    /// differ only in router family share every non-router parameter.
    pub fn new<T: Real>(config: ModelConfig, seed: u64) -> Result<(Self, ParamStore<T>)> {
        config.validate()?;
        let ModelConfig {
            n_layers,
            hidden: h,
            n_experts,
            expert_hidden: de,
            seq_len,
            vocab_size,
            ..
        } = config;
        let mut s = ParamStore::new();
        let mat = |s: &mut ParamStore<T>, name: String, group, shape: &[usize]| {
            let t = init_uniform::<T>(seed, &name, shape);
            s.add(name, group, false, t)
        };
        let tok_emb = s.add(
            "tok_emb",
            ParamGroup::Embedding,
            false,
            init_normal(seed, "tok_emb", &[vocab_size, h], EMBED_STD),
        )?;
        let pos_emb = s.add(
            "pos_emb",
            ParamGroup::Embedding,
            false,
            init_normal(seed, "pos_emb", &[seq_len, h], EMBED_STD),
        )?;
        let mut blocks = Vec::with_capacity(n_layers);
        for i in 0..n_layers {
            let pre = format!("layers.{i}");
            let attn_norm = s.add(format!("{pre}.attn_norm"), ParamGroup::Norm, false, init_const(&[h], 1.0))?;
            let wq = mat(&mut s, format!("{pre}.attn.wq"), ParamGroup::Attention, &[h, h])?;
            let wk = mat(&mut s, format!("{pre}.attn.wk"), ParamGroup::Attention, &[h, h])?;
            let wv = mat(&mut s, format!("{pre}.attn.wv"), ParamGroup::Attention, &[h, h])?;
            let wo = mat(&mut s, format!("{pre}.attn.wo"), ParamGroup::Attention, &[h, h])?;
            let moe_norm = s.add(format!("{pre}.moe_norm"), ParamGroup::Norm, false, init_const(&[h], 1.0))?;
            let mut experts = Vec::with_capacity(n_experts);
            for n in 0..n_experts {
                let mut expert = |suffix: &str, shape: [usize; 2], fan_in: usize| {
                    let name = format!("{pre}.experts.{n}.{suffix}");
                    let bound = 1.0 / (fan_in as f64).sqrt();
                    let t = init_uniform_bound::<T>(seed, &name, &shape, bound);
                    s.add(name, ParamGroup::Experts, false, t)
                };
                experts.push(ExpertIds {
                    htoh4_0: expert("htoh4_0", [de, h], h)?,
                    htoh4_1: expert("htoh4_1", [de, h], h)?,
                    h4toh: expert("h4toh", [h, de], de)?,
                });
            }
            blocks.push(BlockIds {
                attn_norm,
                wq,
                wk,
                wv,
                wo,
                moe_norm,
                experts,
            });
        }
        let final_norm = s.add("final_norm", ParamGroup::Norm, false, init_const(&[h], 1.0))?;
        let head = mat(&mut s, "head".into(), ParamGroup::Head, &[h, vocab_size])?;
        let routers = RouterBank::register(
            &mut s,
            &config.router,
            n_layers,
            h,
            n_experts,
            config.top_k,
            seed,
        )?;
        let model = Model {
            config,
            tok_emb,
            pos_emb,
            blocks,
            final_norm,
            head,
            routers,
        };
        Ok((model, s))
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn routers(&self) -> &RouterBank {
        &self.routers
    }

    pub fn experts(&self, b: &Bound, layer: usize) -> Vec<ExpertVars> {
        self.blocks[layer]
            .experts
            .iter()
            .map(|e| ExpertVars {
                htoh4_0: b.var(e.htoh4_0),
                htoh4_1: b.var(e.htoh4_1),
                h4toh: b.var(e.h4toh),
            })
            .collect()
    }

    /// Runs `batch` sequences laid out back to back in `tokens`.
    pub fn forward<T: Real>(
        &self,
        g: &mut Graph<T>,
        b: &Bound,
        tokens: &[usize],
        batch: usize,
    ) -> Result<Forward> {
        let cfg = &self.config;
        if batch == 0 || !tokens.len().is_multiple_of(batch) {
            return Err(Error::Input(format!(
                "{} tokens do not split into {batch} sequences",
                tokens.len()
            )));
        }
        let seq = tokens.len() / batch;
        if seq == 0 || seq > cfg.seq_len {
            return Err(Error::Input(format!(
                "sequence length {seq} outside 1..={}",
                cfg.seq_len
            )));
        }
        if let Some(&bad) = tokens.iter().find(|&&t| t >= cfg.vocab_size) {
            return Err(Error::Input(format!(
                "token id {bad} out of range for vocabulary of {}",
                cfg.vocab_size
            )));
        }
        let positions: Vec<usize> = (0..tokens.len()).map(|i| i % seq).collect();
        let te = g.gather_rows(b.var(self.tok_emb), tokens)?;
        let pe = g.gather_rows(b.var(self.pos_emb), &positions)?;
        let mut x = g.add(te, pe)?;
        let mut carry = RouteCarry::default();
        let mut routings = Vec::with_capacity(self.blocks.len());
        for (i, blk) in self.blocks.iter().enumerate() {
            let a = g.rms_norm(x, b.var(blk.attn_norm), NORM_EPS)?;
            let q = g.matmul(a, b.var(blk.wq))?;
            let k = g.matmul(a, b.var(blk.wk))?;
            let v = g.matmul(a, b.var(blk.wv))?;
            let att = g.causal_attention(q, k, v, batch, seq, cfg.n_heads)?;
            let o = g.matmul(att, b.var(blk.wo))?;
            x = g.add(x, o)?;

            let m = g.rms_norm(x, b.var(blk.moe_norm), NORM_EPS)?;
            let routing = self.routers.route(g, b, i, m, &mut carry)?;
            let y = moe_combine(g, m, &routing, &self.experts(b, i))?;
            x = g.add(x, y)?;
            routings.push(routing);
        }
        let x = g.rms_norm(x, b.var(self.final_norm), NORM_EPS)?;
        let logits = g.matmul(x, b.var(self.head))?;
        Ok(Forward { logits, routings })
    }

    /// `lm + balance_weight · mean_layers(balance)`.
    pub fn loss<T: Real>(&self, g: &mut Graph<T>, fwd: &Forward, targets: &[usize]) -> Result<Loss> {
        let lm = g.cross_entropy(fwd.logits, targets)?;
        let mut acc: Option<Var> = None;
        for r in &fwd.routings {
            let l = balance_loss(g, r, self.config.n_experts)?;
            acc = Some(match acc {
                Some(a) => g.add(a, l)?,
                None => l,
            });
        }
        let balance = match acc {
            Some(a) => g.scale(a, T::lit(1.0 / fwd.routings.len() as f64)),
            None => g.zeros(vec![]),
        };
        let weighted = g.scale(balance, T::lit(self.config.balance_weight));
        let total = g.add(lm, weighted)?;
        Ok(Loss { total, lm, balance })
    }
}

/// `E(x) = (silu(x·W₀ᵀ) ⊙ (x·W₁ᵀ))·W₂ᵀ` on a `[m × h]` block.
pub fn expert_forward<T: Real>(g: &mut Graph<T>, x: Var, e: &ExpertVars) -> Result<Var> {
    let gate = g.matmul_nt(x, e.htoh4_0)?;
    let gate = g.silu(gate);
    let up = g.matmul_nt(x, e.htoh4_1)?;
    let hid = g.mul(gate, up)?;
    g.matmul_nt(hid, e.h4toh)
}

/// Sparse weighted expert sum: each expert sees only the tokens that
/// selected it, and contributions are added in ascending expert order.
pub fn moe_combine<T: Real>(
    g: &mut Graph<T>,
    x: Var,
    routing: &Routing,
    experts: &[ExpertVars],
) -> Result<Var> {
    let (tokens, h) = g.dims(x);
    let k = routing.k;
    if routing.indices.len() != tokens * k {
        return Err(Error::Shape {
            op: "moe_combine",
            left: vec![tokens, h],
            right: vec![routing.indices.len()],
        });
    }
    let mut rows: Vec<Vec<usize>> = vec![Vec::new(); experts.len()];
    let mut slots: Vec<Vec<usize>> = vec![Vec::new(); experts.len()];
    for (slot, &e) in routing.indices.iter().enumerate() {
        let list = rows.get_mut(e).ok_or_else(|| {
            Error::Input(format!("expert {e} out of range for {} experts", experts.len()))
        })?;
        list.push(slot / k);
        slots[e].push(slot);
    }
    let flat = g.reshape(routing.weights, vec![tokens * k, 1])?;
    let mut out = g.zeros(vec![tokens, h]);
    for (n, e) in experts.iter().enumerate() {
        if rows[n].is_empty() {
            continue;
        }
        let xs = g.gather_rows(x, &rows[n])?;
        let y = expert_forward(g, xs, e)?;
        let w = g.gather_rows(flat, &slots[n])?;
        let y = g.mul_rows(y, w)?;
        let y = g.scatter_rows(y, &rows[n], tokens)?;
        out = g.add(out, y)?;
    }
    Ok(out)
}

/// `N · Σₙ fₙ Pₙ` with `fₙ` the share of top-k slots given to expert `n`
/// and `Pₙ` its mean score. Gradient flows through `P` only.
pub fn balance_loss<T: Real>(g: &mut Graph<T>, routing: &Routing, n_experts: usize) -> Result<Var> {
    let slots = routing.indices.len();
    if slots == 0 {
        return Err(Error::Input("balance loss over zero tokens".into()));
    }
    let mut f = vec![T::zero(); n_experts];
    let share = T::lit(1.0 / slots as f64);
    for &e in &routing.indices {
        f[e] += share;
    }
    let f = g.constant(vec![1, n_experts], f);
    let p = g.mean_rows(routing.scores);
    let fp = g.mul(p, f)?;
    let s = g.sum(fp);
    Ok(g.scale(s, T::lit(n_experts as f64)))
}

/// Exact parameter counts.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ParamCount {
    pub total: usize,
    /// Everything except the token and position embeddings.
    pub non_embedding: usize,
    pub router: usize,
    pub by_group: BTreeMap<String, usize>,
}

pub fn param_count<T: Real>(store: &ParamStore<T>) -> ParamCount {
    let mut by_group = BTreeMap::new();
    for p in store.iter() {
        *by_group.entry(p.group.name().to_string()).or_insert(0) += p.tensor.numel();
    }
    let total = store.numel();
    let get = |g: ParamGroup| by_group.get(g.name()).copied().unwrap_or(0);
    ParamCount {
        total,
        non_embedding: total - get(ParamGroup::Embedding),
        router: get(ParamGroup::Router),
        by_group,
    }
}
