mod common;

use common::{max_rel_err, rng, uniform};

/// Larger than the op-level step: the model loss sums many terms, so
/// round-off dominates below this.
const EPS: f64 = 1e-5;
use rand::Rng;
use proptest::prelude::*;
use rmoe_lab::model::{
    balance_loss, expert_forward, load_checkpoint, moe_combine, param_count, save_checkpoint, ExpertVars, Model,
    ModelConfig,
};
use rmoe_lab::params::{ParamGroup, ParamStore};
use rmoe_lab::routers::{gate, CellKind, RouterFamily, RouterSpec};
use rmoe_lab::tensor::Graph;
use rmoe_lab::Error;

fn tiny(router: RouterSpec) -> ModelConfig {
    ModelConfig {
        n_layers: 2,
        hidden: 16,
        n_experts: 4,
        top_k: 2,
        expert_hidden: 16,
        n_heads: 2,
        seq_len: 8,
        vocab_size: 11,
        router,
        balance_weight: 0.01,
    }
}

fn total_loss(model: &Model, store: &ParamStore<f64>, x: &[usize], y: &[usize], batch: usize) -> f64 {
    let mut g = Graph::<f64>::no_grad();
    let b = store.bind(&mut g);
    let f = model.forward(&mut g, &b, x, batch).unwrap();
    let l = model.loss(&mut g, &f, y).unwrap();
    g.scalar_value(l.total)
}

fn tokens(seed: u64, n: usize, vocab: usize) -> Vec<usize> {
    let mut r = rng(seed);
    (0..n).map(|_| r.random_range(0..vocab)).collect()
}

fn check_model_gradients(router: RouterSpec) {
    let cfg = tiny(router);
    let (model, mut store) = Model::new::<f64>(cfg.clone(), 3).unwrap();
    let x = tokens(1, 16, cfg.vocab_size);
    let y = tokens(2, 16, cfg.vocab_size);

    let mut g = Graph::<f64>::new();
    let b = store.bind(&mut g);
    let f = model.forward(&mut g, &b, &x, 2).unwrap();
    let l = model.loss(&mut g, &f, &y).unwrap();
    g.backward(l.total).unwrap();
    store.collect_grads(&g, &b).unwrap();
    drop(g);

    let names: Vec<String> = store.iter().filter(|p| !p.frozen).map(|p| p.name.clone()).collect();
    let mut worst = (0.0, String::new());
    for name in names {
        let analytic = store.by_name(&name).unwrap().tensor.grad().unwrap().to_vec();
        let n = analytic.len();
        let mut numeric = Vec::with_capacity(n);
        for i in 0..n {
            let orig = store.by_name(&name).unwrap().tensor.data()[i];
            store.by_name_mut(&name).unwrap().tensor.data_mut()[i] = orig + EPS;
            let up = total_loss(&model, &store, &x, &y, 2);
            store.by_name_mut(&name).unwrap().tensor.data_mut()[i] = orig - EPS;
            let down = total_loss(&model, &store, &x, &y, 2);
            store.by_name_mut(&name).unwrap().tensor.data_mut()[i] = orig;
            numeric.push((up - down) / (2.0 * EPS));
        }
        let err = max_rel_err(&analytic, &numeric);
        if err > worst.0 {
            worst = (err, name.clone());
        }
        assert!(err < 1e-4, "{:?} {name}: relative error {err:e}", cfg.router.family);
    }
    eprintln!("{:?}: worst relative error {:e} in {}", cfg.router.family, worst.0, worst.1);
}

#[test]
fn model_gradients_match_fd_for_baseline_routers() {
    check_model_gradients(RouterSpec::linear());
    check_model_gradients(RouterSpec::family(RouterFamily::Mlp));
    check_model_gradients(RouterSpec {
        xmoe_dim: 4,
        ..RouterSpec::family(RouterFamily::Xmoe)
    });
    check_model_gradients(RouterSpec {
        hyper_dim: 4,
        ..RouterSpec::family(RouterFamily::Hyper)
    });
}

#[test]
fn model_gradients_match_fd_for_recurrent_variants() {
    check_model_gradients(RouterSpec {
        cell: CellKind::Lstm,
        residual_alpha: 0.5,
        ..RouterSpec::recurrent(8)
    });
    check_model_gradients(RouterSpec {
        cell: CellKind::Rnn,
        shared_projector: true,
        ..RouterSpec::recurrent(8)
    });
}

/// Random SwiGLU experts as graph inputs.
fn random_experts(g: &mut Graph<f64>, seed: u64, n: usize, h: usize, de: usize) -> Vec<ExpertVars> {
    (0..n)
        .map(|e| {
            let mut mk = |j: u64, rows: usize, cols: usize| {
                let v = uniform(&mut rng(seed * 1000 + e as u64 * 3 + j), rows * cols, -1.0, 1.0);
                g.input(vec![rows, cols], v, false)
            };
            ExpertVars {
                htoh4_0: mk(0, de, h),
                htoh4_1: mk(1, de, h),
                h4toh: mk(2, h, de),
            }
        })
        .collect()
}

/// Dense sum over all experts with unselected scores zeroed, in expert order.
fn dense_oracle(g: &mut Graph<f64>, x: rmoe_lab::tensor::Var, scores: &[f64], sel: &[usize], k: usize, experts: &[ExpertVars]) -> Vec<f64> {
    let (t, h) = g.dims(x);
    let n = experts.len();
    let outs: Vec<Vec<f64>> = experts
        .iter()
        .map(|e| {
            let y = expert_forward(g, x, e).unwrap();
            g.value(y).to_vec()
        })
        .collect();
    let mut y = vec![0.0; t * h];
    for tok in 0..t {
        for (e, out) in outs.iter().enumerate() {
            let s = if sel[tok * k..(tok + 1) * k].contains(&e) { scores[tok * n + e] } else { 0.0 };
            for j in 0..h {
                y[tok * h + j] += s * out[tok * h + j];
            }
        }
    }
    y
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn sparse_combination_equals_masked_dense_sum(
        seed in 0u64..1_000_000,
        tokens in 1usize..12,
        h in 1usize..9,
        de in 1usize..9,
        n in 1usize..7,
        kk in 1usize..7,
    ) {
        let k = kk.min(n);
        let mut g = Graph::<f64>::new();
        let x = g.input(vec![tokens, h], uniform(&mut rng(seed), tokens * h, -2.0, 2.0), false);
        let logits = g.input(vec![tokens, n], uniform(&mut rng(seed + 1), tokens * n, -3.0, 3.0), false);
        let routing = gate(&mut g, logits, k).unwrap();
        let experts = random_experts(&mut g, seed, n, h, de);
        let sparse = moe_combine(&mut g, x, &routing, &experts).unwrap();
        let sparse = g.value(sparse).to_vec();
        let scores = g.value(routing.scores).to_vec();
        let dense = dense_oracle(&mut g, x, &scores, &routing.indices, k, &experts);
        prop_assert_eq!(sparse, dense);
    }
}

#[test]
fn single_expert_is_passed_through_at_full_weight() {
    let mut g = Graph::<f64>::new();
    let x = g.input(vec![3, 4], uniform(&mut rng(1), 12, -1.0, 1.0), false);
    let logits = g.input(vec![3, 1], vec![0.3, -2.0, 5.0], false);
    let routing = gate(&mut g, logits, 1).unwrap();
    let experts = random_experts(&mut g, 2, 1, 4, 5);
    let y = moe_combine(&mut g, x, &routing, &experts).unwrap();
    let e = expert_forward(&mut g, x, &experts[0]).unwrap();
    assert_eq!(g.value(y), g.value(e));
}

#[test]
fn identical_experts_with_k_equal_n_reproduce_the_expert() {
    let mut g = Graph::<f64>::new();
    let x = g.input(vec![5, 4], uniform(&mut rng(3), 20, -1.0, 1.0), false);
    let logits = g.input(vec![5, 3], uniform(&mut rng(4), 15, -1.0, 1.0), false);
    let routing = gate(&mut g, logits, 3).unwrap();
    let one = random_experts(&mut g, 5, 1, 4, 6)[0];
    let y = moe_combine(&mut g, x, &routing, &[one; 3]).unwrap();
    let e = expert_forward(&mut g, x, &one).unwrap();
    for (a, b) in g.value(y).iter().zip(g.value(e)) {
        assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn balance_loss_fixed_points() {
    // Uniform scores, even selection: every expert is picked by exactly k/N of slots.
    let (n, k, t) = (4, 2, 8);
    let mut g = Graph::<f64>::new();
    let logits = g.input(vec![t, n], vec![0.0; t * n], false);
    let mut routing = gate(&mut g, logits, k).unwrap();
    routing.indices = (0..t).flat_map(|i| [(2 * i) % n, (2 * i + 1) % n]).collect();
    let l = balance_loss(&mut g, &routing, n).unwrap();
    assert!((g.scalar_value(l) - 1.0).abs() < 1e-15);

    // Everything on expert 0 with one-hot scores.
    let mut collapsed = vec![-1e4; t * n];
    (0..t).for_each(|i| collapsed[i * n] = 0.0);
    let logits = g.input(vec![t, n], collapsed, false);
    let routing = gate(&mut g, logits, 1).unwrap();
    let l = balance_loss(&mut g, &routing, n).unwrap();
    assert_eq!(g.scalar_value(l), n as f64);
}

#[test]
fn balance_loss_matches_recomputation() {
    for seed in 0..20 {
        let (n, k, t) = (6, 2, 13);
        let mut g = Graph::<f64>::new();
        let logits = g.input(vec![t, n], uniform(&mut rng(seed), t * n, -2.0, 2.0), false);
        let routing = gate(&mut g, logits, k).unwrap();
        let got = balance_loss(&mut g, &routing, n).unwrap();
        let got = g.scalar_value(got);
        let s = g.value(routing.scores);
        let mut want = 0.0;
        for e in 0..n {
            let f = routing.indices.iter().filter(|&&i| i == e).count() as f64 / (t * k) as f64;
            let p = (0..t).map(|i| s[i * n + e]).sum::<f64>() / t as f64;
            want += f * p;
        }
        want *= n as f64;
        assert!((got - want).abs() < 1e-14, "{got} vs {want}");
    }
}

#[test]
fn later_tokens_never_change_earlier_logits() {
    let cfg = tiny(RouterSpec::recurrent(8));
    let (model, store) = Model::new::<f64>(cfg.clone(), 1).unwrap();
    let x = tokens(9, 8, cfg.vocab_size);
    let logits = |x: &[usize]| {
        let mut g = Graph::<f64>::no_grad();
        let b = store.bind(&mut g);
        let f = model.forward(&mut g, &b, x, 1).unwrap();
        g.value(f.logits).to_vec()
    };
    let base = logits(&x);
    let v = cfg.vocab_size;
    for t in 0..8 {
        let mut y = x.clone();
        y[t] = (y[t] + 1) % v;
        let out = logits(&y);
        assert_eq!(out[..t * v], base[..t * v], "position {t}");
        assert_ne!(out[t * v..(t + 1) * v], base[t * v..(t + 1) * v]);
    }
}

#[test]
fn lm_loss_oracles() {
    let cfg = tiny(RouterSpec::linear());
    let (model, mut store) = Model::new::<f64>(cfg.clone(), 2).unwrap();
    let x = tokens(3, 16, cfg.vocab_size);
    let y = tokens(4, 16, cfg.vocab_size);

    let mut g = Graph::<f64>::no_grad();
    let b = store.bind(&mut g);
    let f = model.forward(&mut g, &b, &x, 2).unwrap();
    let l = model.loss(&mut g, &f, &y).unwrap();
    let v = cfg.vocab_size;
    let logits = g.value(f.logits);
    let want: f64 = (0..16)
        .map(|t| {
            let row = &logits[t * v..(t + 1) * v];
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + row.iter().map(|z| (z - m).exp()).sum::<f64>().ln();
            lse - row[y[t]]
        })
        .sum::<f64>()
        / 16.0;
    assert!((g.scalar_value(l.lm) - want).abs() < 1e-10);
    let total = g.scalar_value(l.lm) + 0.01 * g.scalar_value(l.balance);
    assert!((g.scalar_value(l.total) - total).abs() < 1e-15);
    drop(g);

    store.by_name_mut("head").unwrap().tensor.data_mut().fill(0.0);
    let mut g = Graph::<f64>::no_grad();
    let b = store.bind(&mut g);
    let f = model.forward(&mut g, &b, &x, 2).unwrap();
    let l = model.loss(&mut g, &f, &y).unwrap();
    assert!((g.scalar_value(l.lm) - (v as f64).ln()).abs() < 1e-14);
}

#[test]
fn zero_balance_weight_is_pure_lm() {
    let mut cfg = tiny(RouterSpec::recurrent(8));
    cfg.balance_weight = 0.0;
    let (model, store) = Model::new::<f64>(cfg.clone(), 2).unwrap();
    let mut g = Graph::<f64>::no_grad();
    let b = store.bind(&mut g);
    let f = model.forward(&mut g, &b, &tokens(5, 8, cfg.vocab_size), 1).unwrap();
    let l = model.loss(&mut g, &f, &tokens(6, 8, cfg.vocab_size)).unwrap();
    assert_eq!(g.scalar_value(l.total), g.scalar_value(l.lm));
}

#[test]
fn out_of_range_tokens_are_rejected() {
    let cfg = tiny(RouterSpec::linear());
    let (model, store) = Model::new::<f64>(cfg.clone(), 0).unwrap();
    let mut g = Graph::<f64>::no_grad();
    let b = store.bind(&mut g);
    assert!(matches!(model.forward(&mut g, &b, &[0, 99], 1), Err(Error::Input(_))));
    assert!(matches!(model.forward(&mut g, &b, &[0; 9], 1), Err(Error::Input(_))));
}

/// Router parameters in closed form.
fn router_closed_form(spec: &RouterSpec, l: usize, h: usize, n: usize) -> usize {
    let p = spec.p;
    match spec.family {
        RouterFamily::Linear | RouterFamily::Random => l * h * n,
        RouterFamily::Mlp => {
            let m = spec.mlp_hidden.unwrap_or(2 * h);
            l * (h * m + m * n)
        }
        RouterFamily::Cosine => l * (h * n + 1),
        RouterFamily::Xmoe => l * (h * spec.xmoe_dim + spec.xmoe_dim * n + 1),
        RouterFamily::Hyper => {
            let d = spec.hyper_dim;
            l * (h * d + 2 * d * h * n + d)
        }
        RouterFamily::Recurrent => {
            let cells = match spec.cell {
                CellKind::Gru => 6,
                CellKind::Rnn => 2,
                CellKind::Lstm => 8,
            } * p
                * p;
            let proj = if spec.shared_projector { h * p } else { l * h * p };
            proj + l * p * n + cells
        }
    }
}

#[test]
fn parameter_counts_match_closed_form() {
    let routers = [
        RouterSpec::linear(),
        RouterSpec::family(RouterFamily::Random),
        RouterSpec::family(RouterFamily::Mlp),
        RouterSpec::family(RouterFamily::Cosine),
        RouterSpec::family(RouterFamily::Xmoe),
        RouterSpec::family(RouterFamily::Hyper),
        RouterSpec::recurrent(8),
        RouterSpec { cell: CellKind::Lstm, ..RouterSpec::recurrent(8) },
        RouterSpec { cell: CellKind::Rnn, shared_projector: true, ..RouterSpec::recurrent(4) },
    ];
    for (l, h, n, de, v, seq) in [(2, 16, 4, 8, 11, 8), (3, 8, 6, 4, 5, 12), (1, 12, 2, 3, 7, 4)] {
        for r in &routers {
            let cfg = ModelConfig {
                n_layers: l,
                hidden: h,
                n_experts: n,
                top_k: 2,
                expert_hidden: de,
                n_heads: 2,
                seq_len: seq,
                vocab_size: v,
                router: r.clone(),
                balance_weight: 0.01,
            };
            let (_, store) = Model::new::<f32>(cfg, 0).unwrap();
            let c = param_count(&store);
            let router = router_closed_form(r, l, h, n);
            let embedding = v * h + seq * h;
            let block = 2 * h + 4 * h * h + n * 3 * h * de;
            let total = embedding + l * block + h + h * v + router;
            assert_eq!(c.router, router, "{r:?}");
            assert_eq!(c.total, total, "{r:?}");
            assert_eq!(c.non_embedding, total - embedding);
            assert_eq!(c.by_group["experts"], l * n * 3 * h * de);
        }
    }
    let (_, s) = Model::new::<f32>(tiny(RouterSpec::linear()), 0).unwrap();
    assert_eq!(param_count(&s).router, 128);
    let (_, s) = Model::new::<f32>(tiny(RouterSpec::recurrent(8)), 0).unwrap();
    assert_eq!(param_count(&s).router, 704);
}

#[test]
fn checkpoint_round_trip_is_bitwise() {
    let cfg = tiny(RouterSpec::recurrent(8));
    let (model, store) = Model::new::<f64>(cfg.clone(), 4).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("ckpt");
    save_checkpoint(&path, &serde_json::json!({"note": "test"}), &store).unwrap();
    // overwriting an existing checkpoint is atomic and leaves no temp dirs
    save_checkpoint(&path, &serde_json::json!({"note": "test"}), &store).unwrap();
    let names: Vec<_> = std::fs::read_dir(dir.path()).unwrap().map(|e| e.unwrap().file_name()).collect();
    assert_eq!(names, vec![std::ffi::OsString::from("ckpt")]);

    let ckpt = load_checkpoint::<f64>(&path).unwrap();
    for (a, b) in store.iter().zip(ckpt.params.iter()) {
        assert_eq!(a.name, b.name);
        assert_eq!(a.group, b.group);
        assert_eq!(a.frozen, b.frozen);
        assert!(a.tensor.data().iter().zip(b.tensor.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
    }
    let (x, y) = (tokens(1, 16, cfg.vocab_size), tokens(2, 16, cfg.vocab_size));
    assert_eq!(total_loss(&model, &store, &x, &y, 2), total_loss(&model, &ckpt.params, &x, &y, 2));
    assert!(store.iter().any(|p| p.group == ParamGroup::Router));
}
