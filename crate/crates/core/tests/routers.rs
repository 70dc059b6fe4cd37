mod common;

use common::{max_rel_err, param_fd, rng, uniform};
use rand::Rng;
use rmoe_lab::params::ParamStore;
use rmoe_lab::routers::{
    gate, gru_step, linear_logits, softplus_inverse, CellKind, GateOutput, GruVars,
    RouteCarry, RouterBank, RouterFamily, RouterSpec,
};
use rmoe_lab::tensor::{Graph, Var};

const H: usize = 6;
const N: usize = 4;
const K: usize = 2;
const T: usize = 3;

fn bank(spec: &RouterSpec, layers: usize, h: usize, n: usize, k: usize) -> (RouterBank, ParamStore<f64>) {
    let mut store = ParamStore::new();
    let bank = RouterBank::register(&mut store, spec, layers, h, n, k, 11).unwrap();
    (bank, store)
}

/// Independent `[T × H]` inputs, one per layer.
fn layer_inputs(layers: usize, seed: u64) -> Vec<Vec<f64>> {
    (0..layers)
        .map(|i| uniform(&mut rng(seed + i as u64), T * H, -1.0, 1.0))
        .collect()
}

/// Routes every layer and returns the graph, bound params and per-layer logits/scores.
fn route_all(
    bank: &RouterBank,
    store: &ParamStore<f64>,
    xs: &[Vec<f64>],
    grad: bool,
) -> (Graph<f64>, rmoe_lab::params::Bound, Vec<Var>, Vec<Var>) {
    let mut g = if grad { Graph::new() } else { Graph::no_grad() };
    let b = store.bind(&mut g);
    let mut carry = RouteCarry::default();
    let (mut logits, mut scores) = (Vec::new(), Vec::new());
    for (i, x) in xs.iter().enumerate() {
        let rows = x.len() / H;
        let x = g.input(vec![rows, H], x.clone(), false);
        let r = bank.route(&mut g, &b, i, x, &mut carry).unwrap();
        logits.push(r.logits);
        scores.push(r.scores);
    }
    (g, b, logits, scores)
}

/// Fixed random weighting of every layer's scores.
fn scores_loss(g: &mut Graph<f64>, scores: &[Var]) -> Var {
    let mut acc: Option<Var> = None;
    for (i, &s) in scores.iter().enumerate() {
        let n = g.value(s).len();
        let w = uniform(&mut rng(100 + i as u64), n, -1.0, 1.0);
        let w = g.constant(g.shape(s).to_vec(), w);
        let p = g.mul(s, w).unwrap();
        let p = g.sum(p);
        acc = Some(match acc {
            Some(a) => g.add(a, p).unwrap(),
            None => p,
        });
    }
    acc.unwrap()
}

/// Checks the gradient of every trainable router parameter against
/// central differences.
fn check_bank_gradients(spec: RouterSpec, layers: usize) {
    let (bank, mut store) = bank(&spec, layers, H, N, K);
    let xs = layer_inputs(layers, 5);
    let (mut g, b, _, scores) = route_all(&bank, &store, &xs, true);
    let loss = scores_loss(&mut g, &scores);
    g.backward(loss).unwrap();
    store.collect_grads(&g, &b).unwrap();
    drop(g);
    let names: Vec<String> = store.iter().filter(|p| !p.frozen).map(|p| p.name.clone()).collect();
    assert!(!names.is_empty());
    for name in names {
        let analytic = store.by_name(&name).unwrap().tensor.grad().expect(&name).to_vec();
        let numeric = param_fd(&mut store, &name, |s| {
            let (mut g, _, _, scores) = route_all(&bank, s, &xs, false);
            let l = scores_loss(&mut g, &scores);
            g.scalar_value(l)
        });
        let err = max_rel_err(&analytic, &numeric);
        assert!(err < 1e-4, "{:?}/{:?} {name}: {err:e}", spec.family, spec.cell);
    }
}

fn recurrent(cell: CellKind) -> RouterSpec {
    RouterSpec {
        cell,
        ..RouterSpec::recurrent(5)
    }
}

#[test]
fn mlp_gradients_match_fd() {
    check_bank_gradients(
        RouterSpec {
            mlp_hidden: Some(7),
            ..RouterSpec::family(RouterFamily::Mlp)
        },
        1,
    );
}

#[test]
fn xmoe_and_cosine_gradients_match_fd() {
    check_bank_gradients(
        RouterSpec {
            xmoe_dim: 3,
            ..RouterSpec::family(RouterFamily::Xmoe)
        },
        1,
    );
    check_bank_gradients(RouterSpec::family(RouterFamily::Cosine), 1);
}

#[test]
fn hyper_embed_gradient_matches_fd() {
    check_bank_gradients(
        RouterSpec {
            hyper_dim: 3,
            ..RouterSpec::family(RouterFamily::Hyper)
        },
        1,
    );
}

#[test]
fn recurrent_cell_gradients_match_fd() {
    for cell in [CellKind::Gru, CellKind::Rnn, CellKind::Lstm] {
        check_bank_gradients(recurrent(cell), 3);
    }
    check_bank_gradients(
        RouterSpec {
            residual_alpha: 0.5,
            shared_projector: true,
            ..RouterSpec::recurrent(5)
        },
        3,
    );
}

#[test]
fn gru_step_matches_formula() {
    // 2×2 integer weights, row-vector convention: x·W.
    let w = [[1.0, -1.0, 0.0, 2.0], [0.0, 1.0, 1.0, 0.0], [2.0, 0.0, -1.0, 1.0]];
    let u = [[1.0, 0.0, 0.0, 1.0], [-1.0, 1.0, 0.0, 2.0], [0.0, 1.0, 1.0, -1.0]];
    let x = [0.5, -1.0];
    let h = [0.25, 0.75];
    let mut g = Graph::<f64>::new();
    let xv = g.input(vec![1, 2], x.to_vec(), false);
    let hv = g.input(vec![1, 2], h.to_vec(), false);
    let vars = GruVars {
        w: w.map(|m| g.input(vec![2, 2], m.to_vec(), false)),
        u: u.map(|m| g.input(vec![2, 2], m.to_vec(), false)),
    };
    let out = gru_step(&mut g, xv, hv, &vars).unwrap();
    let got = g.value(out).to_vec();

    let vm = |v: &[f64; 2], m: &[f64; 4]| [v[0] * m[0] + v[1] * m[2], v[0] * m[1] + v[1] * m[3]];
    let sig = |z: f64| 1.0 / (1.0 + (-z).exp());
    let (xs, hs) = (vm(&x, &w[0]), vm(&h, &u[0]));
    let (xz, hz) = (vm(&x, &w[1]), vm(&h, &u[1]));
    let (xh, hh) = (vm(&x, &w[2]), vm(&h, &u[2]));
    for j in 0..2 {
        let s = sig(xs[j] + hs[j]);
        let z = sig(xz[j] + hz[j]);
        let cand = (xh[j] + s * hh[j]).tanh();
        let want = (1.0 - z) * cand + z * h[j];
        assert!((got[j] - want).abs() < 1e-15, "{j}: {} vs {want}", got[j]);
    }
}

#[test]
fn zero_cells_stay_at_zero() {
    for cell in [CellKind::Gru, CellKind::Rnn, CellKind::Lstm] {
        let (bank, mut store) = bank(&recurrent(cell), 2, H, N, K);
        for p in store.iter_mut() {
            if p.name.starts_with("router.cell") {
                p.tensor.data_mut().iter_mut().for_each(|v| *v = 0.0);
            }
        }
        let (g, _, logits, _) = route_all(&bank, &store, &layer_inputs(2, 1), false);
        for l in logits {
            assert!(g.value(l).iter().all(|&v| v == 0.0), "{cell:?}");
        }
    }
}

#[test]
fn gelu_saturation_reduces_mlp_to_linear() {
    // For pre-activations >= 10, gelu(z) == z in f64, so the MLP is x·(W1·W2).
    let (h, hid, n) = (4, 5, 3);
    let mut r = rng(3);
    let x: Vec<f64> = (0..2 * h).map(|_| r.random_range(1.0..2.0)).collect();
    let w1: Vec<f64> = (0..h * hid).map(|_| r.random_range(2.0..3.0)).collect();
    let w2 = uniform(&mut r, hid * n, -1.0, 1.0);
    let mut g = Graph::<f64>::new();
    let xv = g.input(vec![2, h], x.clone(), false);
    let (a, b) = (g.input(vec![h, hid], w1.clone(), false), g.input(vec![hid, n], w2.clone(), false));
    let mlp = rmoe_lab::routers::mlp_logits(&mut g, xv, a, b).unwrap();
    let mlp = gate(&mut g, mlp, 2).unwrap().gate_outputs(&g);

    let mut prod = vec![0.0; h * n];
    for i in 0..h {
        for j in 0..n {
            prod[i * n + j] = (0..hid).map(|m| w1[i * hid + m] * w2[m * n + j]).sum();
        }
    }
    let gv = g.input(vec![h, n], prod, false);
    let lin = linear_logits(&mut g, xv, gv).unwrap();
    let lin = gate(&mut g, lin, 2).unwrap().gate_outputs(&g);
    for (a, b) in mlp.iter().zip(&lin) {
        assert_eq!(a.topk_indices, b.topk_indices);
        for (p, q) in a.scores.iter().zip(&b.scores) {
            assert!((p - q).abs() < 1e-12);
        }
    }
}

#[test]
fn zero_first_layer_mlp_is_uniform() {
    let spec = RouterSpec::family(RouterFamily::Mlp);
    let (bank, mut store) = bank(&spec, 1, H, N, K);
    store.by_name_mut("layers.0.router.w1").unwrap().tensor.data_mut().fill(0.0);
    let (g, _, _, scores) = route_all(&bank, &store, &layer_inputs(1, 2), false);
    assert!(g.value(scores[0]).iter().all(|&s| (s - 0.25).abs() < 1e-15));
}

fn gate_outputs_of(bank: &RouterBank, store: &ParamStore<f64>, xs: &[Vec<f64>]) -> Vec<Vec<GateOutput>> {
    let mut g = Graph::<f64>::no_grad();
    let b = store.bind(&mut g);
    let mut carry = RouteCarry::default();
    xs.iter()
        .enumerate()
        .map(|(i, x)| {
            let rows = x.len() / H;
            let x = g.input(vec![rows, H], x.clone(), false);
            bank.route(&mut g, &b, i, x, &mut carry).unwrap().gate_outputs(&g)
        })
        .collect()
}

fn assert_close(a: &[Vec<GateOutput>], b: &[Vec<GateOutput>], tol: f64) {
    for (la, lb) in a.iter().zip(b) {
        for (p, q) in la.iter().zip(lb) {
            assert_eq!(p.topk_indices, q.topk_indices);
            for (u, v) in p.scores.iter().zip(&q.scores).chain(p.logits.iter().zip(&q.logits)) {
                assert!((u - v).abs() < tol, "{u} vs {v}");
            }
        }
    }
}

#[test]
fn cosine_families_are_scale_invariant() {
    for family in [RouterFamily::Cosine, RouterFamily::Xmoe] {
        let spec = RouterSpec {
            xmoe_dim: 3,
            ..RouterSpec::family(family)
        };
        let (bank, store) = bank(&spec, 1, H, N, K);
        let xs = layer_inputs(1, 9);
        let base = gate_outputs_of(&bank, &store, &xs);
        for c in [5.0, 0.3, 1e3] {
            let scaled: Vec<Vec<f64>> = xs.iter().map(|x| x.iter().map(|v| v * c).collect()).collect();
            assert_close(&base, &gate_outputs_of(&bank, &store, &scaled), 1e-9);
        }
    }
}

#[test]
fn xmoe_with_identity_down_projection_is_cosine() {
    let x_spec = RouterSpec {
        xmoe_dim: H,
        ..RouterSpec::family(RouterFamily::Xmoe)
    };
    let (xb, mut xs_store) = bank(&x_spec, 1, H, N, K);
    let (cb, mut cs_store) = bank(&RouterSpec::family(RouterFamily::Cosine), 1, H, N, K);
    let gate_w = uniform(&mut rng(4), H * N, -1.0, 1.0);
    xs_store.by_name_mut("layers.0.router.gate").unwrap().tensor.data_mut().copy_from_slice(&gate_w);
    cs_store.by_name_mut("layers.0.router.gate").unwrap().tensor.data_mut().copy_from_slice(&gate_w);
    let down = xs_store.by_name_mut("layers.0.router.down").unwrap().tensor.data_mut();
    down.fill(0.0);
    (0..H).for_each(|i| down[i * H + i] = 1.0);
    let inputs = layer_inputs(1, 8);
    assert_close(
        &gate_outputs_of(&xb, &xs_store, &inputs),
        &gate_outputs_of(&cb, &cs_store, &inputs),
        1e-15,
    );
}

#[test]
fn small_temperature_sharpens_cosine_scores() {
    let xs = layer_inputs(1, 12);
    let mut prev: Option<Vec<f64>> = None;
    for temp in [1.0, 0.1, 0.01, 1e-3] {
        let spec = RouterSpec {
            temperature_init: temp,
            ..RouterSpec::family(RouterFamily::Cosine)
        };
        let (bank, store) = bank(&spec, 1, H, N, K);
        let theta = store.by_name("layers.0.router.temperature").unwrap().tensor.data()[0];
        assert!((theta - softplus_inverse(temp)).abs() < 1e-12);
        let ent: Vec<f64> = gate_outputs_of(&bank, &store, &xs)[0].iter().map(|o| o.entropy).collect();
        if let Some(p) = &prev {
            assert!(ent.iter().zip(p).all(|(a, b)| a < b), "{temp}: {ent:?} vs {p:?}");
        }
        prev = Some(ent);
    }
    assert!(prev.unwrap().iter().all(|&e| e < 1e-6));
}

#[test]
fn zero_norm_input_to_cosine_is_numeric_error() {
    let (bank, store) = bank(&RouterSpec::family(RouterFamily::Cosine), 1, H, N, K);
    let mut g = Graph::<f64>::no_grad();
    let b = store.bind(&mut g);
    let x = g.input(vec![1, H], vec![0.0; H], false);
    let err = bank.route(&mut g, &b, 0, x, &mut RouteCarry::default()).unwrap_err();
    assert!(matches!(err, rmoe_lab::Error::Numeric(_)), "{err}");
}

#[test]
fn zero_hypernet_gives_uniform_scores() {
    let spec = RouterSpec::family(RouterFamily::Hyper);
    let (bank, mut store) = bank(&spec, 1, H, N, K);
    store.by_name_mut("layers.0.router.hypernet").unwrap().tensor.data_mut().fill(0.0);
    let (g, _, _, scores) = route_all(&bank, &store, &layer_inputs(1, 2), false);
    assert!(g.value(scores[0]).iter().all(|&s| (s - 0.25).abs() < 1e-15));
}

#[test]
fn random_router_selects_experts_evenly() {
    let (h, n, k, samples) = (512, 16, 2, 100_000);
    let (bank, store) = bank(&RouterSpec::family(RouterFamily::Random), 1, h, n, k);
    assert!(store.iter().all(|p| p.frozen));
    let mut r = rng(77);
    let normal = rand_distr::StandardNormal;
    let mut counts = vec![0usize; n];
    for chunk in 0..samples / 1000 {
        let mut x: Vec<f64> = (0..1000 * h).map(|_| r.sample::<f64, _>(normal)).collect();
        for row in x.chunks_mut(h) {
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            row.iter_mut().for_each(|v| *v /= norm);
        }
        let mut g = Graph::<f64>::no_grad();
        let b = store.bind(&mut g);
        let xv = g.input(vec![1000, h], x, false);
        let routing = bank.route(&mut g, &b, 0, xv, &mut RouteCarry::default()).unwrap();
        routing.indices.iter().for_each(|&e| counts[e] += 1);
        let again = bank.route(&mut g, &b, 0, xv, &mut RouteCarry::default()).unwrap();
        assert_eq!(routing.indices, again.indices, "chunk {chunk}");
    }
    for (e, &c) in counts.iter().enumerate() {
        let f = c as f64 / samples as f64;
        assert!((f - k as f64 / n as f64).abs() < 0.01, "expert {e}: {f}");
    }
}

#[test]
fn recurrence_is_per_token_and_forward_in_depth() {
    let layers = 4;
    let (bank, store) = bank(&RouterSpec::recurrent(5), layers, H, N, K);
    let xs = layer_inputs(layers, 30);
    let base = gate_outputs_of(&bank, &store, &xs);
    for j in 0..layers {
        for t in 0..T {
            let mut pert = xs.clone();
            pert[j][t * H] += 0.5;
            let out = gate_outputs_of(&bank, &store, &pert);
            for l in 0..layers {
                for tok in 0..T {
                    let same = out[l][tok] == base[l][tok];
                    let expect_change = tok == t && l >= j;
                    assert_eq!(same, !expect_change, "perturb (layer {j}, token {t}) at (layer {l}, token {tok})");
                }
            }
        }
    }
}

#[test]
fn np_mode_severs_the_chain() {
    let spec = RouterSpec {
        np_mode: true,
        ..RouterSpec::recurrent(5)
    };
    let (bank, store) = bank(&spec, 3, H, N, K);
    let xs = layer_inputs(3, 40);
    let full = gate_outputs_of(&bank, &store, &xs);
    let mut zeroed = xs.clone();
    zeroed[1].fill(0.0);
    let out = gate_outputs_of(&bank, &store, &zeroed);
    assert_eq!(out[2], full[2]);
    assert_eq!(out[0], full[0]);

    // Layer 2 alone, with no earlier layer run, gives the same decision.
    let mut g = Graph::<f64>::no_grad();
    let b = store.bind(&mut g);
    let x = g.input(vec![T, H], xs[2].clone(), false);
    let alone = bank.route(&mut g, &b, 2, x, &mut RouteCarry::default()).unwrap().gate_outputs(&g);
    assert_eq!(alone, full[2]);
}

/// ‖∂L/∂Proj₀‖ for a loss on the last layer's logits only.
fn first_projector_grad_norm(spec: RouterSpec) -> f64 {
    let (bank, mut store) = bank(&spec, 3, H, N, K);
    let xs = layer_inputs(3, 50);
    let (mut g, b, logits, _) = route_all(&bank, &store, &xs, true);
    let last = logits[2];
    let loss = scores_loss(&mut g, &[last]);
    g.backward(loss).unwrap();
    store.collect_grads(&g, &b).unwrap();
    store
        .by_name("layers.0.router.proj")
        .unwrap()
        .tensor
        .grad()
        .map_or(0.0, |gr| gr.iter().map(|v| v * v).sum::<f64>().sqrt())
}

#[test]
fn recurrent_gradient_trichotomy() {
    let base = RouterSpec::recurrent(5);
    assert!(first_projector_grad_norm(base.clone()) > 1e-10);
    let np = RouterSpec { np_mode: true, ..base.clone() };
    assert_eq!(first_projector_grad_norm(np), 0.0);
    let detached = RouterSpec { detach_h: true, ..base.clone() };
    assert_eq!(first_projector_grad_norm(detached.clone()), 0.0);

    // The residual path carries gradient unless it is detached too.
    let residual = RouterSpec {
        residual_alpha: 0.5,
        ..detached.clone()
    };
    assert!(first_projector_grad_norm(residual.clone()) > 1e-10);
    let both = RouterSpec {
        detach_residual: true,
        ..residual
    };
    assert_eq!(first_projector_grad_norm(both), 0.0);
    let gru_only = RouterSpec {
        residual_alpha: 0.5,
        detach_residual: true,
        ..base
    };
    assert!(first_projector_grad_norm(gru_only) > 1e-10);
}

#[test]
fn gate_outputs_are_normalized_with_bounded_entropy() {
    for family in [RouterFamily::Linear, RouterFamily::Mlp, RouterFamily::Hyper, RouterFamily::Recurrent] {
        let (bank, store) = bank(&RouterSpec::family(family), 2, H, N, K);
        for layer in gate_outputs_of(&bank, &store, &layer_inputs(2, 60)) {
            for o in layer {
                assert!((o.scores.iter().sum::<f64>() - 1.0).abs() < 1e-6);
                assert!(o.entropy >= 0.0 && o.entropy <= (N as f64).ln() + 1e-12);
                assert!(o.topk_weights.windows(2).all(|w| w[0] >= w[1]));
                for (j, &i) in o.topk_indices.iter().enumerate() {
                    assert_eq!(o.topk_weights[j], o.scores[i]);
                }
            }
        }
    }
}
