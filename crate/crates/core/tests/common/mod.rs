//! Test-only oracles shared by the integration suites.
#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const FD_EPS: f64 = 1e-6;

/// Central finite differences of `f` with respect to every entry of `x`.
pub fn numeric_grad(x: &[f64], eps: f64, mut f: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            let orig = probe[i];
            probe[i] = orig + eps;
            let up = f(&probe);
            probe[i] = orig - eps;
            let down = f(&probe);
            probe[i] = orig;
            (up - down) / (2.0 * eps)
        })
        .collect()
}

/// Largest `|a−b| / max(|a|, |b|, floor)` over paired entries, where
/// `floor = max(1e-3·max|b|, 1e-5)`. Central differences with ε = 1e-6 carry
/// ~1e-10 absolute round-off on an O(1) loss, so entries far below the
/// vector's scale are compared against the floor instead of their own size.
pub fn max_rel_err(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    let scale = b.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let floor = (1e-3 * scale).max(1e-5);
    if std::env::var("FD_DEBUG").is_ok() {
        for (x, y) in a.iter().zip(b) {
            eprintln!("{x:e} {y:e} {:e}", (x - y).abs());
        }
    }
    a.iter()
        .zip(b)
        .map(|(&x, &y)| (x - y).abs() / x.abs().max(y.abs()).max(floor))
        .fold(0.0, f64::max)
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform(rng: &mut impl Rng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(lo..hi)).collect()
}

/// Central differences of `f` with respect to every entry of the named
/// parameter, perturbing it in place.
pub fn param_fd(
    store: &mut rmoe_lab::params::ParamStore<f64>,
    name: &str,
    mut f: impl FnMut(&rmoe_lab::params::ParamStore<f64>) -> f64,
) -> Vec<f64> {
    let n = store.by_name(name).expect(name).tensor.numel();
    (0..n)
        .map(|i| {
            let orig = store.by_name(name).unwrap().tensor.data()[i];
            store.by_name_mut(name).unwrap().tensor.data_mut()[i] = orig + FD_EPS;
            let up = f(store);
            store.by_name_mut(name).unwrap().tensor.data_mut()[i] = orig - FD_EPS;
            let down = f(store);
            store.by_name_mut(name).unwrap().tensor.data_mut()[i] = orig;
            (up - down) / (2.0 * FD_EPS)
        })
        .collect()
}
