use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::Real;

/// Adam with bias correction. Parameters marked frozen, or without a
/// gradient, are skipped entirely.
#[derive(Debug, Clone)]
pub struct Adam<T> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: u64,
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepInfo {
    /// Global gradient norm before clipping.
    pub grad_norm: f64,
}

impl<T: Real> Adam<T> {
    pub fn new(store: &ParamStore<T>) -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.95,
            eps: 1e-8,
            t: 0,
            m: store.iter().map(|p| vec![T::zero(); p.tensor.numel()]).collect(),
            v: store.iter().map(|p| vec![T::zero(); p.tensor.numel()]).collect(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    pub fn moments(&self) -> (&[Vec<T>], &[Vec<T>]) {
        (&self.m, &self.v)
    }

    /// Clips the global gradient norm to `clip` (if given) and applies one
    /// update with learning rate `lr`.
    pub fn step(&mut self, store: &mut ParamStore<T>, lr: f64, clip: Option<f64>) -> Result<StepInfo> {
        let mut sq = 0.0f64;
        for p in store.iter().filter(|p| !p.frozen) {
            if let Some(g) = p.tensor.grad() {
                let s: f64 = g.iter().map(|v| v.to_f64().unwrap().powi(2)).sum();
                if !s.is_finite() {
                    return Err(Error::Numeric(format!("non-finite gradient in `{}`", p.name)));
                }
                sq += s;
            }
        }
        let grad_norm = sq.sqrt();
        let scale = match clip {
            Some(c) if grad_norm > c => c / (grad_norm + 1e-6),
            _ => 1.0,
        };
        self.t += 1;
        let t = self.t as i32;
        let (b1, b2) = (self.beta1, self.beta2);
        let bc1 = 1.0 - b1.powi(t);
        let bc2 = 1.0 - b2.powi(t);
        let step = T::lit(lr / bc1);
        let bc2_sqrt = T::lit(bc2.sqrt());
        let (b1t, b2t) = (T::lit(b1), T::lit(b2));
        let (c1, c2) = (T::lit(1.0 - b1), T::lit(1.0 - b2));
        let eps = T::lit(self.eps);
        let scale = T::lit(scale);
        for ((p, m), v) in store.iter_mut().zip(&mut self.m).zip(&mut self.v) {
            if p.frozen {
                continue;
            }
            let Some(grad) = p.tensor.grad().map(|g| g.to_vec()) else {
                continue;
            };
            for (((w, g), mi), vi) in p
                .tensor
                .data_mut()
                .iter_mut()
                .zip(grad)
                .zip(m.iter_mut())
                .zip(v.iter_mut())
            {
                let g = g * scale;
                *mi = b1t * *mi + c1 * g;
                *vi = b2t * *vi + c2 * g * g;
                *w -= step * *mi / (vi.sqrt() / bc2_sqrt + eps);
            }
        }
        Ok(StepInfo { grad_norm })
    }
}

/// Linear warmup to `lr` over `warmup` steps, then cosine decay to
/// `min_ratio · lr` at `total`.
pub fn learning_rate(step: usize, lr: f64, warmup: usize, total: usize, min_ratio: f64) -> f64 {
    if step < warmup {
        return lr * (step + 1) as f64 / warmup as f64;
    }
    let span = total.saturating_sub(warmup).max(1) as f64;
    let progress = ((step - warmup) as f64 / span).min(1.0);
    let floor = lr * min_ratio;
    floor + (lr - floor) * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::ParamGroup;
    use crate::tensor::Tensor;

    fn scalar_store(v: f64) -> ParamStore<f64> {
        let mut s = ParamStore::new();
        s.add("w", ParamGroup::Head, false, Tensor::new([1], vec![v]).unwrap())
            .unwrap();
        s
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut s = scalar_store(0.0);
        let mut adam = Adam::new(&s);
        s.by_name_mut("w").unwrap().tensor.accumulate_grad(&[1.0]).unwrap();
        adam.step(&mut s, 0.1, None).unwrap();
        let w = s.by_name("w").unwrap().tensor.data()[0];
        assert!((w + 0.1 / (1.0 + 1e-8)).abs() < 1e-15, "{w}");
    }

    #[test]
    fn zero_grad_is_a_no_op() {
        let mut s = scalar_store(0.7);
        let mut adam = Adam::new(&s);
        s.by_name_mut("w").unwrap().tensor.accumulate_grad(&[0.0]).unwrap();
        adam.step(&mut s, 0.1, Some(1.0)).unwrap();
        assert_eq!(s.by_name("w").unwrap().tensor.data()[0], 0.7);
        assert_eq!(adam.moments().0[0], vec![0.0]);
        assert_eq!(adam.moments().1[0], vec![0.0]);
    }

    #[test]
    fn non_finite_grad_names_tensor() {
        let mut s = scalar_store(0.0);
        let mut adam = Adam::new(&s);
        s.by_name_mut("w").unwrap().tensor.accumulate_grad(&[f64::NAN]).unwrap();
        let err = adam.step(&mut s, 0.1, None).unwrap_err();
        assert!(err.to_string().contains("`w`"));
    }

    #[test]
    fn schedule_shape() {
        assert!((learning_rate(0, 1.0, 10, 100, 0.1) - 0.1).abs() < 1e-15);
        assert!((learning_rate(9, 1.0, 10, 100, 0.1) - 1.0).abs() < 1e-15);
        assert!((learning_rate(10, 1.0, 10, 100, 0.1) - 1.0).abs() < 1e-15);
        assert!((learning_rate(100, 1.0, 10, 100, 0.1) - 0.1).abs() < 1e-15);
        assert_eq!(learning_rate(5, 0.0, 10, 100, 0.1), 0.0);
    }
}
