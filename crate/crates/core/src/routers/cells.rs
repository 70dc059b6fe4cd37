//! Bias-free recurrent cells shared across layers. All inputs are
//! `[tokens × p]`; each token row evolves independently.

use crate::error::Result;
use crate::tensor::{Graph, Real, Var};

/// Hidden state threaded through the layers. `c` is the LSTM memory cell.
#[derive(Debug, Clone, Copy)]
pub struct CellState {
    pub h: Var,
    pub c: Option<Var>,
}

impl CellState {
    pub fn zeros<T: Real>(g: &mut Graph<T>, tokens: usize, p: usize, lstm: bool) -> Self {
        let h = g.zeros(vec![tokens, p]);
        let c = lstm.then(|| g.zeros(vec![tokens, p]));
        CellState { h, c }
    }

    pub fn detached<T: Real>(&self, g: &mut Graph<T>) -> Self {
        CellState {
            h: g.detach(self.h),
            c: self.c.map(|c| g.detach(c)),
        }
    }
}

/// Input matrices `w` and state matrices `u`, ordered reset, update, candidate.
#[derive(Debug, Clone, Copy)]
pub struct GruVars {
    pub w: [Var; 3],
    pub u: [Var; 3],
}

#[derive(Debug, Clone, Copy)]
pub struct RnnVars {
    pub w: Var,
    pub u: Var,
}

/// Ordered input, forget, output, candidate.
#[derive(Debug, Clone, Copy)]
pub struct LstmVars {
    pub w: [Var; 4],
    pub u: [Var; 4],
}

#[derive(Debug, Clone, Copy)]
pub enum CellVars {
    Gru(GruVars),
    Rnn(RnnVars),
    Lstm(LstmVars),
}

fn affine2<T: Real>(g: &mut Graph<T>, x: Var, w: Var, h: Var, u: Var) -> Result<Var> {
    let a = g.matmul(x, w)?;
    let b = g.matmul(h, u)?;
    g.add(a, b)
}

/// ```text
/// s  = σ(x′W_s + hU_s)
/// z  = σ(x′W_z + hU_z)
/// h̃  = tanh(x′W_h + s ⊙ (hU_h))
/// h' = (1 − z) ⊙ h̃ + z ⊙ h
/// ```
pub fn gru_step<T: Real>(g: &mut Graph<T>, x: Var, h: Var, p: &GruVars) -> Result<Var> {
    let s = affine2(g, x, p.w[0], h, p.u[0])?;
    let s = g.sigmoid(s);
    let z = affine2(g, x, p.w[1], h, p.u[1])?;
    let z = g.sigmoid(z);
    let xh = g.matmul(x, p.w[2])?;
    let hh = g.matmul(h, p.u[2])?;
    let gated = g.mul(s, hh)?;
    let cand = g.add(xh, gated)?;
    let cand = g.tanh(cand);
    let ones = g.constant(g.shape(z).to_vec(), vec![T::one(); g.value(z).len()]);
    let keep = g.sub(ones, z)?;
    let a = g.mul(keep, cand)?;
    let b = g.mul(z, h)?;
    g.add(a, b)
}

/// `h' = tanh(x′W + hU)`
pub fn rnn_step<T: Real>(g: &mut Graph<T>, x: Var, h: Var, p: &RnnVars) -> Result<Var> {
    let a = affine2(g, x, p.w, h, p.u)?;
    Ok(g.tanh(a))
}

/// Standard LSTM without biases; returns `(h', c')`.
pub fn lstm_step<T: Real>(
    g: &mut Graph<T>,
    x: Var,
    h: Var,
    c: Var,
    p: &LstmVars,
) -> Result<(Var, Var)> {
    let i = affine2(g, x, p.w[0], h, p.u[0])?;
    let i = g.sigmoid(i);
    let f = affine2(g, x, p.w[1], h, p.u[1])?;
    let f = g.sigmoid(f);
    let o = affine2(g, x, p.w[2], h, p.u[2])?;
    let o = g.sigmoid(o);
    let cand = affine2(g, x, p.w[3], h, p.u[3])?;
    let cand = g.tanh(cand);
    let kept = g.mul(f, c)?;
    let written = g.mul(i, cand)?;
    let c_new = g.add(kept, written)?;
    let tc = g.tanh(c_new);
    let h_new = g.mul(o, tc)?;
    Ok((h_new, c_new))
}

pub fn cell_step<T: Real>(
    g: &mut Graph<T>,
    x: Var,
    state: &CellState,
    cell: &CellVars,
) -> Result<CellState> {
    match cell {
        CellVars::Gru(p) => Ok(CellState {
            h: gru_step(g, x, state.h, p)?,
            c: None,
        }),
        CellVars::Rnn(p) => Ok(CellState {
            h: rnn_step(g, x, state.h, p)?,
            c: None,
        }),
        CellVars::Lstm(p) => {
            let c = match state.c {
                Some(c) => c,
                None => {
                    let shape = g.shape(state.h).to_vec();
                    g.zeros(shape)
                }
            };
            let (h, c) = lstm_step(g, x, state.h, c, p)?;
            Ok(CellState { h, c: Some(c) })
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn zeros_mat(g: &mut Graph<f64>, p: usize) -> Var {
        g.input(vec![p, p], vec![0.0; p * p], false)
    }

    #[test]
    fn zero_weights_keep_zero_state() {
        let mut g = Graph::<f64>::new();
        let p = 3;
        let x = g.input(vec![2, p], vec![0.5, -1.0, 2.0, 0.1, 0.2, 0.3], false);
        let h = g.zeros(vec![2, p]);
        let gru = GruVars {
            w: [0; 3].map(|_| zeros_mat(&mut g, p)),
            u: [0; 3].map(|_| zeros_mat(&mut g, p)),
        };
        let out = gru_step(&mut g, x, h, &gru).unwrap();
        assert!(g.value(out).iter().all(|&v| v == 0.0));

        let rnn = RnnVars {
            w: zeros_mat(&mut g, p),
            u: zeros_mat(&mut g, p),
        };
        let out = rnn_step(&mut g, x, h, &rnn).unwrap();
        assert!(g.value(out).iter().all(|&v| v == 0.0));

        let lstm = LstmVars {
            w: [0; 4].map(|_| zeros_mat(&mut g, p)),
            u: [0; 4].map(|_| zeros_mat(&mut g, p)),
        };
        let c = g.zeros(vec![2, p]);
        let (hn, cn) = lstm_step(&mut g, x, h, c, &lstm).unwrap();
        assert!(g.value(hn).iter().all(|&v| v == 0.0));
        assert!(g.value(cn).iter().all(|&v| v == 0.0));
    }
}
