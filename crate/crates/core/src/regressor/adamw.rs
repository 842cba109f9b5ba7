//! AdamW with decoupled weight decay.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamWHyper {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWHyper {
    fn default() -> Self {
        AdamWHyper {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

/// One update of a flat parameter slice. `t` is the 1-based step count used for bias
/// correction: `p ← p − lr·(m̂/(√v̂ + ε) + λ·p)`.
pub fn adamw_step<T: Scalar>(params: &mut [T], grads: &[T], m: &mut [T], v: &mut [T], t: u64, h: &AdamWHyper) {
    assert!(t >= 1, "step count is 1-based");
    assert!(params.len() == grads.len() && m.len() == grads.len() && v.len() == grads.len());
    let (b1, b2) = (T::of(h.beta1), T::of(h.beta2));
    let one = T::one();
    let c1 = one - T::of(h.beta1.powi(t.min(i32::MAX as u64) as i32));
    let c2 = one - T::of(h.beta2.powi(t.min(i32::MAX as u64) as i32));
    let (lr, eps, wd) = (T::of(h.lr), T::of(h.eps), T::of(h.weight_decay));
    for i in 0..params.len() {
        let g = grads[i];
        m[i] = b1 * m[i] + (one - b1) * g;
        v[i] = b2 * v[i] + (one - b2) * g * g;
        let m_hat = m[i] / c1;
        let v_hat = v[i] / c2;
        params[i] -= lr * (m_hat / (v_hat.sqrt() + eps) + wd * params[i]);
    }
}

/// Moment buffers for a list of parameter blocks.
#[derive(Clone, Debug)]
pub struct AdamWState<T> {
    pub m: Vec<Array2<T>>,
    pub v: Vec<Array2<T>>,
    pub t: u64,
}

impl<T: Scalar> AdamWState<T> {
    pub fn new(shapes: impl IntoIterator<Item = (usize, usize)>) -> Self {
        let (m, v) = shapes.into_iter().map(|s| (Array2::zeros(s), Array2::zeros(s))).unzip();
        AdamWState { m, v, t: 0 }
    }

    /// Updates the blocks whose `trainable` flag is set; frozen blocks are untouched.
    pub fn step<'a>(
        &mut self,
        params: impl IntoIterator<Item = &'a mut Array2<T>>,
        grads: &[Array2<T>],
        trainable: &[bool],
        h: &AdamWHyper,
    ) where
        T: 'a,
    {
        self.t += 1;
        for (i, param) in params.into_iter().enumerate() {
            if !trainable[i] {
                continue;
            }
            let p = param.as_slice_mut().expect("standard layout");
            let g = grads[i].as_slice().expect("standard layout");
            let m = self.m[i].as_slice_mut().expect("standard layout");
            let v = self.v[i].as_slice_mut().expect("standard layout");
            adamw_step(p, g, m, v, self.t, h);
        }
    }
}
