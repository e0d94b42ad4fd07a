use serde::{Deserialize, Serialize};

use crate::numerics::Tensor;
use crate::Scalar;

use super::TrainConfig;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

impl From<&TrainConfig> for AdamWConfig {
    fn from(t: &TrainConfig) -> Self {
        Self {
            beta1: t.beta1,
            beta2: t.beta2,
            eps: t.eps,
            weight_decay: t.weight_decay,
        }
    }
}

/// Adam with decoupled weight decay. Moments are allocated lazily on the
/// first step, one pair per parameter tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamW<T> {
    pub config: AdamWConfig,
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
    pub t: u64,
}

impl<T: Scalar> AdamW<T> {
    pub fn new(config: AdamWConfig) -> Self {
        Self {
            config,
            m: Vec::new(),
            v: Vec::new(),
            t: 0,
        }
    }

    /// `p -= lr * (m_hat / (sqrt(v_hat) + eps) + wd * p)`.
    ///
    /// Panics if `params` and `grads` disagree in count or shape, which
    /// would be a caller bug.
    pub fn step(&mut self, params: Vec<&mut Tensor<T>>, grads: &[Tensor<T>], lr: f64) {
        assert_eq!(params.len(), grads.len(), "one gradient per parameter");
        if self.m.is_empty() {
            self.m = grads.iter().map(|g| Tensor::zeros(g.shape())).collect();
            self.v = self.m.clone();
        }
        self.t += 1;
        let c = self.config;
        let (b1, b2) = (T::of(c.beta1), T::of(c.beta2));
        let bc1 = T::one() - T::of(c.beta1.powi(self.t as i32));
        let bc2 = T::one() - T::of(c.beta2.powi(self.t as i32));
        let (lr, wd, eps) = (T::of(lr), T::of(c.weight_decay), T::of(c.eps));
        for (((p, g), m), v) in params.into_iter().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            assert_eq!(p.shape(), g.shape(), "gradient shape");
            let (pd, gd) = (p.data_mut(), g.data());
            for (i, (&gi, (mi, vi))) in gd.iter().zip(m.data_mut().iter_mut().zip(v.data_mut())).enumerate() {
                *mi = b1 * *mi + (T::one() - b1) * gi;
                *vi = b2 * *vi + (T::one() - b2) * gi * gi;
                let update = (*mi / bc1) / ((*vi / bc2).sqrt() + eps) + wd * pd[i];
                pd[i] -= lr * update;
            }
        }
    }
}
