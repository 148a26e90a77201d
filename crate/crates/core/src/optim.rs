use serde::{Deserialize, Serialize};

use crate::nn::params::ParamStore;
use crate::tensor::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimKind {
    Sgd,
    AdamW,
}

impl OptimKind {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "sgd" => Some(OptimKind::Sgd),
            "adamw" => Some(OptimKind::AdamW),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            OptimKind::Sgd => "sgd",
            OptimKind::AdamW => "adamw",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimConfig {
    pub kind: OptimKind,
    pub lr: f64,
    pub weight_decay: f64,
    pub momentum: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        OptimConfig {
            kind: OptimKind::AdamW,
            lr: 1e-3,
            weight_decay: 0.0,
            momentum: 0.9,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First-order optimizer over the trainable entries of a store. State is
/// kept in 64-bit regardless of the parameter precision.
#[derive(Clone, Debug)]
pub struct Optimizer {
    pub cfg: OptimConfig,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Optimizer {
    pub fn new<T: Scalar>(cfg: OptimConfig, store: &ParamStore<T>) -> Self {
        let zeros: Vec<Vec<f64>> = store.entries().iter().map(|e| vec![0.0; e.value.len()]).collect();
        Optimizer {
            cfg,
            step: 0,
            v: if cfg.kind == OptimKind::AdamW { zeros.clone() } else { Vec::new() },
            m: zeros,
        }
    }

    /// Drops accumulated momentum.
    pub fn reset(&mut self) {
        self.step = 0;
        for buf in self.m.iter_mut().chain(self.v.iter_mut()) {
            buf.iter_mut().for_each(|x| *x = 0.0);
        }
    }

    /// One update with the gradients held in `store`, at learning rate `lr`.
    /// Weight decay is decoupled for AdamW and added to the gradient for SGD.
    pub fn step<T: Scalar>(&mut self, store: &mut ParamStore<T>, lr: f64) {
        self.step += 1;
        let c = self.cfg;
        let (bc1, bc2) = (1.0 - c.beta1.powi(self.step as i32), 1.0 - c.beta2.powi(self.step as i32));
        for (k, e) in store.entries_mut().iter_mut().enumerate() {
            if !e.trainable {
                continue;
            }
            let g = e.grad.data();
            let mut vals: Vec<f64> = e.value.data().iter().map(|x| x.widen()).collect();
            match c.kind {
                OptimKind::Sgd => {
                    for ((x, &gi), m) in vals.iter_mut().zip(g).zip(self.m[k].iter_mut()) {
                        let gi = gi.widen() + c.weight_decay * *x;
                        *m = c.momentum * *m + gi;
                        *x -= lr * *m;
                    }
                }
                OptimKind::AdamW => {
                    for (((x, &gi), m), v) in vals.iter_mut().zip(g).zip(self.m[k].iter_mut()).zip(self.v[k].iter_mut()) {
                        let gi = gi.widen();
                        *m = c.beta1 * *m + (1.0 - c.beta1) * gi;
                        *v = c.beta2 * *v + (1.0 - c.beta2) * gi * gi;
                        *x -= lr * c.weight_decay * *x;
                        *x -= lr * (*m / bc1) / ((*v / bc2).sqrt() + c.eps);
                    }
                }
            }
            for (dst, x) in e.value.data_mut().iter_mut().zip(vals) {
                *dst = T::cast(x);
            }
        }
    }
}
