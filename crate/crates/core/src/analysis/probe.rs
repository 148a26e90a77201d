use serde::Serialize;

use crate::error::{Error, Result};
use crate::nn::params::ParamStore;
use crate::optim::{OptimConfig, OptimKind, Optimizer};
use crate::tensor::{Rng, Stream, Tensor};

pub const WEIGHT_DECAY_GRID: [f64; 4] = [1e-4, 1e-3, 1e-2, 1e-1];

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ProbeConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub weight_decays: Vec<f64>,
    /// Share of the training set held out to pick the weight decay.
    pub holdout: f64,
    pub seed: u64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        ProbeConfig {
            epochs: 10,
            lr: 0.1,
            batch_size: 64,
            weight_decays: WEIGHT_DECAY_GRID.to_vec(),
            holdout: 0.2,
            seed: 0,
        }
    }
}

/// Affine softmax classifier `x W + b`.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LinearClassifier {
    pub dim: usize,
    pub classes: usize,
    /// `[dim, classes]`, row-major.
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

impl LinearClassifier {
    pub fn logits(&self, x: &[f64]) -> Vec<f64> {
        let mut z = self.bias.clone();
        for (i, &xi) in x.iter().enumerate() {
            for (zc, &w) in z.iter_mut().zip(&self.weight[i * self.classes..(i + 1) * self.classes]) {
                *zc += xi * w;
            }
        }
        z
    }

    pub fn predict(&self, x: &[f64]) -> usize {
        let z = self.logits(x);
        (0..z.len()).fold(0, |b, c| if z[c] > z[b] { c } else { b })
    }

    pub fn accuracy(&self, xs: &[Vec<f64>], ys: &[usize]) -> f64 {
        let hits = xs.iter().zip(ys).filter(|(x, &y)| self.predict(x) == y).count();
        hits as f64 / xs.len().max(1) as f64
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ProbeReport {
    pub accuracy: f64,
    pub weight_decay: f64,
    /// Held-out accuracy per grid entry.
    pub sweep: Vec<(f64, f64)>,
    pub classifier: LinearClassifier,
}

/// Trains the classifier with AdamW and cross-entropy.
pub fn fit_linear(
    xs: &[Vec<f64>],
    ys: &[usize],
    classes: usize,
    weight_decay: f64,
    cfg: &ProbeConfig,
) -> Result<LinearClassifier> {
    let dim = xs[0].len();
    let mut store = ParamStore::<f64>::new();
    let w = store.add("weight", Tensor::zeros(vec![dim, classes]));
    let b = store.add("bias", Tensor::zeros(vec![classes]));
    let mut opt = Optimizer::new(
        OptimConfig {
            kind: OptimKind::AdamW,
            lr: cfg.lr,
            weight_decay,
            ..OptimConfig::default()
        },
        &store,
    );
    let mut order: Vec<usize> = (0..xs.len()).collect();
    let mut rng = Rng::new(cfg.seed, Stream::Probe);
    let mut clf = LinearClassifier {
        dim,
        classes,
        weight: vec![0.0; dim * classes],
        bias: vec![0.0; classes],
    };
    for _ in 0..cfg.epochs {
        rng.shuffle(&mut order);
        for chunk in order.chunks(cfg.batch_size.max(1)) {
            let mut gw = vec![0.0; dim * classes];
            let mut gb = vec![0.0; classes];
            let inv = 1.0 / chunk.len() as f64;
            for &i in chunk {
                let z = clf.logits(&xs[i]);
                let mx = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let e: Vec<f64> = z.iter().map(|v| (v - mx).exp()).collect();
                let s: f64 = e.iter().sum();
                for c in 0..classes {
                    let d = (e[c] / s - (c == ys[i]) as u8 as f64) * inv;
                    gb[c] += d;
                    for (j, &x) in xs[i].iter().enumerate() {
                        gw[j * classes + c] += d * x;
                    }
                }
            }
            store.get_mut(w).data_mut().copy_from_slice(&clf.weight);
            store.get_mut(b).data_mut().copy_from_slice(&clf.bias);
            for e in store.entries_mut() {
                let g = if e.name == "weight" { &gw } else { &gb };
                e.grad.data_mut().copy_from_slice(g);
            }
            opt.step(&mut store, cfg.lr);
            clf.weight.copy_from_slice(store.get(w).data());
            clf.bias.copy_from_slice(store.get(b).data());
        }
    }
    if clf.weight.iter().chain(&clf.bias).any(|v| !v.is_finite()) {
        return Err(Error::numeric("linear probe diverged"));
    }
    Ok(clf)
}

/// Weight decay picked on a held-out part of the training set, then the
/// classifier retrained on all of it and scored on the evaluation set.
pub fn linear_probe(
    train: &[Vec<f64>],
    labels: &[usize],
    eval: &[Vec<f64>],
    eval_labels: &[usize],
    cfg: &ProbeConfig,
) -> Result<ProbeReport> {
    if train.is_empty() || train.len() != labels.len() || eval.len() != eval_labels.len() || eval.is_empty() {
        return Err(Error::contract("linear probe: nonempty labelled train and evaluation sets required"));
    }
    let classes = labels.iter().chain(eval_labels).max().map_or(0, |m| m + 1);
    let first = labels[0];
    if labels.iter().all(|&y| y == first) {
        return Err(Error::contract("linear probe: training set has a single class"));
    }
    if cfg.weight_decays.is_empty() {
        return Err(Error::contract("linear probe: empty weight-decay grid"));
    }
    let mut order: Vec<usize> = (0..train.len()).collect();
    Rng::new(cfg.seed, Stream::Probe).shuffle(&mut order);
    let n_hold = ((train.len() as f64 * cfg.holdout).round() as usize).clamp(1, train.len() - 1);
    let (hold, fit) = order.split_at(n_hold);
    let pick = |idx: &[usize]| -> (Vec<Vec<f64>>, Vec<usize>) {
        (idx.iter().map(|&i| train[i].clone()).collect(), idx.iter().map(|&i| labels[i]).collect())
    };
    let (fx, fy) = pick(fit);
    let (hx, hy) = pick(hold);
    let mut sweep = Vec::new();
    for &wd in &cfg.weight_decays {
        let clf = fit_linear(&fx, &fy, classes, wd, cfg)?;
        sweep.push((wd, clf.accuracy(&hx, &hy)));
    }
    // first grid entry wins ties
    let best = sweep.iter().fold(sweep[0], |b, &c| if c.1 > b.1 { c } else { b }).0;
    let clf = fit_linear(train, labels, classes, best, cfg)?;
    Ok(ProbeReport {
        accuracy: clf.accuracy(eval, eval_labels),
        weight_decay: best,
        sweep,
        classifier: clf,
    })
}
