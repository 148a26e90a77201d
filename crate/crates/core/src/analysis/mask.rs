use serde::{Deserialize, Serialize};

use super::slots::{Granularity, MaskSource, SlotMask};
use crate::error::{Error, Result};
use crate::nn::layers::L2_EPS;
use crate::nn::params::ParamStore;
use crate::optim::{OptimConfig, OptimKind, Optimizer};
use crate::sparo::SlotLayout;
use crate::tensor::{sigmoid, Tape, Tensor, Var};

/// Floor of the logit multiplier and of four times the sigmoid sharpness.
pub const MASK_SCALE_FLOOR: f64 = 100.0;

/// Mask `m = sigmoid(max(100, exp(alpha)) / 4 * theta)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MaskParams {
    pub granularity: Granularity,
    pub alpha: f64,
    pub theta: Vec<f64>,
}

impl MaskParams {
    pub fn new(granularity: Granularity, layout: SlotLayout) -> Self {
        let n = match granularity {
            Granularity::Slot => layout.slots,
            Granularity::Dim => layout.dim(),
        };
        MaskParams {
            granularity,
            alpha: 0.0,
            theta: vec![0.0; n],
        }
    }

    pub fn scale(&self) -> f64 {
        self.alpha.exp().max(MASK_SCALE_FLOOR)
    }

    pub fn mask(&self) -> Vec<f64> {
        let s = self.scale() / 4.0;
        self.theta.iter().map(|&t| sigmoid(s * t)).collect()
    }

    /// Entries from most to least kept. The mask is strictly increasing in
    /// theta, so saturated mask values that round to the same float are
    /// ordered by theta; remaining ties go to the lower index.
    pub fn ranking(&self) -> Vec<usize> {
        let m = self.mask();
        let mut order: Vec<usize> = (0..m.len()).collect();
        order.sort_by(|&a, &b| {
            m[b].total_cmp(&m[a])
                .then(self.theta[b].total_cmp(&self.theta[a]))
                .then(a.cmp(&b))
        });
        order
    }

    pub fn to_slot_mask(&self) -> SlotMask {
        SlotMask {
            values: self.mask(),
            granularity: self.granularity,
            source: MaskSource::Trained,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MaskTrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub momentum: f64,
    pub batch_size: usize,
    /// Tolerated epoch-loss increase before the step is undone and the
    /// learning rate halved.
    pub tolerance: f64,
}

impl Default for MaskTrainConfig {
    fn default() -> Self {
        MaskTrainConfig {
            epochs: 100,
            lr: 0.02,
            momentum: 0.9,
            batch_size: 32,
            tolerance: 1e-3,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MaskTrainReport {
    /// Mask with the best training accuracy over accepted epochs.
    pub best: MaskParams,
    pub best_epoch: usize,
    pub best_accuracy: f64,
    /// Full-set loss after initialization and after each accepted epoch.
    pub loss_history: Vec<f64>,
    /// Epochs whose result was undone.
    pub rejected_epochs: Vec<usize>,
    pub final_lr: f64,
}

struct Triplets<'a> {
    img: &'a [Vec<f64>],
    pos: &'a [Vec<f64>],
    neg: &'a [Vec<f64>],
    layout: SlotLayout,
}

impl Triplets<'_> {
    fn stack(rows: &[Vec<f64>], idx: &[usize], m: usize) -> Tensor<f64> {
        let data = idx.iter().flat_map(|&i| rows[i].iter().copied()).collect();
        Tensor::new(vec![idx.len(), m], data).expect("triplet shape")
    }

    /// Mean 2-way cross-entropy over `idx` and the number of triplets whose
    /// positive logit is strictly larger.
    fn forward(&self, t: &mut Tape<f64>, alpha: Var, theta: Var, idx: &[usize], g: Granularity) -> Result<(Var, usize)> {
        let m = self.layout.dim();
        let n = idx.len();
        let y = t.constant(Self::stack(self.img, idx, m));
        let p = t.constant(Self::stack(self.pos, idx, m));
        let q = t.constant(Self::stack(self.neg, idx, m));

        let e = t.exp(alpha);
        let scale = t.clamp_min(e, MASK_SCALE_FLOOR);
        let quarter = t.scale(scale, 0.25);
        let z = t.mul(theta, quarter)?;
        let mask = t.sigmoid(z);
        let masked = match g {
            Granularity::Dim => t.mul(y, mask)?,
            Granularity::Slot => {
                let y3 = t.reshape(y, &[n, self.layout.slots, self.layout.slot_dim])?;
                let m2 = t.reshape(mask, &[self.layout.slots, 1])?;
                let r = t.mul(y3, m2)?;
                t.reshape(r, &[n, m])?
            }
        };
        let yn = t.l2_normalize(masked, 1, L2_EPS)?;
        let pn = t.l2_normalize(p, 1, L2_EPS)?;
        let qn = t.l2_normalize(q, 1, L2_EPS)?;
        let cp = t.mul(yn, pn)?;
        let cp = t.sum_axis(cp, 1)?;
        let cq = t.mul(yn, qn)?;
        let cq = t.sum_axis(cq, 1)?;
        let cp = t.reshape(cp, &[n, 1])?;
        let cq = t.reshape(cq, &[n, 1])?;
        let cos = t.concat(&[cp, cq], 1)?;
        let logits = t.mul(cos, scale)?;
        let ls = t.log_softmax(logits, 1)?;
        let first = t.slice(ls, 1, 0, 1)?;
        let total = t.sum(first);
        let loss = t.scale(total, -1.0 / n as f64);
        let hits = t.value(cos).data().chunks(2).filter(|c| c[0] > c[1]).count();
        Ok((loss, hits))
    }

    fn full(&self, params: &MaskParams) -> Result<(f64, f64)> {
        let mut t = Tape::new();
        let a = t.constant(Tensor::scalar(params.alpha));
        let th = t.constant(Tensor::new(vec![params.theta.len()], params.theta.clone())?);
        let idx: Vec<usize> = (0..self.img.len()).collect();
        let (loss, hits) = self.forward(&mut t, a, th, &idx, params.granularity)?;
        Ok((t.value(loss).item(), hits as f64 / idx.len() as f64))
    }
}

/// Trains a global mask on frozen triplets with SGD and momentum. After
/// each epoch the full-set loss is recomputed; if it rose by more than
/// `tolerance` the epoch is undone, momentum cleared and the learning rate
/// halved, so the accepted loss history never increases beyond the
/// tolerance.
pub fn train_mask(
    img: &[Vec<f64>],
    pos: &[Vec<f64>],
    neg: &[Vec<f64>],
    layout: SlotLayout,
    granularity: Granularity,
    cfg: &MaskTrainConfig,
) -> Result<MaskTrainReport> {
    if img.is_empty() {
        return Err(Error::contract("train_mask: empty triplet set"));
    }
    if pos.len() != img.len() || neg.len() != img.len() {
        return Err(Error::contract("train_mask: triplets must be aligned by index"));
    }
    if let Some(r) = img.iter().chain(pos).chain(neg).find(|r| r.len() != layout.dim()) {
        return Err(Error::contract(format!(
            "train_mask: encoding of dimension {} does not match layout {}x{}",
            r.len(),
            layout.slots,
            layout.slot_dim
        )));
    }
    if cfg.batch_size == 0 {
        return Err(Error::contract("train_mask: batch_size must be >= 1"));
    }
    let data = Triplets { img, pos, neg, layout };
    let init = MaskParams::new(granularity, layout);
    let mut store = ParamStore::<f64>::new();
    let a_id = store.add("alpha", Tensor::scalar(init.alpha));
    let th_id = store.add("theta", Tensor::zeros(vec![init.theta.len()]));
    let mut opt = Optimizer::new(
        OptimConfig {
            kind: OptimKind::Sgd,
            lr: cfg.lr,
            momentum: cfg.momentum,
            weight_decay: 0.0,
            ..OptimConfig::default()
        },
        &store,
    );
    let read = |s: &ParamStore<f64>| MaskParams {
        granularity,
        alpha: s.get(a_id).item(),
        theta: s.get(th_id).data().to_vec(),
    };

    let (mut last_loss, acc0) = data.full(&init)?;
    let mut report = MaskTrainReport {
        best: init,
        best_epoch: 0,
        best_accuracy: acc0,
        loss_history: vec![last_loss],
        rejected_epochs: Vec::new(),
        final_lr: cfg.lr,
    };
    let mut lr = cfg.lr;
    let n = img.len();
    for epoch in 1..=cfg.epochs {
        let saved = store.clone();
        for start in (0..n).step_by(cfg.batch_size) {
            let idx: Vec<usize> = (start..(start + cfg.batch_size).min(n)).collect();
            let mut t = Tape::new();
            let p = store.bind(&mut t, true);
            let (loss, _) = data.forward(&mut t, p[a_id], p[th_id], &idx, granularity)?;
            if !t.value(loss).item().is_finite() {
                return Err(Error::numeric(format!("train_mask: non-finite loss in epoch {epoch}")));
            }
            let g = t.backward(loss)?;
            store.zero_grad();
            store.accumulate(&g, &p);
            opt.step(&mut store, lr);
        }
        let params = read(&store);
        let (loss, acc) = data.full(&params)?;
        if loss > last_loss + cfg.tolerance {
            store = saved;
            opt.reset();
            lr *= 0.5;
            report.rejected_epochs.push(epoch);
            continue;
        }
        last_loss = loss;
        report.loss_history.push(loss);
        if acc > report.best_accuracy {
            report.best_accuracy = acc;
            report.best_epoch = epoch;
            report.best = params;
        }
    }
    report.final_lr = lr;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{Rng, Stream};

    #[test]
    fn zero_theta_gives_half_mask() {
        let p = MaskParams::new(Granularity::Dim, SlotLayout::new(2, 3));
        assert_eq!(p.mask(), vec![0.5; 6]);
    }

    #[test]
    fn scale_floor_is_exact() {
        let mut p = MaskParams::new(Granularity::Slot, SlotLayout::new(2, 3));
        for a in [-3.0, 0.0, 4.6] {
            p.alpha = a;
            assert_eq!(p.scale() / 4.0, 25.0);
        }
        p.alpha = 5.0;
        assert_eq!(p.scale(), 5f64.exp());
    }

    /// Slot 0 tells positives from negatives; the others are noise.
    pub(crate) fn informative_triplets(n: usize, seed: u64) -> (Vec<Vec<f64>>, Vec<Vec<f64>>, Vec<Vec<f64>>) {
        let mut rng = Rng::new(seed, Stream::Test);
        let (l, v) = (4, 4);
        let mut img = Vec::new();
        let mut pos = Vec::new();
        let mut neg = Vec::new();
        for _ in 0..n {
            let key: Vec<f64> = (0..v).map(|_| rng.normal()).collect();
            let mut a = key.clone();
            let mut p = key.iter().map(|x| x + 0.1 * rng.normal()).collect::<Vec<_>>();
            let mut q: Vec<f64> = (0..v).map(|_| rng.normal()).collect();
            for _ in 1..l {
                a.extend((0..v).map(|_| rng.normal()));
                p.extend((0..v).map(|_| rng.normal()));
                q.extend((0..v).map(|_| rng.normal()));
            }
            img.push(a);
            pos.push(p);
            neg.push(q);
        }
        (img, pos, neg)
    }

    #[test]
    fn informative_slot_ranks_first() {
        let (img, pos, neg) = informative_triplets(128, 1);
        let layout = SlotLayout::new(4, 4);
        let r = train_mask(&img, &pos, &neg, layout, Granularity::Slot, &MaskTrainConfig::default()).unwrap();
        assert_eq!(r.best.ranking()[0], 0, "{:?}", r.best);
        for w in r.loss_history.windows(2) {
            assert!(w[1] <= w[0] + 1e-3);
        }
    }

    #[test]
    fn ranking_orders_saturated_entries_by_theta() {
        let p = MaskParams {
            granularity: Granularity::Slot,
            alpha: 0.0,
            theta: vec![1.5, -2.0, 4.0, 0.0],
        };
        assert_eq!(p.mask()[0], p.mask()[2]);
        assert_eq!(p.ranking(), vec![2, 0, 3, 1]);
    }

    #[test]
    fn empty_or_misaligned_is_rejected() {
        let l = SlotLayout::new(1, 2);
        assert!(matches!(
            train_mask(&[], &[], &[], l, Granularity::Slot, &MaskTrainConfig::default()),
            Err(Error::Contract(_))
        ));
        let a = vec![vec![1.0, 0.0]];
        assert!(train_mask(&a, &a, &[], l, Granularity::Slot, &MaskTrainConfig::default()).is_err());
    }
}
