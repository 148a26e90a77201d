//! Attentional pooler and its ablation grid.
//!
//! A cross-attention read-out from learned queries, followed by layer
//! normalization and a linear projection to an `L·V` encoding. The cross
//! attention is either standard multi-head attention or the separate-head
//! read-out, and the normalization and projection can each act on the
//! whole vector or slot-wise (shared parameters per contiguous partition).

use serde::{Deserialize, Serialize};

use super::attention::{key_mask, MultiHeadAttention};
use super::layers::{LayerNorm, Linear};
use super::params::{init, Bound, ParamId, ParamStore};
use crate::error::{Error, Result};
use crate::sparo::{slotwise_apply, SlotLayout, Sparo, SparoConfig};
use crate::tensor::{Rng, Scalar, Tape, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum CrossKind {
    MultiHead,
    SeparateHead,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttPoolConfig {
    pub cross: CrossKind,
    /// Learned queries of the multi-head variant.
    pub queries: usize,
    /// Heads of the multi-head variant.
    pub heads: usize,
    /// Output layout `L × V`.
    pub slots: usize,
    pub slot_dim: usize,
    /// Attention width `D` of the separate-head variant.
    pub attn_dim: usize,
    pub slotwise_ln: bool,
    pub slotwise_proj: bool,
}

impl AttPoolConfig {
    pub fn baseline(slots: usize, slot_dim: usize, heads: usize) -> Self {
        AttPoolConfig {
            cross: CrossKind::MultiHead,
            queries: 1,
            heads,
            slots,
            slot_dim,
            attn_dim: slot_dim,
            slotwise_ln: false,
            slotwise_proj: false,
        }
    }

    /// Dimension of the attention output before normalization.
    pub fn pre_dim(&self, width: usize) -> usize {
        match self.cross {
            CrossKind::MultiHead => self.queries * width,
            CrossKind::SeparateHead => self.slots * self.slot_dim,
        }
    }

    pub fn validate(&self, width: usize, prefix: &str, errs: &mut Vec<String>) {
        if self.slots == 0 || self.slot_dim == 0 {
            errs.push(format!("{prefix}attpool slots and slot_dim must be >= 1"));
            return;
        }
        if self.cross == CrossKind::MultiHead {
            if self.queries == 0 {
                errs.push(format!("{prefix}attpool queries must be >= 1"));
            }
            if self.heads == 0 || width % self.heads != 0 {
                errs.push(format!("{prefix}attpool heads must divide width {width}"));
            }
        }
        if self.cross == CrossKind::SeparateHead && self.attn_dim == 0 {
            errs.push(format!("{prefix}attpool attn_dim must be >= 1"));
        }
        let pre = self.pre_dim(width);
        if (self.slotwise_ln || self.slotwise_proj) && pre % self.slots != 0 {
            errs.push(format!(
                "{prefix}attpool pre-projection dimension {pre} is not divisible by {} slots",
                self.slots
            ));
        }
    }
}

#[derive(Clone, Debug)]
enum Cross {
    MultiHead { mha: MultiHeadAttention, queries: ParamId },
    SeparateHead(Sparo),
}

#[derive(Clone, Debug)]
pub struct AttPool {
    pub cfg: AttPoolConfig,
    cross: Cross,
    ln: LayerNorm,
    proj: Linear,
    width: usize,
}

impl AttPool {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        rng: &mut Rng,
        name: &str,
        cfg: &AttPoolConfig,
        width: usize,
    ) -> Result<Self> {
        let mut errs = Vec::new();
        cfg.validate(width, "", &mut errs);
        if !errs.is_empty() {
            return Err(Error::Config(errs));
        }
        let cross = match cfg.cross {
            CrossKind::MultiHead => {
                let queries = store.add(
                    format!("{name}.queries"),
                    init::normal(rng, &[cfg.queries, width], 1.0),
                );
                let mha = MultiHeadAttention::new(store, rng, &format!("{name}.attn"), width, cfg.heads)?;
                Cross::MultiHead { mha, queries }
            }
            CrossKind::SeparateHead => {
                let sc = SparoConfig {
                    slots: cfg.slots,
                    slot_dim: cfg.slot_dim,
                    attn_dim: cfg.attn_dim,
                    grp_size: 1,
                    use_bias: true,
                };
                Cross::SeparateHead(Sparo::new(store, rng, &format!("{name}.sparo"), &sc, width)?)
            }
        };
        let pre = cfg.pre_dim(width);
        let chunk = pre / cfg.slots;
        let ln_dim = if cfg.slotwise_ln { chunk } else { pre };
        let ln = LayerNorm::new(store, &format!("{name}.ln"), ln_dim);
        let proj = if cfg.slotwise_proj {
            Linear::new(store, rng, &format!("{name}.proj"), chunk, cfg.slot_dim, true)
        } else {
            Linear::new(store, rng, &format!("{name}.proj"), pre, cfg.slots * cfg.slot_dim, true)
        };
        Ok(AttPool {
            cfg: *cfg,
            cross,
            ln,
            proj,
            width,
        })
    }

    pub fn layout(&self) -> SlotLayout {
        SlotLayout::new(self.cfg.slots, self.cfg.slot_dim)
    }

    /// `h: [B, n, d]` → `[B, L·V]` plus attention weights.
    pub fn forward<T: Scalar>(
        &self,
        t: &mut Tape<T>,
        p: &Bound,
        h: Var,
        valid_len: &[usize],
    ) -> Result<(Var, Var)> {
        let b = t.shape(h)[0];
        let n = t.shape(h)[1];
        let (pre, attn) = match &self.cross {
            Cross::MultiHead { mha, queries } => {
                let mask = key_mask::<T>(valid_len, n).map(|m| t.constant(m));
                let out = mha.cross(t, p, p[*queries], h, mask)?;
                let flat = t.reshape(out.out, &[b, self.cfg.queries * self.width])?;
                (flat, out.weights)
            }
            Cross::SeparateHead(s) => {
                let out = s.forward(t, p, h, Some(valid_len))?;
                let flat = t.reshape(out.slots, &[b, self.cfg.slots * self.cfg.slot_dim])?;
                (flat, out.attention)
            }
        };
        let pre_dim = t.shape(pre)[1];
        let part = SlotLayout::new(self.cfg.slots, pre_dim / self.cfg.slots);
        let normed = if self.cfg.slotwise_ln {
            slotwise_apply(t, pre, part, |t, x| self.ln.forward(t, p, x))?
        } else {
            self.ln.forward(t, p, pre)?
        };
        let y = if self.cfg.slotwise_proj {
            slotwise_apply(t, normed, part, |t, x| self.proj.forward(t, p, x))?
        } else {
            self.proj.forward(t, p, normed)?
        };
        Ok((y, attn))
    }

    pub fn param_count<T: Scalar>(&self, store: &ParamStore<T>) -> usize {
        let cross = match &self.cross {
            Cross::MultiHead { mha, queries } => mha.param_count() + store.get(*queries).len(),
            Cross::SeparateHead(s) => s.enumerate_params(store, true),
        };
        cross + self.ln.param_count() + self.proj.param_count()
    }
}

/// Affine map from a pooled `m`-dimensional encoding to `M > m` dimensions.
#[derive(Clone, Debug)]
pub struct LinearBottleneck {
    pub lin: Linear,
}

impl LinearBottleneck {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, rng: &mut Rng, name: &str, m: usize, out: usize) -> Result<Self> {
        if m >= out {
            return Err(Error::config(format!(
                "linear bottleneck needs input dimension {m} < output dimension {out}"
            )));
        }
        Ok(LinearBottleneck {
            lin: Linear::new(store, rng, name, m, out, true),
        })
    }

    pub fn forward<T: Scalar>(&self, t: &mut Tape<T>, p: &Bound, y: Var) -> Result<Var> {
        self.lin.forward(t, p, y)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{grad_check_many, GradCheckConfig, Stream, Tensor};

    fn pool(cfg: AttPoolConfig, width: usize) -> (ParamStore<f64>, AttPool) {
        let mut store = ParamStore::new();
        let mut rng = Rng::new(1, Stream::Test);
        let ap = AttPool::new(&mut store, &mut rng, "ap", &cfg, width).unwrap();
        (store, ap)
    }

    fn cells() -> Vec<AttPoolConfig> {
        let mut v = Vec::new();
        for cross in [CrossKind::MultiHead, CrossKind::SeparateHead] {
            for ln in [false, true] {
                for pr in [false, true] {
                    v.push(AttPoolConfig {
                        cross,
                        queries: 1,
                        heads: 4,
                        slots: 8,
                        slot_dim: 8,
                        attn_dim: 8,
                        slotwise_ln: ln,
                        slotwise_proj: pr,
                    });
                }
            }
        }
        v
    }

    #[test]
    fn every_cell_outputs_configured_dimension() {
        let mut rng = Rng::new(2, Stream::Test);
        for cfg in cells() {
            let (store, ap) = pool(cfg, 32);
            let mut t = Tape::new();
            let p = store.bind(&mut t, false);
            let h = t.constant(Tensor::new(vec![2, 5, 32], (0..320).map(|_| rng.normal()).collect()).unwrap());
            let (y, _) = ap.forward(&mut t, &p, h, &[5, 3]).unwrap();
            assert_eq!(t.shape(y), &[2, 64]);
        }
    }

    #[test]
    fn single_position_gets_full_weight() {
        for cfg in cells() {
            let (store, ap) = pool(cfg, 32);
            let mut t = Tape::new();
            let p = store.bind(&mut t, false);
            let h = t.constant(Tensor::full(vec![1, 1, 32], 0.3));
            let (_, a) = ap.forward(&mut t, &p, h, &[1]).unwrap();
            assert!(t.value(a).data().iter().all(|&w| w == 1.0));
        }
    }

    #[test]
    fn multi_head_full_projection_outweighs_separate_head_slotwise() {
        let all = cells();
        let count = |c: AttPoolConfig| {
            let (s, ap) = pool(c, 32);
            assert_eq!(ap.param_count(&s), s.num_trainable());
            ap.param_count(&s)
        };
        let mh_full = count(all[0]);
        let sh_slot = count(all[7]);
        assert!(mh_full > sh_slot, "{mh_full} vs {sh_slot}");
        // slot-wise projection always shrinks the model
        for (full, slot) in [(0, 1), (2, 3), (4, 5), (6, 7)] {
            assert!(count(all[full]) > count(all[slot]));
        }
    }

    #[test]
    fn bottleneck_cases() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = Rng::new(3, Stream::Test);
        assert!(matches!(
            LinearBottleneck::new(&mut store, &mut rng, "x", 4, 4),
            Err(Error::Config(_))
        ));
        let lb = LinearBottleneck::new(&mut store, &mut rng, "lb", 2, 4).unwrap();
        store.get_mut(lb.lin.weight).data_mut().iter_mut().for_each(|v| *v = 0.0);
        store.get_mut(lb.lin.bias.unwrap()).data_mut().copy_from_slice(&[1., 2., 3., 4.]);
        let mut t = Tape::new();
        let p = store.bind(&mut t, false);
        let y = t.constant(Tensor::from_f64(vec![1, 2], &[5., 6.]).unwrap());
        let o = lb.forward(&mut t, &p, y).unwrap();
        assert_eq!(t.value(o).data(), &[1., 2., 3., 4.]);

        let w = store.get_mut(lb.lin.weight);
        w.data_mut().copy_from_slice(&[1., 0., 0., 0., 0., 1., 0., 0.]);
        store.get_mut(lb.lin.bias.unwrap()).data_mut().iter_mut().for_each(|v| *v = 0.0);
        let mut t = Tape::new();
        let p = store.bind(&mut t, false);
        let y = t.constant(Tensor::from_f64(vec![1, 2], &[5., 6.]).unwrap());
        let o = lb.forward(&mut t, &p, y).unwrap();
        assert_eq!(&t.value(o).data()[..2], &[5., 6.]);
    }

    #[test]
    fn bottleneck_gradient_check() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = Rng::new(4, Stream::Test);
        let lb = LinearBottleneck::new(&mut store, &mut rng, "lb", 3, 6).unwrap();
        let mut inputs: Vec<Tensor<f64>> = store.entries().iter().map(|e| e.value.clone()).collect();
        inputs.push(Tensor::new(vec![2, 3], (0..6).map(|_| rng.normal()).collect()).unwrap());
        let err = grad_check_many(
            |t, vars| {
                let p = Bound::from_vars(vars[..2].to_vec());
                let o = lb.forward(t, &p, vars[2])?;
                let s = t.sigmoid(o);
                let sq = t.mul(s, s)?;
                Ok(t.sum(sq))
            },
            &inputs,
            &GradCheckConfig::default(),
        )
        .unwrap();
        assert!(err < 1e-6, "{err}");
    }
}
