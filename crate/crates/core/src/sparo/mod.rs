//! Separate-head attention read-out.
//!
//! Each of the `L` slots is a single-head attention over the backbone
//! states with its own learned query `q_l ∈ R^D` and key projection
//! `K_g ∈ R^{D×d}` (`g = l / grp_size`). Values reuse the key projection
//! followed by a projection `W ∈ R^{V×D}` shared by all slots:
//!
//! ```text
//! y_l = W K_g Hᵀ softmax(H K_gᵀ q_l / sqrt(D))
//! ```
//!
//! The encoding is the row-major concatenation of the `L` slot vectors.

mod encoder;
mod slotwise;

pub use encoder::{build_encoder, Encoder, EncoderConfig, EncoderOutput, HeadConfig, HeadKind};
pub use slotwise::{slotwise_apply, slotwise_values};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::attention::key_mask;
use crate::nn::params::{init, Bound, ParamId, ParamStore};
use crate::tensor::{Rng, Scalar, Tape, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SparoConfig {
    /// L
    pub slots: usize,
    /// V
    pub slot_dim: usize,
    /// D
    pub attn_dim: usize,
    /// Slots sharing one key projection.
    pub grp_size: usize,
    /// Key-projection bias (used in both the key and value paths) and
    /// output bias after `W`.
    pub use_bias: bool,
}

impl SparoConfig {
    /// L = V = D = 8, one key projection per slot, biases on.
    pub fn desk() -> Self {
        SparoConfig {
            slots: 8,
            slot_dim: 8,
            attn_dim: 8,
            grp_size: 1,
            use_bias: true,
        }
    }

    pub fn groups(&self) -> usize {
        self.slots / self.grp_size
    }

    pub fn encoding_dim(&self) -> usize {
        self.slots * self.slot_dim
    }

    pub fn validate(&self, prefix: &str, errs: &mut Vec<String>) {
        for (name, v) in [
            ("slots", self.slots),
            ("slot_dim", self.slot_dim),
            ("attn_dim", self.attn_dim),
            ("grp_size", self.grp_size),
        ] {
            if v == 0 {
                errs.push(format!("{prefix}{name} must be >= 1"));
            }
        }
        if self.grp_size > 0 && self.slots % self.grp_size != 0 {
            errs.push(format!(
                "{prefix}slots {} must be divisible by grp_size {}",
                self.slots, self.grp_size
            ));
        }
    }

    pub fn check(&self) -> Result<()> {
        let mut errs = Vec::new();
        self.validate("", &mut errs);
        if errs.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(errs))
        }
    }
}

/// Closed-form parameter count for width `d`. Without biases this is
/// `(L/grp_size)·D·d + L·D + V·D`; biases add `(L/grp_size)·D + V`.
pub fn sparo_param_count(cfg: &SparoConfig, d: usize, include_bias: bool) -> usize {
    let g = cfg.groups();
    let base = g * cfg.attn_dim * d + cfg.slots * cfg.attn_dim + cfg.slot_dim * cfg.attn_dim;
    if include_bias {
        base + g * cfg.attn_dim + cfg.slot_dim
    } else {
        base
    }
}

/// Parameter handles of one read-out.
#[derive(Clone, Debug)]
pub struct Sparo {
    pub cfg: SparoConfig,
    pub width: usize,
    /// `[L, D]`
    pub queries: ParamId,
    /// `[L/grp_size, D, d]`
    pub keys: ParamId,
    /// `[L/grp_size, D]`
    pub key_bias: Option<ParamId>,
    /// `[V, D]`
    pub proj: ParamId,
    /// `[V]`
    pub proj_bias: Option<ParamId>,
}

/// Tape outputs of a batched forward pass.
pub struct SparoOutput {
    /// `[B, L, V]`
    pub slots: Var,
    /// `[B, L, n]`
    pub attention: Var,
}

/// Slot layout of a flat encoding of dimension `slots · slot_dim`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SlotLayout {
    pub slots: usize,
    pub slot_dim: usize,
}

impl SlotLayout {
    pub fn new(slots: usize, slot_dim: usize) -> Self {
        SlotLayout { slots, slot_dim }
    }

    /// Treats an unstructured vector of dimension `m` as `slots` contiguous
    /// equal partitions.
    pub fn partition(m: usize, slots: usize) -> Result<Self> {
        if slots == 0 || m % slots != 0 {
            return Err(Error::contract(format!(
                "dimension {m} cannot be split into {slots} equal slots"
            )));
        }
        Ok(SlotLayout {
            slots,
            slot_dim: m / slots,
        })
    }

    pub fn dim(&self) -> usize {
        self.slots * self.slot_dim
    }
}

/// A single encoding with its slot layout.
#[derive(Clone, Debug, PartialEq)]
pub struct Encoding<T> {
    pub flat: Vec<T>,
    pub layout: SlotLayout,
}

impl<T: Scalar> Encoding<T> {
    pub fn new(flat: Vec<T>, layout: SlotLayout) -> Result<Self> {
        if flat.len() != layout.dim() {
            return Err(Error::Dimension {
                op: "encoding",
                lhs: vec![flat.len()],
                rhs: vec![layout.slots, layout.slot_dim],
            });
        }
        Ok(Encoding { flat, layout })
    }

    pub fn slot(&self, l: usize) -> &[T] {
        let v = self.layout.slot_dim;
        &self.flat[l * v..(l + 1) * v]
    }

    pub fn slots(&self) -> impl Iterator<Item = &[T]> {
        self.flat.chunks(self.layout.slot_dim)
    }
}

impl Sparo {
    /// Queries ~ N(0, 1), keys Xavier-uniform over the stacked `[L/g·D, d]`
    /// matrix, `W` ~ U(±1/sqrt(D)), biases zero.
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        rng: &mut Rng,
        name: &str,
        cfg: &SparoConfig,
        width: usize,
    ) -> Result<Self> {
        cfg.check()?;
        if width == 0 {
            return Err(Error::config("read-out width must be >= 1"));
        }
        let (l, v, dd, g) = (cfg.slots, cfg.slot_dim, cfg.attn_dim, cfg.groups());
        let queries = store.add(format!("{name}.queries"), init::normal(rng, &[l, dd], 1.0));
        let keys = store.add(
            format!("{name}.keys"),
            init::xavier_uniform(rng, &[g, dd, width], width, g * dd),
        );
        let key_bias = cfg
            .use_bias
            .then(|| store.add(format!("{name}.key_bias"), init::zeros(&[g, dd])));
        let proj = store.add(
            format!("{name}.proj"),
            init::uniform(rng, &[v, dd], 1.0 / (dd as f64).sqrt()),
        );
        let proj_bias = cfg
            .use_bias
            .then(|| store.add(format!("{name}.proj_bias"), init::zeros(&[v])));
        Ok(Sparo {
            cfg: *cfg,
            width,
            queries,
            keys,
            key_bias,
            proj,
            proj_bias,
        })
    }

    pub fn layout(&self) -> SlotLayout {
        SlotLayout::new(self.cfg.slots, self.cfg.slot_dim)
    }

    /// Batched read-out over `h: [B, n, d]`. Positions `>= valid_len[b]`
    /// receive exactly zero attention.
    pub fn forward<T: Scalar>(
        &self,
        t: &mut Tape<T>,
        p: &Bound,
        h: Var,
        valid_len: Option<&[usize]>,
    ) -> Result<SparoOutput> {
        let shape = t.shape(h).to_vec();
        if shape.len() != 3 || shape[2] != self.width {
            return Err(Error::Dimension {
                op: "sparo",
                lhs: shape,
                rhs: vec![self.width],
            });
        }
        if !t.value(h).all_finite() {
            return Err(Error::numeric("sparo: non-finite backbone states"));
        }
        let (b, n, d) = (shape[0], shape[1], shape[2]);
        let (l, v, dd, g) = (self.cfg.slots, self.cfg.slot_dim, self.cfg.attn_dim, self.cfg.groups());
        if let Some(vl) = valid_len {
            if vl.len() != b || vl.iter().any(|&x| x == 0 || x > n) {
                return Err(Error::contract(format!(
                    "sparo: attention limit {vl:?} out of range for {b} sequences of length {n}"
                )));
            }
        }

        // Shared key/value projection: [B, n, G·D] -> [B, G, n, D]
        let k = t.reshape(p[self.keys], &[g * dd, d])?;
        let kt = t.transpose(k)?;
        let mut kv = t.matmul(h, kt)?;
        if let Some(kb) = self.key_bias {
            let kb = t.reshape(p[kb], &[g * dd])?;
            kv = t.add(kv, kb)?;
        }
        let kv = t.reshape(kv, &[b, n, g, dd])?;
        let kv = t.permute(kv, &[0, 2, 1, 3])?;

        // Scaled queries grouped by key projection: [G, grp, D]
        let q = t.scale(p[self.queries], 1.0 / (dd as f64).sqrt());
        let q = t.reshape(q, &[g, self.cfg.grp_size, dd])?;
        let kvt = t.transpose(kv)?;
        let mut logits = t.matmul(q, kvt)?; // [B, G, grp, n]
        if let Some(vl) = valid_len {
            if let Some(m) = key_mask::<T>(vl, n) {
                let m = t.constant(m);
                logits = t.add(logits, m)?;
            }
        }
        let attn = t.softmax(logits, 3)?;
        let ctx = t.matmul(attn, kv)?; // [B, G, grp, D]
        let ctx = t.reshape(ctx, &[b, l, dd])?;
        let wt = t.transpose(p[self.proj])?;
        let mut y = t.matmul(ctx, wt)?;
        if let Some(pb) = self.proj_bias {
            y = t.add(y, p[pb])?;
        }
        let y = t.reshape(y, &[b, l, v])?;
        let attention = t.reshape(attn, &[b, l, n])?;
        Ok(SparoOutput { slots: y, attention })
    }

    /// Single-sequence read-out over `h: [n, d]`; attention after
    /// `eos_index` is masked out.
    pub fn encode<T: Scalar>(
        &self,
        t: &mut Tape<T>,
        p: &Bound,
        h: Var,
        eos_index: Option<usize>,
    ) -> Result<(Encoding<T>, SparoOutput)> {
        let shape = t.shape(h).to_vec();
        if shape.len() != 2 {
            return Err(Error::Dimension {
                op: "sparo",
                lhs: shape,
                rhs: vec![self.width],
            });
        }
        let n = shape[0];
        if let Some(e) = eos_index {
            if e >= n {
                return Err(Error::contract(format!("eos index {e} out of range for {n} positions")));
            }
        }
        let h3 = t.reshape(h, &[1, n, shape[1]])?;
        let limit = eos_index.map(|e| vec![e + 1]);
        let out = self.forward(t, p, h3, limit.as_deref())?;
        let enc = Encoding::new(t.value(out.slots).data().to_vec(), self.layout())?;
        Ok((enc, out))
    }

    /// Parameter count obtained by enumerating this read-out's tensors.
    pub fn enumerate_params<T: Scalar>(&self, store: &ParamStore<T>, include_bias: bool) -> usize {
        let mut ids = vec![self.queries, self.keys, self.proj];
        if include_bias {
            ids.extend(self.key_bias);
            ids.extend(self.proj_bias);
        }
        ids.iter().map(|&id| store.get(id).len()).sum()
    }
}
