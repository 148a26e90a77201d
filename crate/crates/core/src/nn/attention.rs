use super::layers::Linear;
use super::params::{Bound, ParamStore};
use crate::error::{Error, Result};
use crate::tensor::{Rng, Scalar, Tape, Tensor, Var};

/// Standard multi-head attention with per-head width `d / heads` and
/// `1/sqrt(d_head)` logit scaling.
#[derive(Clone, Debug)]
pub struct MultiHeadAttention {
    pub wq: Linear,
    pub wk: Linear,
    pub wv: Linear,
    pub wo: Linear,
    pub heads: usize,
    pub dim: usize,
}

/// Output of an attention call: values and the attention weights
/// `[B, heads, queries, keys]`.
pub struct AttentionOutput {
    pub out: Var,
    pub weights: Var,
}

impl MultiHeadAttention {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        rng: &mut Rng,
        name: &str,
        dim: usize,
        heads: usize,
    ) -> Result<Self> {
        if heads == 0 || dim % heads != 0 {
            return Err(Error::config(format!(
                "width {dim} is not divisible by {heads} heads"
            )));
        }
        Ok(MultiHeadAttention {
            wq: Linear::new(store, rng, &format!("{name}.wq"), dim, dim, true),
            wk: Linear::new(store, rng, &format!("{name}.wk"), dim, dim, true),
            wv: Linear::new(store, rng, &format!("{name}.wv"), dim, dim, true),
            wo: Linear::new(store, rng, &format!("{name}.wo"), dim, dim, true),
            heads,
            dim,
        })
    }

    pub fn param_count(&self) -> usize {
        self.wq.param_count() + self.wk.param_count() + self.wv.param_count() + self.wo.param_count()
    }

    /// `[B, n, d] -> [B, h, n, dh]`
    fn split_heads<T: Scalar>(&self, t: &mut Tape<T>, x: Var) -> Result<Var> {
        let s = t.shape(x).to_vec();
        let dh = self.dim / self.heads;
        let r = t.reshape(x, &[s[0], s[1], self.heads, dh])?;
        t.permute(r, &[0, 2, 1, 3])
    }

    /// Self-attention over `x: [B, n, d]`. `mask` is additive and broadcasts
    /// against `[B, h, n, n]`.
    pub fn forward<T: Scalar>(
        &self,
        t: &mut Tape<T>,
        p: &Bound,
        x: Var,
        mask: Option<Var>,
    ) -> Result<AttentionOutput> {
        self.cross(t, p, x, x, mask)
    }

    /// Attention from `queries: [B, m, d]` (or `[m, d]`, shared over the
    /// batch) onto `context: [B, n, d]`.
    pub fn cross<T: Scalar>(
        &self,
        t: &mut Tape<T>,
        p: &Bound,
        queries: Var,
        context: Var,
        mask: Option<Var>,
    ) -> Result<AttentionOutput> {
        let cs = t.shape(context).to_vec();
        if cs.len() != 3 || cs[2] != self.dim {
            return Err(Error::Dimension {
                op: "attention",
                lhs: cs,
                rhs: vec![self.dim],
            });
        }
        let batch = cs[0];
        let dh = self.dim / self.heads;

        let q = self.wq.forward(t, p, queries)?;
        let q = if t.shape(q).len() == 2 {
            let m = t.shape(q)[0];
            let r = t.reshape(q, &[m, self.heads, dh])?;
            t.permute(r, &[1, 0, 2])?
        } else {
            self.split_heads(t, q)?
        };
        let k = self.wk.forward(t, p, context)?;
        let k = self.split_heads(t, k)?;
        let v = self.wv.forward(t, p, context)?;
        let v = self.split_heads(t, v)?;

        let kt = t.transpose(k)?;
        let logits = t.matmul(q, kt)?;
        let mut logits = t.scale(logits, 1.0 / (dh as f64).sqrt());
        if let Some(m) = mask {
            logits = t.add(logits, m)?;
        }
        let weights = t.softmax(logits, 3)?;
        let ctx = t.matmul(weights, v)?;
        let m = t.shape(ctx)[2];
        let ctx = t.permute(ctx, &[0, 2, 1, 3])?;
        let ctx = t.reshape(ctx, &[batch, m, self.dim])?;
        let out = self.wo.forward(t, p, ctx)?;
        Ok(AttentionOutput { out, weights })
    }
}

/// Additive self-attention mask `[B, 1, n, n]` hiding keys at positions
/// `>= valid_len[b]` and, when `causal`, keys after the query position.
/// Returns `None` when nothing would be masked.
pub fn self_attention_mask<T: Scalar>(valid_len: &[usize], n: usize, causal: bool) -> Option<Tensor<T>> {
    if !causal && valid_len.iter().all(|&l| l >= n) {
        return None;
    }
    let b = valid_len.len();
    let mut data = vec![T::zero(); b * n * n];
    for (bi, &len) in valid_len.iter().enumerate() {
        for i in 0..n {
            for j in 0..n {
                if j >= len || (causal && j > i) {
                    data[(bi * n + i) * n + j] = T::neg_infinity();
                }
            }
        }
    }
    Some(Tensor::new(vec![b, 1, n, n], data).expect("mask shape"))
}

/// Additive key mask `[B, 1, 1, n]` hiding positions `>= valid_len[b]`.
pub fn key_mask<T: Scalar>(valid_len: &[usize], n: usize) -> Option<Tensor<T>> {
    if valid_len.iter().all(|&l| l >= n) {
        return None;
    }
    let b = valid_len.len();
    let mut data = vec![T::zero(); b * n];
    for (bi, &len) in valid_len.iter().enumerate() {
        for j in len..n {
            data[bi * n + j] = T::neg_infinity();
        }
    }
    Some(Tensor::new(vec![b, 1, 1, n], data).expect("mask shape"))
}
