use serde::{Deserialize, Serialize};

use super::attention::{self_attention_mask, MultiHeadAttention};
use super::layers::{LayerNorm, Mlp};
use super::params::{init, Bound, ParamId, ParamStore};
use crate::error::{Error, Result};
use crate::tensor::{Rng, Scalar, Tape, Tensor, Var};

/// Token id reserved for padding in text-like inputs.
pub const PAD_TOKEN: usize = 0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum InputKind {
    /// Discrete token ids terminated by an EOS token.
    Tokens { vocab: usize },
    /// Pre-embedded continuous vectors; a learned CLS token is prepended.
    Continuous { dim: usize },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BackboneConfig {
    pub num_blocks: usize,
    pub width: usize,
    pub num_heads: usize,
    pub mlp_ratio: f64,
    pub max_positions: usize,
    pub input: InputKind,
    pub causal: bool,
}

impl BackboneConfig {
    /// Two blocks, width 32, four heads, 16 positions.
    pub fn desk(input: InputKind) -> Self {
        BackboneConfig {
            num_blocks: 2,
            width: 32,
            num_heads: 4,
            mlp_ratio: 4.0,
            max_positions: 16,
            input,
            causal: matches!(input, InputKind::Tokens { .. }),
        }
    }

    pub fn validate(&self, prefix: &str, errs: &mut Vec<String>) {
        if self.num_blocks == 0 {
            errs.push(format!("{prefix}blocks must be >= 1"));
        }
        if self.width == 0 {
            errs.push(format!("{prefix}width must be >= 1"));
        }
        if self.num_heads == 0 || self.width % self.num_heads.max(1) != 0 {
            errs.push(format!(
                "{prefix}width {} must be divisible by heads {}",
                self.width, self.num_heads
            ));
        }
        if !(self.mlp_ratio > 0.0) {
            errs.push(format!("{prefix}mlp_ratio must be positive"));
        }
        if self.max_positions == 0 {
            errs.push(format!("{prefix}max_positions must be >= 1"));
        }
        match self.input {
            InputKind::Tokens { vocab } if vocab < 3 => {
                errs.push(format!("{prefix}vocab must be >= 3"))
            }
            InputKind::Continuous { dim: 0 } => errs.push(format!("{prefix}input dim must be >= 1")),
            _ => {}
        }
    }

    pub fn mlp_hidden(&self) -> usize {
        ((self.width as f64) * self.mlp_ratio).round().max(1.0) as usize
    }
}

/// A batch of raw inputs for one tower.
#[derive(Clone, Debug)]
pub enum InputBatch<T> {
    /// Each sequence ends with its EOS token at `eos[b]`.
    Tokens { ids: Vec<Vec<usize>>, eos: Vec<usize> },
    /// Each sequence is `[n_b, dim]`.
    Continuous { seqs: Vec<Tensor<T>> },
}

impl<T: Scalar> InputBatch<T> {
    pub fn len(&self) -> usize {
        match self {
            InputBatch::Tokens { ids, .. } => ids.len(),
            InputBatch::Continuous { seqs } => seqs.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Sub-batch with the given item indices.
    pub fn select(&self, idx: &[usize]) -> Self {
        match self {
            InputBatch::Tokens { ids, eos } => InputBatch::Tokens {
                ids: idx.iter().map(|&i| ids[i].clone()).collect(),
                eos: idx.iter().map(|&i| eos[i]).collect(),
            },
            InputBatch::Continuous { seqs } => InputBatch::Continuous {
                seqs: idx.iter().map(|&i| seqs[i].clone()).collect(),
            },
        }
    }
}

/// Per-position states of a batch.
#[derive(Clone, Debug)]
pub struct BackboneOutput {
    /// `[B, n, d]`
    pub states: Var,
    /// Positions `>= valid_len[b]` are padding.
    pub valid_len: Vec<usize>,
    /// EOS position per item (text-like inputs).
    pub eos_index: Option<Vec<usize>>,
    /// Row 0 holds a CLS token (image-like inputs).
    pub has_cls: bool,
}

/// Pre-norm transformer block: LN → MHA → residual → LN → MLP → residual.
#[derive(Clone, Debug)]
pub struct Block {
    pub ln1: LayerNorm,
    pub attn: MultiHeadAttention,
    pub ln2: LayerNorm,
    pub mlp: Mlp,
}

impl Block {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        rng: &mut Rng,
        name: &str,
        width: usize,
        heads: usize,
        hidden: usize,
    ) -> Result<Self> {
        Ok(Block {
            ln1: LayerNorm::new(store, &format!("{name}.ln1"), width),
            attn: MultiHeadAttention::new(store, rng, &format!("{name}.attn"), width, heads)?,
            ln2: LayerNorm::new(store, &format!("{name}.ln2"), width),
            mlp: Mlp::new(store, rng, &format!("{name}.mlp"), width, hidden, width),
        })
    }

    pub fn param_count(&self) -> usize {
        self.ln1.param_count() + self.attn.param_count() + self.ln2.param_count() + self.mlp.param_count()
    }

    pub fn forward<T: Scalar>(&self, t: &mut Tape<T>, p: &Bound, h: Var, mask: Option<Var>) -> Result<Var> {
        let a = self.ln1.forward(t, p, h)?;
        let a = self.attn.forward(t, p, a, mask)?.out;
        let h = t.add(h, a)?;
        let m = self.ln2.forward(t, p, h)?;
        let m = self.mlp.forward(t, p, m)?;
        t.add(h, m)
    }
}

#[derive(Clone, Debug)]
enum Embed {
    Table(ParamId),
    Projection(super::layers::Linear, ParamId),
}

/// Input embedding, learned absolute positions and a stack of blocks.
#[derive(Clone, Debug)]
pub struct Backbone {
    pub cfg: BackboneConfig,
    embed: Embed,
    pos: ParamId,
    pub blocks: Vec<Block>,
}

impl Backbone {
    /// Builds `cfg.num_blocks` blocks, or one fewer when `drop_last`.
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        rng: &mut Rng,
        name: &str,
        cfg: &BackboneConfig,
        drop_last: bool,
    ) -> Result<Self> {
        let mut errs = Vec::new();
        cfg.validate("", &mut errs);
        if !errs.is_empty() {
            return Err(Error::Config(errs));
        }
        let d = cfg.width;
        let embed = match cfg.input {
            InputKind::Tokens { vocab } => Embed::Table(store.add(
                format!("{name}.token_embed"),
                init::normal(rng, &[vocab, d], 0.02),
            )),
            InputKind::Continuous { dim } => {
                let proj = super::layers::Linear::new(store, rng, &format!("{name}.input_proj"), dim, d, true);
                let cls = store.add(format!("{name}.cls"), init::normal(rng, &[d], 0.02));
                Embed::Projection(proj, cls)
            }
        };
        let pos = store.add(
            format!("{name}.pos_embed"),
            init::normal(rng, &[cfg.max_positions, d], 0.01),
        );
        let n_blocks = if drop_last { cfg.num_blocks - 1 } else { cfg.num_blocks };
        let blocks = (0..n_blocks)
            .map(|i| Block::new(store, rng, &format!("{name}.blocks.{i}"), d, cfg.num_heads, cfg.mlp_hidden()))
            .collect::<Result<_>>()?;
        Ok(Backbone {
            cfg: cfg.clone(),
            embed,
            pos,
            blocks,
        })
    }

    pub fn param_count(&self) -> usize {
        let d = self.cfg.width;
        let embed = match (&self.embed, self.cfg.input) {
            (Embed::Table(_), InputKind::Tokens { vocab }) => vocab * d,
            (Embed::Projection(l, _), _) => l.param_count() + d,
            _ => 0,
        };
        embed + self.cfg.max_positions * d + self.blocks.iter().map(Block::param_count).sum::<usize>()
    }

    /// Embeds the inputs and adds positions: `[B, n, d]`.
    pub fn embed<T: Scalar>(&self, t: &mut Tape<T>, p: &Bound, batch: &InputBatch<T>) -> Result<BackboneOutput> {
        let d = self.cfg.width;
        if batch.is_empty() {
            return Err(Error::contract("empty input batch"));
        }
        let (x, valid_len, eos_index, has_cls) = match (batch, &self.embed) {
            (InputBatch::Tokens { ids, eos }, Embed::Table(table)) => {
                let n = ids.iter().map(Vec::len).max().unwrap_or(0);
                let vocab = t.shape(p[*table])[0];
                let mut flat = Vec::with_capacity(ids.len() * n);
                for (seq, &e) in ids.iter().zip(eos) {
                    if e >= seq.len() {
                        return Err(Error::contract(format!(
                            "eos index {e} out of range for sequence of length {}",
                            seq.len()
                        )));
                    }
                    if let Some(&bad) = seq.iter().find(|&&tok| tok >= vocab) {
                        return Err(Error::contract(format!("token id {bad} >= vocab {vocab}")));
                    }
                    flat.extend_from_slice(seq);
                    flat.extend(std::iter::repeat_n(PAD_TOKEN, n - seq.len()));
                }
                let x = t.index_select(p[*table], 0, &flat)?;
                let x = t.reshape(x, &[ids.len(), n, d])?;
                let valid: Vec<usize> = eos.iter().map(|&e| e + 1).collect();
                (x, valid, Some(eos.clone()), false)
            }
            (InputBatch::Continuous { seqs }, Embed::Projection(proj, cls)) => {
                let dim = proj.in_dim;
                let n = seqs.iter().map(|s| s.shape()[0]).max().unwrap_or(0);
                let mut data = vec![T::zero(); seqs.len() * n * dim];
                for (b, s) in seqs.iter().enumerate() {
                    if s.rank() != 2 || s.shape()[1] != dim {
                        return Err(Error::Dimension {
                            op: "backbone input",
                            lhs: s.shape().to_vec(),
                            rhs: vec![dim],
                        });
                    }
                    if s.shape()[0] == 0 {
                        return Err(Error::contract("empty input sequence"));
                    }
                    data[b * n * dim..b * n * dim + s.len()].copy_from_slice(s.data());
                }
                let raw = t.constant(Tensor::new(vec![seqs.len(), n, dim], data)?);
                let x = proj.forward(t, p, raw)?;
                let zeros = t.constant(Tensor::zeros(vec![seqs.len(), 1, d]));
                let c = t.add(zeros, p[*cls])?;
                let x = t.concat(&[c, x], 1)?;
                let valid: Vec<usize> = seqs.iter().map(|s| s.shape()[0] + 1).collect();
                (x, valid, None, true)
            }
            _ => return Err(Error::contract("input batch kind does not match backbone input")),
        };
        let n = t.shape(x)[1];
        if n > self.cfg.max_positions {
            return Err(Error::contract(format!(
                "sequence length {n} exceeds max_positions {}",
                self.cfg.max_positions
            )));
        }
        let pos = t.slice(p[self.pos], 0, 0, n)?;
        let states = t.add(x, pos)?;
        Ok(BackboneOutput {
            states,
            valid_len,
            eos_index,
            has_cls,
        })
    }

    /// Runs the blocks over already-embedded states.
    pub fn run_blocks<T: Scalar>(&self, t: &mut Tape<T>, p: &Bound, out: BackboneOutput) -> Result<BackboneOutput> {
        let n = t.shape(out.states)[1];
        let mask = self_attention_mask::<T>(&out.valid_len, n, self.cfg.causal).map(|m| t.constant(m));
        let mut h = out.states;
        for b in &self.blocks {
            h = b.forward(t, p, h, mask)?;
        }
        Ok(BackboneOutput { states: h, ..out })
    }

    pub fn forward<T: Scalar>(&self, t: &mut Tape<T>, p: &Bound, batch: &InputBatch<T>) -> Result<BackboneOutput> {
        let e = self.embed(t, p, batch)?;
        self.run_blocks(t, p, e)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TokenPool {
    Cls,
    Eos,
}

/// Selects the CLS (row 0) or EOS state of every item: `[B, d]`.
pub fn pool_token<T: Scalar>(t: &mut Tape<T>, out: &BackboneOutput, kind: TokenPool) -> Result<Var> {
    let s = t.shape(out.states).to_vec();
    let (b, n, d) = (s[0], s[1], s[2]);
    let rows: Vec<usize> = match kind {
        TokenPool::Cls => (0..b).map(|i| i * n).collect(),
        TokenPool::Eos => {
            let eos = out
                .eos_index
                .as_ref()
                .ok_or_else(|| Error::contract("eos pooling requires an eos index"))?;
            eos.iter().enumerate().map(|(i, &e)| i * n + e).collect()
        }
    };
    let flat = t.reshape(out.states, &[b * n, d])?;
    t.index_select(flat, 0, &rows)
}

/// Mean over included positions: `[B, d]`. Text-like inputs include
/// positions up to the EOS; image-like inputs average the non-CLS rows
/// (all rows when the sequence is CLS only).
pub fn pool_gap<T: Scalar>(t: &mut Tape<T>, out: &BackboneOutput) -> Result<Var> {
    let s = t.shape(out.states).to_vec();
    let (b, n, d) = (s[0], s[1], s[2]);
    let mut w = vec![T::zero(); b * n];
    for i in 0..b {
        let end = match &out.eos_index {
            Some(e) => e[i] + 1,
            None => out.valid_len[i],
        };
        let start = if out.has_cls && end > 1 { 1 } else { 0 };
        let c = T::cast(1.0 / (end - start) as f64);
        for j in start..end {
            w[i * n + j] = c;
        }
    }
    let w = t.constant(Tensor::new(vec![b, 1, n], w)?);
    let m = t.matmul(w, out.states)?;
    t.reshape(m, &[b, d])
}
