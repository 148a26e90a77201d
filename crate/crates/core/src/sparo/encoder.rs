use serde::{Deserialize, Serialize};

use super::{SlotLayout, Sparo, SparoConfig};
use crate::error::{Error, Result};
use crate::nn::attpool::{AttPool, AttPoolConfig, LinearBottleneck};
use crate::nn::backbone::{pool_gap, pool_token, Backbone, BackboneConfig, BackboneOutput, InputBatch, InputKind, TokenPool};
use crate::nn::layers::LayerNorm;
use crate::nn::params::{Bound, ParamStore};
use crate::tensor::{Rng, Scalar, Tape, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadKind {
    /// CLS state for image-like inputs, EOS state for text-like inputs.
    ClsEos,
    Gap,
    AttPool,
    Sparo,
    LinearBottleneck,
}

impl HeadKind {
    pub fn parse(s: &str) -> Option<Self> {
        Some(match s {
            "cls_eos" => HeadKind::ClsEos,
            "gap" => HeadKind::Gap,
            "attpool" => HeadKind::AttPool,
            "sparo" => HeadKind::Sparo,
            "linear_bottleneck" => HeadKind::LinearBottleneck,
            _ => return None,
        })
    }

    pub fn name(self) -> &'static str {
        match self {
            HeadKind::ClsEos => "cls_eos",
            HeadKind::Gap => "gap",
            HeadKind::AttPool => "attpool",
            HeadKind::Sparo => "sparo",
            HeadKind::LinearBottleneck => "linear_bottleneck",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HeadConfig {
    pub kind: HeadKind,
    pub sparo: SparoConfig,
    pub attpool: AttPoolConfig,
    /// Output dimension of the linear bottleneck.
    pub bottleneck_dim: usize,
}

impl HeadConfig {
    /// Checks the active head against backbone width `d`.
    pub fn validate(&self, d: usize, errs: &mut Vec<String>) {
        match self.kind {
            HeadKind::Sparo => self.sparo.validate("sparo.", errs),
            HeadKind::AttPool => self.attpool.validate(d, "", errs),
            HeadKind::LinearBottleneck if self.bottleneck_dim <= d => errs.push(format!(
                "bottleneck_dim {} must exceed width {d}",
                self.bottleneck_dim
            )),
            _ => {}
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub backbone: BackboneConfig,
    pub head: HeadConfig,
    /// The read-out takes the place of the backbone's last block.
    pub replace_last_block: bool,
}

impl EncoderConfig {
    pub fn validate(&self, prefix: &str, errs: &mut Vec<String>) {
        self.backbone.validate(prefix, errs);
        if self.replace_last_block && self.backbone.num_blocks <= 1 {
            errs.push(format!(
                "{prefix}replace_last_block needs at least 2 blocks (got {})",
                self.backbone.num_blocks
            ));
        }
        self.head.validate(self.backbone.width, errs);
    }

    pub fn encoding_dim(&self) -> usize {
        match self.head.kind {
            HeadKind::ClsEos | HeadKind::Gap => self.backbone.width,
            HeadKind::Sparo => self.head.sparo.encoding_dim(),
            HeadKind::AttPool => self.head.attpool.slots * self.head.attpool.slot_dim,
            HeadKind::LinearBottleneck => self.head.bottleneck_dim,
        }
    }
}

#[derive(Clone, Debug)]
enum Head {
    Token(TokenPool),
    Gap,
    AttPool(AttPool),
    Sparo(Sparo),
    Bottleneck(TokenPool, LinearBottleneck),
}

/// Backbone, final layer norm and read-out head.
#[derive(Clone, Debug)]
pub struct Encoder {
    pub cfg: EncoderConfig,
    pub name: String,
    pub backbone: Backbone,
    ln_final: LayerNorm,
    head: Head,
}

/// Tape outputs of an encoder call.
pub struct EncoderOutput {
    /// `[B, M]`
    pub encoding: Var,
    pub layout: SlotLayout,
    /// Whether the encoding is made of separately attended slots.
    pub slot_structured: bool,
    /// `[B, L, n]` for attention heads (`[B, heads, queries, n]` for the
    /// multi-head pooler).
    pub attention: Option<Var>,
    pub backbone: BackboneOutput,
}

/// Builds an encoder under `name` in `store`.
pub fn build_encoder<T: Scalar>(
    store: &mut ParamStore<T>,
    rng: &mut Rng,
    name: &str,
    cfg: &EncoderConfig,
) -> Result<Encoder> {
    let mut errs = Vec::new();
    cfg.validate("", &mut errs);
    if !errs.is_empty() {
        return Err(Error::Config(errs));
    }
    let d = cfg.backbone.width;
    let backbone = Backbone::new(store, rng, &format!("{name}.backbone"), &cfg.backbone, cfg.replace_last_block)?;
    let ln_final = LayerNorm::new(store, &format!("{name}.ln_final"), d);
    let token = match cfg.backbone.input {
        InputKind::Tokens { .. } => TokenPool::Eos,
        InputKind::Continuous { .. } => TokenPool::Cls,
    };
    let hname = format!("{name}.head");
    let head = match cfg.head.kind {
        HeadKind::ClsEos => Head::Token(token),
        HeadKind::Gap => Head::Gap,
        HeadKind::AttPool => Head::AttPool(AttPool::new(store, rng, &hname, &cfg.head.attpool, d)?),
        HeadKind::Sparo => Head::Sparo(Sparo::new(store, rng, &hname, &cfg.head.sparo, d)?),
        HeadKind::LinearBottleneck => Head::Bottleneck(
            token,
            LinearBottleneck::new(store, rng, &hname, d, cfg.head.bottleneck_dim)?,
        ),
    };
    Ok(Encoder {
        cfg: cfg.clone(),
        name: name.to_string(),
        backbone,
        ln_final,
        head,
    })
}

impl Encoder {
    pub fn encoding_dim(&self) -> usize {
        self.cfg.encoding_dim()
    }

    pub fn layout(&self) -> SlotLayout {
        match &self.head {
            Head::Sparo(s) => s.layout(),
            Head::AttPool(a) => a.layout(),
            _ => SlotLayout::new(1, self.encoding_dim()),
        }
    }

    pub fn sparo(&self) -> Option<&Sparo> {
        match &self.head {
            Head::Sparo(s) => Some(s),
            _ => None,
        }
    }

    pub fn head_kind(&self) -> HeadKind {
        self.cfg.head.kind
    }

    /// Trainable scalars owned by this encoder.
    pub fn param_count<T: Scalar>(&self, store: &ParamStore<T>) -> usize {
        store.count_prefix(&format!("{}.", self.name))
    }

    /// Final backbone states after the closing layer norm.
    pub fn states<T: Scalar>(&self, t: &mut Tape<T>, p: &Bound, batch: &InputBatch<T>) -> Result<BackboneOutput> {
        let out = self.backbone.forward(t, p, batch)?;
        let states = self.ln_final.forward(t, p, out.states)?;
        Ok(BackboneOutput { states, ..out })
    }

    pub fn forward<T: Scalar>(&self, t: &mut Tape<T>, p: &Bound, batch: &InputBatch<T>) -> Result<EncoderOutput> {
        let out = self.states(t, p, batch)?;
        let mut attention = None;
        let encoding = match &self.head {
            Head::Token(kind) => pool_token(t, &out, *kind)?,
            Head::Gap => pool_gap(t, &out)?,
            Head::AttPool(ap) => {
                let (y, a) = ap.forward(t, p, out.states, &out.valid_len)?;
                attention = Some(a);
                y
            }
            Head::Sparo(s) => {
                let o = s.forward(t, p, out.states, Some(&out.valid_len))?;
                attention = Some(o.attention);
                let b = t.shape(o.slots)[0];
                t.reshape(o.slots, &[b, self.encoding_dim()])?
            }
            Head::Bottleneck(kind, lb) => {
                let pooled = pool_token(t, &out, *kind)?;
                lb.forward(t, p, pooled)?
            }
        };
        Ok(EncoderOutput {
            encoding,
            layout: self.layout(),
            slot_structured: matches!(self.head, Head::Sparo(_)),
            attention,
            backbone: out,
        })
    }
}
