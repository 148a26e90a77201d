use crate::error::{Error, Result};
use crate::nn::backbone::InputBatch;
use crate::nn::layers::L2_EPS;
use crate::nn::params::{Bound, ParamId, ParamStore};
use crate::sparo::{build_encoder, slotwise_apply, Encoder, EncoderConfig, SlotLayout};
use crate::tensor::{Rng, Scalar, Tape, Tensor, Var};

/// Upper bound on the contrastive logit multiplier.
pub const MAX_LOGIT_SCALE: f64 = 100.0;

/// `ln(1 / 0.07)`
pub fn initial_logit_scale() -> f64 {
    (1.0f64 / 0.07).ln()
}

/// Slot normalization of one encoding. Slot-structured encodings get a unit
/// norm per slot and a global `1/sqrt(L)` factor; others a plain l2
/// normalization.
pub fn clip_normalize<T: Scalar>(y: &[T], layout: SlotLayout, slot_structured: bool) -> Result<Vec<T>> {
    if y.len() != layout.dim() {
        return Err(Error::contract(format!(
            "clip_normalize: dimension {} does not match layout {}x{}",
            y.len(),
            layout.slots,
            layout.slot_dim
        )));
    }
    let unit = |s: &[T]| -> Vec<T> {
        let n = s.iter().map(|&v| v * v).sum::<T>().sqrt().max(T::cast(L2_EPS));
        s.iter().map(|&v| v / n).collect()
    };
    if !slot_structured {
        return Ok(unit(y));
    }
    let scale = T::cast(1.0 / (layout.slots as f64).sqrt());
    Ok(y.chunks(layout.slot_dim).flat_map(unit).map(|v| v * scale).collect())
}

/// Tape form of [`clip_normalize`] over rows of `y: [B, M]`.
pub fn clip_normalize_var<T: Scalar>(t: &mut Tape<T>, y: Var, layout: SlotLayout, slot_structured: bool) -> Result<Var> {
    if !slot_structured {
        return t.l2_normalize(y, 1, L2_EPS);
    }
    let n = slotwise_apply(t, y, layout, |t, x| t.l2_normalize(x, 2, L2_EPS))?;
    Ok(t.scale(n, 1.0 / (layout.slots as f64).sqrt()))
}

/// Inner product of two normalized encodings with matching layouts. For
/// slot-normalized inputs this is the mean of the per-slot cosines.
pub fn clip_similarity<T: Scalar>(yi: &[T], yt: &[T], li: SlotLayout, lt: SlotLayout) -> Result<T> {
    if li != lt || yi.len() != li.dim() || yt.len() != lt.dim() {
        return Err(Error::contract(format!(
            "clip_similarity: layouts {}x{} and {}x{} do not match",
            li.slots, li.slot_dim, lt.slots, lt.slot_dim
        )));
    }
    Ok(yi.iter().zip(yt).map(|(&a, &b)| a * b).sum())
}

/// Symmetric cross-entropy over the `B × B` similarity matrix of two
/// normalized encoding batches, with logits multiplied by
/// `min(exp(logit_scale), 100)`.
pub fn contrastive_loss<T: Scalar>(t: &mut Tape<T>, zi: Var, zt: Var, logit_scale: Var) -> Result<Var> {
    let b = t.shape(zi)[0];
    if b < 2 {
        return Err(Error::contract(format!("contrastive loss needs a batch of at least 2 (got {b})")));
    }
    if t.shape(zt)[0] != b {
        return Err(Error::contract("contrastive loss: image and text batch sizes differ"));
    }
    let scale = t.exp(logit_scale);
    let scale = t.clamp_max(scale, MAX_LOGIT_SCALE);
    let ztt = t.transpose(zt)?;
    let sim = t.matmul(zi, ztt)?;
    let logits = t.mul(sim, scale)?;
    let eye = t.constant(Tensor::from_f64(
        vec![b, b],
        &(0..b * b).map(|k| if k / b == k % b { 1.0 } else { 0.0 }).collect::<Vec<_>>(),
    )?);
    let rows = t.log_softmax(logits, 1)?;
    let cols = t.log_softmax(logits, 0)?;
    let both = t.add(rows, cols)?;
    let diag = t.mul(both, eye)?;
    let total = t.sum(diag);
    Ok(t.scale(total, -0.5 / b as f64))
}

/// Image tower, text tower and the learnable logit scale in one store.
#[derive(Clone, Debug)]
pub struct ClipState {
    pub image: Encoder,
    pub text: Encoder,
    /// Stored as a log.
    pub logit_scale: ParamId,
}

/// Tape outputs of one contrastive step.
pub struct ClipForward {
    pub loss: Var,
    /// Normalized `[B, M]` encodings.
    pub image: Var,
    pub text: Var,
}

impl ClipState {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        rng: &mut Rng,
        image: &EncoderConfig,
        text: &EncoderConfig,
    ) -> Result<Self> {
        if image.encoding_dim() != text.encoding_dim() {
            return Err(Error::config(format!(
                "image encoding dimension {} differs from text encoding dimension {}",
                image.encoding_dim(),
                text.encoding_dim()
            )));
        }
        let image = build_encoder(store, rng, "image", image)?;
        let text = build_encoder(store, rng, "text", text)?;
        if image.layout() != text.layout() {
            return Err(Error::config("image and text slot layouts differ"));
        }
        let logit_scale = store.add("logit_scale", Tensor::scalar(T::cast(initial_logit_scale())));
        Ok(ClipState { image, text, logit_scale })
    }

    pub fn slot_structured(&self) -> bool {
        self.image.sparo().is_some()
    }

    /// Normalized encodings of one tower.
    pub fn encode<T: Scalar>(&self, t: &mut Tape<T>, p: &Bound, tower: &Encoder, batch: &InputBatch<T>) -> Result<Var> {
        let out = tower.forward(t, p, batch)?;
        clip_normalize_var(t, out.encoding, out.layout, out.slot_structured)
    }

    pub fn loss<T: Scalar>(
        &self,
        t: &mut Tape<T>,
        p: &Bound,
        images: &InputBatch<T>,
        texts: &InputBatch<T>,
    ) -> Result<ClipForward> {
        if images.len() != texts.len() {
            return Err(Error::contract("clip_loss: image and text batches differ in size"));
        }
        if images.len() < 2 {
            return Err(Error::contract(format!(
                "clip_loss needs a batch of at least 2 (got {})",
                images.len()
            )));
        }
        let zi = self.encode(t, p, &self.image, images)?;
        let zt = self.encode(t, p, &self.text, texts)?;
        let loss = contrastive_loss(t, zi, zt, p[self.logit_scale])?;
        Ok(ClipForward { loss, image: zi, text: zt })
    }
}
