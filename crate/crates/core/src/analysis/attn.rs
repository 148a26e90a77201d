use serde::{Deserialize, Serialize};

use super::retrieval::cosine;
use crate::error::{Error, Result};
use crate::nn::backbone::InputBatch;
use crate::nn::params::ParamStore;
use crate::sparo::Encoder;
use crate::tensor::{Scalar, Tape};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttnFilter {
    /// Minimum largest attention weight of a slot.
    pub min_text_sharpness: f64,
    /// Maximum number of other slots sharing a slot's most attended position.
    pub max_overlap: usize,
    /// Minimum cosine between a slot and the same slot of the paired input.
    pub min_cross_modal_cos: f64,
}

impl Default for AttnFilter {
    fn default() -> Self {
        AttnFilter {
            min_text_sharpness: 0.5,
            max_overlap: 0,
            min_cross_modal_cos: 0.75,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SlotAttention {
    pub slot: usize,
    /// Weights over the item's valid positions.
    pub weights: Vec<f64>,
    pub sharpness: f64,
    pub argmax: usize,
    pub overlap: usize,
    pub cross_modal_cos: Option<f64>,
    pub pass: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AttnItem {
    pub input: usize,
    pub slots: Vec<SlotAttention>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AttnReport {
    pub filter: AttnFilter,
    pub items: Vec<AttnItem>,
}

/// Per-slot attention of a separate-head read-out for every item of
/// `input`, with the filter verdicts. The cross-modal criterion is only
/// applied when a paired encoder and input are given.
pub fn export_attention<T: Scalar>(
    encoder: &Encoder,
    store: &ParamStore<T>,
    input: &InputBatch<T>,
    paired: Option<(&Encoder, &InputBatch<T>)>,
    filter: &AttnFilter,
) -> Result<AttnReport> {
    if encoder.sparo().is_none() {
        return Err(Error::contract(format!(
            "attention export needs a sparo head (got {})",
            encoder.head_kind().name()
        )));
    }
    let mut t = Tape::new();
    let p = store.bind(&mut t, false);
    let out = encoder.forward(&mut t, &p, input)?;
    let attn = out.attention.expect("sparo head reports attention");
    let shape = t.shape(attn).to_vec();
    let (b, l, n) = (shape[0], shape[1], shape[2]);
    let a: Vec<f64> = t.value(attn).data().iter().map(|v| v.widen()).collect();
    let layout = out.layout;
    let enc: Vec<f64> = t.value(out.encoding).data().iter().map(|v| v.widen()).collect();
    let other: Option<Vec<f64>> = match paired {
        Some((pe, pin)) => {
            if pin.len() != b {
                return Err(Error::contract("attention export: paired input differs in size"));
            }
            if pe.layout() != layout {
                return Err(Error::contract("attention export: paired encoder has a different slot layout"));
            }
            let po = pe.forward(&mut t, &p, pin)?;
            Some(t.value(po.encoding).data().iter().map(|v| v.widen()).collect())
        }
        None => None,
    };
    let m = layout.dim();
    let v = layout.slot_dim;
    let items = (0..b)
        .map(|i| {
            let valid = out.backbone.valid_len[i];
            let rows: Vec<Vec<f64>> = (0..l).map(|s| a[(i * l + s) * n..(i * l + s) * n + valid].to_vec()).collect();
            let argmax: Vec<usize> = rows
                .iter()
                .map(|r| (0..r.len()).fold(0, |best, j| if r[j] > r[best] { j } else { best }))
                .collect();
            let slots = (0..l)
                .map(|s| {
                    let sharpness = rows[s][argmax[s]];
                    let overlap = (0..l).filter(|&o| o != s && argmax[o] == argmax[s]).count();
                    let cross = other.as_ref().map(|pe| {
                        cosine(&enc[i * m + s * v..i * m + (s + 1) * v], &pe[i * m + s * v..i * m + (s + 1) * v])
                    });
                    let pass = sharpness >= filter.min_text_sharpness
                        && overlap <= filter.max_overlap
                        && cross.is_none_or(|c| c > filter.min_cross_modal_cos);
                    SlotAttention {
                        slot: s,
                        weights: rows[s].clone(),
                        sharpness,
                        argmax: argmax[s],
                        overlap,
                        cross_modal_cos: cross,
                        pass,
                    }
                })
                .collect();
            AttnItem { input: i, slots }
        })
        .collect();
    Ok(AttnReport { filter: *filter, items })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::attpool::AttPoolConfig;
    use crate::nn::backbone::{BackboneConfig, InputKind};
    use crate::sparo::{build_encoder, EncoderConfig, HeadConfig, HeadKind, SparoConfig};
    use crate::tensor::{Rng, Stream};

    fn encoder(kind: HeadKind) -> (ParamStore<f64>, Encoder) {
        let cfg = EncoderConfig {
            backbone: BackboneConfig::desk(InputKind::Tokens { vocab: 16 }),
            head: HeadConfig {
                kind,
                sparo: SparoConfig::desk(),
                attpool: AttPoolConfig::baseline(8, 8, 4),
                bottleneck_dim: 64,
            },
            replace_last_block: false,
        };
        let mut store = ParamStore::new();
        let e = build_encoder(&mut store, &mut Rng::new(0, Stream::Init), "text", &cfg).unwrap();
        (store, e)
    }

    #[test]
    fn single_position_has_unit_weight() {
        let (store, e) = encoder(HeadKind::Sparo);
        let batch = InputBatch::Tokens { ids: vec![vec![1]], eos: vec![0] };
        let r = export_attention(&e, &store, &batch, None, &AttnFilter::default()).unwrap();
        assert_eq!(r.items[0].slots.len(), 8);
        assert!(r.items[0].slots.iter().all(|s| s.weights == vec![1.0]));
    }

    #[test]
    fn weights_are_distributions_and_paired_cosine_is_reported() {
        let (store, e) = encoder(HeadKind::Sparo);
        let batch = InputBatch::Tokens {
            ids: vec![vec![3, 4, 5, 1, 0], vec![6, 7, 1, 0, 0]],
            eos: vec![3, 2],
        };
        let r = export_attention(&e, &store, &batch, Some((&e, &batch)), &AttnFilter::default()).unwrap();
        for item in &r.items {
            for s in &item.slots {
                assert!(s.weights.iter().all(|&w| w >= 0.0));
                assert!((s.weights.iter().sum::<f64>() - 1.0).abs() < 1e-6);
                assert!((s.cross_modal_cos.unwrap() - 1.0).abs() < 1e-9);
            }
        }
        assert_eq!(r.items[0].slots[0].weights.len(), 4);
        assert_eq!(r.filter.min_cross_modal_cos, 0.75);
    }

    #[test]
    fn non_sparo_head_rejected() {
        let (store, e) = encoder(HeadKind::ClsEos);
        let batch = InputBatch::Tokens { ids: vec![vec![1]], eos: vec![0] };
        assert!(matches!(
            export_attention(&e, &store, &batch, None, &AttnFilter::default()),
            Err(Error::Contract(_))
        ));
    }
}
