use serde::{Deserialize, Serialize};

use super::retrieval::{cosine, in_batch_retrieval_with};
use crate::error::{Error, Result};
use crate::objectives::clip_normalize;
use crate::sparo::SlotLayout;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SlotScores {
    pub scores: Vec<f64>,
    pub metric: String,
    pub split: String,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Granularity {
    /// One entry per slot, broadcast over its dimensions.
    Slot,
    /// One entry per encoding dimension.
    Dim,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskSource {
    TopK,
    Trained,
    Manual,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SlotMask {
    pub values: Vec<f64>,
    pub granularity: Granularity,
    pub source: MaskSource,
}

impl SlotMask {
    pub fn ones(layout: SlotLayout) -> Self {
        SlotMask {
            values: vec![1.0; layout.slots],
            granularity: Granularity::Slot,
            source: MaskSource::Manual,
        }
    }

    /// Indices of nonzero entries.
    pub fn selected(&self) -> Vec<usize> {
        (0..self.values.len()).filter(|&i| self.values[i] != 0.0).collect()
    }
}

fn slot(y: &[f64], layout: SlotLayout, l: usize) -> &[f64] {
    &y[l * layout.slot_dim..(l + 1) * layout.slot_dim]
}

fn check_rows(rows: &[Vec<f64>], layout: SlotLayout, what: &str) -> Result<()> {
    if rows.is_empty() {
        return Err(Error::contract(format!("{what}: empty evaluation set")));
    }
    if let Some(r) = rows.iter().find(|r| r.len() != layout.dim()) {
        return Err(Error::contract(format!(
            "{what}: encoding of dimension {} does not match layout {}x{}",
            r.len(),
            layout.slots,
            layout.slot_dim
        )));
    }
    Ok(())
}

/// Per-slot in-batch top-1 retrieval (mean of both directions) using only
/// the cosine between matching slots as the similarity.
pub fn score_slots_retrieval(
    img: &[Vec<f64>],
    txt: &[Vec<f64>],
    layout: SlotLayout,
    batch: usize,
    split: &str,
) -> Result<SlotScores> {
    check_rows(img, layout, "score_slots")?;
    check_rows(txt, layout, "score_slots")?;
    if img.len() != txt.len() {
        return Err(Error::contract("score_slots: unpaired encodings"));
    }
    let scores = (0..layout.slots)
        .map(|l| {
            in_batch_retrieval_with(img.len(), batch, 1, |a, b| {
                cosine(slot(&img[a], layout, l), slot(&txt[b], layout, l))
            })
            .map(|r| r.mean)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(SlotScores {
        scores,
        metric: format!("retrieval@1/batch{batch}"),
        split: split.to_string(),
    })
}

/// Per-slot zero-shot classification accuracy: each encoding is assigned
/// the class whose reference encoding has the highest slot cosine (ties to
/// the lower class).
pub fn score_slots_zero_shot(
    encs: &[Vec<f64>],
    labels: &[usize],
    class_encs: &[Vec<f64>],
    layout: SlotLayout,
    split: &str,
) -> Result<SlotScores> {
    check_rows(encs, layout, "score_slots")?;
    check_rows(class_encs, layout, "score_slots")?;
    if labels.len() != encs.len() {
        return Err(Error::contract("score_slots: one label per encoding required"));
    }
    let scores = (0..layout.slots)
        .map(|l| {
            let hits = encs
                .iter()
                .zip(labels)
                .filter(|(e, &y)| {
                    let sims: Vec<f64> = class_encs.iter().map(|c| cosine(slot(e, layout, l), slot(c, layout, l))).collect();
                    let best = (0..sims.len()).fold(0, |b, c| if sims[c] > sims[b] { c } else { b });
                    best == y
                })
                .count();
            hits as f64 / encs.len() as f64
        })
        .collect();
    Ok(SlotScores {
        scores,
        metric: "zero_shot_accuracy".into(),
        split: split.to_string(),
    })
}

/// Binary slot mask keeping the `k` best-scoring slots; ties go to the
/// lower index.
pub fn select_top_k(scores: &SlotScores, k: usize) -> Result<SlotMask> {
    let l = scores.scores.len();
    if k == 0 || k > l {
        return Err(Error::contract(format!("top-k selection needs 1 <= k <= {l} (got {k})")));
    }
    let mut order: Vec<usize> = (0..l).collect();
    order.sort_by(|&a, &b| scores.scores[b].total_cmp(&scores.scores[a]).then(a.cmp(&b)));
    let mut values = vec![0.0; l];
    for &i in &order[..k] {
        values[i] = 1.0;
    }
    Ok(SlotMask {
        values,
        granularity: Granularity::Slot,
        source: MaskSource::TopK,
    })
}

/// Elementwise `m ⊙ y`; slot masks broadcast over each slot's dimensions.
pub fn apply_mask(y: &[f64], mask: &[f64], granularity: Granularity, layout: SlotLayout) -> Result<Vec<f64>> {
    if y.len() != layout.dim() {
        return Err(Error::contract(format!(
            "apply_mask: encoding of dimension {} does not match layout {}x{}",
            y.len(),
            layout.slots,
            layout.slot_dim
        )));
    }
    let expect = match granularity {
        Granularity::Slot => layout.slots,
        Granularity::Dim => layout.dim(),
    };
    if mask.len() != expect {
        return Err(Error::contract(format!(
            "apply_mask: mask of length {} for {granularity:?} granularity needs {expect}",
            mask.len()
        )));
    }
    Ok(y.iter()
        .enumerate()
        .map(|(i, &v)| {
            let m = match granularity {
                Granularity::Slot => mask[i / layout.slot_dim],
                Granularity::Dim => mask[i],
            };
            m * v
        })
        .collect())
}

/// Applies a binary slot mask to a raw encoding and slot-normalizes the
/// surviving slots with `1/sqrt(L')`; dropped slots stay zero. With the
/// all-ones mask this is exactly the unmasked slot normalization.
pub fn apply_mask_renormalized(y: &[f64], mask: &SlotMask, layout: SlotLayout) -> Result<Vec<f64>> {
    let masked = apply_mask(y, &mask.values, mask.granularity, layout)?;
    if mask.granularity == Granularity::Dim {
        return clip_normalize(&masked, SlotLayout::new(1, layout.dim()), false);
    }
    let keep = mask.selected();
    if keep.is_empty() {
        return Err(Error::contract("apply_mask: mask removes every slot"));
    }
    let kept: Vec<f64> = keep.iter().flat_map(|&l| slot(&masked, layout, l).iter().copied()).collect();
    let normed = clip_normalize(&kept, SlotLayout::new(keep.len(), layout.slot_dim), true)?;
    let mut out = vec![0.0; layout.dim()];
    for (j, &l) in keep.iter().enumerate() {
        out[l * layout.slot_dim..(l + 1) * layout.slot_dim]
            .copy_from_slice(&normed[j * layout.slot_dim..(j + 1) * layout.slot_dim]);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{Rng, Stream};

    fn scores(v: &[f64]) -> SlotScores {
        SlotScores {
            scores: v.to_vec(),
            metric: "m".into(),
            split: "val".into(),
        }
    }

    #[test]
    fn top_k_examples() {
        assert_eq!(select_top_k(&scores(&[0.9, 0.1, 0.5]), 2).unwrap().values, vec![1.0, 0.0, 1.0]);
        assert_eq!(select_top_k(&scores(&[0.3, 0.3, 0.3]), 1).unwrap().values, vec![1.0, 0.0, 0.0]);
        assert_eq!(select_top_k(&scores(&[0.1, 0.2]), 2).unwrap().values, vec![1.0, 1.0]);
        assert!(select_top_k(&scores(&[0.1, 0.2]), 3).is_err());
        assert!(select_top_k(&scores(&[0.1, 0.2]), 0).is_err());
    }

    #[test]
    fn mask_examples() {
        let l = SlotLayout::new(2, 2);
        let y = [1.0, 2.0, 3.0, 4.0];
        assert_eq!(apply_mask(&y, &[1.0, 0.0], Granularity::Slot, l).unwrap(), vec![1.0, 2.0, 0.0, 0.0]);
        assert_eq!(apply_mask(&y, &[1.0, 1.0], Granularity::Slot, l).unwrap(), y.to_vec());
        assert!(apply_mask(&y, &[1.0, 1.0, 1.0], Granularity::Slot, l).is_err());
        let m = SlotMask {
            values: vec![0.0, 1.0],
            granularity: Granularity::Slot,
            source: MaskSource::Manual,
        };
        let r = apply_mask_renormalized(&y, &m, l).unwrap();
        assert_eq!(r, vec![0.0, 0.0, 0.6, 0.8]);
        let all = apply_mask_renormalized(&y, &SlotMask::ones(l), l).unwrap();
        assert_eq!(all, clip_normalize(&y, l, true).unwrap());
    }

    #[test]
    fn perfect_slot_scores_one() {
        let l = SlotLayout::new(2, 4);
        let mut rng = Rng::new(0, Stream::Test);
        let n = 4;
        let img: Vec<Vec<f64>> = (0..n)
            .map(|i| {
                let mut v: Vec<f64> = (0..4).map(|j| (i == j) as u8 as f64).collect();
                v.extend((0..4).map(|_| rng.normal()));
                v
            })
            .collect();
        let txt: Vec<Vec<f64>> = (0..n)
            .map(|i| {
                let mut v: Vec<f64> = (0..4).map(|j| (i == j) as u8 as f64).collect();
                v.extend((0..4).map(|_| rng.normal()));
                v
            })
            .collect();
        let s = score_slots_retrieval(&img, &txt, l, 4, "val").unwrap();
        assert_eq!(s.scores.len(), 2);
        assert_eq!(s.scores[0], 1.0);
        assert!(score_slots_retrieval(&[], &[], l, 4, "val").is_err());
    }

    #[test]
    fn zero_shot_scores() {
        let l = SlotLayout::new(2, 2);
        let classes = vec![vec![1.0, 0.0, 1.0, 0.0], vec![0.0, 1.0, 1.0, 0.0]];
        let encs = vec![vec![2.0, 0.1, 0.0, 1.0], vec![0.1, 3.0, 0.0, 1.0]];
        let s = score_slots_zero_shot(&encs, &[0, 1], &classes, l, "test").unwrap();
        assert_eq!(s.scores, vec![1.0, 0.5]);
    }
}
