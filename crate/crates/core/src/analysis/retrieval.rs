use serde::Serialize;

use crate::error::{Error, Result};

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub(crate) fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let n = (dot(a, a) * dot(b, b)).sqrt();
    if n > 0.0 {
        dot(a, b) / n
    } else {
        0.0
    }
}

/// Whether `correct` ranks within the first `k` of `sims`. Ties rank the
/// lower index first.
pub fn hit_at_k(sims: &[f64], correct: usize, k: usize) -> bool {
    let s = sims[correct];
    let rank = sims
        .iter()
        .enumerate()
        .filter(|&(j, &x)| x > s || (x == s && j < correct))
        .count();
    rank < k
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RetrievalReport {
    pub k: usize,
    pub batch: usize,
    pub image_to_text: f64,
    pub text_to_image: f64,
    /// Mean of both directions.
    pub mean: f64,
    /// Every similarity row was constant, so hits come from the tie rule
    /// alone.
    pub degenerate: bool,
}

/// Recall@k with the similarity `sim`, within consecutive batches of
/// `batch` pairs (a trailing partial batch of at least two pairs is kept).
pub fn in_batch_retrieval_with(
    n: usize,
    batch: usize,
    k: usize,
    sim: impl Fn(usize, usize) -> f64,
) -> Result<RetrievalReport> {
    if n < 2 {
        return Err(Error::contract(format!("retrieval needs at least 2 pairs (got {n})")));
    }
    if batch < 2 || k == 0 {
        return Err(Error::contract(format!("retrieval needs batch >= 2 and k >= 1 (got {batch}, {k})")));
    }
    let (mut i2t, mut t2i, mut total) = (0usize, 0usize, 0usize);
    let mut degenerate = true;
    let mut start = 0;
    while start < n {
        let len = batch.min(n - start);
        if len < 2 && start > 0 {
            break;
        }
        let m: Vec<Vec<f64>> = (0..len).map(|a| (0..len).map(|b| sim(start + a, start + b)).collect()).collect();
        for q in 0..len {
            let row = &m[q];
            let col: Vec<f64> = (0..len).map(|a| m[a][q]).collect();
            i2t += hit_at_k(row, q, k) as usize;
            t2i += hit_at_k(&col, q, k) as usize;
            degenerate &= row.iter().all(|&x| x == row[0]) && col.iter().all(|&x| x == col[0]);
        }
        total += len;
        start += len;
    }
    let (a, b) = (i2t as f64 / total as f64, t2i as f64 / total as f64);
    Ok(RetrievalReport {
        k,
        batch,
        image_to_text: a,
        text_to_image: b,
        mean: 0.5 * (a + b),
        degenerate,
    })
}

/// In-batch recall@k of paired, normalized encodings by inner product.
pub fn in_batch_retrieval(img: &[Vec<f64>], txt: &[Vec<f64>], batch: usize, k: usize) -> Result<RetrievalReport> {
    if img.len() != txt.len() {
        return Err(Error::contract(format!(
            "retrieval: {} image encodings vs {} text encodings",
            img.len(),
            txt.len()
        )));
    }
    in_batch_retrieval_with(img.len(), batch, k, |a, b| dot(&img[a], &txt[b]))
}

/// Recall@k over the whole set.
pub fn retrieval_at_k(img: &[Vec<f64>], txt: &[Vec<f64>], k: usize) -> Result<RetrievalReport> {
    in_batch_retrieval(img, txt, img.len().max(2), k)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identical_encodings_score_one_over_batch() {
        let e = vec![vec![1.0, 0.0]; 8];
        let r = in_batch_retrieval(&e, &e, 4, 1).unwrap();
        assert_eq!(r.mean, 0.25);
        assert!(r.degenerate);
    }

    #[test]
    fn orthonormal_pairs_are_perfect() {
        let e: Vec<Vec<f64>> = (0..4).map(|i| (0..4).map(|j| (i == j) as u8 as f64).collect()).collect();
        let r = retrieval_at_k(&e, &e, 1).unwrap();
        assert_eq!((r.image_to_text, r.text_to_image), (1.0, 1.0));
        assert!(!r.degenerate);
    }

    #[test]
    fn recall_at_k_counts_rank() {
        assert!(hit_at_k(&[0.9, 0.5, 0.7], 2, 2));
        assert!(!hit_at_k(&[0.9, 0.5, 0.7], 1, 2));
        assert!(hit_at_k(&[0.5, 0.5], 0, 1));
        assert!(!hit_at_k(&[0.5, 0.5], 1, 1));
    }

    #[test]
    fn bad_inputs() {
        let e = vec![vec![1.0]];
        assert!(retrieval_at_k(&e, &e, 1).is_err());
        assert!(in_batch_retrieval(&[vec![1.0], vec![0.0]], &e, 2, 1).is_err());
    }
}
