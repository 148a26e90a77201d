use super::retrieval::{cosine, dot};
use crate::error::{Error, Result};

/// Temperature of the similarity-weighted vote.
pub const KNN_TEMPERATURE: f64 = 0.07;

fn unit(rows: &[Vec<f64>]) -> Vec<Vec<f64>> {
    rows.iter()
        .map(|r| {
            let n = dot(r, r).sqrt();
            if n > 0.0 {
                r.iter().map(|x| x / n).collect()
            } else {
                r.clone()
            }
        })
        .collect()
}

/// Cosine k-NN predictions. Neighbours are ordered by similarity then train
/// index; each votes `exp(sim / 0.07)` for its label, and equal vote totals
/// go to the label met first in neighbour order.
pub fn knn_predict(train: &[Vec<f64>], labels: &[usize], test: &[Vec<f64>], k: usize) -> Result<Vec<usize>> {
    if train.len() != labels.len() {
        return Err(Error::contract("knn: one label per train encoding required"));
    }
    if k == 0 || k > train.len() {
        return Err(Error::contract(format!(
            "knn: k = {k} must lie in [1, {}] (train set size)",
            train.len()
        )));
    }
    let tr = unit(train);
    let classes = labels.iter().max().map_or(0, |m| m + 1);
    Ok(test
        .iter()
        .map(|q| {
            let q = unit(std::slice::from_ref(q)).pop().unwrap_or_default();
            let mut sims: Vec<(f64, usize)> = tr.iter().enumerate().map(|(i, r)| (dot(&q, r), i)).collect();
            sims.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
            let mut votes = vec![0.0; classes];
            let mut first_seen = vec![usize::MAX; classes];
            for (rank, &(s, i)) in sims[..k].iter().enumerate() {
                let c = labels[i];
                votes[c] += (s / KNN_TEMPERATURE).exp();
                first_seen[c] = first_seen[c].min(rank);
            }
            (0..classes)
                .filter(|&c| first_seen[c] != usize::MAX)
                .max_by(|&a, &b| votes[a].total_cmp(&votes[b]).then(first_seen[b].cmp(&first_seen[a])))
                .unwrap_or(0)
        })
        .collect())
}

/// Accuracy of [`knn_predict`] against `test_labels`.
pub fn knn_classify(
    train: &[Vec<f64>],
    labels: &[usize],
    test: &[Vec<f64>],
    test_labels: &[usize],
    k: usize,
) -> Result<f64> {
    if test.is_empty() || test.len() != test_labels.len() {
        return Err(Error::contract("knn: test set must be nonempty with one label per encoding"));
    }
    let pred = knn_predict(train, labels, test, k)?;
    Ok(pred.iter().zip(test_labels).filter(|(a, b)| a == b).count() as f64 / test.len() as f64)
}

/// Mean cosine between every test encoding and its nearest train encoding;
/// a cheap collapse diagnostic.
pub fn mean_nearest_cosine(train: &[Vec<f64>], test: &[Vec<f64>]) -> f64 {
    let total: f64 = test
        .iter()
        .map(|q| train.iter().map(|r| cosine(q, r)).fold(f64::NEG_INFINITY, f64::max))
        .sum();
    total / test.len().max(1) as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{Rng, Stream};

    #[test]
    fn identical_point_takes_its_label() {
        let train = vec![vec![1.0, 0.0], vec![0.0, 1.0]];
        assert_eq!(knn_predict(&train, &[3, 1], &[vec![0.0, 2.0]], 1).unwrap(), vec![1]);
    }

    #[test]
    fn tie_goes_to_lower_index() {
        let train = vec![vec![1.0, 0.0], vec![1.0, 0.0]];
        assert_eq!(knn_predict(&train, &[1, 0], &[vec![1.0, 0.0]], 2).unwrap(), vec![1]);
        assert_eq!(knn_predict(&train, &[0, 1], &[vec![1.0, 0.0]], 2).unwrap(), vec![0]);
    }

    #[test]
    fn k_out_of_range() {
        let train = vec![vec![1.0]];
        assert!(knn_predict(&train, &[0], &[vec![1.0]], 2).is_err());
        assert!(knn_predict(&train, &[0], &[vec![1.0]], 0).is_err());
    }

    #[test]
    fn separated_clusters() {
        let mut rng = Rng::new(3, Stream::Test);
        let centers = [[4.0, 0.0, 0.0], [0.0, 4.0, 0.0], [0.0, 0.0, 4.0]];
        let mut sample = |n: usize| {
            let mut x = Vec::new();
            let mut y = Vec::new();
            for i in 0..n {
                let c = i % 3;
                x.push(centers[c].iter().map(|v| v + rng.normal()).collect::<Vec<f64>>());
                y.push(c);
            }
            (x, y)
        };
        let (tx, ty) = sample(150);
        let (qx, qy) = sample(90);
        assert!(knn_classify(&tx, &ty, &qx, &qy, 5).unwrap() > 0.95);
    }
}
