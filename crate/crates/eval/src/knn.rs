//! Nearest-neighbour classification under the Euclidean distance.

use crate::error::{Error, Result};

fn squared_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn check_dims(train: &[Vec<f64>], labels: &[usize], test: &[Vec<f64>]) -> Result<usize> {
    if train.is_empty() {
        return Err(Error::Data("nearest-neighbour search needs a non-empty training set".into()));
    }
    if train.len() != labels.len() {
        return Err(Error::Data(format!(
            "{} training features but {} labels",
            train.len(),
            labels.len()
        )));
    }
    let dim = train[0].len();
    if let Some((i, f)) = train.iter().chain(test).enumerate().find(|(_, f)| f.len() != dim) {
        return Err(Error::Data(format!(
            "feature {i} has dimension {}, expected {dim}",
            f.len()
        )));
    }
    Ok(dim)
}

/// Indices of the `k` closest training points, nearest first. Equal distances
/// keep the lower training index first.
pub fn nearest_indices(train: &[Vec<f64>], query: &[f64], k: usize) -> Vec<usize> {
    let mut best: Vec<(f64, usize)> = Vec::with_capacity(k + 1);
    for (i, t) in train.iter().enumerate() {
        let d = squared_distance(t, query);
        if best.len() == k && d >= best[k - 1].0 {
            continue;
        }
        let pos = best.partition_point(|&(bd, _)| bd <= d);
        best.insert(pos, (d, i));
        best.truncate(k);
    }
    best.into_iter().map(|(_, i)| i).collect()
}

/// Labels for `test` by majority vote among the `k` nearest training points.
///
/// With `k = 1` each query takes the label of its closest training point,
/// ties going to the lowest training index. Vote ties for larger `k` go to the
/// label whose first vote came from the nearer neighbour.
pub fn knn_classify(
    train: &[Vec<f64>],
    labels: &[usize],
    test: &[Vec<f64>],
    k: usize,
) -> Result<Vec<usize>> {
    check_dims(train, labels, test)?;
    if k == 0 || k > train.len() {
        return Err(Error::Config(format!(
            "k = {k} is outside 1..={}",
            train.len()
        )));
    }
    Ok(test
        .iter()
        .map(|q| {
            let idx = nearest_indices(train, q, k);
            let mut votes: Vec<(usize, usize)> = Vec::new();
            for &i in &idx {
                match votes.iter_mut().find(|(l, _)| *l == labels[i]) {
                    Some(v) => v.1 += 1,
                    None => votes.push((labels[i], 1)),
                }
            }
            // max_by_key keeps the last maximum, so scan in reverse
            votes.iter().rev().max_by_key(|(_, n)| *n).unwrap().0
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn one_dimensional_example() {
        let train = vec![vec![0.0], vec![10.0]];
        assert_eq!(knn_classify(&train, &[0, 1], &[vec![3.0]], 1).unwrap(), vec![0]);
    }

    #[test]
    fn equidistant_query_takes_lower_index() {
        let train = vec![vec![1.0], vec![-1.0]];
        assert_eq!(knn_classify(&train, &[5, 2], &[vec![0.0]], 1).unwrap(), vec![5]);
        let train = vec![vec![-1.0], vec![1.0]];
        assert_eq!(knn_classify(&train, &[5, 2], &[vec![0.0]], 1).unwrap(), vec![5]);
    }

    #[test]
    fn majority_vote_with_three_neighbours() {
        let train = vec![vec![0.0], vec![1.0], vec![1.5], vec![9.0]];
        let got = knn_classify(&train, &[0, 1, 1, 0], &[vec![0.1]], 3).unwrap();
        assert_eq!(got, vec![1]);
    }

    #[test]
    fn empty_training_set_is_a_data_error() {
        assert!(matches!(knn_classify(&[], &[], &[vec![1.0]], 1), Err(Error::Data(_))));
    }

    #[test]
    fn dimension_mismatch_is_reported() {
        let err = knn_classify(&[vec![0.0, 1.0]], &[0], &[vec![1.0]], 1).unwrap_err();
        assert!(err.to_string().contains("dimension 1, expected 2"));
    }
}
