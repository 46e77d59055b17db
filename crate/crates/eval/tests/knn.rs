use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rawmix_eval::{knn_classify, Error};

/// Exhaustive search written independently: full distance table, then a
/// stable sort so equal distances keep training order.
fn oracle(train: &[Vec<f64>], labels: &[usize], q: &[f64]) -> usize {
    let mut d: Vec<(usize, f64)> = train
        .iter()
        .enumerate()
        .map(|(i, t)| (i, t.iter().zip(q).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt()))
        .collect();
    d.sort_by(|a, b| a.1.partial_cmp(&b.1).unwrap());
    labels[d[0].0]
}

fn points(rng: &mut ChaCha8Rng, n: usize, dim: usize) -> Vec<Vec<f64>> {
    (0..n).map(|_| (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect()).collect()
}

#[test]
fn fifty_points_twenty_queries_match_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let train = points(&mut rng, 50, 8);
    let labels: Vec<usize> = (0..50).map(|_| rng.random_range(0..5)).collect();
    let test = points(&mut rng, 20, 8);
    let got = knn_classify(&train, &labels, &test, 1).unwrap();
    let want: Vec<usize> = test.iter().map(|q| oracle(&train, &labels, q)).collect();
    assert_eq!(got, want);
}

#[test]
fn thousand_points_match_exhaustive_search() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let train = points(&mut rng, 1000, 16);
    let labels: Vec<usize> = (0..1000).map(|_| rng.random_range(0..10)).collect();
    let test = points(&mut rng, 200, 16);
    let got = knn_classify(&train, &labels, &test, 1).unwrap();
    for (q, g) in test.iter().zip(&got) {
        assert_eq!(*g, oracle(&train, &labels, q));
    }
}

#[test]
fn training_set_classifies_itself_perfectly() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let train = points(&mut rng, 100, 4);
    let labels: Vec<usize> = (0..100).collect();
    assert_eq!(knn_classify(&train, &labels, &train, 1).unwrap(), labels);
}

#[test]
fn duplicated_training_points_resolve_to_the_first() {
    let train = vec![vec![1.0, 1.0], vec![0.0, 0.0], vec![1.0, 1.0]];
    let got = knn_classify(&train, &[4, 7, 9], &[vec![1.0, 1.0], vec![0.9, 0.9]], 1).unwrap();
    assert_eq!(got, vec![4, 4]);
}

#[test]
fn empty_training_set_errors() {
    assert!(matches!(knn_classify(&[], &[], &[vec![0.0]], 1), Err(Error::Data(_))));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn agrees_with_oracle_on_integer_grids(
        train in prop::collection::vec(prop::collection::vec(-3i32..3, 3), 1..40),
        test in prop::collection::vec(prop::collection::vec(-3i32..3, 3), 1..10),
    ) {
        // small integer coordinates force many exact distance ties
        let train: Vec<Vec<f64>> = train.iter().map(|p| p.iter().map(|&v| v as f64).collect()).collect();
        let test: Vec<Vec<f64>> = test.iter().map(|p| p.iter().map(|&v| v as f64).collect()).collect();
        let labels: Vec<usize> = (0..train.len()).collect();
        let got = knn_classify(&train, &labels, &test, 1).unwrap();
        for (q, g) in test.iter().zip(&got) {
            prop_assert_eq!(*g, oracle(&train, &labels, q));
        }
    }
}
