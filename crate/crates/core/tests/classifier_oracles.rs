mod common;

use common::*;
use proptest::prelude::*;
use stutter_probe::classifiers::{GaussianNbModel, KnnModel};
use stutter_probe::{Label, Matrix, SeededRng, LABELS, NUM_CLASSES};

fn m(rows: &Rows) -> Matrix {
    Matrix::from_rows(rows).unwrap()
}

#[test]
fn gaussian_posteriors_match_the_density_product() {
    let (x, y) = gaussian_classes(300, 6, 1.5, 21);
    let model = GaussianNbModel::fit(&m(&x), &y).unwrap();
    let mut rng = SeededRng::new(4);
    for _ in 0..100 {
        let c = rng.below(NUM_CLASSES);
        let q: Vec<f64> = model.means[c].iter().map(|v| v + 1.5 * rng.normal()).collect();
        let got = model.predict(&q).unwrap();
        let want = gaussian_posterior(&model.means, &model.variances, &model.priors, &model.present, &q);
        for k in 0..NUM_CLASSES {
            assert!((got.scores.values[k] - want[k]).abs() <= 1e-9);
        }
        assert!((got.scores.sum() - 1.0).abs() <= 1e-12);
    }
}

#[test]
fn gaussian_fit_matches_two_pass_moments() {
    let (x, y) = gaussian_classes(250, 4, 3.0, 2);
    let model = GaussianNbModel::fit(&m(&x), &y).unwrap();
    let (means, vars, priors) = class_moments(&x, &y);
    for c in 0..NUM_CLASSES {
        assert_eq!(model.priors[c], priors[c]);
        for j in 0..4 {
            assert!((model.means[c][j] - means[c][j]).abs() < 1e-12);
            assert!((model.variances[c][j] - vars[c][j]).abs() < 1e-12);
        }
    }
}

#[test]
fn absent_class_never_wins() {
    let (x, y) = gaussian_classes(200, 4, 2.0, 6);
    let keep: Vec<usize> = (0..200).filter(|&i| y[i] != Label::Block).collect();
    let xs: Rows = keep.iter().map(|&i| x[i].clone()).collect();
    let ys: Vec<Label> = keep.iter().map(|&i| y[i]).collect();
    let model = GaussianNbModel::fit(&m(&xs), &ys).unwrap();
    for q in &x {
        let p = model.predict(q).unwrap();
        assert_eq!(p.scores.get(Label::Block), 0.0);
        assert_ne!(p.label, Label::Block);
    }
}

#[test]
fn knn_matches_full_scan_on_a_tie_heavy_grid() {
    let mut rng = SeededRng::new(77);
    let train: Rows = (0..200).map(|_| vec![rng.below(5) as f64, rng.below(5) as f64]).collect();
    let labels: Vec<Label> = (0..200).map(|_| LABELS[rng.below(NUM_CLASSES)]).collect();
    for p in [1.0, 2.0, 3.0] {
        let model = KnnModel::fit(m(&train), labels.clone(), 5, p).unwrap();
        for _ in 0..50 {
            let q = vec![rng.below(9) as f64 * 0.5, rng.below(9) as f64 * 0.5];
            assert_eq!(model.predict(&q).unwrap().label, knn_full_scan(&train, &labels, &q, 5, p), "{:?} p={}", q, p);
        }
    }
}

#[test]
fn knn_vote_tie_goes_to_the_closer_class() {
    // Two R votes at distance 1 and 3, two P votes at 2 and 1.5, one B.
    let train: Rows = vec![vec![1.0], vec![3.0], vec![-2.0], vec![-1.5], vec![-4.0]];
    let labels = vec![Label::Repetition, Label::Repetition, Label::Prolongation, Label::Prolongation, Label::Block];
    let model = KnnModel::fit(m(&train), labels.clone(), 5, 2.0).unwrap();
    assert_eq!(model.predict(&[0.0]).unwrap().label, Label::Prolongation);
    assert_eq!(knn_full_scan(&train, &labels, &[0.0], 5, 2.0), Label::Prolongation);
}

#[test]
fn knn_equal_votes_and_distances_fall_back_to_label_order() {
    let train: Rows = vec![vec![1.0], vec![-1.0]];
    let model = KnnModel::fit(m(&train), vec![Label::Fluent, Label::Interjection], 2, 2.0).unwrap();
    assert_eq!(model.predict(&[0.0]).unwrap().label, Label::Interjection);
}

#[test]
fn knn_boundary_distance_tie_keeps_the_lower_index() {
    let train: Rows = vec![vec![0.0], vec![1.0], vec![-1.0]];
    let labels = vec![Label::Fluent, Label::Block, Label::Repetition];
    let model = KnnModel::fit(m(&train), labels, 2, 2.0).unwrap();
    let nn: Vec<usize> = model.neighbors(&[0.0]).unwrap().iter().map(|n| n.1).collect();
    assert_eq!(nn, vec![0, 1]);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn knn_agrees_with_full_scan(seed in 0u64..100_000, k in 1usize..8) {
        let (x, y) = gaussian_classes(60, 3, 1.0, seed);
        let model = KnnModel::fit(m(&x), y.clone(), k, 2.0).unwrap();
        let mut rng = SeededRng::new(seed ^ 0x5a5a);
        for _ in 0..10 {
            let q: Vec<f64> = (0..3).map(|_| 2.0 * rng.normal()).collect();
            prop_assert_eq!(model.predict(&q).unwrap().label, knn_full_scan(&x, &y, &q, k, 2.0));
        }
    }

    #[test]
    fn gaussian_posteriors_always_normalize(seed in 0u64..100_000) {
        let (x, y) = gaussian_classes(80, 3, 1.0, seed);
        let model = GaussianNbModel::fit(&m(&x), &y).unwrap();
        let mut rng = SeededRng::new(seed);
        for _ in 0..10 {
            let q: Vec<f64> = (0..3).map(|_| 20.0 * rng.normal()).collect();
            let s = model.predict(&q).unwrap().scores;
            prop_assert!((s.sum() - 1.0).abs() <= 1e-12);
            prop_assert!(s.values.iter().all(|v| v.is_finite() && *v >= 0.0));
        }
    }
}
