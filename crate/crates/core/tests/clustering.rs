use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use mojidistill::eval::{cluster_classes, prediction_correlation, Dendrogram, PredictionSet};
use mojidistill::synthetic::{group_of, grouped_predictions};

/// Eight classes split over three latent groups of uneven size (3, 3, 2).
fn eight_in_three(n: usize, seed: u64) -> PredictionSet {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut probs = Array2::<f64>::zeros((n, 8));
    for mut row in probs.rows_mut() {
        let shared: Vec<f64> = (0..3).map(|_| StandardNormal.sample(&mut rng)).collect();
        for c in 0..8 {
            let own: f64 = StandardNormal.sample(&mut rng);
            row[c] = (2.0 * shared[c % 3] + 0.5 * own).exp();
        }
        let s = row.sum();
        row /= s;
    }
    PredictionSet::new(probs, vec![0; n]).unwrap()
}

/// True when no within-group merge comes after a cross-group one.
fn within_first(tree: &Dendrogram, group: impl Fn(usize) -> usize) -> bool {
    let mut crossed = false;
    for m in &tree.merges {
        let groups: Vec<usize> = tree.members(m.node).into_iter().map(&group).collect();
        let mixed = groups.iter().any(|&g| g != groups[0]);
        if mixed {
            crossed = true;
        } else if crossed {
            return false;
        }
    }
    true
}

#[test]
fn uneven_groups_merge_within_first() {
    for seed in 0..10 {
        let preds = eight_in_three(3000, seed);
        let tree = cluster_classes(prediction_correlation(&preds).unwrap().view()).unwrap();
        assert!(tree.is_monotone(), "seed {seed}");
        assert!(within_first(&tree, |c| c % 3), "seed {seed}");
        assert_eq!(tree.merges.len(), 7);
    }
}

#[test]
fn equal_groups_merge_within_first() {
    for seed in 0..5 {
        let preds = grouped_predictions(4, 3, 3000, seed);
        let tree = cluster_classes(prediction_correlation(&preds).unwrap().view()).unwrap();
        assert!(within_first(&tree, |c| group_of(c, 4)), "seed {seed}");
    }
}

#[test]
fn leaf_order_keeps_groups_contiguous() {
    let preds = eight_in_three(3000, 11);
    let tree = cluster_classes(prediction_correlation(&preds).unwrap().view()).unwrap();
    let order: Vec<usize> = tree.leaf_order().into_iter().map(|c| c % 3).collect();
    let switches = order.windows(2).filter(|w| w[0] != w[1]).count();
    assert_eq!(switches, 2, "{order:?}");
}
