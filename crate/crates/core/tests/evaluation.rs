//! Evaluation sanity: chance-level controls and a herding oracle.

use bacon_core::data::blobs::{make_blobs, BlobSpec};
use bacon_core::eval::{evaluate_labeled, herding_order, EvalConfig};
use bacon_core::featurenet::FeatureNetConfig;
use bacon_core::rng;
use bacon_core::tensor::Tensor;
use rand::seq::SliceRandom;
use rand::Rng;

fn eval_cfg(lr: f64, seeds: usize) -> EvalConfig {
    EvalConfig {
        seeds,
        epochs: 30,
        batch_size: 32,
        lr,
        classifier: FeatureNetConfig::mlp(16, vec![32], 10),
        ..EvalConfig::paper()
    }
}

#[test]
fn untrained_classifier_sits_at_chance() {
    let (train, test) = make_blobs(&BlobSpec::default()).unwrap();
    let rep = evaluate_labeled(train.images(), train.labels(), &test, &eval_cfg(0.0, 10)).unwrap();
    assert!((rep.mean - 0.1).abs() <= 0.1, "{:?}", rep.accuracies);
}

#[test]
fn shuffled_labels_give_chance_accuracy() {
    let (train, test) = make_blobs(&BlobSpec::default()).unwrap();
    let cfg = eval_cfg(0.01, 3);
    let real = evaluate_labeled(train.images(), train.labels(), &test, &cfg).unwrap();
    let mut labels = train.labels().to_vec();
    labels.shuffle(&mut rng::rng_from(1));
    let shuffled = evaluate_labeled(train.images(), &labels, &test, &cfg).unwrap();
    assert!(real.mean > 0.8, "true labels: {}", real.mean);
    assert!(shuffled.mean < 0.25, "shuffled labels: {}", shuffled.mean);
}

fn oracle_herding(pts: &[[f64; 2]], count: usize) -> Vec<usize> {
    let n = pts.len() as f64;
    let mu = [
        pts.iter().map(|p| p[0]).sum::<f64>() / n,
        pts.iter().map(|p| p[1]).sum::<f64>() / n,
    ];
    let mut chosen: Vec<usize> = Vec::new();
    for _ in 0..count {
        let mut best = usize::MAX;
        let mut best_d = f64::INFINITY;
        for cand in 0..pts.len() {
            if chosen.contains(&cand) {
                continue;
            }
            let mut s = [0.0, 0.0];
            for &i in chosen.iter().chain(std::iter::once(&cand)) {
                s[0] += pts[i][0];
                s[1] += pts[i][1];
            }
            let m = (chosen.len() + 1) as f64;
            let d = (s[0] / m - mu[0]).powi(2) + (s[1] / m - mu[1]).powi(2);
            if d < best_d {
                best_d = d;
                best = cand;
            }
        }
        chosen.push(best);
    }
    chosen
}

#[test]
fn herding_matches_brute_force() {
    let mut r = rng::rng_from(11);
    for _ in 0..50 {
        let pts: Vec<[f64; 2]> = (0..20)
            .map(|_| [r.random_range(-3.0..3.0), r.random_range(-3.0..3.0)])
            .collect();
        let emb = Tensor::new(vec![20, 2], pts.iter().flatten().copied().collect()).unwrap();
        for count in [1, 5, 20] {
            assert_eq!(herding_order(&emb, count).unwrap(), oracle_herding(&pts, count));
        }
    }
}
