//! Independent scalar-loop oracles and instance generators shared by the
//! integration tests and the acceptance harness.

#![allow(dead_code)]

use bacon_core::losses::{LossConfig, Pairing, SigmaPolicy};
use bacon_core::tensor::Tensor;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_matrix(r: &mut ChaCha8Rng, rows: usize, cols: usize, scale: f64) -> Vec<Vec<f64>> {
    (0..rows)
        .map(|_| (0..cols).map(|_| r.random_range(-scale..scale)).collect())
        .collect()
}

pub fn tensor(rows: &[Vec<f64>]) -> Tensor {
    Tensor::from_rows(rows).unwrap()
}

/// Per-dimension sigma from anchors, by loops.
pub fn oracle_sigma(anchors: &[Vec<f64>], cfg: &LossConfig) -> Vec<f64> {
    let k = anchors.len() as f64;
    let n = anchors[0].len();
    let mut mean = vec![0.0; n];
    for a in anchors {
        for d in 0..n {
            mean[d] += a[d];
        }
    }
    for m in &mut mean {
        *m /= k;
    }
    let mut std = vec![0.0; n];
    for d in 0..n {
        let mut s = 0.0;
        for a in anchors {
            s += (a[d] - mean[d]) * (a[d] - mean[d]);
        }
        std[d] = (s / k).sqrt();
    }
    match cfg.sigma_policy {
        SigmaPolicy::PerDimension => std.iter().map(|s| s.max(cfg.sigma_floor)).collect(),
        SigmaPolicy::PerClassScalar => {
            let s = (std.iter().sum::<f64>() / n as f64).max(cfg.sigma_floor);
            vec![s; n]
        }
    }
}

pub fn oracle_mean(anchors: &[Vec<f64>]) -> Vec<f64> {
    let n = anchors[0].len();
    let mut mean = vec![0.0; n];
    for a in anchors {
        for d in 0..n {
            mean[d] += a[d] / anchors.len() as f64;
        }
    }
    mean
}

fn targets(anchors: &[Vec<f64>], pairing: Pairing) -> Vec<Vec<f64>> {
    match pairing {
        Pairing::AnchorMean => vec![oracle_mean(anchors)],
        Pairing::Pairwise => anchors.to_vec(),
    }
}

pub fn oracle_lh(z: &[Vec<f64>], anchors: &[Vec<f64>], cfg: &LossConfig) -> f64 {
    let sigma = oracle_sigma(anchors, cfg);
    let t = targets(anchors, cfg.pairing);
    let n = sigma.len();
    let mut total = 0.0;
    let mut count = 0.0;
    for zi in z {
        for tj in &t {
            for d in 0..n {
                let c = -0.5 * (2.0 * std::f64::consts::PI * sigma[d]).ln();
                let u = (zi[d] - tj[d]) / sigma[d];
                total += c - 0.5 * u * u;
                count += 1.0;
            }
        }
    }
    total / count
}

pub fn oracle_tv(z: &[Vec<f64>], anchors: &[Vec<f64>]) -> f64 {
    let mut total = 0.0;
    let mut count = 0.0;
    for zi in z {
        for a in anchors {
            for d in 0..zi.len() {
                total += 0.5 * (zi[d] - a[d]).abs();
                count += 1.0;
            }
        }
    }
    total / count
}

pub fn oracle_clip(z: &[Vec<f64>], anchors: &[Vec<f64>], cfg: &LossConfig) -> f64 {
    let sigma = oracle_sigma(anchors, cfg);
    let t = targets(anchors, cfg.pairing);
    let mut total = 0.0;
    let mut count = 0.0;
    for zi in z {
        for tj in &t {
            for d in 0..sigma.len() {
                let u = (zi[d] - tj[d]) / sigma[d];
                let c = if u < 0.0 {
                    0.0
                } else if u > 1.0 {
                    1.0
                } else {
                    u
                };
                total += (u - c) * (u - c);
                count += 1.0;
            }
        }
    }
    total / count
}

pub fn random_loss_config(r: &mut ChaCha8Rng) -> LossConfig {
    LossConfig {
        lambda: r.random_range(0.0..=1.0),
        sigma_policy: if r.random_bool(0.5) {
            SigmaPolicy::PerClassScalar
        } else {
            SigmaPolicy::PerDimension
        },
        pairing: if r.random_bool(0.5) {
            Pairing::AnchorMean
        } else {
            Pairing::Pairwise
        },
        ..LossConfig::default()
    }
}

pub fn close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol * b.abs().max(1.0)
}
