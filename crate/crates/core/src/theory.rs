//! Monte-Carlo estimates of the expected risk
//! `R = P(||z_x - z_syn||_2 >= eps)` under a user-specified joint model
//! of real and synthetic embeddings, computed two ways:
//!
//! * directly, by averaging the indicator over joint draws;
//! * through the ball decomposition `R = 1 - E_syn[ P(z_x in B(z_syn, eps) | z_syn) ]`,
//!   estimating the inner probability from conditional draws.
//!
//! Work is split into fixed-size chunks, each with its own RNG stream,
//! and chunk results are reduced in chunk order, so estimates do not
//! depend on the thread count.

use std::fs;
use std::path::Path;

use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{self, Rng};
use crate::tensor::Tensor;

const CHUNK: usize = 2048;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabeledEmbedding {
    #[serde(default)]
    pub label: Option<usize>,
    pub embedding: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PointPair {
    pub real: Vec<f64>,
    pub synthetic: Vec<f64>,
}

/// Joint model of `(z_x, z_syn)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DistributionSpec {
    /// `z_x ~ N(mu_real 1, sigma_real^2 I)` independent of
    /// `z_syn ~ N(mu_syn 1, sigma_syn^2 I)`.
    IndependentGaussians {
        mu_real: f64,
        sigma_real: f64,
        mu_syn: f64,
        sigma_syn: f64,
        dim: usize,
    },
    /// Uniform over the listed `(z_x, z_syn)` pairs.
    PointMasses { pairs: Vec<PointPair> },
    /// Class-conditional empirical embeddings. With labels on every row
    /// the joint is `sum_c p(c) p(z_x | c) p(z_syn | c)` with `p(c)` taken
    /// from the synthetic rows; without labels the two sides are
    /// independent and no conditional is available.
    Empirical {
        real: Vec<LabeledEmbedding>,
        synthetic: Vec<LabeledEmbedding>,
    },
}

impl DistributionSpec {
    pub fn unit_gaussians(dim: usize) -> Self {
        DistributionSpec::IndependentGaussians {
            mu_real: 0.0,
            sigma_real: 1.0,
            mu_syn: 0.0,
            sigma_syn: 1.0,
            dim,
        }
    }

    /// Reads an `{"real": [...], "synthetic": [...]}` embedding file.
    pub fn empirical_from_json(path: impl AsRef<Path>) -> Result<Self> {
        #[derive(Deserialize)]
        struct File {
            real: Vec<LabeledEmbedding>,
            synthetic: Vec<LabeledEmbedding>,
        }
        let f: File = serde_json::from_slice(&fs::read(path)?)
            .map_err(|e| Error::BadDistributionSpec(format!("embedding file: {e}")))?;
        let spec = DistributionSpec::Empirical {
            real: f.real,
            synthetic: f.synthetic,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn dim(&self) -> usize {
        match self {
            DistributionSpec::IndependentGaussians { dim, .. } => *dim,
            DistributionSpec::PointMasses { pairs } => pairs.first().map_or(0, |p| p.real.len()),
            DistributionSpec::Empirical { real, .. } => real.first().map_or(0, |e| e.embedding.len()),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::BadDistributionSpec(m));
        match self {
            DistributionSpec::IndependentGaussians {
                mu_real,
                sigma_real,
                mu_syn,
                sigma_syn,
                dim,
            } => {
                if *dim == 0 {
                    return bad("dim must be at least 1".into());
                }
                if ![mu_real, mu_syn].iter().all(|m| m.is_finite()) {
                    return bad("means must be finite".into());
                }
                if ![sigma_real, sigma_syn].iter().all(|s| s.is_finite() && **s >= 0.0) {
                    return bad("standard deviations must be finite and non-negative".into());
                }
            }
            DistributionSpec::PointMasses { pairs } => {
                if pairs.is_empty() {
                    return bad("no point masses".into());
                }
                let d = pairs[0].real.len();
                if d == 0 || pairs.iter().any(|p| p.real.len() != d || p.synthetic.len() != d) {
                    return bad("point masses must share one nonzero dimension".into());
                }
            }
            DistributionSpec::Empirical { real, synthetic } => {
                if real.is_empty() || synthetic.is_empty() {
                    return bad("empirical spec needs real and synthetic rows".into());
                }
                let d = real[0].embedding.len();
                if d == 0 || real.iter().chain(synthetic).any(|e| e.embedding.len() != d) {
                    return bad("embeddings must share one nonzero dimension".into());
                }
                if self.is_paired() {
                    for s in synthetic {
                        let c = s.label.expect("paired");
                        if !real.iter().any(|r| r.label == Some(c)) {
                            return bad(format!("class {c} has synthetic rows but no real rows"));
                        }
                    }
                }
            }
        }
        Ok(())
    }

    fn is_paired(&self) -> bool {
        match self {
            DistributionSpec::Empirical { real, synthetic } => {
                real.iter().chain(synthetic).all(|e| e.label.is_some())
            }
            _ => true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RiskConfig {
    pub epsilon: f64,
    pub mc_samples: usize,
    /// Conditional draws per outer sample in the decomposition estimator.
    pub inner_samples: usize,
    pub seed: u64,
    pub spec: DistributionSpec,
}

impl RiskConfig {
    pub fn new(spec: DistributionSpec, epsilon: f64, mc_samples: usize, seed: u64) -> Self {
        RiskConfig {
            epsilon,
            mc_samples,
            inner_samples: 16,
            seed,
            spec,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon > 0.0) || !self.epsilon.is_finite() {
            return Err(Error::InvalidConfig(format!("epsilon {} must be positive", self.epsilon)));
        }
        if self.mc_samples < 100 {
            return Err(Error::InvalidConfig(format!("mc_samples {} below 100", self.mc_samples)));
        }
        if self.inner_samples == 0 {
            return Err(Error::InvalidConfig("inner_samples must be at least 1".into()));
        }
        self.spec.validate()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RiskMethod {
    Direct,
    Theorem1,
}

/// One risk estimate; serializes to `{method, epsilon, value, stderr, n, seed}`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RiskEstimate {
    pub method: RiskMethod,
    pub epsilon: f64,
    pub value: f64,
    pub stderr: f64,
    pub n: usize,
    pub seed: u64,
}

impl RiskEstimate {
    /// `|a - b| <= k * sqrt(se_a^2 + se_b^2)`.
    pub fn agrees_with(&self, other: &RiskEstimate, k: f64) -> bool {
        let tol = k * (self.stderr.powi(2) + other.stderr.powi(2)).sqrt();
        (self.value - other.value).abs() <= tol
    }
}

fn distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// `1` when `||z_x - z_syn||_2 >= eps`, else `0`.
pub fn indicator_loss(z_x: &[f64], z_syn: &[f64], epsilon: f64) -> Result<u8> {
    if z_x.len() != z_syn.len() {
        return Err(Error::DimMismatch {
            left: z_x.len(),
            right: z_syn.len(),
        });
    }
    if !(epsilon > 0.0) {
        return Err(Error::InvalidConfig(format!("epsilon {epsilon} must be positive")));
    }
    Ok((distance(z_x, z_syn) >= epsilon) as u8)
}

/// Ball membership, boundary included.
fn in_ball(z: &[f64], centre: &[f64], epsilon: f64) -> bool {
    distance(z, centre) <= epsilon
}

fn fill_gaussian(out: &mut [f64], mu: f64, sigma: f64, r: &mut Rng) {
    for v in out {
        let e: f64 = StandardNormal.sample(r);
        *v = mu + sigma * e;
    }
}

fn chunk_lengths(n: usize) -> Vec<(u64, usize)> {
    (0..n.div_ceil(CHUNK))
        .map(|i| (i as u64, CHUNK.min(n - i * CHUNK)))
        .collect()
}

/// Empirical rows grouped by class, for the paired case.
struct Grouped<'a> {
    synthetic: &'a [LabeledEmbedding],
    real_by_class: Vec<Vec<&'a [f64]>>,
}

impl<'a> Grouped<'a> {
    fn new(real: &'a [LabeledEmbedding], synthetic: &'a [LabeledEmbedding]) -> Self {
        let classes = real
            .iter()
            .chain(synthetic)
            .filter_map(|e| e.label)
            .max()
            .map_or(0, |m| m + 1);
        let mut real_by_class = vec![Vec::new(); classes];
        for r in real {
            real_by_class[r.label.expect("paired")].push(r.embedding.as_slice());
        }
        Grouped {
            synthetic,
            real_by_class,
        }
    }
}

/// Averages the indicator over `mc_samples` joint draws.
pub fn estimate_risk_direct(cfg: &RiskConfig) -> Result<RiskEstimate> {
    cfg.validate()?;
    let eps = cfg.epsilon;
    let (outside, n) = match &cfg.spec {
        DistributionSpec::PointMasses { pairs } => {
            let out = pairs.iter().filter(|p| distance(&p.real, &p.synthetic) >= eps).count();
            (out, pairs.len())
        }
        DistributionSpec::IndependentGaussians {
            mu_real,
            sigma_real,
            mu_syn,
            sigma_syn,
            dim,
        } => {
            let counts: Vec<usize> = chunk_lengths(cfg.mc_samples)
                .into_par_iter()
                .map(|(id, len)| {
                    let mut r = rng::stream(cfg.seed, &[0, id]);
                    let (mut x, mut s) = (vec![0.0; *dim], vec![0.0; *dim]);
                    let mut count = 0;
                    for _ in 0..len {
                        fill_gaussian(&mut x, *mu_real, *sigma_real, &mut r);
                        fill_gaussian(&mut s, *mu_syn, *sigma_syn, &mut r);
                        count += (distance(&x, &s) >= eps) as usize;
                    }
                    count
                })
                .collect();
            (counts.iter().sum(), cfg.mc_samples)
        }
        DistributionSpec::Empirical { real, synthetic } => {
            let paired = cfg.spec.is_paired();
            let grouped = paired.then(|| Grouped::new(real, synthetic));
            let counts: Vec<usize> = chunk_lengths(cfg.mc_samples)
                .into_par_iter()
                .map(|(id, len)| {
                    let mut r = rng::stream(cfg.seed, &[0, id]);
                    let mut count = 0;
                    for _ in 0..len {
                        let s = &synthetic[r.random_range(0..synthetic.len())];
                        let x = match &grouped {
                            Some(g) => {
                                let pool = &g.real_by_class[s.label.expect("paired")];
                                pool[r.random_range(0..pool.len())]
                            }
                            None => real[r.random_range(0..real.len())].embedding.as_slice(),
                        };
                        count += (distance(x, &s.embedding) >= eps) as usize;
                    }
                    count
                })
                .collect();
            (counts.iter().sum(), cfg.mc_samples)
        }
    };
    let p = outside as f64 / n as f64;
    let stderr = match cfg.spec {
        DistributionSpec::PointMasses { .. } => 0.0,
        _ => (p * (1.0 - p) / n as f64).sqrt(),
    };
    Ok(RiskEstimate {
        method: RiskMethod::Direct,
        epsilon: eps,
        value: p,
        stderr,
        n,
        seed: cfg.seed,
    })
}

/// `1 - E_syn[P(z_x in B(z_syn, eps) | z_syn)]`, with the inner
/// probability estimated from `inner_samples` conditional draws per
/// outer draw (enumerated exactly for discrete specs).
pub fn estimate_risk_theorem1(cfg: &RiskConfig) -> Result<RiskEstimate> {
    cfg.validate()?;
    let eps = cfg.epsilon;
    let finish = |value: f64, stderr: f64, n: usize| RiskEstimate {
        method: RiskMethod::Theorem1,
        epsilon: eps,
        value,
        stderr,
        n,
        seed: cfg.seed,
    };
    // Per-chunk (sum f, sum f^2) of the inner fractions.
    let moments: Vec<(f64, f64)> = match &cfg.spec {
        DistributionSpec::PointMasses { pairs } => {
            // Group pairs by synthetic point; inside counts are integers, so
            // the result matches the direct count exactly.
            let mut inside = 0usize;
            let mut seen: Vec<&[f64]> = Vec::new();
            for p in pairs {
                if seen.contains(&p.synthetic.as_slice()) {
                    continue;
                }
                seen.push(&p.synthetic);
                inside += pairs
                    .iter()
                    .filter(|q| q.synthetic == p.synthetic && in_ball(&q.real, &q.synthetic, eps))
                    .count();
            }
            let n = pairs.len();
            return Ok(finish((n - inside) as f64 / n as f64, 0.0, n));
        }
        DistributionSpec::IndependentGaussians {
            mu_real,
            sigma_real,
            mu_syn,
            sigma_syn,
            dim,
        } => chunk_lengths(cfg.mc_samples)
            .into_par_iter()
            .map(|(id, len)| {
                let mut r = rng::stream(cfg.seed, &[1, id]);
                let (mut x, mut s) = (vec![0.0; *dim], vec![0.0; *dim]);
                let (mut s1, mut s2) = (0.0, 0.0);
                for _ in 0..len {
                    fill_gaussian(&mut s, *mu_syn, *sigma_syn, &mut r);
                    let mut hits = 0;
                    for _ in 0..cfg.inner_samples {
                        fill_gaussian(&mut x, *mu_real, *sigma_real, &mut r);
                        hits += in_ball(&x, &s, eps) as usize;
                    }
                    let f = hits as f64 / cfg.inner_samples as f64;
                    s1 += f;
                    s2 += f * f;
                }
                (s1, s2)
            })
            .collect(),
        DistributionSpec::Empirical { real, synthetic } => {
            if !cfg.spec.is_paired() {
                return Err(Error::ConditionalUnavailable(
                    "empirical embeddings carry no class labels to pair on".into(),
                ));
            }
            let g = Grouped::new(real, synthetic);
            chunk_lengths(cfg.mc_samples)
                .into_par_iter()
                .map(|(id, len)| {
                    let mut r = rng::stream(cfg.seed, &[1, id]);
                    let (mut s1, mut s2) = (0.0, 0.0);
                    for _ in 0..len {
                        let s = &g.synthetic[r.random_range(0..g.synthetic.len())];
                        let pool = &g.real_by_class[s.label.expect("paired")];
                        let hits = pool.iter().filter(|x| in_ball(x, &s.embedding, eps)).count();
                        let f = hits as f64 / pool.len() as f64;
                        s1 += f;
                        s2 += f * f;
                    }
                    (s1, s2)
                })
                .collect()
        }
    };
    let n = cfg.mc_samples;
    let (s1, s2) = moments.iter().fold((0.0, 0.0), |(a, b), (x, y)| (a + x, b + y));
    let mean = s1 / n as f64;
    let var = ((s2 - n as f64 * mean * mean) / (n - 1) as f64).max(0.0);
    Ok(finish((1.0 - mean).clamp(0.0, 1.0), (var / n as f64).sqrt(), n))
}

/// `(log(mean(p)), mean(log(p)))`; the first is never smaller.
pub fn jensen_gap(p_values: &[f64]) -> Result<(f64, f64)> {
    if p_values.is_empty() {
        return Err(Error::EmptyBatch);
    }
    if let Some((index, &value)) = p_values.iter().enumerate().find(|(_, v)| !(**v > 0.0)) {
        return Err(Error::NonPositiveValue { index, value });
    }
    let k = p_values.len() as f64;
    let lhs = (p_values.iter().sum::<f64>() / k).ln();
    let rhs = p_values.iter().map(|p| p.ln()).sum::<f64>() / k;
    Ok((lhs, rhs))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SurrogateCheck {
    pub best_exact: usize,
    pub best_surrogate: usize,
}

impl SurrogateCheck {
    pub fn coincide(&self) -> bool {
        self.best_exact == self.best_surrogate
    }
}

fn argmax_first(scores: impl Iterator<Item = f64>) -> usize {
    let mut best = (0, f64::NEG_INFINITY);
    for (i, s) in scores.enumerate() {
        if s > best.1 {
            best = (i, s);
        }
    }
    best.0
}

/// Grid argmax of the mean Gaussian likelihood `sum_i N(z; a_i, sigma^2 I) / k`
/// and of the mean log-likelihood `sum_i log N(z; a_i, sigma^2 I) / k`.
/// Ties go to the earliest candidate.
pub fn argmax_surrogate_check(anchors: &Tensor, sigma: f64, grid: &[Vec<f64>]) -> Result<SurrogateCheck> {
    if grid.is_empty() {
        return Err(Error::EmptyGrid);
    }
    if !(sigma > 0.0) {
        return Err(Error::InvalidConfig(format!("sigma {sigma} must be positive")));
    }
    if anchors.rank() != 2 || anchors.rows() == 0 {
        return Err(Error::ShapeMismatch(format!("anchors {:?}", anchors.shape())));
    }
    let n = anchors.shape()[1];
    if let Some(g) = grid.iter().find(|g| g.len() != n) {
        return Err(Error::DimMismatch { left: g.len(), right: n });
    }
    // Log-densities without the shared normalizing constant.
    let logs: Vec<Vec<f64>> = grid
        .iter()
        .map(|z| {
            (0..anchors.rows())
                .map(|i| -distance(z, anchors.row(i)).powi(2) / (2.0 * sigma * sigma))
                .collect()
        })
        .collect();
    let exact = logs.iter().map(|l| {
        let m = l.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        m + l.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
    });
    let best_exact = argmax_first(exact);
    let best_surrogate = argmax_first(logs.iter().map(|l| l.iter().sum::<f64>()));
    Ok(SurrogateCheck {
        best_exact,
        best_surrogate,
    })
}

/// Fraction of random instances on which the two argmaxes coincide.
/// Each instance draws `k` anchors and a grid of `grid_size` candidates
/// from a standard Gaussian in `dim` dimensions.
pub fn surrogate_coincidence_rate(instances: usize, k: usize, dim: usize, grid_size: usize, sigma: f64, seed: u64) -> Result<f64> {
    if instances == 0 {
        return Err(Error::EmptyBatch);
    }
    let mut hits = 0;
    for i in 0..instances {
        let mut r = rng::stream(seed, &[i as u64]);
        let mut draw = |len: usize| {
            let mut v = vec![0.0; len];
            fill_gaussian(&mut v, 0.0, 1.0, &mut r);
            v
        };
        let anchors = Tensor::new(vec![k, dim], draw(k * dim))?;
        let grid: Vec<Vec<f64>> = (0..grid_size).map(|_| draw(dim)).collect();
        hits += argmax_surrogate_check(&anchors, sigma, &grid)?.coincide() as usize;
    }
    Ok(hits as f64 / instances as f64)
}
