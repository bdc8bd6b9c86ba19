//! Matching objectives between synthetic and real embeddings.
//!
//! For a class with real anchor embeddings `z_1..z_k` (rows of a `k × N`
//! tensor) and synthetic embeddings `z*` (rows of `M × N`):
//!
//! * likelihood `LH = -1/2 log(2 pi sigma) - ||z* - z||^2 / (2 sigma^2)`
//! * total variation `TV = 1/2 |z* - z|_1`
//! * clip penalty `CLIP = (u - clip01(u))^2` with `u = (z* - z) / sigma`
//!
//! Norms are averaged over embedding dimensions and over (synthetic,
//! anchor) pairings. `LH` is compared against the anchor mean unless
//! pairwise mode is selected; `TV` is averaged over every anchor unless
//! switched to the anchor mean.
//!
//! The minimized objective is `J = -LH + lambda TV + (1 - lambda) CLIP`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SigmaPolicy {
    PerClassScalar,
    PerDimension,
}

/// What each synthetic embedding is compared against.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pairing {
    AnchorMean,
    Pairwise,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub lambda: f64,
    pub enable_lh: bool,
    pub enable_tv: bool,
    pub enable_clip: bool,
    pub sigma_policy: SigmaPolicy,
    pub sigma_floor: f64,
    /// Pairing for the likelihood and clip terms.
    pub pairing: Pairing,
    /// Pairing for the total-variation term.
    pub tv_pairing: Pairing,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            lambda: 0.8,
            enable_lh: true,
            enable_tv: true,
            enable_clip: true,
            sigma_policy: SigmaPolicy::PerClassScalar,
            sigma_floor: 1e-6,
            pairing: Pairing::AnchorMean,
            tv_pairing: Pairing::Pairwise,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(Error::InvalidConfig(format!("lambda {} outside [0, 1]", self.lambda)));
        }
        if !(self.sigma_floor > 0.0) {
            return Err(Error::InvalidConfig(format!("sigma_floor {} must be positive", self.sigma_floor)));
        }
        if !(self.enable_lh || self.enable_tv || self.enable_clip) {
            return Err(Error::AllTermsDisabled);
        }
        Ok(())
    }

    pub fn with_terms(mut self, lh: bool, tv: bool, clip: bool) -> Self {
        self.enable_lh = lh;
        self.enable_tv = tv;
        self.enable_clip = clip;
        self
    }

    pub fn with_lambda(mut self, lambda: f64) -> Self {
        self.lambda = lambda;
        self
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum Sigma {
    Scalar(f64),
    PerDimension(Vec<f64>),
}

impl Sigma {
    /// Per-dimension values, broadcasting a scalar to `n` entries.
    pub fn per_dimension(&self, n: usize) -> Vec<f64> {
        match self {
            Sigma::Scalar(s) => vec![*s; n],
            Sigma::PerDimension(v) => v.clone(),
        }
    }
}

/// Gaussian summary of one class's sampled real embeddings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassStats {
    pub class: usize,
    pub sigma: Sigma,
    pub mean: Vec<f64>,
    pub count: usize,
}

impl ClassStats {
    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    fn mean_row(&self) -> Tensor {
        Tensor::from_parts(vec![1, self.mean.len()], self.mean.clone())
    }
}

/// Column mean and population standard deviation (divisor k), floored.
pub fn estimate_class_stats(class: usize, real: &Tensor, cfg: &LossConfig) -> Result<ClassStats> {
    if real.rank() != 2 {
        return Err(Error::ShapeMismatch(format!("expected k × N embeddings, got {:?}", real.shape())));
    }
    let k = real.rows();
    if k == 0 {
        return Err(Error::EmptyBatch);
    }
    let mean = real.column_means();
    let n = mean.len();
    let mut var = vec![0.0; n];
    for r in 0..k {
        for ((v, x), m) in var.iter_mut().zip(real.row(r)).zip(&mean) {
            *v += (x - m) * (x - m);
        }
    }
    let std: Vec<f64> = var.iter().map(|v| (v / k as f64).sqrt()).collect();
    let sigma = match cfg.sigma_policy {
        SigmaPolicy::PerClassScalar => {
            let s = std.iter().sum::<f64>() / n as f64;
            Sigma::Scalar(s.max(cfg.sigma_floor))
        }
        SigmaPolicy::PerDimension => Sigma::PerDimension(std.iter().map(|s| s.max(cfg.sigma_floor)).collect()),
    };
    Ok(ClassStats {
        class,
        sigma,
        mean,
        count: k,
    })
}

fn check_dims(tape: &Tape, z_syn: Var, n: usize) -> Result<()> {
    let s = tape.value(z_syn).shape();
    if s.len() != 2 || s[1] != n {
        return Err(Error::ShapeMismatch(format!("synthetic embeddings {s:?}, anchors have N = {n}")));
    }
    Ok(())
}

/// `(z* - z) / sigma` for every pairing, shaped `[M, P, N]`.
fn normalized_residual(tape: &mut Tape, z_syn: Var, stats: &ClassStats, anchors: Option<&Tensor>) -> Result<Var> {
    check_dims(tape, z_syn, stats.dim())?;
    let targets = match anchors {
        Some(a) => {
            if a.rank() != 2 || a.shape()[1] != stats.dim() {
                return Err(Error::ShapeMismatch(format!("anchors {:?} vs N = {}", a.shape(), stats.dim())));
            }
            tape.constant(a.clone())
        }
        None => tape.constant(stats.mean_row()),
    };
    let diff = tape.pairwise_diff(z_syn, targets)?;
    match &stats.sigma {
        Sigma::Scalar(s) => Ok(tape.scale(diff, 1.0 / s)),
        Sigma::PerDimension(v) => {
            let inv: Vec<f64> = v.iter().map(|s| 1.0 / s).collect();
            tape.mul_last_dim(diff, &inv)
        }
    }
}

/// Gaussian log-likelihood term (larger is better). `anchors = None`
/// compares against the anchor mean, otherwise against every anchor.
pub fn loss_lh(tape: &mut Tape, z_syn: Var, stats: &ClassStats, anchors: Option<&Tensor>) -> Result<Var> {
    let u = normalized_residual(tape, z_syn, stats, anchors)?;
    let sq = tape.square(u);
    let q = tape.mean(sq);
    let n = stats.dim();
    let log_term = -0.5
        * stats
            .sigma
            .per_dimension(n)
            .iter()
            .map(|s| (2.0 * std::f64::consts::PI * s).ln())
            .sum::<f64>()
        / n as f64;
    let half = tape.scale(q, -0.5);
    Ok(tape.offset(half, log_term))
}

/// Half the mean absolute difference over every (synthetic, anchor) pair.
pub fn loss_tv(tape: &mut Tape, z_syn: Var, anchors: &Tensor) -> Result<Var> {
    if anchors.rank() != 2 {
        return Err(Error::ShapeMismatch(format!("anchors {:?}", anchors.shape())));
    }
    check_dims(tape, z_syn, anchors.shape()[1])?;
    let a = tape.constant(anchors.clone());
    let diff = tape.pairwise_diff(z_syn, a)?;
    let abs = tape.abs(diff);
    let m = tape.mean(abs);
    Ok(tape.scale(m, 0.5))
}

/// Mean squared distance of normalized residuals from `[0, 1]`.
pub fn loss_clip(tape: &mut Tape, z_syn: Var, stats: &ClassStats, anchors: Option<&Tensor>) -> Result<Var> {
    let u = normalized_residual(tape, z_syn, stats, anchors)?;
    let clipped = tape.clip01(u);
    let r = tape.sub(u, clipped)?;
    let sq = tape.square(r);
    Ok(tape.mean(sq))
}

/// Tape handles for the objective and each enabled term.
#[derive(Clone, Copy, Debug)]
pub struct LossVars {
    pub total: Var,
    pub lh: Option<Var>,
    pub tv: Option<Var>,
    pub clip: Option<Var>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub total: f64,
    pub lh: Option<f64>,
    pub tv: Option<f64>,
    pub clip: Option<f64>,
}

impl LossVars {
    pub fn values(&self, tape: &Tape) -> LossBreakdown {
        let get = |v: Var| tape.value(v).data()[0];
        LossBreakdown {
            total: get(self.total),
            lh: self.lh.map(get),
            tv: self.tv.map(get),
            clip: self.clip.map(get),
        }
    }
}

/// `J = -LH + lambda TV + (1 - lambda) CLIP` over the enabled terms.
pub fn loss_total(
    tape: &mut Tape,
    z_syn: Var,
    stats: &ClassStats,
    anchors: &Tensor,
    cfg: &LossConfig,
) -> Result<LossVars> {
    cfg.validate()?;
    let pick = |p: Pairing| match p {
        Pairing::AnchorMean => None,
        Pairing::Pairwise => Some(anchors),
    };
    let lh = cfg.enable_lh.then(|| loss_lh(tape, z_syn, stats, pick(cfg.pairing))).transpose()?;
    let tv = if cfg.enable_tv {
        Some(match cfg.tv_pairing {
            Pairing::Pairwise => loss_tv(tape, z_syn, anchors)?,
            Pairing::AnchorMean => loss_tv(tape, z_syn, &stats.mean_row())?,
        })
    } else {
        None
    };
    let clip = cfg
        .enable_clip
        .then(|| loss_clip(tape, z_syn, stats, pick(cfg.pairing)))
        .transpose()?;
    let mut parts = Vec::new();
    if let Some(v) = lh {
        parts.push(tape.scale(v, -1.0));
    }
    if let Some(v) = tv {
        parts.push(tape.scale(v, cfg.lambda));
    }
    if let Some(v) = clip {
        parts.push(tape.scale(v, 1.0 - cfg.lambda));
    }
    let mut total = parts[0];
    for &p in &parts[1..] {
        total = tape.add(total, p)?;
    }
    Ok(LossVars { total, lh, tv, clip })
}

/// Squared Euclidean distance between the synthetic mean embedding and a
/// fixed real mean embedding.
pub fn loss_dm(tape: &mut Tape, z_syn: Var, real_mean: &[f64]) -> Result<Var> {
    check_dims(tape, z_syn, real_mean.len())?;
    let m = tape.reduce(crate::tensor::Reduce::Mean, z_syn, Some(&[0]))?;
    let target = tape.constant(Tensor::from_vec(real_mean.to_vec()));
    let d = tape.sub(m, target)?;
    let sq = tape.square(d);
    Ok(tape.sum(sq))
}

/// Plain-value distribution-matching distance between two mean vectors.
pub fn dm_distance(syn_mean: &[f64], real_mean: &[f64]) -> Result<f64> {
    if syn_mean.len() != real_mean.len() {
        return Err(Error::ShapeMismatch(format!(
            "means of length {} and {}",
            syn_mean.len(),
            real_mean.len()
        )));
    }
    Ok(syn_mean.iter().zip(real_mean).map(|(a, b)| (a - b) * (a - b)).sum())
}

/// Evaluates every enabled term on plain tensors.
pub fn evaluate_terms(z_syn: &Tensor, anchors: &Tensor, class: usize, cfg: &LossConfig) -> Result<LossBreakdown> {
    let stats = estimate_class_stats(class, anchors, cfg)?;
    let mut tape = Tape::new();
    tape.set_recording(false);
    let z = tape.constant(z_syn.clone());
    Ok(loss_total(&mut tape, z, &stats, anchors, cfg)?.values(&tape))
}
