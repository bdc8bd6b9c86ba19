//! The distillation loop.
//!
//! Each outer step visits every class: it samples `k` real anchors of the
//! class, embeds them with the current feature network, estimates the
//! class statistics, embeds the class's synthetic block on a tape and
//! descends `J` (or the mean-matching distance for the DM baseline) with
//! momentum SGD on the pixels. Pixels are clamped to the dataset's
//! normalized range after every update.
//!
//! All randomness is derived from `(seed, purpose, step, class)`, so a run
//! resumed from a snapshot continues bit-exactly.

use std::fs;
use std::path::Path;

use rand::seq::index;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::data::{write_atomic, Dataset, Provenance, SyntheticSet};
use crate::error::{Error, Result};
use crate::featurenet::{FeatureNet, FeatureNetConfig, Head};
use crate::losses::{self, LossConfig};
use crate::optim::OptimizerState;
use crate::rng::{self, derive_seed};
use crate::tensor::{Tape, Tensor};

const INIT_STREAM: u64 = 1;
const STEP_STREAM: u64 = 2;
const REFRESH_STREAM: u64 = 3;
const NET_TRAIN_STREAM: u64 = 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Bacon,
    Dm,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::Bacon => "bacon",
            Method::Dm => "dm",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UpdateMode {
    /// Each class block is updated right after its own backward pass.
    PerClass,
    /// One backward pass over the summed class objectives, then one update.
    Joint,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DistillConfig {
    pub method: Method,
    pub ipc: usize,
    pub outer_steps: usize,
    pub anchors_per_class: usize,
    pub image_lr: f64,
    pub image_momentum: f64,
    /// Redraw the feature network every this many steps; 0 keeps the
    /// initial network for the whole run.
    pub model_refresh_interval: usize,
    /// SGD steps on real data after each redraw.
    pub net_train_steps: usize,
    pub net_batch: usize,
    /// Architecture template; input shape and classes come from the data.
    pub net: FeatureNetConfig,
    /// Which network output is matched.
    pub head: Head,
    pub loss: LossConfig,
    pub update_mode: UpdateMode,
    /// Drop anchors whose embedding lies farther than this from the
    /// synthetic block's mean embedding (the nearest one is always kept).
    pub anchor_filter_epsilon: Option<f64>,
    pub seed: u64,
    /// Save a snapshot every this many steps; 0 disables.
    pub snapshot_every: usize,
}

impl DistillConfig {
    /// Full-scale settings: 20000 steps, 256 anchors, 128-channel convnet.
    pub fn paper(ipc: usize) -> Self {
        DistillConfig {
            method: Method::Bacon,
            ipc,
            outer_steps: 20_000,
            anchors_per_class: 256,
            image_lr: 0.2,
            image_momentum: 0.5,
            model_refresh_interval: 1,
            net_train_steps: 0,
            net_batch: 256,
            net: FeatureNetConfig::convnet(1, 28, 28, 10),
            head: Head::Embedding,
            loss: LossConfig::default(),
            update_mode: UpdateMode::PerClass,
            anchor_filter_epsilon: None,
            seed: 0,
            snapshot_every: 0,
        }
    }

    /// CPU-sized settings: 2000 steps, 64 anchors, 32-channel convnet.
    pub fn desk(ipc: usize) -> Self {
        DistillConfig {
            outer_steps: 2000,
            anchors_per_class: 64,
            net: FeatureNetConfig::desk_convnet(1, 28, 28, 10),
            ..DistillConfig::paper(ipc)
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(m.into()));
        if self.ipc == 0 {
            return bad("ipc must be at least 1");
        }
        if self.outer_steps == 0 {
            return bad("outer_steps must be at least 1");
        }
        if self.anchors_per_class == 0 {
            return bad("anchors_per_class must be at least 1");
        }
        if !(self.image_lr >= 0.0) || !self.image_lr.is_finite() {
            return bad("image_lr must be finite and non-negative");
        }
        if !(0.0..1.0).contains(&self.image_momentum) {
            return bad("image_momentum must lie in [0, 1)");
        }
        if self.net_train_steps > 0 && self.net_batch == 0 {
            return bad("net_batch must be at least 1");
        }
        if let Some(e) = self.anchor_filter_epsilon {
            if !(e > 0.0) {
                return bad("anchor_filter_epsilon must be positive");
            }
        }
        if self.method == Method::Bacon {
            self.loss.validate()?;
        }
        Ok(())
    }

    fn net_config(&self, real: &Dataset) -> FeatureNetConfig {
        let [c, h, w] = real.image_shape();
        let mut cfg = self.net.clone().with_input(c, h, w);
        cfg.classes = real.classes();
        cfg
    }
}

/// Copies `ipc` distinct real images of every class.
pub fn init_synthetic(real: &Dataset, ipc: usize, seed: u64) -> Result<SyntheticSet> {
    if ipc == 0 {
        return Err(Error::InvalidConfig("ipc must be at least 1".into()));
    }
    let mut rows = Vec::with_capacity(real.classes() * ipc);
    for c in 0..real.classes() {
        let idx = real.class_indices(c)?;
        if idx.len() < ipc {
            return Err(Error::InsufficientClassExamples {
                class: c,
                available: idx.len(),
                required: ipc,
            });
        }
        let mut r = rng::stream(seed, &[INIT_STREAM, c as u64]);
        rows.extend(index::sample(&mut r, idx.len(), ipc).into_iter().map(|i| idx[i]));
    }
    let provenance = Provenance {
        method: "init".into(),
        seed,
        source: source_id(real),
    };
    SyntheticSet::new(real.gather(&rows)?, real.classes(), ipc, provenance)
}

pub(crate) fn source_id(real: &Dataset) -> String {
    format!("{}:{}", real.name(), &real.digest()[..16])
}

/// Row indices of `k` uniform draws from one class: without replacement
/// when the class is large enough, with replacement otherwise.
pub fn sample_anchor_indices(real: &Dataset, class: usize, k: usize, r: &mut rng::Rng) -> Result<Vec<usize>> {
    let idx = real.class_indices(class)?;
    if idx.is_empty() {
        return Err(Error::InsufficientClassExamples {
            class,
            available: 0,
            required: 1,
        });
    }
    Ok(if k <= idx.len() {
        index::sample(r, idx.len(), k).into_iter().map(|i| idx[i]).collect()
    } else {
        (0..k).map(|_| idx[r.random_range(0..idx.len())]).collect()
    })
}

/// Samples `k` real images of `class` and embeds them with `net`.
pub fn sample_anchors(
    real: &Dataset,
    class: usize,
    k: usize,
    net: &FeatureNet,
    head: Head,
    seed: u64,
) -> Result<(Tensor, Tensor)> {
    let mut r = rng::rng_from(seed);
    let rows = sample_anchor_indices(real, class, k, &mut r)?;
    let images = real.gather(&rows)?;
    let emb = net.infer(&images, head)?;
    Ok((images, emb))
}

/// Keeps anchors within `eps` of `centre`, or the single nearest one.
fn filter_anchors(anchors: &Tensor, centre: &[f64], eps: f64) -> Result<Tensor> {
    let dist: Vec<f64> = (0..anchors.rows())
        .map(|i| {
            anchors
                .row(i)
                .iter()
                .zip(centre)
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt()
        })
        .collect();
    let mut keep: Vec<usize> = (0..dist.len()).filter(|&i| dist[i] <= eps).collect();
    if keep.is_empty() {
        let nearest = (0..dist.len())
            .min_by(|&a, &b| dist[a].total_cmp(&dist[b]))
            .expect("at least one anchor");
        keep.push(nearest);
    }
    anchors.select_rows(&keep)
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StepReport {
    pub step: usize,
    /// Objective averaged over classes.
    pub loss: f64,
    pub lh: Option<f64>,
    pub tv: Option<f64>,
    pub clip: Option<f64>,
    /// L2 norm of the full pixel gradient.
    pub grad_norm: f64,
}

struct ClassOutcome {
    loss: f64,
    lh: Option<f64>,
    tv: Option<f64>,
    clip: Option<f64>,
    grad: Tensor,
}

fn class_objective(
    syn_block: &Tensor,
    real: &Dataset,
    net: &FeatureNet,
    cfg: &DistillConfig,
    class: usize,
    step: usize,
) -> Result<ClassOutcome> {
    let (_, anchors) = sample_anchors(
        real,
        class,
        cfg.anchors_per_class,
        net,
        cfg.head,
        derive_seed(cfg.seed, &[STEP_STREAM, step as u64, class as u64]),
    )?;
    let mut tape = Tape::new();
    let x = tape.leaf(syn_block.clone());
    let z = net.forward(&mut tape, x, cfg.head, false)?.output;
    let anchors = match cfg.anchor_filter_epsilon {
        Some(eps) => filter_anchors(&anchors, &tape.value(z).column_means(), eps)?,
        None => anchors,
    };
    let (total, lh, tv, clip) = match cfg.method {
        Method::Bacon => {
            let stats = losses::estimate_class_stats(class, &anchors, &cfg.loss)?;
            let vars = losses::loss_total(&mut tape, z, &stats, &anchors, &cfg.loss)?;
            let b = vars.values(&tape);
            (vars.total, b.lh, b.tv, b.clip)
        }
        Method::Dm => {
            let l = losses::loss_dm(&mut tape, z, &anchors.column_means())?;
            (l, None, None, None)
        }
    };
    let loss = tape.value(total).item()?;
    tape.backward(total)?;
    let grad = tape
        .grad(x)
        .cloned()
        .unwrap_or_else(|| Tensor::zeros(syn_block.shape()));
    Ok(ClassOutcome {
        loss,
        lh,
        tv,
        clip,
        grad,
    })
}

fn mean_opt(values: impl Iterator<Item = Option<f64>>, n: usize) -> Option<f64> {
    let v: Option<Vec<f64>> = values.collect();
    v.map(|v| v.iter().sum::<f64>() / n as f64)
}

/// One outer step over every class. `opts` holds one pixel optimizer per
/// class in per-class mode, or a single one in joint mode.
pub fn distill_step(
    syn: &mut SyntheticSet,
    real: &Dataset,
    net: &FeatureNet,
    cfg: &DistillConfig,
    opts: &mut [OptimizerState],
    step: usize,
) -> Result<StepReport> {
    let classes = syn.classes();
    if real.classes() != classes || real.image_shape() != syn.image_shape() {
        return Err(Error::ShapeMismatch(format!(
            "synthetic set {:?} × {classes} classes vs real {:?} × {}",
            syn.image_shape(),
            real.image_shape(),
            real.classes()
        )));
    }
    let expected = match cfg.update_mode {
        UpdateMode::PerClass => classes,
        UpdateMode::Joint => 1,
    };
    if opts.len() != expected {
        return Err(Error::ShapeMismatch(format!(
            "{} pixel optimizers, {expected} expected",
            opts.len()
        )));
    }
    let mut outcomes = Vec::with_capacity(classes);
    for c in 0..classes {
        let block = syn.class_block(c)?;
        let out = class_objective(&block, real, net, cfg, c, step)?;
        if cfg.update_mode == UpdateMode::PerClass {
            let mut updated = block;
            opts[c].step(&mut [updated.data_mut()], &[out.grad.data()])?;
            syn.set_class_block(c, &updated)?;
        }
        outcomes.push(out);
    }
    if cfg.update_mode == UpdateMode::Joint {
        let grads: Vec<&Tensor> = outcomes.iter().map(|o| &o.grad).collect();
        let full = Tensor::concat_rows(&grads)?;
        let mut images = syn.images().clone();
        opts[0].step(&mut [images.data_mut()], &[full.data()])?;
        for c in 0..classes {
            let rows: Vec<usize> = syn.class_rows(c).collect();
            syn.set_class_block(c, &images.select_rows(&rows)?)?;
        }
    }
    syn.clamp(real.bounds());
    let grad_norm = outcomes
        .iter()
        .map(|o| o.grad.data().iter().map(|g| g * g).sum::<f64>())
        .sum::<f64>()
        .sqrt();
    Ok(StepReport {
        step,
        loss: outcomes.iter().map(|o| o.loss).sum::<f64>() / classes as f64,
        lh: mean_opt(outcomes.iter().map(|o| o.lh), classes),
        tv: mean_opt(outcomes.iter().map(|o| o.tv), classes),
        clip: mean_opt(outcomes.iter().map(|o| o.clip), classes),
        grad_norm,
    })
}

/// Everything needed to resume a run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Snapshot {
    /// Index of the next step to run.
    pub next_step: usize,
    pub classes: usize,
    pub ipc: usize,
    pub image_shape: [usize; 3],
    pub images: Vec<f64>,
    pub provenance: Provenance,
    pub pixel_optimizers: Vec<OptimizerState>,
    pub net_optimizer: OptimizerState,
    pub net_seed: u64,
    pub net_params: Vec<(String, Vec<usize>, Vec<f64>)>,
    pub history: Vec<StepReport>,
}

impl Snapshot {
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        write_atomic(path, &serde_json::to_vec(self)?)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Ok(serde_json::from_slice(&fs::read(path)?)?)
    }
}

/// A distillation run in progress.
pub struct Distiller<'a> {
    real: &'a Dataset,
    cfg: DistillConfig,
    net: FeatureNet,
    net_opt: OptimizerState,
    syn: SyntheticSet,
    opts: Vec<OptimizerState>,
    next_step: usize,
    history: Vec<StepReport>,
}

impl<'a> Distiller<'a> {
    pub fn new(real: &'a Dataset, cfg: DistillConfig) -> Result<Self> {
        cfg.validate()?;
        let mut syn = init_synthetic(real, cfg.ipc, cfg.seed)?;
        syn.provenance.method = cfg.method.name().into();
        let net = FeatureNet::new(cfg.net_config(real))?;
        let opts = Self::fresh_optimizers(&cfg, real.classes());
        Ok(Distiller {
            real,
            net,
            net_opt: OptimizerState::network_default(),
            syn,
            opts,
            next_step: 0,
            history: Vec::new(),
            cfg,
        })
    }

    fn fresh_optimizers(cfg: &DistillConfig, classes: usize) -> Vec<OptimizerState> {
        let n = match cfg.update_mode {
            UpdateMode::PerClass => classes,
            UpdateMode::Joint => 1,
        };
        vec![OptimizerState::new(cfg.image_lr, cfg.image_momentum, 0.0); n]
    }

    pub fn from_snapshot(real: &'a Dataset, cfg: DistillConfig, snap: Snapshot) -> Result<Self> {
        let mut d = Distiller::new(real, cfg)?;
        if snap.classes != real.classes() || snap.ipc != d.cfg.ipc || snap.image_shape != real.image_shape() {
            return Err(Error::ShapeMismatch("snapshot does not match the dataset and config".into()));
        }
        let [c, h, w] = snap.image_shape;
        let images = Tensor::new(vec![snap.classes * snap.ipc, c, h, w], snap.images)?;
        d.syn = SyntheticSet::new(images, snap.classes, snap.ipc, snap.provenance)?;
        if snap.pixel_optimizers.len() != d.opts.len() {
            return Err(Error::CountMismatch("snapshot pixel optimizers".into()));
        }
        d.opts = snap.pixel_optimizers;
        d.net_opt = snap.net_optimizer;
        d.net.reinit(snap.net_seed);
        let named = snap
            .net_params
            .into_iter()
            .map(|(n, s, v)| Ok((n, Tensor::new(s, v)?)))
            .collect::<Result<Vec<_>>>()?;
        d.net.set_params(named)?;
        d.next_step = snap.next_step;
        d.history = snap.history;
        Ok(d)
    }

    pub fn snapshot(&self) -> Snapshot {
        Snapshot {
            next_step: self.next_step,
            classes: self.syn.classes(),
            ipc: self.syn.ipc(),
            image_shape: self.syn.image_shape(),
            images: self.syn.images().data().to_vec(),
            provenance: self.syn.provenance.clone(),
            pixel_optimizers: self.opts.clone(),
            net_optimizer: self.net_opt.clone(),
            net_seed: self.net.seed(),
            net_params: self
                .net
                .param_names()
                .iter()
                .zip(self.net.params())
                .map(|(n, t)| (n.clone(), t.shape().to_vec(), t.data().to_vec()))
                .collect(),
            history: self.history.clone(),
        }
    }

    pub fn config(&self) -> &DistillConfig {
        &self.cfg
    }

    pub fn synthetic(&self) -> &SyntheticSet {
        &self.syn
    }

    pub fn net(&self) -> &FeatureNet {
        &self.net
    }

    pub fn history(&self) -> &[StepReport] {
        &self.history
    }

    pub fn next_step(&self) -> usize {
        self.next_step
    }

    pub fn is_done(&self) -> bool {
        self.next_step >= self.cfg.outer_steps
    }

    fn refresh_net(&mut self, step: usize) -> Result<()> {
        let interval = self.cfg.model_refresh_interval;
        let due = if interval == 0 { step == 0 } else { step % interval == 0 };
        if !due {
            return Ok(());
        }
        let round = if interval == 0 { 0 } else { step / interval };
        self.net.reinit(derive_seed(self.cfg.seed, &[REFRESH_STREAM, round as u64]));
        self.net_opt = OptimizerState::network_default();
        for i in 0..self.cfg.net_train_steps {
            let mut r = rng::stream(self.cfg.seed, &[NET_TRAIN_STREAM, round as u64, i as u64]);
            let b = self.cfg.net_batch.min(self.real.len());
            let rows: Vec<usize> = index::sample(&mut r, self.real.len(), b).into_vec();
            let images = self.real.gather(&rows)?;
            let labels: Vec<usize> = rows.iter().map(|&i| self.real.labels()[i]).collect();
            self.net.train_step(&images, &labels, &mut self.net_opt)?;
        }
        Ok(())
    }

    /// Runs the next outer step.
    pub fn step(&mut self) -> Result<StepReport> {
        let step = self.next_step;
        self.refresh_net(step)?;
        let report = distill_step(&mut self.syn, self.real, &self.net, &self.cfg, &mut self.opts, step)?;
        self.next_step += 1;
        self.history.push(report.clone());
        Ok(report)
    }

    /// Runs to completion, calling `on_step` after every step and
    /// `on_snapshot` every `snapshot_every` steps.
    pub fn run_with(
        &mut self,
        mut on_step: impl FnMut(&StepReport) -> Result<()>,
        mut on_snapshot: impl FnMut(&Snapshot) -> Result<()>,
    ) -> Result<()> {
        while !self.is_done() {
            let report = self.step()?;
            on_step(&report)?;
            let every = self.cfg.snapshot_every;
            if every > 0 && self.next_step % every == 0 {
                on_snapshot(&self.snapshot())?;
            }
        }
        Ok(())
    }

    pub fn into_parts(self) -> (SyntheticSet, Vec<StepReport>) {
        (self.syn, self.history)
    }
}

/// Initializes and runs `outer_steps` steps.
pub fn run_distillation(real: &Dataset, cfg: &DistillConfig) -> Result<(SyntheticSet, Vec<StepReport>)> {
    let mut d = Distiller::new(real, cfg.clone())?;
    d.run_with(|_| Ok(()), |_| Ok(()))?;
    Ok(d.into_parts())
}
