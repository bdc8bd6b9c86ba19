//! Downstream evaluation: train fresh classifiers on a condensed set and
//! measure top-1 accuracy on a real test split, over several seeds. Also
//! the Random and Herding coreset baselines and the ablation grid runner.

use std::io::Write;
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{sha256_hex, write_atomic, Dataset, Provenance, SyntheticSet};
use crate::distill::{self, run_distillation, DistillConfig};
use crate::error::{Error, Result};
use crate::featurenet::{FeatureNet, FeatureNetConfig, Head};
use crate::losses::LossConfig;
use crate::optim::OptimizerState;
use crate::rng::{self, derive_seed};
use crate::tensor::Tensor;

const EVAL_STREAM: u64 = 11;
const SHUFFLE_STREAM: u64 = 12;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    pub seeds: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Classifier template; input shape and classes come from the data.
    pub classifier: FeatureNetConfig,
    pub seed: u64,
}

impl EvalConfig {
    pub fn paper() -> Self {
        EvalConfig {
            seeds: 5,
            epochs: 1000,
            batch_size: 256,
            lr: 0.01,
            momentum: 0.9,
            weight_decay: 5e-4,
            classifier: FeatureNetConfig::convnet(1, 28, 28, 10),
            seed: 0,
        }
    }

    pub fn desk() -> Self {
        EvalConfig {
            epochs: 100,
            classifier: FeatureNetConfig::desk_convnet(1, 28, 28, 10),
            ..EvalConfig::paper()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.seeds == 0 {
            return Err(Error::InvalidConfig("seeds must be at least 1".into()));
        }
        if self.epochs == 0 {
            return Err(Error::InvalidConfig("epochs must be at least 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidConfig("batch_size must be at least 1".into()));
        }
        if !(self.lr >= 0.0) {
            return Err(Error::InvalidConfig("lr must be non-negative".into()));
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON form.
    pub fn digest(&self) -> String {
        sha256_hex(&serde_json::to_vec(self).expect("config serializes"))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub accuracies: Vec<f64>,
    pub mean: f64,
    /// Population standard deviation over seeds.
    pub std: f64,
    pub config_digest: String,
    pub wall_time_s: f64,
}

impl EvalReport {
    pub fn from_accuracies(accuracies: Vec<f64>, config_digest: String, wall_time_s: f64) -> Self {
        let n = accuracies.len() as f64;
        let mean = accuracies.iter().sum::<f64>() / n;
        let std = (accuracies.iter().map(|a| (a - mean) * (a - mean)).sum::<f64>() / n).sqrt();
        EvalReport {
            accuracies,
            mean,
            std,
            config_digest,
            wall_time_s,
        }
    }
}

/// Top-1 accuracy of `net` on `test`; ties go to the lowest class.
pub fn accuracy(net: &FeatureNet, test: &Dataset) -> Result<f64> {
    let logits = net.infer_chunked(test.images(), Head::Logits, 512)?;
    let correct = (0..logits.rows())
        .filter(|&i| {
            let row = logits.row(i);
            let mut best = 0;
            for (j, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = j;
                }
            }
            best == test.labels()[i]
        })
        .count();
    Ok(correct as f64 / test.len() as f64)
}

/// Trains one classifier from scratch on `(images, labels)`.
pub fn train_classifier(
    images: &Tensor,
    labels: &[usize],
    net_cfg: FeatureNetConfig,
    cfg: &EvalConfig,
    seed: u64,
) -> Result<FeatureNet> {
    let mut net = FeatureNet::new(FeatureNetConfig { seed, ..net_cfg })?;
    let mut opt = OptimizerState::new(cfg.lr, cfg.momentum, cfg.weight_decay);
    let n = images.rows();
    let mut order: Vec<usize> = (0..n).collect();
    for epoch in 0..cfg.epochs {
        let mut r = rng::stream(seed, &[SHUFFLE_STREAM, epoch as u64]);
        order.shuffle(&mut r);
        for chunk in order.chunks(cfg.batch_size) {
            let batch = images.select_rows(chunk)?;
            let y: Vec<usize> = chunk.iter().map(|&i| labels[i]).collect();
            net.train_step(&batch, &y, &mut opt)?;
        }
    }
    Ok(net)
}

/// Evaluates arbitrary labeled images, e.g. a label-shuffled set.
pub fn evaluate_labeled(images: &Tensor, labels: &[usize], test: &Dataset, cfg: &EvalConfig) -> Result<EvalReport> {
    cfg.validate()?;
    if images.rank() != 4 || images.shape()[1..] != test.image_shape() {
        return Err(Error::ShapeMismatch(format!(
            "training images {:?} vs test images {:?}",
            images.shape(),
            test.image_shape()
        )));
    }
    if labels.len() != images.rows() {
        return Err(Error::CountMismatch(format!("{} images, {} labels", images.rows(), labels.len())));
    }
    if let Some(&label) = labels.iter().find(|&&l| l >= test.classes()) {
        return Err(Error::LabelOutOfRange {
            label,
            classes: test.classes(),
        });
    }
    let start = Instant::now();
    let [c, h, w] = test.image_shape();
    let mut net_cfg = cfg.classifier.clone().with_input(c, h, w);
    net_cfg.classes = test.classes();
    let accuracies = (0..cfg.seeds)
        .into_par_iter()
        .map(|i| {
            let seed = derive_seed(cfg.seed, &[EVAL_STREAM, i as u64]);
            let net = train_classifier(images, labels, net_cfg.clone(), cfg, seed)?;
            accuracy(&net, test)
        })
        .collect::<Result<Vec<f64>>>()?;
    Ok(EvalReport::from_accuracies(
        accuracies,
        cfg.digest(),
        start.elapsed().as_secs_f64(),
    ))
}

pub fn evaluate(set: &SyntheticSet, test: &Dataset, cfg: &EvalConfig) -> Result<EvalReport> {
    if set.classes() != test.classes() {
        return Err(Error::ShapeMismatch(format!(
            "synthetic set has {} classes, test split {}",
            set.classes(),
            test.classes()
        )));
    }
    evaluate_labeled(set.images(), set.labels(), test, cfg)
}

/// `ipc` uniformly chosen real images per class.
pub fn coreset_random(real: &Dataset, ipc: usize, seed: u64) -> Result<SyntheticSet> {
    let mut set = distill::init_synthetic(real, ipc, seed)?;
    set.provenance.method = "random".into();
    Ok(set)
}

/// Greedy herding order for one class: at each step the row whose
/// addition brings the running mean closest to the full mean. Returns
/// positions into `emb`; ties go to the smaller position.
pub fn herding_order(emb: &Tensor, count: usize) -> Result<Vec<usize>> {
    let n = emb.rows();
    if count > n {
        return Err(Error::InsufficientClassExamples {
            class: 0,
            available: n,
            required: count,
        });
    }
    let mean = emb.column_means();
    let d = mean.len();
    let mut sum = vec![0.0; d];
    let mut taken = vec![false; n];
    let mut order = Vec::with_capacity(count);
    for t in 0..count {
        let denom = (t + 1) as f64;
        let mut best: Option<(usize, f64)> = None;
        for i in (0..n).filter(|&i| !taken[i]) {
            let dist: f64 = emb
                .row(i)
                .iter()
                .zip(&sum)
                .zip(&mean)
                .map(|((e, s), m)| {
                    let v = (s + e) / denom - m;
                    v * v
                })
                .sum();
            if best.is_none_or(|(_, b)| dist < b) {
                best = Some((i, dist));
            }
        }
        let (i, _) = best.expect("rows remain");
        taken[i] = true;
        for (s, e) in sum.iter_mut().zip(emb.row(i)) {
            *s += e;
        }
        order.push(i);
    }
    Ok(order)
}

/// Herding in the embedding space of `net`.
pub fn coreset_herding(real: &Dataset, ipc: usize, net: &FeatureNet) -> Result<SyntheticSet> {
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
        let emb = net.infer_chunked(&real.gather(idx)?, Head::Embedding, 512)?;
        rows.extend(herding_order(&emb, ipc)?.into_iter().map(|p| idx[p]));
    }
    let provenance = Provenance {
        method: "herding".into(),
        seed: net.seed(),
        source: distill::source_id(real),
    };
    SyntheticSet::new(real.gather(&rows)?, real.classes(), ipc, provenance)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationCell {
    pub id: String,
    pub loss: LossConfig,
}

/// The seven non-empty subsets of {LH, TV, CLIP}.
pub fn loss_term_cells(base: &LossConfig) -> Vec<AblationCell> {
    let mut cells = Vec::new();
    for mask in 1u8..8 {
        let (lh, tv, clip) = (mask & 1 != 0, mask & 2 != 0, mask & 4 != 0);
        let mut name = Vec::new();
        if lh {
            name.push("lh");
        }
        if tv {
            name.push("tv");
        }
        if clip {
            name.push("clip");
        }
        cells.push(AblationCell {
            id: name.join("+"),
            loss: base.clone().with_terms(lh, tv, clip),
        });
    }
    cells
}

pub fn lambda_cells(base: &LossConfig, values: &[f64]) -> Vec<AblationCell> {
    values
        .iter()
        .map(|&l| AblationCell {
            id: format!("lambda={l}"),
            loss: base.clone().with_lambda(l),
        })
        .collect()
}

/// Parses `start:stop:step` (inclusive) or a comma list.
pub fn parse_grid_values(spec: &str) -> Result<Vec<f64>> {
    let num = |s: &str| {
        s.trim()
            .parse::<f64>()
            .map_err(|e| Error::InvalidConfig(format!("grid value {s:?}: {e}")))
    };
    let parts: Vec<&str> = spec.split(':').collect();
    match parts.len() {
        1 => spec.split(',').map(num).collect(),
        3 => {
            let (lo, hi, step) = (num(parts[0])?, num(parts[1])?, num(parts[2])?);
            if !(step > 0.0) || hi < lo {
                return Err(Error::InvalidConfig(format!("bad range {spec:?}")));
            }
            let n = ((hi - lo) / step + 1e-9).floor() as usize + 1;
            Ok((0..n)
                .map(|i| ((lo + i as f64 * step) * 1e12).round() / 1e12)
                .collect())
        }
        _ => Err(Error::InvalidConfig(format!("bad grid {spec:?}"))),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub cell_id: String,
    pub lh: bool,
    pub tv: bool,
    pub clip: bool,
    pub lambda: f64,
    pub report: Option<EvalReport>,
    pub error: Option<String>,
}

/// Distills with the cell's loss settings and evaluates the result.
/// Failures are recorded in the row.
pub fn run_cell(
    real: &Dataset,
    test: &Dataset,
    cell: &AblationCell,
    base: &DistillConfig,
    eval: &EvalConfig,
) -> AblationRow {
    let cfg = DistillConfig {
        loss: cell.loss.clone(),
        ..base.clone()
    };
    let result = run_distillation(real, &cfg).and_then(|(set, _)| evaluate(&set, test, eval));
    let (report, error) = match result {
        Ok(r) => (Some(r), None),
        Err(e) => (None, Some(format!("{}: {e}", e.kind()))),
    };
    AblationRow {
        cell_id: cell.id.clone(),
        lh: cell.loss.enable_lh,
        tv: cell.loss.enable_tv,
        clip: cell.loss.enable_clip,
        lambda: cell.loss.lambda,
        report,
        error,
    }
}

/// Runs every cell, in parallel, returning rows in cell order.
pub fn ablation_grid(
    real: &Dataset,
    test: &Dataset,
    cells: &[AblationCell],
    base: &DistillConfig,
    eval: &EvalConfig,
) -> Result<Vec<AblationRow>> {
    if cells.is_empty() {
        return Err(Error::EmptyGrid);
    }
    Ok(cells.par_iter().map(|c| run_cell(real, test, c, base, eval)).collect())
}

pub const CSV_HEADER: [&str; 9] = ["cell_id", "lh", "tv", "clip", "lambda", "mean", "std", "seeds", "error"];

pub fn rows_to_csv(rows: &[AblationRow]) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let io = |e: csv::Error| Error::Io(std::io::Error::other(e));
    w.write_record(CSV_HEADER).map_err(io)?;
    for r in rows {
        let (mean, std, seeds) = match &r.report {
            Some(rep) => (rep.mean.to_string(), rep.std.to_string(), rep.accuracies.len().to_string()),
            None => (String::new(), String::new(), "0".into()),
        };
        w.write_record([
            r.cell_id.clone(),
            r.lh.to_string(),
            r.tv.to_string(),
            r.clip.to_string(),
            r.lambda.to_string(),
            mean,
            std,
            seeds,
            r.error.clone().unwrap_or_default(),
        ])
        .map_err(io)?;
    }
    let mut bytes = w.into_inner().map_err(|e| Error::Io(std::io::Error::other(e.to_string())))?;
    bytes.flush()?;
    Ok(bytes)
}

pub fn write_csv(rows: &[AblationRow], path: impl AsRef<Path>) -> Result<()> {
    write_atomic(path, &rows_to_csv(rows)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::blobs::{make_blobs, BlobSpec};

    fn blobs() -> (Dataset, Dataset) {
        make_blobs(&BlobSpec {
            classes: 4,
            train_per_class: 10,
            test_per_class: 25,
            shape: [1, 2, 2],
            separation: 8.0,
            seed: 1,
        })
        .unwrap()
    }

    fn mlp_eval(epochs: usize) -> EvalConfig {
        EvalConfig {
            seeds: 3,
            epochs,
            batch_size: 16,
            classifier: FeatureNetConfig::mlp(4, vec![16], 4),
            ..EvalConfig::paper()
        }
    }

    #[test]
    fn memorizes_separable_copy() {
        let (train, _) = blobs();
        let set = coreset_random(&train, 10, 0).unwrap();
        let test = Dataset::from_raw(
            "copy",
            crate::data::Split::Test,
            set.images().clone(),
            set.labels().to_vec(),
            4,
            Some(&crate::data::Normalization::identity(1)),
            crate::data::RawRange::Observed,
        )
        .unwrap();
        let cfg = EvalConfig {
            lr: 0.05,
            ..mlp_eval(200)
        };
        let rep = evaluate(&set, &test, &cfg).unwrap();
        assert_eq!(rep.mean, 1.0);
        assert_eq!(rep.accuracies.len(), 3);
    }

    #[test]
    fn report_statistics() {
        let r = EvalReport::from_accuracies(vec![0.5, 0.7, 0.9], String::new(), 0.0);
        assert_eq!(r.mean, (0.5 + 0.7 + 0.9) / 3.0);
        assert!((r.std - (0.08f64 / 3.0).sqrt()).abs() < 1e-12);
        let one = EvalReport::from_accuracies(vec![0.4], String::new(), 0.0);
        assert_eq!(one.std, 0.0);
    }

    #[test]
    fn random_coreset_copies_rows() {
        let (train, _) = blobs();
        let a = coreset_random(&train, 3, 5).unwrap();
        assert_eq!(a, coreset_random(&train, 3, 5).unwrap());
        assert_eq!(a.provenance.method, "random");
        for i in 0..a.len() {
            assert!((0..train.len()).any(|r| train.images().row(r) == a.images().row(i)));
        }
        assert!(matches!(coreset_random(&train, 11, 0), Err(Error::InsufficientClassExamples { .. })));
    }

    #[test]
    fn herding_first_pick_and_full_set() {
        let emb = Tensor::new(vec![4, 1], vec![0.0, 3.0, 1.1, 4.0]).unwrap();
        // mean 2.0; nearest is 1.1 (|0.9|) vs 3.0 (|1.0|)
        assert_eq!(herding_order(&emb, 1).unwrap(), vec![2]);
        let all = herding_order(&emb, 4).unwrap();
        let mut sorted = all.clone();
        sorted.sort();
        assert_eq!(sorted, vec![0, 1, 2, 3]);
        assert!(herding_order(&emb, 5).is_err());
    }

    #[test]
    fn herding_ties_take_smallest_index() {
        let emb = Tensor::new(vec![3, 1], vec![1.0, -1.0, 0.0]).unwrap();
        // mean 0: row 2 first, then rows 0 and 1 tie
        assert_eq!(herding_order(&emb, 2).unwrap(), vec![2, 0]);
    }

    #[test]
    fn grid_cells_and_values() {
        let cells = loss_term_cells(&LossConfig::default());
        assert_eq!(cells.len(), 7);
        assert!(cells.iter().all(|c| c.loss.validate().is_ok()));
        let v = parse_grid_values("0:1:0.1").unwrap();
        assert_eq!(v.len(), 11);
        assert_eq!(v[3], 0.3);
        assert_eq!(parse_grid_values("0.2,0.8").unwrap(), vec![0.2, 0.8]);
        assert!(parse_grid_values("1:0:0.1").is_err());
        assert_eq!(lambda_cells(&LossConfig::default(), &v).len(), 11);
    }

    #[test]
    fn csv_layout() {
        let rows = vec![AblationRow {
            cell_id: "lh".into(),
            lh: true,
            tv: false,
            clip: false,
            lambda: 0.8,
            report: Some(EvalReport::from_accuracies(vec![0.5, 0.5], "d".into(), 0.0)),
            error: None,
        }];
        let text = String::from_utf8(rows_to_csv(&rows).unwrap()).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next().unwrap(), "cell_id,lh,tv,clip,lambda,mean,std,seeds,error");
        assert_eq!(lines.next().unwrap(), "lh,true,false,false,0.8,0.5,0,2,");
    }

    #[test]
    fn identical_cells_identical_means() {
        let (train, test) = blobs();
        let base = DistillConfig {
            outer_steps: 3,
            anchors_per_class: 4,
            net: FeatureNetConfig::mlp(4, vec![8], 4),
            ..DistillConfig::paper(1)
        };
        let cell = AblationCell {
            id: "x".into(),
            loss: LossConfig::default(),
        };
        let rows = ablation_grid(&train, &test, &[cell.clone(), cell], &base, &mlp_eval(5)).unwrap();
        assert_eq!(rows[0].report.as_ref().unwrap().mean, rows[1].report.as_ref().unwrap().mean);
        assert!(matches!(ablation_grid(&train, &test, &[], &base, &mlp_eval(5)), Err(Error::EmptyGrid)));
    }
}
