//! The embedding network `phi(theta, x)`.
//!
//! Three architectures share one parameter layout convention:
//!
//! * `ConvNet`: `blocks` × [3×3 conv (pad 1) → instance norm → ReLU →
//!   3×3 average pool, stride 2], then a linear classifier.
//! * `Mlp`: dense + ReLU hidden layers, then a linear classifier.
//! * `Identity`: the flattened input is the embedding; only the classifier
//!   has parameters.
//!
//! The embedding head returns the pre-classifier features; the logits
//! head appends the classifier.

use std::path::Path;

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::data::checkpoint;
use crate::error::{Error, Result};
use crate::optim::OptimizerState;
use crate::rng;
use crate::tensor::kernels::{self, ConvGeom, PoolGeom};
use crate::tensor::{Tape, Tensor, Var};

pub const NORM_EPS: f64 = 1e-5;
const CONV_KERNEL: usize = 3;
const CONV_PAD: usize = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Architecture {
    ConvNet,
    Mlp,
    Identity,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Norm {
    Instance,
    None,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Head {
    Embedding,
    Logits,
    /// Class probabilities: softmax of the logits.
    Softmax,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureNetConfig {
    pub architecture: Architecture,
    pub conv_blocks: usize,
    pub channels: usize,
    pub norm: Norm,
    pub pool_kernel: usize,
    pub pool_stride: usize,
    pub hidden: Vec<usize>,
    pub in_channels: usize,
    pub height: usize,
    pub width: usize,
    pub classes: usize,
    pub seed: u64,
}

impl FeatureNetConfig {
    /// Three conv blocks with 128 channels.
    pub fn convnet(in_channels: usize, height: usize, width: usize, classes: usize) -> Self {
        FeatureNetConfig {
            architecture: Architecture::ConvNet,
            conv_blocks: 3,
            channels: 128,
            norm: Norm::Instance,
            pool_kernel: 3,
            pool_stride: 2,
            hidden: Vec::new(),
            in_channels,
            height,
            width,
            classes,
            seed: 0,
        }
    }

    /// The CPU-sized convnet: same layout with 32 channels.
    pub fn desk_convnet(in_channels: usize, height: usize, width: usize, classes: usize) -> Self {
        FeatureNetConfig {
            channels: 32,
            ..FeatureNetConfig::convnet(in_channels, height, width, classes)
        }
    }

    pub fn mlp(input_dim: usize, hidden: Vec<usize>, classes: usize) -> Self {
        FeatureNetConfig {
            architecture: Architecture::Mlp,
            conv_blocks: 0,
            channels: 0,
            norm: Norm::None,
            pool_kernel: 3,
            pool_stride: 2,
            hidden,
            in_channels: 1,
            height: 1,
            width: input_dim,
            classes,
            seed: 0,
        }
    }

    pub fn identity(in_channels: usize, height: usize, width: usize, classes: usize) -> Self {
        FeatureNetConfig {
            architecture: Architecture::Identity,
            conv_blocks: 0,
            channels: 0,
            norm: Norm::None,
            pool_kernel: 3,
            pool_stride: 2,
            hidden: Vec::new(),
            in_channels,
            height,
            width,
            classes,
            seed: 0,
        }
    }

    /// Same architecture, resized for another input shape.
    pub fn with_input(mut self, in_channels: usize, height: usize, width: usize) -> Self {
        self.in_channels = in_channels;
        self.height = height;
        self.width = width;
        self
    }

    pub fn input_dim(&self) -> usize {
        self.in_channels * self.height * self.width
    }

    /// Spatial size after each conv block, failing when a pooling window
    /// no longer fits.
    fn spatial_sizes(&self) -> Result<Vec<(usize, usize)>> {
        let (mut h, mut w) = (self.height, self.width);
        let mut out = Vec::with_capacity(self.conv_blocks);
        for block in 0..self.conv_blocks {
            if h < self.pool_kernel || w < self.pool_kernel {
                return Err(Error::BadShape(format!(
                    "{h}x{w} feature map too small for pooling in block {block}"
                )));
            }
            h = (h - self.pool_kernel) / self.pool_stride + 1;
            w = (w - self.pool_kernel) / self.pool_stride + 1;
            out.push((h, w));
        }
        Ok(out)
    }

    /// Embedding dimension N.
    pub fn embedding_dim(&self) -> Result<usize> {
        self.validate()?;
        Ok(match self.architecture {
            Architecture::ConvNet => {
                let (h, w) = *self.spatial_sizes()?.last().expect("at least one block");
                self.channels * h * w
            }
            Architecture::Mlp => *self.hidden.last().expect("validated"),
            Architecture::Identity => self.input_dim(),
        })
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(m.to_string()));
        if self.classes == 0 || self.input_dim() == 0 {
            return bad("classes and input shape must be positive");
        }
        match self.architecture {
            Architecture::ConvNet => {
                if self.conv_blocks == 0 || self.channels == 0 {
                    return bad("convnet needs at least one block and one channel");
                }
                if self.pool_kernel == 0 || self.pool_stride == 0 {
                    return bad("pooling kernel and stride must be positive");
                }
                self.spatial_sizes()?;
            }
            Architecture::Mlp => {
                if self.hidden.is_empty() || self.hidden.contains(&0) {
                    return bad("mlp needs non-empty positive hidden sizes");
                }
            }
            Architecture::Identity => {}
        }
        Ok(())
    }

    /// Parameter names and shapes in a fixed order.
    fn layout(&self) -> Result<Vec<(String, Vec<usize>)>> {
        let mut out = Vec::new();
        let n = self.embedding_dim()?;
        match self.architecture {
            Architecture::ConvNet => {
                let mut cin = self.in_channels;
                for b in 0..self.conv_blocks {
                    out.push((
                        format!("conv{b}.weight"),
                        vec![self.channels, cin, CONV_KERNEL, CONV_KERNEL],
                    ));
                    out.push((format!("conv{b}.bias"), vec![self.channels]));
                    cin = self.channels;
                }
            }
            Architecture::Mlp => {
                let mut fan_in = self.input_dim();
                for (i, &h) in self.hidden.iter().enumerate() {
                    out.push((format!("fc{i}.weight"), vec![fan_in, h]));
                    out.push((format!("fc{i}.bias"), vec![h]));
                    fan_in = h;
                }
            }
            Architecture::Identity => {}
        }
        out.push(("classifier.weight".into(), vec![n, self.classes]));
        out.push(("classifier.bias".into(), vec![self.classes]));
        Ok(out)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FeatureNet {
    config: FeatureNetConfig,
    names: Vec<String>,
    params: Vec<Tensor>,
    seed: u64,
}

/// Tape handles produced by [`FeatureNet::forward`].
#[derive(Clone, Debug)]
pub struct NetVars {
    pub output: Var,
    pub params: Vec<Var>,
}

impl FeatureNet {
    pub fn new(config: FeatureNetConfig) -> Result<Self> {
        config.validate()?;
        let layout = config.layout()?;
        let seed = config.seed;
        let mut net = FeatureNet {
            names: layout.iter().map(|(n, _)| n.clone()).collect(),
            params: layout.iter().map(|(_, s)| Tensor::zeros(s)).collect(),
            config,
            seed,
        };
        net.reinit(seed);
        Ok(net)
    }

    pub fn config(&self) -> &FeatureNetConfig {
        &self.config
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn params(&self) -> &[Tensor] {
        &self.params
    }

    pub fn param_names(&self) -> &[String] {
        &self.names
    }

    pub fn params_mut(&mut self) -> &mut [Tensor] {
        &mut self.params
    }

    pub fn embedding_dim(&self) -> usize {
        self.config.embedding_dim().expect("validated at construction")
    }

    /// Redraws every parameter from the init distribution: zero biases,
    /// and weights `N(0, gain / fan_in)` with gain 2 for layers followed by
    /// ReLU and 1 for the classifier.
    pub fn reinit(&mut self, seed: u64) {
        let mut rng = rng::rng_from(seed);
        for (name, p) in self.names.iter().zip(&mut self.params) {
            if name.ends_with(".bias") {
                p.data_mut().fill(0.0);
                continue;
            }
            let fan_in = match p.rank() {
                4 => p.shape()[1] * p.shape()[2] * p.shape()[3],
                _ => p.shape()[0],
            };
            let gain = if name.starts_with("classifier") { 1.0 } else { 2.0 };
            let normal = Normal::new(0.0, (gain / fan_in as f64).sqrt()).expect("finite std");
            for v in p.data_mut() {
                *v = normal.sample(&mut rng);
            }
        }
        self.seed = seed;
    }

    fn check_batch(&self, shape: &[usize]) -> Result<usize> {
        let c = &self.config;
        let flat_ok = shape.len() == 2 && shape[1] == c.input_dim();
        let image_ok = shape.len() == 4 && shape[1..] == [c.in_channels, c.height, c.width];
        let mlp_ok = c.architecture != Architecture::ConvNet
            && shape.len() >= 2
            && shape[1..].iter().product::<usize>() == c.input_dim();
        if shape.first().copied().unwrap_or(0) == 0 || !(flat_ok || image_ok || mlp_ok) {
            return Err(Error::ShapeMismatch(format!(
                "batch {shape:?} does not match input ({}, {}, {})",
                c.in_channels, c.height, c.width
            )));
        }
        Ok(shape[0])
    }

    /// Differentiable forward pass. With `trainable`, parameters enter the
    /// tape as leaves and receive gradients; otherwise as constants.
    pub fn forward(&self, tape: &mut Tape, batch: Var, head: Head, trainable: bool) -> Result<NetVars> {
        let b = self.check_batch(tape.value(batch).shape())?;
        let params: Vec<Var> = self
            .params
            .iter()
            .map(|p| {
                if trainable {
                    tape.leaf(p.clone())
                } else {
                    tape.constant(p.clone())
                }
            })
            .collect();
        let c = &self.config;
        let mut x = batch;
        let mut pi = 0;
        match c.architecture {
            Architecture::ConvNet => {
                x = tape.reshape(x, &[b, c.in_channels, c.height, c.width])?;
                for _ in 0..c.conv_blocks {
                    x = tape.conv2d(x, params[pi], CONV_PAD)?;
                    x = tape.add_bias(x, params[pi + 1])?;
                    pi += 2;
                    if c.norm == Norm::Instance {
                        x = tape.instance_norm(x, NORM_EPS)?;
                    }
                    x = tape.relu(x);
                    x = tape.avg_pool(x, c.pool_kernel, c.pool_stride)?;
                }
                let n = tape.value(x).row_len();
                x = tape.reshape(x, &[b, n])?;
            }
            Architecture::Mlp => {
                x = tape.reshape(x, &[b, c.input_dim()])?;
                for _ in 0..c.hidden.len() {
                    x = tape.matmul(x, params[pi])?;
                    x = tape.add_bias(x, params[pi + 1])?;
                    x = tape.relu(x);
                    pi += 2;
                }
            }
            Architecture::Identity => {
                x = tape.reshape(x, &[b, c.input_dim()])?;
            }
        }
        if head != Head::Embedding {
            x = tape.matmul(x, params[pi])?;
            x = tape.add_bias(x, params[pi + 1])?;
        }
        if head == Head::Softmax {
            x = tape.softmax_rows(x)?;
        }
        Ok(NetVars { output: x, params })
    }

    /// Tape-free forward pass. Produces the same values as [`Self::forward`].
    pub fn infer(&self, batch: &Tensor, head: Head) -> Result<Tensor> {
        let b = self.check_batch(batch.shape())?;
        let c = &self.config;
        let mut pi = 0;
        let mut x: Vec<f64>;
        let mut width;
        match c.architecture {
            Architecture::ConvNet => {
                x = batch.data().to_vec();
                let (mut cin, mut h, mut w) = (c.in_channels, c.height, c.width);
                for _ in 0..c.conv_blocks {
                    let g = ConvGeom {
                        batch: b,
                        in_ch: cin,
                        height: h,
                        width: w,
                        out_ch: c.channels,
                        kh: CONV_KERNEL,
                        kw: CONV_KERNEL,
                        pad: CONV_PAD,
                    };
                    let mut y = kernels::conv2d_forward(&g, &x, self.params[pi].data());
                    let (oh, ow) = (g.out_h(), g.out_w());
                    kernels::add_channel_bias(&mut y, self.params[pi + 1].data(), oh * ow);
                    pi += 2;
                    if c.norm == Norm::Instance {
                        y = kernels::instance_norm_forward(&y, oh * ow, NORM_EPS).0;
                    }
                    kernels::relu_inplace(&mut y);
                    let pg = PoolGeom {
                        planes: b * c.channels,
                        height: oh,
                        width: ow,
                        kernel: c.pool_kernel,
                        stride: c.pool_stride,
                    };
                    x = kernels::avg_pool_forward(&pg, &y);
                    cin = c.channels;
                    h = pg.out_h();
                    w = pg.out_w();
                }
                width = cin * h * w;
            }
            Architecture::Mlp => {
                x = batch.data().to_vec();
                width = c.input_dim();
                for &hsize in &c.hidden {
                    let mut y = vec![0.0; b * hsize];
                    kernels::gemm(b, width, hsize, &x, false, self.params[pi].data(), false, &mut y, 0.0);
                    kernels::add_channel_bias(&mut y, self.params[pi + 1].data(), 1);
                    kernels::relu_inplace(&mut y);
                    pi += 2;
                    x = y;
                    width = hsize;
                }
            }
            Architecture::Identity => {
                x = batch.data().to_vec();
                width = c.input_dim();
            }
        }
        if head != Head::Embedding {
            let mut y = vec![0.0; b * c.classes];
            kernels::gemm(b, width, c.classes, &x, false, self.params[pi].data(), false, &mut y, 0.0);
            kernels::add_channel_bias(&mut y, self.params[pi + 1].data(), 1);
            x = y;
            width = c.classes;
        }
        if head == Head::Softmax {
            x = kernels::softmax_rows(&x, width);
        }
        Ok(Tensor::from_parts(vec![b, width], x))
    }

    /// Embeds a large batch in fixed-size chunks to bound memory.
    pub fn infer_chunked(&self, batch: &Tensor, head: Head, chunk: usize) -> Result<Tensor> {
        let n = batch.rows();
        if n <= chunk {
            return self.infer(batch, head);
        }
        let mut parts = Vec::new();
        let mut start = 0;
        while start < n {
            let end = (start + chunk).min(n);
            let idx: Vec<usize> = (start..end).collect();
            parts.push(self.infer(&batch.select_rows(&idx)?, head)?);
            start = end;
        }
        Tensor::concat_rows(&parts.iter().collect::<Vec<_>>())
    }

    /// One SGD step on the cross-entropy of the logits head. Returns the
    /// loss before the update.
    pub fn train_step(&mut self, batch: &Tensor, labels: &[usize], opt: &mut OptimizerState) -> Result<f64> {
        if let Some(&label) = labels.iter().find(|&&l| l >= self.config.classes) {
            return Err(Error::LabelOutOfRange {
                label,
                classes: self.config.classes,
            });
        }
        let mut tape = Tape::new();
        let x = tape.constant(batch.clone());
        let vars = self.forward(&mut tape, x, Head::Logits, true)?;
        let loss = tape.cross_entropy(vars.output, labels)?;
        let value = tape.value(loss).item()?;
        tape.backward(loss)?;
        let grads: Vec<Tensor> = vars
            .params
            .iter()
            .zip(&self.params)
            .map(|(&v, p)| tape.grad(v).cloned().unwrap_or_else(|| Tensor::zeros(p.shape())))
            .collect();
        let grad_refs: Vec<&[f64]> = grads.iter().map(|g| g.data()).collect();
        let mut param_refs: Vec<&mut [f64]> = self.params.iter_mut().map(|p| p.data_mut()).collect();
        opt.step(&mut param_refs, &grad_refs)?;
        Ok(value)
    }

    /// Writes parameters as a BCNN checkpoint.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let named: Vec<(String, Tensor)> = self
            .names
            .iter()
            .cloned()
            .zip(self.params.iter().cloned())
            .collect();
        checkpoint::write_tensors(path, &named)
    }

    /// Loads parameters saved by [`Self::save`] into a net of the same
    /// configuration.
    pub fn load_params(&mut self, path: impl AsRef<Path>) -> Result<()> {
        let named = checkpoint::read_tensors(path)?;
        self.set_params(named)
    }

    pub fn set_params(&mut self, named: Vec<(String, Tensor)>) -> Result<()> {
        if named.len() != self.params.len() {
            return Err(Error::CountMismatch(format!(
                "checkpoint has {} tensors, net has {}",
                named.len(),
                self.params.len()
            )));
        }
        for ((name, t), (own_name, own)) in named.iter().zip(self.names.iter().zip(&self.params)) {
            if name != own_name || t.shape() != own.shape() {
                return Err(Error::ShapeMismatch(format!(
                    "checkpoint tensor {name} {:?} vs {own_name} {:?}",
                    t.shape(),
                    own.shape()
                )));
            }
        }
        self.params = named.into_iter().map(|(_, t)| t).collect();
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::check_gradient;
    use rand::Rng;

    fn random_batch(shape: &[usize], seed: u64) -> Tensor {
        let mut r = rng::rng_from(seed);
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| r.random_range(-1.0..1.0)).collect()).unwrap()
    }

    fn tiny_convnet() -> FeatureNetConfig {
        FeatureNetConfig {
            conv_blocks: 2,
            channels: 2,
            seed: 3,
            ..FeatureNetConfig::convnet(1, 8, 8, 3)
        }
    }

    #[test]
    fn mnist_embedding_dim() {
        // 28 -> 13 -> 6 -> 2 under 3x3 stride-2 pooling.
        let cfg = FeatureNetConfig::convnet(1, 28, 28, 10);
        assert_eq!(cfg.embedding_dim().unwrap(), 128 * 2 * 2);
        let desk = FeatureNetConfig::desk_convnet(1, 28, 28, 10);
        let net = FeatureNet::new(desk).unwrap();
        let out = net.infer(&random_batch(&[3, 1, 28, 28], 1), Head::Embedding).unwrap();
        assert_eq!(out.shape(), &[3, 32 * 4]);
        let cifar = FeatureNetConfig::convnet(3, 32, 32, 10);
        // 32 -> 15 -> 7 -> 3
        assert_eq!(cifar.embedding_dim().unwrap(), 128 * 9);
    }

    #[test]
    fn too_small_input_rejected() {
        let cfg = FeatureNetConfig::convnet(1, 8, 8, 10);
        assert!(matches!(FeatureNet::new(cfg), Err(Error::BadShape(_))));
    }

    #[test]
    fn zero_weights_give_zero_embedding() {
        for cfg in [FeatureNetConfig::mlp(6, vec![5, 4], 3), tiny_convnet()] {
            let mut net = FeatureNet::new(cfg.clone()).unwrap();
            for p in net.params_mut() {
                p.data_mut().fill(0.0);
            }
            let shape = if cfg.architecture == Architecture::Mlp {
                vec![4, 6]
            } else {
                vec![4, 1, 8, 8]
            };
            let out = net.infer(&random_batch(&shape, 2), Head::Embedding).unwrap();
            assert!(out.data().iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn tape_and_inference_agree() {
        for (cfg, shape) in [
            (tiny_convnet(), vec![3, 1, 8, 8]),
            (FeatureNetConfig::mlp(6, vec![5, 4], 3), vec![3, 6]),
            (FeatureNetConfig::identity(1, 2, 3, 3), vec![3, 1, 2, 3]),
        ] {
            let net = FeatureNet::new(cfg).unwrap();
            let batch = random_batch(&shape, 5);
            for head in [Head::Embedding, Head::Logits, Head::Softmax] {
                let mut tape = Tape::new();
                let x = tape.constant(batch.clone());
                let vars = net.forward(&mut tape, x, head, false).unwrap();
                let direct = net.infer(&batch, head).unwrap();
                assert_eq!(tape.value(vars.output), &direct);
                if head == Head::Softmax {
                    for i in 0..direct.rows() {
                        assert!((direct.row(i).iter().sum::<f64>() - 1.0).abs() < 1e-12);
                    }
                }
            }
        }
    }

    #[test]
    fn duplicated_and_permuted_rows() {
        let net = FeatureNet::new(tiny_convnet()).unwrap();
        let batch = random_batch(&[4, 1, 8, 8], 9);
        let out = net.infer(&batch, Head::Embedding).unwrap();
        let perm = [2, 0, 3, 1];
        let permuted = net.infer(&batch.select_rows(&perm).unwrap(), Head::Embedding).unwrap();
        assert_eq!(permuted, out.select_rows(&perm).unwrap());
        let dup = net.infer(&batch.select_rows(&[1, 1]).unwrap(), Head::Embedding).unwrap();
        assert_eq!(dup.row(0), dup.row(1));
    }

    #[test]
    fn reinit_determinism() {
        let mut a = FeatureNet::new(tiny_convnet()).unwrap();
        let mut b = FeatureNet::new(tiny_convnet()).unwrap();
        a.reinit(42);
        b.reinit(7);
        b.reinit(42);
        assert_eq!(a.params(), b.params());
        b.reinit(43);
        assert_ne!(a.params(), b.params());
    }

    #[test]
    fn init_mean_within_five_standard_errors() {
        let cfg = FeatureNetConfig::mlp(100, vec![100], 2);
        let net = FeatureNet::new(cfg).unwrap();
        let w = net.params()[0].data();
        assert_eq!(w.len(), 10_000);
        let n = w.len() as f64;
        let mean = w.iter().sum::<f64>() / n;
        let var = w.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
        assert!(mean.abs() < 5.0 * (var / n).sqrt());
        // Kaiming fan-in: variance 2 / 100.
        assert!((var - 0.02).abs() < 0.002);
    }

    #[test]
    fn parameter_gradients_match_finite_differences() {
        let net = FeatureNet::new(tiny_convnet()).unwrap();
        let batch = random_batch(&[2, 1, 8, 8], 11);
        let labels = [0usize, 2];
        let mut tape = Tape::new();
        let x = tape.constant(batch.clone());
        let vars = net.forward(&mut tape, x, Head::Logits, true).unwrap();
        let loss = tape.cross_entropy(vars.output, &labels).unwrap();
        tape.backward(loss).unwrap();
        for (pi, &pv) in vars.params.iter().enumerate() {
            let analytic = tape.grad(pv).unwrap().data().to_vec();
            let base = net.params()[pi].data().to_vec();
            let f = |theta: &[f64]| {
                let mut probe = net.clone();
                probe.params_mut()[pi].data_mut().copy_from_slice(theta);
                let logits = probe.infer(&batch, Head::Logits).unwrap();
                let mut t = Tape::new();
                let l = t.constant(logits);
                let ce = t.cross_entropy(l, &labels).unwrap();
                t.value(ce).item().unwrap()
            };
            let check = check_gradient(f, &base, &analytic, 1e-5);
            assert!(check.passes(1e-4), "{}: {check:?}", net.param_names()[pi]);
        }
    }

    #[test]
    fn train_step_lr_zero_and_label_check() {
        let mut net = FeatureNet::new(FeatureNetConfig::mlp(4, vec![3], 2)).unwrap();
        let before = net.params().to_vec();
        let batch = random_batch(&[2, 4], 1);
        let mut opt = OptimizerState::new(0.0, 0.9, 5e-4);
        net.train_step(&batch, &[0, 1], &mut opt).unwrap();
        assert_eq!(net.params(), &before[..]);
        assert!(matches!(
            net.train_step(&batch, &[0, 2], &mut opt),
            Err(Error::LabelOutOfRange { label: 2, classes: 2 })
        ));
    }

    #[test]
    fn single_example_loss_decreases() {
        let mut net = FeatureNet::new(FeatureNetConfig::identity(1, 1, 5, 3)).unwrap();
        let batch = random_batch(&[1, 5], 4);
        let mut opt = OptimizerState::new(0.05, 0.0, 0.0);
        let losses: Vec<f64> = (0..50)
            .map(|_| net.train_step(&batch, &[1], &mut opt).unwrap())
            .collect();
        for w in losses[5..].windows(2) {
            assert!(w[1] <= w[0], "{losses:?}");
        }
        assert!(losses[49] < losses[0]);
    }

    #[test]
    fn checkpoint_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("net.bcnn");
        let net = FeatureNet::new(tiny_convnet()).unwrap();
        net.save(&path).unwrap();
        let mut other = FeatureNet::new(FeatureNetConfig { seed: 99, ..tiny_convnet() }).unwrap();
        assert_ne!(other.params(), net.params());
        other.load_params(&path).unwrap();
        assert_eq!(other.params(), net.params());
        let mut wrong = FeatureNet::new(FeatureNetConfig::mlp(4, vec![3], 2)).unwrap();
        assert!(wrong.load_params(&path).is_err());
    }
}
