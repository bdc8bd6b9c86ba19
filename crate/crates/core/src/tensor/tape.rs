use super::kernels::{self, ConvGeom, PoolGeom};
use super::{Tensor, LOG_FLOOR};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`]. Only meaningful for the tape
/// that produced it.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Elementwise {
    Add,
    Sub,
    Mul,
    Div,
    Relu,
    Log,
    Square,
    Abs,
    Clip01,
}

impl Elementwise {
    pub fn is_binary(self) -> bool {
        matches!(
            self,
            Elementwise::Add | Elementwise::Sub | Elementwise::Mul | Elementwise::Div
        )
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Reduce {
    Sum,
    Mean,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Constant,
    Unary(Elementwise, Var),
    Binary(Elementwise, Var, Var),
    Scale(Var, f64),
    Offset(Var),
    MulLastDim(Var, Vec<f64>),
    Reduce { input: Var, map: Option<Vec<usize>>, scale: f64 },
    MatMul(Var, Var),
    AddBias { input: Var, bias: Var, inner: usize },
    Conv2d { input: Var, weight: Var, geom: ConvGeom },
    AvgPool { input: Var, geom: PoolGeom },
    InstanceNorm { input: Var, inv_std: Vec<f64>, plane: usize },
    Reshape(Var),
    PairwiseDiff(Var, Var),
    SoftmaxRows(Var),
    CrossEntropy { logits: Var, labels: Vec<usize>, probs: Vec<f64> },
}

impl Op {
    fn parents(&self) -> Vec<Var> {
        match self {
            Op::Leaf | Op::Constant => vec![],
            Op::Unary(_, a)
            | Op::Scale(a, _)
            | Op::Offset(a)
            | Op::MulLastDim(a, _)
            | Op::Reduce { input: a, .. }
            | Op::AvgPool { input: a, .. }
            | Op::InstanceNorm { input: a, .. }
            | Op::Reshape(a)
            | Op::SoftmaxRows(a)
            | Op::CrossEntropy { logits: a, .. } => vec![*a],
            Op::Binary(_, a, b)
            | Op::MatMul(a, b)
            | Op::AddBias { input: a, bias: b, .. }
            | Op::Conv2d { input: a, weight: b, .. }
            | Op::PairwiseDiff(a, b) => vec![*a, *b],
        }
    }
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    grad: Option<Tensor>,
}

/// Records operations in creation order, which is a topological order:
/// a node's parents always have smaller indices.
#[derive(Debug)]
pub struct Tape {
    nodes: Vec<Node>,
    recording: bool,
}

impl Default for Tape {
    fn default() -> Self {
        Tape::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            recording: true,
        }
    }

    pub fn is_recording(&self) -> bool {
        self.recording
    }

    /// When recording is off, ops still compute values but keep no links
    /// to their inputs, so nothing downstream can be differentiated.
    pub fn set_recording(&mut self, on: bool) {
        self.recording = on;
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// A differentiable input.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: true,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    /// An input that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Constant,
            requires_grad: false,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.nodes[v.0].grad.as_ref()
    }

    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        if !self.recording {
            return self.constant(value);
        }
        let requires_grad = op.parents().iter().any(|p| self.nodes[p.0].requires_grad);
        let op = if requires_grad { op } else { Op::Constant };
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn elementwise(&mut self, op: Elementwise, a: Var, b: Option<Var>) -> Result<Var> {
        match (op.is_binary(), b) {
            (true, Some(b)) => self.binary(op, a, b),
            (false, None) => self.unary(op, a),
            (true, None) => Err(Error::ShapeMismatch(format!("{op:?} needs two operands"))),
            (false, Some(_)) => Err(Error::ShapeMismatch(format!("{op:?} takes one operand"))),
        }
    }

    fn binary(&mut self, op: Elementwise, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        let shape = broadcast_shape(va, vb)?;
        let n: usize = shape.iter().product();
        let (sa, sb) = (va.numel() == n, vb.numel() == n);
        let at = |i: usize| if sa { va.data[i] } else { va.data[0] };
        let bt = |i: usize| if sb { vb.data[i] } else { vb.data[0] };
        let mut out = Vec::with_capacity(n);
        for i in 0..n {
            let (x, y) = (at(i), bt(i));
            out.push(match op {
                Elementwise::Add => x + y,
                Elementwise::Sub => x - y,
                Elementwise::Mul => x * y,
                Elementwise::Div => {
                    if y == 0.0 {
                        return Err(Error::DomainError("division by zero".into()));
                    }
                    x / y
                }
                _ => unreachable!(),
            });
        }
        Ok(self.push(Tensor::from_parts(shape, out), Op::Binary(op, a, b)))
    }

    fn unary(&mut self, op: Elementwise, a: Var) -> Result<Var> {
        let va = self.value(a);
        let data: Vec<f64> = match op {
            Elementwise::Relu => va.data.iter().map(|&x| x.max(0.0)).collect(),
            Elementwise::Square => va.data.iter().map(|&x| x * x).collect(),
            Elementwise::Abs => va.data.iter().map(|&x| x.abs()).collect(),
            Elementwise::Clip01 => va.data.iter().map(|&x| x.clamp(0.0, 1.0)).collect(),
            Elementwise::Log => {
                if let Some(bad) = va.data.iter().find(|x| !(**x >= 0.0)) {
                    return Err(Error::DomainError(format!("log of {bad}")));
                }
                va.data.iter().map(|&x| x.max(LOG_FLOOR).ln()).collect()
            }
            _ => unreachable!(),
        };
        let value = Tensor::from_parts(va.shape.clone(), data);
        Ok(self.push(value, Op::Unary(op, a)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Elementwise::Add, a, b)
    }
    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Elementwise::Sub, a, b)
    }
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Elementwise::Mul, a, b)
    }
    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Elementwise::Div, a, b)
    }
    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(Elementwise::Relu, a).expect("relu is total")
    }
    pub fn log(&mut self, a: Var) -> Result<Var> {
        self.unary(Elementwise::Log, a)
    }
    pub fn square(&mut self, a: Var) -> Var {
        self.unary(Elementwise::Square, a).expect("square is total")
    }
    pub fn abs(&mut self, a: Var) -> Var {
        self.unary(Elementwise::Abs, a).expect("abs is total")
    }
    /// `min(max(x, 0), 1)`; the derivative is 1 on the closed interval.
    pub fn clip01(&mut self, a: Var) -> Var {
        self.unary(Elementwise::Clip01, a).expect("clip01 is total")
    }

    /// Multiplies by a constant.
    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let value = self.value(a).map(|x| x * factor);
        self.push(value, Op::Scale(a, factor))
    }

    /// Adds a constant.
    pub fn offset(&mut self, a: Var, c: f64) -> Var {
        let value = self.value(a).map(|x| x + c);
        self.push(value, Op::Offset(a))
    }

    /// Multiplies each slice along the last axis by constant `factors`.
    pub fn mul_last_dim(&mut self, a: Var, factors: &[f64]) -> Result<Var> {
        let va = self.value(a);
        let last = va.shape.last().copied().unwrap_or(1);
        if last != factors.len() {
            return Err(Error::ShapeMismatch(format!(
                "last dimension {last} vs {} factors",
                factors.len()
            )));
        }
        let mut data = va.data.clone();
        for chunk in data.chunks_mut(last) {
            for (v, f) in chunk.iter_mut().zip(factors) {
                *v *= f;
            }
        }
        let value = Tensor::from_parts(va.shape.clone(), data);
        Ok(self.push(value, Op::MulLastDim(a, factors.to_vec())))
    }

    /// Sums or averages over `axes` (all axes when `None`), dropping the
    /// reduced dimensions.
    pub fn reduce(&mut self, op: Reduce, a: Var, axes: Option<&[usize]>) -> Result<Var> {
        let va = self.value(a);
        let rank = va.rank();
        let full = match axes {
            None => true,
            Some(ax) => {
                for &axis in ax {
                    if axis >= rank.max(1) {
                        return Err(Error::InvalidAxis { axis, rank });
                    }
                }
                (0..rank).all(|d| ax.contains(&d))
            }
        };
        if full {
            let n = va.numel() as f64;
            let scale = if op == Reduce::Mean { 1.0 / n } else { 1.0 };
            let value = Tensor::scalar(va.sum() * scale);
            return Ok(self.push(value, Op::Reduce { input: a, map: None, scale }));
        }
        let axes = axes.expect("partial reduction has axes");
        let (out_shape, map) = reduction_map(&va.shape, axes);
        let out_n: usize = out_shape.iter().product();
        let reduced = (va.numel() / out_n) as f64;
        let scale = if op == Reduce::Mean { 1.0 / reduced } else { 1.0 };
        let mut out = vec![0.0; out_n];
        for (&o, &x) in map.iter().zip(&va.data) {
            out[o] += x;
        }
        for o in &mut out {
            *o *= scale;
        }
        let value = Tensor::from_parts(out_shape, out);
        Ok(self.push(value, Op::Reduce { input: a, map: Some(map), scale }))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        self.reduce(Reduce::Sum, a, None).expect("full reduction")
    }

    pub fn mean(&mut self, a: Var) -> Var {
        self.reduce(Reduce::Mean, a, None).expect("full reduction")
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.rank() != 2 || vb.rank() != 2 || va.shape[1] != vb.shape[0] {
            return Err(Error::ShapeMismatch(format!(
                "matmul {:?} x {:?}",
                va.shape, vb.shape
            )));
        }
        let (m, k, n) = (va.shape[0], va.shape[1], vb.shape[1]);
        let mut out = vec![0.0; m * n];
        kernels::gemm(m, k, n, &va.data, false, &vb.data, false, &mut out, 0.0);
        Ok(self.push(Tensor::from_parts(vec![m, n], out), Op::MatMul(a, b)))
    }

    /// Adds `bias[c]` along axis 1 of a `[B, C, ...]` input.
    pub fn add_bias(&mut self, input: Var, bias: Var) -> Result<Var> {
        let (vx, vb) = (self.value(input), self.value(bias));
        if vx.rank() < 2 || vb.rank() != 1 || vb.shape[0] != vx.shape[1] {
            return Err(Error::ShapeMismatch(format!(
                "bias {:?} for input {:?}",
                vb.shape, vx.shape
            )));
        }
        let inner: usize = vx.shape[2..].iter().product();
        let mut data = vx.data.clone();
        kernels::add_channel_bias(&mut data, &vb.data, inner);
        let value = Tensor::from_parts(vx.shape.clone(), data);
        Ok(self.push(value, Op::AddBias { input, bias, inner }))
    }

    /// Stride-1 convolution of `[B, Cin, H, W]` with `[Cout, Cin, kh, kw]`.
    pub fn conv2d(&mut self, input: Var, weight: Var, pad: usize) -> Result<Var> {
        let (vx, vw) = (self.value(input), self.value(weight));
        let geom = conv_geom(vx.shape(), vw.shape(), pad)?;
        let out = kernels::conv2d_forward(&geom, &vx.data, &vw.data);
        let shape = vec![geom.batch, geom.out_ch, geom.out_h(), geom.out_w()];
        Ok(self.push(Tensor::from_parts(shape, out), Op::Conv2d { input, weight, geom }))
    }

    pub fn avg_pool(&mut self, input: Var, kernel: usize, stride: usize) -> Result<Var> {
        let vx = self.value(input);
        let geom = pool_geom(vx.shape(), kernel, stride)?;
        let out = kernels::avg_pool_forward(&geom, &vx.data);
        let shape = vec![vx.shape[0], vx.shape[1], geom.out_h(), geom.out_w()];
        Ok(self.push(Tensor::from_parts(shape, out), Op::AvgPool { input, geom }))
    }

    /// Per-sample, per-channel normalization of a `[B, C, H, W]` input.
    pub fn instance_norm(&mut self, input: Var, eps: f64) -> Result<Var> {
        let vx = self.value(input);
        if vx.rank() != 4 {
            return Err(Error::ShapeMismatch(format!(
                "instance norm expects rank 4, got {:?}",
                vx.shape
            )));
        }
        let plane = vx.shape[2] * vx.shape[3];
        let (y, inv_std) = kernels::instance_norm_forward(&vx.data, plane, eps);
        let value = Tensor::from_parts(vx.shape.clone(), y);
        Ok(self.push(value, Op::InstanceNorm { input, inv_std, plane }))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(a).reshape(shape)?;
        Ok(self.push(value, Op::Reshape(a)))
    }

    /// `[M, N]` and `[K, N]` to `[M, K, N]` with `out[m, k] = a[m] - b[k]`.
    pub fn pairwise_diff(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.rank() != 2 || vb.rank() != 2 || va.shape[1] != vb.shape[1] {
            return Err(Error::ShapeMismatch(format!(
                "pairwise difference of {:?} and {:?}",
                va.shape, vb.shape
            )));
        }
        let (m, k, n) = (va.shape[0], vb.shape[0], va.shape[1]);
        let mut out = Vec::with_capacity(m * k * n);
        for i in 0..m {
            let ra = va.row(i);
            for j in 0..k {
                out.extend(ra.iter().zip(vb.row(j)).map(|(x, y)| x - y));
            }
        }
        Ok(self.push(Tensor::from_parts(vec![m, k, n], out), Op::PairwiseDiff(a, b)))
    }

    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        let va = self.value(a);
        if va.rank() != 2 {
            return Err(Error::ShapeMismatch(format!("softmax expects rank 2, got {:?}", va.shape)));
        }
        let out = kernels::softmax_rows(&va.data, va.shape[1]);
        let value = Tensor::from_parts(va.shape.clone(), out);
        Ok(self.push(value, Op::SoftmaxRows(a)))
    }

    /// Mean cross-entropy of `[B, C]` logits against integer labels.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let vl = self.value(logits);
        if vl.rank() != 2 || vl.shape[0] != labels.len() {
            return Err(Error::ShapeMismatch(format!(
                "logits {:?} for {} labels",
                vl.shape,
                labels.len()
            )));
        }
        let classes = vl.shape[1];
        if let Some(&label) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::LabelOutOfRange { label, classes });
        }
        let probs = kernels::softmax_rows(&vl.data, classes);
        let loss = labels
            .iter()
            .enumerate()
            .map(|(i, &l)| -probs[i * classes + l].max(f64::MIN_POSITIVE).ln())
            .sum::<f64>()
            / labels.len() as f64;
        let op = Op::CrossEntropy {
            logits,
            labels: labels.to_vec(),
            probs,
        };
        Ok(self.push(Tensor::scalar(loss), op))
    }

    /// Propagates d(loss)/d(node) to every ancestor of `loss`. Gradients
    /// add onto whatever a previous call left until [`Tape::zero_grad`].
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let root = &self.nodes[loss.0];
        if root.value.numel() != 1 {
            return Err(Error::NotScalar(root.value.shape.clone()));
        }
        if !root.requires_grad {
            return Err(Error::NoTape);
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            for (parent, pg) in self.local_grads(node, &g) {
                if !self.nodes[parent.0].requires_grad {
                    continue;
                }
                match &mut grads[parent.0] {
                    Some(acc) => {
                        for (a, b) in acc.iter_mut().zip(&pg) {
                            *a += b;
                        }
                    }
                    slot => *slot = Some(pg),
                }
            }
            let node = &mut self.nodes[i];
            match &mut node.grad {
                Some(acc) => {
                    for (a, b) in acc.data.iter_mut().zip(&g) {
                        *a += b;
                    }
                }
                slot => *slot = Some(Tensor::from_parts(node.value.shape.clone(), g)),
            }
        }
        Ok(())
    }

    fn local_grads(&self, node: &Node, g: &[f64]) -> Vec<(Var, Vec<f64>)> {
        let val = |v: Var| &self.nodes[v.0].value;
        let wants = |v: Var| self.nodes[v.0].requires_grad;
        match &node.op {
            Op::Leaf | Op::Constant => vec![],
            Op::Unary(kind, a) => {
                let x = &val(*a).data;
                let d: Vec<f64> = x
                    .iter()
                    .zip(g)
                    .map(|(&x, &g)| match kind {
                        Elementwise::Relu => {
                            if x > 0.0 {
                                g
                            } else {
                                0.0
                            }
                        }
                        Elementwise::Log => {
                            if x >= LOG_FLOOR {
                                g / x
                            } else {
                                0.0
                            }
                        }
                        Elementwise::Square => 2.0 * x * g,
                        Elementwise::Abs => {
                            if x > 0.0 {
                                g
                            } else if x < 0.0 {
                                -g
                            } else {
                                0.0
                            }
                        }
                        Elementwise::Clip01 => {
                            if (0.0..=1.0).contains(&x) {
                                g
                            } else {
                                0.0
                            }
                        }
                        _ => unreachable!(),
                    })
                    .collect();
                vec![(*a, d)]
            }
            Op::Binary(kind, a, b) => {
                let (va, vb) = (&val(*a).data, &val(*b).data);
                let n = g.len();
                let xa = |i: usize| if va.len() == n { va[i] } else { va[0] };
                let xb = |i: usize| if vb.len() == n { vb[i] } else { vb[0] };
                let mut da = vec![0.0; va.len()];
                let mut db = vec![0.0; vb.len()];
                let ia = |i: usize| if va.len() == n { i } else { 0 };
                let ib = |i: usize| if vb.len() == n { i } else { 0 };
                for i in 0..n {
                    let (x, y, gi) = (xa(i), xb(i), g[i]);
                    let (ga, gb) = match kind {
                        Elementwise::Add => (gi, gi),
                        Elementwise::Sub => (gi, -gi),
                        Elementwise::Mul => (gi * y, gi * x),
                        Elementwise::Div => (gi / y, -gi * x / (y * y)),
                        _ => unreachable!(),
                    };
                    da[ia(i)] += ga;
                    db[ib(i)] += gb;
                }
                vec![(*a, da), (*b, db)]
            }
            Op::Scale(a, f) => vec![(*a, g.iter().map(|v| v * f).collect())],
            Op::Offset(a) | Op::Reshape(a) => vec![(*a, g.to_vec())],
            Op::MulLastDim(a, factors) => {
                let mut d = g.to_vec();
                for chunk in d.chunks_mut(factors.len()) {
                    for (v, f) in chunk.iter_mut().zip(factors) {
                        *v *= f;
                    }
                }
                vec![(*a, d)]
            }
            Op::Reduce { input, map, scale } => {
                let n = val(*input).numel();
                let d = match map {
                    None => vec![g[0] * scale; n],
                    Some(map) => map.iter().map(|&o| g[o] * scale).collect(),
                };
                vec![(*input, d)]
            }
            Op::MatMul(a, b) => {
                let (va, vb) = (val(*a), val(*b));
                let (m, k, n) = (va.shape[0], va.shape[1], vb.shape[1]);
                let mut out = Vec::new();
                if wants(*a) {
                    let mut da = vec![0.0; m * k];
                    kernels::gemm(m, n, k, g, false, &vb.data, true, &mut da, 0.0);
                    out.push((*a, da));
                }
                if wants(*b) {
                    let mut db = vec![0.0; k * n];
                    kernels::gemm(k, m, n, &va.data, true, g, false, &mut db, 0.0);
                    out.push((*b, db));
                }
                out
            }
            Op::AddBias { input, bias, inner } => {
                let ch = val(*bias).numel();
                let mut db = vec![0.0; ch];
                for (i, chunk) in g.chunks(*inner).enumerate() {
                    db[i % ch] += chunk.iter().sum::<f64>();
                }
                vec![(*input, g.to_vec()), (*bias, db)]
            }
            Op::Conv2d { input, weight, geom } => {
                let (dx, dw) = kernels::conv2d_backward(
                    geom,
                    &val(*input).data,
                    &val(*weight).data,
                    g,
                    wants(*input),
                    wants(*weight),
                );
                dx.map(|d| (*input, d))
                    .into_iter()
                    .chain(dw.map(|d| (*weight, d)))
                    .collect()
            }
            Op::AvgPool { input, geom } => vec![(*input, kernels::avg_pool_backward(geom, g))],
            Op::InstanceNorm { input, inv_std, plane } => {
                let y = &node.value.data;
                vec![(*input, kernels::instance_norm_backward(y, inv_std, g, *plane))]
            }
            Op::PairwiseDiff(a, b) => {
                let (m, k) = (val(*a).shape[0], val(*b).shape[0]);
                let n = val(*a).shape[1];
                let mut da = vec![0.0; m * n];
                let mut db = vec![0.0; k * n];
                for i in 0..m {
                    for j in 0..k {
                        let gs = &g[(i * k + j) * n..(i * k + j + 1) * n];
                        for d in 0..n {
                            da[i * n + d] += gs[d];
                            db[j * n + d] -= gs[d];
                        }
                    }
                }
                vec![(*a, da), (*b, db)]
            }
            Op::SoftmaxRows(a) => {
                let y = &node.value.data;
                let cols = node.value.shape[1];
                let mut d = vec![0.0; y.len()];
                for ((dr, yr), gr) in d.chunks_mut(cols).zip(y.chunks(cols)).zip(g.chunks(cols)) {
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for ((o, &yv), &gv) in dr.iter_mut().zip(yr).zip(gr) {
                        *o = yv * (gv - dot);
                    }
                }
                vec![(*a, d)]
            }
            Op::CrossEntropy { logits, labels, probs } => {
                let classes = probs.len() / labels.len();
                let scale = g[0] / labels.len() as f64;
                let mut d: Vec<f64> = probs.iter().map(|p| p * scale).collect();
                for (i, &l) in labels.iter().enumerate() {
                    d[i * classes + l] -= scale;
                }
                vec![(*logits, d)]
            }
        }
    }
}

fn broadcast_shape(a: &Tensor, b: &Tensor) -> Result<Vec<usize>> {
    if a.shape == b.shape {
        Ok(a.shape.clone())
    } else if b.numel() == 1 && (a.numel() > 1 || a.rank() >= b.rank()) {
        Ok(a.shape.clone())
    } else if a.numel() == 1 {
        Ok(b.shape.clone())
    } else {
        Err(Error::ShapeMismatch(format!(
            "cannot broadcast {:?} with {:?}",
            a.shape, b.shape
        )))
    }
}

/// Output shape of a partial reduction, and for each input element the
/// flat index of the output element it contributes to.
fn reduction_map(shape: &[usize], axes: &[usize]) -> (Vec<usize>, Vec<usize>) {
    let kept: Vec<usize> = (0..shape.len()).filter(|d| !axes.contains(d)).collect();
    let out_shape: Vec<usize> = kept.iter().map(|&d| shape[d]).collect();
    let mut out_strides = vec![0usize; shape.len()];
    let mut stride = 1;
    for &d in kept.iter().rev() {
        out_strides[d] = stride;
        stride *= shape[d];
    }
    let n: usize = shape.iter().product();
    let mut map = Vec::with_capacity(n);
    let mut idx = vec![0usize; shape.len()];
    for _ in 0..n {
        map.push(idx.iter().zip(&out_strides).map(|(i, s)| i * s).sum());
        for d in (0..shape.len()).rev() {
            idx[d] += 1;
            if idx[d] < shape[d] {
                break;
            }
            idx[d] = 0;
        }
    }
    (out_shape, map)
}

pub(crate) fn conv_geom(x: &[usize], w: &[usize], pad: usize) -> Result<ConvGeom> {
    if x.len() != 4 || w.len() != 4 || x[1] != w[1] {
        return Err(Error::ShapeMismatch(format!("conv2d input {x:?} with weight {w:?}")));
    }
    if x[2] + 2 * pad < w[2] || x[3] + 2 * pad < w[3] {
        return Err(Error::ShapeMismatch(format!("kernel {w:?} larger than padded input {x:?}")));
    }
    Ok(ConvGeom {
        batch: x[0],
        in_ch: x[1],
        height: x[2],
        width: x[3],
        out_ch: w[0],
        kh: w[2],
        kw: w[3],
        pad,
    })
}

pub(crate) fn pool_geom(x: &[usize], kernel: usize, stride: usize) -> Result<PoolGeom> {
    if x.len() != 4 || kernel == 0 || stride == 0 {
        return Err(Error::ShapeMismatch(format!("pooling input {x:?}")));
    }
    if x[2] < kernel || x[3] < kernel {
        return Err(Error::ShapeMismatch(format!(
            "pooling window {kernel} larger than input {x:?}"
        )));
    }
    Ok(PoolGeom {
        planes: x[0] * x[1],
        height: x[2],
        width: x[3],
        kernel,
        stride,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn clip01_values_and_gradient() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[5], &[-0.5, 0.3, 1.7, 0.0, 1.0]));
        let c = tape.clip01(x);
        assert_eq!(tape.value(c).data(), &[0.0, 0.3, 1.0, 0.0, 1.0]);
        let s = tape.sum(c);
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), &[0.0, 1.0, 0.0, 1.0, 1.0]);
    }

    #[test]
    fn add_zero_is_identity() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[3], &[1.0, -2.0, 5.0]));
        let z = tape.constant(Tensor::scalar(0.0));
        let y = tape.add(x, z).unwrap();
        assert_eq!(tape.value(y), tape.value(x));
        let s = tape.sum(y);
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn square_sum_gradient() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[2], &[2.0, -3.0]));
        let sq = tape.square(x);
        let s = tape.sum(sq);
        assert_eq!(tape.value(s).item().unwrap(), 13.0);
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), &[4.0, -6.0]);
    }

    #[test]
    fn reductions() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let r = tape.reduce(Reduce::Sum, x, Some(&[1])).unwrap();
        assert_eq!(tape.value(r).shape(), &[2]);
        assert_eq!(tape.value(r).data(), &[3.0, 7.0]);
        let c = tape.reduce(Reduce::Mean, x, Some(&[0])).unwrap();
        assert_eq!(tape.value(c).data(), &[2.0, 3.0]);
        let single = tape.constant(t(&[1], &[4.0]));
        let m = tape.mean(single);
        assert_eq!(tape.value(m).item().unwrap(), 4.0);
        assert!(matches!(
            tape.reduce(Reduce::Sum, x, Some(&[2])),
            Err(Error::InvalidAxis { axis: 2, rank: 2 })
        ));
    }

    #[test]
    fn mean_of_copies() {
        for k in [1usize, 2, 7, 100] {
            let mut tape = Tape::new();
            let x = tape.constant(Tensor::filled(&[k], 0.37));
            let m = tape.mean(x);
            assert!((tape.value(m).item().unwrap() - 0.37).abs() < 1e-15);
        }
    }

    #[test]
    fn matmul_examples() {
        let mut tape = Tape::new();
        let a = tape.constant(t(&[1, 2], &[1.0, 2.0]));
        let b = tape.constant(t(&[2, 1], &[3.0, 4.0]));
        let c = tape.matmul(a, b).unwrap();
        assert_eq!(tape.value(c).data(), &[11.0]);
        let eye = tape.constant(t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
        let m = tape.constant(t(&[2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
        let p = tape.matmul(eye, m).unwrap();
        assert_eq!(tape.value(p), tape.value(m));
        assert!(matches!(tape.matmul(m, m), Err(Error::ShapeMismatch(_))));
    }

    #[test]
    fn backward_errors() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[2], &[1.0, 2.0]));
        assert!(matches!(tape.backward(x), Err(Error::NotScalar(_))));
        let c = tape.constant(Tensor::scalar(3.0));
        assert!(matches!(tape.backward(c), Err(Error::NoTape)));
        tape.set_recording(false);
        let s = tape.sum(x);
        assert!(matches!(tape.backward(s), Err(Error::NoTape)));
    }

    #[test]
    fn constant_loss_gives_zero_grad() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[3], &[1.0, 2.0, 3.0]));
        let zero = tape.scale(x, 0.0);
        let s = tape.sum(zero);
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn repeated_backward_accumulates() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[3], &[1.0, 2.0, 3.0]));
        let sq = tape.square(x);
        let s = tape.sum(sq);
        tape.backward(s).unwrap();
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), &[4.0, 8.0, 12.0]);
        tape.zero_grad();
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), &[2.0, 4.0, 6.0]);
    }

    #[test]
    fn elementwise_dispatch_and_errors() {
        let mut tape = Tape::new();
        let a = tape.leaf(t(&[2], &[1.0, 4.0]));
        let b = tape.leaf(t(&[3], &[1.0, 2.0, 3.0]));
        assert!(matches!(
            tape.elementwise(Elementwise::Add, a, Some(b)),
            Err(Error::ShapeMismatch(_))
        ));
        let z = tape.constant(Tensor::zeros(&[2]));
        assert!(matches!(tape.div(a, z), Err(Error::DomainError(_))));
        let neg = tape.constant(t(&[1], &[-1.0]));
        assert!(matches!(tape.log(neg), Err(Error::DomainError(_))));
        let zero = tape.constant(t(&[1], &[0.0]));
        let l = tape.log(zero).unwrap();
        assert_eq!(tape.value(l).data()[0], LOG_FLOOR.ln());
        let r = tape.elementwise(Elementwise::Relu, a, None).unwrap();
        assert_eq!(tape.value(r).data(), &[1.0, 4.0]);
    }

    #[test]
    fn cross_entropy_label_check() {
        let mut tape = Tape::new();
        let l = tape.leaf(t(&[1, 3], &[0.0, 0.0, 0.0]));
        assert!(matches!(
            tape.cross_entropy(l, &[3]),
            Err(Error::LabelOutOfRange { label: 3, classes: 3 })
        ));
        let ce = tape.cross_entropy(l, &[1]).unwrap();
        assert!((tape.value(ce).item().unwrap() - 3f64.ln()).abs() < 1e-12);
    }
}
