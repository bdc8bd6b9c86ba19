//! SGD with momentum and L2 weight decay, in the formulation used by
//! PyTorch: `d = g + wd * p; v = mu * v + d; p -= lr * v`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimizerState {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// One buffer per parameter, shaped like it. Empty until the first step.
    pub buffers: Vec<Vec<f64>>,
}

impl OptimizerState {
    pub fn new(lr: f64, momentum: f64, weight_decay: f64) -> Self {
        OptimizerState {
            lr,
            momentum,
            weight_decay,
            buffers: Vec::new(),
        }
    }

    /// Network optimizer settings: lr 0.01, momentum 0.9, weight decay 5e-4.
    pub fn network_default() -> Self {
        OptimizerState::new(0.01, 0.9, 5e-4)
    }

    /// Updates `params` in place from `grads`, parameter by parameter.
    pub fn step(&mut self, params: &mut [&mut [f64]], grads: &[&[f64]]) -> Result<()> {
        if params.len() != grads.len() {
            return Err(Error::ShapeMismatch(format!(
                "{} parameters, {} gradients",
                params.len(),
                grads.len()
            )));
        }
        if self.buffers.is_empty() {
            self.buffers = params.iter().map(|p| vec![0.0; p.len()]).collect();
        }
        if self.buffers.len() != params.len() {
            return Err(Error::ShapeMismatch("optimizer state has a different layout".into()));
        }
        for ((p, g), buf) in params.iter_mut().zip(grads).zip(&mut self.buffers) {
            if p.len() != g.len() || p.len() != buf.len() {
                return Err(Error::ShapeMismatch(format!(
                    "parameter of {} elements, gradient of {}, buffer of {}",
                    p.len(),
                    g.len(),
                    buf.len()
                )));
            }
            for ((pv, &gv), bv) in p.iter_mut().zip(g.iter()).zip(buf.iter_mut()) {
                let d = gv + self.weight_decay * *pv;
                *bv = self.momentum * *bv + d;
                *pv -= self.lr * *bv;
            }
        }
        Ok(())
    }
}
