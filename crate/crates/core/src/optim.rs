//! First-order optimizers over a [`ParamStore`].

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum OptimizerKind {
    /// Heavy-ball momentum: `v <- m v + g; p <- p - lr v`.
    Momentum { momentum: f64 },
    Adam { beta1: f64, beta2: f64, eps: f64 },
}

impl Default for OptimizerKind {
    fn default() -> Self {
        OptimizerKind::Momentum { momentum: 0.5 }
    }
}

impl OptimizerKind {
    pub fn adam() -> Self {
        OptimizerKind::Adam {
            beta1: 0.5,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Optimizer state for one parameter store.
#[derive(Clone, Debug)]
pub struct Optimizer {
    kind: OptimizerKind,
    lr: f64,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
    steps: u64,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, lr: f64, params: &ParamStore) -> Result<Self> {
        if !(lr > 0.0 && lr.is_finite()) {
            return Err(Error::InvalidParameter(format!("learning rate {lr}")));
        }
        let zeros: Vec<Vec<f64>> = params
            .tensors()
            .iter()
            .map(|t| vec![0.0; t.data().len()])
            .collect();
        let second = match kind {
            OptimizerKind::Adam { .. } => zeros.clone(),
            OptimizerKind::Momentum { .. } => Vec::new(),
        };
        Ok(Self {
            kind,
            lr,
            first: zeros,
            second,
            steps: 0,
        })
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    /// Applies one update with `grads` (one tensor per slot).
    pub fn step(&mut self, params: &mut ParamStore, grads: &[Tensor]) -> Result<()> {
        if grads.len() != params.len() {
            return Err(Error::Shape(format!(
                "{} gradients for {} parameters",
                grads.len(),
                params.len()
            )));
        }
        self.steps += 1;
        let t = self.steps as i32;
        for (i, g) in grads.iter().enumerate() {
            let p = params.slot_mut(i);
            if p.shape() != g.shape() {
                return Err(Error::Shape(format!(
                    "gradient {:?} for parameter {:?}",
                    g.shape(),
                    p.shape()
                )));
            }
            let m = &mut self.first[i];
            match self.kind {
                OptimizerKind::Momentum { momentum } => {
                    for ((p, g), v) in p.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()) {
                        *v = momentum * *v + g;
                        *p -= self.lr * *v;
                    }
                }
                OptimizerKind::Adam { beta1, beta2, eps } => {
                    let s = &mut self.second[i];
                    let c1 = 1.0 - beta1.powi(t);
                    let c2 = 1.0 - beta2.powi(t);
                    for (((p, g), m), s) in p
                        .data_mut()
                        .iter_mut()
                        .zip(g.data())
                        .zip(m.iter_mut())
                        .zip(s.iter_mut())
                    {
                        *m = beta1 * *m + (1.0 - beta1) * g;
                        *s = beta2 * *s + (1.0 - beta2) * g * g;
                        *p -= self.lr * (*m / c1) / ((*s / c2).sqrt() + eps);
                    }
                }
            }
        }
        Ok(())
    }
}
