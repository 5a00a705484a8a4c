//! SGD and Adam parameter updates with per-optimizer state.

use crate::error::{Error, Result};
use crate::nn::{BoundNet, Network};
use crate::tape::Grads;
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

#[derive(Debug, Clone)]
pub struct Optimizer {
    pub kind: OptimizerKind,
    pub lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    step: u64,
    // first/second moment buffers per parameter, lazily shaped
    moments: Vec<(Vec<f64>, Vec<f64>)>,
}

impl Optimizer {
    pub fn sgd(lr: f64) -> Optimizer {
        Optimizer {
            kind: OptimizerKind::Sgd,
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            moments: Vec::new(),
        }
    }

    pub fn adam(lr: f64) -> Optimizer {
        Optimizer {
            kind: OptimizerKind::Adam,
            ..Optimizer::sgd(lr)
        }
    }

    pub fn new(kind: OptimizerKind, lr: f64) -> Optimizer {
        match kind {
            OptimizerKind::Sgd => Optimizer::sgd(lr),
            OptimizerKind::Adam => Optimizer::adam(lr),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// One update over a parameter list and matching gradients.
    pub fn step(&mut self, params: &mut [&mut Tensor], grads: &[Vec<f64>]) -> Result<()> {
        if params.len() != grads.len() {
            return Err(Error::shape(format!(
                "{} params vs {} grads",
                params.len(),
                grads.len()
            )));
        }
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            if p.len() != g.len() {
                return Err(Error::shape(format!(
                    "param {} has {} entries, grad has {}",
                    i,
                    p.len(),
                    g.len()
                )));
            }
            if let Some(bad) = g.iter().find(|v| !v.is_finite()) {
                return Err(Error::contract(format!(
                    "non-finite gradient entry {} for param {}",
                    bad, i
                )));
            }
        }
        if self.moments.is_empty() && self.kind == OptimizerKind::Adam {
            self.moments = grads
                .iter()
                .map(|g| (vec![0.0; g.len()], vec![0.0; g.len()]))
                .collect();
        }
        self.step += 1;
        match self.kind {
            OptimizerKind::Sgd => {
                for (p, g) in params.iter_mut().zip(grads) {
                    for (pv, gv) in p.values_mut().iter_mut().zip(g) {
                        *pv -= self.lr * gv;
                    }
                }
            }
            OptimizerKind::Adam => {
                let t = self.step as i32;
                let bc1 = 1.0 - self.beta1.powi(t);
                let bc2 = 1.0 - self.beta2.powi(t);
                for ((p, g), (m, v)) in params.iter_mut().zip(grads).zip(&mut self.moments) {
                    for i in 0..g.len() {
                        m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g[i];
                        v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g[i] * g[i];
                        let m_hat = m[i] / bc1;
                        let v_hat = v[i] / bc2;
                        p.values_mut()[i] -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
                    }
                }
            }
        }
        Ok(())
    }

    /// Update all network parameters from one backward pass.
    pub fn step_network(
        &mut self,
        net: &mut Network,
        bound: &BoundNet,
        grads: &Grads,
    ) -> Result<()> {
        let grad_vecs = net.grads_of(bound, grads);
        let mut params = net.params_mut();
        self.step(&mut params, &grad_vecs)
    }
}
