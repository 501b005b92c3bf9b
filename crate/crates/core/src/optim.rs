//! Parameter update rules fed with the accumulated adversarial gradient.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ModelParams;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            kind: OptimizerKind::Sgd,
            lr: 0.05,
            weight_decay: 0.0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) || self.weight_decay < 0.0 {
            return Err(Error::InvalidConfig(format!(
                "optimizer: lr {} must be positive and weight decay {} non-negative",
                self.lr, self.weight_decay
            )));
        }
        if self.kind == OptimizerKind::Adam
            && !((0.0..1.0).contains(&self.beta1)
                && (0.0..1.0).contains(&self.beta2)
                && self.eps > 0.0)
        {
            return Err(Error::InvalidConfig(
                "optimizer: Adam betas must lie in [0, 1) and eps > 0".into(),
            ));
        }
        Ok(())
    }

    pub fn build(&self) -> Result<Box<dyn Optimizer + Send>> {
        self.validate()?;
        Ok(match self.kind {
            OptimizerKind::Sgd => Box::new(Sgd {
                lr: self.lr,
                weight_decay: self.weight_decay,
            }),
            OptimizerKind::Adam => Box::new(Adam::new(self)),
        })
    }
}

pub trait Optimizer {
    /// Applies one update; `grads` is aligned with `params.names()`.
    fn step(&mut self, params: &mut ModelParams, grads: &[Vec<f64>]) -> Result<()>;
}

fn check_alignment(params: &ModelParams, grads: &[Vec<f64>]) -> Result<()> {
    let ok = grads.len() == params.tensors().len()
        && grads
            .iter()
            .zip(params.tensors())
            .all(|(g, t)| g.len() == t.len());
    if ok {
        Ok(())
    } else {
        Err(Error::DimensionMismatch {
            expected: format!(
                "{} gradient tensors matching parameters",
                params.tensors().len()
            ),
            found: format!("{} tensors", grads.len()),
        })
    }
}

/// `theta <- theta - lr * (g + weight_decay * theta)`
#[derive(Clone, Debug)]
pub struct Sgd {
    pub lr: f64,
    pub weight_decay: f64,
}

impl Optimizer for Sgd {
    fn step(&mut self, params: &mut ModelParams, grads: &[Vec<f64>]) -> Result<()> {
        check_alignment(params, grads)?;
        for (t, g) in params.tensors_mut().iter_mut().zip(grads) {
            for (w, gv) in t.data_mut().iter_mut().zip(g) {
                *w -= self.lr * (gv + self.weight_decay * *w);
            }
        }
        Ok(())
    }
}

/// Adam with decoupled weight decay.
#[derive(Clone, Debug)]
pub struct Adam {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    weight_decay: f64,
    t: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(cfg: &OptimizerConfig) -> Self {
        Self {
            lr: cfg.lr,
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: cfg.eps,
            weight_decay: cfg.weight_decay,
            t: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }
}

impl Optimizer for Adam {
    fn step(&mut self, params: &mut ModelParams, grads: &[Vec<f64>]) -> Result<()> {
        check_alignment(params, grads)?;
        if self.m.is_empty() {
            self.m = grads.iter().map(|g| vec![0.0; g.len()]).collect();
            self.v = self.m.clone();
        }
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for (i, (t, g)) in params.tensors_mut().iter_mut().zip(grads).enumerate() {
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for (j, w) in t.data_mut().iter_mut().enumerate() {
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * g[j];
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * g[j] * g[j];
                let update = (m[j] / bc1) / ((v[j] / bc2).sqrt() + self.eps);
                *w -= self.lr * (update + self.weight_decay * *w);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{HeadKind, ModelConfig, ModelHyper};

    fn params() -> ModelParams {
        ModelParams::init(
            ModelHyper {
                vocab_size: 6,
                num_outputs: 2,
                head: HeadKind::Sequence,
                config: ModelConfig {
                    dim: 4,
                    layers: 1,
                    heads: 1,
                    ffn_hidden: 4,
                    ..Default::default()
                },
            },
            0,
        )
        .unwrap()
    }

    #[test]
    fn sgd_subtracts_scaled_gradient() {
        let mut p = params();
        let before = p.flatten();
        let grads: Vec<Vec<f64>> = p.tensors().iter().map(|t| vec![1.0; t.len()]).collect();
        Sgd {
            lr: 0.5,
            weight_decay: 0.0,
        }
        .step(&mut p, &grads)
        .unwrap();
        for (a, b) in before.iter().zip(p.flatten()) {
            assert_eq!(b, a - 0.5);
        }
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        let mut p = params();
        let before = p.flatten();
        let grads: Vec<Vec<f64>> = p.tensors().iter().map(|t| vec![-3.0; t.len()]).collect();
        let mut adam = Adam::new(&OptimizerConfig {
            kind: OptimizerKind::Adam,
            lr: 0.01,
            eps: 0.0,
            ..Default::default()
        });
        adam.step(&mut p, &grads).unwrap();
        for (a, b) in before.iter().zip(p.flatten()) {
            assert!((b - a - 0.01).abs() < 1e-15);
        }
    }

    #[test]
    fn misaligned_gradients_rejected() {
        let mut p = params();
        assert!(Sgd {
            lr: 0.1,
            weight_decay: 0.0
        }
        .step(&mut p, &[vec![0.0]])
        .is_err());
    }
}
