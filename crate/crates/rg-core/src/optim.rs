//! SGD and Adam parameter updates.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::param::ParamGroup;
use crate::tensor::Real;

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", tag = "kind")]
pub enum OptimizerKind {
    Sgd,
    Adam {
        #[serde(default = "default_beta1")]
        beta1: f64,
        #[serde(default = "default_beta2")]
        beta2: f64,
        #[serde(default = "default_epsilon")]
        epsilon: f64,
    },
}

fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.999
}
fn default_epsilon() -> f64 {
    1e-8
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct OptimizerConfig {
    #[serde(flatten)]
    pub kind: OptimizerKind,
    pub learning_rate: f64,
}

impl OptimizerConfig {
    pub fn sgd(learning_rate: f64) -> Self {
        Self {
            kind: OptimizerKind::Sgd,
            learning_rate,
        }
    }

    pub fn adam(learning_rate: f64) -> Self {
        Self {
            kind: OptimizerKind::Adam {
                beta1: default_beta1(),
                beta2: default_beta2(),
                epsilon: default_epsilon(),
            },
            learning_rate,
        }
    }

    pub fn validate(&self) -> Result<()> {
        // Zero is allowed so a no-op training run stays well-defined.
        if !(self.learning_rate >= 0.0) || !self.learning_rate.is_finite() {
            return Err(CoreError::InvalidArgument(format!(
                "learning rate must be non-negative and finite, got {}",
                self.learning_rate
            )));
        }
        Ok(())
    }
}

struct AdamState {
    m: Vec<Real>,
    v: Vec<Real>,
}

/// Applies updates to a [`ParamGroup`] and zeroes gradients afterwards.
pub struct Optimizer {
    config: OptimizerConfig,
    state: BTreeMap<String, AdamState>,
    step_count: u64,
}

impl Optimizer {
    pub fn new(config: OptimizerConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            config,
            state: BTreeMap::new(),
            step_count: 0,
        })
    }

    pub fn step<G: ParamGroup + ?Sized>(&mut self, group: &mut G) -> Result<()> {
        // Reject NaN gradients before touching any value.
        let mut bad: Option<String> = None;
        group.for_each(&mut |name, p| {
            if bad.is_none() && p.trainable && p.grad.data().iter().any(|v| v.is_nan()) {
                bad = Some(name.to_string());
            }
        });
        if let Some(name) = bad {
            return Err(CoreError::NanGradient(name));
        }

        self.step_count += 1;
        let lr = self.config.learning_rate as Real;
        match self.config.kind {
            OptimizerKind::Sgd => {
                group.for_each_mut(&mut |_, p| {
                    if p.trainable {
                        for (v, g) in p.value.data_mut().iter_mut().zip(p.grad.data()) {
                            *v -= lr * g;
                        }
                        p.zero_grad();
                    }
                });
            }
            OptimizerKind::Adam {
                beta1,
                beta2,
                epsilon,
            } => {
                let (b1, b2, eps) = (beta1 as Real, beta2 as Real, epsilon as Real);
                let t = self.step_count as i32;
                let c1 = 1.0 - b1.powi(t);
                let c2 = 1.0 - b2.powi(t);
                let state = &mut self.state;
                group.for_each_mut(&mut |name, p| {
                    if !p.trainable {
                        return;
                    }
                    let n = p.value.numel();
                    let s = state.entry(name.to_string()).or_insert_with(|| AdamState {
                        m: vec![0.0; n],
                        v: vec![0.0; n],
                    });
                    for i in 0..n {
                        let g = p.grad.data()[i];
                        s.m[i] = b1 * s.m[i] + (1.0 - b1) * g;
                        s.v[i] = b2 * s.v[i] + (1.0 - b2) * g * g;
                        let m_hat = s.m[i] / c1;
                        let v_hat = s.v[i] / c2;
                        p.value.data_mut()[i] -= lr * m_hat / (v_hat.sqrt() + eps);
                    }
                    p.zero_grad();
                });
            }
        }
        Ok(())
    }
}
