//! Parameter update rules.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gradient::GradientVector;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum OptimizerSpec {
    Sgd {
        lr: f64,
    },
    Adam {
        lr: f64,
        #[serde(default = "default_beta1")]
        beta1: f64,
        #[serde(default = "default_beta2")]
        beta2: f64,
        #[serde(default = "default_eps")]
        eps: f64,
    },
}

fn default_beta1() -> f64 {
    0.9
}

fn default_beta2() -> f64 {
    0.999
}

fn default_eps() -> f64 {
    1e-8
}

impl OptimizerSpec {
    pub fn adam(lr: f64) -> Self {
        OptimizerSpec::Adam {
            lr,
            beta1: default_beta1(),
            beta2: default_beta2(),
            eps: default_eps(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            OptimizerSpec::Sgd { lr } if lr > 0.0 && lr.is_finite() => Ok(()),
            OptimizerSpec::Adam { lr, beta1, beta2, eps }
                if lr > 0.0
                    && lr.is_finite()
                    && (0.0..1.0).contains(&beta1)
                    && (0.0..1.0).contains(&beta2)
                    && eps > 0.0 =>
            {
                Ok(())
            }
            other => Err(Error::config(format!("invalid optimizer {other:?}"))),
        }
    }

    pub fn lr(&self) -> f64 {
        match *self {
            OptimizerSpec::Sgd { lr } | OptimizerSpec::Adam { lr, .. } => lr,
        }
    }
}

#[derive(Clone, Debug)]
pub enum Optimizer {
    Sgd {
        lr: f64,
    },
    Adam {
        lr: f64,
        beta1: f64,
        beta2: f64,
        eps: f64,
        t: u64,
        m: Vec<f64>,
        v: Vec<f64>,
    },
}

impl Optimizer {
    pub fn new(spec: OptimizerSpec, dim: usize) -> Self {
        match spec {
            OptimizerSpec::Sgd { lr } => Optimizer::Sgd { lr },
            OptimizerSpec::Adam { lr, beta1, beta2, eps } => Optimizer::Adam {
                lr,
                beta1,
                beta2,
                eps,
                t: 0,
                m: vec![0.0; dim],
                v: vec![0.0; dim],
            },
        }
    }

    pub fn lr(&self) -> f64 {
        match *self {
            Optimizer::Sgd { lr } | Optimizer::Adam { lr, .. } => lr,
        }
    }

    pub fn set_lr(&mut self, new_lr: f64) {
        match self {
            Optimizer::Sgd { lr } | Optimizer::Adam { lr, .. } => *lr = new_lr,
        }
    }

    /// Steps taken so far (always 0 for SGD).
    pub fn steps(&self) -> u64 {
        match *self {
            Optimizer::Sgd { .. } => 0,
            Optimizer::Adam { t, .. } => t,
        }
    }

    /// Applies one update to the flat parameter slice in place.
    pub fn step_slice(&mut self, params: &mut [f64], g: &[f64]) -> Result<()> {
        if params.len() != g.len() {
            return Err(Error::DimMismatch {
                expected: params.len(),
                actual: g.len(),
            });
        }
        match self {
            Optimizer::Sgd { lr } => {
                for (p, gi) in params.iter_mut().zip(g) {
                    *p -= *lr * gi;
                }
            }
            Optimizer::Adam {
                lr,
                beta1,
                beta2,
                eps,
                t,
                m,
                v,
            } => {
                if m.len() != g.len() {
                    return Err(Error::DimMismatch {
                        expected: m.len(),
                        actual: g.len(),
                    });
                }
                *t += 1;
                let c1 = 1.0 - beta1.powi(*t as i32);
                let c2 = 1.0 - beta2.powi(*t as i32);
                for i in 0..g.len() {
                    m[i] = *beta1 * m[i] + (1.0 - *beta1) * g[i];
                    v[i] = *beta2 * v[i] + (1.0 - *beta2) * g[i] * g[i];
                    let m_hat = m[i] / c1;
                    let v_hat = v[i] / c2;
                    params[i] -= *lr * m_hat / (v_hat.sqrt() + *eps);
                }
            }
        }
        Ok(())
    }

    pub fn step(&mut self, params: &mut GradientVector, g: &GradientVector) -> Result<()> {
        self.step_slice(params.as_mut_slice(), g.as_slice())
    }
}
