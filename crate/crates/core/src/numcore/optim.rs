use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// First-order optimizer settings.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum OptimizerConfig {
    Adam {
        step: f64,
        #[serde(default = "default_beta1")]
        beta1: f64,
        #[serde(default = "default_beta2")]
        beta2: f64,
        #[serde(default = "default_eps")]
        eps: f64,
    },
    GradientDescent {
        step: f64,
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

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig::adam(0.05)
    }
}

impl OptimizerConfig {
    pub fn adam(step: f64) -> Self {
        OptimizerConfig::Adam {
            step,
            beta1: default_beta1(),
            beta2: default_beta2(),
            eps: default_eps(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = match *self {
            OptimizerConfig::Adam {
                step,
                beta1,
                beta2,
                eps,
            } => {
                step > 0.0
                    && (0.0..1.0).contains(&beta1)
                    && (0.0..1.0).contains(&beta2)
                    && eps > 0.0
            }
            OptimizerConfig::GradientDescent { step } => step > 0.0,
        };
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("bad optimizer settings {self:?}")))
        }
    }
}

/// Optimizer state for one parameter vector.
#[derive(Debug, Clone)]
pub struct Optimizer {
    config: OptimizerConfig,
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Optimizer {
    pub fn new(config: OptimizerConfig, dim: usize) -> Self {
        Optimizer {
            config,
            m: vec![0.0; dim],
            v: vec![0.0; dim],
            t: 0,
        }
    }

    /// Replaces the step size, keeping the moment estimates.
    pub fn set_step(&mut self, new_step: f64) {
        match &mut self.config {
            OptimizerConfig::Adam { step, .. } | OptimizerConfig::GradientDescent { step } => {
                *step = new_step
            }
        }
    }

    pub fn steps_taken(&self) -> i32 {
        self.t
    }

    /// Takes one descent step on `params` along `grad`.
    pub fn step(&mut self, params: &mut [f64], grad: &[f64]) {
        debug_assert_eq!(params.len(), grad.len());
        self.t += 1;
        match self.config {
            OptimizerConfig::GradientDescent { step } => {
                for (p, g) in params.iter_mut().zip(grad) {
                    *p -= step * g;
                }
            }
            OptimizerConfig::Adam {
                step,
                beta1,
                beta2,
                eps,
            } => {
                let bc1 = 1.0 - beta1.powi(self.t);
                let bc2 = 1.0 - beta2.powi(self.t);
                for i in 0..params.len() {
                    let g = grad[i];
                    self.m[i] = beta1 * self.m[i] + (1.0 - beta1) * g;
                    self.v[i] = beta2 * self.v[i] + (1.0 - beta2) * g * g;
                    let m_hat = self.m[i] / bc1;
                    let v_hat = self.v[i] / bc2;
                    params[i] -= step * m_hat / (v_hat.sqrt() + eps);
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn adam_first_step_moves_by_step_size() {
        let mut opt = Optimizer::new(OptimizerConfig::adam(0.1), 2);
        let mut p = [1.0, -1.0];
        opt.step(&mut p, &[3.0, -0.5]);
        assert!((p[0] - 0.9).abs() < 1e-7);
        assert!((p[1] + 0.9).abs() < 1e-7);
    }

    #[test]
    fn both_minimise_a_quadratic() {
        for cfg in [
            OptimizerConfig::adam(0.05),
            OptimizerConfig::GradientDescent { step: 0.1 },
        ] {
            let mut opt = Optimizer::new(cfg, 2);
            let mut p = [2.0, -3.0];
            for _ in 0..2000 {
                let g = [2.0 * (p[0] - 1.0), 2.0 * (p[1] + 0.5)];
                opt.step(&mut p, &g);
            }
            assert!(
                (p[0] - 1.0).abs() < 1e-3 && (p[1] + 0.5).abs() < 1e-3,
                "{cfg:?}: {p:?}"
            );
        }
    }

    #[test]
    fn validation() {
        assert!(OptimizerConfig::GradientDescent { step: 0.0 }
            .validate()
            .is_err());
        assert!(OptimizerConfig::adam(0.05).validate().is_ok());
    }
}
