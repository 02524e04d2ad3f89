use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::candidate::{CandidateBatch, Relaxation};
use super::objective::{AttackProblem, RegWeights};
use crate::envs::Transition;
use crate::error::{Error, Result};
use crate::numcore::{all_finite, tape::Tape, GradMode, Optimizer, OptimizerConfig};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AttackConfig {
    #[serde(default)]
    pub weights: RegWeights,
    #[serde(default)]
    pub optimizer: OptimizerConfig,
    #[serde(default = "default_iterations")]
    pub max_iterations: usize,
    #[serde(default)]
    pub grad_mode: GradMode,
}

fn default_iterations() -> usize {
    3000
}

impl Default for AttackConfig {
    fn default() -> Self {
        AttackConfig {
            weights: RegWeights::default(),
            optimizer: OptimizerConfig::default(),
            max_iterations: default_iterations(),
            grad_mode: GradMode::Analytic,
        }
    }
}

impl AttackConfig {
    pub fn gia() -> Self {
        AttackConfig {
            weights: RegWeights::none(),
            ..Default::default()
        }
    }

    pub fn with_weights(self, weights: RegWeights) -> Self {
        AttackConfig { weights, ..self }
    }

    pub fn validate(&self) -> Result<()> {
        self.weights.validate()?;
        self.optimizer.validate()
    }

    /// Hex SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("attack config serializes");
        hex::encode(Sha256::digest(json.as_bytes()))
    }
}

/// Why an inversion stopped early.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Divergence {
    pub iteration: usize,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReconstructionResult {
    pub decoded: Vec<Transition>,
    /// Final encoded candidate (softmax applied to logits).
    pub relaxed: Vec<f64>,
    pub loss_trace: Vec<f64>,
    pub gme: f64,
    pub iterations: usize,
    pub wall_time_secs: f64,
    pub seed: u64,
    pub config_hash: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub divergence: Option<Divergence>,
}

impl ReconstructionResult {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }
}

/// Gradient inversion of one packet. Candidate variables start from N(0, 1)
/// drawn with `seed` and follow `config.optimizer` on the total objective for
/// `config.max_iterations` steps. A non-finite objective stops the run; the
/// result then holds the last finite iterate and a [`Divergence`].
pub fn rgia_attack(
    problem: &AttackProblem<'_>,
    config: &AttackConfig,
    seed: u64,
) -> Result<ReconstructionResult> {
    config.validate()?;
    let problem = problem.with_weights(config.weights)?;
    let start = Instant::now();
    let relaxation = Relaxation::for_env(problem.env);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut cand = CandidateBatch::sample(relaxation, problem.packet.batch_size, &mut rng);
    let mut opt = Optimizer::new(config.optimizer, cand.raw.len());
    let mut tape = Tape::new();
    let mut trace = Vec::with_capacity(config.max_iterations);
    let mut divergence = None;
    let mut last_good: Option<Vec<f64>> = None;

    for it in 0..config.max_iterations {
        let x = cand.relaxed()?;
        let step = problem.value_and_grad(&x, config.grad_mode, &mut tape);
        let (terms, grad) = match step {
            Ok(v) => v,
            Err(e) if e.is_numeric() => {
                divergence = Some(Divergence {
                    iteration: it,
                    reason: e.to_string(),
                });
                if let Some(g) = last_good.take() {
                    cand.raw = g;
                }
                break;
            }
            Err(e) => return Err(e),
        };
        if !terms.total.is_finite() || !all_finite(&grad) {
            divergence = Some(Divergence {
                iteration: it,
                reason: format!("objective {} or its gradient is not finite", terms.total),
            });
            if let Some(g) = last_good.take() {
                cand.raw = g;
            }
            break;
        }
        trace.push(terms.total);
        let raw_grad = relaxation.pullback(&x, &grad);
        last_good = Some(cand.raw.clone());
        opt.step(&mut cand.raw, &raw_grad);
        if !all_finite(&cand.raw) {
            cand.raw = last_good.take().expect("set above");
            divergence = Some(Divergence {
                iteration: it + 1,
                reason: "optimizer produced non-finite variables".into(),
            });
            break;
        }
    }

    let relaxed = cand.relaxed()?;
    let gme = problem
        .evaluate(&relaxed)
        .map(|t| t.matching)
        .map_err(|e| Error::Diverged {
            iteration: trace.len(),
            context: format!("final gradient matching error: {e}"),
        })?;
    Ok(ReconstructionResult {
        decoded: cand.decode()?,
        relaxed,
        iterations: trace.len(),
        loss_trace: trace,
        gme,
        wall_time_secs: start.elapsed().as_secs_f64(),
        seed,
        config_hash: config.hash(),
        divergence,
    })
}
