use serde::{Deserialize, Serialize};

use super::prior::{StatePrior, TransitionModel};
use crate::envs::EnvSpec;
use crate::error::{Error, Result};
use crate::frlcore::{
    record_td_loss, td_value_and_grad, GradientPacket, NetSnapshot, TdSetup, TransitionLayout,
};
use crate::numcore::{check_len, matching_loss_input_grad, squared_distance, tape::Tape, GradMode};

/// Regularizer weights: state prior α, reward range β, dynamics γ, overall λ.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RegWeights {
    pub alpha: f64,
    pub beta: f64,
    pub gamma_dyn: f64,
    pub lambda: f64,
}

impl Default for RegWeights {
    fn default() -> Self {
        RegWeights {
            alpha: 1.0,
            beta: 1.0,
            gamma_dyn: 1.0,
            lambda: 1.0,
        }
    }
}

impl RegWeights {
    /// Plain gradient matching.
    pub fn none() -> Self {
        RegWeights {
            alpha: 0.0,
            beta: 0.0,
            gamma_dyn: 0.0,
            lambda: 1.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let all = [self.alpha, self.beta, self.gamma_dyn, self.lambda];
        if all.iter().all(|w| *w >= 0.0 && w.is_finite()) {
            Ok(())
        } else {
            Err(Error::Config(format!(
                "regularizer weights must be non-negative: {self:?}"
            )))
        }
    }

    fn state(&self) -> f64 {
        self.lambda * self.alpha
    }
    fn reward(&self) -> f64 {
        self.lambda * self.beta
    }
    fn dynamics(&self) -> f64 {
        self.lambda * self.gamma_dyn
    }
}

/// `‖s̃ − μ_s‖²`
pub fn reg_state(s: &[f64], prior: &StatePrior) -> Result<f64> {
    check_len(prior.mu.len(), s.len(), "state")?;
    Ok(squared_distance(s, &prior.mu))
}

/// `ReLU(r̃ − r_max)² + ReLU(r_min − r̃)²`
pub fn reg_reward(r: f64, r_min: f64, r_max: f64) -> f64 {
    (r - r_max).max(0.0).powi(2) + (r_min - r).max(0.0).powi(2)
}

/// Derivative of [`reg_reward`] in `r`.
pub fn reg_reward_grad(r: f64, r_min: f64, r_max: f64) -> f64 {
    2.0 * (r - r_max).max(0.0) - 2.0 * (r_min - r).max(0.0)
}

/// `‖f(s̃, ã) − s̃'‖²`
pub fn reg_dynamics(s: &[f64], a: &[f64], s_next: &[f64], model: &TransitionModel) -> Result<f64> {
    let pred = model.predict(s, a)?;
    check_len(pred.len(), s_next.len(), "next state")?;
    Ok(squared_distance(&pred, s_next))
}

/// Value of each objective term for one candidate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ObjectiveTerms {
    pub matching: f64,
    /// Batch means of the unweighted regularizers.
    pub state: f64,
    pub reward: f64,
    pub dynamics: f64,
    pub total: f64,
}

/// Everything fixed during one inversion: the intercepted packet, the network
/// it was computed against, and the attacker's prior knowledge.
#[derive(Debug, Clone, Copy)]
pub struct AttackProblem<'a> {
    pub env: &'a EnvSpec,
    pub packet: &'a GradientPacket,
    pub snapshot: &'a NetSnapshot,
    pub weights: RegWeights,
    pub prior: Option<&'a StatePrior>,
    pub model: Option<&'a TransitionModel>,
}

impl<'a> AttackProblem<'a> {
    pub fn new(
        env: &'a EnvSpec,
        packet: &'a GradientPacket,
        snapshot: &'a NetSnapshot,
        weights: RegWeights,
        prior: Option<&'a StatePrior>,
        model: Option<&'a TransitionModel>,
    ) -> Result<Self> {
        packet.check_snapshot(snapshot)?;
        weights.validate()?;
        if weights.state() > 0.0 && prior.is_none() {
            return Err(Error::Config(
                "state regularizer enabled without a state prior".into(),
            ));
        }
        if weights.dynamics() > 0.0 && model.is_none() {
            return Err(Error::Config(
                "dynamics regularizer enabled without a transition model".into(),
            ));
        }
        if let Some(p) = prior {
            check_len(env.state_dim(), p.mu.len(), "state prior")?;
        }
        if let Some(m) = model {
            check_len(env.state_dim(), m.state_dim(), "transition model")?;
        }
        Ok(AttackProblem {
            env,
            packet,
            snapshot,
            weights,
            prior,
            model,
        })
    }

    pub fn setup(&self) -> TdSetup {
        TdSetup::for_env(self.env)
    }

    pub fn layout(&self) -> TransitionLayout {
        self.setup().layout()
    }

    pub fn with_weights(&self, weights: RegWeights) -> Result<Self> {
        Self::new(
            self.env,
            self.packet,
            self.snapshot,
            weights,
            self.prior,
            self.model,
        )
    }

    /// Regularizer means and their gradient with respect to the encoded batch.
    pub fn regularizers(&self, x: &[f64]) -> Result<(ObjectiveTerms, Vec<f64>)> {
        let layout = self.layout();
        let n = layout.batch_size(x)?;
        let w = layout.sample_width();
        let inv = 1.0 / n as f64;
        let (r_min, r_max) = (self.env.reward_min(), self.env.reward_max());
        let mut grad = vec![0.0; x.len()];
        let mut terms = ObjectiveTerms {
            matching: 0.0,
            state: 0.0,
            reward: 0.0,
            dynamics: 0.0,
            total: 0.0,
        };
        for i in 0..n {
            let v = layout.sample(x, i);
            let g = &mut grad[i * w..(i + 1) * w];
            if let Some(p) = self.prior.filter(|_| self.weights.state() > 0.0) {
                terms.state += inv * reg_state(v.s, p)?;
                let c = self.weights.state() * inv;
                for (k, (s, m)) in v.s.iter().zip(p.mu.iter()).enumerate() {
                    g[layout.s_range().start + k] += c * 2.0 * (s - m);
                }
            }
            if self.weights.reward() > 0.0 {
                terms.reward += inv * reg_reward(v.r, r_min, r_max);
                g[layout.r_index()] +=
                    self.weights.reward() * inv * reg_reward_grad(v.r, r_min, r_max);
            }
            if let Some(m) = self.model.filter(|_| self.weights.dynamics() > 0.0) {
                let mut input = v.s.to_vec();
                input.extend_from_slice(v.a);
                let cache = m.net.forward_cached(&input)?;
                let resid: Vec<f64> = cache
                    .output()
                    .iter()
                    .zip(v.s_next)
                    .map(|(f, s)| f - s)
                    .collect();
                terms.dynamics += inv * resid.iter().map(|e| e * e).sum::<f64>();
                let c = self.weights.dynamics() * inv;
                let seed: Vec<f64> = resid.iter().map(|e| 2.0 * c * e).collect();
                let (_, input_grad) = m.net.vjp(&cache, &seed)?;
                for (k, gi) in input_grad.iter().enumerate() {
                    g[k] += gi;
                }
                for (k, e) in resid.iter().enumerate() {
                    g[layout.s_next_range().start + k] -= 2.0 * c * e;
                }
            }
        }
        terms.total = self.weights.state() * terms.state
            + self.weights.reward() * terms.reward
            + self.weights.dynamics() * terms.dynamics;
        Ok((terms, grad))
    }

    /// All objective terms, with the matching term from the analytic gradient.
    pub fn evaluate(&self, x: &[f64]) -> Result<ObjectiveTerms> {
        let (_, g) = td_value_and_grad(self.snapshot, &self.setup(), x)?;
        let matching = squared_distance(&g, &self.packet.grad);
        let (mut terms, _) = self.regularizers(x)?;
        terms.matching = matching;
        terms.total += matching;
        Ok(terms)
    }

    /// Objective value and its gradient with respect to the encoded batch.
    pub fn value_and_grad(
        &self,
        x: &[f64],
        mode: GradMode,
        tape: &mut Tape,
    ) -> Result<(ObjectiveTerms, Vec<f64>)> {
        let setup = self.setup();
        let m = matching_loss_input_grad(
            &self.snapshot.online,
            x,
            &self.packet.grad,
            mode,
            tape,
            |tape, params, inputs| record_td_loss(tape, self.snapshot, &setup, params, inputs),
        )?;
        let (mut terms, mut grad) = self.regularizers(x)?;
        terms.matching = m.loss;
        terms.total += m.loss;
        for (g, mg) in grad.iter_mut().zip(&m.input_grad) {
            *g += mg;
        }
        Ok((terms, grad))
    }
}

/// `‖∇θL(x) − g‖² + λ(αR_s + βR_r + γR_f)` for an encoded candidate batch `x`.
pub fn total_objective(x: &[f64], problem: &AttackProblem<'_>) -> Result<f64> {
    Ok(problem.evaluate(x)?.total)
}
